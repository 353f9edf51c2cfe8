//! Labeled spectrum corpora: CSV interchange, stratified sampling and the
//! parametric toy-spectrum generator used for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{normal, stream};

pub const DEFAULT_MZ_MIN: f64 = 2000.0;
pub const DEFAULT_BIN_WIDTH: f64 = 3.0;

/// `N × D` matrix of `[0, 1]` spectra with species labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    spectra: Vec<Vec<f64>>,
    labels: Vec<usize>,
    vocab: Vec<String>,
    dim: usize,
    pub mz_min: f64,
    pub bin_width: f64,
}

fn check_row(row: &[f64]) -> Option<(usize, f64)> {
    row.iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
        .map(|(i, v)| (i, *v))
}

impl LabeledCorpus {
    pub fn new(spectra: Vec<Vec<f64>>, labels: Vec<usize>, vocab: Vec<String>, dim: usize) -> Result<Self> {
        if spectra.len() != labels.len() {
            return Err(invalid!("{} spectra but {} labels", spectra.len(), labels.len()));
        }
        for (i, (row, &y)) in spectra.iter().zip(&labels).enumerate() {
            if row.len() != dim {
                return Err(invalid!("row {i} has {} bins, expected {dim}", row.len()));
            }
            if y >= vocab.len() {
                return Err(invalid!("row {i} label {y} outside vocabulary of {}", vocab.len()));
            }
            if let Some((j, v)) = check_row(row) {
                return Err(invalid!("row {i} bin {j} value {v} outside [0, 1]"));
            }
        }
        let mut seen = vocab.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != vocab.len() {
            return Err(invalid!("duplicate class names in vocabulary"));
        }
        Ok(LabeledCorpus {
            spectra,
            labels,
            vocab,
            dim,
            mz_min: DEFAULT_MZ_MIN,
            bin_width: DEFAULT_BIN_WIDTH,
        })
    }

    pub fn empty(vocab: Vec<String>, dim: usize) -> Self {
        LabeledCorpus::new(vec![], vec![], vocab, dim).expect("empty corpus is valid")
    }

    /// Builds a corpus from class names, assigning label indices in
    /// first-appearance order.
    pub fn from_named(rows: Vec<(String, Vec<f64>)>, dim: usize) -> Result<Self> {
        let mut vocab: Vec<String> = Vec::new();
        let mut spectra = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (name, row) in rows {
            let idx = match vocab.iter().position(|v| *v == name) {
                Some(i) => i,
                None => {
                    vocab.push(name);
                    vocab.len() - 1
                }
            };
            labels.push(idx);
            spectra.push(row);
        }
        LabeledCorpus::new(spectra, labels, vocab, dim)
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spectra(&self) -> &[Vec<f64>] {
        &self.spectra
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.vocab
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::unknown_class(name, &self.vocab))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.vocab.len()];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Rows belonging to class `c`.
    pub fn class_rows(&self, c: usize) -> Vec<&[f64]> {
        self.spectra
            .iter()
            .zip(&self.labels)
            .filter(|(_, y)| **y == c)
            .map(|(s, _)| s.as_slice())
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledCorpus {
        LabeledCorpus {
            spectra: indices.iter().map(|&i| self.spectra[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            vocab: self.vocab.clone(),
            dim: self.dim,
            mz_min: self.mz_min,
            bin_width: self.bin_width,
        }
    }

    /// Appends rows from a corpus with the identical vocabulary and width.
    pub fn extend(&mut self, other: &LabeledCorpus) -> Result<()> {
        if other.vocab != self.vocab {
            return Err(invalid!(
                "cannot merge corpora with different vocabularies ({:?} vs {:?})",
                self.vocab,
                other.vocab
            ));
        }
        if other.dim != self.dim {
            return Err(invalid!("cannot merge {}-bin and {}-bin corpora", self.dim, other.dim));
        }
        self.spectra.extend(other.spectra.iter().cloned());
        self.labels.extend(&other.labels);
        Ok(())
    }

    pub fn push(&mut self, spectrum: Vec<f64>, label: usize) -> Result<()> {
        if spectrum.len() != self.dim || label >= self.vocab.len() {
            return Err(invalid!("row does not fit corpus"));
        }
        if let Some((j, v)) = check_row(&spectrum) {
            return Err(invalid!("bin {j} value {v} outside [0, 1]"));
        }
        self.spectra.push(spectrum);
        self.labels.push(label);
        Ok(())
    }

    /// Relabels into `vocab` by class name. Every class of `self` must exist
    /// in `vocab`.
    pub fn align_to(&self, vocab: &[String]) -> Result<LabeledCorpus> {
        let map: Vec<usize> = self
            .vocab
            .iter()
            .map(|name| {
                vocab
                    .iter()
                    .position(|v| v == name)
                    .ok_or_else(|| Error::unknown_class(name.clone(), vocab))
            })
            .collect::<Result<_>>()?;
        Ok(LabeledCorpus {
            spectra: self.spectra.clone(),
            labels: self.labels.iter().map(|&y| map[y]).collect(),
            vocab: vocab.to_vec(),
            dim: self.dim,
            mz_min: self.mz_min,
            bin_width: self.bin_width,
        })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().from_writer(out);
        let mut header = Vec::with_capacity(self.dim + 1);
        header.push("label".to_string());
        header.extend((0..self.dim).map(|j| format!("bin_{j}")));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.dim + 1);
        for (row, &y) in self.spectra.iter().zip(&self.labels) {
            rec.clear();
            rec.push(self.vocab[y].clone());
            rec.extend(row.iter().map(|v| format_sig9(*v)));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), path)
    }

    pub fn read_csv<R: std::io::Read>(input: R, origin: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(perr(1, "missing header".into())),
        };
        if header.get(0) != Some("label") {
            return Err(perr(1, "first column must be `label`".into()));
        }
        for (j, name) in header.iter().skip(1).enumerate() {
            if name != format!("bin_{j}") {
                return Err(perr(1, format!("unexpected column `{name}`, expected `bin_{j}`")));
            }
        }
        let dim = header.len() - 1;
        let mut rows = Vec::new();
        for (i, rec) in records.enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != dim + 1 {
                return Err(perr(line, format!("row has {} fields, header has {}", rec.len(), dim + 1)));
            }
            let name = rec[0].to_string();
            let mut row = Vec::with_capacity(dim);
            for (j, field) in rec.iter().skip(1).enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| perr(line, format!("bin_{j}: not a number `{field}`")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(perr(line, format!("bin_{j}: value {v} outside [0, 1]")));
                }
                row.push(v);
            }
            rows.push((name, row));
        }
        LabeledCorpus::from_named(rows, dim)
    }
}

/// Decimal rendering with 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (8 - exp).max(0) as usize;
    let mut s = format!("{:.*}", decimals, v);
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

/// Parameters of the synthetic multi-class spectrum generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub bins: usize,
    pub peaks_per_class: usize,
    /// Standard deviation of peak position jitter, in bins.
    #[serde(default)]
    pub position_jitter: f64,
    /// Standard deviation of a per-spectrum shift applied to every peak
    /// (calibration drift), in bins.
    #[serde(default)]
    pub drift: f64,
    /// Relative standard deviation of peak intensities.
    #[serde(default)]
    pub intensity_jitter: f64,
    /// Standard deviation of additive background noise (pre-normalization).
    #[serde(default)]
    pub noise: f64,
    /// Peaks common to every class, drawn before the class templates.
    #[serde(default)]
    pub shared_peaks: usize,
    /// Class names in label order; defaults to `species_<i>`.
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            num_classes: 3,
            per_class: 300,
            bins: 200,
            peaks_per_class: 5,
            position_jitter: 0.5,
            drift: 2.0,
            intensity_jitter: 0.1,
            noise: 0.01,
            shared_peaks: 0,
            class_names: vec![],
            seed: 17,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.peaks_per_class == 0 {
            return Err(invalid!("peaks_per_class must be at least 1"));
        }
        if self.bins < 10 {
            return Err(invalid!("toy corpora need at least 10 bins"));
        }
        if self.num_classes == 0 {
            return Err(invalid!("num_classes must be at least 1"));
        }
        if !(self.position_jitter >= 0.0 && self.drift >= 0.0 && self.intensity_jitter >= 0.0 && self.noise >= 0.0) {
            return Err(invalid!("jitters and noise must be non-negative"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(invalid!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            (0..self.num_classes).map(|i| format!("species_{i}")).collect()
        } else {
            self.class_names.clone()
        }
    }
}

#[derive(Clone, Debug)]
struct PeakTemplate {
    positions: Vec<f64>,
    heights: Vec<f64>,
}

fn draw_template(n: usize, bins: usize, rng: &mut crate::rng::Rng) -> PeakTemplate {
    let margin = 2.min(bins / 4);
    let positions = (0..n)
        .map(|_| rng.random_range(margin..bins - margin) as f64)
        .collect();
    let heights = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    PeakTemplate { positions, heights }
}

/// Generates a seeded corpus: each class has a fixed random peak template,
/// each sample jitters positions (rounded Gaussian) and heights (relative
/// Gaussian), adds background noise, clips at zero and max-normalizes.
pub fn make_toy_corpus(spec: &ToyCorpusSpec) -> Result<LabeledCorpus> {
    spec.validate()?;
    let d = spec.bins;
    let mut trng = stream(spec.seed, "toy-templates");
    let shared = draw_template(spec.shared_peaks, d, &mut trng);
    let templates: Vec<PeakTemplate> = (0..spec.num_classes)
        .map(|_| {
            let own = draw_template(spec.peaks_per_class, d, &mut trng);
            PeakTemplate {
                positions: shared.positions.iter().chain(&own.positions).cloned().collect(),
                heights: shared.heights.iter().chain(&own.heights).cloned().collect(),
            }
        })
        .collect();

    let mut srng = stream(spec.seed, "toy-samples");
    let mut spectra = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut labels = Vec::with_capacity(spectra.capacity());
    for (c, tpl) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut row = vec![0.0; d];
            let shift = if spec.drift > 0.0 { spec.drift * normal(&mut srng) } else { 0.0 };
            for (p, h) in tpl.positions.iter().zip(&tpl.heights) {
                let pos = (p + shift + spec.position_jitter * normal(&mut srng)).round();
                let pos = pos.clamp(0.0, (d - 1) as f64) as usize;
                let height = h * (1.0 + spec.intensity_jitter * normal(&mut srng)).max(0.0);
                row[pos] += height;
            }
            if spec.noise > 0.0 {
                for v in &mut row {
                    *v += spec.noise * normal(&mut srng);
                }
            }
            for v in &mut row {
                *v = v.max(0.0);
            }
            let max = row.iter().cloned().fold(0.0, f64::max);
            if max > 0.0 {
                for v in &mut row {
                    *v /= max;
                }
            }
            spectra.push(row);
            labels.push(c);
        }
    }
    LabeledCorpus::new(spectra, labels, spec.vocab(), d)
}

/// Uniform sampling without replacement per class. Classes missing from
/// `counts` contribute nothing; the vocabulary is kept intact.
pub fn stratified_subset(corpus: &LabeledCorpus, counts: &BTreeMap<String, usize>, seed: u64) -> Result<LabeledCorpus> {
    let mut rng = stream(seed, "stratified-subset");
    let mut chosen = Vec::new();
    for (c, name) in corpus.vocab().iter().enumerate() {
        let want = counts.get(name).copied().unwrap_or(0);
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.labels[i] == c).collect();
        if want > idx.len() {
            return Err(invalid!(
                "class `{name}` has {} samples, {want} requested",
                idx.len()
            ));
        }
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..want]);
    }
    for name in counts.keys() {
        corpus.class_index(name)?;
    }
    chosen.sort_unstable();
    Ok(corpus.select(&chosen))
}

/// Per-class random split into `(train, val, test)` by fractions of each
/// class; the test split takes the remainder.
pub fn split_stratified(
    corpus: &LabeledCorpus,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(invalid!("invalid split fractions {train_frac}/{val_frac}"));
    }
    let mut rng = stream(seed, "split");
    let (mut tr, mut va, mut te) = (vec![], vec![], vec![]);
    for c in 0..corpus.num_classes() {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_tr = (n as f64 * train_frac).round() as usize;
        let n_va = ((n as f64 * val_frac).round() as usize).min(n - n_tr);
        tr.extend_from_slice(&idx[..n_tr]);
        va.extend_from_slice(&idx[n_tr..n_tr + n_va]);
        te.extend_from_slice(&idx[n_tr + n_va..]);
    }
    for v in [&mut tr, &mut va, &mut te] {
        v.sort_unstable();
    }
    Ok((corpus.select(&tr), corpus.select(&va), corpus.select(&te)))
}

/// Convenience: `{class name: count}` from pairs.
pub fn counts_map<S: Into<String>>(pairs: impl IntoIterator<Item = (S, usize)>) -> BTreeMap<String, usize> {
    pairs.into_iter().map(|(k, v)| (k.into(), v)).collect()
}
