//! Peak Information Kernel and the metrics built on it.
//!
//! Every bin is a potential peak located at its index. Instead of the
//! quadratic double sum per pair, each left-hand spectrum is smoothed once
//! with the Gaussian `exp(-d^2 / 8t)` (truncated where it drops below
//! 1e-17), after which a kernel value is a sparse dot product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};

const TAIL: f64 = 1e-17;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub t: f64,
    pub normalized: bool,
    pub epsilon: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            t: 8.0,
            normalized: true,
            epsilon: 1e-6,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(invalid!("kernel bandwidth t must be positive, got {}", self.t));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid!("sparsity epsilon must be non-negative"));
        }
        Ok(())
    }

    fn prefactor(&self) -> f64 {
        1.0 / (2.0 * (2.0 * std::f64::consts::PI * self.t).sqrt())
    }

    fn half_width(&self) -> usize {
        // exp(-d^2/8t) < TAIL  <=>  d > sqrt(8t ln(1/TAIL))
        (8.0 * self.t * (1.0 / TAIL).ln()).sqrt().ceil() as usize
    }

    fn weights(&self) -> Vec<f64> {
        (0..=self.half_width())
            .map(|d| (-((d * d) as f64) / (8.0 * self.t)).exp())
            .collect()
    }
}

/// Sparse bins and the smoothed profile of one spectrum.
struct Prepared {
    peaks: Vec<(usize, f64)>,
    smooth: Vec<f64>,
    self_k: f64,
}

fn sparse(x: &[f64], eps: f64) -> Vec<(usize, f64)> {
    x.iter()
        .enumerate()
        .filter(|(_, v)| **v > eps)
        .map(|(i, v)| (i, *v))
        .collect()
}

fn dot_sparse(peaks: &[(usize, f64)], smooth: &[f64]) -> f64 {
    peaks.iter().map(|&(i, v)| v * smooth[i]).sum()
}

fn prepare(x: &[f64], cfg: &KernelConfig, w: &[f64]) -> Prepared {
    let peaks = sparse(x, cfg.epsilon);
    let d = x.len();
    let hw = w.len() - 1;
    let mut smooth = vec![0.0; d];
    for &(i, v) in &peaks {
        let lo = i.saturating_sub(hw);
        let hi = (i + hw).min(d - 1);
        for (j, s) in smooth.iter_mut().enumerate().take(hi + 1).skip(lo) {
            *s += v * w[i.abs_diff(j)];
        }
    }
    let self_k = dot_sparse(&peaks, &smooth);
    Prepared { peaks, smooth, self_k }
}

fn finish(raw: f64, kaa: f64, kbb: f64, cfg: &KernelConfig, same: impl FnOnce() -> bool) -> f64 {
    if !cfg.normalized {
        return cfg.prefactor() * raw;
    }
    if kaa == 0.0 || kbb == 0.0 {
        // all-zero spectra: 1 only against themselves
        return if kaa == 0.0 && kbb == 0.0 && same() { 1.0 } else { 0.0 };
    }
    (raw / (kaa * kbb).sqrt()).clamp(0.0, 1.0)
}

fn check_dims<'a>(sets: impl IntoIterator<Item = &'a [f64]>) -> Result<usize> {
    let mut dim = None;
    for s in sets {
        match dim {
            None => dim = Some(s.len()),
            Some(d) if d != s.len() => {
                return Err(Error::Shape(format!("spectra of length {d} and {}", s.len())))
            }
            _ => {}
        }
    }
    Ok(dim.unwrap_or(0))
}

pub fn pike_kernel(a: &[f64], b: &[f64], cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    check_dims([a, b])?;
    if a.is_empty() {
        return Err(invalid!("empty spectrum"));
    }
    let w = cfg.weights();
    let pa = prepare(a, cfg, &w);
    let same = a == b;
    let pb = if same { None } else { Some(prepare(b, cfg, &w)) };
    let (raw, kbb) = match &pb {
        None => (pa.self_k, pa.self_k),
        Some(pb) => (dot_sparse(&pb.peaks, &pa.smooth), pb.self_k),
    };
    Ok(finish(raw, pa.self_k, kbb, cfg, || same))
}

/// `|X| × |Y|` kernel matrix, rows computed in parallel.
pub fn pike_gram<X: AsRef<[f64]> + Sync, Y: AsRef<[f64]> + Sync>(
    xs: &[X],
    ys: &[Y],
    cfg: &KernelConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    check_dims(xs.iter().map(|x| x.as_ref()).chain(ys.iter().map(|y| y.as_ref())))?;
    let w = cfg.weights();
    let px: Vec<Prepared> = xs.par_iter().map(|x| prepare(x.as_ref(), cfg, &w)).collect();
    let py: Vec<Prepared> = ys.par_iter().map(|y| prepare(y.as_ref(), cfg, &w)).collect();
    Ok(px
        .par_iter()
        .zip(xs.par_iter())
        .map(|(a, xa)| {
            py.iter()
                .zip(ys.iter())
                .map(|(b, yb)| {
                    let raw = dot_sparse(&b.peaks, &a.smooth);
                    finish(raw, a.self_k, b.self_k, cfg, || xa.as_ref() == yb.as_ref())
                })
                .collect()
        })
        .collect())
}

/// Symmetric Gram of one set; the upper triangle is mirrored so the result
/// is exactly symmetric.
pub fn pike_gram_sym<X: AsRef<[f64]> + Sync>(xs: &[X], cfg: &KernelConfig) -> Result<Vec<Vec<f64>>> {
    let mut g = pike_gram(xs, xs, cfg)?;
    for i in 0..g.len() {
        for j in 0..i {
            g[i][j] = g[j][i];
        }
    }
    Ok(g)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn offdiag_mean(g: &[Vec<f64>]) -> f64 {
    let n = g.len();
    let mut s = 0.0;
    for (i, row) in g.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (n * (n - 1)) as f64
}

/// Unbiased squared MMD between a real and a generated set.
pub fn mmd2<X: AsRef<[f64]> + Sync, Y: AsRef<[f64]> + Sync>(real: &[X], generated: &[Y], cfg: &KernelConfig) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(invalid!(
            "MMD needs at least 2 spectra per set, got {} and {}",
            real.len(),
            generated.len()
        ));
    }
    let kxx = pike_gram_sym(real, cfg)?;
    let kyy = pike_gram_sym(generated, cfg)?;
    let kxy = pike_gram(real, generated, cfg)?;
    let cross = kxy.iter().flatten().sum::<f64>() / (real.len() * generated.len()) as f64;
    Ok(offdiag_mean(&kxx) + offdiag_mean(&kyy) - 2.0 * cross)
}

fn require_normalized(cfg: &KernelConfig, what: &str) -> Result<()> {
    if !cfg.normalized {
        return Err(invalid!("{what} needs the normalized kernel"));
    }
    Ok(())
}

/// Mean and std of `1 - K̂` over unordered pairs of one set.
pub fn class_distance<X: AsRef<[f64]> + Sync>(set: &[X], cfg: &KernelConfig) -> Result<(f64, f64)> {
    require_normalized(cfg, "class distance")?;
    if set.len() < 2 {
        return Err(invalid!("class distance needs at least 2 spectra, got {}", set.len()));
    }
    let g = pike_gram_sym(set, cfg)?;
    let d: Vec<f64> = (0..set.len())
        .flat_map(|i| ((i + 1)..set.len()).map(move |j| (i, j)))
        .map(|(i, j)| 1.0 - g[i][j])
        .collect();
    Ok(mean_std(&d))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourDistance {
    pub mean: f64,
    pub std: f64,
    pub distances: Vec<f64>,
    pub nearest: Vec<usize>,
}

/// For each generated spectrum, `1 - max_n K̂` against the training set.
/// With `exclude_self`, `generated` is taken to be `train` itself and the
/// diagonal pairs are skipped.
pub fn neighbour_distance<X: AsRef<[f64]> + Sync, Y: AsRef<[f64]> + Sync>(
    generated: &[X],
    train: &[Y],
    cfg: &KernelConfig,
    exclude_self: bool,
) -> Result<NeighbourDistance> {
    require_normalized(cfg, "neighbour distance")?;
    if generated.is_empty() || train.is_empty() {
        return Err(invalid!("neighbour distance needs nonempty sets"));
    }
    if exclude_self && (generated.len() != train.len() || train.len() < 2) {
        return Err(invalid!("exclude_self needs the training set against itself (at least 2 spectra)"));
    }
    let g = pike_gram(generated, train, cfg)?;
    let mut distances = Vec::with_capacity(g.len());
    let mut nearest = Vec::with_capacity(g.len());
    for (m, row) in g.iter().enumerate() {
        let (best, val) = row
            .iter()
            .enumerate()
            .filter(|(n, _)| !(exclude_self && *n == m))
            .fold((0, f64::NEG_INFINITY), |acc, (n, &v)| if v > acc.1 { (n, v) } else { acc });
        distances.push(1.0 - val);
        nearest.push(best);
    }
    let (mean, std) = mean_std(&distances);
    Ok(NeighbourDistance {
        mean,
        std,
        distances,
        nearest,
    })
}

/// Mean and std of `K̂` over all generated × real pairs.
pub fn pike_all<X: AsRef<[f64]> + Sync, Y: AsRef<[f64]> + Sync>(
    generated: &[X],
    real: &[Y],
    cfg: &KernelConfig,
) -> Result<(f64, f64)> {
    if generated.is_empty() || real.is_empty() {
        return Err(invalid!("PIKE-all needs nonempty sets"));
    }
    let g = pike_gram(generated, real, cfg)?;
    let all: Vec<f64> = g.into_iter().flatten().collect();
    Ok(mean_std(&all))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub class: String,
    pub pike_all_mean: f64,
    pub pike_all_std: f64,
    pub mmd2: f64,
    pub cd_mean: f64,
    pub cd_std: f64,
    pub nd_mean: f64,
    pub nd_std: f64,
}

impl MetricRow {
    fn values(&self) -> [f64; 7] {
        [
            self.pike_all_mean,
            self.pike_all_std,
            self.mmd2,
            self.cd_mean,
            self.cd_std,
            self.nd_mean,
            self.nd_std,
        ]
    }

    fn from_values(class: &str, v: [f64; 7]) -> Self {
        MetricRow {
            class: class.to_string(),
            pike_all_mean: v[0],
            pike_all_std: v[1],
            mmd2: v[2],
            cd_mean: v[3],
            cd_std: v[4],
            nd_mean: v[5],
            nd_std: v[6],
        }
    }
}

/// Per-class metrics plus the mean and std of each column across classes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub std: MetricRow,
}

impl MetricReport {
    fn from_rows(rows: Vec<MetricRow>) -> Self {
        let mut mean = [0.0; 7];
        let mut std = [0.0; 7];
        for k in 0..7 {
            let col: Vec<f64> = rows.iter().map(|r| r.values()[k]).collect();
            (mean[k], std[k]) = mean_std(&col);
        }
        MetricReport {
            rows,
            mean: MetricRow::from_values("__mean__", mean),
            std: MetricRow::from_values("__std__", std),
        }
    }

    pub fn row(&self, class: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// Compares generated spectra with real ones class by class (matched by
/// name). Nearest neighbours are searched among the real spectra of the
/// same class.
pub fn metric_report(real: &LabeledCorpus, generated: &LabeledCorpus, cfg: &KernelConfig) -> Result<MetricReport> {
    if generated.is_empty() {
        return Err(invalid!("generated corpus is empty"));
    }
    let gen_counts = generated.class_counts();
    let mut rows = Vec::new();
    for (gc, name) in generated.vocab().iter().enumerate() {
        if gen_counts[gc] == 0 {
            continue;
        }
        let rc = real.class_index(name)?;
        let reals = real.class_rows(rc);
        if reals.is_empty() {
            return Err(Error::unknown_class(name.clone(), real.vocab()));
        }
        let gens = generated.class_rows(gc);
        let (pa_m, pa_s) = pike_all(&gens, &reals, cfg)?;
        let mmd = mmd2(&reals, &gens, cfg)?;
        let (cd_m, cd_s) = class_distance(&gens, cfg)?;
        let nd = neighbour_distance(&gens, &reals, cfg, false)?;
        rows.push(MetricRow {
            class: name.clone(),
            pike_all_mean: pa_m,
            pike_all_std: pa_s,
            mmd2: mmd,
            cd_mean: cd_m,
            cd_std: cd_s,
            nd_mean: nd.mean,
            nd_std: nd.std,
        });
    }
    Ok(MetricReport::from_rows(rows))
}

/// Real-versus-real reference row per class: PIKE-all and CD within the
/// real set, ND with self-matches excluded, MMD² fixed at 0 by definition.
pub fn baseline_report(real: &LabeledCorpus, cfg: &KernelConfig) -> Result<MetricReport> {
    let counts = real.class_counts();
    let mut rows = Vec::new();
    for (c, name) in real.vocab().iter().enumerate() {
        if counts[c] == 0 {
            continue;
        }
        let reals = real.class_rows(c);
        let (pa_m, pa_s) = pike_all(&reals, &reals, cfg)?;
        let (cd_m, cd_s) = class_distance(&reals, cfg)?;
        let nd = neighbour_distance(&reals, &reals, cfg, true)?;
        rows.push(MetricRow {
            class: name.clone(),
            pike_all_mean: pa_m,
            pike_all_std: pa_s,
            mmd2: 0.0,
            cd_mean: cd_m,
            cd_std: cd_s,
            nd_mean: nd.mean,
            nd_std: nd.std,
        });
    }
    if rows.is_empty() {
        return Err(invalid!("real corpus is empty"));
    }
    Ok(MetricReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_toy_corpus, ToyCorpusSpec};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Direct double sum over bins above epsilon, no truncation.
    fn naive(a: &[f64], b: &[f64], cfg: &KernelConfig) -> f64 {
        let raw = |x: &[f64], y: &[f64]| {
            let mut s = 0.0;
            for (i, &u) in x.iter().enumerate() {
                if u <= cfg.epsilon {
                    continue;
                }
                for (j, &v) in y.iter().enumerate() {
                    if v <= cfg.epsilon {
                        continue;
                    }
                    let d = i as f64 - j as f64;
                    s += u * v * (-d * d / (8.0 * cfg.t)).exp();
                }
            }
            s / (2.0 * (2.0 * std::f64::consts::PI * cfg.t).sqrt())
        };
        if cfg.normalized {
            let (kaa, kbb) = (raw(a, a), raw(b, b));
            if kaa == 0.0 || kbb == 0.0 {
                return if a == b { 1.0 } else { 0.0 };
            }
            raw(a, b) / (kaa * kbb).sqrt()
        } else {
            raw(a, b)
        }
    }

    fn spike(d: usize, at: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[at] = 1.0;
        v
    }

    #[test]
    fn self_similarity_is_one() {
        let a = vec![0.0, 0.3, 1.0, 0.0, 0.2];
        assert_eq!(pike_kernel(&a, &a, &KernelConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn four_bins_apart() {
        let cfg = KernelConfig::default();
        let k = pike_kernel(&spike(40, 10), &spike(40, 14), &cfg).unwrap();
        assert_abs_diff_eq!(k, (-16.0f64 / 64.0).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(k, 0.778_800_783_071_404_9, epsilon = 1e-12);
        assert_abs_diff_eq!(k, naive(&spike(40, 10), &spike(40, 14), &cfg), epsilon = 1e-12);
    }

    #[test]
    fn far_peaks_vanish() {
        let k = pike_kernel(&spike(300, 10), &spike(300, 110), &KernelConfig::default()).unwrap();
        assert!(k < 1e-60);
    }

    #[test]
    fn zero_spectra() {
        let cfg = KernelConfig::default();
        let z = vec![0.0; 8];
        assert_eq!(pike_kernel(&z, &z, &cfg).unwrap(), 1.0);
        assert_eq!(pike_kernel(&z, &spike(8, 2), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(pike_kernel(&[1.0, 0.0], &[1.0], &KernelConfig::default()).is_err());
    }

    #[test]
    fn unnormalized_matches_naive() {
        let cfg = KernelConfig {
            normalized: false,
            ..Default::default()
        };
        let a = vec![0.2, 0.0, 1.0, 0.5, 0.0, 0.0, 0.7];
        let b = vec![0.0, 0.9, 0.1, 0.0, 0.0, 1.0, 0.0];
        assert_abs_diff_eq!(pike_kernel(&a, &b, &cfg).unwrap(), naive(&a, &b, &cfg), epsilon = 1e-12);
    }

    #[test]
    fn gram_matches_pairwise_loop() {
        let corpus = make_toy_corpus(&ToyCorpusSpec {
            per_class: 6,
            bins: 60,
            ..Default::default()
        })
        .unwrap();
        let xs = &corpus.spectra()[..10];
        let ys = &corpus.spectra()[8..18];
        let cfg = KernelConfig::default();
        let g = pike_gram(xs, ys, &cfg).unwrap();
        for (i, x) in xs.iter().enumerate() {
            for (j, y) in ys.iter().enumerate() {
                assert_abs_diff_eq!(g[i][j], naive(x, y, &cfg), epsilon = 1e-12);
            }
        }
        let s = pike_gram_sym(xs, &cfg).unwrap();
        for i in 0..xs.len() {
            assert_eq!(s[i][i], 1.0);
            for j in 0..xs.len() {
                assert_eq!(s[i][j], s[j][i]);
            }
        }
    }

    #[test]
    fn gram_speed_200_sparse() {
        let mut rng = crate::rng::stream(1, "gram-speed");
        use rand::Rng as _;
        let d = 6000;
        let mk = |rng: &mut crate::rng::Rng| {
            let mut v = vec![0.0; d];
            for _ in 0..30 {
                v[rng.random_range(0..d)] = rng.random_range(0.01..1.0);
            }
            v
        };
        let xs: Vec<Vec<f64>> = (0..200).map(|_| mk(&mut rng)).collect();
        let start = std::time::Instant::now();
        let g = pike_gram(&xs, &xs, &KernelConfig::default()).unwrap();
        assert_eq!(g.len(), 200);
        assert!(start.elapsed().as_secs_f64() < 1.0, "{:?}", start.elapsed());
    }

    #[test]
    fn mmd_of_identical_triples_is_zero() {
        let x = vec![0.1, 0.0, 1.0, 0.4];
        let set = vec![x.clone(), x.clone(), x];
        assert_eq!(mmd2(&set, &set, &KernelConfig::default()).unwrap(), 0.0);
        assert!(mmd2(&set[..1], &set, &KernelConfig::default()).is_err());
    }

    #[test]
    fn mmd_cross_term_vanishes_for_far_populations() {
        let cfg = KernelConfig::default();
        let a: Vec<Vec<f64>> = (0..3).map(|k| spike(400, 50 + k)).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|k| spike(400, 150 + k)).collect();
        let cross = pike_gram(&a, &b, &cfg).unwrap();
        assert!(cross.iter().flatten().all(|v| *v < 1e-12));
        let m = mmd2(&a, &b, &cfg).unwrap();
        let within = offdiag_mean(&pike_gram(&a, &a, &cfg).unwrap()) + offdiag_mean(&pike_gram(&b, &b, &cfg).unwrap());
        assert_abs_diff_eq!(m, within, epsilon = 1e-12);
    }

    #[test]
    fn class_and_neighbour_distance_examples() {
        let cfg = KernelConfig::default();
        let pair = vec![spike(30, 5), spike(30, 9)];
        let (m, s) = class_distance(&pair, &cfg).unwrap();
        assert_abs_diff_eq!(m, 1.0 - (-0.25f64).exp(), epsilon = 1e-12);
        assert_eq!(s, 0.0);
        let same = vec![spike(30, 5); 4];
        assert_eq!(class_distance(&same, &cfg).unwrap(), (0.0, 0.0));
        let raw = KernelConfig {
            normalized: false,
            ..cfg
        };
        assert!(class_distance(&pair, &raw).is_err());

        let nd = neighbour_distance(&pair[..1], &pair[1..], &cfg, false).unwrap();
        assert_abs_diff_eq!(nd.mean, 0.221_199_216_928_595_1, epsilon = 1e-12);
        let subset = neighbour_distance(&pair[..1], &pair, &cfg, false).unwrap();
        assert_eq!(subset.mean, 0.0);
        assert_eq!(subset.nearest, vec![0]);
        let excl = neighbour_distance(&pair, &pair, &cfg, true).unwrap();
        assert_eq!(excl.nearest, vec![1, 0]);
        assert_abs_diff_eq!(excl.mean, 0.221_199_216_928_595_1, epsilon = 1e-12);
    }

    #[test]
    fn pike_all_singleton() {
        let x = vec![spike(10, 3)];
        assert_eq!(pike_all(&x, &x, &KernelConfig::default()).unwrap(), (1.0, 0.0));
    }

    fn toy() -> LabeledCorpus {
        make_toy_corpus(&ToyCorpusSpec {
            num_classes: 3,
            per_class: 20,
            bins: 120,
            peaks_per_class: 5,
            position_jitter: 1.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn toy_classes_are_separable_by_pike() {
        let c = toy();
        let cfg = KernelConfig::default();
        let g = pike_gram_sym(c.spectra(), &cfg).unwrap();
        let (mut within, mut between) = (vec![], vec![]);
        for i in 0..c.len() {
            for j in (i + 1)..c.len() {
                if c.labels()[i] == c.labels()[j] {
                    within.push(g[i][j]);
                } else {
                    between.push(g[i][j]);
                }
            }
        }
        assert!(mean_std(&within).0 > mean_std(&between).0);

        let a = c.class_rows(0);
        let b = c.class_rows(1);
        let same = mmd2(&a[..10], &a[10..], &cfg).unwrap();
        let diff = mmd2(&a[..10], &b[..10], &cfg).unwrap();
        assert!(same.abs() < diff);
        assert!(pike_all(&a[..10], &a[10..], &cfg).unwrap().0 > pike_all(&a[..10], &b, &cfg).unwrap().0);
    }

    #[test]
    fn report_on_itself() {
        let c = toy();
        let cfg = KernelConfig::default();
        let r = metric_report(&c, &c, &cfg).unwrap();
        let base = baseline_report(&c, &cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        for (row, b) in r.rows.iter().zip(&base.rows) {
            assert_eq!(row.nd_mean, 0.0);
            assert_eq!(row.cd_mean, b.cd_mean);
            assert_eq!(b.mmd2, 0.0);
        }
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class,pike_all_mean,pike_all_std,mmd2,cd_mean,cd_std,nd_mean,nd_std\n"));
        assert!(text.lines().last().unwrap().starts_with("__mean__,"));
        let empty = LabeledCorpus::empty(c.vocab().to_vec(), c.dim());
        assert!(metric_report(&c, &empty, &cfg).is_err());
    }

    #[test]
    fn report_matches_straight_line_script() {
        let c = toy();
        let cfg = KernelConfig::default();
        let gen = crate::corpus::stratified_subset(&c, &crate::corpus::counts_map([("species_1", 6), ("species_2", 5)]), 4).unwrap();
        let r = metric_report(&c, &gen, &cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            let gi = gen.class_index(&row.class).unwrap();
            let g = gen.class_rows(gi);
            let x = c.class_rows(c.class_index(&row.class).unwrap());
            let k = |a: &[f64], b: &[f64]| naive(a, b, &cfg);
            let mut all = vec![];
            for a in &g {
                for b in &x {
                    all.push(k(a, b));
                }
            }
            let (pm, ps) = mean_std(&all);
            let (n, m) = (x.len() as f64, g.len() as f64);
            let mut sxx = 0.0;
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if i != j {
                        sxx += k(x[i], x[j]);
                    }
                }
            }
            let mut syy = 0.0;
            for i in 0..g.len() {
                for j in 0..g.len() {
                    if i != j {
                        syy += k(g[i], g[j]);
                    }
                }
            }
            let mmd = sxx / (n * (n - 1.0)) + syy / (m * (m - 1.0)) - 2.0 * all.iter().sum::<f64>() / (n * m);
            let mut cd = vec![];
            for i in 0..g.len() {
                for j in (i + 1)..g.len() {
                    cd.push(1.0 - k(g[i], g[j]));
                }
            }
            let nd: Vec<f64> = g
                .iter()
                .map(|a| 1.0 - x.iter().map(|b| k(a, b)).fold(f64::MIN, f64::max))
                .collect();
            let tol = 1e-10;
            assert_abs_diff_eq!(row.pike_all_mean, pm, epsilon = tol);
            assert_abs_diff_eq!(row.pike_all_std, ps, epsilon = tol);
            assert_abs_diff_eq!(row.mmd2, mmd, epsilon = tol);
            assert_abs_diff_eq!(row.cd_mean, mean_std(&cd).0, epsilon = tol);
            assert_abs_diff_eq!(row.cd_std, mean_std(&cd).1, epsilon = tol);
            assert_abs_diff_eq!(row.nd_mean, mean_std(&nd).0, epsilon = tol);
            assert_abs_diff_eq!(row.nd_std, mean_std(&nd).1, epsilon = tol);
        }
    }

    proptest! {
        #[test]
        fn single_peak_closed_form(delta in 0usize..40, t in 0.5f64..30.0) {
            let cfg = KernelConfig { t, ..Default::default() };
            let k = pike_kernel(&spike(100, 20), &spike(100, 20 + delta), &cfg).unwrap();
            let want = (-((delta * delta) as f64) / (8.0 * t)).exp();
            prop_assert!((k - want).abs() < 1e-9 || (want < 1e-17 && k < 1e-16));
        }

        #[test]
        fn monotone_in_separation(d1 in 0usize..30, extra in 0usize..30) {
            let cfg = KernelConfig::default();
            let k1 = pike_kernel(&spike(80, 5), &spike(80, 5 + d1), &cfg).unwrap();
            let k2 = pike_kernel(&spike(80, 5), &spike(80, 5 + d1 + extra), &cfg).unwrap();
            prop_assert!(k2 <= k1);
        }

        #[test]
        fn symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 24), b in proptest::collection::vec(0.0f64..1.0, 24)) {
            let cfg = KernelConfig::default();
            let ab = pike_kernel(&a, &b, &cfg).unwrap();
            let ba = pike_kernel(&b, &a, &cfg).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!((ab - naive(&a, &b, &cfg)).abs() < 1e-9);
        }
    }
}
