//! MLP species classifier, detection-rate reports and the two downstream
//! experiments: training on synthetic instead of real spectra, and topping
//! up minority classes with synthetic spectra.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};
use crate::maldivae::vocab_dim;
use crate::rng::stream;
use crate::tensor::{forward_seq, AdamConfig, AdamState, Array, Graph, Init, Layer, LayerSpec, Mode, ModelFile, ParamStore, Var};
use crate::train::{check_splits, ensure_finite, gather, shuffled_batches, ConditionalGenerator, EarlyStopping, Progress};

pub const MODEL_KIND: &str = "classifier";
pub const MACRO_ROW: &str = "__macro__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![256, 32],
            lr: 1e-3,
            batch: 128,
            max_epochs: 100,
            patience: 10,
            seed: 17,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.batch == 0 {
            return Err(invalid!("classifier needs positive hidden sizes and batch"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    vocab: Vec<String>,
    dim: usize,
    store: ParamStore,
    layers: Vec<Layer>,
    pub history: Vec<ClassifierEpoch>,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, vocab: Vec<String>, dim: usize) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() || dim == 0 {
            return Err(invalid!("classifier needs classes and bins"));
        }
        let mut rng = stream(config.seed, "classifier-init");
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut inputs = dim;
        for (i, &units) in config.hidden.iter().enumerate() {
            layers.push(Layer::new(LayerSpec::Dense { inputs, units }, &format!("dense.{i}"), Init::He, &mut store, &mut rng)?);
            layers.push(Layer::new(LayerSpec::Relu, "relu", Init::Zeros, &mut store, &mut rng)?);
            inputs = units;
        }
        layers.push(Layer::new(
            LayerSpec::Dense {
                inputs,
                units: vocab.len(),
            },
            "out",
            Init::Xavier,
            &mut store,
            &mut rng,
        )?);
        Ok(ClassifierModel {
            config,
            vocab,
            dim,
            store,
            layers,
            history: vec![],
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `[B, C]`.
    pub fn logits(&self, x: &Array) -> Result<Array> {
        if x.shape().len() != 2 || x.shape()[1] != self.dim {
            return Err(Error::Shape(format!("classifier expects [B, {}], got {:?}", self.dim, x.shape())));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let xv = g.input(x.clone());
        let y = forward_seq(&self.layers, &mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Mean softmax cross-entropy of a batch.
    pub fn loss_graph(&self, g: &mut Graph, x: &Array, labels: &[usize]) -> Result<Var> {
        let xv = g.input(x.clone());
        let logits = forward_seq(&self.layers, g, xv)?;
        g.softmax_cross_entropy(logits, labels)
    }

    /// Arg-max class per row; ties go to the lower index.
    pub fn predict<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(512) {
            let logits = self.logits(&Array::from_rows(chunk)?)?;
            out.extend(logits.rows().map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            }));
        }
        Ok(out)
    }

    /// Fraction of correct predictions; the corpus must share the vocabulary.
    pub fn accuracy(&self, corpus: &LabeledCorpus) -> Result<f64> {
        if corpus.vocab() != self.vocab.as_slice() {
            return Err(invalid!("corpus vocabulary differs from the classifier's"));
        }
        if corpus.is_empty() {
            return Err(invalid!("accuracy of an empty corpus"));
        }
        let pred = self.predict(corpus.spectra())?;
        let hits = pred.iter().zip(corpus.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / corpus.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({ "vocab": self.vocab, "dim": self.dim });
        ModelFile::new(MODEL_KIND, serde_json::to_value(&self.config)?, extra, &self.store).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ModelFile::load(path)?;
        file.expect_kind(MODEL_KIND)?;
        let config: ClassifierConfig = serde_json::from_value(file.config.clone())?;
        let (vocab, dim) = vocab_dim(&file.extra)?;
        let mut model = ClassifierModel::new(config, vocab, dim)?;
        model.store.load_records(&file.params)?;
        Ok(model)
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for h in &self.history {
            w.serialize(h)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Softmax cross-entropy with Adam; keeps the best validation accuracy.
pub fn train_classifier(train: &LabeledCorpus, val: &LabeledCorpus, cfg: &ClassifierConfig) -> Result<ClassifierModel> {
    check_splits(train, val)?;
    if let Some(c) = train.class_counts().iter().position(|&n| n == 0) {
        return Err(invalid!("class `{}` has no training spectra", train.vocab()[c]));
    }
    let mut model = ClassifierModel::new(cfg.clone(), train.vocab().to_vec(), train.dim())?;
    let mut adam = AdamState::for_all(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut rng = stream(cfg.seed, "classifier-train");
    let mut stopper = EarlyStopping::maximize(cfg.patience.max(1));
    let mut best = model.store.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut sum = 0.0;
        for idx in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            let (x, labels) = gather(train, &idx);
            let mut g = Graph::new(&model.store, Mode::Train);
            let loss = model.loss_graph(&mut g, &x, &labels)?;
            let l = g.value(loss).item();
            ensure_finite(l, "classifier loss", epoch)?;
            let grads = g.backward(loss)?;
            drop(g);
            adam.step(&mut model.store, &grads);
            sum += l * idx.len() as f64;
        }
        let val_accuracy = model.accuracy(val)?;
        model.history.push(ClassifierEpoch {
            epoch,
            train_loss: sum / train.len() as f64,
            val_accuracy,
        });
        match stopper.observe(epoch, val_accuracy) {
            Progress::Improved => best = model.store.clone(),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    model.store = best;
    Ok(model)
}

/// Per-class recall and confusion counts on a labelled test set.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub classes: Vec<String>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// Detection rate in percent, `None` for classes absent from the test set.
    pub rates: Vec<Option<f64>>,
    /// Unweighted mean of the present classes' rates.
    pub macro_mean: f64,
    pub missing: Vec<String>,
}

impl DetectionReport {
    pub fn from_predictions(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(invalid!("need equally many nonzero true and predicted labels"));
        }
        let c = classes.len();
        let mut confusion = vec![vec![0usize; c]; c];
        for (&y, &p) in truth.iter().zip(predicted) {
            if y >= c || p >= c {
                return Err(invalid!("label outside {c} classes"));
            }
            confusion[y][p] += 1;
        }
        let mut rates = Vec::with_capacity(c);
        let mut missing = Vec::new();
        for (i, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 {
                log::warn!("class `{}` has no test spectra; left out of the macro mean", classes[i]);
                missing.push(classes[i].clone());
                rates.push(None);
            } else {
                rates.push(Some(100.0 * row[i] as f64 / n as f64));
            }
        }
        let present: Vec<f64> = rates.iter().flatten().cloned().collect();
        let macro_mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok(DetectionReport {
            classes: classes.to_vec(),
            confusion,
            rates,
            macro_mean,
            missing,
        })
    }

    pub fn rate(&self, class: &str) -> Option<f64> {
        self.classes.iter().position(|c| c == class).and_then(|i| self.rates[i])
    }

    /// Rows in percent of the true class; empty rows stay zero.
    pub fn confusion_percent(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&v| if n == 0 { 0.0 } else { 100.0 * v as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    /// `class,rate_percent` rows plus the macro row. Absent classes get an
    /// empty rate.
    pub fn write_rates_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "rate_percent"])?;
        for (name, rate) in self.classes.iter().zip(&self.rates) {
            w.write_record([name.clone(), rate.map(fmt_pct).unwrap_or_default()])?;
        }
        w.write_record([MACRO_ROW.to_string(), fmt_pct(self.macro_mean)])?;
        w.flush().map_err(|e| Error::io(Path::new("<rates>"), e))
    }

    /// Square matrix with class names on both axes; percentages of the true
    /// class (rows) or raw counts.
    pub fn write_confusion_csv<W: std::io::Write>(&self, out: W, percent: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["class".to_string()];
        header.extend(self.classes.iter().cloned());
        w.write_record(&header)?;
        let pct = self.confusion_percent();
        for (i, name) in self.classes.iter().enumerate() {
            let mut rec = vec![name.clone()];
            if percent {
                rec.extend(pct[i].iter().map(|v| fmt_pct(*v)));
            } else {
                rec.extend(self.confusion[i].iter().map(|v| v.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<confusion>"), e))
    }
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.4}")
}

pub fn detection_rates(model: &ClassifierModel, test: &LabeledCorpus) -> Result<DetectionReport> {
    if test.is_empty() {
        return Err(invalid!("test set is empty"));
    }
    let test = test.align_to(model.vocab())?;
    let pred = model.predict(test.spectra())?;
    DetectionReport::from_predictions(model.vocab(), test.labels(), &pred)
}

/// Synthetic corpus in `vocab` order with `counts[c]` spectra of class `c`,
/// drawn from a generator whose vocabulary contains every requested class.
pub fn synthesize(generator: &dyn ConditionalGenerator, vocab: &[String], counts: &[usize], seed: u64) -> Result<LabeledCorpus> {
    if counts.len() != vocab.len() {
        return Err(invalid!("{} counts for {} classes", counts.len(), vocab.len()));
    }
    if generator.dim() == 0 {
        return Err(invalid!("generator has no bins"));
    }
    let mut gen_counts = vec![0; generator.vocab().len()];
    for (name, &n) in vocab.iter().zip(counts) {
        if n > 0 {
            gen_counts[generator.class_index(name)?] = n;
        }
    }
    let raw = generator.generate_corpus(&gen_counts, seed)?;
    let mut out = LabeledCorpus::empty(vocab.to_vec(), generator.dim());
    for (row, &y) in raw.spectra().iter().zip(raw.labels()) {
        let name = &generator.vocab()[y];
        let c = vocab.iter().position(|v| v == name).expect("requested classes only");
        out.push(row.clone(), c)?;
    }
    Ok(out)
}

/// One trained condition of the substitution experiment.
#[derive(Clone, Debug)]
pub struct Condition {
    pub name: String,
    pub report: DetectionReport,
}

/// Writes `condition,class,rate_percent`, each condition followed by its
/// macro row.
pub fn write_comparison_csv<W: std::io::Write>(conditions: &[Condition], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["condition", "class", "rate_percent"])?;
    for cond in conditions {
        for (name, rate) in cond.report.classes.iter().zip(&cond.report.rates) {
            w.write_record([cond.name.clone(), name.clone(), rate.map(fmt_pct).unwrap_or_default()])?;
        }
        w.write_record([cond.name.clone(), MACRO_ROW.to_string(), fmt_pct(cond.report.macro_mean)])?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<comparison>"), e))
}

/// Trains one classifier on the real training split and one per generator
/// on synthetic spectra with the real per-class counts; all are selected
/// on the same real validation split and scored on the same test split.
pub fn substitution_experiment(
    real_train: &LabeledCorpus,
    val: &LabeledCorpus,
    test: &LabeledCorpus,
    generators: &[(&str, &dyn ConditionalGenerator)],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<Condition>> {
    let counts = real_train.class_counts();
    let mut synthetic = Vec::with_capacity(generators.len());
    for (name, generator) in generators {
        synthetic.push((*name, synthesize(*generator, real_train.vocab(), &counts, seed)?));
    }
    substitution_from_corpora(real_train, val, test, &synthetic, cfg)
}

/// [`substitution_experiment`] with the synthetic training sets already
/// drawn.
pub fn substitution_from_corpora(
    real_train: &LabeledCorpus,
    val: &LabeledCorpus,
    test: &LabeledCorpus,
    synthetic: &[(&str, LabeledCorpus)],
    cfg: &ClassifierConfig,
) -> Result<Vec<Condition>> {
    let mut out = Vec::with_capacity(synthetic.len() + 1);
    let real = train_classifier(real_train, val, cfg)?;
    out.push(Condition {
        name: "real".into(),
        report: detection_rates(&real, test)?,
    });
    for (name, synth) in synthetic {
        let model = train_classifier(&synth.align_to(real_train.vocab())?, val, cfg)?;
        let report = detection_rates(&model, test)?;
        log::info!(
            "substitution: {name} macro {:.2} vs real {:.2}",
            report.macro_mean,
            out[0].report.macro_mean
        );
        out.push(Condition {
            name: name.to_string(),
            report,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AugmentationOutcome {
    pub before: DetectionReport,
    pub after: DetectionReport,
    /// Synthetic spectra added per class, in training vocabulary order.
    pub added: Vec<usize>,
}

/// Tops up every class below `target` with synthetic spectra (never
/// removing real ones) and compares classifiers trained with identical
/// seeds on the original and augmented sets.
pub fn augmentation_experiment(
    train: &LabeledCorpus,
    val: &LabeledCorpus,
    test: &LabeledCorpus,
    generator: &dyn ConditionalGenerator,
    target: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<AugmentationOutcome> {
    let added: Vec<usize> = train.class_counts().iter().map(|&n| target.saturating_sub(n)).collect();
    let augmented = augment(train, generator, &added, seed)?;
    let before_model = train_classifier(train, val, cfg)?;
    let before = detection_rates(&before_model, test)?;
    let after = if added.iter().all(|&n| n == 0) {
        before.clone()
    } else {
        detection_rates(&train_classifier(&augmented, val, cfg)?, test)?
    };
    Ok(AugmentationOutcome { before, after, added })
}

/// `train` followed by the synthetic spectra.
pub fn augment(train: &LabeledCorpus, generator: &dyn ConditionalGenerator, added: &[usize], seed: u64) -> Result<LabeledCorpus> {
    let mut out = train.clone();
    if added.iter().any(|&n| n > 0) {
        out.extend(&synthesize(generator, train.vocab(), added, seed)?)?;
    }
    debug_assert_eq!(&out.spectra()[..train.len()], train.spectra());
    Ok(out)
}
