//! Species-conditional GAN with inverse-frequency class weighting.
//!
//! Both networks see the class as a one-hot vector: the generator takes
//! `z ⊕ onehot(c)`, the discriminator takes the spectrum with the one-hot
//! code broadcast as extra input channels (CNN) or appended (MLP). Generator
//! and discriminator parameters live in one store, split by name prefix, and
//! each side has its own optimizer over its own partition.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};
use crate::maldivae::{vocab_dim, Arch};
use crate::pike::{class_distance, mmd2, KernelConfig};
use crate::rng::{stream, Rng};
use crate::tensor::{
    forward_seq, one_hot, sample_gaussian, AdamConfig, AdamState, Array, Graph, Init, Layer, LayerSpec, Mode,
    ModelFile, ParamId, ParamStore, Var,
};
use crate::train::{check_splits, ensure_finite, gather, shuffled_batches, ConditionalGenerator, EarlyStopping, Progress};

pub const MODEL_KIND: &str = "maldigan";
pub const PROB_CLIP: f64 = 1e-7;
pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";
/// Per-class CD below this on a 128-sample batch triggers a collapse warning.
pub const COLLAPSE_CD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeights {
    InverseFrequency,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub latent_dim: usize,
    pub arch: Arch,
    pub hidden: Vec<usize>,
    /// Generator channels after the dense stage, then after the upsampling.
    pub gen_channels: Vec<usize>,
    /// Discriminator channels of the two strided convolutions.
    pub disc_channels: Vec<usize>,
    pub kernel: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    /// First-moment decay for both optimizers.
    pub adam_beta1: f64,
    pub dropout_g: f64,
    pub dropout_d: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub class_weights: ClassWeights,
    /// Keep generator dropout active when sampling, with a seeded mask.
    pub sample_dropout: bool,
    /// Append the minibatch standard deviation of the discriminator's
    /// features as one extra input to its dense stage.
    pub minibatch_std: bool,
    /// Generated and validation spectra used for the per-epoch MMD².
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            latent_dim: 32,
            arch: Arch::Cnn1d,
            hidden: vec![256, 512],
            gen_channels: vec![32, 16],
            disc_channels: vec![16, 32],
            kernel: 5,
            lr_d: 1e-4,
            lr_g: 2e-4,
            adam_beta1: 0.5,
            dropout_g: 0.2,
            dropout_d: 0.3,
            batch: 128,
            max_epochs: 200,
            patience: 30,
            class_weights: ClassWeights::InverseFrequency,
            minibatch_std: false,
            sample_dropout: false,
            val_samples: 256,
            seed: 17,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch == 0 || self.kernel == 0 || self.val_samples < 2 {
            return Err(invalid!("latent_dim, batch and kernel must be positive, val_samples at least 2"));
        }
        if self.hidden.len() != 2 || self.hidden.contains(&0) {
            return Err(invalid!("GAN needs two positive hidden sizes"));
        }
        if self.gen_channels.len() != 2 || self.disc_channels.len() != 2 || self.gen_channels.contains(&0) || self.disc_channels.contains(&0) {
            return Err(invalid!("GAN needs two positive generator and discriminator channel counts"));
        }
        if !(self.lr_d > 0.0 && self.lr_g > 0.0) {
            return Err(invalid!("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(invalid!("adam_beta1 must lie in [0, 1)"));
        }
        for p in [self.dropout_g, self.dropout_d] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid!("dropout must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub val_mmd2: f64,
}

/// `w_c = N / (C · N_c)` over classes present, rescaled to mean 1; absent
/// classes get weight 0.
pub fn class_weights(counts: &[usize], mode: ClassWeights) -> Vec<f64> {
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present == 0 {
        return vec![0.0; counts.len()];
    }
    if mode == ClassWeights::None {
        return counts.iter().map(|&n| if n > 0 { 1.0 } else { 0.0 }).collect();
    }
    let total: usize = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| if n > 0 { total as f64 / (present * n) as f64 } else { 0.0 })
        .collect();
    let mean = raw.iter().sum::<f64>() / present as f64;
    raw.iter().map(|w| w / mean).collect()
}

/// Weighted adversarial losses from discriminator probabilities:
/// `loss_d = -mean[w log d_real + w log(1 - d_fake)]`,
/// `loss_g = -mean[w log d_fake]`, probabilities clipped first.
pub fn gan_losses(d_real: &[f64], d_fake: &[f64], weights: &[f64], labels: &[usize]) -> Result<(f64, f64)> {
    if d_real.len() != labels.len() || d_fake.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("gan_losses: batch sizes differ or are empty".into()));
    }
    let clip = |p: f64| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let b = labels.len() as f64;
    let mut ld = 0.0;
    let mut lg = 0.0;
    for ((&r, &f), &c) in d_real.iter().zip(d_fake).zip(labels) {
        let w = *weights.get(c).ok_or_else(|| invalid!("no weight for class {c}"))?;
        ld -= w * clip(r).ln() + w * (1.0 - clip(f)).ln();
        lg -= w * clip(f).ln();
    }
    Ok((ld / b, lg / b))
}

fn weight_column(weights: &[f64], labels: &[usize]) -> Array {
    Array::new(vec![labels.len(), 1], labels.iter().map(|&c| weights[c]).collect()).expect("weight column")
}

/// Graph form of the discriminator loss.
pub fn loss_d_graph(g: &mut Graph, d_real: Var, d_fake: Var, w: &Array) -> Result<Var> {
    let b = w.shape()[0] as f64;
    let wv = g.input(w.clone());
    let r = g.clamp(d_real, PROB_CLIP, 1.0 - PROB_CLIP);
    let lr = g.log(r);
    let f = g.clamp(d_fake, PROB_CLIP, 1.0 - PROB_CLIP);
    let nf = g.affine(f, -1.0, 1.0);
    let lf = g.log(nf);
    let s = g.add(lr, lf)?;
    let s = g.mul(s, wv)?;
    let s = g.sum(s);
    Ok(g.affine(s, -1.0 / b, 0.0))
}

/// Graph form of the non-saturating generator loss.
pub fn loss_g_graph(g: &mut Graph, d_fake: Var, w: &Array) -> Result<Var> {
    let b = w.shape()[0] as f64;
    let wv = g.input(w.clone());
    let f = g.clamp(d_fake, PROB_CLIP, 1.0 - PROB_CLIP);
    let lf = g.log(f);
    let s = g.mul(lf, wv)?;
    let s = g.sum(s);
    Ok(g.affine(s, -1.0 / b, 0.0))
}

#[derive(Clone, Debug)]
struct Net {
    gen_dense: Vec<Layer>,
    gen_conv: Vec<Layer>,
    gen_out: Layer,
    gen_grid: Option<(usize, usize)>,
    disc_conv: Vec<Layer>,
    disc_dense: Vec<Layer>,
    disc_out: Layer,
}

fn build(cfg: &GanConfig, classes: usize, dim: usize, rng: &mut Rng) -> Result<(ParamStore, Net)> {
    cfg.validate()?;
    if classes == 0 || dim < 4 {
        return Err(invalid!("GAN needs at least one class and four bins"));
    }
    let mut store = ParamStore::new();
    let mut layers = |specs: Vec<(LayerSpec, Init)>, prefix: &str, store: &mut ParamStore| -> Result<Vec<Layer>> {
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (s, init))| Layer::new(s, &format!("{prefix}.{i}"), init, store, rng))
            .collect()
    };
    let (l, c, k) = (cfg.latent_dim, classes, cfg.kernel);
    let [h0, h1] = [cfg.hidden[0], cfg.hidden[1]];
    let leaky = || (LayerSpec::LeakyRelu, Init::Zeros);
    let dense = |inputs, units| (LayerSpec::Dense { inputs, units }, Init::He);
    let drop = |p| (LayerSpec::Dropout { p }, Init::Zeros);
    let extra = cfg.minibatch_std as usize;
    let net = match cfg.arch {
        Arch::Mlp => {
            let gen_dense = layers(
                vec![dense(l + c, h0), leaky(), drop(cfg.dropout_g), dense(h0, h1), leaky(), drop(cfg.dropout_g)],
                "gen.dense",
                &mut store,
            )?;
            let gen_out = layers(vec![(LayerSpec::Dense { inputs: h1, units: dim }, Init::Xavier)], "gen.out", &mut store)?.remove(0);
            let disc_dense = layers(
                vec![dense(dim + c + extra, h1), leaky(), drop(cfg.dropout_d), dense(h1, h0), leaky(), drop(cfg.dropout_d)],
                "disc.dense",
                &mut store,
            )?;
            let disc_out = layers(vec![(LayerSpec::Dense { inputs: h0, units: 1 }, Init::Xavier)], "disc.out", &mut store)?.remove(0);
            Net {
                gen_dense,
                gen_conv: vec![],
                gen_out,
                gen_grid: None,
                disc_conv: vec![],
                disc_dense,
                disc_out,
            }
        }
        Arch::Cnn1d => {
            let [g0, g1] = [cfg.gen_channels[0], cfg.gen_channels[1]];
            let lq = dim.div_ceil(4);
            let gen_dense = layers(
                vec![dense(l + c, h0), leaky(), drop(cfg.dropout_g), dense(h0, g0 * lq), leaky()],
                "gen.dense",
                &mut store,
            )?;
            let up = |cin, cout| {
                (
                    LayerSpec::UpsampleConv1d {
                        in_channels: cin,
                        out_channels: cout,
                        kernel: k,
                    },
                    Init::He,
                )
            };
            let gen_conv = layers(vec![up(g0, g1), leaky(), drop(cfg.dropout_g), up(g1, g1), leaky()], "gen.conv", &mut store)?;
            let gen_out = layers(
                vec![(
                    LayerSpec::Conv1d {
                        in_channels: g1,
                        out_channels: 1,
                        kernel: k,
                        stride: 1,
                    },
                    Init::Xavier,
                )],
                "gen.out",
                &mut store,
            )?
            .remove(0);
            let [d0, d1] = [cfg.disc_channels[0], cfg.disc_channels[1]];
            let strided = |cin, cout| {
                (
                    LayerSpec::Conv1d {
                        in_channels: cin,
                        out_channels: cout,
                        kernel: k,
                        stride: 2,
                    },
                    Init::He,
                )
            };
            let disc_conv = layers(
                vec![strided(1 + c, d0), leaky(), drop(cfg.dropout_d), strided(d0, d1), leaky(), drop(cfg.dropout_d)],
                "disc.conv",
                &mut store,
            )?;
            let flat = d1 * dim.div_ceil(2).div_ceil(2);
            let disc_dense = layers(vec![dense(flat + extra, h0), leaky(), drop(cfg.dropout_d)], "disc.dense", &mut store)?;
            let disc_out = layers(vec![(LayerSpec::Dense { inputs: h0, units: 1 }, Init::Xavier)], "disc.out", &mut store)?.remove(0);
            Net {
                gen_dense,
                gen_conv,
                gen_out,
                gen_grid: Some((g0, lq)),
                disc_conv,
                disc_dense,
                disc_out,
            }
        }
    };
    Ok((store, net))
}

#[derive(Clone, Debug)]
pub struct GanModel {
    config: GanConfig,
    vocab: Vec<String>,
    dim: usize,
    store: ParamStore,
    net: Net,
    pub history: Vec<GanEpoch>,
    /// Classes whose generated batch fell below the collapse threshold.
    pub collapse_warnings: Vec<String>,
}

impl GanModel {
    pub fn new(config: GanConfig, vocab: Vec<String>, dim: usize) -> Result<Self> {
        let mut rng = stream(config.seed, "gan-init");
        let (store, net) = build(&config, vocab.len(), dim, &mut rng)?;
        Ok(GanModel {
            config,
            vocab,
            dim,
            store,
            net,
            history: vec![],
            collapse_warnings: vec![],
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn generator_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(GEN_PREFIX).collect()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(DISC_PREFIX).collect()
    }

    pub fn zero_generator_output(&mut self) {
        self.net.gen_out.zero_params(&mut self.store);
    }

    /// Sets the generator's output bias to `logit(level)` so untrained
    /// samples start near the mean training intensity instead of 0.5.
    pub fn init_output_level(&mut self, level: f64) {
        let p = level.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        let b = self.net.gen_out.params()[1];
        for v in self.store.get_mut(b).data_mut() {
            *v = (p / (1.0 - p)).ln();
        }
    }

    pub fn zero_discriminator_output(&mut self) {
        self.net.disc_out.zero_params(&mut self.store);
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&c| c >= self.vocab.len()) {
            return Err(invalid!("class index {bad} outside vocabulary of {}", self.vocab.len()));
        }
        Ok(())
    }

    pub fn generator_graph(&self, g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
        let b = labels.len();
        let oh = g.input(one_hot(labels, self.vocab.len()));
        let h = g.concat(&[z, oh], 1)?;
        let mut h = forward_seq(&self.net.gen_dense, g, h)?;
        if let Some((c, l)) = self.net.gen_grid {
            h = g.reshape(h, &[b, c, l])?;
            h = forward_seq(&self.net.gen_conv, g, h)?;
            h = self.net.gen_out.forward(g, h)?;
            h = g.crop(h, self.dim)?;
            h = g.reshape(h, &[b, self.dim])?;
        } else {
            h = self.net.gen_out.forward(g, h)?;
        }
        Ok(g.sigmoid(h))
    }

    /// Realness probabilities `[B, 1]` for spectra `x: [B, D]`.
    pub fn discriminator_graph(&self, g: &mut Graph, x: Var, labels: &[usize]) -> Result<Var> {
        let b = labels.len();
        let classes = self.vocab.len();
        let oh = g.input(one_hot(labels, classes));
        let h = if self.net.disc_conv.is_empty() {
            g.concat(&[x, oh], 1)?
        } else {
            let x3 = g.reshape(x, &[b, 1, self.dim])?;
            let cond = g.broadcast_len(oh, self.dim)?;
            let h = g.concat(&[x3, cond], 1)?;
            let h = forward_seq(&self.net.disc_conv, g, h)?;
            let n = g.value(h).len() / b;
            g.reshape(h, &[b, n])?
        };
        let h = if self.config.minibatch_std {
            let s = g.batch_std(h)?;
            g.concat(&[h, s], 1)?
        } else {
            h
        };
        let h = forward_seq(&self.net.disc_dense, g, h)?;
        let logit = self.net.disc_out.forward(g, h)?;
        Ok(g.sigmoid(logit))
    }

    /// Generator output for latent rows `z: [B, L]` (eval mode).
    pub fn generator_forward(&self, z: &Array, labels: &[usize]) -> Result<Array> {
        self.check_labels(labels)?;
        if z.shape() != [labels.len(), self.config.latent_dim] {
            return Err(Error::Shape(format!("generator expects [{}, {}], got {:?}", labels.len(), self.config.latent_dim, z.shape())));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let zv = g.input(z.clone());
        let p = self.generator_graph(&mut g, zv, labels)?;
        Ok(g.value(p).clone())
    }

    /// Samples for latent rows `z`. With `sample_dropout` the generator's
    /// dropout masks are drawn from `seed`; otherwise this is `generator_forward`.
    pub fn sample(&self, z: &Array, labels: &[usize], seed: u64) -> Result<Array> {
        if !self.config.sample_dropout {
            return self.generator_forward(z, labels);
        }
        self.check_labels(labels)?;
        if z.shape() != [labels.len(), self.config.latent_dim] {
            return Err(Error::Shape(format!("generator expects [{}, {}], got {:?}", labels.len(), self.config.latent_dim, z.shape())));
        }
        let mut g = Graph::new(&self.store, Mode::Train).with_rng(stream(seed, "gan-sample-dropout"));
        let zv = g.input(z.clone());
        let p = self.generator_graph(&mut g, zv, labels)?;
        Ok(g.value(p).clone())
    }

    /// Discriminator probabilities; `rng` drives dropout in train mode.
    pub fn discriminator_forward(&self, x: &Array, labels: &[usize], mode: Mode, rng: Option<Rng>) -> Result<Vec<f64>> {
        self.check_labels(labels)?;
        if x.shape() != [labels.len(), self.dim] {
            return Err(Error::Shape(format!("discriminator expects [{}, {}], got {:?}", labels.len(), self.dim, x.shape())));
        }
        let mut g = Graph::new(&self.store, mode);
        if let Some(r) = rng {
            g = g.with_rng(r);
        }
        let xv = g.input(x.clone());
        let d = self.discriminator_graph(&mut g, xv, labels)?;
        Ok(g.value(d).data().to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({ "vocab": self.vocab, "dim": self.dim });
        ModelFile::new(MODEL_KIND, serde_json::to_value(&self.config)?, extra, &self.store).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ModelFile::load(path)?)
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.expect_kind(MODEL_KIND)?;
        let config: GanConfig = serde_json::from_value(file.config.clone())?;
        let (vocab, dim) = vocab_dim(&file.extra)?;
        let mut model = GanModel::new(config, vocab, dim)?;
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

    /// Class-conditional PIKE MMD², averaged over the classes with at
    /// least 2 spectra in `val`. Each class compares `val_samples / classes` generated spectra
    /// (at least 2) with at most as many of its validation spectra.
    fn validation_mmd2(&self, val: &LabeledCorpus, kernel: &KernelConfig) -> Result<f64> {
        let mut rng = stream(self.config.seed, "gan-val");
        let present: Vec<usize> = (0..self.vocab.len()).filter(|&c| val.class_rows(c).len() >= 2).collect();
        if present.is_empty() {
            return Err(invalid!("GAN validation needs a class with at least 2 spectra"));
        }
        let per = (self.config.val_samples / present.len()).max(2);
        let mut total = 0.0;
        for &c in &present {
            let z = sample_gaussian(&[per, self.config.latent_dim], &mut rng);
            let fake = self.sample(&z, &vec![c; per], crate::rng::derive_seed(self.config.seed, &format!("gan-val-dropout-{c}")))?;
            let fake_rows: Vec<&[f64]> = fake.rows().collect();
            let mut real = val.class_rows(c);
            rand::seq::SliceRandom::shuffle(real.as_mut_slice(), &mut rng);
            real.truncate(per);
            total += mmd2(&real, &fake_rows, kernel)?;
        }
        Ok(total / present.len() as f64)
    }
}

impl ConditionalGenerator for GanModel {
    fn kind(&self) -> &'static str {
        MODEL_KIND
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn generate(&self, class: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_class(class)?;
        let mut rng = stream(seed, "gan-generate");
        let mut out = Vec::with_capacity(n);
        let mut left = n;
        let mut chunk = 0u64;
        while left > 0 {
            let b = left.min(256);
            let z = sample_gaussian(&[b, self.config.latent_dim], &mut rng);
            let p = self.sample(&z, &vec![class; b], crate::rng::derive_seed(seed, &format!("gan-generate-{class}-{chunk}")))?;
            chunk += 1;
            out.extend(p.rows().map(|r| r.to_vec()));
            left -= b;
        }
        Ok(out)
    }
}

/// Alternating one-to-one discriminator and generator Adam updates with
/// validation-MMD² early stopping; returns the best-validation parameters.
pub fn train_gan(train: &LabeledCorpus, val: &LabeledCorpus, cfg: &GanConfig) -> Result<GanModel> {
    check_splits(train, val)?;
    if val.len() < 2 {
        return Err(invalid!("GAN validation needs at least 2 spectra"));
    }
    let kernel = KernelConfig::default();
    let mut model = GanModel::new(cfg.clone(), train.vocab().to_vec(), train.dim())?;
    let level = train.spectra().iter().flatten().sum::<f64>() / (train.len() * train.dim()) as f64;
    model.init_output_level(level);
    let weights = class_weights(&train.class_counts(), cfg.class_weights);
    let adam = |lr| AdamConfig {
        lr,
        beta1: cfg.adam_beta1,
        ..Default::default()
    };
    let mut adam_d = AdamState::new(adam(cfg.lr_d), &model.store, model.discriminator_params());
    let mut adam_g = AdamState::new(adam(cfg.lr_g), &model.store, model.generator_params());
    let mut rng = stream(cfg.seed, "gan-train");
    let mut stopper = EarlyStopping::minimize(cfg.patience.max(1));
    let mut best = model.store.clone();
    let mut step = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let (mut sum_d, mut sum_g) = (0.0, 0.0);
        for idx in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            step += 1;
            let (x, labels) = gather(train, &idx);
            let b = idx.len();
            let w = weight_column(&weights, &labels);

            let z = sample_gaussian(&[b, cfg.latent_dim], &mut rng);
            let mut g = Graph::new(&model.store, Mode::Train).with_rng(stream(step, "gan-dropout-d"));
            let zv = g.input(z);
            let fake = model.generator_graph(&mut g, zv, &labels)?;
            let fake = g.detach(fake);
            let xv = g.input(x);
            let d_real = model.discriminator_graph(&mut g, xv, &labels)?;
            let d_fake = model.discriminator_graph(&mut g, fake, &labels)?;
            let loss_d = loss_d_graph(&mut g, d_real, d_fake, &w)?;
            let ld = g.value(loss_d).item();
            ensure_finite(ld, "discriminator loss", epoch)?;
            let grads = g.backward(loss_d)?;
            drop(g);
            adam_d.step(&mut model.store, &grads);

            let z = sample_gaussian(&[b, cfg.latent_dim], &mut rng);
            let mut g = Graph::new(&model.store, Mode::Train).with_rng(stream(step, "gan-dropout-g"));
            let zv = g.input(z);
            let fake = model.generator_graph(&mut g, zv, &labels)?;
            let d_fake = model.discriminator_graph(&mut g, fake, &labels)?;
            let loss_g = loss_g_graph(&mut g, d_fake, &w)?;
            let lg = g.value(loss_g).item();
            ensure_finite(lg, "generator loss", epoch)?;
            let grads = g.backward(loss_g)?;
            drop(g);
            adam_g.step(&mut model.store, &grads);

            sum_d += ld * b as f64;
            sum_g += lg * b as f64;
        }
        let val_mmd2 = model.validation_mmd2(val, &kernel)?;
        ensure_finite(val_mmd2, "validation MMD²", epoch)?;
        let n = train.len() as f64;
        model.history.push(GanEpoch {
            epoch,
            loss_d: sum_d / n,
            loss_g: sum_g / n,
            val_mmd2,
        });
        log::debug!("gan epoch {epoch}: d {:.4} g {:.4} mmd2 {:.5}", sum_d / n, sum_g / n, val_mmd2);
        match stopper.observe(epoch, val_mmd2) {
            Progress::Improved => best = model.store.clone(),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    model.store = best;
    for c in 0..model.vocab.len() {
        let batch = model.generate(c, 128, crate::rng::derive_seed(cfg.seed, "gan-collapse"))?;
        let (cd, _) = class_distance(&batch, &kernel)?;
        if cd < COLLAPSE_CD {
            log::warn!("gan: possible mode collapse for class `{}` (CD {cd:.4})", model.vocab[c]);
            model.collapse_warnings.push(model.vocab[c].clone());
        }
    }
    log::info!(
        "gan: best validation MMD² {:.5} at epoch {}",
        stopper.best().unwrap_or(f64::NAN),
        stopper.best_epoch()
    );
    Ok(model)
}
