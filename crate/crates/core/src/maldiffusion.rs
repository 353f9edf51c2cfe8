//! Species-conditional denoising diffusion with a 1-D U-Net noise predictor.
//!
//! Spectra are mapped to `[-1, 1]`, corrupted along a linear β schedule and
//! denoised by a U-Net whose residual blocks are modulated per class
//! (scale and shift after group norm) and per timestep (additive shift).

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};
use crate::maldivae::vocab_dim;
use crate::rng::{stream, Rng};
use crate::tensor::{
    one_hot, sample_gaussian, AdamConfig, AdamState, Array, Graph, Init, Layer, LayerSpec, Mode, ModelFile,
    ParamStore, Var,
};
use crate::train::{check_splits, ensure_finite, gather, shuffled_batches, ConditionalGenerator, EarlyStopping, Progress};

pub const MODEL_KIND: &str = "maldiffusion";
pub const TIME_EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("diffusion needs at least one step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid!("every β must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

pub fn rescale_to_signed(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 2.0 * v - 1.0).collect()
}

pub fn rescale_to_unit(y: &[f64]) -> Vec<f64> {
    y.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

/// `x_t = √ᾱ_t x0 + √(1 − ᾱ_t) ε`; `t = 0` returns `x0`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > schedule.steps() {
        return Err(invalid!("timestep {t} outside 0..={}", schedule.steps()));
    }
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("q_sample: x0 has {} values, eps {}", x0.len(), eps.len())));
    }
    let ab = schedule.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseCoeff {
    /// `σ_t = √β_t`.
    SqrtBeta,
    /// `σ_t = 1 − α_t`, as the reverse step is literally printed.
    OneMinusAlpha,
}

/// `x_{t−1} = (x_t − (1 − α_t)/√(1 − ᾱ_t) ε̂) / √α_t + σ_t z`, with `z`
/// ignored at `t = 1`.
pub fn reverse_step(x_t: &[f64], eps_hat: &[f64], t: usize, z: &[f64], schedule: &NoiseSchedule, mode: NoiseCoeff) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x_t.len() != eps_hat.len() || x_t.len() != z.len() {
        return Err(Error::Shape("reverse_step: x_t, eps_hat and z differ in length".into()));
    }
    let a = schedule.alpha(t);
    let coef = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let sigma = match (t, mode) {
        (1, _) => 0.0,
        (_, NoiseCoeff::SqrtBeta) => schedule.beta(t).sqrt(),
        (_, NoiseCoeff::OneMinusAlpha) => 1.0 - a,
    };
    let inv = 1.0 / a.sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .zip(z)
        .map(|((x, e), z)| inv * (x - coef * e) + sigma * z)
        .collect())
}

/// Sinusoidal embedding of a timestep: sines then cosines over
/// geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnetVariant {
    S,
    M,
    L,
    XL,
    Deep,
    DeepMicro,
}

/// Resolved U-Net shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnetShape {
    pub base: usize,
    pub stages: usize,
    pub blocks: usize,
    pub groups: usize,
    pub bottleneck: usize,
}

impl UnetVariant {
    pub fn shape(self) -> UnetShape {
        let (base, stages, blocks, groups, bottleneck) = match self {
            UnetVariant::S => (16, 2, 2, 4, 64),
            UnetVariant::M => (16, 3, 2, 8, 128),
            UnetVariant::L => (32, 2, 2, 8, 128),
            UnetVariant::XL => (32, 3, 2, 16, 256),
            UnetVariant::Deep => (32, 2, 3, 8, 128),
            UnetVariant::DeepMicro => (16, 2, 1, 8, 32),
        };
        UnetShape {
            base,
            stages,
            blocks,
            groups,
            bottleneck,
        }
    }
}

impl UnetShape {
    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.stages).map(|s| self.base << s).collect()
    }

    /// Input length after right padding to a multiple of `2^stages`.
    pub fn padded_len(&self, dim: usize) -> usize {
        dim.next_multiple_of(1 << self.stages)
    }
}

/// Largest divisor of `channels` not above `groups`.
pub fn group_count(channels: usize, groups: usize) -> usize {
    (1..=groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variant: UnetVariant,
    pub kernel: usize,
    pub noise_coeff: NoiseCoeff,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            variant: UnetVariant::Deep,
            kernel: 4,
            noise_coeff: NoiseCoeff::SqrtBeta,
            lr: 1e-4,
            batch: 64,
            max_epochs: 200,
            patience: 20,
            seed: 17,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?;
        if self.beta_start >= self.beta_end && self.steps > 1 {
            return Err(invalid!("beta_start must be below beta_end"));
        }
        if self.kernel == 0 || self.batch == 0 {
            return Err(invalid!("kernel and batch must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Residual block: conv, group norm, class scale/shift plus time shift,
/// relu, conv, group norm, relu, then the (projected) skip is added.
#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Layer,
    norm1: Layer,
    gamma: Layer,
    delta: Layer,
    tau: Layer,
    conv2: Layer,
    norm2: Layer,
    skip: Option<Layer>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, shape: &UnetShape, kernel: usize, classes: usize, name: &str, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let conv = |cin, k| LayerSpec::Conv1d {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: 1,
        };
        let norm = LayerSpec::Groupnorm {
            channels: cout,
            groups: group_count(cout, shape.groups),
        };
        let mut make = |spec, suffix: &str, init| Layer::new(spec, &format!("{name}.{suffix}"), init, store, rng);
        Ok(ResBlock {
            conv1: make(conv(cin, kernel), "conv1", Init::He)?,
            norm1: make(norm.clone(), "norm1", Init::Zeros)?,
            gamma: make(LayerSpec::Dense { inputs: classes, units: cout }, "gamma", Init::Zeros)?,
            delta: make(LayerSpec::Dense { inputs: classes, units: cout }, "delta", Init::Zeros)?,
            tau: make(
                LayerSpec::Dense {
                    inputs: TIME_EMBED_DIM,
                    units: cout,
                },
                "tau",
                Init::Xavier,
            )?,
            conv2: make(conv(cout, kernel), "conv2", Init::He)?,
            norm2: make(norm, "norm2", Init::Zeros)?,
            skip: if cin == cout { None } else { Some(make(conv(cin, 1), "skip", Init::Xavier)?) },
        })
    }

    fn forward(&self, g: &mut Graph, x: Var, cond: Var, temb: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.norm1.forward(g, h)?;
        let gm = self.gamma.forward(g, cond)?;
        let scale = g.affine(gm, 1.0, 1.0);
        let dl = self.delta.forward(g, cond)?;
        let tu = self.tau.forward(g, temb)?;
        let shift = g.add(dl, tu)?;
        let h = g.channel_affine(h, scale, shift)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.relu(h);
        let s = match &self.skip {
            Some(l) => l.forward(g, x)?,
            None => x,
        };
        g.add(h, s)
    }
}

#[derive(Clone, Debug)]
struct Unet {
    shape: UnetShape,
    time: Layer,
    conv_in: Layer,
    /// Per-class learned offsets over `[C0, padded length]`, added after the
    /// input convolution. Convolutions and channel-wise modulation alone
    /// cannot tie a class to absolute bin positions.
    class_pos: Layer,
    down: Vec<Vec<ResBlock>>,
    mid: Vec<ResBlock>,
    up: Vec<Vec<ResBlock>>,
    conv_out: Layer,
}

fn build(cfg: &DiffusionConfig, classes: usize, dim: usize, rng: &mut Rng) -> Result<(ParamStore, Unet)> {
    cfg.validate()?;
    if classes == 0 {
        return Err(invalid!("diffusion needs at least one class"));
    }
    let shape = cfg.variant.shape();
    let k = cfg.kernel;
    let mut store = ParamStore::new();
    let chans = shape.stage_channels();
    let time = Layer::new(
        LayerSpec::Dense {
            inputs: TIME_EMBED_DIM,
            units: TIME_EMBED_DIM,
        },
        "time",
        Init::He,
        &mut store,
        rng,
    )?;
    let conv_in = Layer::new(
        LayerSpec::Conv1d {
            in_channels: 1,
            out_channels: chans[0],
            kernel: k,
            stride: 1,
        },
        "conv_in",
        Init::He,
        &mut store,
        rng,
    )?;
    let class_pos = Layer::new(
        LayerSpec::Embedding {
            vocab: classes,
            dim: chans[0] * shape.padded_len(dim),
        },
        "class_pos",
        Init::Xavier,
        &mut store,
        rng,
    )?;
    let mut down = Vec::new();
    let mut c = chans[0];
    for (s, &cs) in chans.iter().enumerate() {
        let mut blocks = Vec::new();
        for b in 0..shape.blocks {
            blocks.push(ResBlock::new(c, cs, &shape, k, classes, &format!("down.{s}.{b}"), &mut store, rng)?);
            c = cs;
        }
        down.push(blocks);
    }
    let mut mid = Vec::new();
    for b in 0..shape.blocks {
        mid.push(ResBlock::new(c, shape.bottleneck, &shape, k, classes, &format!("mid.{b}"), &mut store, rng)?);
        c = shape.bottleneck;
    }
    let mut up = vec![Vec::new(); shape.stages];
    for s in (0..shape.stages).rev() {
        let cs = chans[s];
        let mut blocks = Vec::new();
        for b in 0..shape.blocks {
            let cin = if b == 0 { c + cs } else { cs };
            blocks.push(ResBlock::new(cin, cs, &shape, k, classes, &format!("up.{s}.{b}"), &mut store, rng)?);
        }
        c = cs;
        up[s] = blocks;
    }
    let conv_out = Layer::new(
        LayerSpec::Conv1d {
            in_channels: chans[0],
            out_channels: 1,
            kernel: k,
            stride: 1,
        },
        "conv_out",
        Init::Zeros,
        &mut store,
        rng,
    )?;
    Ok((
        store,
        Unet {
            shape,
            time,
            conv_in,
            class_pos,
            down,
            mid,
            up,
            conv_out,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    config: DiffusionConfig,
    schedule: NoiseSchedule,
    vocab: Vec<String>,
    dim: usize,
    store: ParamStore,
    net: Unet,
    pub history: Vec<DiffusionEpoch>,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, vocab: Vec<String>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid!("spectra need at least one bin"));
        }
        let mut rng = stream(config.seed, "diffusion-init");
        let (store, net) = build(&config, vocab.len(), dim, &mut rng)?;
        Ok(DiffusionModel {
            schedule: config.schedule()?,
            config,
            vocab,
            dim,
            store,
            net,
            history: vec![],
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn unet_shape(&self) -> UnetShape {
        self.net.shape
    }

    fn check_inputs(&self, rows: usize, t: &[usize], labels: &[usize]) -> Result<()> {
        if t.len() != rows || labels.len() != rows {
            return Err(Error::Shape(format!("{rows} spectra with {} timesteps and {} labels", t.len(), labels.len())));
        }
        for &ti in t {
            self.schedule.check_t(ti)?;
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= self.vocab.len()) {
            return Err(invalid!("class index {bad} outside vocabulary of {}", self.vocab.len()));
        }
        Ok(())
    }

    /// Predicted noise `[B, D]` for signed inputs `x_t: [B, D]`.
    pub fn denoiser_graph(&self, g: &mut Graph, x_t: Var, t: &[usize], labels: &[usize]) -> Result<Var> {
        let b = labels.len();
        let d = self.dim;
        let padded = self.net.shape.padded_len(d);
        let temb: Vec<f64> = t.iter().flat_map(|&ti| timestep_embedding(ti, TIME_EMBED_DIM)).collect();
        let temb = g.input(Array::new(vec![b, TIME_EMBED_DIM], temb)?);
        let temb = self.net.time.forward(g, temb)?;
        let temb = g.relu(temb);
        let cond = g.input(one_hot(labels, self.vocab.len()));

        let x = g.reshape(x_t, &[b, 1, d])?;
        let x = g.pad_to(x, padded)?;
        let h = self.net.conv_in.forward(g, x)?;
        let pos = self.net.class_pos.lookup(g, labels)?;
        let pos = g.reshape(pos, &[b, self.net.shape.base, padded])?;
        let mut h = g.add(h, pos)?;
        let mut skips = Vec::with_capacity(self.net.shape.stages);
        for blocks in &self.net.down {
            for blk in blocks {
                h = blk.forward(g, h, cond, temb)?;
            }
            skips.push(h);
            h = g.maxpool2(h)?;
        }
        for blk in &self.net.mid {
            h = blk.forward(g, h, cond, temb)?;
        }
        for (blocks, skip) in self.net.up.iter().zip(skips).rev() {
            h = g.upsample2(h);
            h = g.concat(&[h, skip], 1)?;
            for blk in blocks {
                h = blk.forward(g, h, cond, temb)?;
            }
        }
        let h = self.net.conv_out.forward(g, h)?;
        let h = g.crop(h, d)?;
        g.reshape(h, &[b, d])
    }

    pub fn denoiser_forward(&self, x_t: &Array, t: &[usize], labels: &[usize]) -> Result<Array> {
        if x_t.shape().len() != 2 || x_t.shape()[1] != self.dim {
            return Err(Error::Shape(format!("denoiser expects [B, {}], got {:?}", self.dim, x_t.shape())));
        }
        self.check_inputs(x_t.shape()[0], t, labels)?;
        let mut g = Graph::new(&self.store, Mode::Eval);
        let xv = g.input(x_t.clone());
        let e = self.denoiser_graph(&mut g, xv, t, labels)?;
        Ok(g.value(e).clone())
    }

    /// Corrupts the `[0, 1]` batch `x0` with the given timesteps and noise and
    /// returns the mean squared noise-prediction error as a graph node.
    pub fn loss_graph(&self, g: &mut Graph, x0: &Array, labels: &[usize], t: &[usize], eps: &Array) -> Result<Var> {
        if x0.shape() != eps.shape() {
            return Err(Error::Shape("diffusion loss: x0 and eps differ in shape".into()));
        }
        self.check_inputs(x0.shape()[0], t, labels)?;
        let d = self.dim;
        let mut xt = Vec::with_capacity(x0.len());
        for ((row, e), &ti) in x0.rows().zip(eps.rows()).zip(t) {
            xt.extend(q_sample(&rescale_to_signed(row), ti, e, &self.schedule)?);
        }
        let xt = g.input(Array::new(vec![t.len(), d], xt)?);
        let eh = self.denoiser_graph(g, xt, t, labels)?;
        let ev = g.input(eps.clone());
        let diff = g.sub(eh, ev)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    /// One reverse step for a batch.
    pub fn p_sample_step(&self, x_t: &Array, t: usize, labels: &[usize], z: &Array) -> Result<Array> {
        let b = labels.len();
        let eps_hat = self.denoiser_forward(x_t, &vec![t; b], labels)?;
        let out = reverse_step(x_t.data(), eps_hat.data(), t, z.data(), &self.schedule, self.config.noise_coeff)?;
        Array::new(x_t.shape().to_vec(), out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({ "vocab": self.vocab, "dim": self.dim, "schedule": self.schedule });
        ModelFile::new(MODEL_KIND, serde_json::to_value(&self.config)?, extra, &self.store).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(&ModelFile::load(path)?)
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.expect_kind(MODEL_KIND)?;
        let config: DiffusionConfig = serde_json::from_value(file.config.clone())?;
        let (vocab, dim) = vocab_dim(&file.extra)?;
        let mut model = DiffusionModel::new(config, vocab, dim)?;
        if let Some(s) = file.extra.get("schedule") {
            let stored: NoiseSchedule = serde_json::from_value(s.clone())?;
            model.schedule = NoiseSchedule::from_betas(stored.betas)?;
        }
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

    fn draw_noise(&self, n: usize, rng: &mut Rng) -> (Vec<usize>, Array) {
        let t = (0..n).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        (t, sample_gaussian(&[n, self.dim], rng))
    }

    fn evaluate(&self, corpus: &LabeledCorpus) -> Result<f64> {
        let mut rng = stream(self.config.seed, "diffusion-val");
        let mut total = 0.0;
        for chunk in (0..corpus.len()).collect::<Vec<_>>().chunks(256) {
            let (x, labels) = gather(corpus, chunk);
            let (t, eps) = self.draw_noise(chunk.len(), &mut rng);
            let mut g = Graph::new(&self.store, Mode::Eval);
            let loss = self.loss_graph(&mut g, &x, &labels, &t, &eps)?;
            total += g.value(loss).item() * chunk.len() as f64;
        }
        Ok(total / corpus.len() as f64)
    }
}

impl ConditionalGenerator for DiffusionModel {
    fn kind(&self) -> &'static str {
        MODEL_KIND
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn dim(&self) -> usize {
        self.dim
    }

    /// Runs the full reverse chain from standard normal noise.
    fn generate(&self, class: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_class(class)?;
        let mut rng = stream(seed, "diffusion-generate");
        let mut out = Vec::with_capacity(n);
        let mut left = n;
        while left > 0 {
            let b = left.min(256);
            let labels = vec![class; b];
            let mut x = sample_gaussian(&[b, self.dim], &mut rng);
            for t in (1..=self.schedule.steps()).rev() {
                let z = if t > 1 { sample_gaussian(&[b, self.dim], &mut rng) } else { Array::zeros(&[b, self.dim]) };
                x = self.p_sample_step(&x, t, &labels, &z)?;
            }
            out.extend(x.rows().map(rescale_to_unit));
            left -= b;
        }
        Ok(out)
    }
}

/// Adam on the noise-prediction loss with per-epoch validation loss (fixed
/// noise draws) and patience-based early stopping.
pub fn train_diffusion(train: &LabeledCorpus, val: &LabeledCorpus, cfg: &DiffusionConfig) -> Result<DiffusionModel> {
    check_splits(train, val)?;
    let mut model = DiffusionModel::new(cfg.clone(), train.vocab().to_vec(), train.dim())?;
    let mut adam = AdamState::for_all(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut rng = stream(cfg.seed, "diffusion-train");
    let mut stopper = EarlyStopping::minimize(cfg.patience.max(1));
    let mut best = model.store.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut sum = 0.0;
        for idx in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            let (x, labels) = gather(train, &idx);
            let (t, eps) = model.draw_noise(idx.len(), &mut rng);
            let mut g = Graph::new(&model.store, Mode::Train);
            let loss = model.loss_graph(&mut g, &x, &labels, &t, &eps)?;
            let l = g.value(loss).item();
            ensure_finite(l, "diffusion loss", epoch)?;
            let grads = g.backward(loss)?;
            drop(g);
            adam.step(&mut model.store, &grads);
            sum += l * idx.len() as f64;
        }
        let val_loss = model.evaluate(val)?;
        ensure_finite(val_loss, "validation loss", epoch)?;
        let train_loss = sum / train.len() as f64;
        model.history.push(DiffusionEpoch {
            epoch,
            train_loss,
            val_loss,
        });
        log::debug!("diffusion epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        match stopper.observe(epoch, val_loss) {
            Progress::Improved => best = model.store.clone(),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    model.store = best;
    log::info!(
        "diffusion: best validation loss {:.5} at epoch {}",
        stopper.best().unwrap_or(f64::NAN),
        stopper.best_epoch()
    );
    Ok(model)
}
