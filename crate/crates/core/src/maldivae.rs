//! Species-conditional variational autoencoder with a Soft-Bernoulli decoder.
//!
//! The class label goes through a learned embedding that is concatenated to
//! the encoder features and to the latent code. The decoder's sigmoid output
//! is used directly as the generated intensity profile.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Rng};
use crate::tensor::{
    forward_seq, sample_gaussian, AdamConfig, AdamState, Array, Graph, Init, Layer, LayerSpec, Mode, ModelFile,
    ParamStore, Var,
};
use crate::train::{check_splits, ensure_finite, gather, shuffled_batches, ConditionalGenerator, EarlyStopping, Progress};

pub const MODEL_KIND: &str = "maldivae";
pub const PROB_CLIP: f64 = 1e-7;
pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub arch: Arch,
    /// Widths of the three MLP hidden layers; the CNN uses the last one for
    /// its dense stage.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 8,
            arch: Arch::Cnn1d,
            hidden: vec![512, 256, 128],
            embedding_dim: 16,
            conv_channels: vec![16, 32, 64],
            kernel: 4,
            lr: 1e-3,
            batch: 128,
            max_epochs: 500,
            patience: 30,
            seed: 17,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.batch == 0 || self.embedding_dim == 0 {
            return Err(invalid!("latent_dim, batch and embedding_dim must be positive"));
        }
        if self.hidden.len() != 3 || self.hidden.contains(&0) {
            return Err(invalid!("VAE needs three positive hidden sizes"));
        }
        if self.arch == Arch::Cnn1d && (self.conv_channels.len() != 3 || self.conv_channels.contains(&0) || self.kernel == 0) {
            return Err(invalid!("cnn1d needs three positive conv channel counts and a kernel"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub train_total: f64,
    pub train_recon: f64,
    pub train_kl: f64,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
struct Net {
    emb: Layer,
    enc_conv: Vec<Layer>,
    enc_dense: Vec<Layer>,
    mu: Layer,
    log_var: Layer,
    dec_dense: Vec<Layer>,
    dec_conv: Vec<Layer>,
    out: Layer,
    /// `(channels, length)` the decoder's dense stage is reshaped to.
    dec_grid: Option<(usize, usize)>,
}

fn dense(inputs: usize, units: usize) -> LayerSpec {
    LayerSpec::Dense { inputs, units }
}

fn conv(cin: usize, cout: usize, kernel: usize) -> LayerSpec {
    LayerSpec::Conv1d {
        in_channels: cin,
        out_channels: cout,
        kernel,
        stride: 1,
    }
}

fn stack(specs: Vec<(LayerSpec, Init)>, prefix: &str, store: &mut ParamStore, rng: &mut Rng) -> Result<Vec<Layer>> {
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (s, init))| Layer::new(s, &format!("{prefix}.{i}"), init, store, rng))
        .collect()
}

fn build(cfg: &VaeConfig, classes: usize, dim: usize, rng: &mut Rng) -> Result<(ParamStore, Net)> {
    cfg.validate()?;
    if classes == 0 || dim < 2 {
        return Err(invalid!("VAE needs at least one class and two bins"));
    }
    let mut store = ParamStore::new();
    let (e, l) = (cfg.embedding_dim, cfg.latent_dim);
    let [h0, h1, h2] = [cfg.hidden[0], cfg.hidden[1], cfg.hidden[2]];
    let relu = || (LayerSpec::Relu, Init::Zeros);
    let emb = Layer::new(LayerSpec::Embedding { vocab: classes, dim: e }, "emb", Init::Xavier, &mut store, rng)?;
    let net = match cfg.arch {
        Arch::Mlp => {
            let enc_dense = stack(
                vec![
                    (dense(dim + e, h0), Init::He),
                    relu(),
                    (dense(h0, h1), Init::He),
                    relu(),
                    (dense(h1, h2), Init::He),
                    relu(),
                ],
                "enc.dense",
                &mut store,
                rng,
            )?;
            let mu = Layer::new(dense(h2, l), "enc.mu", Init::Xavier, &mut store, rng)?;
            let log_var = Layer::new(dense(h2, l), "enc.log_var", Init::Xavier, &mut store, rng)?;
            let dec_dense = stack(
                vec![
                    (dense(l + e, h2), Init::He),
                    relu(),
                    (dense(h2, h1), Init::He),
                    relu(),
                    (dense(h1, h0), Init::He),
                    relu(),
                ],
                "dec.dense",
                &mut store,
                rng,
            )?;
            let out = Layer::new(dense(h0, dim), "dec.out", Init::Xavier, &mut store, rng)?;
            Net {
                emb,
                enc_conv: vec![],
                enc_dense,
                mu,
                log_var,
                dec_dense,
                dec_conv: vec![],
                out,
                dec_grid: None,
            }
        }
        Arch::Cnn1d => {
            let [c0, c1, c2] = [cfg.conv_channels[0], cfg.conv_channels[1], cfg.conv_channels[2]];
            let k = cfg.kernel;
            let enc_conv = stack(
                vec![
                    (conv(1, c0, k), Init::He),
                    relu(),
                    (conv(c0, c1, k), Init::He),
                    relu(),
                    (LayerSpec::Maxpool1d, Init::Zeros),
                    (conv(c1, c2, k), Init::He),
                    relu(),
                ],
                "enc.conv",
                &mut store,
                rng,
            )?;
            let flat = c2 * (dim / 2);
            let enc_dense = stack(vec![(dense(flat + e, h2), Init::He), relu()], "enc.dense", &mut store, rng)?;
            let mu = Layer::new(dense(h2, l), "enc.mu", Init::Xavier, &mut store, rng)?;
            let log_var = Layer::new(dense(h2, l), "enc.log_var", Init::Xavier, &mut store, rng)?;
            let lh = dim.div_ceil(2);
            let dec_dense = stack(
                vec![(dense(l + e, h2), Init::He), relu(), (dense(h2, c2 * lh), Init::He), relu()],
                "dec.dense",
                &mut store,
                rng,
            )?;
            let dec_conv = stack(
                vec![
                    (conv(c2, c1, k), Init::He),
                    relu(),
                    (
                        LayerSpec::UpsampleConv1d {
                            in_channels: c1,
                            out_channels: c0,
                            kernel: k,
                        },
                        Init::He,
                    ),
                    relu(),
                ],
                "dec.conv",
                &mut store,
                rng,
            )?;
            let out = Layer::new(conv(c0, 1, k), "dec.out", Init::Xavier, &mut store, rng)?;
            Net {
                emb,
                enc_conv,
                enc_dense,
                mu,
                log_var,
                dec_dense,
                dec_conv,
                out,
                dec_grid: Some((c2, lh)),
            }
        }
    };
    Ok((store, net))
}

/// `z = μ + exp(log_var / 2) ⊙ ε`.
pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() || mu.len() != eps.len() {
        return Err(Error::Shape(format!(
            "reparameterize: {} / {} / {}",
            mu.len(),
            log_var.len(),
            eps.len()
        )));
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect())
}

/// Per-spectrum `(total, recon, kl)`: Soft-Bernoulli negative log-likelihood
/// with clipped probabilities plus the closed-form KL to `N(0, I)`.
pub fn elbo_loss(x: &[f64], p_hat: &[f64], mu: &[f64], log_var: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != p_hat.len() || mu.len() != log_var.len() {
        return Err(Error::Shape("elbo_loss: mismatched lengths".into()));
    }
    let recon: f64 = x
        .iter()
        .zip(p_hat)
        .map(|(&x, &p)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(x * p.ln() + (1.0 - x) * (1.0 - p).ln())
        })
        .sum();
    let kl: f64 = -0.5
        * mu
            .iter()
            .zip(log_var)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>();
    Ok((recon + kl, recon, kl))
}

/// Batch-mean ELBO terms on the graph: `(total, recon, kl)`.
pub fn elbo_graph(g: &mut Graph, x: &Array, p_hat: Var, mu: Var, log_var: Var) -> Result<(Var, Var, Var)> {
    let b = x.shape()[0] as f64;
    let one_minus_x = Array::new(x.shape().to_vec(), x.data().iter().map(|v| 1.0 - v).collect())?;
    let xv = g.input(x.clone());
    let omx = g.input(one_minus_x);
    let p = g.clamp(p_hat, PROB_CLIP, 1.0 - PROB_CLIP);
    let lp = g.log(p);
    let q = g.affine(p, -1.0, 1.0);
    let lq = g.log(q);
    let t1 = g.mul(xv, lp)?;
    let t2 = g.mul(omx, lq)?;
    let ll = g.add(t1, t2)?;
    let ll = g.sum(ll);
    let recon = g.affine(ll, -1.0 / b, 0.0);

    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.affine(log_var, 1.0, 1.0);
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum(a);
    let kl = g.affine(s, -0.5 / b, 0.0);
    let total = g.add(recon, kl)?;
    Ok((total, recon, kl))
}

#[derive(Clone, Debug)]
pub struct VaeModel {
    config: VaeConfig,
    vocab: Vec<String>,
    dim: usize,
    store: ParamStore,
    net: Net,
    pub history: Vec<VaeEpoch>,
}

impl VaeModel {
    /// Freshly initialized model (weights drawn from the config seed).
    pub fn new(config: VaeConfig, vocab: Vec<String>, dim: usize) -> Result<Self> {
        let mut rng = stream(config.seed, "vae-init");
        let (store, net) = build(&config, vocab.len(), dim, &mut rng)?;
        Ok(VaeModel {
            config,
            vocab,
            dim,
            store,
            net,
            history: vec![],
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zeroes the μ and log σ² heads.
    pub fn zero_encoder_heads(&mut self) {
        self.net.mu.zero_params(&mut self.store);
        self.net.log_var.zero_params(&mut self.store);
    }

    /// Zeroes the decoder's output layer.
    pub fn zero_decoder_output(&mut self) {
        self.net.out.zero_params(&mut self.store);
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&bad) = labels.iter().find(|&&c| c >= self.vocab.len()) {
            return Err(invalid!("class index {bad} outside vocabulary of {}", self.vocab.len()));
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph, x: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let b = labels.len();
        let e = self.net.emb.lookup(g, labels)?;
        let feats = if self.net.enc_conv.is_empty() {
            x
        } else {
            let x3 = g.reshape(x, &[b, 1, self.dim])?;
            let h = forward_seq(&self.net.enc_conv, g, x3)?;
            let n = g.value(h).len() / b;
            g.reshape(h, &[b, n])?
        };
        let h = g.concat(&[feats, e], 1)?;
        let h = forward_seq(&self.net.enc_dense, g, h)?;
        let mu = self.net.mu.forward(g, h)?;
        let lv = self.net.log_var.forward(g, h)?;
        let lv = g.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
        Ok((mu, lv))
    }

    pub fn decode_graph(&self, g: &mut Graph, z: Var, labels: &[usize]) -> Result<Var> {
        let b = labels.len();
        let e = self.net.emb.lookup(g, labels)?;
        let h = g.concat(&[z, e], 1)?;
        let mut h = forward_seq(&self.net.dec_dense, g, h)?;
        if let Some((c, l)) = self.net.dec_grid {
            h = g.reshape(h, &[b, c, l])?;
            h = forward_seq(&self.net.dec_conv, g, h)?;
            h = self.net.out.forward(g, h)?;
            h = g.crop(h, self.dim)?;
            h = g.reshape(h, &[b, self.dim])?;
        } else {
            h = self.net.out.forward(g, h)?;
        }
        Ok(g.sigmoid(h))
    }

    /// Batch ELBO with externally supplied noise `eps: [B, L]`.
    pub fn elbo_batch(&self, g: &mut Graph, x: &Array, labels: &[usize], eps: &Array) -> Result<(Var, Var, Var)> {
        let xv = g.input(x.clone());
        let (mu, lv) = self.encode_graph(g, xv, labels)?;
        let half = g.affine(lv, 0.5, 0.0);
        let sigma = g.exp(half);
        let ev = g.input(eps.clone());
        let noise = g.mul(sigma, ev)?;
        let z = g.add(mu, noise)?;
        let p = self.decode_graph(g, z, labels)?;
        elbo_graph(g, x, p, mu, lv)
    }

    /// `(μ, log σ²)` rows for spectra `x: [B, D]`.
    pub fn encode(&self, x: &Array, labels: &[usize]) -> Result<(Array, Array)> {
        self.check_labels(labels)?;
        if x.shape() != [labels.len(), self.dim] {
            return Err(Error::Shape(format!("encode expects [{}, {}], got {:?}", labels.len(), self.dim, x.shape())));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let xv = g.input(x.clone());
        let (mu, lv) = self.encode_graph(&mut g, xv, labels)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    /// Per-bin probabilities for latent rows `z: [B, L]`.
    pub fn decode(&self, z: &Array, labels: &[usize]) -> Result<Array> {
        self.check_labels(labels)?;
        if z.shape() != [labels.len(), self.config.latent_dim] {
            return Err(Error::Shape(format!("decode expects [{}, {}], got {:?}", labels.len(), self.config.latent_dim, z.shape())));
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let zv = g.input(z.clone());
        let p = self.decode_graph(&mut g, zv, labels)?;
        Ok(g.value(p).clone())
    }

    /// Mean per-spectrum ELBO over a corpus, with noise from `rng`.
    fn evaluate(&self, corpus: &LabeledCorpus, rng: &mut Rng) -> Result<f64> {
        let mut total = 0.0;
        let idx: Vec<usize> = (0..corpus.len()).collect();
        for chunk in idx.chunks(self.config.batch.max(1)) {
            let (x, labels) = gather(corpus, chunk);
            let eps = sample_gaussian(&[chunk.len(), self.config.latent_dim], rng);
            let mut g = Graph::new(&self.store, Mode::Eval);
            let (t, _, _) = self.elbo_batch(&mut g, &x, &labels, &eps)?;
            total += g.value(t).item() * chunk.len() as f64;
        }
        Ok(total / corpus.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let extra = serde_json::json!({ "vocab": self.vocab, "dim": self.dim });
        ModelFile::new(MODEL_KIND, serde_json::to_value(&self.config)?, extra, &self.store).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ModelFile::load(path)?;
        Self::from_file(&file)
    }

    pub fn from_file(file: &ModelFile) -> Result<Self> {
        file.expect_kind(MODEL_KIND)?;
        let config: VaeConfig = serde_json::from_value(file.config.clone())?;
        let (vocab, dim) = vocab_dim(&file.extra)?;
        let mut model = VaeModel::new(config, vocab, dim)?;
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

pub(crate) fn vocab_dim(extra: &serde_json::Value) -> Result<(Vec<String>, usize)> {
    let vocab: Vec<String> = serde_json::from_value(extra.get("vocab").cloned().unwrap_or_default())
        .map_err(|e| Error::Model(format!("bad vocab: {e}")))?;
    let dim = extra
        .get("dim")
        .and_then(|d| d.as_u64())
        .ok_or_else(|| Error::Model("missing dim".into()))? as usize;
    Ok((vocab, dim))
}

impl ConditionalGenerator for VaeModel {
    fn kind(&self) -> &'static str {
        MODEL_KIND
    }

    fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn dim(&self) -> usize {
        self.dim
    }

    /// Decodes `z ~ N(0, I)` conditioned on `class`.
    fn generate(&self, class: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        self.check_class(class)?;
        let mut rng = stream(seed, "vae-generate");
        let mut out = Vec::with_capacity(n);
        let mut left = n;
        while left > 0 {
            let b = left.min(256);
            let z = sample_gaussian(&[b, self.config.latent_dim], &mut rng);
            let p = self.decode(&z, &vec![class; b])?;
            out.extend(p.rows().map(|r| r.to_vec()));
            left -= b;
        }
        Ok(out)
    }
}

/// Mini-batch Adam on the ELBO with validation-based early stopping; the
/// returned model holds the best-validation parameters.
pub fn train_vae(train: &LabeledCorpus, val: &LabeledCorpus, cfg: &VaeConfig) -> Result<VaeModel> {
    check_splits(train, val)?;
    let mut model = VaeModel::new(cfg.clone(), train.vocab().to_vec(), train.dim())?;
    let mut adam = AdamState::for_all(AdamConfig::with_lr(cfg.lr), &model.store);
    let mut rng = stream(cfg.seed, "vae-train");
    let mut stopper = EarlyStopping::minimize(cfg.patience.max(1));
    let mut best = model.store.clone();
    for epoch in 1..=cfg.max_epochs {
        let (mut tot, mut rec, mut kl) = (0.0, 0.0, 0.0);
        for idx in shuffled_batches(train.len(), cfg.batch, &mut rng) {
            let (x, labels) = gather(train, &idx);
            let eps = sample_gaussian(&[idx.len(), cfg.latent_dim], &mut rng);
            let mut g = Graph::new(&model.store, Mode::Train);
            let (t, r, k) = model.elbo_batch(&mut g, &x, &labels, &eps)?;
            let (tv, rv, kv) = (g.value(t).item(), g.value(r).item(), g.value(k).item());
            ensure_finite(tv, "VAE training loss", epoch)?;
            if kv < -1e-9 {
                return Err(Error::Numerical(format!("negative KL {kv} in epoch {epoch}")));
            }
            let grads = g.backward(t)?;
            drop(g);
            adam.step(&mut model.store, &grads);
            let w = idx.len() as f64;
            tot += tv * w;
            rec += rv * w;
            kl += kv * w;
        }
        let n = train.len() as f64;
        let val_total = model.evaluate(val, &mut stream(cfg.seed, "vae-val"))?;
        ensure_finite(val_total, "VAE validation loss", epoch)?;
        model.history.push(VaeEpoch {
            epoch,
            train_total: tot / n,
            train_recon: rec / n,
            train_kl: kl / n,
            val_total,
        });
        log::debug!("vae epoch {epoch}: train {:.4} val {:.4}", tot / n, val_total);
        match stopper.observe(epoch, val_total) {
            Progress::Improved => best = model.store.clone(),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    model.store = best;
    log::info!(
        "vae: best validation ELBO {:.4} at epoch {}",
        stopper.best().unwrap_or(f64::NAN),
        stopper.best_epoch()
    );
    Ok(model)
}
