//! Pieces shared by the training loops: mini-batching, early stopping and
//! the conditional-generator interface used by the experiment drivers.

use rand::seq::SliceRandom;

use crate::corpus::LabeledCorpus;
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Array;

/// Shuffled index batches covering `0..n`; the last batch may be short.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// Stacks the selected rows into `[B, D]` plus their labels.
pub fn gather(corpus: &LabeledCorpus, idx: &[usize]) -> (Array, Vec<usize>) {
    let d = corpus.dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&corpus.spectra()[i]);
        labels.push(corpus.labels()[i]);
    }
    (Array::new(vec![idx.len(), d], data).expect("gather shape"), labels)
}

pub fn ensure_finite(value: f64, what: &str, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} became {value} in epoch {epoch}")))
    }
}

/// Checks that two splits can be trained on together.
pub fn check_splits(train: &LabeledCorpus, val: &LabeledCorpus) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("training and validation splits must be nonempty"));
    }
    if train.vocab() != val.vocab() {
        return Err(invalid!(
            "train and validation vocabularies differ ({:?} vs {:?})",
            train.vocab(),
            val.vocab()
        ));
    }
    if train.dim() != val.dim() {
        return Err(invalid!("train has {} bins, validation {}", train.dim(), val.dim()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Patience-based early stopping on a monitored value.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    minimize: bool,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn minimize(patience: usize) -> Self {
        EarlyStopping {
            patience,
            minimize: true,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn maximize(patience: usize) -> Self {
        EarlyStopping {
            minimize: false,
            ..EarlyStopping::minimize(patience)
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Progress {
        let better = match self.best {
            None => true,
            Some(b) if self.minimize => value < b,
            Some(b) => value > b,
        };
        if better {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
            return Progress::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Progress::Stop
        } else {
            Progress::Stalled
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// A trained species-conditional generator of `[0, 1]` spectra.
pub trait ConditionalGenerator: Sync {
    fn kind(&self) -> &'static str;
    fn vocab(&self) -> &[String];
    fn dim(&self) -> usize;

    /// `n` spectra for class index `class`, reproducible per `seed`.
    fn generate(&self, class: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>>;

    fn class_index(&self, name: &str) -> Result<usize> {
        self.vocab()
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::unknown_class(name, self.vocab()))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.vocab().len() {
            return Err(invalid!(
                "class index {class} outside vocabulary of {}",
                self.vocab().len()
            ));
        }
        Ok(())
    }

    /// Synthetic corpus with `counts[c]` spectra of class `c` (the model's
    /// vocabulary order). Each class draws from its own derived seed.
    fn generate_corpus(&self, counts: &[usize], seed: u64) -> Result<LabeledCorpus> {
        if counts.len() != self.vocab().len() {
            return Err(invalid!(
                "{} class counts for a {}-class generator",
                counts.len(),
                self.vocab().len()
            ));
        }
        let mut corpus = LabeledCorpus::empty(self.vocab().to_vec(), self.dim());
        for (c, &n) in counts.iter().enumerate() {
            let s = derive_seed(seed, &format!("class-{c}"));
            for row in self.generate(c, n, s)? {
                corpus.push(row, c)?;
            }
        }
        Ok(corpus)
    }
}
