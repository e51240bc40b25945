//! Minibatch training loop shared by every model.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::Sample;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::image::{batch_tensor, ComplexImage};
use crate::metrics::ssim;
use crate::nn::{Adam, AdamConfig, ParamSet, Session};
use crate::sampling::{item_seeds, ReconstructionSampler};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One minibatch in network layout.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub x_u: Tensor<T>,
    /// Segmentation labels, `[n, h, w]` flattened.
    pub labels: Vec<usize>,
    /// Per-item noise seeds.
    pub seeds: Vec<u64>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample], seed: u64) -> Result<Self> {
        let xs: Vec<ComplexImage<T>> = samples.iter().map(|s| s.x.cast()).collect();
        let xus: Vec<ComplexImage<T>> = samples.iter().map(|s| s.x_u.cast()).collect();
        Ok(Batch {
            x: batch_tensor(&xs.iter().collect::<Vec<_>>())?,
            x_u: batch_tensor(&xus.iter().collect::<Vec<_>>())?,
            labels: samples
                .iter()
                .flat_map(|s| s.labels.iter().map(|&l| l as usize))
                .collect(),
            seeds: item_seeds(seed, samples.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.x.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model with parameters and a differentiable minibatch loss.
pub trait Trainable<T: Scalar> {
    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Dropout rate active during training passes.
    fn dropout_rate(&self) -> f64 {
        0.0
    }

    /// Scalar loss node plus named diagnostics for the log.
    fn loss(&self, s: &mut Session<T>, batch: &Batch<T>) -> Result<(Var, BTreeMap<String, f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Cap on validation images scored per evaluation; 0 means all.
    pub val_limit: usize,
    /// Anneal the learning rate to zero along a half cosine over `max_steps`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 6,
            max_steps: 1000,
            eval_every: 100,
            seed: 0,
            val_limit: 0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate used for the update of `step` (1-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if !self.cosine_decay {
            return self.learning_rate;
        }
        let progress = (step - 1) as f64 / self.max_steps as f64;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_steps and eval_every must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub best_step: usize,
    pub best_score: f64,
    pub best_params: ParamSet<T>,
    pub log: Vec<LogEntry>,
}

/// Mean validation SSIM of the sampler's quick estimate (magnitudes, per-image range).
pub fn validation_ssim<T: Scalar, M: ReconstructionSampler<T> + ?Sized>(
    model: &M,
    val: &[Sample],
    limit: usize,
    seed: u64,
) -> Result<f64> {
    let take = if limit == 0 {
        val.len()
    } else {
        limit.min(val.len())
    };
    if take == 0 {
        return Err(Error::InvalidArgument("empty validation split".into()));
    }
    let mut total = 0.0;
    for s in &val[..take] {
        let est = model.quick_estimate(&s.x_u.cast(), seed)?;
        let gt = s.x.magnitude().mapv(|v| T::of(v as f64));
        let range = gt.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
        total += ssim(&est, &gt, range)?;
    }
    Ok(total / take as f64)
}

/// Evenly spread subset for validation so every acceleration is represented.
pub fn spread_subset(samples: &[Sample], limit: usize) -> Vec<Sample> {
    if limit == 0 || limit >= samples.len() {
        return samples.to_vec();
    }
    (0..limit)
        .map(|i| samples[i * samples.len() / limit].clone())
        .collect()
}

/// Adam over shuffled epochs; every `eval_every` steps `score` (higher is better)
/// picks the checkpoint that is returned.
pub fn fit<T: Scalar, M: Trainable<T>>(
    model: &mut M,
    train: &[Sample],
    config: &TrainConfig,
    mut score: impl FnMut(&M) -> Result<f64>,
    mut on_entry: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut best: Option<(usize, f64, ParamSet<T>)> = None;
    let mut log = Vec::new();
    let bs = config.batch_size.min(train.len());
    if bs < config.batch_size {
        warn!("batch size reduced to {bs} (training split size)");
    }
    for step in 1..=config.max_steps {
        let mut picked = Vec::with_capacity(bs);
        while picked.len() < bs {
            if cursor == order.len() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&train[order[cursor]]);
            cursor += 1;
        }
        let step_seed = config.seed ^ (step as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        let batch = Batch::<T>::from_samples(&picked, step_seed)?;
        let mut s =
            Session::new(model.params(), true).with_dropout(model.dropout_rate(), step_seed);
        let (loss, terms) = model.loss(&mut s, &batch)?;
        let value = s.g.value(loss).value().as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {value}, terms {terms:?}"),
            });
        }
        let grads = s.param_grads(loss);
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                detail: format!("non-finite gradient for {}", model.params().name(bad)),
            });
        }
        opt.set_learning_rate(config.learning_rate_at(step));
        opt.step(model.params_mut(), &grads);
        let val_score = if step % config.eval_every == 0 || step == config.max_steps {
            let v = score(model)?;
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((step, v, model.params().clone()));
            }
            info!("step {step}: loss {value:.4} val {v:.4}");
            Some(v)
        } else {
            None
        };
        let entry = LogEntry {
            step,
            loss: value,
            terms,
            val_score,
        };
        on_entry(&entry);
        log.push(entry);
    }
    let (best_step, best_score, best_params) = best.expect("final step always evaluates");
    Ok(TrainOutcome {
        best_step,
        best_score,
        best_params,
        log,
    })
}
