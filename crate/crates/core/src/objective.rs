//! The evidence lower bound: a fixed-variance Gaussian reconstruction likelihood
//! minus α-weighted per-level KL divergences between posterior and prior.
//!
//! Constant terms of the Gaussian log-density are omitted throughout, so reported
//! ELBO values are only comparable with each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{kl_sum, Var};
use crate::hierarchical::{Conditioning, ModelConfig, Noise, PhiRec};
use crate::image::ComplexImage;
use crate::nn::{ParamSet, Session};
use crate::scalar::Scalar;
use crate::train::{Batch, Trainable};

/// `[4^0, 4^1, ..., 4^(L-1)]`, finest level first.
pub fn alpha_weights(levels: usize) -> Result<Vec<f64>> {
    if levels < 1 {
        return Err(Error::InvalidArgument("alpha_weights needs L >= 1".into()));
    }
    Ok((0..levels).map(|l| 4f64.powi(l as i32)).collect())
}

/// KL weights for a model configuration, honouring `alpha_reversed`.
pub fn config_alpha(config: &ModelConfig) -> Result<Vec<f64>> {
    let mut a = alpha_weights(config.levels)?;
    if config.alpha_reversed {
        a.reverse();
    }
    Ok(a)
}

/// Closed-form KL between diagonal Gaussians, summed over all elements.
pub fn gaussian_kl<T: Scalar>(mu_q: &[T], sigma_q: &[T], mu_p: &[T], sigma_p: &[T]) -> Result<f64> {
    let n = mu_q.len();
    for len in [sigma_q.len(), mu_p.len(), sigma_p.len()] {
        if len != n {
            return Err(Error::shape(n, len));
        }
    }
    if sigma_q.iter().chain(sigma_p).any(|&s| !(s > T::zero())) {
        return Err(Error::InvalidArgument(
            "gaussian_kl requires positive sigmas".into(),
        ));
    }
    // clamp round-off below zero
    Ok(kl_sum(mu_q, sigma_q, mu_p, sigma_p).as_f64().max(0.0))
}

/// `-(1 / 2σ²) Σ (x - x̂)²` over both channels.
pub fn recon_log_likelihood<T: Scalar>(
    x_hat: &ComplexImage<T>,
    x: &ComplexImage<T>,
    likelihood_sigma: f64,
) -> Result<f64> {
    if x_hat.dim() != x.dim() {
        return Err(Error::shape(x.dim(), x_hat.dim()));
    }
    if !(likelihood_sigma > 0.0) {
        return Err(Error::InvalidArgument(
            "likelihood_sigma must be positive".into(),
        ));
    }
    let se: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).norm_sqr().as_f64())
        .sum();
    Ok(-se / (2.0 * likelihood_sigma * likelihood_sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_term: f64,
    /// Finest level first.
    pub kl_per_level: Vec<f64>,
    pub alpha: Vec<f64>,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn assemble(recon_term: f64, kl_per_level: Vec<f64>, alpha: Vec<f64>) -> Self {
        let penalty: f64 = kl_per_level.iter().zip(&alpha).map(|(k, a)| k * a).sum();
        ElboBreakdown {
            total: recon_term - penalty,
            recon_term,
            kl_per_level,
            alpha,
        }
    }
}

/// Graph nodes of a batched ELBO evaluation.
#[derive(Clone, Debug)]
pub struct ElboGraph {
    /// `-ELBO / batch`, the minimization target.
    pub loss: Var,
    pub recon: Var,
    pub kl: Vec<Var>,
    pub x_hat: Var,
    pub alpha: Vec<f64>,
}

impl ElboGraph {
    /// Per-item averages of the batch terms.
    pub fn breakdown<T: Scalar>(&self, s: &Session<T>, batch: usize) -> ElboBreakdown {
        let n = batch as f64;
        let recon = s.g.value(self.recon).value().as_f64() / n;
        let kl = self
            .kl
            .iter()
            .map(|&k| (s.g.value(k).value().as_f64() / n).max(0.0))
            .collect();
        ElboBreakdown::assemble(recon, kl, self.alpha.clone())
    }
}

/// Builds the single-sample ELBO for a batch: posterior samples are decoded, and
/// the prior at each level is conditioned on the posterior sample one level down.
pub fn elbo_graph<T: Scalar>(
    model: &PhiRec<T>,
    s: &mut Session<T>,
    x: Var,
    x_u: Var,
    noise: Noise<'_>,
) -> Result<ElboGraph> {
    let cfg = &model.config;
    let alpha = config_alpha(cfg)?;
    let q = model.posterior_graph(s, x, x_u, noise)?;
    let zs: Vec<Var> = q.iter().map(|v| v.z).collect();
    let feats = model.prior_features(s, x_u)?;
    let p = model.prior_graph_from(s, &feats, Conditioning::Given(&zs))?;
    let x_hat = model.decode_graph_with(s, &zs, x_u, &feats)?;
    let se = s.g.squared_error(x_hat, x);
    let recon = s.g.scale(
        se,
        T::of(-1.0 / (2.0 * cfg.likelihood_sigma * cfg.likelihood_sigma)),
    );
    let kl: Vec<Var> = q
        .iter()
        .zip(&p)
        .map(|(a, b)| s.g.gaussian_kl(a.mu, a.sigma, b.mu, b.sigma))
        .collect();
    let batch = s.g.value(x).n() as f64;
    let mut terms = vec![(recon, T::of(-1.0 / batch))];
    terms.extend(kl.iter().zip(&alpha).map(|(&k, &a)| (k, T::of(a / batch))));
    let loss = s.g.weighted_sum(&terms);
    Ok(ElboGraph {
        loss,
        recon,
        kl,
        x_hat,
        alpha,
    })
}

/// ELBO of one image pair; `seed` drives the posterior noise.
pub fn elbo<T: Scalar>(
    model: &PhiRec<T>,
    x: &ComplexImage<T>,
    x_u: &ComplexImage<T>,
    seed: u64,
) -> Result<ElboBreakdown> {
    elbo_with_noise(model, x, x_u, Noise::Items(&[seed]))
}

pub fn elbo_with_noise<T: Scalar>(
    model: &PhiRec<T>,
    x: &ComplexImage<T>,
    x_u: &ComplexImage<T>,
    noise: Noise<'_>,
) -> Result<ElboBreakdown> {
    let mut s = Session::new(&model.params, false);
    let xv = s.g.constant(x.to_tensor());
    let xu = s.g.constant(x_u.to_tensor());
    let eg = elbo_graph(model, &mut s, xv, xu, noise)?;
    Ok(eg.breakdown(&s, 1))
}

/// Minimization target `-ELBO`.
pub fn training_loss<T: Scalar>(
    model: &PhiRec<T>,
    x: &ComplexImage<T>,
    x_u: &ComplexImage<T>,
    seed: u64,
) -> Result<f64> {
    Ok(-elbo(model, x, x_u, seed)?.total)
}

impl<T: Scalar> Trainable<T> for PhiRec<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn loss(&self, s: &mut Session<T>, batch: &Batch<T>) -> Result<(Var, BTreeMap<String, f64>)> {
        let x = s.g.constant(batch.x.clone());
        let x_u = s.g.constant(batch.x_u.clone());
        let eg = elbo_graph(self, s, x, x_u, Noise::Items(&batch.seeds))?;
        let b = eg.breakdown(s, batch.len());
        let mut terms = BTreeMap::new();
        terms.insert("recon".to_string(), b.recon_term);
        for (l, k) in b.kl_per_level.iter().enumerate() {
            terms.insert(format!("kl{}", l + 1), *k);
        }
        Ok((eg.loss, terms))
    }
}
