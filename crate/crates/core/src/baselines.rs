//! Comparison methods sharing one U-Net backbone: MC dropout, heteroscedastic
//! variance, their combination, deep ensembles, and a single-global-latent
//! conditional VAE in the style of the probabilistic U-Net.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::hierarchical::Noise;
use crate::image::{ComplexImage, Provenance};
use crate::io;
use crate::nn::{inverse_positive, positive, Builder, Conv, ConvBlock, Init, ParamSet, Session};
use crate::sampling::{item_seeds, ReconstructionSampleSet, ReconstructionSampler};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{Batch, Trainable};

/// Encoder-decoder with skip connections between matching scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Number of scales, including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    pub image_size: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            depth: 3,
            base_channels: 16,
            image_size: 64,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "U-Net depth and channels must be positive".into(),
            ));
        }
        if !self.image_size.is_power_of_two() || self.image_size >> (self.depth - 1) == 0 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} incompatible with depth {}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }

    pub fn channels(&self, l: usize) -> usize {
        self.base_channels * (1 << l.min(2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
}

impl UNet {
    pub fn build<T: Scalar>(
        b: &mut Builder<T>,
        prefix: &str,
        in_ch: usize,
        cfg: &UNetConfig,
    ) -> Self {
        let enc = (0..cfg.depth)
            .map(|l| {
                let cin = if l == 0 { in_ch } else { cfg.channels(l - 1) };
                b.block(&format!("{prefix}.enc{}", l + 1), cin, cfg.channels(l))
            })
            .collect();
        let dec = (0..cfg.depth.saturating_sub(1))
            .map(|l| {
                b.block(
                    &format!("{prefix}.dec{}", l + 1),
                    cfg.channels(l) + cfg.channels(l + 1),
                    cfg.channels(l),
                )
            })
            .collect();
        UNet { enc, dec }
    }

    /// Encoder features per scale, finest first.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for (l, block) in self.enc.iter().enumerate() {
            if l > 0 {
                h = s.g.avg_pool2(h);
            }
            h = block.apply(s, h);
            feats.push(h);
        }
        feats
    }

    /// Full-resolution decoder features with `base_channels` channels.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Var {
        let feats = self.encode(s, x);
        let mut h = *feats.last().expect("depth >= 1");
        for l in (0..self.dec.len()).rev() {
            let up = s.g.upsample2(h);
            let cat = s.g.concat(&[feats[l], up]);
            h = self.dec[l].apply(s, cat);
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    McDropout,
    Heteroscedastic,
    McDropoutHetero,
    Ensemble,
    ProbUnet,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::McDropout => "mc_dropout",
            BaselineKind::Heteroscedastic => "heteroscedastic",
            BaselineKind::McDropoutHetero => "mc_dropout_hetero",
            BaselineKind::Ensemble => "ensemble",
            BaselineKind::ProbUnet => "prob_unet",
        }
    }

    fn uses_dropout(self) -> bool {
        matches!(
            self,
            BaselineKind::McDropout | BaselineKind::McDropoutHetero
        )
    }

    fn heteroscedastic(self) -> bool {
        matches!(
            self,
            BaselineKind::Heteroscedastic | BaselineKind::McDropoutHetero
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    /// Member seeds; derived from the model seed when empty.
    pub ensemble_seeds: Vec<u64>,
    pub latent_dim: usize,
    pub unet: UNetConfig,
    pub sigma_floor: f64,
    /// Fixed likelihood scale of the deterministic and cVAE reconstruction terms.
    pub likelihood_sigma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::McDropout,
            dropout_rate: 0.1,
            ensemble_size: 5,
            ensemble_seeds: Vec::new(),
            latent_dim: 6,
            unet: UNetConfig::default(),
            sigma_floor: 1e-5,
            likelihood_sigma: 1.0,
        }
    }
}

impl BaselineConfig {
    pub fn of_kind(kind: BaselineKind) -> Self {
        BaselineConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(
                "dropout_rate must lie in [0, 1)".into(),
            ));
        }
        if self.kind.uses_dropout() && self.dropout_rate == 0.0 {
            return Err(Error::InvalidConfig(format!(
                "{} needs dropout_rate > 0, otherwise all samples coincide",
                self.kind.name()
            )));
        }
        if self.kind == BaselineKind::Ensemble {
            if self.ensemble_size < 2 {
                return Err(Error::InvalidConfig("ensemble_size must be >= 2".into()));
            }
            if !self.ensemble_seeds.is_empty() {
                if self.ensemble_seeds.len() != self.ensemble_size {
                    return Err(Error::InvalidConfig(
                        "one seed per ensemble member required".into(),
                    ));
                }
                let unique: HashSet<_> = self.ensemble_seeds.iter().collect();
                if unique.len() != self.ensemble_seeds.len() {
                    return Err(Error::InvalidConfig(
                        "ensemble member seeds must be distinct".into(),
                    ));
                }
            }
        }
        if self.kind == BaselineKind::ProbUnet && self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be positive".into()));
        }
        if !(self.sigma_floor > 0.0) || !(self.likelihood_sigma > 0.0) {
            return Err(Error::InvalidConfig(
                "sigma_floor and likelihood_sigma must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Member seeds for an ensemble trained from `seed`.
    pub fn member_seeds(&self, seed: u64) -> Vec<u64> {
        if self.ensemble_seeds.is_empty() {
            (0..self.ensemble_size as u64)
                .map(|i| seed.wrapping_add(i * 7919))
                .collect()
        } else {
            self.ensemble_seeds.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LatentHead {
    net: Vec<ConvBlock>,
    mu: Conv,
    sigma: Conv,
}

impl LatentHead {
    fn build<T: Scalar>(
        b: &mut Builder<T>,
        prefix: &str,
        in_ch: usize,
        cfg: &BaselineConfig,
    ) -> Self {
        let u = &cfg.unet;
        let net = (0..u.depth)
            .map(|l| {
                let cin = if l == 0 { in_ch } else { u.channels(l - 1) };
                b.block(&format!("{prefix}.enc{}", l + 1), cin, u.channels(l))
            })
            .collect();
        let c = u.channels(u.depth - 1);
        LatentHead {
            net,
            mu: b.conv_init(
                &format!("{prefix}.mu"),
                c,
                cfg.latent_dim,
                1,
                Init::He(0.1),
                0.0,
            ),
            sigma: b.conv_init(
                &format!("{prefix}.sigma"),
                c,
                cfg.latent_dim,
                1,
                Init::He(0.1),
                inverse_positive(1.0, cfg.sigma_floor),
            ),
        }
    }

    /// `[n, latent_dim, 1, 1]` mean and scale.
    fn apply<T: Scalar>(&self, s: &mut Session<T>, x: Var, floor: f64) -> (Var, Var) {
        let mut h = x;
        for (l, block) in self.net.iter().enumerate() {
            if l > 0 {
                h = s.g.avg_pool2(h);
            }
            h = block.apply(s, h);
        }
        let pooled = s.g.global_avg_pool(h);
        let mu = self.mu.apply(s, pooled);
        let pre = self.sigma.apply(s, pooled);
        (mu, positive(s, pre, floor))
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ProbParts {
    prior: LatentHead,
    posterior: LatentHead,
    fcomb: Conv,
}

/// Outputs of one backbone pass.
#[derive(Clone, Copy, Debug)]
pub struct BaselineOutput {
    /// `x_u + residual`.
    pub mean: Var,
    /// Per-pixel scale `[n, 1, h, w]` for heteroscedastic kinds.
    pub sigma: Option<Var>,
}

/// One U-Net with the heads required by its kind.
#[derive(Clone, Debug)]
pub struct Baseline<T: Scalar> {
    pub config: BaselineConfig,
    pub params: ParamSet<T>,
    net: UNet,
    residual: Conv,
    sigma_head: Option<Conv>,
    prob: Option<ProbParts>,
}

impl<T: Scalar> Baseline<T> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed);
        let net = UNet::build(&mut b, "unet", 2, &config.unet);
        let c0 = config.unet.base_channels;
        let prob = (config.kind == BaselineKind::ProbUnet).then(|| ProbParts {
            prior: LatentHead::build(&mut b, "prior", 2, &config),
            posterior: LatentHead::build(&mut b, "posterior", 4, &config),
            fcomb: b.conv("fcomb", c0 + config.latent_dim, c0, 1),
        });
        let residual = b.conv_init("residual", c0, 2, 1, Init::He(0.1), 0.0);
        let sigma_head = config.kind.heteroscedastic().then(|| {
            b.conv_init(
                "sigma",
                c0,
                1,
                1,
                Init::He(0.1),
                inverse_positive(0.1, config.sigma_floor),
            )
        });
        Ok(Baseline {
            config,
            params,
            net,
            residual,
            sigma_head,
            prob,
        })
    }

    pub fn from_params(config: BaselineConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    /// Parameter indices of the residual head (kernel, bias).
    pub fn residual_head(&self) -> (usize, usize) {
        (self.residual.w, self.residual.b)
    }

    pub fn sigma_head(&self) -> Option<(usize, usize)> {
        self.sigma_head.map(|c| (c.w, c.b))
    }

    fn check(&self, t: &Tensor<T>) -> Result<()> {
        let n = self.config.unet.image_size;
        if t.shape()[1..] != [2, n, n] {
            return Err(Error::shape([2, n, n], &t.shape()[1..]));
        }
        Ok(())
    }

    /// Backbone pass; `latent` is a `[n, latent_dim, 1, 1]` vector for the cVAE kind.
    pub fn forward_graph(
        &self,
        s: &mut Session<T>,
        x_u: Var,
        latent: Option<Var>,
    ) -> Result<BaselineOutput> {
        self.check(s.g.value(x_u))?;
        let mut h = self.net.forward(s, x_u);
        if let Some(p) = &self.prob {
            let z = latent
                .ok_or_else(|| Error::InvalidArgument("prob_unet pass needs a latent".into()))?;
            let n = self.config.unet.image_size;
            let zb = s.g.broadcast(z, n, n);
            let cat = s.g.concat(&[h, zb]);
            let f = p.fcomb.apply(s, cat);
            h = s.g.silu(f);
        }
        let r = self.residual.apply(s, h);
        let mean = s.g.add(x_u, r);
        let sigma = self.sigma_head.map(|c| {
            let pre = c.apply(s, h);
            positive(s, pre, self.config.sigma_floor)
        });
        Ok(BaselineOutput { mean, sigma })
    }

    /// Image-conditional prior over the global latent (cVAE kind only).
    pub fn prior_graph(&self, s: &mut Session<T>, x_u: Var) -> Result<(Var, Var)> {
        let p = self.prob_parts()?;
        Ok(p.prior.apply(s, x_u, self.config.sigma_floor))
    }

    fn prob_parts(&self) -> Result<&ProbParts> {
        self.prob.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no latent", self.config.kind.name()))
        })
    }

    fn reparam(s: &mut Session<T>, mu: Var, sigma: Var, noise: Noise<'_>) -> Result<Var> {
        let eps = noise.draw::<T>(s.g.value(mu).shape(), 0)?;
        let eps = s.g.constant(eps);
        let se = s.g.mul(sigma, eps);
        Ok(s.g.add(mu, se))
    }

    /// Single pass on one image with the given stochastic settings.
    fn run(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        dropout_seed: Option<u64>,
        noise: Noise<'_>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let mut s = Session::new(&self.params, false);
        if let Some(seed) = dropout_seed {
            s = s.with_dropout(self.config.dropout_rate, seed);
        }
        let one = s.g.constant(x_u.to_tensor());
        let xu = if n > 1 { s.g.repeat_batch(one, n) } else { one };
        let latent = if self.prob.is_some() {
            let (mu, sigma) = self.prior_graph(&mut s, xu)?;
            Some(Self::reparam(&mut s, mu, sigma, noise)?)
        } else {
            None
        };
        let out = self.forward_graph(&mut s, xu, latent)?;
        Ok((
            s.g.value(out.mean).clone(),
            out.sigma.map(|v| s.g.value(v).clone()),
        ))
    }

    /// Deterministic prediction (dropout off; prior mean latent for the cVAE).
    pub fn predict(&self, x_u: &ComplexImage<T>) -> Result<ComplexImage<T>> {
        let (mean, _) = self.run(x_u, 1, None, Noise::Zero)?;
        ComplexImage::from_tensor(&mean, 0, Provenance::Sample)
    }

    /// Predicted mean and per-pixel scale (heteroscedastic kinds).
    pub fn predict_with_sigma(
        &self,
        x_u: &ComplexImage<T>,
    ) -> Result<(ComplexImage<T>, Tensor<T>)> {
        let (mean, sigma) = self.run(x_u, 1, None, Noise::Zero)?;
        let sigma =
            sigma.ok_or_else(|| Error::InvalidArgument("model has no sigma head".into()))?;
        Ok((
            ComplexImage::from_tensor(&mean, 0, Provenance::Sample)?,
            sigma,
        ))
    }

    /// Dropout-active pass; identical seeds give identical outputs.
    pub fn predict_dropout(&self, x_u: &ComplexImage<T>, seed: u64) -> Result<ComplexImage<T>> {
        let (mean, _) = self.run(x_u, 1, Some(seed), Noise::Zero)?;
        ComplexImage::from_tensor(&mean, 0, Provenance::Sample)
    }

    /// Draw `μ + σ ε` per item, ε independent per channel.
    fn gaussian_draws(
        mean: &Tensor<T>,
        sigma: &Tensor<T>,
        seeds: &[u64],
    ) -> Result<Vec<ComplexImage<T>>> {
        let mut out = Vec::with_capacity(seeds.len());
        for (i, &seed) in seeds.iter().enumerate() {
            let item = if mean.n() == 1 { 0 } else { i };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let [_, _, h, w] = mean.shape();
            let mut t = Tensor::zeros([1, 2, h, w]);
            let sp = sigma.plane(item, 0);
            for c in 0..2 {
                let mp = mean.plane(item, c);
                for (k, v) in t.plane_mut(0, c).iter_mut().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = mp[k] + sp[k] * T::of(e);
                }
            }
            out.push(ComplexImage::from_tensor(&t, 0, Provenance::Sample)?);
        }
        Ok(out)
    }

    pub fn sample_set(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
    ) -> Result<ReconstructionSampleSet<T>> {
        if n < 1 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        let seeds = item_seeds(seed, n);
        let kind = self.config.kind;
        let samples = match kind {
            BaselineKind::McDropout | BaselineKind::McDropoutHetero => {
                let (mean, sigma) = self.run(x_u, n, Some(seed), Noise::Zero)?;
                if kind == BaselineKind::McDropout {
                    (0..n)
                        .map(|i| ComplexImage::from_tensor(&mean, i, Provenance::Sample))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Self::gaussian_draws(&mean, sigma.as_ref().expect("sigma head"), &seeds)?
                }
            }
            BaselineKind::Heteroscedastic => {
                let (mean, sigma) = self.run(x_u, 1, None, Noise::Zero)?;
                Self::gaussian_draws(&mean, sigma.as_ref().expect("sigma head"), &seeds)?
            }
            BaselineKind::ProbUnet => {
                let (mean, _) = self.run(x_u, n, None, Noise::Items(&seeds))?;
                (0..n)
                    .map(|i| ComplexImage::from_tensor(&mean, i, Provenance::Sample))
                    .collect::<Result<Vec<_>>>()?
            }
            BaselineKind::Ensemble => vec![self.predict(x_u)?; n],
        };
        ReconstructionSampleSet::from_samples(samples, kind.name())
    }

    /// Test hook: sample with an overridden dropout rate (which may be zero).
    pub fn sample_with_dropout_rate(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
        rate: f64,
    ) -> Result<ReconstructionSampleSet<T>> {
        let mut m = self.clone();
        m.config.dropout_rate = rate;
        let (mean, _) = m.run(x_u, n, Some(seed), Noise::Zero)?;
        let samples = (0..n)
            .map(|i| ComplexImage::from_tensor(&mean, i, Provenance::Sample))
            .collect::<Result<Vec<_>>>()?;
        ReconstructionSampleSet::from_samples(samples, self.config.kind.name())
    }

    pub fn save(&self, dir: &Path) -> Result<io::WeightsManifest> {
        io::save_weights(
            dir,
            self.config.kind.name(),
            serde_json::to_value(&self.config).expect("config serializes"),
            &self.params,
            json!({}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = io::load_weights::<T>(dir)?;
        let config: BaselineConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::Corrupt {
                path: dir.to_path_buf(),
                detail: format!("baseline config: {e}"),
            })?;
        Self::from_params(config, &params)
    }
}

impl<T: Scalar> Trainable<T> for Baseline<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn dropout_rate(&self) -> f64 {
        if self.config.kind.uses_dropout() {
            self.config.dropout_rate
        } else {
            0.0
        }
    }

    fn loss(&self, s: &mut Session<T>, batch: &Batch<T>) -> Result<(Var, BTreeMap<String, f64>)> {
        let n = batch.len() as f64;
        let x = s.g.constant(batch.x.clone());
        let xu = s.g.constant(batch.x_u.clone());
        let inv2s2 = 1.0 / (2.0 * self.config.likelihood_sigma * self.config.likelihood_sigma);
        let mut terms = BTreeMap::new();
        let loss = if self.config.kind == BaselineKind::ProbUnet {
            let p = self.prob_parts()?;
            let floor = self.config.sigma_floor;
            let cat = s.g.concat(&[xu, x]);
            let (mu_q, s_q) = p.posterior.apply(s, cat, floor);
            let (mu_p, s_p) = p.prior.apply(s, xu, floor);
            let z = Self::reparam(s, mu_q, s_q, Noise::Items(&batch.seeds))?;
            let out = self.forward_graph(s, xu, Some(z))?;
            let se = s.g.squared_error(out.mean, x);
            let kl = s.g.gaussian_kl(mu_q, s_q, mu_p, s_p);
            terms.insert("recon".into(), -s.g.value(se).value().as_f64() * inv2s2 / n);
            terms.insert("kl".into(), s.g.value(kl).value().as_f64() / n);
            s.g.weighted_sum(&[(se, T::of(inv2s2 / n)), (kl, T::of(1.0 / n))])
        } else {
            let out = self.forward_graph(s, xu, None)?;
            match out.sigma {
                Some(sigma) => {
                    let nll = s.g.hetero_nll(out.mean, sigma, x);
                    terms.insert("nll".into(), s.g.value(nll).value().as_f64() / n);
                    s.g.scale(nll, T::of(1.0 / n))
                }
                None => {
                    let se = s.g.squared_error(out.mean, x);
                    terms.insert("se".into(), s.g.value(se).value().as_f64() / n);
                    s.g.scale(se, T::of(inv2s2 / n))
                }
            }
        };
        Ok((loss, terms))
    }
}

impl<T: Scalar> ReconstructionSampler<T> for Baseline<T> {
    fn name(&self) -> String {
        self.config.kind.name().into()
    }

    fn sample(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
    ) -> Result<ReconstructionSampleSet<T>> {
        self.sample_set(x_u, n, seed)
    }

    fn quick_estimate(&self, x_u: &ComplexImage<T>, seed: u64) -> Result<ndarray::Array2<T>> {
        match self.config.kind {
            BaselineKind::ProbUnet | BaselineKind::McDropout | BaselineKind::McDropoutHetero => {
                Ok(self.sample_set(x_u, 4, seed)?.mean_map)
            }
            _ => Ok(self.predict(x_u)?.magnitude()),
        }
    }
}

/// Independently trained deterministic members; the sample set is the member predictions.
#[derive(Clone, Debug)]
pub struct Ensemble<T: Scalar> {
    pub config: BaselineConfig,
    pub seeds: Vec<u64>,
    pub members: Vec<Baseline<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EnsembleIndex {
    kind: String,
    config: BaselineConfig,
    seeds: Vec<u64>,
    members: Vec<String>,
}

pub const ENSEMBLE_INDEX: &str = "ensemble.json";

impl<T: Scalar> Ensemble<T> {
    /// Untrained members, one per seed; duplicate seeds are rejected.
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        if config.kind != BaselineKind::Ensemble {
            return Err(Error::InvalidConfig(
                "ensemble requires kind = ensemble".into(),
            ));
        }
        let seeds = config.member_seeds(seed);
        let checked = BaselineConfig {
            ensemble_seeds: seeds.clone(),
            ..config.clone()
        };
        checked.validate()?;
        Self::from_members_unchecked(
            checked.clone(),
            seeds.clone(),
            seeds
                .iter()
                .map(|&s| Baseline::new(checked.clone(), s))
                .collect::<Result<_>>()?,
        )
    }

    fn from_members_unchecked(
        config: BaselineConfig,
        seeds: Vec<u64>,
        members: Vec<Baseline<T>>,
    ) -> Result<Self> {
        Ok(Ensemble {
            config,
            seeds,
            members,
        })
    }

    /// Test hook: assemble members without the distinct-seed check.
    pub fn from_members(
        config: BaselineConfig,
        seeds: Vec<u64>,
        members: Vec<Baseline<T>>,
    ) -> Result<Self> {
        if members.len() != seeds.len() || members.is_empty() {
            return Err(Error::InvalidConfig("one seed per member required".into()));
        }
        Self::from_members_unchecked(config, seeds, members)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut names = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("member_{i:02}");
            m.save(&dir.join(&name))?;
            names.push(name);
        }
        io::write_json(
            &dir.join(ENSEMBLE_INDEX),
            &EnsembleIndex {
                kind: "ensemble".into(),
                config: self.config.clone(),
                seeds: self.seeds.clone(),
                members: names,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: EnsembleIndex = io::read_json(&dir.join(ENSEMBLE_INDEX))?;
        let members = index
            .members
            .iter()
            .map(|m| Baseline::load(&dir.join(m)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(index.config, index.seeds, members)
    }
}

impl<T: Scalar> ReconstructionSampler<T> for Ensemble<T> {
    fn name(&self) -> String {
        "ensemble".into()
    }

    /// Returns the member predictions; `n` caps the count, the seed is unused.
    fn sample(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        _seed: u64,
    ) -> Result<ReconstructionSampleSet<T>> {
        if n < 1 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        let samples = self
            .members
            .iter()
            .take(n)
            .map(|m| m.predict(x_u))
            .collect::<Result<Vec<_>>>()?;
        ReconstructionSampleSet::from_samples(samples, "ensemble")
    }
}
