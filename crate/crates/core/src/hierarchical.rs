//! Hierarchical conditional VAE for de-aliasing.
//!
//! Level 1 is full resolution; level `l` works at `image_size / 2^(l-1)`. Prior and
//! posterior share one architecture: a deterministic encoder producing features per
//! scale, followed by a top-down path in which each level's Gaussian is conditioned
//! on those features and on the upsampled sample of the level below. The likelihood
//! decoder merges the samples coarse-to-fine into a two-channel residual that is
//! added to the zero-filled input; with `decoder_features` it also reads the prior
//! encoder's features of x_u at every scale.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::image::{batch_tensor, ComplexImage, Provenance};
use crate::io;
use crate::nn::{inverse_positive, positive, Builder, Conv, ConvBlock, Init, ParamSet, Session};
use crate::sampling::{item_seeds, ReconstructionSampleSet, ReconstructionSampler};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of latent levels `L`.
    pub levels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub image_size: usize,
    pub in_channels: usize,
    /// Fixed standard deviation of the Gaussian likelihood.
    pub likelihood_sigma: f64,
    pub sigma_floor: f64,
    /// Assign the largest KL weight to the finest level instead of the coarsest.
    pub alpha_reversed: bool,
    /// Also feed the prior encoder's x_u features into every decoder level,
    /// not only x_u at the final residual addition.
    pub decoder_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 5,
            base_channels: 16,
            latent_channels: 2,
            image_size: 64,
            in_channels: 2,
            likelihood_sigma: 1.0,
            sigma_floor: 1e-5,
            alpha_reversed: false,
            decoder_features: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidConfig(
                "at least one latent level required".into(),
            ));
        }
        if !self.image_size.is_power_of_two()
            || !self.image_size.is_multiple_of(1 << (self.levels - 1))
        {
            return Err(Error::InvalidConfig(format!(
                "image_size {} not divisible by 2^(L-1) for L = {}",
                self.image_size, self.levels
            )));
        }
        if self.in_channels != 2 {
            return Err(Error::InvalidConfig(
                "inputs are two-channel (real, imag)".into(),
            ));
        }
        if self.base_channels == 0 || self.latent_channels == 0 {
            return Err(Error::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        if !(self.likelihood_sigma > 0.0) || !(self.sigma_floor > 0.0) {
            return Err(Error::InvalidConfig(
                "likelihood_sigma and sigma_floor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Feature channels at zero-based level `l` (doubling, capped at 4x base).
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels * (1 << l.min(2))
    }

    /// Spatial size at zero-based level `l`.
    pub fn level_size(&self, l: usize) -> usize {
        self.image_size >> l
    }
}

/// Source of the reparameterization noise ε.
#[derive(Clone, Copy, Debug)]
pub enum Noise<'a> {
    /// ε = 0, so every sample equals its mean.
    Zero,
    /// One independent stream per batch item.
    Items(&'a [u64]),
}

impl Noise<'_> {
    /// `[n, c, h, w]` standard normal draws for zero-based level `level`.
    pub fn draw<T: Scalar>(&self, shape: [usize; 4], level: usize) -> Result<Tensor<T>> {
        match self {
            Noise::Zero => Ok(Tensor::zeros(shape)),
            Noise::Items(seeds) => {
                if seeds.len() != shape[0] {
                    return Err(Error::shape(shape[0], seeds.len()));
                }
                let per = shape[1] * shape[2] * shape[3];
                let mut data = Vec::with_capacity(per * shape[0]);
                for &s in seeds.iter() {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    rng.set_stream(level as u64 + 1);
                    data.extend((0..per).map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        T::of(e)
                    }));
                }
                Tensor::from_vec(shape, data)
            }
        }
    }
}

/// How the top-down path obtains `z_{l+1}` for conditioning level `l`.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a> {
    /// Ancestral sampling with the given noise.
    Sample(Noise<'a>),
    /// Condition on externally supplied samples, one per level (finest first).
    Given(&'a [Var]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelVars {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackRole {
    Prior,
    Posterior,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentLevel<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
    pub z: Option<Tensor<T>>,
}

/// Per-level Gaussian parameters and samples, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussianStack<T> {
    pub role: StackRole,
    pub levels: Vec<LatentLevel<T>>,
}

/// Encoder plus top-down latent path; used for both prior and posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNet {
    encoder: Vec<ConvBlock>,
    conditioner: Vec<ConvBlock>,
    mu: Vec<Conv>,
    sigma: Vec<Conv>,
}

impl LatentNet {
    fn build<T: Scalar>(b: &mut Builder<T>, prefix: &str, in_ch: usize, cfg: &ModelConfig) -> Self {
        let lc = cfg.latent_channels;
        let mut net = LatentNet {
            encoder: Vec::new(),
            conditioner: Vec::new(),
            mu: Vec::new(),
            sigma: Vec::new(),
        };
        for l in 0..cfg.levels {
            let cin = if l == 0 { in_ch } else { cfg.channels(l - 1) };
            net.encoder
                .push(b.block(&format!("{prefix}.enc{}", l + 1), cin, cfg.channels(l)));
        }
        for l in 0..cfg.levels {
            let extra = if l + 1 < cfg.levels { lc } else { 0 };
            let c = cfg.channels(l);
            net.conditioner
                .push(b.block(&format!("{prefix}.cond{}", l + 1), c + extra, c));
            net.mu.push(b.conv_init(
                &format!("{prefix}.mu{}", l + 1),
                c,
                lc,
                1,
                Init::He(0.1),
                0.0,
            ));
            net.sigma.push(b.conv_init(
                &format!("{prefix}.sigma{}", l + 1),
                c,
                lc,
                1,
                Init::He(0.1),
                inverse_positive(1.0, cfg.sigma_floor),
            ));
        }
        net
    }

    /// Deterministic features per level, finest first.
    pub fn encode<T: Scalar>(&self, s: &mut Session<T>, input: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = input;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = s.g.avg_pool2(h);
            }
            h = block.apply(s, h);
            feats.push(h);
        }
        feats
    }

    /// Top-down Gaussian parameters and samples, finest first.
    pub fn latents<T: Scalar>(
        &self,
        s: &mut Session<T>,
        feats: &[Var],
        cfg: &ModelConfig,
        cond: Conditioning<'_>,
    ) -> Result<Vec<LevelVars>> {
        let levels = cfg.levels;
        if let Conditioning::Given(zs) = cond {
            if zs.len() != levels {
                return Err(Error::InvalidStack(format!(
                    "{} conditioning samples for {levels} levels",
                    zs.len()
                )));
            }
        }
        let mut out: Vec<Option<LevelVars>> = vec![None; levels];
        let mut below: Option<Var> = None;
        for l in (0..levels).rev() {
            let inp = match below {
                Some(z) => {
                    let up = s.g.upsample2(z);
                    s.g.concat(&[feats[l], up])
                }
                None => feats[l],
            };
            let h = self.conditioner[l].apply(s, inp);
            let mu = self.mu[l].apply(s, h);
            let pre = self.sigma[l].apply(s, h);
            let sigma = positive(s, pre, cfg.sigma_floor);
            let z = match cond {
                Conditioning::Given(zs) => zs[l],
                Conditioning::Sample(noise) => {
                    let eps = noise.draw::<T>(s.g.value(mu).shape(), l)?;
                    let eps = s.g.constant(eps);
                    let scaled = s.g.mul(sigma, eps);
                    s.g.add(mu, scaled)
                }
            };
            out[l] = Some(LevelVars { mu, sigma, z });
            below = Some(z);
        }
        Ok(out
            .into_iter()
            .map(|v| v.expect("every level visited"))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    blocks: Vec<ConvBlock>,
    out: Conv,
}

/// The full model: prior, posterior and likelihood networks with their parameters.
#[derive(Clone, Debug)]
pub struct PhiRec<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
    prior: LatentNet,
    posterior: LatentNet,
    decoder: Decoder,
}

impl<T: Scalar> PhiRec<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed);
        let prior = LatentNet::build(&mut b, "prior", config.in_channels, &config);
        let posterior = LatentNet::build(&mut b, "posterior", 2 * config.in_channels, &config);
        let lc = config.latent_channels;
        let mut blocks = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let mut extra = if l + 1 < config.levels {
                config.channels(l + 1)
            } else {
                0
            };
            if config.decoder_features {
                extra += config.channels(l);
            }
            blocks.push(b.block(
                &format!("dec.block{}", l + 1),
                lc + extra,
                config.channels(l),
            ));
        }
        let out = b.conv_init(
            "dec.out",
            config.channels(0),
            config.in_channels,
            1,
            Init::He(0.1),
            0.0,
        );
        Ok(PhiRec {
            config,
            params,
            prior,
            posterior,
            decoder: Decoder { blocks, out },
        })
    }

    /// Rebuild the architecture for `config` and adopt `params`.
    pub fn from_params(config: ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_from(params)?;
        Ok(model)
    }

    /// Index of the residual output kernel and bias.
    pub fn residual_head(&self) -> (usize, usize) {
        (self.decoder.out.w, self.decoder.out.b)
    }

    pub fn prior_net(&self) -> &LatentNet {
        &self.prior
    }

    pub fn posterior_net(&self) -> &LatentNet {
        &self.posterior
    }

    fn check_image(&self, img: &ComplexImage<T>) -> Result<()> {
        let n = self.config.image_size;
        if img.dim() != (n, n) {
            return Err(Error::shape((n, n), img.dim()));
        }
        Ok(())
    }

    fn check_batch(&self, t: &Tensor<T>) -> Result<()> {
        let n = self.config.image_size;
        if t.shape()[1..] != [self.config.in_channels, n, n] {
            return Err(Error::shape(
                [self.config.in_channels, n, n],
                &t.shape()[1..],
            ));
        }
        Ok(())
    }

    pub fn prior_graph(
        &self,
        s: &mut Session<T>,
        x_u: Var,
        cond: Conditioning<'_>,
    ) -> Result<Vec<LevelVars>> {
        let feats = self.prior_features(s, x_u)?;
        self.prior.latents(s, &feats, &self.config, cond)
    }

    /// Prior encoder features of `x_u`, finest first.
    pub fn prior_features(&self, s: &mut Session<T>, x_u: Var) -> Result<Vec<Var>> {
        self.check_batch(s.g.value(x_u))?;
        Ok(self.prior.encode(s, x_u))
    }

    /// Prior latents from precomputed encoder features.
    pub fn prior_graph_from(
        &self,
        s: &mut Session<T>,
        feats: &[Var],
        cond: Conditioning<'_>,
    ) -> Result<Vec<LevelVars>> {
        self.prior.latents(s, feats, &self.config, cond)
    }

    pub fn posterior_graph(
        &self,
        s: &mut Session<T>,
        x: Var,
        x_u: Var,
        noise: Noise<'_>,
    ) -> Result<Vec<LevelVars>> {
        self.check_batch(s.g.value(x))?;
        self.check_batch(s.g.value(x_u))?;
        let inp = s.g.concat(&[x_u, x]);
        let feats = self.posterior.encode(s, inp);
        self.posterior
            .latents(s, &feats, &self.config, Conditioning::Sample(noise))
    }

    /// Residual-adding decoder; `zs` holds one sample per level, finest first.
    pub fn decode_graph(&self, s: &mut Session<T>, zs: &[Var], x_u: Var) -> Result<Var> {
        let feats = if self.config.decoder_features {
            self.prior_features(s, x_u)?
        } else {
            Vec::new()
        };
        self.decode_graph_with(s, zs, x_u, &feats)
    }

    /// As [`decode_graph`](Self::decode_graph) with the prior features supplied;
    /// `feats` is ignored unless `decoder_features` is set.
    pub fn decode_graph_with(
        &self,
        s: &mut Session<T>,
        zs: &[Var],
        x_u: Var,
        feats: &[Var],
    ) -> Result<Var> {
        let levels = self.config.levels;
        if zs.len() != levels {
            return Err(Error::InvalidStack(format!(
                "{} samples for {levels} levels",
                zs.len()
            )));
        }
        for (l, &z) in zs.iter().enumerate() {
            let want = self.config.level_size(l);
            let shape = s.g.value(z).shape();
            if shape[1] != self.config.latent_channels || shape[2] != want || shape[3] != want {
                return Err(Error::InvalidStack(format!(
                    "level {} sample has shape {shape:?}",
                    l + 1
                )));
            }
        }
        if self.config.decoder_features && feats.len() != levels {
            return Err(Error::InvalidStack(format!(
                "{} feature maps for {levels} levels",
                feats.len()
            )));
        }
        let mut h: Option<Var> = None;
        for l in (0..levels).rev() {
            let mut parts = vec![zs[l]];
            if let Some(prev) = h {
                parts.push(s.g.upsample2(prev));
            }
            if self.config.decoder_features {
                parts.push(feats[l]);
            }
            let inp = if parts.len() == 1 {
                parts[0]
            } else {
                s.g.concat(&parts)
            };
            h = Some(self.decoder.blocks[l].apply(s, inp));
        }
        let r = self.decoder.out.apply(s, h.expect("at least one level"));
        Ok(s.g.add(x_u, r))
    }

    fn stack_from(
        &self,
        s: &Session<T>,
        vars: &[LevelVars],
        role: StackRole,
    ) -> LatentGaussianStack<T> {
        LatentGaussianStack {
            role,
            levels: vars
                .iter()
                .map(|v| LatentLevel {
                    mu: s.g.value(v.mu).clone(),
                    sigma: s.g.value(v.sigma).clone(),
                    z: Some(s.g.value(v.z).clone()),
                })
                .collect(),
        }
    }

    pub fn prior_forward(
        &self,
        x_u: &ComplexImage<T>,
        noise: Noise<'_>,
    ) -> Result<LatentGaussianStack<T>> {
        self.check_image(x_u)?;
        let mut s = Session::new(&self.params, false);
        let xu = s.g.constant(x_u.to_tensor());
        let vars = self.prior_graph(&mut s, xu, Conditioning::Sample(noise))?;
        Ok(self.stack_from(&s, &vars, StackRole::Prior))
    }

    pub fn posterior_forward(
        &self,
        x: &ComplexImage<T>,
        x_u: &ComplexImage<T>,
        noise: Noise<'_>,
    ) -> Result<LatentGaussianStack<T>> {
        self.check_image(x)?;
        self.check_image(x_u)?;
        let mut s = Session::new(&self.params, false);
        let xv = s.g.constant(x.to_tensor());
        let xu = s.g.constant(x_u.to_tensor());
        let vars = self.posterior_graph(&mut s, xv, xu, noise)?;
        Ok(self.stack_from(&s, &vars, StackRole::Posterior))
    }

    /// Mean of the Gaussian likelihood for the samples in `stack`.
    pub fn likelihood_decode(
        &self,
        stack: &LatentGaussianStack<T>,
        x_u: &ComplexImage<T>,
    ) -> Result<ComplexImage<T>> {
        self.check_image(x_u)?;
        let mut s = Session::new(&self.params, false);
        let mut zs = Vec::with_capacity(stack.levels.len());
        for (l, level) in stack.levels.iter().enumerate() {
            let z = level
                .z
                .as_ref()
                .ok_or_else(|| Error::InvalidStack(format!("level {} has no sample", l + 1)))?;
            if z.n() != 1 {
                return Err(Error::InvalidStack(
                    "decode expects single-item stacks".into(),
                ));
            }
            zs.push(s.g.constant(z.clone()));
        }
        let xu = s.g.constant(x_u.to_tensor());
        let out = self.decode_graph(&mut s, &zs, xu)?;
        ComplexImage::from_tensor(s.g.value(out), 0, Provenance::Sample)
    }

    /// Decoded prior samples, one per entry of `seeds`.
    pub fn sample_with_seeds(
        &self,
        x_u: &ComplexImage<T>,
        seeds: &[u64],
    ) -> Result<ReconstructionSampleSet<T>> {
        self.check_image(x_u)?;
        if seeds.is_empty() {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        let n = seeds.len();
        let mut s = Session::new(&self.params, false);
        let xu1 = s.g.constant(x_u.to_tensor());
        let feats1 = self.prior.encode(&mut s, xu1);
        let feats: Vec<Var> = feats1.iter().map(|&f| s.g.repeat_batch(f, n)).collect();
        let xu = s.g.repeat_batch(xu1, n);
        let vars = self.prior.latents(
            &mut s,
            &feats,
            &self.config,
            Conditioning::Sample(Noise::Items(seeds)),
        )?;
        let zs: Vec<Var> = vars.iter().map(|v| v.z).collect();
        let out = self.decode_graph_with(&mut s, &zs, xu, &feats)?;
        let samples = (0..n)
            .map(|i| ComplexImage::from_tensor(s.g.value(out), i, Provenance::Sample))
            .collect::<Result<Vec<_>>>()?;
        ReconstructionSampleSet::from_samples(samples, "phirec")
    }

    pub fn sample_reconstructions(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
    ) -> Result<ReconstructionSampleSet<T>> {
        if n < 1 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        self.sample_with_seeds(x_u, &item_seeds(seed, n))
    }

    pub fn save(&self, dir: &Path) -> Result<io::WeightsManifest> {
        io::save_weights(
            dir,
            "phirec",
            serde_json::to_value(&self.config).expect("config serializes"),
            &self.params,
            serde_json::json!({}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = io::load_weights::<T>(dir)?;
        if manifest.kind != "phirec" {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                detail: format!("weights of kind {} where phirec expected", manifest.kind),
            });
        }
        let config: ModelConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::Corrupt {
                path: dir.to_path_buf(),
                detail: format!("model config: {e}"),
            })?;
        Self::from_params(config, &params)
    }

    /// Stack `images` into a constant batch tensor.
    pub fn batch(images: &[&ComplexImage<T>]) -> Result<Tensor<T>> {
        batch_tensor(images)
    }
}

impl<T: Scalar> ReconstructionSampler<T> for PhiRec<T> {
    fn name(&self) -> String {
        "phirec".into()
    }

    fn sample(
        &self,
        x_u: &ComplexImage<T>,
        n: usize,
        seed: u64,
    ) -> Result<ReconstructionSampleSet<T>> {
        self.sample_reconstructions(x_u, n, seed)
    }
}
