//! Deterministic segmenter on magnitude images and propagation of reconstruction
//! sample sets into segmentation distributions and γ-maps.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acquisition::Sample;
use crate::baselines::{UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Var};
use crate::image::{real_batch_tensor, ComplexImage};
use crate::io;
use crate::nn::{Builder, Conv, ParamSet, Session};
use crate::sampling::ReconstructionSampleSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{fit, Batch, LogEntry, TrainConfig, TrainOutcome, Trainable};

/// Guard added inside the logarithm of the γ cross-entropy.
pub const GAMMA_LOG_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub unet: UNetConfig,
    pub n_classes: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            unet: UNetConfig::default(),
            n_classes: 5,
        }
    }
}

/// Per-pixel class probabilities, `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationProbMap {
    pub probs: Array3<f64>,
}

impl SegmentationProbMap {
    pub fn new(probs: Array3<f64>) -> Result<Self> {
        for lane in probs.lanes(Axis(0)) {
            let total: f64 = lane.sum();
            if lane.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!(
                    "probabilities sum to {total}"
                )));
            }
        }
        Ok(SegmentationProbMap { probs })
    }

    pub fn n_classes(&self) -> usize {
        self.probs.dim().0
    }

    pub fn dim(&self) -> (usize, usize) {
        let (_, h, w) = self.probs.dim();
        (h, w)
    }

    pub fn argmax(&self) -> Array2<usize> {
        let (_, h, w) = self.probs.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let lane = self.probs.slice(ndarray::s![.., y, x]);
            let mut best = 0;
            for (c, &p) in lane.iter().enumerate() {
                if p > lane[best] {
                    best = c;
                }
            }
            best
        })
    }

    /// One-hot map of the argmax labels.
    pub fn hardened(&self) -> Self {
        let labels = self.argmax();
        let (c, h, w) = self.probs.dim();
        SegmentationProbMap {
            probs: Array3::from_shape_fn(
                (c, h, w),
                |(k, y, x)| if labels[(y, x)] == k { 1.0 } else { 0.0 },
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSampleSet {
    pub maps: Vec<SegmentationProbMap>,
    pub mean_map: SegmentationProbMap,
    pub gamma_map: Array2<f64>,
}

/// Element-wise average of the member maps.
pub fn mean_prob_map(maps: &[SegmentationProbMap]) -> Result<SegmentationProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no segmentation maps".into()))?;
    let mut acc = Array3::<f64>::zeros(first.probs.dim());
    for m in maps {
        if m.probs.dim() != first.probs.dim() {
            return Err(Error::shape(first.probs.dim(), m.probs.dim()));
        }
        acc += &m.probs;
    }
    acc /= maps.len() as f64;
    Ok(SegmentationProbMap { probs: acc })
}

/// `γ(p) = (1/n) Σ_i -Σ_c s̄_c(p) log(s_ic(p) + ε)`; with `hard`, members are
/// replaced by their one-hot argmax before both the mean and the cross-entropy.
pub fn gamma_map(maps: &[SegmentationProbMap], hard: bool) -> Result<Array2<f64>> {
    if maps.len() < 2 {
        return Err(Error::InvalidArgument("γ needs at least two maps".into()));
    }
    let owned: Vec<SegmentationProbMap>;
    let maps = if hard {
        owned = maps.iter().map(|m| m.hardened()).collect();
        &owned[..]
    } else {
        maps
    };
    let mean = mean_prob_map(maps)?;
    let (c, h, w) = mean.probs.dim();
    let mut gamma = Array2::<f64>::zeros((h, w));
    for m in maps {
        for k in 0..c {
            for y in 0..h {
                for x in 0..w {
                    gamma[(y, x)] -=
                        mean.probs[(k, y, x)] * (m.probs[(k, y, x)] + GAMMA_LOG_EPS).ln();
                }
            }
        }
    }
    gamma /= maps.len() as f64;
    // the entropy of a confident pixel is below zero by at most ε; clamp it
    gamma.mapv_inplace(|g| g.max(0.0));
    Ok(gamma)
}

/// Per-pixel 0/1 disagreement between predicted and reference labels.
pub fn segmentation_error_map(pred: &Array2<usize>, labels: &Array2<u8>) -> Result<Array2<f64>> {
    if pred.dim() != labels.dim() {
        return Err(Error::shape(labels.dim(), pred.dim()));
    }
    Ok(ndarray::Zip::from(pred)
        .and(labels)
        .map_collect(|&p, &l| if p == l as usize { 0.0 } else { 1.0 }))
}

/// Mean Dice over foreground classes present in the prediction or the reference.
pub fn mean_dice(pred: &Array2<usize>, labels: &Array2<u8>, n_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 1..n_classes {
        let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
        for (&p, &l) in pred.iter().zip(labels.iter()) {
            let (pc, lc) = (p == c, l as usize == c);
            inter += (pc && lc) as usize;
            a += pc as usize;
            b += lc as usize;
        }
        if a + b > 0 {
            total += 2.0 * inter as f64 / (a + b) as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        1.0
    } else {
        total / counted as f64
    }
}

/// U-Net with a softmax head over `n_classes`.
#[derive(Clone, Debug)]
pub struct Segmenter<T: Scalar> {
    pub config: SegmenterConfig,
    pub params: ParamSet<T>,
    net: UNet,
    head: Conv,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        config.unet.validate()?;
        if config.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be >= 2".into()));
        }
        let mut params = ParamSet::new();
        let mut b = Builder::new(&mut params, seed);
        let net = UNet::build(&mut b, "seg", 1, &config.unet);
        let head = b.conv("seg.head", config.unet.base_channels, config.n_classes, 1);
        Ok(Segmenter {
            config,
            params,
            net,
            head,
        })
    }

    pub fn from_params(config: SegmenterConfig, params: &ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(params)?;
        Ok(m)
    }

    pub fn logits_graph(&self, s: &mut Session<T>, magnitude: Var) -> Var {
        let h = self.net.forward(s, magnitude);
        self.head.apply(s, h)
    }

    /// Probability maps for a batch of magnitude images.
    pub fn segment_magnitudes(&self, mags: &[&Array2<T>]) -> Result<Vec<SegmentationProbMap>> {
        let n = self.config.unet.image_size;
        if let Some(bad) = mags.iter().find(|m| m.dim() != (n, n)) {
            return Err(Error::shape((n, n), bad.dim()));
        }
        let mut s = Session::new(&self.params, false);
        let input = s.g.constant(real_batch_tensor(mags)?);
        let logits = self.logits_graph(&mut s, input);
        let t = s.g.value(logits);
        (0..t.n()).map(|i| softmax_item(t, i)).collect()
    }

    pub fn segment(&self, x: &ComplexImage<T>) -> Result<SegmentationProbMap> {
        let mag = x.magnitude();
        Ok(self.segment_magnitudes(&[&mag])?.remove(0))
    }

    pub fn save(&self, dir: &Path) -> Result<io::WeightsManifest> {
        io::save_weights(
            dir,
            "segmenter",
            serde_json::to_value(&self.config).expect("config serializes"),
            &self.params,
            json!({}),
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, params) = io::load_weights::<T>(dir)?;
        let config: SegmenterConfig =
            serde_json::from_value(manifest.config).map_err(|e| Error::Corrupt {
                path: dir.to_path_buf(),
                detail: format!("segmenter config: {e}"),
            })?;
        Self::from_params(config, &params)
    }
}

fn softmax_item<T: Scalar>(t: &Tensor<T>, i: usize) -> Result<SegmentationProbMap> {
    let [_, c, h, w] = t.shape();
    let mut probs = Array3::<f64>::zeros((c, h, w));
    for p in 0..h * w {
        let lse = log_sum_exp((0..c).map(|k| t.plane(i, k)[p].as_f64()));
        for k in 0..c {
            probs[(k, p / w, p % w)] = (t.plane(i, k)[p].as_f64() - lse).exp();
        }
    }
    SegmentationProbMap::new(probs)
}

fn magnitude_tensor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, _, h, w] = x.shape();
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let (re, im) = (x.plane(i, 0), x.plane(i, 1));
        for (k, v) in out.plane_mut(i, 0).iter_mut().enumerate() {
            *v = (re[k] * re[k] + im[k] * im[k]).sqrt();
        }
    }
    out
}

impl<T: Scalar> Trainable<T> for Segmenter<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn loss(&self, s: &mut Session<T>, batch: &Batch<T>) -> Result<(Var, BTreeMap<String, f64>)> {
        let mag = s.g.constant(magnitude_tensor(&batch.x));
        let logits = self.logits_graph(s, mag);
        let ce = s.g.softmax_ce(logits, &batch.labels);
        let pixels = (batch.x.n() * batch.x.plane_len()) as f64;
        let loss = s.g.scale(ce, T::of(1.0 / pixels));
        let mut terms = BTreeMap::new();
        terms.insert("ce".into(), s.g.value(loss).value().as_f64());
        Ok((loss, terms))
    }
}

/// Mean validation Dice of the segmenter on ground-truth images.
pub fn validation_dice<T: Scalar>(seg: &Segmenter<T>, val: &[Sample]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation split".into()));
    }
    let mut total = 0.0;
    for s in val {
        let map = seg.segment(&s.x.cast())?;
        total += mean_dice(&map.argmax(), &s.labels, seg.config.n_classes);
    }
    Ok(total / val.len() as f64)
}

/// One sample per phantom: the segmenter only sees ground truth.
pub fn unique_phantoms(samples: &[Sample]) -> Vec<Sample> {
    let mut seen = std::collections::HashSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.phantom_seed))
        .cloned()
        .collect()
}

/// Cross-entropy training on ground-truth magnitudes; the checkpoint with the best
/// validation mean Dice is returned.
pub fn train_segmenter<T: Scalar>(
    train: &[Sample],
    val: &[Sample],
    config: SegmenterConfig,
    train_config: &TrainConfig,
    on_entry: impl FnMut(&LogEntry),
) -> Result<(Segmenter<T>, TrainOutcome<T>)> {
    let train = unique_phantoms(train);
    let val = unique_phantoms(val);
    for c in 0..config.n_classes {
        if !train
            .iter()
            .any(|s| s.labels.iter().any(|&l| l as usize == c))
        {
            warn!("class {c} absent from the segmentation training set");
        }
    }
    if let Some(bad) = train
        .iter()
        .find(|s| s.labels.iter().any(|&l| l as usize >= config.n_classes))
    {
        return Err(Error::InvalidArgument(format!(
            "{} has labels outside 0..{}",
            bad.id, config.n_classes
        )));
    }
    let mut seg = Segmenter::<T>::new(config.clone(), train_config.seed)?;
    let outcome = fit(
        &mut seg,
        &train,
        train_config,
        |m| validation_dice(m, &val),
        on_entry,
    )?;
    let best = Segmenter::from_params(config, &outcome.best_params)?;
    Ok((best, outcome))
}

/// Segment every reconstruction sample and summarize the spread.
pub fn propagate<T: Scalar>(
    samples: &ReconstructionSampleSet<T>,
    seg: &Segmenter<T>,
    hard: bool,
) -> Result<SegmentationSampleSet> {
    if samples.n() < 2 {
        return Err(Error::InvalidArgument(
            "propagation needs at least two samples".into(),
        ));
    }
    let mags: Vec<Array2<T>> = samples.samples.iter().map(|s| s.magnitude()).collect();
    let maps = seg.segment_magnitudes(&mags.iter().collect::<Vec<_>>())?;
    let gamma = gamma_map(&maps, hard)?;
    let mean_map = mean_prob_map(&maps)?;
    Ok(SegmentationSampleSet {
        maps,
        mean_map,
        gamma_map: gamma,
    })
}
