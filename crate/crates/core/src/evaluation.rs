//! Per-image evaluation of a reconstruction sampler: quality, calibration of the
//! sample variance against the realized error, and propagated segmentation spread.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::acquisition::Sample;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{
    cumulative_variance, ncc, permutation_null_ncc, psnr, squared_error_map, ssim,
};
use crate::sampling::{
    item_seeds, ReconstructionSampleSet, ReconstructionSampler, DEFAULT_SAMPLES,
};
use crate::scalar::Scalar;
use crate::segmentation::{propagate, segmentation_error_map, SegmentationSampleSet, Segmenter};

pub const CSV_HEADER: &str = "sample_id,accel,ssim,psnr,ncc_recon,ncc_seg,cum_variance";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub phantom_seed: u64,
    pub accel: f64,
    pub ssim: f64,
    /// `+inf` when the mean reconstruction is exact.
    #[serde(with = "extended_float")]
    pub psnr: f64,
    /// `None` when a map had zero variance and the image was skipped.
    pub ncc_recon: Option<f64>,
    pub ncc_seg: Option<f64>,
    pub cum_variance: f64,
    /// Chance-level correlations against permuted error maps.
    pub ncc_recon_null: Option<f64>,
    pub ncc_seg_null: Option<f64>,
}

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.sample_id,
            self.accel,
            self.ssim,
            if self.psnr.is_infinite() {
                "inf".to_string()
            } else {
                format!("{}", self.psnr)
            },
            opt(self.ncc_recon),
            opt(self.ncc_seg),
            self.cum_variance
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub gamma_hard_samples: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
            gamma_hard_samples: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccelAggregate {
    pub images: usize,
    pub ssim: f64,
    /// Mean over images with finite PSNR.
    #[serde(with = "extended_float")]
    pub psnr: f64,
    pub ncc_recon: Option<f64>,
    pub ncc_seg: Option<f64>,
    pub ncc_recon_null: Option<f64>,
    pub ncc_seg_null: Option<f64>,
    pub cum_variance: f64,
    pub skipped_recon: usize,
    pub skipped_seg: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: String,
    pub n_samples: usize,
    pub seed: u64,
    pub records: Vec<EvalRecord>,
    /// Keyed by acceleration, formatted as e.g. `"4"`.
    pub aggregates: BTreeMap<String, AccelAggregate>,
}

/// Everything computed for one test image.
pub struct ImageEvaluation<T> {
    pub record: EvalRecord,
    pub samples: ReconstructionSampleSet<T>,
    pub segmentation: SegmentationSampleSet,
    pub squared_error: Array2<T>,
    pub segmentation_error: Array2<f64>,
}

/// JSON has no infinities; non-finite values travel as strings.
mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&format!("{v}"))
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub fn accel_key(accel: f64) -> String {
    format!("{accel}")
}

/// Sampling seed for one image, independent of evaluation order.
pub fn image_seed(seed: u64, sample: &Sample) -> u64 {
    let mix = sample.phantom_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ sample.accel.to_bits().rotate_left(17);
    item_seeds(seed ^ mix, 1)[0]
}

fn skip_undefined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate_image<T: Scalar, S: ReconstructionSampler<T> + ?Sized>(
    sampler: &S,
    sample: &Sample,
    seg: &Segmenter<T>,
    opts: &EvalOptions,
) -> Result<ImageEvaluation<T>> {
    let seed = image_seed(opts.seed, sample);
    let set = sampler.sample(&sample.x_u.cast(), opts.n_samples, seed)?;
    let gt = sample.x.magnitude().mapv(|v| T::of(v as f64));
    let range = gt.iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{} has an all-zero ground truth",
            sample.id
        )));
    }
    let se = squared_error_map(&set.mean_map, &gt)?;
    let (ncc_recon, null_recon, cum) = match set.variance_map() {
        Some(var) => (
            skip_undefined(ncc(&var, &se))?,
            skip_undefined(permutation_null_ncc(&var, &se, seed))?,
            cumulative_variance(set.std_map.as_ref().expect("variance implies std")),
        ),
        None => (None, None, 0.0),
    };
    let segmentation = propagate(&set, seg, opts.gamma_hard_samples)?;
    let seg_err = segmentation_error_map(&segmentation.mean_map.argmax(), &sample.labels)?;
    let ncc_seg = skip_undefined(ncc(&segmentation.gamma_map, &seg_err))?;
    let null_seg = skip_undefined(permutation_null_ncc(
        &segmentation.gamma_map,
        &seg_err,
        seed,
    ))?;
    let record = EvalRecord {
        sample_id: sample.id.clone(),
        phantom_seed: sample.phantom_seed,
        accel: sample.accel,
        ssim: ssim(&set.mean_map, &gt, range)?,
        psnr: psnr(&set.mean_map, &gt, range)?,
        ncc_recon,
        ncc_seg,
        cum_variance: cum,
        ncc_recon_null: null_recon,
        ncc_seg_null: null_seg,
    };
    Ok(ImageEvaluation {
        record,
        samples: set,
        segmentation,
        squared_error: se,
        segmentation_error: seg_err,
    })
}

fn mean_some(vals: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in vals {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

pub fn aggregate(records: &[EvalRecord]) -> BTreeMap<String, AccelAggregate> {
    let mut by: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by.entry(accel_key(r.accel)).or_default().push(r);
    }
    by.into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let finite: Vec<f64> = rs
                .iter()
                .map(|r| r.psnr)
                .filter(|p| p.is_finite())
                .collect();
            let (ncc_recon, skipped_recon) = mean_some(rs.iter().map(|r| r.ncc_recon));
            let (ncc_seg, skipped_seg) = mean_some(rs.iter().map(|r| r.ncc_seg));
            let agg = AccelAggregate {
                images: rs.len(),
                ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
                psnr: if finite.is_empty() {
                    f64::INFINITY
                } else {
                    finite.iter().sum::<f64>() / finite.len() as f64
                },
                ncc_recon,
                ncc_seg,
                ncc_recon_null: mean_some(rs.iter().map(|r| r.ncc_recon_null)).0,
                ncc_seg_null: mean_some(rs.iter().map(|r| r.ncc_seg_null)).0,
                cum_variance: rs.iter().map(|r| r.cum_variance).sum::<f64>() / n,
                skipped_recon,
                skipped_seg,
            };
            (k, agg)
        })
        .collect()
}

/// Evaluate every sample of a split in order.
pub fn evaluate_model<T: Scalar, S: ReconstructionSampler<T> + ?Sized>(
    sampler: &S,
    samples: &[Sample],
    seg: &Segmenter<T>,
    opts: &EvalOptions,
    mut on_image: impl FnMut(&Sample, &ImageEvaluation<T>),
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let ev = evaluate_image(sampler, s, seg, opts)?;
        on_image(s, &ev);
        records.push(ev.record);
    }
    let aggregates = aggregate(&records);
    Ok(Evaluation {
        model: sampler.name(),
        n_samples: opts.n_samples,
        seed: opts.seed,
        records,
        aggregates,
    })
}

impl Evaluation {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// `<stem>.csv` plus `<stem>.json` (aggregates and records), both written atomically.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        io::write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        io::write_json(&dir.join(format!("{stem}.json")), self)
    }

    /// Per-phantom cumulative variance ratios relative to `reference_accel`.
    pub fn variance_ratios(&self, reference_accel: f64) -> BTreeMap<u64, BTreeMap<String, f64>> {
        let mut by: BTreeMap<u64, Vec<&EvalRecord>> = BTreeMap::new();
        for r in &self.records {
            by.entry(r.phantom_seed).or_default().push(r);
        }
        by.into_iter()
            .filter_map(|(seed, rs)| {
                let base = rs.iter().find(|r| r.accel == reference_accel)?.cum_variance;
                (base > 0.0).then(|| {
                    let ratios = rs
                        .iter()
                        .map(|r| {
                            let v = if r.accel == reference_accel {
                                1.0
                            } else {
                                r.cum_variance / base
                            };
                            (accel_key(r.accel), v)
                        })
                        .collect();
                    (seed, ratios)
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{build_dataset, DatasetConfig, PhantomConfig};
    use crate::baselines::UNetConfig;
    use crate::image::{ComplexImage, Provenance};
    use crate::segmentation::SegmenterConfig;

    /// Returns the ground truth for every draw.
    struct Oracle(BTreeMap<String, ComplexImage<f32>>);

    impl ReconstructionSampler<f32> for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }

        fn sample(
            &self,
            x_u: &ComplexImage<f32>,
            n: usize,
            _seed: u64,
        ) -> Result<ReconstructionSampleSet<f32>> {
            let key = format!("{:?}", x_u.data()[(0, 0)]);
            let gt = self.0.get(&key).expect("known input").clone();
            ReconstructionSampleSet::from_samples(
                vec![ComplexImage::new(gt.data().clone(), Provenance::Sample)?; n],
                "oracle",
            )
        }
    }

    fn setup() -> (Vec<Sample>, Segmenter<f32>) {
        let mut cfg = DatasetConfig::in_domain(0, 0, 2);
        cfg.phantom = PhantomConfig {
            size: 32,
            ..Default::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let seg = Segmenter::new(
            SegmenterConfig {
                unet: UNetConfig {
                    depth: 2,
                    base_channels: 4,
                    image_size: 32,
                },
                n_classes: 5,
            },
            0,
        )
        .unwrap();
        (ds.test, seg)
    }

    #[test]
    fn oracle_sampler_is_perfect_and_skips_correlations() {
        let (test, seg) = setup();
        let oracle = Oracle(
            test.iter()
                .map(|s| (format!("{:?}", s.x_u.data()[(0, 0)]), s.x.clone()))
                .collect(),
        );
        let ev = evaluate_model(&oracle, &test, &seg, &EvalOptions::default(), |_, _| {}).unwrap();
        assert_eq!(ev.records.len(), 2 * 3);
        assert_eq!(ev.n_samples, 20);
        for r in &ev.records {
            assert!((r.ssim - 1.0).abs() < 1e-9);
            assert_eq!(r.psnr, f64::INFINITY);
            assert_eq!(r.ncc_recon, None);
            assert_eq!(r.cum_variance, 0.0);
        }
        for accel in ["4", "8", "16"] {
            let agg = &ev.aggregates[accel];
            assert_eq!(agg.images, 2);
            assert_eq!(agg.skipped_recon, 2);
            assert_eq!(agg.ncc_recon, None);
        }
        let csv = ev.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.lines().nth(1).unwrap().contains(",inf,"));
        let json = serde_json::to_string(&ev).unwrap();
        let back: Evaluation = serde_json::from_str(&json).unwrap();
        assert_eq!(back.records[0].psnr, f64::INFINITY);
    }

    #[test]
    fn evaluation_is_reproducible_and_written() {
        let (test, seg) = setup();
        let model = crate::hierarchical::PhiRec::<f32>::new(
            crate::hierarchical::ModelConfig {
                levels: 2,
                base_channels: 4,
                image_size: 32,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let opts = EvalOptions {
            n_samples: 5,
            ..Default::default()
        };
        let a = evaluate_model(&model, &test, &seg, &opts, |_, _| {}).unwrap();
        let b = evaluate_model(&model, &test, &seg, &opts, |_, _| {}).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        // order independence: the per-image seed does not depend on position
        let mut rev = test.clone();
        rev.reverse();
        let c = evaluate_model(&model, &rev, &seg, &opts, |_, _| {}).unwrap();
        assert_eq!(c.records.last().unwrap(), &a.records[0]);
        assert!(a
            .records
            .iter()
            .all(|r| r.ncc_recon.is_some() && r.cum_variance > 0.0));
        let ratios = a.variance_ratios(4.0);
        assert_eq!(ratios.len(), 2);
        assert!(ratios.values().all(|m| m["4"] == 1.0 && m.len() == 3));
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path(), "phirec_id").unwrap();
        let csv = std::fs::read_to_string(dir.path().join("phirec_id.csv")).unwrap();
        assert_eq!(csv, a.to_csv());
        let back: Evaluation = io::read_json(&dir.path().join("phirec_id.json")).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn empty_split_rejected() {
        let (_, seg) = setup();
        let oracle = Oracle(BTreeMap::new());
        assert!(evaluate_model(&oracle, &[], &seg, &EvalOptions::default(), |_, _| {}).is_err());
    }
}
