//! Paired `(x, x_u, labels, accel)` datasets split by phantom seed.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::forward::{forward_acquire, zero_fill_recon};
use super::mask::{make_mask, MaskPattern, UndersamplingMask};
use super::phantom::{generate_phantom, PhantomConfig};
use crate::error::{Error, Result};
use crate::image::{ComplexImage, Provenance};
use crate::io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Contiguous phantom seed range `[seed_start, seed_start + count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed_start: u64,
    pub count: usize,
}

impl SplitSpec {
    fn end(&self) -> u64 {
        self.seed_start + self.count as u64
    }

    fn overlaps(&self, other: &SplitSpec) -> bool {
        self.count > 0
            && other.count > 0
            && self.seed_start < other.end()
            && other.seed_start < self.end()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub phantom: PhantomConfig,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
    /// Accelerations present in the train and validation splits.
    pub train_accels: Vec<f64>,
    /// Accelerations present in the test split.
    pub test_accels: Vec<f64>,
    pub pattern: MaskPattern,
    pub calib_fraction: f64,
    pub noise_sigma: f64,
}

impl DatasetConfig {
    /// Every split sees 4x, 8x and 16x.
    pub fn in_domain(train: usize, val: usize, test: usize) -> Self {
        DatasetConfig {
            phantom: PhantomConfig::default(),
            train: SplitSpec {
                seed_start: 0,
                count: train,
            },
            val: SplitSpec {
                seed_start: 1_000_000,
                count: val,
            },
            test: SplitSpec {
                seed_start: 2_000_000,
                count: test,
            },
            train_accels: vec![4.0, 8.0, 16.0],
            test_accels: vec![4.0, 8.0, 16.0],
            pattern: MaskPattern::PoissonDisc,
            calib_fraction: 0.08,
            noise_sigma: 0.0,
        }
    }

    /// Training and validation at 4x only, testing at 4x, 8x and 16x.
    pub fn out_of_domain(train: usize, val: usize, test: usize) -> Self {
        DatasetConfig {
            train_accels: vec![4.0],
            ..Self::in_domain(train, val, test)
        }
    }

    pub fn spec(&self, split: Split) -> SplitSpec {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn accels(&self, split: Split) -> &[f64] {
        match split {
            Split::Train | Split::Val => &self.train_accels,
            Split::Test => &self.test_accels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let specs = [self.train, self.val, self.test];
        for i in 0..3 {
            for j in i + 1..3 {
                if specs[i].overlaps(&specs[j]) {
                    return Err(Error::InvalidConfig(format!(
                        "seed ranges of {} and {} overlap",
                        Split::ALL[i].name(),
                        Split::ALL[j].name()
                    )));
                }
            }
        }
        if self.train_accels.is_empty() || self.test_accels.is_empty() {
            return Err(Error::InvalidConfig(
                "acceleration lists must be non-empty".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub phantom_seed: u64,
    pub accel: f64,
    pub x: ComplexImage<f32>,
    pub x_u: ComplexImage<f32>,
    pub labels: Array2<u8>,
    pub mask: UndersamplingMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Order-sensitive hash of every stored value.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for split in Split::ALL {
            for s in self.split(split) {
                h.update(s.id.as_bytes());
                for img in [&s.x, &s.x_u] {
                    for c in img.data() {
                        h.update(c.re.to_le_bytes());
                        h.update(c.im.to_le_bytes());
                    }
                }
                h.update(s.labels.as_slice().unwrap_or(&[]));
                for &m in &s.mask.grid {
                    h.update([m as u8]);
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn sample_id(phantom_seed: u64, accel: f64) -> String {
    format!("p{phantom_seed:07}_r{}", accel_tag(accel))
}

fn accel_tag(accel: f64) -> String {
    if accel.fract() == 0.0 {
        format!("{}", accel as u64)
    } else {
        format!("{accel}").replace('.', "p")
    }
}

fn mask_seed(phantom_seed: u64, accel: f64) -> u64 {
    phantom_seed
        .wrapping_mul(1_000_003)
        .wrapping_add((accel * 1000.0) as u64)
}

pub fn make_sample(seed: u64, accel: f64, config: &DatasetConfig) -> Result<Sample> {
    let phantom = generate_phantom(seed, &config.phantom)?;
    let x = ComplexImage::from_real(&phantom.image.mapv(|v| v as f32), Provenance::GroundTruth)?;
    let ms = mask_seed(seed, accel);
    let mask = make_mask(
        config.pattern,
        accel,
        config.phantom.size,
        config.calib_fraction,
        ms,
    )?;
    let y = forward_acquire(&x, &mask, config.noise_sigma, ms ^ 0x5eed)?;
    let x_u = zero_fill_recon(&y)?;
    Ok(Sample {
        id: sample_id(seed, accel),
        phantom_seed: seed,
        accel,
        x,
        x_u,
        labels: phantom.labels,
        mask,
    })
}

/// Generate every split in memory. Within a split, the accelerations of one phantom
/// are adjacent.
pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let build = |split: Split| -> Result<Vec<Sample>> {
        let spec = config.spec(split);
        let mut out = Vec::with_capacity(spec.count * config.accels(split).len());
        for seed in spec.seed_start..spec.end() {
            for &a in config.accels(split) {
                out.push(make_sample(seed, a, config)?);
            }
        }
        Ok(out)
    };
    Ok(Dataset {
        config: config.clone(),
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: build(Split::Test)?,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetIndex {
    config: DatasetConfig,
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
    content_hash: String,
}

/// Persist as `<root>/<split>/<sample_id>/{x,x_u,labels,mask}.{bin,json}` plus `<root>/dataset.json`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    for split in Split::ALL {
        for s in ds.split(split) {
            let dir = root.join(split.name()).join(&s.id);
            let meta = json!({
                "sample_id": s.id,
                "phantom_seed": s.phantom_seed,
                "accel": s.accel,
            });
            io::write_complex_image(&dir.join("x"), &s.x, meta.clone())?;
            io::write_complex_image(&dir.join("x_u"), &s.x_u, meta.clone())?;
            io::write_grid(
                &dir.join("labels"),
                &s.labels.mapv(|l| l as f32),
                meta.clone(),
            )?;
            let mut mmeta = meta;
            mmeta["pattern"] = serde_json::to_value(s.mask.pattern).expect("enum");
            mmeta["target_accel"] = json!(s.mask.target_accel);
            mmeta["calib_fraction"] = json!(s.mask.calib_fraction);
            mmeta["seed"] = json!(s.mask.seed);
            mmeta["achieved_accel"] = json!(s.mask.achieved_accel());
            io::write_grid(
                &dir.join("mask"),
                &s.mask.grid.mapv(|m| if m { 1.0f32 } else { 0.0 }),
                mmeta,
            )?;
        }
    }
    let ids = |split| ds.split(split).iter().map(|s| s.id.clone()).collect();
    io::write_json(
        &root.join("dataset.json"),
        &DatasetIndex {
            config: ds.config.clone(),
            train: ids(Split::Train),
            val: ids(Split::Val),
            test: ids(Split::Test),
            content_hash: ds.content_hash(),
        },
    )
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let index: DatasetIndex = io::read_json(&root.join("dataset.json"))?;
    let load = |split: Split, ids: &[String]| -> Result<Vec<Sample>> {
        ids.iter()
            .map(|id| {
                let dir = root.join(split.name()).join(id);
                let (side, _) = io::read_tensor::<f32>(&dir.join("mask"))?;
                let grid = io::read_grid::<f32>(&dir.join("mask"))?;
                let labels = io::read_grid::<f32>(&dir.join("labels"))?;
                let get = |k: &str| side.meta.get(k).cloned().unwrap_or_default();
                let mask = UndersamplingMask {
                    grid: grid.mapv(|v| v != 0.0),
                    pattern: serde_json::from_value(get("pattern")).map_err(|e| Error::Json {
                        path: dir.clone(),
                        source: e,
                    })?,
                    target_accel: get("target_accel").as_f64().unwrap_or(1.0),
                    calib_fraction: get("calib_fraction").as_f64().unwrap_or(0.0),
                    seed: get("seed").as_u64().unwrap_or(0),
                };
                Ok(Sample {
                    id: id.clone(),
                    phantom_seed: get("phantom_seed").as_u64().unwrap_or(0),
                    accel: get("accel").as_f64().unwrap_or(mask.target_accel),
                    x: io::read_complex_image(&dir.join("x"))?,
                    x_u: io::read_complex_image(&dir.join("x_u"))?,
                    labels: labels.mapv(|v| v as u8),
                    mask,
                })
            })
            .collect()
    };
    let ds = Dataset {
        train: load(Split::Train, &index.train)?,
        val: load(Split::Val, &index.val)?,
        test: load(Split::Test, &index.test)?,
        config: index.config,
    };
    if ds.content_hash() != index.content_hash {
        return Err(Error::Corrupt {
            path: root.into(),
            detail: "dataset content hash mismatch".into(),
        });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_seed_ranges_rejected() {
        let mut c = DatasetConfig::in_domain(10, 5, 5);
        c.val.seed_start = 5;
        assert!(matches!(build_dataset(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn id_and_ood_acceleration_sets() {
        let id = build_dataset(&DatasetConfig::in_domain(3, 1, 1)).unwrap();
        for a in [4.0, 8.0, 16.0] {
            assert!(id.train.iter().any(|s| s.accel == a));
        }
        assert_eq!(id.train.len(), 9);
        // interleaved per phantom
        assert_eq!(id.train[0].phantom_seed, id.train[2].phantom_seed);

        let ood = build_dataset(&DatasetConfig::out_of_domain(3, 1, 1)).unwrap();
        assert!(ood.train.iter().all(|s| s.accel == 4.0));
        assert!(ood.val.iter().all(|s| s.accel == 4.0));
        assert_eq!(ood.test.len(), 3);
    }

    #[test]
    fn persisted_layout_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_dataset(&DatasetConfig::in_domain(2, 1, 1)).unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        for split in Split::ALL {
            let entries = std::fs::read_dir(dir.path().join(split.name()))
                .unwrap()
                .count();
            assert_eq!(entries, ds.split(split).len());
        }
        let s = &ds.train[0];
        for f in [
            "x.bin",
            "x.json",
            "x_u.bin",
            "x_u.json",
            "labels.bin",
            "labels.json",
            "mask.bin",
            "mask.json",
        ] {
            assert!(dir.path().join("train").join(&s.id).join(f).exists(), "{f}");
        }
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn splits_disjoint_by_seed() {
        let ds = build_dataset(&DatasetConfig::in_domain(4, 2, 2)).unwrap();
        let seeds = |v: &[Sample]| {
            v.iter()
                .map(|s| s.phantom_seed)
                .collect::<std::collections::HashSet<_>>()
        };
        assert!(seeds(&ds.train).is_disjoint(&seeds(&ds.val)));
        assert!(seeds(&ds.train).is_disjoint(&seeds(&ds.test)));
        assert!(seeds(&ds.val).is_disjoint(&seeds(&ds.test)));
    }
}
