//! Figures over one or more run directories: a chart per metric with ID and OOD
//! panels, and map galleries labelled "train→test".

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use phirec_core::evaluation::{accel_key, AccelAggregate, Evaluation};
use phirec_core::io;

use crate::config::Setting;
use crate::error::{LabError, Result};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::pipeline::{kind_of, EVAL_DIR, GALLERY_MAPS, MAPS_DIR};
use crate::render::{
    colorize, gallery_svg, line_chart_svg, png_bytes, Colormap, Panel, Scale, Series,
};

/// Metric columns: file stem, axis label, accessor.
type Metric = (
    &'static str,
    &'static str,
    fn(&AccelAggregate) -> Option<f64>,
);

pub const METRICS: [Metric; 5] = [
    ("ssim", "SSIM", |a| Some(a.ssim)),
    ("psnr", "PSNR [dB]", |a| {
        a.psnr.is_finite().then_some(a.psnr)
    }),
    ("ncc_recon", "NCC (variance vs. error)", |a| a.ncc_recon),
    ("ncc_seg", "NCC (γ vs. segmentation error)", |a| a.ncc_seg),
    ("cum_variance", "cumulative variance", |a| {
        Some(a.cum_variance)
    }),
];

/// One evaluated model of one run.
#[derive(Clone, Debug)]
pub struct RunEvaluation {
    pub run: PathBuf,
    pub setting: Setting,
    pub train_accels: Vec<f64>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportIndex {
    pub charts: Vec<String>,
    pub galleries: Vec<String>,
    pub runs: Vec<PathBuf>,
}

fn accel_label(a: f64) -> String {
    format!("{a}x")
}

/// `"4x→8x"`, or `"4/8/16x→8x"` when training saw several accelerations.
pub fn train_test_label(train: &[f64], test: f64) -> String {
    let train = if train.len() == 1 {
        accel_label(train[0])
    } else {
        format!(
            "{}x",
            train
                .iter()
                .map(|a| format!("{a}"))
                .collect::<Vec<_>>()
                .join("/")
        )
    };
    format!("{train}→{}", accel_label(test))
}

pub fn load_run(run: &Path) -> Result<Vec<RunEvaluation>> {
    let manifest_path = run.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(LabError::missing(run, "not a run directory (no run.json)"));
    }
    let manifest: RunManifest = io::read_json(&manifest_path)?;
    let eval_dir = run.join(EVAL_DIR);
    let mut out = Vec::new();
    if !eval_dir.exists() {
        return Ok(out);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&eval_dir)
        .map_err(|e| LabError::io(&eval_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with(".provenance.json")
        })
        .collect();
    files.sort();
    for f in files {
        let evaluation: Evaluation = io::read_json(&f)?;
        out.push(RunEvaluation {
            run: run.to_path_buf(),
            setting: manifest.config.experiment.setting,
            train_accels: manifest.config.train_accelerations(),
            evaluation,
        });
    }
    Ok(out)
}

fn model_rank(name: &str) -> (usize, String) {
    let rank = kind_of(name).map(|k| {
        crate::pipeline::MODEL_ORDER
            .iter()
            .position(|&m| m == k)
            .unwrap_or(99)
    });
    (rank.unwrap_or(99), name.to_string())
}

/// Chart panels for one metric: ID then OOD, one series per model present anywhere.
pub fn metric_panels(
    evals: &[RunEvaluation],
    metric: fn(&AccelAggregate) -> Option<f64>,
) -> Vec<Panel> {
    let models: BTreeSet<(usize, String)> = evals
        .iter()
        .map(|e| model_rank(&e.evaluation.model))
        .collect();
    let mut accels: Vec<f64> = evals
        .iter()
        .flat_map(|e| e.evaluation.records.iter().map(|r| r.accel))
        .collect();
    accels.sort_by(f64::total_cmp);
    accels.dedup();
    [(Setting::Id, "ID"), (Setting::Ood, "OOD")]
        .into_iter()
        .map(|(setting, title)| Panel {
            title: title.into(),
            series: models
                .iter()
                .map(|(_, model)| {
                    let found = evals
                        .iter()
                        .find(|e| e.setting == setting && &e.evaluation.model == model);
                    Series {
                        label: model.clone(),
                        points: accels
                            .iter()
                            .map(|&a| {
                                (
                                    a,
                                    found
                                        .and_then(|e| e.evaluation.aggregates.get(&accel_key(a)))
                                        .and_then(metric),
                                )
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
        .collect()
}

struct GalleryImage {
    accel: f64,
    maps: BTreeMap<String, Array2<f32>>,
}

fn read_gallery(model_maps: &Path) -> Result<BTreeMap<u64, Vec<GalleryImage>>> {
    let mut by: BTreeMap<u64, Vec<GalleryImage>> = BTreeMap::new();
    if !model_maps.exists() {
        return Ok(by);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(model_maps)
        .map_err(|e| LabError::io(model_maps, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let (side, _) = io::read_tensor::<f32>(&d.join("x_u"))?;
        let accel = side
            .meta
            .get("accel")
            .and_then(|v| v.as_f64())
            .unwrap_or(0.0);
        let seed = side
            .meta
            .get("phantom_seed")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let mut maps = BTreeMap::new();
        for name in GALLERY_MAPS.iter().chain(["gt"].iter()) {
            let (bin, _) = io::container_paths(&d.join(name));
            if bin.exists() {
                maps.insert(name.to_string(), io::read_grid::<f32>(&d.join(name))?);
            }
        }
        by.entry(seed)
            .or_default()
            .push(GalleryImage { accel, maps });
    }
    for v in by.values_mut() {
        v.sort_by(|a, b| a.accel.total_cmp(&b.accel));
    }
    Ok(by)
}

/// Gallery SVG for one phantom: columns are test accelerations, rows the stored maps.
/// Magnitude rows share one grey scale; each uncertainty/error row shares its own.
fn phantom_gallery(title: &str, train: &[f64], images: &[GalleryImage]) -> Result<String> {
    let columns: Vec<String> = images
        .iter()
        .map(|i| train_test_label(train, i.accel))
        .collect();
    let mut rows = Vec::new();
    let magnitude_scale = Scale::shared(images.iter().flat_map(|i| {
        ["x_u", "mean", "gt"]
            .into_iter()
            .filter_map(|k| i.maps.get(k))
    }));
    for name in GALLERY_MAPS {
        let (scale, cmap) = match name {
            "x_u" | "mean" => (magnitude_scale, Colormap::Gray),
            _ => (
                Scale::shared(images.iter().filter_map(|i| i.maps.get(name))),
                Colormap::Heat,
            ),
        };
        let cells = images
            .iter()
            .map(|i| {
                i.maps
                    .get(name)
                    .map(|m| png_bytes(&colorize(m, scale, cmap)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((name.replace('_', " "), cells));
    }
    Ok(gallery_svg(title, &columns, &rows, 128))
}

fn run_name(run: &Path) -> String {
    run.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("run")
        .to_string()
}

/// Write every chart and gallery for `runs` into `out`.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<ReportIndex> {
    if runs.is_empty() {
        return Err(LabError::Config(
            "report needs at least one run directory".into(),
        ));
    }
    let mut evals = Vec::new();
    for r in runs {
        evals.extend(load_run(r)?);
    }
    let mut index = ReportIndex {
        runs: runs.to_vec(),
        ..Default::default()
    };
    for (stem, label, metric) in METRICS {
        let svg = line_chart_svg(label, label, &metric_panels(&evals, metric));
        let name = format!("fig_{stem}.svg");
        io::write_atomic(&out.join(&name), svg.as_bytes())?;
        index.charts.push(name);
    }
    for e in &evals {
        let maps = e
            .run
            .join(EVAL_DIR)
            .join(MAPS_DIR)
            .join(&e.evaluation.model);
        for (seed, images) in read_gallery(&maps)? {
            let title = format!(
                "{} ({}) phantom {seed}",
                e.evaluation.model,
                run_name(&e.run)
            );
            let svg = phantom_gallery(&title, &e.train_accels, &images)?;
            let name = format!(
                "gallery_{}_{}_p{seed}.svg",
                run_name(&e.run),
                e.evaluation.model
            );
            io::write_atomic(&out.join(&name), svg.as_bytes())?;
            index.galleries.push(name);
        }
    }
    io::write_json(&out.join("report.json"), &index)?;
    Ok(index)
}
