//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5–8 need the desk experiments described by `configs/desk_*.toml`.
//! Their run directories live under `$PHIREC_ACCEPTANCE_ROOT` (default: the
//! cargo target tmp dir) and are resumed, so only the first invocation trains.
//! `PHIREC_ACCEPTANCE_ONLY=1,2,10` restricts the suite to the listed criteria.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array2, Array3};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use phirec_core::acquisition::{
    build_dataset, fft2c, forward_acquire, ifft2c, make_mask, zero_fill_recon, Dataset,
    DatasetConfig, MaskPattern, PhantomConfig, Sample,
};
use phirec_core::evaluation::{evaluate_model, EvalOptions, EvalRecord, Evaluation};
use phirec_core::image::batch_tensor;
use phirec_core::metrics::ssim;
use phirec_core::nn::Session;
use phirec_core::objective::{alpha_weights, elbo_graph, gaussian_kl};
use phirec_core::sampling::DEFAULT_SAMPLES;
use phirec_core::segmentation::{gamma_map, propagate, SegmentationProbMap};
use phirec_core::{
    Baseline32, BaselineConfig, BaselineKind, ComplexImage, ComplexImage32, Ensemble32,
    ModelConfig, Noise, PhiRec32, PhiRec64, Provenance, ReconstructionSampleSet,
    ReconstructionSampler, Segmenter32, SegmenterConfig, UNetConfig,
};
use phirec_lab::{ExperimentConfig, LoadedModel, Run};

type Verdict = Result<(bool, String), String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn acceptance_root() -> PathBuf {
    std::env::var_os("PHIREC_ACCEPTANCE_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

// ---------------------------------------------------------------- desk runs

struct DeskModel {
    config: ExperimentConfig,
    dir: PathBuf,
    evaluation: Evaluation,
    timings: Vec<(String, f64)>,
}

/// Desk experiments, trained (or resumed) on first use.
#[derive(Default)]
struct Desk {
    models: RefCell<Vec<(String, Rc<DeskModel>)>>,
}

impl Desk {
    fn get(&self, file: &str) -> Result<Rc<DeskModel>, String> {
        if let Some((_, m)) = self.models.borrow().iter().find(|(f, _)| f == file) {
            return Ok(m.clone());
        }
        let path = configs_dir().join(file);
        let mut config = ExperimentConfig::load(&path).map_err(err)?;
        config.paths.root = Some(acceptance_root());
        println!(
            "    … {file}: resuming or training in {}",
            config.run_dir().display()
        );
        let mut run = Run::open(&config, false).map_err(err)?;
        let evaluation = run.complete(false).map_err(err)?;
        let kind = config.model.kind.name();
        let timings = run
            .manifest
            .timings
            .iter()
            .filter(|(stage, _)| !stage.contains('/') || stage.ends_with(kind))
            .map(|(s, t)| (s.clone(), *t))
            .collect();
        let dir = run.dir.clone();
        drop(run);
        let model = Rc::new(DeskModel {
            config,
            dir,
            evaluation,
            timings,
        });
        self.models
            .borrow_mut()
            .push((file.to_string(), model.clone()));
        Ok(model)
    }
}

const DESK_ID: &str = "desk_id.toml";
const DESK_ID_PROB_UNET: &str = "desk_id_prob_unet.toml";
const DESK_OOD: &str = "desk_ood.toml";

fn records_at(eval: &Evaluation, accel: f64) -> Vec<&EvalRecord> {
    eval.records.iter().filter(|r| r.accel == accel).collect()
}

// ---------------------------------------------------------------- criteria

/// Closed-form KL against a Monte-Carlo estimate of E_q[log q − log p]. The
/// Gaussians are drawn well-conditioned (|μ| ≤ 1, σ ∈ [0.7, 1.5]) so the
/// estimator's own standard error stays far inside the tolerance.
fn kl_oracle(_: &Desk) -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut worst_se) = (0.0f64, 0.0f64);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let draws = 100_000;
    for _ in 0..100 {
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..8).map(|_| rng.random_range(lo..hi)).collect() };
        let (mq, sq, mp, sp) = (
            draw(-1.0, 1.0),
            draw(0.7, 1.5),
            draw(-1.0, 1.0),
            draw(0.7, 1.5),
        );
        let kl = gaussian_kl(&mq, &sq, &mp, &sp).map_err(err)?;
        let log_n = |z: f64, m: f64, s: f64| -0.5 * ((z - m) / s).powi(2) - s.ln();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..draws {
            let ratio: f64 = (0..8)
                .map(|d| {
                    let z = mq[d] + sq[d] * unit.sample(&mut rng);
                    log_n(z, mq[d], sq[d]) - log_n(z, mp[d], sp[d])
                })
                .sum();
            sum += ratio;
            sum_sq += ratio * ratio;
        }
        let n = draws as f64;
        let estimate = sum / n;
        worst = worst.max((kl - estimate).abs());
        worst_se = worst_se.max(((sum_sq / n - estimate * estimate) / n).sqrt());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 5e-2 && secs < 60.0,
        format!(
            "max |closed form − MC| = {worst:.4} (< 0.05) over 100 Gaussians, 1e5 draws each (max MC std. error {worst_se:.4}), {secs:.1}s (< 60s)"
        ),
    ))
}

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> ComplexImage<f64> {
    let data = Array2::from_shape_fn((n, n), |_| {
        Complex::new(rng.random_range(0.0..1.0), rng.random_range(-0.3..0.3))
    });
    ComplexImage::new(data, Provenance::GroundTruth).unwrap()
}

/// Every parameter gradient of the loss against a central finite difference.
fn elbo_gradient(_: &Desk) -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for decoder_features in [false, true] {
        let cfg = ModelConfig {
            levels: 2,
            base_channels: 4,
            image_size: 8,
            decoder_features,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = PhiRec64::new(cfg, 2).map_err(err)?;
        // lift the small head initialisations so every parameter carries signal
        for i in 0..m.params.len() {
            for v in m.params.get_mut(i).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        let x =
            batch_tensor(&[&random_image(8, &mut rng), &random_image(8, &mut rng)]).map_err(err)?;
        let xu =
            batch_tensor(&[&random_image(8, &mut rng), &random_image(8, &mut rng)]).map_err(err)?;
        let loss_of = |m: &PhiRec64| -> Result<(Session<f64>, phirec_core::graph::Var), String> {
            let mut s = Session::new(&m.params, true);
            let xv = s.g.constant(x.clone());
            let xuv = s.g.constant(xu.clone());
            let eg = elbo_graph(m, &mut s, xv, xuv, Noise::Zero).map_err(err)?;
            Ok((s, eg.loss))
        };
        let (s, loss) = loss_of(&m)?;
        let grads = s.param_grads(loss);
        let h = 1e-4;
        for i in 0..m.params.len() {
            for e in 0..m.params.get(i).numel() {
                let mut eval = |delta: f64| -> Result<f64, String> {
                    m.params.get_mut(i).data_mut()[e] += delta;
                    let (s, l) = loss_of(&m)?;
                    m.params.get_mut(i).data_mut()[e] -= delta;
                    Ok(s.g.value(l).value())
                };
                let fd = (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?))
                    / (12.0 * h);
                let a = grads[i].data()[e];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-3 && secs < 300.0,
        format!("{checked} parameters (both decoder variants), worst relative error {worst:.2e} (< 1e-3), {secs:.1}s"),
    ))
}

fn fft_unitarity(_: &Desk) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut roundtrip, mut parseval, mut idempotence) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10 {
        let x = random_image(64, &mut rng);
        let k = fft2c(&x);
        let back = ifft2c(&k, Provenance::GroundTruth).map_err(err)?;
        for (a, b) in back.data().iter().zip(x.data()) {
            roundtrip = roundtrip.max((a - b).norm());
        }
        let e: f64 = x.data().iter().map(|c| c.norm_sqr()).sum();
        let ek: f64 = k.iter().map(|c| c.norm_sqr()).sum();
        parseval = parseval.max((e - ek).abs() / e);
        for pattern in [
            MaskPattern::PoissonDisc,
            MaskPattern::CartesianRandom,
            MaskPattern::Equispaced,
        ] {
            let mask = make_mask(pattern, 4.0, 64, 0.08, rng.random()).map_err(err)?;
            let x_u =
                zero_fill_recon(&forward_acquire(&x, &mask, 0.0, 0).map_err(err)?).map_err(err)?;
            let again = zero_fill_recon(&forward_acquire(&x_u, &mask, 0.0, 0).map_err(err)?)
                .map_err(err)?;
            for (a, b) in again.data().iter().zip(x_u.data()) {
                idempotence = idempotence.max((a - b).norm());
            }
        }
    }
    let worst = roundtrip.max(parseval).max(idempotence);
    Ok((
        worst <= 1e-10,
        format!("round trip {roundtrip:.1e}, Parseval {parseval:.1e}, zero-fill idempotence {idempotence:.1e} (all ≤ 1e-10)"),
    ))
}

/// Line patterns at 16x only fit a narrow calibration band into 64 rows, so the
/// fidelity check uses a 4% band for every pattern.
fn mask_fidelity(_: &Desk) -> Verdict {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for pattern in [
        MaskPattern::PoissonDisc,
        MaskPattern::CartesianRandom,
        MaskPattern::Equispaced,
    ] {
        for accel in [2.0, 4.0, 8.0, 16.0] {
            for seed in 0..20 {
                match make_mask(pattern, accel, 64, 0.04, seed) {
                    Ok(m) => {
                        let dev = (m.achieved_accel() - accel).abs() / accel;
                        worst = worst.max(dev);
                        if dev > 0.1 {
                            failures.push(format!("{pattern:?} {accel}x seed {seed}"));
                        }
                    }
                    Err(e) => failures.push(format!("{pattern:?} {accel}x seed {seed}: {e}")),
                }
            }
        }
    }
    Ok((
        failures.is_empty(),
        format!(
            "240 masks, worst relative deviation {:.1}% (≤ 10%){}",
            worst * 100.0,
            list_failures(&failures)
        ),
    ))
}

fn list_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; failing: {}", f.join(", "))
    }
}

fn zero_filled_ssim(ds: &Dataset, accel: f64) -> f64 {
    mean(ds.test.iter().filter(|s| s.accel == accel).map(|s| {
        let gt = s.x.magnitude();
        let range = gt.iter().fold(0.0f32, |m, &v| m.max(v)) as f64;
        ssim(&s.x_u.magnitude(), &gt, range).expect("matching grids")
    }))
}

fn reconstruction_lift(desk: &Desk) -> Verdict {
    let phirec = desk.get(DESK_ID)?;
    let punet = desk.get(DESK_ID_PROB_UNET)?;
    let ds = phirec_core::acquisition::load_dataset(&phirec.dir.join("dataset")).map_err(err)?;
    let zf = zero_filled_ssim(&ds, 4.0);
    let ssim_at = |m: &DeskModel, a: f64| mean(records_at(&m.evaluation, a).iter().map(|r| r.ssim));
    let lift = ssim_at(&phirec, 4.0) - zf;
    let mut detail = format!(
        "{} phantoms; PHiRec 4x SSIM {:.4} vs zero-filled {zf:.4} (lift {lift:.4} ≥ 0.05)",
        phirec.config.data.n_train,
        ssim_at(&phirec, 4.0)
    );
    let mut monotone = true;
    for m in [&*phirec, &*punet] {
        let s: Vec<f64> = [4.0, 8.0, 16.0].iter().map(|&a| ssim_at(m, a)).collect();
        let ok = s[0] > s[1] && s[1] > s[2];
        monotone &= ok;
        detail.push_str(&format!(
            "; {} 4/8/16x {:.4}/{:.4}/{:.4}{}",
            m.evaluation.model,
            s[0],
            s[1],
            s[2],
            if ok { "" } else { " NOT decreasing" }
        ));
    }
    // every stage of the ID run, as recorded when it last executed
    let mut stages: BTreeSet<(String, u64)> = BTreeSet::new();
    for m in [&*phirec, &*punet] {
        stages.extend(m.timings.iter().map(|(s, t)| (s.clone(), t.to_bits())));
    }
    let hours = stages.iter().map(|(_, t)| f64::from_bits(*t)).sum::<f64>() / 3600.0;
    detail.push_str(&format!("; recorded run time {hours:.2} h (≤ 4 h)"));
    Ok((lift >= 0.05 && monotone && hours <= 4.0, detail))
}

fn calibration(desk: &Desk) -> Verdict {
    let phirec = desk.get(DESK_ID)?;
    let punet = desk.get(DESK_ID_PROB_UNET)?;
    let ncc = |m: &DeskModel| mean(m.evaluation.records.iter().filter_map(|r| r.ncc_recon));
    let null = mean(
        phirec
            .evaluation
            .records
            .iter()
            .filter_map(|r| r.ncc_recon_null),
    );
    let (p, u) = (ncc(&phirec), ncc(&punet));
    Ok((
        p - null >= 0.2 && p > u,
        format!("PHiRec ncc_recon {p:.4} vs permutation null {null:.4} (margin {:.4} ≥ 0.2); prob_unet {u:.4} (< PHiRec)", p - null),
    ))
}

fn variance_monotonicity(desk: &Desk) -> Verdict {
    let phirec = desk.get(DESK_ID)?;
    let ratios = phirec.evaluation.variance_ratios(4.0);
    let key = |a: f64| phirec_core::evaluation::accel_key(a);
    let mut ok = 0;
    let mut failing = Vec::new();
    for (seed, r) in &ratios {
        let (r4, r8, r16) = (r[&key(4.0)], r[&key(8.0)], r[&key(16.0)]);
        if r4 == 1.0 && r16 > r8 && r8 >= r4 {
            ok += 1;
        } else {
            failing.push(format!("{seed}: {r8:.3}/{r16:.3}"));
        }
    }
    let images = phirec.config.data.n_test;
    let needed = (0.8 * images as f64).ceil() as usize;
    Ok((
        ratios.len() == images && ok >= needed,
        format!(
            "{ok}/{images} test images with ratio(16x) > ratio(8x) ≥ ratio(4x) = 1 (need ≥ {needed}){}",
            list_failures(&failing)
        ),
    ))
}

fn propagation(desk: &Desk) -> Verdict {
    let ood = desk.get(DESK_OOD)?;
    let seg = Segmenter32::load(&ood.dir.join("segmenter")).map_err(err)?;
    let model = LoadedModel::load(&ood.dir.join("models").join("phirec")).map_err(err)?;
    let ds = phirec_core::acquisition::load_dataset(&ood.dir.join("dataset")).map_err(err)?;
    // identical reconstruction samples: one-hot γ vanishes exactly
    let one = model.sample(&ds.test[0].x_u, 1, 0).map_err(err)?;
    let same = ReconstructionSampleSet::from_samples(
        vec![one.samples[0].clone(); DEFAULT_SAMPLES],
        "identical",
    )
    .map_err(err)?;
    let hard = propagate(&same, &seg, true).map_err(err)?;
    let gamma_hard = hard.gamma_map.iter().fold(0.0f64, |m, &v| m.max(v));
    let onehot = SegmentationProbMap::new(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
        ((y + x) % 3 == c) as u8 as f64
    }))
    .map_err(err)?;
    let gamma_onehot = gamma_map(&vec![onehot; 20], false)
        .map_err(err)?
        .iter()
        .fold(0.0f64, |m, &v| m.max(v));
    let at16 = records_at(&ood.evaluation, 16.0);
    let ncc = mean(at16.iter().filter_map(|r| r.ncc_seg));
    let null = mean(at16.iter().filter_map(|r| r.ncc_seg_null));
    let gamma_ok = gamma_hard <= 1e-7 && gamma_onehot <= 1e-7;
    Ok((
        gamma_ok && ncc > 0.0 && ncc - null >= 0.1,
        format!(
            "γ of identical samples {gamma_hard:.1e} (one-hot maps {gamma_onehot:.1e}, ≤ 1e-7); OOD 4x→16x ncc_seg {ncc:.4} (> 0) vs null {null:.4} (margin {:.4} ≥ 0.1)",
            ncc - null
        ),
    ))
}

/// Records the requested sample count of every call.
struct Recording<'a> {
    inner: &'a dyn ReconstructionSampler<f32>,
    requested: RefCell<Vec<usize>>,
}

impl ReconstructionSampler<f32> for Recording<'_> {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn sample(
        &self,
        x_u: &ComplexImage32,
        n: usize,
        seed: u64,
    ) -> phirec_core::Result<ReconstructionSampleSet<f32>> {
        self.requested.borrow_mut().push(n);
        self.inner.sample(x_u, n, seed)
    }
}

fn tiny_samples() -> Result<Vec<Sample>, String> {
    let ds = build_dataset(&DatasetConfig {
        phantom: PhantomConfig {
            size: 32,
            n_classes: 3,
            ..Default::default()
        },
        ..DatasetConfig::in_domain(1, 1, 2)
    })
    .map_err(err)?;
    Ok(ds.test)
}

fn tiny_models() -> Result<Vec<LoadedModel>, String> {
    let unet = UNetConfig {
        depth: 2,
        base_channels: 4,
        image_size: 32,
    };
    let mut models = vec![LoadedModel::PhiRec(
        PhiRec32::new(
            ModelConfig {
                levels: 2,
                base_channels: 4,
                image_size: 32,
                ..Default::default()
            },
            1,
        )
        .map_err(err)?,
    )];
    for kind in [
        BaselineKind::McDropout,
        BaselineKind::Heteroscedastic,
        BaselineKind::McDropoutHetero,
        BaselineKind::ProbUnet,
    ] {
        let cfg = BaselineConfig {
            unet: unet.clone(),
            ..BaselineConfig::of_kind(kind)
        };
        models.push(LoadedModel::Baseline(Baseline32::new(cfg, 1).map_err(err)?));
    }
    let cfg = BaselineConfig {
        unet,
        ..BaselineConfig::of_kind(BaselineKind::Ensemble)
    };
    models.push(LoadedModel::Ensemble(Ensemble32::new(cfg, 1).map_err(err)?));
    Ok(models)
}

fn record_bits(r: &EvalRecord) -> Vec<u64> {
    let opt = |v: Option<f64>| v.map_or(u64::MAX, f64::to_bits);
    vec![
        r.ssim.to_bits(),
        r.psnr.to_bits(),
        opt(r.ncc_recon),
        opt(r.ncc_seg),
        r.cum_variance.to_bits(),
        opt(r.ncc_recon_null),
        opt(r.ncc_seg_null),
    ]
}

fn sampling_protocol(desk: &Desk) -> Verdict {
    let mut problems = Vec::new();
    let defaults = [
        ("DEFAULT_SAMPLES", DEFAULT_SAMPLES),
        ("EvalOptions", EvalOptions::default().n_samples),
        (
            "lab config",
            ExperimentConfig::default().evaluation.n_samples,
        ),
    ];
    for (what, n) in defaults {
        if n != 20 {
            problems.push(format!("{what} default n = {n}"));
        }
    }
    let samples = tiny_samples()?;
    let seg = Segmenter32::new(
        SegmenterConfig {
            unet: UNetConfig {
                depth: 2,
                base_channels: 4,
                image_size: 32,
            },
            n_classes: 3,
        },
        0,
    )
    .map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let opts = EvalOptions {
        seed: 5,
        ..Default::default()
    };
    let mut kinds = Vec::new();
    for model in tiny_models()? {
        let name = model.name();
        // evaluate through a save/load round trip, twice
        let dir = tmp.path().join(&name);
        model.save(&dir).map_err(err)?;
        let loaded = LoadedModel::load(&dir).map_err(err)?;
        let rec = Recording {
            inner: &loaded,
            requested: RefCell::new(Vec::new()),
        };
        let mut drawn = Vec::new();
        let a = evaluate_model(&rec, &samples, &seg, &opts, |_, ev| {
            drawn.push(ev.samples.n())
        })
        .map_err(err)?;
        let b = evaluate_model(&model, &samples, &seg, &opts, |_, _| {}).map_err(err)?;
        if rec.requested.borrow().iter().any(|&n| n != 20) {
            problems.push(format!("{name} requested {:?}", rec.requested.borrow()));
        }
        let expected = if let LoadedModel::Ensemble(e) = &model {
            e.members.len().min(20)
        } else {
            20
        };
        if drawn.iter().any(|&n| n != expected) {
            problems.push(format!("{name} drew {drawn:?}"));
        }
        if a.records
            .iter()
            .map(record_bits)
            .ne(b.records.iter().map(record_bits))
        {
            problems.push(format!("{name} not bit-reproducible"));
        }
        kinds.push(format!("{name}:{}", drawn.first().copied().unwrap_or(0)));
    }
    // the trained desk model: stored records reproduce bit for bit
    let phirec = desk.get(DESK_ID)?;
    let ds = phirec_core::acquisition::load_dataset(&phirec.dir.join("dataset")).map_err(err)?;
    let model = LoadedModel::load(&phirec.dir.join("models").join("phirec")).map_err(err)?;
    let desk_seg = Segmenter32::load(&phirec.dir.join("segmenter")).map_err(err)?;
    let subset: Vec<Sample> = ds
        .test
        .iter()
        .step_by(ds.test.len() / 3)
        .take(3)
        .cloned()
        .collect();
    let again = evaluate_model(
        &model,
        &subset,
        &desk_seg,
        &phirec.config.eval_options(),
        |_, _| {},
    )
    .map_err(err)?;
    for r in &again.records {
        match phirec
            .evaluation
            .records
            .iter()
            .find(|s| s.sample_id == r.sample_id)
        {
            Some(stored) if record_bits(stored) == record_bits(r) => {}
            _ => problems.push(format!(
                "desk record {} differs on re-evaluation",
                r.sample_id
            )),
        }
    }
    Ok((
        problems.is_empty(),
        format!(
            "default n = 20; samples drawn per kind [{}]; re-evaluation bit-identical for all kinds and {} desk records{}",
            kinds.join(", "),
            again.records.len(),
            list_failures(&problems)
        ),
    ))
}

fn alpha(_: &Desk) -> Verdict {
    let a = alpha_weights(5).map_err(err)?;
    Ok((
        a == [1.0, 4.0, 16.0, 64.0, 256.0],
        format!("alpha_weights(5) = {a:?}"),
    ))
}

type Criterion = (usize, &'static str, fn(&Desk) -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "analytic KL oracle", kl_oracle),
    (2, "ELBO gradient check", elbo_gradient),
    (3, "forward-model unitarity", fft_unitarity),
    (4, "mask fidelity", mask_fidelity),
    (5, "reconstruction lift", reconstruction_lift),
    (6, "calibration", calibration),
    (7, "variance monotonicity", variance_monotonicity),
    (8, "propagation sanity", propagation),
    (9, "sampling protocol", sampling_protocol),
    (10, "alpha weights", alpha),
];

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("PHIREC_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    // `cargo test -- --list` and filters address the harness, not this suite
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let desk = Desk::default();
    let mut failed = Vec::new();
    println!("acceptance suite");
    for (id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&desk)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
        let (pass, detail) = match verdict {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        println!(
            "criterion {id:>2} [{name}]: {} ({:.1}s) {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: FAILED criteria {failed:?}");
        std::process::exit(1);
    }
}
