//! End-to-end orchestration: synthesize datasets from held-out masks with
//! fixed seed sequences, filter, mix with real data, train downstream, and
//! score — plus the ablation sweep drivers.

mod frechet;

pub use frechet::frechet_distance;

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{crfm_sample, train_flow, FlowTrainConfig, SamplerConfig};
use crate::model::{FlowNet, Scheme};
use crate::numerics::{Tensor, IGNORE_INDEX};
use crate::scenes::{generate_dataset, read_container, write_container, SceneSample};
use crate::segment::{
    calibrate_filter, compute_metrics, pixel_filter, train_seg_from, SegMetrics, SegNet,
    SegNetConfig, SegTrainConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ── synthesis ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub flow_ckpt: PathBuf,
    pub seg_ckpt: PathBuf,
    /// Container whose masks (and class histograms) condition synthesis.
    pub mask_source: PathBuf,
    pub sampler: SamplerConfig,
    pub seeds_per_mask: usize,
    pub class_count_filter: bool,
    pub pixel_filter: bool,
    pub phi: f64,
    pub min_classes: usize,
    pub rare_set: Vec<usize>,
    pub max_masks: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixMetrics {
    pub label: String,
    pub metrics: SegMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub generated: usize,
    pub kept_after_class_filter: usize,
    pub kept_after_pixel_filter: usize,
    /// Mean fraction of pixels the pixel filter ignored, over kept samples.
    pub ignored_pixel_fraction: f64,
    /// Frechet feature distance of all pre-filter outputs vs the real set.
    pub fd_prefilter: f64,
    /// Same measure on the kept set; separate because the filter changes
    /// the population.
    pub fd_postfilter: Option<f64>,
    /// Mean pre-synth CE per rectified step (index 0 = first step).
    pub mean_ce_per_step: Vec<f64>,
    /// Mean calibrated rectification strength, when CRFM ran.
    pub mean_alpha: Option<f64>,
    /// Fixed order: class-count before pixel filter.
    pub filter_order: String,
    pub downstream: Vec<MixMetrics>,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Keep iff the mask has at least `min_classes` distinct non-ignored
/// classes, or contains any rare class.
pub fn class_count_filter(mask: &[u8], rare_set: &[usize], min_classes: usize) -> bool {
    let mut seen = [false; 256];
    let mut distinct = 0usize;
    let mut has_rare = false;
    for &m in mask {
        if m == IGNORE_INDEX {
            continue;
        }
        if !seen[m as usize] {
            seen[m as usize] = true;
            distinct += 1;
            if rare_set.contains(&(m as usize)) {
                has_rare = true;
            }
        }
    }
    distinct >= min_classes || has_rare
}

/// Run the full synthesize-and-filter stage. Deterministic end to end:
/// the same job produces a bit-identical output container. Returns the
/// kept samples, the report, and every run's trajectory log.
pub fn synthesize(
    job: &SynthesisJob,
) -> Result<(Vec<SceneSample>, SynthesisReport, Vec<crate::flow::TrajectoryLog>)> {
    let started = Instant::now();
    let (flow, _) = FlowNet::load(&job.flow_ckpt)?;
    let (seg, _, calibration) = SegNet::load(&job.seg_ckpt)?;
    let (header, sources) = read_container(&job.mask_source)?;
    if usize::from(header.classes) != flow.cfg.classes
        || usize::from(header.height) != flow.cfg.image_size
        || usize::from(header.channels) != flow.cfg.channels
    {
        return Err(Error::Config(format!(
            "mask source ({} classes, {}px, {}ch) does not match flow model ({}, {}, {})",
            header.classes,
            header.height,
            header.channels,
            flow.cfg.classes,
            flow.cfg.image_size,
            flow.cfg.channels
        )));
    }
    if seg.cfg.classes != flow.cfg.classes || seg.cfg.image_size != flow.cfg.image_size {
        return Err(Error::Config(
            "guidance net does not match flow model geometry".into(),
        ));
    }
    if job.pixel_filter && calibration.is_none() {
        return Err(Error::Config(
            "pixel filter enabled but the guidance checkpoint has no calibration statistics"
                .into(),
        ));
    }
    let masks: Vec<&SceneSample> = sources
        .iter()
        .take(job.max_masks.unwrap_or(usize::MAX))
        .collect();
    if masks.is_empty() {
        return Err(Error::Config("mask source container is empty".into()));
    }

    let spm = job.seeds_per_mask;
    let shape = vec![flow.cfg.channels, flow.cfg.image_size, flow.cfg.image_size];
    let runs: Vec<Result<(SceneSample, crate::flow::TrajectoryLog)>> = (0..masks.len() * spm)
        .into_par_iter()
        .map(|idx| {
            let (m, s) = (idx / spm, idx % spm);
            let source = masks[m];
            let z1_seed = crate::rng::derive_seed(job.sampler.seed, "synth-z1", (m * spm + s) as u64);
            let mut rng = crate::rng::stream_raw(z1_seed);
            let z1 = Tensor::randn(shape.clone(), &mut rng);
            let (image, log) = crfm_sample(
                &flow,
                &seg,
                &z1,
                &source.mask,
                &source.cond_hist,
                &job.sampler,
            )?;
            Ok((
                SceneSample {
                    image,
                    mask: source.mask.clone(),
                    cond_hist: source.cond_hist.clone(),
                },
                log,
            ))
        })
        .collect();

    let mut candidates = Vec::with_capacity(masks.len() * spm);
    let mut logs = Vec::with_capacity(masks.len() * spm);
    for r in runs {
        let (sample, log) = r?;
        candidates.push(sample);
        logs.push(log);
    }
    let generated = candidates.len();

    // Feature distance against the real set, before any filtering.
    let real_feats = feature_rows(&seg, sources.iter())?;
    let cand_feats = feature_rows(&seg, candidates.iter())?;
    let fd_prefilter = frechet_distance(&cand_feats, &real_feats)?;

    // CE curves and calibrated strengths across runs.
    let k = job.sampler.crfm_steps;
    let mut ce_sums = vec![0.0f64; k];
    let mut ce_counts = vec![0u64; k];
    let mut alpha_sum = 0.0f64;
    let mut alpha_n = 0u64;
    let mut warnings: Vec<String> = Vec::new();
    for log in &logs {
        for step in &log.steps {
            if let Some(ce) = step.ce {
                ce_sums[step.step - 1] += ce;
                ce_counts[step.step - 1] += 1;
            }
        }
        if let Some(a) = log.alpha {
            alpha_sum += f64::from(a);
            alpha_n += 1;
        }
        for w in &log.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
    }
    let mean_ce_per_step: Vec<f64> = ce_sums
        .iter()
        .zip(&ce_counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();

    // Fixed filter order: class-count, then pixel.
    let after_class: Vec<SceneSample> = if job.class_count_filter {
        candidates
            .into_iter()
            .filter(|s| class_count_filter(&s.mask, &job.rare_set, job.min_classes))
            .collect()
    } else {
        candidates
    };
    let kept_after_class = after_class.len();
    if kept_after_class == 0 {
        return Err(Error::Contract(format!(
            "zero samples kept: the class-count filter removed all {generated} candidates"
        )));
    }

    let mut kept = Vec::with_capacity(after_class.len());
    let mut ignored_fraction_sum = 0.0f64;
    if job.pixel_filter {
        let cal = calibration.as_ref().expect("checked above");
        let filtered: Vec<Result<(SceneSample, f64)>> = after_class
            .par_iter()
            .map(|s| {
                let (mask, frac) = pixel_filter(&s.image, &s.mask, &seg, Some(cal), job.phi)?;
                Ok((
                    SceneSample {
                        image: s.image.clone(),
                        mask,
                        cond_hist: s.cond_hist.clone(),
                    },
                    frac,
                ))
            })
            .collect();
        for r in filtered {
            let (sample, frac) = r?;
            // A fully-ignored mask carries no supervision; drop it.
            if sample.mask.iter().any(|&m| m != IGNORE_INDEX) {
                ignored_fraction_sum += frac;
                kept.push(sample);
            }
        }
    } else {
        kept = after_class;
    }
    let kept_after_pixel = kept.len();
    if kept_after_pixel == 0 {
        return Err(Error::Contract(format!(
            "zero samples kept: the pixel filter removed all {kept_after_class} candidates"
        )));
    }

    let fd_postfilter = if kept.len() >= 2 {
        let kept_feats = feature_rows(&seg, kept.iter())?;
        Some(frechet_distance(&kept_feats, &real_feats)?)
    } else {
        None
    };

    write_container(&kept, flow.cfg.classes, &job.out)?;

    let report = SynthesisReport {
        generated,
        kept_after_class_filter: kept_after_class,
        kept_after_pixel_filter: kept_after_pixel,
        ignored_pixel_fraction: if kept_after_pixel > 0 && job.pixel_filter {
            ignored_fraction_sum / kept_after_pixel as f64
        } else {
            0.0
        },
        fd_prefilter,
        fd_postfilter,
        mean_ce_per_step,
        mean_alpha: (alpha_n > 0).then(|| alpha_sum / alpha_n as f64),
        filter_order: "class_count,pixel".into(),
        downstream: Vec::new(),
        warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((kept, report, logs))
}

fn feature_rows<'a>(
    seg: &SegNet,
    samples: impl Iterator<Item = &'a SceneSample>,
) -> Result<Vec<Vec<f64>>> {
    let samples: Vec<&SceneSample> = samples.collect();
    samples
        .par_iter()
        .map(|s| seg.features(&s.image))
        .collect()
}

// ── downstream scoring ───────────────────────────────────────────────

/// Train a fresh net on real + synthetic and score on held-out real
/// validation data.
pub fn run_downstream(
    real: &[SceneSample],
    synth: &[SceneSample],
    val: &[SceneSample],
    net_cfg: SegNetConfig,
    epochs: usize,
    train: &SegTrainConfig,
    seed: u64,
) -> Result<SegMetrics> {
    if real.is_empty() || val.is_empty() {
        return Err(Error::Contract(
            "run_downstream: real train and validation sets must be nonempty".into(),
        ));
    }
    let mut mixed: Vec<SceneSample> = Vec::with_capacity(real.len() + synth.len());
    mixed.extend_from_slice(real);
    mixed.extend_from_slice(synth);
    let mut net = SegNet::new(net_cfg, seed)?;
    let tc = SegTrainConfig {
        epochs,
        seed,
        ..*train
    };
    train_seg_from(&mut net, &mixed, &tc, 0, |_, _| {})?;
    let preds: Vec<Result<Vec<u8>>> = val.par_iter().map(|s| net.predict(&s.image)).collect();
    let mut pred_maps = Vec::with_capacity(val.len());
    for p in preds {
        pred_maps.push(p?);
    }
    let gt_maps: Vec<Vec<u8>> = val.iter().map(|s| s.mask.clone()).collect();
    compute_metrics(&pred_maps, &gt_maps, net_cfg.classes)
}

/// Container-path wrapper with a class-count agreement check.
pub fn run_downstream_paths(
    real: &Path,
    synth: &Path,
    val: &Path,
    net_cfg: SegNetConfig,
    epochs: usize,
    train: &SegTrainConfig,
    seed: u64,
) -> Result<SegMetrics> {
    let (rh, real_samples) = read_container(real)?;
    let (sh, synth_samples) = read_container(synth)?;
    let (vh, val_samples) = read_container(val)?;
    if rh.classes != sh.classes || rh.classes != vh.classes {
        return Err(Error::Config(format!(
            "class counts disagree: real {}, synth {}, val {}",
            rh.classes, sh.classes, vh.classes
        )));
    }
    run_downstream(
        &real_samples,
        &synth_samples,
        &val_samples,
        net_cfg,
        epochs,
        train,
        seed,
    )
}

// ── pipeline stages (shared by the CLI and the sweep) ────────────────

/// Generate the real train/val containers. Returns (train, val) counts.
pub fn gen_data(cfg: &RunConfig) -> Result<(usize, usize)> {
    let total = cfg.total_samples();
    let val_n = cfg.val_samples();
    let all = generate_dataset(&cfg.scene, total)?;
    let train = &all[..total - val_n];
    let val = &all[total - val_n..];
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_container(train, cfg.scene.classes, &cfg.real_train_path())?;
    write_container(val, cfg.scene.classes, &cfg.real_val_path())?;
    Ok((train.len(), val.len()))
}

/// Train (or resume) the flow model for a scheme and save its checkpoint.
pub fn train_flow_stage(
    cfg: &RunConfig,
    scheme: Scheme,
    resume: Option<&Path>,
    mut on_log: impl FnMut(u64, f64),
) -> Result<PathBuf> {
    let (_, train) = read_container(&cfg.real_train_path())?;
    let mut model_cfg = cfg.model;
    model_cfg.scheme = scheme;
    let (mut net, start) = match resume {
        Some(path) => FlowNet::load(path)?,
        None => (
            FlowNet::new(model_cfg, crate::rng::derive_seed(cfg.seed, "flow-init", 0))?,
            0,
        ),
    };
    if net.cfg != model_cfg {
        return Err(Error::Config(
            "resume checkpoint config does not match the run config".into(),
        ));
    }
    let tc = FlowTrainConfig {
        steps: cfg.flow_train.steps,
        batch: cfg.flow_train.batch,
        lr: cfg.flow_train.lr,
        weight_decay: cfg.flow_train.weight_decay,
        seed: crate::rng::derive_seed(cfg.seed, "flow-train", 0),
        log_every: cfg.flow_train.log_every,
    };
    let end = train_flow(&mut net, &train, &tc, start, &mut on_log)?;
    let path = cfg.flow_ckpt_path(scheme);
    net.save(&path, end)?;
    Ok(path)
}

/// Train the guidance segmentation net (optionally on a subset of the
/// train split), calibrate the pixel filter on validation data, and save.
pub fn train_seg_stage(
    cfg: &RunConfig,
    subset: Option<usize>,
    out: &Path,
    resume: Option<&Path>,
    mut on_log: impl FnMut(u64, f64),
) -> Result<PathBuf> {
    let (_, train) = read_container(&cfg.real_train_path())?;
    let (_, val) = read_container(&cfg.real_val_path())?;
    let subset = subset.unwrap_or(train.len()).min(train.len());
    let data = &train[..subset];
    let net_cfg = SegNetConfig {
        classes: cfg.scene.classes,
        channels: cfg.scene.channels,
        image_size: cfg.scene.size,
        base: cfg.seg_train.base,
    };
    let (mut net, start) = match resume {
        Some(path) => {
            let (net, steps, _) = SegNet::load(path)?;
            (net, steps)
        }
        None => (
            SegNet::new(net_cfg, crate::rng::derive_seed(cfg.seed, "seg-init", 0))?,
            0,
        ),
    };
    let tc = SegTrainConfig {
        epochs: cfg.seg_train.epochs,
        batch: cfg.seg_train.batch,
        lr: cfg.seg_train.lr,
        weight_decay: cfg.seg_train.weight_decay,
        augment: cfg.seg_train.augment,
        seed: crate::rng::derive_seed(cfg.seed, "seg-train", subset as u64),
    };
    let end = train_seg_from(&mut net, data, &tc, start, &mut on_log)?;
    let calibration = calibrate_filter(&net, &val)?;
    net.save(out, end, Some(&calibration))?;
    Ok(out.to_path_buf())
}

/// Build the synthesis job a run config implies for one sampler setting.
pub fn synthesis_job(cfg: &RunConfig, scheme: Scheme, sampler: SamplerConfig) -> SynthesisJob {
    SynthesisJob {
        flow_ckpt: cfg.flow_ckpt_path(scheme),
        seg_ckpt: cfg.seg_ckpt_path(),
        mask_source: cfg.real_train_path(),
        sampler,
        seeds_per_mask: cfg.synth.seeds_per_mask,
        class_count_filter: cfg.filter.class_count,
        pixel_filter: cfg.filter.pixel,
        phi: cfg.filter.phi,
        min_classes: cfg.filter.min_classes,
        rare_set: cfg.scene.rare_classes.clone(),
        max_masks: cfg.synth.max_masks,
        out: cfg.synth_path(scheme, sampler.steps, sampler.crfm_steps),
    }
}

// ── ablation sweep ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub scheme: Scheme,
    pub steps: usize,
    pub crfm_steps: usize,
    pub oa: f64,
    pub miou: f64,
    pub macc: f64,
    pub fd: f64,
    pub error: Option<String>,
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite metrics"));
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn sweep_cell(cfg: &RunConfig, scheme: Scheme, steps: usize, crfm: usize) -> Result<SweepRow> {
    let sampler = SamplerConfig {
        steps,
        crfm_steps: crfm,
        ..cfg.sampler
    };
    let job = synthesis_job(cfg, scheme, sampler);
    let (synth, report, _) = synthesize(&job)?;

    let (_, real) = read_container(&cfg.real_train_path())?;
    let (_, val) = read_container(&cfg.real_val_path())?;
    let real = downstream_real_slice(cfg, &real);
    let net_cfg = SegNetConfig {
        classes: cfg.scene.classes,
        channels: cfg.scene.channels,
        image_size: cfg.scene.size,
        base: cfg.seg_train.base,
    };
    let train = SegTrainConfig {
        batch: cfg.seg_train.batch,
        lr: cfg.seg_train.lr,
        weight_decay: cfg.seg_train.weight_decay,
        augment: cfg.seg_train.augment,
        ..SegTrainConfig::default()
    };
    // Shared downstream seeds across cells keep comparisons controlled.
    let mut oas = Vec::new();
    let mut mious = Vec::new();
    let mut maccs = Vec::new();
    for s in 0..cfg.sweep.downstream_seeds {
        let seed = crate::rng::derive_seed(cfg.seed, "downstream", s as u64);
        let m = run_downstream(
            real,
            &synth,
            &val,
            net_cfg,
            cfg.sweep.downstream_epochs,
            &train,
            seed,
        )?;
        oas.push(m.oa);
        mious.push(m.miou);
        maccs.push(m.macc);
    }
    Ok(SweepRow {
        scheme,
        steps,
        crfm_steps: crfm,
        oa: median(&mut oas),
        miou: median(&mut mious),
        macc: median(&mut maccs),
        fd: report.fd_prefilter,
        error: None,
    })
}

/// Grid over scheme x N x k. Per-cell failures land in the row and the
/// sweep continues.
pub fn ablation_sweep(
    cfg: &RunConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &scheme in &cfg.sweep.schemes {
        // One flow model per scheme, reused by every (N, k) cell.
        if !cfg.flow_ckpt_path(scheme).exists() {
            train_flow_stage(cfg, scheme, None, |_, _| {})?;
        }
        if !cfg.seg_ckpt_path().exists() {
            train_seg_stage(cfg, None, &cfg.seg_ckpt_path(), None, |_, _| {})?;
        }
        for &steps in &cfg.sweep.steps {
            for &crfm in &cfg.sweep.crfm_steps {
                if crfm > steps {
                    continue;
                }
                let row = match sweep_cell(cfg, scheme, steps, crfm) {
                    Ok(row) => row,
                    Err(e) => {
                        log::error!("sweep cell {scheme}/N={steps}/k={crfm} failed: {e}");
                        SweepRow {
                            scheme,
                            steps,
                            crfm_steps: crfm,
                            oa: f64::NAN,
                            miou: f64::NAN,
                            macc: f64::NAN,
                            fd: f64::NAN,
                            error: Some(e.to_string()),
                        }
                    }
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// The real slice downstream mixes train on.
pub fn downstream_real_slice<'a>(cfg: &RunConfig, real: &'a [SceneSample]) -> &'a [SceneSample] {
    match cfg.sweep.downstream_real {
        Some(n) => &real[..n.min(real.len())],
        None => real,
    }
}

/// Table-style CSV: scheme, steps, crfm, OA, mIoU, mAcc, FD.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "scheme,steps,crfm_steps,OA,mIoU,mAcc,FD,error")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scheme,
            r.steps,
            r.crfm_steps,
            fmt_metric(r.oa),
            fmt_metric(r.miou),
            fmt_metric(r.macc),
            fmt_metric(r.fd),
            r.error.as_deref().unwrap_or_default()
        )?;
    }
    out.flush()?;
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}
