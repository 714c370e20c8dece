//! Pipeline command line: generate data, train the flow and guidance
//! models, synthesize with rectified sampling, evaluate, and sweep.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical failure, 4 missing
//! artifact, 1 anything else. Log level comes from TODSYNTH_LOG
//! (error|info|debug).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use todsynth::config::RunConfig;
use todsynth::error::{Error, Result};
use todsynth::flow::SamplerConfig;
use todsynth::model::Scheme;
use todsynth::scenes::{export_pixmap, read_container};
use todsynth::segment::{SegNet, SegNetConfig, SegTrainConfig};
use todsynth::synthpipe;

#[derive(Parser)]
#[command(name = "todsynth", about = "Mask-conditioned rectified-flow data synthesis", version)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker parallelism bound for synthesis and training.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the real train/val containers.
    GenData {
        /// Total sample count (train + val); overrides the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the rectified-flow model.
    TrainFlow {
        /// tri|siamese|adapter; overrides the config.
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Continue from a checkpoint; the step counter resumes.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the guidance/downstream segmentation model and calibrate the
    /// pixel filter on the validation split.
    TrainSeg {
        /// Train on only the first N samples of the train split.
        #[arg(long)]
        subset: Option<usize>,
        /// Checkpoint path; defaults to <out_dir>/seg_guidance.todw.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a dataset from the train split's masks.
    Synth {
        #[arg(long)]
        scheme: Option<Scheme>,
        /// Euler steps; overrides the config sampler.
        #[arg(long)]
        steps: Option<usize>,
        /// Rectified steps; overrides the config sampler.
        #[arg(long = "crfm-steps")]
        crfm_steps: Option<usize>,
        /// Additionally write N sample image/mask pixmap pairs.
        #[arg(long = "export-pixmaps")]
        export_pixmaps: Option<usize>,
    },
    /// Train downstream on real+synth and report OA/mIoU/mAcc/FD JSON.
    Eval {
        /// Synthetic container; defaults to the config's synth path.
        #[arg(long)]
        synth: Option<PathBuf>,
    },
    /// Run the scheme x steps x crfm grid; emit CSV.
    Sweep,
}

#[derive(Serialize)]
struct EvalMetrics {
    #[serde(rename = "OA")]
    oa: f64,
    #[serde(rename = "mIoU")]
    miou: f64,
    #[serde(rename = "mAcc")]
    macc: f64,
    #[serde(rename = "FD")]
    fd: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("TODSYNTH_LOG")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.finalize()?;
            cfg
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.finalize()?;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut cfg = load_config(&cli)?;

    match cli.cmd {
        Cmd::GenData { count } => {
            if let Some(count) = count {
                cfg.data.samples = count;
                cfg.validate()?;
            }
            let (train, val) = synthpipe::gen_data(&cfg)?;
            println!("train,{train},val,{val}");
        }
        Cmd::TrainFlow { scheme, resume } => {
            let scheme = scheme.unwrap_or(cfg.model.scheme);
            cfg.model.scheme = scheme;
            let path =
                synthpipe::train_flow_stage(&cfg, scheme, resume.as_deref(), |step, loss| {
                    println!("step,{step},loss,{loss}");
                })?;
            println!("checkpoint,{}", path.display());
        }
        Cmd::TrainSeg {
            subset,
            out,
            resume,
        } => {
            let out = out.unwrap_or_else(|| cfg.seg_ckpt_path());
            let path = synthpipe::train_seg_stage(
                &cfg,
                subset,
                &out,
                resume.as_deref(),
                |epoch, loss| {
                    println!("step,{epoch},loss,{loss}");
                },
            )?;
            println!("checkpoint,{}", path.display());
        }
        Cmd::Synth {
            scheme,
            steps,
            crfm_steps,
            export_pixmaps,
        } => {
            let scheme = scheme.unwrap_or(cfg.model.scheme);
            let sampler = SamplerConfig {
                steps: steps.unwrap_or(cfg.sampler.steps),
                crfm_steps: crfm_steps.unwrap_or(cfg.sampler.crfm_steps),
                ..cfg.sampler
            };
            sampler.validate()?;
            let job = synthpipe::synthesis_job(&cfg, scheme, sampler);
            let (kept, report, logs) = synthpipe::synthesize(&job)?;
            let report_path = job.out.with_extension("report.json");
            std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
            if let Some(first) = logs.first() {
                first.write_csv(&job.out.with_extension("traj.csv"))?;
            }
            if let Some(n) = export_pixmaps {
                let dir = cfg.out_dir.join("pixmaps");
                std::fs::create_dir_all(&dir)?;
                for (i, sample) in kept.iter().take(n).enumerate() {
                    export_pixmap(sample, cfg.scene.classes, &dir.join(format!("sample_{i:04}")))?;
                }
            }
            println!(
                "generated,{},kept,{},container,{}",
                report.generated,
                kept.len(),
                job.out.display()
            );
        }
        Cmd::Eval { synth } => {
            let synth = synth.unwrap_or_else(|| {
                cfg.synth_path(cfg.model.scheme, cfg.sampler.steps, cfg.sampler.crfm_steps)
            });
            let metrics = eval_stage(&cfg, &synth)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            std::fs::write(cfg.out_dir.join("metrics.json"), &text)?;
            println!("{text}");
        }
        Cmd::Sweep => {
            let rows = synthpipe::ablation_sweep(&cfg, |row| {
                println!(
                    "cell,{},{},{},miou,{:.4},fd,{:.4}",
                    row.scheme, row.steps, row.crfm_steps, row.miou, row.fd
                );
            })?;
            let path = cfg.out_dir.join("sweep.csv");
            synthpipe::write_sweep_csv(&rows, &path)?;
            println!("csv,{}", path.display());
        }
    }
    Ok(())
}

fn eval_stage(cfg: &RunConfig, synth: &std::path::Path) -> Result<EvalMetrics> {
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
    let (rh, real) = read_container(&cfg.real_train_path())?;
    let (sh, synth_samples) = read_container(synth)?;
    let (vh, val) = read_container(&cfg.real_val_path())?;
    if rh.classes != sh.classes || rh.classes != vh.classes {
        return Err(Error::Config(format!(
            "class counts disagree: real {}, synth {}, val {}",
            rh.classes, sh.classes, vh.classes
        )));
    }
    let metrics = synthpipe::run_downstream(
        synthpipe::downstream_real_slice(cfg, &real),
        &synth_samples,
        &val,
        net_cfg,
        cfg.sweep.downstream_epochs,
        &train,
        crate_downstream_seed(cfg),
    )?;
    // Feature distance of the evaluated container against real training
    // data, under the guidance net's features.
    let (guidance, _, _) = SegNet::load(&cfg.seg_ckpt_path())?;
    let feats = |xs: &[todsynth::scenes::SceneSample]| -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|s| guidance.features(&s.image)).collect()
    };
    let fd = synthpipe::frechet_distance(&feats(&synth_samples)?, &feats(&real)?)?;
    Ok(EvalMetrics {
        oa: metrics.oa,
        miou: metrics.miou,
        macc: metrics.macc,
        fd,
    })
}

fn crate_downstream_seed(cfg: &RunConfig) -> u64 {
    todsynth::rng::derive_seed(cfg.seed, "downstream", 0)
}
