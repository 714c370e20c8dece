use todsynth::config::RunConfig;
use todsynth::scenes::read_container;
use todsynth::segment::{SegNetConfig, SegTrainConfig};
use todsynth::synthpipe::{run_downstream, synthesize, synthesis_job};
use todsynth::flow::SamplerConfig;
use todsynth::model::Scheme;

fn main() {
    let text = std::fs::read_to_string("/tmp/smoke/full.json").unwrap();
    let mut cfg: RunConfig = serde_json::from_str(&text).unwrap();
    cfg.finalize().unwrap();
    cfg.synth.max_masks = Some(32);
    let (_, real) = read_container(&cfg.real_train_path()).unwrap();
    let (_, val) = read_container(&cfg.real_val_path()).unwrap();
    let net_cfg = SegNetConfig { classes: 6, channels: 3, image_size: 32, base: cfg.seg_train.base };
    let tc = SegTrainConfig::default();
    let median = |mut v: Vec<f64>| { v.sort_by(|a,b| a.partial_cmp(b).unwrap()); v[v.len()/2] };

    // Baseline real-only at downstream_real = 32.
    let bas: Vec<f64> = (0..3u64).map(|s| {
        let seed = todsynth::rng::derive_seed(cfg.seed, "downstream", s);
        run_downstream(&real[..32], &[], &val, net_cfg, 10, &tc, seed).unwrap().miou
    }).collect();
    println!("k=none baseline(32 real): median mIoU {:.4}", median(bas));

    for k in [0usize, 2, 4, 8] {
        let sampler = SamplerConfig { steps: 16, crfm_steps: k, ..cfg.sampler };
        let job = synthesis_job(&cfg, Scheme::TriAttention, sampler);
        let (synth, report, _) = synthesize(&job).unwrap();
        let mious: Vec<f64> = (0..3u64).map(|s| {
            let seed = todsynth::rng::derive_seed(cfg.seed, "downstream", s);
            run_downstream(&real[..32], &synth, &val, net_cfg, 10, &tc, seed).unwrap().miou
        }).collect();
        println!("k={k}: kept {} ignored {:.3} fd_pre {:.2} median mIoU {:.4}",
            synth.len(), report.ignored_pixel_fraction, report.fd_prefilter, median(mious));
    }
}
