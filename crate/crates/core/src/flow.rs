//! Rectified-flow training and sampling.
//!
//! Training supervises the velocity field along straight-line
//! interpolations z_t = (1-t) z0 + t z1 with constant target z1 - z0.
//! Sampling integrates the learned ODE from t=1 to t=0 with Euler steps;
//! the rectified sampler replaces the velocity on the first k (highest
//! noise) steps with a task-feedback correction: the gradient of a
//! segmentation cross-entropy on the pre-synthesized endpoint, taken with
//! respect to the *velocity*, never the state. The integrator state
//! accumulates in f64 so exact-field identities hold to well below 1e-6.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::FlowNet;
use crate::numerics::{AdamW, AdamWConfig, Tape, Tensor};
use crate::scenes::SceneSample;
use crate::segment::SegNet;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Anything that predicts instantaneous transport direction. Lets tests
/// drive the integrators with closed-form oracle fields.
pub trait VelocityField: Sync {
    fn velocity(&self, z_t: &Tensor, mask: &[u8], cond_hist: &[f32], t: f32) -> Result<Tensor>;
}

impl VelocityField for FlowNet {
    fn velocity(&self, z_t: &Tensor, mask: &[u8], cond_hist: &[f32], t: f32) -> Result<Tensor> {
        FlowNet::velocity(self, z_t, mask, cond_hist, t)
    }
}

/// Closure-backed field for synthetic-oracle tests; ignores conditioning.
pub struct OracleField<F: Fn(&Tensor, f32) -> Tensor + Sync>(pub F);

impl<F: Fn(&Tensor, f32) -> Tensor + Sync> VelocityField for OracleField<F> {
    fn velocity(&self, z_t: &Tensor, _mask: &[u8], _cond: &[f32], t: f32) -> Result<Tensor> {
        Ok((self.0)(z_t, t))
    }
}

// ── sampler configuration ────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Alpha {
    /// Explicit rectification strength.
    Fixed(f32),
    /// Calibrated on the first rectified step so that
    /// ||alpha g|| = ratio * ||v||.
    Auto { ratio: f32 },
}

impl Default for Alpha {
    fn default() -> Self {
        Alpha::Auto { ratio: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Total Euler steps.
    pub steps: usize,
    /// Rectified steps, applied from the first (highest-noise) step.
    pub crfm_steps: usize,
    pub alpha: Alpha,
    pub seed: u64,
    pub schedule: Schedule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 23,
            crfm_steps: 4,
            alpha: Alpha::default(),
            seed: 0,
            schedule: Schedule::Linear,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler: steps must be >= 1".into()));
        }
        if self.crfm_steps > self.steps {
            return Err(Error::Config(format!(
                "sampler: crfm_steps {} exceeds steps {}",
                self.crfm_steps, self.steps
            )));
        }
        if let Alpha::Fixed(a) = self.alpha {
            if a < 0.0 {
                return Err(Error::Config("sampler: alpha must be >= 0".into()));
            }
        }
        Ok(())
    }
}

// ── trajectory log ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryStep {
    /// 1-based position from the start of sampling.
    pub step: usize,
    pub t: f32,
    /// Pre-synth cross-entropy; present only on rectified steps.
    pub ce: Option<f64>,
    pub v_norm: f64,
    /// Raw gradient magnitude; present only on rectified steps. The
    /// normalized magnitude is the ratio to `v_norm`.
    pub g_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrajectoryLog {
    pub steps: Vec<TrajectoryStep>,
    /// Rectification strength actually applied (after calibration).
    pub alpha: Option<f32>,
    pub warnings: Vec<String>,
}

impl TrajectoryLog {
    /// CSV columns: step, t, ce, ||v||, ||g||.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "step,t,ce,v_norm,g_norm")?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.step,
                s.t,
                s.ce.map(|v| v.to_string()).unwrap_or_default(),
                s.v_norm,
                s.g_norm.map(|v| v.to_string()).unwrap_or_default(),
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

// ── flow algebra ─────────────────────────────────────────────────────

/// Linear trajectory point (1-t) z0 + t z1.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("interpolate: t={t} outside [0,1]")));
    }
    if z0.shape() != z1.shape() {
        return Err(Error::shape("interpolate", z0.shape(), z1.shape()));
    }
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// One-shot endpoint estimate z0_t = z_t - sigma_t v, with sigma_t = t
/// under the linear schedule.
pub fn presynth(z_t: &Tensor, t: f32, v: &Tensor) -> Result<Tensor> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("presynth: t={t} outside (0,1]")));
    }
    z_t.add_scaled(v, -t)
}

// ── training ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            steps: 800,
            batch: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
            log_every: 50,
        }
    }
}

/// Per-sample loss and (optionally) parameter gradients on a private tape.
fn rf_sample_loss(
    net: &FlowNet,
    sample: &SceneSample,
    draw_seed: u64,
    with_grads: bool,
) -> Result<(f32, Option<Vec<Tensor>>)> {
    let mut rng = crate::rng::stream_raw(draw_seed);
    let z0 = &sample.image;
    let z1 = Tensor::randn(z0.shape().to_vec(), &mut rng);
    let t: f32 = rng.random_range(0.0..1.0);
    let z_t = interpolate(z0, &z1, t)?;
    let target = z1.sub(z0)?;

    let tape = Tape::new();
    let vars = net.watch(&tape, with_grads);
    let v = net.forward(&tape, &vars, &z_t, &sample.mask, &sample.cond_hist, t)?;
    let tgt = tape.constant(&target);
    let diff = tape.sub(v, tgt)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq);
    let loss_value = tape.item(loss);
    if !with_grads {
        return Ok((loss_value, None));
    }
    let grads = tape.backward(loss)?;
    let named = net.named_params();
    let out = vars
        .leaves
        .iter()
        .zip(&named)
        .map(|(leaf, (_, p))| {
            grads
                .tensor(*leaf, p.shape())
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    Ok((loss_value, Some(out)))
}

/// Mean squared error between the predicted velocity and z1 - z0 over a
/// batch, with z1 ~ N(0,1) and t ~ U(0,1) drawn per sample from `seed`.
pub fn rf_training_loss(net: &FlowNet, batch: &[SceneSample], seed: u64) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Contract("rf_training_loss: empty batch".into()));
    }
    let losses: Vec<Result<(f32, Option<Vec<Tensor>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(j, s)| rf_sample_loss(net, s, crate::rng::derive_seed(seed, "rf-draw", j as u64), false))
        .collect();
    let mut total = 0.0f64;
    for r in losses {
        total += f64::from(r?.0);
    }
    Ok((total / batch.len() as f64) as f32)
}

/// Rectified-flow training loop. Returns the final step counter; loss
/// lines flow through `on_log(step, loss)` every `log_every` steps.
pub fn train_flow(
    net: &mut FlowNet,
    dataset: &[SceneSample],
    cfg: &FlowTrainConfig,
    start_step: u64,
    mut on_log: impl FnMut(u64, f64),
) -> Result<u64> {
    if dataset.is_empty() {
        return Err(Error::Contract("train_flow: empty dataset".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let param_count = net.named_params().len();
    for local in 0..cfg.steps {
        let step = start_step + local as u64;
        let mut batch_rng = crate::rng::stream(cfg.seed, "rf-batch", step);
        let indices: Vec<usize> = (0..cfg.batch)
            .map(|_| batch_rng.random_range(0..dataset.len()))
            .collect();
        let results: Vec<Result<(f32, Option<Vec<Tensor>>)>> = indices
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let draw = crate::rng::derive_seed(
                    cfg.seed,
                    "rf-draw",
                    step * cfg.batch as u64 + j as u64,
                );
                rf_sample_loss(net, &dataset[i], draw, true)
            })
            .collect();
        let mut loss_sum = 0.0f64;
        let mut acc: Vec<Tensor> = Vec::with_capacity(param_count);
        for r in results {
            let (loss, grads) = r?;
            loss_sum += f64::from(loss);
            let grads = grads.expect("training pass captures grads");
            if acc.is_empty() {
                acc = grads;
            } else {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    *a = a.add_scaled(g, 1.0)?;
                }
            }
        }
        let loss = loss_sum / cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical {
                step: step as usize,
                msg: format!("flow loss became {loss}"),
            });
        }
        let scale = 1.0 / cfg.batch as f32;
        let grads: Vec<Tensor> = acc.into_iter().map(|g| g.scale(scale)).collect();
        opt.step(&mut net.params_mut(), &grads)?;
        if cfg.log_every > 0 && (local % cfg.log_every == 0 || local + 1 == cfg.steps) {
            on_log(step, loss);
        }
    }
    Ok(start_step + cfg.steps as u64)
}

// ── sampling ─────────────────────────────────────────────────────────

/// Plain Euler integration from t=1 to t=0 over N steps.
pub fn euler_sample(
    field: &dyn VelocityField,
    z1: &Tensor,
    mask: &[u8],
    cond_hist: &[f32],
    steps: usize,
) -> Result<Tensor> {
    let cfg = SamplerConfig {
        steps,
        crfm_steps: 0,
        ..SamplerConfig::default()
    };
    integrate(field, None, z1, mask, cond_hist, &cfg).map(|(z, _)| z)
}

/// Output of one velocity rectification.
pub struct Rectification {
    pub v: Tensor,
    pub ce: f64,
    pub grad: Tensor,
}

/// Task-feedback correction of a predicted velocity: decode the pre-synth
/// endpoint (identity decoder in pixel space), score it against the
/// conditioning mask with the guidance net, and take one gradient step on
/// the velocity. The state z_t is constant to the tape; only the velocity
/// moves.
pub fn crfm_rectify(
    v_pred: &Tensor,
    z_t: &Tensor,
    t: f32,
    mask: &[u8],
    seg: &SegNet,
    alpha: f32,
) -> Result<Rectification> {
    if alpha < 0.0 {
        return Err(Error::Config(format!("crfm_rectify: alpha {alpha} < 0")));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Contract(format!("crfm_rectify: t={t} outside (0,1]")));
    }
    let tape = Tape::new();
    let seg_vars = seg.watch(&tape, false);
    let v = tape.leaf(&v_pred.clone().param());
    let z = tape.constant(z_t);
    // z0_t = z_t - sigma_t v; the identity decoder maps it straight to
    // pixel space.
    let x0 = tape.sub(z, tape.scale(v, t))?;
    let (rows, _) = seg.forward_on(&tape, &seg_vars, x0)?;
    let loss = tape.cross_entropy(rows, mask, seg.cfg.classes)?;
    let ce = f64::from(tape.item(loss));
    let grads = tape.backward(loss)?;
    let grad = grads
        .tensor(v, v_pred.shape())
        .unwrap_or_else(|| Tensor::zeros(v_pred.shape().to_vec()));
    let v_rect = v_pred.add_scaled(&grad, -alpha)?;
    Ok(Rectification { v: v_rect, ce, grad })
}

/// Euler sampling with the first k velocities rectified by task feedback.
pub fn crfm_sample(
    field: &dyn VelocityField,
    seg: &SegNet,
    z1: &Tensor,
    mask: &[u8],
    cond_hist: &[f32],
    cfg: &SamplerConfig,
) -> Result<(Tensor, TrajectoryLog)> {
    cfg.validate()?;
    if seg.cfg.classes != cond_hist.len() {
        return Err(Error::Config(format!(
            "crfm_sample: guidance net has {} classes, condition has {}",
            seg.cfg.classes,
            cond_hist.len()
        )));
    }
    integrate(field, Some(seg), z1, mask, cond_hist, cfg)
}

fn integrate(
    field: &dyn VelocityField,
    seg: Option<&SegNet>,
    z1: &Tensor,
    mask: &[u8],
    cond_hist: &[f32],
    cfg: &SamplerConfig,
) -> Result<(Tensor, TrajectoryLog)> {
    cfg.validate()?;
    let n = cfg.steps;
    let k = cfg.crfm_steps;
    let mut log = TrajectoryLog::default();
    if k > 0 {
        if k == n {
            let w = format!("crfm_steps = steps = {n}: rectifying every step risks mode collapse");
            log::warn!("{w}");
            log.warnings.push(w);
        } else if 2 * k > n {
            let w = format!("crfm_steps {k} exceeds half of {n} steps: mode-collapse territory");
            log::warn!("{w}");
            log.warnings.push(w);
        }
    }

    // f64 state; velocity evaluations see the f32 snapshot.
    let mut state: Vec<f64> = z1.data().iter().map(|&v| f64::from(v)).collect();
    let dt = -1.0f64 / n as f64;
    let mut alpha: Option<f32> = match cfg.alpha {
        Alpha::Fixed(a) => Some(a),
        Alpha::Auto { .. } => None,
    };

    for i in (1..=n).rev() {
        let step_no = n - i + 1;
        let t = i as f32 / n as f32;
        let snapshot = Tensor::new(
            z1.shape().to_vec(),
            state.iter().map(|&v| v as f32).collect(),
        )?;
        let mut v = field.velocity(&snapshot, mask, cond_hist, t)?;
        if !v.is_finite() {
            return Err(Error::Numerical {
                step: step_no,
                msg: format!("velocity non-finite at t={t}"),
            });
        }
        let rectify = step_no <= k;
        let (ce, g_norm) = if rectify {
            let seg = seg.ok_or_else(|| {
                Error::Config("crfm steps requested without a guidance net".into())
            })?;
            // Calibrate alpha on the first rectified step when requested.
            let a = match (alpha, cfg.alpha) {
                (Some(a), _) => a,
                (None, Alpha::Auto { ratio }) => {
                    let probe = crfm_rectify(&v, &snapshot, t, mask, seg, 0.0)?;
                    let g_norm = probe.grad.l2_norm();
                    let a = if g_norm > 0.0 {
                        (f64::from(ratio) * v.l2_norm() / g_norm) as f32
                    } else {
                        0.0
                    };
                    log::debug!("calibrated alpha = {a} (ratio {ratio})");
                    alpha = Some(a);
                    a
                }
                (None, Alpha::Fixed(a)) => a,
            };
            let rect = crfm_rectify(&v, &snapshot, t, mask, seg, a)?;
            let g_norm = rect.grad.l2_norm();
            v = rect.v;
            (Some(rect.ce), Some(g_norm))
        } else {
            (None, None)
        };
        log.steps.push(TrajectoryStep {
            step: step_no,
            t,
            ce,
            v_norm: v.l2_norm(),
            g_norm,
        });
        for (s, &vv) in state.iter_mut().zip(v.data()) {
            *s += f64::from(vv) * dt;
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: step_no,
                msg: format!("state non-finite after update at t={t}"),
            });
        }
    }
    log.alpha = alpha.or(match cfg.alpha {
        Alpha::Fixed(a) if k > 0 => Some(a),
        _ => None,
    });
    let out = Tensor::new(
        z1.shape().to_vec(),
        state.iter().map(|&v| v as f32).collect(),
    )?;
    Ok((out, log))
}
