//! Parameterized layers recorded onto a tape.
//!
//! Each layer pairs three walks that must stay in field order: `watch`
//! (tape leaves), `collect` (named views), `collect_mut` (optimizer access).
//! A test in `mod.rs` asserts the walks stay aligned.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use rand::Rng;

pub(crate) const NORM_EPS: f32 = 1e-5;

/// Registers parameters on a tape and remembers leaf order.
pub struct Watcher<'a> {
    pub tape: &'a Tape,
    train: bool,
    pub leaves: Vec<Var>,
}

impl<'a> Watcher<'a> {
    pub fn new(tape: &'a Tape, train: bool) -> Self {
        Watcher {
            tape,
            train,
            leaves: Vec::new(),
        }
    }

    pub fn watch(&mut self, t: &Tensor) -> Var {
        let v = if self.train {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.leaves.push(v);
        v
    }
}

// ── linear ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: Tensor, // [in, out]
    pub b: Tensor, // [out]
}

pub(crate) struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn new<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (inp as f32).sqrt();
        Linear {
            w: Tensor::randn(vec![inp, out], rng).scale(scale).param(),
            b: Tensor::zeros(vec![out]).param(),
        }
    }

    pub fn watch(&self, w: &mut Watcher) -> LinearVars {
        LinearVars {
            w: w.watch(&self.w),
            b: w.watch(&self.b),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.w"), &self.w));
        out.push((format!("{name}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.w);
        out.push(&mut self.b);
    }
}

impl LinearVars {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

// ── rms norm ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gain: Tensor, // [d]
}

pub(crate) struct NormVars {
    pub gain: Var,
}

impl Norm {
    pub fn new(d: usize) -> Self {
        Norm {
            gain: Tensor::full(vec![d], 1.0).param(),
        }
    }

    pub fn watch(&self, w: &mut Watcher) -> NormVars {
        NormVars {
            gain: w.watch(&self.gain),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{name}.gain"), &self.gain));
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gain);
    }
}

impl NormVars {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.rms_norm(x, self.gain, NORM_EPS)
    }
}

// ── feed-forward ─────────────────────────────────────────────────────

pub(crate) const FFN_MULT: usize = 2;

#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    pub lin1: Linear,
    pub lin2: Linear,
}

pub(crate) struct MlpVars {
    pub lin1: LinearVars,
    pub lin2: LinearVars,
}

impl Mlp {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        Mlp {
            lin1: Linear::new(d, FFN_MULT * d, rng),
            lin2: Linear::new(FFN_MULT * d, d, rng),
        }
    }

    pub fn watch(&self, w: &mut Watcher) -> MlpVars {
        MlpVars {
            lin1: self.lin1.watch(w),
            lin2: self.lin2.watch(w),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.lin1.collect(&format!("{name}.lin1"), out);
        self.lin2.collect(&format!("{name}.lin2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.lin1.collect_mut(out);
        self.lin2.collect_mut(out);
    }
}

impl MlpVars {
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        let h = self.lin1.apply(tape, x)?;
        let h = tape.silu(h);
        self.lin2.apply(tape, h)
    }
}

// ── per-stream attention projections ─────────────────────────────────

#[derive(Debug, Clone)]
pub(crate) struct StreamProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

pub(crate) struct StreamProjVars {
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

impl StreamProj {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        StreamProj {
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    pub fn watch(&self, w: &mut Watcher) -> StreamProjVars {
        StreamProjVars {
            q: self.q.watch(w),
            k: self.k.watch(w),
            v: self.v.watch(w),
            o: self.o.watch(w),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.q.collect(&format!("{name}.q"), out);
        self.k.collect(&format!("{name}.k"), out);
        self.v.collect(&format!("{name}.v"), out);
        self.o.collect(&format!("{name}.o"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.q.collect_mut(out);
        self.k.collect_mut(out);
        self.v.collect_mut(out);
        self.o.collect_mut(out);
    }
}

// ── scaled-dot-product multi-head attention ──────────────────────────

/// Joint attention over already-projected q/k/v of shape [T, D].
/// Heads are interleaved column blocks of width D/heads.
pub(crate) fn multihead(tape: &Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (tq, d) = {
        let s = tape.shape_of(q);
        (s[0], s[1])
    };
    let tk = tape.shape_of(k)[0];
    let dh = d / heads;
    debug_assert_eq!(d % heads, 0);

    let qh = tape.gather(q, head_split_idx(tq, d, heads), vec![heads * tq, dh])?;
    let kh = tape.gather(k, head_split_idx(tk, d, heads), vec![heads * tk, dh])?;
    let vh = tape.gather(v, head_split_idx(tk, d, heads), vec![heads * tk, dh])?;

    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qs = tape.narrow0(qh, h * tq, tq)?;
        let ks = tape.narrow0(kh, h * tk, tk)?;
        let vs = tape.narrow0(vh, h * tk, tk)?;
        let kt = tape.gather(ks, transpose_idx(tk, dh), vec![dh, tk])?;
        let scores = tape.scale(tape.matmul(qs, kt)?, scale);
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vs)?);
    }
    let merged = tape.concat0(&outs)?;
    tape.gather(merged, head_merge_idx(tq, d, heads), vec![tq, d])
}

fn head_split_idx(t: usize, d: usize, heads: usize) -> Arc<Vec<u32>> {
    let dh = d / heads;
    let mut idx = Vec::with_capacity(t * d);
    for h in 0..heads {
        for row in 0..t {
            for c in 0..dh {
                idx.push((row * d + h * dh + c) as u32);
            }
        }
    }
    Arc::new(idx)
}

fn head_merge_idx(t: usize, d: usize, heads: usize) -> Arc<Vec<u32>> {
    let dh = d / heads;
    let mut idx = Vec::with_capacity(t * d);
    for row in 0..t {
        for h in 0..heads {
            for c in 0..dh {
                idx.push(((h * t + row) * dh + c) as u32);
            }
        }
    }
    Arc::new(idx)
}

fn transpose_idx(rows: usize, cols: usize) -> Arc<Vec<u32>> {
    let mut idx = Vec::with_capacity(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            idx.push((r * cols + c) as u32);
        }
    }
    Arc::new(idx)
}
