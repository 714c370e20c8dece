//! Shared test oracles.
//!
//! `ref64` re-implements both model forwards in 64-bit arithmetic,
//! independently of the tape, so central finite differences of the
//! reference are a noise-free gradient oracle for the f32 implementation.

#![allow(dead_code)]

use std::collections::HashMap;

use todsynth::model::{FlowNet, FlowNetConfig, Scheme};
use todsynth::numerics::Tensor;
use todsynth::segment::{SegNet, SegNetConfig};

pub struct Params {
    map: HashMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Params {
    pub fn from_flow(net: &FlowNet) -> Self {
        Self::from_named(net.named_params())
    }

    pub fn from_seg(net: &SegNet) -> Self {
        Self::from_named(net.named_params())
    }

    pub fn from_named(named: Vec<(String, &Tensor)>) -> Self {
        let map = named
            .into_iter()
            .map(|(name, t)| {
                (
                    name,
                    (
                        t.shape().to_vec(),
                        t.data().iter().map(|&v| f64::from(v)).collect(),
                    ),
                )
            })
            .collect();
        Params { map }
    }

    pub fn get(&self, name: &str) -> &(Vec<usize>, Vec<f64>) {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("reference: missing param {name}"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).1
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) {
        let entry = self.map.get_mut(name).expect("param exists");
        entry.1 = data;
    }
}

// ── f64 primitives ──────────────────────────────────────────────────

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += aip * b[p * n + j];
            }
        }
    }
    out
}

pub fn linear(x: &[f64], rows: usize, p: &Params, name: &str) -> Vec<f64> {
    let (wshape, w) = p.get(&format!("{name}.w"));
    let b = p.data(&format!("{name}.b"));
    let (k, n) = (wshape[0], wshape[1]);
    let mut out = matmul(x, w, rows, k, n);
    for (i, v) in out.iter_mut().enumerate() {
        *v += b[i % n];
    }
    out
}

pub fn silu(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v /= 1.0 + (-*v).exp();
    }
}

pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let cols = gain.len();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for c in 0..cols {
            out[r * cols + c] = row[c] * inv * gain[c];
        }
    }
    out
}

pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for r in 0..x.len() / cols {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
}

/// Multi-head attention over projected q/k/v, heads as column blocks.
pub fn multihead(q: &[f64], k: &[f64], v: &[f64], tq: usize, tk: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    for h in 0..heads {
        for i in 0..tq {
            let qrow = &q[i * d + h * dh..i * d + (h + 1) * dh];
            let mut scores = vec![0.0f64; tk];
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &k[j * d + h * dh..j * d + (h + 1) * dh];
                *s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_rows(&mut scores, tk);
            for (j, &w) in scores.iter().enumerate() {
                let vrow = &v[j * d + h * dh..j * d + (h + 1) * dh];
                for c in 0..dh {
                    out[i * d + h * dh + c] += w * vrow[c];
                }
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], labels: &[u8], classes: usize, ignore: u8) -> f64 {
    let mut total = 0.0;
    let mut scored = 0usize;
    for (p, &label) in labels.iter().enumerate() {
        if label == ignore {
            continue;
        }
        let row = &logits[p * classes..(p + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[usize::from(label)];
        scored += 1;
    }
    total / scored as f64
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    cin: usize,
    h: usize,
    wid: usize,
    cout: usize,
    kh: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let kw = kh;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wid + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wid as isize {
                                continue;
                            }
                            acc += x[ci * h * wid + iy as usize * wid + ix as usize]
                                * w[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[co * ho * wo + oy * wo + ox] = acc;
            }
        }
    }
    out
}

// ── FlowNet reference forward ───────────────────────────────────────

const TIME_FEATS: usize = 16;
const NORM_EPS: f64 = 1e-5_f32 as f64;

fn time_features(t: f64) -> Vec<f64> {
    let halves = TIME_FEATS / 2;
    let mut out = Vec::with_capacity(TIME_FEATS);
    for i in 0..halves {
        // Mirror the f32 frequency computation exactly.
        let omega = f64::from(10f32.powf(3.0 * i as f32 / (halves - 1) as f32));
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    out
}

fn patchify(z: &[f64], channels: usize, size: usize, p: usize) -> Vec<f64> {
    let grid = size / p;
    let block = p * p * channels;
    let mut out = vec![0.0; grid * grid * block];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..channels {
                        let feat = (py * p + px) * channels + c;
                        out[token * block + feat] =
                            z[c * size * size + (gy * p + py) * size + (gx * p + px)];
                    }
                }
            }
        }
    }
    out
}

fn unpatchify(tokens: &[f64], channels: usize, size: usize, p: usize) -> Vec<f64> {
    let grid = size / p;
    let block = p * p * channels;
    let mut out = vec![0.0; channels * size * size];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..channels {
                        let feat = (py * p + px) * channels + c;
                        out[c * size * size + (gy * p + py) * size + (gx * p + px)] =
                            tokens[token * block + feat];
                    }
                }
            }
        }
    }
    out
}

struct Streams {
    t: Vec<f64>,
    z: Vec<f64>,
    m: Vec<f64>,
    lt: usize,
    lz: usize,
    lm: usize,
}

fn qkv(p: &Params, name: &str, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        linear(x, rows, p, &format!("{name}.q")),
        linear(x, rows, p, &format!("{name}.k")),
        linear(x, rows, p, &format!("{name}.v")),
    )
}

fn concat_rows(parts: &[(&[f64], usize)]) -> Vec<f64> {
    let mut out = Vec::new();
    for (data, _) in parts {
        out.extend_from_slice(data);
    }
    out
}

fn add_inplace(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn ffn(p: &Params, name: &str, gain_name: &str, x: &[f64], rows: usize) -> Vec<f64> {
    let gain = p.data(gain_name);
    let normed = rms_norm(x, gain, NORM_EPS);
    let mut h = linear(&normed, rows, p, &format!("{name}.lin1"));
    silu(&mut h);
    linear(&h, rows, p, &format!("{name}.lin2"))
}

/// Mirrors `FlowNet::forward` in f64.
pub fn flow_forward(
    cfg: &FlowNetConfig,
    p: &Params,
    z_t: &[f64],
    mask: &[u8],
    cond: &[f64],
    t: f64,
) -> Vec<f64> {
    let d = cfg.d_model;
    let tokens = cfg.tokens();
    let pdim = cfg.patch * cfg.patch * cfg.channels;

    // Image tokens.
    let patches = patchify(z_t, cfg.channels, cfg.image_size, cfg.patch);
    let mut h_z = linear(&patches, tokens, p, "img_embed");
    add_inplace(&mut h_z, p.data("img_pos"));

    // Mask tokens from per-patch class fractions (recomputed in f64 from
    // the same integer counts).
    let fracs32 =
        todsynth::model::mask_patch_fractions(mask, cfg.classes, cfg.image_size, cfg.patch);
    let fracs: Vec<f64> = fracs32.iter().map(|&v| f64::from(v)).collect();
    let mut h_m = linear(&fracs, tokens, p, "mask_embed");
    add_inplace(&mut h_m, p.data("mask_pos"));

    // Timestep embedding added to image and mask tokens.
    let mut te = linear(&time_features(t), 1, p, "time_l1");
    silu(&mut te);
    let te = linear(&te, 1, p, "time_l2");
    for (i, v) in h_z.iter_mut().enumerate() {
        *v += te[i % d];
    }
    for (i, v) in h_m.iter_mut().enumerate() {
        *v += te[i % d];
    }

    // Condition tokens.
    let h_t = linear(cond, 1, p, "cond_embed");

    let mut s = Streams {
        t: h_t,
        z: h_z,
        m: h_m,
        lt: cfg.cond_tokens,
        lz: tokens,
        lm: tokens,
    };

    // Static adapter K/V, projected once.
    let adapter_kv = match cfg.scheme {
        Scheme::MaskAdapter => Some((
            linear(&s.m, s.lm, p, "adapter_k"),
            linear(&s.m, s.lm, p, "adapter_v"),
        )),
        _ => None,
    };

    for b in 0..cfg.depth {
        let name = format!("blocks.{b}");
        match cfg.scheme {
            Scheme::TriAttention => tri_block(cfg, p, &name, &mut s),
            Scheme::SiameseMM => siamese_block(cfg, p, &name, &mut s),
            Scheme::MaskAdapter => {
                let (mk, mv) = adapter_kv.as_ref().expect("adapter kv");
                adapter_block(cfg, p, &name, &mut s, mk, mv)
            }
        }
    }

    let normed = rms_norm(&s.z, p.data("head_norm.gain"), NORM_EPS);
    let out_tokens = linear(&normed, s.lz, p, "head");
    debug_assert_eq!(out_tokens.len(), tokens * pdim);
    unpatchify(&out_tokens, cfg.channels, cfg.image_size, cfg.patch)
}

fn tri_block(cfg: &FlowNetConfig, p: &Params, name: &str, s: &mut Streams) {
    let d = cfg.d_model;
    let lens = [s.lt, s.lz, s.lm];
    let normed: Vec<Vec<f64>> = [&s.t, &s.z, &s.m]
        .iter()
        .enumerate()
        .map(|(i, x)| rms_norm(x, p.data(&format!("{name}.norm_attn.{i}.gain")), NORM_EPS))
        .collect();
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (i, x) in normed.iter().enumerate() {
        let (q, k, v) = qkv(p, &format!("{name}.proj.{i}"), x, lens[i]);
        qs.push(q);
        ks.push(k);
        vs.push(v);
    }
    let total: usize = lens.iter().sum();
    let q = concat_rows(&[(&qs[0], lens[0]), (&qs[1], lens[1]), (&qs[2], lens[2])]);
    let k = concat_rows(&[(&ks[0], lens[0]), (&ks[1], lens[1]), (&ks[2], lens[2])]);
    let v = concat_rows(&[(&vs[0], lens[0]), (&vs[1], lens[1]), (&vs[2], lens[2])]);
    let joint = multihead(&q, &k, &v, total, total, d, cfg.heads);
    let mut start = 0;
    let mut outs = Vec::new();
    for (i, &len) in lens.iter().enumerate() {
        let part = &joint[start * d..(start + len) * d];
        outs.push(linear(part, len, p, &format!("{name}.proj.{i}.o")));
        start += len;
    }
    add_inplace(&mut s.t, &outs[0]);
    add_inplace(&mut s.z, &outs[1]);
    add_inplace(&mut s.m, &outs[2]);
    let ft = ffn(p, &format!("{name}.ffn.0"), &format!("{name}.norm_ffn.0.gain"), &s.t, s.lt);
    add_inplace(&mut s.t, &ft);
    let fz = ffn(p, &format!("{name}.ffn.1"), &format!("{name}.norm_ffn.1.gain"), &s.z, s.lz);
    add_inplace(&mut s.z, &fz);
    let fm = ffn(p, &format!("{name}.ffn.2"), &format!("{name}.norm_ffn.2.gain"), &s.m, s.lm);
    add_inplace(&mut s.m, &fm);
}

fn two_stream(
    cfg: &FlowNetConfig,
    p: &Params,
    proj0: &str,
    proj1: &str,
    a: &[f64],
    la: usize,
    b: &[f64],
    lb: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.d_model;
    let (qa, ka, va) = qkv(p, proj0, a, la);
    let (qb, kb, vb) = qkv(p, proj1, b, lb);
    let q = concat_rows(&[(&qa, la), (&qb, lb)]);
    let k = concat_rows(&[(&ka, la), (&kb, lb)]);
    let v = concat_rows(&[(&va, la), (&vb, lb)]);
    let joint = multihead(&q, &k, &v, la + lb, la + lb, d, cfg.heads);
    let oa = linear(&joint[..la * d], la, p, &format!("{proj0}.o"));
    let ob = linear(&joint[la * d..], lb, p, &format!("{proj1}.o"));
    (oa, ob)
}

fn siamese_block(cfg: &FlowNetConfig, p: &Params, name: &str, s: &mut Streams) {
    let nt = rms_norm(&s.t, p.data(&format!("{name}.norm_a.0.gain")), NORM_EPS);
    let nz_a = rms_norm(&s.z, p.data(&format!("{name}.norm_a.1.gain")), NORM_EPS);
    let nm = rms_norm(&s.m, p.data(&format!("{name}.norm_b.0.gain")), NORM_EPS);
    let nz_b = rms_norm(&s.z, p.data(&format!("{name}.norm_b.1.gain")), NORM_EPS);
    let (at, az_a) = two_stream(
        cfg,
        p,
        &format!("{name}.proj_a.0"),
        &format!("{name}.proj_a.1"),
        &nt,
        s.lt,
        &nz_a,
        s.lz,
    );
    let (bm, bz) = two_stream(
        cfg,
        p,
        &format!("{name}.proj_b.0"),
        &format!("{name}.proj_b.1"),
        &nm,
        s.lm,
        &nz_b,
        s.lz,
    );
    add_inplace(&mut s.t, &at);
    add_inplace(&mut s.z, &az_a);
    add_inplace(&mut s.z, &bz);
    add_inplace(&mut s.m, &bm);
    let ft = ffn(p, &format!("{name}.ffn.0"), &format!("{name}.norm_ffn.0.gain"), &s.t, s.lt);
    add_inplace(&mut s.t, &ft);
    let fz = ffn(p, &format!("{name}.ffn.1"), &format!("{name}.norm_ffn.1.gain"), &s.z, s.lz);
    add_inplace(&mut s.z, &fz);
    let fm = ffn(p, &format!("{name}.ffn.2"), &format!("{name}.norm_ffn.2.gain"), &s.m, s.lm);
    add_inplace(&mut s.m, &fm);
}

fn adapter_block(
    cfg: &FlowNetConfig,
    p: &Params,
    name: &str,
    s: &mut Streams,
    mask_k: &[f64],
    mask_v: &[f64],
) {
    let nt = rms_norm(&s.t, p.data(&format!("{name}.norm_attn.0.gain")), NORM_EPS);
    let nz = rms_norm(&s.z, p.data(&format!("{name}.norm_attn.1.gain")), NORM_EPS);
    let (at, az) = two_stream(
        cfg,
        p,
        &format!("{name}.proj.0"),
        &format!("{name}.proj.1"),
        &nt,
        s.lt,
        &nz,
        s.lz,
    );
    add_inplace(&mut s.t, &at);
    add_inplace(&mut s.z, &az);
    // Residual cross-attention onto static mask features.
    let nz2 = rms_norm(&s.z, p.data(&format!("{name}.adapter_norm.gain")), NORM_EPS);
    let q = linear(&nz2, s.lz, p, &format!("{name}.adapter_q"));
    let attn = multihead(&q, mask_k, mask_v, s.lz, s.lm, cfg.d_model, cfg.heads);
    let out = linear(&attn, s.lz, p, &format!("{name}.adapter_o"));
    add_inplace(&mut s.z, &out);
    let ft = ffn(p, &format!("{name}.ffn.0"), &format!("{name}.norm_ffn.0.gain"), &s.t, s.lt);
    add_inplace(&mut s.t, &ft);
    let fz = ffn(p, &format!("{name}.ffn.1"), &format!("{name}.norm_ffn.1.gain"), &s.z, s.lz);
    add_inplace(&mut s.z, &fz);
}

/// MSE of the reference forward against a target.
pub fn flow_mse(
    cfg: &FlowNetConfig,
    p: &Params,
    z_t: &[f64],
    mask: &[u8],
    cond: &[f64],
    t: f64,
    target: &[f64],
) -> f64 {
    let v = flow_forward(cfg, p, z_t, mask, cond, t);
    v.iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / v.len() as f64
}

// ── SegNet reference forward ────────────────────────────────────────

fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[ch * 4 * h * w + y * 2 * w + xx] = x[ch * h * w + (y / 2) * w + (xx / 2)];
            }
        }
    }
    out
}

fn conv_named(p: &Params, name: &str, x: &[f64], cin: usize, h: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (wshape, w) = p.get(&format!("{name}.w"));
    let b = p.data(&format!("{name}.b"));
    conv2d(x, w, b, cin, h, h, wshape[0], wshape[2], stride, pad)
}

/// Mirrors `SegNet::forward_on`: returns [H*W, K] pixel-row logits.
pub fn seg_forward(cfg: &SegNetConfig, p: &Params, image: &[f64]) -> Vec<f64> {
    let (h, f, k) = (cfg.image_size, cfg.base, cfg.classes);
    let mut s = conv_named(p, "stem", image, cfg.channels, h, 1, 1);
    silu(&mut s);
    let mut d1 = conv_named(p, "down1", &s, f, h, 2, 1);
    silu(&mut d1);
    let mut d2 = conv_named(p, "down2", &d1, 2 * f, h / 2, 2, 1);
    silu(&mut d2);
    let mut m = conv_named(p, "mid", &d2, 4 * f, h / 4, 1, 1);
    silu(&mut m);
    let u1 = upsample2x(&m, 4 * f, h / 4, h / 4);
    let mut u1 = conv_named(p, "up1", &u1, 4 * f, h / 2, 1, 1);
    add_inplace(&mut u1, &d1);
    silu(&mut u1);
    let u2 = upsample2x(&u1, 2 * f, h / 2, h / 2);
    let mut u2 = conv_named(p, "up2", &u2, 2 * f, h, 1, 1);
    add_inplace(&mut u2, &s);
    silu(&mut u2);
    let logits = conv_named(p, "head", &u2, f, h, 1, 0);
    // [K, H, W] -> [H*W, K].
    let mut rows = vec![0.0; h * h * k];
    for pix in 0..h * h {
        for c in 0..k {
            rows[pix * k + c] = logits[c * h * h + pix];
        }
    }
    rows
}

pub fn seg_ce(cfg: &SegNetConfig, p: &Params, image: &[f64], mask: &[u8]) -> f64 {
    let rows = seg_forward(cfg, p, image);
    cross_entropy(&rows, mask, cfg.classes, 255)
}

// ── generic FD harness ──────────────────────────────────────────────

/// Central difference of `f` w.r.t. `x` at selected indices.
pub fn finite_diff_at(
    x: &[f64],
    indices: &[usize],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// L2 relative error between an f32 gradient (restricted to `indices`)
/// and the oracle values. The denominator floor keeps parameters whose
/// true gradient is zero (e.g. attention key biases, which cancel in the
/// softmax) from dividing rounding noise by rounding noise.
pub fn l2_rel_err(got: &[f32], indices: &[usize], oracle: &[f64]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (pos, &i) in indices.iter().enumerate() {
        let diff = f64::from(got[i]) - oracle[pos];
        num += diff * diff;
        den += oracle[pos] * oracle[pos];
    }
    num.sqrt() / den.sqrt().max(1e-5)
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}
