//! The conditional velocity-field network.
//!
//! A small three-stream transformer over condition, image-patch, and
//! mask-patch tokens. The conditioning scheme is swappable; all schemes
//! share the forward signature, so training and sampling never branch on
//! the scheme. Velocity lives in image space: forward output shape equals
//! the image input shape.

mod attention;
mod layers;

pub(crate) use crate::numerics::Tensor;

use std::path::Path;
use std::sync::Arc;

use crate::ckpt;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var, IGNORE_INDEX};
use attention::{AdapterBlock, AdapterBlockVars, SiameseBlock, SiameseBlockVars, StreamsIn, TriBlock, TriBlockVars};
use layers::{Linear, LinearVars, Norm, NormVars, Watcher};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "tri")]
    TriAttention,
    #[serde(rename = "siamese")]
    SiameseMM,
    #[serde(rename = "adapter")]
    MaskAdapter,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scheme::TriAttention => "tri",
            Scheme::SiameseMM => "siamese",
            Scheme::MaskAdapter => "adapter",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tri" => Ok(Scheme::TriAttention),
            "siamese" => Ok(Scheme::SiameseMM),
            "adapter" => Ok(Scheme::MaskAdapter),
            other => Err(Error::Config(format!(
                "unknown scheme '{other}', expected tri|siamese|adapter"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowNetConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub patch: usize,
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub scheme: Scheme,
    /// Number of condition tokens the class histogram is expanded into.
    pub cond_tokens: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            d_model: 64,
            heads: 4,
            depth: 4,
            patch: 4,
            classes: 6,
            channels: 3,
            image_size: 32,
            scheme: Scheme::TriAttention,
            cond_tokens: 1,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} must be divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.depth == 0 || self.cond_tokens == 0 || self.classes < 2 {
            return Err(Error::Config("depth, cond_tokens, classes too small".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Image (and mask) token count.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

const TIME_FEATS: usize = 16;

enum Block {
    Tri(TriBlock),
    Siamese(SiameseBlock),
    Adapter(AdapterBlock),
}

enum BlockVars {
    Tri(TriBlockVars),
    Siamese(SiameseBlockVars),
    Adapter(AdapterBlockVars),
}

/// Three-stream rectified-flow transformer.
pub struct FlowNet {
    pub cfg: FlowNetConfig,
    img_embed: Linear,
    mask_embed: Linear,
    cond_embed: Linear,
    img_pos: Tensor,
    mask_pos: Tensor,
    time_l1: Linear,
    time_l2: Linear,
    /// Static mask K/V projections, projected once per forward
    /// (MaskAdapter scheme only).
    adapter_kv: Option<(Linear, Linear)>,
    blocks: Vec<Block>,
    head_norm: Norm,
    head: Linear,
    patch_idx: Arc<Vec<u32>>,
    unpatch_idx: Arc<Vec<u32>>,
}

/// Watched tape handles for one forward pass, plus leaf order aligned with
/// `named_params`.
pub struct FlowVars {
    img_embed: LinearVars,
    mask_embed: LinearVars,
    cond_embed: LinearVars,
    img_pos: Var,
    mask_pos: Var,
    time_l1: LinearVars,
    time_l2: LinearVars,
    adapter_kv: Option<(LinearVars, LinearVars)>,
    blocks: Vec<BlockVars>,
    head_norm: NormVars,
    head: LinearVars,
    pub leaves: Vec<Var>,
}

impl FlowNet {
    pub fn new(cfg: FlowNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, "flownet-init", 0);
        let d = cfg.d_model;
        let tokens = cfg.tokens();
        let blocks = (0..cfg.depth)
            .map(|_| match cfg.scheme {
                Scheme::TriAttention => Block::Tri(TriBlock::new(d, &mut rng)),
                Scheme::SiameseMM => Block::Siamese(SiameseBlock::new(d, &mut rng)),
                Scheme::MaskAdapter => Block::Adapter(AdapterBlock::new(d, &mut rng)),
            })
            .collect();
        let adapter_kv = match cfg.scheme {
            Scheme::MaskAdapter => Some((Linear::new(d, d, &mut rng), Linear::new(d, d, &mut rng))),
            _ => None,
        };
        let (patch_idx, unpatch_idx) = patch_maps(cfg.channels, cfg.image_size, cfg.patch);
        Ok(FlowNet {
            img_embed: Linear::new(cfg.patch_dim(), d, &mut rng),
            mask_embed: Linear::new(cfg.classes, d, &mut rng),
            cond_embed: Linear::new(cfg.classes, cfg.cond_tokens * d, &mut rng),
            img_pos: Tensor::randn(vec![tokens, d], &mut rng).scale(0.02).param(),
            mask_pos: Tensor::randn(vec![tokens, d], &mut rng).scale(0.02).param(),
            time_l1: Linear::new(TIME_FEATS, d, &mut rng),
            time_l2: Linear::new(d, d, &mut rng),
            adapter_kv,
            blocks,
            head_norm: Norm::new(d),
            head: Linear::new(d, cfg.patch_dim(), &mut rng),
            cfg,
            patch_idx,
            unpatch_idx,
        })
    }

    pub fn watch(&self, tape: &Tape, train: bool) -> FlowVars {
        let mut w = Watcher::new(tape, train);
        let img_embed = self.img_embed.watch(&mut w);
        let mask_embed = self.mask_embed.watch(&mut w);
        let cond_embed = self.cond_embed.watch(&mut w);
        let img_pos = w.watch(&self.img_pos);
        let mask_pos = w.watch(&self.mask_pos);
        let time_l1 = self.time_l1.watch(&mut w);
        let time_l2 = self.time_l2.watch(&mut w);
        let adapter_kv = self
            .adapter_kv
            .as_ref()
            .map(|(k, v)| (k.watch(&mut w), v.watch(&mut w)));
        let blocks = self
            .blocks
            .iter()
            .map(|b| match b {
                Block::Tri(b) => BlockVars::Tri(b.watch(&mut w)),
                Block::Siamese(b) => BlockVars::Siamese(b.watch(&mut w)),
                Block::Adapter(b) => BlockVars::Adapter(b.watch(&mut w)),
            })
            .collect();
        let head_norm = self.head_norm.watch(&mut w);
        let head = self.head.watch(&mut w);
        FlowVars {
            img_embed,
            mask_embed,
            cond_embed,
            img_pos,
            mask_pos,
            time_l1,
            time_l2,
            adapter_kv,
            blocks,
            head_norm,
            head,
            leaves: w.leaves,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.img_embed.collect("img_embed", &mut out);
        self.mask_embed.collect("mask_embed", &mut out);
        self.cond_embed.collect("cond_embed", &mut out);
        out.push(("img_pos".into(), &self.img_pos));
        out.push(("mask_pos".into(), &self.mask_pos));
        self.time_l1.collect("time_l1", &mut out);
        self.time_l2.collect("time_l2", &mut out);
        if let Some((k, v)) = &self.adapter_kv {
            k.collect("adapter_k", &mut out);
            v.collect("adapter_v", &mut out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            match b {
                Block::Tri(b) => b.collect(&name, &mut out),
                Block::Siamese(b) => b.collect(&name, &mut out),
                Block::Adapter(b) => b.collect(&name, &mut out),
            }
        }
        self.head_norm.collect("head_norm", &mut out);
        self.head.collect("head", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.img_embed.collect_mut(&mut out);
        self.mask_embed.collect_mut(&mut out);
        self.cond_embed.collect_mut(&mut out);
        out.push(&mut self.img_pos);
        out.push(&mut self.mask_pos);
        self.time_l1.collect_mut(&mut out);
        self.time_l2.collect_mut(&mut out);
        if let Some((k, v)) = &mut self.adapter_kv {
            k.collect_mut(&mut out);
            v.collect_mut(&mut out);
        }
        for b in &mut self.blocks {
            match b {
                Block::Tri(b) => b.collect_mut(&mut out),
                Block::Siamese(b) => b.collect_mut(&mut out),
                Block::Adapter(b) => b.collect_mut(&mut out),
            }
        }
        self.head_norm.collect_mut(&mut out);
        self.head.collect_mut(&mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Token construction: image patches + positions, per-patch mask class
    /// fractions + positions, condition tokens, timestep added to image and
    /// mask tokens.
    pub fn embed_inputs(
        &self,
        tape: &Tape,
        vars: &FlowVars,
        z_t: &Tensor,
        mask: &[u8],
        cond_hist: &[f32],
        t: f32,
    ) -> Result<(Var, Var, Var)> {
        let cfg = &self.cfg;
        let expect = [cfg.channels, cfg.image_size, cfg.image_size];
        if z_t.shape() != expect {
            return Err(Error::shape("embed_inputs", z_t.shape(), &expect));
        }
        if mask.len() != cfg.image_size * cfg.image_size || cond_hist.len() != cfg.classes {
            return Err(Error::Contract(format!(
                "embed_inputs: mask len {} / cond len {} do not match config",
                mask.len(),
                cond_hist.len()
            )));
        }
        let tokens = cfg.tokens();

        // Image patch tokens.
        let z = tape.constant(z_t);
        let patches = tape.gather(z, self.patch_idx.clone(), vec![tokens, cfg.patch_dim()])?;
        let mut h_z = vars.img_embed.apply(tape, patches)?;
        h_z = tape.add(h_z, vars.img_pos)?;

        // Mask tokens: per-patch class fractions, linearly embedded.
        let fractions = mask_patch_fractions(mask, cfg.classes, cfg.image_size, cfg.patch);
        let frac = tape.constant(&Tensor::new(vec![tokens, cfg.classes], fractions)?);
        let mut h_m = vars.mask_embed.apply(tape, frac)?;
        h_m = tape.add(h_m, vars.mask_pos)?;

        // Timestep embedding, added to all image and mask tokens.
        let feats = tape.constant(&Tensor::new(vec![1, TIME_FEATS], time_features(t))?);
        let te = vars.time_l1.apply(tape, feats)?;
        let te = tape.silu(te);
        let te = vars.time_l2.apply(tape, te)?;
        let te = tape.reshape(te, vec![cfg.d_model])?;
        h_z = tape.add_bias(h_z, te)?;
        h_m = tape.add_bias(h_m, te)?;

        // Condition tokens from the class histogram.
        let cond = tape.constant(&Tensor::new(vec![1, cfg.classes], cond_hist.to_vec())?);
        let h_t = vars.cond_embed.apply(tape, cond)?;
        let h_t = tape.reshape(h_t, vec![cfg.cond_tokens, cfg.d_model])?;

        Ok((h_t, h_z, h_m))
    }

    /// Full velocity prediction recorded on `tape`. Output shape equals the
    /// image input shape.
    pub fn forward(
        &self,
        tape: &Tape,
        vars: &FlowVars,
        z_t: &Tensor,
        mask: &[u8],
        cond_hist: &[f32],
        t: f32,
    ) -> Result<Var> {
        let (h_t, h_z, h_m) = self.embed_inputs(tape, vars, z_t, mask, cond_hist, t)?;
        let mut streams = StreamsIn {
            t: h_t,
            z: h_z,
            m: h_m,
        };
        // Static mask features for the adapter scheme, projected once.
        let mask_kv = match (&vars.adapter_kv, self.cfg.scheme) {
            (Some((k, v)), Scheme::MaskAdapter) => {
                Some((k.apply(tape, streams.m)?, v.apply(tape, streams.m)?))
            }
            _ => None,
        };
        for block in &vars.blocks {
            streams = match block {
                BlockVars::Tri(b) => b.forward(tape, self.cfg.heads, streams)?,
                BlockVars::Siamese(b) => b.forward(tape, self.cfg.heads, streams)?,
                BlockVars::Adapter(b) => {
                    let (k, v) = mask_kv.as_ref().expect("adapter scheme has mask kv");
                    b.forward(tape, self.cfg.heads, streams, *k, *v)?
                }
            };
        }
        let normed = vars.head_norm.apply(tape, streams.z)?;
        let out = vars.head.apply(tape, normed)?;
        tape.gather(
            out,
            self.unpatch_idx.clone(),
            vec![self.cfg.channels, self.cfg.image_size, self.cfg.image_size],
        )
    }

    /// Untracked forward for sampling.
    pub fn velocity(
        &self,
        z_t: &Tensor,
        mask: &[u8],
        cond_hist: &[f32],
        t: f32,
    ) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.watch(&tape, false);
        let out = self.forward(&tape, &vars, z_t, mask, cond_hist, t)?;
        Ok(tape.value(out))
    }

    pub fn save(&self, path: &Path, trained_steps: u64) -> Result<()> {
        let meta = ckpt::CheckpointMeta {
            kind: "flow".into(),
            config: serde_json::to_value(self.cfg)?,
            trained_steps,
            extra: serde_json::Value::Null,
        };
        ckpt::save(path, &meta, &self.named_params())
    }

    /// Load a checkpoint; returns the net and its trained step counter.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let (meta, params) = ckpt::load(path)?;
        if meta.kind != "flow" {
            return Err(Error::Config(format!(
                "checkpoint kind '{}' is not a flow model",
                meta.kind
            )));
        }
        let cfg: FlowNetConfig = serde_json::from_value(meta.config.clone())?;
        let mut net = FlowNet::new(cfg, 0)?;
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        if names.len() != params.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "checkpoint has {} params, model expects {}",
                    params.len(),
                    names.len()
                ),
            });
        }
        let mut slots = net.params_mut();
        for (i, (name, tensor)) in params.into_iter().enumerate() {
            if name != names[i] {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("checkpoint param '{name}' does not match '{}'", names[i]),
                });
            }
            if slots[i].shape() != tensor.shape() {
                return Err(Error::shape("load", slots[i].shape(), tensor.shape()));
            }
            let requires = slots[i].requires_grad;
            *slots[i] = tensor;
            slots[i].requires_grad = requires;
        }
        Ok((net, meta.trained_steps))
    }

    #[cfg(test)]
    pub(crate) fn permute_image_tokens(&mut self, perm: &[usize]) {
        let block = self.cfg.patch_dim();
        let tokens = self.cfg.tokens();
        assert_eq!(perm.len(), tokens);
        let mut patch2 = vec![0u32; self.patch_idx.len()];
        for t in 0..tokens {
            for j in 0..block {
                patch2[t * block + j] = self.patch_idx[perm[t] * block + j];
            }
        }
        // Old token t lands at new row inv[t].
        let mut inv = vec![0usize; tokens];
        for (new_row, &old) in perm.iter().enumerate() {
            inv[old] = new_row;
        }
        let mut unpatch2 = vec![0u32; self.unpatch_idx.len()];
        for (pixel, &src) in self.unpatch_idx.iter().enumerate() {
            let (t, j) = (src as usize / block, src as usize % block);
            unpatch2[pixel] = (inv[t] * block + j) as u32;
        }
        self.patch_idx = Arc::new(patch2);
        self.unpatch_idx = Arc::new(unpatch2);
        let d = self.cfg.d_model;
        let old = self.img_pos.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            self.img_pos.data_mut()[new_row * d..(new_row + 1) * d]
                .copy_from_slice(&old.data()[old_row * d..(old_row + 1) * d]);
        }
    }
}

/// Element maps between [C, H, W] pixels and [T, p*p*C] patch tokens.
fn patch_maps(channels: usize, size: usize, p: usize) -> (Arc<Vec<u32>>, Arc<Vec<u32>>) {
    let grid = size / p;
    let block = p * p * channels;
    let tokens = grid * grid;
    let mut patch = vec![0u32; tokens * block];
    let mut unpatch = vec![0u32; tokens * block];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..channels {
                        let feat = (py * p + px) * channels + c;
                        let pixel = c * size * size + (gy * p + py) * size + (gx * p + px);
                        patch[token * block + feat] = pixel as u32;
                        unpatch[pixel] = (token * block + feat) as u32;
                    }
                }
            }
        }
    }
    (Arc::new(patch), Arc::new(unpatch))
}

/// Per-patch class fractions over non-ignored pixels; a patch with only
/// ignored pixels falls back to uniform.
pub fn mask_patch_fractions(mask: &[u8], classes: usize, size: usize, p: usize) -> Vec<f32> {
    let grid = size / p;
    let mut out = vec![0.0f32; grid * grid * classes];
    for gy in 0..grid {
        for gx in 0..grid {
            let token = gy * grid + gx;
            let mut counts = vec![0u32; classes];
            let mut total = 0u32;
            for py in 0..p {
                for px in 0..p {
                    let m = mask[(gy * p + py) * size + (gx * p + px)];
                    if m != IGNORE_INDEX {
                        counts[usize::from(m)] += 1;
                        total += 1;
                    }
                }
            }
            for c in 0..classes {
                out[token * classes + c] = if total > 0 {
                    counts[c] as f32 / total as f32
                } else {
                    1.0 / classes as f32
                };
            }
        }
    }
    out
}

fn time_features(t: f32) -> Vec<f32> {
    let mut out = Vec::with_capacity(TIME_FEATS);
    let halves = TIME_FEATS / 2;
    for i in 0..halves {
        let omega = 10f32.powf(3.0 * i as f32 / (halves - 1) as f32);
        out.push((omega * t).sin());
        out.push((omega * t).cos());
    }
    out
}
