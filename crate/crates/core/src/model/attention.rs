//! The three mask-conditioning schemes.
//!
//! All blocks share one signature — three token streams in, three out — so
//! the flow and sampler layers stay scheme-agnostic. Pre-normalization with
//! residual connections throughout.

use crate::error::Result;
use crate::numerics::{Tape, Var};
use rand::Rng;

use super::layers::{multihead, Mlp, MlpVars, Norm, NormVars, StreamProj, StreamProjVars};

pub(crate) struct StreamsIn {
    pub t: Var,
    pub z: Var,
    pub m: Var,
}

// ── unified triple attention ─────────────────────────────────────────

/// Joint attention over the concatenated condition/image/mask sequences,
/// each stream with its own projections.
#[derive(Debug, Clone)]
pub(crate) struct TriBlock {
    pub norm_attn: [Norm; 3],
    pub proj: [StreamProj; 3],
    pub norm_ffn: [Norm; 3],
    pub ffn: [Mlp; 3],
}

pub(crate) struct TriBlockVars {
    pub norm_attn: [NormVars; 3],
    pub proj: [StreamProjVars; 3],
    pub norm_ffn: [NormVars; 3],
    pub ffn: [MlpVars; 3],
}

impl TriBlock {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        TriBlock {
            norm_attn: [Norm::new(d), Norm::new(d), Norm::new(d)],
            proj: [
                StreamProj::new(d, rng),
                StreamProj::new(d, rng),
                StreamProj::new(d, rng),
            ],
            norm_ffn: [Norm::new(d), Norm::new(d), Norm::new(d)],
            ffn: [Mlp::new(d, rng), Mlp::new(d, rng), Mlp::new(d, rng)],
        }
    }

    pub fn watch(&self, w: &mut super::layers::Watcher) -> TriBlockVars {
        TriBlockVars {
            norm_attn: self.norm_attn.each_ref().map(|n| n.watch(w)),
            proj: self.proj.each_ref().map(|p| p.watch(w)),
            norm_ffn: self.norm_ffn.each_ref().map(|n| n.watch(w)),
            ffn: self.ffn.each_ref().map(|f| f.watch(w)),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a super::Tensor)>) {
        for (i, n) in self.norm_attn.iter().enumerate() {
            n.collect(&format!("{name}.norm_attn.{i}"), out);
        }
        for (i, p) in self.proj.iter().enumerate() {
            p.collect(&format!("{name}.proj.{i}"), out);
        }
        for (i, n) in self.norm_ffn.iter().enumerate() {
            n.collect(&format!("{name}.norm_ffn.{i}"), out);
        }
        for (i, f) in self.ffn.iter().enumerate() {
            f.collect(&format!("{name}.ffn.{i}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut super::Tensor>) {
        self.norm_attn.iter_mut().for_each(|n| n.collect_mut(out));
        self.proj.iter_mut().for_each(|p| p.collect_mut(out));
        self.norm_ffn.iter_mut().for_each(|n| n.collect_mut(out));
        self.ffn.iter_mut().for_each(|f| f.collect_mut(out));
    }
}

impl TriBlockVars {
    /// The attention alone (no norms, no residuals): per-modality Q/K/V,
    /// concat along tokens, joint attention, split back, output projections.
    pub fn tri_attention(
        &self,
        tape: &Tape,
        heads: usize,
        h: &StreamsIn,
    ) -> Result<(Var, Var, Var)> {
        let streams = [h.t, h.z, h.m];
        let lens: Vec<usize> = streams.iter().map(|&s| tape.shape_of(s)[0]).collect();
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (i, &s) in streams.iter().enumerate() {
            qs.push(self.proj[i].q.apply(tape, s)?);
            ks.push(self.proj[i].k.apply(tape, s)?);
            vs.push(self.proj[i].v.apply(tape, s)?);
        }
        let q = tape.concat0(&qs)?;
        let k = tape.concat0(&ks)?;
        let v = tape.concat0(&vs)?;
        let joint = multihead(tape, q, k, v, heads)?;
        let mut outs = Vec::with_capacity(3);
        let mut start = 0;
        for (i, &len) in lens.iter().enumerate() {
            let part = tape.narrow0(joint, start, len)?;
            outs.push(self.proj[i].o.apply(tape, part)?);
            start += len;
        }
        Ok((outs[0], outs[1], outs[2]))
    }

    pub fn forward(&self, tape: &Tape, heads: usize, h: StreamsIn) -> Result<StreamsIn> {
        let normed = StreamsIn {
            t: self.norm_attn[0].apply(tape, h.t)?,
            z: self.norm_attn[1].apply(tape, h.z)?,
            m: self.norm_attn[2].apply(tape, h.m)?,
        };
        let (at, az, am) = self.tri_attention(tape, heads, &normed)?;
        let mut t = tape.add(h.t, at)?;
        let mut z = tape.add(h.z, az)?;
        let mut m = tape.add(h.m, am)?;
        t = ffn_residual(tape, &self.norm_ffn[0], &self.ffn[0], t)?;
        z = ffn_residual(tape, &self.norm_ffn[1], &self.ffn[1], z)?;
        m = ffn_residual(tape, &self.norm_ffn[2], &self.ffn[2], m)?;
        Ok(StreamsIn { t, z, m })
    }
}

fn ffn_residual(tape: &Tape, norm: &NormVars, ffn: &MlpVars, x: Var) -> Result<Var> {
    let n = norm.apply(tape, x)?;
    let f = ffn.apply(tape, n)?;
    tape.add(x, f)
}

/// Two-stream joint attention used by the siamese and adapter backbones.
fn unified_attention(
    tape: &Tape,
    heads: usize,
    proj: [&StreamProjVars; 2],
    a: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let (la, lb) = (tape.shape_of(a)[0], tape.shape_of(b)[0]);
    let q = tape.concat0(&[proj[0].q.apply(tape, a)?, proj[1].q.apply(tape, b)?])?;
    let k = tape.concat0(&[proj[0].k.apply(tape, a)?, proj[1].k.apply(tape, b)?])?;
    let v = tape.concat0(&[proj[0].v.apply(tape, a)?, proj[1].v.apply(tape, b)?])?;
    let joint = multihead(tape, q, k, v, heads)?;
    let oa = proj[0].o.apply(tape, tape.narrow0(joint, 0, la)?)?;
    let ob = proj[1].o.apply(tape, tape.narrow0(joint, la, lb)?)?;
    Ok((oa, ob))
}

// ── siamese MM-attention ─────────────────────────────────────────────

/// Two parallel two-stream blocks with independent parameter sets:
/// block A fuses condition+image, block B fuses mask+image, and the two
/// image outputs are summed.
#[derive(Debug, Clone)]
pub(crate) struct SiameseBlock {
    pub norm_a: [Norm; 2], // t, z
    pub proj_a: [StreamProj; 2],
    pub norm_b: [Norm; 2], // m, z
    pub proj_b: [StreamProj; 2],
    pub norm_ffn: [Norm; 3],
    pub ffn: [Mlp; 3],
}

pub(crate) struct SiameseBlockVars {
    pub norm_a: [NormVars; 2],
    pub proj_a: [StreamProjVars; 2],
    pub norm_b: [NormVars; 2],
    pub proj_b: [StreamProjVars; 2],
    pub norm_ffn: [NormVars; 3],
    pub ffn: [MlpVars; 3],
}

impl SiameseBlock {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        SiameseBlock {
            norm_a: [Norm::new(d), Norm::new(d)],
            proj_a: [StreamProj::new(d, rng), StreamProj::new(d, rng)],
            norm_b: [Norm::new(d), Norm::new(d)],
            proj_b: [StreamProj::new(d, rng), StreamProj::new(d, rng)],
            norm_ffn: [Norm::new(d), Norm::new(d), Norm::new(d)],
            ffn: [Mlp::new(d, rng), Mlp::new(d, rng), Mlp::new(d, rng)],
        }
    }

    pub fn watch(&self, w: &mut super::layers::Watcher) -> SiameseBlockVars {
        SiameseBlockVars {
            norm_a: self.norm_a.each_ref().map(|n| n.watch(w)),
            proj_a: self.proj_a.each_ref().map(|p| p.watch(w)),
            norm_b: self.norm_b.each_ref().map(|n| n.watch(w)),
            proj_b: self.proj_b.each_ref().map(|p| p.watch(w)),
            norm_ffn: self.norm_ffn.each_ref().map(|n| n.watch(w)),
            ffn: self.ffn.each_ref().map(|f| f.watch(w)),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a super::Tensor)>) {
        for (i, n) in self.norm_a.iter().enumerate() {
            n.collect(&format!("{name}.norm_a.{i}"), out);
        }
        for (i, p) in self.proj_a.iter().enumerate() {
            p.collect(&format!("{name}.proj_a.{i}"), out);
        }
        for (i, n) in self.norm_b.iter().enumerate() {
            n.collect(&format!("{name}.norm_b.{i}"), out);
        }
        for (i, p) in self.proj_b.iter().enumerate() {
            p.collect(&format!("{name}.proj_b.{i}"), out);
        }
        for (i, n) in self.norm_ffn.iter().enumerate() {
            n.collect(&format!("{name}.norm_ffn.{i}"), out);
        }
        for (i, f) in self.ffn.iter().enumerate() {
            f.collect(&format!("{name}.ffn.{i}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut super::Tensor>) {
        self.norm_a.iter_mut().for_each(|n| n.collect_mut(out));
        self.proj_a.iter_mut().for_each(|p| p.collect_mut(out));
        self.norm_b.iter_mut().for_each(|n| n.collect_mut(out));
        self.proj_b.iter_mut().for_each(|p| p.collect_mut(out));
        self.norm_ffn.iter_mut().for_each(|n| n.collect_mut(out));
        self.ffn.iter_mut().for_each(|f| f.collect_mut(out));
    }
}

impl SiameseBlockVars {
    /// Attention alone: block A over [t, z], block B over [m, z] with
    /// independent parameters; the two image outputs are summed.
    /// `forward` inlines this with per-block pre-norms.
    #[cfg_attr(not(test), allow(dead_code))]
    pub fn siamese_attention(
        &self,
        tape: &Tape,
        heads: usize,
        h: &StreamsIn,
    ) -> Result<(Var, Var, Var)> {
        let (at, az_a) =
            unified_attention(tape, heads, [&self.proj_a[0], &self.proj_a[1]], h.t, h.z)?;
        let (bm, bz) =
            unified_attention(tape, heads, [&self.proj_b[0], &self.proj_b[1]], h.m, h.z)?;
        let az = tape.add(az_a, bz)?;
        Ok((at, az, bm))
    }

    pub fn forward(&self, tape: &Tape, heads: usize, h: StreamsIn) -> Result<StreamsIn> {
        let nt_a = self.norm_a[0].apply(tape, h.t)?;
        let nz_a = self.norm_a[1].apply(tape, h.z)?;
        let nm_b = self.norm_b[0].apply(tape, h.m)?;
        let nz_b = self.norm_b[1].apply(tape, h.z)?;
        let (at, az_a) =
            unified_attention(tape, heads, [&self.proj_a[0], &self.proj_a[1]], nt_a, nz_a)?;
        let (bm, bz) =
            unified_attention(tape, heads, [&self.proj_b[0], &self.proj_b[1]], nm_b, nz_b)?;
        let mut t = tape.add(h.t, at)?;
        let mut z = tape.add(tape.add(h.z, az_a)?, bz)?;
        let mut m = tape.add(h.m, bm)?;
        t = ffn_residual(tape, &self.norm_ffn[0], &self.ffn[0], t)?;
        z = ffn_residual(tape, &self.norm_ffn[1], &self.ffn[1], z)?;
        m = ffn_residual(tape, &self.norm_ffn[2], &self.ffn[2], m)?;
        Ok(StreamsIn { t, z, m })
    }
}

// ── mask adapter ─────────────────────────────────────────────────────

/// Backbone condition+image unified attention plus a residual
/// cross-attention in which image tokens query static mask features.
/// The mask stream itself is never updated.
#[derive(Debug, Clone)]
pub(crate) struct AdapterBlock {
    pub norm_attn: [Norm; 2], // t, z
    pub proj: [StreamProj; 2],
    pub adapter_norm: Norm,
    pub adapter_q: super::layers::Linear,
    pub adapter_o: super::layers::Linear,
    pub norm_ffn: [Norm; 2],
    pub ffn: [Mlp; 2],
}

pub(crate) struct AdapterBlockVars {
    pub norm_attn: [NormVars; 2],
    pub proj: [StreamProjVars; 2],
    pub adapter_norm: NormVars,
    pub adapter_q: super::layers::LinearVars,
    pub adapter_o: super::layers::LinearVars,
    pub norm_ffn: [NormVars; 2],
    pub ffn: [MlpVars; 2],
}

impl AdapterBlock {
    pub fn new<R: Rng>(d: usize, rng: &mut R) -> Self {
        AdapterBlock {
            norm_attn: [Norm::new(d), Norm::new(d)],
            proj: [StreamProj::new(d, rng), StreamProj::new(d, rng)],
            adapter_norm: Norm::new(d),
            adapter_q: super::layers::Linear::new(d, d, rng),
            adapter_o: super::layers::Linear::new(d, d, rng),
            norm_ffn: [Norm::new(d), Norm::new(d)],
            ffn: [Mlp::new(d, rng), Mlp::new(d, rng)],
        }
    }

    pub fn watch(&self, w: &mut super::layers::Watcher) -> AdapterBlockVars {
        AdapterBlockVars {
            norm_attn: self.norm_attn.each_ref().map(|n| n.watch(w)),
            proj: self.proj.each_ref().map(|p| p.watch(w)),
            adapter_norm: self.adapter_norm.watch(w),
            adapter_q: self.adapter_q.watch(w),
            adapter_o: self.adapter_o.watch(w),
            norm_ffn: self.norm_ffn.each_ref().map(|n| n.watch(w)),
            ffn: self.ffn.each_ref().map(|f| f.watch(w)),
        }
    }

    pub fn collect<'a>(&'a self, name: &str, out: &mut Vec<(String, &'a super::Tensor)>) {
        for (i, n) in self.norm_attn.iter().enumerate() {
            n.collect(&format!("{name}.norm_attn.{i}"), out);
        }
        for (i, p) in self.proj.iter().enumerate() {
            p.collect(&format!("{name}.proj.{i}"), out);
        }
        self.adapter_norm.collect(&format!("{name}.adapter_norm"), out);
        self.adapter_q.collect(&format!("{name}.adapter_q"), out);
        self.adapter_o.collect(&format!("{name}.adapter_o"), out);
        for (i, n) in self.norm_ffn.iter().enumerate() {
            n.collect(&format!("{name}.norm_ffn.{i}"), out);
        }
        for (i, f) in self.ffn.iter().enumerate() {
            f.collect(&format!("{name}.ffn.{i}"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut super::Tensor>) {
        self.norm_attn.iter_mut().for_each(|n| n.collect_mut(out));
        self.proj.iter_mut().for_each(|p| p.collect_mut(out));
        self.adapter_norm.collect_mut(out);
        self.adapter_q.collect_mut(out);
        self.adapter_o.collect_mut(out);
        self.norm_ffn.iter_mut().for_each(|n| n.collect_mut(out));
        self.ffn.iter_mut().for_each(|f| f.collect_mut(out));
    }
}

impl AdapterBlockVars {
    /// h_z' = h_z + CrossAttn(Q = h_z, K = V = static mask features).
    pub fn mask_adapter_attention(
        &self,
        tape: &Tape,
        heads: usize,
        h_z: Var,
        mask_k: Var,
        mask_v: Var,
    ) -> Result<Var> {
        let q = self.adapter_q.apply(tape, self.adapter_norm.apply(tape, h_z)?)?;
        let attn = multihead(tape, q, mask_k, mask_v, heads)?;
        let out = self.adapter_o.apply(tape, attn)?;
        tape.add(h_z, out)
    }

    /// mask_k/mask_v are the once-projected static mask features shared by
    /// every block.
    pub fn forward(
        &self,
        tape: &Tape,
        heads: usize,
        h: StreamsIn,
        mask_k: Var,
        mask_v: Var,
    ) -> Result<StreamsIn> {
        let nt = self.norm_attn[0].apply(tape, h.t)?;
        let nz = self.norm_attn[1].apply(tape, h.z)?;
        let (at, az) = unified_attention(tape, heads, [&self.proj[0], &self.proj[1]], nt, nz)?;
        let mut t = tape.add(h.t, at)?;
        let z = tape.add(h.z, az)?;
        let mut z = self.mask_adapter_attention(tape, heads, z, mask_k, mask_v)?;
        t = ffn_residual(tape, &self.norm_ffn[0], &self.ffn[0], t)?;
        z = ffn_residual(tape, &self.norm_ffn[1], &self.ffn[1], z)?;
        Ok(StreamsIn { t, z, m: h.m })
    }
}
