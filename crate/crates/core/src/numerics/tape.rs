//! Define-by-run reverse-mode tape.
//!
//! The tape is rebuilt per forward pass. Every recorded operation keeps
//! enough references to replay its adjoint; backward traverses the record
//! in exact reverse order and accumulates gradients additively across
//! fan-out, so identical tapes produce bit-identical gradients.
//!
//! A tape is confined to one execution context: parallelism happens across
//! independent samples, each with its own tape.

use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Ignore label for cross-entropy; matches the segmentation convention.
pub const IGNORE_INDEX: u8 = 255;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddN(Vec<Var>),
    /// x: [r, c] plus a length-c vector broadcast over rows.
    AddBias {
        x: Var,
        bias: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Silu(Var),
    SumAll(Var),
    MeanAll(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    /// Mean negative log-softmax of the true class over non-ignored rows.
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<u8>>,
        classes: usize,
        scored: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        eps: f32,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    /// out[i] = x[idx[i]]; indices may repeat (adjoint scatter-adds).
    Gather {
        x: Var,
        idx: Arc<Vec<u32>>,
    },
    Concat0(Vec<Var>),
    Narrow0 {
        x: Var,
        start: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    needs: bool,
    op: Op,
}

/// Gradient buffers produced by a backward pass, indexed by `Var`.
pub struct Grads {
    adj: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.adj.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var, shape: &[usize]) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape"))
    }

    /// Populate `t.grad` with d(loss)/d(leaf). No-op for untracked tensors.
    pub fn write_back(&self, v: Var, t: &mut Tensor) {
        if t.requires_grad {
            t.grad = self.get(v).map(|g| g.to_vec());
        }
    }
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f32>, needs: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            needs,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f32 {
        let nodes = self.nodes.borrow();
        debug_assert_eq!(nodes[v.0].value.len(), 1);
        nodes[v.0].value[0]
    }

    /// Record a gradient-tracked input if the tensor asks for it.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Record an input that never receives gradient.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(op, &na.shape, &nb.shape));
        }
        Ok((na.shape.clone(), na.needs || nb.needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary_same_shape("add", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(x, y)| x + y)
                .collect()
        };
        Ok(self.push(shape, value, needs, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary_same_shape("sub", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(x, y)| x - y)
                .collect()
        };
        Ok(self.push(shape, value, needs, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary_same_shape("mul", a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .iter()
                .zip(&nodes[b.0].value)
                .map(|(x, y)| x * y)
                .collect()
        };
        Ok(self.push(shape, value, needs, Op::Mul(a, b)))
    }

    pub fn scale(&self, x: Var, s: f32) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (
                n.shape.clone(),
                n.value.iter().map(|v| v * s).collect(),
                n.needs,
            )
        };
        self.push(shape, value, needs, Op::Scale(x, s))
    }

    /// Sum of same-shaped vars.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("add_n on empty list".into()))?;
        let mut needs = false;
        let (shape, mut value) = {
            let nodes = self.nodes.borrow();
            (nodes[first.0].shape.clone(), nodes[first.0].value.clone())
        };
        needs |= self.needs(first);
        for &x in &xs[1..] {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if n.shape != shape {
                return Err(Error::shape("add_n", &shape, &n.shape));
            }
            for (acc, v) in value.iter_mut().zip(&n.value) {
                *acc += v;
            }
            needs |= n.needs;
        }
        Ok(self.push(shape, value, needs, Op::AddN(xs.to_vec())))
    }

    /// x: [r, c]; bias: [c], broadcast-added to every row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            if nx.shape.len() != 2 || nb.shape.len() != 1 || nx.shape[1] != nb.shape[0] {
                return Err(Error::shape("add_bias", &nx.shape, &nb.shape));
            }
            let c = nx.shape[1];
            let value: Vec<f32> = nx
                .value
                .iter()
                .enumerate()
                .map(|(i, v)| v + nb.value[i % c])
                .collect();
            (nx.shape.clone(), value, nx.needs || nb.needs)
        };
        Ok(self.push(shape, value, needs, Op::AddBias { x, bias }))
    }

    // ── matmul ───────────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::shape("matmul", &na.shape, &nb.shape));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            let value = matmul_f64(&na.value, &nb.value, m, k, n);
            (m, k, n, value, na.needs || nb.needs)
        };
        Ok(self.push(vec![m, n], value, needs, Op::Matmul { a, b, m, k, n }))
    }

    // ── activations ──────────────────────────────────────────────────

    pub fn relu(&self, x: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (
                n.shape.clone(),
                n.value.iter().map(|v| v.max(0.0)).collect(),
                n.needs,
            )
        };
        self.push(shape, value, needs, Op::Relu(x))
    }

    pub fn silu(&self, x: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let value = n.value.iter().map(|&v| v * sigmoid(v)).collect();
            (n.shape.clone(), value, n.needs)
        };
        self.push(shape, value, needs, Op::Silu(x))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let s: f64 = n.value.iter().map(|&v| f64::from(v)).sum();
            (vec![s as f32], n.needs)
        };
        self.push(vec![1], value, needs, Op::SumAll(x))
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let s: f64 = n.value.iter().map(|&v| f64::from(v)).sum();
            (vec![(s / n.value.len() as f64) as f32], n.needs)
        };
        self.push(vec![1], value, needs, Op::MeanAll(x))
    }

    // ── softmax / cross-entropy ──────────────────────────────────────

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if axis >= n.shape.len() {
                return Err(Error::Contract(format!(
                    "softmax axis {} out of range for shape {:?}",
                    axis, n.shape
                )));
            }
            let value = softmax_forward(&n.value, &n.shape, axis);
            (n.shape.clone(), value, n.needs)
        };
        Ok(self.push(shape, value, needs, Op::Softmax { x, axis }))
    }

    /// logits: [P, C]; labels: length-P class indices, `IGNORE_INDEX` skips.
    pub fn cross_entropy(&self, logits: Var, labels: &[u8], classes: usize) -> Result<Var> {
        let (value, needs, scored) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[logits.0];
            if n.shape.len() != 2 || n.shape[1] != classes || n.shape[0] != labels.len() {
                return Err(Error::shape(
                    "cross_entropy",
                    &n.shape,
                    &[labels.len(), classes],
                ));
            }
            let mut total = 0.0f64;
            let mut scored = 0usize;
            for (p, &label) in labels.iter().enumerate() {
                if label == IGNORE_INDEX {
                    continue;
                }
                if usize::from(label) >= classes {
                    return Err(Error::Contract(format!(
                        "label {} out of range for {} classes at position {}",
                        label, classes, p
                    )));
                }
                let row = &n.value[p * classes..(p + 1) * classes];
                total += row_nll(row, usize::from(label));
                scored += 1;
            }
            if scored == 0 {
                return Err(Error::EmptyLoss);
            }
            (vec![(total / scored as f64) as f32], n.needs, scored)
        };
        Ok(self.push(
            vec![1],
            value,
            needs,
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
                classes,
                scored,
            },
        ))
    }

    // ── normalization ────────────────────────────────────────────────

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (nx, ng) = (&nodes[x.0], &nodes[gain.0]);
            if nx.shape.len() != 2 || ng.shape.len() != 1 || nx.shape[1] != ng.shape[0] {
                return Err(Error::shape("rms_norm", &nx.shape, &ng.shape));
            }
            let (rows, cols) = (nx.shape[0], nx.shape[1]);
            let mut value = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let row = &nx.value[r * cols..(r + 1) * cols];
                let inv = rms_inv(row, eps);
                for c in 0..cols {
                    value[r * cols + c] = (f64::from(row[c]) * inv) as f32 * ng.value[c];
                }
            }
            (nx.shape.clone(), value, nx.needs || ng.needs)
        };
        Ok(self.push(shape, value, needs, Op::RmsNorm { x, gain, eps }))
    }

    // ── convolution ──────────────────────────────────────────────────

    /// x: [Cin, H, W]; w: [Cout, Cin, kh, kw]; bias: [Cout].
    pub fn conv2d(&self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.0], &nodes[w.0], &nodes[bias.0]);
            if nx.shape.len() != 3 || nw.shape.len() != 4 || nx.shape[0] != nw.shape[1] {
                return Err(Error::shape("conv2d", &nx.shape, &nw.shape));
            }
            if nb.shape != [nw.shape[0]] {
                return Err(Error::shape("conv2d bias", &nb.shape, &nw.shape));
            }
            let dims = ConvDims::new(&nx.shape, &nw.shape, stride, pad)?;
            let value = conv2d_forward(&nx.value, &nw.value, &nb.value, &dims);
            let shape = vec![dims.cout, dims.ho, dims.wo];
            (shape, value, nx.needs || nw.needs || nb.needs)
        };
        Ok(self.push(
            shape,
            value,
            needs,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
        ))
    }

    // ── shape plumbing ───────────────────────────────────────────────

    /// out[i] = x[idx[i]]; `out_shape` gives the result layout.
    pub fn gather(&self, x: Var, idx: Arc<Vec<u32>>, out_shape: Vec<usize>) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let expected: usize = out_shape.iter().product();
            if expected != idx.len() {
                return Err(Error::Contract(format!(
                    "gather output shape {:?} expects {} indices, got {}",
                    out_shape,
                    expected,
                    idx.len()
                )));
            }
            let len = n.value.len() as u32;
            if idx.iter().any(|&i| i >= len) {
                return Err(Error::Contract("gather index out of range".into()));
            }
            let value = idx.iter().map(|&i| n.value[i as usize]).collect();
            (value, n.needs)
        };
        Ok(self.push(out_shape, value, needs, Op::Gather { x, idx }))
    }

    /// Concatenate 2-D nodes along the row axis.
    pub fn concat0(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat0 on empty list".into()));
        }
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].shape[1];
            let mut rows = 0;
            let mut value = Vec::new();
            let mut needs = false;
            for &p in parts {
                let n = &nodes[p.0];
                if n.shape.len() != 2 || n.shape[1] != cols {
                    return Err(Error::shape("concat0", &[rows, cols], &n.shape));
                }
                rows += n.shape[0];
                value.extend_from_slice(&n.value);
                needs |= n.needs;
            }
            (vec![rows, cols], value, needs)
        };
        Ok(self.push(shape, value, needs, Op::Concat0(parts.to_vec())))
    }

    /// Row slice [start, start+rows) of a 2-D node.
    pub fn narrow0(&self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let (shape, value, needs, cols) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            if n.shape.len() != 2 || start + rows > n.shape[0] {
                return Err(Error::Contract(format!(
                    "narrow0 [{start}, {}) out of range for shape {:?}",
                    start + rows,
                    n.shape
                )));
            }
            let cols = n.shape[1];
            let value = n.value[start * cols..(start + rows) * cols].to_vec();
            (vec![rows, cols], value, n.needs, cols)
        };
        Ok(self.push(
            shape,
            value,
            needs,
            Op::Narrow0 {
                x,
                start,
                rows,
                cols,
            },
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            let expected: usize = shape.iter().product();
            if expected != n.value.len() {
                return Err(Error::Contract(format!(
                    "reshape {:?} -> {:?} changes element count",
                    n.shape, shape
                )));
            }
            (n.value.clone(), n.needs)
        };
        Ok(self.push(shape, value, needs, Op::Reshape(x)))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let node = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("backward: var not on this tape".into()))?;
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if adj[i].is_none() || !nodes[i].needs {
                continue;
            }
            let dy = adj[i].take().expect("checked above");
            apply_adjoint(&nodes, i, &dy, &mut adj);
            adj[i] = Some(dy);
        }
        Ok(Grads { adj })
    }
}

// ── forward kernels ─────────────────────────────────────────────────

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major [m,k]x[k,n] with f64 row accumulators.
fn matmul_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let aip = f64::from(a[i * k + p]);
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (j, bj) in brow.iter().enumerate() {
                acc[j] += aip * f64::from(*bj);
            }
        }
        for j in 0..n {
            out[i * n + j] = acc[j] as f32;
        }
    }
    out
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn softmax_forward(x: &[f32], shape: &[usize], axis: usize) -> Vec<f32> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0f32; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f32::NEG_INFINITY;
            for asg in 0..len {
                max = max.max(x[base + asg * inner]);
            }
            let mut denom = 0.0f64;
            for asg in 0..len {
                denom += f64::from(x[base + asg * inner] - max).exp();
            }
            for asg in 0..len {
                out[base + asg * inner] =
                    (f64::from(x[base + asg * inner] - max).exp() / denom) as f32;
            }
        }
    }
    out
}

/// Negative log-softmax of class `label` for one logit row (f64 path).
fn row_nll(row: &[f32], label: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse: f64 = row
        .iter()
        .map(|&v| f64::from(v - max).exp())
        .sum::<f64>()
        .ln()
        + f64::from(max);
    lse - f64::from(row[label])
}

fn rms_inv(row: &[f32], eps: f32) -> f64 {
    let ms: f64 =
        row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / row.len() as f64;
    1.0 / (ms + f64::from(eps)).sqrt()
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Contract(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{w}"
            )));
        }
        Ok(ConvDims {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }
}

fn conv2d_forward(x: &[f32], w: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let mut out = vec![0.0f32; d.cout * d.ho * d.wo];
    for co in 0..d.cout {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let mut acc = f64::from(bias[co]);
                for ci in 0..d.cin {
                    for ky in 0..d.kh {
                        let iy = (ho * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (wo * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let xv = x[ci * d.h * d.w + iy as usize * d.w + ix as usize];
                            let wv = w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                            acc += f64::from(xv) * f64::from(wv);
                        }
                    }
                }
                out[co * d.ho * d.wo + ho * d.wo + wo] = acc as f32;
            }
        }
    }
    out
}

// ── adjoints ────────────────────────────────────────────────────────

fn accumulate(adj: &mut Vec<Option<Vec<f32>>>, nodes: &[Node], target: usize, delta: &[f32]) {
    if !nodes[target].needs {
        return;
    }
    let slot = adj[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    for (a, d) in slot.iter_mut().zip(delta) {
        *a += d;
    }
}

fn accumulate_at(
    adj: &mut Vec<Option<Vec<f32>>>,
    nodes: &[Node],
    target: usize,
    f: impl FnOnce(&mut [f32]),
) {
    if !nodes[target].needs {
        return;
    }
    let slot = adj[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn apply_adjoint(nodes: &[Node], i: usize, dy: &[f32], adj: &mut Vec<Option<Vec<f32>>>) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(adj, nodes, a.0, dy);
            accumulate(adj, nodes, b.0, dy);
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, a.0, dy);
            accumulate_at(adj, nodes, b.0, |g| {
                for (gv, d) in g.iter_mut().zip(dy) {
                    *gv -= d;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate_at(adj, nodes, a.0, |g| {
                for k in 0..dy.len() {
                    g[k] += dy[k] * bv[k];
                }
            });
            accumulate_at(adj, nodes, b.0, |g| {
                for k in 0..dy.len() {
                    g[k] += dy[k] * av[k];
                }
            });
        }
        Op::Scale(x, s) => {
            let s = *s;
            accumulate_at(adj, nodes, x.0, |g| {
                for (gv, d) in g.iter_mut().zip(dy) {
                    *gv += d * s;
                }
            });
        }
        Op::AddN(parts) => {
            for p in parts {
                accumulate(adj, nodes, p.0, dy);
            }
        }
        Op::AddBias { x, bias } => {
            accumulate(adj, nodes, x.0, dy);
            let c = nodes[bias.0].value.len();
            accumulate_at(adj, nodes, bias.0, |g| {
                for (k, d) in dy.iter().enumerate() {
                    g[k % c] += d;
                }
            });
        }
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if nodes[a.0].needs {
                // da = dy . b^T
                let bt = transpose(bv, k, n);
                let da = matmul_f64(dy, &bt, m, n, k);
                accumulate(adj, nodes, a.0, &da);
            }
            if nodes[b.0].needs {
                // db = a^T . dy
                let at = transpose(av, m, k);
                let db = matmul_f64(&at, dy, k, m, n);
                accumulate(adj, nodes, b.0, &db);
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[x.0].value;
            accumulate_at(adj, nodes, x.0, |g| {
                for k in 0..dy.len() {
                    if xv[k] > 0.0 {
                        g[k] += dy[k];
                    }
                }
            });
        }
        Op::Silu(x) => {
            let xv = &nodes[x.0].value;
            accumulate_at(adj, nodes, x.0, |g| {
                for k in 0..dy.len() {
                    let s = sigmoid(xv[k]);
                    g[k] += dy[k] * (s + xv[k] * s * (1.0 - s));
                }
            });
        }
        Op::SumAll(x) => {
            let d = dy[0];
            accumulate_at(adj, nodes, x.0, |g| {
                for gv in g.iter_mut() {
                    *gv += d;
                }
            });
        }
        Op::MeanAll(x) => {
            let n = nodes[x.0].value.len();
            let d = dy[0] / n as f32;
            accumulate_at(adj, nodes, x.0, |g| {
                for gv in g.iter_mut() {
                    *gv += d;
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = &nodes[i].value;
            let shape = &nodes[i].shape;
            let len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            accumulate_at(adj, nodes, x.0, |g| {
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = 0.0f64;
                        for asg in 0..len {
                            let idx = base + asg * inner;
                            dot += f64::from(dy[idx]) * f64::from(y[idx]);
                        }
                        for asg in 0..len {
                            let idx = base + asg * inner;
                            g[idx] += ((f64::from(dy[idx]) - dot) * f64::from(y[idx])) as f32;
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            classes,
            scored,
        } => {
            let lv = &nodes[logits.0].value;
            let (classes, scored) = (*classes, *scored);
            let d = f64::from(dy[0]) / scored as f64;
            accumulate_at(adj, nodes, logits.0, |g| {
                for (p, &label) in labels.iter().enumerate() {
                    if label == IGNORE_INDEX {
                        continue;
                    }
                    let row = &lv[p * classes..(p + 1) * classes];
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let denom: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
                    for c in 0..classes {
                        let soft = f64::from(row[c] - max).exp() / denom;
                        let ind = if c == usize::from(label) { 1.0 } else { 0.0 };
                        g[p * classes + c] += (d * (soft - ind)) as f32;
                    }
                }
            });
        }
        Op::RmsNorm { x, gain, eps } => {
            let xv = &nodes[x.0].value;
            let gv = &nodes[gain.0].value;
            let cols = nodes[gain.0].value.len();
            let rows = xv.len() / cols;
            let eps = *eps;
            if nodes[gain.0].needs {
                accumulate_at(adj, nodes, gain.0, |g| {
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let inv = rms_inv(row, eps);
                        for c in 0..cols {
                            g[c] += (f64::from(dy[r * cols + c]) * f64::from(row[c]) * inv) as f32;
                        }
                    }
                });
            }
            if nodes[x.0].needs {
                accumulate_at(adj, nodes, x.0, |g| {
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let inv = rms_inv(row, eps);
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            dot += f64::from(dy[r * cols + c])
                                * f64::from(gv[c])
                                * f64::from(row[c]);
                        }
                        let k = inv * inv * inv * dot / cols as f64;
                        for c in 0..cols {
                            g[r * cols + c] += (f64::from(dy[r * cols + c])
                                * f64::from(gv[c])
                                * inv
                                - k * f64::from(row[c]))
                                as f32;
                        }
                    }
                });
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let d = ConvDims::new(&nodes[x.0].shape, &nodes[w.0].shape, *stride, *pad)
                .expect("dims checked at record time");
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            if nodes[bias.0].needs {
                accumulate_at(adj, nodes, bias.0, |g| {
                    for co in 0..d.cout {
                        let mut acc = 0.0f64;
                        for o in 0..d.ho * d.wo {
                            acc += f64::from(dy[co * d.ho * d.wo + o]);
                        }
                        g[co] += acc as f32;
                    }
                });
            }
            if nodes[w.0].needs {
                accumulate_at(adj, nodes, w.0, |g| {
                    conv2d_grad_w(xv, dy, &d, g);
                });
            }
            if nodes[x.0].needs {
                accumulate_at(adj, nodes, x.0, |g| {
                    conv2d_grad_x(wv, dy, &d, g);
                });
            }
        }
        Op::Gather { x, idx } => {
            accumulate_at(adj, nodes, x.0, |g| {
                for (k, &src) in idx.iter().enumerate() {
                    g[src as usize] += dy[k];
                }
            });
        }
        Op::Concat0(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.0].value.len();
                accumulate(adj, nodes, p.0, &dy[offset..offset + len]);
                offset += len;
            }
        }
        Op::Narrow0 {
            x,
            start,
            rows,
            cols,
        } => {
            let (start, rows, cols) = (*start, *rows, *cols);
            accumulate_at(adj, nodes, x.0, |g| {
                for r in 0..rows {
                    for c in 0..cols {
                        g[(start + r) * cols + c] += dy[r * cols + c];
                    }
                }
            });
        }
        Op::Reshape(x) => {
            accumulate(adj, nodes, x.0, dy);
        }
    }
}

fn conv2d_grad_w(x: &[f32], dy: &[f32], d: &ConvDims, g: &mut [f32]) {
    for co in 0..d.cout {
        for ci in 0..d.cin {
            for ky in 0..d.kh {
                for kx in 0..d.kw {
                    let mut acc = 0.0f64;
                    for ho in 0..d.ho {
                        let iy = (ho * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for wo in 0..d.wo {
                            let ix = (wo * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            acc += f64::from(dy[co * d.ho * d.wo + ho * d.wo + wo])
                                * f64::from(x[ci * d.h * d.w + iy as usize * d.w + ix as usize]);
                        }
                    }
                    g[((co * d.cin + ci) * d.kh + ky) * d.kw + kx] += acc as f32;
                }
            }
        }
    }
}

fn conv2d_grad_x(w: &[f32], dy: &[f32], d: &ConvDims, g: &mut [f32]) {
    for co in 0..d.cout {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let dyv = dy[co * d.ho * d.wo + ho * d.wo + wo];
                if dyv == 0.0 {
                    continue;
                }
                for ci in 0..d.cin {
                    for ky in 0..d.kh {
                        let iy = (ho * d.stride + ky) as isize - d.pad as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for kx in 0..d.kw {
                            let ix = (wo * d.stride + kx) as isize - d.pad as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            g[ci * d.h * d.w + iy as usize * d.w + ix as usize] +=
                                dyv * w[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b = tape.constant(&Tensor::zeros(vec![2, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_singleton_and_symmetry() {
        let tape = Tape::new();
        let one = tape.constant(&t(&[1], &[3.7]));
        let y = tape.softmax(one, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let pair = tape.constant(&t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(pair, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_overflow_stable() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y);
        assert!(v.is_finite());
        assert_abs_diff_eq!(v.data()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(v.data()[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[0.3, -1.2, 2.0, 5.0, 5.0, -5.0]));
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for r in 0..2 {
            let s: f32 = v.data()[r * 3..(r + 1) * 3].iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(vec![3, 4]));
        let loss = tape.cross_entropy(logits, &[0, 1, 3], 4).unwrap();
        assert_abs_diff_eq!(tape.item(loss), 4.0f32.ln(), epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let tape = Tape::new();
        let mut prev = f32::INFINITY;
        for margin in [2.0f32, 8.0, 20.0] {
            let logits = tape.constant(&t(&[1, 2], &[margin, 0.0]));
            let loss = tape.cross_entropy(logits, &[0], 2).unwrap();
            let v = tape.item(loss);
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // logits [[2,0],[0,2]], labels [0,1]: mean(-ln sigma), sigma = e^2/(e^2+1).
        let tape = Tape::new();
        let logits = tape.constant(&t(&[2, 2], &[2.0, 0.0, 0.0, 2.0]));
        let loss = tape.cross_entropy(logits, &[0, 1], 2).unwrap();
        let expected = (1.0f64 + (-2.0f64).exp()).ln() as f32; // 0.126928...
        assert_abs_diff_eq!(tape.item(loss), expected, epsilon = 1e-6);
        assert_abs_diff_eq!(tape.item(loss), 0.126928, epsilon = 1e-5);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(vec![2, 3]));
        let err = tape
            .cross_entropy(logits, &[IGNORE_INDEX, IGNORE_INDEX], 3)
            .unwrap_err();
        assert!(matches!(err, Error::EmptyLoss));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::zeros(vec![1, 3]));
        assert!(tape.cross_entropy(logits, &[3], 3).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 5.0]).param());
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_is_two_x() {
        let tape = Tape::new();
        let tx = t(&[3], &[1.0, -2.0, 5.0]).param();
        let x = tape.leaf(&tx);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 10.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).param());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let tape = Tape::new();
            let mut rng = crate::rng::stream(11, "det", 0);
            let a = tape.leaf(&Tensor::randn(vec![4, 4], &mut rng).param());
            let b = tape.leaf(&Tensor::randn(vec![4, 4], &mut rng).param());
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c, 1).unwrap();
            let loss = tape.mean_all(s);
            let grads = tape.backward(loss).unwrap();
            (
                grads.get(a).unwrap().to_vec(),
                grads.get(b).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untracked_leaf_gets_no_grad() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        let y = tape.leaf(&t(&[2], &[3.0, 4.0]).param());
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_roundtrip_and_scatter_adjoint() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 4.0]).param());
        // Duplicate index 0 -> adjoint must scatter-add.
        let idx = Arc::new(vec![0u32, 0, 3]);
        let y = tape.gather(x, idx, vec![3]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 4.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat0(&[a, b]).unwrap();
        let back = tape.narrow0(cat, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    // ── finite-difference checks of every differentiable primitive ──
    //
    // The oracle is an independent f64 re-evaluation of the same math;
    // the tape never touches it. Each check also compares the tape's
    // forward value against the reference.

    mod reference {
        //! f64 evaluators, independent of the tape.

        pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                }
            }
            out
        }

        pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / cols {
                let row = &x[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for c in 0..cols {
                    out[r * cols + c] = (row[c] - max).exp() / denom;
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
            kw: usize,
            stride: usize,
            pad: usize,
        ) -> Vec<f64> {
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

        pub fn silu(x: &[f64]) -> Vec<f64> {
            x.iter().map(|v| v / (1.0 + (-v).exp())).collect()
        }

        pub fn relu(x: &[f64]) -> Vec<f64> {
            x.iter().map(|v| v.max(0.0)).collect()
        }

        pub fn add_bias(x: &[f64], b: &[f64]) -> Vec<f64> {
            x.iter().enumerate().map(|(i, v)| v + b[i % b.len()]).collect()
        }

        pub fn mean(x: &[f64]) -> f64 {
            x.iter().sum::<f64>() / x.len() as f64
        }

        pub fn sum(x: &[f64]) -> f64 {
            x.iter().sum()
        }
    }

    fn finite_diff64(x: &[f64], mut f: impl FnMut(&[f64]) -> f64, h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let fp = f(&probe);
            probe[i] = orig - h;
            let fm = f(&probe);
            probe[i] = orig;
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    fn max_rel_err(got: &[f32], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(g, w)| (f64::from(*g) - w).abs() / w.abs().max(1e-3))
            .fold(0.0, f64::max)
    }

    /// Build the loss on a tape and on the f64 reference; check the forward
    /// values agree and the tape gradient matches central differences of the
    /// reference to rel err < 1e-4 (h = 1e-3, 64-bit path end to end).
    fn check_op<B, R>(shapes: &[&[usize]], seed: u64, build: B, reference: R)
    where
        B: Fn(&Tape, &[Var]) -> Var,
        R: Fn(&[Vec<f64>]) -> f64,
    {
        let mut rng = crate::rng::stream(seed, "fdcheck", 0);
        let tensors: Vec<Tensor> = shapes
            .iter()
            .map(|shape| Tensor::randn(shape.to_vec(), &mut rng).param())
            .collect();
        let as64: Vec<Vec<f64>> = tensors
            .iter()
            .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
            .collect();

        let tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&tape, &vars);
        let ref_loss = reference(&as64);
        let fwd_err = (f64::from(tape.item(loss)) - ref_loss).abs() / ref_loss.abs().max(1e-3);
        assert!(fwd_err < 1e-5, "forward mismatch vs reference: {fwd_err}");

        let grads = tape.backward(loss).unwrap();
        for wrt in 0..shapes.len() {
            let got = grads.get(vars[wrt]).unwrap();
            let fd = finite_diff64(
                &as64[wrt],
                |probe| {
                    let mut inputs = as64.clone();
                    inputs[wrt] = probe.to_vec();
                    reference(&inputs)
                },
                1e-3,
            );
            let err = max_rel_err(got, &fd);
            assert!(err < 1e-4, "wrt input {wrt}: rel err {err}");
        }
    }

    #[test]
    fn fd_matmul() {
        check_op(
            &[&[3, 4], &[4, 2]],
            1,
            |tape, v| {
                let y = tape.matmul(v[0], v[1]).unwrap();
                tape.sum_all(y)
            },
            |x| reference::sum(&reference::matmul(&x[0], &x[1], 3, 4, 2)),
        );
    }

    #[test]
    fn fd_softmax() {
        check_op(
            &[&[3, 5], &[3, 5]],
            2,
            |tape, v| {
                let s = tape.softmax(v[0], 1).unwrap();
                let p = tape.mul(s, v[1]).unwrap();
                tape.sum_all(p)
            },
            |x| {
                let s = reference::softmax_rows(&x[0], 5);
                s.iter().zip(&x[1]).map(|(a, b)| a * b).sum()
            },
        );
    }

    #[test]
    fn fd_cross_entropy() {
        let labels = [0u8, 2, IGNORE_INDEX, 1];
        check_op(
            &[&[4, 3]],
            3,
            |tape, v| tape.cross_entropy(v[0], &labels, 3).unwrap(),
            |x| reference::cross_entropy(&x[0], &labels, 3, IGNORE_INDEX),
        );
    }

    #[test]
    fn fd_rms_norm() {
        check_op(
            &[&[3, 6], &[6]],
            4,
            |tape, v| {
                let y = tape.rms_norm(v[0], v[1], 1e-5).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            |x| {
                let y = reference::rms_norm(&x[0], &x[1], 1e-5_f32 as f64);
                reference::mean(&y.iter().map(|v| v * v).collect::<Vec<_>>())
            },
        );
    }

    #[test]
    fn fd_conv2d() {
        check_op(
            &[&[2, 5, 5], &[3, 2, 3, 3], &[3]],
            5,
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            |x| {
                let y = reference::conv2d(&x[0], &x[1], &x[2], 2, 5, 5, 3, 3, 3, 2, 1);
                reference::mean(&y.iter().map(|v| v * v).collect::<Vec<_>>())
            },
        );
    }

    #[test]
    fn fd_activations_bias_scale() {
        check_op(
            &[&[2, 4], &[4]],
            6,
            |tape, v| {
                let b = tape.add_bias(v[0], v[1]).unwrap();
                let r = tape.silu(b);
                let r2 = tape.relu(r);
                let s = tape.scale(r2, 0.7);
                tape.mean_all(s)
            },
            |x| {
                let b = reference::add_bias(&x[0], &x[1]);
                let r = reference::relu(&reference::silu(&b));
                reference::mean(&r.iter().map(|v| v * 0.7_f32 as f64).collect::<Vec<_>>())
            },
        );
    }

    #[test]
    fn fd_composed_mlp() {
        // Two-layer MLP; exercises fan-out through shared activations.
        check_op(
            &[&[2, 3], &[3, 4], &[4], &[4, 2]],
            7,
            |tape, v| {
                let h = tape.matmul(v[0], v[1]).unwrap();
                let h = tape.add_bias(h, v[2]).unwrap();
                let h = tape.silu(h);
                let y = tape.matmul(h, v[3]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            |x| {
                let h = reference::matmul(&x[0], &x[1], 2, 3, 4);
                let h = reference::silu(&reference::add_bias(&h, &x[2]));
                let y = reference::matmul(&h, &x[3], 2, 4, 2);
                reference::mean(&y.iter().map(|v| v * v).collect::<Vec<_>>())
            },
        );
    }
}
