//! Dense f32 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape records exactly the operators the encoder and heads need; graphs
//! are rebuilt per training step and discarded after `backward`. Gradient
//! accumulation is additive, and nodes whose inputs carry no gradient
//! requirement are skipped during the backward sweep, so frozen subgraphs
//! (e.g. the convolutional projection under a frozen backbone) cost nothing
//! beyond their forward pass.

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Gaussian init with the given std, driven by an explicit RNG.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0f32, std).expect("std must be finite");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected 2-d tensor, got {:?}", other))),
        }
    }
}

/// Handle to a node on a [`Graph`].
pub type VarId = usize;

enum Op {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
    },
    Transpose {
        x: VarId,
    },
    Conv1d {
        x: VarId,
        w: VarId,
        stride: usize,
    },
    GroupNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        groups: usize,
    },
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
    },
    Gelu {
        x: VarId,
    },
    Sigmoid {
        x: VarId,
    },
    SoftmaxRows {
        x: VarId,
    },
    Dropout {
        x: VarId,
        keep: Vec<bool>,
        inv_keep_prob: f32,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    Scale {
        x: VarId,
        c: f32,
    },
    AddBiasRows {
        x: VarId,
        b: VarId,
    },
    AddBiasCols {
        x: VarId,
        b: VarId,
    },
    ConcatRows {
        parts: Vec<VarId>,
    },
    SliceRows {
        x: VarId,
        start: usize,
        end: usize,
    },
    SliceCols {
        x: VarId,
        start: usize,
        end: usize,
    },
    ConcatCols {
        parts: Vec<VarId>,
    },
    MeanRows {
        x: VarId,
    },
    SumAll {
        x: VarId,
    },
    MeanAll {
        x: VarId,
    },
    MeanOf {
        parts: Vec<VarId>,
    },
    RowNormalize {
        x: VarId,
    },
    Bce {
        probs: VarId,
        labels: Vec<f32>,
    },
    NtXent {
        z: VarId,
        tau: f32,
        m: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

/// Define-by-run computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const NORM_EPS: f32 = 1e-5;
const BCE_EPS: f32 = 1e-7;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: VarId) -> Option<&[f32]> {
        self.nodes[id].grad.as_deref()
    }

    /// Insert a leaf; gradient participation follows `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf)
    }

    /// Insert a non-differentiable constant leaf.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(t, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.nodes[a].value.dims2()?;
        let (kb, n) = self.nodes[b].value.dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dims disagree: {:?} x {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let mut out = vec![0.0f32; m * n];
        sgemm_nn(
            m,
            ka,
            n,
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            needs,
            Op::MatMul { a, b },
        ))
    }

    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let xd = self.nodes[x].value.data();
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![c, r], out).unwrap(),
            needs,
            Op::Transpose { x },
        ))
    }

    /// Valid (unpadded) 1-d cross-correlation: x is `[C_in, T]`, w is
    /// `[C_out, C_in, k]`, output `[C_out, L]` with `L = (T - k)/stride + 1`.
    pub fn conv1d(&mut self, x: VarId, w: VarId, stride: usize) -> Result<VarId> {
        let (c_in, t) = self.nodes[x].value.dims2()?;
        let wshape = self.nodes[w].value.shape().to_vec();
        let [c_out, wc_in, k] = wshape.as_slice() else {
            return Err(Error::Shape(format!(
                "conv1d weight must be 3-d, got {:?}",
                wshape
            )));
        };
        let (c_out, wc_in, k) = (*c_out, *wc_in, *k);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input has {} channels, kernel expects {}",
                c_in, wc_in
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be >= 1".into()));
        }
        if t < k {
            return Err(Error::InputTooShort(format!(
                "conv1d needs input length >= kernel size ({} < {})",
                t, k
            )));
        }
        let l = (t - k) / stride + 1;
        let xd = self.nodes[x].value.data();
        let wd = self.nodes[w].value.data();
        let mut out = vec![0.0f32; c_out * l];
        for o in 0..c_out {
            for j in 0..l {
                let mut acc = 0.0f32;
                let base = j * stride;
                for i in 0..c_in {
                    let xrow = &xd[i * t + base..i * t + base + k];
                    let wrow = &wd[o * c_in * k + i * k..o * c_in * k + i * k + k];
                    for tt in 0..k {
                        acc += xrow[tt] * wrow[tt];
                    }
                }
                out[o * l + j] = acc;
            }
        }
        let needs = self.needs(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![c_out, l], out).unwrap(),
            needs,
            Op::Conv1d { x, w, stride },
        ))
    }

    /// Per-group zero-mean/unit-variance over (channels-in-group × time),
    /// then per-channel affine. x is `[C, L]`, gain and bias are `[C]`.
    pub fn group_norm(&mut self, x: VarId, groups: usize, gain: VarId, bias: VarId) -> Result<VarId> {
        let (c, l) = self.nodes[x].value.dims2()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {} channels not divisible by {} groups",
                c, groups
            )));
        }
        if self.nodes[gain].value.numel() != c || self.nodes[bias].value.numel() != c {
            return Err(Error::Shape("group_norm affine params must be [C]".into()));
        }
        let xd = self.nodes[x].value.data();
        let gd = self.nodes[gain].value.data();
        let bd = self.nodes[bias].value.data();
        let cg = c / groups;
        let n = cg * l;
        let mut out = vec![0.0f32; c * l];
        for g in 0..groups {
            let c0 = g * cg;
            let mut mean = 0.0f64;
            for ch in c0..c0 + cg {
                for t in 0..l {
                    mean += xd[ch * l + t] as f64;
                }
            }
            mean /= n as f64;
            let mut var = 0.0f64;
            for ch in c0..c0 + cg {
                for t in 0..l {
                    let d = xd[ch * l + t] as f64 - mean;
                    var += d * d;
                }
            }
            var /= n as f64;
            let inv_std = 1.0 / (var + NORM_EPS as f64).sqrt();
            for ch in c0..c0 + cg {
                for t in 0..l {
                    let xh = ((xd[ch * l + t] as f64 - mean) * inv_std) as f32;
                    out[ch * l + t] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![c, l], out).unwrap(),
            needs,
            Op::GroupNorm { x, gain, bias, groups },
        ))
    }

    /// Row-wise layer norm over the last axis with per-column affine.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId) -> Result<VarId> {
        let (r, d) = self.nodes[x].value.dims2()?;
        if self.nodes[gain].value.numel() != d || self.nodes[bias].value.numel() != d {
            return Err(Error::Shape("layer_norm affine params must be [D]".into()));
        }
        let xd = self.nodes[x].value.data();
        let gd = self.nodes[gain].value.data();
        let bd = self.nodes[bias].value.data();
        let mut out = vec![0.0f32; r * d];
        for row in 0..r {
            let xs = &xd[row * d..(row + 1) * d];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = xs
                .iter()
                .map(|&v| {
                    let e = v as f64 - mean;
                    e * e
                })
                .sum::<f64>()
                / d as f64;
            let inv_std = 1.0 / (var + NORM_EPS as f64).sqrt();
            for j in 0..d {
                let xh = ((xs[j] as f64 - mean) * inv_std) as f32;
                out[row * d + j] = gd[j] * xh + bd[j];
            }
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![r, d], out).unwrap(),
            needs,
            Op::LayerNorm { x, gain, bias },
        ))
    }

    /// Exact (Gaussian-CDF) GELU.
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out: Vec<f32> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| gelu_exact(v))
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), needs, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let out: Vec<f32> = self.nodes[x]
            .value
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), needs, Op::Sigmoid { x })
    }

    /// Softmax over the last axis of a 2-d tensor.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let xd = self.nodes[x].value.data();
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            softmax_row(&xd[row * c..(row + 1) * c], &mut out[row * c..(row + 1) * c]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            needs,
            Op::SoftmaxRows { x },
        ))
    }

    /// Inverted-scaling dropout. Identity (same node) when not training or p == 0.
    pub fn dropout(&mut self, x: VarId, p: f32, train: bool, rng: &mut impl Rng) -> Result<VarId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {}",
                p
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let n = self.nodes[x].value.numel();
        let keep: Vec<bool> = (0..n).map(|_| rng.random::<f32>() >= p).collect();
        let inv = 1.0 / (1.0 - p);
        let out: Vec<f32> = self.nodes[x]
            .value
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * inv } else { 0.0 })
            .collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(shape, out).unwrap(),
            needs,
            Op::Dropout {
                x,
                keep,
                inv_keep_prob: inv,
            },
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let out: Vec<f32> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out).unwrap(), needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let out: Vec<f32> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out).unwrap(), needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, c: f32) -> VarId {
        let out: Vec<f32> = self.nodes[x].value.data().iter().map(|&v| v * c).collect();
        let shape = self.nodes[x].value.shape().to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out).unwrap(), needs, Op::Scale { x, c })
    }

    /// `[R, C] + [C]`, bias added to every row.
    pub fn add_bias_rows(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if self.nodes[b].value.numel() != c {
            return Err(Error::Shape(format!(
                "row bias must have {} entries, got {}",
                c,
                self.nodes[b].value.numel()
            )));
        }
        let xd = self.nodes[x].value.data();
        let bd = self.nodes[b].value.data();
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            for j in 0..c {
                out[row * c + j] = xd[row * c + j] + bd[j];
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            needs,
            Op::AddBiasRows { x, b },
        ))
    }

    /// `[R, C] + [R]`, one bias value per row (per conv channel).
    pub fn add_bias_cols(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if self.nodes[b].value.numel() != r {
            return Err(Error::Shape(format!(
                "column bias must have {} entries, got {}",
                r,
                self.nodes[b].value.numel()
            )));
        }
        let xd = self.nodes[x].value.data();
        let bd = self.nodes[b].value.data();
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            for j in 0..c {
                out[row * c + j] = xd[row * c + j] + bd[row];
            }
        }
        let needs = self.needs(&[x, b]);
        Ok(self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            needs,
            Op::AddBiasCols { x, b },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let (_, c0) = self.nodes[parts[0]].value.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.nodes[p].value.dims2()?;
            if c != c0 {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    c, c0
                )));
            }
            rows += r;
            data.extend_from_slice(self.nodes[p].value.data());
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, c0], data).unwrap(),
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if start > end || end > r {
            return Err(Error::Shape(format!(
                "slice_rows {}..{} out of bounds for {} rows",
                start, end, r
            )));
        }
        let data = self.nodes[x].value.data()[start * c..end * c].to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![end - start, c], data).unwrap(),
            needs,
            Op::SliceRows { x, start, end },
        ))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if start > end || end > c {
            return Err(Error::Shape(format!(
                "slice_cols {}..{} out of bounds for {} cols",
                start, end, c
            )));
        }
        let xd = self.nodes[x].value.data();
        let w = end - start;
        let mut data = vec![0.0f32; r * w];
        for row in 0..r {
            data[row * w..(row + 1) * w].copy_from_slice(&xd[row * c + start..row * c + end]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, w], data).unwrap(),
            needs,
            Op::SliceCols { x, start, end },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let (r0, _) = self.nodes[parts[0]].value.dims2()?;
        let mut total_c = 0;
        for &p in parts {
            let (r, c) = self.nodes[p].value.dims2()?;
            if r != r0 {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {}",
                    r, r0
                )));
            }
            total_c += c;
        }
        let mut data = vec![0.0f32; r0 * total_c];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = self.nodes[p].value.dims2()?;
            let pd = self.nodes[p].value.data();
            for row in 0..r0 {
                data[row * total_c + col_off..row * total_c + col_off + c]
                    .copy_from_slice(&pd[row * c..(row + 1) * c]);
            }
            col_off += c;
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![r0, total_c], data).unwrap(),
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Mean over axis 0: `[R, C] -> [1, C]`.
    pub fn mean_rows(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        if r == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let xd = self.nodes[x].value.data();
        let mut out = vec![0.0f32; c];
        for row in 0..r {
            for j in 0..c {
                out[j] += xd[row * c + j];
            }
        }
        let inv = 1.0 / r as f32;
        for v in &mut out {
            *v *= inv;
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![1, c], out).unwrap(),
            needs,
            Op::MeanRows { x },
        ))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f32 = self.nodes[x].value.data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x].value.numel().max(1);
        let s: f32 = self.nodes[x].value.data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s / n as f32), needs, Op::MeanAll { x })
    }

    /// Mean of several scalar nodes.
    pub fn mean_of(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Contract("mean_of zero terms".into()));
        }
        let mut s = 0.0f32;
        for &p in parts {
            if self.nodes[p].value.numel() != 1 {
                return Err(Error::Contract("mean_of expects scalar terms".into()));
            }
            s += self.nodes[p].value.data()[0];
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Tensor::scalar(s / parts.len() as f32),
            needs,
            Op::MeanOf {
                parts: parts.to_vec(),
            },
        ))
    }

    /// L2-normalize each row.
    pub fn row_normalize(&mut self, x: VarId) -> Result<VarId> {
        let (r, c) = self.nodes[x].value.dims2()?;
        let xd = self.nodes[x].value.data();
        let mut out = vec![0.0f32; r * c];
        for row in 0..r {
            let xs = &xd[row * c..(row + 1) * c];
            let norm = xs.iter().map(|&v| v * v).sum::<f32>().sqrt().max(1e-12);
            for j in 0..c {
                out[row * c + j] = xs[j] / norm;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out).unwrap(),
            needs,
            Op::RowNormalize { x },
        ))
    }

    /// Mean binary cross-entropy of predicted probabilities against fixed
    /// 0/1 labels; probabilities are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce_loss(&mut self, probs: VarId, labels: &[f32]) -> Result<VarId> {
        let n = self.nodes[probs].value.numel();
        if n != labels.len() || n == 0 {
            return Err(Error::Contract(format!(
                "bce_loss: {} probabilities vs {} labels",
                n,
                labels.len()
            )));
        }
        let pd = self.nodes[probs].value.data();
        let mut loss = 0.0f32;
        for (&p_hat, &y) in pd.iter().zip(labels) {
            let p = p_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        loss /= n as f32;
        let needs = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// NT-Xent contrastive loss over `z`: a `[2M, d]` matrix whose rows
    /// `i` and `i + M` form a positive pair. Similarity is the raw dot
    /// product of rows; the mean is taken over all 2M anchors.
    pub fn ntxent(&mut self, z: VarId, tau: f32, m: usize) -> Result<VarId> {
        let (rows, _d) = self.nodes[z].value.dims2()?;
        if m == 0 {
            return Err(Error::Contract("ntxent: batch must be non-empty".into()));
        }
        if rows != 2 * m {
            return Err(Error::Shape(format!(
                "ntxent expects 2M = {} rows, got {}",
                2 * m,
                rows
            )));
        }
        if tau <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", tau)));
        }
        let loss = ntxent_forward(&self.nodes[z].value, tau, m);
        let needs = self.needs(&[z]);
        Ok(self.push(Tensor::scalar(loss), needs, Op::NtXent { z, tau, m }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// into every node with `needs_grad`; frozen leaves stay untouched.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if !self.nodes[loss].needs_grad {
            // Loss unreachable from any trainable leaf; nothing to do.
            return Ok(());
        }
        accumulate(&mut self.nodes[loss].grad, &[1.0]);
        for i in (0..=loss).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            let contribs = self.op_backward(i, &g);
            for (pid, pg) in contribs {
                accumulate(&mut self.nodes[pid].grad, &pg);
            }
        }
        Ok(())
    }

    /// Per-op vector-Jacobian products. Parents that do not need gradient
    /// are skipped entirely.
    fn op_backward(&self, id: VarId, g: &[f32]) -> Vec<(VarId, Vec<f32>)> {
        let mut out: Vec<(VarId, Vec<f32>)> = Vec::new();
        let nodes = &self.nodes;
        let wants = |v: VarId| nodes[v].needs_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = nodes[*a].value.dims2().unwrap();
                let (_, n) = nodes[*b].value.dims2().unwrap();
                if wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    sgemm_nt(m, n, k, g, nodes[*b].value.data(), &mut da);
                    out.push((*a, da));
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0f32; k * n];
                    sgemm_tn(k, m, n, nodes[*a].value.data(), g, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose { x } => {
                if wants(*x) {
                    let (r, c) = nodes[*x].value.dims2().unwrap();
                    let mut dx = vec![0.0f32; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] = g[j * r + i];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Conv1d { x, w, stride } => {
                let (c_in, t) = nodes[*x].value.dims2().unwrap();
                let ws = nodes[*w].value.shape();
                let (c_out, k) = (ws[0], ws[2]);
                let l = (t - k) / stride + 1;
                let xd = nodes[*x].value.data();
                let wd = nodes[*w].value.data();
                if wants(*x) {
                    let mut dx = vec![0.0f32; c_in * t];
                    for o in 0..c_out {
                        for j in 0..l {
                            let go = g[o * l + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = j * stride;
                            for i in 0..c_in {
                                for tt in 0..k {
                                    dx[i * t + base + tt] += go * wd[o * c_in * k + i * k + tt];
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(*w) {
                    let mut dw = vec![0.0f32; c_out * c_in * k];
                    for o in 0..c_out {
                        for j in 0..l {
                            let go = g[o * l + j];
                            if go == 0.0 {
                                continue;
                            }
                            let base = j * stride;
                            for i in 0..c_in {
                                for tt in 0..k {
                                    dw[o * c_in * k + i * k + tt] += go * xd[i * t + base + tt];
                                }
                            }
                        }
                    }
                    out.push((*w, dw));
                }
            }
            Op::GroupNorm { x, gain, bias, groups } => {
                let (c, l) = nodes[*x].value.dims2().unwrap();
                let cg = c / groups;
                let n = (cg * l) as f64;
                let xd = nodes[*x].value.data();
                let gd = nodes[*gain].value.data();
                let mut dx = wants(*x).then(|| vec![0.0f32; c * l]);
                let mut dgain = wants(*gain).then(|| vec![0.0f32; c]);
                let mut dbias = wants(*bias).then(|| vec![0.0f32; c]);
                for grp in 0..*groups {
                    let c0 = grp * cg;
                    let mut mean = 0.0f64;
                    for ch in c0..c0 + cg {
                        for t in 0..l {
                            mean += xd[ch * l + t] as f64;
                        }
                    }
                    mean /= n;
                    let mut var = 0.0f64;
                    for ch in c0..c0 + cg {
                        for t in 0..l {
                            let d = xd[ch * l + t] as f64 - mean;
                            var += d * d;
                        }
                    }
                    var /= n;
                    let inv_std = 1.0 / (var + NORM_EPS as f64).sqrt();
                    // dyh = upstream grad scaled by gain; two reductions drive dx.
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for ch in c0..c0 + cg {
                        for t in 0..l {
                            let idx = ch * l + t;
                            let xh = (xd[idx] as f64 - mean) * inv_std;
                            let dyh = g[idx] as f64 * gd[ch] as f64;
                            s1 += dyh;
                            s2 += dyh * xh;
                            if let Some(dg) = dgain.as_mut() {
                                dg[ch] += (g[idx] as f64 * xh) as f32;
                            }
                            if let Some(db) = dbias.as_mut() {
                                db[ch] += g[idx];
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for ch in c0..c0 + cg {
                            for t in 0..l {
                                let idx = ch * l + t;
                                let xh = (xd[idx] as f64 - mean) * inv_std;
                                let dyh = g[idx] as f64 * gd[ch] as f64;
                                dx[idx] = ((dyh - (s1 + xh * s2) / n) * inv_std) as f32;
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dg) = dgain {
                    out.push((*gain, dg));
                }
                if let Some(db) = dbias {
                    out.push((*bias, db));
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, d) = nodes[*x].value.dims2().unwrap();
                let xd = nodes[*x].value.data();
                let gd = nodes[*gain].value.data();
                let n = d as f64;
                let mut dx = wants(*x).then(|| vec![0.0f32; r * d]);
                let mut dgain = wants(*gain).then(|| vec![0.0f32; d]);
                let mut dbias = wants(*bias).then(|| vec![0.0f32; d]);
                for row in 0..r {
                    let xs = &xd[row * d..(row + 1) * d];
                    let gs = &g[row * d..(row + 1) * d];
                    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
                    let var = xs
                        .iter()
                        .map(|&v| {
                            let e = v as f64 - mean;
                            e * e
                        })
                        .sum::<f64>()
                        / n;
                    let inv_std = 1.0 / (var + NORM_EPS as f64).sqrt();
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..d {
                        let xh = (xs[j] as f64 - mean) * inv_std;
                        let dyh = gs[j] as f64 * gd[j] as f64;
                        s1 += dyh;
                        s2 += dyh * xh;
                        if let Some(dg) = dgain.as_mut() {
                            dg[j] += (gs[j] as f64 * xh) as f32;
                        }
                        if let Some(db) = dbias.as_mut() {
                            db[j] += gs[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..d {
                            let xh = (xs[j] as f64 - mean) * inv_std;
                            let dyh = gs[j] as f64 * gd[j] as f64;
                            dx[row * d + j] = ((dyh - (s1 + xh * s2) / n) * inv_std) as f32;
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dg) = dgain {
                    out.push((*gain, dg));
                }
                if let Some(db) = dbias {
                    out.push((*bias, db));
                }
            }
            Op::Gelu { x } => {
                if wants(*x) {
                    let dx: Vec<f32> = nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &go)| go * gelu_grad(v))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if wants(*x) {
                    let yd = nodes[id].value.data();
                    let dx: Vec<f32> = yd.iter().zip(g).map(|(&y, &go)| go * y * (1.0 - y)).collect();
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxRows { x } => {
                if wants(*x) {
                    let (r, c) = nodes[id].value.dims2().unwrap();
                    let yd = nodes[id].value.data();
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        let ys = &yd[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let dot: f32 = ys.iter().zip(gs).map(|(&y, &go)| y * go).sum();
                        for j in 0..c {
                            dx[row * c + j] = ys[j] * (gs[j] - dot);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Dropout { x, keep, inv_keep_prob } => {
                if wants(*x) {
                    let dx: Vec<f32> = g
                        .iter()
                        .zip(keep)
                        .map(|(&go, &k)| if k { go * inv_keep_prob } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(nodes[*b].value.data())
                        .map(|(&go, &bv)| go * bv)
                        .collect();
                    out.push((*a, da));
                }
                if wants(*b) {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(nodes[*a].value.data())
                        .map(|(&go, &av)| go * av)
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::Scale { x, c } => {
                if wants(*x) {
                    out.push((*x, g.iter().map(|&go| go * c).collect()));
                }
            }
            Op::AddBiasRows { x, b } => {
                let (r, c) = nodes[*x].value.dims2().unwrap();
                if wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if wants(*b) {
                    let mut db = vec![0.0f32; c];
                    for row in 0..r {
                        for j in 0..c {
                            db[j] += g[row * c + j];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::AddBiasCols { x, b } => {
                let (r, c) = nodes[*x].value.dims2().unwrap();
                if wants(*x) {
                    out.push((*x, g.to_vec()));
                }
                if wants(*b) {
                    let mut db = vec![0.0f32; r];
                    for row in 0..r {
                        for j in 0..c {
                            db[row] += g[row * c + j];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::ConcatRows { parts } => {
                let (_, c) = nodes[id].value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let (r, _) = nodes[p].value.dims2().unwrap();
                    if wants(p) {
                        out.push((p, g[off * c..(off + r) * c].to_vec()));
                    }
                    off += r;
                }
            }
            Op::SliceRows { x, start, end } => {
                if wants(*x) {
                    let (r, c) = nodes[*x].value.dims2().unwrap();
                    let mut dx = vec![0.0f32; r * c];
                    dx[start * c..end * c].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
            Op::SliceCols { x, start, end } => {
                if wants(*x) {
                    let (r, c) = nodes[*x].value.dims2().unwrap();
                    let w = end - start;
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + end]
                            .copy_from_slice(&g[row * w..(row + 1) * w]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total_c) = nodes[id].value.dims2().unwrap();
                let mut col_off = 0;
                for &p in parts {
                    let (_, c) = nodes[p].value.dims2().unwrap();
                    if wants(p) {
                        let mut dp = vec![0.0f32; r * c];
                        for row in 0..r {
                            dp[row * c..(row + 1) * c].copy_from_slice(
                                &g[row * total_c + col_off..row * total_c + col_off + c],
                            );
                        }
                        out.push((p, dp));
                    }
                    col_off += c;
                }
            }
            Op::MeanRows { x } => {
                if wants(*x) {
                    let (r, c) = nodes[*x].value.dims2().unwrap();
                    let inv = 1.0 / r as f32;
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        for j in 0..c {
                            dx[row * c + j] = g[j] * inv;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::SumAll { x } => {
                if wants(*x) {
                    out.push((*x, vec![g[0]; nodes[*x].value.numel()]));
                }
            }
            Op::MeanAll { x } => {
                if wants(*x) {
                    let n = nodes[*x].value.numel();
                    out.push((*x, vec![g[0] / n as f32; n]));
                }
            }
            Op::MeanOf { parts } => {
                let inv = g[0] / parts.len() as f32;
                for &p in parts {
                    if wants(p) {
                        out.push((p, vec![inv]));
                    }
                }
            }
            Op::RowNormalize { x } => {
                if wants(*x) {
                    let (r, c) = nodes[*x].value.dims2().unwrap();
                    let xd = nodes[*x].value.data();
                    let yd = nodes[id].value.data();
                    let mut dx = vec![0.0f32; r * c];
                    for row in 0..r {
                        let xs = &xd[row * c..(row + 1) * c];
                        let ys = &yd[row * c..(row + 1) * c];
                        let gs = &g[row * c..(row + 1) * c];
                        let norm = xs.iter().map(|&v| v * v).sum::<f32>().sqrt().max(1e-12);
                        let dot: f32 = ys.iter().zip(gs).map(|(&y, &go)| y * go).sum();
                        for j in 0..c {
                            dx[row * c + j] = (gs[j] - ys[j] * dot) / norm;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Bce { probs, labels } => {
                if wants(*probs) {
                    let pd = nodes[*probs].value.data();
                    let n = pd.len() as f32;
                    let dx: Vec<f32> = pd
                        .iter()
                        .zip(labels)
                        .map(|(&p_hat, &y)| {
                            // Clamped region has zero local derivative.
                            if p_hat <= BCE_EPS || p_hat >= 1.0 - BCE_EPS {
                                0.0
                            } else {
                                g[0] * (p_hat - y) / (p_hat * (1.0 - p_hat) * n)
                            }
                        })
                        .collect();
                    out.push((*probs, dx));
                }
            }
            Op::NtXent { z, tau, m } => {
                if wants(*z) {
                    let dz = ntxent_backward(&nodes[*z].value, *tau, *m, g[0]);
                    out.push((*z, dz));
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, src: &[f32]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *slot = Some(src.to_vec()),
    }
}

// ── kernels ──────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]  (C zero-initialized by callers)
fn sgemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,k] = G[m,n] · B[k,n]ᵀ
fn sgemm_nt(m: usize, n: usize, k: usize, g: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// C[k,n] = A[m,k]ᵀ · G[m,n]
fn sgemm_tn(k: usize, m: usize, n: usize, a: &[f32], g: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(xs: &[f32], out: &mut [f32]) {
    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &x) in out.iter_mut().zip(xs) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// erf via Abramowitz & Stegun 7.1.26 (|err| < 1.5e-7, below f32 eps).
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_exact(x: f32) -> f32 {
    let xf = x as f64;
    (xf * std_normal_cdf(xf)) as f32
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let xf = x as f64;
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (std_normal_cdf(xf) + xf * pdf) as f32
}

fn ntxent_forward(z: &Tensor, tau: f32, m: usize) -> f32 {
    let (rows, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    let mut sim = vec![0.0f32; rows * rows];
    sgemm_nt(rows, d, rows, zd, zd, &mut sim);
    let inv_tau = 1.0 / tau;
    let mut total = 0.0f64;
    for p in 0..rows {
        let pair = (p + m) % rows;
        let srow = &sim[p * rows..(p + 1) * rows];
        let mut max = f32::NEG_INFINITY;
        for (k, &s) in srow.iter().enumerate() {
            if k != p {
                max = max.max(s * inv_tau);
            }
        }
        let mut denom = 0.0f64;
        for (k, &s) in srow.iter().enumerate() {
            if k != p {
                denom += ((s * inv_tau - max) as f64).exp();
            }
        }
        let pos = srow[pair] * inv_tau - max;
        total += denom.ln() - pos as f64;
    }
    (total / rows as f64) as f32
}

fn ntxent_backward(z: &Tensor, tau: f32, m: usize, upstream: f32) -> Vec<f32> {
    let (rows, d) = (z.shape()[0], z.shape()[1]);
    let zd = z.data();
    let mut sim = vec![0.0f32; rows * rows];
    sgemm_nt(rows, d, rows, zd, zd, &mut sim);
    let inv_tau = 1.0 / tau;
    // dL/dS with the diagonal excluded from every anchor's denominator.
    let mut ds = vec![0.0f32; rows * rows];
    for p in 0..rows {
        let pair = (p + m) % rows;
        let srow = &sim[p * rows..(p + 1) * rows];
        let mut max = f32::NEG_INFINITY;
        for (k, &s) in srow.iter().enumerate() {
            if k != p {
                max = max.max(s * inv_tau);
            }
        }
        let mut denom = 0.0f64;
        for (k, &s) in srow.iter().enumerate() {
            if k != p {
                denom += ((s * inv_tau - max) as f64).exp();
            }
        }
        let scale = upstream * inv_tau / rows as f32;
        for k in 0..rows {
            if k == p {
                continue;
            }
            let soft = (((srow[k] * inv_tau - max) as f64).exp() / denom) as f32;
            let target = if k == pair { 1.0 } else { 0.0 };
            ds[p * rows + k] = scale * (soft - target);
        }
    }
    // S = Z Zᵀ / 1 (tau already folded into dS): dZ = (dS + dSᵀ) · Z
    let mut sym = vec![0.0f32; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            sym[i * rows + j] = ds[i * rows + j] + ds[j * rows + i];
        }
    }
    let mut dz = vec![0.0f32; rows * d];
    sgemm_nn(rows, rows, d, &sym, zd, &mut dz);
    dz
}
