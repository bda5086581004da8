//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a record to the [`Tape`] holding its output
//! value, its operand handles and whatever forward quantities the backward
//! rule needs. Because a record can only reference handles that already
//! exist, the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use muscle::autograd::Tape;
//! use muscle::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap().with_requires_grad(true));
//! let x = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
//! let y = tape.matmul(w, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0]);
//! ```

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        pad: usize,
    },
    AddChannelBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    GlobalAvgPool(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    UpsampleNearest(Var),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Guard against division by a vanishing row norm.
const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward root w.r.t. a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let out = matmul_raw(self.data(a), self.data(b), sa[0], sa[1], sb[1]);
        let t = Tensor::new(vec![sa[0], sb[1]], out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Direct cross-correlation of a `C_in×H×W` input with
    /// `C_out×C_in×kh×kw` kernels, zero padded.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        ensure!(stride >= 1, Contract, "conv2d: stride must be positive");
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d: input {si:?} incompatible with kernels {sk:?}"
            )));
        }
        let geom = ConvGeom::new(&si, &sk, stride, pad)?;
        let out = conv_forward(self.data(input), self.data(kernels), &geom);
        let t = Tensor::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        let ng = self.needs(&[input, kernels]);
        Ok(self.push(
            t,
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Adds a per-channel bias `[C]` to a `C×H×W` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sb != [sx[0]] {
            return Err(Error::Dimension(format!(
                "add_channel_bias: map {sx:?} with bias {sb:?}"
            )));
        }
        let plane = sx[1] * sx[2];
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i / plane])
            .collect();
        let t = Tensor::new(sx, out)?;
        let ng = self.needs(&[x, bias]);
        Ok(self.push(t, Op::AddChannelBias(x, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), "add")?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Scale(a, factor), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Relu(a), ng))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    /// Arithmetic mean of equally shaped values (typically per-sample losses).
    pub fn mean_of(&mut self, vars: &[Var]) -> Result<Var> {
        ensure!(!vars.is_empty(), Contract, "mean_of: no values");
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v)?;
        }
        self.scale(acc, 1.0 / vars.len() as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(s.len() == 2, Dimension, "transpose needs a matrix, got {s:?}");
        let t = Tensor::new(vec![s[1], s[0]], transpose_raw(self.data(a), s[0], s[1]))?;
        let ng = self.needs(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    /// `C×H×W` → `1×C` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3, Dimension, "global_avg_pool needs C×H×W, got {s:?}");
        let plane = s[1] * s[2];
        let out: Vec<f64> = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![1, s[0]], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::GlobalAvgPool(x), ng))
    }

    /// Scales every row of a matrix to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 2, Dimension, "l2_normalize_rows needs a matrix, got {s:?}");
        let mut out = self.data(x).to_vec();
        let mut norms = Vec::with_capacity(s[0]);
        for row in out.chunks_mut(s[1]) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(s, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        ensure!(
            s.len() == 2,
            Dimension,
            "softmax_cross_entropy needs B×C logits, got {s:?}"
        );
        let (b, c) = (s[0], s[1]);
        ensure!(
            labels.len() == b,
            Dimension,
            "softmax_cross_entropy: {} labels for {b} rows",
            labels.len()
        );
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index { index: bad, len: c });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (row, &label) in self.data(logits).chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            probs.extend(row.iter().map(|v| (v - log_z).exp()));
        }
        let ng = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Nearest-neighbour upsampling of a `C×h×w` map to `C×out_h×out_w`.
    pub fn upsample_nearest(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        ensure!(s.len() == 3, Dimension, "upsample_nearest needs C×H×W, got {s:?}");
        ensure!(out_h > 0 && out_w > 0, Contract, "upsample_nearest to zero size");
        let src = self.data(x);
        let mut out = Vec::with_capacity(s[0] * out_h * out_w);
        for c in 0..s[0] {
            for y in 0..out_h {
                let sy = y * s[1] / out_h;
                for xx in 0..out_w {
                    let sx = xx * s[2] / out_w;
                    out.push(src[(c * s[1] + sy) * s[2] + sx]);
                }
            }
        }
        let t = Tensor::new(vec![s[0], out_h, out_w], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(t, Op::UpsampleNearest(x), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), Contract, "concat_rows: nothing to concatenate");
        let cols = match self.shape(parts[0]) {
            [_, c] => *c,
            s => return Err(Error::Dimension(format!("concat_rows needs matrices, got {s:?}"))),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::Dimension(format!(
                    "concat_rows: {s:?} does not have {cols} columns"
                )));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let ng = self.needs(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar root. Every tracked leaf ends up with a
    /// gradient buffer (zeros when unreachable). A tape supports one sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        ensure!(root.0 < self.nodes.len(), Contract, "root is not on this tape");
        ensure!(
            self.nodes[root.0].value.is_scalar(),
            Contract,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let g = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = self.nodes[i].value.shape();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let bt = transpose_raw(self.data(b), k, n);
                    self.accumulate(grads, a, matmul_raw(g, &bt, m, n, k));
                }
                if self.nodes[b.0].needs_grad {
                    let at = transpose_raw(self.data(a), m, k);
                    self.accumulate(grads, b, matmul_raw(&at, g, k, m, n));
                }
            }
            &Op::Conv2d {
                input,
                kernels,
                stride,
                pad,
            } => {
                let geom = ConvGeom::new(self.shape(input), self.shape(kernels), stride, pad)
                    .expect("validated in forward");
                let (gi, gk) = conv_backward(
                    self.data(input),
                    self.data(kernels),
                    g,
                    &geom,
                    self.nodes[input.0].needs_grad,
                    self.nodes[kernels.0].needs_grad,
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, input, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, kernels, gk);
                }
            }
            &Op::AddChannelBias(x, b) => {
                self.accumulate(grads, x, g.to_vec());
                let c = self.shape(b)[0];
                let plane = g.len() / c;
                let gb = g.chunks(plane).map(|p| p.iter().sum()).collect();
                self.accumulate(grads, b, gb);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.iter().map(|v| v * f).collect()),
            &Op::Relu(a) => {
                let gx = self
                    .data(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, a, gx);
            }
            &Op::Sum(a) => self.accumulate(grads, a, vec![g[0]; self.value(a).numel()]),
            &Op::Reshape(a) => self.accumulate(grads, a, g.to_vec()),
            &Op::Transpose(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                self.accumulate(grads, a, transpose_raw(g, r, c));
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let plane = s[1] * s[2];
                let gx = (0..s[0])
                    .flat_map(|c| std::iter::repeat_n(g[c] / plane as f64, plane))
                    .collect();
                self.accumulate(grads, x, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let cols = out_shape[1];
                let y = self.nodes[i].value.data();
                let mut gx = Vec::with_capacity(y.len());
                for ((yr, gr), n) in y.chunks(cols).zip(g.chunks(cols)).zip(norms) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * c + l] -= scale;
                }
                self.accumulate(grads, *logits, gl);
            }
            &Op::UpsampleNearest(x) => {
                let s = self.shape(x);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut gx = vec![0.0; self.value(x).numel()];
                let mut it = g.iter();
                for c in 0..s[0] {
                    for y in 0..oh {
                        let sy = y * s[1] / oh;
                        for xx in 0..ow {
                            let sx = xx * s[2] / ow;
                            gx[(c * s[1] + sy) * s[2] + sx] += it.next().unwrap();
                        }
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(si: &[usize], sk: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d: kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output positions `o` with `o*stride + k - pad` inside `[0, size)`.
    fn valid(&self, k: usize, size: usize, n_out: usize) -> std::ops::Range<usize> {
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if size + self.pad > k {
            ((size - 1 + self.pad - k) / self.stride + 1).min(n_out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

fn conv_forward(input: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        let oplane = &mut out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let iplane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let ys = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.kw {
                    let wv = kernels[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    let xs = g.valid(kx, g.w, g.w_out);
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut oplane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in xs.clone() {
                            orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    kernels: &[f64],
    grad_out: &[f64],
    g: &ConvGeom,
    want_input: bool,
    want_kernels: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gi = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernels.then(|| vec![0.0; kernels.len()]);
    for co in 0..g.c_out {
        let gplane = &grad_out[co * g.h_out * g.w_out..(co + 1) * g.h_out * g.w_out];
        for ci in 0..g.c_in {
            let ibase = ci * g.h * g.w;
            for ky in 0..g.kh {
                let ys = g.valid(ky, g.h, g.h_out);
                for kx in 0..g.kw {
                    let kidx = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                    let wv = kernels[kidx];
                    let xs = g.valid(kx, g.w, g.w_out);
                    let mut acc = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = ibase + iy * g.w;
                        let grow = &gplane[oy * g.w_out..(oy + 1) * g.w_out];
                        for ox in xs.clone() {
                            let ii = row + ox * g.stride + kx - g.pad;
                            let gv = grow[ox];
                            if let Some(gi) = gi.as_mut() {
                                gi[ii] += wv * gv;
                            }
                            acc += input[ii] * gv;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gi, gk)
}
