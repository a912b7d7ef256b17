//! Append-only tape of differentiable tensor operations.
//!
//! Every op is pushed after its inputs, so the node vector is already in
//! topological order and `backward` is a single reverse sweep.

use crate::autodiff::tensor::numel;
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Max2(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        input: Var,
        axis: usize,
    },
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    MaskCols {
        input: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    GlobalAvgPool(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedRowMean {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Max2(..) => "max2",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::MaskCols { .. } => "mask_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::WeightedRowMean { .. } => "weighted_row_mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Max2(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Narrow { input, .. }
            | Op::SumAxis { input, .. }
            | Op::MeanAxis { input, .. }
            | Op::MaskCols { input, .. } => vec![*input],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::WeightedRowMean { x, .. } => vec![*x],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Confined to one thread; build a fresh graph (or
/// [`reset`](Graph::reset)) per forward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// `(outer, extent, inner)` split of a row-major shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn std_normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::one() + (x * T::from_f64(INV_SQRT_2)).erf())
}

fn std_normal_pdf<T: Real>(x: T) -> T {
    T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn unary_map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dims(op, sa, sb));
        }
        Ok(())
    }

    fn binary_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map(
            "max2",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::Max2(a, b),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary_map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary_map(a, |x| x * std_normal_cdf(x), Op::Gelu(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            false,
            false,
            m,
            k,
            n,
            T::one(),
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            T::zero(),
            &mut out,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 2, got {s:?}"),
            ));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a)))
    }

    /// Row-major reshape; data is not moved.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        self.reshape(a, &[n])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dims("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = T::from_f64(t.len() as f64);
        let s: T = t.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<T>)> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for {s:?}"),
            ));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                accumulate(&mut out[o * inner..(o + 1) * inner], row);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok((shape, out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce_axis("sum_axis", a, axis)?;
        Ok(self.push(Tensor::new(shape, out)?, Op::SumAxis { input: a, axis }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = T::from_f64(self.shape(a).get(axis).copied().unwrap_or(1) as f64);
        let (shape, mut out) = self.reduce_axis("mean_axis", a, axis)?;
        out.iter_mut().for_each(|v| *v /= ext);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { input: a, axis }))
    }

    /// Affine map `x w + b`. `x` is `[n, in]` or a single vector `[in]`;
    /// `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, d_in) = match sx.len() {
            1 => (1, sx[0]),
            2 => (sx[0], sx[1]),
            _ => return Err(Error::dims("linear", &sx, &sw)),
        };
        if sw.len() != 2 || sw[0] != d_in {
            return Err(Error::dims("linear", &sx, &sw));
        }
        let d_out = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return Err(Error::dims("linear bias", &sw, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            false,
            false,
            n,
            d_in,
            d_out,
            T::one(),
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            T::one(),
            &mut out,
        );
        let shape = if sx.len() == 1 {
            vec![d_out]
        } else {
            vec![n, d_out]
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }))
    }

    /// Softmax over the last axis. Entries equal to `-inf` map to exactly 0.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input"))?;
        if n == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), FloatMax::fmax);
            if !m.is_finite() {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a)))
    }

    /// Set last-axis columns with `keep[j] == false` to `-inf`.
    pub fn mask_columns(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = t.shape().last().copied().unwrap_or(0);
        if n != keep.len() {
            return Err(Error::dims("mask_columns", t.shape(), &[keep.len()]));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            for (v, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *v = T::neg_infinity();
                }
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskCols {
                input: a,
                keep: keep.to_vec(),
            },
        ))
    }

    /// Normalize each last-axis slice with biased variance, then apply `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dims("layer_norm", &sx, self.shape(gamma)));
        }
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let rows = src.len() / d;
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + bt[j];
            }
        }
        Ok(self.push(
            Tensor::new(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// 2-D convolution of a `[c_in, H, W]` input with `[c_out, c_in, k, k]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::dims("conv2d", &sx, &sw));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel size {k} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h == 0 || wd == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("non-positive output extent for input {h}x{wd}, kernel {k}, pad {pad}"),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dims("conv2d bias", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            ho,
            wo,
        };
        let cols = im2col(self.nodes[x.0].value.data(), &geom);
        let p = ho * wo;
        let kk = c_in * k * k;
        let mut out = vec![T::zero(); c_out * p];
        if let Some(b) = b {
            let bias = self.nodes[b.0].value.data();
            for (row, &bv) in out.chunks_mut(p).zip(bias) {
                row.iter_mut().for_each(|v| *v = bv);
            }
        }
        T::gemm(
            false,
            false,
            c_out,
            kk,
            p,
            T::one(),
            self.nodes[w.0].value.data(),
            &cols,
            T::one(),
            &mut out,
        );
        Ok(self.push(
            Tensor::new(vec![c_out, ho, wo], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// Mean over every axis but the first: `[c, ...] -> [c]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("rank >= 2 required, got {s:?}"),
            ));
        }
        let inner: usize = s[1..].iter().product();
        let n = T::from_f64(inner as f64);
        let out = self.nodes[a.0]
            .value
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        Ok(self.push(Tensor::new(vec![s[0]], out)?, Op::GlobalAvgPool(a)))
    }

    /// Mean cross-entropy of `[B, C]` (or `[C]`) logits against class indices.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let (b, c) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("bad logits shape {s:?}"),
                ))
            }
        };
        if labels.len() != b {
            return Err(Error::dims("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label {
                label: bad,
                classes: c,
            });
        }
        let src = self.nodes[logits.0].value.data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &src[r * c..(r + 1) * c];
            let m = row.iter().copied().fold(T::neg_infinity(), FloatMax::fmax);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::from_f64(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Weighted mean of the rows of `[n, d]`: `sum_i w_i x_i / sum_i w_i`.
    pub fn weighted_row_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != weights.len() {
            return Err(Error::dims("weighted_row_mean", &s, &[weights.len()]));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Contract(
                "weighted_row_mean needs positive total weight".into(),
            ));
        }
        let w: Vec<T> = weights.iter().map(|&v| T::from_f64(v / total)).collect();
        let d = s[1];
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); d];
        for (row, &wi) in src.chunks(d).zip(&w) {
            if wi != T::zero() {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += wi * v;
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![d], out)?,
            Op::WeightedRowMean { x, weights: w },
        ))
    }

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<T>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.len()]);
            }
            true
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if slot(grads, v) {
                        accumulate(grads[v.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if slot(grads, *a) {
                    accumulate(grads[a.0].as_mut().unwrap(), g);
                }
                if slot(grads, *b) {
                    for (d, &s) in grads[b.0].as_mut().unwrap().iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if slot(grads, *a) {
                    for ((d, &s), &y) in grads[a.0].as_mut().unwrap().iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if slot(grads, *b) {
                    for ((d, &s), &x) in grads[b.0].as_mut().unwrap().iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if slot(grads, *a) {
                    for (d, &s) in grads[a.0].as_mut().unwrap().iter_mut().zip(g) {
                        *d += s * *c;
                    }
                }
            }
            Op::Relu(a) => {
                if slot(grads, *a) {
                    for ((d, &s), &x) in grads[a.0].as_mut().unwrap().iter_mut().zip(g).zip(val(*a))
                    {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if slot(grads, *a) {
                    for ((d, &s), &x) in grads[a.0].as_mut().unwrap().iter_mut().zip(g).zip(val(*a))
                    {
                        *d += s * (std_normal_cdf(x) + x * std_normal_pdf(x));
                    }
                }
            }
            Op::Max2(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if slot(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        if va[j] >= vb[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if slot(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        if va[j] < vb[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if slot(grads, *a) {
                    T::gemm(
                        false,
                        true,
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        val(*b),
                        T::one(),
                        grads[a.0].as_mut().unwrap(),
                    );
                }
                if slot(grads, *b) {
                    T::gemm(
                        true,
                        false,
                        k,
                        m,
                        n,
                        T::one(),
                        val(*a),
                        g,
                        T::one(),
                        grads[b.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Transpose(a) => {
                if slot(grads, *a) {
                    let s = nodes[a.0].value.shape();
                    let (r, c) = (s[0], s[1]);
                    let ga = grads[a.0].as_mut().unwrap();
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[i2 * c + j] += g[j * r + i2];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if slot(grads, *a) {
                    accumulate(grads[a.0].as_mut().unwrap(), g);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = nodes[i].value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                let row = shape[*axis] * inner;
                for &v in inputs {
                    let block = nodes[v.0].value.shape()[*axis] * inner;
                    if slot(grads, v) {
                        let gv = grads[v.0].as_mut().unwrap();
                        for o in 0..outer {
                            accumulate(
                                &mut gv[o * block..(o + 1) * block],
                                &g[o * row + offset..o * row + offset + block],
                            );
                        }
                    }
                    offset += block;
                }
            }
            Op::Narrow { input, axis, start } => {
                if slot(grads, *input) {
                    let s = nodes[input.0].value.shape();
                    let (outer, ext, inner) = split_axis(s, *axis);
                    let len = nodes[i].value.shape()[*axis];
                    let gi = grads[input.0].as_mut().unwrap();
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        accumulate(
                            &mut gi[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                if slot(grads, *a) {
                    let n = nodes[a.0].value.len();
                    let s = if matches!(nodes[i].op, Op::Mean(_)) {
                        g[0] / T::from_f64(n as f64)
                    } else {
                        g[0]
                    };
                    grads[a.0]
                        .as_mut()
                        .unwrap()
                        .iter_mut()
                        .for_each(|d| *d += s);
                }
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                if slot(grads, *input) {
                    let s = nodes[input.0].value.shape();
                    let (outer, ext, inner) = split_axis(s, *axis);
                    let scale = if matches!(nodes[i].op, Op::MeanAxis { .. }) {
                        T::one() / T::from_f64(ext as f64)
                    } else {
                        T::one()
                    };
                    let gi = grads[input.0].as_mut().unwrap();
                    for o in 0..outer {
                        for e in 0..ext {
                            let dst = &mut gi[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s * scale;
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let sw = nodes[w.0].value.shape();
                let (d_in, d_out) = (sw[0], sw[1]);
                let n = nodes[x.0].value.len() / d_in;
                if slot(grads, *x) {
                    T::gemm(
                        false,
                        true,
                        n,
                        d_out,
                        d_in,
                        T::one(),
                        g,
                        val(*w),
                        T::one(),
                        grads[x.0].as_mut().unwrap(),
                    );
                }
                if slot(grads, *w) {
                    T::gemm(
                        true,
                        false,
                        d_in,
                        n,
                        d_out,
                        T::one(),
                        val(*x),
                        g,
                        T::one(),
                        grads[w.0].as_mut().unwrap(),
                    );
                }
                if let Some(b) = b {
                    if slot(grads, *b) {
                        let gb = grads[b.0].as_mut().unwrap();
                        for row in g.chunks(d_out) {
                            accumulate(gb, row);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if slot(grads, *a) {
                    let n = *nodes[i].value.shape().last().unwrap();
                    let ga = grads[a.0].as_mut().unwrap();
                    for ((dst, y), gy) in ga.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dst[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::MaskCols { input, keep } => {
                if slot(grads, *input) {
                    let n = keep.len();
                    let gi = grads[input.0].as_mut().unwrap();
                    for (dst, src) in gi.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            if keep[j] {
                                dst[j] += src[j];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.len();
                let gm = val(*gamma);
                if slot(grads, *x) {
                    let dn = T::from_f64(d as f64);
                    let gx = grads[x.0].as_mut().unwrap();
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gy = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for j in 0..d {
                            let dxh = gy[j] * gm[j];
                            gx[r * d + j] += rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if slot(grads, *gamma) {
                    let gg = grads[gamma.0].as_mut().unwrap();
                    for (gy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gy[j] * xh[j];
                        }
                    }
                }
                if slot(grads, *beta) {
                    let gb = grads[beta.0].as_mut().unwrap();
                    for gy in g.chunks(d) {
                        accumulate(gb, gy);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.ho * geom.wo;
                let kk = geom.c_in * geom.k * geom.k;
                if slot(grads, *w) {
                    T::gemm(
                        false,
                        true,
                        geom.c_out,
                        p,
                        kk,
                        T::one(),
                        g,
                        cols,
                        T::one(),
                        grads[w.0].as_mut().unwrap(),
                    );
                }
                if let Some(b) = b {
                    if slot(grads, *b) {
                        let gb = grads[b.0].as_mut().unwrap();
                        for (d, row) in gb.iter_mut().zip(g.chunks(p)) {
                            *d += row.iter().copied().sum::<T>();
                        }
                    }
                }
                if slot(grads, *x) {
                    let mut dcols = vec![T::zero(); kk * p];
                    T::gemm(
                        true,
                        false,
                        kk,
                        geom.c_out,
                        p,
                        T::one(),
                        val(*w),
                        g,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im_add(&dcols, geom, grads[x.0].as_mut().unwrap());
                }
            }
            Op::GlobalAvgPool(a) => {
                if slot(grads, *a) {
                    let inner = nodes[a.0].value.len() / g.len();
                    let n = T::from_f64(inner as f64);
                    let ga = grads[a.0].as_mut().unwrap();
                    for (dst, &s) in ga.chunks_mut(inner).zip(g) {
                        let v = s / n;
                        dst.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if slot(grads, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / T::from_f64(b as f64);
                    let gl = grads[logits.0].as_mut().unwrap();
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::WeightedRowMean { x, weights } => {
                if slot(grads, *x) {
                    let d = g.len();
                    let gx = grads[x.0].as_mut().unwrap();
                    for (dst, &wi) in gx.chunks_mut(d).zip(weights) {
                        for (dd, &s) in dst.iter_mut().zip(g) {
                            *dd += wi * s;
                        }
                    }
                }
            }
        }
    }
}

/// `max` that ignores the `FloatOps`/`PartialOrd` ambiguity in folds.
trait FloatMax {
    fn fmax(self, other: Self) -> Self;
}

impl<T: Real> FloatMax for T {
    fn fmax(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.ho * g.wo;
    for ci in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((ci * g.k + ki) * g.k + kj) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[(ci * g.h + iy as usize) * g.w + ix as usize] +=
                                cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
