use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::graph::{Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, numel, Tensor};

/// Guard below which a norm or amplitude is treated as zero.
pub const NORM_EPS: f64 = 1e-12;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-8;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `src_shape`) into the layout obtained by permuting
/// axes by `axes`.
pub(crate) fn permute_data(src: &[f64], src_shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let src_strides = strides(src_shape);
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = src.len();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// For each element of a tensor of `shape`, the flat offset into a tensor of
/// `wshape` where every axis is either equal or a singleton.
pub(crate) fn broadcast_offsets(shape: &[usize], wshape: &[usize]) -> Vec<usize> {
    let wstr = strides(wshape);
    let step: Vec<usize> = shape
        .iter()
        .zip(wshape)
        .zip(&wstr)
        .map(|((&s, &w), &st)| if w == s { st } else { 0 })
        .collect();
    let n = numel(shape);
    let nd = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(offset);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += step[d];
            if idx[d] < shape[d] {
                break;
            }
            offset -= step[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn rfft_rows(data: &[f64], t: usize) -> Vec<Complex<f64>> {
    let bins = t / 2 + 1;
    let rows = data.len() / t;
    let fft = FftPlanner::new().plan_fft_forward(t);
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let mut out = Vec::with_capacity(rows * bins);
    for r in 0..rows {
        out.extend_from_slice(&buf[r * t..r * t + bins]);
    }
    out
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

impl<'g> Var<'g> {
    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(Error::Contract(
                "operands belong to different graphs".into(),
            ))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let x = self.value();
        self.graph.push(x.map(f), op)
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same("add", a.shape(), b.shape())?;
        self.graph
            .push(a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same("sub", a.shape(), b.shape())?;
        self.graph
            .push(a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        check_same("mul", a.shape(), b.shape())?;
        self.graph
            .push(a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    /// Multiplies every element by a single-element tensor `s`.
    pub fn scale_by(&self, s: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&s)?;
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(),
                rhs: sv.shape().to_vec(),
            });
        }
        let c = sv.item();
        self.unary(Op::ScaleBy(self.id, s.id), |v| v * c)
    }

    /// `x + b` where `b` is a vector matching the last axis of `x`.
    pub fn add_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let n = *x.shape().last().unwrap();
        if b.ndim() != 1 || b.len() != n {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        self.graph.push(out, Op::AddBias(self.id, bias.id))
    }

    /// Elementwise product with `w`, whose axes are each either equal to the
    /// matching axis of `self` or a singleton. This covers scaling along
    /// channels (`B×C×1`) and along time (`B×1×T`).
    pub fn mul_broadcast(&self, w: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&w)?;
        let (x, wv) = (self.value(), w.value());
        let ok = x.ndim() == wv.ndim()
            && x.shape()
                .iter()
                .zip(wv.shape())
                .all(|(&a, &b)| b == a || b == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "mul_broadcast",
                lhs: x.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let offsets = broadcast_offsets(x.shape(), wv.shape());
        let data = x
            .data()
            .iter()
            .zip(&offsets)
            .map(|(&v, &o)| v * wv.data()[o])
            .collect();
        self.graph.push(
            Tensor::new(x.shape(), data)?,
            Op::BroadcastMul(self.id, w.id),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = tensor::gemm(a.data(), b.data(), m, k, n);
        self.graph
            .push(Tensor::new(&[m, n], out)?, Op::MatMul(self.id, other.id))
    }

    /// Batched product `[N,m,k] x [N,k,n]`.
    pub fn bmm(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (nb, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            tensor::gemm_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.graph
            .push(Tensor::new(&[nb, m, n], out)?, Op::Bmm(self.id, other.id))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let mut seen = vec![false; x.ndim()];
        let valid = axes.len() == x.ndim()
            && axes
                .iter()
                .all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::InvalidShape {
                op: "permute",
                shape: x.shape().to_vec(),
                reason: format!("bad axis order {axes:?}"),
            });
        }
        let shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let data = permute_data(x.data(), x.shape(), axes);
        self.graph.push(
            Tensor::new(&shape, data)?,
            Op::Permute(self.id, axes.to_vec()),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'g>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: self.shape(),
                reason: "need at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = (*self.value()).clone();
        let y = x.reshaped(shape)?;
        self.graph.push(y, Op::Reshape(self.id))
    }

    pub fn gelu(&self) -> Result<Var<'g>> {
        self.unary(Op::Gelu(self.id), gelu_scalar)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(Op::Sigmoid(self.id), sigmoid_scalar)
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("mean_axis", x.shape(), axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.graph
            .push(Tensor::new(&shape, out)?, Op::MeanAxis(self.id, axis))
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.sum() / x.len() as f64;
        self.graph.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let out = softmax_data(x.data(), x.shape(), axis, false);
        self.graph
            .push(Tensor::new(x.shape(), out)?, Op::Softmax(self.id, axis))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        check_axis("log_softmax", x.shape(), axis)?;
        let out = softmax_data(x.data(), x.shape(), axis, true);
        self.graph
            .push(Tensor::new(x.shape(), out)?, Op::LogSoftmax(self.id, axis))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&gain)?;
        self.same_graph(&bias)?;
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / n;
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let xhat = Tensor::new(x.shape(), xhat)?;
        self.graph.push(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        )
    }

    /// Scales each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'g>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut norms = Vec::with_capacity(x.len() / n);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    reason: format!("row norm {norm:e} below {NORM_EPS:e}"),
                });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        self.graph.push(
            Tensor::new(x.shape(), out)?,
            Op::L2Normalize { x: self.id, norms },
        )
    }

    /// Inverted dropout. Returns `self` unchanged in eval mode or when `p == 0`.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(*self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.graph.push(
            Tensor::new(x.shape(), data)?,
            Op::Dropout { x: self.id, mask },
        )
    }

    /// Concatenates along the last axis.
    pub fn concat(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let nd = sa.len();
        if nd != sb.len() || sa[..nd - 1] != sb[..nd - 1] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (na, nb) = (sa[nd - 1], sb[nd - 1]);
        let mut data = Vec::with_capacity(a.len() + b.len());
        for (ra, rb) in a.data().chunks(na).zip(b.data().chunks(nb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        shape[nd - 1] = na + nb;
        self.graph
            .push(Tensor::new(&shape, data)?, Op::Concat(self.id, other.id))
    }

    /// DFT magnitude of every row along the last axis, keeping the
    /// `⌊T/2⌋+1` non-redundant bins.
    pub fn rfft_amplitude(&self) -> Result<Var<'g>> {
        let x = self.value();
        let t = *x.shape().last().unwrap();
        if t < 2 {
            return Err(Error::InvalidShape {
                op: "rfft_amplitude",
                shape: x.shape().to_vec(),
                reason: "time extent must be at least 2".into(),
            });
        }
        let spectrum = rfft_rows(x.data(), t);
        let amp = spectrum.iter().map(|c| c.norm()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = t / 2 + 1;
        self.graph.push(
            Tensor::new(&shape, amp)?,
            Op::RfftAmplitude {
                x: self.id,
                spectrum,
            },
        )
    }

    /// Grouped 1-D cross-correlation along the last axis.
    ///
    /// `self` is `[N,G,R,L]`, `kernel` is `[G,k]`, optional `bias` is `[G]`.
    /// Every row of group `g` is correlated with kernel row `g` after
    /// zero-padding both ends by `pad`.
    pub fn conv_grouped(
        &self,
        kernel: Var<'g>,
        bias: Option<Var<'g>>,
        pad: usize,
    ) -> Result<Var<'g>> {
        self.same_graph(&kernel)?;
        let (x, w) = (self.value(), kernel.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 2 || sw[0] != sx[1] {
            return Err(Error::ShapeMismatch {
                op: "conv",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, g, r, l) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[1];
        if l + 2 * pad < k {
            return Err(Error::InvalidShape {
                op: "conv",
                shape: sx.to_vec(),
                reason: format!("kernel of length {k} exceeds padded input"),
            });
        }
        let lout = l + 2 * pad - k + 1;
        let bv = match bias {
            Some(b) => {
                self.same_graph(&b)?;
                let bv = b.value();
                if bv.shape() != [g] {
                    return Err(Error::ShapeMismatch {
                        op: "conv",
                        lhs: sw.to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; n * g * r * lout];
        for ni in 0..n {
            for gi in 0..g {
                let krow = &w.data()[gi * k..(gi + 1) * k];
                let b0 = bv.as_ref().map_or(0.0, |b| b.data()[gi]);
                for ri in 0..r {
                    let base = (ni * g + gi) * r + ri;
                    let src = &x.data()[base * l..(base + 1) * l];
                    let dst = &mut out[base * lout..(base + 1) * lout];
                    dst.iter_mut().for_each(|v| *v = b0);
                    for (j, &kj) in krow.iter().enumerate() {
                        // dst[t] += kj * src[t + j - pad] for valid t
                        let lo = pad.saturating_sub(j);
                        let hi = (l + pad).saturating_sub(j).min(lout);
                        if lo >= hi {
                            continue;
                        }
                        let s0 = lo + j - pad;
                        for (d, s) in dst[lo..hi].iter_mut().zip(&src[s0..s0 + (hi - lo)]) {
                            *d += kj * s;
                        }
                    }
                }
            }
        }
        self.graph.push(
            Tensor::new(&[n, g, r, lout], out)?,
            Op::Conv {
                x: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                pad,
            },
        )
    }

    /// "Same" convolution of every row of a `B×C×T` tensor with one shared
    /// odd-length kernel, zero-padded by `(k-1)/2` on each side.
    pub fn conv1d_same(&self, kernel: Var<'g>) -> Result<Var<'g>> {
        let sx = self.shape();
        let sk = kernel.shape();
        if sk.len() != 1 {
            return Err(Error::InvalidShape {
                op: "conv1d_same",
                shape: sk,
                reason: "kernel must be one-dimensional".into(),
            });
        }
        let k = sk[0];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv1d_same needs an odd kernel, got length {k}"
            )));
        }
        if sx.len() != 3 {
            return Err(Error::InvalidShape {
                op: "conv1d_same",
                shape: sx,
                reason: "expected batch x channels x time".into(),
            });
        }
        if k > sx[2] {
            return Err(Error::Config(format!(
                "kernel length {k} exceeds sequence length {}",
                sx[2]
            )));
        }
        let x4 = self.reshape(&[sx[0], 1, sx[1], sx[2]])?;
        let k2 = kernel.reshape(&[1, k])?;
        x4.conv_grouped(k2, None, (k - 1) / 2)?.reshape(&sx)
    }

    /// Lifts `[B, ...]` to `[B, F, ...]` with `out[b,f] = w[f]·x[b] + bias[f]`.
    pub fn pointwise_maps(&self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        self.same_graph(&bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let f = w.len();
        if w.ndim() != 1 || b.shape() != [f] {
            return Err(Error::ShapeMismatch {
                op: "pointwise_maps",
                lhs: w.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let batch = x.shape()[0];
        let inner = x.len() / batch;
        let mut out = Vec::with_capacity(batch * f * inner);
        for bi in 0..batch {
            let src = &x.data()[bi * inner..(bi + 1) * inner];
            for fi in 0..f {
                let (wf, bf) = (w.data()[fi], b.data()[fi]);
                out.extend(src.iter().map(|v| wf * v + bf));
            }
        }
        let mut shape = vec![batch, f];
        shape.extend_from_slice(&x.shape()[1..]);
        self.graph.push(
            Tensor::new(&shape, out)?,
            Op::PointwiseMaps {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
        )
    }

    /// Non-overlapping average pooling with window `size` along the last axis.
    /// Trailing samples that do not fill a window are dropped.
    pub fn avg_pool(&self, size: usize) -> Result<Var<'g>> {
        let x = self.value();
        let l = *x.shape().last().unwrap();
        if size == 0 || size > l {
            return Err(Error::InvalidShape {
                op: "avg_pool",
                shape: x.shape().to_vec(),
                reason: format!("window {size} invalid"),
            });
        }
        let lout = l / size;
        let inv = 1.0 / size as f64;
        let mut out = Vec::with_capacity(x.len() / l * lout);
        for row in x.data().chunks(l) {
            for w in 0..lout {
                out.push(row[w * size..(w + 1) * size].iter().sum::<f64>() * inv);
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = lout;
        self.graph
            .push(Tensor::new(&shape, out)?, Op::AvgPool(self.id, size))
    }

    /// Gathers entries of axis 0.
    pub fn index_select(&self, indices: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let y = x.select_rows(indices)?;
        self.graph
            .push(y, Op::IndexSelect(self.id, indices.to_vec()))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&self) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::InvalidShape {
                op: "diag",
                shape: s.to_vec(),
                reason: "expected a square matrix".into(),
            });
        }
        let n = s[0];
        let data = (0..n).map(|i| x.data()[i * n + i]).collect();
        self.graph.push(Tensor::new(&[n], data)?, Op::Diag(self.id))
    }
}

pub(crate) fn softmax_data(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|j| (x[at(j)] - max).exp()).sum();
            if log {
                let lse = max + sum.ln();
                for j in 0..n {
                    out[at(j)] = x[at(j)] - lse;
                }
            } else {
                for j in 0..n {
                    out[at(j)] = (x[at(j)] - max).exp() / sum;
                }
            }
        }
    }
    out
}
