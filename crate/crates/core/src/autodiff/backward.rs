use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::graph::{Node, Op};
use super::ops::{axis_split, broadcast_offsets, gelu_grad_scalar, permute_data, NORM_EPS};
use crate::tensor::{self, Tensor};

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("gradient shape follows its input")
}

/// Gradient contributions of node `id` to each of its inputs, given the
/// gradient `g` flowing into the node's output.
pub(crate) fn input_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &*nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let out = &*nodes[id].value;
    let gd = g.data();

    match &nodes[id].op {
        Op::Leaf => vec![],
        &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
        &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
        &Op::Mul(a, b) => vec![
            (a, g.zip_map(val(b), |x, y| x * y)),
            (b, g.zip_map(val(a), |x, y| x * y)),
        ],
        &Op::Scale(a, c) => vec![(a, g.map(|v| v * c))],
        &Op::ScaleBy(a, s) => {
            let c = val(s).item();
            let ds: f64 = gd.iter().zip(val(a).data()).map(|(x, y)| x * y).sum();
            vec![(a, g.map(|v| v * c)), (s, Tensor::scalar(ds))]
        }
        &Op::AddBias(x, b) => {
            let n = val(b).len();
            let mut db = vec![0.0; n];
            for row in gd.chunks(n) {
                for (acc, v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![(x, g.clone()), (b, like(val(b), db))]
        }
        &Op::BroadcastMul(x, w) => {
            let (xv, wv) = (val(x), val(w));
            let offsets = broadcast_offsets(xv.shape(), wv.shape());
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            for (i, &o) in offsets.iter().enumerate() {
                dx[i] = gd[i] * wv.data()[o];
                dw[o] += gd[i] * xv.data()[i];
            }
            vec![(x, like(xv, dx)), (w, like(wv, dw))]
        }
        &Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut res = Vec::with_capacity(2);
            if needs(a) {
                let mut da = vec![0.0; m * k];
                tensor::gemm_a_bt_acc(gd, bv.data(), &mut da, m, n, k);
                res.push((a, like(av, da)));
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                tensor::gemm_at_b_acc(av.data(), gd, &mut db, m, k, n);
                res.push((b, like(bv, db)));
            }
            res
        }
        &Op::Bmm(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (nb, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            let mut da = vec![0.0; nb * m * k];
            let mut db = vec![0.0; nb * k * n];
            for i in 0..nb {
                let gi = &gd[i * m * n..(i + 1) * m * n];
                if needs(a) {
                    tensor::gemm_a_bt_acc(
                        gi,
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        &mut da[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                if needs(b) {
                    tensor::gemm_at_b_acc(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        gi,
                        &mut db[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            vec![(a, like(av, da)), (b, like(bv, db))]
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            let data = permute_data(gd, g.shape(), &inverse);
            vec![(*a, like(val(*a), data))]
        }
        &Op::Reshape(a) => vec![(a, like(val(a), gd.to_vec()))],
        &Op::Gelu(a) => vec![(a, g.zip_map(val(a), |gv, x| gv * gelu_grad_scalar(x)))],
        &Op::Sigmoid(a) => vec![(a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)))],
        &Op::Relu(a) => vec![(a, g.zip_map(val(a), |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        &Op::Exp(a) => vec![(a, g.zip_map(out, |gv, y| gv * y))],
        &Op::MeanAxis(a, axis) => {
            let av = val(a);
            let (outer, n, inner) = axis_split(av.shape(), axis);
            let inv = 1.0 / n as f64;
            let mut dx = vec![0.0; av.len()];
            for o in 0..outer {
                let src = &gd[o * inner..(o + 1) * inner];
                for j in 0..n {
                    let dst = &mut dx[(o * n + j) * inner..(o * n + j + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
            }
            vec![(a, like(av, dx))]
        }
        &Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), gd[0]))],
        &Op::Mean(a) => {
            let av = val(a);
            vec![(a, Tensor::full(av.shape(), gd[0] / av.len() as f64))]
        }
        &Op::Softmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), axis);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![(a, like(out, dx))]
        }
        &Op::LogSoftmax(a, axis) => {
            let (outer, n, inner) = axis_split(out.shape(), axis);
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let gsum: f64 = (0..n).map(|j| gd[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = gd[at(j)] - y[at(j)].exp() * gsum;
                    }
                }
            }
            vec![(a, like(out, dx))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain);
            let n = gv.len();
            let xh = xhat.data();
            let mut dx = vec![0.0; xh.len()];
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (r, &rs) in rstd.iter().enumerate() {
                let row = r * n..(r + 1) * n;
                let (gr, hr) = (&gd[row.clone()], &xh[row.clone()]);
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for j in 0..n {
                    let d = gr[j] * gv.data()[j];
                    mean_d += d;
                    mean_dh += d * hr[j];
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                }
                mean_d /= n as f64;
                mean_dh /= n as f64;
                for j in 0..n {
                    let d = gr[j] * gv.data()[j];
                    dx[r * n + j] = rs * (d - mean_d - hr[j] * mean_dh);
                }
            }
            vec![
                (*x, like(xhat, dx)),
                (*gain, like(gv, dgain)),
                (*bias, like(gv, dbias)),
            ]
        }
        Op::L2Normalize { x, norms } => {
            let n = out.len() / norms.len();
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for (r, &norm) in norms.iter().enumerate() {
                let row = r * n..(r + 1) * n;
                let dot: f64 = gd[row.clone()]
                    .iter()
                    .zip(&y[row.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                for j in row {
                    dx[j] = (gd[j] - y[j] * dot) / norm;
                }
            }
            vec![(*x, like(out, dx))]
        }
        Op::Dropout { x, mask } => {
            let dx = gd.iter().zip(mask).map(|(a, m)| a * m).collect();
            vec![(*x, like(out, dx))]
        }
        &Op::Concat(a, b) => {
            let (av, bv) = (val(a), val(b));
            let na = *av.shape().last().unwrap();
            let nb = *bv.shape().last().unwrap();
            let mut da = Vec::with_capacity(av.len());
            let mut db = Vec::with_capacity(bv.len());
            for row in gd.chunks(na + nb) {
                da.extend_from_slice(&row[..na]);
                db.extend_from_slice(&row[na..]);
            }
            vec![(a, like(av, da)), (b, like(bv, db))]
        }
        Op::RfftAmplitude { x, spectrum } => {
            // d|X_k|/dx_t = Re(X_k e^{+2πikt/T}) / |X_k|, so the input
            // gradient is the real part of an inverse DFT of g_k X_k / |X_k|
            // over the kept half-spectrum. Zero amplitude contributes 0.
            let xv = val(*x);
            let t = *xv.shape().last().unwrap();
            let bins = t / 2 + 1;
            let rows = xv.len() / t;
            let mut buf = vec![Complex::new(0.0, 0.0); rows * t];
            for r in 0..rows {
                for k in 0..bins {
                    let c = spectrum[r * bins + k];
                    let amp = c.norm();
                    if amp > NORM_EPS {
                        buf[r * t + k] = c * (gd[r * bins + k] / amp);
                    }
                }
            }
            FftPlanner::new().plan_fft_inverse(t).process(&mut buf);
            let dx = buf.iter().map(|c| c.re).collect();
            vec![(*x, like(xv, dx))]
        }
        &Op::Conv {
            x,
            kernel,
            bias,
            pad,
        } => {
            let (xv, wv) = (val(x), val(kernel));
            let s = xv.shape();
            let (n, grp, r, l) = (s[0], s[1], s[2], s[3]);
            let k = wv.shape()[1];
            let lout = out.shape()[3];
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; wv.len()];
            let mut db = vec![0.0; grp];
            let need_x = needs(x);
            for ni in 0..n {
                for gi in 0..grp {
                    let krow = &wv.data()[gi * k..(gi + 1) * k];
                    for ri in 0..r {
                        let base = (ni * grp + gi) * r + ri;
                        let src = &xv.data()[base * l..(base + 1) * l];
                        let go = &gd[base * lout..(base + 1) * lout];
                        db[gi] += go.iter().sum::<f64>();
                        for (j, &kj) in krow.iter().enumerate() {
                            let lo = pad.saturating_sub(j);
                            let hi = (l + pad).saturating_sub(j).min(lout);
                            if lo >= hi {
                                continue;
                            }
                            let s0 = lo + j - pad;
                            let span = hi - lo;
                            dw[gi * k + j] += go[lo..hi]
                                .iter()
                                .zip(&src[s0..s0 + span])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                            if need_x {
                                let dst = &mut dx[base * l + s0..base * l + s0 + span];
                                for (d, gv) in dst.iter_mut().zip(&go[lo..hi]) {
                                    *d += kj * gv;
                                }
                            }
                        }
                    }
                }
            }
            let mut res = vec![(x, like(xv, dx)), (kernel, like(wv, dw))];
            if let Some(b) = bias {
                res.push((b, like(val(b), db)));
            }
            res
        }
        &Op::PointwiseMaps { x, weight, bias } => {
            let (xv, wv) = (val(x), val(weight));
            let f = wv.len();
            let batch = xv.shape()[0];
            let inner = xv.len() / batch;
            let mut dx = vec![0.0; xv.len()];
            let mut dw = vec![0.0; f];
            let mut db = vec![0.0; f];
            for bi in 0..batch {
                let src = &xv.data()[bi * inner..(bi + 1) * inner];
                let dxs = &mut dx[bi * inner..(bi + 1) * inner];
                for fi in 0..f {
                    let go = &gd[(bi * f + fi) * inner..(bi * f + fi + 1) * inner];
                    let wf = wv.data()[fi];
                    let mut sw = 0.0;
                    let mut sb = 0.0;
                    for ((d, &gv), &xv) in dxs.iter_mut().zip(go).zip(src) {
                        *d += wf * gv;
                        sw += gv * xv;
                        sb += gv;
                    }
                    dw[fi] += sw;
                    db[fi] += sb;
                }
            }
            vec![
                (x, like(xv, dx)),
                (weight, like(wv, dw)),
                (bias, like(val(bias), db)),
            ]
        }
        &Op::AvgPool(a, size) => {
            let av = val(a);
            let l = *av.shape().last().unwrap();
            let lout = *out.shape().last().unwrap();
            let inv = 1.0 / size as f64;
            let mut dx = vec![0.0; av.len()];
            for (row, go) in dx.chunks_mut(l).zip(gd.chunks(lout)) {
                for (w, &gv) in go.iter().enumerate() {
                    row[w * size..(w + 1) * size]
                        .iter_mut()
                        .for_each(|d| *d = gv * inv);
                }
            }
            vec![(a, like(av, dx))]
        }
        Op::IndexSelect(a, indices) => {
            let av = val(*a);
            let stride = av.len() / av.shape()[0];
            let mut dx = vec![0.0; av.len()];
            for (slot, &idx) in indices.iter().enumerate() {
                let src = &gd[slot * stride..(slot + 1) * stride];
                for (d, s) in dx[idx * stride..(idx + 1) * stride].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![(*a, like(av, dx))]
        }
        &Op::Diag(a) => {
            let av = val(a);
            let n = av.shape()[0];
            let mut dx = vec![0.0; n * n];
            for i in 0..n {
                dx[i * n + i] = gd[i];
            }
            vec![(a, like(av, dx))]
        }
    }
}
