//! Differentiable tensor ops recorded on a [`Tape`].

use super::tape::{Tape, Var};
use super::tensor::{gemm, Float, Tensor, Trans};

/// Geometry of a (up to) three-dimensional convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn cube(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// A 2-D convolution expressed on a singleton depth axis.
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel: [1, k, k],
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }

    pub fn out_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * self.pad[a];
            assert!(
                span >= self.kernel[a],
                "convolution kernel {:?} larger than padded input {:?}",
                self.kernel,
                input
            );
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Output columns `[lo, hi)` whose unit-stride input index `zw + e − pad` lies inside `0..w`.
fn unit_stride_span(e: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(e);
    let hi = (w + pad).saturating_sub(e).min(ow);
    (lo, hi)
}

/// Unfolds one sample `[C, D, H, W]` into `[C·kd·kh·kw, od·oh·ow]`.
fn im2col<T: Float>(x: &[T], c: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3], cols: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = out;
    let l = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            dst[o..o + oh * ow].fill(T::zero());
                            o += oh * ow;
                            continue;
                        }
                        let plane = &xc[id as usize * h * w..(id as usize + 1) * h * w];
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                dst[o..o + ow].fill(T::zero());
                                o += ow;
                                continue;
                            }
                            let line = &plane[ih as usize * w..(ih as usize + 1) * w];
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, w, ow);
                                let row = &mut dst[o..o + ow];
                                row[..lo].fill(T::zero());
                                row[hi.max(lo)..].fill(T::zero());
                                if hi > lo {
                                    row[lo..hi].copy_from_slice(&line[lo + e - pw..hi + e - pw]);
                                }
                                o += ow;
                                continue;
                            }
                            for zw in 0..ow {
                                let iw = (zw * sw + e) as isize - pw as isize;
                                dst[o] = if iw < 0 || iw >= w as isize {
                                    T::zero()
                                } else {
                                    line[iw as usize]
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Float>(cols: &[T], c: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3], x: &mut [T]) {
    let [d, h, w] = dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = out;
    let l = od * oh * ow;
    let mut row = 0;
    for ci in 0..c {
        let xc = &mut x[ci * d * h * w..(ci + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * l..(row + 1) * l];
                    let mut o = 0;
                    for zd in 0..od {
                        let id = (zd * sd + a) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            o += oh * ow;
                            continue;
                        }
                        for zh in 0..oh {
                            let ih = (zh * sh + b) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                o += ow;
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            if sw == 1 {
                                let (lo, hi) = unit_stride_span(e, pw, w, ow);
                                if hi > lo {
                                    let dstl = &mut xc[base + lo + e - pw..base + hi + e - pw];
                                    for (d, &v) in dstl.iter_mut().zip(&src[o + lo..o + hi]) {
                                        *d += v;
                                    }
                                }
                                o += ow;
                                continue;
                            }
                            for zw in 0..ow {
                                let iw = (zw * sw + e) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    xc[base + iw as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Splits `[B, C, rest..]` into `(B, C, prod(rest))`.
fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "expected at least [batch, channels], got {shape:?}");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Float> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(
            out,
            &[a, b],
            Box::new(|g, _, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(x).map(|v| v * s);
        self.push(out, &[x], Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * s))]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(
            Tensor::scalar(total),
            &[x],
            Box::new(|g, p, _, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(
            out,
            &[x],
            Box::new(|g, p, _, _| vec![Some(g.clone().reshape(p[0].shape()))]),
        )
    }

    /// `max(x, 0)`; NaN passes through so divergence stays visible.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        self.push(
            out,
            &[x],
            Box::new(|g, _, y, _| {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    if yv <= T::zero() {
                        *d = T::zero();
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(
            out,
            &[x],
            Box::new(|g, _, y, _| {
                let mut dx = g.clone();
                for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (T::one() - yv);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates `[B, Ca, rest..]` and `[B, Cb, rest..]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(sa[2..], sb[2..], "concat spatial mismatch");
        let (bsz, ca, s) = bcs(&sa);
        let cb = sb[1];
        let mut data = Vec::with_capacity(bsz * (ca + cb) * s);
        for i in 0..bsz {
            data.extend_from_slice(&self.value(a).data()[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&self.value(b).data()[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        self.push(
            Tensor::from_vec(&shape, data),
            &[a, b],
            Box::new(move |g, _, _, _| {
                let gd = g.data();
                let mut da = Vec::with_capacity(bsz * ca * s);
                let mut db = Vec::with_capacity(bsz * cb * s);
                for i in 0..bsz {
                    let base = i * (ca + cb) * s;
                    da.extend_from_slice(&gd[base..base + ca * s]);
                    db.extend_from_slice(&gd[base + ca * s..base + (ca + cb) * s]);
                }
                vec![
                    Some(Tensor::from_vec(&sa, da)),
                    Some(Tensor::from_vec(&sb, db)),
                ]
            }),
        )
    }

    /// Gathers leading-axis rows; the gradient scatter-adds back.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let out = self.value(x).select_rows(rows);
        let rows = rows.to_vec();
        self.push(
            out,
            &[x],
            Box::new(move |g, p, _, _| {
                let len = p[0].row_len();
                let mut dx = Tensor::zeros(p[0].shape());
                let dd = dx.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &v) in dd[r * len..(r + 1) * len]
                        .iter_mut()
                        .zip(&g.data()[i * len..(i + 1) * len])
                    {
                        *d += v;
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Sums consecutive groups of `group` rows: `[G·group, ..] → [G, ..]`.
    pub fn sum_groups(&mut self, x: Var, group: usize) -> Var {
        let v = self.value(x);
        let rows = v.dim(0);
        assert!(group > 0 && rows % group == 0, "{rows} rows not divisible into groups of {group}");
        let len = v.row_len();
        let n = rows / group;
        let mut data = vec![T::zero(); n * len];
        for r in 0..rows {
            let dst = &mut data[(r / group) * len..(r / group + 1) * len];
            for (d, &s) in dst.iter_mut().zip(v.row(r)) {
                *d += s;
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = n;
        self.push(
            Tensor::from_vec(&shape, data),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut dx = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    dx.extend_from_slice(g.row(r / group));
                }
                vec![Some(Tensor::from_vec(p[0].shape(), dx))]
            }),
        )
    }

    /// Multiplies row `r` of `x` by the scalar `w[r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let rows = vx.dim(0);
        assert_eq!(vw.numel(), rows, "scale_rows needs one weight per row");
        let len = vx.row_len();
        let mut out = vx.clone();
        for (r, chunk) in out.data_mut().chunks_mut(len.max(1)).enumerate().take(rows) {
            let s = vw.data()[r];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push(
            out,
            &[x, w],
            Box::new(move |g, p, _, needs| {
                let (px, pw) = (p[0], p[1]);
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (r, chunk) in dx.data_mut().chunks_mut(len.max(1)).enumerate().take(rows) {
                        let s = pw.data()[r];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    dx
                });
                let dw = needs[1].then(|| {
                    let d: Vec<T> = (0..rows)
                        .map(|r| g.row(r).iter().zip(px.row(r)).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(pw.shape(), d)
                });
                vec![dx, dw]
            }),
        )
    }

    /// Row-wise softmax of a `[R, C]` matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(
            out,
            &[x],
            Box::new(|g, _, y, _| {
                let c = y.dim(1);
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over rows of `logsumexp(logits) − logits[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let v = self.value(logits);
        assert_eq!(v.rank(), 2, "cross_entropy expects [queries, classes]");
        let (q, n) = (v.dim(0), v.dim(1));
        assert_eq!(labels.len(), q, "one label per query row");
        let mut total = 0.0f64;
        for (row, &y) in v.data().chunks(n).zip(labels) {
            assert!(y < n, "label {y} outside 0..{n}");
            total += (log_sum_exp(row) - row[y]).as_f64();
        }
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(T::lit(total / q as f64)),
            &[logits],
            Box::new(move |g, p, _, _| {
                let scale = g.item() / T::lit(q as f64);
                let mut dx = softmax_rows(p[0]);
                for (row, &y) in dx.data_mut().chunks_mut(n).zip(&labels) {
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `x · wᵀ + b` for `x: [B, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.rank(), 2, "linear input must be [batch, features]");
        let (bsz, inp) = (vx.dim(0), vx.dim(1));
        let out_f = vw.dim(0);
        assert_eq!(vw.dim(1), inp, "linear weight/input mismatch");
        let mut out = Tensor::zeros(&[bsz, out_f]);
        gemm(bsz, inp, out_f, vx.data(), Trans::No, vw.data(), Trans::Yes, out.data_mut(), false);
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let vb = self.value(b);
            assert_eq!(vb.numel(), out_f);
            for row in out.data_mut().chunks_mut(out_f) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
            parents.push(b);
        }
        self.push(
            out,
            &parents,
            Box::new(move |g, p, _, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = Tensor::zeros(&[bsz, inp]);
                    gemm(bsz, out_f, inp, g.data(), Trans::No, p[1].data(), Trans::No, dx.data_mut(), false);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = Tensor::zeros(&[out_f, inp]);
                    gemm(out_f, bsz, inp, g.data(), Trans::Yes, p[0].data(), Trans::No, dw.data_mut(), false);
                    dw
                });
                let mut res = vec![dx, dw];
                if p.len() == 3 {
                    res.push(needs[2].then(|| {
                        let mut db = vec![T::zero(); out_f];
                        for row in g.data().chunks(out_f) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        Tensor::from_vec(p[2].shape(), db)
                    }));
                }
                res
            }),
        )
    }

    /// Adds a per-channel bias to `[B, C, rest..]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let (bsz, c, s) = bcs(self.value(x).shape());
        assert_eq!(self.value(b).numel(), c, "one bias per channel");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        debug_assert_eq!(out.numel(), bsz * c * s);
        self.push(
            out,
            &[x, b],
            Box::new(move |g, p, _, _| {
                let mut db = vec![T::zero(); c];
                for (i, chunk) in g.data().chunks(s).enumerate() {
                    db[i % c] += chunk.iter().copied().sum::<T>();
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(p[1].shape(), db))]
            }),
        )
    }

    /// Bias-free convolution over `[B, C, D, H, W]` (or `[B, C, H, W]` with a 2-D geometry).
    ///
    /// Weights are `[Co, Ci, kd, kh, kw]` (or `[Co, Ci, kh, kw]`).
    pub fn conv(&mut self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let two_d = xs.len() == 4;
        assert!(xs.len() == 4 || xs.len() == 5, "conv input must be 4-D or 5-D, got {xs:?}");
        if two_d {
            assert_eq!(geom.kernel[0], 1, "2-D input needs a 2-D geometry");
        }
        let (bsz, ci) = (xs[0], xs[1]);
        let dims = if two_d { [1, xs[2], xs[3]] } else { [xs[2], xs[3], xs[4]] };
        let co = ws[0];
        assert_eq!(ws[1], ci, "conv weight expects {} input channels, got {ci}", ws[1]);
        let ck: usize = ci * geom.kernel.iter().product::<usize>();
        assert_eq!(ws.iter().product::<usize>(), co * ck, "conv weight shape {ws:?} vs geometry");
        let od = geom.out_dims(dims);
        let l: usize = od.iter().product();
        let in_len = ci * dims.iter().product::<usize>();

        let mut out = vec![T::zero(); bsz * co * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ck * l] };
            for b in 0..bsz {
                let xb = &xv[b * in_len..(b + 1) * in_len];
                let colsb: &[T] = if geom.is_pointwise() {
                    xb
                } else {
                    im2col(xb, ci, dims, &geom, od, &mut cols);
                    &cols
                };
                gemm(co, ck, l, wv, Trans::No, colsb, Trans::No, &mut out[b * co * l..(b + 1) * co * l], false);
            }
        }
        let mut oshape = vec![bsz, co];
        if two_d {
            oshape.extend_from_slice(&od[1..]);
        } else {
            oshape.extend_from_slice(&od);
        }
        self.push(
            Tensor::from_vec(&oshape, out),
            &[x, w],
            Box::new(move |g, p, _, needs| {
                let (xv, wv) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut dx = needs[0].then(|| Tensor::zeros(p[0].shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(p[1].shape()));
                let pointwise = geom.is_pointwise();
                let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ck * l] };
                let mut dcols = vec![T::zero(); ck * l];
                for b in 0..bsz {
                    let gb = &gd[b * co * l..(b + 1) * co * l];
                    let xb = &xv[b * in_len..(b + 1) * in_len];
                    if let Some(dw) = dw.as_mut() {
                        let colsb: &[T] = if pointwise {
                            xb
                        } else {
                            im2col(xb, ci, dims, &geom, od, &mut cols);
                            &cols
                        };
                        gemm(co, l, ck, gb, Trans::No, colsb, Trans::Yes, dw.data_mut(), true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx.data_mut()[b * in_len..(b + 1) * in_len];
                        if pointwise {
                            gemm(ck, co, l, wv, Trans::Yes, gb, Trans::No, dxb, true);
                        } else {
                            gemm(ck, co, l, wv, Trans::Yes, gb, Trans::No, &mut dcols, false);
                            col2im(&dcols, ci, dims, &geom, od, dxb);
                        }
                    }
                }
                vec![dx, dw]
            }),
        )
    }

    /// Batch normalization with batch statistics over every axis except channels.
    ///
    /// Returns the output and the batch mean and unbiased variance per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<T>, Vec<T>) {
        let (bsz, c, s) = bcs(self.value(x).shape());
        let m = bsz * s;
        assert!(m > 1, "batch norm in training mode needs more than one value per channel");
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (i, chunk) in xv.chunks(s).enumerate() {
            mean[i % c] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for (i, chunk) in xv.chunks(s).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let unbiased: Vec<T> = var.iter().map(|v| T::lit(v / (m - 1) as f64)).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::lit(v)).collect();
        let invstd: Vec<T> = biased.iter().map(|v| T::lit(1.0 / (v + eps).sqrt())).collect();
        let out = affine_normalize(self.value(x), &mean_t, &invstd, self.value(gamma).data(), self.value(beta).data(), c, s);
        let (mu_c, inv_c) = (mean_t.clone(), invstd);
        let v = self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, needs| {
                let (xv, gam) = (p[0].data(), p[1].data());
                let gd = g.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, (xc, gc)) in xv.chunks(s).zip(gd.chunks(s)).enumerate() {
                    let ch = i % c;
                    for (&xi, &gi) in xc.iter().zip(gc) {
                        sum_dy[ch] += gi;
                        sum_dy_xhat[ch] += gi * (xi - mu_c[ch]) * inv_c[ch];
                    }
                }
                let dx = needs[0].then(|| {
                    let mf = T::lit(m as f64);
                    let mut dx = Tensor::zeros(p[0].shape());
                    for (i, ((dc, xc), gc)) in dx
                        .data_mut()
                        .chunks_mut(s)
                        .zip(xv.chunks(s))
                        .zip(gd.chunks(s))
                        .enumerate()
                    {
                        let ch = i % c;
                        let k = gam[ch] * inv_c[ch] / mf;
                        for ((d, &xi), &gi) in dc.iter_mut().zip(xc).zip(gc) {
                            let xhat = (xi - mu_c[ch]) * inv_c[ch];
                            *d = k * (mf * gi - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                        }
                    }
                    dx
                });
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(p[1].shape(), sum_dy_xhat.clone())),
                    needs[2].then(|| Tensor::from_vec(p[2].shape(), sum_dy.clone())),
                ]
            }),
        );
        (v, mean_t, unbiased)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Var {
        let (_, c, s) = bcs(self.value(x).shape());
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let mean = mean.to_vec();
        let out = affine_normalize(self.value(x), &mean, &invstd, self.value(gamma).data(), self.value(beta).data(), c, s);
        self.push(
            out,
            &[x, gamma, beta],
            Box::new(move |g, p, _, needs| {
                let (xv, gam) = (p[0].data(), p[1].data());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = needs[0].then(|| Tensor::zeros(p[0].shape()));
                for (i, (xc, gc)) in xv.chunks(s).zip(g.data().chunks(s)).enumerate() {
                    let ch = i % c;
                    for (&xi, &gi) in xc.iter().zip(gc) {
                        dgamma[ch] += gi * (xi - mean[ch]) * invstd[ch];
                        dbeta[ch] += gi;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let k = gam[ch] * invstd[ch];
                        for (d, &gi) in dx.data_mut()[i * s..(i + 1) * s].iter_mut().zip(gc) {
                            *d = gi * k;
                        }
                    }
                }
                vec![
                    dx,
                    needs[1].then(|| Tensor::from_vec(p[1].shape(), dgamma)),
                    needs[2].then(|| Tensor::from_vec(p[2].shape(), dbeta)),
                ]
            }),
        )
    }

    /// 2×2 max pooling with stride 2 on `[B, C, H, W]`, flooring odd sizes.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "max_pool2 expects [B, C, H, W]");
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        assert!(oh > 0 && ow > 0, "max_pool2 on a {h}x{w} map");
        let planes = xs[0] * xs[1];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] || (xv[idx].is_nan() && !xv[best].is_nan()) {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    arg.push(best);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[xs[0], xs[1], oh, ow], out),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut dx = Tensor::zeros(p[0].shape());
                let dd = dx.data_mut();
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    dd[a] += gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Mean over every axis after the channel axis: `[B, C, ..] → [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (bsz, c, s) = bcs(self.value(x).shape());
        let inv = T::lit(1.0 / s as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(s)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(
            Tensor::from_vec(&[bsz, c], out),
            &[x],
            Box::new(move |g, p, _, _| {
                let mut dx = Vec::with_capacity(bsz * c * s);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat(gv * inv).take(s));
                }
                vec![Some(Tensor::from_vec(p[0].shape(), dx))]
            }),
        )
    }

    /// Multiplies every channel of `[B, C, ..]` by its gate in `[B, C]`.
    pub fn channel_gate(&mut self, x: Var, gates: Var) -> Var {
        let (bsz, c, s) = bcs(self.value(x).shape());
        assert_eq!(self.value(gates).shape(), &[bsz, c], "one gate per (sample, channel)");
        let mut out = self.value(x).clone();
        let gv = self.value(gates).data().to_vec();
        for (chunk, &gate) in out.data_mut().chunks_mut(s).zip(&gv) {
            chunk.iter_mut().for_each(|v| *v *= gate);
        }
        self.push(
            out,
            &[x, gates],
            Box::new(move |g, p, _, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = g.clone();
                    for (chunk, &gate) in dx.data_mut().chunks_mut(s).zip(p[1].data()) {
                        chunk.iter_mut().for_each(|v| *v *= gate);
                    }
                    dx
                });
                let dg = needs[1].then(|| {
                    let d: Vec<T> = g
                        .data()
                        .chunks(s)
                        .zip(p[0].data().chunks(s))
                        .map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u * v).sum())
                        .collect();
                    Tensor::from_vec(p[1].shape(), d)
                });
                vec![dx, dg]
            }),
        )
    }

    /// Pairs every query with every proxy on a new depth axis.
    ///
    /// `queries: [Q, C, H, W]`, `proxies: [N, C, H, W]` → `[Q·N, C, 2, H, W]` with
    /// depth 0 holding the query and depth 1 the proxy; row `q·N + n` is pair `(q, n)`.
    pub fn pair_stack(&mut self, queries: Var, proxies: Var) -> Var {
        let (qs, ps) = (self.value(queries).shape().to_vec(), self.value(proxies).shape().to_vec());
        assert_eq!(qs.len(), 4, "pair_stack expects [Q, C, H, W] feature maps");
        assert_eq!(qs[1..], ps[1..], "query and proxy maps must share a shape");
        let (nq, np, c, hw) = (qs[0], ps[0], qs[1], qs[2] * qs[3]);
        let (qv, pv) = (self.value(queries).data(), self.value(proxies).data());
        let mut out = Vec::with_capacity(nq * np * c * 2 * hw);
        for q in 0..nq {
            for n in 0..np {
                for ch in 0..c {
                    let qo = (q * c + ch) * hw;
                    let po = (n * c + ch) * hw;
                    out.extend_from_slice(&qv[qo..qo + hw]);
                    out.extend_from_slice(&pv[po..po + hw]);
                }
            }
        }
        self.push(
            Tensor::from_vec(&[nq * np, c, 2, qs[2], qs[3]], out),
            &[queries, proxies],
            Box::new(move |g, p, _, _| {
                let gd = g.data();
                let mut dq = Tensor::zeros(p[0].shape());
                let mut dp = Tensor::zeros(p[1].shape());
                for q in 0..nq {
                    for n in 0..np {
                        for ch in 0..c {
                            let go = (((q * np + n) * c + ch) * 2) * hw;
                            let qo = (q * c + ch) * hw;
                            let po = (n * c + ch) * hw;
                            for i in 0..hw {
                                dq.data_mut()[qo + i] += gd[go + i];
                                dp.data_mut()[po + i] += gd[go + hw + i];
                            }
                        }
                    }
                }
                vec![Some(dq), Some(dp)]
            }),
        )
    }

    /// Pairs every query with every proxy by channel concatenation:
    /// `[Q, C, H, W] × [N, C, H, W] → [Q·N, 2C, H, W]`, query channels first.
    pub fn pair_concat(&mut self, queries: Var, proxies: Var) -> Var {
        let (qs, ps) = (self.value(queries).shape().to_vec(), self.value(proxies).shape().to_vec());
        assert_eq!(qs[1..], ps[1..], "query and proxy maps must share a shape");
        let (nq, np) = (qs[0], ps[0]);
        let len: usize = qs[1..].iter().product();
        let (qv, pv) = (self.value(queries).data(), self.value(proxies).data());
        let mut out = Vec::with_capacity(nq * np * 2 * len);
        for q in 0..nq {
            for n in 0..np {
                out.extend_from_slice(&qv[q * len..(q + 1) * len]);
                out.extend_from_slice(&pv[n * len..(n + 1) * len]);
            }
        }
        let mut shape = qs.clone();
        shape[0] = nq * np;
        shape[1] *= 2;
        self.push(
            Tensor::from_vec(&shape, out),
            &[queries, proxies],
            Box::new(move |g, p, _, _| {
                let gd = g.data();
                let mut dq = Tensor::zeros(p[0].shape());
                let mut dp = Tensor::zeros(p[1].shape());
                for q in 0..nq {
                    for n in 0..np {
                        let go = (q * np + n) * 2 * len;
                        for i in 0..len {
                            dq.data_mut()[q * len + i] += gd[go + i];
                            dp.data_mut()[n * len + i] += gd[go + len + i];
                        }
                    }
                }
                vec![Some(dq), Some(dp)]
            }),
        )
    }

    /// Negative squared Euclidean distance between flattened rows: `[Q, N]`.
    pub fn neg_sq_dist(&mut self, queries: Var, protos: Var) -> Var {
        let (qv, pv) = (self.value(queries), self.value(protos));
        let (nq, np, d) = (qv.dim(0), pv.dim(0), qv.row_len());
        assert_eq!(pv.row_len(), d, "distance between rows of different length");
        let mut out = Vec::with_capacity(nq * np);
        for q in 0..nq {
            for n in 0..np {
                let s: T = qv.row(q).iter().zip(pv.row(n)).map(|(&a, &b)| (a - b) * (a - b)).sum();
                out.push(-s);
            }
        }
        self.push(
            Tensor::from_vec(&[nq, np], out),
            &[queries, protos],
            Box::new(move |g, p, _, _| {
                let mut dq = Tensor::zeros(p[0].shape());
                let mut dp = Tensor::zeros(p[1].shape());
                let two = T::lit(2.0);
                for q in 0..nq {
                    for n in 0..np {
                        let gv = g.data()[q * np + n] * two;
                        for i in 0..d {
                            let diff = p[0].data()[q * d + i] - p[1].data()[n * d + i];
                            dq.data_mut()[q * d + i] -= gv * diff;
                            dp.data_mut()[n * d + i] += gv * diff;
                        }
                    }
                }
                vec![Some(dq), Some(dp)]
            }),
        )
    }

    /// Cosine similarity between flattened rows: `[Q, N]`. Rows must be non-zero.
    pub fn cosine_sim(&mut self, queries: Var, protos: Var) -> Var {
        let (qv, pv) = (self.value(queries), self.value(protos));
        let (nq, np, d) = (qv.dim(0), pv.dim(0), qv.row_len());
        assert_eq!(pv.row_len(), d, "similarity between rows of different length");
        let norm = |r: &[T]| r.iter().map(|&v| v * v).sum::<T>().sqrt();
        let qn: Vec<T> = (0..nq).map(|q| norm(qv.row(q))).collect();
        let pn: Vec<T> = (0..np).map(|n| norm(pv.row(n))).collect();
        let mut out = Vec::with_capacity(nq * np);
        for q in 0..nq {
            for n in 0..np {
                let dot: T = qv.row(q).iter().zip(pv.row(n)).map(|(&a, &b)| a * b).sum();
                out.push(dot / (qn[q] * pn[n]));
            }
        }
        self.push(
            Tensor::from_vec(&[nq, np], out),
            &[queries, protos],
            Box::new(move |g, p, y, _| {
                let mut dq = Tensor::zeros(p[0].shape());
                let mut dp = Tensor::zeros(p[1].shape());
                for q in 0..nq {
                    for n in 0..np {
                        let gv = g.data()[q * np + n];
                        let cos = y.data()[q * np + n];
                        let inv = T::one() / (qn[q] * pn[n]);
                        for i in 0..d {
                            let (a, b) = (p[0].data()[q * d + i], p[1].data()[n * d + i]);
                            dq.data_mut()[q * d + i] += gv * (b * inv - cos * a / (qn[q] * qn[q]));
                            dp.data_mut()[n * d + i] += gv * (a * inv - cos * b / (pn[n] * pn[n]));
                        }
                    }
                }
                vec![Some(dq), Some(dp)]
            }),
        )
    }
}

fn affine_normalize<T: Float>(x: &Tensor<T>, mean: &[T], invstd: &[T], gamma: &[T], beta: &[T], c: usize, s: usize) -> Tensor<T> {
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(s).enumerate() {
        let ch = i % c;
        let (mu, k, b) = (mean[ch], invstd[ch] * gamma[ch], beta[ch]);
        chunk.iter_mut().for_each(|v| *v = (*v - mu) * k + b);
    }
    out
}

/// Sum in ascending order, so any permutation of `values` gives the same bits.
fn order_free_sum<T: Float>(values: impl Iterator<Item = T>) -> T {
    let mut v: Vec<T> = values.collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.into_iter().fold(T::zero(), |acc, x| acc + x)
}

fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + order_free_sum(row.iter().map(|&v| (v - m).exp())).ln()
}

/// Numerically stable row-wise softmax of a `[R, C]` tensor. Permuting a row's
/// entries permutes the output exactly.
pub fn softmax_rows<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.rank(), 2, "softmax_rows expects a matrix");
    let c = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let sum = order_free_sum(row.iter().copied());
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv2d(x: &[f64], ci: usize, h: usize, w: usize, wt: &[f64], co: usize, k: usize, pad: usize, stride: usize) -> Vec<f64> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for a in 0..k {
                            for b in 0..k {
                                let y = (i * stride + a) as isize - pad as isize;
                                let z = (j * stride + b) as isize - pad as isize;
                                if y >= 0 && z >= 0 && (y as usize) < h && (z as usize) < w {
                                    s += x[(c * h + y as usize) * w + z as usize] * wt[((o * ci + c) * k + a) * k + b];
                                }
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
        let wt: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut tape = Tape::<f64>::no_grad();
            let xv = tape.constant(Tensor::from_vec(&[1, 2, 5, 6], x.clone()));
            let wv = tape.constant(Tensor::from_vec(&[3, 2, 3, 3], wt.clone()));
            let y = tape.conv(xv, wv, ConvGeom::square(3, stride, pad));
            let want = naive_conv2d(&x, 2, 5, 6, &wt, 3, 3, pad, stride);
            assert_eq!(tape.value(y).data().len(), want.len());
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_pool_floors_odd_maps() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f32).collect()));
        let y = tape.max_pool2(x);
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -1e3, 0.0, 1e3]);
        let s = softmax_rows(&t);
        for row in s.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
