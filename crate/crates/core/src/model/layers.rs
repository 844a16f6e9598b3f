//! Layers with explicit forward/backward passes. Forward passes are pure over
//! the weights; training-mode passes return a cache consumed by `backward`.

use std::sync::Arc;

use rayon::prelude::*;

use super::nn::{conv_out_size, dot, matmul, Scalar, Tensor};

pub type ParamId = usize;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    LinearWeight,
    LinearBias,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
pub struct Registry {
    pub specs: Vec<ParamSpec>,
}

impl Registry {
    pub fn register(&mut self, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> ParamId {
        self.specs.push(ParamSpec {
            name,
            shape,
            role,
            fan_in,
        });
        self.specs.len() - 1
    }
}

/// Parameter (or gradient) values, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights<F> {
    pub tensors: Vec<Vec<F>>,
}

impl<F: Scalar> Weights<F> {
    pub fn zeros_like(specs: &[ParamSpec]) -> Self {
        Self {
            tensors: specs.iter().map(|s| vec![F::zero(); s.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.tensors[id]
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.iter_mut().for_each(|v| *v = F::zero());
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
}

impl Conv2d {
    pub fn new(reg: &mut Registry, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        let weight = reg.register(
            format!("{name}.weight"),
            vec![out_c, in_c, k, k],
            ParamRole::ConvWeight,
            in_c * k * k,
        );
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            weight,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out_size(h, self.k, self.stride, self.pad),
            conv_out_size(w, self.k, self.stride, self.pad),
        )
    }

    #[allow(clippy::too_many_arguments)]
    /// Writes row `(c, ki, kj)` of the im2col matrix, restricted to output rows
    /// `[oh0, oh1)`, into `buf`. `xc` is input channel `c`.
    #[allow(clippy::too_many_arguments)]
    fn gather_row<F: Scalar>(&self, xc: &[F], h: usize, w: usize, wo: usize, ki: usize, kj: usize, oh0: usize, oh1: usize, buf: &mut [F]) {
        let (s, p) = (self.stride, self.pad);
        let (lo, hi) = valid_outputs(w, wo, s, kj, p);
        for oh in oh0..oh1 {
            let dst = &mut buf[(oh - oh0) * wo..(oh - oh0 + 1) * wo];
            let ih = (oh * s + ki).wrapping_sub(p);
            if ih >= h || lo >= hi {
                dst.fill(F::zero());
                continue;
            }
            let src = &xc[ih * w..(ih + 1) * w];
            dst[..lo].fill(F::zero());
            dst[hi..].fill(F::zero());
            let first = lo * s + kj - p;
            if s == 1 {
                dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
            } else {
                for (d, &v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                    *d = v;
                }
            }
        }
    }

    /// Adjoint of [`Self::gather_row`]: adds `buf` back into input channel `dxc`.
    #[allow(clippy::too_many_arguments)]
    fn scatter_row<F: Scalar>(&self, buf: &[F], h: usize, w: usize, wo: usize, ki: usize, kj: usize, oh0: usize, oh1: usize, dxc: &mut [F]) {
        let (s, p) = (self.stride, self.pad);
        let (lo, hi) = valid_outputs(w, wo, s, kj, p);
        if lo >= hi {
            return;
        }
        for oh in oh0..oh1 {
            let ih = (oh * s + ki).wrapping_sub(p);
            if ih >= h {
                continue;
            }
            let dst = &mut dxc[ih * w + lo * s + kj - p..(ih + 1) * w];
            let src = &buf[(oh - oh0) * wo + lo..(oh - oh0) * wo + hi];
            for (d, &v) in dst.iter_mut().step_by(s).zip(src) {
                *d += v;
            }
        }
    }

    fn im2col<F: Scalar>(&self, x: &[F], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [F]) {
        let (k, plane) = (self.k, ho * wo);
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let xc = &x[c * h * w..(c + 1) * h * w];
                    self.gather_row(xc, h, w, wo, ki, kj, 0, ho, &mut cols[r * plane..(r + 1) * plane]);
                }
            }
        }
    }

    fn col2im<F: Scalar>(&self, cols: &[F], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [F]) {
        let (k, plane) = (self.k, ho * wo);
        for c in 0..self.in_c {
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let dxc = &mut dx[c * h * w..(c + 1) * h * w];
                    self.scatter_row(&cols[r * plane..(r + 1) * plane], h, w, wo, ki, kj, 0, ho, dxc);
                }
            }
        }
    }

    /// Narrow layers skip the materialized im2col matrix: each row is built in a
    /// small buffer and applied to every output channel while it is cache-hot.
    fn is_narrow(&self) -> bool {
        self.out_c <= NARROW_MAX_OUT
    }

    fn rows_per_tile(&self, ho: usize, wo: usize) -> usize {
        (TILE_ELEMS / (self.out_c * wo).max(1)).clamp(1, ho)
    }

    fn forward_narrow<F: Scalar>(&self, wt: &[F], xi: &[F], h: usize, w: usize, ho: usize, wo: usize, o: &mut [F], buf: &mut Vec<F>) {
        let (k, kk, plane) = (self.k, self.in_c * self.k * self.k, ho * wo);
        let rpt = self.rows_per_tile(ho, wo);
        buf.resize(rpt * wo, F::zero());
        for oh0 in (0..ho).step_by(rpt) {
            let oh1 = (oh0 + rpt).min(ho);
            let tl = (oh1 - oh0) * wo;
            for c in 0..self.in_c {
                let xc = &xi[c * h * w..(c + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let r = (c * k + ki) * k + kj;
                        self.gather_row(xc, h, w, wo, ki, kj, oh0, oh1, &mut buf[..tl]);
                        for m in 0..self.out_c {
                            let wv = wt[m * kk + r];
                            let dst = &mut o[m * plane + oh0 * wo..][..tl];
                            for (d, &v) in dst.iter_mut().zip(&buf[..tl]) {
                                *d += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_narrow<F: Scalar>(
        &self,
        wt: &[F],
        xi: &[F],
        dyi: &[F],
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
        dw: &mut [F],
        mut dxi: Option<&mut [F]>,
    ) {
        let (k, kk, plane) = (self.k, self.in_c * self.k * self.k, ho * wo);
        let rpt = self.rows_per_tile(ho, wo);
        let mut buf = vec![F::zero(); rpt * wo];
        let mut dbuf = vec![F::zero(); rpt * wo];
        for oh0 in (0..ho).step_by(rpt) {
            let oh1 = (oh0 + rpt).min(ho);
            let tl = (oh1 - oh0) * wo;
            for c in 0..self.in_c {
                let xc = &xi[c * h * w..(c + 1) * h * w];
                for ki in 0..k {
                    for kj in 0..k {
                        let r = (c * k + ki) * k + kj;
                        self.gather_row(xc, h, w, wo, ki, kj, oh0, oh1, &mut buf[..tl]);
                        for m in 0..self.out_c {
                            let g = &dyi[m * plane + oh0 * wo..][..tl];
                            dw[m * kk + r] += dot(g, &buf[..tl]);
                        }
                        if let Some(dx) = dxi.as_deref_mut() {
                            let db = &mut dbuf[..tl];
                            db.fill(F::zero());
                            for m in 0..self.out_c {
                                let wv = wt[m * kk + r];
                                let g = &dyi[m * plane + oh0 * wo..][..tl];
                                for (d, &v) in db.iter_mut().zip(g) {
                                    *d += wv * v;
                                }
                            }
                            self.scatter_row(db, h, w, wo, ki, kj, oh0, oh1, &mut dx[c * h * w..(c + 1) * h * w]);
                        }
                    }
                }
            }
        }
    }

    pub fn forward<F: Scalar>(&self, weights: &Weights<F>, x: &Tensor<F>) -> Tensor<F> {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let kk = self.in_c * self.k * self.k;
        let plane = ho * wo;
        let wt = weights.get(self.weight);
        let mut out = Tensor::zeros(x.n, self.out_c, ho, wo);
        let out_len = out.sample_len();
        out.data
            .par_chunks_mut(out_len)
            .zip(x.data.par_chunks(x.sample_len()))
            .for_each_init(Vec::new, |cols, (o, xi)| {
                if self.is_narrow() {
                    self.forward_narrow(wt, xi, x.h, x.w, ho, wo, o, cols);
                } else if self.is_pointwise() {
                    matmul(self.out_c, kk, plane, wt, false, xi, false, F::zero(), o);
                } else {
                    cols.resize(kk * plane, F::zero());
                    self.im2col(xi, x.h, x.w, ho, wo, cols);
                    matmul(self.out_c, kk, plane, wt, false, cols, false, F::zero(), o);
                }
            });
        out
    }

    /// Accumulates the weight gradient into `grads` and returns the input gradient
    /// when `need_dx`.
    pub fn backward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
        grads: &mut Weights<F>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let (ho, wo) = (dy.h, dy.w);
        let kk = self.in_c * self.k * self.k;
        let plane = ho * wo;
        let wt = weights.get(self.weight);
        let per_sample: Vec<(Vec<F>, Option<Vec<F>>)> = (0..x.n)
            .into_par_iter()
            .map(|i| {
                let xi = x.sample(i);
                let dyi = dy.sample(i);
                let mut dw = vec![F::zero(); self.out_c * kk];
                if self.is_narrow() {
                    let mut dxi = need_dx.then(|| vec![F::zero(); x.sample_len()]);
                    self.backward_narrow(wt, xi, dyi, x.h, x.w, ho, wo, &mut dw, dxi.as_deref_mut());
                    return (dw, dxi);
                }
                let mut owned_cols = Vec::new();
                let cols: &[F] = if self.is_pointwise() {
                    xi
                } else {
                    owned_cols.resize(kk * plane, F::zero());
                    self.im2col(xi, x.h, x.w, ho, wo, &mut owned_cols);
                    &owned_cols
                };
                matmul(self.out_c, plane, kk, dyi, false, cols, true, F::zero(), &mut dw);
                let dx = need_dx.then(|| {
                    let mut dcols = vec![F::zero(); kk * plane];
                    matmul(kk, self.out_c, plane, wt, true, dyi, false, F::zero(), &mut dcols);
                    if self.is_pointwise() {
                        dcols
                    } else {
                        let mut dxi = vec![F::zero(); x.sample_len()];
                        self.col2im(&dcols, x.h, x.w, ho, wo, &mut dxi);
                        dxi
                    }
                });
                (dw, dx)
            })
            .collect();
        let gw = grads.get_mut(self.weight);
        let mut dx_data = need_dx.then(|| Vec::with_capacity(x.data.len()));
        for (dw, dxi) in per_sample {
            for (g, d) in gw.iter_mut().zip(&dw) {
                *g += *d;
            }
            if let (Some(buf), Some(d)) = (dx_data.as_mut(), dxi) {
                buf.extend_from_slice(&d);
            }
        }
        dx_data.map(|d| Tensor::from_vec(x.n, x.c, x.h, x.w, d))
    }
}

/// Widest convolution handled by the fused row-at-a-time path.
const NARROW_MAX_OUT: usize = 32;
/// Target size (elements) of the output tile the fused path keeps hot.
const TILE_ELEMS: usize = 8192;

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub c: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(reg: &mut Registry, name: &str, c: usize) -> Self {
        Self {
            c,
            gamma: reg.register(format!("{name}.gamma"), vec![c], ParamRole::BnGamma, c),
            beta: reg.register(format!("{name}.beta"), vec![c], ParamRole::BnBeta, c),
            running_mean: reg.register(format!("{name}.running_mean"), vec![c], ParamRole::BnRunningMean, c),
            running_var: reg.register(format!("{name}.running_var"), vec![c], ParamRole::BnRunningVar, c),
        }
    }
}

/// Batch statistics observed by a training-mode pass, applied to the running
/// estimates after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<F>,
    pub unbiased_var: Vec<F>,
}

#[derive(Debug)]
pub struct ConvBnReluCache<F> {
    input: Arc<Tensor<F>>,
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

/// Convolution (no bias) followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(reg: &mut Registry, name: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), in_c, out_c, k, stride),
            bn: BatchNorm::new(reg, &format!("{name}.bn"), out_c),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_c
    }

    pub fn forward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        x: &Arc<Tensor<F>>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<F>>,
    ) -> (Tensor<F>, Option<ConvBnReluCache<F>>) {
        let mut z = self.conv.forward(weights, x);
        let gamma = weights.get(self.bn.gamma);
        let beta = weights.get(self.bn.beta);
        let eps = F::from_f64_lossy(BN_EPS);
        let plane = z.plane();
        let c = z.c;
        match mode {
            Mode::Eval => {
                let rm = weights.get(self.bn.running_mean);
                let rv = weights.get(self.bn.running_var);
                for (idx, chunk) in z.data.chunks_mut(plane).enumerate() {
                    let ch = idx % c;
                    let scale = gamma[ch] / (rv[ch] + eps).sqrt();
                    let shift = beta[ch] - rm[ch] * scale;
                    for v in chunk {
                        *v = (*v * scale + shift).max(F::zero());
                    }
                }
                (z, None)
            }
            Mode::Train => {
                let count = z.n * plane;
                let cnt = F::from_usize(count).unwrap();
                let mut mean = vec![F::zero(); c];
                for (idx, chunk) in z.data.chunks(plane).enumerate() {
                    mean[idx % c] += chunk.iter().copied().sum::<F>();
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                let mut var = vec![F::zero(); c];
                for (idx, chunk) in z.data.chunks(plane).enumerate() {
                    let m = mean[idx % c];
                    var[idx % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<F>();
                }
                var.iter_mut().for_each(|v| *v /= cnt);
                let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
                let mut y = Tensor::zeros(z.n, c, z.h, z.w);
                for (idx, (zc, yc)) in z.data.chunks_mut(plane).zip(y.data.chunks_mut(plane)).enumerate() {
                    let ch = idx % c;
                    for (zv, yv) in zc.iter_mut().zip(yc.iter_mut()) {
                        *zv = (*zv - mean[ch]) * inv_std[ch];
                        *yv = (gamma[ch] * *zv + beta[ch]).max(F::zero());
                    }
                }
                let unbias = if count > 1 {
                    cnt / (cnt - F::one())
                } else {
                    F::one()
                };
                updates.push(BnUpdate {
                    running_mean: self.bn.running_mean,
                    running_var: self.bn.running_var,
                    mean,
                    unbiased_var: var.iter().map(|&v| v * unbias).collect(),
                });
                let cache = ConvBnReluCache {
                    input: Arc::clone(x),
                    xhat: z,
                    inv_std,
                };
                (y, Some(cache))
            }
        }
    }

    pub fn backward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        cache: ConvBnReluCache<F>,
        mut dy: Tensor<F>,
        grads: &mut Weights<F>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let gamma = weights.get(self.bn.gamma).to_vec();
        let beta = weights.get(self.bn.beta);
        let xhat = &cache.xhat;
        let plane = xhat.plane();
        let c = xhat.c;
        let mut dbeta = vec![F::zero(); c];
        let mut dgamma = vec![F::zero(); c];
        for (idx, (g, xh)) in dy.data.chunks_mut(plane).zip(xhat.data.chunks(plane)).enumerate() {
            let ch = idx % c;
            for (gv, &xv) in g.iter_mut().zip(xh) {
                if gamma[ch] * xv + beta[ch] <= F::zero() {
                    *gv = F::zero();
                }
                dbeta[ch] += *gv;
                dgamma[ch] += *gv * xv;
            }
        }
        let cnt = F::from_usize(xhat.n * plane).unwrap();
        for (idx, (g, xh)) in dy.data.chunks_mut(plane).zip(xhat.data.chunks(plane)).enumerate() {
            let ch = idx % c;
            let k = gamma[ch] * cache.inv_std[ch] / cnt;
            for (gv, &xv) in g.iter_mut().zip(xh) {
                *gv = k * (cnt * *gv - dbeta[ch] - xv * dgamma[ch]);
            }
        }
        for (a, b) in grads.get_mut(self.bn.gamma).iter_mut().zip(&dgamma) {
            *a += *b;
        }
        for (a, b) in grads.get_mut(self.bn.beta).iter_mut().zip(&dbeta) {
            *a += *b;
        }
        self.conv.backward(weights, &cache.input, &dy, grads, need_dx)
    }
}

/// Output positions `[lo, hi)` along one axis whose input index
/// `o * stride + offset - pad` falls inside `[0, n)`.
fn valid_outputs(n: usize, n_out: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    let hi = if n + pad > offset { ((n + pad - offset - 1) / stride + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

/// Input range covered by pooling window `o`, clipped to `[0, n)`.
fn window(o: usize, stride: usize, pad: usize, k: usize, n: usize) -> (usize, usize) {
    let start = o * stride;
    (start.saturating_sub(pad), (start + k).saturating_sub(pad).min(n))
}

/// 2x2, stride 2, no padding; same first-maximum tie rule as the general path.
fn pool2x2<F: Scalar>(xp: &[F], w: usize, ho: usize, wo: usize, o: &mut [F], a: &mut [u32]) {
    for oh in 0..ho {
        let base = 2 * oh * w;
        for ow in 0..wo {
            let i0 = base + 2 * ow;
            let mut best = xp[i0];
            let mut best_idx = i0;
            for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                if xp[idx] > best {
                    best = xp[idx];
                    best_idx = idx;
                }
            }
            o[oh * wo + ow] = best;
            a[oh * wo + ow] = best_idx as u32;
        }
    }
}

/// Max pooling with implicit `-inf` padding.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    pub fn forward<F: Scalar>(&self, x: &Tensor<F>) -> (Tensor<F>, Vec<u32>) {
        let ho = conv_out_size(x.h, self.k, self.stride, self.pad);
        let wo = conv_out_size(x.w, self.k, self.stride, self.pad);
        let mut out = Tensor::zeros(x.n, x.c, ho, wo);
        let mut arg = vec![0u32; out.data.len()];
        let (h, w) = (x.h, x.w);
        let in_plane = x.plane();
        let out_plane = ho * wo;
        out.data
            .par_chunks_mut(out_plane)
            .zip(arg.par_chunks_mut(out_plane))
            .zip(x.data.par_chunks(in_plane))
            .for_each(|((o, a), xp)| {
                if (self.k, self.stride, self.pad) == (2, 2, 0) {
                    pool2x2(xp, w, ho, wo, o, a);
                    return;
                }
                for oh in 0..ho {
                    let (h0, h1) = window(oh, self.stride, self.pad, self.k, h);
                    for ow in 0..wo {
                        let (w0, w1) = window(ow, self.stride, self.pad, self.k, w);
                        let mut best = F::neg_infinity();
                        let mut best_idx = 0u32;
                        for ih in h0..h1 {
                            let row = &xp[ih * w..(ih + 1) * w];
                            for (iw, &v) in row.iter().enumerate().take(w1).skip(w0) {
                                if v > best {
                                    best = v;
                                    best_idx = (ih * w + iw) as u32;
                                }
                            }
                        }
                        o[oh * wo + ow] = best;
                        a[oh * wo + ow] = best_idx;
                    }
                }
            });
        (out, arg)
    }

    pub fn backward<F: Scalar>(&self, dy: &Tensor<F>, arg: &[u32], in_h: usize, in_w: usize) -> Tensor<F> {
        let mut dx = Tensor::zeros(dy.n, dy.c, in_h, in_w);
        let in_plane = in_h * in_w;
        let out_plane = dy.plane();
        for ((dxp, dyp), ap) in dx
            .data
            .chunks_mut(in_plane)
            .zip(dy.data.chunks(out_plane))
            .zip(arg.chunks(out_plane))
        {
            for (g, &i) in dyp.iter().zip(ap) {
                dxp[i as usize] += *g;
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub enum Branch {
    Conv(ConvBnRelu),
    Reduced(ConvBnRelu, ConvBnRelu),
    Pool(MaxPool, ConvBnRelu),
}

#[derive(Debug)]
pub enum BranchCache<F> {
    Conv(ConvBnReluCache<F>),
    Reduced(ConvBnReluCache<F>, ConvBnReluCache<F>),
    Pool(Vec<u32>, usize, usize, ConvBnReluCache<F>),
}

impl Branch {
    fn out_channels(&self) -> usize {
        match self {
            Branch::Conv(c) | Branch::Reduced(_, c) | Branch::Pool(_, c) => c.out_channels(),
        }
    }

    fn forward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        x: &Arc<Tensor<F>>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<F>>,
    ) -> (Tensor<F>, Option<BranchCache<F>>) {
        match self {
            Branch::Conv(c) => {
                let (y, cache) = c.forward(weights, x, mode, updates);
                (y, cache.map(BranchCache::Conv))
            }
            Branch::Reduced(r, c) => {
                let (mid, c1) = r.forward(weights, x, mode, updates);
                let (y, c2) = c.forward(weights, &Arc::new(mid), mode, updates);
                (y, c1.zip(c2).map(|(a, b)| BranchCache::Reduced(a, b)))
            }
            Branch::Pool(p, c) => {
                let (pooled, arg) = p.forward(x);
                let (y, c1) = c.forward(weights, &Arc::new(pooled), mode, updates);
                (y, c1.map(|cc| BranchCache::Pool(arg, x.h, x.w, cc)))
            }
        }
    }

    fn backward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        cache: BranchCache<F>,
        dy: Tensor<F>,
        grads: &mut Weights<F>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        match (self, cache) {
            (Branch::Conv(c), BranchCache::Conv(cc)) => c.backward(weights, cc, dy, grads, need_dx),
            (Branch::Reduced(r, c), BranchCache::Reduced(c1, c2)) => {
                let dmid = c.backward(weights, c2, dy, grads, true).expect("input gradient");
                r.backward(weights, c1, dmid, grads, need_dx)
            }
            (Branch::Pool(p, c), BranchCache::Pool(arg, h, w, cc)) => {
                let dpooled = c.backward(weights, cc, dy, grads, true).expect("input gradient");
                need_dx.then(|| p.backward(&dpooled, &arg, h, w))
            }
            _ => unreachable!("branch cache does not match branch kind"),
        }
    }
}

/// Four parallel branches (1x1, 3x3, 5x5, pool + 1x1 projection) whose outputs
/// are concatenated along channels. The naive variant applies the 3x3 and 5x5
/// convolutions directly; the standard variant inserts 1x1 reductions first.
#[derive(Debug, Clone)]
pub struct Inception {
    pub branches: Vec<Branch>,
    pub out_c: usize,
}

impl Inception {
    pub fn new(reg: &mut Registry, name: &str, in_c: usize, out_c: usize, stride: usize, naive: bool) -> Self {
        assert!(out_c % 4 == 0, "inception output width must split into four branches");
        let bw = out_c / 4;
        let reduce = (bw / 2).max(1);
        let mut branches = vec![Branch::Conv(ConvBnRelu::new(reg, &format!("{name}.b1"), in_c, bw, 1, stride))];
        for k in [3usize, 5] {
            let bname = format!("{name}.b{k}");
            branches.push(if naive {
                Branch::Conv(ConvBnRelu::new(reg, &bname, in_c, bw, k, stride))
            } else {
                Branch::Reduced(
                    ConvBnRelu::new(reg, &format!("{bname}_reduce"), in_c, reduce, 1, 1),
                    ConvBnRelu::new(reg, &bname, reduce, bw, k, stride),
                )
            });
        }
        branches.push(Branch::Pool(
            MaxPool { k: 3, stride, pad: 1 },
            ConvBnRelu::new(reg, &format!("{name}.pool_proj"), in_c, bw, 1, 1),
        ));
        Self { branches, out_c }
    }

    pub fn forward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        x: &Arc<Tensor<F>>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<F>>,
    ) -> (Tensor<F>, Option<Vec<BranchCache<F>>>) {
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut caches = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let (y, c) = b.forward(weights, x, mode, updates);
            outs.push(y);
            caches.push(c);
        }
        let (n, h, w) = (outs[0].n, outs[0].h, outs[0].w);
        let mut out = Tensor::zeros(n, self.out_c, h, w);
        let plane = h * w;
        for i in 0..n {
            let mut offset = i * self.out_c * plane;
            for o in &outs {
                let src = o.sample(i);
                out.data[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let caches = if mode == Mode::Train {
            Some(caches.into_iter().map(|c| c.expect("train cache")).collect())
        } else {
            None
        };
        (out, caches)
    }

    pub fn backward<F: Scalar>(
        &self,
        weights: &Weights<F>,
        caches: Vec<BranchCache<F>>,
        dy: Tensor<F>,
        grads: &mut Weights<F>,
    ) -> Tensor<F> {
        let plane = dy.plane();
        let mut dx: Option<Tensor<F>> = None;
        let mut ch_offset = 0;
        for (b, cache) in self.branches.iter().zip(caches) {
            let bc = b.out_channels();
            let mut part = Tensor::zeros(dy.n, bc, dy.h, dy.w);
            for i in 0..dy.n {
                let src = &dy.data[(i * self.out_c + ch_offset) * plane..][..bc * plane];
                part.data[i * bc * plane..(i + 1) * bc * plane].copy_from_slice(src);
            }
            ch_offset += bc;
            let d = b.backward(weights, cache, part, grads, true).expect("input gradient");
            match dx.as_mut() {
                None => dx = Some(d),
                Some(acc) => acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += *b),
            }
        }
        dx.expect("at least one branch")
    }
}
