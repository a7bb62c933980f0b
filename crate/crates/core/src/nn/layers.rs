//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer keeps only [`ParamId`] handles; values and gradients are flat
//! slices owned by the network. `forward` returns the output plus whatever
//! the matching `backward` needs, and `backward` accumulates into the
//! gradient slice and returns the gradient with respect to its input.

use rand::Rng;

use super::params::{Init, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{MatView, Real, Tensor};

const NORM_EPS: f64 = 1e-5;

/// Largest group count not above 8 that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    kernel: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvCache<F> {
    /// Padded input, im2col matrix or plain input depending on the layer.
    input: Vec<F>,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

#[allow(clippy::too_many_arguments)]
impl Conv2d {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        kind: ParamKind,
        zero_init: bool,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::FanIn(fan_in)
        };
        let weight = store.add(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            kind,
            init,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), &[cout], ParamKind::Bias, Init::Zeros, rng);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Stride-1 kernels wider than one pixel run as one GEMM per tap over
    /// shifted views of a zero-padded copy of the input.
    fn is_shifted(&self) -> bool {
        self.kernel > 1 && self.stride == 1
    }

    /// Row width and per-channel length of the padded input buffer. The
    /// extra tail keeps the view of the last tap inside the channel.
    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let wp = w + 2 * pad;
        (wp, (h + 2 * pad) * wp + 2 * pad)
    }

    fn tap_weights(&self, tap: usize) -> MatView {
        let kk = self.kernel * self.kernel;
        MatView {
            offset: tap,
            rows: self.cout,
            cols: self.cin,
            row_stride: self.cin * kk,
            col_stride: kk,
        }
    }

    fn tap_input(&self, ky: usize, kx: usize, h: usize, wp: usize, plane: usize) -> MatView {
        MatView {
            offset: ky * wp + kx,
            rows: self.cin,
            cols: h * wp,
            row_stride: plane,
            col_stride: 1,
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<(Tensor<F>, ConvCache<F>)> {
        if x.channels() != self.cin {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let (oh, ow) = self.out_dims(h, w);
        let n = oh * ow;
        let k = self.cin * self.kernel * self.kernel;
        let (input, mut y) = if self.is_shifted() {
            let pad = self.kernel / 2;
            let (wp, plane) = self.padded_dims(h, w);
            let mut xp = vec![F::zero(); self.cin * plane];
            for c in 0..self.cin {
                for (row, src) in x.plane(c).chunks_exact(w).enumerate() {
                    let at = c * plane + (row + pad) * wp + pad;
                    xp[at..at + w].copy_from_slice(src);
                }
            }
            let n_ext = h * wp;
            let mut y_ext = vec![F::zero(); self.cout * n_ext];
            let weight = self.weight.get(p);
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let tap = ky * self.kernel + kx;
                    F::gemm_view(
                        weight,
                        self.tap_weights(tap),
                        &xp,
                        self.tap_input(ky, kx, h, wp, plane),
                        &mut y_ext,
                        MatView::dense(0, self.cout, n_ext),
                        tap > 0,
                    );
                }
            }
            let mut y = Vec::with_capacity(self.cout * n);
            for row in y_ext.chunks_exact(wp) {
                y.extend_from_slice(&row[..w]);
            }
            (xp, y)
        } else {
            let col = if self.is_pointwise() {
                x.data().to_vec()
            } else {
                im2col(x.data(), self.cin, h, w, self.kernel, self.stride, oh, ow)
            };
            let y = F::gemm_new(self.cout, k, n, self.weight.get(p), false, &col, false);
            (col, y)
        };
        for (plane, &b) in y.chunks_exact_mut(n).zip(self.bias.get(p)) {
            if b != F::zero() {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        let y = Tensor::from_vec(self.cout, oh, ow, y).expect("conv output shape");
        Ok((
            y,
            ConvCache {
                input,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        cache: &ConvCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let n = cache.out_h * cache.out_w;
        let k = self.cin * self.kernel * self.kernel;
        debug_assert_eq!(dy.shape(), (self.cout, cache.out_h, cache.out_w));
        for (c, db) in self.bias.get_mut(g).iter_mut().enumerate() {
            *db += dy.plane(c).iter().fold(F::zero(), |acc, &v| acc + v);
        }
        let (h, w) = (cache.in_h, cache.in_w);
        if self.is_shifted() {
            let pad = self.kernel / 2;
            let (wp, plane) = self.padded_dims(h, w);
            let n_ext = h * wp;
            let mut dy_ext = vec![F::zero(); self.cout * n_ext];
            for (dst, src) in dy_ext.chunks_exact_mut(wp).zip(dy.data().chunks_exact(w)) {
                dst[..w].copy_from_slice(src);
            }
            // every (channel, tap) row of the shifted input is contiguous
            let mut col = Vec::with_capacity(k * n_ext);
            for c in 0..self.cin {
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let at = c * plane + ky * wp + kx;
                        col.extend_from_slice(&cache.input[at..at + n_ext]);
                    }
                }
            }
            F::gemm(
                self.cout,
                n_ext,
                k,
                &dy_ext,
                false,
                &col,
                true,
                self.weight.get_mut(g),
                true,
            );
            drop(col);
            let mut dxp = vec![F::zero(); self.cin * plane];
            let weight = self.weight.get(p);
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let tap = ky * self.kernel + kx;
                    let input = self.tap_input(ky, kx, h, wp, plane);
                    let dy_view = MatView::dense(0, self.cout, n_ext);
                    F::gemm_view(
                        weight,
                        self.tap_weights(tap).transposed(),
                        &dy_ext,
                        dy_view,
                        &mut dxp,
                        input,
                        true,
                    );
                }
            }
            let mut dx = Vec::with_capacity(self.cin * h * w);
            for c in 0..self.cin {
                for row in 0..h {
                    let at = c * plane + (row + pad) * wp + pad;
                    dx.extend_from_slice(&dxp[at..at + w]);
                }
            }
            return Tensor::from_vec(self.cin, h, w, dx).expect("conv input shape");
        }
        F::gemm(
            self.cout,
            n,
            k,
            dy.data(),
            false,
            &cache.input,
            true,
            self.weight.get_mut(g),
            true,
        );
        let dcol = F::gemm_new(k, self.cout, n, self.weight.get(p), true, dy.data(), false);
        if self.is_pointwise() {
            Tensor::from_vec(self.cin, h, w, dcol).expect("pointwise shape")
        } else {
            let dx = col2im(
                &dcol,
                self.cin,
                h,
                w,
                self.kernel,
                self.stride,
                cache.out_h,
                cache.out_w,
            );
            Tensor::from_vec(self.cin, h, w, dx).expect("conv input shape")
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
#[inline]
fn valid_columns(out: usize, stride: usize, tap: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if tap >= pad {
        0
    } else {
        (pad - tap).div_ceil(stride)
    };
    let hi = if len + pad <= tap {
        0
    } else {
        (len + pad - tap).div_ceil(stride).min(out)
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let pad = k / 2;
    let n = oh * ow;
    let zero = F::zero();
    let zeros = |col: &mut Vec<F>, len: usize| col.extend(std::iter::repeat_n(zero, len));
    let mut col = Vec::with_capacity(c * k * k * n);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_columns(oh, s, ky, pad, h);
            for kx in 0..k {
                let (xlo, xhi) = valid_columns(ow, s, kx, pad, w);
                zeros(&mut col, ylo * ow);
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let src = &plane[iy * w..(iy + 1) * w];
                    zeros(&mut col, xlo);
                    if s == 1 {
                        let start = xlo + kx - pad;
                        col.extend_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        col.extend((xlo..xhi).map(|ox| src[ox * s + kx - pad]));
                    }
                    zeros(&mut col, ow - xhi);
                }
                zeros(&mut col, (oh - yhi) * ow);
            }
        }
    }
    debug_assert_eq!(col.len(), c * k * k * n);
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Real>(
    col: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<F> {
    let pad = k / 2;
    let n = oh * ow;
    let mut x = vec![F::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_columns(oh, s, ky, pad, h);
            for kx in 0..k {
                let (xlo, xhi) = valid_columns(ow, s, kx, pad, w);
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                for oy in ylo..yhi {
                    let iy = oy * s + ky - pad;
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        let start = xlo + kx - pad;
                        for (d, &v) in dst[start..start + (xhi - xlo)].iter_mut().zip(&src[xlo..xhi]) {
                            *d += v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * s + kx - pad] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    scale: ParamId,
    shift: ParamId,
    channels: usize,
    groups: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

impl GroupNorm {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Self {
        let scale = store.add(
            format!("{name}.scale"),
            &[channels],
            ParamKind::NormScale,
            Init::Ones,
            rng,
        );
        let shift = store.add(
            format!("{name}.shift"),
            &[channels],
            ParamKind::NormShift,
            Init::Zeros,
            rng,
        );
        Self {
            scale,
            shift,
            channels,
            groups: group_count(channels),
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &Tensor<F>) -> Result<(Tensor<F>, NormCache<F>)> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "group norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let per_group = self.channels / self.groups * x.plane_len();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for chunk in xhat.data_mut().chunks_mut(per_group) {
            let mean = chunk.iter().map(|v| v.f64()).sum::<f64>() / per_group as f64;
            let var = chunk
                .iter()
                .map(|v| {
                    let d = v.f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / per_group as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            let (m, s) = (F::of(mean), F::of(inv));
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
            inv_std.push(s);
        }
        let scale = self.scale.get(p);
        let shift = self.shift.get(p);
        let mut y = xhat.clone();
        for c in 0..self.channels {
            let (a, b) = (scale[c], shift[c]);
            y.plane_mut(c).iter_mut().for_each(|v| *v = *v * a + b);
        }
        Ok((y, NormCache { xhat, inv_std }))
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        cache: &NormCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let scale = self.scale.get(p);
        let mut dxhat = dy.clone();
        {
            let dscale = self.scale.get_mut(g);
            for c in 0..self.channels {
                dscale[c] += dy
                    .plane(c)
                    .iter()
                    .zip(cache.xhat.plane(c))
                    .fold(F::zero(), |acc, (&d, &xh)| acc + d * xh);
            }
        }
        {
            let dshift = self.shift.get_mut(g);
            for c in 0..self.channels {
                dshift[c] += dy.plane(c).iter().fold(F::zero(), |acc, &d| acc + d);
                let a = scale[c];
                dxhat.plane_mut(c).iter_mut().for_each(|v| *v *= a);
            }
        }
        let per_group = self.channels / self.groups * dy.plane_len();
        let n = F::of(per_group as f64);
        for ((dx, xh), &inv) in dxhat
            .data_mut()
            .chunks_mut(per_group)
            .zip(cache.xhat.data().chunks(per_group))
            .zip(&cache.inv_std)
        {
            let mean_d = dx.iter().fold(F::zero(), |a, &v| a + v) / n;
            let mean_dx = dx
                .iter()
                .zip(xh)
                .fold(F::zero(), |a, (&d, &x)| a + d * x)
                / n;
            for (d, &x) in dx.iter_mut().zip(xh) {
                *d = inv * (*d - mean_d - x * mean_dx);
            }
        }
        dxhat
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Returns `x * sigmoid(x)` together with the sigmoid, which the backward
/// pass reuses.
pub(crate) fn silu<F: Real>(x: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let gate = x.map(sigmoid);
    let y = x.zip_map(&gate, |v, s| v * s).expect("silu shapes");
    (y, gate)
}

/// Gradient of SiLU given its input `x` and the forward sigmoid `gate`.
pub(crate) fn silu_backward<F: Real>(x: &Tensor<F>, gate: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    for ((d, &v), &s) in dx.data_mut().iter_mut().zip(x.data()).zip(gate.data()) {
        *d = *d * s * (F::one() + v * (F::one() - s));
    }
    dx
}

/// Dense projection of a vector, used for the time embedding.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    weight: ParamId,
    bias: ParamId,
    fin: usize,
    fout: usize,
}

impl Linear {
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
        kind: ParamKind,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[fout, fin], kind, Init::FanIn(fin), rng);
        let bias = store.add(format!("{name}.bias"), &[fout], ParamKind::Bias, Init::Zeros, rng);
        Self {
            weight,
            bias,
            fin,
            fout,
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &[F]) -> Vec<F> {
        debug_assert_eq!(x.len(), self.fin);
        let w = self.weight.get(p);
        self.bias
            .get(p)
            .iter()
            .enumerate()
            .map(|(o, &b)| {
                w[o * self.fin..(o + 1) * self.fin]
                    .iter()
                    .zip(x)
                    .fold(b, |acc, (&a, &v)| acc + a * v)
            })
            .collect()
    }

    /// Accumulates parameter gradients; the input is not differentiated.
    pub fn backward<F: Real>(&self, g: &mut [F], x: &[F], dy: &[F]) {
        debug_assert_eq!(dy.len(), self.fout);
        let dw = self.weight.get_mut(g);
        for (o, &d) in dy.iter().enumerate() {
            for (gw, &v) in dw[o * self.fin..(o + 1) * self.fin].iter_mut().zip(x) {
                *gw += d * v;
            }
        }
        for (gb, &d) in self.bias.get_mut(g).iter_mut().zip(dy) {
            *gb += d;
        }
    }
}

pub(crate) fn upsample_nearest2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = x.shape();
    Tensor::from_fn(c, 2 * h, 2 * w, |ci, y, xx| x.get(ci, y / 2, xx / 2))
}

pub(crate) fn upsample_nearest2_backward<F: Real>(dy: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = dy.shape();
    let mut dx = Tensor::zeros(c, h / 2, w / 2);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = dx.get(ci, y / 2, x / 2) + dy.get(ci, y, x);
                dx.set(ci, y / 2, x / 2, v);
            }
        }
    }
    dx
}

/// Residual block: `skip(x) + conv(act(norm(conv(act(norm(x))) + proj(t))))`.
///
/// `skip` is a 1x1 convolution when the channel count changes and the
/// identity otherwise. Blocks built without a time dimension ignore the
/// embedding.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlockCache<F> {
    n1: NormCache<F>,
    pre1: Tensor<F>,
    gate1: Tensor<F>,
    c1: ConvCache<F>,
    n2: NormCache<F>,
    pre2: Tensor<F>,
    gate2: Tensor<F>,
    c2: ConvCache<F>,
    skip: Option<ConvCache<F>>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        time_dim: Option<usize>,
    ) -> Self {
        let norm1 = GroupNorm::new(store, rng, &format!("{name}.norm1"), cin);
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            kernel,
            1,
            ParamKind::ConvKernel,
            false,
        );
        let time = time_dim.map(|d| {
            Linear::new(
                store,
                rng,
                &format!("{name}.time"),
                d,
                cout,
                ParamKind::TimeProjection,
            )
        });
        let norm2 = GroupNorm::new(store, rng, &format!("{name}.norm2"), cout);
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            kernel,
            1,
            ParamKind::ConvKernel,
            false,
        );
        let skip = (cin != cout).then(|| {
            Conv2d::new(
                store,
                rng,
                &format!("{name}.skip"),
                cin,
                cout,
                1,
                1,
                ParamKind::ConvKernel,
                false,
            )
        });
        Self {
            norm1,
            conv1,
            time,
            norm2,
            conv2,
            skip,
            cin,
            cout,
        }
    }

    pub fn forward<F: Real>(
        &self,
        p: &[F],
        x: &Tensor<F>,
        temb: Option<&[F]>,
    ) -> Result<(Tensor<F>, ResBlockCache<F>)> {
        if x.channels() != self.cin {
            return Err(Error::Shape(format!(
                "residual block expects {} channels, got {}",
                self.cin,
                x.channels()
            )));
        }
        let (pre1, n1) = self.norm1.forward(p, x)?;
        let (act1, gate1) = silu(&pre1);
        let (mut h, c1) = self.conv1.forward(p, &act1)?;
        if let Some(time) = &self.time {
            let temb = temb.ok_or_else(|| {
                Error::Shape("time-conditioned block called without an embedding".into())
            })?;
            for (c, add) in time.forward(p, temb).into_iter().enumerate() {
                h.plane_mut(c).iter_mut().for_each(|v| *v += add);
            }
        }
        let (pre2, n2) = self.norm2.forward(p, &h)?;
        let (act2, gate2) = silu(&pre2);
        let (h, c2) = self.conv2.forward(p, &act2)?;
        let (mut out, skip) = match &self.skip {
            Some(conv) => {
                let (s, cache) = conv.forward(p, x)?;
                (s, Some(cache))
            }
            None => (x.clone(), None),
        };
        out.data_mut()
            .iter_mut()
            .zip(h.data())
            .for_each(|(o, &v)| *o += v);
        Ok((
            out,
            ResBlockCache {
                n1,
                pre1,
                gate1,
                c1,
                n2,
                pre2,
                gate2,
                c2,
                skip,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        g: &mut [F],
        cache: &ResBlockCache<F>,
        temb: Option<&[F]>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let dh = self.conv2.backward(p, g, &cache.c2, dy);
        let dh = silu_backward(&cache.pre2, &cache.gate2, &dh);
        let dh = self.norm2.backward(p, g, &cache.n2, &dh);
        if let (Some(time), Some(temb)) = (&self.time, temb) {
            let dproj: Vec<F> = (0..self.cout)
                .map(|c| dh.plane(c).iter().fold(F::zero(), |a, &v| a + v))
                .collect();
            time.backward(g, temb, &dproj);
        }
        let dh = self.conv1.backward(p, g, &cache.c1, &dh);
        let dh = silu_backward(&cache.pre1, &cache.gate1, &dh);
        let mut dx = self.norm1.backward(p, g, &cache.n1, &dh);
        let dskip = match (&self.skip, &cache.skip) {
            (Some(conv), Some(c)) => conv.backward(p, g, c, dy),
            _ => dy.clone(),
        };
        dx.data_mut()
            .iter_mut()
            .zip(dskip.data())
            .for_each(|(a, &b)| *a += b);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    /// Direct nested-loop convolution with zero padding.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &[f64],
        b: &[f64],
        cout: usize,
        k: usize,
        s: usize,
    ) -> Tensor<f64> {
        let (cin, h, wd) = x.shape();
        let pad = k as isize / 2;
        let oh = (h + 2 * (k / 2) - k) / s + 1;
        let ow = (wd + 2 * (k / 2) - k) / s + 1;
        Tensor::from_fn(cout, oh, ow, |o, oy, ox| {
            let mut acc = b[o];
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - pad;
                        let ix = (ox * s + kx) as isize - pad;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w[((o * cin + c) * k + ky) * k + kx]
                                * x.get(c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, s, h, w) in &[(3, 1, 5, 4), (3, 2, 6, 8), (1, 1, 3, 3), (3, 2, 7, 5)] {
            let mut store = ParamStore::<f64>::new();
            let mut r = rng();
            let conv = Conv2d::new(&mut store, &mut r, "c", 2, 3, k, s, ParamKind::ConvKernel, false);
            for v in store.values_mut() {
                *v = r.random_range(-1.0..1.0);
            }
            let x = Tensor::from_fn(2, h, w, |c, y, xx| ((c * 7 + y * 3 + xx) % 5) as f64 - 2.0);
            let (y, _) = conv.forward(store.values(), &x).unwrap();
            let expect = conv_reference(
                &x,
                conv.weight.get(store.values()),
                conv.bias.get(store.values()),
                3,
                k,
                s,
            );
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_wrong_channels() {
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, &mut rng(), "c", 2, 3, 3, 1, ParamKind::ConvKernel, false);
        let x = Tensor::zeros(3, 4, 4);
        assert!(matches!(conv.forward(store.values(), &x), Err(Error::Shape(_))));
    }

    #[test]
    fn group_counts() {
        assert_eq!(group_count(32), 8);
        assert_eq!(group_count(24), 8);
        assert_eq!(group_count(3), 3);
        assert_eq!(group_count(12), 6);
        assert_eq!(group_count(1), 1);
        assert_eq!(group_count(7), 7);
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut store = ParamStore::<f64>::new();
        let norm = GroupNorm::new(&mut store, &mut rng(), "n", 16);
        let x = Tensor::from_fn(16, 3, 3, |c, y, xx| (c * 9 + y * 3 + xx) as f64 * 0.37 + c as f64);
        let (y, _) = norm.forward(store.values(), &x).unwrap();
        // 8 groups of 2 channels
        for g in y.data().chunks(18) {
            let mean = g.iter().sum::<f64>() / 18.0;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn(2, 2, 3, |c, y, xx| (c + 2 * y + 5 * xx) as f64);
        let dy = Tensor::<f64>::from_fn(2, 4, 6, |c, y, xx| ((c * 11 + y * 3 + xx) % 7) as f64);
        let up = upsample_nearest2(&x);
        let lhs: f64 = up.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let back = upsample_nearest2_backward(&dy);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn resblock_zero_residual_path_is_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng();
        let block = ResBlock::new(&mut store, &mut r, "b", 3, 5, 3, Some(4));
        // zero every parameter of the residual path, keep the skip projection
        let skip_names = ["b.skip.weight", "b.skip.bias"];
        let infos = store.infos().to_vec();
        for info in &infos {
            let zero = !skip_names.contains(&info.name.as_str());
            let vals = &mut store.values_mut()[info.offset..info.offset + info.len()];
            for v in vals {
                *v = if zero { 0.0 } else { r.random_range(-1.0..1.0) };
            }
        }
        let x = Tensor::from_fn(3, 4, 4, |c, y, xx| (c + y * xx) as f64 * 0.1);
        let temb = [0.3, -0.2, 0.9, 0.1];
        let (y, _) = block.forward(store.values(), &x, Some(&temb)).unwrap();
        let skip = block.skip.as_ref().unwrap();
        let (proj, _) = skip.forward(store.values(), &x).unwrap();
        assert_eq!(y, proj);
        assert_eq!(y.shape(), (5, 4, 4));
    }

    #[test]
    fn resblock_hand_computed_pointwise() {
        // One channel, 2x2 input, 1x1 kernels, identity skip.
        let mut store = ParamStore::<f64>::new();
        let block = ResBlock::new(&mut store, &mut rng(), "b", 1, 1, 1, Some(2));
        let set = |store: &mut ParamStore<f64>, name: &str, v: &[f64]| {
            let info = store.find(name).unwrap().clone();
            store.values_mut()[info.offset..info.offset + info.len()].copy_from_slice(v);
        };
        set(&mut store, "b.norm1.scale", &[1.0]);
        set(&mut store, "b.norm1.shift", &[0.0]);
        set(&mut store, "b.conv1.weight", &[2.0]);
        set(&mut store, "b.conv1.bias", &[0.5]);
        set(&mut store, "b.time.weight", &[1.0, -1.0]);
        set(&mut store, "b.time.bias", &[0.25]);
        set(&mut store, "b.norm2.scale", &[0.5]);
        set(&mut store, "b.norm2.shift", &[1.0]);
        set(&mut store, "b.conv2.weight", &[-1.5]);
        set(&mut store, "b.conv2.bias", &[0.1]);
        let input = [1.0, 2.0, 3.0, 4.0];
        let x = Tensor::from_vec(1, 2, 2, input.to_vec()).unwrap();
        let temb = [0.6, 0.2];

        // manual evaluation of the block formula
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let standardize = |v: &[f64]| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect()
        };
        let time_shift = 1.0 * 0.6 - 1.0 * 0.2 + 0.25;
        let h1: Vec<f64> = standardize(&input)
            .iter()
            .map(|&v| 2.0 * silu(v) + 0.5 + time_shift)
            .collect();
        let expect: Vec<f64> = standardize(&h1)
            .iter()
            .zip(&input)
            .map(|(&v, &xin)| xin + (-1.5 * silu(0.5 * v + 1.0) + 0.1))
            .collect();

        let (y, _) = block.forward(store.values(), &x, Some(&temb)).unwrap();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
