//! Raw forward/backward kernels. The graph records which kernel ran and
//! calls back into these during the reverse pass.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        b: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, wd] = x.nchw()?;
        if groups == 0 || stride == 0 {
            return Err(Error::contract("conv2d", "stride and groups must be positive"));
        }
        if cin % groups != 0 {
            return Err(Error::contract(
                "conv2d",
                format!("input channels {cin} not divisible by groups {groups}"),
            ));
        }
        let &[cout, cin_g, kh, kw] = w.shape() else {
            return Err(Error::shape("conv2d", &[0, cin / groups, 0, 0], w.shape()));
        };
        if cin_g != cin / groups || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                &[cout, cin / groups, kh, kw],
                w.shape(),
            ));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d bias", &[cout], b.shape()));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) else {
            return Err(Error::contract(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            ));
        };
        Ok(Self {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            groups,
            ho,
            wo,
        })
    }

    /// Range of output columns whose input column `ox*stride + kx - pad`
    /// lands inside the map.
    #[inline]
    fn valid_out(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        // largest o with o*s + k - p <= extent - 1
        let hi_num = extent as isize - 1 + p - k;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    fn for_each_tap(&self, mut f: impl FnMut(Tap)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for n in 0..self.n {
            for oc in 0..self.cout {
                let g = oc / cout_g;
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    for ky in 0..self.kh {
                        let (oy_lo, oy_hi) = self.valid_out(ky, self.h, self.ho);
                        for kx in 0..self.kw {
                            let (ox_lo, ox_hi) = self.valid_out(kx, self.w, self.wo);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            f(Tap {
                                n,
                                oc,
                                ic,
                                widx: ((oc * cin_g + icg) * self.kh + ky) * self.kw + kx,
                                ky,
                                kx,
                                oy: (oy_lo, oy_hi),
                                ox: (ox_lo, ox_hi),
                            });
                        }
                    }
                }
            }
        }
    }
}

struct Tap {
    n: usize,
    oc: usize,
    ic: usize,
    widx: usize,
    ky: usize,
    kx: usize,
    oy: (usize, usize),
    ox: (usize, usize),
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x, w, b, stride, pad, groups)?;
    Ok(conv2d_raw(&geom, x, w, b))
}

pub(crate) fn conv2d_raw<T: Real>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Tensor<T> {
    let ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let od = out.data_mut();
    if let Some(b) = b {
        for ni in 0..n {
            for oc in 0..cout {
                let base = (ni * cout + oc) * ho * wo;
                od[base..base + ho * wo].fill(b.data()[oc]);
            }
        }
    }
    let xd = x.data();
    let wdat = w.data();
    // 1x1 stride-1 convolutions are plain channel mixing.
    if geom.kh == 1 && geom.kw == 1 && stride == 1 && pad == 0 {
        let hw = h * wd;
        geom.for_each_tap(|t| {
            let wv = wdat[t.widx];
            let src = &xd[(t.n * cin + t.ic) * hw..][..hw];
            let dst = &mut od[(t.n * cout + t.oc) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wv * *s;
            }
        });
        return out;
    }
    geom.for_each_tap(|t| {
        let wv = wdat[t.widx];
        let xbase = (t.n * cin + t.ic) * h * wd;
        let obase = (t.n * cout + t.oc) * ho * wo;
        for oy in t.oy.0..t.oy.1 {
            let iy = oy * stride + t.ky - pad;
            let xrow = xbase + iy * wd;
            let orow = obase + oy * wo;
            if stride == 1 {
                let ix0 = t.ox.0 + t.kx - pad;
                let len = t.ox.1 - t.ox.0;
                let src = &xd[xrow + ix0..][..len];
                let dst = &mut od[orow + t.ox.0..][..len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * *s;
                }
            } else {
                for ox in t.ox.0..t.ox.1 {
                    let ix = ox * stride + t.kx - pad;
                    od[orow + ox] += wv * xd[xrow + ix];
                }
            }
        }
    });
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Real>(
    geom: &ConvGeom,
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    with_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let ConvGeom {
        cin,
        h,
        w: wd,
        cout,
        stride,
        pad,
        ho,
        wo,
        ..
    } = *geom;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wdat = w.data();
    let gyd = gy.data();
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        geom.for_each_tap(|t| {
            let wv = wdat[t.widx];
            let xbase = (t.n * cin + t.ic) * h * wd;
            let obase = (t.n * cout + t.oc) * ho * wo;
            let mut acc = T::zero();
            for oy in t.oy.0..t.oy.1 {
                let iy = oy * stride + t.ky - pad;
                let xrow = xbase + iy * wd;
                let orow = obase + oy * wo;
                for ox in t.ox.0..t.ox.1 {
                    let ix = ox * stride + t.kx - pad;
                    let g = gyd[orow + ox];
                    acc += g * xd[xrow + ix];
                    gxd[xrow + ix] += wv * g;
                }
            }
            gwd[t.widx] += acc;
        });
    }
    let gb = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        for (i, chunk) in gyd.chunks(ho * wo).enumerate() {
            gb.data_mut()[i % cout] += chunk.iter().copied().sum();
        }
        gb
    });
    (gx, gw, gb)
}

/// Normalizes over the channel axis at every spatial site. Returns the
/// output along with the normalized input and per-site reciprocal std.
pub fn layer_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
    }
    let [n, c, h, w] = x.nchw()?;
    if gamma.shape() != [c] {
        return Err(Error::shape("layer_norm gamma", &[c], gamma.shape()));
    }
    if beta.shape() != [c] {
        return Err(Error::shape("layer_norm beta", &[c], beta.shape()));
    }
    let hw = h * w;
    let inv_c = T::one() / T::c(c as f64);
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); n * hw];
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    for ni in 0..n {
        let base = ni * c * hw;
        let mut mean = vec![T::zero(); hw];
        for ci in 0..c {
            for (m, v) in mean.iter_mut().zip(&xd[base + ci * hw..][..hw]) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); hw];
        for ci in 0..c {
            for ((s, v), m) in var.iter_mut().zip(&xd[base + ci * hw..][..hw]).zip(&mean) {
                let d = *v - *m;
                *s += d * d;
            }
        }
        let rs = &mut rstd[ni * hw..][..hw];
        for (r, v) in rs.iter_mut().zip(&var) {
            *r = T::one() / (*v * inv_c + eps).sqrt();
        }
        for ci in 0..c {
            let off = base + ci * hw;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for p in 0..hw {
                let xh = (xd[off + p] - mean[p]) * rs[p];
                xhat[off + p] = xh;
                od[off + p] = xh * g + b;
            }
        }
    }
    Ok((out, xhat, rstd))
}

pub(crate) fn layer_norm_backward<T: Real>(
    shape: [usize; 4],
    gamma: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = shape;
    let hw = h * w;
    let inv_c = T::one() / T::c(c as f64);
    let gyd = gy.data();
    let mut gx = Tensor::zeros(gy.shape());
    let mut gg = Tensor::zeros(&[c]);
    let mut gb = Tensor::zeros(&[c]);
    for ni in 0..n {
        let base = ni * c * hw;
        let mut mean_g = vec![T::zero(); hw];
        let mut mean_gx = vec![T::zero(); hw];
        for ci in 0..c {
            let off = base + ci * hw;
            let g = gamma.data()[ci];
            let mut sg = T::zero();
            let mut sb = T::zero();
            for p in 0..hw {
                let dy = gyd[off + p];
                sg += dy * xhat[off + p];
                sb += dy;
                let gh = dy * g;
                mean_g[p] += gh;
                mean_gx[p] += gh * xhat[off + p];
            }
            gg.data_mut()[ci] += sg;
            gb.data_mut()[ci] += sb;
        }
        let gxd = gx.data_mut();
        for ci in 0..c {
            let off = base + ci * hw;
            let g = gamma.data()[ci];
            for p in 0..hw {
                let gh = gyd[off + p] * g;
                gxd[off + p] = rstd[ni * hw + p]
                    * (gh - mean_g[p] * inv_c - xhat[off + p] * mean_gx[p] * inv_c);
            }
        }
    }
    (gx, gg, gb)
}
