//! Zero-padded 2D convolutions over channel-last `[H, W, C]` maps.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::config(format!(
                "convolution kernel size must be odd, got {k}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("convolution stride must be at least 1"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::config(format!(
                "kernel {k} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeometry {
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate read by output `o` at kernel tap `t`, if inside the map.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn map_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(op, x.shape(), &[0, 0, 0])),
    }
}

/// Per-channel `K×K` correlation; `w` is `[K, K, C]`.
pub fn depthwise_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, wd, c) = map_dims(x, "depthwise_conv2d")?;
    let k = w.shape().first().copied().unwrap_or(0);
    let geo = ConvGeometry::new(h, wd, k, stride, pad)?;
    w.expect_shape("depthwise_conv2d weight", &[k, k, c])?;
    if let Some(b) = bias {
        b.expect_shape("depthwise_conv2d bias", &[c])?;
    }
    let mut out = vec![0.0; geo.out_h * geo.out_w * c];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let o = &mut out[(oy * geo.out_w + ox) * c..][..c];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, wd) else {
                        continue;
                    };
                    let xs = &x.data()[(iy * wd + ix) * c..][..c];
                    let ws = &w.data()[(ky * k + kx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += xs[ch] * ws[ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[geo.out_h, geo.out_w, c], out)
}

/// Gradients with respect to input, weight and bias, each when requested.
type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn depthwise_vjp(
    g: &[f64],
    x: &Tensor,
    w: &Tensor,
    geo: &ConvGeometry,
    c: usize,
    need: &[bool],
) -> ConvGrads {
    let k = geo.k;
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let go = &g[(oy * geo.out_w + ox) * c..][..c];
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, geo.h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, geo.w) else {
                        continue;
                    };
                    let xo = (iy * geo.w + ix) * c;
                    let wo = (ky * k + kx) * c;
                    if let Some(gx) = gx.as_mut() {
                        let ws = &w.data()[wo..wo + c];
                        for ch in 0..c {
                            gx[xo + ch] += go[ch] * ws[ch];
                        }
                    }
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x.data()[xo..xo + c];
                        for ch in 0..c {
                            gw[wo + ch] += go[ch] * xs[ch];
                        }
                    }
                }
            }
        }
    }
    let gb = need.get(2).copied().unwrap_or(false).then(|| {
        let mut gb = vec![0.0; c];
        for row in g.chunks_exact(c) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        gb
    });
    (gx, gw, gb)
}

/// Dense convolution; `w` is `[K, K, C_in, C_out]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (h, wd, cin) = map_dims(x, "conv2d")?;
    if w.rank() != 4 || w.shape()[2] != cin || w.shape()[0] != w.shape()[1] {
        return Err(Error::dim("conv2d", x.shape(), w.shape()));
    }
    let k = w.shape()[0];
    let cout = w.shape()[3];
    let geo = ConvGeometry::new(h, wd, k, stride, pad)?;
    if let Some(b) = bias {
        b.expect_shape("conv2d bias", &[cout])?;
    }
    let mut out = vec![0.0; geo.out_h * geo.out_w * cout];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let o = &mut out[(oy * geo.out_w + ox) * cout..][..cout];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, wd) else {
                        continue;
                    };
                    let xs = &x.data()[(iy * wd + ix) * cin..][..cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        let ws = &w.data()[wbase + ci * cout..][..cout];
                        o.iter_mut().zip(ws).for_each(|(o, &wv)| *o += xv * wv);
                    }
                }
            }
        }
    }
    Tensor::new(&[geo.out_h, geo.out_w, cout], out)
}

fn conv2d_vjp(g: &[f64], x: &Tensor, w: &Tensor, geo: &ConvGeometry, need: &[bool]) -> ConvGrads {
    let (k, cin, cout) = (geo.k, w.shape()[2], w.shape()[3]);
    let mut gx = need[0].then(|| vec![0.0; x.numel()]);
    let mut gw = need[1].then(|| vec![0.0; w.numel()]);
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let go = &g[(oy * geo.out_w + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = geo.src(oy, ky, geo.h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = geo.src(ox, kx, geo.w) else {
                        continue;
                    };
                    let xo = (iy * geo.w + ix) * cin;
                    let wbase = (ky * k + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = wbase + ci * cout;
                        if let Some(gx) = gx.as_mut() {
                            let ws = &w.data()[wrow..wrow + cout];
                            gx[xo + ci] += go.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xv = x.data()[xo + ci];
                            gw[wrow..wrow + cout]
                                .iter_mut()
                                .zip(go)
                                .for_each(|(a, &gv)| *a += xv * gv);
                        }
                    }
                }
            }
        }
    }
    let gb = need.get(2).copied().unwrap_or(false).then(|| {
        let mut gb = vec![0.0; cout];
        for row in g.chunks_exact(cout) {
            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        gb
    });
    (gx, gw, gb)
}

impl Tape {
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = depthwise_conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let vx = self.value_arc(x);
        let vw = self.value_arc(w);
        let (h, wd, c) = map_dims(&vx, "depthwise_conv2d")?;
        let geo = ConvGeometry::new(h, wd, vw.shape()[0], stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "depthwise_conv2d",
            out,
            inputs,
            Box::new(move |g, need| {
                let (gx, gw, gb) = depthwise_vjp(g, &vx, &vw, &geo, c, need);
                let mut v = vec![gx, gw];
                if need.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        )
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = conv2d(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let vx = self.value_arc(x);
        let vw = self.value_arc(w);
        let (h, wd, _) = map_dims(&vx, "conv2d")?;
        let geo = ConvGeometry::new(h, wd, vw.shape()[0], stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            out,
            inputs,
            Box::new(move |g, need| {
                let (gx, gw, gb) = conv2d_vjp(g, &vx, &vw, &geo, need);
                let mut v = vec![gx, gw];
                if need.len() == 3 {
                    v.push(gb);
                }
                v
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ones_counts_overlap() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1], 1.0);
        let out = depthwise_conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn centre_tap_kernel_is_identity() {
        let x = Tensor::from_fn(&[5, 4, 3], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 3, 3], |i| if i / 3 == 4 { 1.0 } else { 0.0 });
        assert_eq!(depthwise_conv2d(&x, &w, None, 1, 1).unwrap(), x);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let err = depthwise_conv2d(&x, &Tensor::zeros(&[2, 2, 2]), None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let x = Tensor::zeros(&[8, 6, 3]);
        let w = Tensor::zeros(&[3, 3, 3, 5]);
        assert_eq!(conv2d(&x, &w, None, 2, 1).unwrap().shape(), &[4, 3, 5]);
    }
}
