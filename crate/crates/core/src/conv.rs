//! Standard, dilated, depthwise, pointwise and depthwise dilated separable
//! convolutions.
//!
//! All variants use the cross-correlation convention (no kernel flip) and
//! naive direct loops. Output pixel `(y, x)` of a tap `(ky, kx)` reads input
//! `(y * stride + ky * dilation - pad, x * stride + kx * dilation - pad)`;
//! reads outside the input contribute zero. Summation runs over input
//! channels, then kernel rows, then kernel columns, so results are
//! bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Geometry and channel counts of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    /// Zero padding on every side.
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Undilated, stride 1, unpadded, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        ConvSpec {
            kernel_size,
            dilation: 1,
            stride: 1,
            padding: 0,
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    pub fn with_dilation(self, dilation: usize) -> Self {
        ConvSpec { dilation, ..self }
    }

    pub fn with_stride(self, stride: usize) -> Self {
        ConvSpec { stride, ..self }
    }

    pub fn with_padding(self, padding: usize) -> Self {
        ConvSpec { padding, ..self }
    }

    pub fn with_bias(self, has_bias: bool) -> Self {
        ConvSpec { has_bias, ..self }
    }

    /// Sets `padding = dilation * (kernel_size - 1) / 2`, which keeps spatial
    /// dims at stride 1 for odd kernels.
    pub fn same(self) -> Self {
        ConvSpec {
            padding: self.dilation * (self.kernel_size.saturating_sub(1)) / 2,
            ..self
        }
    }

    /// `S + (S - 1)(d - 1)`.
    pub fn effective_extent(&self) -> usize {
        self.kernel_size + (self.kernel_size.saturating_sub(1)) * (self.dilation.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.dilation == 0 || self.stride == 0 {
            return Err(Error::config(format!(
                "kernel size, dilation and stride must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((input + 2 pad - extent) / stride) + 1`.
    pub fn output_dim(&self, input: usize) -> Result<usize> {
        self.validate()?;
        let padded = input + 2 * self.padding;
        let extent = self.effective_extent();
        if padded < extent {
            return Err(Error::shape(format!(
                "input extent {input} with padding {} is smaller than kernel extent {extent}",
                self.padding
            )));
        }
        Ok((padded - extent) / self.stride + 1)
    }

    fn bias_params(&self) -> usize {
        if self.has_bias {
            self.out_channels
        } else {
            0
        }
    }

    /// `C_in * C_out * S * S` (+ `C_out` bias).
    pub fn standard_params(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size * self.kernel_size
            + self.bias_params()
    }

    /// `C_in * S * S + C_in * C_out` (+ `C_out` bias on the pointwise stage).
    pub fn separable_params(&self) -> usize {
        self.in_channels * self.kernel_size * self.kernel_size
            + self.in_channels * self.out_channels
            + self.bias_params()
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            k: self.kernel_size,
            stride: self.stride,
            pad: self.padding,
            dil: self.dilation,
        }
    }
}

/// Weight groups for the convolution variants. Which fields must be present
/// depends on the variant being applied.
#[derive(Clone, Debug, Default)]
pub struct ConvWeights {
    /// `(C_out, C_in, S, S)`.
    pub standard: Option<Tensor>,
    /// `(C, 1, S, S)`.
    pub depthwise: Option<Tensor>,
    /// `(C_out, C_in, 1, 1)`.
    pub pointwise: Option<Tensor>,
    /// `(1, C_out, 1, 1)`.
    pub bias: Option<Tensor>,
}

impl ConvWeights {
    pub fn standard(weight: Tensor, bias: Option<Tensor>) -> Self {
        ConvWeights {
            standard: Some(weight),
            bias,
            ..Default::default()
        }
    }

    pub fn pointwise(weight: Tensor, bias: Option<Tensor>) -> Self {
        ConvWeights {
            pointwise: Some(weight),
            bias,
            ..Default::default()
        }
    }

    pub fn separable(depthwise: Tensor, pointwise: Tensor, bias: Option<Tensor>) -> Self {
        ConvWeights {
            depthwise: Some(depthwise),
            pointwise: Some(pointwise),
            bias,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
}

/// Output positions `lo..hi` whose input index for tap `tap` lies in
/// `0..in_len`, together with the signed input offset of tap `tap`.
fn tap_range(out_len: usize, in_len: usize, tap: usize, g: Geometry) -> (usize, usize, isize) {
    let offset = (tap * g.dil) as isize - g.pad as isize;
    // need 0 <= o * stride + offset < in_len
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(g.stride)
    };
    let limit = in_len as isize - offset; // o * stride < limit
    let hi = if limit <= 0 {
        0
    } else {
        ((limit as usize).div_ceil(g.stride)).min(out_len)
    };
    (lo.min(hi), hi, offset)
}

struct PlaneGeom {
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    g: Geometry,
    rows: Vec<(usize, usize, isize)>,
    cols: Vec<(usize, usize, isize)>,
}

impl PlaneGeom {
    fn new(ih: usize, iw: usize, oh: usize, ow: usize, g: Geometry) -> Self {
        PlaneGeom {
            ih,
            iw,
            oh,
            ow,
            g,
            rows: (0..g.k).map(|t| tap_range(oh, ih, t, g)).collect(),
            cols: (0..g.k).map(|t| tap_range(ow, iw, t, g)).collect(),
        }
    }

    /// `out += correlate(inp, kern)`.
    fn forward(&self, inp: &[f64], kern: &[f64], out: &mut [f64]) {
        let s = self.g.stride;
        for (ky, &(ylo, yhi, yoff)) in self.rows.iter().enumerate() {
            for (kx, &(xlo, xhi, xoff)) in self.cols.iter().enumerate() {
                if xlo == xhi {
                    continue;
                }
                let w = kern[ky * self.g.k + kx];
                for oy in ylo..yhi {
                    let iy = (oy * s) as isize + yoff;
                    let irow = &inp[iy as usize * self.iw..(iy as usize + 1) * self.iw];
                    let orow = &mut out[oy * self.ow..(oy + 1) * self.ow];
                    if s == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        let src = &irow[start..start + (xhi - xlo)];
                        for (o, i) in orow[xlo..xhi].iter_mut().zip(src) {
                            *o += w * i;
                        }
                    } else {
                        for ox in xlo..xhi {
                            orow[ox] += w * irow[((ox * s) as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }

    /// `gin += d(out)/d(inp)^T gout`.
    fn backward_input(&self, gout: &[f64], kern: &[f64], gin: &mut [f64]) {
        let s = self.g.stride;
        for (ky, &(ylo, yhi, yoff)) in self.rows.iter().enumerate() {
            for (kx, &(xlo, xhi, xoff)) in self.cols.iter().enumerate() {
                if xlo == xhi {
                    continue;
                }
                let w = kern[ky * self.g.k + kx];
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + yoff) as usize;
                    let grow = &gout[oy * self.ow..(oy + 1) * self.ow];
                    let irow = &mut gin[iy * self.iw..(iy + 1) * self.iw];
                    if s == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        for (i, g) in irow[start..start + (xhi - xlo)].iter_mut().zip(&grow[xlo..xhi]) {
                            *i += w * g;
                        }
                    } else {
                        for ox in xlo..xhi {
                            irow[((ox * s) as isize + xoff) as usize] += w * grow[ox];
                        }
                    }
                }
            }
        }
    }

    /// `gk += d(out)/d(kern)^T gout`.
    fn backward_kernel(&self, gout: &[f64], inp: &[f64], gk: &mut [f64]) {
        let s = self.g.stride;
        for (ky, &(ylo, yhi, yoff)) in self.rows.iter().enumerate() {
            for (kx, &(xlo, xhi, xoff)) in self.cols.iter().enumerate() {
                if xlo == xhi {
                    continue;
                }
                let mut acc = 0.0;
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + yoff) as usize;
                    let grow = &gout[oy * self.ow..(oy + 1) * self.ow];
                    let irow = &inp[iy * self.iw..(iy + 1) * self.iw];
                    if s == 1 {
                        let start = (xlo as isize + xoff) as usize;
                        acc += grow[xlo..xhi]
                            .iter()
                            .zip(&irow[start..start + (xhi - xlo)])
                            .map(|(g, i)| g * i)
                            .sum::<f64>();
                    } else {
                        for ox in xlo..xhi {
                            acc += grow[ox] * irow[((ox * s) as isize + xoff) as usize];
                        }
                    }
                }
                gk[ky * self.g.k + kx] += acc;
            }
        }
    }

    fn in_plane(&self) -> usize {
        self.ih * self.iw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != Shape::new(1, c_out, 1, 1) {
            return Err(Error::shape(format!(
                "bias shape {} should be (1, {c_out}, 1, 1)",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn output_shape(x: Shape, c_out: usize, spec: &ConvSpec) -> Result<Shape> {
    Ok(Shape::new(x.n, c_out, spec.output_dim(x.h)?, spec.output_dim(x.w)?))
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, n: usize, c: usize, plane: usize) {
    if let Some(b) = bias {
        let bd = b.data();
        for i in 0..n {
            for (ch, &bv) in bd.iter().enumerate().take(c) {
                let base = (i * c + ch) * plane;
                out[base..base + plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn bias_grad(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; c];
    for i in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            let base = (i * c + ch) * plane;
            *acc += g[base..base + plane].iter().sum::<f64>();
        }
    }
    gb
}

fn dense_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = spec.kernel_size;
    if ws != Shape::new(spec.out_channels, spec.in_channels, k, k) {
        return Err(Error::shape(format!(
            "standard weight {ws} does not match spec ({}, {}, {k}, {k})",
            spec.out_channels, spec.in_channels
        )));
    }
    if xs.c != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, conv expects {}",
            xs.c, spec.in_channels
        )));
    }
    check_bias(bias, spec.out_channels)?;
    let os = output_shape(xs, spec.out_channels, spec)?;
    let pg = PlaneGeom::new(xs.h, xs.w, os.h, os.w, spec.geometry());
    let (ci_n, co_n, kk) = (xs.c, os.c, k * k);
    let (ip, op) = (pg.in_plane(), pg.out_plane());

    let mut out = vec![0.0; os.numel()];
    add_bias(&mut out, bias, os.n, co_n, op);
    let (xd, wd) = (x.data(), weight.data());
    for n in 0..xs.n {
        for co in 0..co_n {
            let o = &mut out[(n * co_n + co) * op..(n * co_n + co + 1) * op];
            for ci in 0..ci_n {
                let inp = &xd[(n * ci_n + ci) * ip..(n * ci_n + ci + 1) * ip];
                pg.forward(inp, &wd[(co * ci_n + ci) * kk..(co * ci_n + ci + 1) * kk], o);
            }
        }
    }

    let (xc, wc) = (x.clone(), weight.clone());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(Tensor::from_op(
        os,
        out,
        "conv2d",
        &inputs,
        Box::new(move |g, needs| {
            let (xd, wd) = (xc.data(), wc.data());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    for ci in 0..ci_n {
                        let gi = &mut gx[(n * ci_n + ci) * ip..(n * ci_n + ci + 1) * ip];
                        for co in 0..co_n {
                            let go = &g[(n * co_n + co) * op..(n * co_n + co + 1) * op];
                            pg.backward_input(go, &wd[(co * ci_n + ci) * kk..(co * ci_n + ci + 1) * kk], gi);
                        }
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; ws.numel()];
                for co in 0..co_n {
                    for ci in 0..ci_n {
                        let gk = &mut gw[(co * ci_n + ci) * kk..(co * ci_n + ci + 1) * kk];
                        for n in 0..xs.n {
                            let go = &g[(n * co_n + co) * op..(n * co_n + co + 1) * op];
                            let inp = &xd[(n * ci_n + ci) * ip..(n * ci_n + ci + 1) * ip];
                            pg.backward_kernel(go, inp, gk);
                        }
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, os.n, co_n, op)));
            }
            grads
        }),
    ))
}

fn depthwise(x: &Tensor, weight: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = spec.kernel_size;
    let c = spec.in_channels;
    if ws != Shape::new(c, 1, k, k) {
        return Err(Error::shape(format!(
            "depthwise weight {ws} does not match spec ({c}, 1, {k}, {k})"
        )));
    }
    if xs.c != c {
        return Err(Error::shape(format!(
            "input has {} channels, depthwise conv expects {c}",
            xs.c
        )));
    }
    let os = output_shape(xs, c, spec)?;
    let pg = PlaneGeom::new(xs.h, xs.w, os.h, os.w, spec.geometry());
    let kk = k * k;
    let (ip, op) = (pg.in_plane(), pg.out_plane());
    let mut out = vec![0.0; os.numel()];
    let (xd, wd) = (x.data(), weight.data());
    for n in 0..xs.n {
        for ch in 0..c {
            let p = n * c + ch;
            pg.forward(
                &xd[p * ip..(p + 1) * ip],
                &wd[ch * kk..(ch + 1) * kk],
                &mut out[p * op..(p + 1) * op],
            );
        }
    }
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        os,
        out,
        "depthwise_conv2d",
        &[x, weight],
        Box::new(move |g, needs| {
            let (xd, wd) = (xc.data(), wc.data());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    for ch in 0..c {
                        let p = n * c + ch;
                        pg.backward_input(
                            &g[p * op..(p + 1) * op],
                            &wd[ch * kk..(ch + 1) * kk],
                            &mut gx[p * ip..(p + 1) * ip],
                        );
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; ws.numel()];
                for ch in 0..c {
                    for n in 0..xs.n {
                        let p = n * c + ch;
                        pg.backward_kernel(
                            &g[p * op..(p + 1) * op],
                            &xd[p * ip..(p + 1) * ip],
                            &mut gw[ch * kk..(ch + 1) * kk],
                        );
                    }
                }
                gw
            });
            vec![gx, gw]
        }),
    ))
}

fn pointwise(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.h != 1 || ws.w != 1 || ws.c != xs.c {
        return Err(Error::shape(format!(
            "pointwise weight {ws} does not fit input {xs}"
        )));
    }
    let (ci_n, co_n) = (ws.c, ws.n);
    check_bias(bias, co_n)?;
    let os = xs.with_channels(co_n);
    let plane = xs.plane();
    let mut out = vec![0.0; os.numel()];
    add_bias(&mut out, bias, os.n, co_n, plane);
    let (xd, wd) = (x.data(), weight.data());
    for n in 0..xs.n {
        for co in 0..co_n {
            let o = &mut out[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
            for ci in 0..ci_n {
                let w = wd[co * ci_n + ci];
                let inp = &xd[(n * ci_n + ci) * plane..(n * ci_n + ci + 1) * plane];
                for (ov, iv) in o.iter_mut().zip(inp) {
                    *ov += w * iv;
                }
            }
        }
    }
    let (xc, wc) = (x.clone(), weight.clone());
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    Ok(Tensor::from_op(
        os,
        out,
        "pointwise_conv2d",
        &inputs,
        Box::new(move |g, needs| {
            let (xd, wd) = (xc.data(), wc.data());
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; xs.numel()];
                for n in 0..xs.n {
                    for ci in 0..ci_n {
                        let gi = &mut gx[(n * ci_n + ci) * plane..(n * ci_n + ci + 1) * plane];
                        for co in 0..co_n {
                            let w = wd[co * ci_n + ci];
                            let go = &g[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
                            for (iv, gv) in gi.iter_mut().zip(go) {
                                *iv += w * gv;
                            }
                        }
                    }
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; ws.numel()];
                for co in 0..co_n {
                    for ci in 0..ci_n {
                        let mut acc = 0.0;
                        for n in 0..xs.n {
                            let go = &g[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
                            let inp = &xd[(n * ci_n + ci) * plane..(n * ci_n + ci + 1) * plane];
                            acc += go.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[co * ci_n + ci] = acc;
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if needs.len() > 2 {
                grads.push(needs[2].then(|| bias_grad(g, os.n, co_n, plane)));
            }
            grads
        }),
    ))
}

fn require<'a>(t: &'a Option<Tensor>, what: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::shape(format!("missing {what} weights")))
}

/// Standard (optionally dilated) convolution using `w.standard` and `w.bias`.
pub fn conv2d(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    let bias = spec.has_bias.then_some(()).and(w.bias.as_ref());
    dense_conv(x, require(&w.standard, "standard")?, bias, spec)
}

/// Per-channel (optionally dilated) convolution using `w.depthwise`. Never
/// adds a bias.
pub fn depthwise_conv2d(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    depthwise(x, require(&w.depthwise, "depthwise")?, spec)
}

/// 1x1 cross-channel map using `w.pointwise` and `w.bias`.
pub fn pointwise_conv2d(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    pointwise(x, require(&w.pointwise, "pointwise")?, w.bias.as_ref())
}

/// Depthwise dilated stage followed by the pointwise stage.
pub fn depthwise_dilated_separable(x: &Tensor, w: &ConvWeights, spec: &ConvSpec) -> Result<Tensor> {
    let pw = require(&w.pointwise, "pointwise")?;
    if pw.shape() != Shape::new(spec.out_channels, spec.in_channels, 1, 1) {
        return Err(Error::shape(format!(
            "pointwise weight {} does not match spec ({}, {}, 1, 1)",
            pw.shape(),
            spec.out_channels,
            spec.in_channels
        )));
    }
    let mid = depthwise_conv2d(x, w, spec)?;
    let bias = spec.has_bias.then_some(()).and(w.bias.as_ref());
    pointwise(&mid, pw, bias)
}

/// Receptive field of a chain of layers, applied first to last:
/// `r += (extent - 1) * product of earlier strides`.
pub fn receptive_field(chain: &[ConvSpec]) -> (usize, usize) {
    let mut field = 1;
    let mut jump = 1;
    for spec in chain {
        field += (spec.effective_extent() - 1) * jump;
        jump *= spec.stride;
    }
    (field, field)
}
