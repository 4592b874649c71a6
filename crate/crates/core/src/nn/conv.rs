//! 3D convolution kernels (cross-correlation, zero padding).
//!
//! Stride-1 convolutions run one GEMM per kernel offset over a zero-padded
//! copy of the input, read through a shifted flat view. Strided ones lower
//! each batch element to a patch matrix and a single GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Stride 1 with padding that preserves the extent of odd kernels.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride: [1; 3],
            padding: kernel.map(|k| k / 2),
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
        }
    }

    pub fn output_dims(&self, input: [usize; 3], kernel: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for ax in 0..3 {
            let padded = input[ax] + 2 * self.padding[ax];
            if self.stride[ax] == 0 || padded < kernel[ax] {
                return Err(Error::shape(format!(
                    "empty output extent on axis {ax}: input {} + 2*{} < kernel {}",
                    input[ax], self.padding[ax], kernel[ax]
                )));
            }
            out[ax] = (padded - kernel[ax]) / self.stride[ax] + 1;
        }
        Ok(out)
    }
}

struct Dims {
    n: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn k(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }
    fn p(&self) -> usize {
        self.output.iter().product()
    }
    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }
}

fn dims(x: &DenseTensor, w: &DenseTensor, geom: &ConvGeometry) -> Result<Dims> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(format!(
            "conv3d expects rank-5 input and kernel, got {xs:?} and {ws:?}"
        )));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(format!(
            "conv3d: input has {} channels, kernel expects {}",
            xs[1], ws[1]
        )));
    }
    let input = [xs[2], xs[3], xs[4]];
    let kernel = [ws[2], ws[3], ws[4]];
    Ok(Dims {
        n: xs[0],
        c_in: xs[1],
        c_out: ws[0],
        input,
        kernel,
        output: geom.output_dims(input, kernel)?,
    })
}

/// Valid output range along one axis for kernel offset `k`.
fn valid_range(out: usize, inp: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, pad, inp, stride) = (k as isize, pad as isize, inp as isize, stride as isize);
    // o*stride + k - pad in [0, inp)
    let lo = (pad - k).max(0);
    let lo = (lo + stride - 1) / stride;
    let hi = (inp - 1 + pad - k).div_euclid(stride) + 1;
    let hi = hi.clamp(0, out as isize);
    (lo.min(hi) as usize, hi as usize)
}

/// Calls `f(volume_index, patch_index, len)` for every in-bounds run of patch
/// entries; runs are contiguous on both sides when `len > 1`.
#[inline(always)]
fn for_each_patch(d: &Dims, geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [di, hi, wi] = d.input;
    let [kd, kh, kw] = d.kernel;
    let [od, oh, ow] = d.output;
    let p = d.p();
    for c in 0..d.c_in {
        for a in 0..kd {
            let (d_lo, d_hi) = valid_range(od, di, a, geom.stride[0], geom.padding[0]);
            for b in 0..kh {
                let (h_lo, h_hi) = valid_range(oh, hi, b, geom.stride[1], geom.padding[1]);
                for e in 0..kw {
                    let (w_lo, w_hi) = valid_range(ow, wi, e, geom.stride[2], geom.padding[2]);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    for zo in d_lo..d_hi {
                        let zi = zo * geom.stride[0] + a - geom.padding[0];
                        for yo in h_lo..h_hi {
                            let yi = yo * geom.stride[1] + b - geom.padding[1];
                            let in_base = ((c * di + zi) * hi + yi) * wi;
                            let out_base = row * p + (zo * oh + yo) * ow;
                            if geom.stride[2] == 1 {
                                if w_hi > w_lo {
                                    let xi = w_lo + e - geom.padding[2];
                                    f(in_base + xi, out_base + w_lo, w_hi - w_lo);
                                }
                                continue;
                            }
                            for xo in w_lo..w_hi {
                                let xi = xo * geom.stride[2] + e - geom.padding[2];
                                f(in_base + xi, out_base + xo, 1);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Flat layout of the zero-padded input used by the stride-1 path.
///
/// Output voxel `(z, y, x)` lives at `z·hp·wp + y·wp + x` of a padded-grid
/// buffer, and kernel offset `(a, b, e)` reads the input at that position
/// plus `a·hp·wp + b·wp + e`. Positions outside the output box are junk.
struct Shifted {
    pad: [usize; 3],
    /// Padded input extents.
    dims: [usize; 3],
    /// `dims` product.
    vol: usize,
    /// Span of flat output positions, junk included.
    span: usize,
}

impl Shifted {
    fn new(d: &Dims, geom: &ConvGeometry) -> Option<Self> {
        if geom.stride != [1; 3] {
            return None;
        }
        let pad = geom.padding;
        let dims = [0, 1, 2].map(|a| d.input[a] + 2 * pad[a]);
        let [_, hp, wp] = dims;
        let [od, oh, ow] = d.output;
        Some(Self {
            pad,
            dims,
            vol: dims.iter().product(),
            span: (od - 1) * hp * wp + (oh - 1) * wp + ow,
        })
    }

    fn shift(&self, a: usize, b: usize, e: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + e
    }

    /// `(dense, padded, len)` row starts of a `[c, D, H, W]` box placed at
    /// `offset` inside the padded layout.
    fn rows(
        &self,
        c: usize,
        extent: [usize; 3],
        offset: [usize; 3],
    ) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [dd, dh, dw] = extent;
        let [_, hp, wp] = self.dims;
        (0..c * dd * dh).map(move |r| {
            let (ch, z, y) = (r / (dd * dh), r / dh % dd, r % dh);
            let padded = ch * self.vol + ((z + offset[0]) * hp + y + offset[1]) * wp + offset[2];
            (r * dw, padded, dw)
        })
    }
}

fn conv_shifted(d: &Dims, sh: &Shifted, w: &[f64], xb: &[f64], yb: &mut [f64]) {
    let kvol: usize = d.kernel.iter().product();
    let mut xp = vec![0.0; d.c_in * sh.vol];
    for (i, o, n) in sh.rows(d.c_in, d.input, sh.pad) {
        xp[o..o + n].copy_from_slice(&xb[i..i + n]);
    }
    let mut yp = vec![0.0; d.c_out * sh.vol];
    for_each_offset(d, |koff, a, b, e| {
        let s = sh.shift(a, b, e);
        gemm_strided(
            d.c_out,
            d.c_in,
            sh.span,
            1.0,
            &w[koff..],
            d.c_in * kvol,
            kvol,
            &xp[s..],
            sh.vol,
            1,
            1.0,
            &mut yp,
            sh.vol,
            1,
        );
    });
    for (i, o, n) in sh.rows(d.c_out, d.output, [0; 3]) {
        yb[i..i + n].copy_from_slice(&yp[o..o + n]);
    }
}

fn conv_shifted_backward(
    d: &Dims,
    sh: &Shifted,
    w: &[f64],
    xb: &[f64],
    gy: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let kvol: usize = d.kernel.iter().product();
    let mut gyp = vec![0.0; d.c_out * sh.vol];
    for (i, o, n) in sh.rows(d.c_out, d.output, [0; 3]) {
        gyp[o..o + n].copy_from_slice(&gy[i..i + n]);
    }
    if let Some(gw) = gw {
        let mut xp = vec![0.0; d.c_in * sh.vol];
        for (i, o, n) in sh.rows(d.c_in, d.input, sh.pad) {
            xp[o..o + n].copy_from_slice(&xb[i..i + n]);
        }
        for_each_offset(d, |koff, a, b, e| {
            let s = sh.shift(a, b, e);
            gemm_strided(
                d.c_out,
                sh.span,
                d.c_in,
                1.0,
                &gyp,
                sh.vol,
                1,
                &xp[s..],
                1,
                sh.vol,
                1.0,
                &mut gw[koff..],
                d.c_in * kvol,
                kvol,
            );
        });
    }
    if let Some(gx) = gx {
        let mut gxp = vec![0.0; d.c_in * sh.vol];
        for_each_offset(d, |koff, a, b, e| {
            let s = sh.shift(a, b, e);
            gemm_strided(
                d.c_in,
                d.c_out,
                sh.span,
                1.0,
                &w[koff..],
                kvol,
                d.c_in * kvol,
                &gyp,
                sh.vol,
                1,
                1.0,
                &mut gxp[s..],
                sh.vol,
                1,
            );
        });
        for (i, o, n) in sh.rows(d.c_in, d.input, sh.pad) {
            for (g, v) in gx[i..i + n].iter_mut().zip(&gxp[o..o + n]) {
                *g += v;
            }
        }
    }
}

/// Calls `f(flat_offset, a, b, e)` for every kernel offset.
fn for_each_offset(d: &Dims, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [kd, kh, kw] = d.kernel;
    for a in 0..kd {
        for b in 0..kh {
            for e in 0..kw {
                f((a * kh + b) * kw + e, a, b, e);
            }
        }
    }
}

fn im2col(xb: &[f64], cols: &mut [f64], d: &Dims, geom: &ConvGeometry) {
    cols.fill(0.0);
    for_each_patch(d, geom, |i, c, n| {
        cols[c..c + n].copy_from_slice(&xb[i..i + n])
    });
}

fn col2im(cols: &[f64], gx: &mut [f64], d: &Dims, geom: &ConvGeometry) {
    for_each_patch(d, geom, |i, c, n| {
        for (g, v) in gx[i..i + n].iter_mut().zip(&cols[c..c + n]) {
            *g += v;
        }
    });
}

/// `y = w * x + bias` for `x: [n, c_in, D, H, W]` and `w: [c_out, c_in, kd, kh, kw]`.
pub fn conv3d(
    x: &DenseTensor,
    w: &DenseTensor,
    bias: Option<&DenseTensor>,
    geom: &ConvGeometry,
) -> Result<DenseTensor> {
    let d = dims(x, w, geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.c_out] {
            return Err(Error::shape(format!(
                "conv3d bias {:?} does not match {} output channels",
                b.shape(),
                d.c_out
            )));
        }
    }
    let (k, p) = (d.k(), d.p());
    let mut out = vec![0.0; d.n * d.c_out * p];
    let xin = d.c_in * d.in_vol();
    let shifted = Shifted::new(&d, geom);
    let mut cols = if shifted.is_some() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for b in 0..d.n {
        let xb = &x.data()[b * xin..(b + 1) * xin];
        let yb = &mut out[b * d.c_out * p..(b + 1) * d.c_out * p];
        match &shifted {
            Some(sh) => conv_shifted(&d, sh, w.data(), xb, yb),
            None => {
                im2col(xb, &mut cols, &d, geom);
                gemm(d.c_out, k, p, 1.0, w.data(), k, 1, &cols, p, 1, 0.0, yb);
            }
        }
        if let Some(bias) = bias {
            for (o, row) in yb.chunks_mut(p).enumerate() {
                let v = bias.data()[o];
                row.iter_mut().for_each(|y| *y += v);
            }
        }
    }
    DenseTensor::new(
        vec![d.n, d.c_out, d.output[0], d.output[1], d.output[2]],
        out,
    )
}

/// Gradients of `conv3d` with respect to its input and kernel, as requested.
pub fn conv3d_backward(
    x: &DenseTensor,
    w: &DenseTensor,
    grad_out: &DenseTensor,
    geom: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<DenseTensor>, Option<DenseTensor>)> {
    let d = dims(x, w, geom)?;
    let (k, p) = (d.k(), d.p());
    let expected = [d.n, d.c_out, d.output[0], d.output[1], d.output[2]];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv3d gradient {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let xin = d.c_in * d.in_vol();
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = need_kernel.then(|| vec![0.0; w.len()]);
    if let Some(sh) = Shifted::new(&d, geom) {
        for b in 0..d.n {
            conv_shifted_backward(
                &d,
                &sh,
                w.data(),
                &x.data()[b * xin..(b + 1) * xin],
                &grad_out.data()[b * d.c_out * p..(b + 1) * d.c_out * p],
                gx.as_mut().map(|g| &mut g[b * xin..(b + 1) * xin]),
                gw.as_deref_mut(),
            );
        }
        return Ok((
            gx.map(|g| DenseTensor::new(x.shape().to_vec(), g))
                .transpose()?,
            gw.map(|g| DenseTensor::new(w.shape().to_vec(), g))
                .transpose()?,
        ));
    }
    let mut cols = vec![0.0; k * p];
    for b in 0..d.n {
        let gy = &grad_out.data()[b * d.c_out * p..(b + 1) * d.c_out * p];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[b * xin..(b + 1) * xin], &mut cols, &d, geom);
            // gw += gy · colsᵀ
            gemm(d.c_out, p, k, 1.0, gy, p, 1, &cols, 1, p, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            // cols = wᵀ · gy
            gemm(k, d.c_out, p, 1.0, w.data(), 1, k, gy, p, 1, 0.0, &mut cols);
            col2im(&cols, &mut gx[b * xin..(b + 1) * xin], &d, geom);
        }
    }
    Ok((
        gx.map(|g| DenseTensor::new(x.shape().to_vec(), g))
            .transpose()?,
        gw.map(|g| DenseTensor::new(w.shape().to_vec(), g))
            .transpose()?,
    ))
}
