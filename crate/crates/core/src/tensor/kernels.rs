//! Raw numeric kernels shared by the tape and the tape-free inference path.
//!
//! Convolutions are stride 1 with zero "same" padding. Inputs are copied into a
//! padded plane of width `w + 2r` so that every kernel tap becomes one
//! contiguous multiply-add over the whole plane; the `2r` extra columns of the
//! accumulator are discarded on the way out.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weights: &[usize], bias: &[usize]) -> Result<Self> {
        let (c_in, h, w) = match input {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(Error::shape(format!("conv2d input must be [C,H,W], got {input:?}"))),
        };
        let (c_out, wc_in, k) = match weights {
            [o, i, kh, kw] if kh == kw => (*o, *i, *kh),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d weights must be [C_out,C_in,k,k], got {weights:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d input has {c_in} channels but weights expect {wc_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel size {k} must be odd")));
        }
        if bias != [c_out] {
            return Err(Error::shape(format!(
                "conv2d bias must be [{c_out}], got {bias:?}"
            )));
        }
        Ok(ConvGeom { c_in, c_out, h, w, k })
    }

    fn r(&self) -> usize {
        self.k / 2
    }

    fn wp(&self) -> usize {
        self.w + 2 * self.r()
    }

    /// Length of one padded input plane, with slack so the last tap never overruns.
    fn plane(&self) -> usize {
        (self.h + 2 * self.r()) * self.wp() + self.k
    }

    /// Length of one accumulator plane (`h` rows of padded width).
    fn acc_len(&self) -> usize {
        self.h * self.wp()
    }
}

fn pad(g: &ConvGeom, x: &[f32], channels: usize) -> Vec<f32> {
    let (r, wp, plane) = (g.r(), g.wp(), g.plane());
    let mut out = vec![0.0f32; channels * plane];
    for c in 0..channels {
        for y in 0..g.h {
            let src = &x[(c * g.h + y) * g.w..(c * g.h + y + 1) * g.w];
            let dst = c * plane + (y + r) * wp + r;
            out[dst..dst + g.w].copy_from_slice(src);
        }
    }
    out
}

#[inline]
fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
fn axpy_f64(dst: &mut [f64], a: f32, src: &[f32]) {
    let a = a as f64;
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * *s as f64;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Eight independent f64 lanes; gradients must stay accurate even when
    // they are tiny next to the terms being summed.
    let mut lanes = [0.0f64; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            lanes[i] += xa[i] as f64 * xb[i] as f64;
        }
    }
    let mut total: f64 = lanes.iter().sum();
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        total += (*xa as f64) * (*xb as f64);
    }
    total
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let (k, wp, plane, acc_len) = (g.k, g.wp(), g.plane(), g.acc_len());
    let xp = pad(g, x, g.c_in);
    let mut out = vec![0.0f32; g.c_out * g.h * g.w];
    let mut acc = vec![0.0f32; acc_len];
    for co in 0..g.c_out {
        acc.iter_mut().for_each(|a| *a = b[co]);
        for ci in 0..g.c_in {
            let wbase = (co * g.c_in + ci) * k * k;
            let src = &xp[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    axpy(&mut acc, w[wbase + ky * k + kx], &src[off..off + acc_len]);
                }
            }
        }
        for y in 0..g.h {
            out[(co * g.h + y) * g.w..(co * g.h + y + 1) * g.w]
                .copy_from_slice(&acc[y * wp..y * wp + g.w]);
        }
    }
    out
}

/// Gradients of a conv2d with respect to input, weights and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    need_input: bool,
) -> ConvGrads {
    let (k, r, wp, plane, acc_len) = (g.k, g.r(), g.wp(), g.plane(), g.acc_len());
    let xp = pad(g, x, g.c_in);

    // Upstream gradient in accumulator layout, zero in the discarded columns.
    let mut gp = vec![0.0f32; g.c_out * acc_len];
    let mut gbias = vec![0.0f32; g.c_out];
    for co in 0..g.c_out {
        let mut s = 0.0f64;
        for y in 0..g.h {
            let row = &gout[(co * g.h + y) * g.w..(co * g.h + y + 1) * g.w];
            gp[co * acc_len + y * wp..co * acc_len + y * wp + g.w].copy_from_slice(row);
            s += row.iter().map(|&v| v as f64).sum::<f64>();
        }
        gbias[co] = s as f32;
    }

    let mut gw = vec![0.0f32; w.len()];
    for co in 0..g.c_out {
        let gco = &gp[co * acc_len..(co + 1) * acc_len];
        for ci in 0..g.c_in {
            let src = &xp[ci * plane..(ci + 1) * plane];
            let wbase = (co * g.c_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    gw[wbase + ky * k + kx] = dot(gco, &src[off..off + acc_len]) as f32;
                }
            }
        }
    }

    let input = need_input.then(|| {
        let mut gxp = vec![0.0f64; g.c_in * plane];
        for ci in 0..g.c_in {
            let dst = &mut gxp[ci * plane..(ci + 1) * plane];
            for co in 0..g.c_out {
                let gco = &gp[co * acc_len..(co + 1) * acc_len];
                let wbase = (co * g.c_in + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let off = ky * wp + kx;
                        axpy_f64(&mut dst[off..off + acc_len], w[wbase + ky * k + kx], gco);
                    }
                }
            }
        }
        let mut gx = vec![0.0f32; g.c_in * g.h * g.w];
        for ci in 0..g.c_in {
            for y in 0..g.h {
                let src = ci * plane + (y + r) * wp + r;
                for (d, v) in gx[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w]
                    .iter_mut()
                    .zip(&gxp[src..src + g.w])
                {
                    *d = *v as f32;
                }
            }
        }
        gx
    });

    ConvGrads {
        input,
        weights: gw,
        bias: gbias,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.5).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.1).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn geometry_validation() {
        assert!(ConvGeom::new(&[2, 5, 5], &[4, 2, 3, 3], &[4]).is_ok());
        assert!(ConvGeom::new(&[3, 5, 5], &[4, 2, 3, 3], &[4]).is_err());
        assert!(ConvGeom::new(&[2, 5, 5], &[4, 2, 2, 2], &[4]).is_err());
        assert!(ConvGeom::new(&[2, 5, 5], &[4, 2, 3, 3], &[3]).is_err());
    }
}
