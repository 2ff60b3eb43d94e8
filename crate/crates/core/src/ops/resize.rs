//! Bilinear resize with half-pixel centers (align-corners = false).
//!
//! Source coordinate: s = (t + 0.5) * (in / out) - 0.5, clamped to [0, in-1].
//! Interpolation uses the lerp form a + f*(b - a) so constant inputs are
//! preserved exactly and same-size resize is the identity.

use crate::error::{Error, Result};
use crate::meter::{self, FLOPS_BILINEAR};
use crate::tensor::Tensor;

struct Axis {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_map(in_len: usize, out_len: usize) -> Axis {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for t in 0..out_len {
        let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let f = s.floor();
        let i0 = f as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        lo.push(i0);
        hi.push(i1);
        frac.push(s - f);
    }
    Axis { lo, hi, frac }
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    a + f * (b - a)
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidGeometry {
            context: "bilinear_resize",
            message: "zero target dims".into(),
        });
    }
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidGeometry {
            context: "bilinear_resize",
            message: "zero-size spatial input".into(),
        });
    }
    let ya = axis_map(h, out_h);
    let xa = axis_map(w, out_w);
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = input.data();
    let dst = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * out_h * out_w;
            for oy in 0..out_h {
                let r0 = base + ya.lo[oy] * w;
                let r1 = base + ya.hi[oy] * w;
                let fy = ya.frac[oy];
                let orow = obase + oy * out_w;
                for ox in 0..out_w {
                    let (x0, x1, fx) = (xa.lo[ox], xa.hi[ox], xa.frac[ox]);
                    let top = lerp(src[r0 + x0], src[r0 + x1], fx);
                    let bot = lerp(src[r1 + x0], src[r1 + x1], fx);
                    dst[orow + ox] = lerp(top, bot, fy);
                }
            }
        }
    }
    if meter::enabled() {
        meter::add(FLOPS_BILINEAR * (n * c * out_h * out_w) as u64);
    }
    Ok(out)
}

/// Backward of bilinear resize: scatter each output gradient onto its four
/// source taps with the interpolation weights.
pub fn bilinear_resize_backward(output_grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, oh, ow] = output_grad.shape();
    let ya = axis_map(in_h, oh);
    let xa = axis_map(in_w, ow);
    let mut dinput = Tensor::zeros([n, c, in_h, in_w]);
    let g = output_grad.data();
    let dx = dinput.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * in_h * in_w;
            let obase = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                let (y0, y1, fy) = (ya.lo[oy], ya.hi[oy], ya.frac[oy]);
                let orow = obase + oy * ow;
                for ox in 0..ow {
                    let (x0, x1, fx) = (xa.lo[ox], xa.hi[ox], xa.frac[ox]);
                    let gv = g[orow + ox];
                    dx[base + y0 * in_w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dx[base + y0 * in_w + x1] += gv * (1.0 - fy) * fx;
                    dx[base + y1 * in_w + x0] += gv * fy * (1.0 - fx);
                    dx[base + y1 * in_w + x1] += gv * fy * fx;
                }
            }
        }
    }
    dinput
}
