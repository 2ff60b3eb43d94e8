//! Average pooling: global and adaptive (PyTorch-style bin edges).

use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::Tensor;

/// Bin `i` of `out` bins over `len` covers [floor(i*len/out), ceil((i+1)*len/out)).
#[inline]
fn bin_bounds(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// Adaptive average pooling to an (out_h, out_w) grid.
pub fn adaptive_avg_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidGeometry {
            context: "adaptive_avg_pool",
            message: "zero output dims".into(),
        });
    }
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::InvalidGeometry {
            context: "adaptive_avg_pool",
            message: "zero-size spatial input".into(),
        });
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = input.data();
    let dst = out.data_mut();
    let mut summed: u64 = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            let obase = (img * c + ch) * out_h * out_w;
            for oy in 0..out_h {
                let (y0, y1) = bin_bounds(oy, h, out_h);
                for ox in 0..out_w {
                    let (x0, x1) = bin_bounds(ox, w, out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let row = base + y * w;
                        for x in x0..x1 {
                            acc += src[row + x];
                        }
                    }
                    let size = ((y1 - y0) * (x1 - x0)) as f64;
                    dst[obase + oy * out_w + ox] = acc / size;
                    summed += ((y1 - y0) * (x1 - x0)) as u64;
                }
            }
        }
    }
    if meter::enabled() {
        meter::add(summed + (n * c * out_h * out_w) as u64);
    }
    Ok(out)
}

/// Analytic FLOP cost of one adaptive pool call (1 per summed element plus
/// 1 per output element), matching what the kernel meters.
pub fn adaptive_avg_pool_flops(n: usize, c: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> u64 {
    let mut summed: u64 = 0;
    for oy in 0..out_h {
        let (y0, y1) = bin_bounds(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1) = bin_bounds(ox, w, out_w);
            summed += ((y1 - y0) * (x1 - x0)) as u64;
        }
    }
    (n * c) as u64 * summed + (n * c * out_h * out_w) as u64
}

/// Backward of adaptive average pooling.
pub fn adaptive_avg_pool_backward(output_grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, oh, ow] = output_grad.shape();
    let mut dinput = Tensor::zeros([n, c, in_h, in_w]);
    let g = output_grad.data();
    let dx = dinput.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * in_h * in_w;
            let obase = (img * c + ch) * oh * ow;
            for oy in 0..oh {
                let (y0, y1) = bin_bounds(oy, in_h, oh);
                for ox in 0..ow {
                    let (x0, x1) = bin_bounds(ox, in_w, ow);
                    let share = g[obase + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        let row = base + y * in_w;
                        for x in x0..x1 {
                            dx[row + x] += share;
                        }
                    }
                }
            }
        }
    }
    dinput
}

/// Global average pooling: (N,C,H,W) -> (N,C,1,1).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    adaptive_avg_pool(input, 1, 1)
}

pub fn global_avg_pool_backward(output_grad: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    adaptive_avg_pool_backward(output_grad, in_h, in_w)
}
