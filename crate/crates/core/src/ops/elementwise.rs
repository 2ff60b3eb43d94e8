//! Elementwise and broadcast kernels.

use crate::error::{Error, Result};
use crate::meter::{self, FLOPS_RELU, FLOPS_TRANSCENDENTAL};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out.grad = None;
    if meter::enabled() {
        meter::add(FLOPS_RELU * input.len() as u64);
    }
    out
}

pub fn relu_backward(output_grad: &Tensor, input: &Tensor) -> Tensor {
    let mut dx = output_grad.clone();
    for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
        if *x <= 0.0 {
            *d = 0.0;
        }
    }
    dx.grad = None;
    dx
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    out.grad = None;
    if meter::enabled() {
        meter::add(FLOPS_TRANSCENDENTAL * input.len() as u64);
    }
    out
}

/// Backward of sigmoid given the forward *output*.
pub fn sigmoid_backward(output_grad: &Tensor, output: &Tensor) -> Tensor {
    let mut dx = output_grad.clone();
    for (d, s) in dx.data_mut().iter_mut().zip(output.data()) {
        *d *= s * (1.0 - s);
    }
    dx.grad = None;
    dx
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "add",
            dimension: "element count",
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut out = a.clone();
    for (o, bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    out.grad = None;
    if meter::enabled() {
        meter::add(a.len() as u64);
    }
    Ok(out)
}

/// Multiply by a scalar constant.
pub fn scale(input: &Tensor, factor: f64) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v *= factor;
    }
    out.grad = None;
    if meter::enabled() {
        meter::add(input.len() as u64);
    }
    out
}

/// Elementwise x^(-1/2). Inputs must be strictly positive.
pub fn rsqrt(input: &Tensor) -> Result<Tensor> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v <= 0.0 {
            return Err(Error::InvalidGeometry {
                context: "rsqrt",
                message: format!("non-positive input {v}"),
            });
        }
        *v = 1.0 / v.sqrt();
    }
    out.grad = None;
    if meter::enabled() {
        meter::add(FLOPS_TRANSCENDENTAL * input.len() as u64);
    }
    Ok(out)
}

/// Backward of rsqrt given the forward input: d/dx x^(-1/2) = -x^(-3/2)/2.
pub fn rsqrt_backward(output_grad: &Tensor, input: &Tensor) -> Tensor {
    let mut dx = output_grad.clone();
    for (d, x) in dx.data_mut().iter_mut().zip(input.data()) {
        *d *= -0.5 * x.powf(-1.5);
    }
    dx.grad = None;
    dx
}

/// True when `small`'s dims are each either equal to `big`'s or 1.
fn broadcast_compatible(big: [usize; 4], small: [usize; 4]) -> bool {
    big.iter().zip(small.iter()).all(|(b, s)| s == b || *s == 1)
}

/// Elementwise product where `b` broadcasts over `a` (each dim of `b` equals
/// `a`'s or is 1).
pub fn mul_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let ash = a.shape();
    let bsh = b.shape();
    if !broadcast_compatible(ash, bsh) {
        return Err(Error::ShapeMismatch {
            context: "mul_broadcast",
            dimension: "broadcast dims",
            expected: a.len(),
            found: b.len(),
        });
    }
    let mut out = Tensor::zeros(ash);
    let [n, c, h, w] = ash;
    let dst = out.data_mut();
    let av = a.data();
    let bv = b.data();
    for img in 0..n {
        let bn = if bsh[0] == 1 { 0 } else { img };
        for ch in 0..c {
            let bc = if bsh[1] == 1 { 0 } else { ch };
            for y in 0..h {
                let by = if bsh[2] == 1 { 0 } else { y };
                let arow = ((img * c + ch) * h + y) * w;
                let brow = ((bn * bsh[1] + bc) * bsh[2] + by) * bsh[3];
                for x in 0..w {
                    let bx = if bsh[3] == 1 { 0 } else { x };
                    dst[arow + x] = av[arow + x] * bv[brow + bx];
                }
            }
        }
    }
    if meter::enabled() {
        meter::add(a.len() as u64);
    }
    Ok(out)
}

/// Backward of `mul_broadcast`: (da, db) with `db` reduced over broadcast dims.
pub fn mul_broadcast_backward(output_grad: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let ash = a.shape();
    let bsh = b.shape();
    let [n, c, h, w] = ash;
    let mut da = Tensor::zeros(ash);
    let mut db = Tensor::zeros(bsh);
    let g = output_grad.data();
    let av = a.data();
    let bv = b.data();
    {
        let dav = da.data_mut();
        let dbv = db.data_mut();
        for img in 0..n {
            let bn = if bsh[0] == 1 { 0 } else { img };
            for ch in 0..c {
                let bc = if bsh[1] == 1 { 0 } else { ch };
                for y in 0..h {
                    let by = if bsh[2] == 1 { 0 } else { y };
                    let arow = ((img * c + ch) * h + y) * w;
                    let brow = ((bn * bsh[1] + bc) * bsh[2] + by) * bsh[3];
                    for x in 0..w {
                        let bx = if bsh[3] == 1 { 0 } else { x };
                        dav[arow + x] = g[arow + x] * bv[brow + bx];
                        dbv[brow + bx] += g[arow + x] * av[arow + x];
                    }
                }
            }
        }
    }
    (da, db)
}
