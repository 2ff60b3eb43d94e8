//! Matrix kernels over (1,1,rows,cols) tensors: the graph-convolution path.

use crate::error::{Error, Result};
use crate::meter::{self, FLOPS_TRANSCENDENTAL};
use crate::tensor::Tensor;

fn expect_matrix(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    let [n, c, r, k] = t.shape();
    if n != 1 || c != 1 {
        return Err(Error::ShapeMismatch {
            context,
            dimension: "leading dims (matrix view requires 1,1)",
            expected: 1,
            found: n * c,
        });
    }
    Ok((r, k))
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ak) = expect_matrix(a, "matmul")?;
    let (bk, bc) = expect_matrix(b, "matmul")?;
    if ak != bk {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            dimension: "inner dim",
            expected: ak,
            found: bk,
        });
    }
    let mut out = Tensor::matrix_zeros(ar, bc);
    let av = a.data();
    let bv = b.data();
    let ov = out.data_mut();
    for i in 0..ar {
        for l in 0..ak {
            let s = av[i * ak + l];
            let brow = l * bc;
            let orow = i * bc;
            for j in 0..bc {
                ov[orow + j] += s * bv[brow + j];
            }
        }
    }
    Ok(out)
}

/// Dense matrix product (r,k) x (k,c) -> (r,c).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out = matmul_raw(a, b)?;
    if meter::enabled() {
        meter::add(2 * (a.rows() * a.cols() * b.cols()) as u64);
    }
    Ok(out)
}

/// Backward of matmul: (da, db) = (g bᵀ, aᵀ g). Not metered: the FLOP
/// convention covers forward work only.
pub fn matmul_backward(output_grad: &Tensor, a: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let da = matmul_raw(output_grad, &transpose(b)?)?;
    let db = matmul_raw(&transpose(a)?, output_grad)?;
    Ok((da, db))
}

/// Matrix transpose.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix(a, "transpose")?;
    let mut out = Tensor::matrix_zeros(c, r);
    let av = a.data();
    let ov = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            ov[j * r + i] = av[i * c + j];
        }
    }
    Ok(out)
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix(m, "softmax_rows")?;
    if c == 0 {
        return Err(Error::InvalidGeometry {
            context: "softmax_rows",
            message: "zero columns".into(),
        });
    }
    let mut out = m.clone();
    out.grad = None;
    let v = out.data_mut();
    for i in 0..r {
        let row = &mut v[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    if meter::enabled() {
        meter::add(FLOPS_TRANSCENDENTAL * (r * c) as u64);
    }
    Ok(out)
}

/// Backward of row softmax given the forward output:
/// dx = s ⊙ (g − (g·s)).
pub fn softmax_rows_backward(output_grad: &Tensor, output: &Tensor) -> Tensor {
    let [_, _, r, c] = output.shape();
    let mut dx = output_grad.clone();
    dx.grad = None;
    let g = output_grad.data();
    let s = output.data();
    let d = dx.data_mut();
    for i in 0..r {
        let base = i * c;
        let mut dot = 0.0;
        for j in 0..c {
            dot += g[base + j] * s[base + j];
        }
        for j in 0..c {
            d[base + j] = s[base + j] * (g[base + j] - dot);
        }
    }
    dx
}

/// A + I for a square matrix.
pub fn add_identity(a: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix(a, "add_identity")?;
    if r != c {
        return Err(Error::ShapeMismatch {
            context: "add_identity",
            dimension: "columns (square required)",
            expected: r,
            found: c,
        });
    }
    let mut out = a.clone();
    out.grad = None;
    let v = out.data_mut();
    for i in 0..r {
        v[i * c + i] += 1.0;
    }
    if meter::enabled() {
        meter::add(r as u64);
    }
    Ok(out)
}

/// Row sums: (r,c) -> (r,1).
pub fn row_sum(a: &Tensor) -> Result<Tensor> {
    let (r, c) = expect_matrix(a, "row_sum")?;
    let mut out = Tensor::matrix_zeros(r, 1);
    let av = a.data();
    let ov = out.data_mut();
    for i in 0..r {
        let mut s = 0.0;
        for j in 0..c {
            s += av[i * c + j];
        }
        ov[i] = s;
    }
    if meter::enabled() {
        meter::add((r * c) as u64);
    }
    Ok(out)
}

/// Backward of row_sum: broadcast each row gradient across the row.
pub fn row_sum_backward(output_grad: &Tensor, cols: usize) -> Tensor {
    let [_, _, r, _] = output_grad.shape();
    let mut dx = Tensor::matrix_zeros(r, cols);
    let g = output_grad.data();
    let d = dx.data_mut();
    for i in 0..r {
        for j in 0..cols {
            d[i * cols + j] = g[i];
        }
    }
    dx
}
