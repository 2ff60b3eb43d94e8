//! Dense 4-D tensor (batch, channel, height, width) of 64-bit floats.
//!
//! Everything in the engine is built on this one value type. Matrices for
//! the graph-convolution path are tensors of shape `(1, 1, rows, cols)`.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Shape as (N, C, H, W).
pub type Shape = [usize; 4];

/// Magic header of the binary tensor dump format.
pub const TENSOR_DUMP_MAGIC: &[u8; 4] = b"MFPT";
/// Version of the binary tensor dump format.
pub const TENSOR_DUMP_VERSION: u32 = 1;

/// Dense row-major 4-D array of f64 with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    /// Gradient of the same length as `data`; populated by backward passes.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Zero-filled tensor.
    pub fn zeros(shape: Shape) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
            grad: None,
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: Shape, value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
            grad: None,
        }
    }

    /// Build from an existing buffer. The buffer length must equal the
    /// product of the shape dimensions.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                dimension: "data length",
                expected: len,
                found: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// 2-D matrix stored as a (1, 1, rows, cols) tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec([1, 1, rows, cols], data)
    }

    /// Zero matrix of shape (1, 1, rows, cols).
    pub fn matrix_zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::zeros([1, 1, rows, cols])
    }

    /// Identity matrix of order n.
    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros([1, 1, n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Tensor filled from a seeded uniform distribution over [lo, hi).
    pub fn random(shape: Shape, lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Row count when viewed as a matrix (shape (1,1,r,c)).
    pub fn rows(&self) -> usize {
        debug_assert!(self.shape[0] == 1 && self.shape[1] == 1);
        self.shape[2]
    }

    /// Column count when viewed as a matrix (shape (1,1,r,c)).
    pub fn cols(&self) -> usize {
        debug_assert!(self.shape[0] == 1 && self.shape[1] == 1);
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat index of (n, c, y, x).
    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// Matrix element (rows/cols view of a (1,1,r,c) tensor).
    #[inline]
    pub fn m(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[3] + j]
    }

    #[inline]
    pub fn set_m(&mut self, i: usize, j: usize, v: f64) {
        let w = self.shape[3];
        self.data[i * w + j] = v;
    }

    /// Reinterpret the buffer under a new shape of identical length.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshaped",
                dimension: "element count",
                expected: self.data.len(),
                found: len,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
            grad: None,
        })
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Allocate (or keep) a zeroed gradient buffer.
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    /// Write the binary dump format: magic, version, rank, dims, payload.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(TENSOR_DUMP_MAGIC)?;
        w.write_all(&TENSOR_DUMP_VERSION.to_le_bytes())?;
        w.write_all(&4u32.to_le_bytes())?;
        for d in self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Read the binary dump format written by [`Tensor::write_dump`].
    pub fn read_dump<R: Read>(r: &mut R, origin: &str) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::io(origin, e))?;
        if &magic != TENSOR_DUMP_MAGIC {
            return Err(Error::format(origin, "bad magic, expected MFPT"));
        }
        let version = read_u32(r, origin)?;
        if version != TENSOR_DUMP_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported version {version}"),
            ));
        }
        let rank = read_u32(r, origin)?;
        if rank != 4 {
            return Err(Error::format(origin, format!("expected rank 4, got {rank}")));
        }
        let mut shape = [0usize; 4];
        for d in shape.iter_mut() {
            *d = read_u64(r, origin)? as usize;
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0.0f64; len];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| Error::io(origin, e))?;
            *v = f64::from_le_bytes(buf);
        }
        Tensor::from_vec(shape, data)
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_dump(&mut f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_dump(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Tensor::read_dump(&mut f, &path.display().to_string())
    }
}

fn read_u32<R: Read>(r: &mut R, origin: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(origin, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, origin: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(origin, e))?;
    Ok(u64::from_le_bytes(b))
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Plain k×k convolution, stride 1, padding chosen to preserve shape for odd k.
    pub fn same(kernel: usize, in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: ((kernel - 1) / 2, (kernel - 1) / 2),
            dilation: (1, 1),
            in_channels,
            out_channels,
            has_bias: true,
        }
    }

    /// 1×1 projection.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> ConvSpec {
        ConvSpec::same(1, in_channels, out_channels)
    }

    pub fn with_stride(mut self, stride: usize) -> ConvSpec {
        self.stride = (stride, stride);
        self
    }

    pub fn with_dilation(mut self, dh: usize, dw: usize) -> ConvSpec {
        self.dilation = (dh, dw);
        self
    }

    pub fn with_padding(mut self, ph: usize, pw: usize) -> ConvSpec {
        self.padding = (ph, pw);
        self
    }

    pub fn without_bias(mut self) -> ConvSpec {
        self.has_bias = false;
        self
    }

    /// Checks the component invariants (kernel/stride/dilation ≥ 1, channels ≥ 1).
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("kernel height", self.kernel.0),
            ("kernel width", self.kernel.1),
            ("stride height", self.stride.0),
            ("stride width", self.stride.1),
            ("dilation height", self.dilation.0),
            ("dilation width", self.dilation.1),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidGeometry {
                    context: "ConvSpec",
                    message: format!("{name} must be >= 1"),
                });
            }
        }
        Ok(())
    }

    /// Output spatial size for an input of (h, w):
    /// `floor((H + 2p - d(k-1) - 1) / s) + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0);
        let ow = conv_out_dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::InvalidGeometry {
                context: "conv2d",
                message: format!(
                    "non-positive output dims for input {h}x{w} with kernel {:?} stride {:?} padding {:?} dilation {:?}",
                    self.kernel, self.stride, self.padding, self.dilation
                ),
            }),
        }
    }

    /// Trainable scalar count of the convolution (weight plus optional bias).
    pub fn param_count(&self) -> u64 {
        let w = (self.out_channels * self.in_channels * self.kernel.0 * self.kernel.1) as u64;
        if self.has_bias {
            w + self.out_channels as u64
        } else {
            w
        }
    }
}

fn conv_out_dim(input: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
    let span = d.checked_mul(k - 1)?;
    let numer = (input + 2 * p).checked_sub(span + 1)?;
    Some(numer / s + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("data length"));
    }

    #[test]
    fn offsets_are_row_major() {
        let mut t = Tensor::zeros([2, 3, 4, 5]);
        t.set(1, 2, 3, 4, 9.0);
        let offset = ((t.channels() + 2) * t.height() + 3) * t.width() + 4;
        assert_eq!(t.data()[offset], 9.0);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = crate::rng::Rng::new(42);
        let t = Tensor::random([2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        // magic, version, rank, four u64 dims, then payload
        assert_eq!(&buf[..4], b"MFPT");
        assert_eq!(buf.len(), 4 + 4 + 4 + 32 + t.len() * 8);
        let back = Tensor::read_dump(&mut buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        let err = Tensor::read_dump(&mut buf.as_slice(), "mem").unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn conv_output_formula() {
        // 8x8 input, 3x3 kernel, dilation 2, padding 2, stride 1 -> 8x8
        let spec = ConvSpec::same(3, 1, 1).with_dilation(2, 2).with_padding(2, 2);
        assert_eq!(spec.output_hw(8, 8).unwrap(), (8, 8));
    }

    #[test]
    fn conv_output_rejects_degenerate() {
        let spec = ConvSpec {
            kernel: (5, 5),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            in_channels: 1,
            out_channels: 1,
            has_bias: false,
        };
        assert!(spec.output_hw(3, 3).is_err());
    }

    #[test]
    fn shape_preserving_padding_for_any_dilation() {
        for d in [1usize, 2, 4, 8, 16] {
            for k in [1usize, 3, 5] {
                let spec = ConvSpec::same(k, 1, 1)
                    .with_dilation(d, d)
                    .with_padding(d * (k - 1) / 2, d * (k - 1) / 2);
                assert_eq!(spec.output_hw(32, 48).unwrap(), (32, 48), "k={k} d={d}");
            }
        }
    }
}
