//! Direct 2-D convolution, forward and backward.
//!
//! The input is copied into a zero-padded scratch buffer once per call so
//! the tap loops run unconditionally; the backward pass uses the same index
//! mapping with the loops transposed.

use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::{ConvSpec, Tensor};

/// Copy one (N,C,H,W) tensor into a zero-padded (N,C,H+2ph,W+2pw) buffer.
fn pad_input(input: &Tensor, ph: usize, pw: usize) -> (Vec<f64>, usize, usize) {
    let [n, c, h, w] = input.shape();
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![0.0f64; n * c * hp * wp];
    let src = input.data();
    for img in 0..n {
        for ch in 0..c {
            let src_base = (img * c + ch) * h * w;
            let dst_base = (img * c + ch) * hp * wp + ph * wp + pw;
            for y in 0..h {
                let s = src_base + y * w;
                let d = dst_base + y * wp;
                out[d..d + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    (out, hp, wp)
}

fn check_conv_args(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Result<()> {
    spec.validate()?;
    let [_, c, _, _] = input.shape();
    let [wo, wi, wkh, wkw] = weight.shape();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "input channels",
            expected: spec.in_channels,
            found: c,
        });
    }
    if wo != spec.out_channels {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "weight out_channels",
            expected: spec.out_channels,
            found: wo,
        });
    }
    if wi != spec.in_channels {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "weight in_channels",
            expected: spec.in_channels,
            found: wi,
        });
    }
    if wkh != spec.kernel.0 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "weight kernel height",
            expected: spec.kernel.0,
            found: wkh,
        });
    }
    if wkw != spec.kernel.1 {
        return Err(Error::ShapeMismatch {
            context: "conv2d",
            dimension: "weight kernel width",
            expected: spec.kernel.1,
            found: wkw,
        });
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                dimension: "bias length",
                expected: spec.out_channels,
                found: b.len(),
            });
        }
    }
    Ok(())
}

/// Direct convolution. Weight layout is (out_channels, in_channels, kh, kw).
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    check_conv_args(input, weight, bias, spec)?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = spec.output_hw(h, w)?;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let co = spec.out_channels;

    let (padded, _hp, wp) = pad_input(input, spec.padding.0, spec.padding.1);
    let wdat = weight.data();
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let odat = out.data_mut();

    for img in 0..n {
        for oc in 0..co {
            let out_base = (img * co + oc) * oh * ow;
            for ic in 0..c {
                let in_base = (img * c + ic) * (h + 2 * spec.padding.0) * wp;
                let w_base = ((oc * c + ic) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let ws = wdat[w_base + ky * kw + kx];
                        for oy in 0..oh {
                            let row = in_base + (oy * sh + ky * dh) * wp + kx * dw;
                            let orow = out_base + oy * ow;
                            for ox in 0..ow {
                                odat[orow + ox] += ws * padded[row + ox * sw];
                            }
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bs = b[oc];
                for v in odat[out_base..out_base + oh * ow].iter_mut() {
                    *v += bs;
                }
            }
        }
    }

    if meter::enabled() {
        meter::add(conv2d_flops(spec, n, oh, ow));
    }
    Ok(out)
}

/// Analytic FLOP cost of one conv2d call (2 per tap, +1 per output element with bias).
pub fn conv2d_flops(spec: &ConvSpec, batch: usize, oh: usize, ow: usize) -> u64 {
    let taps = (spec.kernel.0 * spec.kernel.1 * spec.in_channels) as u64;
    let outputs = (batch * spec.out_channels * oh * ow) as u64;
    2 * taps * outputs + if spec.has_bias { outputs } else { 0 }
}

/// Gradients of conv2d: (input_grad, weight_grad, bias_grad).
pub fn conv2d_backward(
    output_grad: &Tensor,
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor, Option<Vec<f64>>)> {
    check_conv_args(input, weight, None, spec)?;
    let [n, c, h, w] = input.shape();
    let (oh, ow) = spec.output_hw(h, w)?;
    let co = spec.out_channels;
    let expect = [n, co, oh, ow];
    if output_grad.shape() != expect {
        return Err(Error::ShapeMismatch {
            context: "conv2d_backward",
            dimension: "output_grad elements",
            expected: expect.iter().product(),
            found: output_grad.len(),
        });
    }
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (dh, dw) = spec.dilation;
    let (ph, pw) = spec.padding;

    let (padded, hp, wp) = pad_input(input, ph, pw);
    let gdat = output_grad.data();
    let wdat = weight.data();

    let mut dweight = Tensor::zeros(weight.shape());
    let dwdat = dweight.data_mut();
    let mut dpad = vec![0.0f64; n * c * hp * wp];

    for img in 0..n {
        for oc in 0..co {
            let out_base = (img * co + oc) * oh * ow;
            for ic in 0..c {
                let in_base = (img * c + ic) * hp * wp;
                let w_base = ((oc * c + ic) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut wsum = 0.0;
                        let ws = wdat[w_base + ky * kw + kx];
                        for oy in 0..oh {
                            let row = in_base + (oy * sh + ky * dh) * wp + kx * dw;
                            let orow = out_base + oy * ow;
                            for ox in 0..ow {
                                let g = gdat[orow + ox];
                                wsum += g * padded[row + ox * sw];
                                dpad[row + ox * sw] += g * ws;
                            }
                        }
                        dwdat[w_base + ky * kw + kx] += wsum;
                    }
                }
            }
        }
    }

    // crop the padded input gradient back to (N,C,H,W)
    let mut dinput = Tensor::zeros([n, c, h, w]);
    let ddat = dinput.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let dst_base = (img * c + ch) * h * w;
            let src_base = (img * c + ch) * hp * wp + ph * wp + pw;
            for y in 0..h {
                let d = dst_base + y * w;
                let s = src_base + y * wp;
                ddat[d..d + w].copy_from_slice(&dpad[s..s + w]);
            }
        }
    }

    let dbias = if spec.has_bias {
        let mut db = vec![0.0f64; co];
        for img in 0..n {
            for (oc, slot) in db.iter_mut().enumerate() {
                let out_base = (img * co + oc) * oh * ow;
                *slot += gdat[out_base..out_base + oh * ow].iter().sum::<f64>();
            }
        }
        Some(db)
    } else {
        None
    };

    Ok((dinput, dweight, dbias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Independent six-nested-loop direct-summation oracle.
    fn conv_oracle(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, spec: &ConvSpec) -> Tensor {
        let [n, c, h, w] = input.shape();
        let (oh, ow) = spec.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros([n, spec.out_channels, oh, ow]);
        for img in 0..n {
            for oc in 0..spec.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[oc]);
                        for ic in 0..c {
                            for ky in 0..spec.kernel.0 {
                                for kx in 0..spec.kernel.1 {
                                    let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                                        - spec.padding.0 as isize;
                                    let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                                        - spec.padding.1 as isize;
                                    if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                        acc += input.at(img, ic, iy as usize, ix as usize)
                                            * weight.at(oc, ic, ky, kx);
                                    }
                                }
                            }
                        }
                        out.set(img, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let input = Tensor::full([1, 1, 4, 4], 1.0);
        let weight = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = ConvSpec {
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
            in_channels: 1,
            out_channels: 1,
            has_bias: false,
        };
        let out = conv2d(&input, &weight, None, &spec).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn dilated_same_padding_preserves_size() {
        let mut rng = Rng::new(1);
        let input = Tensor::random([1, 1, 8, 8], -1.0, 1.0, &mut rng);
        let weight = Tensor::random([1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same(3, 1, 1).with_dilation(2, 2).with_padding(2, 2).without_bias();
        let out = conv2d(&input, &weight, None, &spec).unwrap();
        assert_eq!(out.shape(), [1, 1, 8, 8]);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = Rng::new(7);
        let input = Tensor::random([1, 3, 5, 5], -1.0, 1.0, &mut rng);
        let weight = Tensor::random([2, 3, 3, 3], -1.0, 1.0, &mut rng);
        let bias = vec![0.3, -0.7];
        let spec = ConvSpec::same(3, 3, 2);
        let out = conv2d(&input, &weight, Some(&bias), &spec).unwrap();
        let want = conv_oracle(&input, &weight, Some(&bias), &spec);
        assert_eq!(out.shape(), want.shape());
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn oracle_agreement_over_strides_and_dilations() {
        let mut rng = Rng::new(70);
        for (stride, dil, pad) in [(1, 1, 0), (2, 1, 1), (1, 2, 2), (2, 3, 3), (3, 1, 1)] {
            let input = Tensor::random([2, 2, 9, 11], -1.0, 1.0, &mut rng);
            let weight = Tensor::random([3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let spec = ConvSpec::same(3, 2, 3)
                .with_stride(stride)
                .with_dilation(dil, dil)
                .with_padding(pad, pad)
                .without_bias();
            let out = conv2d(&input, &weight, None, &spec).unwrap();
            let want = conv_oracle(&input, &weight, None, &spec);
            for (a, b) in out.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::zeros([1, 2, 4, 4]);
        let weight = Tensor::zeros([1, 3, 1, 1]);
        let spec = ConvSpec::pointwise(3, 1);
        let err = conv2d(&input, &weight, None, &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn linearity_in_input() {
        let mut rng = Rng::new(9);
        let x = Tensor::random([1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::random([1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let weight = Tensor::random([2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same(3, 2, 2).without_bias();
        let (alpha, beta) = (0.7, -1.3);
        let mut mix = x.clone();
        for (m, yv) in mix.data_mut().iter_mut().zip(y.data()) {
            *m = alpha * *m + beta * yv;
        }
        let out_mix = conv2d(&mix, &weight, None, &spec).unwrap();
        let out_x = conv2d(&x, &weight, None, &spec).unwrap();
        let out_y = conv2d(&y, &weight, None, &spec).unwrap();
        for i in 0..out_mix.len() {
            let want = alpha * out_x.data()[i] + beta * out_y.data()[i];
            assert!((out_mix.data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_zero_grad_gives_zero() {
        let mut rng = Rng::new(2);
        let input = Tensor::random([1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let weight = Tensor::random([2, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = ConvSpec::same(3, 2, 2);
        let og = Tensor::zeros([1, 2, 4, 4]);
        let (di, dw, db) = conv2d_backward(&og, &input, &weight, &spec).unwrap();
        assert!(di.data().iter().all(|v| *v == 0.0));
        assert!(dw.data().iter().all(|v| *v == 0.0));
        assert!(db.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_scalar_case_is_outer_product() {
        // 1x1 conv on a 1x1 image: dW = g * x, dX = g * w.
        let input = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap();
        let weight = Tensor::from_vec([1, 1, 1, 1], vec![-2.0]).unwrap();
        let og = Tensor::from_vec([1, 1, 1, 1], vec![5.0]).unwrap();
        let spec = ConvSpec::pointwise(1, 1).without_bias();
        let (di, dw, _) = conv2d_backward(&og, &input, &weight, &spec).unwrap();
        assert_eq!(dw.data()[0], 15.0);
        assert_eq!(di.data()[0], -10.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let x = Tensor::random([1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::random([3, 2, 3, 3], -0.5, 0.5, &mut rng);
        let b = Tensor::random([1, 3, 1, 1], -0.2, 0.2, &mut rng);
        let spec = ConvSpec::same(3, 2, 3).with_stride(2).with_dilation(2, 2).with_padding(2, 2);
        let err = crate::gradcheck::check_tape_fn(
            |t, l| t.conv2d(l[0], l[1], Some(l[2]), spec),
            &[x, w, b],
            &crate::gradcheck::GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn flops_metered_match_formula() {
        let mut rng = Rng::new(5);
        let input = Tensor::random([2, 3, 8, 8], -1.0, 1.0, &mut rng);
        let weight = Tensor::random([4, 3, 3, 3], -1.0, 1.0, &mut rng);
        let bias = vec![0.0; 4];
        let spec = ConvSpec::same(3, 3, 4).with_stride(2);
        crate::meter::start();
        let out = conv2d(&input, &weight, Some(&bias), &spec).unwrap();
        let measured = crate::meter::stop();
        let [n, _, oh, ow] = out.shape();
        assert_eq!(measured, conv2d_flops(&spec, n, oh, ow));
        assert_eq!(measured, 2 * 27 * (2 * 4 * 4 * 4) as u64 + (2 * 4 * 4 * 4) as u64);
    }
}
