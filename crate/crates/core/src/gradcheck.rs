//! Central finite-difference gradient checking.
//!
//! The checked function maps a list of tensors to a scalar; analytic
//! gradients come from the same closure when asked for. Large inputs are
//! checked on a seeded coordinate sample so composite-block and whole-model
//! checks stay fast.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Settings for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step. Must lie in [1e-6, 1e-3].
    pub eps: f64,
    /// Coordinates where both the analytic and the numeric gradient are
    /// below this magnitude count as agreeing: central differences cannot
    /// resolve gradients under their own cancellation noise (a conv bias
    /// feeding batch norm has an exactly-zero gradient, for example).
    pub atol: f64,
    /// Upper bound on checked coordinates per input tensor.
    pub max_coords_per_input: usize,
    /// Seed for coordinate sampling and reduction weights.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            atol: 1e-6,
            max_coords_per_input: 48,
            seed: 0x5eed,
        }
    }
}

/// Relative error with denominator max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients against central finite differences.
///
/// `f(inputs, with_grad)` returns the scalar value and, when `with_grad`,
/// one gradient tensor per input. Returns the maximum relative error over
/// all checked coordinates.
pub fn grad_check<F>(f: &mut F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<f64>
where
    F: FnMut(&[Tensor], bool) -> Result<(f64, Option<Vec<Tensor>>)>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::InvalidConfig {
            field: "eps".into(),
            message: format!("{} outside [1e-6, 1e-3]", cfg.eps),
        });
    }
    for (i, t) in inputs.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::NonFinite {
                location: format!("grad_check input {i}"),
            });
        }
    }

    let (base, analytic) = f(inputs, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            location: "grad_check base value".into(),
        });
    }
    let analytic = analytic.ok_or_else(|| Error::InvalidConfig {
        field: "grad_check closure".into(),
        message: "no analytic gradients returned".into(),
    })?;
    if analytic.len() != inputs.len() {
        return Err(Error::ShapeMismatch {
            context: "grad_check",
            dimension: "gradient count",
            expected: inputs.len(),
            found: analytic.len(),
        });
    }
    for (i, (g, x)) in analytic.iter().zip(inputs).enumerate() {
        if g.shape() != x.shape() {
            return Err(Error::ShapeMismatch {
                context: "grad_check",
                dimension: "gradient elements",
                expected: x.len(),
                found: g.len(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite {
                location: format!("grad_check analytic gradient {i}"),
            });
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut rng = Rng::from_seed_index(cfg.seed, 0xfd);
    let mut max_rel = 0.0f64;
    for i in 0..inputs.len() {
        let len = inputs[i].len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_input {
            (0..len).collect()
        } else {
            let mut picked = std::collections::BTreeSet::new();
            while picked.len() < cfg.max_coords_per_input {
                picked.insert(rng.below(len));
            }
            picked.into_iter().collect()
        };
        for c in coords {
            let orig = work[i].data()[c];
            let a = analytic[i].data()[c];
            // A central quotient is only trusted when (a) the two one-sided
            // quotients agree, and (b) shrinking the step leaves the
            // quotient unchanged. Relu networks fail these exactly where a
            // pre-activation crosses its kink inside the perturbation
            // window; such coordinates carry no finite-difference
            // information and are skipped. A wrong backward pass is never
            // masked: it disagrees with the stabilized quotient, which
            // converges to the true derivative on smooth stretches.
            let mut prev_smooth: Option<f64> = None;
            let mut accepted: Option<f64> = None;
            for eps in [cfg.eps, cfg.eps / 4.0, cfg.eps / 16.0, cfg.eps / 64.0, cfg.eps / 256.0] {
                work[i].data_mut()[c] = orig + eps;
                let (fp, _) = f(&work, false)?;
                work[i].data_mut()[c] = orig - eps;
                let (fm, _) = f(&work, false)?;
                work[i].data_mut()[c] = orig;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite {
                        location: format!("grad_check perturbed eval of input {i}"),
                    });
                }
                let numeric = (fp - fm) / (2.0 * eps);
                let d_plus = (fp - base) / eps;
                let d_minus = (base - fm) / eps;
                let scale = numeric.abs().max(a.abs()).max(cfg.atol);
                if (d_plus - d_minus).abs() > 2e-4 * scale {
                    prev_smooth = None;
                    continue;
                }
                if let Some(prev) = prev_smooth {
                    if (numeric - prev).abs() <= 1e-4 * scale {
                        accepted = Some(numeric);
                        break;
                    }
                }
                prev_smooth = Some(numeric);
            }
            if let Some(numeric) = accepted {
                if !(numeric.abs() < cfg.atol && a.abs() < cfg.atol) {
                    let rel = relative_error(numeric, a);
                    if rel > max_rel {
                        max_rel = rel;
                    }
                }
            }
        }
    }
    Ok(max_rel)
}

/// Check a tape-built computation. `build` maps input leaves to an output
/// node; the scalar is a fixed random weighting of the output, which also
/// seeds the backward pass.
pub fn check_tape_fn<F>(build: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut weights: Option<Tensor> = None;
    let seed = cfg.seed;
    let mut closure = |xs: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone(), with_grad)).collect();
        let out = build(&mut tape, &leaves)?;
        let out_val = tape.value(out);
        let w = weights.get_or_insert_with(|| {
            let mut rng = Rng::from_seed_index(seed, 0x11ed);
            Tensor::random(out_val.shape(), -1.0, 1.0, &mut rng)
        });
        let scalar: f64 = out_val
            .data()
            .iter()
            .zip(w.data())
            .map(|(a, b)| a * b)
            .sum();
        if !with_grad {
            return Ok((scalar, None));
        }
        let mut grads = tape.backward(out, w.clone())?;
        let gs: Vec<Tensor> = leaves
            .iter()
            .zip(xs)
            .map(|(leaf, x)| grads.take(*leaf).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect();
        Ok((scalar, Some(gs)))
    };
    grad_check(&mut closure, inputs, cfg)
}

/// Check a layer graph that reads parameters from a [`ParamStore`].
///
/// Checked inputs are the data tensor followed by every registered
/// parameter; all of them are perturbed. The forward pass runs in training
/// mode. Parameter values are restored when the check finishes.
pub fn check_param_graph<F>(
    params: &mut crate::params::ParamStore,
    states: &mut crate::params::StateStore,
    build: F,
    input: &Tensor,
    cfg: &GradCheckConfig,
) -> Result<f64>
where
    F: Fn(&mut crate::params::Forward, NodeId) -> Result<NodeId>,
{
    use crate::params::{Forward, ParamStore, StateStore};

    let originals: Vec<Tensor> = params.iter().map(|(_, p)| p.value.clone()).collect();
    let mut inputs: Vec<Tensor> = Vec::with_capacity(1 + originals.len());
    inputs.push(input.clone());
    inputs.extend(originals.iter().cloned());

    let mut weights: Option<Tensor> = None;
    let seed = cfg.seed;
    let result = {
        let params_cell: &mut ParamStore = params;
        let states_cell: &mut StateStore = states;
        let mut closure = |xs: &[Tensor], with_grad: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
            let ids: Vec<_> = params_cell.iter().map(|(id, _)| id).collect();
            for (id, x) in ids.iter().zip(&xs[1..]) {
                *params_cell.value_mut(*id) = x.clone();
            }
            let mut f = Forward::train(params_cell, states_cell, with_grad);
            let x_node = f.tape.leaf(xs[0].clone(), with_grad);
            let out = build(&mut f, x_node)?;
            let out_val = f.tape.value(out);
            let w = weights.get_or_insert_with(|| {
                let mut rng = Rng::from_seed_index(seed, 0x11ed);
                Tensor::random(out_val.shape(), -1.0, 1.0, &mut rng)
            });
            let scalar: f64 = out_val
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum();
            if !with_grad {
                return Ok((scalar, None));
            }
            let mut grads = f.tape.backward(out, w.clone())?;
            let mut gs = Vec::with_capacity(xs.len());
            gs.push(
                grads
                    .take(x_node)
                    .unwrap_or_else(|| Tensor::zeros(xs[0].shape())),
            );
            let touched = f.touched_params();
            for (i, id) in ids.iter().enumerate() {
                let node = touched.iter().find(|(pid, _)| pid == id).map(|(_, n)| *n);
                let g = node
                    .and_then(|n| grads.take(n))
                    .unwrap_or_else(|| Tensor::zeros(xs[1 + i].shape()));
                gs.push(g);
            }
            Ok((scalar, Some(gs)))
        };
        grad_check(&mut closure, &inputs, cfg)
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (id, orig) in ids.into_iter().zip(originals) {
        *params.value_mut(id) = orig;
    }
    result
}

/// One entry of the standard gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// The standard gradient suite: every differentiable kernel, every
/// composite block, and the full tiny model, checked against central finite
/// differences with fixed seeds.
pub fn gradient_suite() -> Result<Vec<SuiteEntry>> {
    use crate::blocks::{Brm, Classifier, DownsampleUnit, Head, HeadKind, InitialBlock, SeBlock, UpsampleUnit};
    use crate::loss::cross_entropy;
    use crate::network::{Model, ModelConfig};
    use crate::params::NetBuilder;
    use crate::sgcn::SgcnPropagator;
    use crate::tensor::ConvSpec;

    let cfg = GradCheckConfig::default();
    let mut entries = Vec::new();
    let mut rng = Rng::new(0xfeed);

    // kernels
    let x = Tensor::random([1, 3, 6, 6], -1.0, 1.0, &mut rng);
    let w = Tensor::random([4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let b = Tensor::random([1, 4, 1, 1], -0.3, 0.3, &mut rng);
    let spec = ConvSpec::same(3, 3, 4);
    entries.push(SuiteEntry {
        name: "conv2d",
        max_rel_err: check_tape_fn(
            |t, l| t.conv2d(l[0], l[1], Some(l[2]), spec),
            &[x.clone(), w.clone(), b.clone()],
            &cfg,
        )?,
    });
    let dilated = ConvSpec::same(3, 3, 4).with_dilation(2, 2).with_padding(2, 2);
    entries.push(SuiteEntry {
        name: "conv2d_dilated",
        max_rel_err: check_tape_fn(
            |t, l| t.conv2d(l[0], l[1], Some(l[2]), dilated),
            &[x.clone(), w.clone(), b.clone()],
            &cfg,
        )?,
    });
    let strided = ConvSpec::same(3, 3, 4).with_stride(2);
    entries.push(SuiteEntry {
        name: "conv2d_strided",
        max_rel_err: check_tape_fn(
            |t, l| t.conv2d(l[0], l[1], Some(l[2]), strided),
            &[x.clone(), w, b],
            &cfg,
        )?,
    });

    let mut bn_builder = NetBuilder::new(1);
    let bn = crate::blocks::BatchNormLayer::new(&mut bn_builder, "bn", 3);
    entries.push(SuiteEntry {
        name: "batch_norm",
        max_rel_err: check_param_graph(
            &mut bn_builder.params,
            &mut bn_builder.states,
            |f, x| bn.forward(f, x),
            &x,
            &cfg,
        )?,
    });

    entries.push(SuiteEntry {
        name: "relu_sigmoid",
        max_rel_err: check_tape_fn(
            |t, l| {
                let y = t.relu(l[0]);
                Ok(t.sigmoid(y))
            },
            std::slice::from_ref(&x),
            &cfg,
        )?,
    });
    entries.push(SuiteEntry {
        name: "global_avg_pool",
        max_rel_err: check_tape_fn(|t, l| t.global_avg_pool(l[0]), std::slice::from_ref(&x), &cfg)?,
    });
    entries.push(SuiteEntry {
        name: "adaptive_avg_pool",
        max_rel_err: check_tape_fn(|t, l| t.adaptive_avg_pool(l[0], 4, 3), std::slice::from_ref(&x), &cfg)?,
    });
    entries.push(SuiteEntry {
        name: "bilinear_resize",
        max_rel_err: check_tape_fn(
            |t, l| {
                let up = t.bilinear_resize(l[0], 9, 11)?;
                t.bilinear_resize(up, 4, 4)
            },
            std::slice::from_ref(&x),
            &cfg,
        )?,
    });

    let a = Tensor::random([1, 1, 4, 5], -1.0, 1.0, &mut rng);
    let m = Tensor::random([1, 1, 5, 3], -1.0, 1.0, &mut rng);
    entries.push(SuiteEntry {
        name: "matmul_softmax",
        max_rel_err: check_tape_fn(
            |t, l| {
                let prod = t.matmul(l[0], l[1])?;
                t.softmax_rows(prod)
            },
            &[a.clone(), m],
            &cfg,
        )?,
    });
    entries.push(SuiteEntry {
        name: "degree_normalization",
        max_rel_err: check_tape_fn(
            |t, l| {
                // square the scores into a non-negative matrix, then the
                // self-loop/degree/rsqrt scaling chain
                let sym = {
                    let tr = t.transpose(l[0])?;
                    t.matmul(tr, l[0])?
                };
                crate::sgcn::normalize_adjacency_on(t, sym)
            },
            &[a],
            &cfg,
        )?,
    });

    let logits = Tensor::random([1, 3, 4, 4], -1.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..16).map(|_| rng.below(3) as u8).collect();
    let labels_fd = labels.clone();
    let mut ce = move |xs: &[Tensor], with_grad: bool| {
        let (loss, grad) = cross_entropy(&xs[0], &labels_fd)?;
        Ok((loss, with_grad.then(|| vec![grad])))
    };
    entries.push(SuiteEntry {
        name: "cross_entropy",
        max_rel_err: grad_check(&mut ce, &[logits], &cfg)?,
    });

    // composite blocks
    let x8 = Tensor::random([1, 8, 8, 8], -1.0, 1.0, &mut rng);
    let x8b2 = Tensor::random([2, 8, 8, 8], -1.0, 1.0, &mut rng);
    let x3 = Tensor::random([1, 3, 16, 16], 0.0, 1.0, &mut rng);

    let mut b = NetBuilder::new(2);
    let initial = InitialBlock::new(&mut b, "initial", 8);
    entries.push(SuiteEntry {
        name: "initial_block",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| initial.forward(f, x), &x3, &cfg)?,
    });

    let mut b = NetBuilder::new(3);
    let down = DownsampleUnit::new(&mut b, "down", 8, 8);
    entries.push(SuiteEntry {
        name: "downsample_unit",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| down.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(4);
    let up = UpsampleUnit::new(&mut b, "up", 8, 8);
    entries.push(SuiteEntry {
        name: "upsample_unit",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| up.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(5);
    let se = SeBlock::new(&mut b, "se", 8, 4)?;
    entries.push(SuiteEntry {
        name: "se_attention",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| se.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(6);
    let brm = Brm::new(&mut b, "brm", 8, 2)?;
    entries.push(SuiteEntry {
        name: "brm",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| brm.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(7);
    let aspp = Head::new(&mut b, "head", 8, &HeadKind::default_aspp())?;
    entries.push(SuiteEntry {
        name: "aspp_head",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| aspp.forward(f, x), &x8b2, &cfg)?,
    });

    let mut b = NetBuilder::new(8);
    let psp = Head::new(&mut b, "head", 8, &HeadKind::Psp)?;
    entries.push(SuiteEntry {
        name: "psp_head",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| psp.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(9);
    let sgcn = SgcnPropagator::new(&mut b, "sgcn", 8, 8, 1, 2)?;
    entries.push(SuiteEntry {
        name: "sgcn_propagate",
        max_rel_err: check_param_graph(&mut b.params, &mut b.states, |f, x| sgcn.forward(f, x), &x8, &cfg)?,
    });

    let mut b = NetBuilder::new(10);
    let cls = Classifier::new(&mut b, "classifier", 8, 3);
    entries.push(SuiteEntry {
        name: "classifier",
        max_rel_err: check_param_graph(
            &mut b.params,
            &mut b.states,
            |f, x| cls.forward(f, x, (16, 16)),
            &x8,
            &cfg,
        )?,
    });

    // full tiny model; batch 2 keeps the pool-branch norm in contract
    let mut model = Model::build_with_seed(&ModelConfig::tiny(), 11)?;
    let image = Tensor::random([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let model_cfg = GradCheckConfig {
        max_coords_per_input: 3,
        ..cfg
    };
    entries.push(SuiteEntry {
        name: "full_tiny_model",
        max_rel_err: model.gradient_check(&image, &model_cfg)?,
    });

    Ok(entries)
}
