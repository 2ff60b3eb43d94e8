//! Multi-scale simple graph-convolution propagator.
//!
//! An encoder feature map is pooled, projected into graph space as a (d, n)
//! node matrix, diffused over a learned dense adjacency, and re-projected
//! back to the feature space at the original resolution. Node matrices keep
//! features on rows and nodes on columns, so adjacency application happens
//! on the right and weight mixing on the left, both as plain matmuls.

use crate::blocks::Conv2dLayer;
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Forward, NetBuilder, ParamId, ParamStore};
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvSpec, Tensor};

/// One projected feature map: node features plus dense adjacency.
#[derive(Debug, Clone)]
pub struct Graph {
    /// Node features, matrix of shape (d, n).
    pub nodes: Tensor,
    /// Dense non-negative adjacency, matrix of shape (n, n).
    pub adjacency: Tensor,
    /// Pooled grid (h, w) with n = h·w.
    pub grid: (usize, usize),
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.nodes.cols()
    }

    pub fn dim(&self) -> usize {
        self.nodes.rows()
    }

    /// Check the structural invariants: n = h·w, finite non-negative adjacency.
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count();
        if n != self.grid.0 * self.grid.1 {
            return Err(Error::ShapeMismatch {
                context: "graph",
                dimension: "node count",
                expected: self.grid.0 * self.grid.1,
                found: n,
            });
        }
        if self.adjacency.rows() != n || self.adjacency.cols() != n {
            return Err(Error::ShapeMismatch {
                context: "graph",
                dimension: "adjacency order",
                expected: n,
                found: self.adjacency.rows(),
            });
        }
        if !self.adjacency.all_finite() || self.adjacency.data().iter().any(|v| *v < 0.0) {
            return Err(Error::NonFinite {
                location: "graph adjacency".into(),
            });
        }
        Ok(())
    }
}

/// Scaled dot-product adjacency on a tape:
/// S = (δX)ᵀ(ψX)/√d, A = symmetrized row-softmax of S.
pub fn build_adjacency_on(
    tape: &mut Tape,
    nodes: NodeId,
    delta_w: NodeId,
    psi_w: NodeId,
) -> Result<NodeId> {
    let d = tape.value(nodes).rows();
    if d == 0 {
        return Err(Error::InvalidGeometry {
            context: "build_adjacency",
            message: "zero feature dimension".into(),
        });
    }
    let dx = tape.matmul(delta_w, nodes)?;
    let px = tape.matmul(psi_w, nodes)?;
    let dxt = tape.transpose(dx)?;
    let scores = tape.matmul(dxt, px)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let soft = tape.softmax_rows(scores)?;
    let soft_t = tape.transpose(soft)?;
    let sym = tape.add(soft, soft_t)?;
    Ok(tape.scale(sym, 0.5))
}

/// Degree-based symmetric normalization on a tape:
/// Â = D^(-1/2) (A + I) D^(-1/2) with D_ii = Σ_j (A + I)_ij.
pub fn normalize_adjacency_on(tape: &mut Tape, adjacency: NodeId) -> Result<NodeId> {
    let a = tape.value(adjacency);
    let (r, c) = (a.rows(), a.cols());
    if r != c {
        return Err(Error::ShapeMismatch {
            context: "normalize_adjacency",
            dimension: "columns (square required)",
            expected: r,
            found: c,
        });
    }
    let with_loops = tape.add_identity(adjacency)?;
    let degrees = tape.row_sum(with_loops)?;
    let inv_sqrt = tape.rsqrt(degrees)?;
    let scaled_rows = tape.mul_broadcast(with_loops, inv_sqrt)?;
    let inv_sqrt_row = tape.transpose(inv_sqrt)?;
    tape.mul_broadcast(scaled_rows, inv_sqrt_row)
}

/// One graph-convolution layer on a tape, with features on rows:
/// H = relu(Θᵀ · H_prev · Âᵀ). The adjacency aggregates one-hop
/// neighborhoods over the node axis; Θ mixes the feature axis.
pub fn gcn_layer_on(tape: &mut Tape, h_prev: NodeId, a_hat: NodeId, theta: NodeId) -> Result<NodeId> {
    let theta_t = tape.transpose(theta)?;
    let mixed = tape.matmul(theta_t, h_prev)?;
    let a_hat_t = tape.transpose(a_hat)?;
    let aggregated = tape.matmul(mixed, a_hat_t)?;
    Ok(tape.relu(aggregated))
}

/// Pure wrapper over [`build_adjacency_on`].
pub fn build_adjacency(nodes: &Tensor, delta_w: &Tensor, psi_w: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.clone(), false);
    let d = tape.leaf(delta_w.clone(), false);
    let p = tape.leaf(psi_w.clone(), false);
    let out = build_adjacency_on(&mut tape, x, d, p)?;
    Ok(tape.value(out).clone())
}

/// Pure wrapper over [`normalize_adjacency_on`].
pub fn normalize_adjacency(adjacency: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.leaf(adjacency.clone(), false);
    let out = normalize_adjacency_on(&mut tape, a)?;
    Ok(tape.value(out).clone())
}

/// Pure wrapper over [`gcn_layer_on`].
pub fn gcn_layer(h_prev: &Tensor, a_hat: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let h = tape.leaf(h_prev.clone(), false);
    let a = tape.leaf(a_hat.clone(), false);
    let t = tape.leaf(theta.clone(), false);
    let out = gcn_layer_on(&mut tape, h, a, t)?;
    Ok(tape.value(out).clone())
}

/// Number of graph-convolution layers per scale.
pub const SGCN_NUM_LAYERS: usize = 1;
/// Spatial pooling factor applied before projection.
pub const SGCN_POOL_FACTOR: usize = 2;

/// One scale's propagator: projection, learned adjacency, graph
/// convolution, and re-projection.
#[derive(Debug, Clone)]
pub struct SgcnPropagator {
    pub(crate) proj: Conv2dLayer,
    pub(crate) delta_w: ParamId,
    pub(crate) psi_w: ParamId,
    pub(crate) theta: Vec<ParamId>,
    pub(crate) q: ParamId,
    pub(crate) reproj: Conv2dLayer,
    pub(crate) pool_factor: usize,
    pub(crate) dim: usize,
    pub(crate) channels: usize,
    pub(crate) name: String,
}

impl SgcnPropagator {
    pub fn new(
        b: &mut NetBuilder,
        name: &str,
        channels: usize,
        dim: usize,
        num_layers: usize,
        pool_factor: usize,
    ) -> Result<SgcnPropagator> {
        if dim == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.dim"),
                message: "graph dimension must be >= 1".into(),
            });
        }
        if pool_factor == 0 {
            return Err(Error::InvalidConfig {
                field: format!("{name}.pool_factor"),
                message: "pool factor must be >= 1".into(),
            });
        }
        let proj = Conv2dLayer::new(b, &format!("{name}.proj"), ConvSpec::pointwise(channels, dim));
        let delta_w = b.square_matrix(&format!("{name}.delta"), dim);
        let psi_w = b.square_matrix(&format!("{name}.psi"), dim);
        let theta = (0..num_layers)
            .map(|i| b.square_matrix(&format!("{name}.theta{i}"), dim))
            .collect();
        let q = b.square_matrix(&format!("{name}.q"), dim);
        let reproj = Conv2dLayer::new(
            b,
            &format!("{name}.reproj"),
            ConvSpec::pointwise(dim, channels),
        );
        Ok(SgcnPropagator {
            proj,
            delta_w,
            psi_w,
            theta,
            q,
            reproj,
            pool_factor,
            dim,
            channels,
            name: name.to_string(),
        })
    }

    fn pooled_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if !h.is_multiple_of(self.pool_factor) || !w.is_multiple_of(self.pool_factor) {
            return Err(Error::InvalidGeometry {
                context: "sgcn project",
                message: format!(
                    "spatial dims {h}x{w} not divisible by pool factor {}",
                    self.pool_factor
                ),
            });
        }
        Ok((h / self.pool_factor, w / self.pool_factor))
    }

    /// Projection into graph space as a plain value: pool, 1x1 conv, flatten
    /// to node columns, and build the adjacency.
    pub fn project(&self, params: &ParamStore, feature: &Tensor) -> Result<Graph> {
        let [n, c, h, w] = feature.shape();
        if n != 1 {
            return Err(Error::ShapeMismatch {
                context: "sgcn project",
                dimension: "batch",
                expected: 1,
                found: n,
            });
        }
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                context: "sgcn project",
                dimension: "channels",
                expected: self.channels,
                found: c,
            });
        }
        let (gh, gw) = self.pooled_grid(h, w)?;
        let pooled = ops::adaptive_avg_pool(feature, gh, gw)?;
        let bias = self.proj.bias.map(|b| params.value(b).data().to_vec());
        let projected = ops::conv2d(
            &pooled,
            params.value(self.proj.weight),
            bias.as_deref(),
            &self.proj.spec,
        )?;
        let nodes = projected.reshaped([1, 1, self.dim, gh * gw])?;
        let adjacency = build_adjacency(
            &nodes,
            params.value(self.delta_w),
            params.value(self.psi_w),
        )?;
        Ok(Graph {
            nodes,
            adjacency,
            grid: (gh, gw),
        })
    }

    /// Graph-space propagation on a tape: adjacency, normalization,
    /// graph-convolution layers, one further adjacency aggregation, and the
    /// output weight. Input and output are (d, n) node matrices.
    pub fn propagate_nodes_on(&self, f: &mut Forward, nodes: NodeId) -> Result<NodeId> {
        let delta = f.param_node(self.delta_w);
        let psi = f.param_node(self.psi_w);
        let adjacency = build_adjacency_on(&mut f.tape, nodes, delta, psi)?;
        let a_hat = normalize_adjacency_on(&mut f.tape, adjacency)?;
        let mut h = nodes;
        for (i, theta) in self.theta.iter().enumerate() {
            let t = f.param_node(*theta);
            h = gcn_layer_on(&mut f.tape, h, a_hat, t)?;
            f.check_finite(h, &format!("{} gcn layer {i}", self.name))?;
        }
        let q = f.param_node(self.q);
        let q_t = f.tape.transpose(q)?;
        let mixed = f.tape.matmul(q_t, h)?;
        let a_hat_t = f.tape.transpose(a_hat)?;
        let out = f.tape.matmul(mixed, a_hat_t)?;
        f.check_finite(out, &format!("{} output aggregation", self.name))?;
        Ok(out)
    }

    /// Full propagation (N,C,H,W) -> (N,C,H,W), per batch sample.
    pub fn forward(&self, f: &mut Forward, feature: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = f.tape.value(feature).shape();
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                context: "sgcn propagate",
                dimension: "channels",
                expected: self.channels,
                found: c,
            });
        }
        let (gh, gw) = self.pooled_grid(h, w)?;
        let mut outputs = Vec::with_capacity(n);
        for i in 0..n {
            let sample = f.tape.slice_batch(feature, i)?;
            let pooled = f.tape.adaptive_avg_pool(sample, gh, gw)?;
            let projected = self.proj.forward(f, pooled)?;
            let nodes = f.tape.reshape(projected, [1, 1, self.dim, gh * gw])?;
            let prop = self.propagate_nodes_on(f, nodes)?;
            let spatial = f.tape.reshape(prop, [1, self.dim, gh, gw])?;
            let up = f.tape.bilinear_resize(spatial, h, w)?;
            outputs.push(self.reproj.forward(f, up)?);
        }
        f.tape.concat_batch(&outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheckConfig;
    use crate::params::NetBuilder;
    use crate::rng::Rng;

    fn set_identity_conv(params: &mut ParamStore, layer: &Conv2dLayer, c: usize) {
        let w = params.value_mut(layer.weight);
        for v in w.data_mut() {
            *v = 0.0;
        }
        for i in 0..c {
            let off = w.offset(i, i, 0, 0);
            w.data_mut()[off] = 1.0;
        }
        if let Some(b) = layer.bias {
            for v in params.value_mut(b).data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn project_with_identity_conv_flattens_pixels() {
        let mut b = NetBuilder::new(0);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 4, 4, 1, 1).unwrap();
        set_identity_conv(&mut b.params, &sgcn.proj, 4);
        let mut rng = Rng::new(1);
        let x = Tensor::random([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let graph = sgcn.project(&b.params, &x).unwrap();
        graph.validate().unwrap();
        assert_eq!(graph.grid, (3, 3));
        for ch in 0..4 {
            for p in 0..9 {
                assert_eq!(graph.nodes.m(ch, p), x.at(0, ch, p / 3, p % 3));
            }
        }
    }

    #[test]
    fn project_constant_input_gives_identical_columns() {
        let mut b = NetBuilder::new(2);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 4, 2, 1, 2).unwrap();
        let x = Tensor::full([1, 4, 4, 4], 0.7);
        let graph = sgcn.project(&b.params, &x).unwrap();
        let n = graph.node_count();
        for row in 0..graph.dim() {
            let first = graph.nodes.m(row, 0);
            for col in 1..n {
                assert!((graph.nodes.m(row, col) - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_matches_pool_conv_reshape_composition() {
        let mut b = NetBuilder::new(3);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 8, 4, 1, 2).unwrap();
        let mut rng = Rng::new(4);
        let x = Tensor::random([1, 8, 8, 8], -1.0, 1.0, &mut rng);
        let graph = sgcn.project(&b.params, &x).unwrap();

        let pooled = ops::adaptive_avg_pool(&x, 4, 4).unwrap();
        let bias = b.params.value(sgcn.proj.bias.unwrap()).data().to_vec();
        let proj = ops::conv2d(
            &pooled,
            b.params.value(sgcn.proj.weight),
            Some(&bias),
            &sgcn.proj.spec,
        )
        .unwrap();
        for ch in 0..4 {
            for p in 0..16 {
                let want = proj.at(0, ch, p / 4, p % 4);
                assert!((graph.nodes.m(ch, p) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn project_rejects_indivisible_dims() {
        let mut b = NetBuilder::new(5);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 4, 2, 1, 2).unwrap();
        let x = Tensor::zeros([1, 4, 5, 4]);
        assert!(sgcn.project(&b.params, &x).is_err());
    }

    #[test]
    fn adjacency_single_node_is_one() {
        let mut rng = Rng::new(6);
        let x = Tensor::random([1, 1, 3, 1], -1.0, 1.0, &mut rng);
        let dw = Tensor::identity(3);
        let pw = Tensor::identity(3);
        let a = build_adjacency(&x, &dw, &pw).unwrap();
        assert_eq!(a.shape(), [1, 1, 1, 1]);
        assert_eq!(a.data()[0], 1.0);
    }

    #[test]
    fn adjacency_identical_columns_is_uniform() {
        let mut col = Vec::new();
        let mut rng = Rng::new(7);
        for _ in 0..3 {
            col.push(rng.uniform(-1.0, 1.0));
        }
        let mut data = Vec::new();
        for c in &col {
            data.extend([*c; 5]);
        }
        let x = Tensor::matrix(3, 5, data).unwrap();
        let dw = Tensor::identity(3);
        let pw = Tensor::identity(3);
        let a = build_adjacency(&x, &dw, &pw).unwrap();
        for v in a.data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_matches_dense_oracle_and_is_symmetric() {
        let mut rng = Rng::new(13);
        let d = 4;
        let n = 6;
        let x = Tensor::random([1, 1, d, n], -1.0, 1.0, &mut rng);
        let dw = Tensor::random([1, 1, d, d], -0.5, 0.5, &mut rng);
        let pw = Tensor::random([1, 1, d, d], -0.5, 0.5, &mut rng);
        let a = build_adjacency(&x, &dw, &pw).unwrap();

        // explicit softmax-then-symmetrize oracle
        let dx = ops::matmul(&dw, &x).unwrap();
        let px = ops::matmul(&pw, &x).unwrap();
        let mut scores = Tensor::matrix_zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..d {
                    s += dx.m(k, i) * px.m(k, j);
                }
                scores.set_m(i, j, s / (d as f64).sqrt());
            }
        }
        let mut soft = Tensor::matrix_zeros(n, n);
        for i in 0..n {
            let mx = (0..n).map(|j| scores.m(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).map(|j| (scores.m(i, j) - mx).exp()).sum();
            for j in 0..n {
                soft.set_m(i, j, (scores.m(i, j) - mx).exp() / denom);
            }
        }
        for i in 0..n {
            for j in 0..n {
                let want = 0.5 * (soft.m(i, j) + soft.m(j, i));
                assert!((a.m(i, j) - want).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&a.m(i, j)));
            }
        }
        // exact symmetry
        for i in 0..n {
            for j in 0..n {
                assert_eq!(a.m(i, j), a.m(j, i));
            }
        }
    }

    #[test]
    fn normalize_zero_adjacency_is_identity() {
        let a = Tensor::matrix_zeros(4, 4);
        let norm = normalize_adjacency(&a).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(norm.m(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn normalize_two_node_hand_oracle() {
        // A = [[0,1],[1,0]]: degrees 2, normalized entries all 0.5
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let norm = normalize_adjacency(&a).unwrap();
        for v in norm.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_non_square() {
        let a = Tensor::matrix_zeros(2, 3);
        assert!(normalize_adjacency(&a).is_err());
    }

    #[test]
    fn sqrt_degree_vector_is_fixed_point() {
        // Â (D^{1/2} 1) = D^{1/2} 1 for any symmetric non-negative A
        let mut rng = Rng::new(8);
        for _ in 0..10 {
            let n = rng.range(2, 8);
            let mut a = Tensor::matrix_zeros(n, n);
            for i in 0..n {
                for j in 0..=i {
                    let v = rng.next_f64();
                    a.set_m(i, j, v);
                    a.set_m(j, i, v);
                }
            }
            let norm = normalize_adjacency(&a).unwrap();
            let mut degrees = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    degrees[i] += a.m(i, j);
                }
                degrees[i] += 1.0;
            }
            let v: Vec<f64> = degrees.iter().map(|d| d.sqrt()).collect();
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += norm.m(i, j) * v[j];
                }
                assert!((acc - v[i]).abs() < 1e-12, "row {i}: {acc} vs {}", v[i]);
            }
        }
    }

    #[test]
    fn gcn_layer_with_identities_is_relu() {
        let mut rng = Rng::new(9);
        let h = Tensor::random([1, 1, 3, 5], -1.0, 1.0, &mut rng);
        let out = gcn_layer(&h, &Tensor::identity(5), &Tensor::identity(3)).unwrap();
        let want = ops::relu(&h);
        assert_eq!(out, want);
    }

    #[test]
    fn isolated_nodes_stay_unmixed() {
        // zero adjacency normalizes to identity, so columns do not mix
        let mut rng = Rng::new(10);
        let h = Tensor::random([1, 1, 3, 4], -1.0, 1.0, &mut rng);
        let a_hat = normalize_adjacency(&Tensor::matrix_zeros(4, 4)).unwrap();
        let theta = Tensor::identity(3);
        let out = gcn_layer(&h, &a_hat, &theta).unwrap();
        assert_eq!(out, ops::relu(&h));
    }

    #[test]
    fn gcn_layer_matches_matmul_oracle() {
        let mut rng = Rng::new(11);
        let h = Tensor::random([1, 1, 4, 6], -1.0, 1.0, &mut rng);
        let mut a = Tensor::matrix_zeros(6, 6);
        for i in 0..6 {
            for j in 0..=i {
                let v = rng.next_f64();
                a.set_m(i, j, v);
                a.set_m(j, i, v);
            }
        }
        let a_hat = normalize_adjacency(&a).unwrap();
        let theta = Tensor::random([1, 1, 4, 4], -0.7, 0.7, &mut rng);
        let out = gcn_layer(&h, &a_hat, &theta).unwrap();
        let want = ops::relu(
            &ops::matmul(
                &ops::matmul(&ops::transpose(&theta).unwrap(), &h).unwrap(),
                &ops::transpose(&a_hat).unwrap(),
            )
            .unwrap(),
        );
        for (o, w) in out.data().iter().zip(want.data()) {
            assert!((o - w).abs() < 1e-12);
        }
    }

    #[test]
    fn propagate_zero_reproj_is_zero() {
        let mut b = NetBuilder::new(12);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 8, 4, 1, 2).unwrap();
        for v in b.params.value_mut(sgcn.reproj.weight).data_mut() {
            *v = 0.0;
        }
        for v in b.params.value_mut(sgcn.reproj.bias.unwrap()).data_mut() {
            *v = 0.0;
        }
        let mut rng = Rng::new(13);
        let x = Tensor::random([2, 8, 8, 8], -1.0, 1.0, &mut rng);
        let mut f = Forward::eval(&b.params, &b.states);
        let xn = f.tape.leaf(x, false);
        let out = sgcn.forward(&mut f, xn).unwrap();
        assert!(f.tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn propagate_preserves_shape_across_scales() {
        for (c, hw) in [(4usize, 16usize), (8, 8), (16, 4)] {
            let mut b = NetBuilder::new(14);
            let sgcn = SgcnPropagator::new(&mut b, "sgcn", c, c / 2, 1, 2).unwrap();
            let mut rng = Rng::new(15);
            let x = Tensor::random([1, c, hw, hw], -1.0, 1.0, &mut rng);
            let mut f = Forward::eval(&b.params, &b.states);
            let xn = f.tape.leaf(x.clone(), false);
            let out = sgcn.forward(&mut f, xn).unwrap();
            assert_eq!(f.tape.value(out).shape(), x.shape());
        }
    }

    #[test]
    fn propagate_gradient_check() {
        let mut b = NetBuilder::new(16);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 8, 8, 1, 2).unwrap();
        let mut rng = Rng::new(17);
        let x = Tensor::random([1, 8, 8, 8], -1.0, 1.0, &mut rng);
        let err = crate::gradcheck::check_param_graph(
            &mut b.params,
            &mut b.states,
            |f, x| sgcn.forward(f, x),
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn propagation_is_node_permutation_equivariant() {
        let mut b = NetBuilder::new(18);
        let sgcn = SgcnPropagator::new(&mut b, "sgcn", 4, 4, 1, 1).unwrap();
        let mut rng = Rng::new(19);
        let n = 9;
        let x = Tensor::random([1, 1, 4, n], -1.0, 1.0, &mut rng);

        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let mut x_perm = Tensor::matrix_zeros(4, n);
        for row in 0..4 {
            for col in 0..n {
                x_perm.set_m(row, col, x.m(row, perm[col]));
            }
        }

        let run = |nodes: Tensor| {
            let mut f = Forward::eval(&b.params, &b.states);
            let node_id = f.tape.leaf(nodes, false);
            let out = sgcn.propagate_nodes_on(&mut f, node_id).unwrap();
            f.tape.value(out).clone()
        };
        let base = run(x);
        let permuted = run(x_perm);
        for row in 0..4 {
            for col in 0..n {
                let want = base.m(row, perm[col]);
                assert!(
                    (permuted.m(row, col) - want).abs() < 1e-10,
                    "row {row} col {col}"
                );
            }
        }
    }

    #[test]
    fn normalized_adjacency_spectral_radius_bounded() {
        // power iteration on Â and on Â - 2I (shifted) bounds both ends
        let mut rng = Rng::new(20);
        for _ in 0..10 {
            let n = rng.range(2, 16);
            let d = 4;
            let x = Tensor::random([1, 1, d, n], -1.0, 1.0, &mut rng);
            let dw = Tensor::random([1, 1, d, d], -0.5, 0.5, &mut rng);
            let pw = Tensor::random([1, 1, d, d], -0.5, 0.5, &mut rng);
            let a = build_adjacency(&x, &dw, &pw).unwrap();
            let norm = normalize_adjacency(&a).unwrap();
            let rho = power_iteration(&norm, 600);
            assert!(rho <= 1.0 + 1e-8, "spectral radius {rho}");
            let mut shifted = norm.clone();
            for i in 0..n {
                let v = shifted.m(i, i);
                shifted.set_m(i, i, v - 2.0);
            }
            let rho_shift = power_iteration(&shifted, 600);
            assert!(rho_shift <= 3.0 + 1e-8, "shifted radius {rho_shift}");
        }
    }

    fn power_iteration(m: &Tensor, iterations: usize) -> f64 {
        let n = m.rows();
        let mut v = vec![1.0; n];
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[i] += m.m(i, j) * v[j];
                }
            }
            let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for x in next.iter_mut() {
                *x /= norm;
            }
            lambda = norm;
            v = next;
        }
        lambda
    }
}
