//! Parameter registry, batch-norm state store, and the forward context that
//! layers run in.
//!
//! Every trainable tensor is registered exactly once, under a dot-separated
//! path name, in deterministic build order. Optimizers, checkpoints and the
//! accounting module all key off this registry.

use crate::error::{Error, Result};
use crate::ops::norm::{BN_EPSILON, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::{ConvSpec, Tensor};

/// Handle into the parameter registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(index: usize) -> ParamId {
        ParamId(index)
    }
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered registry of all trainable tensors of a model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: String, value: Tensor) -> ParamId {
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Exhaustive enumeration of stored scalars (the accounting oracle).
    pub fn total_scalars(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }
}

/// Handle into the batch-norm state store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnStateId(usize);

/// Running statistics of one batch-norm layer (buffers, not parameters).
#[derive(Debug, Clone)]
pub struct BnState {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Ordered store of batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct StateStore {
    states: Vec<BnState>,
}

impl StateStore {
    pub fn new() -> StateStore {
        StateStore { states: Vec::new() }
    }

    pub fn register(&mut self, name: String, channels: usize) -> BnStateId {
        self.states.push(BnState {
            name,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        });
        BnStateId(self.states.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, id: BnStateId) -> &BnState {
        &self.states[id.0]
    }

    pub fn get_mut(&mut self, id: BnStateId) -> &mut BnState {
        &mut self.states[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &BnState> {
        self.states.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut BnState> {
        self.states.iter_mut()
    }
}

/// Forward/eval mode selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum StatesAccess<'a> {
    Frozen(&'a StateStore),
    Mutable(&'a mut StateStore),
}

/// Context threaded through every layer's forward pass: the tape plus access
/// to parameters and batch-norm state.
pub struct Forward<'a> {
    pub tape: Tape,
    mode: Mode,
    params: &'a ParamStore,
    states: StatesAccess<'a>,
    param_nodes: Vec<Option<NodeId>>,
    grad_params: bool,
}

impl<'a> Forward<'a> {
    /// Training-mode context; batch-norm layers update running statistics.
    pub fn train(params: &'a ParamStore, states: &'a mut StateStore, grad_params: bool) -> Self {
        let n = params.len();
        Forward {
            tape: Tape::new(),
            mode: Mode::Train,
            params,
            states: StatesAccess::Mutable(states),
            param_nodes: vec![None; n],
            grad_params,
        }
    }

    /// Eval-mode context; immutable, safe for concurrent use per instance.
    pub fn eval(params: &'a ParamStore, states: &'a StateStore) -> Self {
        let n = params.len();
        Forward {
            tape: Tape::new(),
            mode: Mode::Eval,
            params,
            states: StatesAccess::Frozen(states),
            param_nodes: vec![None; n],
            grad_params: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape leaf for a parameter, created on first use.
    pub fn param_node(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let node = self
            .tape
            .leaf(self.params.value(id).clone(), self.grad_params);
        self.param_nodes[id.index()] = Some(node);
        node
    }

    /// Nodes of all parameters that were touched by this forward pass.
    pub fn touched_params(&self) -> Vec<(ParamId, NodeId)> {
        self.param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
            .collect()
    }

    /// Batch norm through the mode-appropriate kernel.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        state: BnStateId,
    ) -> Result<NodeId> {
        let g = self.param_node(gamma);
        let b = self.param_node(beta);
        match (&mut self.states, self.mode) {
            (StatesAccess::Mutable(states), Mode::Train) => {
                let st = states.get_mut(state);
                self.tape.batch_norm_train(
                    x,
                    g,
                    b,
                    &mut st.running_mean,
                    &mut st.running_var,
                    BN_EPSILON,
                    BN_MOMENTUM,
                )
            }
            (StatesAccess::Mutable(states), Mode::Eval) => {
                let st = states.get(state);
                self.tape
                    .batch_norm_eval(x, g, b, &st.running_mean, &st.running_var, BN_EPSILON)
            }
            (StatesAccess::Frozen(states), Mode::Eval) => {
                let st = states.get(state);
                self.tape
                    .batch_norm_eval(x, g, b, &st.running_mean, &st.running_var, BN_EPSILON)
            }
            (StatesAccess::Frozen(_), Mode::Train) => Err(Error::InvalidGeometry {
                context: "batch_norm",
                message: "train mode requires mutable state access".into(),
            }),
        }
    }

    /// Error if the node's value holds a non-finite element.
    pub fn check_finite(&self, node: NodeId, location: &str) -> Result<()> {
        if self.tape.value(node).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                location: location.to_string(),
            })
        }
    }
}

/// Builds parameters and states with deterministic naming and seeded
/// fan-in-scaled uniform initialization.
pub struct NetBuilder {
    pub params: ParamStore,
    pub states: StateStore,
    rng: Rng,
}

impl NetBuilder {
    pub fn new(seed: u64) -> NetBuilder {
        NetBuilder {
            params: ParamStore::new(),
            states: StateStore::new(),
            rng: Rng::from_seed_index(seed, 0x1217),
        }
    }

    /// Conv weight (out,in,kh,kw) and bias, both U(-b, b) with
    /// b = 1/sqrt(fan_in). A nonzero bias init matters beyond symmetry
    /// breaking: with zero biases, zero-padded corners whose taps are all
    /// relu zeros produce pre-activations exactly on the relu kink, which
    /// makes the network non-differentiable at its own initialization.
    pub fn conv(&mut self, name: &str, spec: ConvSpec) -> (ParamId, Option<ParamId>) {
        let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let shape = [
            spec.out_channels,
            spec.in_channels,
            spec.kernel.0,
            spec.kernel.1,
        ];
        let weight = Tensor::random(shape, -bound, bound, &mut self.rng);
        let w = self.params.register(format!("{name}.weight"), weight);
        let b = spec.has_bias.then(|| {
            let bias = Tensor::random([1, spec.out_channels, 1, 1], -bound, bound, &mut self.rng);
            self.params.register(format!("{name}.bias"), bias)
        });
        (w, b)
    }

    /// Batch-norm gamma=1, beta=0 plus a running-stats slot.
    pub fn batch_norm(&mut self, name: &str, channels: usize) -> (ParamId, ParamId, BnStateId) {
        let gamma = self
            .params
            .register(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], 1.0));
        let beta = self
            .params
            .register(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]));
        let state = self.states.register(name.to_string(), channels);
        (gamma, beta, state)
    }

    /// Square matrix with U(-1/sqrt(d), 1/sqrt(d)) init.
    pub fn square_matrix(&mut self, name: &str, d: usize) -> ParamId {
        let bound = 1.0 / (d as f64).sqrt();
        let m = Tensor::random([1, 1, d, d], -bound, bound, &mut self.rng);
        self.params.register(name.to_string(), m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_order_is_deterministic() {
        let build = || {
            let mut b = NetBuilder::new(9);
            b.conv("a", ConvSpec::pointwise(2, 3));
            b.batch_norm("a.bn", 3);
            b.square_matrix("m", 4);
            b.params
        };
        let p1 = build();
        let p2 = build();
        let names1: Vec<_> = p1.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(
            names1,
            vec!["a.weight", "a.bias", "a.bn.gamma", "a.bn.beta", "m"]
        );
        for ((_, a), (_, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn total_scalars_enumerates_everything() {
        let mut b = NetBuilder::new(0);
        b.conv("c", ConvSpec::same(3, 2, 4));
        assert_eq!(b.params.total_scalars(), (4 * 2 * 9 + 4) as u64);
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = NetBuilder::new(0);
        let mut b = NetBuilder::new(1);
        let (wa, _) = a.conv("c", ConvSpec::pointwise(4, 4));
        let (wb, _) = b.conv("c", ConvSpec::pointwise(4, 4));
        assert_ne!(a.params.value(wa).data(), b.params.value(wb).data());
    }
}
