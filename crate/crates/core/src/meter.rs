//! Runtime FLOP meter.
//!
//! Forward kernels report the work they actually execute here; the
//! accounting module predicts the same totals analytically from layer
//! shapes. The acceptance suite compares the two routes for exact equality,
//! so both must use the cost conventions below.
//!
//! Conventions (also printed in every accounting report):
//! - one multiply-accumulate = 2 FLOPs (conv taps, matmul triples)
//! - conv bias / add / scale / broadcast-multiply / pooling-sum = 1 FLOP per element
//! - pooling adds 1 FLOP per output element for the divide
//! - batch norm = 2 FLOPs per element (affine application; statistics not counted)
//! - relu = 1 FLOP per element
//! - sigmoid / softmax / exp / rsqrt = 4 FLOPs per element
//! - bilinear resize = 8 FLOPs per output element (4 taps, lerp form)
//! - reshape / transpose / slice / concat = 0 FLOPs

use std::cell::Cell;

/// FLOPs per sigmoid/softmax/exp/rsqrt element.
pub const FLOPS_TRANSCENDENTAL: u64 = 4;
/// FLOPs per batch-norm output element.
pub const FLOPS_BATCH_NORM: u64 = 2;
/// FLOPs per relu element.
pub const FLOPS_RELU: u64 = 1;
/// FLOPs per bilinear-resize output element.
pub const FLOPS_BILINEAR: u64 = 8;

thread_local! {
    static METER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Reset and enable the current thread's meter.
pub fn start() {
    METER.with(|m| m.set(Some(0)));
}

/// Disable the meter and return the count accumulated since [`start`].
pub fn stop() -> u64 {
    METER.with(|m| {
        let v = m.get().unwrap_or(0);
        m.set(None);
        v
    })
}

/// True when a meter is active on this thread.
#[inline]
pub fn enabled() -> bool {
    METER.with(|m| m.get().is_some())
}

/// Record `flops` executed operations. No-op when the meter is off.
#[inline]
pub fn add(flops: u64) {
    METER.with(|m| {
        if let Some(v) = m.get() {
            m.set(Some(v + flops));
        }
    });
}
