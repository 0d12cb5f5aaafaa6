//! Error-feedback output quantizer.
//!
//! The rounding error of each step is carried into the next one, so the
//! running sum of outputs never drifts more than half an lsb from the running
//! sum of inputs. Averaged over a few ticks the converter therefore resolves
//! voltages finer than its lsb.

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuantizerState {
    /// Accumulated rounding error, in input units.
    pub err: f64,
}

/// One quantizer step: `q = round((u + e) / lsb) * lsb`, `e' = u + e - q`.
#[inline]
pub fn quantize_ef(u: f64, state: &mut QuantizerState, lsb: f64) -> f64 {
    debug_assert!(lsb > 0.0);
    let x = u + state.err;
    let q = (x / lsb).round() * lsb;
    state.err = x - q;
    q
}
