//! Adam with bias correction, one state per parameter group.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moment estimates of one parameter group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Rebuilds the moments after the owning parameters were reordered.
    /// `sources[k]` names the old row that row `k` came from, or `None` for a
    /// fresh row with zero moments. Rows are `width` values wide.
    pub fn reindex(&self, sources: &[Option<usize>], width: usize) -> Self {
        let mut out = Self::new(sources.len() * width);
        out.step = self.step;
        for (k, src) in sources.iter().enumerate() {
            if let Some(s) = src {
                out.m[k * width..(k + 1) * width].copy_from_slice(&self.m[s * width..(s + 1) * width]);
                out.v[k * width..(k + 1) * width].copy_from_slice(&self.v[s * width..(s + 1) * width]);
            }
        }
        out
    }
}

/// One bias-corrected Adam update of `params` in place. `group` names the
/// parameter group in error messages.
pub fn adam_step(group: &str, params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::InvalidParameter(format!(
            "{group}: {} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in parameter group {group} at entry {k}")));
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = (1.0 - BETA2.powi(state.step as i32)).sqrt();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr / bc1 * *m / (v.sqrt() / bc2 + EPSILON);
    }
    Ok(())
}
