//! Central finite differences against tape gradients.

use crate::nn::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradProbe {
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / denom
    }
}

/// Perturbs each probed scalar by `+-step`, evaluating `loss` on the whole
/// store each time, and pairs the difference quotient with `analytic[i]`.
pub fn central_differences<T: Scalar>(
    store: &mut ParamStore<T>,
    probes: &[usize],
    analytic_flat: &[f64],
    step: f64,
    mut loss: impl FnMut(&ParamStore<T>) -> f64,
) -> Vec<GradProbe> {
    probes
        .iter()
        .map(|&i| {
            let orig = store.flat_get(i);
            store.flat_set(i, orig + T::from_f64_lossy(step));
            let plus = loss(store);
            store.flat_set(i, orig - T::from_f64_lossy(step));
            let minus = loss(store);
            store.flat_set(i, orig);
            GradProbe {
                flat_index: i,
                analytic: analytic_flat[i],
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
