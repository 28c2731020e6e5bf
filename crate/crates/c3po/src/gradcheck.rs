//! Central finite-difference checks for analytic gradients.
//!
//! The checker only evaluates forward passes, so it stays independent of
//! the backward rules it is used to verify.

use crate::tensor::{NoGradGuard, Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor from a seed.
pub fn random_tensor<E: Scalar>(shape: Shape, seed: u64) -> Tensor<E> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| E::from_f64_lossy(rng.random_range(-1.0..1.0)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` of a scalar
/// function evaluated with graph recording disabled.
pub fn central_difference<E: Scalar>(
    values: &[E],
    index: usize,
    eps: f64,
    mut f: impl FnMut(&[E]) -> f64,
) -> f64 {
    let _guard = NoGradGuard::new();
    let mut probe = values.to_vec();
    let x = values[index].to_f64_lossy();
    probe[index] = E::from_f64_lossy(x + eps);
    let up = f(&probe);
    probe[index] = E::from_f64_lossy(x - eps);
    let down = f(&probe);
    (up - down) / (2.0 * eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares `analytic[i]` against a central difference of `f` at each index.
pub fn check_indices<E: Scalar>(
    values: &[E],
    analytic: &[E],
    indices: &[usize],
    eps: f64,
    floor: f64,
    mut f: impl FnMut(&[E]) -> f64,
) -> GradCheckReport {
    let entries = indices
        .iter()
        .map(|&index| {
            let numeric = central_difference(values, index, eps, &mut f);
            let a = analytic[index].to_f64_lossy();
            GradCheckEntry {
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, floor),
            }
        })
        .collect();
    GradCheckReport { entries }
}
