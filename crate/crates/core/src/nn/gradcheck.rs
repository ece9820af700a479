use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    /// Finite-difference and analytic values at the worst coordinate.
    pub worst_fd: f64,
    pub worst_analytic: f64,
    pub coordinates_checked: usize,
}

/// Central finite differences against analytic gradients on a random subsample
/// of `samples` coordinates (all coordinates when the store is smaller).
///
/// Uses the fourth-order five-point stencil, which tolerates steps around
/// `1e-3`; round-off then stays far below the `1e-8` floor even for
/// coordinates whose true gradient is exactly zero.
///
/// The error of a coordinate is `|g_fd − g| / max(1e-8, |g_fd| + |g|)`.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParamStore<f64>,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Grads<f64>)>,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {epsilon} must be positive")));
    }
    let (loss, grads) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let index: Vec<(usize, usize)> = params
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.value.len()).map(move |k| (p, k)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if samples >= index.len() {
        (0..index.len()).collect()
    } else {
        let mut c = sample(&mut rng, index.len(), samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = params.clone();
    let mut worst = (0.0f64, String::new(), 0.0, 0.0);
    for &ci in &chosen {
        let (p, k) = index[ci];
        let orig = params.params()[p].value[k];
        let mut at = |h: f64| -> Result<f64> {
            probe.params_mut()[p].value[k] = orig + h;
            let l = loss_fn(&probe)?.0;
            if !l.is_finite() {
                return Err(Error::NonFinite("loss"));
            }
            Ok(l)
        };
        let (p1, m1) = (at(epsilon)?, at(-epsilon)?);
        let (p2, m2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
        probe.params_mut()[p].value[k] = orig;
        let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
        let an = grads.g[p][k];
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, format!("{}[{k}]", params.params()[p].name), fd, an);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst: worst.1,
        worst_fd: worst.2,
        worst_analytic: worst.3,
        coordinates_checked: chosen.len(),
    })
}
