//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamStore};
use super::TensorError;

/// Denominator floor for [`relative_error`]. Central differences in f64 with
/// ε = 1e-5 carry roughly 1e-10 of rounding noise, so gradients that are
/// exactly zero (a key bias under softmax, say) would otherwise score as
/// large relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Which coordinates of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// At most `per_param` seeded random coordinates of every parameter.
    Sample { per_param: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name, flat index, analytic and numeric values at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares the backward-pass gradient of the scalar built by `f` against
/// `(f(x+ε) − f(x−ε)) / 2ε` for every selected coordinate of every parameter
/// that requires a gradient.
pub fn grad_check<F, E>(store: &ParamStore<f64>, eps: f64, coords: Coords, f: F) -> Result<GradCheckReport, E>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward(loss)?.param_grads(store.len())
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let loss = f(&mut g, s)?;
        Ok(g.scalar(loss))
    };
    let mut scratch = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut rng = match coords {
        Coords::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Coords::All => None,
    };
    for i in 0..store.len() {
        let id = ParamId(i);
        if !store.get(id).requires_grad() {
            continue;
        }
        let n = store.get(id).numel();
        let picks: Vec<usize> = match (coords, rng.as_mut()) {
            (Coords::Sample { per_param, .. }, Some(rng)) if per_param < n => {
                let mut v = sample(rng, n, per_param).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = scratch.get(id).data()[j];
            scratch.get_mut(id).data_mut()[j] = orig + eps;
            let plus = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[j] = orig - eps;
            let minus = eval(&scratch)?;
            scratch.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((store.name(id).to_string(), j, a, numeric));
            }
        }
    }
    Ok(report)
}
