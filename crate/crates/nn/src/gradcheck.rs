//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel_err: f64,
    pub worst_param: String,
}

/// Relative error with the denominator floored at `1e-4`, so entries whose
/// true gradient is numerically zero are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Compares analytic and numeric gradients of `loss` for up to
/// `per_param` randomly chosen entries of every trainable parameter.
pub fn check_params<F>(store: &mut ParamStore, per_param: usize, eps: f64, seed: u64, loss: F) -> GradCheck
where
    F: Fn(&mut Graph) -> Var,
{
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l).params
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck { checked: 0, worst_rel_err: 0.0, worst_param: String::new() };
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.get(id).len();
        let picks = sample(&mut rng, n, per_param.min(n)).into_vec();
        for i in picks {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.worst_rel_err {
                report.worst_rel_err = err;
                report.worst_param = format!("{}[{i}]", store.name(id));
            }
        }
    }
    report
}
