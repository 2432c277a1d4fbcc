//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};

const VANISHING: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)` for every checked parameter.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

/// Compares analytic gradients of `loss` against central differences with
/// step `eps`.
///
/// At most `max_entries` coordinates are probed per parameter tensor. The
/// error for a tensor is `|g_a - g_n| / (|g_a| + |g_n|)` over the probed
/// coordinates (Euclidean norms). Tensors whose analytic and numeric
/// gradients both fall below `1e-7` count as exact: differencing noise
/// would otherwise dominate the ratio (e.g. attention key biases, whose true
/// gradient is zero).
pub fn check_gradients<F>(store: &mut ParamStore, loss: F, eps: f64, max_entries: usize, rng: &mut impl Rng) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.scalar(l)
    };

    let mut per_param = Vec::new();
    let mut entries_checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.value(id).len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            sample(rng, len, max_entries).into_vec()
        };
        let mut diff_sq = 0.0;
        let mut a_sq = 0.0;
        let mut n_sq = 0.0;
        for k in picks {
            let original = store.value(id).data[k];
            store.value_mut(id).data[k] = original + eps;
            let plus = eval(store);
            store.value_mut(id).data[k] = original - eps;
            let minus = eval(store);
            store.value_mut(id).data[k] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g.data[k]);
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            entries_checked += 1;
        }
        let (a_norm, n_norm) = (a_sq.sqrt(), n_sq.sqrt());
        let rel = if a_norm < VANISHING && n_norm < VANISHING { 0.0 } else { diff_sq.sqrt() / (a_norm + n_norm) };
        per_param.push((store.name(id).to_string(), rel));
    }
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradCheckReport { per_param, max_rel_error, entries_checked }
}
