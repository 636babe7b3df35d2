//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::{Bound, ParamStore};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

/// Relative errors above this trigger the kink test in
/// [`finite_diff_check`]; below it an entry is accepted outright.
pub const EXCUSE_FLOOR: f64 = 1e-7;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over entries not excused as kinks.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose difference stencil straddles a kink (see
    /// [`finite_diff_check`]).
    pub kinks: usize,
}

/// Tape gradient of `forward` for every parameter.
fn analytic<F>(store: &ParamStore, forward: &F) -> Result<Vec<Option<Vec<f64>>>>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = forward(&mut tape, &bound)?;
    let grads = tape.backward(&loss)?;
    Ok(store.ids().map(|id| grads.param(id).map(|g| g.data().to_vec())).collect())
}

fn entry(grads: &[Option<Vec<f64>>], slot: usize, i: usize) -> f64 {
    grads[slot].as_ref().map_or(0.0, |g| g[i])
}

/// Compares tape gradients of `forward` against five-point central
/// differences `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, entry by
/// entry over every trainable parameter, and reports the worst relative
/// error. `forward` must return a `1 x 1` loss and be deterministic.
///
/// Piecewise-smooth ops (ReLU, abs, max) make the differences wrong when a
/// kink lies within `2h` of the evaluation point. Such a crossing shows up as
/// a jump `J` in the tape gradient at `x +- h` or `x +- 2h`, and it biases the
/// stencil by at most `5J/6`. An entry outside [`EXCUSE_FLOOR`] is therefore
/// excused, and counted in `kinks`, only if the largest second difference of
/// its tape gradient covers its discrepancy. On smooth stretches those second
/// differences are `O(h^2)`, so wrong adjoints are never excused.
pub fn finite_diff_check<F>(store: &mut ParamStore, h: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let base = analytic(store, &forward)?;
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let bound = store.bind(&mut tape);
        Ok(forward(&mut tape, &bound)?.value().get(0, 0))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for (slot, id) in ids.into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            let at = |store: &mut ParamStore, offset: f64| {
                store.get_mut(id).value.data_mut()[i] = orig + offset;
                let f = eval(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                f
            };
            let d1 = at(store, h)? - at(store, -h)?;
            let d2 = at(store, 2.0 * h)? - at(store, -2.0 * h)?;
            let numeric = (8.0 * d1 - d2) / (12.0 * h);
            let a = entry(&base, slot, i);
            let mut err = relative_error(a, numeric);
            report.checked += 1;
            if err > EXCUSE_FLOOR {
                let mut grad_at = |offset: f64| -> Result<f64> {
                    store.get_mut(id).value.data_mut()[i] = orig + offset;
                    let g = analytic(store, &forward);
                    store.get_mut(id).value.data_mut()[i] = orig;
                    Ok(entry(&g?, slot, i))
                };
                let near = grad_at(h)? + grad_at(-h)? - 2.0 * a;
                let far = grad_at(2.0 * h)? + grad_at(-2.0 * h)? - 2.0 * a;
                if 5.0 / 6.0 * near.abs().max(far.abs()) >= (a - numeric).abs() {
                    report.kinks += 1;
                    err = 0.0;
                }
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
