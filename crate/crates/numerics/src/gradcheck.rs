//! Central-difference verification of reverse-mode gradients.

use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// `|a - b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_entries_per_param: Option<usize>,
    /// Restrict the check to these parameters; all when `None`.
    pub only: Option<Vec<ParamId>>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_param: None,
            only: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<GradCheckEntry>,
}

/// Compares the tape gradient of the scalar `f` against central differences
/// with respect to the parameters in `store`. `f` must be deterministic:
/// any sampled noise has to be frozen before calling.
pub fn grad_check<F>(store: &mut ParamStore, f: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: for<'a> Fn(&mut Tape<'a>) -> Var,
{
    let analytic = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape);
        tape.backward(loss).into_params()
    };
    let eval = |store: &ParamStore| {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape);
        tape.value(loss).item()
    };

    let ids: Vec<ParamId> = match &opts.only {
        Some(ids) => ids.clone(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport::default();
    for id in ids {
        let len = store.get(id).value.len();
        let mut entries: Vec<usize> = (0..len).collect();
        if let Some(cap) = opts.max_entries_per_param {
            if cap < len {
                rng.shuffle(&mut entries);
                entries.truncate(cap);
                entries.sort_unstable();
            }
        }
        for idx in entries {
            let original = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = original + opts.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[idx] = original - opts.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[idx]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if report.worst.as_ref().is_none_or(|w| err > w.rel_error) {
                report.worst = Some(GradCheckEntry {
                    param: store.get(id).name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    report
}
