//! Central finite-difference gradient checking.

use super::params::ParamStore;
use super::tape::Matrix;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub max_relative_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps gradients that are zero on both
/// sides from producing 0/0.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` (indexed by parameter id) against central differences of
/// `loss` for every entry of every parameter whose name satisfies `select`.
pub fn check_gradients(
    store: &ParamStore,
    analytic: &[Option<Matrix>],
    loss: impl Fn(&ParamStore) -> f64,
    select: impl Fn(&str) -> bool,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckSummary {
    let mut summary = GradCheckSummary::default();
    let mut probe = store.clone();
    for id in store.ids() {
        if !select(store.name(id)) {
            continue;
        }
        let (rows, cols) = store.value(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let original = store.value(id)[[r, c]];
                probe.value_mut(id)[[r, c]] = original + step;
                let plus = loss(&probe);
                probe.value_mut(id)[[r, c]] = original - step;
                let minus = loss(&probe);
                probe.value_mut(id)[[r, c]] = original;
                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic
                    .get(id.index())
                    .and_then(|g| g.as_ref())
                    .map_or(0.0, |g| g[[r, c]]);
                let err = relative_error(a, numeric, floor);
                summary.checked += 1;
                summary.max_relative_error = summary.max_relative_error.max(err);
                if err > tolerance {
                    summary.mismatches.push(GradMismatch {
                        param: store.name(id).to_string(),
                        row: r,
                        col: c,
                        analytic: a,
                        numeric,
                        relative_error: err,
                    });
                }
            }
        }
    }
    summary
}
