//! Central finite-difference verification of analytic gradients.
//!
//! The oracle side never touches the tape: the caller supplies a plain
//! closure evaluating the loss from parameter values, and every stored
//! parameter entry is perturbed in turn.

use crate::params::ParamStore;
use crate::tensor::rel_err;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the gradients already accumulated in `store` against central
/// finite differences of `loss_fn` with the given step, flagging entries
/// whose relative error exceeds `tol`.
pub fn check_against_fd(
    store: &mut ParamStore<f64>,
    mut loss_fn: impl FnMut(&ParamStore<f64>) -> f64,
    step: f64,
    tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
    };
    let n_params = store.len();
    for pi in 0..n_params {
        let id = crate::params::ParamId(pi);
        let len = store.get(id).value.numel();
        for ei in 0..len {
            let orig = store.get(id).value.data()[ei];
            store.get_mut(id).value.data_mut()[ei] = orig + step;
            let plus = loss_fn(store);
            store.get_mut(id).value.data_mut()[ei] = orig - step;
            let minus = loss_fn(store);
            store.get_mut(id).value.data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let analytic = store.get(id).grad.data()[ei];
            // central differences carry rounding noise around
            // eps_machine * |loss| / step; absolute agreement below that
            // noise floor counts as a match regardless of ratio
            let err = if (analytic - fd).abs() < 1e-8 {
                0.0
            } else {
                rel_err(analytic, fd)
            };
            report.entries_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{}]", store.get(id).name, ei);
            }
            if err > tol {
                report.failures.push(format!(
                    "{}[{}]: analytic {analytic:.6e} vs fd {fd:.6e} (rel {err:.3e})",
                    store.get(id).name,
                    ei
                ));
            }
        }
    }
    report
}
