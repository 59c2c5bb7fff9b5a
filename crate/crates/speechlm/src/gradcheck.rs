//! Finite-difference verification of reverse-mode gradients.
//!
//! The harness perturbs every element of every trainable parameter by
//! `+/- eps`, re-evaluates the loss, and compares the central difference
//! against the analytic gradient. It is the reference check for the whole
//! differentiable stack and is only meaningful in double precision.

use crate::error::{Error, Result};
use crate::optim::{GradMap, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst element, for diagnostics.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| e.max_rel_err > self.tol)
            .collect()
    }
}

/// Relative error with an absolute floor so near-zero gradient pairs do not
/// blow up the ratio.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check analytic gradients of `loss_fn` against central finite differences
/// for every trainable parameter in `params`.
///
/// `loss_fn` must evaluate the loss at the current parameter values and
/// return it together with gradients for all trainable parameters; it must be
/// deterministic. Frozen parameters are excluded from the report.
pub fn gradient_check<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, GradMap)>,
{
    let (loss0, analytic) = loss_fn(params)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!(
            "gradient check: loss is non-finite at the base point ({loss0})"
        )));
    }

    let names: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();

    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let grad = analytic.get(&name).ok_or_else(|| {
            Error::InvalidState(format!("loss_fn returned no gradient for {name}"))
        })?;
        let n = grad.numel();
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..n {
            let original = {
                let p = params.get_mut(&name).expect("trainable param exists");
                let v = p.value.data()[i];
                p.value.data_mut()[i] = v + eps;
                v
            };
            let (loss_plus, _) = loss_fn(params)?;
            params.get_mut(&name).unwrap().value.data_mut()[i] = original - eps;
            let (loss_minus, _) = loss_fn(params)?;
            params.get_mut(&name).unwrap().value.data_mut()[i] = original;
            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient check: non-finite loss while perturbing {name}[{i}]"
                )));
            }
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = rel_err(a, numeric);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.max_abs_err = (a - numeric).abs();
                worst.worst_index = i;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { tol, entries })
}
