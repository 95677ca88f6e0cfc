//! Central finite-difference check of analytic gradients.

use super::grad::Trainable;
use super::loss::LossKind;
use crate::data::Example;
use crate::error::Result;

/// Denominator floor for relative error; components whose analytic and
/// numeric values are both below this are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_param: String,
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares every component of the analytic gradient of the total multi-loss
/// with `(L(theta + eps) - L(theta - eps)) / (2 eps)`.
pub fn check_gradients<M: Trainable<f64>>(
    model: &M,
    batch: &[&Example],
    kind: LossKind,
    eps: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.compute_gradients(batch, kind)?;
    let analytic = model.dense_grads(&grads);

    let mut numeric: Vec<(String, Vec<f64>)> = Vec::new();
    let mut probe = model.clone();
    let mut shapes: Vec<(String, usize)> = Vec::new();
    probe.for_each_param_mut(&mut |name, s| shapes.push((name, s.len())));

    for (group, (name, len)) in shapes.iter().enumerate() {
        let mut values = Vec::with_capacity(*len);
        for idx in 0..*len {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut g = 0;
                probe.for_each_param_mut(&mut |_, s| {
                    if g == group {
                        s[idx] += delta;
                    }
                    g += 1;
                });
                let loss = probe.batch_loss(batch, kind).map(|l| l.total());
                let mut g = 0;
                probe.for_each_param_mut(&mut |_, s| {
                    if g == group {
                        s[idx] -= delta;
                    }
                    g += 1;
                });
                loss
            };
            let plus = eval(eps)?;
            let minus = eval(-eps)?;
            values.push((plus - minus) / (2.0 * eps));
        }
        numeric.push((name.clone(), values));
    }

    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
    };
    for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
        for (idx, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let err = relative_error(av, nv);
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_param = format!("{name}[{idx}]");
            }
            if err >= tolerance {
                report.failures.push((name.clone(), idx, av, nv));
            }
        }
    }
    Ok(report)
}
