//! Central finite-difference check of tape gradients.

use crate::error::NnError;
use crate::params::{Bound, ParamStore, Precision};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// derivative is zero are compared absolutely.
    pub scale_floor: f64,
    /// Replay the unperturbed stop-gradient values in every perturbed pass.
    pub freeze_stop_gradients: bool,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-6,
            freeze_stop_gradients: true,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
    pub passed: bool,
}

/// Compare reverse-mode gradients of the scalar returned by `loss` against
/// central differences, perturbing every entry of every store in turn.
///
/// Stores must hold `f64` values; `f32` storage would round the perturbation.
pub fn grad_check<F>(
    stores: &mut [&mut ParamStore],
    mut loss: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&mut Tape, &[Bound]) -> Result<Var, NnError>,
{
    if stores.iter().any(|s| s.precision() != Precision::F64) {
        return Err(NnError::Config("gradient check needs f64 parameter stores".into()));
    }

    let mut tape = Tape::new();
    let bounds: Vec<Bound> = stores.iter().map(|s| s.bind(&mut tape)).collect();
    let out = loss(&mut tape, &bounds)?;
    let base = tape.item(out);
    if !base.is_finite() {
        return Err(NnError::NonFinite("loss at the unperturbed point".into()));
    }
    let grads = tape.backward(out);
    let frozen = tape.captured_stop_gradients().to_vec();
    let analytic: Vec<Vec<(String, Vec<f64>)>> = bounds
        .iter()
        .zip(stores.iter())
        .map(|(b, s)| {
            b.iter()
                .map(|(name, v)| {
                    let n = s.get(name).map(|e| e.values.len()).unwrap_or(0);
                    let g = grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
                    (name.to_string(), g)
                })
                .collect()
        })
        .collect();
    drop(tape);

    let mut eval = |stores: &mut [&mut ParamStore]| -> Result<f64, NnError> {
        let mut t = if cfg.freeze_stop_gradients {
            Tape::with_frozen_stop_gradients(frozen.clone())
        } else {
            Tape::new()
        };
        let b: Vec<Bound> = stores.iter().map(|s| s.bind_frozen(&mut t)).collect();
        let out = loss(&mut t, &b)?;
        Ok(t.item(out))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, passed: true };
    for (si, per_store) in analytic.iter().enumerate() {
        for (name, g) in per_store {
            let n = g.len();
            let indices: Vec<usize> = match cfg.max_entries_per_param {
                Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
                _ => (0..n).collect(),
            };
            for i in indices {
                let orig = stores[si].get(name)?.values[i];
                stores[si].set_value(name, i, orig + cfg.step)?;
                let plus = eval(stores);
                stores[si].set_value(name, i, orig - cfg.step)?;
                let minus = eval(stores);
                stores[si].set_value(name, i, orig)?;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(NnError::NonFinite(format!("loss with {name}[{i}] perturbed")));
                }
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let a = g[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.scale_floor);
                report.checked += 1;
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((name.clone(), i, a, numeric));
                }
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    Ok(report)
}
