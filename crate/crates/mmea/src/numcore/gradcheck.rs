//! Central-finite-difference validation of analytic gradients.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::numcore::matrix::Matrix;
use crate::numcore::Param;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries probed per parameter; 0 means every entry.
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: 0,
            seed: 0,
        }
    }
}

/// Worst observed disagreement for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
    pub analytic_at_worst: f64,
    pub fd_at_worst: f64,
    /// Entries whose relative error exceeded the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.per_param.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn summary(&self) -> String {
        let mut lines = Vec::new();
        for p in &self.per_param {
            lines.push(format!(
                "{}: checked {} entries, max rel err {:.3e}{}",
                p.name,
                p.entries_checked,
                p.max_rel_error,
                if p.flagged.is_empty() {
                    String::new()
                } else {
                    format!(" ({} flagged)", p.flagged.len())
                }
            ));
        }
        lines.join("\n")
    }
}

/// Compare the analytic gradient of `evaluate` against central finite
/// differences `(f(x+eps) - f(x-eps)) / 2 eps` on sampled entries of every
/// parameter.
///
/// `evaluate` must be deterministic given the parameter values and return
/// the loss together with one gradient matrix per parameter, in parameter
/// order. Relative error uses `|a - fd| / max(1, |a|, |fd|)` so that tiny
/// gradients are compared absolutely.
pub fn grad_check<F>(
    params: &mut [(String, Param)],
    mut evaluate: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[(String, Param)]) -> Result<(f64, Vec<Matrix>)>,
{
    let (base_loss, analytic) = evaluate(params)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFinite("loss at base point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "evaluator returned {} gradients for {} params",
            analytic.len(),
            params.len()
        )));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        per_param: Vec::new(),
    };

    for pi in 0..params.len() {
        let n_entries = params[pi].1.value.data().len();
        let mut entries: Vec<usize> = (0..n_entries).collect();
        if cfg.max_entries_per_param > 0 && cfg.max_entries_per_param < n_entries {
            entries.shuffle(&mut rng);
            entries.truncate(cfg.max_entries_per_param);
            entries.sort_unstable();
        }

        let mut check = ParamCheck {
            name: params[pi].0.clone(),
            entries_checked: entries.len(),
            max_rel_error: 0.0,
            worst_entry: 0,
            analytic_at_worst: 0.0,
            fd_at_worst: 0.0,
            flagged: Vec::new(),
        };

        for &entry in &entries {
            let original = params[pi].1.value.data()[entry];

            params[pi].1.value.data_mut()[entry] = original + cfg.epsilon;
            let (loss_plus, _) = evaluate(params)?;
            params[pi].1.value.data_mut()[entry] = original - cfg.epsilon;
            let (loss_minus, _) = evaluate(params)?;
            params[pi].1.value.data_mut()[entry] = original;

            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while probing {} entry {}",
                    params[pi].0, entry
                )));
            }

            let fd = (loss_plus - loss_minus) / (2.0 * cfg.epsilon);
            let a = analytic[pi].data()[entry];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_entry = entry;
                check.analytic_at_worst = a;
                check.fd_at_worst = fd;
            }
            if rel > cfg.tolerance {
                check.flagged.push(entry);
            }
        }
        report.per_param.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> Vec<(String, Param)> {
        let w = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.0, -0.7]).unwrap();
        vec![("w".to_string(), Param::new(w))]
    }

    fn half_norm_sq(params: &[(String, Param)]) -> Result<(f64, Vec<Matrix>)> {
        let w = &params[0].1.value;
        let loss = 0.5 * w.data().iter().map(|v| v * v).sum::<f64>();
        Ok((loss, vec![w.clone()]))
    }

    #[test]
    fn quadratic_matches_within_1e8() {
        let mut params = quadratic_params();
        let report = grad_check(
            &mut params,
            half_norm_sq,
            &GradCheckConfig {
                tolerance: 1e-8,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut params = quadratic_params();
        let report = grad_check(
            &mut params,
            |p| {
                let (loss, mut grads) = half_norm_sq(p)?;
                let v = grads[0].get(0, 1);
                grads[0].set(0, 1, v + 0.1);
                Ok((loss, grads))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.per_param[0].flagged, vec![1]);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let mut params = quadratic_params();
        let result = grad_check(
            &mut params,
            |p| {
                let w = &p[0].1.value;
                // Blows up once the probe moves the first entry.
                if (w.get(0, 0) - 0.5).abs() > 1e-9 {
                    Ok((f64::NAN, vec![w.clone()]))
                } else {
                    half_norm_sq(p)
                }
            },
            &GradCheckConfig::default(),
        );
        assert!(matches!(result, Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampling_caps_entries() {
        let mut params = quadratic_params();
        let report = grad_check(
            &mut params,
            half_norm_sq,
            &GradCheckConfig {
                max_entries_per_param: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.per_param[0].entries_checked, 2);
    }
}
