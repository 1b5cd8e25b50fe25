//! NMSE and activity-detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, RMatrix};

/// NMSE values are clamped from below to keep exact recovery finite.
pub const NMSE_FLOOR_DB: f64 = -150.0;

/// `10 log10(err / energy)`, clamped at [`NMSE_FLOOR_DB`].
pub fn nmse_db_from_sums(err: f64, energy: f64) -> Result<f64> {
    if !(energy > 0.0) {
        return Err(Error::Domain("NMSE is undefined when every truth is zero".into()));
    }
    Ok((10.0 * (err / energy).log10()).max(NMSE_FLOOR_DB))
}

fn check_lists(estimates: &[RMatrix], truths: &[RMatrix]) -> Result<()> {
    if estimates.is_empty() || estimates.len() != truths.len() {
        return Err(Error::Shape(format!(
            "NMSE needs equal nonempty lists, got {} estimates and {} truths",
            estimates.len(),
            truths.len()
        )));
    }
    if let Some(i) = estimates.iter().zip(truths).position(|(e, t)| e.dim() != t.dim()) {
        return Err(Error::Shape(format!("sample {i}: estimate {:?} vs truth {:?}", estimates[i].dim(), truths[i].dim())));
    }
    Ok(())
}

/// Ratio of dataset sums, `10 log10(Σ‖X̂ᵢ - Xᵢ‖² / Σ‖Xᵢ‖²)`.
pub fn nmse_db(estimates: &[RMatrix], truths: &[RMatrix]) -> Result<f64> {
    check_lists(estimates, truths)?;
    let err: f64 = estimates.iter().zip(truths).map(|(e, t)| frobenius_sq(&(e - t))).sum();
    let energy: f64 = truths.iter().map(frobenius_sq).sum();
    nmse_db_from_sums(err, energy)
}

/// Mean of per-sample ratios; samples with a zero truth are skipped.
pub fn nmse_db_mean_of_ratios(estimates: &[RMatrix], truths: &[RMatrix]) -> Result<f64> {
    check_lists(estimates, truths)?;
    let ratios: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .filter_map(|(e, t)| {
            let energy = frobenius_sq(t);
            (energy > 0.0).then(|| frobenius_sq(&(e - t)) / energy)
        })
        .collect();
    if ratios.is_empty() {
        return Err(Error::Domain("NMSE is undefined when every truth is zero".into()));
    }
    nmse_db_from_sums(ratios.iter().sum::<f64>() / ratios.len() as f64, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActivityCounts {
    pub missed: usize,
    pub false_alarm: usize,
}

/// Norm of device `n`, combining lifted rows `n` and `n + N`.
pub fn device_norms(x_hat_tilde: &RMatrix) -> Vec<f64> {
    let n = x_hat_tilde.nrows() / 2;
    (0..n)
        .map(|i| {
            let (re, im) = (x_hat_tilde.row(i), x_hat_tilde.row(i + n));
            (re.dot(&re) + im.dot(&im)).sqrt()
        })
        .collect()
}

/// Counts missed detections and false alarms of the rule `norm > threshold`.
pub fn activity_metrics(x_hat_tilde: &RMatrix, true_activity: &[bool], threshold: f64) -> Result<ActivityCounts> {
    if !(threshold >= 0.0) {
        return Err(Error::Domain(format!("threshold must be >= 0, got {threshold}")));
    }
    if x_hat_tilde.nrows() != 2 * true_activity.len() {
        return Err(Error::Shape(format!(
            "estimate has {} lifted rows for {} devices",
            x_hat_tilde.nrows(),
            true_activity.len()
        )));
    }
    let mut counts = ActivityCounts::default();
    for (norm, &active) in device_norms(x_hat_tilde).into_iter().zip(true_activity) {
        match (norm > threshold, active) {
            (false, true) => counts.missed += 1,
            (true, false) => counts.false_alarm += 1,
            _ => {}
        }
    }
    Ok(counts)
}

/// Midpoint of the largest gap between consecutive sorted device norms.
pub fn largest_gap_threshold(x_hat_tilde: &RMatrix) -> f64 {
    let mut norms = device_norms(x_hat_tilde);
    norms.sort_by(f64::total_cmp);
    norms
        .windows(2)
        .max_by(|a, b| (a[1] - a[0]).total_cmp(&(b[1] - b[0])))
        .map(|w| 0.5 * (w[0] + w[1]))
        .unwrap_or(0.0)
}

/// `0.5 μ_lo` when the signal floor is known, else [`largest_gap_threshold`].
pub fn default_threshold(x_hat_tilde: &RMatrix, mu_lo: Option<f64>) -> f64 {
    match mu_lo {
        Some(mu) => 0.5 * mu,
        None => largest_gap_threshold(x_hat_tilde),
    }
}
