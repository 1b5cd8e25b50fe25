//! Constants of the no-false-positive convergence guarantee for ALPGM-MM and
//! a certified run whose schedules follow it.
//!
//! For a dictionary `D` with mutual coherence `φ`, sparsity `s`, `c = (2s-1)φ < 1`:
//!
//! ```text
//! β̂   = (1 - √(1-c))² / (2s)
//! C₀  = max(s μ_x, 8 μ_x s√s (1+β̂) / (c √(4β̂ - (β̂ + φs - φ)²)))
//! K₀  = ⌈(log μ̲_x - log 6C₀) / log c⌉ + 1
//! ε_max = min(μ̲_x / 3μ_B,  μ̲_x (1-c) / (6 μ_B (1+s)),  √s μ_x (1-c) c^{K₀} / ((1+s+√s) μ_B))
//! ```
//!
//! With `θ_k = φ‖X̃^k - X̃*‖_{2,1} + μ_B ε`, `γ_k = 1`, `β_k = 0` up to `K₀`
//! and `β̂` after, and `η_k = 1/(4θ_k)` before `K₀` and `1/(2θ_k)` from `K₀`
//! on, every iterate's row support stays inside the true support and
//! `‖X̃^k - X̃*‖_F <= C₀ c^k + (1+s) μ_B ε / (1-c)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::dictionary::{mutual_coherence, AnalyticDictionary};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, norm_2_1, row_group_norms, row_support, RMatrix, RealizedSystem, SUPPORT_TOL};
use crate::prox::{shrink_groups, ProxParams, Shrink};

/// Relative slack for floating-point comparisons against the bounds.
const BOUND_SLACK: f64 = 1e-9;

/// Signals with at most `s` nonzero rows whose norms lie in
/// `[mu_lo, mu_hi]`, observed with noise `‖Z̃‖_F <= eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalClass {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub s: usize,
    pub eps: f64,
}

impl SignalClass {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_lo > 0.0 && self.mu_lo <= self.mu_hi && self.mu_hi.is_finite()) {
            return Err(Error::Config(format!("need 0 < mu_lo <= mu_hi, got {} and {}", self.mu_lo, self.mu_hi)));
        }
        if self.s == 0 {
            return Err(Error::Config("sparsity s must be at least 1".into()));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremConstants {
    pub phi: f64,
    pub c_phis: f64,
    pub mu_b: f64,
    pub beta_hat: f64,
    pub c0: f64,
    pub k0: usize,
    pub eps_max: f64,
    pub s: usize,
    pub mu_lo: f64,
    pub mu_hi: f64,
}

/// `β̂ = (1 - √(1-c))² / (2s)`.
pub fn beta_hat(c_phis: f64, s: usize) -> f64 {
    (1.0 - (1.0 - c_phis).sqrt()).powi(2) / (2.0 * s as f64)
}

/// Evaluates every constant for dictionary `d` (unit-norm columns) and `B`.
pub fn compute_constants(d: &RMatrix, b: &RMatrix, cls: &SignalClass) -> Result<TheoremConstants> {
    cls.validate()?;
    let phi = mutual_coherence(d)?;
    let s = cls.s as f64;
    let c = (2.0 * s - 1.0) * phi;
    if c >= 1.0 {
        return Err(Error::TheoremInapplicable(format!("c_phis = (2s-1)phi = {c:.6} >= 1")));
    }
    let mu_b = norm_2_1(b);
    let bh = beta_hat(c, cls.s);
    let (mu_lo, mu_x) = (cls.mu_lo, cls.mu_hi);
    let (c0, k0) = if c == 0.0 {
        // orthogonal columns: the transient term vanishes after one step
        (s * mu_x, 1)
    } else {
        let disc = 4.0 * bh - (bh + phi * s - phi).powi(2);
        if !(disc > 0.0) {
            return Err(Error::TheoremInapplicable(format!(
                "4 beta_hat - (beta_hat + phi s - phi)^2 = {disc:.6e} is not positive, C0 undefined"
            )));
        }
        let c0 = (s * mu_x).max(8.0 * mu_x * s * s.sqrt() * (1.0 + bh) / (c * disc.sqrt()));
        let k0 = ((mu_lo.ln() - (6.0 * c0).ln()) / c.ln()).ceil() + 1.0;
        (c0, k0.max(0.0) as usize)
    };
    let eps_max = [
        mu_lo / (3.0 * mu_b),
        mu_lo * (1.0 - c) / (6.0 * mu_b * (1.0 + s)),
        s.sqrt() * mu_x * (1.0 - c) * c.powi(k0 as i32) / ((1.0 + s + s.sqrt()) * mu_b),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    Ok(TheoremConstants { phi, c_phis: c, mu_b, beta_hat: bh, c0, k0, eps_max, s: cls.s, mu_lo, mu_hi: mu_x })
}

impl TheoremConstants {
    /// `C₀ c^k + (1+s) μ_B ε / (1-c)`.
    pub fn error_bound(&self, k: usize, eps: f64) -> f64 {
        self.c0 * self.c_phis.powi(k as i32) + self.noise_floor(eps)
    }

    /// `(1+s) μ_B ε / (1-c)`.
    pub fn noise_floor(&self, eps: f64) -> f64 {
        (1.0 + self.s as f64) * self.mu_b * eps / (1.0 - self.c_phis)
    }
}

/// `θ_k = φ‖X̃^k - X̃*‖_{2,1} + μ_B ε`.
pub fn oracle_theta(x_k: &RMatrix, x_star: &RMatrix, tc: &TheoremConstants, eps: f64) -> Result<f64> {
    if x_k.dim() != x_star.dim() {
        return Err(Error::Shape(format!("iterate {:?} vs truth {:?}", x_k.dim(), x_star.dim())));
    }
    Ok(tc.phi * norm_2_1(&(x_k - x_star)) + tc.mu_b * eps)
}

/// Iterates and schedules of a certified run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifiedTrace {
    /// `K + 1` iterates starting from `X̃⁰ = 0`.
    #[serde(skip)]
    pub iterates: Vec<RMatrix>,
    pub theta: Vec<f64>,
    /// `0` marks an identity layer.
    pub eta: Vec<f64>,
    pub beta: Vec<f64>,
    pub supports: Vec<Vec<usize>>,
    /// `‖X̃^k - X̃*‖_F` for `k = 0..=K`.
    pub errors: Vec<f64>,
}

/// Checks that a scene lies in the signal class the constants were built for.
fn check_hypotheses(sys: &RealizedSystem, dict: &AnalyticDictionary, tc: &TheoremConstants, cls: &SignalClass) -> Result<()> {
    cls.validate()?;
    let refuse = |msg: String| Err(Error::CertificationRefused(msg));
    if tc.s != cls.s || tc.mu_lo != cls.mu_lo || tc.mu_hi != cls.mu_hi {
        return refuse("constants were computed for a different signal class".into());
    }
    if !dict.shape_matches(&sys.s_tilde) {
        return Err(Error::Shape("dictionary does not match the scene".into()));
    }
    if cls.eps > tc.eps_max {
        return refuse(format!("class noise bound {:.3e} exceeds eps_max {:.3e}", cls.eps, tc.eps_max));
    }
    if sys.noise_frobenius > cls.eps * (1.0 + BOUND_SLACK) {
        return refuse(format!("scene noise {:.3e} exceeds the class bound {:.3e}", sys.noise_frobenius, cls.eps));
    }
    let norms = row_group_norms(&sys.x_star_tilde);
    let support: Vec<f64> = norms.iter().copied().filter(|&r| r > SUPPORT_TOL).collect();
    if support.len() > cls.s {
        return refuse(format!("true support has {} rows, class allows {}", support.len(), cls.s));
    }
    if let Some(r) = support.iter().find(|&&r| r < cls.mu_lo * (1.0 - BOUND_SLACK) || r > cls.mu_hi * (1.0 + BOUND_SLACK)) {
        return refuse(format!("row norm {r:.6} outside [{}, {}]", cls.mu_lo, cls.mu_hi));
    }
    Ok(())
}

/// ALPGM-MM with the oracle thresholds and the proof's schedules.
pub fn certified_run(
    sys: &RealizedSystem,
    dict: &AnalyticDictionary,
    tc: &TheoremConstants,
    cls: &SignalClass,
    layers: usize,
) -> Result<CertifiedTrace> {
    check_hypotheses(sys, dict, tc, cls)?;
    let b = &dict.b;
    let x_star = &sys.x_star_tilde;
    let width = x_star.ncols();
    let by = b.dot(&sys.y_tilde);
    let a = b.dot(&*sys.s_tilde);
    let mut xs = vec![RMatrix::zeros(x_star.dim())];
    let mut out = CertifiedTrace {
        iterates: vec![],
        theta: vec![],
        eta: vec![],
        beta: vec![],
        supports: vec![vec![]],
        errors: vec![frobenius(x_star)],
    };
    for k in 0..layers {
        let x = &xs[k];
        let theta = oracle_theta(x, x_star, tc, cls.eps)?;
        let beta = if k <= tc.k0 { 0.0 } else { tc.beta_hat };
        let (rule, eta) = if theta == 0.0 {
            (Shrink::Identity, 0.0)
        } else {
            let eta = if k < tc.k0 { 0.25 / theta } else { 0.5 / theta };
            (Shrink::Mcp(ProxParams::new(theta, eta)?), eta)
        };
        let mut v = x + &by - &a.dot(x);
        if beta != 0.0 && k >= 1 {
            v.scaled_add(beta, &(x - &xs[k - 1]));
        }
        shrink_groups(&mut v, width, rule);
        out.theta.push(theta);
        out.eta.push(eta);
        out.beta.push(beta);
        out.supports.push(row_support(&v, SUPPORT_TOL));
        out.errors.push(frobenius(&(&v - x_star)));
        xs.push(v);
    }
    out.iterates = xs;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    /// Per iterate: row support inside the true support.
    pub contained: Vec<bool>,
    /// Per iterate: error within the guaranteed bound.
    pub bounded: Vec<bool>,
    /// Least-squares slope of `ln ‖X̃^k - X̃*‖_F` above the noise floor.
    pub log_error_slope: Option<f64>,
}

impl TraceReport {
    pub fn all_contained(&self) -> bool {
        self.contained.iter().all(|&b| b)
    }

    pub fn all_bounded(&self) -> bool {
        self.bounded.iter().all(|&b| b)
    }

    /// Iterate indices that violate support containment.
    pub fn containment_violations(&self) -> Vec<usize> {
        self.contained.iter().enumerate().filter(|(_, &ok)| !ok).map(|(k, _)| k).collect()
    }
}

fn least_squares_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Checks both conclusions of the guarantee on a trace `X̃⁰, X̃¹, ...`.
pub fn check_trace(trace: &[RMatrix], x_star: &RMatrix, tc: &TheoremConstants, cls: &SignalClass) -> Result<TraceReport> {
    if trace.is_empty() {
        return Err(Error::Domain("empty trace".into()));
    }
    let truth: std::collections::HashSet<usize> = row_support(x_star, SUPPORT_TOL).into_iter().collect();
    let errors: Vec<f64> = trace.iter().map(|x| frobenius(&(x - x_star))).collect();
    let contained = trace.iter().map(|x| row_support(x, SUPPORT_TOL).iter().all(|i| truth.contains(i))).collect();
    let bounded = errors
        .iter()
        .enumerate()
        .map(|(k, &e)| e <= tc.error_bound(k, cls.eps) * (1.0 + BOUND_SLACK))
        .collect();
    let floor = (2.0 * tc.noise_floor(cls.eps)).max(1e-10 * errors[0]);
    let points: Vec<(f64, f64)> = errors
        .iter()
        .enumerate()
        .take_while(|(_, &e)| e > floor && e > 0.0)
        .map(|(k, &e)| (k as f64, e.ln()))
        .collect();
    Ok(TraceReport { contained, bounded, log_error_slope: least_squares_slope(&points) })
}

/// Draws a scene from the class directly in the lifted domain: `s` random
/// rows with norms uniform in `[mu_lo, mu_hi]` and noise of norm exactly `eps`.
pub fn sample_class_instance(s_tilde: &Arc<RMatrix>, m: usize, cls: &SignalClass, seed: u64) -> Result<RealizedSystem> {
    cls.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = s_tilde.ncols();
    let chosen = rand::seq::index::sample(&mut rng, rows, cls.s.min(rows));
    let mut x = RMatrix::zeros((rows, m));
    for i in chosen.iter() {
        let mut row: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let target = rng.gen_range(cls.mu_lo..=cls.mu_hi);
        row.iter_mut().for_each(|v| *v *= target / norm);
        x.row_mut(i).assign(&ndarray::Array1::from(row));
    }
    let mut z = RMatrix::from_shape_fn((s_tilde.nrows(), m), |_| rng.sample::<f64, _>(StandardNormal));
    let zn = frobenius(&z);
    z *= if zn > 0.0 { cls.eps / zn } else { 0.0 };
    RealizedSystem::from_truth(s_tilde.clone(), x, &z)
}

/// Certification outcome for one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub seed: u64,
    pub noise_frobenius: f64,
    pub support_size: usize,
    pub contained: bool,
    pub bounded: bool,
    pub first_violation: Option<usize>,
    pub log_error_slope: Option<f64>,
    pub final_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub constants: TheoremConstants,
    pub class: SignalClass,
    pub layers: usize,
    pub instances: Vec<InstanceReport>,
    /// Thresholds use the per-instance `‖X̃^k - X̃*‖_{2,1}` in place of the
    /// supremum over the class.
    pub per_instance_threshold: bool,
}

impl CertificationReport {
    pub fn all_contained(&self) -> bool {
        self.instances.iter().all(|i| i.contained)
    }

    pub fn all_bounded(&self) -> bool {
        self.instances.iter().all(|i| i.bounded)
    }
}

/// Certified runs over `count` sampled class instances.
pub fn certify(
    s_tilde: &Arc<RMatrix>,
    d: &RMatrix,
    dict: &AnalyticDictionary,
    cls: &SignalClass,
    m: usize,
    layers: usize,
    count: usize,
    seed: u64,
) -> Result<CertificationReport> {
    let tc = compute_constants(d, &dict.b, cls)?;
    let mut instances = Vec::with_capacity(count);
    for index in 0..count {
        let inst_seed = crate::datagen::sample_seed(seed, index as u64);
        let sys = sample_class_instance(s_tilde, m, cls, inst_seed)?;
        let run = certified_run(&sys, dict, &tc, cls, layers)?;
        let rep = check_trace(&run.iterates, &sys.x_star_tilde, &tc, cls)?;
        let first_violation = rep.contained.iter().zip(&rep.bounded).position(|(c, b)| !(c & b));
        instances.push(InstanceReport {
            index,
            seed: inst_seed,
            noise_frobenius: sys.noise_frobenius,
            support_size: row_support(&sys.x_star_tilde, SUPPORT_TOL).len(),
            contained: rep.all_contained(),
            bounded: rep.all_bounded(),
            first_violation,
            log_error_slope: rep.log_error_slope,
            final_error: *run.errors.last().expect("X⁰"),
        });
    }
    Ok(CertificationReport { constants: tc, class: *cls, layers, instances, per_instance_threshold: true })
}
