//! Classical baselines: PGM with the MCP prox, ISTA-GS and FISTA-GS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{asymmetry, frobenius_sq, row_group_norms, RMatrix, RealizedSystem};
use crate::prox::{mcp_penalty, shrink_groups, ProxParams, Shrink};

/// Iterates kept at every step up to this index, then every 4th.
pub const DENSE_TRACE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// PGM step; defaults to `1/C` with `C = λmax(S̃ᵀS̃)`.
    pub gamma: Option<f64>,
    /// PGM MCP parameter; defaults to `1/(4λγ)`.
    pub eta: Option<f64>,
    pub trace: bool,
    /// Precomputed `λmax(S̃ᵀS̃)`, reused across scenes sharing a pilot.
    #[serde(skip)]
    pub lipschitz: Option<f64>,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self { lambda: 0.1, max_iters: 50, gamma: None, eta: None, trace: false, lipschitz: None }
    }
}

/// Iterates `X̃^k` of a run, thinned after [`DENSE_TRACE_LEN`].
#[derive(Debug, Clone, Default)]
pub struct IterateTrace {
    pub iterations: Vec<usize>,
    pub iterates: Vec<RMatrix>,
}

impl IterateTrace {
    fn record(&mut self, k: usize, x: &RMatrix, keep_all: bool, last: usize) {
        let wanted = if keep_all { k <= DENSE_TRACE_LEN || k % 4 == 0 || k == last } else { k == last };
        if wanted {
            self.iterations.push(k);
            self.iterates.push(x.clone());
        }
    }

    pub fn last(&self) -> &RMatrix {
        self.iterates.last().expect("trace is never empty")
    }

    /// Iterate at index `k`, when it was kept.
    pub fn at(&self, k: usize) -> Option<&RMatrix> {
        self.iterations.iter().position(|&i| i == k).map(|p| &self.iterates[p])
    }
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix.
pub fn power_iteration(m: &RMatrix, iters: usize, tol: f64) -> Result<f64> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(Error::Domain(format!("power iteration needs a square matrix, got {:?}", m.dim())));
    }
    if asymmetry(m) > 1e-10 {
        return Err(Error::Domain("power iteration needs a symmetric matrix".into()));
    }
    // fixed, non-degenerate start
    let mut v = ndarray::Array1::from_shape_fn(n, |i| 1.0 + ((i * 7919) % 101) as f64 / 101.0);
    v /= v.dot(&v).sqrt();
    let mut estimate = 0.0;
    for _ in 0..iters.max(1) {
        let w = m.dot(&v);
        let next = v.dot(&w);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w / norm;
        if (next - estimate).abs() <= tol * next.abs() {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}

/// `λmax(S̃ᵀS̃)`, computed on the smaller Gram `S̃S̃ᵀ`.
pub fn lipschitz_constant(s_tilde: &RMatrix) -> Result<f64> {
    let gram = if s_tilde.nrows() <= s_tilde.ncols() {
        s_tilde.dot(&s_tilde.t())
    } else {
        s_tilde.t().dot(s_tilde)
    };
    power_iteration(&gram, 100_000, 1e-13)
}

/// `½‖Ỹ - S̃X̃‖² + λ Σ g_η(‖X̃_i‖)`.
pub fn objective_group_mcp(sys: &RealizedSystem, x: &RMatrix, lambda: f64, eta: f64) -> Result<f64> {
    let fit = 0.5 * frobenius_sq(&(&sys.y_tilde - &sys.s_tilde.dot(x)));
    let mut pen = 0.0;
    for r in row_group_norms(x) {
        pen += mcp_penalty(r, eta)?;
    }
    Ok(fit + lambda * pen)
}

/// `½‖Ỹ - S̃X̃‖² + λ‖X̃‖_{2,1}`.
pub fn objective_group_lasso(sys: &RealizedSystem, x: &RMatrix, lambda: f64) -> f64 {
    0.5 * frobenius_sq(&(&sys.y_tilde - &sys.s_tilde.dot(x))) + lambda * row_group_norms(x).sum()
}

fn check_lambda(cfg: &IterativeConfig) -> Result<()> {
    if !(cfg.lambda > 0.0) {
        return Err(Error::Config(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    Ok(())
}

fn lipschitz_of(sys: &RealizedSystem, cfg: &IterativeConfig) -> Result<f64> {
    match cfg.lipschitz {
        Some(c) => Ok(c),
        None => lipschitz_constant(&sys.s_tilde),
    }
}

/// `(γ, η)` used by PGM for this system.
pub fn pgm_parameters(sys: &RealizedSystem, cfg: &IterativeConfig) -> Result<(f64, f64)> {
    check_lambda(cfg)?;
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => 1.0 / lipschitz_of(sys, cfg)?,
    };
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("PGM step must be positive, got {gamma}")));
    }
    let eta = cfg.eta.unwrap_or(1.0 / (4.0 * cfg.lambda * gamma));
    Ok((gamma, eta))
}

/// `X̃ + step · S̃ᵀ(Ỹ - S̃X̃)`
fn gradient_step(sys: &RealizedSystem, x: &RMatrix, step: f64) -> RMatrix {
    let resid = &sys.y_tilde - &sys.s_tilde.dot(x);
    let mut out = sys.s_tilde.t().dot(&resid);
    out *= step;
    out += x;
    out
}

/// Proximal gradient method with the MCP prox, from `X̃⁰ = 0`.
pub fn pgm_solve(sys: &RealizedSystem, cfg: &IterativeConfig) -> Result<IterateTrace> {
    let (gamma, eta) = pgm_parameters(sys, cfg)?;
    let params = ProxParams::new(cfg.lambda * gamma, eta)?;
    let mut x = RMatrix::zeros(sys.x_star_tilde.dim());
    let mut trace = IterateTrace::default();
    trace.record(0, &x, cfg.trace, cfg.max_iters);
    for k in 1..=cfg.max_iters {
        x = gradient_step(sys, &x, gamma);
        let width = x.ncols();
        shrink_groups(&mut x, width, Shrink::Mcp(params));
        trace.record(k, &x, cfg.trace, cfg.max_iters);
    }
    Ok(trace)
}

/// ISTA with the group soft threshold, step `1/C`, threshold `λ/C`.
pub fn ista_gs_solve(sys: &RealizedSystem, cfg: &IterativeConfig) -> Result<IterateTrace> {
    fista_like(sys, cfg, false)
}

/// Nesterov-accelerated ISTA-GS.
pub fn fista_gs_solve(sys: &RealizedSystem, cfg: &IterativeConfig) -> Result<IterateTrace> {
    fista_like(sys, cfg, true)
}

/// `t_{k+1} = (1 + √(1 + 4 t_k²)) / 2`
pub fn fista_next_t(t: f64) -> f64 {
    0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt())
}

fn fista_like(sys: &RealizedSystem, cfg: &IterativeConfig, momentum: bool) -> Result<IterateTrace> {
    check_lambda(cfg)?;
    let c = lipschitz_of(sys, cfg)?;
    let step = 1.0 / c;
    let rule = Shrink::Soft(cfg.lambda / c);
    let mut x = RMatrix::zeros(sys.x_star_tilde.dim());
    let mut y = x.clone();
    let mut t = 1.0;
    let mut trace = IterateTrace::default();
    trace.record(0, &x, cfg.trace, cfg.max_iters);
    for k in 1..=cfg.max_iters {
        let mut next = gradient_step(sys, &y, step);
        let width = next.ncols();
        shrink_groups(&mut next, width, rule);
        if momentum {
            let t_next = fista_next_t(t);
            let w = (t - 1.0) / t_next;
            y = &next + &((&next - &x) * w);
            t = t_next;
        } else {
            y = next.clone();
        }
        x = next;
        trace.record(k, &x, cfg.trace, cfg.max_iters);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::RealizedSystem;
    use crate::prox::{group_soft_threshold, prox_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_system(l2: usize, n2: usize, m: usize, seed: u64) -> RealizedSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = RMatrix::from_shape_fn((l2, n2), |_| rng.gen_range(-1.0..1.0) / (l2 as f64).sqrt());
        let mut x = RMatrix::zeros((n2, m));
        for i in [0, n2 / 2, n2 - 1] {
            for j in 0..m {
                x[[i, j]] = rng.gen_range(-1.0..1.0);
            }
        }
        let z = RMatrix::from_shape_fn((l2, m), |_| 0.01 * rng.gen_range(-1.0..1.0));
        RealizedSystem::from_truth(Arc::new(s), x, &z).unwrap()
    }

    /// Cyclic Jacobi eigenvalue iteration.
    fn jacobi_eigenvalues(mut a: RMatrix) -> Vec<f64> {
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| a[[i, j]].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = c * akp - s * akq;
                        a[[k, q]] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = c * apk - s * aqk;
                        a[[q, k]] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[[i, i]]).collect()
    }

    #[test]
    fn power_iteration_examples() {
        let d = RMatrix::from_diag(&ndarray::array![1.0, 4.0, 9.0]);
        assert!((power_iteration(&d, 10_000, 1e-14).unwrap() - 9.0).abs() < 1e-9);
        assert!((power_iteration(&RMatrix::eye(5), 100, 1e-14).unwrap() - 1.0).abs() < 1e-14);
        let mut ns = RMatrix::eye(3);
        ns[[0, 1]] = 1.0;
        assert!(matches!(power_iteration(&ns, 10, 1e-6), Err(Error::Domain(_))));
    }

    #[test]
    fn power_iteration_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = RMatrix::from_shape_fn((6, 10), |_| rng.gen_range(-1.0..1.0));
        let gram = s.t().dot(&s);
        let top = jacobi_eigenvalues(gram.clone()).into_iter().fold(f64::MIN, f64::max);
        let est = power_iteration(&gram, 100_000, 1e-14).unwrap();
        assert!((est - top).abs() / top < 1e-8, "{est} vs {top}");
    }

    #[test]
    fn zero_observation_gives_zero_trace() {
        let mut sys = random_system(4, 6, 2, 1);
        sys.y_tilde.fill(0.0);
        let cfg = IterativeConfig { trace: true, max_iters: 5, ..Default::default() };
        for trace in [pgm_solve(&sys, &cfg), ista_gs_solve(&sys, &cfg), fista_gs_solve(&sys, &cfg)] {
            assert!(trace.unwrap().iterates.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn large_threshold_kills_first_iterate() {
        let sys = random_system(4, 6, 2, 2);
        let gamma = 0.5;
        let grad = sys.s_tilde.t().dot(&sys.y_tilde) * gamma;
        let max_norm = row_group_norms(&grad).iter().cloned().fold(0.0, f64::max);
        let lambda = 2.0 * max_norm / gamma;
        let cfg = IterativeConfig { lambda, gamma: Some(gamma), max_iters: 1, ..Default::default() };
        let trace = pgm_solve(&sys, &cfg).unwrap();
        assert!(trace.last().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pgm_two_steps_by_hand() {
        let sys = random_system(4, 6, 2, 3);
        let cfg = IterativeConfig { gamma: Some(0.3), eta: Some(2.0), lambda: 0.2, trace: true, max_iters: 2, ..Default::default() };
        let trace = pgm_solve(&sys, &cfg).unwrap();
        let p = ProxParams::new(0.2 * 0.3, 2.0).unwrap();
        let mut x = RMatrix::zeros((6, 2));
        for k in 1..=2 {
            let v = &x + &(sys.s_tilde.t().dot(&(&sys.y_tilde - &sys.s_tilde.dot(&x))) * 0.3);
            x = prox_matrix(&v, p).unwrap();
            assert!((trace.at(k).unwrap() - &x).iter().all(|d| d.abs() < 1e-14));
        }
    }

    #[test]
    fn ista_single_step_by_hand() {
        let sys = random_system(4, 6, 2, 4);
        let cfg = IterativeConfig { max_iters: 1, ..Default::default() };
        let c = lipschitz_constant(&sys.s_tilde).unwrap();
        let v = sys.s_tilde.t().dot(&sys.y_tilde) / c;
        let expect = group_soft_threshold(&v, 0.1 / c).unwrap();
        let got = ista_gs_solve(&sys, &cfg).unwrap();
        assert!((got.last() - &expect).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn ista_objective_is_monotone() {
        for seed in 0..10 {
            let sys = random_system(8, 12, 3, 100 + seed);
            let cfg = IterativeConfig { trace: true, ..Default::default() };
            let trace = ista_gs_solve(&sys, &cfg).unwrap();
            let obj: Vec<f64> = trace.iterates.iter().map(|x| objective_group_lasso(&sys, x, 0.1)).collect();
            assert!(obj.windows(2).all(|w| w[1] <= w[0] + 1e-10), "seed {seed}");
        }
    }

    #[test]
    fn fista_t_sequence() {
        assert!((fista_next_t(1.0) - 1.618_033_988_749_895).abs() < 1e-12);
    }

    #[test]
    fn fista_without_momentum_is_ista() {
        let sys = random_system(8, 12, 3, 5);
        let cfg = IterativeConfig { trace: true, ..Default::default() };
        let a = fista_like(&sys, &cfg, false).unwrap();
        let b = ista_gs_solve(&sys, &cfg).unwrap();
        assert_eq!(a.iterates, b.iterates);
    }

    #[test]
    fn fista_reaches_lower_objective() {
        for seed in 0..10 {
            let sys = random_system(8, 12, 3, 200 + seed);
            let cfg = IterativeConfig::default();
            let fo = objective_group_lasso(&sys, fista_gs_solve(&sys, &cfg).unwrap().last(), 0.1);
            let io = objective_group_lasso(&sys, ista_gs_solve(&sys, &cfg).unwrap().last(), 0.1);
            assert!(fo <= io + 1e-9, "seed {seed}: {fo} > {io}");
        }
    }

    #[test]
    fn objective_examples() {
        let mut sys = random_system(4, 6, 2, 6);
        let zero = RMatrix::zeros((6, 2));
        let half_y = 0.5 * frobenius_sq(&sys.y_tilde);
        assert!((objective_group_mcp(&sys, &zero, 0.1, 2.0).unwrap() - half_y).abs() < 1e-14);
        let x = sys.x_star_tilde.clone();
        let by_terms = 0.5 * frobenius_sq(&(&sys.y_tilde - &sys.s_tilde.dot(&x)))
            + 0.1 * x.rows().into_iter().map(|r| mcp_penalty(r.dot(&r).sqrt(), 2.0).unwrap()).sum::<f64>();
        assert!((objective_group_mcp(&sys, &x, 0.1, 2.0).unwrap() - by_terms).abs() < 1e-14);
        sys.y_tilde.fill(0.0);
        assert_eq!(objective_group_mcp(&sys, &zero, 0.1, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn trace_thinning() {
        let sys = random_system(4, 6, 2, 7);
        let cfg = IterativeConfig { trace: true, max_iters: 70, ..Default::default() };
        let t = ista_gs_solve(&sys, &cfg).unwrap();
        assert_eq!(&t.iterations[..3], &[0, 1, 2]);
        assert!(t.iterations.contains(&64) && !t.iterations.contains(&65) && t.iterations.contains(&68));
        assert_eq!(*t.iterations.last().unwrap(), 70);
        let untraced = ista_gs_solve(&sys, &IterativeConfig { max_iters: 70, ..Default::default() }).unwrap();
        assert_eq!(untraced.iterations, vec![70]);
        assert_eq!(untraced.last(), t.last());
    }
}
