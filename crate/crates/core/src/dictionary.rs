//! Analytic dictionaries `B` that replace `S̃ᵀ` in the gradient step.
//!
//! * plain: minimize `‖B S̃‖_F²` subject to `B_{i,:} S̃_{:,i} = 1`, by
//!   projected gradient descent;
//! * symmetric: `B = S̃ᵀ Gᵀ G`, where `(G, D)` minimize
//!   `‖DᵀD - I‖_F² + τ‖D - G S̃‖_F²` over unit-norm columns of `D`. `B S̃` is
//!   then the Gram matrix of `G S̃`, hence symmetric positive semidefinite.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, norm_2_1, spd_inverse, RMatrix};

/// Ridge added to `S̃S̃ᵀ` in the least-squares update of `G`.
const G_RIDGE: f64 = 1e-10;
/// Smallest accepted `λ_min / λ_max` of `S̃S̃ᵀ`.
const MIN_CONDITION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictionarySource {
    Plain,
    Symmetric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyticDictionary {
    /// `2N x 2L`
    pub b: RMatrix,
    pub source: DictionarySource,
    pub final_objective: f64,
    /// `max_i |B_{i,:} S̃_{:,i} - 1|`
    pub max_constraint_residual: f64,
    /// Objective after every accepted step, starting with the initializer.
    #[serde(default)]
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymmetricFactors {
    /// `2L x 2L`
    pub g: RMatrix,
    /// `2L x 2N`, unit-norm columns
    pub d: RMatrix,
    pub tau: f64,
}

/// Solver settings shared by both dictionary problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictConfig {
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    /// Alternating projections run after the descent to make `diag(B S̃) = 1`.
    pub polish_iters: usize,
}

impl Default for DictConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-2, tau: 1.0, polish_iters: 5000 }
    }
}

fn constraint_residual(b: &RMatrix, s_tilde: &RMatrix) -> f64 {
    (0..b.nrows())
        .map(|i| (b.row(i).dot(&s_tilde.column(i)) - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Projects row `i` of `b` onto `{x : x · S̃_{:,i} = 1}`.
fn project_rows(b: &mut RMatrix, s_tilde: &RMatrix, col_norms_sq: &[f64]) {
    for (i, mut row) in b.rows_mut().into_iter().enumerate() {
        let s = s_tilde.column(i);
        let shift = (1.0 - row.dot(&s)) / col_norms_sq[i];
        row.scaled_add(shift, &s);
    }
}

fn check_columns(s_tilde: &RMatrix) -> Result<Vec<f64>> {
    let norms: Vec<f64> = s_tilde.columns().into_iter().map(|c| c.dot(&c)).collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0) {
        return Err(Error::Domain(format!("column {i} of the dictionary is zero")));
    }
    Ok(norms)
}

/// Projected gradient descent for the plain dictionary.
///
/// Starts from the rows of `S̃ᵀ(S̃S̃ᵀ)⁻¹` rescaled onto the constraint set;
/// the step is halved whenever the projected objective increases.
pub fn solve_plain_dictionary(s_tilde: &RMatrix, steps: usize, lr: f64) -> Result<AnalyticDictionary> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let col_norms_sq = check_columns(s_tilde)?;
    let gram = s_tilde.dot(&s_tilde.t());
    let mut b = match spd_inverse(gram.view()) {
        Ok(inv) => s_tilde.t().dot(&inv),
        // rank-deficient S̃: start from S̃ᵀ, which the projection makes feasible
        Err(_) => s_tilde.t().to_owned(),
    };
    for (i, mut row) in b.rows_mut().into_iter().enumerate() {
        let d = row.dot(&s_tilde.column(i));
        if d.abs() > 1e-12 {
            row.mapv_inplace(|v| v / d);
        }
    }
    project_rows(&mut b, s_tilde, &col_norms_sq);

    let objective = |b: &RMatrix| frobenius_sq(&b.dot(s_tilde));
    let mut current = objective(&b);
    let mut trace = vec![current];
    let mut step = lr;
    for _ in 0..steps {
        let grad = b.dot(&gram) * 2.0;
        let mut next = &b - &(grad * step);
        project_rows(&mut next, s_tilde, &col_norms_sq);
        let value = objective(&next);
        if value > current {
            step *= 0.5;
            continue;
        }
        b = next;
        current = value;
        trace.push(current);
    }
    Ok(AnalyticDictionary {
        max_constraint_residual: constraint_residual(&b, s_tilde),
        b,
        source: DictionarySource::Plain,
        final_objective: current,
        objective_trace: trace,
    })
}

fn normalize_columns(d: &mut RMatrix) {
    for mut col in d.columns_mut() {
        let n = col.dot(&col).sqrt();
        if n > 0.0 {
            col.mapv_inplace(|v| v / n);
        }
    }
}

fn symmetric_objective(d: &RMatrix, g: &RMatrix, s_tilde: &RMatrix, tau: f64) -> f64 {
    let gram = d.t().dot(d) - RMatrix::eye(d.ncols());
    frobenius_sq(&gram) + tau * frobenius_sq(&(d - &g.dot(s_tilde)))
}

fn check_conditioning(gram: &RMatrix) -> Result<()> {
    let n = gram.nrows();
    let eig = nalgebra::DMatrix::from_fn(n, n, |i, j| gram[[i, j]]).symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || min / max < MIN_CONDITION {
        return Err(Error::Solver(format!(
            "S̃S̃ᵀ is numerically rank deficient (λmin/λmax = {:.3e})",
            min / max
        )));
    }
    Ok(())
}

/// Alternating projected descent for the symmetric dictionary.
///
/// `D` takes a gradient step and is projected to unit-norm columns, then `G`
/// is the ridge least-squares fit of `D ≈ G S̃`. Starting point is
/// `D⁰ = S̃` with normalized columns and `G⁰ = I`. A final alternating
/// projection between unit-norm columns and the row space of `S̃` makes
/// `D = G S̃`, so that `B S̃ = DᵀD` has a unit diagonal.
pub fn solve_symmetric_dictionary(
    s_tilde: &RMatrix,
    cfg: &DictConfig,
) -> Result<(SymmetricFactors, AnalyticDictionary)> {
    let (two_l, two_n) = s_tilde.dim();
    if two_l > two_n {
        return Err(Error::Domain(format!("symmetric dictionary needs 2L <= 2N, got {two_l}x{two_n}")));
    }
    if !(cfg.tau > 0.0 && cfg.lr > 0.0) {
        return Err(Error::Config("tau and lr must be positive".into()));
    }
    check_columns(s_tilde)?;
    let gram = s_tilde.dot(&s_tilde.t());
    check_conditioning(&gram)?;
    let ridge_inv = spd_inverse((&gram + &(RMatrix::eye(two_l) * G_RIDGE)).view())?;
    // least-squares G for a given D
    let fit_g = |d: &RMatrix| d.dot(&s_tilde.t()).dot(&ridge_inv);

    let mut d = s_tilde.clone();
    normalize_columns(&mut d);
    let mut g = RMatrix::eye(two_l);
    let initial = (d.clone(), g.clone());
    let initial_coherence = mutual_coherence(&d)?;

    let tau = cfg.tau;
    let mut current = symmetric_objective(&d, &g, s_tilde, tau);
    let mut trace = vec![current];
    let mut step = cfg.lr;
    let eye = RMatrix::eye(two_n);
    for _ in 0..cfg.steps {
        let resid = &d - &g.dot(s_tilde);
        let grad = d.dot(&(d.t().dot(&d) - &eye)) * 4.0 + resid * (2.0 * tau);
        let mut d_next = &d - &(grad * step);
        normalize_columns(&mut d_next);
        let g_next = fit_g(&d_next);
        let value = symmetric_objective(&d_next, &g_next, s_tilde, tau);
        if value > current {
            step *= 0.5;
            continue;
        }
        d = d_next;
        g = g_next;
        current = value;
        trace.push(current);
    }

    for _ in 0..cfg.polish_iters {
        let mut projected = g.dot(s_tilde);
        let diag_dev = projected
            .columns()
            .into_iter()
            .map(|c| (c.dot(&c) - 1.0).abs())
            .fold(0.0, f64::max);
        if diag_dev < 1e-13 {
            break;
        }
        normalize_columns(&mut projected);
        d = projected;
        g = fit_g(&d);
    }
    let realized = g.dot(s_tilde);
    let max_dev = realized
        .columns()
        .into_iter()
        .map(|c| (c.dot(&c) - 1.0).abs())
        .fold(0.0, f64::max);
    if max_dev < 1e-8 {
        d = realized;
    }

    if mutual_coherence(&d)? > initial_coherence {
        (d, g) = initial;
    }
    let final_objective = symmetric_objective(&d, &g, s_tilde, tau);
    trace.push(final_objective);

    let b = symmetric_b(&g, s_tilde);
    let dict = AnalyticDictionary {
        max_constraint_residual: constraint_residual(&b, s_tilde),
        b,
        source: DictionarySource::Symmetric,
        final_objective,
        objective_trace: trace,
    };
    Ok((SymmetricFactors { g, d, tau }, dict))
}

/// `B = ((GᵀG) S̃)ᵀ = S̃ᵀ Gᵀ G`.
pub fn symmetric_b(g: &RMatrix, s_tilde: &RMatrix) -> RMatrix {
    s_tilde.t().dot(&g.t().dot(g))
}

/// `max_{i≠j} |D_{:,i}ᵀ D_{:,j}|`.
pub fn mutual_coherence(d: &RMatrix) -> Result<f64> {
    if d.ncols() < 2 {
        return Err(Error::Domain("mutual coherence needs at least two columns".into()));
    }
    let gram = d.t().dot(d);
    let mut worst = 0.0_f64;
    for ((i, j), v) in gram.indexed_iter() {
        if i != j {
            worst = worst.max(v.abs());
        }
    }
    Ok(worst)
}

/// `μ_B = ‖B‖_{2,1}`.
pub fn b_norm_2_1(b: &RMatrix) -> f64 {
    norm_2_1(b)
}

/// Column-normalized copy of a matrix.
pub fn column_normalized(m: &RMatrix) -> RMatrix {
    let mut out = m.clone();
    normalize_columns(&mut out);
    out
}

/// `‖B S̃ - (B S̃)ᵀ‖_F`.
pub fn symmetry_defect(b: &RMatrix, s_tilde: &RMatrix) -> f64 {
    let w = b.dot(s_tilde);
    frobenius_sq(&(&w - &w.t())).sqrt()
}

impl AnalyticDictionary {
    /// `B S̃`, the effective Gram matrix used by the networks.
    pub fn effective_gram(&self, s_tilde: &RMatrix) -> RMatrix {
        self.b.dot(s_tilde)
    }

    /// Row norms used for the `μ_B` hypothesis.
    pub fn mu_b(&self) -> f64 {
        b_norm_2_1(&self.b)
    }

    pub fn shape_matches(&self, s_tilde: &RMatrix) -> bool {
        self.b.dim() == (s_tilde.ncols(), s_tilde.nrows())
    }

    /// Diagonal of `B S̃`.
    pub fn diagonal(&self, s_tilde: &RMatrix) -> ndarray::Array1<f64> {
        (&self.b * &s_tilde.t()).sum_axis(Axis(1))
    }
}
