//! LPGM-AT: ALPGM-MM whose per-layer parameters are closed-form functions of
//! the current iterate, driven by three scalars found by grid search.
//!
//! ```text
//! θ_k = c_θ ‖S̃†(S̃X̃^k - Ỹ)‖_{2,1}
//! r_k = max(1, #{i : ‖X̃^k_i‖ > 1e-10})
//! β_k = c_β r_k                       (k >= 1)
//! η_k = 1 / (c_η r_k θ_k)              clipped into [1e-8, 1/(2θ_k)]
//! γ_k = 1
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::{AnalyticDictionary, DictionarySource};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, frobenius_sq, spd_inverse, RMatrix, RealizedSystem, SUPPORT_TOL};
use crate::metrics::nmse_db_from_sums;
use crate::prox::{ProxParams, Shrink};

/// `θ_k` below this makes the layer an identity prox.
pub const THETA_FLOOR: f64 = 1e-12;

/// Samples evaluated between two pruning checks in [`grid_search`].
const PRUNE_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HyperParams {
    pub c_theta: f64,
    pub c_beta: f64,
    pub c_eta: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_theta", self.c_theta), ("c_beta", self.c_beta), ("c_eta", self.c_eta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperGrid {
    pub c_theta: Vec<f64>,
    pub c_beta: Vec<f64>,
    pub c_eta: Vec<f64>,
}

impl Default for HyperGrid {
    fn default() -> Self {
        Self {
            c_theta: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            c_beta: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            c_eta: vec![1.0, 2.0, 5.0, 10.0, 20.0],
        }
    }
}

impl HyperGrid {
    /// All triples in lexicographic order.
    pub fn points(&self) -> Result<Vec<HyperParams>> {
        if self.c_theta.is_empty() || self.c_beta.is_empty() || self.c_eta.is_empty() {
            return Err(Error::Config("every hyperparameter grid must be nonempty".into()));
        }
        let mut pts = Vec::new();
        for &c_theta in &self.c_theta {
            for &c_beta in &self.c_beta {
                for &c_eta in &self.c_eta {
                    let hp = HyperParams { c_theta, c_beta, c_eta };
                    hp.validate()?;
                    pts.push(hp);
                }
            }
        }
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        Ok(pts)
    }
}

/// Right inverse `S̃ᵀ(S̃S̃ᵀ + ρI)⁻¹` with `ρ = 1e-12 tr(S̃S̃ᵀ)/(2L)`.
pub fn pseudo_inverse(s_tilde: &RMatrix) -> Result<RMatrix> {
    let (rows, cols) = s_tilde.dim();
    if rows == 0 || rows > cols {
        return Err(Error::Shape(format!("right inverse needs a wide matrix, got {rows}x{cols}")));
    }
    let mut gram = s_tilde.dot(&s_tilde.t());
    let ridge = 1e-12 * gram.diag().sum() / rows as f64;
    gram.diag_mut().mapv_inplace(|v| v + ridge);
    let pinv = s_tilde.t().dot(&spd_inverse(gram.view())?);
    let defect = frobenius(&(s_tilde.dot(&pinv) - RMatrix::eye(rows)));
    if !(defect < 1e-6) {
        return Err(Error::Solver(format!("dictionary is numerically rank deficient (‖S̃S̃† - I‖ = {defect:.3e})")));
    }
    Ok(pinv)
}

/// Per-pilot quantities shared by every LPGM-AT run.
#[derive(Debug, Clone)]
pub struct AdaptiveContext {
    /// `2N x 2L`
    pub s_tilde_pinv: RMatrix,
    pub dictionary: Arc<AnalyticDictionary>,
    pub layers: usize,
    /// Row `j` is `[(B S̃)_{:,j} ; (S̃†S̃)_{:,j}]`, so a nonzero row `j` of
    /// the iterate touches one contiguous slice.
    fused: RMatrix,
}

impl AdaptiveContext {
    pub fn new(s_tilde: &RMatrix, dictionary: Arc<AnalyticDictionary>, layers: usize) -> Result<Self> {
        if dictionary.source != DictionarySource::Symmetric {
            return Err(Error::Config("LPGM-AT needs the symmetric dictionary".into()));
        }
        if !dictionary.shape_matches(s_tilde) {
            return Err(Error::Shape("dictionary does not match the pilot".into()));
        }
        if layers == 0 {
            return Err(Error::Config("LPGM-AT needs at least one layer".into()));
        }
        let s_tilde_pinv = pseudo_inverse(s_tilde)?;
        let sanity = frobenius(&(s_tilde.dot(&s_tilde_pinv).dot(s_tilde) - s_tilde));
        if !(sanity < 1e-6) {
            return Err(Error::Solver(format!("generalized inverse check failed: {sanity:.3e}")));
        }
        let w = dictionary.b.dot(s_tilde);
        let p = s_tilde_pinv.dot(s_tilde);
        let fused = concatenate(Axis(1), &[w.t(), p.t()]).expect("equal heights").as_standard_layout().into_owned();
        Ok(Self { s_tilde_pinv, dictionary, layers, fused })
    }
}

/// Iterates and per-layer parameters of one run. `iterates` holds all
/// `K + 1` iterates when traced, otherwise only the last.
#[derive(Debug, Clone, Default)]
pub struct AdaptiveTrace {
    pub iterates: Vec<RMatrix>,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// `0` marks an identity layer.
    pub eta: Vec<f64>,
}

impl AdaptiveTrace {
    pub fn last(&self) -> &RMatrix {
        self.iterates.last().expect("trace is never empty")
    }
}

/// `η_k` from the closed form, clipped to the prox-feasible range.
pub fn adaptive_eta(c_eta: f64, rows: usize, theta: f64) -> f64 {
    (1.0 / (c_eta * rows as f64 * theta)).max(1e-8).min(0.5 / theta)
}

/// Scratch buffers for [`run`]. Matrices are stored transposed (`M x 2N`,
/// row-major), so entry `(t, i)` sits at `t * 2N + i`.
struct Workspace {
    x: Vec<f64>,
    prev: Vec<f64>,
    /// `[W X | P X]` per antenna, `M x 4N`
    prod: Vec<f64>,
    norms: Vec<f64>,
    support: Vec<usize>,
}

impl Workspace {
    fn new(n2: usize, m: usize) -> Self {
        Self { x: vec![0.0; n2 * m], prev: vec![0.0; n2 * m], prod: vec![0.0; 2 * n2 * m], norms: vec![0.0; n2], support: Vec::with_capacity(n2) }
    }
}

/// Squared group norms of a transposed iterate.
fn group_norms_sq(x: &[f64], n2: usize, norms: &mut [f64]) {
    norms.iter_mut().for_each(|v| *v = 0.0);
    for row in x.chunks_exact(n2) {
        norms.iter_mut().zip(row).for_each(|(n, v)| *n += v * v);
    }
}

fn to_transposed(a: &RMatrix) -> Vec<f64> {
    a.t().iter().copied().collect()
}

fn from_transposed(x: &[f64], n2: usize, m: usize) -> RMatrix {
    RMatrix::from_shape_fn((n2, m), |(i, t)| x[t * n2 + i])
}

/// Core loop on transposed `BỸ` and `S̃†Ỹ`.
fn run(ctx: &AdaptiveContext, wy: &[f64], py: &[f64], m: usize, hp: HyperParams, trace: bool) -> AdaptiveTrace {
    let n2 = ctx.fused.nrows();
    let fused = ctx.fused.as_slice().expect("standard layout");
    let mut ws = Workspace::new(n2, m);
    let mut out = AdaptiveTrace::default();
    if trace {
        out.iterates.push(RMatrix::zeros((n2, m)));
    }
    for k in 0..ctx.layers {
        group_norms_sq(&ws.x, n2, &mut ws.norms);
        ws.support.clear();
        ws.support.extend((0..n2).filter(|&i| ws.norms[i].sqrt() > SUPPORT_TOL));

        ws.prod.iter_mut().for_each(|v| *v = 0.0);
        for &j in &ws.support {
            let col = &fused[j * 2 * n2..(j + 1) * 2 * n2];
            for t in 0..m {
                let a = ws.x[t * n2 + j];
                if a != 0.0 {
                    let dst = &mut ws.prod[t * 2 * n2..(t + 1) * 2 * n2];
                    dst.iter_mut().zip(col).for_each(|(d, c)| *d += a * c);
                }
            }
        }

        // θ from the group norms of S̃†(S̃X - Ỹ) = P X - S̃†Ỹ
        ws.norms.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..m {
            let px = &ws.prod[t * 2 * n2 + n2..(t + 1) * 2 * n2];
            let pyt = &py[t * n2..(t + 1) * n2];
            ws.norms.iter_mut().zip(px.iter().zip(pyt)).for_each(|(n, (a, b))| *n += (a - b) * (a - b));
        }
        let theta = hp.c_theta * ws.norms.iter().map(|v| v.sqrt()).sum::<f64>();
        let rows = ws.support.len().max(1);
        let beta = if k >= 1 { hp.c_beta * rows as f64 } else { 0.0 };
        let (rule, eta) = if theta < THETA_FLOOR {
            (Shrink::Identity, 0.0)
        } else {
            let eta = adaptive_eta(hp.c_eta, rows, theta);
            (Shrink::Mcp(ProxParams { theta, eta }), eta)
        };

        // V = X + (BỸ - B S̃ X) + β (X - X_prev), written into prev
        for t in 0..m {
            let r = t * n2..(t + 1) * n2;
            let wx = &ws.prod[t * 2 * n2..t * 2 * n2 + n2];
            let (x, prev, wyt) = (&ws.x[r.clone()], &mut ws.prev[r.clone()], &wy[r]);
            for i in 0..n2 {
                prev[i] = x[i] + wyt[i] - wx[i] + beta * (x[i] - prev[i]);
            }
        }
        std::mem::swap(&mut ws.x, &mut ws.prev);
        group_norms_sq(&ws.x, n2, &mut ws.norms);
        for i in 0..n2 {
            let r = ws.norms[i].sqrt();
            ws.norms[i] = if r == 0.0 { 0.0 } else { rule.radial(r) / r };
        }
        for row in ws.x.chunks_exact_mut(n2) {
            row.iter_mut().zip(&ws.norms).for_each(|(v, s)| *v *= s);
        }

        out.theta.push(theta);
        out.beta.push(beta);
        out.eta.push(eta);
        if trace {
            out.iterates.push(from_transposed(&ws.x, n2, m));
        }
    }
    if !trace {
        out.iterates.push(from_transposed(&ws.x, n2, m));
    }
    out
}

fn check_scene(sys: &RealizedSystem, ctx: &AdaptiveContext) -> Result<()> {
    if sys.s_tilde.ncols() != ctx.s_tilde_pinv.nrows() || sys.s_tilde.nrows() != ctx.s_tilde_pinv.ncols() {
        return Err(Error::Shape("scene does not match the LPGM-AT context".into()));
    }
    Ok(())
}

/// Transposed `BỸ` and `S̃†Ỹ` of one scene.
fn observations(sys: &RealizedSystem, ctx: &AdaptiveContext) -> (Vec<f64>, Vec<f64>) {
    (to_transposed(&ctx.dictionary.b.dot(&sys.y_tilde)), to_transposed(&ctx.s_tilde_pinv.dot(&sys.y_tilde)))
}

/// Runs LPGM-AT on one scene from `X̃⁰ = 0`.
pub fn lpgm_at_forward(sys: &RealizedSystem, ctx: &AdaptiveContext, hp: HyperParams, trace: bool) -> Result<AdaptiveTrace> {
    hp.validate()?;
    check_scene(sys, ctx)?;
    let (wy, py) = observations(sys, ctx);
    Ok(run(ctx, &wy, &py, sys.dims.m, hp, trace))
}

/// Final LPGM-AT estimates for a set of scenes, in order.
pub fn lpgm_at_batch(systems: &[RealizedSystem], ctx: &AdaptiveContext, hp: HyperParams) -> Result<Vec<RMatrix>> {
    hp.validate()?;
    systems
        .par_iter()
        .map(|s| lpgm_at_forward(s, ctx, hp, false).map(|t| t.iterates.into_iter().next_back().expect("final")))
        .collect()
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub best: HyperParams,
    pub nmse_db: f64,
    /// Grid points abandoned once their partial error exceeded the best total.
    pub pruned: usize,
}

/// Exhaustive grid search for the triple with the lowest training NMSE.
///
/// A point is abandoned as soon as its running error sum exceeds the best
/// complete total, which cannot change the argmin. Ties go to the
/// lexicographically smallest triple.
pub fn grid_search(train: &[RealizedSystem], ctx: &AdaptiveContext, grid: &HyperGrid) -> Result<GridOutcome> {
    let points = grid.points()?;
    if train.is_empty() {
        return Err(Error::Config("grid search needs a nonempty training set".into()));
    }
    for s in train {
        check_scene(s, ctx)?;
    }
    let obs: Vec<(Vec<f64>, Vec<f64>)> = train.iter().map(|s| observations(s, ctx)).collect();
    let energy: f64 = train.iter().map(|s| frobenius_sq(&s.x_star_tilde)).sum();

    let bound = AtomicU64::new(f64::INFINITY.to_bits());
    let evaluate = |hp: HyperParams| -> Option<f64> {
        let mut err = 0.0;
        for (i, s) in train.iter().enumerate() {
            let t = run(ctx, &obs[i].0, &obs[i].1, s.dims.m, hp, false);
            err += frobenius_sq(&(t.last() - &s.x_star_tilde));
            if i % PRUNE_STRIDE == PRUNE_STRIDE - 1 && err > f64::from_bits(bound.load(Ordering::Relaxed)) {
                return None;
            }
        }
        let err = if err.is_finite() { err } else { f64::INFINITY };
        bound.fetch_min_f64(err);
        Some(err)
    };

    // a central point first gives a useful bound early
    let seed_idx = points.len() / 2;
    let seed_err = evaluate(points[seed_idx]);
    let rest: Vec<(usize, Option<f64>)> = points
        .par_iter()
        .enumerate()
        .filter(|(i, _)| *i != seed_idx)
        .map(|(i, &hp)| (i, evaluate(hp)))
        .collect();
    let mut scored: Vec<(usize, Option<f64>)> = rest;
    scored.push((seed_idx, seed_err));
    scored.sort_by_key(|(i, _)| *i);
    let pruned = scored.iter().filter(|(_, e)| e.is_none()).count();
    let (best_idx, best_err) = scored
        .iter()
        .filter_map(|&(i, e)| e.map(|e| (i, e)))
        .fold(None::<(usize, f64)>, |acc, (i, e)| match acc {
            Some((_, be)) if be <= e => acc,
            _ => Some((i, e)),
        })
        .ok_or_else(|| Error::Solver("grid search evaluated no point".into()))?;
    Ok(GridOutcome { best: points[best_idx], nmse_db: nmse_db_from_sums(best_err, energy)?, pruned })
}

trait AtomicMinF64 {
    fn fetch_min_f64(&self, v: f64);
}

impl AtomicMinF64 for AtomicU64 {
    /// Nonnegative floats order like their bit patterns.
    fn fetch_min_f64(&self, v: f64) {
        debug_assert!(v >= 0.0);
        self.fetch_min(v.to_bits(), Ordering::Relaxed);
    }
}

/// Training-set identity stored with tuned hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub seed: u64,
    pub snr_db: f64,
    pub active_prob: f64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunedRecord {
    pub hyper: HyperParams,
    pub train_nmse_db: f64,
    pub layers: usize,
    pub fingerprint: DatasetFingerprint,
}
