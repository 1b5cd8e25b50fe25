//! Layer-wise supervised training of unfolded networks.
//!
//! Gradients are computed by hand through the stacked recurrence. For a row
//! group with prox input `v = r u` and output `p(r) u`, an upstream gradient
//! `g` pulls back to
//!
//! ```text
//! ∂v = (p/r) (g - (u·g) u) + p'(r) (u·g) u
//! ```
//!
//! and contributes `(u·g) ∂p/∂θ`, `(u·g) ∂p/∂η` to the layer's parameters.

use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::dictionary::AnalyticDictionary;
use crate::error::{Error, Result};
use crate::iterative::power_iteration;
use crate::linalg::{frobenius_sq, inner, RMatrix, RealizedSystem};
use crate::metrics::nmse_db_from_sums;
use crate::prox::{ProxGrad, Shrink, HARD_LIMIT_TOL};
use crate::unfolded::{run_stack, LayerParams, Prepared, Tape, UnfoldedNetwork, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub batch_size: usize,
    pub stage_iters: usize,
    pub optimizer: Optimizer,
    pub clamp_margin: f64,
    pub seed: u64,
    /// Initial step of every layer; defaults to `1/‖W S̃‖₂`.
    pub init_gamma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { alpha0: 1e-3, batch_size: 64, stage_iters: 400, optimizer: Optimizer::Adam, clamp_margin: 1e-3, seed: 0, init_gamma: None }
    }
}

impl TrainConfig {
    pub fn alpha1(&self) -> f64 {
        0.2 * self.alpha0
    }

    pub fn alpha2(&self) -> f64 {
        0.02 * self.alpha0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return Err(Error::Config(format!("alpha0 must be finite and >= 0, got {}", self.alpha0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.clamp_margin > 0.0 && self.clamp_margin < 1.0) {
            return Err(Error::Config(format!("clamp_margin must lie in (0, 1), got {}", self.clamp_margin)));
        }
        Ok(())
    }
}

/// Partial derivatives of the loss for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerGrad {
    pub d_gamma: f64,
    pub d_theta: f64,
    pub d_eta: f64,
    pub d_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradRecord {
    pub layers: Vec<LayerGrad>,
}

/// PGM operating point with `λ = 0.1`: `θ = λγ`, `η = 1/(4θ)`, `β = 0`.
pub fn initial_layer(gamma: f64) -> LayerParams {
    let theta = 0.1 * gamma;
    LayerParams { gamma, theta, eta: 0.25 / theta, beta: 0.0 }
}

/// `1/‖A‖₂`, the largest step for which `I - γA` cannot expand.
pub fn default_step(a: &RMatrix) -> Result<f64> {
    let norm_sq = power_iteration(&a.t().dot(a), 100_000, 1e-12)?;
    if !(norm_sq > 0.0) {
        return Err(Error::Domain("gradient operator is zero".into()));
    }
    Ok(1.0 / norm_sq.sqrt())
}

/// Projects parameters back into the feasible region.
pub fn clamp(p: LayerParams, margin: f64) -> LayerParams {
    let gamma = p.gamma.max(1e-6);
    let theta = p.theta.max(1e-8);
    let eta = p.eta.min((1.0 - margin) / (2.0 * theta)).max(1e-8);
    LayerParams { gamma, theta, eta, beta: p.beta.max(0.0) }
}

/// `Σᵢ ‖X̃ᵢ^K - X̃ᵢ*‖_F²` over the batch.
pub fn loss(net: &UnfoldedNetwork, batch: &[RealizedSystem]) -> Result<f64> {
    net.validate()?;
    let prep = Prepared::new(net, batch)?;
    let idx: Vec<usize> = (0..prep.len()).collect();
    let (wy, x_star) = prep.stack(&idx);
    let tape = run_stack(net.variant, &net.layers, &prep.a, &wy, prep.width, false);
    Ok(frobenius_sq(&(tape.xs.last().expect("X⁰") - &x_star)))
}

/// Exact gradient of [`loss`] with respect to every layer parameter.
pub fn backward(net: &UnfoldedNetwork, batch: &[RealizedSystem]) -> Result<GradRecord> {
    net.validate()?;
    let prep = Prepared::new(net, batch)?;
    let idx: Vec<usize> = (0..prep.len()).collect();
    let (wy, x_star) = prep.stack(&idx);
    Ok(stacked_grad(net.variant, &net.layers, &prep.a, &wy, &x_star, prep.width)?.1)
}

/// Loss and gradient of one stacked batch.
pub(crate) fn stacked_grad(
    variant: Variant,
    layers: &[LayerParams],
    a: &RMatrix,
    wy: &RMatrix,
    x_star: &RMatrix,
    width: usize,
) -> Result<(f64, GradRecord)> {
    for (k, l) in layers.iter().enumerate() {
        if variant != Variant::AlistaGs && 2.0 * l.theta * l.eta >= 1.0 - HARD_LIMIT_TOL {
            return Err(Error::Domain(format!("layer {k} sits at the hard-threshold limit, gradient undefined")));
        }
    }
    let Tape { xs, vs } = run_stack(variant, layers, a, wy, width, true);
    let k_max = layers.len();
    let resid = &xs[k_max] - x_star;
    let total = frobenius_sq(&resid);
    let mut grads = vec![LayerGrad::default(); k_max];
    if k_max == 0 {
        return Ok((total, GradRecord { layers: grads }));
    }
    // g_cur = ∂L/∂X^{k+1}; g_carry collects the momentum term for X^k
    let mut g_cur = resid * 2.0;
    let mut g_carry = RMatrix::zeros(g_cur.dim());
    for k in (0..k_max).rev() {
        let layer = layers[k];
        let (dv, dtheta, deta) = prox_pullback(&vs[k], &g_cur, width, layer.shrink(variant));
        let at_dv = a.t().dot(&dv);
        let x = &xs[k];
        let mut grad = LayerGrad {
            d_gamma: inner(&dv, wy) - inner(&at_dv, x),
            d_theta: dtheta,
            d_eta: if variant == Variant::AlistaGs { 0.0 } else { deta },
            d_beta: 0.0,
        };
        let momentum = variant.has_momentum() && k >= 1;
        let mut g_prev = std::mem::replace(&mut g_carry, RMatrix::zeros(g_cur.dim()));
        if momentum {
            grad.d_beta = inner(&dv, x) - inner(&dv, &xs[k - 1]);
            g_prev.scaled_add(1.0 + layer.beta, &dv);
            g_carry.scaled_add(-layer.beta, &dv);
        } else {
            g_prev += &dv;
        }
        g_prev.scaled_add(-layer.gamma, &at_dv);
        grads[k] = grad;
        g_cur = g_prev;
    }
    Ok((total, GradRecord { layers: grads }))
}

/// Pulls `g` back through the row-group shrinkage of `v`.
fn prox_pullback(v: &RMatrix, g: &RMatrix, width: usize, rule: Shrink) -> (RMatrix, f64, f64) {
    let mut dv = RMatrix::zeros(v.dim());
    let (mut dtheta, mut deta) = (0.0, 0.0);
    let cols = v.ncols();
    let (vs, gs) = (v.as_slice().expect("standard layout"), g.as_slice().expect("standard layout"));
    let out = dv.as_slice_mut().expect("standard layout");
    for start in (0..vs.len()).step_by(width) {
        debug_assert!(start % cols + width <= cols);
        let (vg, gg) = (&vs[start..start + width], &gs[start..start + width]);
        let og = &mut out[start..start + width];
        let r = vg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (p, ProxGrad { d_input, d_theta, d_eta }) = rule.radial_grad(r);
        if r == 0.0 {
            og.iter_mut().zip(gg).for_each(|(o, &gi)| *o = d_input * gi);
            continue;
        }
        let ug = vg.iter().zip(gg).map(|(x, y)| x * y).sum::<f64>() / r;
        let ratio = p / r;
        let radial = (d_input - ratio) * ug / r;
        og.iter_mut().zip(gg.iter().zip(vg)).for_each(|(o, (&gi, &vi))| *o = ratio * gi + radial * vi);
        dtheta += ug * d_theta;
        deta += ug * d_eta;
    }
    (dv, dtheta, deta)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: usize,
    pub iter: usize,
    /// Mean per-sample loss over the phase that just ended.
    pub train_loss: f64,
    pub val_nmse_db: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: UnfoldedNetwork,
    pub log: Vec<LogRow>,
    pub initial_val_nmse_db: f64,
    pub best_val_nmse_db: f64,
}

/// Writes the log as CSV with header `stage,iter,train_loss,val_nmse_db`.
pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Which scalar of each layer is trainable, in `[γ, θ, η, β]` order.
fn trainable_mask(variant: Variant, k: usize) -> [bool; 4] {
    [true, true, variant != Variant::AlistaGs, variant.has_momentum() && k >= 1]
}

fn to_vec(l: &LayerParams) -> [f64; 4] {
    [l.gamma, l.theta, l.eta, l.beta]
}

fn grad_vec(g: &LayerGrad) -> [f64; 4] {
    [g.d_gamma, g.d_theta, g.d_eta, g.d_beta]
}

fn from_vec(v: [f64; 4]) -> LayerParams {
    LayerParams { gamma: v[0], theta: v[1], eta: v[2], beta: v[3] }
}

struct Adam {
    m: Vec<[f64; 4]>,
    v: Vec<[f64; 4]>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![[0.0; 4]; n], v: vec![[0.0; 4]; n], t: 0 }
    }

    fn direction(&mut self, layer: usize, j: usize, g: f64) -> f64 {
        let m = &mut self.m[layer][j];
        let v = &mut self.v[layer][j];
        *m = Self::B1 * *m + (1.0 - Self::B1) * g;
        *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
        let mh = *m / (1.0 - Self::B1.powi(self.t));
        let vh = *v / (1.0 - Self::B2.powi(self.t));
        mh / (vh.sqrt() + Self::EPS)
    }
}

/// Mini-batch index stream reshuffled every epoch.
struct Batches {
    order: Vec<usize>,
    pos: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, size: size.min(n), rng }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

/// Full-depth validation NMSE, evaluated in fixed chunks.
fn validation_nmse(variant: Variant, layers: &[LayerParams], prep: &Prepared) -> Result<f64> {
    let (mut err, mut energy) = (0.0, 0.0);
    let idx: Vec<usize> = (0..prep.len()).collect();
    for chunk in idx.chunks(256) {
        let (wy, x_star) = prep.stack(chunk);
        let tape = run_stack(variant, layers, &prep.a, &wy, prep.width, false);
        err += frobenius_sq(&(tape.xs.last().expect("X⁰") - &x_star));
        energy += frobenius_sq(&x_star);
    }
    let nmse = nmse_db_from_sums(err, energy)?;
    // a diverged network is never a better checkpoint
    Ok(if nmse.is_finite() { nmse } else { f64::INFINITY })
}

/// Layer-wise training. Stage `k` fits layer `k - 1` at `α₀`, then all
/// layers up to `k` at `α₁` and at `α₂`, `stage_iters` steps each. The
/// network with the best full-depth validation NMSE is returned; layers not
/// yet trained keep their initial values during these evaluations.
pub fn train_layerwise(
    variant: Variant,
    dictionary: Option<Arc<AnalyticDictionary>>,
    train: &Dataset,
    val: &Dataset,
    depth: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.systems.is_empty() || val.systems.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let probe = UnfoldedNetwork::new(variant, vec![initial_layer(1.0)], dictionary)?;
    let train_prep = Prepared::new(&probe, &train.systems)?;
    let gamma = match cfg.init_gamma {
        Some(g) => g,
        None => default_step(&train_prep.a)?,
    };
    let mut layers = vec![initial_layer(gamma); depth];
    let net = UnfoldedNetwork::new(variant, layers.clone(), probe.dictionary)?;
    let val_prep = Prepared::new(&net, &val.systems)?;

    let initial = validation_nmse(variant, &layers, &val_prep)?;
    let mut best = (initial, layers.clone());
    let mut log = Vec::new();
    let mut batches = Batches::new(train_prep.len(), cfg.batch_size, cfg.seed);

    for stage in 1..=depth {
        let phases = [(cfg.alpha0, stage - 1), (cfg.alpha1(), 0), (cfg.alpha2(), 0)];
        for (phase, &(lr, first_trained)) in phases.iter().enumerate() {
            let mut adam = Adam::new(stage);
            let mut loss_sum = 0.0;
            let mut samples = 0usize;
            for _ in 0..cfg.stage_iters {
                let idx = batches.next();
                let (wy, x_star) = train_prep.stack(&idx);
                let (batch_loss, grad) =
                    stacked_grad(variant, &layers[..stage], &train_prep.a, &wy, &x_star, train_prep.width)?;
                loss_sum += batch_loss;
                samples += idx.len();
                adam.t += 1;
                for k in first_trained..stage {
                    let mask = trainable_mask(variant, k);
                    let g = grad_vec(&grad.layers[k]);
                    let mut p = to_vec(&layers[k]);
                    for j in 0..4 {
                        if !mask[j] {
                            continue;
                        }
                        let step = match cfg.optimizer {
                            Optimizer::Adam => adam.direction(k, j, g[j]),
                            Optimizer::Sgd => g[j],
                        };
                        p[j] -= lr * step;
                    }
                    layers[k] = clamp(from_vec(p), cfg.clamp_margin);
                }
            }
            let val_nmse = validation_nmse(variant, &layers, &val_prep)?;
            log.push(LogRow {
                stage,
                iter: (phase + 1) * cfg.stage_iters,
                train_loss: if samples > 0 { loss_sum / samples as f64 } else { f64::NAN },
                val_nmse_db: val_nmse,
            });
            if val_nmse < best.0 {
                best = (val_nmse, layers.clone());
            }
        }
    }
    let network = UnfoldedNetwork { variant, layers: best.1, dictionary: net.dictionary };
    Ok(TrainOutcome { network, log, initial_val_nmse_db: initial, best_val_nmse_db: best.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::DictionarySource;
    use crate::linalg::row_group_norms;
    use rand::Rng;

    fn toy_batch(count: usize, seed: u64) -> Vec<RealizedSystem> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Arc::new(RMatrix::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0) / 2.0));
        (0..count)
            .map(|_| {
                let x = RMatrix::from_shape_fn((6, 2), |(i, _)| if i % 3 == 1 { rng.gen_range(-2.0..2.0) } else { 0.0 });
                let z = RMatrix::from_shape_fn((4, 2), |_| 0.05 * rng.gen_range(-1.0..1.0));
                RealizedSystem::from_truth(s.clone(), x, &z).unwrap()
            })
            .collect()
    }

    fn toy_dict(seed: u64, source: DictionarySource) -> Arc<AnalyticDictionary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(AnalyticDictionary {
            b: RMatrix::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0) / 2.0),
            source,
            final_objective: 0.0,
            max_constraint_residual: 0.0,
            objective_trace: vec![],
        })
    }

    #[test]
    fn loss_examples() {
        let batch = toy_batch(2, 1);
        let dict = toy_dict(2, DictionarySource::Plain);
        let dead = UnfoldedNetwork::new(Variant::Alpgm, vec![LayerParams { gamma: 1.0, theta: 1e6, eta: 0.0, beta: 0.0 }], Some(dict.clone())).unwrap();
        let energy: f64 = batch.iter().map(|s| frobenius_sq(&s.x_star_tilde)).sum();
        assert!((loss(&dead, &batch).unwrap() - energy).abs() < 1e-12);
        let net = UnfoldedNetwork::new(Variant::Alpgm, vec![initial_layer(1.0); 2], Some(dict)).unwrap();
        let per_sample: f64 = batch.iter().map(|s| loss(&net, std::slice::from_ref(s)).unwrap()).sum();
        assert!((loss(&net, &batch).unwrap() - per_sample).abs() < 1e-12);
    }

    #[test]
    fn loss_is_zero_at_exact_output() {
        // identity prox and B = S̃⁺ with a square invertible S̃ recovers X̃* when noiseless
        let s = Arc::new(ndarray::array![[2.0, 1.0], [0.0, 1.0]]);
        let x = ndarray::array![[1.0], [-1.0]];
        let sys = RealizedSystem::from_truth(s, x, &RMatrix::zeros((2, 1))).unwrap();
        let dict = Arc::new(AnalyticDictionary {
            b: ndarray::array![[0.5, -0.5], [0.0, 1.0]],
            source: DictionarySource::Plain,
            final_objective: 0.0,
            max_constraint_residual: 0.0,
            objective_trace: vec![],
        });
        let net = UnfoldedNetwork::new(Variant::Alpgm, vec![LayerParams { gamma: 1.0, theta: 0.0, eta: 0.0, beta: 0.0 }], Some(dict)).unwrap();
        assert!(loss(&net, &[sys]).unwrap() < 1e-28);
    }

    #[test]
    fn clamp_examples() {
        let feasible = LayerParams { gamma: 0.5, theta: 0.2, eta: 1.0, beta: 0.1 };
        assert_eq!(clamp(feasible, 1e-3), feasible);
        let p = clamp(LayerParams { gamma: 1.0, theta: 1.0, eta: 1.0, beta: -0.3 }, 1e-3);
        assert_eq!(p.eta, (1.0 - 1e-3) / 2.0);
        assert_eq!(p.beta, 0.0);
        let q = clamp(LayerParams { gamma: -1.0, theta: -1.0, eta: -1.0, beta: 0.0 }, 1e-3);
        assert_eq!((q.gamma, q.theta, q.eta), (1e-6, 1e-8, 1e-8));
    }

    #[test]
    fn dead_layer_has_zero_gradient() {
        let batch = toy_batch(3, 3);
        let dict = toy_dict(4, DictionarySource::Plain);
        let layers = vec![
            LayerParams { gamma: 1.0, theta: 0.05, eta: 2.0, beta: 0.0 },
            LayerParams { gamma: 1.0, theta: 1e6, eta: 0.0, beta: 0.0 },
            LayerParams { gamma: 1.0, theta: 1e6, eta: 0.0, beta: 0.0 },
        ];
        let net = UnfoldedNetwork::new(Variant::Alpgm, layers, Some(dict)).unwrap();
        let g = backward(&net, &batch).unwrap();
        for lg in &g.layers {
            assert_eq!(*lg, LayerGrad::default());
        }
    }

    #[test]
    fn hard_limit_layer_refused() {
        let batch = toy_batch(1, 5);
        let net = UnfoldedNetwork::new(Variant::StepLpgm, vec![LayerParams { gamma: 1.0, theta: 0.1, eta: 5.0, beta: 0.0 }], None).unwrap();
        assert!(matches!(backward(&net, &batch), Err(Error::Domain(_))));
    }

    /// Draws parameters whose prox inputs stay clear of every breakpoint.
    fn away_from_breakpoints(variant: Variant, batch: &[RealizedSystem], dict: &Arc<AnalyticDictionary>, rng: &mut ChaCha8Rng) -> UnfoldedNetwork {
        loop {
            let layers: Vec<LayerParams> = (0..3)
                .map(|_| {
                    let theta = rng.gen_range(0.02..0.3);
                    LayerParams {
                        gamma: rng.gen_range(0.3..1.0),
                        theta,
                        eta: rng.gen_range(0.05..0.45) / theta,
                        beta: rng.gen_range(0.0..0.5),
                    }
                })
                .collect();
            let net = UnfoldedNetwork::new(variant, layers, Some(dict.clone())).unwrap();
            let prep = Prepared::new(&net, batch).unwrap();
            let idx: Vec<usize> = (0..batch.len()).collect();
            let (wy, _) = prep.stack(&idx);
            let tape = run_stack(variant, &net.layers, &prep.a, &wy, prep.width, true);
            let clear = tape.vs.iter().zip(&net.layers).all(|(v, l)| {
                let norms = row_group_norms(&v.clone().into_shape_with_order((v.len() / prep.width, prep.width)).unwrap());
                norms.iter().all(|&r| (r - l.theta).abs() > 1e-3 && (r - 0.5 / l.eta).abs() > 1e-3)
            });
            if clear {
                return net;
            }
        }
    }

    fn finite_difference(net: &UnfoldedNetwork, batch: &[RealizedSystem], k: usize, j: usize, h: f64) -> f64 {
        let eval = |delta: f64| {
            let mut n = net.clone();
            let mut v = to_vec(&n.layers[k]);
            v[j] += delta;
            n.layers[k] = from_vec(v);
            loss(&n, batch).unwrap()
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let batch = toy_batch(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for variant in [Variant::Alpgm, Variant::AlpgmMm, Variant::StepLpgm, Variant::AlistaGs] {
            let dict = toy_dict(8, if variant == Variant::AlpgmMm { DictionarySource::Symmetric } else { DictionarySource::Plain });
            for _ in 0..5 {
                let net = away_from_breakpoints(variant, &batch, &dict, &mut rng);
                let g = backward(&net, &batch).unwrap();
                for k in 0..3 {
                    let mask = trainable_mask(variant, k);
                    let analytic = grad_vec(&g.layers[k]);
                    for j in 0..4 {
                        let fd = if mask[j] { finite_difference(&net, &batch, k, j, 1e-6) } else { 0.0 };
                        let scale = fd.abs().max(analytic[j].abs()).max(1e-6);
                        assert!((fd - analytic[j]).abs() / scale < 1e-4, "{variant} layer {k} param {j}: fd {fd} vs {}", analytic[j]);
                    }
                }
            }
        }
    }

    fn toy_dataset(count: usize, seed: u64, s_seed: u64) -> Dataset {
        use crate::datagen::{gen_dataset, SceneConfig};
        let cfg = SceneConfig { n_devices: 12, n_antennas: 2, pilot_len: 8, active_prob: 0.2, snr_db: 30.0, seed: s_seed, ..Default::default() };
        gen_dataset(&cfg, count, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_returns_initialization() {
        let train = toy_dataset(40, 1, 9);
        let val = toy_dataset(20, 2, 9);
        let cfg = TrainConfig { alpha0: 0.0, stage_iters: 3, batch_size: 8, ..Default::default() };
        let out = train_layerwise(Variant::StepLpgm, None, &train, &val, 2, &cfg).unwrap();
        let a = train.s_tilde().t().dot(&**train.s_tilde());
        assert_eq!(out.network.layers, vec![initial_layer(default_step(&a).unwrap()); 2]);
        assert_eq!(out.log.len(), 6);
    }

    #[test]
    fn training_never_returns_worse_than_initial() {
        let train = toy_dataset(200, 3, 10);
        let val = toy_dataset(50, 4, 10);
        let cfg = TrainConfig { alpha0: 1e-2, stage_iters: 30, batch_size: 16, seed: 5, ..Default::default() };
        let out = train_layerwise(Variant::StepLpgm, None, &train, &val, 3, &cfg).unwrap();
        assert!(out.best_val_nmse_db <= out.initial_val_nmse_db);
        assert!(out.best_val_nmse_db < out.initial_val_nmse_db - 0.5, "{} vs {}", out.best_val_nmse_db, out.initial_val_nmse_db);
        let again = train_layerwise(Variant::StepLpgm, None, &train, &val, 3, &cfg).unwrap();
        assert_eq!(out.network.layers, again.network.layers);
        let single = train_layerwise(Variant::StepLpgm, None, &train, &val, 1, &cfg).unwrap();
        assert_eq!(single.network.depth(), 1);
        assert!(single.network.layers.iter().all(|l| l.validate().is_ok()));
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let train = toy_dataset(10, 1, 9).truncated(0);
        let val = toy_dataset(10, 2, 9);
        assert!(matches!(
            train_layerwise(Variant::StepLpgm, None, &train, &val, 1, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_csv_header() {
        let mut buf = Vec::new();
        write_log_csv(&[LogRow { stage: 1, iter: 10, train_loss: 0.5, val_nmse_db: -3.0 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "stage,iter,train_loss,val_nmse_db\n1,10,0.5,-3.0\n");
    }
}
