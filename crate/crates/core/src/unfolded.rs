//! Unfolded networks: ALPGM, ALPGM-MM, ALISTA-GS and Step-LPGM.
//!
//! Layer `k` maps `X̃^k` to
//!
//! ```text
//! X̃^{k+1} = shrink_k( X̃^k + γ_k W (Ỹ - S̃ X̃^k) + β_k (X̃^k - X̃^{k-1}) )
//! ```
//!
//! with `W = B` (or `S̃ᵀ` for Step-LPGM), the momentum term only for ALPGM-MM
//! and `k >= 1`, and `shrink_k` the MCP prox (group soft threshold for
//! ALISTA-GS).
//!
//! Batches are evaluated as one side-by-side stack `[X̃_1 | X̃_2 | ...]`, so a
//! layer costs one product with `A = W S̃` for the whole batch.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dictionary::{AnalyticDictionary, DictionarySource};
use crate::error::{Error, Result};
use crate::linalg::{hsplit, hstack, RMatrix, RealizedSystem};
use crate::prox::{shrink_groups, ProxParams, Shrink};

/// Samples per stacked evaluation chunk.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Alpgm,
    AlpgmMm,
    AlistaGs,
    StepLpgm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Alpgm, Variant::AlpgmMm, Variant::AlistaGs, Variant::StepLpgm];

    pub fn has_momentum(self) -> bool {
        self == Variant::AlpgmMm
    }

    /// Dictionary kind the variant is built on, `None` for Step-LPGM.
    pub fn dictionary_source(self) -> Option<DictionarySource> {
        match self {
            Variant::Alpgm | Variant::AlistaGs => Some(DictionarySource::Plain),
            Variant::AlpgmMm => Some(DictionarySource::Symmetric),
            Variant::StepLpgm => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Alpgm => "ALPGM",
            Variant::AlpgmMm => "ALPGM_MM",
            Variant::AlistaGs => "ALISTA_GS",
            Variant::StepLpgm => "STEP_LPGM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown network variant '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub gamma: f64,
    pub theta: f64,
    pub eta: f64,
    pub beta: f64,
}

impl LayerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Domain(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be >= 0, got {}", self.beta)));
        }
        ProxParams::new(self.theta, self.eta).map(|_| ())
    }

    pub(crate) fn shrink(&self, variant: Variant) -> Shrink {
        match variant {
            Variant::AlistaGs => Shrink::Soft(self.theta),
            _ => Shrink::Mcp(ProxParams { theta: self.theta, eta: self.eta }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnfoldedNetwork {
    pub variant: Variant,
    pub layers: Vec<LayerParams>,
    /// Required by every variant except Step-LPGM.
    pub dictionary: Option<Arc<AnalyticDictionary>>,
}

impl UnfoldedNetwork {
    pub fn new(variant: Variant, layers: Vec<LayerParams>, dictionary: Option<Arc<AnalyticDictionary>>) -> Result<Self> {
        let net = Self { variant, layers, dictionary };
        net.validate()?;
        Ok(net)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Domain(format!("layer {k}: {e}")))?;
        }
        match (self.variant.dictionary_source(), &self.dictionary) {
            (Some(_), None) => Err(Error::Config(format!("{} needs an analytic dictionary", self.variant))),
            (Some(DictionarySource::Symmetric), Some(d)) if d.source != DictionarySource::Symmetric => Err(
                Error::Config(format!("{} needs the symmetric dictionary", self.variant)),
            ),
            _ => Ok(()),
        }
    }

    /// The matrix `W` of the gradient step: `B`, or `S̃ᵀ` for Step-LPGM.
    pub fn operator(&self, s_tilde: &RMatrix) -> Result<RMatrix> {
        match (self.variant, &self.dictionary) {
            (Variant::StepLpgm, _) => Ok(s_tilde.t().to_owned()),
            (_, Some(d)) if d.shape_matches(s_tilde) => Ok(d.b.clone()),
            (_, Some(d)) => Err(Error::Shape(format!(
                "dictionary is {:?} but the system needs {}x{}",
                d.b.dim(),
                s_tilde.ncols(),
                s_tilde.nrows()
            ))),
            (_, None) => Err(Error::Config(format!("{} needs an analytic dictionary", self.variant))),
        }
    }
}

/// Precomputed `A = W S̃` and per-sample `W Ỹ` for a set of scenes that
/// share `S̃`.
pub(crate) struct Prepared {
    pub a: RMatrix,
    pub wy: Vec<RMatrix>,
    pub x_star: Vec<RMatrix>,
    pub width: usize,
}

impl Prepared {
    pub fn new(net: &UnfoldedNetwork, systems: &[RealizedSystem]) -> Result<Self> {
        let first = systems.first().ok_or_else(|| Error::Config("no samples to evaluate".into()))?;
        let s_tilde = &first.s_tilde;
        if systems.iter().any(|s| !Arc::ptr_eq(&s.s_tilde, s_tilde) && *s.s_tilde != **s_tilde) {
            return Err(Error::Shape("all samples of a batch must share the dictionary S̃".into()));
        }
        let w = net.operator(s_tilde)?;
        Ok(Self {
            a: w.dot(&**s_tilde),
            wy: systems.iter().map(|s| w.dot(&s.y_tilde)).collect(),
            x_star: systems.iter().map(|s| s.x_star_tilde.clone()).collect(),
            width: first.dims.m,
        })
    }

    pub fn len(&self) -> usize {
        self.wy.len()
    }

    pub fn stack(&self, idx: &[usize]) -> (RMatrix, RMatrix) {
        (hstack(idx.iter().map(|&i| &self.wy[i])), hstack(idx.iter().map(|&i| &self.x_star[i])))
    }
}

/// Iterates of one stacked forward pass; `vs[k]` is the prox input of layer `k`.
pub(crate) struct Tape {
    pub xs: Vec<RMatrix>,
    pub vs: Vec<RMatrix>,
}

/// Stacked forward pass. Keeps prox inputs only when `keep_inputs` is set.
pub(crate) fn run_stack(
    variant: Variant,
    layers: &[LayerParams],
    a: &RMatrix,
    wy: &RMatrix,
    width: usize,
    keep_inputs: bool,
) -> Tape {
    let mut xs = vec![RMatrix::zeros(wy.dim())];
    let mut vs = Vec::new();
    for (k, layer) in layers.iter().enumerate() {
        let x = &xs[k];
        // V = (1 + β) X + γ (WY - A X) - β X_prev
        let mut v = a.dot(x);
        v -= wy;
        v *= -layer.gamma;
        if variant.has_momentum() && k >= 1 {
            v.scaled_add(1.0 + layer.beta, x);
            v.scaled_add(-layer.beta, &xs[k - 1]);
        } else {
            v += x;
        }
        let mut next = v.clone();
        shrink_groups(&mut next, width, layer.shrink(variant));
        if keep_inputs {
            vs.push(v);
        }
        xs.push(next);
    }
    Tape { xs, vs }
}

/// Runs the network on one scene. With `trace` the result holds all `K + 1`
/// iterates starting from `X̃⁰ = 0`, otherwise only `X̃^K`.
pub fn forward(net: &UnfoldedNetwork, sys: &RealizedSystem, trace: bool) -> Result<Vec<RMatrix>> {
    net.validate()?;
    let prep = Prepared::new(net, std::slice::from_ref(sys))?;
    let tape = run_stack(net.variant, &net.layers, &prep.a, &prep.wy[0], prep.width, false);
    let mut xs = tape.xs;
    if trace {
        Ok(xs)
    } else {
        Ok(vec![xs.pop().expect("at least X⁰")])
    }
}

/// Final iterates `X̃^K` for every scene, in order.
pub fn forward_batch(net: &UnfoldedNetwork, systems: &[RealizedSystem]) -> Result<Vec<RMatrix>> {
    let per_layer = layer_outputs(net, systems, false)?;
    Ok(per_layer.into_iter().next_back().unwrap_or_default())
}

/// `out[k][i]` is `X̃^k` of scene `i`, for `k = 0..=K` (or only `k = K`
/// unless `all_layers`).
pub fn layer_outputs(net: &UnfoldedNetwork, systems: &[RealizedSystem], all_layers: bool) -> Result<Vec<Vec<RMatrix>>> {
    net.validate()?;
    let prep = Prepared::new(net, systems)?;
    let kept = if all_layers { net.depth() + 1 } else { 1 };
    let mut out: Vec<Vec<RMatrix>> = vec![Vec::with_capacity(systems.len()); kept];
    let idx: Vec<usize> = (0..prep.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (wy, _) = prep.stack(chunk);
        let tape = run_stack(net.variant, &net.layers, &prep.a, &wy, prep.width, false);
        let skip = tape.xs.len() - kept;
        for (slot, x) in out.iter_mut().zip(tape.xs.iter().skip(skip)) {
            slot.extend(hsplit(x, prep.width));
        }
    }
    Ok(out)
}

/// Serialized form of a network; the dictionary is stored in its own file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRecord {
    pub variant: Variant,
    #[serde(rename = "K")]
    pub k: usize,
    pub layers: Vec<LayerParams>,
    pub dictionary: Option<String>,
}

impl NetworkRecord {
    pub fn from_network(net: &UnfoldedNetwork, dictionary_file: Option<String>) -> Self {
        Self { variant: net.variant, k: net.depth(), layers: net.layers.clone(), dictionary: dictionary_file }
    }

    pub fn into_network(self, dictionary: Option<Arc<AnalyticDictionary>>) -> Result<UnfoldedNetwork> {
        if self.k != self.layers.len() {
            return Err(Error::Format(format!("record declares K = {} but lists {} layers", self.k, self.layers.len())));
        }
        UnfoldedNetwork::new(self.variant, self.layers, dictionary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iterative::{pgm_solve, IterativeConfig};
    use crate::linalg::row_group_norms;
    use crate::prox::{group_soft_threshold, prox_matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_system(seed: u64) -> RealizedSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = RMatrix::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0) / 2.0);
        let x = RMatrix::from_shape_fn((6, 2), |(i, _)| if i % 3 == 0 { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let z = RMatrix::from_shape_fn((4, 2), |_| 0.01 * rng.gen_range(-1.0..1.0));
        RealizedSystem::from_truth(Arc::new(s), x, &z).unwrap()
    }

    fn toy_dict(source: DictionarySource, seed: u64) -> Arc<AnalyticDictionary> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(AnalyticDictionary {
            b: RMatrix::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0) / 2.0),
            source,
            final_objective: 0.0,
            max_constraint_residual: 0.0,
            objective_trace: vec![],
        })
    }

    fn layer(gamma: f64, theta: f64, eta: f64, beta: f64) -> LayerParams {
        LayerParams { gamma, theta, eta, beta }
    }

    #[test]
    fn huge_thresholds_give_zero() {
        let sys = toy_system(1);
        for variant in Variant::ALL {
            let src = variant.dictionary_source().unwrap_or(DictionarySource::Plain);
            let net = UnfoldedNetwork::new(variant, vec![layer(1.0, 1e6, 0.0, 0.0); 3], Some(toy_dict(src, 2))).unwrap();
            assert!(forward(&net, &sys, false).unwrap()[0].iter().all(|&v| v == 0.0), "{variant}");
        }
    }

    #[test]
    fn zero_threshold_single_layer_is_wy() {
        let sys = toy_system(2);
        let dict = toy_dict(DictionarySource::Plain, 3);
        let net = UnfoldedNetwork::new(Variant::Alpgm, vec![layer(1.0, 0.0, 0.0, 0.0)], Some(dict.clone())).unwrap();
        let got = forward(&net, &sys, false).unwrap().remove(0);
        let expect = dict.b.dot(&sys.y_tilde);
        assert!((got - expect).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn zero_momentum_matches_alpgm() {
        let sys = toy_system(3);
        let dict = toy_dict(DictionarySource::Symmetric, 4);
        let layers = vec![layer(0.8, 0.05, 2.0, 0.0), layer(0.9, 0.04, 3.0, 0.0), layer(1.1, 0.03, 1.0, 0.0)];
        let a = UnfoldedNetwork::new(Variant::Alpgm, layers.clone(), Some(dict.clone())).unwrap();
        let b = UnfoldedNetwork::new(Variant::AlpgmMm, layers, Some(dict)).unwrap();
        assert_eq!(forward(&a, &sys, true).unwrap(), forward(&b, &sys, true).unwrap());
    }

    #[test]
    fn first_layer_ignores_momentum() {
        let sys = toy_system(4);
        let dict = toy_dict(DictionarySource::Symmetric, 5);
        let layers = vec![layer(0.8, 0.05, 2.0, 0.7), layer(0.9, 0.04, 3.0, 0.5)];
        let a = UnfoldedNetwork::new(Variant::Alpgm, layers.clone(), Some(dict.clone())).unwrap();
        let b = UnfoldedNetwork::new(Variant::AlpgmMm, layers, Some(dict)).unwrap();
        assert_eq!(forward(&a, &sys, true).unwrap()[1], forward(&b, &sys, true).unwrap()[1]);
    }

    #[test]
    fn momentum_two_layers_by_hand() {
        let sys = toy_system(5);
        let dict = toy_dict(DictionarySource::Symmetric, 6);
        let layers = vec![layer(0.8, 0.05, 2.0, 0.3), layer(0.9, 0.04, 3.0, 0.4)];
        let net = UnfoldedNetwork::new(Variant::AlpgmMm, layers.clone(), Some(dict.clone())).unwrap();
        let trace = forward(&net, &sys, true).unwrap();
        let b = &dict.b;
        let step = |x: &RMatrix, g: f64| x + &(b.dot(&(&sys.y_tilde - &sys.s_tilde.dot(x))) * g);
        let x0 = RMatrix::zeros((6, 2));
        let x1 = prox_matrix(&step(&x0, 0.8), ProxParams::new(0.05, 2.0).unwrap()).unwrap();
        let v1 = step(&x1, 0.9) + (&x1 - &x0) * 0.4;
        let x2 = prox_matrix(&v1, ProxParams::new(0.04, 3.0).unwrap()).unwrap();
        for (got, want) in trace.iter().zip([x0, x1, x2].iter()) {
            assert!((got - want).iter().all(|d| d.abs() < 1e-13));
        }
    }

    #[test]
    fn alista_uses_soft_threshold() {
        let sys = toy_system(6);
        let dict = toy_dict(DictionarySource::Plain, 7);
        let net = UnfoldedNetwork::new(Variant::AlistaGs, vec![layer(0.7, 0.02, 0.0, 0.0)], Some(dict.clone())).unwrap();
        let want = group_soft_threshold(&(dict.b.dot(&sys.y_tilde) * 0.7), 0.02).unwrap();
        assert!((forward(&net, &sys, false).unwrap().remove(0) - want).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn step_lpgm_with_constant_layers_is_pgm() {
        let sys = toy_system(7);
        let (gamma, lambda, eta) = (0.4, 0.1, 5.0);
        let net = UnfoldedNetwork::new(Variant::StepLpgm, vec![layer(gamma, lambda * gamma, eta, 0.0); 10], None).unwrap();
        let cfg = IterativeConfig { lambda, max_iters: 10, gamma: Some(gamma), eta: Some(eta), trace: true, lipschitz: None };
        let pgm = pgm_solve(&sys, &cfg).unwrap();
        let ours = forward(&net, &sys, true).unwrap();
        for (a, b) in ours.iter().zip(&pgm.iterates) {
            assert!((a - b).iter().all(|d| d.abs() < 1e-13));
        }
    }

    #[test]
    fn batch_matches_single() {
        let dict = toy_dict(DictionarySource::Symmetric, 8);
        let base = toy_system(8);
        let systems: Vec<_> = (0..5)
            .map(|i| {
                let t = toy_system(100 + i);
                RealizedSystem::new(base.s_tilde.clone(), t.y_tilde, t.x_star_tilde, 0.0).unwrap()
            })
            .collect();
        let layers = vec![layer(0.8, 0.05, 2.0, 0.0), layer(0.9, 0.04, 3.0, 0.5), layer(1.0, 0.01, 1.0, 0.2)];
        let net = UnfoldedNetwork::new(Variant::AlpgmMm, layers, Some(dict)).unwrap();
        let batch = layer_outputs(&net, &systems, true).unwrap();
        for (i, sys) in systems.iter().enumerate() {
            let single = forward(&net, sys, true).unwrap();
            for k in 0..=3 {
                assert!((&batch[k][i] - &single[k]).iter().all(|d| d.abs() < 1e-13));
            }
        }
        assert_eq!(forward_batch(&net, &systems).unwrap(), batch[3]);
    }

    #[test]
    fn validation() {
        let plain = toy_dict(DictionarySource::Plain, 9);
        let ok = vec![layer(1.0, 0.1, 2.5, 0.0)];
        assert!(UnfoldedNetwork::new(Variant::AlpgmMm, ok.clone(), Some(plain.clone())).is_err());
        assert!(UnfoldedNetwork::new(Variant::Alpgm, ok.clone(), None).is_err());
        assert!(UnfoldedNetwork::new(Variant::Alpgm, vec![], Some(plain.clone())).is_err());
        assert!(UnfoldedNetwork::new(Variant::Alpgm, vec![layer(1.0, 0.1, 6.0, 0.0)], Some(plain.clone())).is_err());
        assert!(UnfoldedNetwork::new(Variant::Alpgm, vec![layer(0.0, 0.1, 1.0, 0.0)], Some(plain.clone())).is_err());
        assert!(UnfoldedNetwork::new(Variant::StepLpgm, ok, None).is_ok());
        assert_eq!("alpgm-mm".parse::<Variant>().unwrap(), Variant::AlpgmMm);
        assert!("lista".parse::<Variant>().is_err());
    }

    #[test]
    fn record_round_trip() {
        let net = UnfoldedNetwork::new(Variant::StepLpgm, vec![layer(1.0, 0.1, 2.5, 0.0); 2], None).unwrap();
        let json = serde_json::to_string(&NetworkRecord::from_network(&net, None)).unwrap();
        assert!(json.contains("\"STEP_LPGM\"") && json.contains("\"K\":2"));
        let back: NetworkRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_network(None).unwrap().layers, net.layers);
    }

    #[test]
    fn thresholded_rows_are_exact_zeros() {
        let sys = toy_system(10);
        let net = UnfoldedNetwork::new(Variant::StepLpgm, vec![layer(1.0, 0.2, 2.0, 0.0); 4], None).unwrap();
        let x = forward(&net, &sys, false).unwrap().remove(0);
        assert!(row_group_norms(&x).iter().all(|&r| r == 0.0 || r > 1e-12));
    }
}
