//! Benchmark sweeps: every method evaluated on regenerated test sets along
//! one scene axis, reported as CSV rows.
//!
//! Trained artifacts live in one directory:
//!
//! | file | content |
//! |---|---|
//! | `dict_plain.json`, `dict_symmetric.json` | analytic dictionaries |
//! | `net_<variant>.json` | trained networks, e.g. `net_alpgm_mm.json` |
//! | `tuned.json` | LPGM-AT hyperparameters |
//!
//! Axes that change the pilot (`pilot_len`) read their artifacts from the
//! subdirectory `pilot_len_<value>`. The `snr_db` and `active_ratio` axes
//! use `<axis>_<value>` when it exists and the base artifacts otherwise;
//! `mismatch` always uses the base artifacts.

use std::cmp::Ordering;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptive::{lpgm_at_batch, AdaptiveContext, TunedRecord};
use crate::datagen::{gen_dataset, true_activity, Dataset, SceneConfig};
use crate::dictionary::{AnalyticDictionary, DictionarySource};
use crate::error::{Error, Result};
use crate::io::{load_dictionary, load_network, read_json, DatasetManifest};
use crate::iterative::{fista_gs_solve, ista_gs_solve, lipschitz_constant, pgm_solve, IterativeConfig};
use crate::linalg::RMatrix;
use crate::metrics::{activity_metrics, default_threshold, nmse_db};
use crate::unfolded::{forward_batch, UnfoldedNetwork, Variant};

pub const SWEEP_CSV_HEADER: &str = "method,axis,axis_value,nmse_db,runtime_ms_per_sample,seed,fingerprint";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Pgm,
    IstaGs,
    FistaGs,
    Alpgm,
    AlpgmMm,
    AlistaGs,
    StepLpgm,
    LpgmAt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Pgm,
        Method::IstaGs,
        Method::FistaGs,
        Method::Alpgm,
        Method::AlpgmMm,
        Method::AlistaGs,
        Method::StepLpgm,
        Method::LpgmAt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pgm => "PGM",
            Method::IstaGs => "ISTA_GS",
            Method::FistaGs => "FISTA_GS",
            Method::Alpgm => "ALPGM",
            Method::AlpgmMm => "ALPGM_MM",
            Method::AlistaGs => "ALISTA_GS",
            Method::StepLpgm => "STEP_LPGM",
            Method::LpgmAt => "LPGM_AT",
        }
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            Method::Alpgm => Some(Variant::Alpgm),
            Method::AlpgmMm => Some(Variant::AlpgmMm),
            Method::AlistaGs => Some(Variant::AlistaGs),
            Method::StepLpgm => Some(Variant::StepLpgm),
            _ => None,
        }
    }

    pub fn is_iterative(self) -> bool {
        matches!(self, Method::Pgm | Method::IstaGs | Method::FistaGs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_uppercase().replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == key).ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Layers,
    ActiveRatio,
    PilotLen,
    SnrDb,
    Mismatch,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Layers => "layers",
            Axis::ActiveRatio => "active_ratio",
            Axis::PilotLen => "pilot_len",
            Axis::SnrDb => "snr_db",
            Axis::Mismatch => "mismatch",
        }
    }
}

/// A point on a sweep axis: a number, or a mismatch label such as `base`,
/// `snr_db=15` or `active_prob=0.15`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Num(f64),
    Text(String),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Num(v) => write!(f, "{v}"),
            SweepValue::Text(t) => f.write_str(t),
        }
    }
}

impl SweepValue {
    fn cmp_key(&self, other: &Self) -> Ordering {
        match (self, other) {
            (SweepValue::Num(a), SweepValue::Num(b)) => a.total_cmp(b),
            (SweepValue::Num(_), SweepValue::Text(_)) => Ordering::Less,
            (SweepValue::Text(_), SweepValue::Num(_)) => Ordering::Greater,
            (SweepValue::Text(a), SweepValue::Text(b)) => a.cmp(b),
        }
    }

    fn count(&self, axis: Axis) -> Result<usize> {
        match self {
            SweepValue::Num(v) if *v >= 1.0 && v.fract() == 0.0 => Ok(*v as usize),
            _ => Err(Error::Config(format!("{} values must be positive integers, got {self}", axis.name()))),
        }
    }

    fn number(&self, axis: Axis) -> Result<f64> {
        match self {
            SweepValue::Num(v) if v.is_finite() => Ok(*v),
            _ => Err(Error::Config(format!("{} values must be numbers, got {self}", axis.name()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<SweepValue>,
    pub methods: Vec<Method>,
    #[serde(default = "default_iters")]
    pub iters_for_iterative: usize,
    #[serde(default = "default_layers")]
    pub layers_for_nets: usize,
}

fn default_iters() -> usize {
    50
}

fn default_layers() -> usize {
    16
}

impl SweepSpec {
    pub fn new(axis: Axis, values: Vec<SweepValue>, methods: Vec<Method>) -> Self {
        Self { axis, values, methods, iters_for_iterative: default_iters(), layers_for_nets: default_layers() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("a sweep needs at least one value and one method".into()));
        }
        if self.iters_for_iterative == 0 || self.layers_for_nets == 0 {
            return Err(Error::Config("iteration and layer counts must be positive".into()));
        }
        let base = SceneConfig::default();
        for v in &self.values {
            self.scene_at(&base, v)?;
        }
        Ok(())
    }

    /// Test scene for one axis value.
    pub fn scene_at(&self, base: &SceneConfig, value: &SweepValue) -> Result<SceneConfig> {
        let mut cfg = base.clone();
        match self.axis {
            Axis::Layers => {
                value.count(self.axis)?;
            }
            Axis::ActiveRatio => cfg.active_prob = value.number(self.axis)?,
            Axis::PilotLen => cfg.pilot_len = value.count(self.axis)?,
            Axis::SnrDb => cfg.snr_db = value.number(self.axis)?,
            Axis::Mismatch => apply_mismatch(&mut cfg, value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Iterations or layers each method runs at `value`.
    fn depth_at(&self, method: Method, value: &SweepValue) -> Result<usize> {
        if self.axis == Axis::Layers {
            return value.count(self.axis);
        }
        Ok(if method.is_iterative() { self.iters_for_iterative } else { self.layers_for_nets })
    }
}

fn apply_mismatch(cfg: &mut SceneConfig, value: &SweepValue) -> Result<()> {
    let text = match value {
        SweepValue::Text(t) => t.trim(),
        SweepValue::Num(_) => return Err(Error::Config(format!("mismatch values are labels like snr_db=15, got {value}"))),
    };
    if text == "base" {
        return Ok(());
    }
    let (key, raw) = text.split_once('=').ok_or_else(|| Error::Config(format!("bad mismatch label '{text}'")))?;
    let v: f64 = raw.trim().parse().map_err(|_| Error::Config(format!("bad number in mismatch label '{text}'")))?;
    match key.trim() {
        "snr_db" => cfg.snr_db = v,
        "active_prob" | "active_ratio" => cfg.active_prob = v,
        other => return Err(Error::Config(format!("mismatch key '{other}' is not snr_db or active_prob"))),
    }
    Ok(())
}

/// Directory of trained artifacts.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub root: PathBuf,
}

pub fn network_file(variant: Variant) -> String {
    format!("net_{}.json", variant.name().to_ascii_lowercase())
}

pub fn dictionary_file(source: DictionarySource) -> &'static str {
    match source {
        DictionarySource::Plain => "dict_plain.json",
        DictionarySource::Symmetric => "dict_symmetric.json",
    }
}

pub const TUNED_FILE: &str = "tuned.json";

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn network(&self, variant: Variant) -> Result<UnfoldedNetwork> {
        let net = load_network(&self.path(&network_file(variant)))?;
        if net.variant != variant {
            return Err(Error::Config(format!("{} holds a {} network", network_file(variant), net.variant)));
        }
        Ok(net)
    }

    pub fn dictionary(&self, source: DictionarySource) -> Result<AnalyticDictionary> {
        load_dictionary(&self.path(dictionary_file(source)))
    }

    pub fn tuned(&self) -> Result<TunedRecord> {
        read_json(&self.path(TUNED_FILE))
    }

    /// Artifacts used for one sweep value; see the module docs.
    pub fn for_value(&self, axis: Axis, value: &SweepValue) -> Artifacts {
        let sub = self.root.join(format!("{}_{value}", axis.name()));
        match axis {
            Axis::PilotLen => Artifacts::new(sub),
            Axis::SnrDb | Axis::ActiveRatio if sub.is_dir() => Artifacts::new(sub),
            _ => self.clone(),
        }
    }
}

/// Estimates of one method on a test set plus the solver wall-clock.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub estimates: Vec<RMatrix>,
    pub runtime_ms_per_sample: f64,
}

/// Runs `method` for `depth` iterations or layers on every test scene.
///
/// The timer covers the solver calls only; artifact loading and per-pilot
/// precomputation are excluded.
pub fn evaluate_method(
    method: Method,
    test: &Dataset,
    artifacts: &Artifacts,
    iterative: &IterativeConfig,
    depth: usize,
) -> Result<MethodRun> {
    if test.systems.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let timed = |f: &dyn Fn() -> Result<Vec<RMatrix>>| -> Result<MethodRun> {
        let start = Instant::now();
        let estimates = f()?;
        let ms = start.elapsed().as_secs_f64() * 1e3 / test.count() as f64;
        Ok(MethodRun { estimates, runtime_ms_per_sample: ms })
    };
    if method.is_iterative() {
        let cfg = IterativeConfig {
            max_iters: depth,
            trace: false,
            lipschitz: Some(lipschitz_constant(test.s_tilde())?),
            ..iterative.clone()
        };
        let solve = match method {
            Method::Pgm => pgm_solve,
            Method::IstaGs => ista_gs_solve,
            _ => fista_gs_solve,
        };
        return timed(&|| test.systems.par_iter().map(|s| solve(s, &cfg).map(|t| t.last().clone())).collect());
    }
    if method == Method::LpgmAt {
        let tuned = artifacts.tuned()?;
        let dict = Arc::new(artifacts.dictionary(DictionarySource::Symmetric)?);
        let ctx = AdaptiveContext::new(test.s_tilde(), dict, depth)?;
        return timed(&|| lpgm_at_batch(&test.systems, &ctx, tuned.hyper));
    }
    let variant = method.variant().expect("network method");
    let net = truncated(&artifacts.network(variant)?, depth)?;
    timed(&|| forward_batch(&net, &test.systems))
}

/// The first `depth` layers of `net`.
pub fn truncated(net: &UnfoldedNetwork, depth: usize) -> Result<UnfoldedNetwork> {
    if depth > net.depth() {
        return Err(Error::Config(format!("{} network has {} layers, {depth} requested", net.variant, net.depth())));
    }
    UnfoldedNetwork::new(net.variant, net.layers[..depth].to_vec(), net.dictionary.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub axis: Axis,
    pub axis_value: SweepValue,
    pub nmse_db: f64,
    pub runtime_ms_per_sample: f64,
    pub seed: u64,
    pub fingerprint: String,
}

/// Test-set parameters shared by every sweep value.
#[derive(Debug, Clone)]
pub struct SweepSettings {
    pub test_count: usize,
    pub test_seed: u64,
    pub iterative: IterativeConfig,
}

/// Runs `spec` and returns rows sorted by `(method, axis_value)`.
pub fn run_sweep(spec: &SweepSpec, base: &SceneConfig, artifacts: &Artifacts, settings: &SweepSettings) -> Result<Vec<ResultRow>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for value in &spec.values {
        let scene = spec.scene_at(base, value)?;
        let test = gen_dataset(&scene, settings.test_count, settings.test_seed)?;
        let fingerprint = DatasetManifest::of(&test).fingerprint();
        let truths: Vec<RMatrix> = test.systems.iter().map(|s| s.x_star_tilde.clone()).collect();
        let art = artifacts.for_value(spec.axis, value);
        for &method in &spec.methods {
            let run = evaluate_method(method, &test, &art, &settings.iterative, spec.depth_at(method, value)?)?;
            rows.push(ResultRow {
                method,
                axis: spec.axis,
                axis_value: value.clone(),
                nmse_db: nmse_db(&run.estimates, &truths)?,
                runtime_ms_per_sample: run.runtime_ms_per_sample,
                seed: settings.test_seed,
                fingerprint: fingerprint.clone(),
            });
        }
    }
    rows.sort_by(|a, b| a.method.name().cmp(b.method.name()).then_with(|| a.axis_value.cmp_key(&b.axis_value)));
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER.split(',')).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.axis.name().to_string(),
            r.axis_value.to_string(),
            r.nmse_db.to_string(),
            r.runtime_ms_per_sample.to_string(),
            r.seed.to_string(),
            r.fingerprint.clone(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Matched-test-set evaluation of one method, with detection rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub depth: usize,
    pub nmse_db: f64,
    pub runtime_ms_per_sample: f64,
    /// Missed detections over active devices.
    pub miss_rate: f64,
    /// False alarms over inactive devices.
    pub false_alarm_rate: f64,
    pub fingerprint: String,
}

/// Evaluates each method on `test`; detection uses the largest-gap threshold.
pub fn evaluate_all(
    methods: &[Method],
    test: &Dataset,
    artifacts: &Artifacts,
    iterative: &IterativeConfig,
    iters: usize,
    layers: usize,
) -> Result<Vec<EvalRow>> {
    let truths: Vec<RMatrix> = test.systems.iter().map(|s| s.x_star_tilde.clone()).collect();
    let fingerprint = DatasetManifest::of(test).fingerprint();
    methods
        .iter()
        .map(|&method| {
            let depth = if method.is_iterative() { iters } else { layers };
            let run = evaluate_method(method, test, artifacts, iterative, depth)?;
            let (mut missed, mut false_alarm, mut active, mut inactive) = (0, 0, 0, 0);
            for (x, t) in run.estimates.iter().zip(&truths) {
                let truth = true_activity(t);
                let counts = activity_metrics(x, &truth, default_threshold(x, None))?;
                missed += counts.missed;
                false_alarm += counts.false_alarm;
                active += truth.iter().filter(|&&a| a).count();
                inactive += truth.iter().filter(|&&a| !a).count();
            }
            let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
            Ok(EvalRow {
                method,
                depth,
                nmse_db: nmse_db(&run.estimates, &truths)?,
                runtime_ms_per_sample: run.runtime_ms_per_sample,
                miss_rate: rate(missed, active),
                false_alarm_rate: rate(false_alarm, inactive),
                fingerprint: fingerprint.clone(),
            })
        })
        .collect()
}

/// Writes evaluation rows with a header row.
pub fn write_eval_csv<W: std::io::Write>(rows: &[EvalRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;
    use crate::datagen::PilotKind;
    use crate::dictionary::solve_symmetric_dictionary;
    use crate::io::{save_dictionary, save_network, write_json};
    use crate::training::initial_layer;
    use crate::unfolded::forward;

    fn scene() -> SceneConfig {
        SceneConfig { n_devices: 16, n_antennas: 2, pilot_len: 8, active_prob: 0.15, snr_db: 30.0, pilot_kind: PilotKind::Gaussian, seed: 2 }
    }

    fn settings() -> SweepSettings {
        SweepSettings { test_count: 12, test_seed: 77, iterative: IterativeConfig::default() }
    }

    /// Symmetric dictionary, an untrained ALPGM_MM network and a tuned triple.
    fn artifacts(dir: &Path) -> Artifacts {
        let data = gen_dataset(&scene(), 1, 0).unwrap();
        let cfg = crate::dictionary::DictConfig { steps: 200, polish_iters: 300, ..Default::default() };
        let (_, dict) = solve_symmetric_dictionary(data.s_tilde(), &cfg).unwrap();
        save_dictionary(&dir.join(dictionary_file(DictionarySource::Symmetric)), &dict).unwrap();
        let mut layers = vec![initial_layer(0.2); 4];
        for l in layers.iter_mut().skip(1) {
            l.beta = 0.1;
        }
        let net = UnfoldedNetwork::new(Variant::AlpgmMm, layers, Some(Arc::new(dict))).unwrap();
        save_network(&dir.join(network_file(Variant::AlpgmMm)), &net, Some(dictionary_file(DictionarySource::Symmetric))).unwrap();
        let tuned = TunedRecord {
            hyper: crate::adaptive::HyperParams { c_theta: 0.05, c_beta: 1e-3, c_eta: 5.0 },
            train_nmse_db: -10.0,
            layers: 4,
            fingerprint: crate::adaptive::DatasetFingerprint { seed: 0, snr_db: 30.0, active_prob: 0.15, digest: String::new() },
        };
        write_json(&dir.join(TUNED_FILE), &tuned).unwrap();
        Artifacts::new(dir)
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert_eq!("alpgm-mm".parse::<Method>().unwrap(), Method::AlpgmMm);
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(SweepSpec::new(Axis::SnrDb, vec![], vec![Method::Pgm]).validate().is_err());
        assert!(SweepSpec::new(Axis::SnrDb, vec![SweepValue::Num(10.0)], vec![]).validate().is_err());
        assert!(SweepSpec::new(Axis::Layers, vec![SweepValue::Num(2.5)], vec![Method::Pgm]).validate().is_err());
        assert!(SweepSpec::new(Axis::Mismatch, vec![SweepValue::Text("gain=3".into())], vec![Method::Pgm]).validate().is_err());
        let ok = SweepSpec::new(
            Axis::Mismatch,
            vec![SweepValue::Text("base".into()), SweepValue::Text("snr_db=15".into()), SweepValue::Text("active_prob=0.15".into())],
            vec![Method::Pgm],
        );
        ok.validate().unwrap();
        let s = ok.scene_at(&scene(), &ok.values[1]).unwrap();
        assert_eq!(s.snr_db, 15.0);
        assert_eq!(ok.scene_at(&scene(), &ok.values[2]).unwrap().active_prob, 0.15);
        assert_eq!(ok.scene_at(&scene(), &ok.values[0]).unwrap(), scene());
    }

    #[test]
    fn one_method_one_value_gives_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec::new(Axis::SnrDb, vec![SweepValue::Num(20.0)], vec![Method::IstaGs]);
        let rows = run_sweep(&spec, &scene(), &Artifacts::new(dir.path()), &settings()).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].axis_value, SweepValue::Num(20.0));
        assert!(rows[0].nmse_db.is_finite());
        assert_eq!(rows[0].fingerprint.len(), 64);
    }

    #[test]
    fn rows_sorted_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let art = artifacts(dir.path());
        let spec = SweepSpec {
            iters_for_iterative: 10,
            layers_for_nets: 4,
            ..SweepSpec::new(Axis::SnrDb, vec![SweepValue::Num(30.0), SweepValue::Num(10.0)], vec![Method::LpgmAt, Method::AlpgmMm, Method::Pgm])
        };
        let a = run_sweep(&spec, &scene(), &art, &settings()).unwrap();
        let b = run_sweep(&spec, &scene(), &art, &settings()).unwrap();
        let keys: Vec<_> = a.iter().map(|r| (r.method.name(), r.axis_value.to_string())).collect();
        assert_eq!(
            keys,
            vec![("ALPGM_MM", "10".into()), ("ALPGM_MM", "30".into()), ("LPGM_AT", "10".into()), ("LPGM_AT", "30".into()), ("PGM", "10".into()), ("PGM", "30".into())]
        );
        let na: Vec<u64> = a.iter().map(|r| r.nmse_db.to_bits()).collect();
        let nb: Vec<u64> = b.iter().map(|r| r.nmse_db.to_bits()).collect();
        assert_eq!(na, nb);
        let mut out = Vec::new();
        write_sweep_csv(&a, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), SWEEP_CSV_HEADER);
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn layers_axis_matches_stored_trace() {
        let dir = tempfile::tempdir().unwrap();
        let art = artifacts(dir.path());
        let values: Vec<_> = (1..=4).map(|k| SweepValue::Num(k as f64)).collect();
        let spec = SweepSpec::new(Axis::Layers, values, vec![Method::AlpgmMm]);
        let rows = run_sweep(&spec, &scene(), &art, &settings()).unwrap();
        let test = gen_dataset(&scene(), 12, 77).unwrap();
        let net = art.network(Variant::AlpgmMm).unwrap();
        let traces: Vec<Vec<RMatrix>> = test.systems.iter().map(|s| forward(&net, s, true).unwrap()).collect();
        let truths: Vec<RMatrix> = test.systems.iter().map(|s| s.x_star_tilde.clone()).collect();
        for (k, row) in (1..=4).zip(&rows) {
            let at_k: Vec<RMatrix> = traces.iter().map(|t| t[k].clone()).collect();
            assert!((nmse_db(&at_k, &truths).unwrap() - row.nmse_db).abs() < 1e-9, "layer {k}");
        }
    }

    #[test]
    fn mismatch_base_reproduces_direct_eval() {
        let dir = tempfile::tempdir().unwrap();
        let art = artifacts(dir.path());
        let spec = SweepSpec { layers_for_nets: 4, ..SweepSpec::new(Axis::Mismatch, vec![SweepValue::Text("base".into())], vec![Method::AlpgmMm]) };
        let rows = run_sweep(&spec, &scene(), &art, &settings()).unwrap();
        let test = gen_dataset(&scene(), 12, 77).unwrap();
        let truths: Vec<RMatrix> = test.systems.iter().map(|s| s.x_star_tilde.clone()).collect();
        let direct = nmse_db(&forward_batch(&art.network(Variant::AlpgmMm).unwrap(), &test.systems).unwrap(), &truths).unwrap();
        assert!((rows[0].nmse_db - direct).abs() < 0.1);
    }

    #[test]
    fn missing_artifact_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec::new(Axis::SnrDb, vec![SweepValue::Num(20.0)], vec![Method::Alpgm]);
        let err = run_sweep(&spec, &scene(), &Artifacts::new(dir.path()), &settings()).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("net_alpgm.json")), "{err}");
        let spec = SweepSpec::new(Axis::PilotLen, vec![SweepValue::Num(8.0)], vec![Method::LpgmAt]);
        let err = run_sweep(&spec, &scene(), &Artifacts::new(dir.path()), &settings()).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("pilot_len_8")), "{err}");
    }

    #[test]
    fn eval_reports_detection_rates() {
        let dir = tempfile::tempdir().unwrap();
        let test = gen_dataset(&scene(), 12, 5).unwrap();
        let rows = evaluate_all(&[Method::FistaGs], &test, &Artifacts::new(dir.path()), &IterativeConfig::default(), 50, 16).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((0.0..=1.0).contains(&rows[0].miss_rate) && (0.0..=1.0).contains(&rows[0].false_alarm_rate));
    }
}
