use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use jadce::adaptive::{grid_search, AdaptiveContext, DatasetFingerprint, TunedRecord};
use jadce::config::{ExperimentConfig, Split};
use jadce::datagen::{gen_dataset, gen_pilot, sample_seed, Dataset};
use jadce::dictionary::{mutual_coherence, solve_plain_dictionary, solve_symmetric_dictionary, symmetry_defect, DictionarySource};
use jadce::io::{read_dataset, save_dictionary, save_network, write_dataset, write_json, DatasetManifest};
use jadce::linalg::lift_dictionary;
use jadce::sweep::{dictionary_file, evaluate_all, network_file, run_sweep, write_eval_csv, write_sweep_csv, Artifacts, Method, SweepSettings, TUNED_FILE};
use jadce::theory::{certify, compute_constants, SignalClass};
use jadce::training::{train_layerwise, write_log_csv};
use jadce::unfolded::Variant;
use jadce::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "jadce", version, about = "Activity detection and channel estimation experiments")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for datasets, artifacts and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sample-parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train, validation and test datasets.
    Gen,
    /// Optimize an analytic dictionary for the configured pilot.
    Dict {
        #[arg(value_parser = parse_source)]
        kind: DictionarySource,
    },
    /// Train an unfolded network layer by layer.
    Train {
        #[arg(value_parser = parse_variant)]
        variant: Variant,
    },
    /// Grid-search the LPGM-AT hyperparameters on the training set.
    Tune,
    /// Evaluate methods on the test set.
    Eval {
        /// Comma-separated method tags; defaults to every method with artifacts.
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
    },
    /// Run the `[sweep]` section of the configuration.
    Sweep,
    /// Certified runs checking the no-false-positive guarantee.
    Theory,
}

fn parse_source(s: &str) -> std::result::Result<DictionarySource, String> {
    match s {
        "plain" => Ok(DictionarySource::Plain),
        "symmetric" => Ok(DictionarySource::Symmetric),
        _ => Err(format!("expected plain or symmetric, got '{s}'")),
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Solver(e.to_string()))?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Gen => gen(&cfg, out),
        Command::Dict { kind } => dict(&cfg, out, kind),
        Command::Train { variant } => train(&cfg, out, variant),
        Command::Tune => tune(&cfg, out),
        Command::Eval { methods } => eval(&cfg, out, methods),
        Command::Sweep => sweep(&cfg, out),
        Command::Theory => theory(&cfg, out),
    }
}

fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for split in Split::ALL {
        let data = gen_dataset(&cfg.scene, cfg.split_size(split), cfg.split_seed(split))?;
        let path = out.join(split.file_name());
        write_dataset(&path, &data)?;
        println!("{}: {} samples, fingerprint {}", path.display(), data.count(), DatasetManifest::of(&data).fingerprint());
    }
    Ok(())
}

/// Loads a split and checks it was generated from the configured scene.
fn load_split(cfg: &ExperimentConfig, out: &Path, split: Split) -> Result<Dataset> {
    let path = out.join(split.file_name());
    let data = read_dataset(&path)?;
    if data.config != cfg.scene {
        return Err(Error::Config(format!("{} was generated for a different scene; rerun gen", path.display())));
    }
    Ok(data)
}

fn dict(cfg: &ExperimentConfig, out: &Path, kind: DictionarySource) -> Result<()> {
    let scene = &cfg.scene;
    let s_tilde = lift_dictionary(&gen_pilot(scene.pilot_kind, scene.pilot_len, scene.n_devices, scene.seed)?);
    let start = Instant::now();
    let dict = match kind {
        DictionarySource::Plain => solve_plain_dictionary(&s_tilde, cfg.dict.steps, cfg.dict.lr)?,
        DictionarySource::Symmetric => {
            let (factors, dict) = solve_symmetric_dictionary(&s_tilde, &cfg.dict)?;
            println!("coherence {:.6}, symmetry defect {:.3e}", mutual_coherence(&factors.d)?, symmetry_defect(&dict.b, &s_tilde));
            dict
        }
    };
    let path = out.join(dictionary_file(kind));
    save_dictionary(&path, &dict)?;
    println!(
        "{}: objective {:.6e}, constraint residual {:.3e}, {:.2} s",
        path.display(),
        dict.final_objective,
        dict.max_constraint_residual,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path, variant: Variant) -> Result<()> {
    let train = load_split(cfg, out, Split::Train)?;
    let val = load_split(cfg, out, Split::Val)?;
    let art = Artifacts::new(out);
    let dict = variant.dictionary_source().map(|src| art.dictionary(src).map(Arc::new)).transpose()?;
    let start = Instant::now();
    let outcome = train_layerwise(variant, dict, &train, &val, cfg.layers, &cfg.train)?;
    let path = out.join(network_file(variant));
    save_network(&path, &outcome.network, variant.dictionary_source().map(dictionary_file))?;
    let log = out.join(format!("train_log_{}.csv", variant.name().to_ascii_lowercase()));
    write_log_csv(&outcome.log, BufWriter::new(File::create(&log)?))?;
    println!(
        "{}: validation NMSE {:.3} dB (initial {:.3} dB), {:.1} s",
        path.display(),
        outcome.best_val_nmse_db,
        outcome.initial_val_nmse_db,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn tune(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let train = load_split(cfg, out, Split::Train)?;
    let dict = Arc::new(Artifacts::new(out).dictionary(DictionarySource::Symmetric)?);
    let ctx = AdaptiveContext::new(train.s_tilde(), dict, cfg.layers)?;
    let start = Instant::now();
    let found = grid_search(&train.systems, &ctx, &cfg.grid)?;
    let record = TunedRecord {
        hyper: found.best,
        train_nmse_db: found.nmse_db,
        layers: cfg.layers,
        fingerprint: DatasetFingerprint {
            seed: train.master_seed,
            snr_db: train.config.snr_db,
            active_prob: train.config.active_prob,
            digest: DatasetManifest::of(&train).fingerprint(),
        },
    };
    let path = out.join(TUNED_FILE);
    write_json(&path, &record)?;
    println!(
        "{}: c_theta {}, c_beta {}, c_eta {}, train NMSE {:.3} dB, {} of {} points pruned, {:.1} s",
        path.display(),
        found.best.c_theta,
        found.best.c_beta,
        found.best.c_eta,
        found.nmse_db,
        found.pruned,
        cfg.grid.points()?.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Iterative methods plus every learned method whose artifacts exist.
fn available_methods(art: &Artifacts) -> Vec<Method> {
    Method::ALL
        .into_iter()
        .filter(|m| match m.variant() {
            Some(v) => art.path(&network_file(v)).exists(),
            None if *m == Method::LpgmAt => art.path(TUNED_FILE).exists(),
            None => true,
        })
        .collect()
}

fn eval(cfg: &ExperimentConfig, out: &Path, methods: Vec<Method>) -> Result<()> {
    let test = load_split(cfg, out, Split::Test)?;
    let art = Artifacts::new(out);
    let methods = if methods.is_empty() { available_methods(&art) } else { methods };
    let iters = cfg.sweep.as_ref().map_or(cfg.iterative.max_iters, |s| s.iters_for_iterative);
    let rows = evaluate_all(&methods, &test, &art, &cfg.iterative, iters, cfg.layers)?;
    let path = out.join("eval.csv");
    write_eval_csv(&rows, BufWriter::new(File::create(&path)?))?;
    for r in &rows {
        println!(
            "{:<10} depth {:>3}  NMSE {:>9.3} dB  {:>8.4} ms/sample  miss {:.4}  false alarm {:.4}",
            r.method.name(),
            r.depth,
            r.nmse_db,
            r.runtime_ms_per_sample,
            r.miss_rate,
            r.false_alarm_rate
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config("the configuration has no [sweep] section".into()))?;
    let settings = SweepSettings { test_count: cfg.sizes.test, test_seed: cfg.split_seed(Split::Test), iterative: cfg.iterative.clone() };
    let rows = run_sweep(spec, &cfg.scene, &Artifacts::new(out), &settings)?;
    let path = out.join(format!("sweep_{}.csv", spec.axis.name()));
    write_sweep_csv(&rows, BufWriter::new(File::create(&path)?))?;
    println!("{}: {} rows", path.display(), rows.len());
    Ok(())
}

fn theory(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let th = &cfg.theory;
    let scene = &th.scene;
    let s_tilde = Arc::new(lift_dictionary(&gen_pilot(scene.pilot_kind, scene.pilot_len, scene.n_devices, scene.seed)?));
    let (factors, dict) = solve_symmetric_dictionary(&s_tilde, &th.dict)?;
    let mut cls = SignalClass { mu_lo: th.mu_lo, mu_hi: th.mu_hi, s: th.s, eps: 0.0 };
    let tc = compute_constants(&factors.d, &dict.b, &cls)?;
    cls.eps = th.eps.unwrap_or(0.5 * tc.eps_max);
    let layers = tc.k0 + th.extra_layers;
    let report = certify(&s_tilde, &factors.d, &dict, &cls, scene.n_antennas, layers, th.instances, sample_seed(cfg.seed, 4))?;
    let path = out.join("theory_report.json");
    write_json(&path, &report)?;
    let contained = report.instances.iter().filter(|i| i.contained).count();
    let bounded = report.instances.iter().filter(|i| i.bounded).count();
    println!(
        "coherence {:.5}, contraction {:.5}, beta_hat {:.5}, C0 {:.4}, K0 {}, eps {:.4e} (max {:.4e})",
        tc.phi, tc.c_phis, tc.beta_hat, tc.c0, tc.k0, cls.eps, tc.eps_max
    );
    println!("support contained: {} ({contained}/{})", report.all_contained(), report.instances.len());
    println!("error bounded: {} ({bounded}/{})", report.all_bounded(), report.instances.len());
    println!("wrote {}", path.display());
    Ok(())
}
