//! `acbi`: train decoupled classifiers, attack them, sweep boundary-descent
//! steps, export representation-space plot data and run the self-checks.
//!
//! Exit codes: 0 success, 1 configuration error, 2 invariant failure,
//! 3 I/O error.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acbi_core::attacks::{run_with_restarts, AttackConfig, AttackOutcome, Init, Method};
use acbi_core::data::{load_idx, Dataset};
use acbi_core::geometry::BoundarySet;
use acbi_core::harness::{evaluate, export_representation_space, sweep_n_init, TOOLKIT_VERSION};
use acbi_core::model::{self, adv_train, train, Architecture, Classifier};
use acbi_core::rng::derive_seed;
use acbi_core::verify;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "acbi", version, about = "Boundary-initialized adversarial attacks on decoupled classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Never changes results.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured classifier and write a checkpoint.
    Train(Common),
    /// Attack sampled test examples and write an evaluation report.
    Attack(Common),
    /// Mean iterations-to-success for each number of initialization steps.
    Sweep(Common),
    /// Export clean and BIM representation vectors with the boundary lines.
    ExportRepr(Common),
    /// Run the invariant suite; exits 2 if any check fails.
    Verify(Common),
    /// Print the fully resolved configuration as TOML.
    ShowConfig(Common),
}

enum Failure {
    Config(anyhow::Error),
    Invariant(String),
    Io(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Invariant(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl From<acbi_core::Error> for Failure {
    fn from(e: acbi_core::Error) -> Self {
        use acbi_core::Error as E;
        match e {
            E::Io { .. } | E::Idx { .. } | E::Checkpoint(_) | E::UnknownLayerKind(_) => Failure::Io(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Failure {
    move |e| Failure::Io(anyhow::Error::new(e).context(context))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Provenance lines placed at the top of every CSV output.
fn csv_header(cfg: &RunConfig, command: &str) -> Vec<String> {
    vec![
        format!("acbi {TOOLKIT_VERSION} {command}"),
        format!("seed {}", cfg.seed),
        format!("config {}", cfg.to_json()),
    ]
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    toolkit_version: &'a str,
    command: &'a str,
    seed: u64,
    config: serde_json::Value,
    #[serde(flatten)]
    body: T,
}

fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, command: &str, body: T) -> CmdResult {
    let env = Envelope {
        toolkit_version: TOOLKIT_VERSION,
        command,
        seed: cfg.seed,
        config: cfg.to_json(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Io(e.into()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn load_split(cfg: &RunConfig, images: &str, labels: &str) -> Result<Dataset, Failure> {
    let d = load_idx(cfg.data.dir.join(images), cfg.data.dir.join(labels))?;
    if cfg.data.classes.is_empty() {
        Ok(d)
    } else {
        Ok(d.filter_classes(&cfg.data.classes)?)
    }
}

fn test_sample(cfg: &RunConfig, n: Option<usize>) -> Result<Dataset, Failure> {
    let test = load_split(cfg, &cfg.data.test_images, &cfg.data.test_labels)?;
    match n {
        Some(n) if n < test.len() => Ok(test.sample(n, cfg.sample_seed())?),
        _ => Ok(test),
    }
}

fn load_model(cfg: &RunConfig) -> Result<(Classifier, BoundarySet, String), Failure> {
    let path = cfg.checkpoint_path();
    let c = model::load(&path)?;
    let bs = BoundarySet::from_classifier(&c)?;
    bs.ensure_nondegenerate()?;
    let id = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    Ok((c, bs, id))
}

fn accuracy(c: &Classifier, d: &Dataset) -> Result<f64, Failure> {
    let hits: Vec<bool> = (0..d.len())
        .into_par_iter()
        .map(|i| c.predict(d.image(i)).map(|p| p == d.label(i)))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / d.len().max(1) as f64)
}

#[derive(Serialize)]
struct TrainSummary {
    checkpoint: String,
    train_examples: usize,
    test_examples: usize,
    train_accuracy: f64,
    test_accuracy: f64,
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let train_set = load_split(cfg, &cfg.data.train_images, &cfg.data.train_labels)?;
    let test_set = load_split(cfg, &cfg.data.test_images, &cfg.data.test_labels)?;
    let arch = Architecture::SmallCnn {
        input_shape: train_set.image_shape().to_vec(),
        repr_dim: cfg.model.repr_dim,
        num_classes: train_set.num_classes(),
    };
    let init = Classifier::from_architecture(&arch, cfg.init_seed())?;
    let mut trained = if cfg.model.adversarial {
        let ac = adversarial_training_attack(cfg);
        adv_train(&init, &train_set, &ac, &cfg.train)?
    } else {
        train(&init, &train_set, &cfg.train)?
    };
    trained.meta.dataset_id = Some(train_set.id.clone());
    let path = cfg.checkpoint_path();
    let bytes = model::checkpoint_bytes(&trained)?;
    write_file(&path, &bytes)?;
    let summary = TrainSummary {
        checkpoint: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        train_examples: train_set.len(),
        test_examples: test_set.len(),
        train_accuracy: accuracy(&trained, &train_set)?,
        test_accuracy: accuracy(&trained, &test_set)?,
    };
    println!(
        "train accuracy {:.4}, test accuracy {:.4}",
        summary.train_accuracy, summary.test_accuracy
    );
    write_json(&cfg.out.join("train.json"), cfg, "train", summary)
}

/// PGD settings used to build adversarial training batches.
fn adversarial_training_attack(cfg: &RunConfig) -> AttackConfig {
    AttackConfig {
        n_init: 0,
        n_attack: cfg.model.adversarial_steps,
        restarts: 1,
        ..cfg.attack.clone()
    }
}

fn cmd_attack(cfg: &RunConfig) -> CmdResult {
    let (c, bs, id) = load_model(cfg)?;
    let data = test_sample(cfg, cfg.data.test_samples)?;
    let report = evaluate(&c, &bs, &data, &cfg.attack, cfg.method, cfg.init, &id)?;
    println!(
        "{}: clean accuracy {:.4}, robust accuracy {:.4} (+/- {:.4}), mean iterations to success {}",
        report.attack_id,
        report.clean_accuracy,
        report.robust_accuracy,
        report.robust_accuracy_stderr,
        report
            .mean_iterations_to_success
            .map_or("n/a".to_string(), |m| format!("{m:.3}"))
    );
    #[derive(Serialize)]
    struct Body {
        report: acbi_core::EvalReport,
    }
    write_json(&cfg.out.join("report.json"), cfg, "attack", Body { report })
}

fn cmd_sweep(cfg: &RunConfig) -> CmdResult {
    let (c, bs, _) = load_model(cfg)?;
    let data = test_sample(cfg, cfg.data.test_samples)?;
    let table = sweep_n_init(&c, &bs, &data, &cfg.attack, cfg.method, &cfg.sweep.n_init, &cfg.sweep.seeds)?;
    for (n, s) in table.series() {
        println!("n_init {n}: mean iterations to success {:.3} (sd {:.3})", s.mean, s.std);
    }
    let mut buf = Vec::new();
    for line in csv_header(cfg, "sweep") {
        writeln!(buf, "# {line}").expect("in-memory write");
    }
    table.write_csv(&mut buf).expect("in-memory write");
    write_file(&cfg.out.join("sweep.csv"), &buf)
}

fn cmd_export_repr(cfg: &RunConfig) -> CmdResult {
    let (c, bs, _) = load_model(cfg)?;
    let data = test_sample(cfg, Some(cfg.export.examples))?;
    let bim = AttackConfig {
        restarts: 1,
        n_init: 0,
        n_attack: cfg.export.steps,
        budget_matching: false,
        ..cfg.attack.clone()
    };
    let outcomes: Vec<AttackOutcome> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let ac = AttackConfig {
                seed: derive_seed(bim.seed, &[i as u64]),
                ..bim.clone()
            };
            run_with_restarts(&c, &bs, data.image(i), data.label(i), &ac, Method::Pgd, Init::None)
        })
        .collect::<Result<_, _>>()?;
    let export = export_representation_space(&c, &bs, &data, &outcomes)?;
    let violations = export.predicate_violations(&bs)?;
    if !violations.is_empty() {
        return Err(Failure::Invariant(format!(
            "{} successful adversarial records remain in their true region",
            violations.len()
        )));
    }
    let header = csv_header(cfg, "export-repr");
    let mut points = Vec::new();
    export.write_points_csv(&mut points, &header).expect("in-memory write");
    let mut lines = Vec::new();
    export.write_boundaries_csv(&mut lines, &header).expect("in-memory write");
    write_file(&cfg.out.join("repr_points.csv"), &points)?;
    write_file(&cfg.out.join("repr_boundaries.csv"), &lines)?;
    let successes = outcomes.iter().filter(|o| o.success).count();
    println!(
        "{} examples, {} BIM-{} successes, {} boundary rows",
        data.len(),
        successes,
        cfg.export.steps,
        export.boundaries.len()
    );
    #[derive(Serialize)]
    struct Body {
        export: acbi_core::ReprExport,
    }
    write_json(&cfg.out.join("repr.json"), cfg, "export-repr", Body { export })
}

fn cmd_verify(cfg: &RunConfig) -> CmdResult {
    let checks = verify::run_all(cfg.seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    #[derive(Serialize)]
    struct Body {
        checks: Vec<verify::CheckResult>,
    }
    let total = checks.len();
    write_json(&cfg.out.join("verify.json"), cfg, "verify", Body { checks })?;
    if failed > 0 {
        return Err(Failure::Invariant(format!("{failed} of {total} checks failed")));
    }
    println!("all {total} checks passed");
    Ok(())
}

fn cmd_show_config(cfg: &RunConfig) -> CmdResult {
    let text = toml::to_string(cfg).map_err(|e| Failure::Config(e.into()))?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let (common, f): (&Common, fn(&RunConfig) -> CmdResult) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Attack(c) => (c, cmd_attack),
        Command::Sweep(c) => (c, cmd_sweep),
        Command::ExportRepr(c) => (c, cmd_export_repr),
        Command::Verify(c) => (c, cmd_verify),
        Command::ShowConfig(c) => (c, cmd_show_config),
    };
    let overrides = Overrides {
        seed: common.seed,
        workers: common.workers,
        out: common.out.clone(),
    };
    let cfg = RunConfig::load(common.config.as_deref(), &overrides).map_err(|e| {
        if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some()) {
            Failure::Io(e)
        } else {
            Failure::Config(e)
        }
    })?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Failure::Config(e.into()))?;
    pool.install(|| f(&cfg))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("configuration error: {e:#}"),
                Failure::Invariant(m) => eprintln!("invariant failure: {m}"),
                Failure::Io(e) => eprintln!("i/o error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
