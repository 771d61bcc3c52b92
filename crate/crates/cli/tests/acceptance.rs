//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criteria 6, 8 and 9 drive the `acbi` binary from the workspace root with
//! the shipped desk configs; 7 and 8 attack the models it trains in-process.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use acbi_core::data::load_idx;
use acbi_core::verify::{self, CheckResult};
use acbi_core::{evaluate, model, sweep_n_init, AttackConfig, BoundarySet, Classifier, Dataset, Init, Method};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Display) -> Self {
        Self {
            passed,
            detail: detail.to_string(),
        }
    }

    fn error(e: impl Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

fn acbi(args: &[&str], config: &str, out: &Path, workers: usize) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_acbi"))
        .args(args)
        .arg("--config")
        .arg(root().join(config))
        .arg("--out")
        .arg(out)
        .arg("--workers")
        .arg(workers.to_string())
        .current_dir(root())
        .output()
        .map_err(|e| format!("spawning acbi: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "acbi {} exited with {}: {}",
            args.join(" "),
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    // progress lines naming the output directory are not part of any result
    let stdout = String::from_utf8_lossy(&output.stdout).replace(&*out.to_string_lossy(), "<out>");
    Ok(stdout)
}

fn checks_verdict(checks: Result<Vec<CheckResult>, acbi_core::Error>, limit: Option<Duration>, took: Duration) -> Verdict {
    let checks = match checks {
        Ok(c) => c,
        Err(e) => return Verdict::error(e),
    };
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let in_time = limit.is_none_or(|l| took <= l);
    let worst = checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}", c.name, c.worst, c.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    let mut detail = format!("{} checks, {:.1}s; {worst}", checks.len(), took.as_secs_f64());
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join("; ")));
    }
    if !in_time {
        detail.push_str("; over the time limit");
    }
    Verdict::new(failed.is_empty() && in_time, detail)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn criterion_1() -> Verdict {
    let (checks, took) = timed(|| {
        let mut all = verify::check_layer_gradients(100, 101)?;
        all.extend(verify::check_scalar_gradients(100, 102)?);
        Ok(all)
    });
    checks_verdict(checks, Some(Duration::from_secs(60)), took)
}

fn criterion_2() -> Verdict {
    let (checks, took) = timed(|| verify::check_partition(10_000, 201));
    checks_verdict(checks, None, took)
}

fn criterion_3() -> Verdict {
    let (checks, took) = timed(|| verify::check_signed_distance(1000, 301));
    checks_verdict(checks, None, took)
}

fn criterion_4() -> Verdict {
    let (checks, took) = timed(|| verify::check_projection(500, 401));
    checks_verdict(checks, None, took)
}

fn criterion_5() -> Verdict {
    let (checks, took) = timed(|| verify::check_linear_descent(50, 501));
    checks_verdict(checks, None, took)
}

/// Data rows of a CSV written with `#` comment headers.
fn csv_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().ok_or("empty csv")?.split(',').collect();
    Ok(lines
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect())
}

fn number(row: &BTreeMap<String, String>, key: &str) -> Result<f64, String> {
    row.get(key)
        .ok_or_else(|| format!("missing column {key}"))?
        .parse()
        .map_err(|e| format!("column {key}: {e}"))
}

/// Successful adversarial records whose vector still satisfies every
/// pairwise inequality of its true class, judged from the exported rows.
fn exported_predicate_violations(points: &Path, boundaries: &Path) -> Result<(usize, usize, usize), String> {
    let bounds = csv_rows(boundaries)?;
    let repr_dim = bounds.first().map_or(0, |r| r.keys().filter(|k| k.starts_with("w_")).count());
    let mut planes = Vec::new();
    for row in &bounds {
        let w: Vec<f64> = (0..repr_dim).map(|c| number(row, &format!("w_{c}"))).collect::<Result<_, _>>()?;
        planes.push((number(row, "pair_i")? as usize, number(row, "pair_j")? as usize, w, number(row, "bias")?));
    }
    let (mut successes, mut violations) = (0, 0);
    for row in csv_rows(points)? {
        if row.get("kind").map(String::as_str) != Some("adversarial") || row.get("success").map(String::as_str) != Some("true") {
            continue;
        }
        successes += 1;
        let y = number(&row, "true_label")? as usize;
        let v: Vec<f64> = (0..repr_dim).map(|c| number(&row, &format!("v_{c}"))).collect::<Result<_, _>>()?;
        let still_inside = planes.iter().filter(|(i, j, _, _)| *i == y || *j == y).all(|(i, _, w, b)| {
            let f = w.iter().zip(&v).map(|(a, c)| a * c).sum::<f64>() + b;
            let towards_y = if *i == y { f } else { -f };
            towards_y > acbi_core::DEFAULT_TIE_TOL
        });
        if still_inside {
            violations += 1;
        }
    }
    Ok((planes.len(), successes, violations))
}

fn criterion_6(work: &Path) -> Verdict {
    let out = work.join("plain");
    let (run, took) = timed(|| -> Result<String, String> {
        let trained = acbi(&["train"], "configs/digits.toml", &out, 0)?;
        let exported = acbi(&["export-repr"], "configs/digits.toml", &out, 0)?;
        let summary: Vec<&str> = trained.lines().chain(exported.lines()).filter(|l| !l.starts_with("wrote ")).collect();
        Ok(summary.join("; "))
    });
    let summary = match run {
        Ok(s) => s,
        Err(e) => return Verdict::error(e),
    };
    match exported_predicate_violations(&out.join("repr_points.csv"), &out.join("repr_boundaries.csv")) {
        Ok((rows, successes, violations)) => Verdict::new(
            rows == 6 && violations == 0 && successes > 0 && took <= Duration::from_secs(600),
            format!(
                "{rows} boundary rows, {successes} successes, {violations} predicate violations, {:.1}s; {summary}",
                took.as_secs_f64()
            ),
        ),
        Err(e) => Verdict::error(e),
    }
}

/// The `[attack]` table of a shipped config.
fn desk_attack(config: &str) -> Result<AttackConfig, String> {
    let text = std::fs::read_to_string(root().join(config)).map_err(|e| e.to_string())?;
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    let attack = table.get("attack").cloned().ok_or("no [attack] table")?;
    attack.try_into().map_err(|e: toml::de::Error| e.to_string())
}

fn test_split() -> Result<Dataset, String> {
    let dir = root().join("data/mnist-0123");
    let d = load_idx(dir.join("t10k-images-idx3-ubyte.gz"), dir.join("t10k-labels-idx1-ubyte.gz")).map_err(|e| e.to_string())?;
    d.filter_classes(&[0, 1, 2, 3]).map_err(|e| e.to_string())
}

fn load(path: &Path) -> Result<(Classifier, BoundarySet), String> {
    let c = model::load(path).map_err(|e| e.to_string())?;
    let bs = BoundarySet::from_classifier(&c).map_err(|e| e.to_string())?;
    Ok((c, bs))
}

fn criterion_7(work: &Path) -> Verdict {
    let run = || -> Result<Verdict, String> {
        let (c, bs) = load(&work.join("plain/model.ckpt"))?;
        let data = test_split()?;
        let base = desk_attack("configs/digits.toml")?;
        let n_inits: Vec<usize> = (0..=5).collect();
        let table = sweep_n_init(&c, &bs, &data, &base, Method::Pgd, &n_inits, &SEEDS).map_err(|e| e.to_string())?;
        let series = table.series();
        let band = 0.05 * series[0].1.mean;
        let rising: Vec<usize> = series.windows(2).filter(|w| w[1].1.mean > w[0].1.mean + band).map(|w| w[1].0).collect();
        let means = series.iter().map(|(n, s)| format!("{n}:{:.3}", s.mean)).collect::<Vec<_>>().join(" ");
        Ok(Verdict::new(
            data.len() == 1000 && rising.is_empty(),
            format!("{} examples, band {band:.3}, mean iterations {means}", data.len()),
        ))
    };
    run().unwrap_or_else(Verdict::error)
}

fn mean_robust_accuracy(
    c: &Classifier,
    bs: &BoundarySet,
    data: &Dataset,
    base: &AttackConfig,
    method: Method,
    init: Init,
) -> Result<f64, String> {
    let mut total = 0.0;
    for seed in SEEDS {
        let config = AttackConfig { seed, ..base.clone() };
        total += evaluate(c, bs, data, &config, method, init, "acceptance").map_err(|e| e.to_string())?.robust_accuracy;
    }
    Ok(total / SEEDS.len() as f64)
}

fn criterion_8(work: &Path) -> Verdict {
    let run = || -> Result<Verdict, String> {
        let adv = work.join("adv");
        acbi(&["train"], "configs/digits-adv.toml", &adv, 0)?;
        let data = test_split()?;
        let base = desk_attack("configs/digits.toml")?;
        let mut passed = true;
        let mut parts = Vec::new();
        for (name, path) in [("plain", work.join("plain/model.ckpt")), ("adv", adv.join("model.ckpt"))] {
            let (c, bs) = load(&path)?;
            for (method, n_init) in [(Method::Pgd, 5), (Method::Fab, 1)] {
                let config = AttackConfig {
                    n_init,
                    n_attack: base.total_budget() - n_init,
                    ..base.clone()
                };
                let ri = mean_robust_accuracy(&c, &bs, &data, &config, method, Init::Ri)?;
                let acbi = mean_robust_accuracy(&c, &bs, &data, &config, method, Init::Acbi)?;
                passed &= acbi <= ri + 0.005;
                parts.push(format!(
                    "{name}/{method}: acbi {:.2}% vs ri {:.2}% ({:+.2} pp)",
                    100.0 * acbi,
                    100.0 * ri,
                    100.0 * (acbi - ri)
                ));
            }
        }
        Ok(Verdict::new(passed, parts.join(", ")))
    };
    run().unwrap_or_else(Verdict::error)
}

/// Every file under `dir`, keyed by name.
fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        out.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned(), bytes);
    }
    Ok(out)
}

fn criterion_9(work: &Path) -> Verdict {
    let run = || -> Result<Verdict, String> {
        let text = std::fs::read_to_string(root().join("configs/digits-adv.toml")).map_err(|e| e.to_string())?;
        let small = text
            .replace("test_samples = 1000", "test_samples = 60")
            .replace("epochs = 5", "epochs = 1")
            .replace("n_init = [0, 1, 2, 3, 4, 5]", "n_init = [0, 3]")
            .replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0, 1]")
            .replace("examples = 200", "examples = 40");
        let config = work.join("determinism.toml");
        std::fs::write(&config, small).map_err(|e| e.to_string())?;
        let config = config.to_string_lossy().into_owned();
        let commands = ["train", "attack", "sweep", "export-repr", "verify", "show-config"];
        let mut runs = Vec::new();
        for workers in [1, 3] {
            let out = work.join(format!("determinism-{workers}"));
            let mut stdout = String::new();
            for cmd in commands {
                stdout.push_str(&acbi(&[cmd], &config, &out, workers)?);
            }
            runs.push((files(&out)?, stdout));
        }
        let (a, b) = (&runs[0], &runs[1]);
        let differing: Vec<&String> = a.0.keys().chain(b.0.keys()).filter(|k| a.0.get(*k) != b.0.get(*k)).collect();
        let stdout_same = a.1 == b.1;
        Ok(Verdict::new(
            differing.is_empty() && stdout_same && a.0.len() >= 7,
            format!(
                "{} commands, {} files compared across 1 and 3 workers; differing: {differing:?}; stdout identical: {stdout_same}",
                commands.len(),
                a.0.len()
            ),
        ))
    };
    run().unwrap_or_else(Verdict::error)
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("scratch directory");
    let work = work.path();
    let criteria: [(&str, &dyn Fn() -> Verdict); 9] = [
        ("gradient fidelity", &criterion_1),
        ("boundary partition", &criterion_2),
        ("signed distance", &criterion_3),
        ("projection oracle", &criterion_4),
        ("linear boundary descent", &criterion_5),
        ("representation export", &|| criterion_6(work)),
        ("iterations fall with boundary initialization", &|| criterion_7(work)),
        ("robust accuracy at equal budget", &|| criterion_8(work)),
        ("determinism across worker counts", &|| criterion_9(work)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (verdict, took) = timed(check);
        if !verdict.passed {
            failures += 1;
        }
        println!(
            "{} criterion {} {name} [{:.0}s]: {}",
            if verdict.passed { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64(),
            verdict.detail
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
