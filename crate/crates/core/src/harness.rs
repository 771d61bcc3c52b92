//! Robustness evaluation campaigns and plot-data exports.
//!
//! Examples are attacked independently in parallel; example `i` uses the
//! seed `derive_seed(config.seed, [i])`, so every report is a function of the
//! inputs alone and not of the worker count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_with_restarts, AttackConfig, AttackOutcome, Init, Method};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
use crate::model::Classifier;
use crate::rng::derive_seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Short attack name such as `acbi-pgd-4-25`.
pub fn attack_id(method: Method, init: Init, config: &AttackConfig) -> String {
    let budget = match init {
        Init::Acbi => config.total_budget(),
        _ => config.attack_steps(init),
    };
    format!("{init}-{method}-{}-{budget}", config.restarts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub index: usize,
    pub label: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
    pub clean_correct: bool,
    pub success: bool,
    pub iterations_to_success: Option<usize>,
    pub total_iterations: Option<usize>,
    pub best_restart: Option<usize>,
    pub restarts_run: usize,
    pub gradient_evals: usize,
    pub linf_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub model_id: String,
    pub dataset_id: String,
    pub attack_id: String,
    pub method: Method,
    pub init: Init,
    pub seed: u64,
    pub examples: usize,
    pub clean_correct: usize,
    pub successes: usize,
    pub failures: usize,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    /// Binomial standard error of `robust_accuracy`.
    pub robust_accuracy_stderr: f64,
    /// Over successful attacks on correctly classified inputs, best restart.
    pub mean_iterations_to_success: Option<f64>,
    pub median_iterations_to_success: Option<f64>,
    pub mean_total_iterations: Option<f64>,
    pub config: AttackConfig,
    pub outcomes: Vec<ExampleOutcome>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) })
}

/// Attacks every example of `data` and aggregates the outcomes.
pub fn evaluate(
    c: &Classifier,
    bs: &BoundarySet,
    data: &Dataset,
    config: &AttackConfig,
    method: Method,
    init: Init,
    model_id: &str,
) -> Result<EvalReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    if !data.is_attackable() {
        return Err(Error::Dataset(format!(
            "dataset {} has {} class(es); attacks need at least two",
            data.id,
            data.num_classes()
        )));
    }
    let outcomes: Vec<(AttackOutcome, usize, usize)> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut cfg = config.clone();
            cfg.seed = derive_seed(config.seed, &[i as u64]);
            let x = data.image(i);
            let out = run_with_restarts(c, bs, x, data.label(i), &cfg, method, init)?;
            let clean = c.predict(x)?;
            let adv = c.predict(&out.adversarial)?;
            Ok((out, clean, adv))
        })
        .collect::<Result<_>>()?;

    let records: Vec<ExampleOutcome> = outcomes
        .iter()
        .enumerate()
        .map(|(i, (o, clean, adv))| ExampleOutcome {
            index: i,
            label: data.label(i),
            clean_prediction: *clean,
            adversarial_prediction: *adv,
            clean_correct: o.clean_correct,
            success: o.success,
            iterations_to_success: o.iterations_to_success(),
            total_iterations: o.total_iterations(),
            best_restart: o.best_restart,
            restarts_run: o.restarts.len(),
            gradient_evals: o.restarts.iter().map(|r| r.gradient_evals).sum(),
            linf_distance: o
                .adversarial
                .iter()
                .zip(data.image(i))
                .fold(0.0, |m, (a, b)| m.max((a - b).abs())),
        })
        .collect();

    let n = records.len();
    let clean_correct = records.iter().filter(|r| r.clean_correct).count();
    let successes = records.iter().filter(|r| r.success).count();
    let iters: Vec<f64> = records
        .iter()
        .filter_map(|r| r.iterations_to_success.map(|t| t as f64))
        .collect();
    let totals: Vec<f64> = records.iter().filter_map(|r| r.total_iterations.map(|t| t as f64)).collect();
    let robust = (n - successes) as f64 / n as f64;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        toolkit_version: TOOLKIT_VERSION.to_string(),
        model_id: model_id.to_string(),
        dataset_id: data.id.clone(),
        attack_id: attack_id(method, init, config),
        method,
        init,
        seed: config.seed,
        examples: n,
        clean_correct,
        successes,
        failures: n - successes,
        clean_accuracy: clean_correct as f64 / n as f64,
        robust_accuracy: robust,
        robust_accuracy_stderr: (robust * (1.0 - robust) / n as f64).sqrt(),
        mean_iterations_to_success: mean(&iters),
        median_iterations_to_success: median(&iters),
        mean_total_iterations: mean(&totals),
        config: config.clone(),
        outcomes: records,
    })
}

/// Mean and sample standard deviation of a per-seed metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            values,
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_init: usize,
    pub n_attack: usize,
    pub seed: u64,
    pub examples: usize,
    pub successes: usize,
    pub robust_accuracy: f64,
    pub mean_iterations_to_success: Option<f64>,
    pub mean_total_iterations: Option<f64>,
}

/// Iterations-to-success as a function of the number of boundary-descent
/// steps, at a fixed total budget per restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub total_budget: usize,
    pub method: Method,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Seed-averaged mean iterations-to-success for each `n_init`, in sweep order.
    pub fn series(&self) -> Vec<(usize, SeedSummary)> {
        let mut order: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.n_init) {
                order.push(r.n_init);
            }
        }
        order
            .into_iter()
            .map(|n| {
                let vals = self
                    .rows
                    .iter()
                    .filter(|r| r.n_init == n)
                    .filter_map(|r| r.mean_iterations_to_success)
                    .collect();
                (n, SeedSummary::of(vals))
            })
            .collect()
    }

    /// One row per `(n_init, seed)` and one `mean` row per `n_init`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            out,
            "n_init,n_attack,total_budget,seed,examples,successes,robust_accuracy,mean_iterations_to_success,mean_total_iterations"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.n_init,
                r.n_attack,
                self.total_budget,
                r.seed,
                r.examples,
                r.successes,
                r.robust_accuracy,
                opt(r.mean_iterations_to_success),
                opt(r.mean_total_iterations)
            )?;
        }
        for (n, s) in self.series() {
            let robust = SeedSummary::of(
                self.rows
                    .iter()
                    .filter(|r| r.n_init == n)
                    .map(|r| r.robust_accuracy)
                    .collect(),
            );
            writeln!(
                out,
                "{n},{},{},mean,,,{},{},",
                self.total_budget - n,
                self.total_budget,
                robust.mean,
                s.mean
            )?;
        }
        Ok(())
    }
}

/// Runs the boundary-descent attack for every `n_init` in `n_inits` with
/// `n_attack = total - n_init`, once per seed.
pub fn sweep_n_init(
    c: &Classifier,
    bs: &BoundarySet,
    data: &Dataset,
    base: &AttackConfig,
    method: Method,
    n_inits: &[usize],
    seeds: &[u64],
) -> Result<SweepTable> {
    let total = base.total_budget();
    if let Some(&bad) = n_inits.iter().find(|&&n| n > total) {
        return Err(Error::InvalidArgument(format!(
            "n_init {bad} exceeds the total budget {total}"
        )));
    }
    if seeds.is_empty() || n_inits.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one n_init and one seed".into()));
    }
    let mut rows = Vec::with_capacity(n_inits.len() * seeds.len());
    for &n in n_inits {
        for &seed in seeds {
            let cfg = AttackConfig {
                n_init: n,
                n_attack: total - n,
                seed,
                ..base.clone()
            };
            let report = evaluate(c, bs, data, &cfg, method, Init::Acbi, "")?;
            rows.push(SweepRow {
                n_init: n,
                n_attack: total - n,
                seed,
                examples: report.examples,
                successes: report.successes,
                robust_accuracy: report.robust_accuracy,
                mean_iterations_to_success: report.mean_iterations_to_success,
                mean_total_iterations: report.mean_total_iterations,
            });
        }
    }
    Ok(SweepTable {
        total_budget: total,
        method,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Original,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprRecord {
    pub record_id: usize,
    pub example: usize,
    pub kind: RecordKind,
    /// For adversarial records, the `record_id` of the clean original.
    pub original_record: Option<usize>,
    pub true_label: usize,
    pub predicted_label: usize,
    pub success: bool,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub pair_i: usize,
    pub pair_j: usize,
    pub weight: Vec<f64>,
    pub bias: f64,
}

/// Representation vectors of clean and adversarial examples plus the
/// boundary lines, ready for plotting when `repr_dim == 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprExport {
    pub repr_dim: usize,
    pub records: Vec<ReprRecord>,
    pub boundaries: Vec<BoundaryRow>,
}

/// Pairs each example `i` of `data` with `outcomes[i]`.
pub fn export_representation_space(
    c: &Classifier,
    bs: &BoundarySet,
    data: &Dataset,
    outcomes: &[AttackOutcome],
) -> Result<ReprExport> {
    if outcomes.len() != data.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outcomes for {} examples",
            outcomes.len(),
            data.len()
        )));
    }
    let mut records = Vec::with_capacity(2 * data.len());
    for (i, o) in outcomes.iter().enumerate() {
        let y = data.label(i);
        let v = c.representation(data.image(i))?;
        let pred = crate::loss::argmax(&c.logits_from_representation(&v)?);
        let orig_id = records.len();
        records.push(ReprRecord {
            record_id: orig_id,
            example: i,
            kind: RecordKind::Original,
            original_record: None,
            true_label: y,
            predicted_label: pred,
            success: false,
            v,
        });
        let va = c.representation(&o.adversarial)?;
        let pred_adv = crate::loss::argmax(&c.logits_from_representation(&va)?);
        records.push(ReprRecord {
            record_id: orig_id + 1,
            example: i,
            kind: RecordKind::Adversarial,
            original_record: Some(orig_id),
            true_label: y,
            predicted_label: pred_adv,
            success: o.success,
            v: va,
        });
    }
    let n = bs.repr_dim();
    let boundaries = bs
        .pairs()
        .iter()
        .enumerate()
        .map(|(p, &(i, j))| BoundaryRow {
            pair_i: i,
            pair_j: j,
            weight: bs.weight_matrix()[p * n..(p + 1) * n].to_vec(),
            bias: bs.bias_vector()[p],
        })
        .collect();
    Ok(ReprExport {
        repr_dim: n,
        records,
        boundaries,
    })
}

impl ReprExport {
    /// Records whose success flag disagrees with the region of their vector.
    pub fn predicate_violations(&self, bs: &BoundarySet) -> Result<Vec<usize>> {
        let mut bad = Vec::new();
        for r in self.records.iter().filter(|r| r.kind == RecordKind::Adversarial && r.success) {
            if bs.region_of(&r.v, DEFAULT_TIE_TOL)? == RegionLabel::Class(r.true_label) {
                bad.push(r.record_id);
            }
        }
        Ok(bad)
    }

    /// Point records as CSV; each `header` line is written first as a `#` comment.
    pub fn write_points_csv(&self, mut out: impl Write, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        let cols: Vec<String> = (0..self.repr_dim).map(|c| format!("v_{c}")).collect();
        writeln!(
            out,
            "record_id,example,kind,original_record,true_label,predicted_label,success,{}",
            cols.join(",")
        )?;
        for r in &self.records {
            let kind = match r.kind {
                RecordKind::Original => "original",
                RecordKind::Adversarial => "adversarial",
            };
            let orig = r.original_record.map(|o| o.to_string()).unwrap_or_default();
            let v: Vec<String> = r.v.iter().map(|x| x.to_string()).collect();
            writeln!(
                out,
                "{},{},{kind},{orig},{},{},{},{}",
                r.record_id,
                r.example,
                r.true_label,
                r.predicted_label,
                r.success,
                v.join(",")
            )?;
        }
        Ok(())
    }

    /// Boundary rows as CSV: `pair_i, pair_j, w_0 .. w_{N-1}, bias`.
    pub fn write_boundaries_csv(&self, mut out: impl Write, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(out, "# {line}")?;
        }
        let cols: Vec<String> = (0..self.repr_dim).map(|c| format!("w_{c}")).collect();
        writeln!(out, "pair_i,pair_j,{},bias", cols.join(","))?;
        for b in &self.boundaries {
            let w: Vec<String> = b.weight.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{},{},{},{}", b.pair_i, b.pair_j, w.join(","), b.bias)?;
        }
        Ok(())
    }
}
