//! Untargeted L-infinity evasion attacks and the restart driver.
//!
//! Every iterate of every method stays in the per-coordinate box
//! `[max(0, x - eps), min(1, x + eps)]` around the clean input `x`.

mod acbi;
mod fab;
mod pgd;
mod projection;

pub use acbi::acbi_init;
pub use fab::fab_attack;
pub use pgd::{pgd_attack, pgd_perturb};
pub use projection::{project_hyperplane_box, Projection};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundarySet;
use crate::loss::argmax;
use crate::model::Classifier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pgd,
    Fab,
}

/// How each restart chooses the point handed to the main attack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    /// Uniform random start in the ball.
    Ri,
    /// Random start followed by up to `n_init` boundary-descent steps.
    Acbi,
    /// The clean input itself (PGD from here is BIM).
    None,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Pgd => "pgd",
            Method::Fab => "fab",
        })
    }
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Init::Ri => "ri",
            Init::Acbi => "acbi",
            Init::None => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FabParams {
    /// Extrapolation factor.
    pub eta: f64,
    pub beta_max: f64,
    /// Random-start radius for FAB restarts; `None` means `epsilon`.
    pub mu: Option<f64>,
}

impl Default for FabParams {
    fn default() -> Self {
        Self {
            eta: 1.05,
            beta_max: 0.1,
            mu: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// PGD step size.
    pub alpha: f64,
    /// Boundary-descent step size; `None` means `epsilon`.
    pub eta_init: Option<f64>,
    pub restarts: usize,
    pub n_init: usize,
    pub n_attack: usize,
    /// Give non-ACBI starts the `n_init` iterations as extra attack steps.
    pub budget_matching: bool,
    /// Keep running restarts after the first success.
    pub exhaust_restarts: bool,
    pub record_trace: bool,
    pub norm: Norm,
    pub fab: FabParams,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            eta_init: None,
            restarts: 4,
            n_init: 5,
            n_attack: 20,
            budget_matching: true,
            exhaust_restarts: false,
            record_trace: false,
            norm: Norm::Linf,
            fab: FabParams::default(),
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack.epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("attack.alpha must be > 0, got {}", self.alpha));
        }
        if let Some(eta) = self.eta_init {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("attack.eta_init must be > 0, got {eta}"));
            }
        }
        if self.restarts == 0 {
            return bad("attack.restarts must be >= 1".into());
        }
        if !(self.fab.eta > 0.0 && self.fab.eta.is_finite()) {
            return bad(format!("attack.fab.eta must be > 0, got {}", self.fab.eta));
        }
        if !(0.0..=1.0).contains(&self.fab.beta_max) {
            return bad(format!("attack.fab.beta_max must lie in [0, 1], got {}", self.fab.beta_max));
        }
        if let Some(mu) = self.fab.mu {
            if !(0.0..=self.epsilon).contains(&mu) {
                return bad(format!("attack.fab.mu must lie in [0, epsilon], got {mu}"));
            }
        }
        Ok(())
    }

    pub fn eta_init(&self) -> f64 {
        self.eta_init.unwrap_or(self.epsilon)
    }

    /// Iterations per restart shared by initialization and attack.
    pub fn total_budget(&self) -> usize {
        self.n_init + self.n_attack
    }

    /// Main-attack iterations for a restart started with `init`.
    pub fn attack_steps(&self, init: Init) -> usize {
        match init {
            Init::Acbi => self.n_attack,
            Init::Ri | Init::None if self.budget_matching => self.total_budget(),
            Init::Ri | Init::None => self.n_attack,
        }
    }
}

/// One restart of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub seed: u64,
    /// Boundary-descent steps actually taken.
    pub init_steps: usize,
    /// Main-attack iteration at which the prediction first left `y`.
    pub iterations_to_success: Option<usize>,
    pub gradient_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub adversarial: Vec<f64>,
    pub success: bool,
    /// False when the clean input is already misclassified (no restart runs).
    pub clean_correct: bool,
    pub restarts: Vec<RestartRecord>,
    pub best_restart: Option<usize>,
    /// Nearest-boundary signed distance at every iterate of the best restart.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

impl AttackOutcome {
    /// Main-attack iterations of the best restart.
    pub fn iterations_to_success(&self) -> Option<usize> {
        self.best_restart.and_then(|r| self.restarts[r].iterations_to_success)
    }

    /// Initialization plus main-attack iterations of the best restart.
    pub fn total_iterations(&self) -> Option<usize> {
        self.best_restart
            .and_then(|r| self.restarts[r].iterations_to_success.map(|t| t + self.restarts[r].init_steps))
    }

    fn single(adversarial: Vec<f64>, record: RestartRecord, trace: Vec<f64>) -> Self {
        let success = record.iterations_to_success.is_some();
        Self {
            adversarial,
            success,
            clean_correct: true,
            restarts: vec![record],
            best_restart: success.then_some(0),
            trace,
        }
    }
}

/// Per-coordinate feasible box `[max(0, x - eps), min(1, x + eps)]`.
#[derive(Debug, Clone)]
pub(crate) struct Ball {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Ball {
    pub fn new(x: &[f64], eps: f64) -> Self {
        Self {
            lo: x.iter().map(|v| (v - eps).max(0.0)).collect(),
            hi: x.iter().map(|v| (v + eps).min(1.0)).collect(),
        }
    }

    pub fn clip(&self, p: &mut [f64]) {
        for ((v, lo), hi) in p.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// `p - step * sign(g)`, clipped. `sign(0) = 0`.
    pub fn signed_step(&self, p: &mut [f64], g: &[f64], step: f64) {
        for (v, gi) in p.iter_mut().zip(g) {
            if *gi > 0.0 {
                *v -= step;
            } else if *gi < 0.0 {
                *v += step;
            }
        }
        self.clip(p);
    }
}

/// `clip(x + U(-eps, eps)^D)` to the unit box.
pub fn random_start(x: &[f64], epsilon: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter()
        .map(|&v| (v + rng.random_range(-epsilon..=epsilon)).clamp(0.0, 1.0))
        .collect()
}

fn check_input(c: &Classifier, x: &[f64], y: usize) -> Result<()> {
    if x.len() != c.input_dim() {
        return Err(Error::shape("attack input", format!("{} values", c.input_dim()), &[x.len()]));
    }
    if y >= c.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            c.num_classes()
        )));
    }
    Ok(())
}

/// Runs `restarts` independent trials: random start, optional boundary
/// descent, then the main attack. Restart `r` uses seed `config.seed + r`.
///
/// A success is preferred over a failure and, among successes, the fewest
/// total iterations; ties go to the earlier restart.
pub fn run_with_restarts(
    c: &Classifier,
    bs: &BoundarySet,
    x: &[f64],
    y: usize,
    config: &AttackConfig,
    method: Method,
    init: Init,
) -> Result<AttackOutcome> {
    config.validate()?;
    check_input(c, x, y)?;
    if argmax(&c.logits(x)?) != y {
        return Ok(AttackOutcome {
            adversarial: x.to_vec(),
            success: true,
            clean_correct: false,
            restarts: Vec::new(),
            best_restart: None,
            trace: Vec::new(),
        });
    }
    let radius = match method {
        Method::Fab => config.fab.mu.unwrap_or(config.epsilon),
        Method::Pgd => config.epsilon,
    };
    let steps = config.attack_steps(init);
    let mut records = Vec::with_capacity(config.restarts);
    let mut best: Option<(usize, usize, Vec<f64>, Vec<f64>)> = None;
    let mut last_failure: Option<(Vec<f64>, Vec<f64>)> = None;

    for r in 0..config.restarts {
        let seed = config.seed.wrapping_add(r as u64);
        let start = match init {
            Init::None => x.to_vec(),
            Init::Ri | Init::Acbi => random_start(x, radius, seed),
        };
        let (start, init_steps, mut trace) = match init {
            Init::Acbi => acbi::descend(c, bs, x, &start, y, config, config.n_init)?,
            Init::Ri | Init::None => (start, 0, Vec::new()),
        };
        let out = match method {
            Method::Pgd => pgd::run(c, bs, x, y, config, &start, steps)?,
            Method::Fab => fab::run(c, bs, x, y, config, &start, steps)?,
        };
        trace.extend_from_slice(&out.trace);
        let record = RestartRecord {
            seed,
            init_steps,
            iterations_to_success: out.success_at,
            gradient_evals: init_steps + out.gradient_evals,
        };
        debug_assert!(record.gradient_evals <= init_steps + steps);
        if let Some(t) = out.success_at {
            let total = t + init_steps;
            if best.as_ref().is_none_or(|b| total < b.1) {
                best = Some((r, total, out.point, trace));
            }
        } else if best.is_none() && last_failure.is_none() {
            last_failure = Some((out.point, trace));
        }
        records.push(record);
        if best.is_some() && !config.exhaust_restarts {
            break;
        }
    }

    Ok(match best {
        Some((r, _, point, trace)) => AttackOutcome {
            adversarial: point,
            success: true,
            clean_correct: true,
            restarts: records,
            best_restart: Some(r),
            trace,
        },
        None => {
            let (point, trace) = last_failure.expect("at least one restart");
            AttackOutcome {
                adversarial: point,
                success: false,
                clean_correct: true,
                restarts: records,
                best_restart: None,
                trace,
            }
        }
    })
}

/// Result of one main-attack run.
pub(crate) struct RunResult {
    pub point: Vec<f64>,
    pub success_at: Option<usize>,
    pub gradient_evals: usize,
    pub trace: Vec<f64>,
}

/// Smallest signed distance from `v` to a boundary of class `y`.
pub(crate) fn boundary_margin(bs: &BoundarySet, v: &[f64], y: usize) -> Result<f64> {
    Ok(bs.nearest_boundary(v, y)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_start_properties() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        assert_eq!(random_start(&x, 0.0, 3), x);
        let s = random_start(&x, 0.1, 7);
        assert!(s.iter().zip(&x).all(|(a, b)| (a - b).abs() <= 0.1 && (0.0..=1.0).contains(a)));
        assert_eq!(s, random_start(&x, 0.1, 7));
        assert_ne!(s, random_start(&x, 0.1, 8));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = [
            AttackConfig { epsilon: -1.0, ..Default::default() },
            AttackConfig { alpha: 0.0, ..Default::default() },
            AttackConfig { eta_init: Some(0.0), ..Default::default() },
            AttackConfig { restarts: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn budget_matching_gives_ri_the_whole_budget() {
        let cfg = AttackConfig::default();
        assert_eq!(cfg.attack_steps(Init::Acbi), 20);
        assert_eq!(cfg.attack_steps(Init::Ri), 25);
        let off = AttackConfig { budget_matching: false, ..cfg };
        assert_eq!(off.attack_steps(Init::Ri), 20);
    }

    #[test]
    fn ball_clip_respects_box_and_radius() {
        let x = [0.0, 0.5, 1.0];
        let ball = Ball::new(&x, 0.1);
        let mut p = [-3.0, 0.9, 0.2];
        ball.clip(&mut p);
        assert_eq!(p, [0.0, 0.6, 0.9]);
    }
}
