use super::{boundary_margin, check_input, AttackConfig, AttackOutcome, Ball, RestartRecord, RunResult};
use crate::error::Result;
use crate::geometry::BoundarySet;
use crate::loss::{argmax, cross_entropy_with_logits};
use crate::model::Classifier;

/// Logits, representation and (optionally) the input gradient of the loss.
type LossGradient = (Vec<f64>, Vec<f64>, Option<Vec<f64>>);

/// Logits at `x` and the input gradient of the cross-entropy against `y`.
fn loss_gradient(c: &Classifier, x: &[f64], y: usize, want_grad: bool) -> Result<LossGradient> {
    let trace = c.trace(x)?;
    let z = c.logits_from_representation(&trace.representation)?;
    if !want_grad {
        return Ok((z, trace.representation, None));
    }
    let (_, dz) = cross_entropy_with_logits(&z, y)?;
    let tail = c.tail();
    let mut dv = vec![0.0; c.repr_dim()];
    for (k, g) in dz.iter().enumerate() {
        for (d, w) in dv.iter_mut().zip(tail.weight_row(k)) {
            *d += g * w;
        }
    }
    let grad = c.head_vjp(&trace, &dv)?;
    Ok((z, trace.representation, Some(grad)))
}

/// Sign-gradient ascent on the cross-entropy from `start`, stopping at the
/// first iterate whose prediction differs from `y`.
pub(crate) fn run(
    c: &Classifier,
    bs: &BoundarySet,
    x: &[f64],
    y: usize,
    config: &AttackConfig,
    start: &[f64],
    steps: usize,
) -> Result<RunResult> {
    let ball = Ball::new(x, config.epsilon);
    let mut p = start.to_vec();
    ball.clip(&mut p);
    let mut trace = Vec::new();
    let mut evals = 0;
    for t in 0..=steps {
        let (z, v, grad) = loss_gradient(c, &p, y, t < steps)?;
        if config.record_trace {
            trace.push(boundary_margin(bs, &v, y)?);
        }
        if argmax(&z) != y {
            return Ok(RunResult {
                point: p,
                success_at: Some(t),
                gradient_evals: evals,
                trace,
            });
        }
        if let Some(g) = grad {
            evals += 1;
            ball.signed_step(&mut p, &g, -config.alpha);
        }
    }
    Ok(RunResult {
        point: p,
        success_at: None,
        gradient_evals: evals,
        trace,
    })
}

/// One PGD run of `config.n_attack` iterations from `start`.
pub fn pgd_attack(
    c: &Classifier,
    bs: &BoundarySet,
    x: &[f64],
    y: usize,
    config: &AttackConfig,
    start: &[f64],
) -> Result<AttackOutcome> {
    config.validate()?;
    check_input(c, x, y)?;
    let out = run(c, bs, x, y, config, start, config.n_attack)?;
    let record = RestartRecord {
        seed: config.seed,
        init_steps: 0,
        iterations_to_success: out.success_at,
        gradient_evals: out.gradient_evals,
    };
    Ok(AttackOutcome::single(out.point, record, out.trace))
}

/// Exactly `steps` PGD iterations from `start` without early stopping.
pub fn pgd_perturb(c: &Classifier, x: &[f64], y: usize, start: &[f64], config: &AttackConfig, steps: usize) -> Result<Vec<f64>> {
    let ball = Ball::new(x, config.epsilon);
    let mut p = start.to_vec();
    ball.clip(&mut p);
    for _ in 0..steps {
        let (_, _, grad) = loss_gradient(c, &p, y, true)?;
        ball.signed_step(&mut p, &grad.expect("gradient requested"), -config.alpha);
    }
    Ok(p)
}
