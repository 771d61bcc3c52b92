use super::projection::project_hyperplane_box;
use super::{boundary_margin, check_input, AttackConfig, AttackOutcome, Ball, RestartRecord, RunResult};
use crate::error::Result;
use crate::geometry::BoundarySet;
use crate::loss::argmax;
use crate::model::Classifier;

fn linf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Boundary-projection attack. Each iteration linearizes every `z_k - z_y`
/// at the iterate, picks the hyperplane closest in L-infinity, projects both
/// the iterate and the clean input onto it inside the feasible box, and takes
/// `clip((1 - beta)(p + eta d_p) + beta(x + eta d_x))`.
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
    let eta = config.fab.eta;
    let mut p = start.to_vec();
    ball.clip(&mut p);
    let mut trace = Vec::new();
    // each completed iteration costs one gradient evaluation
    for t in 0..=steps {
        let done = |p: Vec<f64>, at, evals, trace| RunResult {
            point: p,
            success_at: at,
            gradient_evals: evals,
            trace,
        };
        if t == steps {
            let v = c.representation(&p)?;
            if config.record_trace {
                trace.push(boundary_margin(bs, &v, y)?);
            }
            let hit = argmax(&c.logits_from_representation(&v)?) != y;
            return Ok(done(p, hit.then_some(t), t, trace));
        }
        let (z, grads) = c.logit_difference_gradients(&p, y)?;
        if config.record_trace {
            let v = c.representation(&p)?;
            trace.push(boundary_margin(bs, &v, y)?);
        }
        if argmax(&z) != y {
            return Ok(done(p, Some(t), t, trace));
        }

        // closest linearized boundary: |f_k| / |g_k|_1
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in grads.iter().enumerate().filter(|(k, _)| *k != y) {
            let norm1: f64 = g.iter().map(|a| a.abs()).sum();
            if norm1 == 0.0 {
                continue;
            }
            let dist = (z[k] - z[y]).abs() / norm1;
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((k, dist));
            }
        }
        let Some((k, _)) = best else {
            // flat logits: no direction to follow
            continue;
        };
        let g = &grads[k];
        let f = z[k] - z[y];
        let offset = f - g.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();

        let to_iterate = project_hyperplane_box(&p, g, offset, &ball.lo, &ball.hi)?.point;
        let to_clean = project_hyperplane_box(x, g, offset, &ball.lo, &ball.hi)?.point;
        let d_adv: Vec<f64> = to_iterate.iter().zip(&p).map(|(a, b)| a - b).collect();
        let d_orig: Vec<f64> = to_clean.iter().zip(x).map(|(a, b)| a - b).collect();
        let (na, no) = (linf(&d_adv), linf(&d_orig));
        let beta = if na + no > 0.0 {
            (na / (na + no)).min(config.fab.beta_max)
        } else {
            0.0
        };
        for i in 0..p.len() {
            p[i] = (1.0 - beta) * (p[i] + eta * d_adv[i]) + beta * (x[i] + eta * d_orig[i]);
        }
        ball.clip(&mut p);
    }
    unreachable!("loop returns at t == steps")
}

/// One FAB run of `config.n_attack` iterations from `start`.
pub fn fab_attack(
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
