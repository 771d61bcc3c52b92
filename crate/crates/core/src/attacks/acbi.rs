use super::{check_input, AttackConfig, Ball};
use crate::error::{Error, Result};
use crate::geometry::{BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
use crate::model::{Classifier, ScalarHead};

/// Up to `n` steps `p <- clip(p - eta * sign(grad D(f_h(p), y, m)))`, with
/// `m` the nearest boundary at the current iterate. Stops as soon as the
/// representation leaves the class-`y` region.
///
/// Returns the final point, the steps taken and, when tracing, the nearest
/// signed distance before each step.
pub(crate) fn descend(
    c: &Classifier,
    bs: &BoundarySet,
    x: &[f64],
    start: &[f64],
    y: usize,
    config: &AttackConfig,
    n: usize,
) -> Result<(Vec<f64>, usize, Vec<f64>)> {
    let ball = Ball::new(x, config.epsilon);
    let eta = config.eta_init();
    let mut p = start.to_vec();
    ball.clip(&mut p);
    let mut trace = Vec::new();
    for t in 0..n {
        let head = c.trace(&p)?;
        let v = &head.representation;
        if bs.region_of(v, DEFAULT_TIE_TOL)? != RegionLabel::Class(y) {
            return Ok((p, t, trace));
        }
        let (m, dist) = bs.nearest_boundary(v, y)?;
        if config.record_trace {
            trace.push(dist);
        }
        let weights = match bs.distance_functional(y, m)? {
            ScalarHead::Representation { weights, .. } => weights,
            _ => unreachable!("distance functional is linear in v"),
        };
        let grad = c.head_vjp(&head, &weights)?;
        ball.signed_step(&mut p, &grad, eta);
    }
    Ok((p, n, trace))
}

/// Boundary-descent initialization of `config.n_init` steps from `start`.
pub fn acbi_init(
    c: &Classifier,
    bs: &BoundarySet,
    x: &[f64],
    start: &[f64],
    y: usize,
    config: &AttackConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    check_input(c, x, y)?;
    if start.len() != x.len() {
        return Err(Error::shape("acbi start", format!("{} values", x.len()), &[start.len()]));
    }
    Ok(descend(c, bs, x, start, y, config, config.n_init)?.0)
}
