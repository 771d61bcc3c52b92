use crate::error::{Error, Result};

/// Result of [`project_hyperplane_box`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: Vec<f64>,
    /// False when the hyperplane misses the box; `point` then minimizes
    /// `|w . p + b|` over the box instead.
    pub feasible: bool,
}

/// L-infinity projection of `point` onto `{p : w . p + b = 0, lo <= p <= hi}`.
///
/// Starting from `point` clipped to the box, coordinate `i` moves against the
/// residual by `min(room_i, r - d_i)`, where `d_i` is its clipping offset and
/// `room_i` the distance to the bound it moves toward. The smallest radius
/// `r` that cancels the residual is found on the piecewise-linear gain curve.
pub fn project_hyperplane_box(point: &[f64], w: &[f64], b: f64, lo: &[f64], hi: &[f64]) -> Result<Projection> {
    let d = point.len();
    if w.len() != d || lo.len() != d || hi.len() != d {
        return Err(Error::InvalidArgument(format!(
            "projection operands disagree: point {d}, w {}, lo {}, hi {}",
            w.len(),
            lo.len(),
            hi.len()
        )));
    }
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("projection onto a zero-norm hyperplane".into()));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::InvalidArgument("projection box has lo > hi".into()));
    }

    let mut p: Vec<f64> = point
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&v, (&l, &h))| v.clamp(l, h))
        .collect();
    let residual = w.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + b;
    if residual == 0.0 {
        return Ok(Projection { point: p, feasible: true });
    }
    // moving coordinate i one unit against the residual shrinks it by |w_i|
    let towards_hi = |wi: f64| (wi > 0.0) == (residual < 0.0);
    let offset: Vec<f64> = point.iter().zip(&p).map(|(a, b)| (a - b).abs()).collect();
    let room: Vec<f64> = (0..d)
        .map(|i| {
            if w[i] == 0.0 {
                0.0
            } else if towards_hi(w[i]) {
                hi[i] - p[i]
            } else {
                p[i] - lo[i]
            }
        })
        .collect();

    let target = residual.abs();
    let capacity: f64 = (0..d).map(|i| w[i].abs() * room[i]).sum();
    let feasible = capacity >= target;
    let radius = if feasible {
        // (radius, slope change)
        let mut events: Vec<(f64, f64)> = Vec::with_capacity(2 * d);
        for i in (0..d).filter(|&i| room[i] > 0.0) {
            events.push((offset[i], w[i].abs()));
            events.push((offset[i] + room[i], -w[i].abs()));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut r, mut gain, mut slope) = (0.0_f64, 0.0_f64, 0.0_f64);
        let mut solved = None;
        for (at, delta) in events {
            let next = gain + slope * (at - r);
            if slope > 0.0 && next >= target {
                solved = Some(r + (target - gain) / slope);
                break;
            }
            gain = next;
            r = at;
            slope += delta;
        }
        solved.unwrap_or(r)
    } else {
        f64::INFINITY
    };

    for i in 0..d {
        let step = room[i].min((radius - offset[i]).max(0.0));
        if towards_hi(w[i]) {
            p[i] = (p[i] + step).min(hi[i]);
        } else {
            p[i] = (p[i] - step).max(lo[i]);
        }
    }
    Ok(Projection { point: p, feasible })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn one_dimensional_case() {
        let p = project_hyperplane_box(&[0.5], &[1.0], -0.2, &[0.0], &[1.0]).unwrap();
        assert!((p.point[0] - 0.2).abs() < 1e-15);
        assert!(p.feasible);
    }

    #[test]
    fn point_on_hyperplane_is_fixed() {
        let x = [0.25, 0.75];
        let p = project_hyperplane_box(&x, &[1.0, 1.0], -1.0, &[0.0; 2], &[1.0; 2]).unwrap();
        assert_eq!(p.point, x.to_vec());
    }

    #[test]
    fn zero_hyperplane_rejected() {
        assert!(project_hyperplane_box(&[0.5], &[0.0], 1.0, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn infeasible_falls_back_to_least_violation() {
        let p = project_hyperplane_box(&[0.5, 0.5], &[1.0, 1.0], 5.0, &[0.0; 2], &[1.0; 2]).unwrap();
        assert!(!p.feasible);
        assert_eq!(p.point, vec![0.0, 0.0]);
    }

    #[test]
    fn matches_bisection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut feasible_cases = 0;
        for case in 0..500 {
            let d = 1 + case % 3;
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..1.2)).collect();
            let w: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b = rng.random_range(-1.5..1.5);
            let lo: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..0.4)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..0.6)).collect();
            let got = project_hyperplane_box(&x, &w, b, &lo, &hi).unwrap();
            assert!(got.point.iter().zip(lo.iter().zip(&hi)).all(|(p, (l, h))| l <= p && p <= h));
            match crate::verify::projection_oracle(&x, &w, b, &lo, &hi) {
                Some(r) => {
                    feasible_cases += 1;
                    assert!(got.feasible, "case {case}");
                    let value = w.iter().zip(&got.point).map(|(a, c)| a * c).sum::<f64>() + b;
                    assert!(value.abs() < 1e-9, "case {case}: residual {value}");
                    assert!((linf(&got.point, &x) - r).abs() < 1e-6, "case {case}");
                }
                None => assert!(!got.feasible, "case {case}"),
            }
        }
        assert!(feasible_cases > 100);
    }
}
