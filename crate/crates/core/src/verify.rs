//! Self-checks against independent oracles: central finite differences for
//! every backward pass, logit argmax for region membership, explicit
//! orthogonal projection for signed distances, and bisection on the
//! reachable interval for the hyperplane-box projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{project_hyperplane_box, AttackConfig};
use crate::error::Result;
use crate::geometry::{BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
use crate::layers::{BatchNorm, Conv2d, Dense, Layer, Padding};
use crate::loss::argmax;
use crate::model::{Architecture, Classifier, ScalarHead};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Worst observed error (or violation count) against the tolerance.
    pub worst: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: impl Into<String>, cases: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            passed: worst <= tolerance,
            cases,
            worst,
            tolerance,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} ({} cases, worst {:.3e}, tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of a vector.
pub fn finite_difference(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn random_layer(kind: &str, rng: &mut ChaCha8Rng) -> Result<(Layer, Vec<usize>)> {
    Ok(match kind {
        "dense" => {
            let (i, o) = (rng.random_range(1..7), rng.random_range(1..6));
            let w = Tensor::new(vec![o, i], uniform(rng, o * i, -1.0, 1.0))?;
            let b = Tensor::new(vec![o], uniform(rng, o, -1.0, 1.0))?;
            (Layer::Dense(Dense::new(w, b)?), vec![2, i])
        }
        "conv2d" | "conv2d-same" => {
            let (ci, co) = (rng.random_range(1..3), rng.random_range(1..4));
            let k = if kind == "conv2d-same" || rng.random_bool(0.5) { 3 } else { 2 };
            let hw = rng.random_range(k..6);
            let w = Tensor::new(vec![co, ci, k, k], uniform(rng, co * ci * k * k, -1.0, 1.0))?;
            let b = Tensor::new(vec![co], uniform(rng, co, -1.0, 1.0))?;
            let pad = if kind == "conv2d" { Padding::Valid } else { Padding::Same };
            (Layer::Conv2d(Conv2d::new(w, b, pad)?), vec![1, ci, hw, hw])
        }
        "batchnorm" => {
            let c = rng.random_range(1..4);
            let bn = BatchNorm {
                gamma: Tensor::new(vec![c], uniform(rng, c, 0.5, 2.0))?,
                beta: Tensor::new(vec![c], uniform(rng, c, -1.0, 1.0))?,
                running_mean: Tensor::new(vec![c], uniform(rng, c, -0.5, 0.5))?,
                running_var: Tensor::new(vec![c], uniform(rng, c, 0.5, 2.0))?,
                eps: 1e-5,
            };
            (Layer::BatchNorm(bn), vec![2, c, 3, 3])
        }
        "relu" => (Layer::Relu, vec![2, 3, 4]),
        "maxpool2x2" => (Layer::MaxPool2x2, vec![1, 2, 5, 4]),
        "flatten" => (Layer::Flatten, vec![2, 2, 3, 3]),
        other => unreachable!("no generator for {other}"),
    })
}

/// Layer gradients (input and parameters) against central differences of
/// `<u, layer(x)>` for a random cotangent `u`.
pub fn check_layer_gradients(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = ["dense", "conv2d", "conv2d-same", "batchnorm", "relu", "maxpool2x2", "flatten"];
    let h = 1e-6;
    let mut out = Vec::new();
    for kind in kinds {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let (layer, in_shape) = random_layer(kind, &mut rng)?;
            let n: usize = in_shape.iter().product();
            let x = Tensor::new(in_shape.clone(), off_kink(&mut rng, n))?;
            let out_shape = layer.output_shape(&in_shape)?;
            let u = Tensor::new(out_shape.clone(), uniform(&mut rng, out_shape.iter().product(), -1.0, 1.0))?;
            let (dx, dparams) = layer.backward(&x, &u)?;

            let probe = |l: &Layer, xs: &[f64]| -> Result<f64> {
                l.forward(&Tensor::new(in_shape.clone(), xs.to_vec())?)?.dot(&u)
            };
            let fd = finite_difference(|xs| probe(&layer, xs), x.data(), h)?;
            worst = worst.max(rel_error(dx.data(), &fd));

            for (pi, dp) in dparams.iter().enumerate() {
                let base: Vec<f64> = layer.params()[pi].data().to_vec();
                let fd = finite_difference(
                    |ps| {
                        let mut l = layer.clone();
                        l.params_mut()[pi].data_mut().copy_from_slice(ps);
                        probe(&l, x.data())
                    },
                    &base,
                    h,
                )?;
                worst = worst.max(rel_error(dp.data(), &fd));
            }
        }
        out.push(CheckResult::new(format!("gradient/{kind}"), cases, worst, 1e-4));
    }

    // training-mode batchnorm, including the batch-statistics path
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (layer, shape) = random_layer("batchnorm", &mut rng)?;
        let Layer::BatchNorm(bn) = layer else { unreachable!() };
        let n: usize = shape.iter().product();
        let x = Tensor::new(shape.clone(), uniform(&mut rng, n, -1.0, 1.0))?;
        let u = Tensor::new(shape.clone(), uniform(&mut rng, n, -1.0, 1.0))?;
        let (_, stats) = bn.forward_train(&x)?;
        let (dx, _) = bn.backward_train(&x, &stats, &u)?;
        let fd = finite_difference(
            |xs| bn.forward_train(&Tensor::new(shape.clone(), xs.to_vec())?)?.0.dot(&u),
            x.data(),
            h,
        )?;
        worst = worst.max(rel_error(dx.data(), &fd));
    }
    out.push(CheckResult::new("gradient/batchnorm-train", cases, worst, 1e-4));
    Ok(out)
}

/// Input gradients of the cross-entropy and of the signed boundary distance
/// through the small convolutional classifier.
pub fn check_scalar_gradients(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Classifier::from_architecture(
        &Architecture::SmallCnn {
            input_shape: vec![1, 12, 12],
            repr_dim: 2,
            num_classes: 4,
        },
        seed,
    )?;
    // non-trivial frozen normalization
    for layer in c.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            let ch = bn.channels();
            bn.running_mean = Tensor::new(vec![ch], uniform(&mut rng, ch, -0.1, 0.1))?;
            bn.running_var = Tensor::new(vec![ch], uniform(&mut rng, ch, 0.5, 1.5))?;
        }
    }
    let bs = BoundarySet::from_classifier(&c)?;
    let h = 1e-6;
    let (mut worst_ce, mut worst_d): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let x = uniform(&mut rng, 144, 0.0, 1.0);
        let y = rng.random_range(0..4);
        let ce = ScalarHead::CrossEntropy { label: y };
        let (_, g) = c.input_gradient(&x, &ce)?;
        let fd = finite_difference(|p| Ok(c.input_gradient(p, &ce)?.0), &x, h)?;
        worst_ce = worst_ce.max(rel_error(&g, &fd));

        let (m, _) = bs.nearest_boundary(&c.representation(&x)?, y)?;
        let g = crate::geometry::distance_gradient(&c, &bs, &x, y, m)?;
        let fd = finite_difference(|p| bs.signed_distance(&c.representation(p)?, y, m), &x, h)?;
        worst_d = worst_d.max(rel_error(&g, &fd));
    }
    Ok(vec![
        CheckResult::new("gradient/cross-entropy-input", cases, worst_ce, 1e-4),
        CheckResult::new("gradient/signed-distance-input", cases, worst_d, 1e-4),
    ])
}

/// Region membership against the logit argmax, and exact antisymmetry.
pub fn check_partition(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for k in [2, 4, 10] {
        let n = rng.random_range(2..6);
        let w = uniform(&mut rng, k * n, -1.0, 1.0);
        let b = uniform(&mut rng, k, -1.0, 1.0);
        let c = Classifier::linear(w.clone(), b.clone())?;
        let bs = BoundarySet::build(&w, &b)?;
        let (mut disagreements, mut asym, mut checked) = (0usize, 0.0f64, 0usize);
        for _ in 0..points {
            let v = uniform(&mut rng, n, -3.0, 3.0);
            let z = c.tail_forward(&Tensor::row(v.clone()))?.into_data();
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            for i in 0..k {
                for j in (0..k).filter(|&j| j != i) {
                    asym = asym.max((bs.decision_value(&v, i, j)? + bs.decision_value(&v, j, i)?).abs());
                }
            }
            if sorted[0] - sorted[1] <= 10.0 * DEFAULT_TIE_TOL {
                continue;
            }
            checked += 1;
            if bs.region_of(&v, DEFAULT_TIE_TOL)? != RegionLabel::Class(argmax(&z)) {
                disagreements += 1;
            }
        }
        out.push(CheckResult::new(format!("partition/K={k}"), checked, disagreements as f64, 0.0));
        out.push(CheckResult::new(format!("antisymmetry/K={k}"), points, asym, 0.0));
    }
    Ok(out)
}

/// On-boundary points have zero distance; off-boundary magnitudes equal the
/// Euclidean distance to the explicit orthogonal foot point.
pub fn check_signed_distance(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut on, mut rel): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let k = rng.random_range(2..6);
        let n = rng.random_range(1..5);
        let w = uniform(&mut rng, k * n, -2.0, 2.0);
        let b = uniform(&mut rng, k, -1.0, 1.0);
        let bs = BoundarySet::build(&w, &b)?;
        let y = rng.random_range(0..k);
        let m = (y + rng.random_range(1..k)) % k;
        let row: Vec<f64> = (0..n).map(|c| w[y * n + c] - w[m * n + c]).collect();
        let bias = b[y] - b[m];
        let norm2: f64 = row.iter().map(|a| a * a).sum();

        // boundary point: a random point moved along the normal onto F = 0
        let v = uniform(&mut rng, n, -3.0, 3.0);
        let f = row.iter().zip(&v).map(|(a, c)| a * c).sum::<f64>() + bias;
        let foot: Vec<f64> = v.iter().zip(&row).map(|(vi, ri)| vi - f / norm2 * ri).collect();
        on = on.max(bs.signed_distance(&foot, y, m)?.abs());

        let euclid = v.iter().zip(&foot).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
        let d = bs.signed_distance(&v, y, m)?;
        if euclid > 1e-6 {
            rel = rel.max((d.abs() - euclid).abs() / euclid);
            if d.signum() != f.signum() {
                rel = f64::INFINITY;
            }
        }
    }
    Ok(vec![
        CheckResult::new("distance/on-boundary", cases, on, 1e-9),
        CheckResult::new("distance/euclidean", cases, rel, 1e-9),
    ])
}

/// Range of `w . p + b` over `box ∩ [x - r, x + r]`, or `None` if empty.
fn reachable(x: &[f64], w: &[f64], b: f64, lo: &[f64], hi: &[f64], r: f64) -> Option<(f64, f64)> {
    let (mut min, mut max) = (b, b);
    for i in 0..x.len() {
        let a = lo[i].max(x[i] - r);
        let c = hi[i].min(x[i] + r);
        if a > c {
            return None;
        }
        min += (w[i] * a).min(w[i] * c);
        max += (w[i] * a).max(w[i] * c);
    }
    Some((min, max))
}

/// Smallest L-infinity radius around `x` whose intersection with the box
/// reaches the hyperplane, by bisection; `None` if the box misses it.
pub fn projection_oracle(x: &[f64], w: &[f64], b: f64, lo: &[f64], hi: &[f64]) -> Option<f64> {
    let ok = |r: f64| reachable(x, w, b, lo, hi, r).is_some_and(|(mn, mx)| mn <= 0.0 && 0.0 <= mx);
    let mut high = 1.0 + x.iter().chain(lo).chain(hi).fold(0.0_f64, |m, v| m.max(v.abs())) * 2.0;
    if !ok(high) {
        return None;
    }
    let mut low = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (low + high);
        if ok(mid) {
            high = mid;
        } else {
            low = mid;
        }
    }
    Some(high)
}

/// Projection objective and feasibility against [`projection_oracle`].
pub fn check_projection(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut obj, mut residual, mut flags) = (0.0f64, 0.0f64, 0usize);
    for case in 0..cases {
        let d = 1 + case % 3;
        let x = uniform(&mut rng, d, -0.2, 1.2);
        let w = uniform(&mut rng, d, -2.0, 2.0);
        let b = rng.random_range(-1.5..1.5);
        let lo = uniform(&mut rng, d, 0.0, 0.4);
        let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..0.6)).collect();
        let got = project_hyperplane_box(&x, &w, b, &lo, &hi)?;
        let inside = got.point.iter().zip(lo.iter().zip(&hi)).all(|(p, (l, h))| l <= p && p <= h);
        match projection_oracle(&x, &w, b, &lo, &hi) {
            Some(r) => {
                let dist = got.point.iter().zip(&x).fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()));
                obj = obj.max((dist - r).abs());
                let value = w.iter().zip(&got.point).map(|(a, c)| a * c).sum::<f64>() + b;
                residual = residual.max(value.abs());
                flags += usize::from(!got.feasible || !inside);
            }
            None => flags += usize::from(got.feasible || !inside),
        }
    }
    Ok(vec![
        CheckResult::new("projection/objective", cases, obj, 1e-6),
        CheckResult::new("projection/on-hyperplane", cases, residual, 1e-9),
        CheckResult::new("projection/feasibility", cases, flags as f64, 0.0),
    ])
}

/// With an identity head and no active clipping each boundary-descent step
/// lowers the signed distance by `eta |w|_1 / |w|_2`.
pub fn check_linear_descent(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut steps_checked = 0;
    for _ in 0..cases {
        let n = rng.random_range(1..6);
        let w = uniform(&mut rng, 2 * n, -2.0, 2.0);
        let x = uniform(&mut rng, n, 0.3, 0.7);
        let row: Vec<f64> = (0..n).map(|i| w[i] - w[n + i]).collect();
        let (l1, l2) = (
            row.iter().map(|a| a.abs()).sum::<f64>(),
            row.iter().map(|a| a * a).sum::<f64>().sqrt(),
        );
        let eta = rng.random_range(0.001..0.01);
        // place x at distance 20 steps on the class-0 side
        let margin = 20.0 * eta * l1 / l2;
        let bias0 = margin * l2 - row.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>();
        let c = Classifier::linear(w.clone(), vec![bias0, 0.0])?;
        let bs = BoundarySet::from_classifier(&c)?;
        let cfg = AttackConfig {
            epsilon: 0.25,
            eta_init: Some(eta),
            n_init: 1,
            ..Default::default()
        };
        let mut p = x.clone();
        let mut prev = bs.signed_distance(&p, 0, 1)?;
        for _ in 0..10 {
            p = crate::attacks::acbi_init(&c, &bs, &x, &p, 0, &cfg)?;
            let d = bs.signed_distance(&p, 0, 1)?;
            worst = worst.max(((prev - d) - eta * l1 / l2).abs());
            prev = d;
            steps_checked += 1;
        }
    }
    Ok(vec![CheckResult::new("descent/linear-rate", steps_checked, worst, 1e-12)])
}

/// Full suite at the default sizes.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = check_layer_gradients(100, seed)?;
    out.extend(check_scalar_gradients(100, seed.wrapping_add(1))?);
    out.extend(check_partition(10_000, seed.wrapping_add(2))?);
    out.extend(check_signed_distance(1000, seed.wrapping_add(3))?);
    out.extend(check_projection(500, seed.wrapping_add(4))?);
    out.extend(check_linear_descent(50, seed.wrapping_add(5))?);
    Ok(out)
}
