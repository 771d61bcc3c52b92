use acbi_core::geometry::{distance_gradient, BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
use acbi_core::loss::argmax;
use acbi_core::{Classifier, Tensor};
use proptest::prelude::*;

fn tail(k: usize, n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-2.0..2.0f64, k * n),
        prop::collection::vec(-1.0..1.0f64, k),
    )
}

fn case() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..8, 1usize..5).prop_flat_map(|(k, n)| {
        (Just(k), Just(n), tail(k, n).prop_map(|t| t.0), tail(k, n).prop_map(|t| t.1), prop::collection::vec(-4.0..4.0f64, n))
    })
}

proptest! {
    #[test]
    fn decision_values_are_logit_differences((k, _n, w, b, v) in case()) {
        let c = Classifier::linear(w.clone(), b.clone()).unwrap();
        let bs = BoundarySet::build(&w, &b).unwrap();
        let z = c.tail_forward(&Tensor::row(v.clone())).unwrap().into_data();
        for i in 0..k {
            for j in (0..k).filter(|&j| j != i) {
                let f = bs.decision_value(&v, i, j).unwrap();
                prop_assert!((f - (z[i] - z[j])).abs() < 1e-12);
                prop_assert_eq!(f + bs.decision_value(&v, j, i).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn regions_partition_space((k, _n, w, b, v) in case()) {
        let c = Classifier::linear(w.clone(), b.clone()).unwrap();
        let bs = BoundarySet::build(&w, &b).unwrap();
        let z = c.tail_forward(&Tensor::row(v.clone())).unwrap().into_data();
        let mut s = z.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(s[0] - s[1] > 1e-6);
        let winners: Vec<usize> = (0..k)
            .filter(|&i| (0..k).filter(|&j| j != i).all(|j| bs.decision_value(&v, i, j).unwrap() > DEFAULT_TIE_TOL))
            .collect();
        prop_assert_eq!(winners, vec![argmax(&z)]);
        prop_assert_eq!(bs.region_of(&v, DEFAULT_TIE_TOL).unwrap(), RegionLabel::Class(argmax(&z)));
        // any strictly increasing map of the logits keeps the winner
        let squashed: Vec<f64> = z.iter().map(|t| t.tanh() + 3.0 * t).collect();
        prop_assert_eq!(argmax(&squashed), argmax(&z));
    }

    #[test]
    fn pair_count((k, _n, w, b, _v) in case()) {
        let bs = BoundarySet::build(&w, &b).unwrap();
        prop_assert_eq!(bs.pairs().len(), k * (k - 1) / 2);
        for c in 0..k {
            prop_assert_eq!(bs.pairs().iter().filter(|(i, j)| *i == c || *j == c).count(), k - 1);
        }
    }

    #[test]
    fn signed_distance_sign_and_nearest((k, _n, w, b, v) in case(), y in 0usize..8) {
        let y = y % k;
        let bs = BoundarySet::build(&w, &b).unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for m in (0..k).filter(|&m| m != y) {
            let d = bs.signed_distance(&v, y, m).unwrap();
            let f = bs.decision_value(&v, y, m).unwrap();
            prop_assert_eq!(d > 0.0, f > 0.0);
            if d < best.1 {
                best = (m, d);
            }
        }
        prop_assert_eq!(bs.nearest_boundary(&v, y).unwrap(), best);
    }

    #[test]
    fn identity_head_distance_gradient_is_unit_normal(
        (k, n, w, b, v) in case(), y in 0usize..8, m in 1usize..8,
    ) {
        let y = y % k;
        let m = (y + 1 + m % (k - 1)) % k;
        let c = Classifier::linear(w.clone(), b.clone()).unwrap();
        let bs = BoundarySet::from_classifier(&c).unwrap();
        let x: Vec<f64> = v.iter().map(|t| (t / 8.0 + 0.5).clamp(0.0, 1.0)).collect();
        let g = distance_gradient(&c, &bs, &x, y, m).unwrap();
        let row: Vec<f64> = (0..n).map(|i| w[y * n + i] - w[m * n + i]).collect();
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        for (gi, ri) in g.iter().zip(&row) {
            prop_assert!((gi - ri / norm).abs() < 1e-12);
        }
        // positive rescaling of rows y, m and their biases changes nothing
        let s = 2.5;
        let (mut w2, mut b2) = (w.clone(), b.clone());
        for cls in [y, m] {
            for i in 0..n {
                w2[cls * n + i] *= s;
            }
            b2[cls] *= s;
        }
        let c2 = Classifier::linear(w2.clone(), b2.clone()).unwrap();
        let bs2 = BoundarySet::from_classifier(&c2).unwrap();
        let g2 = distance_gradient(&c2, &bs2, &x, y, m).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn rows_scaled_together_keep_distance() {
    // rescaling rows (y, m) scales F_(y,m) and its norm by the same factor
    let w = vec![1.0, 2.0, -1.0, 0.5, 0.3, -0.7];
    let b = vec![0.1, 0.2, 0.3];
    let v = [0.4, -0.9];
    let d = BoundarySet::build(&w, &b).unwrap().signed_distance(&v, 1, 2).unwrap();
    let mut w2 = w.clone();
    let mut b2 = b.clone();
    for x in &mut w2[2..6] {
        *x *= 0.01;
    }
    b2[1] *= 0.01;
    b2[2] *= 0.01;
    let d2 = BoundarySet::build(&w2, &b2).unwrap().signed_distance(&v, 1, 2).unwrap();
    assert!((d - d2).abs() < 1e-12);
}
