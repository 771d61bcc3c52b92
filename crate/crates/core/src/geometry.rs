//! Absolute classification boundaries in representation space.
//!
//! With logits `z = w v + b`, the pairwise decision function between classes
//! `i` and `j` is `F_(i,j)(v) = (w_i - w_j) . v + (b_i - b_j)`. The class-`i`
//! region is where `F_(i,j)(v) > 0` for every `j != i`; the `K(K-1)/2`
//! hyperplanes `F_(i,j) = 0` partition `R^N` into `K` disjoint regions.
//!
//! The signed distance `D(v, y, k) = F_(y,k)(v) / |w_y - w_k|_2` is positive
//! on the `y` side of the `(y, k)` hyperplane and its magnitude is the
//! Euclidean distance to it.

use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Classifier, ScalarHead};

/// Default tolerance under which a decision value counts as a tie.
pub const DEFAULT_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLabel {
    Class(usize),
    /// No class wins every pairwise test by more than the tolerance; `(i, j)`
    /// (with `i < j`) is the tie that blocks the best candidate.
    OnBoundary { i: usize, j: usize },
}

impl RegionLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            RegionLabel::Class(k) => Some(k),
            RegionLabel::OnBoundary { .. } => None,
        }
    }
}

/// The `K(K-1)/2` decision hyperplanes of a linear tail.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySet {
    num_classes: usize,
    repr_dim: usize,
    pairs: Vec<(usize, usize)>,
    /// Row-major `(pairs, N)`; row `(i, j)` is `w_i - w_j`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    norms: Vec<f64>,
}

impl BoundarySet {
    /// Builds all pairs `(i, j)`, `i < j`, from tail weights `w` (`K x N`,
    /// row-major) and biases `b`.
    ///
    /// Pairs whose weight difference is exactly zero are kept but flagged
    /// (see [`BoundarySet::degenerate_pairs`]); distance queries on them fail.
    pub fn build(w: &[f64], b: &[f64]) -> Result<Self> {
        let k = b.len();
        if k < 2 {
            return Err(Error::InvalidArgument(format!(
                "a boundary set needs at least two classes, got {k}"
            )));
        }
        if w.is_empty() || w.len() % k != 0 {
            return Err(Error::InvalidArgument(format!(
                "tail weight of length {} is not {k} x N",
                w.len()
            )));
        }
        let n = w.len() / k;
        let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
        let mut weights = Vec::with_capacity(k * (k - 1) / 2 * n);
        let mut biases = Vec::with_capacity(k * (k - 1) / 2);
        let mut norms = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in i + 1..k {
                let row: Vec<f64> = (0..n).map(|c| w[i * n + c] - w[j * n + c]).collect();
                norms.push(row.iter().map(|v| v * v).sum::<f64>().sqrt());
                weights.extend(row);
                biases.push(b[i] - b[j]);
                pairs.push((i, j));
            }
        }
        Ok(Self {
            num_classes: k,
            repr_dim: n,
            pairs,
            weights,
            biases,
            norms,
        })
    }

    pub fn from_classifier(c: &Classifier) -> Result<Self> {
        let tail = c.tail();
        Self::build(tail.weight.data(), tail.bias.data())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Stacked rows `w_(i,j)`, one per entry of [`BoundarySet::pairs`].
    pub fn weight_matrix(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias_vector(&self) -> &[f64] {
        &self.biases
    }

    /// Pairs whose weight row is the zero vector.
    pub fn degenerate_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .zip(&self.norms)
            .filter(|(_, &n)| n == 0.0)
            .map(|(&p, _)| p)
            .collect()
    }

    /// Fails on the first degenerate pair.
    pub fn ensure_nondegenerate(&self) -> Result<()> {
        match self.degenerate_pairs().first() {
            Some(&(i, j)) => Err(Error::DegenerateBoundary { i, j }),
            None => Ok(()),
        }
    }

    fn pair_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < j && j < self.num_classes);
        let k = self.num_classes;
        i * (2 * k - i - 1) / 2 + (j - i - 1)
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i == j || i >= self.num_classes || j >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class pair ({i}, {j}) invalid for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn check_v(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.repr_dim {
            return Err(Error::shape("boundary set", format!("{} values", self.repr_dim), &[v.len()]));
        }
        Ok(())
    }

    /// `(w_(i,j), b_(i,j), |w_(i,j)|_2)` with the sign for the requested order.
    pub fn row(&self, i: usize, j: usize) -> Result<(Vec<f64>, f64, f64)> {
        self.check_pair(i, j)?;
        let (lo, hi, sign) = if i < j { (i, j, 1.0) } else { (j, i, -1.0) };
        let p = self.pair_index(lo, hi);
        let n = self.repr_dim;
        let row = self.weights[p * n..(p + 1) * n].iter().map(|w| sign * w).collect();
        Ok((row, sign * self.biases[p], self.norms[p]))
    }

    #[inline]
    fn value_unchecked(&self, v: &[f64], i: usize, j: usize) -> f64 {
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        let p = self.pair_index(lo, hi);
        let n = self.repr_dim;
        let f = self.weights[p * n..(p + 1) * n]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.biases[p];
        if i < j {
            f
        } else {
            -f
        }
    }

    /// `F_(i,j)(v)`; exactly antisymmetric in `(i, j)`.
    pub fn decision_value(&self, v: &[f64], i: usize, j: usize) -> Result<f64> {
        self.check_pair(i, j)?;
        self.check_v(v)?;
        Ok(self.value_unchecked(v, i, j))
    }

    /// Region containing `v`: class `k` when `F_(k,j)(v) > tie_tol` for every
    /// `j != k`, otherwise the blocking tie.
    pub fn region_of(&self, v: &[f64], tie_tol: f64) -> Result<RegionLabel> {
        self.check_v(v)?;
        let k = self.num_classes;
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..k {
            let (j_min, margin) = (0..k)
                .filter(|&j| j != i)
                .map(|j| (j, self.value_unchecked(v, i, j)))
                .fold((usize::MAX, f64::INFINITY), |acc, (j, f)| if f < acc.1 { (j, f) } else { acc });
            if margin > tie_tol {
                return Ok(RegionLabel::Class(i));
            }
            if best.is_none_or(|(_, _, m)| margin > m) {
                best = Some((i, j_min, margin));
            }
        }
        let (i, j, _) = best.expect("at least two classes");
        Ok(RegionLabel::OnBoundary {
            i: i.min(j),
            j: i.max(j),
        })
    }

    /// `D(v, y, k) = F_(y,k)(v) / |w_(y,k)|_2`.
    pub fn signed_distance(&self, v: &[f64], y: usize, k: usize) -> Result<f64> {
        self.check_pair(y, k)?;
        self.check_v(v)?;
        let norm = self.norms[self.pair_index(y.min(k), y.max(k))];
        if norm == 0.0 {
            return Err(Error::DegenerateBoundary {
                i: y.min(k),
                j: y.max(k),
            });
        }
        Ok(self.value_unchecked(v, y, k) / norm)
    }

    /// The class `m != y` minimizing `D(v, y, m)`; ties go to the smaller index.
    pub fn nearest_boundary(&self, v: &[f64], y: usize) -> Result<(usize, f64)> {
        if y >= self.num_classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let mut best = (usize::MAX, f64::INFINITY);
        for n in (0..self.num_classes).filter(|&n| n != y) {
            let d = self.signed_distance(v, y, n)?;
            if d < best.1 {
                best = (n, d);
            }
        }
        Ok(best)
    }

    /// `D(., y, k)` as a fixed linear functional on the representation.
    pub fn distance_functional(&self, y: usize, k: usize) -> Result<ScalarHead> {
        let (row, bias, norm) = self.row(y, k)?;
        if norm == 0.0 {
            return Err(Error::DegenerateBoundary {
                i: y.min(k),
                j: y.max(k),
            });
        }
        Ok(ScalarHead::Representation {
            weights: row.into_iter().map(|w| w / norm).collect(),
            bias: bias / norm,
        })
    }

    /// CSV with columns `pair_i, pair_j, w_0 .. w_{N-1}, bias`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let n = self.repr_dim;
        let cols: Vec<String> = (0..n).map(|c| format!("w_{c}")).collect();
        writeln!(out, "pair_i,pair_j,{},bias", cols.join(","))?;
        for (p, &(i, j)) in self.pairs.iter().enumerate() {
            let ws: Vec<String> = self.weights[p * n..(p + 1) * n].iter().map(|w| w.to_string()).collect();
            writeln!(out, "{i},{j},{},{}", ws.join(","), self.biases[p])?;
        }
        Ok(())
    }
}

/// Input gradient of `D(f_h(x), y, m)` with `m` held fixed.
pub fn distance_gradient(c: &Classifier, bs: &BoundarySet, x: &[f64], y: usize, m: usize) -> Result<Vec<f64>> {
    let functional = bs.distance_functional(y, m)?;
    Ok(c.input_gradient(x, &functional)?.1)
}
