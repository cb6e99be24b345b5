//! Binary same-route matrices over customers.
//!
//! Entry (i, j) records whether customers i and j are served by the same
//! vehicle.  The matrix is the prediction target of the diffusion model and
//! later guides the decoder's local attention.  A valid matrix is symmetric,
//! transitive, zero on the diagonal, and its groups respect capacity; the
//! depot never appears (it belongs to every route).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::instance::{CvrpInstance, CvrpSolution};

/// Per-entry probability that customers share a route: square matrix of
/// reals in [0,1], symmetric up to the producer's symmetrisation, zero
/// diagonal.
pub type EdgeProbabilities = Array2<f64>;

/// Symmetric 0/1 matrix over customers 1..=n (stored 0-based internally).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintMatrix {
    n: usize,
    data: Vec<u8>,
}

/// One violated invariant, with the smallest witness that exhibits it.
/// Customer indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintViolation {
    /// m[i][j] != m[j][i].
    Asymmetric { i: usize, j: usize },
    /// m[i][j] = m[j][k] = 1 but m[i][k] = 0.
    NonTransitive { i: usize, j: usize, k: usize },
    /// m[i][i] = 1.
    DiagonalSet { i: usize },
    /// A connected group's total demand exceeds capacity.
    CapacityExceeded { group: Vec<usize>, load: u64 },
}

impl ConstraintMatrix {
    /// All-zero matrix (every customer alone).
    pub fn zeros(n: usize) -> Self {
        ConstraintMatrix {
            n,
            data: vec![0; n * n],
        }
    }

    /// Number of customers.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Whether customers `i` and `j` (1-based) share a route.
    pub fn same_route(&self, i: usize, j: usize) -> bool {
        self.data[(i - 1) * self.n + (j - 1)] == 1
    }

    /// Set one entry (1-based indices); does not touch the mirror entry.
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[(i - 1) * self.n + (j - 1)] = value as u8;
    }

    /// Build the matrix implied by a feasible solution's routes.
    pub fn from_solution(instance: &CvrpInstance, solution: &CvrpSolution) -> Result<Self> {
        instance.check_feasible(solution)?;
        let n = instance.customer_count();
        let mut m = ConstraintMatrix::zeros(n);
        for route in &solution.routes {
            for &a in route {
                for &b in route {
                    if a != b {
                        m.set(a, b, true);
                    }
                }
            }
        }
        Ok(m)
    }

    /// Threshold symmetrised probabilities at 0.5 (strictly above becomes an
    /// edge), forcing the diagonal to zero.
    pub fn from_probabilities(probs: &Array2<f64>) -> Result<Self> {
        let (r, c) = probs.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!(
                "probability matrix is {r}x{c}, expected square"
            )));
        }
        let mut m = ConstraintMatrix::zeros(r);
        for i in 0..r {
            for j in 0..r {
                if i != j {
                    let avg = 0.5 * (probs[[i, j]] + probs[[j, i]]);
                    m.data[i * r + j] = (avg > 0.5) as u8;
                }
            }
        }
        Ok(m)
    }

    /// Dense float view (0.0 / 1.0) for model inputs.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n, self.n), |(i, j)| self.data[i * self.n + j] as f64)
    }

    /// Number of ones in the matrix.
    pub fn ones_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Connected groups of customers (1-based), treating any set entry as an
    /// undirected edge; singletons form their own group.  Groups are ordered
    /// by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n;
        let mut seen = vec![false; n];
        let mut groups = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut stack = vec![start];
            let mut group = Vec::new();
            seen[start] = true;
            while let Some(i) = stack.pop() {
                group.push(i + 1);
                for j in 0..n {
                    if !seen[j] && (self.data[i * n + j] == 1 || self.data[j * n + i] == 1) {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            group.sort_unstable();
            groups.push(group);
        }
        groups
    }

    /// Close the same-route relation transitively: customers connected by
    /// any chain of edges end up pairwise connected.  Predicted masks are
    /// used raw by default; closure is an opt-in experiment.
    pub fn transitive_closure(&self) -> Self {
        let mut m = ConstraintMatrix::zeros(self.n);
        for group in self.components() {
            for &a in &group {
                for &b in &group {
                    if a != b {
                        m.set(a, b, true);
                    }
                }
            }
        }
        m
    }

    /// Check structural invariants and, optionally, that every group fits in
    /// one vehicle.  Returns all violations found (empty means valid);
    /// errors only when the matrix does not match the instance size.
    pub fn validate(
        &self,
        instance: &CvrpInstance,
        check_capacity: bool,
    ) -> Result<Vec<ConstraintViolation>> {
        let n = self.n;
        if n != instance.customer_count() {
            return Err(Error::DimensionMismatch(format!(
                "matrix covers {n} customers but instance has {}",
                instance.customer_count()
            )));
        }
        let mut violations = Vec::new();
        for i in 0..n {
            if self.data[i * n + i] == 1 {
                violations.push(ConstraintViolation::DiagonalSet { i: i + 1 });
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if self.data[i * n + j] != self.data[j * n + i] {
                    violations.push(ConstraintViolation::Asymmetric { i: i + 1, j: j + 1 });
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j || self.data[i * n + j] == 0 {
                    continue;
                }
                for k in 0..n {
                    if k == i || k == j {
                        continue;
                    }
                    if self.data[j * n + k] == 1 && self.data[i * n + k] == 0 {
                        violations.push(ConstraintViolation::NonTransitive {
                            i: i + 1,
                            j: j + 1,
                            k: k + 1,
                        });
                    }
                }
            }
        }
        if check_capacity {
            for group in self.components() {
                let load: u64 = group.iter().map(|&c| instance.demand(c) as u64).sum();
                if load > instance.capacity as u64 {
                    violations.push(ConstraintViolation::CapacityExceeded { group, load });
                }
            }
        }
        Ok(violations)
    }
}

/// Area under the ROC curve of predicted probabilities against a binary
/// matrix, over the strict upper triangle.  Uses midranks, so tied scores
/// contribute their average rank.  Undefined (error) when the truth has only
/// one class.
pub fn auc_score(pred: &Array2<f64>, truth: &ConstraintMatrix) -> Result<f64> {
    let n = truth.len();
    if pred.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "probability matrix is {:?}, expected ({n}, {n})",
            pred.dim()
        )));
    }
    let mut scored: Vec<(f64, bool)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 1..=n {
        for j in (i + 1)..=n {
            scored.push((pred[[i - 1, j - 1]], truth.same_route(i, j)));
        }
    }
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Undefined(format!(
            "AUC needs both classes, truth has {positives} positive and {negatives} negative pairs"
        )));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // Midrank sum over positives.
    let mut rank_sum = 0.0f64;
    let mut idx = 0;
    while idx < scored.len() {
        let mut end = idx;
        while end + 1 < scored.len() && scored[end + 1].0 == scored[idx].0 {
            end += 1;
        }
        let midrank = (idx + end) as f64 / 2.0 + 1.0;
        for entry in &scored[idx..=end] {
            if entry.1 {
                rank_sum += midrank;
            }
        }
        idx = end + 1;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
