//! Optimal prediction-to-target assignment and the set-prediction loss.
//!
//! Rows of a [`CostMatrix`] are predictions (object queries), columns are
//! ground-truth objects, and every column is matched to a distinct row.

use thiserror::Error;

use crate::grad::{GradError, Graph, Scalar, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("need at least as many predictions as targets, got {rows} rows and {cols} columns")]
    Dimension { rows: usize, cols: usize },
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("target {index} has {found} coordinates, predictions have {expected}")]
    Arity {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, MatchingError>;

/// Row-major `rows × cols` matrix of finite costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        assert_eq!(data.len(), rows * cols, "cost data length");
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatchingError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged cost rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Cost of `pairs`, summed in column order.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        let mut by_col: Vec<_> = pairs.to_vec();
        by_col.sort_by_key(|&(_, c)| c);
        by_col.iter().fold(0.0, |s, &(r, c)| s + self.get(r, c))
    }
}

/// Injective map from rows onto all columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Column matched to each row, if any.
    pub fn row_to_col(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(r, c) in &self.pairs {
            out[r] = Some(c);
        }
        out
    }
}

/// Minimum-cost assignment of every column to a distinct row, O(M²·N).
///
/// Shortest augmenting paths with dual potentials. Comparisons are strict,
/// so among equal-cost alternatives the lowest row index is reached first and
/// the result is deterministic.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n_rows, n_cols) = (cost.rows, cost.cols);
    if n_rows < n_cols {
        return Err(MatchingError::Dimension {
            rows: n_rows,
            cols: n_cols,
        });
    }
    if n_cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Solve the transposed problem: targets are the agents (1..=n), predictions
    // the jobs (1..=m); index 0 is the virtual source.
    let (n, m) = (n_cols, n_rows);
    let a = |i: usize, j: usize| cost.get(j - 1, i - 1);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    pairs.sort_unstable();
    let total_cost = cost.total(&pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Weights of the matching cost and the set loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub coord: f64,
    /// Extra factor on the classification term of unmatched predictions.
    pub no_object: f64,
    /// Weight of the stop-flag term of sequence heads.
    pub stop: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            coord: 5.0,
            no_object: 1.0,
            stop: 1.0,
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// `cost(i, j) = −λ_cls·p_object[i] + λ_coord·‖coords[i] − targets[j]‖₁`,
/// with `coords` a flat `N × dim` array.
pub fn build_cost(p_object: &[f64], coords: &[f64], dim: usize, targets: &[Vec<f64>], w: &LossWeights) -> Result<CostMatrix> {
    let n = p_object.len();
    assert_eq!(coords.len(), n * dim, "coords must be N × dim");
    for (index, t) in targets.iter().enumerate() {
        if t.len() != dim {
            return Err(MatchingError::Arity {
                index,
                expected: dim,
                found: t.len(),
            });
        }
    }
    let mut data = Vec::with_capacity(n * targets.len());
    for i in 0..n {
        let c = &coords[i * dim..(i + 1) * dim];
        for t in targets {
            data.push(-w.cls * p_object[i] + w.coord * l1(c, t));
        }
    }
    CostMatrix::new(n, targets.len(), data)
}

/// Cost for variable-length targets against fixed-length predicted point
/// sequences: only the first `targets[j].len()` predicted coordinates enter
/// the L1 term. `coords` is `N × max_len`.
pub fn build_cost_prefix(
    p_object: &[f64],
    coords: &[f64],
    max_len: usize,
    targets: &[Vec<f64>],
    w: &LossWeights,
) -> Result<CostMatrix> {
    let n = p_object.len();
    assert_eq!(coords.len(), n * max_len, "coords must be N × max_len");
    for (index, t) in targets.iter().enumerate() {
        if t.len() > max_len || t.len() % 2 != 0 {
            return Err(MatchingError::Arity {
                index,
                expected: max_len,
                found: t.len(),
            });
        }
    }
    let mut data = Vec::with_capacity(n * targets.len());
    for i in 0..n {
        let c = &coords[i * max_len..(i + 1) * max_len];
        for t in targets {
            data.push(-w.cls * p_object[i] + w.coord * l1(&c[..t.len()], t));
        }
    }
    CostMatrix::new(n, targets.len(), data)
}

/// Object probability of each row of `[N, 2]` logits, class 0 = object.
fn object_probs<T: Scalar>(g: &Graph<T>, logits: Var) -> Vec<f64> {
    g.data(logits)
        .chunks(2)
        .map(|r| {
            let (a, b) = (r[0].as_f64(), r[1].as_f64());
            1.0 / (1.0 + (b - a).exp())
        })
        .collect()
}

fn check_logits<T: Scalar>(g: &Graph<T>, logits: Var, rows: usize) -> Result<()> {
    let s = g.shape(logits);
    if s != [rows, 2] {
        return Err(GradError::Shape {
            op: "set_loss",
            lhs: s.to_vec(),
            rhs: vec![rows, 2],
        }
        .into());
    }
    Ok(())
}

/// Classification term: matched rows target "object" (class 0) with weight
/// `λ_cls`, unmatched rows target "no object" (class 1) with `λ_cls·no_object`.
fn class_term<T: Scalar>(g: &mut Graph<T>, logits: Var, assignment: &Assignment, n: usize, w: &LossWeights) -> Result<Var> {
    let matched = assignment.row_to_col(n);
    let targets: Vec<usize> = matched.iter().map(|m| if m.is_some() { 0 } else { 1 }).collect();
    let weights: Vec<f64> = matched
        .iter()
        .map(|m| if m.is_some() { w.cls } else { w.cls * w.no_object })
        .collect();
    Ok(g.cross_entropy(logits, &targets, &weights)?)
}

/// Set-prediction loss for fixed-arity objects.
///
/// `logits: [N, 2]` (object, no-object), `coords: [N, dim]`. The assignment is
/// computed on current values and treated as a constant, so gradients reach
/// the class scores and coordinates only.
pub fn set_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    coords: Var,
    targets: &[Vec<f64>],
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let s = g.shape(coords).to_vec();
    if s.len() != 2 {
        return Err(GradError::Shape {
            op: "set_loss",
            lhs: s,
            rhs: vec![],
        }
        .into());
    }
    let (n, dim) = (s[0], s[1]);
    check_logits(g, logits, n)?;
    let p = object_probs(g, logits);
    let c: Vec<f64> = g.data(coords).iter().map(|v| v.as_f64()).collect();
    let assignment = hungarian(&build_cost(&p, &c, dim, targets, w)?)?;

    let cls = class_term(g, logits, &assignment, n, w)?;
    let mut target = vec![0.0; n * dim];
    let mut weights = vec![0.0; n * dim];
    for &(r, col) in &assignment.pairs {
        target[r * dim..(r + 1) * dim].copy_from_slice(&targets[col]);
        weights[r * dim..(r + 1) * dim].fill(w.coord);
    }
    let reg = g.l1_loss(coords, &target, &weights)?;
    Ok((g.add(cls, reg)?, assignment))
}

/// Set-prediction loss for variable-length point sequences.
///
/// `coords: [N, 2L]` holds `L` predicted points per query and `stop: [N, L]`
/// the stop logits. A target with `m` points supervises the first `m` points,
/// and the stop flag is 0 for steps `< m − 1` and 1 at step `m − 1`; later
/// steps are unsupervised.
pub fn set_loss_sequences<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    coords: Var,
    stop: Var,
    targets: &[Vec<f64>],
    w: &LossWeights,
) -> Result<(Var, Assignment)> {
    let s = g.shape(coords).to_vec();
    if s.len() != 2 || !s[1].is_multiple_of(2) || g.shape(stop) != [s[0], s[1] / 2] {
        return Err(GradError::Shape {
            op: "set_loss_sequences",
            lhs: s,
            rhs: g.shape(stop).to_vec(),
        }
        .into());
    }
    let (n, width) = (s[0], s[1]);
    let steps = width / 2;
    check_logits(g, logits, n)?;
    let p = object_probs(g, logits);
    let c: Vec<f64> = g.data(coords).iter().map(|v| v.as_f64()).collect();
    let assignment = hungarian(&build_cost_prefix(&p, &c, width, targets, w)?)?;

    let cls = class_term(g, logits, &assignment, n, w)?;
    let mut target = vec![0.0; n * width];
    let mut weights = vec![0.0; n * width];
    let mut stop_t = vec![0.0; n * steps];
    let mut stop_w = vec![0.0; n * steps];
    for &(r, col) in &assignment.pairs {
        let t = &targets[col];
        target[r * width..r * width + t.len()].copy_from_slice(t);
        weights[r * width..r * width + t.len()].fill(w.coord);
        let m = t.len() / 2;
        for k in 0..m {
            stop_w[r * steps + k] = w.stop;
        }
        if m > 0 {
            stop_t[r * steps + m - 1] = 1.0;
        }
    }
    let reg = g.l1_loss(coords, &target, &weights)?;
    let stp = g.bce_with_logits(stop, &stop_t, &stop_w)?;
    let loss = g.add_scalars(&[cls, reg, stp])?;
    Ok((loss, assignment))
}
