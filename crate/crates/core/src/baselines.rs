//! Linear and tree-ensemble baselines for SBP prediction from the raw
//! biomarker table: Lasso by cyclic coordinate descent and a random forest
//! of variance-reduction regression trees.

use crate::error::{Error, Result};
use crate::numerics::Rng;
use serde::{Deserialize, Serialize};

// ------------------------------------------------------------------- lasso

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoModel {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl LassoModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    pub fn n_nonzero(&self) -> usize {
        self.coefficients.iter().filter(|c| **c != 0.0).count()
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Minimizes (1/2n)||y - b0 - X beta||^2 + lambda * ||beta||_1 with an
/// unpenalized intercept. Residuals are updated incrementally; convergence
/// is max absolute coefficient change below `tol`.
pub fn lasso_fit(
    x: &[Vec<f64>],
    y: &[f64],
    lambda: f64,
    max_iter: usize,
    tol: f64,
) -> Result<LassoModel> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Config("design/target size mismatch".into()));
    }
    let p = x[0].len();
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::Config("ragged design matrix".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let nf = n as f64;
    // Column squared norms divided by n; the coordinate update divides by
    // these, so constant-zero columns must stay at zero.
    let col_sq: Vec<f64> = (0..p)
        .map(|j| x.iter().map(|row| row[j] * row[j]).sum::<f64>() / nf)
        .collect();

    let mut beta = vec![0.0; p];
    let mut intercept = y.iter().sum::<f64>() / nf;
    let mut residual: Vec<f64> = y.iter().map(|v| v - intercept).collect();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut max_delta: f64 = 0.0;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            // partial residual correlation with coordinate j
            let rho = x
                .iter()
                .zip(&residual)
                .map(|(row, r)| row[j] * (r + row[j] * beta[j]))
                .sum::<f64>()
                / nf;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (row, r) in x.iter().zip(residual.iter_mut()) {
                    *r -= row[j] * delta;
                }
                beta[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        // re-center the intercept on the current residual
        let shift = residual.iter().sum::<f64>() / nf;
        if shift != 0.0 {
            intercept += shift;
            for r in residual.iter_mut() {
                *r -= shift;
            }
        }
        max_delta = max_delta.max(shift.abs());
        if max_delta < tol {
            converged = true;
            break;
        }
    }
    Ok(LassoModel {
        coefficients: beta,
        intercept,
        lambda,
        iterations,
        converged,
    })
}

/// Lasso objective value, exposed for monotonicity checks.
pub fn lasso_objective(x: &[Vec<f64>], y: &[f64], model: &LassoModel) -> f64 {
    let n = x.len() as f64;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(row, t)| {
            let r = t - model.predict(row);
            r * r
        })
        .sum();
    rss / (2.0 * n) + model.lambda * model.coefficients.iter().map(|c| c.abs()).sum::<f64>()
}

// ------------------------------------------------------------------ forest

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: 12,
            min_leaf: 5,
            features_per_split: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf { value } => *value,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    trees: Vec<TreeNode>,
}

impl ForestModel {
    /// Mean of the per-tree predictions.
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    score: f64, // weighted child SSE; lower is better
}

fn node_sse(x: &[Vec<f64>], y: &[f64], idx: &[usize]) -> f64 {
    let _ = x;
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (y[i] - mean) * (y[i] - mean)).sum()
}

fn best_split(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    features: &[usize],
    min_leaf: usize,
) -> Option<SplitChoice> {
    let mut best: Option<SplitChoice> = None;
    for &f in features {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        // prefix sums over the sorted order for O(n) threshold scan
        let n = order.len();
        let mut prefix_sum = 0.0;
        let mut prefix_sq = 0.0;
        let total_sum: f64 = order.iter().map(|&i| y[i]).sum();
        let total_sq: f64 = order.iter().map(|&i| y[i] * y[i]).sum();
        for split_at in 1..n {
            let i = order[split_at - 1];
            prefix_sum += y[i];
            prefix_sq += y[i] * y[i];
            if split_at < min_leaf || n - split_at < min_leaf {
                continue;
            }
            let left_v = x[order[split_at - 1]][f];
            let right_v = x[order[split_at]][f];
            if left_v == right_v {
                continue; // ties cannot be separated by a threshold
            }
            let ln = split_at as f64;
            let rn = (n - split_at) as f64;
            let left_sse = prefix_sq - prefix_sum * prefix_sum / ln;
            let rs = total_sum - prefix_sum;
            let right_sse = (total_sq - prefix_sq) - rs * rs / rn;
            let score = left_sse + right_sse;
            let better = match &best {
                None => true,
                Some(b) => score < b.score,
            };
            if better {
                best = Some(SplitChoice {
                    feature: f,
                    threshold: 0.5 * (left_v + right_v),
                    score,
                });
            }
        }
    }
    best
}

fn grow_tree(
    x: &[Vec<f64>],
    y: &[f64],
    idx: &[usize],
    depth: usize,
    params: &ForestParams,
    rng: &mut Rng,
) -> TreeNode {
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
    if depth >= params.max_depth || idx.len() < 2 * params.min_leaf {
        return TreeNode::Leaf { value: mean };
    }
    if node_sse(x, y, idx) == 0.0 {
        return TreeNode::Leaf { value: mean };
    }
    let p = x[0].len();
    let mut features: Vec<usize> = (0..p).collect();
    rng.shuffle(&mut features);
    features.truncate(params.features_per_split.min(p));
    let Some(split) = best_split(x, y, idx, &features, params.min_leaf) else {
        return TreeNode::Leaf { value: mean };
    };
    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
        .iter()
        .partition(|&&i| x[i][split.feature] <= split.threshold);
    TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left: Box::new(grow_tree(x, y, &left_idx, depth + 1, params, rng)),
        right: Box::new(grow_tree(x, y, &right_idx, depth + 1, params, rng)),
    }
}

/// Fits a bagged ensemble: each tree sees a bootstrap resample and draws a
/// fresh random feature subset at every split. Tree seeds are derived from
/// `params.seed`, so tree order does not change individual trees.
pub fn forest_fit(x: &[Vec<f64>], y: &[f64], params: &ForestParams) -> Result<ForestModel> {
    let n = x.len();
    if n == 0 || n != y.len() {
        return Err(Error::Config("design/target size mismatch".into()));
    }
    let p = x[0].len();
    if x.iter().any(|row| row.len() != p) {
        return Err(Error::Config("ragged design matrix".into()));
    }
    if params.n_trees == 0 || params.min_leaf == 0 || params.features_per_split == 0 {
        return Err(Error::Config("forest parameters must be >= 1".into()));
    }
    let base = Rng::new(params.seed).derive("forest");
    let trees: Vec<TreeNode> = (0..params.n_trees)
        .map(|t| {
            let mut rng = base.derive_index(t as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            grow_tree(x, y, &idx, 0, params, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        params: *params,
        trees,
    })
}

// -------------------------------------------------------------- comparison

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub rmsd: f64,
    pub nrmsd: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut out = String::from("model          RMSD      nRMSD     R^2\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<9.2} {:<9.3} {:.3}\n",
                r.model, r.rmsd, r.nrmsd, r.r2
            ));
        }
        out
    }
}

// ------------------------------------------------------------------- tests
