use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAF_RIDGE: f64 = 1.0;

/// Gains within this relative distance count as ties, which are resolved
/// by the lower feature index and then the lower threshold.
pub(crate) const GAIN_TIE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_leaves == 0 {
            return Err(Error::config("gbdt.num_leaves", "must be >= 1"));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::config("gbdt.min_samples_leaf", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value }],
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// `true` if `gain` beats `best` by more than the tie tolerance.
pub(crate) fn improves(gain: f64, best: Option<f64>) -> bool {
    match best {
        None => gain > 0.0,
        Some(b) => gain > b + GAIN_TIE * b.abs().max(1e-300),
    }
}

/// Minimum gain for a split to be worth making, relative to the node's
/// target energy so that constant targets never split on rounding noise.
pub(crate) fn min_gain(sum: f64, sum_sq: f64) -> f64 {
    1e-12 * sum_sq.max(sum * sum).max(1e-300)
}

pub(crate) fn leaf_value(rows: &mut [u32], grad: &[f64], hess: &[f64]) -> f64 {
    rows.sort_unstable();
    let g: f64 = rows.iter().map(|&r| grad[r as usize]).sum();
    let h: f64 = rows.iter().map(|&r| hess[r as usize]).sum();
    g / (h + LEAF_RIDGE)
}

struct Leaf {
    node: usize,
    depth: usize,
    /// Row indices of this leaf, one list per feature, each sorted by that
    /// feature's value (ties by row index).
    sorted: Vec<Vec<u32>>,
    best: Option<Split>,
}

fn best_split(sorted: &[Vec<u32>], x: &Tensor, grad: &[f64], min_leaf: usize) -> Option<Split> {
    let n = sorted[0].len();
    if n < 2 * min_leaf {
        return None;
    }
    let cols = x.cols();
    let data = x.data();
    let total: f64 = sorted[0].iter().map(|&r| grad[r as usize]).sum();
    let sum_sq: f64 = sorted[0].iter().map(|&r| grad[r as usize] * grad[r as usize]).sum();
    let parent = total * total / n as f64;
    let mut best: Option<Split> = None;
    for (f, order) in sorted.iter().enumerate() {
        let mut left = 0.0;
        for pos in 0..n - 1 {
            let r = order[pos] as usize;
            left += grad[r];
            let nl = pos + 1;
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let here = data[r * cols + f];
            let next = data[order[pos + 1] as usize * cols + f];
            if next <= here {
                continue;
            }
            let right = total - left;
            let gain = left * left / nl as f64 + right * right / nr as f64 - parent;
            if improves(gain, best.map(|b| b.gain)) {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (here + next),
                    gain,
                });
            }
        }
    }
    best.filter(|b| b.gain > min_gain(total, sum_sq))
}

/// Row indices ordered by each feature column, ties by row index.
pub fn presort(x: &Tensor) -> Vec<Vec<u32>> {
    let (rows, cols) = x.dims2();
    let data = x.data();
    (0..cols)
        .map(|f| {
            let mut idx: Vec<u32> = (0..rows as u32).collect();
            idx.sort_by(|&a, &b| {
                data[a as usize * cols + f]
                    .total_cmp(&data[b as usize * cols + f])
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

/// Leaf-wise (best-first) exact-greedy regression tree on `grad` targets.
/// Leaf values are Newton steps `Σg / (Σh + 1)`.
pub fn fit_regression_tree(x: &Tensor, grad: &[f64], hess: &[f64], params: &TreeParams) -> Result<RegressionTree> {
    fit_presorted(x, &presort(x), grad, hess, params)
}

/// [`fit_regression_tree`] with the column orders from [`presort`] supplied,
/// so boosting can sort once per ensemble rather than once per tree.
pub fn fit_presorted(
    x: &Tensor,
    order: &[Vec<u32>],
    grad: &[f64],
    hess: &[f64],
    params: &TreeParams,
) -> Result<RegressionTree> {
    params.validate()?;
    let (rows, cols) = x.dims2();
    if grad.len() != rows || hess.len() != rows {
        return Err(Error::shape("fit_regression_tree targets", rows, grad.len().min(hess.len())));
    }
    if order.len() != cols || order.iter().any(|o| o.len() != rows) {
        return Err(Error::shape("fit_regression_tree presorted columns", cols, order.len()));
    }
    if rows == 0 {
        return Err(Error::InvalidInput("cannot fit a tree on zero rows".into()));
    }
    if cols == 0 {
        let mut all: Vec<u32> = (0..rows as u32).collect();
        return Ok(RegressionTree::leaf(leaf_value(&mut all, grad, hess)));
    }
    let data = x.data();
    let sorted = order.to_vec();

    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let best = best_split(&sorted, x, grad, params.min_samples_leaf);
    let mut leaves = vec![Leaf {
        node: 0,
        depth: 0,
        sorted,
        best,
    }];
    let mut go_left = vec![false; rows];

    while leaves.len() < params.num_leaves {
        let mut pick: Option<(usize, f64)> = None;
        for (i, leaf) in leaves.iter().enumerate() {
            if leaf.depth >= params.max_depth {
                continue;
            }
            if let Some(s) = leaf.best {
                let better = match pick {
                    None => true,
                    Some((j, g)) => improves(s.gain, Some(g)) || (!improves(g, Some(s.gain)) && leaf.node < leaves[j].node),
                };
                if better {
                    pick = Some((i, s.gain));
                }
            }
        }
        let Some((i, _)) = pick else { break };
        let leaf = leaves.swap_remove(i);
        let split = leaf.best.expect("picked leaves have a split");
        for &r in &leaf.sorted[0] {
            go_left[r as usize] = data[r as usize * cols + split.feature] <= split.threshold;
        }
        let (mut ls, mut rs) = (Vec::with_capacity(cols), Vec::with_capacity(cols));
        for order in leaf.sorted {
            let (l, r): (Vec<u32>, Vec<u32>) = order.into_iter().partition(|&r| go_left[r as usize]);
            ls.push(l);
            rs.push(r);
        }
        let left = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes[leaf.node] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right: left + 1,
        };
        for (node, sorted) in [(left, ls), (left + 1, rs)] {
            let best = best_split(&sorted, x, grad, params.min_samples_leaf);
            leaves.push(Leaf {
                node,
                depth: leaf.depth + 1,
                sorted,
                best,
            });
        }
    }
    for mut leaf in leaves {
        let value = leaf_value(&mut leaf.sorted[0], grad, hess);
        nodes[leaf.node] = TreeNode::Leaf { value };
    }
    Ok(RegressionTree { nodes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(depth: usize, leaves: usize, min_leaf: usize) -> TreeParams {
        TreeParams {
            max_depth: depth,
            num_leaves: leaves,
            min_samples_leaf: min_leaf,
        }
    }

    /// Naive reference: every candidate threshold is evaluated by
    /// partitioning the rows explicitly and summing from scratch.
    fn brute_tree(x: &Tensor, grad: &[f64], hess: &[f64], p: &TreeParams) -> RegressionTree {
        let (rows, cols) = x.dims2();
        let brute_split = |set: &[u32]| -> Option<Split> {
            if set.len() < 2 * p.min_samples_leaf {
                return None;
            }
            let total: f64 = set.iter().map(|&r| grad[r as usize]).sum();
            let sum_sq: f64 = set.iter().map(|&r| grad[r as usize].powi(2)).sum();
            let mut best: Option<Split> = None;
            for f in 0..cols {
                let mut vals: Vec<f64> = set.iter().map(|&r| x.get(r as usize, f)).collect();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let t = 0.5 * (w[0] + w[1]);
                    let (l, r): (Vec<u32>, Vec<u32>) = set.iter().partition(|&&i| x.get(i as usize, f) <= t);
                    if l.len() < p.min_samples_leaf || r.len() < p.min_samples_leaf {
                        continue;
                    }
                    let sl: f64 = l.iter().map(|&i| grad[i as usize]).sum();
                    let sr: f64 = r.iter().map(|&i| grad[i as usize]).sum();
                    let gain = sl * sl / l.len() as f64 + sr * sr / r.len() as f64 - total * total / set.len() as f64;
                    if improves(gain, best.map(|b| b.gain)) {
                        best = Some(Split {
                            feature: f,
                            threshold: t,
                            gain,
                        });
                    }
                }
            }
            best.filter(|b| b.gain > min_gain(total, sum_sq))
        };
        let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
        let all: Vec<u32> = (0..rows as u32).collect();
        let mut leaves = vec![(0usize, 0usize, all.clone(), brute_split(&all))];
        while leaves.len() < p.num_leaves {
            let mut pick: Option<usize> = None;
            for (i, l) in leaves.iter().enumerate() {
                if l.1 >= p.max_depth || l.3.is_none() {
                    continue;
                }
                let g = l.3.unwrap().gain;
                pick = match pick {
                    None => Some(i),
                    Some(j) => {
                        let gj = leaves[j].3.unwrap().gain;
                        if improves(g, Some(gj)) || (!improves(gj, Some(g)) && l.0 < leaves[j].0) {
                            Some(i)
                        } else {
                            Some(j)
                        }
                    }
                };
            }
            let Some(i) = pick else { break };
            let (node, depth, set, split) = leaves.swap_remove(i);
            let s = split.unwrap();
            let (l, r): (Vec<u32>, Vec<u32>) = set.iter().partition(|&&i| x.get(i as usize, s.feature) <= s.threshold);
            let left = nodes.len();
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes[node] = TreeNode::Split {
                feature: s.feature,
                threshold: s.threshold,
                left,
                right: left + 1,
            };
            let bl = brute_split(&l);
            let br = brute_split(&r);
            leaves.push((left, depth + 1, l, bl));
            leaves.push((left + 1, depth + 1, r, br));
        }
        for (node, _, mut set, _) in leaves {
            nodes[node] = TreeNode::Leaf {
                value: leaf_value(&mut set, grad, hess),
            };
        }
        RegressionTree { nodes }
    }

    #[test]
    fn constant_target_is_single_leaf() {
        let x = Tensor::matrix(6, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = vec![0.5; 6];
        let h = vec![0.25; 6];
        let t = fit_regression_tree(&x, &g, &h, &params(4, 8, 1)).unwrap();
        assert_eq!(t.leaf_count(), 1);
        assert!((t.predict_row(&[3.0]) - 3.0 / 2.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_split_is_found() {
        let xs = [0.1, 0.5, 0.9, 2.0, 2.5, 3.3];
        let x = Tensor::matrix(6, 2, xs.iter().flat_map(|&v| [v, 7.0 - v * v]).collect()).unwrap();
        let g: Vec<f64> = xs.iter().map(|&v| if v < 1.5 { -1.0 } else { 1.0 }).collect();
        let h = vec![1.0; 6];
        let t = fit_regression_tree(&x, &g, &h, &params(1, 25, 1)).unwrap();
        assert_eq!(t.depth(), 1);
        match t.nodes[0] {
            TreeNode::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert!((threshold - 1.45).abs() < 1e-15);
            }
            _ => panic!("expected a split"),
        }
        assert!((t.predict_row(&[0.0, 0.0]) + 0.75).abs() < 1e-15);
        assert!((t.predict_row(&[3.0, 0.0]) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn one_leaf_never_splits() {
        let x = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = fit_regression_tree(&x, &[1.0, -1.0, 1.0, -1.0], &[1.0; 4], &params(5, 1, 1)).unwrap();
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn respects_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = 150;
        let x = Tensor::matrix(rows, 3, (0..rows * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let g: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = vec![0.5; rows];
        let t = fit_regression_tree(&x, &g, &h, &params(3, 6, 10)).unwrap();
        assert!(t.leaf_count() <= 6);
        assert!(t.depth() <= 3);
        for node in &t.nodes {
            if let TreeNode::Split { left, right, .. } = node {
                assert!(*left < t.nodes.len() && *right < t.nodes.len());
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..50 {
            let rows = rng.random_range(2..=200);
            let cols = rng.random_range(1..=4);
            let discrete = case % 3 == 0;
            let data = (0..rows * cols)
                .map(|_| {
                    if discrete {
                        f64::from(rng.random_range(0..6))
                    } else {
                        rng.random_range(-5.0..5.0)
                    }
                })
                .collect();
            let x = Tensor::matrix(rows, cols, data).unwrap();
            let g: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..0.25)).collect();
            let p = params(rng.random_range(1..6), rng.random_range(1..26), rng.random_range(1..6));
            let fast = fit_regression_tree(&x, &g, &h, &p).unwrap();
            let slow = brute_tree(&x, &g, &h, &p);
            assert_eq!(fast, slow, "case {case}");
        }
    }
}
