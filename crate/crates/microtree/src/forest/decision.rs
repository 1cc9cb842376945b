//! Single CART-style binary decision tree grown by Gini impurity.
//!
//! Nodes are stored as sklearn-style parallel arrays so a trained tree
//! serializes to plain JSON arrays and importances can be recomputed from
//! a deserialized model. `feature = -1` marks a leaf.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::FeatureRow;

use super::ForestConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<i32>,
    pub right: Vec<i32>,
    /// Up-move fraction of the node's training samples.
    pub value: Vec<f64>,
    /// Gini impurity of the node's training samples.
    pub impurity: Vec<f64>,
    /// Training samples reaching the node (bootstrap multiplicities count).
    pub n_samples: Vec<u32>,
}

impl DecisionTree {
    /// A single-leaf tree with a fixed output, mostly for tests.
    pub fn leaf(up_fraction: f64) -> Self {
        Self {
            feature: vec![-1],
            threshold: vec![0.0],
            left: vec![-1],
            right: vec![-1],
            value: vec![up_fraction],
            impurity: vec![2.0 * up_fraction * (1.0 - up_fraction)],
            n_samples: vec![1],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    /// Leaf up-fraction for a feature vector. Assumes the right length.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        loop {
            let f = self.feature[node];
            if f < 0 {
                return self.value[node];
            }
            node = if x[f as usize] <= self.threshold[node] {
                self.left[node] as usize
            } else {
                self.right[node] as usize
            };
        }
    }

    /// Per-feature total of weighted Gini decreases for this tree.
    pub fn gini_decreases(&self, n_features: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_features];
        let root_n = self.n_samples[0] as f64;
        if root_n == 0.0 {
            return out;
        }
        for node in 0..self.n_nodes() {
            let f = self.feature[node];
            if f < 0 {
                continue;
            }
            let (l, r) = (self.left[node] as usize, self.right[node] as usize);
            let n = self.n_samples[node] as f64;
            let nl = self.n_samples[l] as f64;
            let nr = self.n_samples[r] as f64;
            let child = (nl * self.impurity[l] + nr * self.impurity[r]) / n;
            out[f as usize] += (n / root_n) * (self.impurity[node] - child);
        }
        out
    }

    /// Structural sanity used by deserialization: children in range,
    /// leaf values in [0, 1], feature indices below `n_features`.
    pub fn check(&self, n_features: usize) -> bool {
        let n = self.n_nodes();
        if n == 0
            || self.threshold.len() != n
            || self.left.len() != n
            || self.right.len() != n
            || self.value.len() != n
            || self.impurity.len() != n
            || self.n_samples.len() != n
        {
            return false;
        }
        for i in 0..n {
            if !(0.0..=1.0).contains(&self.value[i]) {
                return false;
            }
            if self.feature[i] >= 0 {
                if self.feature[i] as usize >= n_features {
                    return false;
                }
                let (l, r) = (self.left[i], self.right[i]);
                if l <= i as i32 || r <= i as i32 || l as usize >= n || r as usize >= n {
                    return false;
                }
            }
        }
        true
    }
}

fn gini(pos: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

/// Grows one tree on a bootstrap (or identity) sample.
///
/// Split search is deterministic given the RNG stream: candidate features
/// are evaluated in ascending index order, thresholds in ascending value
/// order, and a candidate replaces the incumbent only on a strictly larger
/// impurity decrease — so ties resolve to the lowest feature index, then
/// the lowest threshold.
pub fn grow_tree<R: Rng>(
    rows: &[FeatureRow],
    n_features: usize,
    config: &ForestConfig,
    rng: &mut R,
) -> DecisionTree {
    let n = rows.len();
    let indices: Vec<u32> = if config.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
    } else {
        (0..n as u32).collect()
    };

    let mut tree = DecisionTree {
        feature: Vec::new(),
        threshold: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
        value: Vec::new(),
        impurity: Vec::new(),
        n_samples: Vec::new(),
    };
    build_node(&mut tree, rows, n_features, config, indices, 0, rng);
    tree
}

fn push_node(tree: &mut DecisionTree, up_frac: f64, imp: f64, n: u32) -> usize {
    tree.feature.push(-1);
    tree.threshold.push(0.0);
    tree.left.push(-1);
    tree.right.push(-1);
    tree.value.push(up_frac);
    tree.impurity.push(imp);
    tree.n_samples.push(n);
    tree.feature.len() - 1
}

fn build_node<R: Rng>(
    tree: &mut DecisionTree,
    rows: &[FeatureRow],
    n_features: usize,
    config: &ForestConfig,
    idxs: Vec<u32>,
    depth: usize,
    rng: &mut R,
) -> usize {
    let total = idxs.len() as f64;
    let pos = idxs.iter().filter(|&&i| rows[i as usize].label == 1).count() as f64;
    let node_gini = gini(pos, total);
    let node = push_node(tree, pos / total, node_gini, idxs.len() as u32);

    let pure = pos == 0.0 || pos == total;
    if depth >= config.max_depth || pure || idxs.len() < 2 * config.min_samples_leaf {
        return node;
    }

    // mtry candidate features, evaluated in ascending order.
    let mut candidates =
        rand::seq::index::sample(rng, n_features, config.features_per_split.min(n_features))
            .into_vec();
    candidates.sort_unstable();

    let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
    let mut scratch: Vec<(f64, u8)> = Vec::with_capacity(idxs.len());
    for &f in &candidates {
        scratch.clear();
        scratch.extend(
            idxs.iter()
                .map(|&i| (rows[i as usize].predictors[f], rows[i as usize].label)),
        );
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));

        let mut left_n = 0.0;
        let mut left_pos = 0.0;
        for cut in 0..scratch.len() - 1 {
            left_n += 1.0;
            left_pos += scratch[cut].1 as f64;
            if scratch[cut].0 == scratch[cut + 1].0 {
                continue; // no threshold separates equal values
            }
            let right_n = total - left_n;
            if (left_n as usize) < config.min_samples_leaf
                || (right_n as usize) < config.min_samples_leaf
            {
                continue;
            }
            let right_pos = pos - left_pos;
            let child =
                (left_n * gini(left_pos, left_n) + right_n * gini(right_pos, right_n)) / total;
            let decrease = node_gini - child;
            if decrease > 1e-15 && best.map_or(true, |(d, _, _)| decrease > d) {
                let thr = 0.5 * (scratch[cut].0 + scratch[cut + 1].0);
                best = Some((decrease, f, thr));
            }
        }
    }

    let Some((_, f, thr)) = best else {
        return node;
    };

    let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idxs
        .into_iter()
        .partition(|&i| rows[i as usize].predictors[f] <= thr);

    let left_id = build_node(tree, rows, n_features, config, left_idx, depth + 1, rng);
    let right_id = build_node(tree, rows, n_features, config, right_idx, depth + 1, rng);
    tree.feature[node] = f as i32;
    tree.threshold[node] = thr;
    tree.left[node] = left_id as i32;
    tree.right[node] = right_id as i32;
    node
}
