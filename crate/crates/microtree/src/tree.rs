//! Non-recombining pricing tree with state-dependent factors.
//!
//! Each node carries a price, a mapped market state and the last few move
//! directions. Children grow with the state's `(u, d)` and edges carry the
//! state's risk-neutral probability, so the discounted price process is a
//! martingale node by node. Without aggregation a depth-`N` tree holds
//! exactly `2^(N+1) - 1` nodes; optional per-level clustering caps the
//! exponential growth by greedily merging the closest nodes under
//! `w_price * |S_i - S_j| + w_hist * hamming(h_i, h_j)`.

use std::collections::BinaryHeap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::StateTable;
use crate::error::{Error, Result};

/// Move-history length carried per node, matching the five lagged-return
/// features the probability model sees.
pub const HISTORY_LEN: usize = 5;

/// Default hard cap on total node count, checked before allocation.
pub const DEFAULT_NODE_CAP: u64 = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Move {
    Up,
    Down,
}

/// Last-`HISTORY_LEN` move directions, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MoveHistory(Vec<Move>);

impl MoveHistory {
    pub fn push(&self, mv: Move) -> Self {
        let mut moves = self.0.clone();
        moves.push(mv);
        if moves.len() > HISTORY_LEN {
            moves.remove(0);
        }
        Self(moves)
    }

    pub fn moves(&self) -> &[Move] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Positionwise mismatch count; a length difference counts fully.
    pub fn hamming(&self, other: &Self) -> f64 {
        let mismatched = self
            .0
            .iter()
            .zip(&other.0)
            .filter(|(a, b)| a != b)
            .count();
        let extra = self.0.len().abs_diff(other.0.len());
        (mismatched + extra) as f64
    }
}

/// Maps a probability hint to the state whose bin contains it. Hints are
/// clamped to [0, 1]; bins are half-open with 1.0 in the top bin.
pub fn map_state(p_hint: f64, table: &StateTable) -> usize {
    let p = p_hint.clamp(0.0, 1.0);
    ((p * table.n_bins as f64) as usize).min(table.n_bins - 1)
}

/// Appends the move to the history and maps the child to its state: the
/// child's probability hint is the parent state's bin center nudged by
/// `epsilon` in the move direction. `epsilon = 0` reproduces the
/// simplified mapping where the state never drifts along a path.
pub fn transition_state(
    state_id: usize,
    history: &MoveHistory,
    mv: Move,
    table: &StateTable,
    epsilon: f64,
) -> (usize, MoveHistory) {
    let nudge = match mv {
        Move::Up => epsilon,
        Move::Down => -epsilon,
    };
    let p_hint = table.bin_center(state_id) + nudge;
    (map_state(p_hint, table), history.push(mv))
}

/// The state-transition rule shared by the tree builder and the Monte
/// Carlo engine, so both evolve identical dynamics by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRule {
    /// Momentum nudge added to the child's probability hint per move.
    pub epsilon: f64,
}

impl Default for TransitionRule {
    fn default() -> Self {
        Self { epsilon: 0.0 }
    }
}

impl TransitionRule {
    pub fn transition(
        &self,
        state_id: usize,
        history: &MoveHistory,
        mv: Move,
        table: &StateTable,
    ) -> (usize, MoveHistory) {
        transition_state(state_id, history, mv, table, self.epsilon)
    }
}

/// One node of the pricing tree. Children are indices into the next level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub node_id: usize,
    pub level: usize,
    pub price: f64,
    pub state_id: usize,
    /// Risk-neutral up probability of the node's state.
    pub p_up: f64,
    pub up_child: Option<usize>,
    pub down_child: Option<usize>,
    pub history: MoveHistory,
    /// Path-probability mass reaching this node (root carries 1).
    pub mass: f64,
}

/// Per-level clustering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub max_nodes_per_level: usize,
    pub w_price: f64,
    pub w_hist: f64,
}

impl AggregationConfig {
    pub fn new(max_nodes_per_level: usize) -> Self {
        Self {
            max_nodes_per_level,
            w_price: 1.0,
            w_hist: 0.1,
        }
    }
}

/// One merge performed during level aggregation, in pre-merge indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub level: usize,
    pub removed: usize,
    pub into: usize,
    pub distance: f64,
}

/// Build parameters for [`build_tree`].
#[derive(Debug, Clone, Copy)]
pub struct TreeBuildConfig {
    pub n_steps: usize,
    pub r: f64,
    /// Years per step; must match the table's calibration step.
    pub dt: f64,
    pub root_p_hint: f64,
    pub rule: TransitionRule,
    pub aggregation: Option<AggregationConfig>,
    pub max_total_nodes: u64,
}

impl TreeBuildConfig {
    pub fn new(n_steps: usize, r: f64, dt: f64) -> Self {
        Self {
            n_steps,
            r,
            dt,
            root_p_hint: 0.5,
            rule: TransitionRule::default(),
            aggregation: None,
            max_total_nodes: DEFAULT_NODE_CAP,
        }
    }
}

/// The constructed tree, level by level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricingTree {
    pub levels: Vec<Vec<TreeNode>>,
    pub n_steps: usize,
    pub dt: f64,
    pub r: f64,
    pub rule: TransitionRule,
    pub table: StateTable,
    pub merges: Vec<MergeEvent>,
    /// Wall-clock seconds spent in construction.
    pub build_seconds: f64,
}

impl PricingTree {
    pub fn node_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn terminal(&self) -> &[TreeNode] {
        self.levels.last().expect("tree has levels")
    }

    pub fn root(&self) -> &TreeNode {
        &self.levels[0][0]
    }

    /// Largest deviation of `p*u + (1-p)*d` from `e^{r dt}` over all
    /// non-terminal nodes.
    pub fn max_local_martingale_error(&self) -> f64 {
        let fwd = (self.r * self.dt).exp();
        let mut worst: f64 = 0.0;
        for level in &self.levels[..self.levels.len() - 1] {
            for node in level {
                let state = self.table.state(node.state_id);
                let lhs = node.p_up * state.u + (1.0 - node.p_up) * state.d;
                worst = worst.max((lhs - fwd).abs());
            }
        }
        worst
    }

    /// Relative deviation of the discounted terminal forward from the
    /// root price: `| e^{-r N dt} * E[S_N] / S_0 - 1 |`.
    pub fn discounted_forward_error(&self) -> f64 {
        let expected: f64 = self.terminal().iter().map(|n| n.mass * n.price).sum();
        let discounted = expected * (-self.r * self.n_steps as f64 * self.dt).exp();
        (discounted / self.root().price - 1.0).abs()
    }

    /// Flat per-node JSON dump for debugging and golden tests.
    pub fn to_json_dump(&self) -> Result<String> {
        #[derive(Serialize)]
        struct NodeDump {
            id: usize,
            level: usize,
            price: f64,
            state_id: usize,
            p_up: f64,
            up_child: Option<usize>,
            down_child: Option<usize>,
            mass: f64,
        }
        #[derive(Serialize)]
        struct Dump {
            n_steps: usize,
            dt: f64,
            r: f64,
            node_count: usize,
            nodes: Vec<NodeDump>,
        }
        let mut nodes = Vec::with_capacity(self.node_count());
        for (level_idx, level) in self.levels.iter().enumerate() {
            // Children live in the next level; offset their indices by the
            // global id of that level's first node.
            let base_next: usize = self.levels[..=level_idx].iter().map(Vec::len).sum();
            for node in level {
                nodes.push(NodeDump {
                    id: node.node_id,
                    level: node.level,
                    price: node.price,
                    state_id: node.state_id,
                    p_up: node.p_up,
                    up_child: node.up_child.map(|c| base_next + c),
                    down_child: node.down_child.map(|c| base_next + c),
                    mass: node.mass,
                });
            }
        }
        Ok(serde_json::to_string_pretty(&Dump {
            n_steps: self.n_steps,
            dt: self.dt,
            r: self.r,
            node_count: nodes.len(),
            nodes,
        })?)
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_dump()?)?;
        Ok(())
    }
}

/// Projected total node count used by the pre-flight cap check.
fn projected_nodes(n_steps: usize, aggregation: Option<&AggregationConfig>) -> u128 {
    match aggregation {
        None => {
            if n_steps >= 126 {
                return u128::MAX;
            }
            (1u128 << (n_steps + 1)) - 1
        }
        Some(cfg) => {
            let cap = cfg.max_nodes_per_level.max(1) as u128;
            let mut level = 1u128;
            let mut total = 1u128;
            for _ in 0..n_steps {
                level = (level * 2).min(cap);
                total += level;
            }
            total
        }
    }
}

/// Builds the tree level by level from a calibrated state table.
pub fn build_tree(s0: f64, table: &StateTable, config: &TreeBuildConfig) -> Result<PricingTree> {
    if !(s0 > 0.0) {
        return Err(Error::Domain(format!("spot must be positive (got {s0})")));
    }
    if config.n_steps < 1 {
        return Err(Error::Config("tree needs at least one step".into()));
    }
    if table.states.is_empty() {
        return Err(Error::Config("state table is empty".into()));
    }
    if (config.dt / table.dt_tree - 1.0).abs() > 1e-9 {
        return Err(Error::SpecMismatch(format!(
            "tree step {} does not match the table calibration step {}",
            config.dt, table.dt_tree
        )));
    }
    if let Some(agg) = &config.aggregation {
        if agg.max_nodes_per_level < 1 {
            return Err(Error::Config("max_nodes_per_level must be >= 1".into()));
        }
    }
    let projected = projected_nodes(config.n_steps, config.aggregation.as_ref());
    if projected > config.max_total_nodes as u128 {
        return Err(Error::ResourceLimit {
            what: format!("tree with {} steps", config.n_steps),
            requested: projected.min(u64::MAX as u128) as u64,
            limit: config.max_total_nodes,
        });
    }

    let started = Instant::now();
    let root_state = map_state(config.root_p_hint, table);
    let mut next_id = 0usize;

    let root = TreeNode {
        node_id: next_id,
        level: 0,
        price: s0,
        state_id: root_state,
        p_up: table.state(root_state).p_mmm,
        up_child: None,
        down_child: None,
        history: MoveHistory::default(),
        mass: 1.0,
    };
    next_id += 1;
    let mut levels = vec![vec![root]];
    let mut merges = Vec::new();

    for level_idx in 0..config.n_steps {
        let mut next: Vec<TreeNode> = Vec::with_capacity(2 * levels[level_idx].len());
        for parent_idx in 0..levels[level_idx].len() {
            let (price, state_id, p_up, mass, history) = {
                let parent = &levels[level_idx][parent_idx];
                (
                    parent.price,
                    parent.state_id,
                    parent.p_up,
                    parent.mass,
                    parent.history.clone(),
                )
            };
            let state = table.state(state_id);

            let (up_state, up_hist) = config.rule.transition(state_id, &history, Move::Up, table);
            let up_idx = next.len();
            next.push(TreeNode {
                node_id: 0, // assigned after aggregation
                level: level_idx + 1,
                price: price * state.u,
                state_id: up_state,
                p_up: table.state(up_state).p_mmm,
                up_child: None,
                down_child: None,
                history: up_hist,
                mass: mass * p_up,
            });

            let (down_state, down_hist) =
                config.rule.transition(state_id, &history, Move::Down, table);
            let down_idx = next.len();
            next.push(TreeNode {
                node_id: 0,
                level: level_idx + 1,
                price: price * state.d,
                state_id: down_state,
                p_up: table.state(down_state).p_mmm,
                up_child: None,
                down_child: None,
                history: down_hist,
                mass: mass * (1.0 - p_up),
            });

            let parent = &mut levels[level_idx][parent_idx];
            parent.up_child = Some(up_idx);
            parent.down_child = Some(down_idx);
        }

        if let Some(agg) = &config.aggregation {
            if next.len() > agg.max_nodes_per_level {
                let (merged, index_map, events) =
                    aggregate_level(next, agg.max_nodes_per_level, agg.w_price, agg.w_hist)?;
                merges.extend(events);
                for parent in &mut levels[level_idx] {
                    parent.up_child = parent.up_child.map(|c| index_map[c]);
                    parent.down_child = parent.down_child.map(|c| index_map[c]);
                }
                next = merged;
            }
        }

        for node in &mut next {
            node.node_id = next_id;
            next_id += 1;
        }
        levels.push(next);
    }

    Ok(PricingTree {
        levels,
        n_steps: config.n_steps,
        dt: config.dt,
        r: config.r,
        rule: config.rule,
        table: table.clone(),
        merges,
        build_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Greedy agglomerative merging of one level down to `max_nodes`.
///
/// Always merges the currently closest pair (ties by lower indices); the
/// merged node keeps the probability-mass-weighted mean price, the summed
/// mass, and the state/history of its heavier constituent. Returns the
/// merged nodes, a pre-merge-index to post-merge-index map for redirecting
/// incoming edges, and the merge events.
pub fn aggregate_level(
    nodes: Vec<TreeNode>,
    max_nodes: usize,
    w_price: f64,
    w_hist: f64,
) -> Result<(Vec<TreeNode>, Vec<usize>, Vec<MergeEvent>)> {
    if max_nodes < 1 {
        return Err(Error::Config("max_nodes must be >= 1".into()));
    }
    let n = nodes.len();
    if n <= max_nodes {
        let identity = (0..n).collect();
        return Ok((nodes, identity, Vec::new()));
    }

    let distance = |a: &TreeNode, b: &TreeNode| -> f64 {
        w_price * (a.price - b.price).abs() + w_hist * a.history.hamming(&b.history)
    };

    // Min-heap over (distance bits, i, j) with lazy invalidation. Distances
    // are non-negative, so the IEEE bit pattern preserves their ordering.
    let mut nodes = nodes;
    let mut alive = vec![true; n];
    let mut redirect: Vec<usize> = (0..n).collect();
    let mut heap: BinaryHeap<std::cmp::Reverse<(u64, usize, usize)>> = BinaryHeap::new();
    for i in 0..n {
        for j in i + 1..n {
            heap.push(std::cmp::Reverse((
                distance(&nodes[i], &nodes[j]).to_bits(),
                i,
                j,
            )));
        }
    }

    let mut remaining = n;
    let mut events = Vec::with_capacity(n - max_nodes);
    while remaining > max_nodes {
        let Some(std::cmp::Reverse((bits, i, j))) = heap.pop() else {
            break;
        };
        if !alive[i] || !alive[j] {
            continue;
        }
        // Entries go stale when a constituent was merged since the push.
        let current = distance(&nodes[i], &nodes[j]);
        if current.to_bits() != bits {
            heap.push(std::cmp::Reverse((current.to_bits(), i, j)));
            continue;
        }

        let (mass_i, mass_j) = (nodes[i].mass, nodes[j].mass);
        let total = mass_i + mass_j;
        let price = if total > 0.0 {
            (mass_i * nodes[i].price + mass_j * nodes[j].price) / total
        } else {
            0.5 * (nodes[i].price + nodes[j].price)
        };
        if mass_j > mass_i {
            let donor = nodes[j].clone();
            nodes[i].state_id = donor.state_id;
            nodes[i].p_up = donor.p_up;
            nodes[i].history = donor.history;
        }
        nodes[i].price = price;
        nodes[i].mass = total;
        alive[j] = false;
        redirect[j] = i;
        remaining -= 1;
        events.push(MergeEvent {
            level: nodes[i].level,
            removed: j,
            into: i,
            distance: current,
        });

        for k in 0..n {
            if alive[k] && k != i {
                let (a, b) = (i.min(k), i.max(k));
                heap.push(std::cmp::Reverse((
                    distance(&nodes[a], &nodes[b]).to_bits(),
                    a,
                    b,
                )));
            }
        }
    }

    // Resolve redirect chains, then compact.
    let resolve = |mut idx: usize, redirect: &[usize]| -> usize {
        while redirect[idx] != idx {
            idx = redirect[idx];
        }
        idx
    };
    let mut compact_index = vec![usize::MAX; n];
    let mut merged = Vec::with_capacity(remaining);
    for (idx, node) in nodes.into_iter().enumerate() {
        if alive[idx] {
            compact_index[idx] = merged.len();
            merged.push(node);
        }
    }
    let index_map: Vec<usize> = (0..n)
        .map(|idx| compact_index[resolve(idx, &redirect)])
        .collect();

    Ok((merged, index_map, events))
}
