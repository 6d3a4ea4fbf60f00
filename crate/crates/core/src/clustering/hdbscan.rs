// SPDX-License-Identifier: Apache-2.0

//! Exact HDBSCAN over small point sets.
//!
//! Mutual-reachability distances, an exhaustive Prim minimum spanning tree,
//! single-linkage hierarchy, condensed tree and excess-of-mass cluster
//! selection. Everything is O(n²), which is fine for the handful of atomic
//! components a neuron produces.

use std::collections::{BTreeMap, HashMap, VecDeque};
use thiserror::Error;

/// Smallest distance used when converting to a density level; exact
/// duplicates map to a finite lambda of 1e12.
const MIN_DISTANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HdbscanError {
    #[error("no points to cluster")]
    Empty,
    #[error("min_cluster_size must be at least 2, got {0}")]
    MinClusterSize(usize),
    #[error("point {0} has dimension {1}, expected {2}")]
    Dimension(usize, usize, usize),
    #[error("point {0} has a non-finite coordinate")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbour count for core distances (the point itself included);
    /// defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
    /// Lets the root of the condensed tree be selected as the only cluster.
    pub allow_single_cluster: bool,
}

impl HdbscanParams {
    pub fn new(min_cluster_size: usize) -> Self {
        Self {
            min_cluster_size,
            min_samples: None,
            allow_single_cluster: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct CondensedRow {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Clusters `points`; returns one label per point, `-1` for noise. Labels
/// are numbered by first occurrence in input order.
pub fn hdbscan(points: &[Vec<f64>], min_cluster_size: usize) -> Result<Vec<i32>, HdbscanError> {
    hdbscan_with(points, HdbscanParams::new(min_cluster_size))
}

pub fn hdbscan_with(points: &[Vec<f64>], params: HdbscanParams) -> Result<Vec<i32>, HdbscanError> {
    let n = points.len();
    if n == 0 {
        return Err(HdbscanError::Empty);
    }
    if params.min_cluster_size < 2 {
        return Err(HdbscanError::MinClusterSize(params.min_cluster_size));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(HdbscanError::Dimension(i, p.len(), dim));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(HdbscanError::NonFinite(i));
        }
    }
    if n < params.min_cluster_size {
        return Ok(vec![-1; n]);
    }

    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| euclidean(&points[i], &points[j])).collect())
        .collect();
    let k = params.min_samples.unwrap_or(params.min_cluster_size).max(1);
    let core: Vec<f64> = dist
        .iter()
        .map(|row| {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[(k - 1).min(n - 1)]
        })
        .collect();
    let mrd = |i: usize, j: usize| dist[i][j].max(core[i]).max(core[j]);

    let mst = prim_mst(n, mrd);
    let hierarchy = single_linkage(n, &mst);
    let tree = condense(n, &hierarchy, params.min_cluster_size);
    let selected = select_clusters(n, &tree, params.allow_single_cluster);
    Ok(label_points(n, &tree, &selected))
}

/// Prim over the dense mutual-reachability graph. Ties go to the lower
/// point index. Edges come back sorted by (weight, lower, higher).
fn prim_mst(n: usize, weight: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize, f64)> {
    let mut in_tree = vec![false; n];
    let mut key = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    key[0] = 0.0;
    for _ in 0..n {
        let u = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)))
            .expect("a vertex remains");
        in_tree[u] = true;
        if parent[u] != usize::MAX {
            edges.push((parent[u].min(u), parent[u].max(u), key[u]));
        }
        for v in 0..n {
            if !in_tree[v] {
                let w = weight(u, v);
                if w < key[v] {
                    key[v] = w;
                    parent[v] = u;
                }
            }
        }
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    edges
}

/// Dendrogram rows `(left, right, distance, size)`; row `i` creates node `n + i`.
fn single_linkage(n: usize, mst: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64, usize)> {
    let total = 2 * n - 1;
    let mut parent: Vec<usize> = (0..total).collect();
    let mut size = vec![1usize; total];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut rows = Vec::with_capacity(n - 1);
    for (i, &(a, b, d)) in mst.iter().enumerate() {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + i;
        size[node] = size[ra] + size[rb];
        parent[ra] = node;
        parent[rb] = node;
        rows.push((ra, rb, d, size[node]));
    }
    rows
}

fn lambda_of(d: f64) -> f64 {
    1.0 / d.max(MIN_DISTANCE)
}

fn condense(
    n: usize,
    hierarchy: &[(usize, usize, f64, usize)],
    min_cluster_size: usize,
) -> Vec<CondensedRow> {
    let root = 2 * n - 2;
    let node_size = |id: usize| if id < n { 1 } else { hierarchy[id - n].3 };
    let leaves = |start: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut queue = VecDeque::from([start]);
        while let Some(id) = queue.pop_front() {
            if id < n {
                out.push(id);
            } else {
                let (l, r, _, _) = hierarchy[id - n];
                queue.push_back(l);
                queue.push_back(r);
            }
        }
        out
    };

    let mut relabel = vec![0usize; 2 * n - 1];
    relabel[root] = n;
    let mut next_label = n + 1;
    let mut rows = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let (left, right, d, _) = hierarchy[node - n];
        let lambda = lambda_of(d);
        let parent = relabel[node];
        let (ls, rs) = (node_size(left), node_size(right));
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                for (child, size) in [(left, ls), (right, rs)] {
                    relabel[child] = next_label;
                    next_label += 1;
                    rows.push(CondensedRow {
                        parent,
                        child: relabel[child],
                        lambda,
                        size,
                    });
                    queue.push_back(child);
                }
            }
            (false, false) => {
                for child in [left, right] {
                    for p in leaves(child) {
                        rows.push(CondensedRow {
                            parent,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                }
            }
            (true, false) | (false, true) => {
                let (big, small) = if ls >= min_cluster_size {
                    (left, right)
                } else {
                    (right, left)
                };
                relabel[big] = parent;
                queue.push_back(big);
                for p in leaves(small) {
                    rows.push(CondensedRow {
                        parent,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
            }
        }
    }
    rows
}

/// Excess-of-mass selection; returns the chosen cluster ids.
fn select_clusters(n: usize, tree: &[CondensedRow], allow_single_cluster: bool) -> Vec<usize> {
    let root = n;
    let mut birth: HashMap<usize, f64> = HashMap::from([(root, 0.0)]);
    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    children.entry(root).or_default();
    for row in tree.iter().filter(|r| r.child >= n) {
        birth.insert(row.child, row.lambda);
        children.entry(row.parent).or_default().push(row.child);
        children.entry(row.child).or_default();
    }
    let mut stability: HashMap<usize, f64> = children.keys().map(|&c| (c, 0.0)).collect();
    for row in tree {
        *stability.get_mut(&row.parent).expect("known cluster") +=
            (row.lambda - birth[&row.parent]) * row.size as f64;
    }

    let mut nodes: Vec<usize> = children.keys().copied().collect();
    nodes.sort_unstable_by(|a, b| b.cmp(a));
    if !allow_single_cluster {
        nodes.retain(|&c| c != root);
    }
    let mut is_cluster: HashMap<usize, bool> = nodes.iter().map(|&c| (c, true)).collect();
    for &node in &nodes {
        let subtree: f64 = children[&node].iter().map(|c| stability[c]).sum();
        if subtree > stability[&node] {
            is_cluster.insert(node, false);
            stability.insert(node, subtree);
        } else {
            let mut stack = children[&node].clone();
            while let Some(c) = stack.pop() {
                is_cluster.insert(c, false);
                stack.extend(children[&c].iter().copied());
            }
        }
    }
    let mut out: Vec<usize> = is_cluster
        .into_iter()
        .filter_map(|(c, keep)| keep.then_some(c))
        .collect();
    out.sort_unstable();
    out
}

fn label_points(n: usize, tree: &[CondensedRow], selected: &[usize]) -> Vec<i32> {
    let root = n;
    let mut parent_of: HashMap<usize, usize> = HashMap::new();
    let mut point_lambda = vec![0.0; n];
    for row in tree {
        parent_of.insert(row.child, row.parent);
        if row.child < n {
            point_lambda[row.child] = row.lambda;
        }
    }
    let root_max_lambda = tree
        .iter()
        .filter(|r| r.parent == root)
        .map(|r| r.lambda)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut raw = vec![-1i64; n];
    for (p, slot) in raw.iter_mut().enumerate() {
        let mut c = parent_of[&p];
        loop {
            if selected.binary_search(&c).is_ok() {
                let keep = c != root || point_lambda[p] >= root_max_lambda;
                if keep {
                    *slot = c as i64;
                }
                break;
            }
            if c == root {
                break;
            }
            c = parent_of[&c];
        }
    }
    canonical_labels(&raw)
}

/// Renumbers labels 0, 1, ... by first occurrence, keeping `-1` as noise.
pub fn canonical_labels<T: Copy + Eq + std::hash::Hash + Into<i64>>(labels: &[T]) -> Vec<i32> {
    let mut map: HashMap<T, i32> = HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l.into() < 0 {
                -1
            } else {
                let next = map.len() as i32;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}
