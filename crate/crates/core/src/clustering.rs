//! Clustering of tree leaves by survival similarity.
//!
//! Leaves form a complete graph whose edge weights are pairwise Kuiper
//! p-values. The weight matrix is balanced to doubly stochastic form with
//! Sinkhorn-Knopp, which stops small leaves (high p-values against everyone)
//! from dominating, and then partitioned with the Markov Cluster algorithm.
//! [`coarsen_to_k`] turns an MCL partition into exactly `k` clusters.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::kaplan_meier::{km_fit, SurvivalCurve};
use crate::linalg::solve;
use crate::tree::{grow_tree, Routing, SurvivalTree, TreeConfig};
use crate::two_sample::{kuiper_ln_pvalue, kuiper_pvalue, kuiper_statistic};

/// Lower bound applied to edge weights before balancing.
pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Complete graph over leaves; `weights[[i, j]]` is the Kuiper p-value
/// between leaves `i` and `j`, with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafGraph {
    pub leaf_ids: Vec<usize>,
    pub weights: Array2<f64>,
}

impl LeafGraph {
    pub fn len(&self) -> usize {
        self.leaf_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_ids.is_empty()
    }

    /// Weights with every entry raised to at least [`WEIGHT_FLOOR`].
    pub fn floored(&self) -> Array2<f64> {
        self.weights.mapv(|w| w.max(WEIGHT_FLOOR))
    }
}

pub fn build_leaf_graph(tree: &SurvivalTree) -> LeafGraph {
    let l = tree.n_leaves();
    let pairs: Vec<(usize, usize)> = (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).collect();
    let pvalues: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (tree.leaf_curve(i), tree.leaf_curve(j));
            kuiper_pvalue(kuiper_statistic(a, b), a.n_events, b.n_events)
                .map(|r| r.p_value)
                .unwrap_or(1.0)
        })
        .collect();
    let mut weights = Array2::<f64>::eye(l);
    for (&(i, j), &p) in pairs.iter().zip(&pvalues) {
        weights[[i, j]] = p;
        weights[[j, i]] = p;
    }
    LeafGraph {
        leaf_ids: (0..l).collect(),
        weights,
    }
}

fn max_sum_deviation(m: &Array2<f64>) -> f64 {
    let rows = m.sum_axis(Axis(1));
    let cols = m.sum_axis(Axis(0));
    rows.iter()
        .chain(cols.iter())
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Scales a nonnegative square matrix with total support to doubly
/// stochastic form.
///
/// General input uses alternating row and column normalization. Symmetric
/// input is scaled as `D W D` by Newton's method on the convex potential
/// `½ Σ w_ij e^(u_i + u_j) − Σ u_i`. Both reach the same unique scaling,
/// but alternating sweeps crawl when the graph is nearly disconnected, as
/// leaf graphs with clearly separated groups are.
pub fn sinkhorn_knopp(w: &Array2<f64>, tol: f64, max_iter: usize) -> Result<Array2<f64>> {
    let n = w.nrows();
    if n != w.ncols() {
        return Err(Error::InvalidConfig("sinkhorn_knopp needs a square matrix".into()));
    }
    if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::InvalidConfig("sinkhorn_knopp needs finite nonnegative entries".into()));
    }
    if n == 0 {
        return Ok(w.clone());
    }
    if w == &w.t() {
        if let Some(m) = balance_symmetric(w, tol, max_iter) {
            return Ok(m);
        }
    }
    alternate(w, tol, max_iter)
}

fn alternate(w: &Array2<f64>, tol: f64, max_iter: usize) -> Result<Array2<f64>> {
    let mut m = w.clone();
    for _ in 0..max_iter {
        for mut row in m.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row /= s;
            }
        }
        for mut col in m.columns_mut() {
            let s = col.sum();
            if s > 0.0 {
                col /= s;
            }
        }
        if max_sum_deviation(&m) <= tol {
            return Ok(m);
        }
    }
    Err(Error::NonConvergence {
        what: "sinkhorn_knopp",
        iterations: max_iter,
        residual: max_sum_deviation(&m),
    })
}

fn scaled(w: &Array2<f64>, x: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn(w.dim(), |(i, j)| w[[i, j]] * (x[i] * x[j]))
}

/// `None` when the Hessian turns singular (zero pattern without total
/// support) or the iteration stalls; the caller falls back to sweeping.
fn balance_symmetric(w: &Array2<f64>, tol: f64, max_iter: usize) -> Option<Array2<f64>> {
    let n = w.nrows();
    let potential = |u: &[f64]| {
        let x: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let quad: f64 = (0..n).map(|i| x[i] * (0..n).map(|j| w[[i, j]] * x[j]).sum::<f64>()).sum();
        0.5 * quad - u.iter().sum::<f64>()
    };
    let row_sums = w.sum_axis(Axis(1));
    if row_sums.iter().any(|&s| s <= 0.0) {
        return None;
    }
    let mut u: Vec<f64> = row_sums.iter().map(|s| -0.5 * s.ln()).collect();
    for _ in 0..max_iter {
        let x: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        let p = scaled(w, &x);
        if max_sum_deviation(&p) <= tol {
            return Some(p);
        }
        let sums = p.sum_axis(Axis(1));
        let grad: Vec<f64> = sums.iter().map(|s| s - 1.0).collect();
        let hessian: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| p[[i, j]] + if i == j { sums[i] } else { 0.0 }).collect())
            .collect();
        let step = solve(hessian, grad.iter().map(|g| -g).collect(), 1e-14)?;
        let slope: f64 = grad.iter().zip(&step).map(|(g, d)| g * d).sum();
        let f0 = potential(&u);
        let slack = 1e-12 * (1.0 + f0.abs());
        let mut t = 1.0;
        let next = loop {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, d)| a + t * d).collect();
            if potential(&trial) <= f0 + 1e-4 * t * slope + slack {
                break trial;
            }
            t *= 0.5;
            if t < 1e-10 {
                return None;
            }
        };
        u = next;
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MclParams {
    pub expansion: u32,
    pub inflation: f64,
    pub prune_tol: f64,
    pub conv_tol: f64,
    pub max_iter: usize,
}

impl Default for MclParams {
    fn default() -> Self {
        Self {
            expansion: 2,
            inflation: 2.0,
            prune_tol: 1e-8,
            conv_tol: 1e-9,
            max_iter: 200,
        }
    }
}

fn normalize_columns(m: &mut Array2<f64>) {
    for mut col in m.columns_mut() {
        let s = col.sum();
        if s > 0.0 {
            col /= s;
        }
    }
}

/// One expansion + inflation + prune step.
pub fn mcl_step(m: &Array2<f64>, params: &MclParams) -> Array2<f64> {
    let mut next = m.clone();
    for _ in 1..params.expansion {
        next = next.dot(m);
    }
    next.mapv_inplace(|x| x.powf(params.inflation));
    normalize_columns(&mut next);
    next.mapv_inplace(|x| if x < params.prune_tol { 0.0 } else { x });
    normalize_columns(&mut next);
    next
}

/// Entries this close to a column maximum count as tied with it.
const TIE_TOL: f64 = 1e-12;

/// Markov clustering of a column-stochastic matrix. Returns the blocks of a
/// partition of `0..n`, each sorted, ordered by smallest member.
pub fn mcl(m: &Array2<f64>, params: &MclParams) -> Result<Vec<Vec<usize>>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::InvalidConfig("mcl needs a square matrix".into()));
    }
    if params.expansion < 1 || !(params.inflation > 1.0) {
        return Err(Error::InvalidConfig("mcl needs expansion >= 1 and inflation > 1".into()));
    }
    let mut current = m.clone();
    normalize_columns(&mut current);
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..params.max_iter {
        let next = mcl_step(&current, params);
        change = (&next - &current).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        current = next;
        if change < params.conv_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "mcl",
            iterations: params.max_iter,
            residual: change,
        });
    }
    Ok(read_clusters(&current))
}

fn read_clusters(m: &Array2<f64>) -> Vec<Vec<usize>> {
    let n = m.nrows();
    let attractors: Vec<usize> = (0..n).filter(|&i| m[[i, i]] > 0.0).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for j in 0..n {
        let best = attractors.iter().map(|&a| m[[a, j]]).fold(0.0_f64, f64::max);
        if best <= 0.0 {
            continue;
        }
        let chosen = attractors
            .iter()
            .copied()
            .find(|&a| m[[a, j]] >= best - TIE_TOL)
            .expect("maximum is attained");
        let (ra, rb) = (find(&mut parent, j), find(&mut parent, chosen));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut root_block = vec![usize::MAX; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        if root_block[r] == usize::MAX {
            root_block[r] = blocks.len();
            blocks.push(Vec::new());
        }
        blocks[root_block[r]].push(v);
    }
    blocks
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub mcl: MclParams,
    /// Target cluster count; `None` keeps the MCL partition as found.
    pub k: Option<usize>,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            mcl: MclParams::default(),
            k: None,
            sinkhorn_tol: 1e-8,
            sinkhorn_max_iter: 10_000,
        }
    }
}

/// Largest inflation tried when MCL yields too few clusters.
pub const MAX_INFLATION: f64 = 10.0;
pub const INFLATION_STEP: f64 = 0.25;

/// Tree plus the mapping of its leaves onto clusters `0..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub tree: SurvivalTree,
    pub leaf_to_cluster: Vec<usize>,
    pub k: usize,
    /// Survival curve of each cluster's pooled training subjects.
    pub cluster_curves: Vec<SurvivalCurve>,
    /// Inflation of the MCL run the clusters came from.
    pub inflation: f64,
}

impl ClusterModel {
    pub fn cluster_assign(&self, subject: &Subject) -> Result<usize> {
        Ok(self.leaf_to_cluster[self.tree.assign_leaf(subject)?])
    }

    pub fn cluster_assign_with(&self, values: &[crate::dataset::FeatureValue], routing: Routing) -> Result<usize> {
        Ok(self.leaf_to_cluster[self.tree.route(values, routing)?])
    }

    /// Subject count per cluster, read from the training leaf counts.
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for (leaf, &c) in self.leaf_to_cluster.iter().enumerate() {
            sizes[c] += self.tree.leaf(leaf).n_subjects;
        }
        sizes
    }
}

fn pooled(blocks: &[Vec<usize>], leaf_obs: &[Vec<(f64, bool)>]) -> Vec<Vec<(f64, bool)>> {
    blocks
        .iter()
        .map(|b| b.iter().flat_map(|&l| leaf_obs[l].iter().copied()).collect())
        .collect()
}

fn pair_similarity(a: &SurvivalCurve, b: &SurvivalCurve) -> f64 {
    kuiper_ln_pvalue(kuiper_statistic(a, b), a.n_events, b.n_events).unwrap_or(0.0)
}

/// Merges or refines an MCL leaf partition into exactly `k` clusters.
///
/// Too many groups: repeatedly merge the pair whose pooled populations have
/// the highest Kuiper p-value. Too few: rerun MCL on the balanced graph with
/// inflation raised in steps of [`INFLATION_STEP`] up to [`MAX_INFLATION`],
/// then merge down.
pub fn coarsen_to_k(
    partition: Vec<Vec<usize>>,
    graph: &LeafGraph,
    tree: &SurvivalTree,
    training: &SurvivalDataset,
    k: usize,
    config: &ClusterConfig,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut blocks = partition;
    let mut inflation = config.mcl.inflation;
    if blocks.len() < k {
        let mut found = blocks.len();
        let balanced = sinkhorn_knopp(&graph.floored(), config.sinkhorn_tol, config.sinkhorn_max_iter)?;
        let mut step = 1;
        loop {
            let trial = config.mcl.inflation + INFLATION_STEP * step as f64;
            if trial > MAX_INFLATION + 1e-9 {
                return Err(Error::UnreachableK { k, found });
            }
            let params = MclParams {
                inflation: trial,
                ..config.mcl.clone()
            };
            if let Ok(p) = mcl(&balanced, &params) {
                found = found.max(p.len());
                if p.len() >= k {
                    blocks = p;
                    inflation = trial;
                    break;
                }
            }
            step += 1;
        }
    }

    let leaf_obs = tree.leaf_observations(training)?;
    let mut pools = pooled(&blocks, &leaf_obs);
    let mut curves: Vec<Option<SurvivalCurve>> = pools.iter().map(|p| km_fit(p).ok()).collect();
    while blocks.len() > k {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..blocks.len() {
            for j in i + 1..blocks.len() {
                let sim = match (&curves[i], &curves[j]) {
                    (Some(a), Some(b)) => pair_similarity(a, b),
                    _ => 0.0,
                };
                if best.is_none_or(|(s, _, _)| sim > s) {
                    best = Some((sim, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("at least two blocks");
        let moved = blocks.remove(j);
        blocks[i].extend(moved);
        blocks[i].sort_unstable();
        let moved = pools.remove(j);
        pools[i].extend(moved);
        curves.remove(j);
        curves[i] = km_fit(&pools[i]).ok();
    }

    blocks.sort_by_key(|b| b[0]);
    let mut leaf_to_cluster = vec![0; tree.n_leaves()];
    for (c, b) in blocks.iter().enumerate() {
        for &l in b {
            leaf_to_cluster[l] = c;
        }
    }
    let cluster_curves = pooled(&blocks, &leaf_obs)
        .iter()
        .map(|p| km_fit(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterModel {
        tree: tree.clone(),
        leaf_to_cluster,
        k: blocks.len(),
        cluster_curves,
        inflation,
    })
}

/// Everything produced by [`fit`], for reporting.
pub struct FitOutput {
    pub model: ClusterModel,
    pub graph: LeafGraph,
    /// Blocks found by the first MCL run, before coarsening.
    pub mcl_partition: Vec<Vec<usize>>,
}

/// Grows the tree, clusters its leaves and, when `k` is set, coarsens to
/// exactly `k` clusters.
pub fn fit(data: &SurvivalDataset, tree_config: &TreeConfig, config: &ClusterConfig) -> Result<FitOutput> {
    let tree = grow_tree(data, tree_config)?;
    let graph = build_leaf_graph(&tree);
    let balanced = sinkhorn_knopp(&graph.floored(), config.sinkhorn_tol, config.sinkhorn_max_iter)?;
    let partition = mcl(&balanced, &config.mcl)?;
    let k = config.k.unwrap_or(partition.len());
    let model = coarsen_to_k(partition.clone(), &graph, &tree, data, k, config)?;
    Ok(FitOutput {
        model,
        graph,
        mcl_partition: partition,
    })
}
