//! Spatially adjusted random forest. Each tree is grown greedily on a
//! generalized least squares objective under its own exponential error
//! covariance, alternating with maximum-likelihood covariance updates.

use faer::{Mat, MatRef};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    factor_from_distances, fit_ml_distances, nll_from_distances, CovarianceParams,
    FittedCovariance, MlOptions,
};
use crate::data::{pairwise_distances, Dataset, LinkFunction, Location, OutcomeTransform};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::ukpls::canonical_order;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatRfConfig {
    pub n_trees: usize,
    /// Covariates tried per split; defaults to ⌈p/3⌉.
    pub mtry: Option<usize>,
    /// Minimum bootstrap weight in each child.
    pub min_leaf: usize,
    pub max_depth: usize,
    /// Covariance/tree alternations after the initial pure-nugget growth.
    pub rounds: usize,
    pub bootstrap: bool,
    pub seed: u64,
    pub link: LinkFunction,
    /// Grow every tree under these parameters and skip estimation.
    pub fixed_covariance: Option<CovarianceParams>,
}

impl Default for SpatRfConfig {
    fn default() -> Self {
        SpatRfConfig {
            n_trees: 200,
            mtry: None,
            min_leaf: 5,
            max_depth: 12,
            rounds: 2,
            bootstrap: true,
            seed: 0,
            link: LinkFunction::Identity,
            fixed_covariance: None,
        }
    }
}

impl SpatRfConfig {
    /// Same hyperparameters with an identity error covariance and no
    /// kriging: a plain random forest.
    pub fn non_spatial(self) -> Self {
        SpatRfConfig {
            fixed_covariance: Some(CovarianceParams::pure_nugget(1.0)),
            rounds: 0,
            ..self
        }
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p.max(1))
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be at least 1".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::Config("min_leaf must be at least 1".into()));
        }
        if self.mtry == Some(0) {
            return Err(Error::Config("mtry must be at least 1".into()));
        }
        if n < 2 * self.min_leaf {
            return Err(Error::InvalidInput(format!(
                "a tree needs n >= 2 * min_leaf (n = {n}, min_leaf = {})",
                self.min_leaf
            )));
        }
        if let Some(t) = &self.fixed_covariance {
            t.validate()?;
        }
        Ok(())
    }
}

/// Preorder node. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TreeRecord")]
pub struct SpatialTree {
    nodes: Vec<Node>,
    covariance: FittedCovariance,
    /// Sorted bootstrap sample (training row indices, with repeats).
    bootstrap: Vec<usize>,
    /// Tree/covariance objective after the initial growth and each round.
    objective_trace: Vec<f64>,
}

#[derive(Deserialize)]
struct TreeRecord {
    nodes: Vec<Node>,
    covariance: FittedCovariance,
    bootstrap: Vec<usize>,
    objective_trace: Vec<f64>,
}

impl TryFrom<TreeRecord> for SpatialTree {
    type Error = Error;

    fn try_from(r: TreeRecord) -> Result<Self> {
        check_nodes(&r.nodes)?;
        Ok(SpatialTree {
            nodes: r.nodes,
            covariance: r.covariance,
            bootstrap: r.bootstrap,
            objective_trace: r.objective_trace,
        })
    }
}

/// Every child index points forward, so traversal always terminates.
fn check_nodes(nodes: &[Node]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Parse("tree has no nodes".into()));
    }
    for (i, node) in nodes.iter().enumerate() {
        match *node {
            Node::Split {
                threshold,
                left,
                right,
                ..
            } => {
                if left <= i || right <= i || left >= nodes.len() || right >= nodes.len() {
                    return Err(Error::Parse(format!("node {i} has invalid children")));
                }
                if threshold.is_nan() {
                    return Err(Error::Parse(format!("node {i} has a NaN threshold")));
                }
            }
            Node::Leaf { value } => {
                if !value.is_finite() {
                    return Err(Error::Parse(format!("leaf {i} is not finite")));
                }
            }
        }
    }
    Ok(())
}

fn leaf_index(nodes: &[Node], row: impl Fn(usize) -> f64) -> usize {
    let mut i = 0;
    while let Node::Split {
        feature,
        threshold,
        left,
        right,
    } = nodes[i]
    {
        i = if row(feature) <= threshold { left } else { right };
    }
    i
}

fn leaf_value(nodes: &[Node], row: impl Fn(usize) -> f64) -> f64 {
    match nodes[leaf_index(nodes, row)] {
        Node::Leaf { value } => value,
        Node::Split { .. } => unreachable!("traversal ends at a leaf"),
    }
}

fn tree_mean(nodes: &[Node], x: MatRef<'_, f64>) -> Vec<f64> {
    (0..x.nrows()).map(|i| leaf_value(nodes, |f| x[(i, f)])).collect()
}

impl SpatialTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &CovarianceParams {
        self.covariance.params()
    }

    /// Prediction-time covariance over all training sites, holding the
    /// residuals y − f(X).
    pub fn covariance(&self) -> &FittedCovariance {
        &self.covariance
    }

    pub fn bootstrap(&self) -> &[usize] {
        &self.bootstrap
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Tree mean f(x) for each row.
    pub fn predict_mean(&self, x: MatRef<'_, f64>) -> Vec<f64> {
        tree_mean(&self.nodes, x)
    }

    /// Tree mean plus this tree's kriging term.
    pub fn predict(&self, x: MatRef<'_, f64>, sites: &[Location]) -> Result<Vec<f64>> {
        let mean = self.predict_mean(x);
        let krige = self.covariance.krige(sites)?;
        Ok(mean.iter().zip(&krige).map(|(m, k)| m + k).collect())
    }
}

/// GLS leaf values (ZᵀΣ⁻¹Z)⁻¹ZᵀΣ⁻¹y for the membership `leaf_of`.
pub fn gls_leaf_values(
    leaf_of: &[usize],
    n_leaves: usize,
    y: &[f64],
    cov: MatRef<'_, f64>,
) -> Result<Vec<f64>> {
    let n = y.len();
    if leaf_of.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: leaf_of.len().min(cov.nrows()),
        });
    }
    if leaf_of.iter().any(|&l| l >= n_leaves) {
        return Err(Error::InvalidInput("leaf index out of range".into()));
    }
    let chol = Cholesky::factor(cov)
        .ok_or_else(|| Error::NumericalRank("covariance is not positive definite".into()))?;
    let q = chol.inverse();
    solve_leaves(q.as_ref(), leaf_of, n_leaves, y)
        .ok_or_else(|| Error::NumericalRank("GLS leaf system is singular".into()))
}

/// Solves (ZᵀQZ)γ = ZᵀQy for the leaf indicator design Z.
fn solve_leaves(q: MatRef<'_, f64>, leaf_of: &[usize], n_leaves: usize, y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let mut qz = Mat::<f64>::zeros(n, n_leaves);
    for k in 0..n {
        let l = leaf_of[k];
        for i in 0..n {
            qz[(i, l)] += q[(i, k)];
        }
    }
    let mut a = Mat::<f64>::zeros(n_leaves, n_leaves);
    for i in 0..n {
        let li = leaf_of[i];
        for l in 0..n_leaves {
            a[(li, l)] += qz[(i, l)];
        }
    }
    let rhs: Vec<f64> = (0..n_leaves).map(|l| linalg::dot(qz.col_as_slice(l), y)).collect();
    let chol = Cholesky::factor(a.as_ref())?;
    let g = chol.solve(&rhs);
    g.iter().all(|v| v.is_finite()).then_some(g)
}

/// Greedy growth on the GLS criterion. With Q the (weighted) precision and
/// Z the current leaf design, M = Q − QZ(ZᵀQZ)⁻¹ZᵀQ and u = My; splitting a
/// leaf adds the left-child indicator z to Z and lowers the GLS residual
/// quadratic form by (zᵀu)²/(zᵀMz).
struct Grower<'a> {
    x: MatRef<'a, f64>,
    /// Training row of each distinct site.
    rows: &'a [usize],
    w: &'a [f64],
    y: &'a [f64],
    m: Mat<f64>,
    u: Vec<f64>,
    mtry: usize,
    min_leaf: f64,
    max_depth: usize,
    min_gain: f64,
    nodes: Vec<Node>,
    scratch: Vec<f64>,
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn xv(&self, k: usize, f: usize) -> f64 {
        self.x[(self.rows[k], f)]
    }

    fn grow(&mut self, members: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let weight: f64 = members.iter().map(|&k| self.w[k]).sum();
        let constant = members.iter().all(|&k| self.y[k] == self.y[members[0]]);
        if depth >= self.max_depth || weight < 2.0 * self.min_leaf || constant {
            return id;
        }
        let Some(best) = self.best_split(&members, weight, rng) else {
            return id;
        };
        if !(best.gain > self.min_gain) {
            return id;
        }
        let (left, right): (Vec<usize>, Vec<usize>) = members
            .iter()
            .partition(|&&k| self.xv(k, best.feature) <= best.threshold);
        self.absorb(&left);
        let l = self.grow(left, depth + 1, rng);
        let r = self.grow(right, depth + 1, rng);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        id
    }

    fn features(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let p = self.x.ncols();
        if self.mtry >= p {
            return (0..p).collect();
        }
        let mut f = sample(rng, p, self.mtry).into_vec();
        f.sort_unstable();
        f
    }

    fn best_split(&mut self, members: &[usize], weight: f64, rng: &mut ChaCha8Rng) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for f in self.features(rng) {
            let mut order = members.to_vec();
            order.sort_by(|&a, &b| self.xv(a, f).total_cmp(&self.xv(b, f)).then(a.cmp(&b)));
            for &k in members {
                self.scratch[k] = 0.0;
            }
            let (mut a, mut b, mut wl) = (0.0, 0.0, 0.0);
            for t in 0..order.len() - 1 {
                let k = order[t];
                b += 2.0 * self.scratch[k] + self.m[(k, k)];
                a += self.u[k];
                wl += self.w[k];
                let mk = self.m.col_as_slice(k);
                for &j in members {
                    self.scratch[j] += mk[j];
                }
                let (lo, hi) = (self.xv(k, f), self.xv(order[t + 1], f));
                if !(hi > lo) || wl < self.min_leaf || weight - wl < self.min_leaf || !(b > 0.0) {
                    continue;
                }
                let gain = a * a / b;
                if best.as_ref().is_none_or(|c| gain > c.gain) {
                    let mid = 0.5 * (lo + hi);
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold: if mid < hi { mid } else { lo },
                    });
                }
            }
        }
        best
    }

    /// Adds the indicator of `left` to the design.
    fn absorb(&mut self, left: &[usize]) {
        let n = self.u.len();
        let mut mz = vec![0.0; n];
        for &k in left {
            for (acc, v) in mz.iter_mut().zip(self.m.col_as_slice(k)) {
                *acc += v;
            }
        }
        let b: f64 = left.iter().map(|&k| mz[k]).sum();
        let a: f64 = left.iter().map(|&k| self.u[k]).sum();
        if !(b > 0.0) {
            return;
        }
        for j in 0..n {
            let s = mz[j] / b;
            let col = self.m.col_as_slice_mut(j);
            for i in 0..n {
                col[i] -= mz[i] * s;
            }
        }
        for i in 0..n {
            self.u[i] -= mz[i] * a / b;
        }
    }
}

/// Replaces the lightest split whose children are both leaves by a leaf.
fn collapse_lightest(nodes: &[Node], leaf_weight: &dyn Fn(usize) -> f64) -> Vec<Node> {
    let mut target = None;
    let mut lightest = f64::INFINITY;
    for (i, n) in nodes.iter().enumerate() {
        if let Node::Split { left, right, .. } = *n {
            if matches!(nodes[left], Node::Leaf { .. }) && matches!(nodes[right], Node::Leaf { .. }) {
                let w = leaf_weight(left) + leaf_weight(right);
                if w < lightest {
                    lightest = w;
                    target = Some(i);
                }
            }
        }
    }
    fn copy(nodes: &[Node], i: usize, target: Option<usize>, out: &mut Vec<Node>) -> usize {
        let id = out.len();
        match nodes[i] {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } if Some(i) != target => {
                out.push(Node::Leaf { value: 0.0 });
                let l = copy(nodes, left, target, out);
                let r = copy(nodes, right, target, out);
                out[id] = Node::Split {
                    feature,
                    threshold,
                    left: l,
                    right: r,
                };
            }
            _ => out.push(Node::Leaf { value: 0.0 }),
        }
        id
    }
    let mut out = Vec::with_capacity(nodes.len());
    copy(nodes, 0, target, &mut out);
    out
}

/// Data shared by every tree of a forest.
struct TrainingSet<'a> {
    x: MatRef<'a, f64>,
    /// Working-scale outcome.
    y: &'a [f64],
    sites: &'a [Location],
    dist: MatRef<'a, f64>,
}

struct Sample {
    rows: Vec<usize>,
    w: Vec<f64>,
    y: Vec<f64>,
    dist: Mat<f64>,
}

impl Sample {
    fn leaf_of(&self, nodes: &[Node], x: MatRef<'_, f64>) -> (Vec<usize>, Vec<usize>) {
        let leaves: Vec<usize> = (0..nodes.len())
            .filter(|&i| matches!(nodes[i], Node::Leaf { .. }))
            .collect();
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &i) in leaves.iter().enumerate() {
            slot[i] = s;
        }
        let of = self
            .rows
            .iter()
            .map(|&r| slot[leaf_index(nodes, |f| x[(r, f)])])
            .collect();
        (of, leaves)
    }

    /// √w · (y − f) over the distinct sites.
    fn scaled_residuals(&self, nodes: &[Node], x: MatRef<'_, f64>) -> Vec<f64> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, &r)| self.w[k].sqrt() * (self.y[k] - leaf_value(nodes, |j| x[(r, j)])))
            .collect()
    }
}

/// Grows a tree under `theta` and sets GLS leaf values.
fn grow_under(
    data: &TrainingSet<'_>,
    sample: &Sample,
    theta: &CovarianceParams,
    cfg: &SpatRfConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Node>> {
    let n = sample.rows.len();
    let chol = factor_from_distances(sample.dist.as_ref(), theta)?;
    let mut q = chol.inverse();
    let sw: Vec<f64> = sample.w.iter().map(|w| w.sqrt()).collect();
    for j in 0..n {
        for i in 0..n {
            q[(i, j)] *= sw[i] * sw[j];
        }
    }
    // project out the intercept
    let q1: Vec<f64> = (0..n).map(|i| q.row(i).iter().sum()).collect();
    let s: f64 = q1.iter().sum();
    let mut m = q.clone();
    for j in 0..n {
        for i in 0..n {
            m[(i, j)] -= q1[i] * q1[j] / s;
        }
    }
    let u = linalg::matvec(m.as_ref(), &sample.y);
    let total = linalg::dot(&sample.y, &u);
    let mut grower = Grower {
        x: data.x,
        rows: &sample.rows,
        w: &sample.w,
        y: &sample.y,
        m,
        u,
        mtry: cfg.mtry_for(data.x.ncols()),
        min_leaf: cfg.min_leaf as f64,
        max_depth: cfg.max_depth,
        min_gain: 1e-12 * total.max(0.0),
        nodes: Vec::new(),
        scratch: vec![0.0; n],
    };
    grower.grow((0..n).collect(), 0, rng);
    let mut nodes = grower.nodes;
    loop {
        let (leaf_of, leaves) = sample.leaf_of(&nodes, data.x);
        if let Some(values) = solve_leaves(q.as_ref(), &leaf_of, leaves.len(), &sample.y) {
            for (&i, v) in leaves.iter().zip(values) {
                nodes[i] = Node::Leaf { value: v };
            }
            return Ok(nodes);
        }
        if leaves.len() == 1 {
            return Err(Error::NumericalRank("GLS leaf system is singular".into()));
        }
        let weights: Vec<f64> = {
            let mut w = vec![0.0; nodes.len()];
            for (k, &l) in leaf_of.iter().enumerate() {
                w[leaves[l]] += sample.w[k];
            }
            w
        };
        nodes = collapse_lightest(&nodes, &|i| weights[i]);
    }
}

fn draw_sample(data: &TrainingSet<'_>, bootstrap: bool, rng: &mut ChaCha8Rng) -> (Sample, Vec<usize>) {
    let n = data.y.len();
    let mut counts = vec![0usize; n];
    if bootstrap {
        for _ in 0..n {
            counts[rng.random_range(0..n)] += 1;
        }
    } else {
        counts.iter_mut().for_each(|c| *c = 1);
    }
    let rows: Vec<usize> = (0..n).filter(|&i| counts[i] > 0).collect();
    let multiset = rows
        .iter()
        .flat_map(|&i| std::iter::repeat_n(i, counts[i]))
        .collect();
    let dist = Mat::from_fn(rows.len(), rows.len(), |a, b| data.dist[(rows[a], rows[b])]);
    let sample = Sample {
        w: rows.iter().map(|&i| counts[i] as f64).collect(),
        y: rows.iter().map(|&i| data.y[i]).collect(),
        rows,
        dist,
    };
    (sample, multiset)
}

fn fit_tree(data: &TrainingSet<'_>, cfg: &SpatRfConfig, rng: &mut ChaCha8Rng) -> Result<SpatialTree> {
    let (sample, bootstrap) = draw_sample(data, cfg.bootstrap, rng);
    let multiset_y: Vec<f64> = bootstrap.iter().map(|&i| data.y[i]).collect();
    let var = linalg::variance(&multiset_y);

    let (nodes, theta, trace) = if sample.y.iter().all(|&v| v == sample.y[0]) {
        let theta = cfg
            .fixed_covariance
            .unwrap_or(CovarianceParams::pure_nugget(1e-8));
        (vec![Node::Leaf { value: sample.y[0] }], theta, Vec::new())
    } else {
        let mut theta = cfg
            .fixed_covariance
            .unwrap_or(CovarianceParams::pure_nugget(var));
        let objective = |nodes: &[Node], theta: &CovarianceParams| {
            nll_from_distances(&sample.scaled_residuals(nodes, data.x), sample.dist.as_ref(), theta)
        };
        let mut nodes = grow_under(data, &sample, &theta, cfg, rng)?;
        let mut obj = objective(&nodes, &theta)?;
        let mut trace = vec![obj];
        let rounds = if cfg.fixed_covariance.is_some() { 0 } else { cfg.rounds };
        let ml = MlOptions::default();
        for r in 0..rounds {
            let resid = sample.scaled_residuals(&nodes, data.x);
            let init = (r > 0).then_some(theta);
            match fit_ml_distances(&resid, sample.dist.as_ref(), init, &ml) {
                Ok(fit) if fit.nll <= obj => {
                    theta = fit.params;
                    obj = fit.nll;
                }
                Ok(_) => {}
                // a perfect fit leaves nothing to model
                Err(Error::DegenerateInput(_)) => break,
                Err(e) => return Err(e),
            }
            let candidate = grow_under(data, &sample, &theta, cfg, rng)?;
            let cand_obj = objective(&candidate, &theta)?;
            if cand_obj <= obj {
                nodes = candidate;
                obj = cand_obj;
            }
            trace.push(obj);
        }
        (nodes, theta, trace)
    };

    let fitted = tree_mean(&nodes, data.x);
    let resid: Vec<f64> = data.y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let covariance = FittedCovariance::from_distances(theta, data.sites.to_vec(), resid, data.dist)?;
    Ok(SpatialTree {
        nodes,
        covariance,
        bootstrap,
        objective_trace: trace,
    })
}

fn tree_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Fits one spatial tree to a working-scale outcome `y`. The same seed
/// gives the first tree of a forest.
pub fn fit_spatial_tree(
    x: MatRef<'_, f64>,
    y: &[f64],
    sites: &[Location],
    cfg: &SpatRfConfig,
    seed: u64,
) -> Result<SpatialTree> {
    check_training(x, y, sites)?;
    cfg.validate(y.len())?;
    let dist = pairwise_distances(sites)?;
    let data = TrainingSet {
        x,
        y,
        sites,
        dist: dist.as_ref(),
    };
    fit_tree(&data, cfg, &mut tree_rng(seed, 0))
}

fn check_training(x: MatRef<'_, f64>, y: &[f64], sites: &[Location]) -> Result<()> {
    if x.nrows() != y.len() || sites.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: x.nrows().min(sites.len()),
        });
    }
    if x.ncols() == 0 {
        return Err(Error::EmptyFeatures);
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite outcome at row {i}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "ForestRecord")]
pub struct SpatRfModel {
    trees: Vec<SpatialTree>,
    config: SpatRfConfig,
    n_covariates: usize,
    transform: OutcomeTransform,
    names: Vec<String>,
}

#[derive(Deserialize)]
struct ForestRecord {
    trees: Vec<SpatialTree>,
    config: SpatRfConfig,
    n_covariates: usize,
    transform: OutcomeTransform,
    names: Vec<String>,
}

impl TryFrom<ForestRecord> for SpatRfModel {
    type Error = Error;

    fn try_from(r: ForestRecord) -> Result<Self> {
        SpatRfModel::from_trees(r.trees, r.config, r.n_covariates, r.transform, r.names)
    }
}

impl SpatRfModel {
    /// Assembles a forest from already grown trees.
    pub fn from_trees(
        trees: Vec<SpatialTree>,
        config: SpatRfConfig,
        n_covariates: usize,
        transform: OutcomeTransform,
        names: Vec<String>,
    ) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::InvalidInput("a forest needs at least one tree".into()));
        }
        if names.len() != n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n_covariates,
                got: names.len(),
            });
        }
        let sites = trees[0].covariance.sites();
        for (k, t) in trees.iter().enumerate() {
            if t.max_feature().is_some_and(|f| f >= n_covariates) {
                return Err(Error::InvalidInput(format!(
                    "tree {k} splits on a covariate beyond {n_covariates}"
                )));
            }
            if t.covariance.sites() != sites {
                return Err(Error::InvalidInput(format!(
                    "tree {k} was trained on different sites"
                )));
            }
        }
        Ok(SpatRfModel {
            trees,
            config,
            n_covariates,
            transform,
            names,
        })
    }

    pub fn trees(&self) -> &[SpatialTree] {
        &self.trees
    }

    pub fn config(&self) -> &SpatRfConfig {
        &self.config
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn link(&self) -> LinkFunction {
        self.config.link
    }

    pub fn transform(&self) -> OutcomeTransform {
        self.transform
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn covariance_fixed(&self) -> bool {
        self.config.fixed_covariance.is_some()
    }

    fn check_x(&self, x: MatRef<'_, f64>, sites: &[Location]) -> Result<()> {
        if x.ncols() != self.n_covariates {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates,
                got: x.ncols(),
            });
        }
        if sites.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: sites.len(),
            });
        }
        Ok(())
    }

    /// Tree-averaged mean and kriging terms on the working scale.
    pub fn predict_parts(
        &self,
        x: MatRef<'_, f64>,
        sites: &[Location],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_x(x, sites)?;
        let k = self.trees.len() as f64;
        let mut mean = vec![0.0; x.nrows()];
        let mut krige = vec![0.0; x.nrows()];
        for t in &self.trees {
            for (acc, v) in mean.iter_mut().zip(t.predict_mean(x)) {
                *acc += v;
            }
            for (acc, v) in krige.iter_mut().zip(t.covariance.krige(sites)?) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= k);
        krige.iter_mut().for_each(|v| *v /= k);
        Ok((mean, krige))
    }
}

/// Fits a forest; tree k draws from stream k of the seeded generator, so
/// the result does not depend on the number of worker threads.
pub fn fit_spatrf(data: &Dataset, cfg: &SpatRfConfig) -> Result<SpatRfModel> {
    let sorted;
    let data = match canonical_order(data) {
        Some(order) => {
            sorted = data.subset(&order)?;
            &sorted
        }
        None => data,
    };
    let y = cfg.link.apply_all(data.y_transformed())?;
    check_training(data.x(), &y, data.sites())?;
    cfg.validate(data.n())?;
    let dist = pairwise_distances(data.sites())?;
    let set = TrainingSet {
        x: data.x(),
        y: &y,
        sites: data.sites(),
        dist: dist.as_ref(),
    };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|k| fit_tree(&set, cfg, &mut tree_rng(cfg.seed, k)))
        .collect::<Result<Vec<_>>>()?;
    SpatRfModel::from_trees(
        trees,
        cfg.clone(),
        data.p(),
        data.transform(),
        data.names().to_vec(),
    )
}

/// Predictions on the original outcome scale.
pub fn predict_spatrf(model: &SpatRfModel, x: MatRef<'_, f64>, sites: &[Location]) -> Result<Vec<f64>> {
    let (mean, krige) = model.predict_parts(x, sites)?;
    Ok(mean
        .iter()
        .zip(&krige)
        .map(|(m, k)| model.transform.inverse(model.config.link.invert(m + k)))
        .collect())
}
