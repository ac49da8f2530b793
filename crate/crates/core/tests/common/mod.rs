//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's linear algebra.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use spvim_core::covariance::CovarianceParams;
use spvim_core::data::Location;

pub type Dense = Vec<Vec<f64>>;

/// Gauss–Jordan inverse with partial pivoting.
pub fn inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut m: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        assert!(d != 0.0, "singular matrix");
        for v in m[c].iter_mut() {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                if f != 0.0 {
                    for k in 0..2 * n {
                        m[r][k] -= f * m[c][k];
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn mat_vec(a: &Dense, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

pub fn kernel(a: &Location, b: &Location, t: &CovarianceParams, same: bool) -> f64 {
    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    t.psill * (-d / t.range).exp() + if same { t.nugget } else { 0.0 }
}

/// Conditional mean of the test block from the inverse of the joint
/// covariance: −Λ_tt⁻¹ Λ_tr r.
pub fn krige_partitioned(
    train: &[Location],
    test: &[Location],
    t: &CovarianceParams,
    r: &[f64],
) -> Vec<f64> {
    let all: Vec<&Location> = test.iter().chain(train).collect();
    let n = all.len();
    let joint: Dense = (0..n)
        .map(|i| (0..n).map(|j| kernel(all[i], all[j], t, i == j)).collect())
        .collect();
    let lam = inverse(&joint);
    let m = test.len();
    let ltt: Dense = (0..m).map(|i| lam[i][..m].to_vec()).collect();
    let ltr_r: Vec<f64> = (0..m)
        .map(|i| lam[i][m..].iter().zip(r).map(|(a, b)| a * b).sum())
        .collect();
    mat_vec(&inverse(&ltt), &ltr_r).into_iter().map(|v| -v).collect()
}

/// Fitted values of least squares on `design` (rows) with weight matrix
/// `w` (identity when `None`), via the normal equations.
pub fn weighted_ls_fitted(design: &Dense, y: &[f64], w: Option<&Dense>) -> Vec<f64> {
    let n = design.len();
    let k = design[0].len();
    let wy: Vec<f64> = match w {
        Some(w) => mat_vec(w, y),
        None => y.to_vec(),
    };
    let wx: Dense = match w {
        Some(w) => (0..n)
            .map(|i| (0..k).map(|c| (0..n).map(|j| w[i][j] * design[j][c]).sum()).collect())
            .collect(),
        None => design.clone(),
    };
    let xtwx: Dense = (0..k)
        .map(|a| (0..k).map(|b| (0..n).map(|i| design[i][a] * wx[i][b]).sum()).collect())
        .collect();
    let xtwy: Vec<f64> = (0..k).map(|a| (0..n).map(|i| design[i][a] * wy[i]).sum()).collect();
    let beta = mat_vec(&inverse(&xtwx), &xtwy);
    design
        .iter()
        .map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn random_sites(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Location> {
    (0..n)
        .map(|i| Location::new(i as i64, extent * rng.random::<f64>(), extent * rng.random::<f64>()))
        .collect()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Plain CART node in preorder.
#[derive(Debug, Clone, PartialEq)]
pub enum CartNode {
    Split { feature: usize, threshold: f64 },
    Leaf { value: f64 },
}

/// Exhaustive CART on unit-weight rows: SSE reduction, thresholds at
/// midpoints of sorted unique values, first best on ties, children of at
/// least `min_leaf` rows.
pub fn plain_cart(x: &Dense, y: &[f64], min_leaf: usize, max_depth: usize) -> Vec<CartNode> {
    let rows: Vec<usize> = (0..y.len()).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let root_ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let mut out = Vec::new();
    cart_node(x, y, rows, 0, min_leaf, max_depth, 1e-12 * root_ss, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
fn cart_node(
    x: &Dense,
    y: &[f64],
    rows: Vec<usize>,
    depth: usize,
    min_leaf: usize,
    max_depth: usize,
    min_gain: f64,
    out: &mut Vec<CartNode>,
) {
    let n = rows.len();
    let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let constant = rows.iter().all(|&i| y[i] == y[rows[0]]);
    let leaf = CartNode::Leaf { value: mean };
    if depth >= max_depth || n < 2 * min_leaf || constant {
        out.push(leaf);
        return;
    }
    let total: f64 = rows.iter().map(|&i| y[i]).sum();
    let sse = |s: f64, s2: f64, k: f64| s2 - s * s / k;
    let total2: f64 = rows.iter().map(|&i| y[i] * y[i]).sum();
    let parent = sse(total, total2, n as f64);
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..x[0].len() {
        let mut order = rows.clone();
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut s, mut s2) = (0.0, 0.0);
        for t in 0..n - 1 {
            let v = y[order[t]];
            s += v;
            s2 += v * v;
            let (lo, hi) = (x[order[t]][f], x[order[t + 1]][f]);
            let nl = t + 1;
            if hi <= lo || nl < min_leaf || n - nl < min_leaf {
                continue;
            }
            let gain = parent
                - sse(s, s2, nl as f64)
                - sse(total - s, total2 - s2, (n - nl) as f64);
            if best.is_none_or(|b| gain > b.0) {
                let mid = 0.5 * (lo + hi);
                best = Some((gain, f, if mid < hi { mid } else { lo }));
            }
        }
    }
    match best {
        Some((gain, feature, threshold)) if gain > min_gain => {
            out.push(CartNode::Split { feature, threshold });
            let (l, r): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| x[i][feature] <= threshold);
            cart_node(x, y, l, depth + 1, min_leaf, max_depth, min_gain, out);
            cart_node(x, y, r, depth + 1, min_leaf, max_depth, min_gain, out);
        }
        _ => out.push(leaf),
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

/// log|A| by Gaussian elimination with partial pivoting; A must be SPD.
pub fn log_det(a: &Dense) -> f64 {
    let n = a.len();
    let mut m = a.clone();
    let mut total = 0.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        total += d.abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / d;
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    total
}

pub fn cov_dense(sites: &[Location], t: &CovarianceParams) -> Dense {
    (0..sites.len())
        .map(|i| (0..sites.len()).map(|j| kernel(&sites[i], &sites[j], t, i == j)).collect())
        .collect()
}
