//! Thin helpers over faer for the dense SPD solves used throughout.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    llt: Llt<f64>,
}

impl Cholesky {
    /// Factorizes `a`, reading only its lower triangle.
    pub fn factor(a: MatRef<'_, f64>) -> Option<Cholesky> {
        let llt = a.llt(Side::Lower).ok()?;
        let l = llt.L();
        if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
            return None;
        }
        Some(Cholesky { llt })
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col(b);
        self.llt.solve_in_place(m.as_mut());
        m.col_as_slice(0).to_vec()
    }

    pub fn solve_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut m = b.to_owned();
        self.llt.solve_in_place(m.as_mut());
        m
    }

    /// L^-1 b, i.e. the whitening transform.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col(b);
        self.llt.L().solve_lower_triangular_in_place(m.as_mut());
        m.col_as_slice(0).to_vec()
    }

    pub fn forward_mat(&self, b: MatRef<'_, f64>) -> Mat<f64> {
        let mut m = b.to_owned();
        self.llt.L().solve_lower_triangular_in_place(m.as_mut());
        m
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }
}

pub fn col(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// a · v for a column-major matrix.
pub fn matvec(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), v.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &vj) in v.iter().enumerate() {
        if vj == 0.0 {
            continue;
        }
        let c = a.col(j);
        for (o, i) in out.iter_mut().zip(0..a.nrows()) {
            *o += c[i] * vj;
        }
    }
    out
}

/// aᵀ · v.
pub fn matvec_t(a: MatRef<'_, f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), v.len());
    (0..a.ncols())
        .map(|j| {
            let c = a.col(j);
            (0..a.nrows()).map(|i| c[i] * v[i]).sum()
        })
        .collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (n - 1 denominator).
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

/// Least squares of `y` on the columns of `design` via normal equations.
/// Returns `None` when the design is rank deficient.
pub fn least_squares(design: MatRef<'_, f64>, y: &[f64]) -> Option<Vec<f64>> {
    let gram = design.transpose() * design;
    let rhs = matvec_t(design, y);
    Cholesky::factor(gram.as_ref()).map(|c| c.solve(&rhs))
}
