//! Dense damped least squares.
//!
//! Both solvers form the normal equations and factor them with a Cholesky
//! decomposition. When the factorization breaks down on a damped system the
//! solve falls back to conjugate gradients; at zero damping a breakdown is
//! reported as [`Error::Singular`].

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Numerical tolerances of the normal-equation solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// A Cholesky pivot at or below `pivot_rtol · n · max(diag)` counts as
    /// a breakdown.
    pub pivot_rtol: f64,
    /// Relative residual `‖G x − b‖ / ‖b‖` the CG fallback must reach.
    pub cg_rtol: f64,
    /// CG iteration cap, as a multiple of the system size.
    pub cg_max_iter_factor: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            pivot_rtol: f64::EPSILON,
            cg_rtol: 1e-10,
            cg_max_iter_factor: 10,
        }
    }
}

/// Lower Cholesky factor `G = L Lᵀ`, kept alongside `Lᵀ` so both triangular
/// sweeps read contiguous rows.
#[derive(Debug, Clone)]
struct Cholesky {
    n: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Cholesky {
    fn factor(g: &Matrix, pivot_rtol: f64) -> Option<Self> {
        let n = g.rows();
        let max_diag = (0..n).map(|i| g.get(i, i)).fold(0.0_f64, f64::max);
        let threshold = pivot_rtol * n as f64 * max_diag;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let dot: f64 = l[i * n..i * n + j]
                    .iter()
                    .zip(&l[j * n..j * n + j])
                    .map(|(a, b)| a * b)
                    .sum();
                let v = g.get(i, j) - dot;
                if i == j {
                    if !(v > threshold) {
                        return None;
                    }
                    l[i * n + i] = v.sqrt();
                } else {
                    l[i * n + j] = v / l[j * n + j];
                }
            }
        }
        let mut upper = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                upper[j * n + i] = l[i * n + j];
            }
        }
        Some(Cholesky { n, lower: l, upper })
    }

    /// Solves `G x = b` in place.
    fn solve_vec(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.lower[i * n..i * n + i];
            let dot: f64 = row.iter().zip(&b[..i]).map(|(a, y)| a * y).sum();
            b[i] = (b[i] - dot) / self.lower[i * n + i];
        }
        for i in (0..n).rev() {
            let row = &self.upper[i * n + i + 1..(i + 1) * n];
            let dot: f64 = row.iter().zip(&b[i + 1..]).map(|(a, x)| a * x).sum();
            b[i] = (b[i] - dot) / self.upper[i * n + i];
        }
    }

    /// Solves `G X = R` in place, treating every column of `R` as a
    /// right-hand side. Works row by row so each update is a contiguous axpy.
    fn solve_columns(&self, r: &mut Matrix) {
        let n = self.n;
        let p = r.cols();
        let data = r.as_mut_slice();
        for i in 0..n {
            let (done, rest) = data.split_at_mut(i * p);
            let target = &mut rest[..p];
            for j in 0..i {
                let lij = self.lower[i * n + j];
                if lij != 0.0 {
                    axpy(target, -lij, &done[j * p..(j + 1) * p]);
                }
            }
            let inv = 1.0 / self.lower[i * n + i];
            target.iter_mut().for_each(|v| *v *= inv);
        }
        for i in (0..n).rev() {
            let (head, solved) = data.split_at_mut((i + 1) * p);
            let target = &mut head[i * p..];
            for j in i + 1..n {
                let uij = self.upper[i * n + j];
                if uij != 0.0 {
                    axpy(target, -uij, &solved[(j - i - 1) * p..(j - i) * p]);
                }
            }
            let inv = 1.0 / self.upper[i * n + i];
            target.iter_mut().for_each(|v| *v *= inv);
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Cholesky(Cholesky),
    ConjugateGradient,
}

/// A factored damped normal-equation matrix `G + damping·I`, reusable across
/// right-hand sides.
#[derive(Debug, Clone)]
pub struct NormalSystem {
    op: &'static str,
    gram: Matrix,
    factor: Factor,
    tol: Tolerances,
}

impl NormalSystem {
    pub fn new(op: &'static str, mut gram: Matrix, damping: f64, tol: Tolerances) -> Result<Self> {
        check_damping(damping)?;
        if gram.rows() != gram.cols() {
            return Err(Error::dims(op, "square Gram matrix", gram.shape_str()));
        }
        gram.add_diagonal(damping);
        let factor = match Cholesky::factor(&gram, tol.pivot_rtol) {
            Some(c) => Factor::Cholesky(c),
            None if damping == 0.0 => return Err(Error::Singular { op }),
            None => {
                log::debug!("{op}: Cholesky breakdown at damping {damping:e}, using CG");
                Factor::ConjugateGradient
            }
        };
        Ok(NormalSystem {
            op,
            gram,
            factor,
            tol,
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    pub fn uses_cg(&self) -> bool {
        matches!(self.factor, Factor::ConjugateGradient)
    }

    /// `G⁻¹ · rhs`
    pub fn solve_columns(&self, mut rhs: Matrix) -> Result<Matrix> {
        if rhs.rows() != self.dim() {
            return Err(Error::dims(self.op, format!("{} rows", self.dim()), rhs.shape_str()));
        }
        match &self.factor {
            Factor::Cholesky(c) => {
                c.solve_columns(&mut rhs);
                Ok(rhs)
            }
            Factor::ConjugateGradient => {
                let t = rhs.transpose();
                Ok(self.cg_rows(t)?.transpose())
            }
        }
    }

    /// `rhs · G⁻¹` (G is symmetric, so each row is an independent solve).
    pub fn solve_rows(&self, mut rhs: Matrix) -> Result<Matrix> {
        if rhs.cols() != self.dim() {
            return Err(Error::dims(self.op, format!("{} columns", self.dim()), rhs.shape_str()));
        }
        match &self.factor {
            Factor::Cholesky(c) => {
                for i in 0..rhs.rows() {
                    c.solve_vec(rhs.row_mut(i));
                }
                Ok(rhs)
            }
            Factor::ConjugateGradient => self.cg_rows(rhs),
        }
    }

    fn cg_rows(&self, mut rhs: Matrix) -> Result<Matrix> {
        let max_iter = self.tol.cg_max_iter_factor * self.dim().max(1);
        for i in 0..rhs.rows() {
            let b = rhs.row(i).to_vec();
            let (x, residual) = conjugate_gradient(&self.gram, &b, self.tol.cg_rtol, max_iter);
            if residual > self.tol.cg_rtol {
                return Err(Error::NotConverged {
                    op: self.op,
                    residual,
                });
            }
            rhs.row_mut(i).copy_from_slice(&x);
        }
        Ok(rhs)
    }
}

/// Solves `G x = b` for symmetric positive definite `G`. Returns the solution
/// and its relative residual.
pub fn conjugate_gradient(g: &Matrix, b: &[f64], rtol: f64, max_iter: usize) -> (Vec<f64>, f64) {
    let n = b.len();
    let b_norm = norm(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return (x, 0.0);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut gp = vec![0.0; n];
    for _ in 0..max_iter {
        if rr.sqrt() <= rtol * b_norm {
            break;
        }
        for (i, out) in gp.iter_mut().enumerate() {
            *out = dot(g.row(i), &p);
        }
        let pgp = dot(&p, &gp);
        if pgp <= 0.0 {
            break;
        }
        let alpha = rr / pgp;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &gp);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    // Report the true residual, not the recursively updated one.
    let mut res = b.to_vec();
    for (i, out) in res.iter_mut().enumerate() {
        *out -= dot(g.row(i), &x);
    }
    let rel = norm(&res) / b_norm;
    (x, rel)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_damping(damping: f64) -> Result<()> {
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "damping must be finite and non-negative, got {damping}"
        )));
    }
    Ok(())
}

/// Least squares with the unknown on the left of a fixed regressor `C`:
/// minimizes `‖A − W·C‖_F² + damping·‖W‖_F²`.
///
/// Holds the factored `C·Cᵀ + damping·I` so that repeated solves against the
/// same `C` (the encoder update re-uses the layer input every iteration) pay
/// for the factorization once.
#[derive(Debug, Clone)]
pub struct RightSolver<'a> {
    regressor: &'a Matrix,
    system: NormalSystem,
}

impl<'a> RightSolver<'a> {
    pub fn new(regressor: &'a Matrix, damping: f64, tol: Tolerances) -> Result<Self> {
        let system = NormalSystem::new("solve_right", regressor.gram_rows(), damping, tol)?;
        Ok(RightSolver { regressor, system })
    }

    pub fn solve(&self, a: &Matrix) -> Result<Matrix> {
        if a.cols() != self.regressor.cols() {
            return Err(Error::dims(
                "solve_right",
                format!("A with {} columns", self.regressor.cols()),
                a.shape_str(),
            ));
        }
        self.system.solve_rows(a.matmul_t(self.regressor)?)
    }
}

/// Returns `W` (m×k) minimizing `‖A − W·C‖_F² + damping·‖W‖_F²` for `A`
/// (m×n) and `C` (k×n).
pub fn solve_right(a: &Matrix, c: &Matrix, damping: f64) -> Result<Matrix> {
    solve_right_with(a, c, damping, Tolerances::default())
}

pub fn solve_right_with(a: &Matrix, c: &Matrix, damping: f64, tol: Tolerances) -> Result<Matrix> {
    if a.cols() != c.cols() {
        return Err(Error::dims(
            "solve_right",
            format!("A with {} columns", c.cols()),
            a.shape_str(),
        ));
    }
    RightSolver::new(c, damping, tol)?.solve(a)
}

/// Returns `W` (k×n) minimizing `‖A − C·W‖_F² + damping·‖W‖_F²` for `A`
/// (m×n) and `C` (m×k).
pub fn solve_left(a: &Matrix, c: &Matrix, damping: f64) -> Result<Matrix> {
    solve_left_with(a, c, damping, Tolerances::default())
}

pub fn solve_left_with(a: &Matrix, c: &Matrix, damping: f64, tol: Tolerances) -> Result<Matrix> {
    if a.rows() != c.rows() {
        return Err(Error::dims(
            "solve_left",
            format!("A with {} rows", c.rows()),
            a.shape_str(),
        ));
    }
    let system = NormalSystem::new("solve_left", c.gram_cols(), damping, tol)?;
    system.solve_columns(c.t_matmul(a)?)
}

/// Stacks blocks with equal column counts top to bottom.
pub fn vstack(blocks: &[&Matrix]) -> Result<Matrix> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidArgument("vstack of an empty block list".into()))?;
    let cols = first.cols();
    let mut data = Vec::with_capacity(blocks.iter().map(|b| b.rows() * cols).sum());
    let mut rows = 0;
    for (i, b) in blocks.iter().enumerate() {
        if b.cols() != cols {
            return Err(Error::dims(
                "vstack",
                format!("{cols} columns"),
                format!("{} in block {i}", b.shape_str()),
            ));
        }
        rows += b.rows();
        data.extend_from_slice(b.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}
