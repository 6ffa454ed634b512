//! Closed-form block updates of the alternating scheme.

use super::{Activation, BregmanRule, LayerWeights};
use crate::error::{Error, Result};
use crate::lsq::{self, Tolerances};
use crate::matrix::Matrix;

/// Decoder update: `argmin_{W_ho} ‖X − W_ho·Z‖_F²`.
pub fn solve_p1(x: &Matrix, z: &Matrix, damping: f64) -> Result<Matrix> {
    lsq::solve_right(x, z, damping)
}

/// Label-map update: `argmin_D ‖L − D·Z‖_F²`.
pub fn solve_p2(l: &Matrix, z: &Matrix, damping: f64) -> Result<Matrix> {
    lsq::solve_right(l, z, damping)
}

/// Encoder update: `argmin_{W_ih} ‖φ⁻¹(Z − B) − W_ih·X‖_F²`.
pub fn solve_p3(
    z: &Matrix,
    b: &Matrix,
    x: &Matrix,
    activation: Activation,
    damping: f64,
) -> Result<Matrix> {
    let target = p3_target(z, b, activation)?;
    lsq::solve_right(&target, x, damping)
}

pub(crate) fn p3_target(z: &Matrix, b: &Matrix, activation: Activation) -> Result<Matrix> {
    if z.shape() != b.shape() {
        return Err(Error::dims("solve_p3", z.shape_str(), b.shape_str()));
    }
    Ok(activation.inverse(z.sub(b)?))
}

/// Proxy update: minimizes all three terms of the augmented objective over
/// `Z` as a single stacked least-squares problem
///
/// ```text
/// ‖ [X; √λ·L; √μ·(φ(W_ih X) + B)] − [W_ho; √λ·D; √μ·I]·Z ‖_F²
/// ```
pub fn solve_p4(
    x: &Matrix,
    l: &Matrix,
    b: &Matrix,
    w: &LayerWeights,
    lambda: f64,
    mu: f64,
    damping: f64,
) -> Result<Matrix> {
    let encoded = w.encode(x)?;
    p4_with(x, l, b, w, &encoded, lambda, mu, damping, Tolerances::default())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn p4_with(
    x: &Matrix,
    l: &Matrix,
    b: &Matrix,
    w: &LayerWeights,
    encoded: &Matrix,
    lambda: f64,
    mu: f64,
    damping: f64,
    tol: Tolerances,
) -> Result<Matrix> {
    if !(lambda >= 0.0) || !(mu > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "solve_p4 needs lambda >= 0 and mu > 0, got {lambda} and {mu}"
        )));
    }
    if b.shape() != encoded.shape() {
        return Err(Error::dims("solve_p4", encoded.shape_str(), b.shape_str()));
    }
    let h = w.hidden_dim();
    let (sl, sm) = (lambda.sqrt(), mu.sqrt());
    let left = lsq::vstack(&[&w.w_ho, &scaled(&w.d, sl), &Matrix::identity(h).scale(sm)])?;
    let target = lsq::vstack(&[x, &scaled(l, sl), &encoded.add(b)?.scale(sm)])?;
    lsq::solve_left_with(&target, &left, damping, tol)
}

/// Scales by `s`, producing positive zeros when `s` is zero so that the
/// stacked system is bitwise independent of the scaled block's contents.
fn scaled(m: &Matrix, s: f64) -> Matrix {
    if s == 0.0 {
        Matrix::zeros(m.rows(), m.cols())
    } else {
        m.scale(s)
    }
}

pub fn update_bregman(
    z: &Matrix,
    w_ih: &Matrix,
    x: &Matrix,
    b: &Matrix,
    activation: Activation,
    rule: BregmanRule,
) -> Result<Matrix> {
    let encoded = activation.apply(w_ih.matmul(x)?);
    bregman_with(z, &encoded, b, rule)
}

pub(crate) fn bregman_with(
    z: &Matrix,
    encoded: &Matrix,
    b: &Matrix,
    rule: BregmanRule,
) -> Result<Matrix> {
    if z.shape() != encoded.shape() || z.shape() != b.shape() {
        return Err(Error::dims(
            "update_bregman",
            format!("Z, φ(W_ih X), B all {}", z.shape_str()),
            format!("φ(W_ih X) {}, B {}", encoded.shape_str(), b.shape_str()),
        ));
    }
    let mut out = b.clone();
    let it = out
        .as_mut_slice()
        .iter_mut()
        .zip(z.as_slice().iter().zip(encoded.as_slice()));
    match rule {
        BregmanRule::Paper => it.for_each(|(b, (z, e))| *b = z - e - *b),
        BregmanRule::Standard => it.for_each(|(b, (z, e))| *b = *b + e - z),
    }
    Ok(out)
}
