use super::{AdmmState, LayerWeights};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Reconstruction cost `‖X − W_ho·φ(W_ih·X)‖_F²`.
pub fn objective_standard(x: &Matrix, w: &LayerWeights) -> Result<f64> {
    let h = w.encode(x)?;
    x.dist_sq(&w.w_ho.matmul(&h)?)
}

/// Reconstruction cost plus `λ·‖L − D·φ(W_ih·X)‖_F²`.
pub fn objective_diae(x: &Matrix, l: &Matrix, w: &LayerWeights, lambda: f64) -> Result<f64> {
    check_labels(x, l)?;
    let h = w.encode(x)?;
    let recon = x.dist_sq(&w.w_ho.matmul(&h)?)?;
    let disc = l.dist_sq(&w.d.matmul(&h)?)?;
    Ok(recon + lambda * disc)
}

/// `‖X − W_ho Z‖_F² + λ‖L − D Z‖_F² + μ‖Z − φ(W_ih X) − B‖_F²`
pub fn objective_augmented(
    x: &Matrix,
    l: &Matrix,
    w: &LayerWeights,
    state: &AdmmState,
    lambda: f64,
    mu: f64,
) -> Result<f64> {
    check_labels(x, l)?;
    let encoded = w.encode(x)?;
    let terms = LossTerms::evaluate(x, l, w, &state.z, &state.b, &encoded)?;
    Ok(terms.objective(lambda, mu))
}

fn check_labels(x: &Matrix, l: &Matrix) -> Result<()> {
    if l.cols() != x.cols() {
        return Err(Error::dims(
            "objective",
            format!("L with {} columns", x.cols()),
            l.shape_str(),
        ));
    }
    Ok(())
}

/// The three terms of the augmented objective, unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LossTerms {
    pub recon: f64,
    pub disc: f64,
    pub constraint_sq: f64,
}

impl LossTerms {
    pub fn evaluate(
        x: &Matrix,
        l: &Matrix,
        w: &LayerWeights,
        z: &Matrix,
        b: &Matrix,
        encoded: &Matrix,
    ) -> Result<Self> {
        if z.shape() != b.shape() || z.shape() != encoded.shape() {
            return Err(Error::dims(
                "objective_augmented",
                format!("Z, B, φ(W_ih X) all {}", encoded.shape_str()),
                format!("Z {}, B {}", z.shape_str(), b.shape_str()),
            ));
        }
        Ok(LossTerms {
            recon: x.dist_sq(&w.w_ho.matmul(z)?)?,
            disc: l.dist_sq(&w.d.matmul(z)?)?,
            constraint_sq: constraint_sq(z, encoded, b),
        })
    }

    pub fn objective(&self, lambda: f64, mu: f64) -> f64 {
        self.recon + lambda * self.disc + mu * self.constraint_sq
    }
}

/// `‖Z − E − B‖_F²` for same-shaped operands.
pub(crate) fn constraint_sq(z: &Matrix, encoded: &Matrix, b: &Matrix) -> f64 {
    z.as_slice()
        .iter()
        .zip(encoded.as_slice())
        .zip(b.as_slice())
        .map(|((z, e), b)| {
            let r = z - e - b;
            r * r
        })
        .sum()
}
