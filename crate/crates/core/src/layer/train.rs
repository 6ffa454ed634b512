use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{bregman_with, p3_target, p4_with};
use super::objective::{constraint_sq, LossTerms};
use super::{relative_change, AdmmState, LayerWeights, TraceRow, TrainConfig};
use crate::error::{Error, Result};
use crate::lsq::RightSolver;
use crate::matrix::Matrix;

/// Augmented objective (Bregman variable held fixed) sampled around every
/// block update of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCheck {
    pub before: f64,
    pub after_p1: f64,
    pub after_p2: f64,
    pub after_p3: f64,
    pub after_p4: f64,
    /// `‖Z − φ(W_ih X) − B‖_F²` around the encoder update, which is the only
    /// term that update touches.
    pub constraint_before_p3: f64,
    pub constraint_after_p3: f64,
    pub row: TraceRow,
}

/// Runs the alternating scheme for one layer, one iteration at a time.
///
/// Every iteration updates, in order, the decoder (P1), the label map (P2),
/// the encoder (P3), the proxy `Z` (P4) and finally the Bregman variable.
pub struct LayerTrainer<'a> {
    x: &'a Matrix,
    l: &'a Matrix,
    cfg: TrainConfig,
    weights: LayerWeights,
    state: AdmmState,
    encoder_solver: RightSolver<'a>,
    /// `φ(W_ih X)` for the current encoder.
    encoded: Matrix,
    converged: bool,
}

impl<'a> LayerTrainer<'a> {
    pub fn new(x: &'a Matrix, l: &'a Matrix, hidden: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, n) = x.shape();
        if hidden == 0 || hidden >= m {
            return Err(Error::InvalidArgument(format!(
                "hidden width {hidden} must be positive and below the input width {m}"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
        }
        if l.cols() != n {
            return Err(Error::dims("train_layer", format!("L with {n} columns"), l.shape_str()));
        }
        check_one_hot(l)?;
        if all_columns_equal(x) {
            return Err(Error::Degenerate {
                solve: "P3 (encoder)",
                reason: "every input sample is identical, so X·Xᵀ has rank one".into(),
            });
        }

        let encoder_solver = RightSolver::new(x, cfg.damping, cfg.solver).map_err(|e| {
            Error::Degenerate {
                solve: "P3 (encoder)",
                reason: e.to_string(),
            }
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let r = (6.0 / (m + hidden) as f64).sqrt();
        let w_ih = Matrix::from_fn(hidden, m, |_, _| rng.gen_range(-r..r));
        let weights = LayerWeights {
            w_ih,
            w_ho: Matrix::zeros(m, hidden),
            d: Matrix::zeros(l.rows(), hidden),
            activation: cfg.activation,
        };
        let encoded = weights.encode(x)?;
        let b = Matrix::zeros(hidden, n);
        let z = encoded.clone();
        let initial = LossTerms::evaluate(x, l, &weights, &z, &b, &encoded)?
            .objective(cfg.lambda, cfg.mu);
        Ok(LayerTrainer {
            x,
            l,
            cfg,
            weights,
            state: AdmmState {
                z,
                b,
                iter: 0,
                trace: Vec::new(),
                initial_objective: initial,
            },
            encoder_solver,
            encoded,
            converged: false,
        })
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn state(&self) -> &AdmmState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// `φ(W_ih X)` for the current encoder.
    pub fn encoded(&self) -> &Matrix {
        &self.encoded
    }

    /// True once the relative objective change fell below `cfg.tol`.
    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn finished(&self) -> bool {
        self.converged || self.state.iter >= self.cfg.max_iter
    }

    /// Current value of the augmented objective.
    pub fn objective(&self) -> Result<f64> {
        Ok(self.terms()?.objective(self.cfg.lambda, self.cfg.mu))
    }

    fn terms(&self) -> Result<LossTerms> {
        LossTerms::evaluate(
            self.x,
            self.l,
            &self.weights,
            &self.state.z,
            &self.state.b,
            &self.encoded,
        )
    }

    /// Runs one full iteration and returns its trace row.
    pub fn step(&mut self) -> Result<TraceRow> {
        self.sweep(false).map(|c| c.row)
    }

    /// Like [`step`](Self::step), but also evaluates the objective after each
    /// block update. Costs several extra products per iteration.
    pub fn step_checked(&mut self) -> Result<SweepCheck> {
        self.sweep(true)
    }

    fn sweep(&mut self, check: bool) -> Result<SweepCheck> {
        let (lambda, mu, damping) = (self.cfg.lambda, self.cfg.mu, self.cfg.damping);
        let probe = |this: &Self| -> Result<f64> {
            if check {
                this.objective()
            } else {
                Ok(f64::NAN)
            }
        };
        let before = probe(self)?;

        // P1 and P2 regress on the same Z and share one factorization.
        let proxy_solver = RightSolver::new(&self.state.z, damping, self.cfg.solver)
            .map_err(|e| tag("P1/P2 (proxy Gram)", e))?;
        self.weights.w_ho = proxy_solver.solve(self.x).map_err(|e| tag("P1 (decoder)", e))?;
        let after_p1 = probe(self)?;
        self.weights.d = proxy_solver.solve(self.l).map_err(|e| tag("P2 (label map)", e))?;
        drop(proxy_solver);
        let after_p2 = probe(self)?;

        let constraint_before_p3 = if check {
            constraint_sq(&self.state.z, &self.encoded, &self.state.b)
        } else {
            f64::NAN
        };
        let target = p3_target(&self.state.z, &self.state.b, self.cfg.activation)?;
        self.weights.w_ih = self
            .encoder_solver
            .solve(&target)
            .map_err(|e| tag("P3 (encoder)", e))?;
        self.encoded = self.weights.encode(self.x)?;
        let constraint_after_p3 = if check {
            constraint_sq(&self.state.z, &self.encoded, &self.state.b)
        } else {
            f64::NAN
        };
        let after_p3 = probe(self)?;

        self.state.z = p4_with(
            self.x,
            self.l,
            &self.state.b,
            &self.weights,
            &self.encoded,
            lambda,
            mu,
            damping,
            self.cfg.solver,
        )
        .map_err(|e| tag("P4 (proxy)", e))?;
        let after_p4 = probe(self)?;

        self.state.b = bregman_with(&self.state.z, &self.encoded, &self.state.b, self.cfg.bregman_rule)?;

        let terms = self.terms()?;
        self.state.iter += 1;
        let row = TraceRow {
            iter: self.state.iter,
            recon_loss: terms.recon,
            disc_loss: terms.disc,
            constraint_residual: terms.constraint_sq.sqrt(),
            objective: terms.objective(lambda, mu),
        };
        let prev = self
            .state
            .trace
            .last()
            .map_or(self.state.initial_objective, |r| r.objective);
        self.state.trace.push(row);
        if relative_change(prev, row.objective) < self.cfg.tol {
            self.converged = true;
        }
        log::debug!(
            "iter {:>3}  recon {:.6e}  disc {:.6e}  resid {:.3e}  obj {:.6e}",
            row.iter,
            row.recon_loss,
            row.disc_loss,
            row.constraint_residual,
            row.objective
        );
        Ok(SweepCheck {
            before,
            after_p1,
            after_p2,
            after_p3,
            after_p4,
            constraint_before_p3,
            constraint_after_p3,
            row,
        })
    }

    /// Iterates until `max_iter` or the tolerance stops it.
    pub fn run(&mut self) -> Result<()> {
        while !self.finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (LayerWeights, AdmmState) {
        (self.weights, self.state)
    }
}

fn tag(solve: &'static str, err: Error) -> Error {
    match err {
        Error::Singular { .. } | Error::NotConverged { .. } => Error::Degenerate {
            solve,
            reason: err.to_string(),
        },
        other => other,
    }
}

fn check_one_hot(l: &Matrix) -> Result<()> {
    for j in 0..l.cols() {
        let mut ones = 0;
        for i in 0..l.rows() {
            match l.get(i, j) {
                v if v == 1.0 => ones += 1,
                v if v == 0.0 => {}
                v => {
                    return Err(Error::InvalidArgument(format!(
                        "label matrix entry ({i}, {j}) = {v} is not 0 or 1"
                    )))
                }
            }
        }
        if ones != 1 {
            return Err(Error::InvalidArgument(format!(
                "label matrix column {j} has {ones} ones, expected exactly one"
            )));
        }
    }
    Ok(())
}

fn all_columns_equal(x: &Matrix) -> bool {
    (0..x.rows()).all(|i| {
        let row = x.row(i);
        row.iter().all(|&v| v == row[0])
    })
}

/// Trains one layer from a fresh initialization.
pub fn train_layer(
    x: &Matrix,
    l: &Matrix,
    hidden: usize,
    cfg: TrainConfig,
) -> Result<(LayerWeights, AdmmState)> {
    let mut trainer = LayerTrainer::new(x, l, hidden, cfg)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
