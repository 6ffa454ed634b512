//! One discriminative autoencoder layer and its alternating trainer.

mod blocks;
mod objective;
mod train;

pub use blocks::{solve_p1, solve_p2, solve_p3, solve_p4, update_bregman};
pub use objective::{objective_augmented, objective_diae, objective_standard};
pub use train::{train_layer, LayerTrainer, SweepCheck};

use crate::error::{Error, Result};
use crate::lsq::Tolerances;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Identity,
    Tanh,
}

impl ActivationKind {
    pub fn tag(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ActivationKind::Identity),
            1 => Some(ActivationKind::Tanh),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Tanh => "tanh",
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(ActivationKind::Identity),
            "tanh" => Ok(ActivationKind::Tanh),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Element-wise encoder non-linearity. Only invertible maps are offered,
/// because the encoder update solves against `φ⁻¹(Z − B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activation {
    kind: ActivationKind,
    tanh_clamp: f64,
}

pub const DEFAULT_TANH_CLAMP: f64 = 1e-6;

impl Default for Activation {
    fn default() -> Self {
        Activation::identity()
    }
}

impl Activation {
    pub fn identity() -> Self {
        Activation {
            kind: ActivationKind::Identity,
            tanh_clamp: DEFAULT_TANH_CLAMP,
        }
    }

    pub fn tanh() -> Self {
        Activation {
            kind: ActivationKind::Tanh,
            tanh_clamp: DEFAULT_TANH_CLAMP,
        }
    }

    /// `tanh_clamp` keeps inverse-tanh inputs inside `[−1 + ε, 1 − ε]`.
    pub fn new(kind: ActivationKind, tanh_clamp: f64) -> Result<Self> {
        if !(tanh_clamp > 0.0 && tanh_clamp < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tanh clamp must lie in (0, 1), got {tanh_clamp}"
            )));
        }
        Ok(Activation { kind, tanh_clamp })
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn tanh_clamp(&self) -> f64 {
        self.tanh_clamp
    }

    pub fn apply(&self, t: Matrix) -> Matrix {
        match self.kind {
            ActivationKind::Identity => t,
            ActivationKind::Tanh => t.map(f64::tanh),
        }
    }

    pub fn inverse(&self, t: Matrix) -> Matrix {
        match self.kind {
            ActivationKind::Identity => t,
            ActivationKind::Tanh => {
                let bound = 1.0 - self.tanh_clamp;
                t.map(|v| v.clamp(-bound, bound).atanh())
            }
        }
    }
}

/// Trained parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Encoder, `h × m`.
    pub w_ih: Matrix,
    /// Decoder, `m × h`.
    pub w_ho: Matrix,
    /// Hidden-to-label map, `c × h`.
    pub d: Matrix,
    pub activation: Activation,
}

impl LayerWeights {
    pub fn input_dim(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn classes(&self) -> usize {
        self.d.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, m) = self.w_ih.shape();
        if self.w_ho.shape() != (m, h) {
            return Err(Error::dims("LayerWeights", format!("W_ho {m}x{h}"), self.w_ho.shape_str()));
        }
        if self.d.cols() != h {
            return Err(Error::dims("LayerWeights", format!("D with {h} columns"), self.d.shape_str()));
        }
        if h == 0 || h >= m {
            return Err(Error::InvalidArgument(format!(
                "hidden width {h} must be positive and below the input width {m}"
            )));
        }
        for w in [&self.w_ih, &self.w_ho, &self.d] {
            if !w.is_finite() {
                return Err(Error::InvalidArgument("layer weights contain non-finite values".into()));
            }
        }
        Ok(())
    }

    /// `φ(W_ih · X)`, one `h`-vector per input column.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            return Err(Error::dims(
                "encode",
                format!("{} input rows", self.input_dim()),
                x.shape_str(),
            ));
        }
        Ok(self.activation.apply(self.w_ih.matmul(x)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BregmanRule {
    /// `B ← Z − φ(W_ih X) − B`
    Paper,
    /// `B ← B + φ(W_ih X) − Z`
    Standard,
}

impl BregmanRule {
    pub fn name(self) -> &'static str {
        match self {
            BregmanRule::Paper => "paper",
            BregmanRule::Standard => "standard",
        }
    }
}

impl std::str::FromStr for BregmanRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(BregmanRule::Paper),
            "standard" => Ok(BregmanRule::Standard),
            other => Err(Error::InvalidArgument(format!("unknown Bregman rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the label-consistency term. Zero trains a plain autoencoder.
    pub lambda: f64,
    /// Weight of the proxy-consistency penalty, fixed for the whole run.
    pub mu: f64,
    pub max_iter: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
    /// Tikhonov damping added to every normal-equation system.
    pub damping: f64,
    pub seed: u64,
    pub bregman_rule: BregmanRule,
    pub activation: Activation,
    pub solver: Tolerances,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 10.0,
            mu: 1.0,
            max_iter: 20,
            tol: 1e-4,
            damping: 1e-6,
            seed: 0,
            bregman_rule: BregmanRule::Paper,
            activation: Activation::identity(),
            solver: Tolerances::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidArgument(format!("{what} out of range: {v}")))
        };
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", self.lambda);
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad("mu", self.mu);
        }
        if !(self.tol > 0.0) {
            return bad("tol", self.tol);
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping", self.damping);
        }
        Ok(())
    }
}

/// One row of the convergence trace, recorded after the Bregman update that
/// closes an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    /// `‖X − W_ho Z‖_F²`
    pub recon_loss: f64,
    /// `‖L − D Z‖_F²`
    pub disc_loss: f64,
    /// `‖Z − φ(W_ih X) − B‖_F`
    pub constraint_residual: f64,
    pub objective: f64,
}

impl TraceRow {
    pub const CSV_HEADER: &'static str = "iter,recon_loss,disc_loss,constraint_residual,objective";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?}",
            self.iter, self.recon_loss, self.disc_loss, self.constraint_residual, self.objective
        )
    }
}

/// Variables that only exist while a layer trains.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    /// Proxy for `φ(W_ih X)`, `h × N`.
    pub z: Matrix,
    /// Bregman variable, `h × N`.
    pub b: Matrix,
    pub iter: usize,
    pub trace: Vec<TraceRow>,
    /// Augmented objective at initialization, the reference for the first
    /// convergence test.
    pub initial_objective: f64,
}

impl AdmmState {
    /// `|f_t − f_{t−1}| / max(f_{t−1}, 1e−12)` for the last completed iteration.
    pub fn last_relative_change(&self) -> Option<f64> {
        let last = self.trace.last()?;
        let prev = match self.trace.len() {
            1 => self.initial_objective,
            n => self.trace[n - 2].objective,
        };
        Some(relative_change(prev, last.objective))
    }
}

pub(crate) fn relative_change(prev: f64, next: f64) -> f64 {
    (next - prev).abs() / prev.max(1e-12)
}
