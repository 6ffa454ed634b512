//! Greedy layer-wise stacking, forward encoding and the binary model format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "DIAE"  version:u8  layers:u32
//! per layer: activation:u8  W_ih rows,cols:u32  W_ho rows,cols:u32  D rows,cols:u32
//!            W_ih, W_ho, D as row-major f64
//! entries:u32, then per entry key_len:u32 key  value_len:u32 value (UTF-8)
//! ```
//!
//! The tanh clamp of each layer travels in the metadata block under the
//! reserved `format.` key prefix.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::layer::{Activation, ActivationKind, LayerTrainer, LayerWeights, TraceRow, TrainConfig};
use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"DIAE";
pub const FORMAT_VERSION: u8 = 1;
const RESERVED_PREFIX: &str = "format.";

#[derive(Debug, Clone, PartialEq)]
pub struct StackModel {
    pub layers: Vec<LayerWeights>,
    pub meta: BTreeMap<String, String>,
}

impl StackModel {
    /// Checks that consecutive layers chain and every layer is well formed.
    pub fn new(layers: Vec<LayerWeights>, meta: BTreeMap<String, String>) -> Result<Self> {
        let model = StackModel { layers, meta };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("a stack needs at least one layer".into()));
        }
        for (k, w) in self.layers.iter().enumerate() {
            w.validate().map_err(|e| Error::Layer {
                layer: k,
                source: Box::new(e),
            })?;
            if k > 0 && w.input_dim() != self.layers[k - 1].hidden_dim() {
                return Err(Error::Layer {
                    layer: k,
                    source: Box::new(Error::dims(
                        "StackModel",
                        format!("input width {}", self.layers[k - 1].hidden_dim()),
                        format!("{}", w.input_dim()),
                    )),
                });
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, LayerWeights::hidden_dim)
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerWeights::hidden_dim).collect()
    }

    pub fn top(&self) -> &LayerWeights {
        self.layers.last().expect("validated stack is non-empty")
    }
}

/// Per-layer record of a stack training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub trace: Vec<TraceRow>,
    pub initial_objective: f64,
    /// Relative objective change over the last iteration, `None` when no
    /// iteration ran.
    pub final_rel_change: Option<f64>,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StackTraining {
    pub model: StackModel,
    pub reports: Vec<LayerReport>,
    /// Output of each layer on the training data, captured as it trained.
    pub encodings: Vec<Matrix>,
}

/// Trains `widths.len()` layers one after the other with no joint pass.
///
/// `cfgs` holds either one config shared by every layer or one per layer.
/// Layer `k + 1` sees `φ(W_ih X_k)` of layer `k`, never its proxy `Z`.
pub fn train_stack(x: &Matrix, l: &Matrix, widths: &[usize], cfgs: &[TrainConfig]) -> Result<StackTraining> {
    train_stack_with(x, l, widths, cfgs, |_, _| {})
}

/// As [`train_stack`], calling `on_layer(k, report)` after each layer.
pub fn train_stack_with(
    x: &Matrix,
    l: &Matrix,
    widths: &[usize],
    cfgs: &[TrainConfig],
    mut on_layer: impl FnMut(usize, &LayerReport),
) -> Result<StackTraining> {
    if widths.is_empty() {
        return Err(Error::InvalidArgument("widths must not be empty".into()));
    }
    if cfgs.len() != 1 && cfgs.len() != widths.len() {
        return Err(Error::InvalidArgument(format!(
            "{} layer configs for {} layers",
            cfgs.len(),
            widths.len()
        )));
    }
    let mut prev = x.rows();
    for (k, &w) in widths.iter().enumerate() {
        if w == 0 || w >= prev {
            return Err(Error::Layer {
                layer: k,
                source: Box::new(Error::InvalidArgument(format!(
                    "width {w} must be positive and below its input width {prev}"
                ))),
            });
        }
        prev = w;
    }

    let mut layers = Vec::with_capacity(widths.len());
    let mut reports = Vec::with_capacity(widths.len());
    let mut encodings: Vec<Matrix> = Vec::with_capacity(widths.len());
    let mut meta = BTreeMap::new();
    for (k, &w) in widths.iter().enumerate() {
        let cfg = cfgs[if cfgs.len() == 1 { 0 } else { k }];
        let input = encodings.last().unwrap_or(x);
        let start = Instant::now();
        let wrap = |e: Error| Error::Layer {
            layer: k,
            source: Box::new(e),
        };
        let mut trainer = LayerTrainer::new(input, l, w, cfg).map_err(wrap)?;
        trainer.run().map_err(wrap)?;
        let converged = trainer.converged();
        let output = trainer.encoded().clone();
        let (weights, state) = trainer.into_parts();
        let report = LayerReport {
            final_rel_change: state.last_relative_change(),
            trace: state.trace,
            initial_objective: state.initial_objective,
            converged,
            seconds: start.elapsed().as_secs_f64(),
        };
        record_layer(&mut meta, k, &cfg, &report);
        on_layer(k, &report);
        layers.push(weights);
        reports.push(report);
        encodings.push(output);
    }
    Ok(StackTraining {
        model: StackModel::new(layers, meta)?,
        reports,
        encodings,
    })
}

fn record_layer(meta: &mut BTreeMap<String, String>, k: usize, cfg: &TrainConfig, r: &LayerReport) {
    let mut put = |key: &str, v: String| {
        meta.insert(format!("layer.{k}.{key}"), v);
    };
    put("lambda", format!("{:?}", cfg.lambda));
    put("mu", format!("{:?}", cfg.mu));
    put("max_iter", cfg.max_iter.to_string());
    put("tol", format!("{:?}", cfg.tol));
    put("damping", format!("{:?}", cfg.damping));
    put("seed", cfg.seed.to_string());
    put("bregman_rule", cfg.bregman_rule.name().into());
    put("activation", cfg.activation.kind().name().into());
    put("iterations", r.trace.len().to_string());
    if let Some(last) = r.trace.last() {
        put("final_recon_loss", format!("{:?}", last.recon_loss));
        put("final_disc_loss", format!("{:?}", last.disc_loss));
        put("final_constraint_residual", format!("{:?}", last.constraint_residual));
        put("final_objective", format!("{:?}", last.objective));
    }
    if let Some(c) = r.final_rel_change {
        put("final_rel_change", format!("{c:?}"));
    }
}

/// `h_k = φ(W_ih^(k) h_(k−1))` through every layer. Any column count works,
/// including zero.
pub fn encode_stack(model: &StackModel, x: &Matrix) -> Result<Matrix> {
    if x.rows() != model.input_dim() {
        return Err(Error::dims(
            "encode_stack",
            format!("{} input rows", model.input_dim()),
            x.shape_str(),
        ));
    }
    let mut h = model.layers[0].encode(x)?;
    for w in &model.layers[1..] {
        h = w.encode(&h)?;
    }
    Ok(h)
}

/// Serializes to the binary model format.
pub fn model_bytes(model: &StackModel) -> Result<Vec<u8>> {
    model.validate()?;
    if let Some(k) = model.meta.keys().find(|k| k.starts_with(RESERVED_PREFIX)) {
        return Err(Error::InvalidArgument(format!(
            "metadata key `{k}` uses the reserved `{RESERVED_PREFIX}` prefix"
        )));
    }
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} exceeds the format limit")))
    };

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&u32_of(model.layers.len(), "layer count")?.to_le_bytes());
    for w in &model.layers {
        out.push(w.activation.kind().tag());
        for m in [&w.w_ih, &w.w_ho, &w.d] {
            out.extend_from_slice(&u32_of(m.rows(), "matrix rows")?.to_le_bytes());
            out.extend_from_slice(&u32_of(m.cols(), "matrix cols")?.to_le_bytes());
        }
        for m in [&w.w_ih, &w.w_ho, &w.d] {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let mut entries: Vec<(String, String)> = model
        .layers
        .iter()
        .enumerate()
        .map(|(k, w)| (clamp_key(k), format!("{:?}", w.activation.tanh_clamp())))
        .collect();
    entries.extend(model.meta.iter().map(|(k, v)| (k.clone(), v.clone())));
    out.extend_from_slice(&u32_of(entries.len(), "metadata count")?.to_le_bytes());
    for (k, v) in &entries {
        for s in [k, v] {
            out.extend_from_slice(&u32_of(s.len(), "metadata length")?.to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
    }
    Ok(out)
}

fn clamp_key(k: usize) -> String {
    format!("{RESERVED_PREFIX}layer.{k}.tanh_clamp")
}

pub fn save_model(model: &StackModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &model_bytes(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<StackModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_model(&bytes, path)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.at),
            )
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, format!("{what} is not UTF-8")))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::format(self.path, format!("{what} dimensions {rows}x{cols} overflow")))?;
        let raw = self.take(count * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(self.path, format!("{what}: {e}")))
    }
}

/// Parses the binary model format, rejecting anything inconsistent.
pub fn parse_model(bytes: &[u8], path: &Path) -> Result<StackModel> {
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "not a model file (bad magic)"));
    }
    let version = c.u8("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("format version {version}, this build reads {FORMAT_VERSION}"),
        ));
    }
    let n_layers = c.u32("layer count")?;
    let mut layers = Vec::new();
    let mut kinds = Vec::new();
    for k in 0..n_layers {
        let tag = c.u8("activation tag")?;
        let kind = ActivationKind::from_tag(tag)
            .ok_or_else(|| Error::format(path, format!("layer {k}: unknown activation tag {tag}")))?;
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = c.u32("dimension header")?;
        }
        let [hr, hc, or, oc, dr, dc] = dims;
        if (or, oc) != (hc, hr) || dc != hr {
            return Err(Error::format(
                path,
                format!("layer {k}: inconsistent dimensions W_ih {hr}x{hc}, W_ho {or}x{oc}, D {dr}x{dc}"),
            ));
        }
        let w_ih = c.matrix(hr, hc, "W_ih")?;
        let w_ho = c.matrix(or, oc, "W_ho")?;
        let d = c.matrix(dr, dc, "D")?;
        kinds.push(kind);
        layers.push((w_ih, w_ho, d));
    }
    let n_meta = c.u32("metadata count")?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = c.string("metadata key")?;
        let v = c.string("metadata value")?;
        meta.insert(k, v);
    }
    if c.at != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after metadata", bytes.len() - c.at),
        ));
    }

    let mut weights = Vec::with_capacity(layers.len());
    for (k, ((w_ih, w_ho, d), kind)) in layers.into_iter().zip(kinds).enumerate() {
        let clamp = match meta.remove(&clamp_key(k)) {
            Some(s) => s
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("layer {k}: bad tanh clamp `{s}`")))?,
            None => return Err(Error::format(path, format!("layer {k}: missing tanh clamp entry"))),
        };
        let activation = Activation::new(kind, clamp).map_err(|e| Error::format(path, e.to_string()))?;
        weights.push(LayerWeights {
            w_ih,
            w_ho,
            d,
            activation,
        });
    }
    if let Some(k) = meta.keys().find(|k| k.starts_with(RESERVED_PREFIX)) {
        return Err(Error::format(path, format!("unexpected reserved metadata key `{k}`")));
    }
    StackModel::new(weights, meta).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::one_hot;
    use crate::layer::train_layer;

    fn toy(m: usize, n: usize, c: usize) -> (Matrix, Matrix) {
        let mut s = 0x2545F4914F6CDD1Du64;
        let x = Matrix::from_fn(m, n, |_, _| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        });
        let labels: Vec<usize> = (0..n).map(|j| j % c).collect();
        (x, one_hot(&labels, c).unwrap().into_matrix())
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            max_iter: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_layer_stack_equals_train_layer() {
        let (x, l) = toy(12, 30, 3);
        let run = train_stack(&x, &l, &[5], &[cfg()]).unwrap();
        let (w, state) = train_layer(&x, &l, 5, cfg()).unwrap();
        assert_eq!(run.model.layers, vec![w]);
        assert_eq!(run.reports[0].trace, state.trace);
    }

    #[test]
    fn encode_matches_captured_cascade() {
        let (x, l) = toy(16, 40, 4);
        let run = train_stack(&x, &l, &[10, 7, 5], &[cfg()]).unwrap();
        assert_eq!(run.model.widths(), vec![10, 7, 5]);
        let top = encode_stack(&run.model, &x).unwrap();
        assert_eq!(&top, run.encodings.last().unwrap());
        let empty = encode_stack(&run.model, &Matrix::zeros(16, 0)).unwrap();
        assert_eq!(empty.shape(), (5, 0));
    }

    #[test]
    fn identity_single_layer_encode_is_linear() {
        let (x, l) = toy(8, 20, 2);
        let run = train_stack(&x, &l, &[3], &[cfg()]).unwrap();
        let want = run.model.layers[0].w_ih.matmul(&x).unwrap();
        assert_eq!(encode_stack(&run.model, &x).unwrap(), want);
    }

    #[test]
    fn rejects_bad_widths_and_configs() {
        let (x, l) = toy(8, 20, 2);
        assert!(train_stack(&x, &l, &[], &[cfg()]).is_err());
        assert!(train_stack(&x, &l, &[8], &[cfg()]).is_err());
        assert!(train_stack(&x, &l, &[5, 5], &[cfg()]).is_err());
        assert!(train_stack(&x, &l, &[5, 3], &[cfg(), cfg(), cfg()]).is_err());
        let err = train_stack(&x, &l, &[5, 6], &[cfg()]).unwrap_err();
        assert!(matches!(err, Error::Layer { layer: 1, .. }), "{err}");
    }

    #[test]
    fn later_layer_seed_leaves_earlier_layers_alone() {
        let (x, l) = toy(12, 30, 3);
        let a = train_stack(&x, &l, &[8, 4], &[cfg(), cfg()]).unwrap();
        let other = TrainConfig { seed: 99, ..cfg() };
        let b = train_stack(&x, &l, &[8, 4], &[cfg(), other]).unwrap();
        assert_eq!(a.model.layers[0], b.model.layers[0]);
        assert_ne!(a.model.layers[1].w_ih, b.model.layers[1].w_ih);
    }

    fn tanh_model() -> StackModel {
        let (x, l) = toy(10, 24, 3);
        let c2 = TrainConfig {
            activation: Activation::new(ActivationKind::Tanh, 1e-3).unwrap(),
            ..cfg()
        };
        let mut m = train_stack(&x, &l, &[6, 4], &[cfg(), c2]).unwrap().model;
        m.meta.insert("dataset.fingerprint".into(), "abc".into());
        m
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.diae");
        let model = tanh_model();
        save_model(&model, &p).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back, model);
        assert_eq!(model_bytes(&back).unwrap(), fs::read(&p).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let path = Path::new("m");
        let bytes = model_bytes(&tanh_model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_model(&bad, path).unwrap_err().to_string().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(parse_model(&bad, path).unwrap_err().to_string().contains("version"));
        // cut in the middle of the first W_ih
        let err = parse_model(&bytes[..9 + 1 + 24 + 40], path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut long = bytes.clone();
        long.push(0);
        assert!(parse_model(&long, path).unwrap_err().to_string().contains("trailing"));
        let mut bad = bytes.clone();
        bad[9 + 1 + 8] = 7; // W_ho rows
        assert!(parse_model(&bad, path).unwrap_err().to_string().contains("inconsistent"));
    }

    #[test]
    fn reserved_meta_keys_cannot_be_saved() {
        let mut m = tanh_model();
        m.meta.insert("format.x".into(), "1".into());
        assert!(model_bytes(&m).is_err());
    }
}
