//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Relative paths are
//! resolved against the directory holding the config file.
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `train.format` | `idx` or `delimited` | `idx` |
//! | `train.images`, `train.labels` | IDX file pair | required for `idx` |
//! | `train.path` | delimited table | required for `delimited` |
//! | `train.delimiter` | single character, or `tab` | `,` |
//! | `train.label_column` | zero-based label column | `0` |
//! | `train.header` | skip the first line | `false` |
//! | `train.subset` | stratified sample size, `0` keeps all | `0` |
//! | `test.*` | same keys for the evaluation split | no test split |
//! | `data.seed` | subsetting seed | `0` |
//! | `classes` | number of classes | largest label + 1 |
//! | `widths` | hidden widths, comma separated | required |
//! | `lambda` | one value or one per layer | `10` |
//! | `mu`, `max_iter`, `tol`, `damping`, `seed` | per-layer training settings | see `TrainConfig` |
//! | `bregman_rule` | `paper` or `standard` | `paper` |
//! | `activation` | `identity` or `tanh` | `identity` |
//! | `tanh_clamp` | inverse-tanh clamp | `1e-6` |
//! | `classifier` | `knn1` or `linear` | `knn1` |
//! | `knn_k` | neighbours for `knn1` | `1` |
//! | `output_dir` | where outputs go | `out` |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{self, Dataset, DelimitedOptions};
use crate::error::{Error, Result};
use crate::layer::{Activation, ActivationKind, BregmanRule, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Idx { images: PathBuf, labels: PathBuf },
    Delimited { path: PathBuf, options: DelimitedOptions },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// Stratified sample size; `None` keeps every sample.
    pub subset: Option<usize>,
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let full = match &self.source {
            DatasetSource::Idx { images, labels } => data::load_idx(images, labels)?,
            DatasetSource::Delimited { path, options } => data::load_delimited_with(path, options)?,
        };
        match self.subset {
            Some(n) if n < full.len() => data::subset(&full, n, seed),
            Some(n) if n > full.len() => Err(Error::Config(format!(
                "subset of {n} requested but the dataset holds {}",
                full.len()
            ))),
            _ => Ok(full),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classifier {
    Knn,
    Linear,
}

impl Classifier {
    pub fn name(self) -> &'static str {
        match self {
            Classifier::Knn => "knn1",
            Classifier::Linear => "linear",
        }
    }
}

impl FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn1" | "knn" => Ok(Classifier::Knn),
            "linear" => Ok(Classifier::Linear),
            other => Err(Error::Config(format!("unknown classifier `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: DatasetSpec,
    pub test: Option<DatasetSpec>,
    pub data_seed: u64,
    pub classes: Option<usize>,
    pub widths: Vec<usize>,
    /// One config per layer.
    pub layers: Vec<TrainConfig>,
    pub classifier: Classifier,
    pub knn_k: usize,
    pub output_dir: PathBuf,
}

const KNOWN: &[&str] = &[
    "data.seed",
    "classes",
    "widths",
    "lambda",
    "mu",
    "max_iter",
    "tol",
    "damping",
    "seed",
    "bregman_rule",
    "activation",
    "tanh_clamp",
    "classifier",
    "knn_k",
    "output_dir",
];

const SPLIT_KEYS: &[&str] = &[
    "format",
    "images",
    "labels",
    "path",
    "delimiter",
    "label_column",
    "header",
    "subset",
];

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = Keys::read(text)?;
        let train = kv
            .split("train", base)?
            .ok_or_else(|| Error::Config("no training data: set `train.images` or `train.path`".into()))?;
        let test = kv.split("test", base)?;

        let widths: Vec<usize> = kv
            .take("widths")
            .ok_or_else(|| Error::Config("key `widths` is required".into()))
            .and_then(|v| list("widths", &v))?;
        if widths.is_empty() {
            return Err(Error::Config("key `widths`: needs at least one width".into()));
        }
        let d = TrainConfig::default();
        let lambdas: Vec<f64> = match kv.take("lambda") {
            Some(v) => list("lambda", &v)?,
            None => vec![d.lambda],
        };
        if lambdas.len() != 1 && lambdas.len() != widths.len() {
            return Err(Error::Config(format!(
                "key `lambda`: {} values for {} layers",
                lambdas.len(),
                widths.len()
            )));
        }
        let kind: ActivationKind = kv.parsed("activation")?.unwrap_or(ActivationKind::Identity);
        let clamp: f64 = kv.parsed("tanh_clamp")?.unwrap_or(crate::layer::DEFAULT_TANH_CLAMP);
        let activation =
            Activation::new(kind, clamp).map_err(|e| Error::Config(format!("key `tanh_clamp`: {e}")))?;
        let base_cfg = TrainConfig {
            lambda: lambdas[0],
            mu: kv.parsed("mu")?.unwrap_or(d.mu),
            max_iter: kv.parsed("max_iter")?.unwrap_or(d.max_iter),
            tol: kv.parsed("tol")?.unwrap_or(d.tol),
            damping: kv.parsed("damping")?.unwrap_or(d.damping),
            seed: kv.parsed("seed")?.unwrap_or(d.seed),
            bregman_rule: kv.parsed::<BregmanRule>("bregman_rule")?.unwrap_or(d.bregman_rule),
            activation,
            solver: d.solver,
        };
        let layers: Vec<TrainConfig> = (0..widths.len())
            .map(|k| TrainConfig {
                lambda: lambdas[if lambdas.len() == 1 { 0 } else { k }],
                ..base_cfg
            })
            .collect();
        for (k, c) in layers.iter().enumerate() {
            c.validate().map_err(|e| Error::Config(format!("layer {k}: {e}")))?;
        }

        let cfg = RunConfig {
            train,
            test,
            data_seed: kv.parsed("data.seed")?.unwrap_or(0),
            classes: kv.parsed("classes")?,
            widths,
            layers,
            classifier: kv.parsed("classifier")?.unwrap_or(Classifier::Knn),
            knn_k: kv.parsed("knn_k")?.unwrap_or(1),
            output_dir: base.join(kv.take("output_dir").unwrap_or_else(|| "out".into())),
        };
        if cfg.knn_k == 0 {
            return Err(Error::Config("key `knn_k`: must be at least 1".into()));
        }
        if cfg.widths.contains(&0) || cfg.widths.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "key `widths`: {:?} must be positive and strictly decreasing",
                cfg.widths
            )));
        }
        kv.finish()?;
        Ok(cfg)
    }

    /// Same config with every layer's label weight set to `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> RunConfig {
        let mut c = self.clone();
        c.layers.iter_mut().for_each(|l| l.lambda = lambda);
        c
    }
}

struct Keys(BTreeMap<String, String>);

impl Keys {
    fn read(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            let known = KNOWN.contains(&k.as_str())
                || k.split_once('.')
                    .is_some_and(|(s, f)| (s == "train" || s == "test") && SPLIT_KEYS.contains(&f));
            if !known {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
            }
            if map.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: key `{k}` set twice", i + 1)));
            }
        }
        Ok(Keys(map))
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.take(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("key `{key}`: `{v}`: {e}"))))
            .transpose()
    }

    fn split(&mut self, prefix: &str, base: &Path) -> Result<Option<DatasetSpec>> {
        let key = |f: &str| format!("{prefix}.{f}");
        if !self.0.keys().any(|k| k.starts_with(&format!("{prefix}."))) {
            return Ok(None);
        }
        let format = self.take(&key("format")).unwrap_or_else(|| "idx".into());
        let mut path_of = |f: &str| {
            self.take(&key(f))
                .map(|p| base.join(p))
                .ok_or_else(|| Error::Config(format!("key `{}` is required", key(f))))
        };
        let source = match format.as_str() {
            "idx" => DatasetSource::Idx {
                images: path_of("images")?,
                labels: path_of("labels")?,
            },
            "delimited" => {
                let path = path_of("path")?;
                let delimiter = match self.take(&key("delimiter")).as_deref() {
                    None => ',',
                    Some("tab") => '\t',
                    Some(s) if s.chars().count() == 1 => s.chars().next().unwrap(),
                    Some(s) => {
                        return Err(Error::Config(format!(
                            "key `{}`: `{s}` is not a single character",
                            key("delimiter")
                        )))
                    }
                };
                DatasetSource::Delimited {
                    path,
                    options: DelimitedOptions {
                        delimiter,
                        label_column: self.parsed(&key("label_column"))?.unwrap_or(0),
                        header: self.parsed(&key("header"))?.unwrap_or(false),
                        scale: true,
                    },
                }
            }
            other => return Err(Error::Config(format!("key `{}`: unknown format `{other}`", key("format")))),
        };
        let subset = match self.parsed::<usize>(&key("subset"))? {
            Some(0) | None => None,
            Some(n) => Some(n),
        };
        Ok(Some(DatasetSpec { source, subset }))
    }

    fn finish(self) -> Result<()> {
        match self.0.keys().next() {
            Some(k) => Err(Error::Config(format!("key `{k}` does not apply to this data format"))),
            None => Ok(()),
        }
    }
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(format!("key `{key}`: `{s}`: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let c = parse("train.images = a\ntrain.labels = b\nwidths = 4\n").unwrap();
        assert_eq!(
            c.train.source,
            DatasetSource::Idx {
                images: "/cfg/a".into(),
                labels: "/cfg/b".into()
            }
        );
        assert_eq!(c.widths, vec![4]);
        assert_eq!(c.layers, vec![TrainConfig::default()]);
        assert_eq!(c.classifier, Classifier::Knn);
        assert_eq!(c.output_dir, PathBuf::from("/cfg/out"));
        assert!(c.test.is_none());
    }

    #[test]
    fn full_config() {
        let c = parse(
            "# comment\n\
             train.format = delimited\ntrain.path = t.csv\ntrain.delimiter = tab\n\
             train.label_column = 3\ntrain.header = true\ntrain.subset = 50\n\
             test.images = /abs/i\ntest.labels = l\n\
             widths = 6, 4\nlambda = 1,2\nmu = 0.5\nmax_iter = 3\nseed = 7\n\
             bregman_rule = standard\nactivation = tanh\ntanh_clamp = 0.01\n\
             classifier = linear\noutput_dir = /tmp/o\n",
        )
        .unwrap();
        match &c.train.source {
            DatasetSource::Delimited { path, options } => {
                assert_eq!(path, &PathBuf::from("/cfg/t.csv"));
                assert_eq!(options.delimiter, '\t');
                assert_eq!(options.label_column, 3);
                assert!(options.header);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.train.subset, Some(50));
        assert_eq!(c.layers[1].lambda, 2.0);
        assert_eq!(c.layers[0].mu, 0.5);
        assert_eq!(c.layers[1].bregman_rule, BregmanRule::Standard);
        assert_eq!(c.layers[0].activation.tanh_clamp(), 0.01);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/o"));
        assert_eq!(c.classifier, Classifier::Linear);
    }

    #[test]
    fn errors_name_the_key() {
        let base = "train.images = a\ntrain.labels = b\n";
        for (extra, needle) in [
            ("widths = 4\nfoo = 1\n", "foo"),
            ("widths = x\n", "widths"),
            ("widths = 4\nmu = 0\n", "mu"),
            ("widths = 4,5\n", "widths"),
            ("widths = 4,3\nlambda = 1,2,3\n", "lambda"),
            ("widths = 4\nwidths = 3\n", "widths"),
            ("widths = 4\ntrain.path = p\n", "train.path"),
            ("widths = 4\nclassifier = svm\n", "svm"),
            ("", "widths"),
        ] {
            let err = parse(&format!("{base}{extra}")).unwrap_err().to_string();
            assert!(err.contains(needle), "{extra:?}: {err}");
        }
        assert!(parse("widths = 4\n").unwrap_err().to_string().contains("train"));
    }
}
