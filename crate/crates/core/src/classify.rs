//! Classifiers and separation metrics on encoded features.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Features one per column, with a class id per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    features: Matrix,
    labels: Vec<usize>,
}

impl LabeledFeatures {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.cols() != labels.len() {
            return Err(Error::dims(
                "LabeledFeatures",
                format!("{} labels", features.cols()),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(LabeledFeatures { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }
}

/// Majority label among the `k` Euclidean-nearest training columns.
///
/// Equal distances go to the lower training index; tied votes go to the
/// lower class id.
pub fn knn_predict(train: &LabeledFeatures, query: &Matrix, k: usize) -> Result<Vec<usize>> {
    let n = train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("knn on an empty training set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={n}")));
    }
    let dim = train.features.rows();
    if query.rows() != dim {
        return Err(Error::dims("knn_predict", format!("{dim} feature rows"), query.shape_str()));
    }
    // sample-major copies keep the distance loop contiguous
    let t = train.features.transpose();
    let q = query.transpose();
    let classes = train.classes();
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    let mut votes = vec![0usize; classes];
    let mut out = Vec::with_capacity(query.cols());
    for qi in 0..query.cols() {
        let qv = q.row(qi);
        best.clear();
        for ti in 0..n {
            let worst = if best.len() == k { best[k - 1].0 } else { f64::INFINITY };
            let mut d = 0.0;
            for (a, b) in t.row(ti).iter().zip(qv) {
                let e = a - b;
                d += e * e;
                if d > worst {
                    break;
                }
            }
            if best.len() < k || d < worst {
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, ti));
                best.truncate(k);
            }
        }
        votes.iter_mut().for_each(|v| *v = 0);
        for &(_, ti) in &best {
            votes[train.labels[ti]] += 1;
        }
        out.push(argmax_first(votes.iter().map(|&v| v as f64)));
    }
    Ok(out)
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Row argmax of `D · features` per column, lowest class on ties.
pub fn linear_predict(d: &Matrix, features: &Matrix) -> Result<Vec<usize>> {
    if d.cols() != features.rows() {
        return Err(Error::dims(
            "linear_predict",
            format!("{} feature rows", d.cols()),
            features.shape_str(),
        ));
    }
    let scores = d.matmul(features)?;
    Ok((0..scores.cols())
        .map(|j| argmax_first((0..scores.rows()).map(|i| scores.get(i, j))))
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dims(
            "accuracy",
            format!("{} predictions", truth.len()),
            format!("{}", pred.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("accuracy of zero predictions".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// `trace(S_b) / trace(S_w)` with scatter taken around class means and the
/// global mean, each sample weighted once.
pub fn fisher_ratio(data: &LabeledFeatures) -> Result<f64> {
    let (dim, n) = data.features.shape();
    let classes = data.classes();
    let mut counts = vec![0usize; classes];
    for &l in &data.labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Degenerate {
            solve: "fisher_ratio",
            reason: "needs samples from at least two classes".into(),
        });
    }
    let mut means = Matrix::zeros(dim, classes);
    let mut global = vec![0.0; dim];
    for i in 0..dim {
        let row = data.features.row(i);
        for (j, &v) in row.iter().enumerate() {
            let c = data.labels[j];
            means.set(i, c, means.get(i, c) + v);
            global[i] += v;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                means.set(i, c, means.get(i, c) / cnt as f64);
            }
        }
        global[i] /= n as f64;
    }
    let (mut sb, mut sw) = (0.0, 0.0);
    for i in 0..dim {
        for (c, &cnt) in counts.iter().enumerate() {
            let e = means.get(i, c) - global[i];
            sb += cnt as f64 * e * e;
        }
        for (j, &v) in data.features.row(i).iter().enumerate() {
            let e = v - means.get(i, data.labels[j]);
            sw += e * e;
        }
    }
    if sw <= 1e-12 * (sw + sb) || sw == 0.0 {
        return Err(Error::Degenerate {
            solve: "fisher_ratio",
            reason: format!("within-class scatter {sw:e} is zero"),
        });
    }
    Ok(sb / sw)
}
