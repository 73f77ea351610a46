//! The victim-model abstraction: query-only soft memberships, hard labels,
//! trainable desk-scale clusterers, and a label-only wrapper.

mod kmeans;
mod toy;

pub use kmeans::{kmeans_baseline, lloyd_kmeans, KmeansModel, KmeansSnapshot};
pub use toy::{train_autoencoder, train_toy_clusterer, ToyClustererSnapshot, ToyDeepClusterer, TrainerConfig};

use std::path::Path;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::data::ImageBatch;
use crate::nn::NetCache;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Row-stochastic matrix of per-sample cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMembership {
    probs: Array2<f64>,
}

impl SoftMembership {
    pub fn new(probs: Array2<f64>) -> Result<SoftMembership> {
        if probs.ncols() < 2 {
            return Err(Error::invalid("k", "membership needs k >= 2 clusters"));
        }
        for row in probs.rows() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::invalid("probs", "rows must be stochastic"));
            }
        }
        Ok(SoftMembership { probs })
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }
}

/// Hard cluster labels in [0, k).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    pub labels: Vec<usize>,
    pub k: usize,
}

/// Per-row argmax with ties broken toward the lowest cluster index.
pub fn hard_labels(m: &SoftMembership) -> LabelVector {
    let labels = m
        .probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    LabelVector { labels, k: m.k() }
}

/// Frozen clustering model queried for soft memberships. Each `query` call
/// counts as one batch query against the model.
pub trait ClusterModel: Send + Sync {
    fn k(&self) -> usize;
    fn query(&self, batch: &ImageBatch) -> Result<SoftMembership>;
    fn query_count(&self) -> u64;
}

/// Opaque forward-pass record from [`VictimModel::query_traced`], consumed by
/// [`VictimModel::backprop_input`].
pub enum QueryTrace {
    Encoder {
        cache: NetCache,
        z: Array2<f64>,
        q: Array2<f64>,
    },
    Flat {
        x: Array2<f64>,
        q: Array2<f64>,
    },
}

/// A cluster model whose query can also report the gradient of a scalar in
/// the membership outputs with respect to the input pixels. The traced query
/// counts as exactly one batch query; the backward pass issues none.
pub trait VictimModel: ClusterModel {
    fn query_traced(&self, batch: &ImageBatch) -> Result<(SoftMembership, QueryTrace)>;
    fn backprop_input(&self, trace: &QueryTrace, upstream: &Array2<f64>) -> Array4<f64>;
}

/// Decision-based view of a model: exposes hard labels only.
pub struct LabelOnlyModel {
    inner: Arc<dyn ClusterModel>,
}

impl LabelOnlyModel {
    pub fn new(inner: Arc<dyn ClusterModel>) -> LabelOnlyModel {
        LabelOnlyModel { inner }
    }

    pub fn labels(&self, batch: &ImageBatch) -> Result<LabelVector> {
        Ok(hard_labels(&self.inner.query(batch)?))
    }

    pub fn k(&self) -> usize {
        self.inner.k()
    }
}

pub(crate) fn next_query(counter: &AtomicU64) -> u64 {
    counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst) + 1
}

/// Softmax over each row.
pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given q = softmax(logits) and an upstream gradient on q, returns the
/// gradient on the logits.
pub(crate) fn softmax_vjp(q: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(q.raw_dim());
    for i in 0..q.nrows() {
        let dot: f64 = q.row(i).iter().zip(upstream.row(i).iter()).map(|(a, b)| a * b).sum();
        for j in 0..q.ncols() {
            out[[i, j]] = q[[i, j]] * (upstream[[i, j]] - dot);
        }
    }
    out
}

/// Soft assignment: softmax over negative squared distances / temperature.
/// Returns (q, logits).
pub(crate) fn assign_soft(
    z: &Array2<f64>,
    centroids: &Array2<f64>,
    temperature: f64,
) -> (Array2<f64>, Array2<f64>) {
    let (n, k) = (z.nrows(), centroids.nrows());
    let mut logits = Array2::<f64>::zeros((n, k));
    for i in 0..n {
        for j in 0..k {
            let d2: f64 = z
                .row(i)
                .iter()
                .zip(centroids.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            logits[[i, j]] = -d2 / temperature;
        }
    }
    (softmax_rows(&logits), logits)
}

/// Gradient of the assignment logits back to embeddings and centroids.
/// `dlogits` is (n, k); returns (dz (n, d), dcentroids (k, d)).
pub(crate) fn assign_soft_vjp(
    z: &Array2<f64>,
    centroids: &Array2<f64>,
    temperature: f64,
    dlogits: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = (z.nrows(), z.ncols());
    let k = centroids.nrows();
    let mut dz = Array2::<f64>::zeros((n, d));
    let mut dc = Array2::<f64>::zeros((k, d));
    let scale = -2.0 / temperature;
    for i in 0..n {
        for j in 0..k {
            let g = dlogits[[i, j]] * scale;
            if g == 0.0 {
                continue;
            }
            for t in 0..d {
                let diff = z[[i, t]] - centroids[[j, t]];
                dz[[i, t]] += g * diff;
                dc[[j, t]] -= g * diff;
            }
        }
    }
    (dz, dc)
}

/// On-disk model checkpoint covering both desk-scale clusterers.
#[derive(Debug, Serialize, Deserialize)]
pub enum ModelCheckpoint {
    Toy(toy::ToyClustererSnapshot),
    Kmeans(kmeans::KmeansSnapshot),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub schema_version: u32,
    pub model: ModelCheckpoint,
}

pub fn save_model_checkpoint(path: &Path, model: ModelCheckpoint) -> Result<()> {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model,
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(f), &file)?;
    Ok(())
}

pub fn load_model_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let f = std::fs::File::open(path)?;
    let file: CheckpointFile = serde_json::from_reader(std::io::BufReader::new(f))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unsupported schema version {}",
            file.schema_version
        )));
    }
    Ok(file)
}

/// Rebuilds a boxed victim model from a checkpoint file.
pub fn victim_from_checkpoint(path: &Path) -> Result<Arc<dyn VictimModel>> {
    let ckpt = load_model_checkpoint(path)?;
    Ok(match ckpt.model {
        ModelCheckpoint::Toy(s) => Arc::new(ToyDeepClusterer::from_snapshot(&s)?),
        ModelCheckpoint::Kmeans(s) => Arc::new(KmeansModel::from_snapshot(&s)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hard_labels_argmax_and_tie_break() {
        let m = SoftMembership::new(array![[0.1, 0.7, 0.2], [0.5, 0.5, 0.0]]).unwrap();
        assert_eq!(hard_labels(&m).labels, vec![1, 0]);
    }

    #[test]
    fn membership_rejects_non_stochastic_rows() {
        assert!(SoftMembership::new(array![[0.5, 0.6]]).is_err());
        assert!(SoftMembership::new(array![[1.2, -0.2]]).is_err());
        assert!(SoftMembership::new(array![[1.0]]).is_err()); // k must be >= 2
    }

    #[test]
    fn softmax_vjp_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 0.7], [2.0, 0.1, -0.4]];
        let upstream = array![[0.5, -0.3, 1.0], [-1.0, 0.2, 0.4]];
        let q = softmax_rows(&logits);
        let dl = softmax_vjp(&q, &upstream);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut lp = logits.clone();
                lp[[i, j]] += h;
                let mut lm = logits.clone();
                lm[[i, j]] -= h;
                let f = |l: &Array2<f64>| -> f64 {
                    let q = softmax_rows(l);
                    q.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
                };
                let fd = (f(&lp) - f(&lm)) / (2.0 * h);
                assert!((fd - dl[[i, j]]).abs() < 1e-6, "{fd} vs {}", dl[[i, j]]);
            }
        }
    }

    #[test]
    fn assignment_vjp_matches_finite_differences() {
        let z = array![[0.2, -0.4], [1.1, 0.3]];
        let c = array![[0.0, 0.0], [1.0, 1.0], [-1.0, 0.5]];
        let upstream = array![[0.1, -0.2, 0.9], [0.4, 0.4, -0.3]];
        let (q, _) = assign_soft(&z, &c, 0.7);
        let dlogits = softmax_vjp(&q, &upstream);
        let (dz, dc) = assign_soft_vjp(&z, &c, 0.7, &dlogits);
        let f = |z: &Array2<f64>, c: &Array2<f64>| -> f64 {
            let (q, _) = assign_soft(z, c, 0.7);
            q.iter().zip(upstream.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in 0..z.nrows() {
            for t in 0..z.ncols() {
                let mut zp = z.clone();
                zp[[i, t]] += h;
                let mut zm = z.clone();
                zm[[i, t]] -= h;
                let fd = (f(&zp, &c) - f(&zm, &c)) / (2.0 * h);
                assert!((fd - dz[[i, t]]).abs() < 1e-6);
            }
        }
        for j in 0..c.nrows() {
            for t in 0..c.ncols() {
                let mut cp = c.clone();
                cp[[j, t]] += h;
                let mut cm = c.clone();
                cm[[j, t]] -= h;
                let fd = (f(&z, &cp) - f(&z, &cm)) / (2.0 * h);
                assert!((fd - dc[[j, t]]).abs() < 1e-6);
            }
        }
    }
}
