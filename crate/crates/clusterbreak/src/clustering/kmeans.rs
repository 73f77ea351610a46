use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_soft, assign_soft_vjp, next_query, softmax_vjp, ClusterModel, QueryTrace, SoftMembership, VictimModel};
use crate::data::{Dataset, ImageBatch};
use crate::error::{Error, Result};

/// Lloyd's algorithm with k-means++ style seeding. Returns (centroids,
/// assignments). Errors if the initial assignment leaves a cluster empty.
pub fn lloyd_kmeans(points: &Array2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = points.nrows();
    let d = points.ncols();
    if k < 2 {
        return Err(Error::invalid("k", "must be >= 2"));
    }
    if k > n {
        return Err(Error::invalid("k", format!("k={k} exceeds sample count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut dist2 = vec![f64::INFINITY; n];
    for j in 1..k {
        for i in 0..n {
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(centroids.row(j - 1).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist2[i] = dist2[i].min(d2);
        }
        let total: f64 = dist2.iter().sum();
        let mut pick = first;
        if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            for (i, &d2) in dist2.iter().enumerate() {
                target -= d2;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.gen_range(0..n);
        }
        centroids.row_mut(j).assign(&points.row(pick));
    }

    let assign = |centroids: &Array2<f64>| -> Vec<usize> {
        (0..n)
            .map(|i| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..k {
                    let d2: f64 = points
                        .row(i)
                        .iter()
                        .zip(centroids.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2 < best_d {
                        best = j;
                        best_d = d2;
                    }
                }
                best
            })
            .collect()
    };

    let mut labels = assign(&centroids);
    for j in 0..k {
        if !labels.contains(&j) {
            return Err(Error::DegenerateClustering { cluster: j });
        }
    }

    for _ in 0..max_iters {
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &points.row(i);
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mut row = sums.row_mut(j);
                row /= counts[j] as f64;
                centroids.row_mut(j).assign(&row);
            }
            // empty clusters keep their previous centroid
        }
        let new_labels = assign(&centroids);
        if new_labels == labels {
            break;
        }
        labels = new_labels;
    }
    Ok((centroids, labels))
}

/// Traditional baseline: Lloyd's algorithm on flattened pixels; queries return
/// softmax of negative squared centroid distances at temperature 1.
pub struct KmeansModel {
    centroids: Array2<f64>, // (k, c*h*w)
    input_shape: (usize, usize, usize),
    counter: AtomicU64,
}

pub fn kmeans_baseline(dataset: &Dataset, k: usize, seed: u64) -> Result<KmeansModel> {
    let flat = flatten_images(dataset.images());
    let (centroids, _) = lloyd_kmeans(&flat, k, seed, 100)?;
    Ok(KmeansModel {
        centroids,
        input_shape: dataset.image_dims(),
        counter: AtomicU64::new(0),
    })
}

fn flatten_images(images: &Array4<f64>) -> Array2<f64> {
    let n = images.shape()[0];
    let rest: usize = images.shape()[1..].iter().product();
    images.clone().into_shape((n, rest)).unwrap()
}

impl KmeansModel {
    fn check_shape(&self, batch: &ImageBatch) -> Result<()> {
        if batch.image_dims() != self.input_shape {
            return Err(Error::shape(
                format!("{:?}", self.input_shape),
                format!("{:?}", batch.image_dims()),
            ));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> KmeansSnapshot {
        KmeansSnapshot {
            centroids: self.centroids.iter().copied().collect(),
            k: self.centroids.nrows(),
            dim: self.centroids.ncols(),
            input_shape: self.input_shape,
        }
    }

    pub fn from_snapshot(snap: &KmeansSnapshot) -> Result<KmeansModel> {
        let centroids = Array2::from_shape_vec((snap.k, snap.dim), snap.centroids.clone())
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        Ok(KmeansModel {
            centroids,
            input_shape: snap.input_shape,
            counter: AtomicU64::new(0),
        })
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KmeansSnapshot {
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    pub input_shape: (usize, usize, usize),
}

impl ClusterModel for KmeansModel {
    fn k(&self) -> usize {
        self.centroids.nrows()
    }

    fn query(&self, batch: &ImageBatch) -> Result<SoftMembership> {
        self.check_shape(batch)?;
        let x = flatten_images(&batch.pixels);
        let (q, _) = assign_soft(&x, &self.centroids, 1.0);
        next_query(&self.counter);
        SoftMembership::new(q)
    }

    fn query_count(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

impl VictimModel for KmeansModel {
    fn query_traced(&self, batch: &ImageBatch) -> Result<(SoftMembership, QueryTrace)> {
        self.check_shape(batch)?;
        let x = flatten_images(&batch.pixels);
        let (q, _) = assign_soft(&x, &self.centroids, 1.0);
        next_query(&self.counter);
        Ok((
            SoftMembership::new(q.clone())?,
            QueryTrace::Flat { x, q },
        ))
    }

    fn backprop_input(&self, trace: &QueryTrace, upstream: &Array2<f64>) -> Array4<f64> {
        let QueryTrace::Flat { x, q } = trace else {
            panic!("trace does not belong to this model");
        };
        let dlogits = softmax_vjp(q, upstream);
        let (dx, _) = assign_soft_vjp(x, &self.centroids, 1.0, &dlogits);
        let (c, h, w) = self.input_shape;
        Array4::from_shape_vec((x.nrows(), c, h, w), dx.iter().copied().collect()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::hard_labels;
    use crate::data::make_synthetic_image_dataset;

    #[test]
    fn separated_blobs_cluster_perfectly() {
        let ds = make_synthetic_image_dataset(20, 2, 1, 6, 6, 8.0, 3).unwrap();
        let model = kmeans_baseline(&ds, 2, 0).unwrap();
        // oracle: every sample nearer its own class centroid than the other's
        let flat = flatten_images(ds.images());
        let mut class_centroids = Array2::<f64>::zeros((2, flat.ncols()));
        let mut counts = [0usize; 2];
        for (i, &l) in ds.labels().iter().enumerate() {
            let mut row = class_centroids.row_mut(l);
            row += &flat.row(i);
            counts[l] += 1;
        }
        for j in 0..2 {
            let mut row = class_centroids.row_mut(j);
            row /= counts[j] as f64;
        }
        for (i, &l) in ds.labels().iter().enumerate() {
            let d_own: f64 = flat.row(i).iter().zip(class_centroids.row(l).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let d_other: f64 = flat.row(i).iter().zip(class_centroids.row(1 - l).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!(d_own < d_other, "sample {i} is not nearer its class centroid");
        }
        // model prediction must match ground truth up to label swap
        let m = model.query(&ds.full_batch()).unwrap();
        let pred = hard_labels(&m).labels;
        let agree = pred.iter().zip(ds.labels()).filter(|(a, b)| a == b).count();
        let acc = agree.max(ds.n() - agree) as f64 / ds.n() as f64;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn k_larger_than_n_is_rejected() {
        let ds = make_synthetic_image_dataset(2, 2, 1, 4, 4, 5.0, 0).unwrap();
        assert!(kmeans_baseline(&ds, 5, 0).is_err());
    }

    #[test]
    fn same_seed_gives_identical_centroids() {
        let ds = make_synthetic_image_dataset(10, 3, 1, 5, 5, 4.0, 1).unwrap();
        let a = kmeans_baseline(&ds, 3, 11).unwrap();
        let b = kmeans_baseline(&ds, 3, 11).unwrap();
        assert_eq!(a.centroids(), b.centroids());
    }

    #[test]
    fn query_counter_increments_per_batch_call() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 4.0, 2).unwrap();
        let model = kmeans_baseline(&ds, 2, 0).unwrap();
        assert_eq!(model.query_count(), 0);
        model.query(&ds.full_batch()).unwrap();
        model.query(&ds.full_batch()).unwrap();
        assert_eq!(model.query_count(), 2);
    }

    #[test]
    fn duplicate_images_get_identical_rows() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 4.0, 2).unwrap();
        let model = kmeans_baseline(&ds, 2, 0).unwrap();
        let one = ds.subset(&[0, 0]).unwrap();
        let m = model.query(&one.full_batch()).unwrap();
        assert_eq!(m.probs().row(0), m.probs().row(1));
    }
}
