use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4, ArrayD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    assign_soft, assign_soft_vjp, lloyd_kmeans, next_query, softmax_vjp, ClusterModel, QueryTrace,
    SoftMembership, VictimModel,
};
use crate::data::{batches, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamTensor, LayerSpec, Net, NetSnapshot};

/// Training settings for the desk-scale deep clusterer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub embed_dim: usize,
    pub recon_epochs: usize,
    pub refine_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            embed_dim: 10,
            recon_epochs: 30,
            refine_epochs: 10,
            batch_size: 32,
            lr: 2e-3,
            temperature: 1.0,
            seed: 0,
        }
    }
}

fn encoder_specs(c: usize, h: usize, w: usize, embed_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_c: c, out_c: 4, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inp: 4 * h * w, out: 48 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Dense { inp: 48, out: embed_dim },
    ]
}

fn decoder_specs(c: usize, h: usize, w: usize, embed_dim: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { inp: embed_dim, out: 48 },
        LayerSpec::LeakyRelu { alpha: 0.1 },
        LayerSpec::Dense { inp: 48, out: c * h * w },
        LayerSpec::Sigmoid,
        LayerSpec::Reshape { shape: vec![c, h, w] },
    ]
}

/// Representation phase: trains an autoencoder on the images and returns the
/// encoder. Shared by the toy clusterer and the album-service backend.
pub fn train_autoencoder(
    images: &Array4<f64>,
    embed_dim: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Net {
    let (c, h, w) = {
        let s = images.shape();
        (s[1], s[2], s[3])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Net::build(encoder_specs(c, h, w, embed_dim), &mut rng);
    let mut decoder = Net::build(decoder_specs(c, h, w, embed_dim), &mut rng);
    let mut opt_e = Adam::new(lr, &encoder);
    let mut opt_d = Adam::new(lr, &decoder);
    let n = images.shape()[0];
    let bs = batch_size.min(n);
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        let mut erng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x51_7c_c1_b7));
        order.shuffle(&mut erng);
        for chunk in order.chunks(bs) {
            let mut x = Array4::<f64>::zeros((chunk.len(), c, h, w));
            for (row, &i) in chunk.iter().enumerate() {
                x.index_axis_mut(ndarray::Axis(0), row)
                    .assign(&images.index_axis(ndarray::Axis(0), i));
            }
            let xd = x.clone().into_dyn();
            let (z, cache_e) = encoder.forward(&xd);
            let (xhat, cache_d) = decoder.forward(&z);
            let numel = xhat.len() as f64;
            let upstream = {
                let mut u = xhat.clone();
                u.zip_mut_with(&xd, |uv, &xv| *uv = 2.0 * (*uv - xv) / numel);
                u
            };
            let (gz, grads_d) = decoder.backward(&cache_d, &upstream);
            let (_, grads_e) = encoder.backward(&cache_e, &gz);
            opt_d.step(&mut decoder, &grads_d);
            opt_e.step(&mut encoder, &grads_e);
        }
    }
    encoder
}

/// Desk-scale deep clusterer: a frozen encoder plus cluster centroids in
/// embedding space; soft assignment is a softmax over negative squared
/// embedding-centroid distances divided by the temperature.
pub struct ToyDeepClusterer {
    encoder: Net,
    centroids: Array2<f64>,
    temperature: f64,
    input_shape: (usize, usize, usize),
    counter: AtomicU64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ToyClustererSnapshot {
    pub encoder: NetSnapshot,
    pub centroids: Vec<f64>,
    pub k: usize,
    pub embed_dim: usize,
    pub temperature: f64,
    pub input_shape: (usize, usize, usize),
}

/// Two-phase training: autoencoder representation learning, then k-means
/// centroid init refined by sharpened-target self-training.
pub fn train_toy_clusterer(dataset: &Dataset, k: usize, config: &TrainerConfig) -> Result<ToyDeepClusterer> {
    if k < 2 {
        return Err(Error::invalid("k", "must be >= 2"));
    }
    let (c, h, w) = dataset.image_dims();
    let encoder = train_autoencoder(
        dataset.images(),
        config.embed_dim,
        config.recon_epochs,
        config.batch_size,
        config.lr,
        config.seed,
    );
    let mut model = ToyDeepClusterer {
        encoder,
        centroids: Array2::zeros((k, config.embed_dim)),
        temperature: config.temperature,
        input_shape: (c, h, w),
        counter: AtomicU64::new(0),
    };

    let z_all = model.embed(dataset.images());
    let (centroids, _) = lloyd_kmeans(&z_all, k, config.seed, 100)?;
    model.centroids = centroids;

    // clustering phase: self-training against the sharpened assignment
    let mut opt_e = Adam::new(config.lr, &model.encoder);
    let mut opt_c = AdamTensor::new(config.lr, &[k, config.embed_dim]);
    for epoch in 0..config.refine_epochs {
        let z_all = model.embed(dataset.images());
        let (q_all, _) = assign_soft(&z_all, &model.centroids, model.temperature);
        let target = sharpen(&q_all);
        for batch in batches(
            dataset,
            config.batch_size.min(dataset.n()),
            true,
            config.seed ^ (epoch as u64 + 1),
        )? {
            let xd = batch.pixels_dyn();
            let (z, cache) = model.encoder.forward(&xd);
            let z2 = z.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let (q, _) = assign_soft(&z2, &model.centroids, model.temperature);
            // cross-entropy toward the (detached) target rows of this batch
            let b = batch.len() as f64;
            let mut dlogits = Array2::<f64>::zeros(q.raw_dim());
            for (row, &i) in batch.ids.iter().enumerate() {
                for j in 0..k {
                    dlogits[[row, j]] = (q[[row, j]] - target[[i, j]]) / b;
                }
            }
            let (dz, dc) = assign_soft_vjp(&z2, &model.centroids, model.temperature, &dlogits);
            let (_, grads_e) = model.encoder.backward(&cache, &dz.into_dyn());
            opt_e.step(&mut model.encoder, &grads_e);
            let mut cents = model.centroids.clone().into_dyn();
            opt_c.step(&mut cents, &dc.into_dyn());
            model.centroids = cents.into_dimensionality::<Ix2>().unwrap();
        }
    }
    Ok(model)
}

/// Classic target-distribution sharpening: p_ij ∝ q_ij^2 / f_j, rows renormalized.
fn sharpen(q: &Array2<f64>) -> Array2<f64> {
    let f = q.sum_axis(ndarray::Axis(0));
    let mut p = Array2::<f64>::zeros(q.raw_dim());
    for i in 0..q.nrows() {
        let mut sum = 0.0;
        for j in 0..q.ncols() {
            let v = q[[i, j]] * q[[i, j]] / f[j].max(1e-12);
            p[[i, j]] = v;
            sum += v;
        }
        for j in 0..q.ncols() {
            p[[i, j]] /= sum.max(1e-12);
        }
    }
    p
}

impl ToyDeepClusterer {
    pub fn embed(&self, images: &Array4<f64>) -> Array2<f64> {
        let z: ArrayD<f64> = self.encoder.infer(&images.clone().into_dyn());
        z.into_dimensionality::<Ix2>().unwrap()
    }

    pub fn encoder(&self) -> &Net {
        &self.encoder
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn check_shape(&self, batch: &ImageBatch) -> Result<()> {
        if batch.image_dims() != self.input_shape {
            return Err(Error::shape(
                format!("{:?}", self.input_shape),
                format!("{:?}", batch.image_dims()),
            ));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ToyClustererSnapshot {
        ToyClustererSnapshot {
            encoder: self.encoder.snapshot(),
            centroids: self.centroids.iter().copied().collect(),
            k: self.centroids.nrows(),
            embed_dim: self.centroids.ncols(),
            temperature: self.temperature,
            input_shape: self.input_shape,
        }
    }

    pub fn from_snapshot(snap: &ToyClustererSnapshot) -> Result<ToyDeepClusterer> {
        let centroids = Array2::from_shape_vec((snap.k, snap.embed_dim), snap.centroids.clone())
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        Ok(ToyDeepClusterer {
            encoder: Net::from_snapshot(&snap.encoder)?,
            centroids,
            temperature: snap.temperature,
            input_shape: snap.input_shape,
            counter: AtomicU64::new(0),
        })
    }

    /// Deep copy sharing no state; the query counter starts at zero.
    pub fn clone_frozen(&self) -> ToyDeepClusterer {
        ToyDeepClusterer {
            encoder: self.encoder.clone(),
            centroids: self.centroids.clone(),
            temperature: self.temperature,
            input_shape: self.input_shape,
            counter: AtomicU64::new(0),
        }
    }

    /// Mutable access for retraining (defense fine-tuning).
    pub(crate) fn parts_mut(&mut self) -> (&mut Net, &mut Array2<f64>, f64) {
        (&mut self.encoder, &mut self.centroids, self.temperature)
    }
}

impl ClusterModel for ToyDeepClusterer {
    fn k(&self) -> usize {
        self.centroids.nrows()
    }

    fn query(&self, batch: &ImageBatch) -> Result<SoftMembership> {
        self.check_shape(batch)?;
        let z = self.embed(&batch.pixels);
        let (q, _) = assign_soft(&z, &self.centroids, self.temperature);
        next_query(&self.counter);
        SoftMembership::new(q)
    }

    fn query_count(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}

impl VictimModel for ToyDeepClusterer {
    fn query_traced(&self, batch: &ImageBatch) -> Result<(SoftMembership, QueryTrace)> {
        self.check_shape(batch)?;
        let (z, cache) = self.encoder.forward(&batch.pixels_dyn());
        let z2 = z.into_dimensionality::<Ix2>().unwrap();
        let (q, _) = assign_soft(&z2, &self.centroids, self.temperature);
        next_query(&self.counter);
        Ok((
            SoftMembership::new(q.clone())?,
            QueryTrace::Encoder { cache, z: z2, q },
        ))
    }

    fn backprop_input(&self, trace: &QueryTrace, upstream: &Array2<f64>) -> Array4<f64> {
        let QueryTrace::Encoder { cache, z, q } = trace else {
            panic!("trace does not belong to this model");
        };
        let dlogits = softmax_vjp(q, upstream);
        let (dz, _) = assign_soft_vjp(z, &self.centroids, self.temperature, &dlogits);
        let (gin, _) = self.encoder.backward(cache, &dz.into_dyn());
        gin.into_dimensionality::<ndarray::Ix4>().unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::hard_labels;
    use crate::data::make_synthetic_image_dataset;
    use crate::metrics::nmi;

    fn quick_config(seed: u64) -> TrainerConfig {
        TrainerConfig {
            embed_dim: 8,
            recon_epochs: 15,
            refine_epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            temperature: 1.0,
            seed,
        }
    }

    #[test]
    fn clusterer_matches_or_beats_pixel_kmeans_on_separated_data() {
        let ds = make_synthetic_image_dataset(30, 4, 1, 8, 8, 5.0, 0).unwrap();
        let model = train_toy_clusterer(&ds, 4, &quick_config(0)).unwrap();
        let pred = hard_labels(&model.query(&ds.full_batch()).unwrap()).labels;
        let toy_nmi = nmi(&pred, ds.labels()).unwrap();
        // oracle: k-means directly on raw pixels
        let flat = ds
            .images()
            .clone()
            .into_shape((ds.n(), 64))
            .unwrap();
        let (_, km_labels) = lloyd_kmeans(&flat, 4, 0, 100).unwrap();
        let km_nmi = nmi(&km_labels, ds.labels()).unwrap();
        assert!(
            toy_nmi >= 0.8 && toy_nmi >= km_nmi - 1e-9,
            "toy NMI {toy_nmi} should be >= 0.8 and >= pixel k-means NMI {km_nmi}"
        );
    }

    #[test]
    fn k_of_one_is_rejected() {
        let ds = make_synthetic_image_dataset(5, 2, 1, 4, 4, 4.0, 0).unwrap();
        assert!(train_toy_clusterer(&ds, 1, &quick_config(0)).is_err());
    }

    #[test]
    fn frozen_model_is_deterministic_across_queries() {
        let ds = make_synthetic_image_dataset(8, 2, 1, 6, 6, 4.0, 1).unwrap();
        let model = train_toy_clusterer(&ds, 2, &quick_config(1)).unwrap();
        let a = model.query(&ds.full_batch()).unwrap();
        let b = model.query(&ds.full_batch()).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn label_only_wrapper_equals_argmax_of_query() {
        use crate::clustering::LabelOnlyModel;
        use std::sync::Arc;
        let ds = make_synthetic_image_dataset(8, 2, 1, 6, 6, 4.0, 2).unwrap();
        let model = Arc::new(train_toy_clusterer(&ds, 2, &quick_config(2)).unwrap());
        let wrapper = LabelOnlyModel::new(model.clone() as Arc<dyn ClusterModel>);
        let batch = ds.full_batch();
        let via_query = hard_labels(&model.query(&batch).unwrap());
        let via_wrapper = wrapper.labels(&batch).unwrap();
        assert_eq!(via_query, via_wrapper);
    }

    #[test]
    fn snapshot_round_trip_preserves_memberships() {
        let ds = make_synthetic_image_dataset(8, 2, 1, 6, 6, 4.0, 3).unwrap();
        let model = train_toy_clusterer(&ds, 2, &quick_config(3)).unwrap();
        let restored = ToyDeepClusterer::from_snapshot(&model.snapshot()).unwrap();
        let a = model.query(&ds.full_batch()).unwrap();
        let b = restored.query(&ds.full_batch()).unwrap();
        assert_eq!(a.probs(), b.probs());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ds = make_synthetic_image_dataset(8, 2, 1, 6, 6, 4.0, 4).unwrap();
        let other = make_synthetic_image_dataset(4, 2, 1, 4, 4, 4.0, 4).unwrap();
        let model = train_toy_clusterer(&ds, 2, &quick_config(4)).unwrap();
        assert!(model.query(&other.full_batch()).is_err());
    }
}
