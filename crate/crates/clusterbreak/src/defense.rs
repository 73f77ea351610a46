//! Defender-side evaluation: feature-space Mahalanobis anomaly detection with
//! injection trials, PCA overlap analysis, and adversarial retraining of the
//! clusterer.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{generate_adversarial, TrainedGenerator};
use crate::clustering::{
    assign_soft, assign_soft_vjp, lloyd_kmeans, softmax_vjp, ClusterModel, ToyDeepClusterer,
};
use crate::data::{batches, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamTensor, Net};

/// Lower-triangular Cholesky factor; errors if the matrix is not positive
/// definite, which for a shrunk covariance means the shrinkage was too small.
fn cholesky(a: &Array2<f64>, lambda: f64) -> Result<Array2<f64>> {
    let d = a.nrows();
    let mut l = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for t in 0..j {
                s -= l[[i, t]] * l[[j, t]];
            }
            if i == j {
                // relative floor: numerically near-singular counts as singular
                if s <= a[[i, i]].abs() * 1e-12 {
                    return Err(Error::SingularCovariance { lambda });
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Mahalanobis scorer over raw feature vectors: one shrunk Gaussian per
/// k-means component, score = min over components of the Mahalanobis distance.
pub struct FeatureScorer {
    means: Vec<Array1<f64>>,
    chols: Vec<Array2<f64>>,
}

impl FeatureScorer {
    /// `shrinkage` interpolates each component covariance toward a scaled
    /// identity: (1-lambda) * S + lambda * (tr(S)/d) * I.
    pub fn fit(features: &Array2<f64>, components: usize, shrinkage: f64, seed: u64) -> Result<FeatureScorer> {
        if components < 1 {
            return Err(Error::invalid("components", "must be >= 1"));
        }
        if !(shrinkage > 0.0 && shrinkage <= 1.0) {
            return Err(Error::invalid("shrinkage", "must lie in (0, 1]"));
        }
        let n = features.nrows();
        let d = features.ncols();
        let labels: Vec<usize> = if components == 1 {
            vec![0; n]
        } else {
            lloyd_kmeans(features, components, seed, 100)?.1
        };

        let mut means = Vec::with_capacity(components);
        let mut chols = Vec::with_capacity(components);
        for comp in 0..components {
            let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == comp).collect();
            let m = idx.len() as f64;
            let mut mean = Array1::<f64>::zeros(d);
            for &i in &idx {
                mean += &features.row(i);
            }
            mean /= m.max(1.0);
            let mut cov = Array2::<f64>::zeros((d, d));
            for &i in &idx {
                let v = &features.row(i) - &mean;
                for a in 0..d {
                    for b in 0..d {
                        cov[[a, b]] += v[a] * v[b];
                    }
                }
            }
            cov /= m.max(1.0);
            let trace_scale = (0..d).map(|i| cov[[i, i]]).sum::<f64>() / d as f64;
            for a in 0..d {
                for b in 0..d {
                    cov[[a, b]] *= 1.0 - shrinkage;
                }
                cov[[a, a]] += shrinkage * trace_scale.max(1e-12);
            }
            chols.push(cholesky(&cov, shrinkage)?);
            means.push(mean);
        }
        Ok(FeatureScorer { means, chols })
    }

    /// Mahalanobis distance to the nearest component.
    pub fn score_row(&self, x: &Array1<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for (mean, l) in self.means.iter().zip(&self.chols) {
            let v = x - mean;
            // solve L y = v by forward substitution; distance = ||y||
            let d = v.len();
            let mut y = vec![0.0; d];
            for i in 0..d {
                let mut s = v[i];
                for j in 0..i {
                    s -= l[[i, j]] * y[j];
                }
                y[i] = s / l[[i, i]];
            }
            let dist = y.iter().map(|t| t * t).sum::<f64>().sqrt();
            best = best.min(dist);
        }
        best
    }

    pub fn score(&self, features: &Array2<f64>) -> Vec<f64> {
        features.rows().into_iter().map(|r| self.score_row(&r.to_owned())).collect()
    }
}

/// Encoder features + per-component shrunk Gaussians with a calibrated
/// threshold. Scoring is pure after fit.
pub struct AnomalyDetector {
    encoder: Net,
    scorer: FeatureScorer,
    threshold: Option<f64>,
    input_shape: (usize, usize, usize),
}

pub fn fit_detector(
    clean: &Dataset,
    encoder: &Net,
    components: usize,
    shrinkage: f64,
) -> Result<AnomalyDetector> {
    let encoder = encoder.clone();
    let z = encoder
        .infer(&clean.images().clone().into_dyn())
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape("(n, d) embeddings", e.to_string()))?;
    let scorer = FeatureScorer::fit(&z, components, shrinkage, 0)?;
    Ok(AnomalyDetector {
        encoder,
        scorer,
        threshold: None,
        input_shape: clean.image_dims(),
    })
}

impl AnomalyDetector {
    pub fn score_batch(&self, batch: &ImageBatch) -> Result<Vec<f64>> {
        if batch.image_dims() != self.input_shape {
            return Err(Error::shape(
                format!("{:?}", self.input_shape),
                format!("{:?}", batch.image_dims()),
            ));
        }
        let z = self
            .encoder
            .infer(&batch.pixels_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        Ok(self.scorer.score(&z))
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn flags(&self, batch: &ImageBatch) -> Result<Vec<bool>> {
        let t = self
            .threshold
            .ok_or_else(|| Error::invalid("threshold", "detector has not been calibrated"))?;
        Ok(self.score_batch(batch)?.iter().map(|&s| s > t).collect())
    }
}

/// Sets the detector threshold to the (1 - target_fpr) quantile of the
/// clean-holdout scores and returns it.
pub fn calibrate_threshold(
    det: &mut AnomalyDetector,
    clean_holdout: &Dataset,
    target_fpr: f64,
) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::invalid("target_fpr", "must lie in (0, 1)"));
    }
    if clean_holdout.n() < 100 {
        return Err(Error::InsufficientData { needed: 100, got: clean_holdout.n() });
    }
    let mut scores = det.score_batch(&clean_holdout.full_batch())?;
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = scores.len();
    let rank = ((1.0 - target_fpr) * n as f64).ceil() as usize;
    let threshold = scores[rank.clamp(1, n) - 1];
    det.threshold = Some(threshold);
    Ok(threshold)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialReport {
    pub injected: u64,
    pub detected: u64,
    pub benign: u64,
    pub false_positives: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub injected: u64,
    pub detected: u64,
    pub benign: u64,
    pub false_positives: u64,
    pub trials: u64,
    pub detection_rate: f64,
    pub false_positive_rate: f64,
    pub per_trial: Vec<TrialReport>,
}

/// Per trial, each sample is independently replaced by its adversarial
/// counterpart with probability 0.5; the calibrated detector then flags the
/// mixed batch. Sub-seeds derive deterministically from the master seed.
pub fn injection_experiment(
    det: &AnomalyDetector,
    clean_set: &Dataset,
    generator: &TrainedGenerator,
    trials: usize,
    seed: u64,
) -> Result<DetectionReport> {
    if trials < 1 {
        return Err(Error::invalid("trials", "must be >= 1"));
    }
    let clean = clean_set.full_batch();
    let (adv, _) = generate_adversarial(generator, &clean)?;
    let n = clean.len();
    let mut per_trial = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut pixels = clean.pixels.clone();
        let mut is_adv = vec![false; n];
        for i in 0..n {
            if rng.gen_bool(0.5) {
                is_adv[i] = true;
                pixels
                    .index_axis_mut(Axis(0), i)
                    .assign(&adv.pixels.index_axis(Axis(0), i));
            }
        }
        let mixed = ImageBatch::new(pixels, clean.ids.clone())?;
        let flags = det.flags(&mixed)?;
        let mut tr = TrialReport { injected: 0, detected: 0, benign: 0, false_positives: 0 };
        for i in 0..n {
            if is_adv[i] {
                tr.injected += 1;
                if flags[i] {
                    tr.detected += 1;
                }
            } else {
                tr.benign += 1;
                if flags[i] {
                    tr.false_positives += 1;
                }
            }
        }
        per_trial.push(tr);
    }
    let injected: u64 = per_trial.iter().map(|t| t.injected).sum();
    let detected: u64 = per_trial.iter().map(|t| t.detected).sum();
    let benign: u64 = per_trial.iter().map(|t| t.benign).sum();
    let false_positives: u64 = per_trial.iter().map(|t| t.false_positives).sum();
    Ok(DetectionReport {
        injected,
        detected,
        benign,
        false_positives,
        trials: trials as u64,
        detection_rate: if injected > 0 { detected as f64 / injected as f64 } else { 0.0 },
        false_positive_rate: if benign > 0 { false_positives as f64 / benign as f64 } else { 0.0 },
        per_trial,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaPoint {
    pub sample_id: usize,
    pub is_adversarial: bool,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaOverlapReport {
    pub points: Vec<PcaPoint>,
    /// fraction of adversarial points whose nearest neighbor in component
    /// space is a clean point (distance ties prefer clean)
    pub overlap: f64,
}

impl PcaOverlapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,is_adversarial,pc1,pc2,pc3\n");
        for p in &self.points {
            out.push_str(&format!("{},{}", p.sample_id, p.is_adversarial as u8));
            for c in &p.coords {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Top principal directions of the row-space of `x` (already centered) via
/// power iteration with deflation.
fn principal_directions(x: &Array2<f64>, n_components: usize, seed: u64) -> Result<Vec<Array1<f64>>> {
    let d = x.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deflated = x.clone();
    let mut dirs = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let mut v = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0f64..1.0));
        let mut norm = v.dot(&v).sqrt();
        v /= norm;
        for _ in 0..200 {
            let w = deflated.t().dot(&deflated.dot(&v));
            norm = w.dot(&w).sqrt();
            if norm < 1e-12 {
                return Err(Error::invalid("n_components", "zero variance along a requested component"));
            }
            let w = w / norm;
            let delta = (&w - &v).mapv(f64::abs).sum();
            v = w;
            if delta < 1e-12 {
                break;
            }
        }
        // deflate: remove the component from every row
        let scores = deflated.dot(&v);
        for (mut row, &s) in deflated.rows_mut().into_iter().zip(scores.iter()) {
            row.scaled_add(-s, &v);
        }
        dirs.push(v);
    }
    Ok(dirs)
}

/// PCA fit on the union of both sets (flattened pixels); reports per-sample
/// component coordinates plus the nearest-neighbor composition score.
pub fn pca_overlap(
    clean: &ImageBatch,
    adversarial: &ImageBatch,
    n_components: usize,
) -> Result<PcaOverlapReport> {
    if clean.len() != adversarial.len() {
        return Err(Error::shape(
            format!("{} adversarial samples", clean.len()),
            format!("{}", adversarial.len()),
        ));
    }
    if clean.image_dims() != adversarial.image_dims() {
        return Err(Error::shape(
            format!("{:?}", clean.image_dims()),
            format!("{:?}", adversarial.image_dims()),
        ));
    }
    let n = clean.len();
    let (c, h, w) = clean.image_dims();
    let d = c * h * w;
    let flatten = |batch: &ImageBatch| {
        let mut m = Array2::<f64>::zeros((n, d));
        for i in 0..n {
            for (j, &v) in batch.pixels.index_axis(Axis(0), i).iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    };
    pca_overlap_features(&flatten(clean), &flatten(adversarial), n_components)
}

/// Same as [`pca_overlap`] but on arbitrary per-sample feature rows (e.g.
/// encoder embeddings), so the defender can run the analysis in the same
/// feature space as the anomaly detector.
pub fn pca_overlap_features(
    clean: &Array2<f64>,
    adversarial: &Array2<f64>,
    n_components: usize,
) -> Result<PcaOverlapReport> {
    if clean.dim() != adversarial.dim() {
        return Err(Error::shape(
            format!("{:?} feature rows", clean.dim()),
            format!("{:?}", adversarial.dim()),
        ));
    }
    let n = clean.nrows();
    let d = clean.ncols();
    let mut union = Array2::<f64>::zeros((2 * n, d));
    union.slice_mut(ndarray::s![..n, ..]).assign(clean);
    union.slice_mut(ndarray::s![n.., ..]).assign(adversarial);
    let mean = union.mean_axis(Axis(0)).unwrap();
    for mut row in union.rows_mut() {
        row -= &mean;
    }
    let dirs = principal_directions(&union, n_components, 17)?;

    let mut coords = Array2::<f64>::zeros((2 * n, n_components));
    for (ci, v) in dirs.iter().enumerate() {
        let s = union.dot(v);
        for i in 0..2 * n {
            coords[[i, ci]] = s[i];
        }
    }

    let mut points = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        points.push(PcaPoint {
            sample_id: i % n,
            is_adversarial: i >= n,
            coords: coords.row(i).to_vec(),
        });
    }

    // nearest-neighbor composition: ties prefer clean so that identical sets
    // yield full overlap
    let mut hits = 0usize;
    for i in n..2 * n {
        let mut best_d = f64::INFINITY;
        let mut best_clean = false;
        for j in 0..2 * n {
            if j == i {
                continue;
            }
            let d2: f64 = (0..n_components)
                .map(|c_| (coords[[i, c_]] - coords[[j, c_]]).powi(2))
                .sum();
            let j_clean = j < n;
            if d2 < best_d - 1e-15 || ((d2 - best_d).abs() <= 1e-15 && j_clean && !best_clean) {
                best_d = d2;
                best_clean = j_clean;
            }
        }
        if best_clean {
            hits += 1;
        }
    }
    Ok(PcaOverlapReport {
        points,
        overlap: hits as f64 / n as f64,
    })
}

#[derive(Debug, Clone)]
pub struct RetrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub consistency_weight: f64,
    pub seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> RetrainConfig {
        RetrainConfig { lr: 1e-3, batch_size: 32, consistency_weight: 1.0, seed: 0 }
    }
}

/// Fine-tunes the clusterer on mixed clean/adversarial batches: self-training
/// cross-entropy on both views toward the sharpened clean target, plus a
/// consistency penalty on the divergence between the two membership rows.
pub fn adversarial_retrain(
    victim: &ToyDeepClusterer,
    dataset: &Dataset,
    generator: &TrainedGenerator,
    epochs: usize,
    config: &RetrainConfig,
) -> Result<ToyDeepClusterer> {
    let mut model = victim.clone_frozen();
    if epochs == 0 {
        return Ok(model);
    }
    let k = model.k();
    let (adv_full, _) = generate_adversarial(generator, &dataset.full_batch())?;
    let temperature = model.temperature();
    let mut opt_e;
    let mut opt_c;
    {
        let (enc, cents, _) = model.parts_mut();
        opt_e = Adam::new(config.lr, enc);
        opt_c = AdamTensor::new(config.lr, &[cents.nrows(), cents.ncols()]);
    }
    for epoch in 0..epochs {
        let z_all = model.embed(dataset.images());
        let (q_all, _) = assign_soft(&z_all, model.centroids(), temperature);
        let target = sharpen_rows(&q_all);
        for batch in batches(
            dataset,
            config.batch_size.min(dataset.n()),
            true,
            config.seed ^ (epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
        )? {
            let b = batch.len() as f64;
            let (enc, cents, _) = model.parts_mut();
            let (zc, cache_c) = enc.forward(&batch.pixels_dyn());
            let zc = zc.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (qc, _) = assign_soft(&zc, cents, temperature);

            let mut adv_pixels = ndarray::Array4::<f64>::zeros(batch.pixels.raw_dim());
            for (row, &i) in batch.ids.iter().enumerate() {
                adv_pixels
                    .index_axis_mut(Axis(0), row)
                    .assign(&adv_full.pixels.index_axis(Axis(0), i));
            }
            let (za, cache_a) = enc.forward(&adv_pixels.into_dyn());
            let za = za.into_dimensionality::<ndarray::Ix2>().unwrap();
            let (qa, _) = assign_soft(&za, cents, temperature);

            // cross-entropy on both views toward the detached clean target
            let mut dl_c = Array2::<f64>::zeros(qc.raw_dim());
            let mut dl_a = Array2::<f64>::zeros(qa.raw_dim());
            for (row, &i) in batch.ids.iter().enumerate() {
                for j in 0..k {
                    dl_c[[row, j]] = (qc[[row, j]] - target[[i, j]]) / b;
                    dl_a[[row, j]] = (qa[[row, j]] - target[[i, j]]) / b;
                }
            }
            // consistency: mean squared difference between the two views
            let wgt = 2.0 * config.consistency_weight / (b * k as f64);
            let dq_c = (&qc - &qa).mapv(|v| v * wgt);
            let dq_a = dq_c.mapv(|v| -v);
            dl_c += &softmax_vjp(&qc, &dq_c);
            dl_a += &softmax_vjp(&qa, &dq_a);

            let (dzc, dcc) = assign_soft_vjp(&zc, cents, temperature, &dl_c);
            let (dza, dca) = assign_soft_vjp(&za, cents, temperature, &dl_a);
            let (_, mut ge) = enc.backward(&cache_c, &dzc.into_dyn());
            let (_, ga) = enc.backward(&cache_a, &dza.into_dyn());
            for (a, b_) in ge.0.iter_mut().zip(ga.0.iter()) {
                for (x, y) in a.iter_mut().zip(b_.iter()) {
                    x.zip_mut_with(y, |p, &q| *p += q);
                }
            }
            opt_e.step(enc, &ge);
            let mut cd = cents.clone().into_dyn();
            opt_c.step(&mut cd, &(&dcc + &dca).into_dyn());
            cents.assign(&cd.into_dimensionality::<ndarray::Ix2>().unwrap());
        }
    }
    Ok(model)
}

fn sharpen_rows(q: &Array2<f64>) -> Array2<f64> {
    let f = q.sum_axis(Axis(0));
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn gaussian_features(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
    }

    #[test]
    fn score_at_mean_is_zero_and_nonnegative_elsewhere() {
        let x = gaussian_features(200, 3, 0);
        let scorer = FeatureScorer::fit(&x, 1, 0.1, 0).unwrap();
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!(scorer.score_row(&mean) < 1e-9);
        assert!(scorer.score(&x).iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn chi_square_like_spread_on_synthetic_gaussians() {
        let fit = gaussian_features(10_000, 3, 1);
        let scorer = FeatureScorer::fit(&fit, 1, 1e-6, 0).unwrap();
        let mut scores = scorer.score(&fit);
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let threshold = scores[(0.95 * scores.len() as f64).ceil() as usize - 1];
        let fresh = gaussian_features(10_000, 3, 2);
        let below = scorer.score(&fresh).iter().filter(|&&s| s < threshold).count();
        let frac = below as f64 / 10_000.0;
        assert!((0.93..=0.97).contains(&frac), "fraction below threshold = {frac}");
    }

    #[test]
    fn affine_invariance_with_exact_covariance() {
        let x = gaussian_features(2_000, 3, 3);
        // invertible affine map y = x A^T + b
        let a = ndarray::array![[2.0, 0.3, -0.1], [0.0, 1.5, 0.4], [0.2, -0.2, 0.8]];
        let b = ndarray::array![1.0, -2.0, 0.5];
        let mut y = x.dot(&a.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        let s_x = FeatureScorer::fit(&x, 1, 1e-12, 0).unwrap();
        let s_y = FeatureScorer::fit(&y, 1, 1e-12, 0).unwrap();
        let sx = s_x.score(&x);
        let sy = s_y.score(&y);
        for (a_, b_) in sx.iter().zip(sy.iter()) {
            assert!((a_ - b_).abs() < 1e-6, "{a_} vs {b_}");
        }
    }

    #[test]
    fn too_small_shrinkage_on_degenerate_features_errors() {
        // rank-deficient features: third column duplicates the first
        let x = gaussian_features(100, 3, 4);
        let mut degen = x.clone();
        for i in 0..x.nrows() {
            degen[[i, 2]] = degen[[i, 0]];
        }
        // with lambda -> 0 the covariance is singular
        let err = FeatureScorer::fit(&degen, 1, 1e-16, 0);
        assert!(matches!(err, Err(Error::SingularCovariance { .. })));
        // a reasonable lambda fixes it
        assert!(FeatureScorer::fit(&degen, 1, 0.1, 0).is_ok());
    }

    #[test]
    fn quantile_threshold_matches_order_statistic() {
        // deterministic scores 1..=1000 via a detector-free check of the rule
        let mut scores: Vec<f64> = (1..=1000).map(|v| v as f64).collect();
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = ((1.0 - 0.05) * 1000.0_f64).ceil() as usize;
        assert_eq!(scores[rank - 1], 950.0);
        let median_rank = ((1.0 - 0.5) * 1000.0_f64).ceil() as usize;
        assert_eq!(scores[median_rank - 1], 500.0);
    }

    #[test]
    fn pca_identical_sets_fully_overlap_and_centered() {
        let ds = crate::data::make_synthetic_image_dataset(10, 2, 1, 4, 4, 3.0, 5).unwrap();
        let batch = ds.full_batch();
        let rep = pca_overlap(&batch, &batch, 3).unwrap();
        assert!(rep.overlap >= 0.5);
        // identical clean/adversarial coordinates
        let n = batch.len();
        for i in 0..n {
            assert_eq!(rep.points[i].coords, rep.points[n + i].coords);
        }
        // per-component mean of all projected points is ~0
        for c in 0..3 {
            let mean: f64 = rep.points.iter().map(|p| p.coords[c]).sum::<f64>() / (2 * n) as f64;
            assert!(mean.abs() < 1e-8);
        }
        let csv = rep.to_csv();
        assert!(csv.starts_with("sample_id,is_adversarial,pc1,pc2,pc3\n"));
        assert_eq!(csv.lines().count(), 2 * n + 1);
    }

    #[test]
    fn pca_disjoint_sets_have_low_overlap() {
        let clean = crate::data::make_synthetic_image_dataset(15, 2, 1, 4, 4, 3.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noise = ndarray::Array4::from_shape_fn((30, 1, 4, 4), |_| rng.gen_range(0.0..1.0));
        // push the noise images far from the clean manifold in pixel space
        let noise = noise.mapv(|v: f64| (v * 0.2).min(1.0));
        let noisy = ImageBatch::new(noise, (0..30).collect()).unwrap();
        let rep = pca_overlap(&clean.full_batch(), &noisy, 3).unwrap();
        assert!(rep.overlap < 0.3, "overlap {}", rep.overlap);
    }

    #[test]
    fn pca_feature_variant_matches_pixel_flatten_and_checks_shapes() {
        let ds = crate::data::make_synthetic_image_dataset(8, 2, 1, 4, 4, 3.0, 9).unwrap();
        let batch = ds.full_batch();
        let n = batch.len();
        let flat = Array2::from_shape_fn((n, 16), |(i, j)| {
            batch.pixels[[i, 0, j / 4, j % 4]]
        });
        let a = pca_overlap(&batch, &batch, 2).unwrap();
        let b = pca_overlap_features(&flat, &flat, 2).unwrap();
        assert_eq!(a.overlap, b.overlap);
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.coords, pb.coords);
        }
        let short = Array2::zeros((n - 1, 16));
        assert!(pca_overlap_features(&flat, &short, 2).is_err());
    }
}
