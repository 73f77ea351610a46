//! GAN-based blackbox attack: perturbation generator, discriminator, the
//! three losses, saddle-point training with query accounting, and
//! adversarial-set generation.
//!
//! The generator G maps an image to a same-shape perturbation delta bounded
//! per pixel by a scaled tanh. The discriminator D scores clean vs perturbed
//! images. D ascends the vanilla minimax GAN loss L; G descends
//! L - alpha_a * L_attack - alpha_c * L_constraint. Victim queries happen only
//! in training (one clean query per batch, cacheable, plus one perturbed
//! query); generating adversarial images from a trained G issues none.

use std::path::Path;

use ndarray::{Array2, Array4, Ix2, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{hard_labels, SoftMembership, VictimModel};
use crate::data::{batches, Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::metrics::{report, MetricsReport};
use crate::nn::{Adam, Grads, LayerSpec, Net, NetSnapshot};

pub const GENERATOR_SCHEMA_VERSION: u32 = 1;

/// Attack hyperparameters; `epsilon` is the per-sample Euclidean budget on
/// the flattened perturbation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub alpha_a: f64,
    pub alpha_c: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_batches: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// convergence window (batches) for the moving average of the G objective
    pub window: usize,
    /// relative-change tolerance for convergence
    pub tau: f64,
    pub seed: u64,
    /// target cluster for the targeted variant; None = untargeted
    pub target: Option<usize>,
    /// cache clean-batch memberships per sample instead of re-querying
    pub cache_clean: bool,
}

impl Default for AttackConfig {
    fn default() -> AttackConfig {
        AttackConfig {
            alpha_a: 10.0,
            alpha_c: 10.0,
            epsilon: 1.0,
            batch_size: 32,
            max_batches: 400,
            lr_g: 2e-4,
            lr_d: 2e-4,
            window: 20,
            tau: 1e-3,
            seed: 0,
            target: None,
            cache_clean: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if !(self.alpha_a > 0.0) {
            return Err(Error::invalid("alpha_a", "must be > 0"));
        }
        if !(self.alpha_c > 0.0) {
            return Err(Error::invalid("alpha_c", "must be > 0"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.max_batches == 0 {
            return Err(Error::invalid("max_batches", "must be >= 1"));
        }
        if self.window == 0 {
            return Err(Error::invalid("window", "must be >= 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau", "must be > 0"));
        }
        if let Some(t) = self.target {
            if t >= k {
                return Err(Error::invalid("target", format!("cluster {t} out of range [0, {k})")));
            }
        }
        Ok(())
    }
}

/// Count of batch queries issued to the victim during attack training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct QueryLedger {
    pub batch_queries: u64,
    pub batch_size: usize,
    pub cache_hits: u64,
}

/// Per-sample perturbation norm statistics for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaStats {
    pub mean: f64,
    pub max: f64,
    pub histogram: Vec<u64>,
    pub histogram_edges: Vec<f64>,
}

impl DeltaStats {
    pub fn from_norms(norms: &[f64]) -> DeltaStats {
        let mean = norms.iter().sum::<f64>() / norms.len().max(1) as f64;
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let bins = 10;
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let mut histogram = vec![0u64; bins];
        for &v in norms {
            let b = ((v / width) as usize).min(bins - 1);
            histogram[b] += 1;
        }
        let histogram_edges = (0..=bins).map(|i| i as f64 * width).collect();
        DeltaStats { mean, max, histogram, histogram_edges }
    }
}

/// Mean over the batch of per-row Euclidean distances between pre- and
/// post-attack membership rows.
pub fn attack_loss(m_pre: &SoftMembership, m_post: &SoftMembership) -> Result<f64> {
    if m_pre.probs().raw_dim() != m_post.probs().raw_dim() {
        return Err(Error::shape(
            format!("{:?}", m_pre.probs().shape()),
            format!("{:?}", m_post.probs().shape()),
        ));
    }
    let mut total = 0.0;
    for (a, b) in m_pre.probs().rows().into_iter().zip(m_post.probs().rows()) {
        let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        total += d2.sqrt();
    }
    Ok(total / m_pre.len() as f64)
}

/// Mean over the batch of min(epsilon - ||delta_i||_2, 0); always <= 0 and 0
/// exactly when every sample is inside the budget.
pub fn constraint_loss(perturbations: &Array4<f64>, epsilon: f64) -> f64 {
    let b = perturbations.shape()[0];
    let mut total = 0.0;
    for i in 0..b {
        let norm = row_norm(perturbations, i);
        total += (epsilon - norm).min(0.0);
    }
    total / b as f64
}

fn row_norm(t: &Array4<f64>, i: usize) -> f64 {
    t.index_axis(ndarray::Axis(0), i)
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

const SCORE_CLAMP: f64 = 1e-7;

/// Vanilla minimax GAN loss: batch mean of log d_real + log(1 - d_fake).
/// Scores are clamped away from {0, 1} before the logs.
pub fn gan_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let b = d_real.len().max(1) as f64;
    let mut total = 0.0;
    for (&r, &f) in d_real.iter().zip(d_fake.iter()) {
        let r = r.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        let f = f.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP);
        total += r.ln() + (1.0 - f).ln();
    }
    total / b
}

/// Per-row Euclidean distance from a membership row to the target one-hot.
pub fn targeted_objective(m_target: &[f64], m_post_row: &[f64]) -> Result<f64> {
    let ones = m_target.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || m_target.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("m_target", "must be a one-hot vector"));
    }
    if m_target.len() != m_post_row.len() {
        return Err(Error::shape(
            format!("len {}", m_target.len()),
            format!("len {}", m_post_row.len()),
        ));
    }
    Ok(m_target
        .iter()
        .zip(m_post_row.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

fn generator_specs(c: usize, scale: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_c: c, out_c: 8, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv2d { in_c: 8, out_c: 8, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv2d { in_c: 8, out_c: c, kernel: 3, stride: 1, pad: 1 },
        LayerSpec::ScaledTanh { scale },
    ]
}

fn discriminator_specs(c: usize, h: usize, w: usize) -> Vec<LayerSpec> {
    let (h1, w1) = (conv_out(h, 3, 2, 1), conv_out(w, 3, 2, 1));
    let (h2, w2) = (conv_out(h1, 3, 2, 1), conv_out(w1, 3, 2, 1));
    vec![
        LayerSpec::Conv2d { in_c: c, out_c: 4, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Conv2d { in_c: 4, out_c: 8, kernel: 3, stride: 2, pad: 1 },
        LayerSpec::LeakyRelu { alpha: 0.2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inp: 8 * h2 * w2, out: 1 },
    ]
}

/// Per-pixel tanh bound; keeps optimization stable while the epsilon budget
/// itself is enforced softly through the constraint loss.
pub fn pixel_scale(epsilon: f64, c: usize, h: usize, w: usize) -> f64 {
    3.0 * epsilon / ((c * h * w) as f64).sqrt()
}

/// Frozen perturbation generator plus the config it was trained with.
pub struct TrainedGenerator {
    net: Net,
    config: AttackConfig,
    input_shape: (usize, usize, usize),
    scale: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GeneratorSnapshot {
    pub schema_version: u32,
    pub net: NetSnapshot,
    pub config: AttackConfig,
    pub input_shape: (usize, usize, usize),
    pub scale: f64,
}

impl TrainedGenerator {
    pub fn config(&self) -> &AttackConfig {
        &self.config
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    /// Raw perturbations for a batch (no clipping applied).
    pub fn perturbations(&self, batch: &ImageBatch) -> Result<Array4<f64>> {
        if batch.image_dims() != self.input_shape {
            return Err(Error::shape(
                format!("{:?}", self.input_shape),
                format!("{:?}", batch.image_dims()),
            ));
        }
        Ok(self
            .net
            .infer(&batch.pixels_dyn())
            .into_dimensionality::<Ix4>()
            .unwrap())
    }

    pub fn snapshot(&self) -> GeneratorSnapshot {
        GeneratorSnapshot {
            schema_version: GENERATOR_SCHEMA_VERSION,
            net: self.net.snapshot(),
            config: self.config.clone(),
            input_shape: self.input_shape,
            scale: self.scale,
        }
    }

    pub fn from_snapshot(snap: &GeneratorSnapshot) -> Result<TrainedGenerator> {
        if snap.schema_version != GENERATOR_SCHEMA_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "unsupported generator schema version {}",
                snap.schema_version
            )));
        }
        Ok(TrainedGenerator {
            net: Net::from_snapshot(&snap.net)?,
            config: snap.config.clone(),
            input_shape: snap.input_shape,
            scale: snap.scale,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.snapshot())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainedGenerator> {
        let f = std::fs::File::open(path)?;
        let snap: GeneratorSnapshot = serde_json::from_reader(std::io::BufReader::new(f))?;
        TrainedGenerator::from_snapshot(&snap)
    }
}

/// Adversarial counterpart of a batch: clip(X + G(X), 0, 1). Issues zero
/// victim queries. Returns the batch plus the pre-clip per-sample delta norms.
pub fn generate_adversarial(g: &TrainedGenerator, batch: &ImageBatch) -> Result<(ImageBatch, Vec<f64>)> {
    let delta = g.perturbations(batch)?;
    let norms: Vec<f64> = (0..batch.len()).map(|i| row_norm(&delta, i)).collect();
    let mut pixels = batch.pixels.clone();
    pixels.zip_mut_with(&delta, |p, &d| *p = (*p + d).clamp(0.0, 1.0));
    Ok((ImageBatch::new(pixels, batch.ids.clone())?, norms))
}

/// Result of one attack training run.
pub struct TrainOutcome {
    pub generator: TrainedGenerator,
    pub ledger: QueryLedger,
    pub converged: bool,
    pub batches_run: usize,
}

struct GStep {
    objective: f64,
    grads: Grads,
}

/// Combined G objective on one batch:
///   gan_term - alpha_a * attack_term - alpha_c * constraint_term
/// where in targeted mode the attack term is the negated distance to the
/// target one-hot (so descending the objective pulls memberships toward it).
/// Issues exactly one victim query (the perturbed batch).
fn g_objective(
    g_net: &Net,
    d_net: &Net,
    victim: &dyn VictimModel,
    batch: &ImageBatch,
    m_pre: &Array2<f64>,
    config: &AttackConfig,
    with_grads: bool,
) -> Result<GStep> {
    let b = batch.len();
    let bf = b as f64;
    let x = batch.pixels_dyn();
    let (delta_d, g_cache) = g_net.forward(&x);
    let delta = delta_d.view().into_dimensionality::<Ix4>().unwrap();

    // clip(X + delta) with a pass-through mask inside the bounds
    let mut adv = batch.pixels.clone();
    let mut mask = Array4::<f64>::zeros(adv.raw_dim());
    ndarray::Zip::from(&mut adv)
        .and(&mut mask)
        .and(&delta)
        .for_each(|a, m, &d| {
            let raw = *a + d;
            *m = if (0.0..=1.0).contains(&raw) { 1.0 } else { 0.0 };
            *a = raw.clamp(0.0, 1.0);
        });
    let adv_batch = ImageBatch::new(adv.clone(), batch.ids.clone())?;

    // discriminator term on the perturbed images
    let (logits_fake, d_cache) = d_net.forward(&adv.clone().into_dyn());
    let logits_fake = logits_fake.into_dimensionality::<Ix2>().unwrap();
    let sig: Vec<f64> = logits_fake.iter().map(|&l| 1.0 / (1.0 + (-l).exp())).collect();
    let gan_term: f64 = sig
        .iter()
        .map(|&s| (1.0 - s).clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP).ln())
        .sum::<f64>()
        / bf;

    // victim memberships for the perturbed batch (one query)
    let (m_post, trace) = victim.query_traced(&adv_batch)?;
    let q = m_post.probs();
    let attack_term = if let Some(t) = config.target {
        // negated so the saddle-point sign convention stays the same
        let mut total = 0.0;
        for i in 0..b {
            let d2: f64 = (0..q.ncols())
                .map(|j| {
                    let tv = if j == t { 1.0 } else { 0.0 };
                    (tv - q[[i, j]]) * (tv - q[[i, j]])
                })
                .sum();
            total += d2.sqrt();
        }
        -(total / bf)
    } else {
        let mut total = 0.0;
        for i in 0..b {
            let d2: f64 = (0..q.ncols())
                .map(|j| (m_pre[[i, j]] - q[[i, j]]) * (m_pre[[i, j]] - q[[i, j]]))
                .sum();
            total += d2.sqrt();
        }
        total / bf
    };

    let constraint_term = constraint_loss(&delta.to_owned(), config.epsilon);
    let objective = gan_term - config.alpha_a * attack_term - config.alpha_c * constraint_term;

    if !with_grads {
        return Ok(GStep { objective, grads: Grads(Vec::new()) });
    }

    // d(gan_term)/d(logit) = -sigma(logit)/b, then through D to its input
    let upstream_d = Array2::from_shape_vec(
        (b, 1),
        sig.iter().map(|&s| -s / bf).collect(),
    )
    .unwrap()
    .into_dyn();
    let (g_from_d, _) = d_net.backward(&d_cache, &upstream_d);
    let g_from_d = g_from_d.into_dimensionality::<Ix4>().unwrap();

    // attack term through the victim
    let mut upstream_m = Array2::<f64>::zeros(q.raw_dim());
    for i in 0..b {
        if let Some(t) = config.target {
            let mut norm2 = 0.0;
            for j in 0..q.ncols() {
                let tv = if j == t { 1.0 } else { 0.0 };
                norm2 += (tv - q[[i, j]]) * (tv - q[[i, j]]);
            }
            let norm = norm2.sqrt();
            if norm > 1e-12 {
                // objective has -alpha_a * attack_term = +alpha_a * mean dist;
                // d dist/dq = -(t - q)/norm
                for j in 0..q.ncols() {
                    let tv = if j == t { 1.0 } else { 0.0 };
                    upstream_m[[i, j]] = -config.alpha_a * (tv - q[[i, j]]) / (norm * bf);
                }
            }
        } else {
            let mut norm2 = 0.0;
            for j in 0..q.ncols() {
                norm2 += (m_pre[[i, j]] - q[[i, j]]) * (m_pre[[i, j]] - q[[i, j]]);
            }
            let norm = norm2.sqrt();
            if norm > 1e-12 {
                // -alpha_a * d dist/dq = +alpha_a * (m_pre - q)/norm
                for j in 0..q.ncols() {
                    upstream_m[[i, j]] = config.alpha_a * (m_pre[[i, j]] - q[[i, j]]) / (norm * bf);
                }
            }
        }
    }
    let g_from_victim = victim.backprop_input(&trace, &upstream_m);

    // total gradient w.r.t. delta: clip mask applies to the image path, the
    // constraint penalty acts on the raw delta
    let mut d_delta = Array4::<f64>::zeros(delta.raw_dim());
    ndarray::Zip::from(&mut d_delta)
        .and(&g_from_d)
        .and(&g_from_victim)
        .and(&mask)
        .for_each(|dd, &gd, &gv, &m| *dd = (gd + gv) * m);
    for i in 0..b {
        let norm = row_norm(&delta.to_owned(), i);
        if norm > config.epsilon && norm > 1e-12 {
            let coef = config.alpha_c / (norm * bf);
            let mut slice = d_delta.index_axis_mut(ndarray::Axis(0), i);
            let dslice = delta.index_axis(ndarray::Axis(0), i);
            ndarray::Zip::from(&mut slice).and(&dslice).for_each(|s, &d| *s += coef * d);
        }
    }

    let (_, g_grads) = g_net.backward(&g_cache, &d_delta.into_dyn());
    Ok(GStep { objective, grads: g_grads })
}

/// Alternating saddle-point training. Per batch: one D ascent step, one G
/// descent step. The ledger counts every victim batch query.
pub fn train_attack(
    victim: &dyn VictimModel,
    dataset: &Dataset,
    config: &AttackConfig,
) -> Result<TrainOutcome> {
    config.validate(victim.k())?;
    let (c, h, w) = dataset.image_dims();
    let scale = pixel_scale(config.epsilon, c, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut g_net = Net::build(generator_specs(c, scale), &mut rng);
    let mut d_net = Net::build(discriminator_specs(c, h, w), &mut rng);
    let mut opt_g = Adam::new(config.lr_g, &g_net);
    let mut opt_d = Adam::new(config.lr_d, &d_net);

    let mut ledger = QueryLedger {
        batch_queries: 0,
        batch_size: config.batch_size,
        cache_hits: 0,
    };
    let k = victim.k();
    let mut clean_cache: Vec<Option<Vec<f64>>> = vec![None; dataset.n()];
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut batches_run = 0usize;

    'outer: for epoch in 0.. {
        let epoch_batches = batches(
            dataset,
            config.batch_size.min(dataset.n()),
            true,
            config.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F),
        )?;
        for batch in epoch_batches {
            let b = batch.len();
            // clean memberships: from cache when possible
            let all_cached = config.cache_clean && batch.ids.iter().all(|&i| clean_cache[i].is_some());
            let m_pre: Array2<f64> = if all_cached {
                ledger.cache_hits += 1;
                let mut m = Array2::zeros((b, k));
                for (row, &i) in batch.ids.iter().enumerate() {
                    for (j, &v) in clean_cache[i].as_ref().unwrap().iter().enumerate() {
                        m[[row, j]] = v;
                    }
                }
                m
            } else {
                let m = victim.query(&batch)?;
                ledger.batch_queries += 1;
                if config.cache_clean {
                    for (row, &i) in batch.ids.iter().enumerate() {
                        clean_cache[i] = Some(m.probs().row(row).to_vec());
                    }
                }
                m.probs().clone()
            };

            // ---- discriminator step (ascend L) ----
            let delta = g_net.infer(&batch.pixels_dyn());
            let mut adv = batch.pixels.clone();
            adv.zip_mut_with(&delta.view().into_dimensionality::<Ix4>().unwrap().to_owned(), |p, &d| {
                *p = (*p + d).clamp(0.0, 1.0)
            });
            let (lr, cache_r) = d_net.forward(&batch.pixels_dyn());
            let (lf, cache_f) = d_net.forward(&adv.into_dyn());
            let bf = b as f64;
            let up_real = lr.mapv(|l| (1.0 / (1.0 + (-l).exp()) - 1.0) / bf);
            let up_fake = lf.mapv(|l| (1.0 / (1.0 + (-l).exp())) / bf);
            let (_, mut grads_r) = d_net.backward(&cache_r, &up_real);
            let (_, grads_f) = d_net.backward(&cache_f, &up_fake);
            for (a, b_) in grads_r.0.iter_mut().zip(grads_f.0.iter()) {
                for (ga, gb) in a.iter_mut().zip(b_.iter()) {
                    ga.zip_mut_with(gb, |x, &y| *x += y);
                }
            }
            opt_d.step(&mut d_net, &grads_r);

            // ---- generator step (descend the combined objective) ----
            let step = g_objective(&g_net, &d_net, victim, &batch, &m_pre, config, true)?;
            ledger.batch_queries += 1;
            opt_g.step(&mut g_net, &step.grads);

            history.push(step.objective);
            batches_run += 1;
            if history.len() >= 2 * config.window {
                let w_ = config.window;
                let now: f64 = history[history.len() - w_..].iter().sum::<f64>() / w_ as f64;
                let prev: f64 =
                    history[history.len() - 2 * w_..history.len() - w_].iter().sum::<f64>() / w_ as f64;
                if (now - prev).abs() / prev.abs().max(1e-9) < config.tau {
                    converged = true;
                    break 'outer;
                }
            }
            if batches_run >= config.max_batches {
                break 'outer;
            }
        }
    }

    Ok(TrainOutcome {
        generator: TrainedGenerator {
            net: g_net,
            config: config.clone(),
            input_shape: (c, h, w),
            scale,
        },
        ledger,
        converged,
        batches_run,
    })
}

/// Pre/post attack evaluation of a generator against a model on an eval set.
pub struct AttackEvaluation {
    pub pre: MetricsReport,
    pub post: MetricsReport,
    pub delta_stats: DeltaStats,
}

pub fn evaluate_attack(
    model: &dyn crate::clustering::ClusterModel,
    generator: &TrainedGenerator,
    eval_set: &Dataset,
) -> Result<AttackEvaluation> {
    let clean = eval_set.full_batch();
    let pre_labels = hard_labels(&model.query(&clean)?);
    let (adv, norms) = generate_adversarial(generator, &clean)?;
    let post_labels = hard_labels(&model.query(&adv)?);
    Ok(AttackEvaluation {
        pre: report(&pre_labels.labels, eval_set.labels())?,
        post: report(&post_labels.labels, eval_set.labels())?,
        delta_stats: DeltaStats::from_norms(&norms),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub mean_delta_norm: f64,
    pub nmi: f64,
    pub ari: f64,
    pub acc: f64,
    pub batch_queries: u64,
    pub converged: bool,
}

/// One full attack per epsilon; post-attack metrics against the eval set as a
/// function of the achieved perturbation norm.
pub fn epsilon_sweep(
    victim: &dyn VictimModel,
    train_set: &Dataset,
    eval_set: &Dataset,
    base_config: &AttackConfig,
    epsilons: &[f64],
) -> Result<Vec<SweepPoint>> {
    if epsilons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("epsilons", "must be strictly ascending"));
    }
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let mut config = base_config.clone();
        config.epsilon = eps;
        let outcome = train_attack(victim, train_set, &config)?;
        let eval = evaluate_attack(victim, &outcome.generator, eval_set)?;
        points.push(SweepPoint {
            epsilon: eps,
            mean_delta_norm: eval.delta_stats.mean,
            nmi: eval.post.nmi,
            ari: eval.post.ari,
            acc: eval.post.acc,
            batch_queries: outcome.ledger.batch_queries,
            converged: outcome.converged,
        });
    }
    Ok(points)
}

/// Central finite-difference gradient of the combined G objective with
/// respect to the generator parameters. Test oracle; O(params) victim queries.
pub fn g_objective_fd_grad(
    g_net: &mut Net,
    d_net: &Net,
    victim: &dyn VictimModel,
    batch: &ImageBatch,
    m_pre: &Array2<f64>,
    config: &AttackConfig,
    step: f64,
) -> Result<Vec<f64>> {
    let mut theta = g_net.param_vector();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + step;
        g_net.set_param_vector(&theta)?;
        let jp = g_objective(g_net, d_net, victim, batch, m_pre, config, false)?.objective;
        theta[i] = orig - step;
        g_net.set_param_vector(&theta)?;
        let jm = g_objective(g_net, d_net, victim, batch, m_pre, config, false)?.objective;
        theta[i] = orig;
        g_net.set_param_vector(&theta)?;
        out.push((jp - jm) / (2.0 * step));
    }
    Ok(out)
}

/// Analytic gradient of the combined G objective (flattened), paired with the
/// objective value. Exposed for the gradient-check tests.
pub fn g_objective_analytic(
    g_net: &Net,
    d_net: &Net,
    victim: &dyn VictimModel,
    batch: &ImageBatch,
    m_pre: &Array2<f64>,
    config: &AttackConfig,
) -> Result<(f64, Vec<f64>)> {
    let step = g_objective(g_net, d_net, victim, batch, m_pre, config, true)?;
    let flat = step
        .grads
        .0
        .iter()
        .flatten()
        .flat_map(|g| g.iter().copied())
        .collect();
    Ok((step.objective, flat))
}

/// Builds a miniature generator/discriminator pair for gradient checking.
pub fn miniature_gan(c: usize, h: usize, w: usize, epsilon: f64, seed: u64) -> (Net, Net) {
    let dim = c * h * w;
    let scale = pixel_scale(epsilon, c, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Net::build(
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inp: dim, out: 6 },
            LayerSpec::LeakyRelu { alpha: 0.2 },
            LayerSpec::Dense { inp: 6, out: dim },
            LayerSpec::ScaledTanh { scale },
            LayerSpec::Reshape { shape: vec![c, h, w] },
        ],
        &mut rng,
    );
    let d = Net::build(
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { inp: dim, out: 5 },
            LayerSpec::LeakyRelu { alpha: 0.2 },
            LayerSpec::Dense { inp: 5, out: 1 },
        ],
        &mut rng,
    );
    (g, d)
}
