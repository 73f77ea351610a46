//! Transferability matrices across victim models and surrogate attacks
//! against label-only album-clustering targets.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{generate_adversarial, train_attack, AttackConfig, TrainedGenerator};
use crate::clustering::{hard_labels, ClusterModel, VictimModel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{report, MetricsReport};

/// One post-attack cell: the metrics of target model `t` on adversarial
/// images produced by source model `s`'s generator. `None` marks a skipped
/// cell (shape-incompatible source/target pair).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub model_ids: Vec<String>,
    /// row = source, column = target
    pub post_attack: Vec<Vec<Option<MetricsReport>>>,
    /// generator-independent clean baseline per target; None marks a target
    /// incompatible with the eval set
    pub pre_attack: Vec<Option<MetricsReport>>,
}

impl TransferMatrix {
    /// One CSV per metric, square with header row/column; skipped cells
    /// render as "skip".
    pub fn to_csv(&self, metric: &str) -> Result<String> {
        let pick = |r: &MetricsReport| -> Result<f64> {
            match metric {
                "nmi" => Ok(r.nmi),
                "ari" => Ok(r.ari),
                "acc" => Ok(r.acc),
                _ => Err(Error::invalid("metric", "must be one of nmi|ari|acc")),
            }
        };
        let mut out = String::from("source");
        for id in &self.model_ids {
            out.push_str(&format!(",{id}"));
        }
        out.push('\n');
        out.push_str("pre_attack");
        for r in &self.pre_attack {
            match r {
                Some(r) => out.push_str(&format!(",{:.6}", pick(r)?)),
                None => out.push_str(",skip"),
            }
        }
        out.push('\n');
        for (i, id) in self.model_ids.iter().enumerate() {
            out.push_str(id);
            for cell in &self.post_attack[i] {
                match cell {
                    Some(r) => out.push_str(&format!(",{:.6}", pick(r)?)),
                    None => out.push_str(",skip"),
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Cross-evaluates every source generator against every target model on a
/// shared held-out set. Shape-incompatible pairs are skipped with an explicit
/// marker rather than failing the whole matrix.
pub fn transfer_matrix(
    victims: &[(&str, &dyn ClusterModel)],
    generators: &[&TrainedGenerator],
    eval_set: &Dataset,
) -> Result<TransferMatrix> {
    if victims.len() != generators.len() {
        return Err(Error::invalid(
            "generators",
            "need exactly one trained generator per source victim",
        ));
    }
    let clean = eval_set.full_batch();
    let mut pre_attack = Vec::with_capacity(victims.len());
    for (_, model) in victims {
        match model.query(&clean) {
            Ok(m) => pre_attack.push(Some(report(&hard_labels(&m).labels, eval_set.labels())?)),
            Err(Error::ShapeMismatch { .. }) => pre_attack.push(None),
            Err(e) => return Err(e),
        }
    }
    let mut post_attack = Vec::with_capacity(victims.len());
    for g in generators {
        let mut row = Vec::with_capacity(victims.len());
        let adv = if g.input_shape() == eval_set.image_dims() {
            Some(generate_adversarial(g, &clean)?.0)
        } else {
            None
        };
        for (_, target) in victims {
            let cell = match &adv {
                Some(adv) => match target.query(adv) {
                    Ok(m) => Some(report(&hard_labels(&m).labels, eval_set.labels())?),
                    Err(Error::ShapeMismatch { .. }) => None,
                    Err(e) => return Err(e),
                },
                None => None,
            };
            row.push(cell);
        }
        post_attack.push(row);
    }
    Ok(TransferMatrix {
        model_ids: victims.iter().map(|(id, _)| id.to_string()).collect(),
        post_attack,
        pre_attack,
    })
}

#[derive(Debug, Clone)]
pub struct SurrogateAttackConfig {
    pub attack: AttackConfig,
    pub images_per_identity: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for SurrogateAttackConfig {
    fn default() -> SurrogateAttackConfig {
        SurrogateAttackConfig {
            attack: AttackConfig::default(),
            images_per_identity: 10,
            runs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateRun {
    pub pre: MetricsReport,
    pub post: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateOutcome {
    pub runs: Vec<SurrogateRun>,
    pub mean_pre_nmi: f64,
    pub mean_post_nmi: f64,
    pub surrogate_queries: u64,
}

/// Uploads one album per resampling, then the submission's labels are scored
/// against ground truth. The generator is trained once against the surrogate;
/// the label-only target is never queried during training.
pub fn surrogate_attack(
    target: &dyn crate::mlaas::AlbumClusteringClient,
    surrogate: &dyn VictimModel,
    dataset: &Dataset,
    config: &SurrogateAttackConfig,
) -> Result<SurrogateOutcome> {
    if config.images_per_identity == 0 {
        return Err(Error::invalid("images_per_identity", "must be >= 1"));
    }
    if config.runs == 0 {
        return Err(Error::invalid("runs", "must be >= 1"));
    }
    let outcome = train_attack(surrogate, dataset, &config.attack)?;
    let generator = outcome.generator;

    let mut runs = Vec::with_capacity(config.runs);
    for r in 0..config.runs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (r as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D),
        );
        // resample m images per identity, without replacement
        let mut picked = Vec::new();
        for class in 0..dataset.k_true() {
            let mut members: Vec<usize> = (0..dataset.n())
                .filter(|&i| dataset.labels()[i] == class)
                .collect();
            if members.len() < config.images_per_identity {
                return Err(Error::InsufficientData {
                    needed: config.images_per_identity,
                    got: members.len(),
                });
            }
            members.shuffle(&mut rng);
            picked.extend_from_slice(&members[..config.images_per_identity]);
        }
        let sample = dataset.subset(&picked)?;
        let clean = sample.full_batch();
        let (adv, _) = generate_adversarial(&generator, &clean)?;

        let mut labelings = Vec::with_capacity(2);
        for batch in [&clean, &adv] {
            let token = target.create_album()?;
            for i in 0..batch.len() {
                target.add_image(&token, &batch.pixels.index_axis(Axis(0), i).to_owned())?;
            }
            target.group_face(&token)?;
            let detail = target.get_album_detail(&token)?;
            // upload order matches sample order, so labels align positionally
            labelings.push(detail.into_iter().map(|(_, g)| g).collect::<Vec<usize>>());
        }
        runs.push(SurrogateRun {
            pre: report(&labelings[0], sample.labels())?,
            post: report(&labelings[1], sample.labels())?,
        });
    }
    let mean_pre_nmi = runs.iter().map(|r| r.pre.nmi).sum::<f64>() / runs.len() as f64;
    let mean_post_nmi = runs.iter().map(|r| r.post.nmi).sum::<f64>() / runs.len() as f64;
    Ok(SurrogateOutcome {
        runs,
        mean_pre_nmi,
        mean_post_nmi,
        surrogate_queries: outcome.ledger.batch_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans_baseline;
    use crate::data::make_synthetic_image_dataset;

    #[test]
    fn single_model_matrix_equals_self_attack() {
        let ds = make_synthetic_image_dataset(10, 2, 1, 5, 5, 5.0, 0).unwrap();
        let victim = kmeans_baseline(&ds, 2, 0).unwrap();
        let config = AttackConfig { max_batches: 10, ..Default::default() };
        let outcome = train_attack(&victim, &ds, &config).unwrap();
        let m = transfer_matrix(&[("km", &victim)], &[&outcome.generator], &ds).unwrap();
        assert_eq!(m.model_ids, vec!["km"]);
        let eval = crate::attack::evaluate_attack(&victim, &outcome.generator, &ds).unwrap();
        let cell = m.post_attack[0][0].as_ref().unwrap();
        assert_eq!(cell.nmi, eval.post.nmi);
        assert_eq!(m.pre_attack[0].as_ref().unwrap().nmi, eval.pre.nmi);
    }

    #[test]
    fn shape_incompatible_pairs_are_skipped_not_fatal() {
        let small = make_synthetic_image_dataset(8, 2, 1, 4, 4, 5.0, 1).unwrap();
        let big = make_synthetic_image_dataset(8, 2, 1, 6, 6, 5.0, 1).unwrap();
        let v_small = kmeans_baseline(&small, 2, 0).unwrap();
        let v_big = kmeans_baseline(&big, 2, 0).unwrap();
        let config = AttackConfig { max_batches: 3, ..Default::default() };
        let g_small = train_attack(&v_small, &small, &config).unwrap().generator;
        let g_big = train_attack(&v_big, &big, &config).unwrap().generator;
        let m = transfer_matrix(
            &[("small", &v_small), ("big", &v_big)],
            &[&g_small, &g_big],
            &small,
        )
        .unwrap();
        assert!(m.post_attack[0][0].is_some());
        assert!(m.post_attack[0][1].is_none()); // small adv vs big model
        assert!(m.post_attack[1][0].is_none()); // big generator on small eval set
        let csv = m.to_csv("nmi").unwrap();
        assert!(csv.contains("skip"));
        assert!(csv.lines().next().unwrap().starts_with("source,small,big"));
    }

    #[test]
    fn pre_attack_row_is_generator_independent() {
        let ds = make_synthetic_image_dataset(10, 2, 1, 5, 5, 5.0, 2).unwrap();
        let victim = kmeans_baseline(&ds, 2, 0).unwrap();
        let g1 = train_attack(&victim, &ds, &AttackConfig { max_batches: 2, seed: 1, ..Default::default() })
            .unwrap()
            .generator;
        let g2 = train_attack(&victim, &ds, &AttackConfig { max_batches: 8, seed: 9, ..Default::default() })
            .unwrap()
            .generator;
        let m1 = transfer_matrix(&[("km", &victim)], &[&g1], &ds).unwrap();
        let m2 = transfer_matrix(&[("km", &victim)], &[&g2], &ds).unwrap();
        assert_eq!(
            m1.pre_attack[0].as_ref().unwrap().nmi,
            m2.pre_attack[0].as_ref().unwrap().nmi
        );
    }

    #[test]
    fn mismatched_generator_count_is_rejected() {
        let ds = make_synthetic_image_dataset(6, 2, 1, 4, 4, 5.0, 3).unwrap();
        let victim = kmeans_baseline(&ds, 2, 0).unwrap();
        assert!(transfer_matrix(&[("km", &victim)], &[], &ds).is_err());
    }
}
