//! Colluding adversary simulation on top of an honest population.
//!
//! A random subset of annotators is replaced by adversaries. On a random
//! subset of items every adversary gives the same wrong label (collusion).
//! Elsewhere Type A adversaries answer the true label and Type B adversaries
//! answer from their own random confusion matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationMatrix, ConfusionMatrix, Label, LabelVector};
use crate::error::{Error, Result};
use crate::rng_from_seed;

/// Diagonal entries of random honest confusion matrices exceed `1/K` by at least this.
pub const HONEST_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackType {
    /// True label on clean items.
    #[serde(rename = "A", alias = "a", alias = "type_a")]
    TypeA,
    /// Own Dawid–Skene confusion matrix on clean items.
    #[serde(rename = "B", alias = "b", alias = "type_b")]
    TypeB,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub p_adv: f64,
    pub p_corr: f64,
    pub p_obs_adv: f64,
    pub attack_type: AttackType,
    pub seed: u64,
}

impl AttackConfig {
    pub fn none() -> Self {
        Self {
            p_adv: 0.0,
            p_corr: 0.0,
            p_obs_adv: 0.0,
            attack_type: AttackType::TypeA,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_adv", self.p_adv),
            ("p_corr", self.p_corr),
            ("p_obs_adv", self.p_obs_adv),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} not in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AttackGroundTruth {
    pub adversary_indices: BTreeSet<usize>,
    pub corrupted_items: BTreeSet<usize>,
    /// Shared wrong label of each corrupted item.
    pub wrong_label_per_item: BTreeMap<usize, Label>,
    /// Type B adversaries' clean-item confusion matrices.
    pub adversary_confusions: BTreeMap<usize, ConfusionMatrix>,
}

impl AttackGroundTruth {
    pub fn is_adversary(&self, m: usize) -> bool {
        self.adversary_indices.contains(&m)
    }

    /// JSON with one-based annotator, item and label indices.
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        #[derive(Serialize)]
        struct OneBased {
            adversary_indices: Vec<usize>,
            corrupted_items: Vec<usize>,
            wrong_label_per_item: BTreeMap<usize, usize>,
            adversary_confusions: BTreeMap<usize, Vec<Vec<f64>>>,
        }
        let out = OneBased {
            adversary_indices: self.adversary_indices.iter().map(|m| m + 1).collect(),
            corrupted_items: self.corrupted_items.iter().map(|n| n + 1).collect(),
            wrong_label_per_item: self
                .wrong_label_per_item
                .iter()
                .map(|(n, l)| (n + 1, l + 1))
                .collect(),
            adversary_confusions: self
                .adversary_confusions
                .iter()
                .map(|(m, h)| (m + 1, h.clone().into()))
                .collect(),
        };
        serde_json::to_writer_pretty(w, &out)?;
        Ok(())
    }
}

/// Random column-stochastic matrix whose every diagonal entry exceeds
/// `1/K + HONEST_MARGIN`; off-diagonal mass is split by a flat Dirichlet draw.
pub fn random_honest_confusion<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<ConfusionMatrix> {
    if k < 2 {
        return Err(Error::Validation("need at least two classes".into()));
    }
    let lo = 1.0 / k as f64 + HONEST_MARGIN;
    let mut h = DMatrix::zeros(k, k);
    for c in 0..k {
        let diag = rng.gen_range(lo..1.0);
        let w: Vec<f64> = (0..k - 1).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
        let total: f64 = w.iter().sum();
        let mut off = w.iter();
        for r in 0..k {
            h[(r, c)] = if r == c {
                diag
            } else {
                (1.0 - diag) * off.next().expect("k-1 weights") / total
            };
        }
        // absorb rounding so the column sums to one exactly enough
        let s: f64 = h.column(c).sum();
        h[(c, c)] += 1.0 - s;
    }
    ConfusionMatrix::new(h)
}

/// Replaces `floor(M * p_adv)` random annotators with colluding adversaries.
///
/// Corrupted items are drawn among items with known truth. Adversaries never
/// respond to items whose truth is unknown.
pub fn apply_attack(
    a: &AnnotationMatrix,
    truth: &LabelVector,
    cfg: &AttackConfig,
) -> Result<(AnnotationMatrix, AttackGroundTruth)> {
    cfg.validate()?;
    let (m, n, k) = (a.num_annotators(), a.num_items(), a.num_classes());
    if k < 2 {
        return Err(Error::Validation("attack needs at least two classes".into()));
    }
    if truth.len() != n {
        return Err(Error::Dimension(format!("{} truth labels for {n} items", truth.len())));
    }
    let num_adv = (m as f64 * cfg.p_adv).floor() as usize;
    if num_adv == 0 {
        return Ok((a.clone(), AttackGroundTruth::default()));
    }
    let mut rng = rng_from_seed(cfg.seed);

    let adversary_indices: BTreeSet<usize> = sample(&mut rng, m, num_adv).into_iter().collect();
    let known: Vec<usize> = (0..n).filter(|&i| truth.get(i).is_some()).collect();
    let num_corr = (known.len() as f64 * cfg.p_corr).floor() as usize;
    let corrupted_items: BTreeSet<usize> = sample(&mut rng, known.len(), num_corr)
        .into_iter()
        .map(|i| known[i])
        .collect();
    let wrong_label_per_item: BTreeMap<usize, Label> = corrupted_items
        .iter()
        .map(|&item| {
            let y = truth.get(item).expect("corrupted items have known truth");
            let mut wrong = rng.gen_range(0..k - 1);
            if wrong >= y {
                wrong += 1;
            }
            (item, wrong)
        })
        .collect();
    let adversary_confusions: BTreeMap<usize, ConfusionMatrix> = match cfg.attack_type {
        AttackType::TypeA => BTreeMap::new(),
        AttackType::TypeB => adversary_indices
            .iter()
            .map(|&adv| random_honest_confusion(k, &mut rng).map(|h| (adv, h)))
            .collect::<Result<_>>()?,
    };

    let mut responses = Vec::new();
    for &adv in &adversary_indices {
        for item in 0..n {
            let Some(y) = truth.get(item) else { continue };
            if rng.gen::<f64>() >= cfg.p_obs_adv {
                continue;
            }
            let label = match wrong_label_per_item.get(&item) {
                Some(&w) => w,
                None => match cfg.attack_type {
                    AttackType::TypeA => y,
                    AttackType::TypeB => adversary_confusions[&adv].sample(y, &mut rng),
                },
            };
            responses.push((adv, item, label));
        }
    }
    let attacked = a.replace_annotators(&adversary_indices, responses)?;
    Ok((
        attacked,
        AttackGroundTruth {
            adversary_indices,
            corrupted_items,
            wrong_label_per_item,
            adversary_confusions,
        },
    ))
}
