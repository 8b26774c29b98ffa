//! Label aggregation: majority vote, Dawid–Skene EM, the MAP rule and the
//! two-stage adversary-aware aggregation.

use std::io::Write;

use nalgebra::{DMatrix, DMatrixView};
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotationMatrix, ConfusionMatrix, Label, LabelVector, Priors};
use crate::cluster::AnnotatorPartition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the objective gains less than this in one iteration.
    pub tol: f64,
    /// Additive pseudo-count on every M-step count.
    pub smoothing: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            smoothing: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DsModel {
    pub confusions: Vec<ConfusionMatrix>,
    pub priors: Priors,
    /// Smoothed log-likelihood after each M-step: the observed-data
    /// log-likelihood plus `smoothing * (sum log h + sum log pi)`, the quantity
    /// smoothed EM ascends.
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregationResult {
    pub labels: LabelVector,
    /// `N x K` class posteriors.
    pub posterior: DMatrix<f64>,
    pub model: DsModel,
    /// Fused adversary labels fed into the second stage, when one ran.
    pub fused_adversary_labels: Option<LabelVector>,
}

impl AggregationResult {
    /// `item,label,max_posterior`, one-based, label 0 = abstain.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "item,label,max_posterior")?;
        for (n, l) in self.labels.as_slice().iter().enumerate() {
            let p = self.posterior.row(n).max();
            writeln!(w, "{},{},{}", n + 1, l.map_or(0, |l| l + 1), p)?;
        }
        Ok(())
    }
}

fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Modal response per item; ties go to the smallest label, unanswered items abstain.
pub fn majority_vote(a: &AnnotationMatrix) -> LabelVector {
    let k = a.num_classes();
    let labels = (0..a.num_items())
        .map(|n| {
            let resp = a.item_responses(n);
            if resp.is_empty() {
                return None;
            }
            let mut counts = vec![0usize; k];
            for &(_, l) in resp {
                counts[l] += 1;
            }
            argmax_first(counts.into_iter().map(|c| c as f64))
        })
        .collect();
    LabelVector(labels)
}

fn class_scores(responses: &[(usize, Label)], model: &DsModel) -> Vec<f64> {
    model
        .priors
        .as_slice()
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            p.ln()
                + responses
                    .iter()
                    .map(|&(m, l)| model.confusions[m].prob(l, c).ln())
                    .sum::<f64>()
        })
        .collect()
}

/// `argmax_c log pi_c + sum_m log h_m[g_m][c]` over the annotators that
/// responded; ties go to the smallest class.
pub fn map_label(responses: &[(usize, Label)], model: &DsModel) -> Result<Label> {
    if responses.is_empty() {
        return Err(Error::Empty("item has no responses".into()));
    }
    if let Some(&(m, _)) = responses.iter().find(|&&(m, _)| m >= model.confusions.len()) {
        return Err(Error::Dimension(format!("no confusion matrix for annotator {}", m + 1)));
    }
    Ok(argmax_first(class_scores(responses, model)).expect("K >= 1"))
}

/// Starting point for EM.
#[derive(Debug, Clone)]
pub enum EmInit {
    Labels(LabelVector),
    Posterior(DMatrix<f64>),
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let mx = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

struct Params {
    // log h[m][(k, c)]
    log_h: Vec<DMatrix<f64>>,
    log_pi: Vec<f64>,
}

fn m_step(a: &AnnotationMatrix, post: DMatrixView<f64>, smoothing: f64) -> Params {
    let (m, k) = (a.num_annotators(), a.num_classes());
    let mut pi = vec![smoothing; k];
    for row in post.row_iter() {
        for (c, p) in row.iter().enumerate() {
            pi[c] += p;
        }
    }
    let pi_total: f64 = pi.iter().sum();
    let log_pi = pi.iter().map(|p| (p / pi_total).ln()).collect();

    let log_h = (0..m)
        .map(|ann| {
            let mut counts = DMatrix::from_element(k, k, smoothing);
            for &(n, l) in a.annotator_responses(ann) {
                for c in 0..k {
                    counts[(l, c)] += post[(n, c)];
                }
            }
            for mut col in counts.column_iter_mut() {
                let s = col.sum();
                col.iter_mut().for_each(|x| *x = (*x / s).ln());
            }
            counts
        })
        .collect();
    Params { log_h, log_pi }
}

/// E-step: posteriors under `params` and the smoothed log-likelihood.
fn e_step(a: &AnnotationMatrix, params: &Params, smoothing: f64) -> (DMatrix<f64>, f64) {
    let (n_items, k) = (a.num_items(), a.num_classes());
    let mut post = DMatrix::zeros(n_items, k);
    let mut ll = 0.0;
    let mut scores = vec![0.0; k];
    for n in 0..n_items {
        for (c, s) in scores.iter_mut().enumerate() {
            *s = params.log_pi[c]
                + a.item_responses(n)
                    .iter()
                    .map(|&(m, l)| params.log_h[m][(l, c)])
                    .sum::<f64>();
        }
        let lse = log_sum_exp(&scores);
        ll += lse;
        for c in 0..k {
            post[(n, c)] = (scores[c] - lse).exp();
        }
    }
    let prior_term: f64 = params.log_pi.iter().sum::<f64>()
        + params.log_h.iter().map(|h| h.sum()).sum::<f64>();
    (post, ll + smoothing * prior_term)
}

fn to_model(params: &Params, trace: Vec<f64>) -> DsModel {
    let confusions = params
        .log_h
        .iter()
        .map(|lh| {
            let mut h = lh.map(f64::exp);
            for mut col in h.column_iter_mut() {
                let s = col.sum();
                col /= s;
            }
            ConfusionMatrix::new(h).expect("normalized columns")
        })
        .collect();
    let mut pi: Vec<f64> = params.log_pi.iter().map(|l| l.exp()).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    DsModel {
        confusions,
        priors: Priors::new(pi).expect("normalized priors"),
        log_likelihood_trace: trace,
    }
}

/// Dawid–Skene EM with additive smoothing.
///
/// Labels are posterior argmaxes (ties to the smallest class); items nobody
/// answered abstain.
pub fn ds_em(a: &AnnotationMatrix, init: &EmInit, cfg: &EmConfig) -> Result<AggregationResult> {
    if a.num_responses() == 0 {
        return Err(Error::Empty("no responses to aggregate".into()));
    }
    if !(cfg.smoothing > 0.0) {
        return Err(Error::Config("EM smoothing must be positive".into()));
    }
    let (n_items, k) = (a.num_items(), a.num_classes());
    let mut post = match init {
        EmInit::Labels(labels) => {
            if labels.len() != n_items {
                return Err(Error::Dimension(format!(
                    "init has {} labels for {n_items} items",
                    labels.len()
                )));
            }
            if labels.as_slice().iter().all(Option::is_none) {
                return Err(Error::Empty("initial labels cover no item".into()));
            }
            DMatrix::from_fn(n_items, k, |n, c| match labels.get(n) {
                Some(l) => f64::from(u8::from(l == c)),
                None => 1.0 / k as f64,
            })
        }
        EmInit::Posterior(p) => {
            if p.shape() != (n_items, k) {
                return Err(Error::Dimension(format!(
                    "init posterior is {:?}, expected ({n_items}, {k})",
                    p.shape()
                )));
            }
            p.clone()
        }
    };

    let mut trace = Vec::new();
    let mut params = m_step(a, post.as_view(), cfg.smoothing);
    let max_iters = cfg.max_iters.max(1);
    for it in 0..max_iters {
        let (new_post, objective) = e_step(a, &params, cfg.smoothing);
        post = new_post;
        let gain = trace.last().map(|prev| objective - prev);
        trace.push(objective);
        if gain.is_some_and(|g| g < cfg.tol) || it + 1 == max_iters {
            break;
        }
        params = m_step(a, post.as_view(), cfg.smoothing);
    }
    let labels = (0..n_items)
        .map(|n| {
            if a.item_responses(n).is_empty() {
                None
            } else {
                argmax_first(post.row(n).iter().copied())
            }
        })
        .collect();
    Ok(AggregationResult {
        labels: LabelVector(labels),
        posterior: post,
        model: to_model(&params, trace),
        fused_adversary_labels: None,
    })
}

/// Dawid–Skene EM initialized with majority vote.
pub fn ds_em_from_majority(a: &AnnotationMatrix, cfg: &EmConfig) -> Result<AggregationResult> {
    ds_em(a, &EmInit::Labels(majority_vote(a)), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    pub em: EmConfig,
    /// Number of identical virtual annotators carrying the fused adversary labels.
    pub adversary_replicas: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            em: EmConfig::default(),
            adversary_replicas: 1,
        }
    }
}

/// Two-stage aggregation: fuse the suspected adversaries into one label
/// source, then aggregate honest annotators together with it. Items answered
/// by fewer than `K` distinct sources abstain. With no suspected adversaries
/// this is plain EM on all annotators.
pub fn aggregate_with_partition(
    a: &AnnotationMatrix,
    partition: &AnnotatorPartition,
    cfg: &AggregationConfig,
) -> Result<AggregationResult> {
    if partition.num_annotators() != a.num_annotators() {
        return Err(Error::Dimension(format!(
            "partition covers {} annotators, data has {}",
            partition.num_annotators(),
            a.num_annotators()
        )));
    }
    if partition.honest.is_empty() {
        return Err(Error::Validation("honest set is empty".into()));
    }
    if partition.adversarial.is_empty() {
        return ds_em_from_majority(a, &cfg.em);
    }

    let adversaries = a.select_annotators(&partition.adversarial);
    let fused = if adversaries.num_responses() > 0 {
        ds_em_from_majority(&adversaries, &cfg.em)?.labels
    } else {
        LabelVector(vec![None; a.num_items()])
    };

    let mut augmented = a.select_annotators(&partition.honest);
    for _ in 0..cfg.adversary_replicas.max(1) {
        augmented = augmented.with_extra_annotator(fused.as_slice())?;
    }
    let mut result = ds_em_from_majority(&augmented, &cfg.em)?;
    let k = a.num_classes();
    let honest_count = partition.honest.len();
    for n in 0..a.num_items() {
        let resp = augmented.item_responses(n);
        let honest_sources = resp.iter().filter(|&&(m, _)| m < honest_count).count();
        let distinct = honest_sources + usize::from(resp.len() > honest_sources);
        if distinct < k {
            result.labels.0[n] = None;
        }
    }
    result.fused_adversary_labels = Some(fused);
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(hs: Vec<ConfusionMatrix>, pi: Priors) -> DsModel {
        DsModel {
            confusions: hs,
            priors: pi,
            log_likelihood_trace: Vec::new(),
        }
    }

    #[test]
    fn majority_vote_mode_and_ties() {
        let a = AnnotationMatrix::from_triplets(
            3,
            3,
            3,
            [(0, 0, 1), (1, 0, 1), (2, 0, 2), (0, 1, 0), (1, 1, 1)],
        )
        .unwrap();
        let mv = majority_vote(&a);
        assert_eq!(mv.as_slice(), &[Some(1), Some(0), None]);
    }

    #[test]
    fn map_label_perfect_annotator() {
        let m = model(vec![ConfusionMatrix::identity(3)], Priors::uniform(3));
        // identity has zeros, so only the true class has finite score
        assert_eq!(map_label(&[(0, 2)], &m).unwrap(), 2);
        assert!(map_label(&[], &m).is_err());
    }

    #[test]
    fn map_label_symmetric_conflict_goes_to_smallest_class() {
        let h = ConfusionMatrix::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        let m = model(vec![h.clone(), h], Priors::uniform(2));
        assert_eq!(map_label(&[(0, 0), (1, 1)], &m).unwrap(), 0);
        assert_eq!(map_label(&[(0, 1), (1, 0)], &m).unwrap(), 0);
    }

    #[test]
    fn map_label_matches_enumeration() {
        let h1 = ConfusionMatrix::from_rows(&[vec![0.9, 0.4], vec![0.1, 0.6]]).unwrap();
        let h2 = ConfusionMatrix::from_rows(&[vec![0.6, 0.2], vec![0.4, 0.8]]).unwrap();
        let pi = Priors::new(vec![0.3, 0.7]).unwrap();
        let m = model(vec![h1.clone(), h2.clone()], pi);
        for g1 in 0..2 {
            for g2 in 0..2 {
                let score = |c: usize| {
                    [0.3f64, 0.7][c].ln() + h1.prob(g1, c).ln() + h2.prob(g2, c).ln()
                };
                let expected = if score(1) > score(0) { 1 } else { 0 };
                assert_eq!(map_label(&[(0, g1), (1, g2)], &m).unwrap(), expected);
            }
        }
    }

    #[test]
    fn em_on_perfect_annotators_recovers_truth() {
        let truth: Vec<Label> = (0..40).map(|n| n % 3).collect();
        let t = (0..4).flat_map(|m| truth.iter().enumerate().map(move |(n, &y)| (m, n, y)));
        let a = AnnotationMatrix::from_triplets(4, 40, 3, t).unwrap();
        let r = ds_em_from_majority(&a, &EmConfig::default()).unwrap();
        let expected: Vec<Option<Label>> = truth.iter().map(|&y| Some(y)).collect();
        assert_eq!(r.labels.as_slice(), expected.as_slice());
        for h in &r.model.confusions {
            for c in 0..3 {
                assert!(h.prob(c, c) > 0.99);
            }
        }
        for w in r.model.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn em_rejects_empty_input() {
        let a = AnnotationMatrix::empty(2, 3, 2);
        assert!(ds_em_from_majority(&a, &EmConfig::default()).is_err());
    }

    #[test]
    fn empty_adversary_set_reduces_to_em() {
        let a = AnnotationMatrix::from_triplets(
            3,
            4,
            2,
            [(0, 0, 0), (1, 0, 0), (2, 0, 1), (0, 1, 1), (1, 1, 1), (2, 3, 0)],
        )
        .unwrap();
        let p = AnnotatorPartition::all_honest(3);
        let r = aggregate_with_partition(&a, &p, &AggregationConfig::default()).unwrap();
        let plain = ds_em_from_majority(&a, &EmConfig::default()).unwrap();
        assert_eq!(r.labels, plain.labels);
        assert_eq!(r.posterior, plain.posterior);
    }

    #[test]
    fn thin_items_abstain() {
        // K = 3: item 0 answered by two honest annotators only
        let a = AnnotationMatrix::from_triplets(
            4,
            2,
            3,
            [(0, 0, 0), (1, 0, 0), (0, 1, 1), (1, 1, 1), (2, 1, 1), (3, 1, 2)],
        )
        .unwrap();
        let mut p = AnnotatorPartition::all_honest(4);
        p.honest = vec![0, 1, 2];
        p.adversarial = vec![3];
        p.degenerate = false;
        let r = aggregate_with_partition(&a, &p, &AggregationConfig::default()).unwrap();
        assert_eq!(r.labels.get(0), None);
        assert_eq!(r.labels.get(1), Some(1));
    }

    #[test]
    fn empty_honest_set_is_an_error() {
        let a = AnnotationMatrix::from_triplets(2, 1, 2, [(0, 0, 0), (1, 0, 1)]).unwrap();
        let mut p = AnnotatorPartition::all_honest(2);
        p.honest = vec![];
        p.adversarial = vec![0, 1];
        assert!(aggregate_with_partition(&a, &p, &AggregationConfig::default()).is_err());
    }
}
