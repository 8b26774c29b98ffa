use crowdguard::adversary::{random_honest_confusion, AttackType};
use crowdguard::agreement::{empirical_agreement, oracle_agreement, oracle_agreement_matrix};
use crowdguard::aggregation::{map_label, DsModel};
use crowdguard::annotations::{
    read_annotations, simulate_honest_responses, AnnotationFormat, AnnotationMatrix, ConfusionMatrix, Priors,
};
use crowdguard::cluster::{fit_score, AnnotatorPartition};
use crowdguard::harness::{
    agreement_for, detection_metrics, run_experiment, sweep, ExperimentConfig, Method, Summary, SweepAxis,
};
use crowdguard::adversary::AttackGroundTruth;
use crowdguard::rng_from_seed;
use crowdguard::rpca::{rpca_decompose, RpcaConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn stochastic(k: usize, raw: &[f64]) -> ConfusionMatrix {
    let mut h = DMatrix::from_column_slice(k, k, &raw[..k * k]);
    for mut col in h.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    for c in 0..k {
        let s: f64 = h.column(c).sum();
        h[(c, c)] += 1.0 - s;
    }
    ConfusionMatrix::new(h).unwrap()
}

fn priors(k: usize, raw: &[f64]) -> Priors {
    let s: f64 = raw[..k].iter().sum();
    Priors::new(raw[..k].iter().map(|x| x / s).collect()).unwrap()
}

proptest! {
    #[test]
    fn agreement_is_probability_of_matching(
        k in 2usize..=5,
        a in prop::collection::vec(0.01f64..1.0, 25),
        b in prop::collection::vec(0.01f64..1.0, 25),
        p in prop::collection::vec(0.05f64..1.0, 5),
    ) {
        let (h, h2, pi) = (stochastic(k, &a), stochastic(k, &b), priors(k, &p));
        // sum over truth c and shared response r of P(c) P(r | c) P'(r | c)
        let direct: f64 = (0..k)
            .map(|c| pi.as_slice()[c] * (0..k).map(|r| h.prob(r, c) * h2.prob(r, c)).sum::<f64>())
            .sum();
        let sigma = oracle_agreement(&h, &h2, &pi).unwrap();
        prop_assert!((sigma - direct).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&sigma));
    }

    #[test]
    fn triplets_round_trip(
        seed in 0u64..1000,
        m in 1usize..8,
        n in 1usize..40,
        k in 2usize..5,
    ) {
        let mut rng = rng_from_seed(seed);
        let mut t = Vec::new();
        for i in 0..m {
            for j in 0..n {
                if rng.gen::<f64>() < 0.5 {
                    t.push((i, j, rng.gen_range(0..k)));
                }
            }
        }
        t.push((m - 1, n - 1, k - 1));
        t.sort();
        t.dedup_by_key(|x| (x.0, x.1));
        let a = AnnotationMatrix::from_triplets(m, n, k, t).unwrap();
        let mut buf = Vec::new();
        a.write_triplets(&mut buf).unwrap();
        let b = read_annotations(&buf[..], AnnotationFormat::TripletCsv, Some(k)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn map_label_ignores_common_prior_scale(
        seed in 0u64..500,
        scale in 0.1f64..0.99,
    ) {
        // scaling every confusion entry of one response row by the same
        // factor shifts all class scores equally
        let mut rng = rng_from_seed(seed);
        let k = 3;
        let hs: Vec<_> = (0..4).map(|_| random_honest_confusion(k, &mut rng).unwrap()).collect();
        let model = DsModel { confusions: hs.clone(), priors: Priors::uniform(k), log_likelihood_trace: vec![] };
        let responses: Vec<_> = (0..4).map(|m| (m, rng.gen_range(0..k))).collect();
        let base = map_label(&responses, &model).unwrap();
        let mut scores: Vec<f64> = (0..k)
            .map(|c| responses.iter().map(|&(m, l)| hs[m].prob(l, c).ln()).sum::<f64>())
            .collect();
        for s in &mut scores {
            *s += scale.ln();
        }
        let best = (0..k).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
        prop_assert_eq!(base, best);
    }
}

#[test]
fn agreement_is_permutation_equivariant() {
    let mut rng = rng_from_seed(11);
    let hs: Vec<_> = (0..8).map(|_| random_honest_confusion(3, &mut rng).unwrap()).collect();
    let (a, _) = simulate_honest_responses(&hs, &Priors::uniform(3), 400, 0.5, &mut rng).unwrap();
    let perm = [3, 0, 7, 5, 1, 6, 2, 4];
    let b = a.select_annotators(&perm);
    let (ea, eb) = (empirical_agreement(&a, 5).unwrap(), empirical_agreement(&b, 5).unwrap());
    for i in 0..8 {
        for j in 0..8 {
            assert_eq!(eb.sigma_hat[(i, j)], ea.sigma_hat[(perm[i], perm[j])]);
            assert_eq!(eb.omega[(i, j)], ea.omega[(perm[i], perm[j])]);
        }
    }
}

#[test]
fn empirical_agreement_approaches_oracle() {
    let mut rng = rng_from_seed(12);
    let pi = Priors::new(vec![0.5, 0.3, 0.2]).unwrap();
    let hs: Vec<_> = (0..6).map(|_| random_honest_confusion(3, &mut rng).unwrap()).collect();
    let (a, _) = simulate_honest_responses(&hs, &pi, 50_000, 1.0, &mut rng).unwrap();
    let est = empirical_agreement(&a, 5).unwrap();
    let oracle = oracle_agreement_matrix(&hs, &pi);
    for i in 0..6 {
        for j in (0..6).filter(|&j| j != i) {
            assert!((est.sigma_hat[(i, j)] - oracle[(i, j)]).abs() < 0.01);
        }
    }
}

#[test]
fn honest_population_fits_low_rank_model() {
    let mut rng = rng_from_seed(13);
    let k = 2;
    let hs: Vec<_> = (0..30).map(|_| random_honest_confusion(k, &mut rng).unwrap()).collect();
    let (a, _) = simulate_honest_responses(&hs, &Priors::uniform(k), 100_000, 0.5, &mut rng).unwrap();
    let sigma = agreement_for(&a, 5, true).unwrap();
    let rpca = rpca_decompose(&sigma, &RpcaConfig::default()).unwrap();
    let all: Vec<usize> = (0..30).collect();
    let eps = fit_score(&sigma, &rpca.c_hat, &all, k);
    assert!(eps <= 0.01, "eps = {eps}");
}

fn brute_force(adv: &[bool], declared_adv: &[bool]) -> (f64, f64, f64) {
    let (mut tp, mut tn, mut n_adv, mut n_hon) = (0, 0, 0, 0);
    for (&t, &d) in adv.iter().zip(declared_adv) {
        if t {
            n_adv += 1;
            tp += d as usize;
        } else {
            n_hon += 1;
            tn += !d as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    (ratio(tp, n_adv), ratio(tn, n_hon), (tp + tn) as f64 / adv.len() as f64)
}

#[test]
fn detection_metrics_match_confusion_counts() {
    let mut rng = rng_from_seed(14);
    for _ in 0..200 {
        let adv: Vec<bool> = (0..20).map(|_| rng.gen::<f64>() < 0.3).collect();
        let declared: Vec<bool> = (0..20).map(|_| rng.gen::<f64>() < 0.3).collect();
        let truth = AttackGroundTruth {
            adversary_indices: (0..20).filter(|&i| adv[i]).collect(),
            ..Default::default()
        };
        let mut p = AnnotatorPartition::all_honest(20);
        p.honest = (0..20).filter(|&i| !declared[i]).collect();
        p.adversarial = (0..20).filter(|&i| declared[i]).collect();
        p.degenerate = false;
        let got = detection_metrics(&truth, &p);
        let (sens, spec, acc) = brute_force(&adv, &declared);
        assert_eq!((got.sensitivity, got.specificity, got.clustering_accuracy), (sens, spec, acc));
    }
}

#[test]
fn summaries_bracket_their_mean() {
    let mut rng = rng_from_seed(15);
    for len in 1..30 {
        let xs: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = Summary::of(&xs).unwrap();
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert_eq!(s.count, len);
    }
    assert!(Summary::of(&[]).is_none());
}

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.repetitions = 3;
    cfg
}

#[test]
fn single_point_sweep_equals_run() {
    let mut cfg = small(5);
    cfg.attack.p_adv = 0.3;
    let swept = sweep(&cfg, SweepAxis::PCorr, &[0.0]).unwrap();
    cfg.attack.p_corr = 0.0;
    let direct = run_experiment(&cfg).unwrap();
    let point = swept.points[0].report.as_ref().unwrap();
    assert_eq!(point.to_json().unwrap(), direct.to_json().unwrap());
}

#[test]
fn em_does_not_lose_to_majority_without_adversaries() {
    let mut cfg = ExperimentConfig::default();
    cfg.attack.p_adv = 0.0;
    cfg.methods = vec![Method::MajorityVote, Method::DawidSkene];
    if let crowdguard::harness::Dataset::Synthetic { num_annotators, num_items, .. } = &mut cfg.dataset {
        *num_annotators = 30;
        *num_items = 2000;
    }
    let r = run_experiment(&cfg).unwrap();
    let acc = |m| r.method(m).unwrap().accuracy.as_ref().unwrap().mean;
    assert!(acc(Method::DawidSkene) >= acc(Method::MajorityVote) - 0.02);
}

#[test]
fn colluders_on_every_item_are_found() {
    let mut cfg = small(21);
    cfg.attack.p_adv = 0.3;
    cfg.attack.p_corr = 1.0;
    cfg.methods = vec![Method::DetectMajority];
    let r = run_experiment(&cfg).unwrap();
    let m = r.method(Method::DetectMajority).unwrap();
    assert_eq!(m.sensitivity.as_ref().unwrap().mean, 1.0);
    assert_eq!(m.specificity.as_ref().unwrap().mean, 1.0);
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            r[t] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn ds_degrades_with_more_colluders_while_detection_holds() {
    let mut cfg = ExperimentConfig::default();
    cfg.attack.attack_type = AttackType::TypeA;
    cfg.attack.p_corr = 0.5;
    cfg.methods = vec![Method::DawidSkene, Method::DetectMajority];
    let values = [0.1, 0.2, 0.3, 0.4, 0.5];
    let r = sweep(&cfg, SweepAxis::PAdv, &values).unwrap();
    let acc = |m| -> Vec<f64> {
        r.points
            .iter()
            .map(|p| p.report.as_ref().unwrap().method(m).unwrap().accuracy.as_ref().unwrap().mean)
            .collect()
    };
    let (ds, alg) = (acc(Method::DawidSkene), acc(Method::DetectMajority));
    assert!(spearman(&values, &ds) <= 0.0, "DS {ds:?}");
    // at 0.5 there is no honest majority to side with
    assert!(alg[..4].iter().all(|&a| a >= 0.85), "ALG1_H {alg:?}");
}
