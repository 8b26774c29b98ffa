//! Experiment driver: data generation or ingestion, attack injection, the
//! detection pipeline and the MV / DS baselines, metrics and sweeps.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversary::{apply_attack, random_honest_confusion, AttackConfig, AttackGroundTruth, AttackType};
use crate::agreement::{empirical_agreement, AgreementEstimate, DEFAULT_MIN_OVERLAP};
use crate::aggregation::{aggregate_with_partition, ds_em_from_majority, majority_vote, AggregationConfig};
use crate::annotations::{
    drop_constant_annotators, load_annotations, simulate_honest_responses, AnnotationFormat, AnnotationMatrix,
    LabelVector, Priors,
};
use crate::cluster::{cluster_annotators, AnnotatorPartition, ClusterConfig, SideInfo, DEFAULT_RHO_GRID};
use crate::error::{Error, Result};
use crate::rng_from_seed;
use crate::rpca::{rpca_decompose, RpcaConfig, RpcaDecomposition};

pub const GIT_DESCRIBE: &str = env!("CROWDGUARD_GIT_DESCRIBE");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MV")]
    MajorityVote,
    #[serde(rename = "DS")]
    DawidSkene,
    /// Detection with the majority-honest assumption.
    #[serde(rename = "ALG1_H")]
    DetectMajority,
    /// Detection with trusted annotators.
    #[serde(rename = "ALG1_TA")]
    DetectTrusted,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::MajorityVote,
        Method::DawidSkene,
        Method::DetectMajority,
        Method::DetectTrusted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::MajorityVote => "MV",
            Method::DawidSkene => "DS",
            Method::DetectMajority => "ALG1_H",
            Method::DetectTrusted => "ALG1_TA",
        }
    }

    pub fn detects(self) -> bool {
        matches!(self, Method::DetectMajority | Method::DetectTrusted)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dataset {
    /// Honest annotators with random confusion matrices and uniform priors.
    Synthetic {
        num_annotators: usize,
        num_items: usize,
        num_classes: usize,
        p_obs: f64,
    },
    /// Real responses plus ground truth. Constant annotators are dropped.
    File {
        path: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_format")]
        format: AnnotationFormat,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

fn default_format() -> AnnotationFormat {
    AnnotationFormat::TripletCsv
}

/// Attack parameters without a seed; the harness seeds each repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSpec {
    pub p_adv: f64,
    pub p_corr: f64,
    pub p_obs_adv: f64,
    pub attack_type: AttackType,
}

impl AttackSpec {
    pub fn with_seed(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            p_adv: self.p_adv,
            p_corr: self.p_corr,
            p_obs_adv: self.p_obs_adv,
            attack_type: self.attack_type,
            seed,
        }
    }
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self {
            p_adv: 0.0,
            p_corr: 0.0,
            p_obs_adv: 0.2,
            attack_type: AttackType::TypeA,
        }
    }
}

/// `"auto"` picks one random honest annotator per repetition; otherwise a
/// list of one-based annotator indices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TrustedSpec {
    #[default]
    Auto,
    Indices(Vec<usize>),
}

impl Serialize for TrustedSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TrustedSpec::Auto => s.serialize_str("auto"),
            TrustedSpec::Indices(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for TrustedSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Word(String),
            List(Vec<usize>),
        }
        match Raw::deserialize(d)? {
            Raw::Word(w) if w == "auto" => Ok(TrustedSpec::Auto),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("expected \"auto\" or a list, got {w:?}"))),
            Raw::List(v) => Ok(TrustedSpec::Indices(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub attack: AttackSpec,
    pub methods: Vec<Method>,
    pub trusted: TrustedSpec,
    pub repetitions: usize,
    pub rho_grid: Vec<f64>,
    pub seed: u64,
    /// Score abstentions as errors.
    pub abstain_as_wrong: bool,
    pub min_overlap: usize,
    /// Treat the diagonal of the agreement matrix as observed.
    pub diagonal_observed: bool,
    pub rpca: RpcaConfig,
    pub cluster: ClusterConfig,
    pub aggregation: AggregationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Synthetic {
                num_annotators: 60,
                num_items: 5000,
                num_classes: 3,
                p_obs: 0.2,
            },
            attack: AttackSpec::default(),
            methods: Method::ALL.to_vec(),
            trusted: TrustedSpec::Auto,
            repetitions: 10,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
            seed: 0,
            abstain_as_wrong: true,
            min_overlap: DEFAULT_MIN_OVERLAP,
            diagonal_observed: true,
            rpca: RpcaConfig::default(),
            cluster: ClusterConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.rho_grid.is_empty() || self.rho_grid.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("rho grid must be non-empty and positive".into()));
        }
        if self.min_overlap == 0 {
            return Err(Error::Config("min_overlap must be at least 1".into()));
        }
        if let TrustedSpec::Indices(v) = &self.trusted {
            if self.methods.contains(&Method::DetectTrusted) && v.is_empty() {
                return Err(Error::Config("ALG1_TA needs trusted annotators".into()));
            }
            if v.contains(&0) {
                return Err(Error::Config("trusted annotator indices are one-based".into()));
            }
        }
        if let Dataset::Synthetic {
            num_annotators,
            num_items,
            num_classes,
            p_obs,
        } = &self.dataset
        {
            if *num_annotators == 0 || *num_items == 0 || *num_classes < 2 {
                return Err(Error::Config("synthetic dataset needs M, N >= 1 and K >= 2".into()));
            }
            if !(*p_obs > 0.0 && *p_obs <= 1.0) {
                return Err(Error::Config(format!("p_obs = {p_obs} not in (0, 1]")));
            }
        }
        self.attack.with_seed(0).validate()?;
        self.rpca.validate()
    }

    fn cluster_config(&self, seed: u64) -> ClusterConfig {
        ClusterConfig {
            rho_grid: self.rho_grid.clone(),
            seed,
            ..self.cluster.clone()
        }
    }
}

/// Sensitivity, specificity and clustering accuracy of a detected partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub clustering_accuracy: f64,
}

/// Compares detected adversaries with the true ones. Empty true groups count as
/// perfectly recovered.
pub fn detection_metrics(truth: &AttackGroundTruth, partition: &AnnotatorPartition) -> DetectionMetrics {
    let m = partition.num_annotators();
    let flagged: BTreeSet<usize> = partition.adversarial.iter().copied().collect();
    let (mut tp, mut tn) = (0usize, 0usize);
    for i in 0..m {
        match (truth.is_adversary(i), flagged.contains(&i)) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    let num_adv = truth.adversary_indices.iter().filter(|&&i| i < m).count();
    let num_honest = m - num_adv;
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    DetectionMetrics {
        sensitivity: ratio(tp, num_adv),
        specificity: ratio(tn, num_honest),
        clustering_accuracy: ratio(tp + tn, m),
    }
}

/// Intermediate products of one detection run.
#[derive(Debug, Clone, Serialize)]
pub struct Detection {
    pub agreement: AgreementEstimate,
    pub rpca: RpcaDecomposition,
    pub partition: AnnotatorPartition,
}

/// Masked agreement estimate fed to RPCA.
pub fn agreement_for(a: &AnnotationMatrix, min_overlap: usize, diagonal_observed: bool) -> Result<AgreementEstimate> {
    let est = empirical_agreement(a, min_overlap)?;
    Ok(if diagonal_observed { est } else { est.without_diagonal() })
}

/// Agreement estimation, RPCA and clustering.
pub fn detect(a: &AnnotationMatrix, side: &SideInfo, cfg: &ExperimentConfig) -> Result<Detection> {
    let agreement = agreement_for(a, cfg.min_overlap, cfg.diagonal_observed)?;
    let rpca = rpca_decompose(&agreement, &cfg.rpca)?;
    let cluster = cfg.cluster_config(cfg.seed);
    let partition = cluster_annotators(&agreement, &rpca.c_hat, a.num_classes(), side, &cluster)?;
    Ok(Detection {
        agreement,
        rpca,
        partition,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            // keep the mean inside [min, max] despite rounding
            mean: mean.clamp(
                values.iter().copied().fold(f64::INFINITY, f64::min),
                values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ),
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len(),
        })
    }
}

/// One method on one repetition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Outcome {
    pub repetition: usize,
    pub accuracy: Option<f64>,
    pub detection: Option<DetectionMetrics>,
    pub degenerate: Option<bool>,
    pub abstained: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub accuracy: Option<Summary>,
    pub sensitivity: Option<Summary>,
    pub specificity: Option<Summary>,
    pub clustering_accuracy: Option<Summary>,
    pub failures: usize,
    pub degenerate: usize,
    pub repetitions: Vec<Outcome>,
}

impl MethodReport {
    fn from_outcomes(method: Method, outcomes: Vec<Outcome>) -> Self {
        let ok: Vec<&Outcome> = outcomes.iter().filter(|o| o.error.is_none()).collect();
        let acc: Vec<f64> = ok.iter().filter_map(|o| o.accuracy).collect();
        let det: Vec<DetectionMetrics> = ok.iter().filter_map(|o| o.detection).collect();
        let pick = |f: fn(&DetectionMetrics) -> f64| Summary::of(&det.iter().map(f).collect::<Vec<_>>());
        Self {
            method,
            accuracy: Summary::of(&acc),
            sensitivity: pick(|d| d.sensitivity),
            specificity: pick(|d| d.specificity),
            clustering_accuracy: pick(|d| d.clustering_accuracy),
            failures: outcomes.len() - ok.len(),
            degenerate: ok.iter().filter(|o| o.degenerate == Some(true)).count(),
            repetitions: outcomes,
        }
    }

    /// Summary of a metric by name: accuracy, sensitivity, specificity or clustering_accuracy.
    pub fn metric(&self, name: &str) -> Option<&Summary> {
        match name {
            "accuracy" => self.accuracy.as_ref(),
            "sensitivity" => self.sensitivity.as_ref(),
            "specificity" => self.specificity.as_ref(),
            "clustering_accuracy" => self.clustering_accuracy.as_ref(),
            _ => None,
        }
    }
}

pub const METRICS: [&str; 4] = ["accuracy", "sensitivity", "specificity", "clustering_accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportHeader {
    pub tool: &'static str,
    pub version: &'static str,
    pub git_describe: &'static str,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl ReportHeader {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            seed: cfg.seed,
            config: cfg.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    /// Annotators in the data source, before and after dropping constant ones.
    pub annotators_before: usize,
    pub annotators_after: usize,
    pub methods: Vec<MethodReport>,
}

impl MetricsReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long format `method,metric,mean,std,failures`; metrics that do not
    /// apply to a method have empty fields.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "method,metric,mean,std,failures")?;
        for r in &self.methods {
            for metric in METRICS {
                let (mean, std) = fmt_summary(r.metric(metric));
                writeln!(w, "{},{metric},{mean},{std},{}", r.method.name(), r.failures)?;
            }
        }
        Ok(())
    }
}

fn fmt_summary(s: Option<&Summary>) -> (String, String) {
    s.map_or((String::new(), String::new()), |s| (s.mean.to_string(), s.std.to_string()))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of a named stream within one repetition.
fn stream_seed(base: u64, repetition: usize, stream: u64) -> u64 {
    splitmix(splitmix(base ^ splitmix(repetition as u64)) ^ stream)
}

const STREAM_DATA: u64 = 1;
const STREAM_ATTACK: u64 = 2;
const STREAM_TRUSTED: u64 = 3;
const STREAM_CLUSTER: u64 = 4;

/// Ground-truth-labelled data shared by every repetition of a file dataset.
struct Source {
    fixed: Option<(AnnotationMatrix, LabelVector)>,
    before: usize,
    after: usize,
}

fn load_source(cfg: &ExperimentConfig) -> Result<Source> {
    match &cfg.dataset {
        Dataset::Synthetic { num_annotators, .. } => Ok(Source {
            fixed: None,
            before: *num_annotators,
            after: *num_annotators,
        }),
        Dataset::File {
            path,
            labels,
            format,
            num_classes,
        } => {
            let raw = load_annotations(path, *format, *num_classes)?;
            let truth = LabelVector::load(labels, raw.num_items())?;
            if truth.0.iter().all(Option::is_none) {
                return Err(Error::Config("ground truth file has no labels".into()));
            }
            let (a, _) = drop_constant_annotators(&raw);
            if a.num_annotators() < 2 {
                return Err(Error::Config("fewer than two non-constant annotators".into()));
            }
            Ok(Source {
                before: raw.num_annotators(),
                after: a.num_annotators(),
                fixed: Some((a, truth)),
            })
        }
    }
}

fn repetition_data(cfg: &ExperimentConfig, src: &Source, rep: usize) -> Result<(AnnotationMatrix, LabelVector)> {
    if let Some(fixed) = &src.fixed {
        return Ok(fixed.clone());
    }
    let Dataset::Synthetic {
        num_annotators,
        num_items,
        num_classes,
        p_obs,
    } = &cfg.dataset
    else {
        unreachable!("file datasets are loaded up front")
    };
    let mut rng = rng_from_seed(stream_seed(cfg.seed, rep, STREAM_DATA));
    let hs = (0..*num_annotators)
        .map(|_| random_honest_confusion(*num_classes, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    simulate_honest_responses(&hs, &Priors::uniform(*num_classes), *num_items, *p_obs, &mut rng)
}

/// Trusted annotators for repetition `rep`. `auto` draws one true honest annotator.
pub fn trusted_set(cfg: &ExperimentConfig, gt: &AttackGroundTruth, m: usize, rep: usize) -> Result<BTreeSet<usize>> {
    match &cfg.trusted {
        TrustedSpec::Indices(v) => {
            let set: BTreeSet<usize> = v.iter().map(|i| i - 1).collect();
            if let Some(bad) = set.iter().find(|&&i| i >= m) {
                return Err(Error::Config(format!("trusted annotator {} out of range", bad + 1)));
            }
            Ok(set)
        }
        TrustedSpec::Auto => {
            let honest: Vec<usize> = (0..m).filter(|i| !gt.is_adversary(*i)).collect();
            let mut rng = rng_from_seed(stream_seed(cfg.seed, rep, STREAM_TRUSTED));
            honest
                .choose(&mut rng)
                .map(|&i| BTreeSet::from([i]))
                .ok_or_else(|| Error::Validation("no honest annotator to trust".into()))
        }
    }
}

/// Attacked data, truth and attack record of one repetition, exactly as
/// `run_experiment` sees them.
pub fn generate(cfg: &ExperimentConfig, rep: usize) -> Result<(AnnotationMatrix, LabelVector, AttackGroundTruth)> {
    cfg.validate()?;
    let src = load_source(cfg)?;
    prepare(cfg, &src, rep)
}

fn prepare(cfg: &ExperimentConfig, src: &Source, rep: usize) -> Result<(AnnotationMatrix, LabelVector, AttackGroundTruth)> {
    let (a, y) = repetition_data(cfg, src, rep)?;
    let attack = cfg.attack.with_seed(stream_seed(cfg.seed, rep, STREAM_ATTACK));
    let (a, gt) = apply_attack(&a, &y, &attack)?;
    Ok((a, y, gt))
}

fn run_repetition(cfg: &ExperimentConfig, src: &Source, rep: usize) -> Vec<Outcome> {
    let failed = |e: Error| Outcome {
        repetition: rep,
        accuracy: None,
        detection: None,
        degenerate: None,
        abstained: None,
        error: Some(e.to_string()),
    };
    let (a, y, gt) = match prepare(cfg, src, rep) {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            return cfg
                .methods
                .iter()
                .map(|_| failed(Error::Validation(msg.clone())))
                .collect();
        }
    };
    let cluster = cfg.cluster_config(stream_seed(cfg.seed, rep, STREAM_CLUSTER));
    // agreement and RPCA do not depend on the side information
    let shared = std::cell::OnceCell::new();
    let moments = || {
        shared
            .get_or_init(|| {
                let sigma = agreement_for(&a, cfg.min_overlap, cfg.diagonal_observed)?;
                let low_rank = rpca_decompose(&sigma, &cfg.rpca)?;
                Ok::<_, Error>((sigma, low_rank))
            })
            .as_ref()
            .map_err(|e| Error::Validation(e.to_string()))
    };

    let score = |labels: &LabelVector| {
        (
            labels.accuracy(&y, cfg.abstain_as_wrong),
            labels.num_abstained(),
        )
    };
    cfg.methods
        .iter()
        .map(|&method| {
            let res: Result<Outcome> = (|| {
                let mut out = Outcome {
                    repetition: rep,
                    accuracy: None,
                    detection: None,
                    degenerate: None,
                    abstained: None,
                    error: None,
                };
                let labels = match method {
                    Method::MajorityVote => majority_vote(&a),
                    Method::DawidSkene => ds_em_from_majority(&a, &cfg.aggregation.em)?.labels,
                    Method::DetectMajority | Method::DetectTrusted => {
                        let side = if method == Method::DetectMajority {
                            SideInfo::MajorityHonest
                        } else {
                            SideInfo::TrustedAnnotators(trusted_set(cfg, &gt, a.num_annotators(), rep)?)
                        };
                        let (sigma, low_rank) = moments()?;
                        let partition = cluster_annotators(sigma, &low_rank.c_hat, a.num_classes(), &side, &cluster)?;
                        out.detection = Some(detection_metrics(&gt, &partition));
                        out.degenerate = Some(partition.degenerate);
                        aggregate_with_partition(&a, &partition, &cfg.aggregation)?.labels
                    }
                };
                let (acc, abstained) = score(&labels);
                out.accuracy = Some(acc);
                out.abstained = Some(abstained);
                Ok(out)
            })();
            res.unwrap_or_else(failed)
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn map_repetitions<F: Fn(usize) -> Vec<Outcome> + Sync + Send>(n: usize, f: F) -> Vec<Vec<Outcome>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_repetitions<F: Fn(usize) -> Vec<Outcome>>(n: usize, f: F) -> Vec<Vec<Outcome>> {
    (0..n).map(f).collect()
}

/// Runs every configured method on every repetition. Failures inside a
/// repetition are recorded per method; only configuration and data-loading
/// problems are returned as errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let src = load_source(cfg)?;
    let per_rep = map_repetitions(cfg.repetitions, |rep| run_repetition(cfg, &src, rep));
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let outcomes = per_rep.iter().map(|row| row[j].clone()).collect();
            MethodReport::from_outcomes(method, outcomes)
        })
        .collect();
    Ok(MetricsReport {
        header: ReportHeader::new(cfg),
        annotators_before: src.before,
        annotators_after: src.after,
        methods,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    PAdv,
    PCorr,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PAdv => "p_adv",
            SweepAxis::PCorr => "p_corr",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_adv" => Ok(SweepAxis::PAdv),
            "p_corr" => Ok(SweepAxis::PCorr),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub report: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Long format `axis_value,method,metric,mean,std`, one row per
    /// value, method and metric. Missing metrics leave mean and std empty.
    pub fn write_csv<W: Write>(&self, mut w: W, methods: &[Method]) -> Result<()> {
        writeln!(w, "axis_value,method,metric,mean,std")?;
        for p in &self.points {
            for &m in methods {
                let r = p.report.as_ref().ok().and_then(|r| r.method(m));
                for metric in METRICS {
                    let (mean, std) = fmt_summary(r.and_then(|r| r.metric(metric)));
                    writeln!(w, "{},{},{metric},{mean},{std}", p.value, m.name())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Runs the experiment once per value, with the base seed offset by the
/// value's position. Points are reported in ascending axis order; a failing
/// point is recorded and the sweep continues.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("sweep value {v} not in [0, 1]")));
    }
    let mut points: Vec<SweepPoint> = values
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut point = cfg.clone();
            point.seed = cfg.seed.wrapping_add(i as u64);
            match axis {
                SweepAxis::PAdv => point.attack.p_adv = value,
                SweepAxis::PCorr => point.attack.p_corr = value,
            }
            SweepPoint {
                value,
                report: run_experiment(&point).map_err(|e| e.to_string()),
            }
        })
        .collect();
    points.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(SweepReport { axis, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            dataset: Dataset::Synthetic {
                num_annotators: 12,
                num_items: 300,
                num_classes: 2,
                p_obs: 0.6,
            },
            repetitions: 2,
            methods: vec![Method::MajorityVote, Method::DawidSkene],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn perfect_and_blind_partitions() {
        let gt = AttackGroundTruth {
            adversary_indices: BTreeSet::from([3, 4]),
            ..Default::default()
        };
        let mut p = AnnotatorPartition::all_honest(5);
        let d = detection_metrics(&gt, &p);
        assert_eq!((d.sensitivity, d.specificity), (0.0, 1.0));
        p.honest = vec![0, 1, 2];
        p.adversarial = vec![3, 4];
        let d = detection_metrics(&gt, &p);
        assert_eq!((d.sensitivity, d.specificity, d.clustering_accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Summary::of(&[0.5]).unwrap().std, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = small();
        c.repetitions = 0;
        assert!(run_experiment(&c).is_err());
        let mut c = small();
        c.methods = vec![Method::DetectTrusted];
        c.trusted = TrustedSpec::Indices(vec![]);
        assert!(c.validate().is_err());
        let mut c = small();
        c.attack.p_adv = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn reports_are_deterministic() {
        let c = small();
        let a = run_experiment(&c).unwrap().to_json().unwrap();
        let b = run_experiment(&c).unwrap().to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn failed_repetitions_are_counted() {
        let mut c = small();
        c.methods = vec![Method::DetectTrusted];
        c.trusted = TrustedSpec::Indices(vec![99]);
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.methods[0].failures, 2);
        assert!(r.methods[0].accuracy.is_none());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("PGD".parse::<Method>().is_err());
    }
}
