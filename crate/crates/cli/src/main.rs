use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crowdguard::aggregation::aggregate_with_partition;
use crowdguard::annotations::{drop_constant_annotators, load_annotations, AnnotationFormat, AnnotationMatrix};
use crowdguard::cluster::{AnnotatorPartition, SideInfo};
use crowdguard::harness::{
    detect, generate, run_experiment, sweep, Detection, ExperimentConfig, MetricsReport, SweepAxis, METRICS,
};

#[derive(Parser)]
#[command(name = "crowdguard", version, about = "Adversary-robust label aggregation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default experiment configuration as TOML.
    Config,
    /// Run one experiment and report metrics.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the full JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write long-format metrics CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the experiment over a range of p_adv or p_corr values.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = ["p_adv", "p_corr"])]
        axis: String,
        /// Comma-separated values in [0, 1].
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        json: Option<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write one generated (and attacked) dataset to disk.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the agreement matrix, its decomposition and the detected partition.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Annotation file; without it the configured dataset is generated.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long, default_value = "triplet-csv", value_parser = ["triplet-csv", "dense-csv"])]
        format: String,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        repetition: usize,
        /// One-based trusted annotators; majority-honest when omitted.
        #[arg(long, value_delimiter = ',')]
        trusted: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set attack.p_adv=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
}

/// Problems with the configuration or command line (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            // the dataset kind decides which keys are valid, so it is replaced whole
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "dataset" => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_error("empty key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut table = toml::Table::try_from(ExperimentConfig::default())
            .map_err(|e| anyhow!("serializing defaults: {e}"))?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            merge(&mut table, file);
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_error(format!("override {o:?} is not KEY=VALUE")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| config_error(format!("invalid configuration: {e}")))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.repetitions {
            cfg.repetitions = r;
        }
        cfg.validate().map_err(|e| config_error(e.to_string()))?;
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_summary(report: &MetricsReport) {
    println!(
        "{} {} ({}) seed {}",
        report.header.tool, report.header.version, report.header.git_describe, report.header.seed
    );
    if report.annotators_before != report.annotators_after {
        println!(
            "annotators: {} in data, {} after dropping constant ones",
            report.annotators_before, report.annotators_after
        );
    }
    println!("{:<8} {:>20} {:>20} {:>20} {:>20} {:>5} {:>5}", "method", METRICS[0], METRICS[1], METRICS[2], METRICS[3], "fail", "degen");
    for r in &report.methods {
        let cells: Vec<String> = METRICS
            .iter()
            .map(|m| r.metric(m).map_or("-".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std)))
            .collect();
        println!(
            "{:<8} {:>20} {:>20} {:>20} {:>20} {:>5} {:>5}",
            r.method.name(),
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            r.failures,
            r.degenerate
        );
    }
}

#[derive(Serialize)]
struct PartitionFile<'a> {
    honest: Vec<usize>,
    adversarial: Vec<usize>,
    cluster_1: Vec<usize>,
    cluster_2: Vec<usize>,
    degenerate: bool,
    chosen_rho: f64,
    epsilon_1: f64,
    epsilon_2: f64,
    rpca_iterations: usize,
    rpca_status: &'a crowdguard::rpca::RpcaStatus,
    rpca_lambda: f64,
    diagnostics: &'a [crowdguard::cluster::RhoDiagnostic],
}

fn one_based(v: &[usize]) -> Vec<usize> {
    v.iter().map(|i| i + 1).collect()
}

fn write_inspection(a: &AnnotationMatrix, det: &Detection, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    det.agreement.write_csv(create(&out.join("agreement.csv"))?)?;
    det.rpca.write_csv(create(&out.join("rpca.csv"))?)?;
    let p: &AnnotatorPartition = &det.partition;
    let file = PartitionFile {
        honest: one_based(&p.honest),
        adversarial: one_based(&p.adversarial),
        cluster_1: one_based(&p.cluster_1),
        cluster_2: one_based(&p.cluster_2),
        degenerate: p.degenerate,
        chosen_rho: p.chosen_rho,
        epsilon_1: p.epsilon_1,
        epsilon_2: p.epsilon_2,
        rpca_iterations: det.rpca.iterations,
        rpca_status: &det.rpca.status,
        rpca_lambda: det.rpca.lambda,
        diagnostics: &p.diagnostics,
    };
    let mut w = create(&out.join("partition.json"))?;
    serde_json::to_writer_pretty(&mut w, &file)?;
    writeln!(w)?;
    let agg = aggregate_with_partition(a, p, &cfg.aggregation)?;
    agg.write_csv(create(&out.join("labels.csv"))?)?;
    println!(
        "{} annotators, {} flagged adversarial{}; rho = {}; rpca {:?} after {} iterations",
        p.num_annotators(),
        p.adversarial.len(),
        if p.degenerate { " (no split found)" } else { "" },
        p.chosen_rho,
        det.rpca.status,
        det.rpca.iterations
    );
    println!("adversarial: {:?}", one_based(&p.adversarial));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config => {
            let text = toml::to_string_pretty(&ExperimentConfig::default())?;
            print!("{text}");
        }
        Command::Run { cfg, json, csv } => {
            let cfg = cfg.load()?;
            let report = run_experiment(&cfg)?;
            print_summary(&report);
            if let Some(p) = json {
                let mut w = create(&p)?;
                writeln!(w, "{}", report.to_json()?)?;
            }
            if let Some(p) = csv {
                report.write_csv(create(&p)?)?;
            }
        }
        Command::Sweep {
            cfg,
            axis,
            values,
            json,
            csv,
        } => {
            let cfg = cfg.load()?;
            let axis: SweepAxis = axis.parse()?;
            let report = sweep(&cfg, axis, &values).map_err(|e| config_error(e.to_string()))?;
            for p in &report.points {
                if let Err(e) = &p.report {
                    eprintln!("{} = {}: {e}", axis.name(), p.value);
                }
            }
            match csv {
                Some(p) => report.write_csv(create(&p)?, &cfg.methods)?,
                None => report.write_csv(io::stdout().lock(), &cfg.methods)?,
            }
            if let Some(p) = json {
                let mut w = create(&p)?;
                writeln!(w, "{}", report.to_json()?)?;
            }
        }
        Command::Gen { cfg, repetition, out } => {
            let cfg = cfg.load()?;
            let (a, y, gt) = generate(&cfg, repetition)?;
            fs::create_dir_all(&out)?;
            a.write_triplets(create(&out.join("annotations.csv"))?)?;
            y.write_csv(create(&out.join("truth.csv"))?)?;
            let mut w = create(&out.join("attack.json"))?;
            gt.write_json(&mut w)?;
            writeln!(w)?;
            println!(
                "{} annotators ({} adversarial), {} items, {} responses -> {}",
                a.num_annotators(),
                gt.adversary_indices.len(),
                a.num_items(),
                a.num_responses(),
                out.display()
            );
        }
        Command::Inspect {
            cfg,
            annotations,
            format,
            classes,
            repetition,
            trusted,
            out,
        } => {
            let cfg = cfg.load()?;
            let a = match annotations {
                Some(path) => {
                    let format = match format.as_str() {
                        "dense-csv" => AnnotationFormat::DenseCsv,
                        _ => AnnotationFormat::TripletCsv,
                    };
                    let raw = load_annotations(&path, format, classes)?;
                    let (a, removed) = drop_constant_annotators(&raw);
                    if !removed.is_empty() {
                        println!(
                            "dropped {} constant annotators: {:?}; indices below refer to the remaining {}",
                            removed.len(),
                            one_based(&removed),
                            a.num_annotators()
                        );
                    }
                    a
                }
                None => generate(&cfg, repetition)?.0,
            };
            let side = if trusted.is_empty() {
                SideInfo::MajorityHonest
            } else {
                if trusted.contains(&0) {
                    bail!(config_error("trusted annotator indices are one-based"));
                }
                SideInfo::TrustedAnnotators(trusted.iter().map(|i| i - 1).collect::<BTreeSet<_>>())
            };
            let det = detect(&a, &side, &cfg)?;
            write_inspection(&a, &det, &cfg, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<ConfigError>().is_some()
                || matches!(e.downcast_ref::<crowdguard::Error>(), Some(crowdguard::Error::Config(_)));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
