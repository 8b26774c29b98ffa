//! wasm-bindgen entry points for the browser demo.
//!
//! Every function takes an experiment configuration as JSON (missing keys take
//! their defaults) and returns JSON.

use crowdguard::cluster::SideInfo;
use crowdguard::harness::{
    detect, detection_metrics, generate, run_experiment, sweep, trusted_set, ExperimentConfig, SweepAxis,
};
use nalgebra::DMatrix;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse(config: &str) -> Result<ExperimentConfig, String> {
    let cfg: ExperimentConfig = serde_json::from_str(config).map_err(|e| format!("config: {e}"))?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Serialize)]
struct Inspection {
    sigma_hat: Vec<Vec<f64>>,
    observed: Vec<Vec<bool>>,
    c_hat: Vec<Vec<f64>>,
    adversaries: Vec<usize>,
    trusted: Vec<usize>,
    honest: Vec<usize>,
    adversarial: Vec<usize>,
    degenerate: bool,
    chosen_rho: f64,
    /// `(rho, score)` per grid point; `null` for infinite scores.
    scores: Vec<(f64, Option<f64>)>,
    sensitivity: f64,
    specificity: f64,
}

fn inspect_impl(config: &str, trusted_mode: bool) -> Result<String, String> {
    let cfg = parse(config)?;
    let (a, _, gt) = generate(&cfg, 0).map_err(|e| e.to_string())?;
    let (side, trusted) = if trusted_mode {
        let t = trusted_set(&cfg, &gt, a.num_annotators(), 0).map_err(|e| e.to_string())?;
        let list = t.iter().copied().collect();
        (SideInfo::TrustedAnnotators(t), list)
    } else {
        (SideInfo::MajorityHonest, Vec::new())
    };
    let det = detect(&a, &side, &cfg).map_err(|e| e.to_string())?;
    let metrics = detection_metrics(&gt, &det.partition);
    let p = &det.partition;
    let out = Inspection {
        sigma_hat: rows(&det.agreement.sigma_hat),
        observed: det.agreement.omega.row_iter().map(|r| r.iter().copied().collect()).collect(),
        c_hat: rows(&det.rpca.c_hat),
        adversaries: gt.adversary_indices.iter().copied().collect(),
        trusted,
        honest: p.honest.clone(),
        adversarial: p.adversarial.clone(),
        degenerate: p.degenerate,
        chosen_rho: p.chosen_rho,
        scores: p
            .diagnostics
            .iter()
            .map(|d| (d.rho, d.score.is_finite().then_some(d.score)))
            .collect(),
        sensitivity: metrics.sensitivity,
        specificity: metrics.specificity,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Generates the first repetition and runs detection on it. Indices are zero-based.
#[wasm_bindgen]
pub fn inspect(config: &str, trusted_mode: bool) -> Result<String, JsError> {
    inspect_impl(config, trusted_mode).map_err(|e| JsError::new(&e))
}

fn run_impl(config: &str) -> Result<String, String> {
    let cfg = parse(config)?;
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    report.to_json().map_err(|e| e.to_string())
}

/// Full experiment report.
#[wasm_bindgen]
pub fn run(config: &str) -> Result<String, JsError> {
    run_impl(config).map_err(|e| JsError::new(&e))
}

fn sweep_impl(config: &str, axis: &str, values: &[f64]) -> Result<String, String> {
    let cfg = parse(config)?;
    let axis: SweepAxis = axis.parse().map_err(|e: crowdguard::Error| e.to_string())?;
    let report = sweep(&cfg, axis, values).map_err(|e| e.to_string())?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv, &cfg.methods).map_err(|e| e.to_string())?;
    String::from_utf8(csv).map_err(|e| e.to_string())
}

/// Long-format sweep CSV: `axis_value,method,metric,mean,std`.
#[wasm_bindgen(js_name = sweepCsv)]
pub fn sweep_csv(config: &str, axis: &str, values: &[f64]) -> Result<String, JsError> {
    sweep_impl(config, axis, values).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{"dataset": {"kind": "synthetic", "num_annotators": 20, "num_items": 600,
        "num_classes": 3, "p_obs": 0.3}, "attack": {"p_adv": 0.3, "p_corr": 0.5}, "repetitions": 1}"#;

    #[test]
    fn inspection_is_consistent() {
        let v: serde_json::Value = serde_json::from_str(&inspect_impl(SMALL, false).unwrap()).unwrap();
        assert_eq!(v["sigma_hat"].as_array().unwrap().len(), 20);
        let n = v["honest"].as_array().unwrap().len() + v["adversarial"].as_array().unwrap().len();
        assert_eq!(n, 20);
        assert_eq!(v["adversaries"].as_array().unwrap().len(), 6);
    }

    #[test]
    fn trusted_mode_names_a_true_honest_annotator() {
        let v: serde_json::Value = serde_json::from_str(&inspect_impl(SMALL, true).unwrap()).unwrap();
        let t = v["trusted"][0].as_u64().unwrap();
        assert!(!v["adversaries"].as_array().unwrap().iter().any(|a| a.as_u64() == Some(t)));
    }

    #[test]
    fn bad_input_is_reported() {
        assert!(run_impl(r#"{"repetitions": 0}"#).is_err());
        assert!(run_impl("not json").is_err());
        assert!(sweep_impl(SMALL, "p_obs", &[0.1]).is_err());
    }

    #[test]
    fn sweep_rows() {
        let csv = sweep_impl(SMALL, "p_adv", &[0.2, 0.3]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4 * 4);
    }
}
