use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn crowdguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdguard"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: [&str; 8] = [
    "--set",
    "dataset.num_annotators=20",
    "--set",
    "dataset.num_items=600",
    "--set",
    "attack.p_adv=0.3",
    "--repetitions",
    "2",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn printed_config_loads_back() {
    let out = crowdguard(&["config"]);
    assert!(out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    fs::write(&path, &out.stdout).unwrap();
    let json = dir.path().join("r.json");
    let args = with_small(&["run", "-c", path.to_str().unwrap(), "--json", json.to_str().unwrap()]);
    let out = crowdguard(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(report["header"]["config"]["dataset"]["num_annotators"], 20);
    assert_eq!(report["methods"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "no_such_key = 3\n").unwrap();
    assert_eq!(crowdguard(&["run", "-c", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(crowdguard(&["run", "--set", "attack.p_adv=1.5"]).status.code(), Some(2));
    assert_eq!(crowdguard(&["run", "--set", "repetitions=0"]).status.code(), Some(2));
    assert_ne!(crowdguard(&["run", "-c", "/nonexistent/exp.toml"]).status.code(), Some(0));
}

#[test]
fn run_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2).map(|i| dir.path().join(format!("r{i}.json"))).collect();
    for p in &paths {
        let out = crowdguard(&with_small(&["run", "--seed", "7", "--json", p.to_str().unwrap()]));
        assert!(out.status.success());
    }
    assert_eq!(fs::read(&paths[0]).unwrap(), fs::read(&paths[1]).unwrap());
}

#[test]
fn sweep_csv_has_one_row_per_value_method_metric() {
    let out = crowdguard(&with_small(&["sweep", "--axis", "p_adv", "--values", "0.1,0.3"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("axis_value,method,metric,mean,std"));
    assert_eq!(lines.count(), 2 * 4 * 4);
}

#[test]
fn generated_files_can_be_inspected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = crowdguard(&with_small(&["gen", "--out", data.to_str().unwrap()]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["annotations.csv", "truth.csv", "attack.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let attack: serde_json::Value =
        serde_json::from_slice(&fs::read(data.join("attack.json")).unwrap()).unwrap();
    let adversaries: Vec<u64> = attack["adversary_indices"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(adversaries.len(), 6);
    assert!(adversaries.iter().all(|&i| (1..=20).contains(&i)));

    let insp = dir.path().join("inspect");
    let out = crowdguard(&[
        "inspect",
        "--annotations",
        data.join("annotations.csv").to_str().unwrap(),
        "--classes",
        "3",
        "--out",
        insp.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["agreement.csv", "rpca.csv", "partition.json", "labels.csv"] {
        assert!(insp.join(f).exists(), "{f}");
    }
    let labels = fs::read_to_string(insp.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 601);
}

#[test]
fn zero_trusted_index_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = crowdguard(&with_small(&["inspect", "--trusted", "0", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(!Path::new(&dir.path().join("partition.json")).exists());
}
