//! End-to-end runs of the `perfix` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn perfix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfix"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(extra_round: &str) -> String {
    format!(
        r#"seed = 4

[model]
preset = "desk-tiny"
image_size = 8
patch_size = 4
num_classes = 4

[strategy]
name = "fedperfix"

[hyper]
lr = 0.1
local_epochs = 1
batch_size = 8

[round]
total_rounds = 2
num_clients = 5
participation_ratio = 0.6
{extra_round}

[data]
source = "synth"
samples = 120
alpha = 0.5
"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path) -> Output {
    perfix(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", &tiny_config(""));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = run(&cfg, &a);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "accuracy.csv",
        "accuracy.json",
        "resources.csv",
        "manifest.json",
        "partition.json",
        "report.json",
    ] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert!(a.join("checkpoint").join("global.pfxp").is_file());
    assert!(a.join("checkpoint").join("client_4.pfxp").is_file());
    let csv = fs::read_to_string(a.join("accuracy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5, "header plus one row per client");

    assert!(run(&cfg, &b).status.success());
    assert_eq!(
        fs::read(a.join("accuracy.csv")).unwrap(),
        fs::read(b.join("accuracy.csv")).unwrap()
    );
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", &tiny_config(""));
    let first = dir.path().join("first");
    let o = perfix(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        first.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], "9");
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let replay = write_config(dir.path(), "replay.json", &manifest["config"].to_string());
    let second = dir.path().join("second");
    let o = run(&replay, &second);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(first.join("accuracy.csv")).unwrap(),
        fs::read(second.join("accuracy.csv")).unwrap()
    );
    let again: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(second.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(
        again["config_hash"], manifest["config_hash"],
        "output location is not part of the hash"
    );
}

#[test]
fn config_errors_exit_2_with_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let zero = write_config(
        dir.path(),
        "zero.toml",
        &tiny_config("").replace("participation_ratio = 0.6", "participation_ratio = 0.0"),
    );
    let o = run(&zero, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("participation_ratio"), "{}", stderr(&o));

    let typo = write_config(dir.path(), "typo.toml", &tiny_config("totl_rounds = 3"));
    let o = run(&typo, &out);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("totl_rounds") && msg.contains("line"), "{msg}");

    let o = run(&dir.path().join("missing.toml"), &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resources_for_vit_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/vit_small.toml");
    let out = dir.path().join("res");
    let o = perfix(&[
        "resources",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut rows = csv::Reader::from_path(out.join("resources.csv")).unwrap();
    let headers = rows.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    let row = |name: &str| records.iter().find(|r| &r[col("strategy")] == name).unwrap().clone();
    let storage: f64 = row("fedavg")[col("storage")].parse().unwrap();
    assert!((storage / (1024.0 * 1024.0) / 21.03 - 1.0).abs() < 0.05, "{storage}");
    assert_eq!(&row("local")[col("comm")], "0");
    assert_eq!(row("apfl")[col("flops_pct")].parse::<f64>().unwrap(), 200.0);
    assert!(records.len() >= 10, "every registered strategy");
}

#[test]
fn sensitivity_emits_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "tiny.toml",
        &tiny_config("").replace("total_rounds = 2", "total_rounds = 1"),
    );
    let out = dir.path().join("sens");
    let o = perfix(&[
        "sensitivity",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut reader = csv::Reader::from_path(out.join("sensitivity.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for r in &rows[..5] {
        let (s, c, o): (f64, f64, f64) = (r[1].parse().unwrap(), r[3].parse().unwrap(), r[5].parse().unwrap());
        assert_eq!(o, (s + c) / 2.0, "{:?}", r);
    }
    assert_eq!(&rows[5][0], "all_local");
    assert!(rows[5][5].is_empty());

    let svg_dir = dir.path().join("svg");
    let o = perfix(&[
        "plot",
        "--csv",
        out.join("sensitivity.csv").to_str().unwrap(),
        "--kind",
        "sensitivity",
        "--out",
        svg_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(svg_dir.join("sensitivity.svg")).unwrap();
    roxmltree::Document::parse(&svg).expect("well-formed XML");
}

#[test]
fn gain_then_plot_one_bin() {
    let dir = tempfile::tempdir().unwrap();
    let method = write_config(dir.path(), "m.csv", "client_id,accuracy\n0,0.52\n1,0.61\n");
    let base = write_config(dir.path(), "b.csv", "client_id,accuracy\n0,0.50\n1,0.60\n");
    let out = dir.path().join("gain");
    let o = perfix(&[
        "gain",
        "--method",
        method.to_str().unwrap(),
        "--baseline",
        base.to_str().unwrap(),
        "--bin-width",
        "0.05",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = out.join("gain_density.csv");
    assert_eq!(
        fs::read_to_string(&csv).unwrap().lines().count(),
        2,
        "gains 0.02 and 0.01 share one bin"
    );

    let o = perfix(&["plot", "--csv", csv.to_str().unwrap(), "--kind", "gain-density"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(out.join("gain_density.svg")).unwrap();
    assert_eq!(svg.matches("class=\"bar\"").count(), 1);
    let doc = roxmltree::Document::parse(&svg).expect("well-formed XML");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert!(svg.contains("class=\"legend\""));
    assert!(!svg.contains("href"), "self-contained");
}

#[test]
fn empty_or_malformed_csv_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("empty.csv", ""),
        ("header.csv", "bin_lower,bin_upper,count\n"),
        ("bad.csv", "bin_lower,bin_upper,count\nx,0.1,2\n"),
    ] {
        let path = write_config(dir.path(), name, text);
        let o = perfix(&["plot", "--csv", path.to_str().unwrap(), "--kind", "gain-density"]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
    }
}
