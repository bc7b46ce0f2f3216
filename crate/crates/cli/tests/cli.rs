use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const SMALL: &str = r#"
output_dir = "out"
seed = 0

[dataset]
kind = "spurious_blobs"
n_per_domain = 120

[protocol]
target = "all"

[train]
total_steps = 240
validate_every = 40

[quant]
mode = "lsq"
bits = 7
quantize_at = 100

[analysis]
samples = 10
probes = 3
"#;

struct Lab {
    dir: tempfile::TempDir,
}

impl Lab {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn qtdog(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_qtdog"))
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_summary_has_one_accuracy_per_domain_and_is_deterministic() {
    let lab = Lab::new();
    lab.config("c.toml", SMALL);
    ok(&lab.qtdog(&["run", "--config", "c.toml"]));
    let s = lab.json("out/run/summary.json");
    let domains = s["domains"].as_array().unwrap();
    let targets: Vec<&str> = domains.iter().map(|d| d["target"].as_str().unwrap()).collect();
    assert_eq!(targets, vec!["d0", "d1", "d2", "d3"]);
    let accs: Vec<f64> = domains.iter().map(|d| d["target_acc"].as_f64().unwrap()).collect();
    let avg = accs.iter().sum::<f64>() / 4.0;
    assert!((s["average_target_acc"].as_f64().unwrap() - avg).abs() < 1e-15);
    assert_eq!(s["bits"], 7);
    assert_eq!(s["quantize_step"], 100);
    for d in domains {
        assert!(d["best_step"].as_u64().unwrap() > 100);
        assert_eq!(d["stability"]["count"], 4);
    }
    for t in targets {
        let csv = fs::read_to_string(lab.path(&format!("out/run/{t}/metrics.csv"))).unwrap();
        assert!(csv.starts_with("step,train_loss,val_acc,target_acc\n"));
        assert_eq!(csv.lines().count(), 1 + 6);
    }

    let first = fs::read(lab.path("out/run/summary.json")).unwrap();
    let manifest = fs::read(lab.path("out/run/manifest.json")).unwrap();
    ok(&lab.qtdog(&["run", "--config", "c.toml", "--force", "--jobs", "1"]));
    assert_eq!(fs::read(lab.path("out/run/summary.json")).unwrap(), first);
    assert_eq!(fs::read(lab.path("out/run/manifest.json")).unwrap(), manifest);
}

#[test]
fn erm_summary_reports_full_precision() {
    let lab = Lab::new();
    lab.config(
        "c.toml",
        &SMALL.replace("mode = \"lsq\"", "mode = \"off\"").replace("\"all\"", "\"d3\""),
    );
    ok(&lab.qtdog(&["run", "--config", "c.toml", "--out", "erm"]));
    let s = lab.json("erm/run/summary.json");
    assert_eq!(s["bits"], 32);
    assert_eq!(s["quantize_step"], Value::Null);
    assert_eq!(s["domains"].as_array().unwrap().len(), 1);
    assert!(!lab.path("erm/run/d3/quantized.json").exists());
}

#[test]
fn manifest_hashes_every_file() {
    let lab = Lab::new();
    lab.config("c.toml", &SMALL.replace("\"all\"", "\"d1\""));
    ok(&lab.qtdog(&["run", "--config", "c.toml"]));
    let m = lab.json("out/run/manifest.json");
    let files = m["files"].as_array().unwrap();
    let mut listed: Vec<String> = files.iter().map(|f| f["path"].as_str().unwrap().to_string()).collect();
    for f in files {
        let bytes = fs::read(lab.path(&format!("out/run/{}", f["path"].as_str().unwrap()))).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    listed.sort();
    let expect = [
        "d1/best.json",
        "d1/last.json",
        "d1/metrics.csv",
        "d1/quantized.json",
        "summary.json",
    ];
    assert_eq!(listed, expect);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if root.exists() {
        for e in fs::read_dir(root).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn config_errors_exit_2_without_outputs() {
    let lab = Lab::new();
    let cases = [
        SMALL.replace("[train]", "[train]\nlearning_rate = 0.1"),
        SMALL.replace("\"all\"", "\"d9\""),
        SMALL.replace("bits = 7", "bits = 1"),
        SMALL.replace("quantize_at = 100", "quantize_at = 500"),
        SMALL.replace("spurious_blobs", "imagenet"),
        SMALL.replace("n_per_domain = 120", "n_per_domain = 120\nbogus = 1"),
        SMALL.replace("seed = 0", "seed = -4"),
        SMALL.replace("samples = 10", "samples = 1"),
        SMALL.replace("samples = 10", "samples = 10\ngammas = [0.2, 0.1]"),
        "this is not toml".to_string(),
    ];
    for (i, body) in cases.iter().enumerate() {
        let name = format!("bad{i}.toml");
        lab.config(&name, body);
        let o = lab.qtdog(&["run", "--config", &name]);
        assert_eq!(code(&o), 2, "case {i}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        assert!(files_under(&lab.path("out")).is_empty(), "case {i} left outputs");
    }
    let o = lab.qtdog(&["run", "--config", "missing.toml"]);
    assert_eq!(code(&o), 4);
    let o = lab.qtdog(&["run"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn existing_outputs_need_force_and_are_replaced_whole() {
    let lab = Lab::new();
    lab.config("c.toml", &SMALL.replace("\"all\"", "\"d0\""));
    ok(&lab.qtdog(&["run", "--config", "c.toml"]));
    fs::write(lab.path("out/run/stale.txt"), "x").unwrap();
    let o = lab.qtdog(&["run", "--config", "c.toml"]);
    assert_eq!(code(&o), 4);
    assert!(lab.path("out/run/stale.txt").exists());
    ok(&lab.qtdog(&["run", "--config", "c.toml", "--force"]));
    assert!(!lab.path("out/run/stale.txt").exists());
    assert!(lab.path("out/run/summary.json").exists());
    let leftovers: Vec<_> = fs::read_dir(lab.path("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(leftovers, vec!["run"]);
}

#[test]
fn divergence_writes_outputs_and_exits_3() {
    let lab = Lab::new();
    let body = SMALL.replace("\"all\"", "\"d3\"").replace(
        "validate_every = 40",
        "validate_every = 40\noptimizer = { kind = \"sgd\", lr = 1e8 }",
    );
    lab.config("c.toml", &body);
    let o = lab.qtdog(&["run", "--config", "c.toml"]);
    assert_eq!(code(&o), 3, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let s = lab.json("out/run/summary.json");
    assert_eq!(s["domains"][0]["status"], "diverged");
}

#[test]
fn sweep_row_count_and_compression() {
    let lab = Lab::new();
    lab.config(
        "c.toml",
        &format!("{}\n[sweep]\nbits = [3, 5, 8]\nseeds = [0, 1]\n", SMALL.replace("\"all\"", "\"d3\"")),
    );
    ok(&lab.qtdog(&["sweep-bits", "--config", "c.toml"]));
    let csv = fs::read_to_string(lab.path("out/sweep-bits/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, vec!["bits", "seed", "target_acc", "val_acc", "compression"]);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 2 + 2);
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    for r in &rows {
        let b: f64 = r[col("bits")].parse().unwrap();
        let c: f64 = r[col("compression")].parse().unwrap();
        assert_eq!(c, if b == 32.0 { 1.0 } else { 32.0 / b });
    }

    let o = lab.qtdog(&["sweep-bits", "--config", "c.toml", "--bits", "3,17", "--force"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_writes_profiles_and_curvature() {
    let lab = Lab::new();
    let erm = SMALL.replace("mode = \"lsq\"", "mode = \"off\"").replace("\"all\"", "\"d3\"");
    lab.config("erm.toml", &erm);
    lab.config("qat.toml", &SMALL.replace("\"all\"", "\"d3\""));
    ok(&lab.qtdog(&["run", "--config", "erm.toml", "--out", "erm"]));
    ok(&lab.qtdog(&["run", "--config", "qat.toml", "--out", "qat"]));
    ok(&lab.qtdog(&[
        "analyze",
        "--config",
        "erm.toml",
        "--checkpoint",
        "erm/run/d3/best.json",
        "--checkpoint",
        "qat/run/d3/best.json",
    ]));
    for label in ["0_d3_best", "1_d3_best"] {
        for set in ["source", "target"] {
            let csv = fs::read_to_string(lab.path(&format!("out/analyze/{label}/flatness_{set}.csv"))).unwrap();
            let mut lines = csv.lines();
            assert_eq!(lines.next().unwrap(), "gamma,mean,stderr,samples,set");
            let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
            assert_eq!(rows.len(), 7);
            assert_eq!(&rows[0][..3], &["0", "0", "0"]);
            for r in &rows[1..] {
                let se: f64 = r[2].parse().unwrap();
                assert!(se.is_finite() && se > 0.0);
                assert_eq!(r[4], set);
            }
        }
    }
    let erm_curv = lab.json("out/analyze/0_d3_best/curvature.json");
    assert!(erm_curv["trace"].as_f64().unwrap().is_finite());
    assert_eq!(erm_curv["taylor"]["rows"].as_array().unwrap().len(), 4);
    assert_eq!(lab.json("out/analyze/1_d3_best/curvature.json")["taylor"], Value::Null);
}

#[test]
fn analyze_rejects_incompatible_checkpoint() {
    let lab = Lab::new();
    lab.config("c.toml", &SMALL.replace("\"all\"", "\"d3\""));
    ok(&lab.qtdog(&["run", "--config", "c.toml"]));
    let moons = SMALL
        .replace("kind = \"spurious_blobs\"", "kind = \"rotated_moons\"\nangles = [0.0, 20.0, 40.0, 60.0]")
        .replace("\"all\"", "\"d3\"");
    lab.config("moons.toml", &moons);
    let o = lab.qtdog(&["analyze", "--config", "moons.toml", "--checkpoint", "out/run/d3/best.json"]);
    assert_eq!(code(&o), 2);
    assert!(!lab.path("out/analyze").exists());
    let o = lab.qtdog(&["analyze", "--config", "c.toml", "--checkpoint", "nope.json"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn single_member_ensemble_matches_run() {
    let lab = Lab::new();
    let body = format!("{}\n[ensemble]\nmembers = 1\n", SMALL.replace("\"all\"", "\"d2\""));
    lab.config("c.toml", &body);
    ok(&lab.qtdog(&["run", "--config", "c.toml", "--seed", "4"]));
    ok(&lab.qtdog(&["ensemble", "--config", "c.toml", "--seed", "4"]));
    let run = lab.json("out/run/summary.json");
    let ens = lab.json("out/ensemble/d2.json");
    assert_eq!(ens["members"].as_array().unwrap().len(), 1);
    assert_eq!(ens["ensemble_target_acc"], run["domains"][0]["target_acc"]);
    assert_eq!(ens["members"][0]["best_step"], run["domains"][0]["best_step"]);
}

#[test]
fn five_member_ensemble_report() {
    let lab = Lab::new();
    let body = format!("{}\n[ensemble]\nmembers = 5\n", SMALL.replace("\"all\"", "\"d3\""));
    lab.config("c.toml", &body);
    ok(&lab.qtdog(&["ensemble", "--config", "c.toml"]));
    let r = lab.json("out/ensemble/d3.json");
    let members = r["members"].as_array().unwrap();
    assert_eq!(members.len(), 5);
    let total: u64 = members.iter().map(|m| m["bytes"].as_u64().unwrap()).sum();
    assert_eq!(r["size"]["total_bytes"].as_u64().unwrap(), total);
    assert_eq!(r["size"]["relative_size"].as_f64().unwrap(), 5.0 * 7.0 / 32.0);
    assert_eq!(lab.json("out/ensemble/summary.json")["members"], 5);
}

#[test]
fn ptq_trains_or_quantizes_checkpoints() {
    let lab = Lab::new();
    let body = SMALL.replace("\"all\"", "\"d3\"").replace("bits = 7", "bits = 4");
    lab.config("c.toml", &body);
    ok(&lab.qtdog(&["ptq", "--config", "c.toml"]));
    let s = lab.json("out/ptq/summary.json");
    assert_eq!(s["quant_mode"], "ptq-rtn");
    assert_eq!(s["bits"], 4);
    assert_eq!(s["quantize_step"], Value::Null);
    let acc = s["domains"][0]["ptq_target_acc"].as_f64().unwrap();
    assert_eq!(s["average_target_acc"].as_f64().unwrap(), acc);
    let export = lab.json("out/ptq/d3/quantized.json");
    assert_eq!(export["bits"], 4);

    ok(&lab.qtdog(&["ptq", "--config", "c.toml", "--checkpoint", "out/ptq/d3/best.json", "--force"]));
    let again = lab.json("out/ptq/summary.json");
    assert_eq!(again["checkpoints"][0]["ptq_target_acc"].as_f64().unwrap(), acc);

    lab.config("q.toml", &SMALL.replace("\"all\"", "\"d3\""));
    ok(&lab.qtdog(&["run", "--config", "q.toml", "--out", "q"]));
    let o = lab.qtdog(&["ptq", "--config", "q.toml", "--checkpoint", "q/run/d3/best.json", "--out", "p"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn csv_dataset_resolves_relative_to_config() {
    let lab = Lab::new();
    fs::create_dir(lab.path("cfg")).unwrap();
    let mut csv = String::from("domain,label,x,y\n");
    for d in ["a", "b", "c"] {
        for i in 0..30 {
            let l = i % 2;
            csv += &format!("{d},{l},{}.0,{}.5\n", l * 3 + i % 3, i % 5);
        }
    }
    fs::write(lab.path("cfg/data.csv"), csv).unwrap();
    let body = SMALL
        .replace(
            "kind = \"spurious_blobs\"\nn_per_domain = 120",
            "kind = \"csv\"\npath = \"data.csv\"",
        )
        .replace("\"all\"", "\"c\"");
    lab.config("cfg/c.toml", &body);
    ok(&lab.qtdog(&["run", "--config", "cfg/c.toml"]));
    assert_eq!(lab.json("out/run/summary.json")["dataset"]["generator"], "csv");

    lab.config("cfg/missing.toml", &body.replace("data.csv", "absent.csv"));
    let o = lab.qtdog(&["run", "--config", "cfg/missing.toml", "--force"]);
    assert_eq!(code(&o), 4);
}
