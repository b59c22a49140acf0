use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn seqnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn appendix_demo_prints_the_table_and_winner() {
    let o = seqnet(&["appendix-demo"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("winner: \"175\""), "{text}");
    assert!(text.contains("-0.42144"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with('S')).count(), 5);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(seqnet(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(seqnet(&[]).status.code(), Some(1));
    assert_eq!(seqnet(&["--help"]).status.code(), Some(0));
    // invalid hyperparameter passes parsing but fails validation
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    gen(d, 20);
    assert_eq!(seqnet(&["train", "--data", d, "--batch-size", "0", "--out", d]).status.code(), Some(1));
}

#[test]
fn missing_data_exits_with_two() {
    let o = seqnet(&["train", "--data", "/nonexistent/seqnet-data"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

fn gen(dir: &str, count: usize) {
    let c = count.to_string();
    let o = seqnet(&[
        "gen-data", "--out", dir, "--count", &c, "--alphabet", "012", "--max-len", "2", "--length-weights", "1,1",
        "--height", "12", "--width", "16", "--clutter", "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_writes_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    gen(d, 15);
    let text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    let lines = json_lines(&text);
    assert_eq!(lines[0]["alphabet"], "012");
    assert_eq!(lines[0]["max_len"], 2);
    assert_eq!(lines.len(), 16);
    for s in &lines[1..] {
        assert!(Path::new(d).join(s["image"].as_str().unwrap()).exists());
        assert!(s["label"].as_str().unwrap().chars().all(|c| "012".contains(c)));
    }
}

/// Trains the tiny preset briefly, then exercises every consumer of the checkpoint.
#[test]
fn train_transcribe_eval_curve_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    gen(d, 80);

    let o = seqnet(&["train", "--data", d, "--preset", "tiny", "--out", run_s, "--epochs", "2", "--batch-size", "8", "--val-fraction", "0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["best_accuracy", "best_coverage", "steps", "wall_clock"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("epoch,steps,train_loss,val_accuracy,val_coverage,elapsed\n"));
    assert_eq!(csv.lines().count(), 3);
    let ckpt = run.join("best_accuracy.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();

    // transcription schema and confidence filter
    let manifest = dir.path().join("manifest.jsonl");
    let m = manifest.to_str().unwrap();
    let all = json_lines(&stdout(&seqnet(&["transcribe", "--checkpoint", ckpt_s, "--manifest", m, "--min-confidence", "0"])));
    assert_eq!(all.len(), 80);
    for line in &all {
        let obj = line.as_object().unwrap();
        for key in ["id", "chars", "log_prob", "confidence", "kept"] {
            assert!(obj.contains_key(key), "missing {key} in {line}");
        }
        let conf = line["confidence"].as_f64().unwrap();
        assert!((conf - line["log_prob"].as_f64().unwrap().exp()).abs() < 1e-12);
        assert_eq!(line["kept"], !obj.contains_key("overflow"));
    }
    let none = json_lines(&stdout(&seqnet(&["transcribe", "--checkpoint", ckpt_s, "--manifest", m, "--min-confidence", "1.0"])));
    assert!(none.iter().all(|l| l["kept"] == false || l["confidence"].as_f64().unwrap() >= 1.0));

    // an unreadable image becomes a per-record error, not a crash
    let good = dir.path().join("images").read_dir().unwrap().next().unwrap().unwrap().path();
    let o = seqnet(&["transcribe", "--checkpoint", ckpt_s, good.to_str().unwrap(), "/nonexistent.png"]);
    assert_eq!(o.status.code(), Some(0));
    let lines = json_lines(&stdout(&o));
    assert!(lines[0].get("error").is_none() && lines[1].get("error").is_some());
    assert_eq!(seqnet(&["transcribe", "--checkpoint", ckpt_s, "/nonexistent.png"]).status.code(), Some(2));

    // evaluation summary and records file
    let records = dir.path().join("records.jsonl");
    let o = seqnet(&["eval", "--checkpoint", ckpt_s, "--data", d, "--all", "--records", records.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let ev: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(ev["count"], 80);
    let acc = ev["sequence_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(ev["character_accuracy"].as_f64().unwrap() >= acc - 1e-12 || acc == 1.0);
    let recs = json_lines(&std::fs::read_to_string(&records).unwrap());
    assert_eq!(recs.len(), 80);
    assert!(recs.iter().all(|r| r.get("truth").is_some() && r.get("correct").is_some()));

    // coverage curve from the saved records and straight from the checkpoint agree
    let from_records = stdout(&seqnet(&["curve", "--records", records.to_str().unwrap(), "--alphabet", "012", "--steps", "10"]));
    let from_model = stdout(&seqnet(&["curve", "--checkpoint", ckpt_s, "--data", d, "--all", "--steps", "10"]));
    assert_eq!(from_records, from_model);
    let rows: Vec<&str> = from_records.lines().collect();
    assert_eq!(rows[0], "threshold,coverage,accuracy");
    assert_eq!(rows.len(), 12);
    let cov: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(cov[0], 1.0);
    assert!(cov.windows(2).all(|w| w[1] <= w[0]));
    assert!(rows[1..].iter().all(|r| {
        let acc = r.split(',').nth(2).unwrap();
        acc == "NA" || acc.parse::<f64>().is_ok()
    }));

    // resuming continues the step counter
    let o = seqnet(&["train", "--data", d, "--resume", run.join("state.ckpt").to_str().unwrap(), "--out", run_s, "--epochs", "3", "--batch-size", "8", "--val-fraction", "0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(resumed["steps"].as_u64().unwrap() > summary["steps"].as_u64().unwrap());
}

#[test]
fn arch_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    gen(d, 40);
    let o = seqnet(&["arch-sweep", "--data", d, "--depths", "1,2", "--steps", "2", "--batch-size", "4", "--val-fraction", "0.25"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "label,depth,conv_widths,params,steps,best_accuracy,final_accuracy,wall_clock");
    assert!(rows[1].starts_with("depth-1,1,8,") && rows[2].starts_with("depth-2,2,8-16,"));
    assert!(rows[1..].iter().all(|r| r.split(',').nth(4) == Some("2")));
}
