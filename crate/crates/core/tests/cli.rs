use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qsdnet::experiment::EventRecord;

fn qsdnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsdnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = qsdnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == name).unwrap();
    rdr.records()
        .map(|r| r.unwrap()[idx].parse().unwrap_or(f64::NAN))
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_binary_preset_saturates_helstrom() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["simulate", "--preset", "binary", "--out", out]);
    let curve = column(&dir.path().join("cumulative_correct.csv"), "cumulative_correct");
    assert!(!curve.is_empty());
    for v in curve {
        assert!((v - 0.8535534).abs() < 1e-7, "{v}");
    }
    let meta = json(&dir.path().join("metadata.json"));
    assert_eq!(meta["command"], "simulate");
    assert_eq!(meta["version"], qsdnet::VERSION);
    assert_eq!(meta["config"]["max_loops"], 12);
}

#[test]
fn simulate_gu_preset_is_four_periodic() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["simulate", "--preset", "gu", "--out", dir.path().to_str().unwrap()]);
    let p5 = column(&dir.path().join("decay_free_2_R.csv"), "p_sink5");
    assert!(p5.len() >= 8);
    for k in 0..p5.len() - 4 {
        assert!((p5[k] - p5[k + 4]).abs() < 1e-8);
    }
    let summary = json(&dir.path().join("summary.json"));
    assert!((summary["single_copy_error"].as_f64().unwrap() - 0.5).abs() < 1e-9);
}

#[test]
fn missing_receiver_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{ "ensemble": { "preset": "gu" } }"#).unwrap();
    let out = qsdnet(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("receiver"), "{err}");
    assert!(err.contains("line"), "{err}");
}

#[test]
fn malformed_and_unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\n  \"ensemble\": { \"preset\": \"gu\" },\n  oops\n}").unwrap();
    let out = qsdnet(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    fs::write(
        &cfg,
        r#"{ "ensemble": { "preset": "gu" }, "receiver": { "preset": "gu" }, "extra": 1 }"#,
    )
    .unwrap();
    let out = qsdnet(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("extra"));
}

#[test]
fn capacity_error_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{ "ensemble": { "preset": "tetrad" }, "receiver": { "preset": "tetrad" },
             "max_loops": 40, "m_max": 40, "exact_max_m": 40 }"#,
    )
    .unwrap();
    let out = qsdnet(&["scaling", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("montecarlo"));
}

#[test]
fn optimize_is_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{ "ensemble": { "preset": "binary" }, "search": { "restarts": 1, "seed": 9 } }"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        run_ok(&["optimize", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    }
    let ra = fs::read(a.join("receiver.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("receiver.json")).unwrap());
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());

    let receiver = json(&a.join("receiver.json"));
    let helstrom_error = 1.0 - 0.853_553_390_593_273_7;
    assert!((receiver["objective"].as_f64().unwrap() - helstrom_error).abs() < 1e-6);
    assert!(receiver["waveplates"]["u_forward"]["hwp"].is_number());

    // the receiver file plugs straight back into other commands
    let sim = dir.path().join("sim.json");
    fs::write(
        &sim,
        format!(
            r#"{{ "ensemble": {{ "preset": "binary" }}, "receiver": {{ "file": {:?} }} }}"#,
            a.join("receiver.json")
        ),
    )
    .unwrap();
    run_ok(&["discriminate", "--config", sim.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
}

#[test]
fn scaling_presets() {
    let dir = tempfile::tempdir().unwrap();
    let gu = dir.path().join("gu");
    run_ok(&["scaling", "--preset", "gu", "--out", gu.to_str().unwrap(), "--threads", "2"]);
    let exact = column(&gu.join("scaling.csv"), "p_err_exact");
    assert!((exact[0] - 0.5).abs() < 1e-9);

    let tet = dir.path().join("tetrad");
    run_ok(&["scaling", "--preset", "tetrad", "--out", tet.to_str().unwrap()]);
    let exact = column(&tet.join("scaling.csv"), "p_err_exact");
    assert!(exact[..6].windows(2).all(|w| w[1] < w[0]), "{exact:?}");
    let slope = json(&tet.join("slope.json"));
    assert!(slope["fit"]["slope"].as_f64().unwrap() < 0.0);

    let orth = dir.path().join("orth");
    run_ok(&["scaling", "--preset", "orthogonal", "--out", orth.to_str().unwrap()]);
    let exact = column(&orth.join("scaling.csv"), "p_err_exact");
    let mc = column(&orth.join("scaling.csv"), "p_err_montecarlo");
    assert!(exact[..6].iter().all(|v| *v == 0.0));
    assert!(mc[6..].iter().all(|v| *v == 0.0));
}

#[test]
fn montecarlo_quick_preset_matches_the_table() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["montecarlo", "--preset", "quick", "--out", dir.path().to_str().unwrap(), "--threads", "4"]);
    let summary = json(&dir.path().join("summary.json"));
    for h in summary["hypotheses"].as_array().unwrap() {
        let tv = h["tv_distance"].as_f64().unwrap();
        let n = h["pooled_counts"].as_f64().unwrap();
        assert!(n > 9000.0, "{n}");
        assert!(tv < 0.03, "{tv}");
    }
    assert!(dir.path().join("records/raw/k100_0_plus_00000.csv").exists());
    assert!(dir.path().join("postselected/k100_2_R.csv").exists());
}

#[test]
fn montecarlo_background_preset_cleans_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["montecarlo", "--preset", "background", "--out", dir.path().to_str().unwrap()]);
    let mut total = 0.0;
    let mut files = 0;
    for entry in fs::read_dir(dir.path().join("records/cleaned")).unwrap() {
        let rec = EventRecord::read_csv(fs::File::open(entry.unwrap().path()).unwrap()).unwrap();
        assert!(!rec.raw);
        total += rec.total();
        files += 1;
    }
    // 22 cells at 10 expected counts each per raw record
    let mean = total / files as f64;
    assert!(mean < 0.15 * 220.0, "{mean}");
}

#[test]
fn blind_mode_keeps_labels_in_the_key_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{ "ensemble": { "preset": "gu" }, "receiver": { "preset": "gu" },
             "k_values": [4], "runs_per_k": 5, "blind": true, "seed": 3 }"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    run_ok(&["montecarlo", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let key = fs::read_to_string(out.join("key.csv")).unwrap();
    assert_eq!(key.lines().count(), 21);
    for entry in fs::read_dir(out.join("records/raw")).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        assert!(!text.contains("label"));
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        assert!(key.contains(&name));
    }
}

#[test]
fn montecarlo_output_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&["montecarlo", "--preset", "gu", "--out", a.to_str().unwrap(), "--seed", "5"]);
    run_ok(&["montecarlo", "--preset", "gu", "--out", b.to_str().unwrap(), "--seed", "5", "--threads", "3"]);
    assert_eq!(
        fs::read(a.join("summary.csv")).unwrap(),
        fs::read(b.join("summary.csv")).unwrap()
    );
    assert_eq!(json(&a.join("metadata.json"))["seed"], 5);
}

#[test]
fn discriminate_classifies_recorded_events() {
    let dir = tempfile::tempdir().unwrap();
    let mc = dir.path().join("mc");
    let cfg = dir.path().join("mc.json");
    fs::write(
        &cfg,
        r#"{ "ensemble": { "preset": "orthogonal" }, "receiver": { "preset": "identity" },
             "k_values": [5], "runs_per_k": 2 }"#,
    )
    .unwrap();
    run_ok(&["montecarlo", "--config", cfg.to_str().unwrap(), "--out", mc.to_str().unwrap()]);
    let event = mc.join("records/raw/k5_1_V_00000.csv");
    let dcfg = dir.path().join("d.json");
    fs::write(
        &dcfg,
        format!(
            r#"{{ "ensemble": {{ "preset": "orthogonal" }}, "receiver": {{ "preset": "identity" }},
                 "events": [{event:?}] }}"#
        ),
    )
    .unwrap();
    let out = dir.path().join("d");
    run_ok(&["discriminate", "--config", dcfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let text = fs::read_to_string(out.join("posteriors.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().ends_with(",V"), "{text}");
}

#[test]
fn states_lists_the_builtin_sets() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&["states", "--out", dir.path().to_str().unwrap()]);
    let overlaps = column(&dir.path().join("overlaps.csv"), "overlap_sq");
    // binary 1, gu 6, tetrad 6, orthogonal 1
    assert_eq!(overlaps.len(), 14);
    for v in &overlaps[7..13] {
        assert!((v - 1.0 / 3.0).abs() < 1e-9);
    }
}
