//! End-to-end CLI checks: artifact layout, exit codes, determinism.

use std::path::Path;
use std::process::{Command, Output};

fn kvtier(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvtier"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(path: &Path) {
    std::fs::write(
        path,
        "page_size = 16\nbudget_tokens = 288\nsink_tokens = 32\nwindow_tokens = 32\n\
         tau = 0.8\nmode = speculative\npooling = MeanS\nfirst_layer_exempt = true\n",
    )
    .unwrap();
}

#[test]
fn gen_run_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvtier(
        &[
            "gen", "--seed", "7", "--steps", "12", "--prefill", "200", "--dims", "1,4,2,32",
            "--out", "t.fkvt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(dir.path().join("t.fkvt")).unwrap();
    assert_eq!(&bytes[..4], b"FKVT");

    write_config(&dir.path().join("base.cfg"));
    let out = kvtier(
        &[
            "run", "--trace", "t.fkvt", "--config", "base.cfg", "--out-dir", "out",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for artifact in ["metrics.json", "timeline.csv", "stats.csv"] {
        assert!(dir.path().join("out").join(artifact).exists(), "{artifact}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["schema_version"], 1);
    assert!(metrics["correction_rate"].as_f64().unwrap() >= 0.0);

    // --mode override switches behavior: always_correct reports zero error
    let out = kvtier(
        &[
            "run", "--trace", "t.fkvt", "--config", "base.cfg", "--mode", "always_correct",
            "--out-dir", "out-ac",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let ac: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out-ac/metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(ac["output_max_abs_err"].as_f64().unwrap(), 0.0);
    assert_eq!(ac["selection_jaccard_mean"].as_f64().unwrap(), 1.0);

    // deterministic reruns
    let rerun = kvtier(
        &[
            "run", "--trace", "t.fkvt", "--config", "base.cfg", "--out-dir", "out2",
        ],
        dir.path(),
    );
    assert!(rerun.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("out/metrics.json")).unwrap(),
        std::fs::read(dir.path().join("out2/metrics.json")).unwrap()
    );
}

#[test]
fn compare_emits_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvtier(
        &[
            "gen", "--seed", "9", "--steps", "8", "--prefill", "150", "--dims", "1,4,2,16",
            "--out", "t.fkvt",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    write_config(&dir.path().join("a.cfg"));
    std::fs::write(
        dir.path().join("b.cfg"),
        "page_size = 16\nbudget_tokens = 288\nsink_tokens = 32\nwindow_tokens = 32\n\
         mode = always_correct\n",
    )
    .unwrap();
    let out = kvtier(
        &[
            "compare", "--trace", "t.fkvt", "--configs", "a.cfg", "b.cfg", "--out-dir", "cmp",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cmp/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("cmp/compare.json").exists());
}

#[test]
fn sim_reports_both_executors() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvtier(
        &[
            "sim", "--pages", "8", "--layout", "hnd", "--bandwidth-gbps", "10",
            "--out-dir", "sim",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim/sim.json")).unwrap())
            .unwrap();
    let seq = summary["sequential_makespan_us"].as_f64().unwrap();
    let streamed = summary["streamed_makespan_us"].as_f64().unwrap();
    assert!(streamed <= seq);
    assert!(dir.path().join("sim/timeline.csv").exists());
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvtier(&["definitely-not-a-subcommand"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = kvtier(
        &["gen", "--dims", "1,2", "--out", "t.fkvt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = kvtier(&["sim", "--layout", "weird"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.fkvt"), b"not a trace at all").unwrap();
    write_config(&dir.path().join("base.cfg"));
    let out = kvtier(
        &[
            "run", "--trace", "junk.fkvt", "--config", "base.cfg", "--out-dir", "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // valid trace, bad config key
    let out = kvtier(
        &[
            "gen", "--seed", "1", "--steps", "4", "--prefill", "64", "--dims", "1,2,1,8",
            "--out", "t.fkvt",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    std::fs::write(dir.path().join("bad.cfg"), "page_sise = 16\n").unwrap();
    let out = kvtier(
        &[
            "run", "--trace", "t.fkvt", "--config", "bad.cfg", "--out-dir", "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    // config whose invariants fail
    std::fs::write(
        dir.path().join("broken.cfg"),
        "page_size = 16\nbudget_tokens = 16\nsink_tokens = 32\nwindow_tokens = 32\n",
    )
    .unwrap();
    let out = kvtier(
        &[
            "run", "--trace", "t.fkvt", "--config", "broken.cfg", "--out-dir", "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvtier(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen"));
}
