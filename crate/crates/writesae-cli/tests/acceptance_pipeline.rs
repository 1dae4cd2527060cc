//! Criterion 13: the bundled demo pipeline completes deterministically on a
//! single core and its manifest checksums reproduce across two runs.

use std::time::Instant;

use writesae_cli::config::ExperimentConfig;
use writesae_cli::pipeline::run_pipeline;

#[test]
fn c13_demo_pipeline_is_fast_and_reproducible() {
    let out = std::env::temp_dir().join("writesae_accept_pipeline");
    let _ = std::fs::remove_dir_all(&out);
    let cfg = ExperimentConfig::demo(out.to_str().unwrap());
    let start = Instant::now();
    let first = run_pipeline(&cfg).expect("first run");
    let second = run_pipeline(&cfg).expect("second run");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "two pipeline runs took {secs:.0}s");
    assert_eq!(first.config_hash, second.config_hash);
    assert_eq!(first.artifacts.len(), second.artifacts.len());
    for (a, b) in first.artifacts.iter().zip(&second.artifacts) {
        assert_eq!(a.path, b.path);
        assert_eq!(a.sha256, b.sha256, "artifact {} changed across runs", a.path);
    }
    // The partial marker must be gone after a successful run.
    assert!(!out.join("RUN.partial").exists());
    // Spot-check the headline summaries exist and parse.
    let rs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("replacement_summary.json")).unwrap())
            .unwrap();
    assert!(rs["win_rate"].as_f64().unwrap() > 0.0);
    let _ = std::fs::remove_dir_all(&out);
    eprintln!(
        "[PASS] C13 pipeline: two identical runs ({} artifacts) in {:.0}s total",
        first.artifacts.len(),
        secs
    );
}

#[test]
fn dry_run_validates_without_writing() {
    let out = std::env::temp_dir().join("writesae_accept_dryrun");
    let _ = std::fs::remove_dir_all(&out);
    let cfg = ExperimentConfig::demo(out.to_str().unwrap());
    cfg.validate().unwrap();
    // A bad config is rejected with a config error.
    let mut bad = cfg.clone();
    bad.capture_cell = Some((99, 0));
    let err = bad.validate().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.join("host.json").exists());
}
