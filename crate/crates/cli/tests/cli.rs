use std::fs;
use std::path::Path;
use std::process::Command;

use pnr_cli::pipeline::{self, ClassifiedStatistics};
use pnr_cli::{CliError, PipelineConfig, ReferenceSource};
use pnr_core::povm::{binomial_loss_povm, detection_probabilities, folded_poisson, probe_matrix, probes_from_means};
use pnr_core::tomography::reconstruct;
use pnr_core::waveform::read_container;

fn small(dir: &Path) -> PipelineConfig {
    PipelineConfig {
        ladder: vec![0.0, 2.0, 5.7],
        shots_per_probe: 2_000,
        output_dir: dir.to_path_buf(),
        reference_source: ReferenceSource::Supervised,
        ..PipelineConfig::default()
    }
}

fn pnr(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pnr")).args(args).output().unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn one_probe_ten_shots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        ladder: vec![4.0],
        shots_per_probe: 10,
        output_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let first = pipeline::simulate(&cfg).unwrap();
    let bytes = fs::read(dir.path().join("shots-00.bin")).unwrap();
    let (header, shots) = read_container(bytes.as_slice()).unwrap();
    assert_eq!(header.record_count, 10);
    assert_eq!(shots.len(), 10);
    assert_eq!(pnr_core::digest::to_hex(&header.config_digest), cfg.digest_hex());

    let second = pipeline::simulate(&cfg).unwrap();
    assert_eq!(first.config_digest, second.config_digest);
    assert_eq!(bytes, fs::read(dir.path().join("shots-00.bin")).unwrap());
}

#[test]
fn default_ladder_writes_190000_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        output_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let manifest = pipeline::simulate(&cfg).unwrap();
    assert_eq!(manifest.probes.len(), 19);
    let mut total = 0;
    for p in &manifest.probes {
        let (h, _) = read_container(fs::File::open(dir.path().join(&p.file)).unwrap()).unwrap();
        total += h.record_count;
    }
    assert_eq!(total, 190_000);
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pipeline::full(&cfg).unwrap();
    let fa = files(dir.path());
    fs::remove_dir_all(dir.path()).unwrap();
    pipeline::full(&cfg).unwrap();
    let fb = files(dir.path());
    assert_eq!(fa.len(), fb.len());
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
    for name in [
        "manifest.json",
        "references.json",
        "stats.json",
        "stats.csv",
        "stats-single-point.csv",
        "povm.json",
        "report.json",
        "statistics.svg",
        "povm.svg",
        "classifier-errors.svg",
        "labels-02.csv",
    ] {
        assert!(fa.iter().any(|(n, _)| n == name), "missing {name}");
    }
}

#[test]
fn vacuum_row_and_row_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pipeline::simulate(&cfg).unwrap();
    let stats = pipeline::classify(&cfg).unwrap();
    let vacuum = stats.pattern.row(0);
    assert!((vacuum[0] - 1.0).abs() <= 0.01, "{vacuum:?}");

    let pattern = fs::read_to_string(dir.path().join("stats.csv")).unwrap();
    let single = fs::read_to_string(dir.path().join("stats-single-point.csv")).unwrap();
    let keys = |s: &str| {
        s.lines()
            .map(|l| l.split(',').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(&pattern), keys(&single));
    assert_eq!(keys(&pattern).len(), 1 + cfg.ladder.len());
}

#[test]
fn noiseless_rows_follow_folded_poisson() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.detector = cfg.detector.noiseless();
    cfg.shots_per_probe = 5_000;
    pipeline::simulate(&cfg).unwrap();
    let stats = pipeline::classify(&cfg).unwrap();
    for (i, &mean) in cfg.ladder.iter().enumerate() {
        let theory = folded_poisson(cfg.detector.efficiency * mean, cfg.outcomes).unwrap();
        for (got, p) in stats.pattern.row(i).iter().zip(&theory) {
            let sigma = (p * (1.0 - p) / 5_000.0).sqrt();
            assert!((got - p).abs() <= 5.0 * sigma + 1e-12, "probe {mean}: {got} vs {p}");
        }
        assert_eq!(stats.errors[i].pattern_errors, 0);
    }
}

#[test]
fn tomography_records_defaults_and_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        output_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let f = probe_matrix(&probes_from_means(&cfg.ladder).unwrap(), 70).unwrap();
    let exact = detection_probabilities(&binomial_loss_povm(0.547, 7, 70).unwrap(), &f).unwrap();
    let stats = ClassifiedStatistics {
        config_digest: cfg.digest_hex(),
        reference_source: cfg.reference_source,
        reference_probe: cfg.ladder[cfg.reference_index()],
        pattern: exact.clone(),
        single_point: exact.clone(),
        ground_truth: exact.clone(),
        errors: vec![],
    };
    let path = dir.path().join("exact.json");
    fs::write(&path, serde_json::to_string(&stats).unwrap()).unwrap();

    let out = pipeline::tomography(&cfg, Some(&path)).unwrap();
    assert_eq!((out.truncation, out.outcomes, out.gamma), (70, 7, 0.01));
    assert_eq!(out.report.gamma, 0.01);
    let (povm, _) = reconstruct(&exact, &f, &cfg.solver).unwrap();
    assert_eq!(out.povm, povm);
    assert!((povm.theta(1, 1) - 0.547).abs() < 1e-3);

    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("povm.json")).unwrap()).unwrap();
    assert_eq!(written["truncation"], 70);
    assert_eq!(written["outcomes"], 7);
    assert_eq!(written["gamma"], 0.01);
}

#[test]
fn report_refuses_mixed_digests_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pipeline::full(&cfg).unwrap();
    let svgs = ["statistics.svg", "povm.svg", "classifier-errors.svg"];
    let before: Vec<Vec<u8>> = svgs.iter().map(|s| fs::read(dir.path().join(s)).unwrap()).collect();
    pipeline::report(&cfg).unwrap();
    for (s, b) in svgs.iter().zip(&before) {
        assert_eq!(&fs::read(dir.path().join(s)).unwrap(), b, "{s} changed on rerun");
    }

    let povm_path = dir.path().join("povm.json");
    let text = fs::read_to_string(&povm_path).unwrap();
    fs::write(&povm_path, text.replace(&cfg.digest_hex(), &"0".repeat(64))).unwrap();
    let err = pipeline::report(&cfg).unwrap_err();
    assert!(matches!(err, CliError::DigestMismatch { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();

    let bad = pnr(&["simulate", "--output-dir", out, "--ladder", "1,2,3"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ladder"));

    let missing = pnr(&["classify", "--output-dir", out]);
    assert_eq!(missing.status.code(), Some(4));

    let cfg = PipelineConfig {
        solver: pnr_core::tomography::SolverOptions {
            max_iterations: 1,
            ..Default::default()
        },
        ..small(&out_dir)
    };
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let c = cfg_path.to_str().unwrap();
    for stage in ["simulate", "classify"] {
        let ok = pnr(&[stage, "--config", c]);
        assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    }
    let stuck = pnr(&["tomography", "--config", c]);
    assert_eq!(stuck.status.code(), Some(3));
    assert!(out_dir.join("povm.json").exists());

    let other_seed = pnr(&["tomography", "--config", c, "--seed", "1"]);
    assert_eq!(other_seed.status.code(), Some(2));
}

#[test]
fn config_subcommand_prints_effective_json() {
    let out = pnr(&["config", "--seed", "5", "--gamma", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    let cfg: PipelineConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.solver.gamma, 0.5);
    assert_eq!(cfg.ladder.len(), 19);
}
