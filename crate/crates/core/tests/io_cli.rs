mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use common::*;
use qif_fusion::io::{
    cmd_fit, cmd_het, cmd_oracle, cmd_path, load_artifact, read_dataset, read_partition,
    verify_artifacts, write_dataset, RunConfig,
};
use qif_fusion::sim::gen_dataset;
use qif_fusion::{BasisKind, FusionError, LinkFamily, PartitionMap};

const BIN: &str = env!("CARGO_BIN_EXE_qif-fusion");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn fixture_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::load(&fixture("small_logistic_run.toml")).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn dataset_round_trip_is_exact() {
    let data = gen_dataset(&design(SMALL_POISSON), 0).unwrap();
    let names = vec!["Intercept".to_string(), "dose".to_string()];
    let mut bytes = Vec::new();
    write_dataset(&data, &names, None, &mut bytes).unwrap();
    let loaded = read_dataset(bytes.as_slice(), LinkFamily::LogPoisson, BasisKind::ArBand(1)).unwrap();
    assert_eq!(loaded.covariates, names);
    let back = &loaded.dataset;
    assert_eq!(back.n_studies(), 1);
    assert_eq!(back.n_outcomes(), 3);
    for j in 0..3 {
        let (a, b) = (data.block(0, j), back.block(0, j));
        for i in 0..a.n() {
            assert_eq!(a.responses(i), b.responses(i));
            assert_eq!(a.design(i), b.design(i));
        }
    }
    let mut again = Vec::new();
    write_dataset(back, &names, Some(&loaded.participants), &mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn participant_order_is_numeric_then_text() {
    let text = "study,source,participant,position,y,x1\n\
                1,1,b,1,1.0,1\n1,1,10,1,2.0,1\n1,1,9,1,3.0,1\n1,1,a,1,4.0,1\n";
    let loaded = read_dataset(text.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence).unwrap();
    assert_eq!(loaded.participants[0], vec!["9", "10", "a", "b"]);
    let ys: Vec<f64> = (0..4).map(|i| loaded.dataset.block(0, 0).responses(i)[0]).collect();
    assert_eq!(ys, vec![3.0, 2.0, 4.0, 1.0]);
}

#[test]
fn parse_errors_carry_lines() {
    let cases = [
        ("study,source,participant,position,y\n1,1,1,1,0\n", 1),
        ("study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,1,x,0,1\n", 3),
        ("study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,2,1,0,nan\n", 3),
        ("study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,1,1,0,2\n", 3),
        ("study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,2,1,0,1\n1,2,1,1,0,1\n1,2,1,2,0,1\n1,2,2,1,0,1\n", 6),
    ];
    for (text, line) in cases {
        match read_dataset(text.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence) {
            Err(FusionError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
            other => panic!("{text}: {other:?}"),
        }
    }
    let missing_source = "study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,2,1,0,1\n1,2,1,1,0,1\n";
    let err = read_dataset(missing_source.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence).unwrap_err();
    assert!(err.to_string().contains("no rows for source 2"), "{err}");
}

#[test]
fn partition_table_reads_any_labels() {
    let text = "# manifest-digest: abc\nstudy,source,group\n1,1,x\n1,2,y\n2,1,x\n2,2,x\n";
    let p = read_partition(text.as_bytes(), 2, 2).unwrap();
    assert_eq!(p, PartitionMap::from_labels(&[0, 1, 0, 0]));
    assert!(read_partition("study,source,group\n1,1,1\n".as_bytes(), 1, 2).is_err());
    assert!(read_partition("study,source,group\n1,1,1\n1,1,2\n".as_bytes(), 1, 1).is_err());
}

#[test]
fn golden_partition_from_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config(dir.path());
    let manifest = cmd_fit(&fixture("small_logistic.csv"), &cfg).unwrap();
    assert_eq!(verify_artifacts(dir.path()).unwrap(), manifest);
    let body = load_artifact(dir.path(), "partition.csv").unwrap();
    let golden = fs::read_to_string(fixture("small_logistic_partition.csv")).unwrap();
    assert_eq!(body, golden);
    let truth = design(&fs::read_to_string(fixture("small_logistic.toml")).unwrap()).true_partition();
    assert_eq!(read_partition(golden.as_bytes(), 2, 3).unwrap(), truth);
    let estimates = load_artifact(dir.path(), "estimates.csv").unwrap();
    assert_eq!(estimates.lines().count(), 1 + 2 * 2);
}

#[test]
fn fit_is_byte_identical_on_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = cmd_fit(&fixture("small_logistic.csv"), &fixture_config(a.path())).unwrap();
    let mb = cmd_fit(&fixture("small_logistic.csv"), &fixture_config(b.path())).unwrap();
    assert_eq!(ma, mb);
    for f in ["manifest.json", "path.csv", "partition.csv", "estimates.csv", "heterogeneous.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn tampering_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    cmd_path(&fixture("small_logistic.csv"), &fixture_config(dir.path())).unwrap();
    let p = dir.path().join("path.csv");
    let mut text = fs::read_to_string(&p).unwrap();
    text.push_str("extra\n");
    fs::write(&p, text).unwrap();
    assert!(matches!(verify_artifacts(dir.path()), Err(FusionError::Artifact(_))));
    assert!(load_artifact(dir.path(), "path.csv").is_err());
}

#[test]
fn zero_grid_fit_matches_heterogeneous() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(&dir.path().join("fit"));
    cfg.lambdas = vec![0.0];
    cmd_fit(&fixture("small_logistic.csv"), &cfg).unwrap();
    let part = load_artifact(&cfg.output_dir, "partition.csv").unwrap();
    assert_eq!(read_partition(part.as_bytes(), 2, 3).unwrap(), PartitionMap::singletons(6));

    let mut het_cfg = cfg.clone();
    het_cfg.output_dir = dir.path().join("het");
    cmd_het(&fixture("small_logistic.csv"), &het_cfg).unwrap();
    let fused = load_artifact(&cfg.output_dir, "estimates.csv").unwrap();
    let het = load_artifact(&het_cfg.output_dir, "heterogeneous.csv").unwrap();
    let col = |text: &str, c: usize| -> Vec<f64> {
        text.lines().skip(1).map(|l| l.split(',').nth(c).unwrap().parse().unwrap()).collect()
    };
    for (a, b) in col(&fused, 2).iter().zip(col(&het, 3)) {
        assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn oracle_command_uses_given_partition() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture_config(dir.path());
    cmd_oracle(&fixture("small_logistic.csv"), &fixture("small_logistic_partition.csv"), &cfg).unwrap();
    let m = verify_artifacts(dir.path()).unwrap();
    assert_eq!(m.inputs.len(), 2);
    let est = load_artifact(dir.path(), "estimates.csv").unwrap();
    assert_eq!(est.lines().count(), 5);
}

fn run(args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    if let Some(t) = threads {
        cmd.env("QIF_FUSION_THREADS", t);
    }
    cmd.output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let data = fixture("small_logistic.csv");
    let cfg = fixture("small_logistic_run.toml");
    let (data, cfg, out) = (data.to_str().unwrap(), cfg.to_str().unwrap(), out.to_str().unwrap());

    assert_eq!(run(&["--help"], None).status.code(), Some(0));
    assert_eq!(run(&["fit", "--bogus"], None).status.code(), Some(1));
    assert_eq!(run(&["fit", "--data", "/nonexistent.csv", "--config", cfg], None).status.code(), Some(1));
    assert_eq!(run(&["fit", "--data", data, "--config", cfg, "--delta", "0.5", "--out", out], None).status.code(), Some(1));
    assert_eq!(run(&["het", "--data", data, "--link", "logit", "--lambdas", "0", "--ci-level", "1.5", "--out", out], None).status.code(), Some(1));

    let ok = run(&["path", "--data", data, "--config", cfg, "--lambdas", "0.2,0.5", "--out", out], None);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let digest = String::from_utf8(ok.stdout).unwrap();
    assert_eq!(digest.trim(), verify_artifacts(Path::new(out)).unwrap().digest);

    let stalled = run(&["path", "--data", data, "--config", cfg, "--max-iter", "1", "--out", out], None);
    assert_eq!(stalled.status.code(), Some(2));
}

const GATED: &str = r#"
name = "gated"
link = "log-poisson"
m = [4, 4]
n = [200]
partition = [[0, 0]]
theta = [[0.2, -0.3]]
lambdas = [0.1, 0.3]
replicates = 2
seed = 5
compare_heterogeneous = true

[admm]
rho = 2.0

[gate]
min_recovery = 0.0
"#;

#[test]
fn simulate_gate_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let pass = dir.path().join("pass.toml");
    fs::write(&pass, GATED).unwrap();
    let fail = dir.path().join("fail.toml");
    fs::write(&fail, GATED.replace("min_recovery = 0.0", "min_rmse_ratio = 1000.0")).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = run(&["simulate", "--design", pass.to_str().unwrap(), "--out", out.to_str().unwrap(), "--gate"], Some("1"));
        assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["manifest.json", "metrics.csv", "replicates.csv"] {
        assert_eq!(fs::read(out_a.join(f)).unwrap(), fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    verify_artifacts(&out_a).unwrap();

    let r = run(&["simulate", "--design", fail.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap(), "--gate"], Some("1"));
    assert_eq!(r.status.code(), Some(3));
    let r = run(&["simulate", "--design", fail.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()], Some("1"));
    assert_eq!(r.status.code(), Some(0));
}
