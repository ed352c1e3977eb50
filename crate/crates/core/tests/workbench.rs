use foogd::workbench::csv_io::{load_csv, save_csv};
use foogd::workbench::experiment::Metrics;
use foogd::workbench::toy::{run_toy2d, toy_fit, ToyConfig};
use foogd::workbench::{run_experiment, run_experiment_file, ExperimentConfig, GeneratorSpec, Overrides};
use foogd::Error;

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed: 9,
        ..ExperimentConfig::default()
    };
    c.dataset.train_size = 160;
    c.dataset.test_size = 80;
    c.dataset.out_size = 40;
    c.federation.clients = 3;
    c.federation.rounds = 2;
    c.federation.local_epochs = 1;
    c.federation.batch_size = 32;
    c.models.feature_hidden = vec![8];
    c.models.score_hidden = vec![8];
    c.smd.langevin.steps = 4;
    c.detection.bound_rounds = 1;
    c.detection.bound_samples = 128;
    c
}

fn metrics_json(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&run_experiment(cfg).unwrap().metrics).unwrap()
}

#[test]
fn metrics_are_identical_across_runs_and_thread_counts() {
    let mut cfg = tiny();
    cfg.federation.threads = Some(1);
    let a = metrics_json(&cfg);
    assert_eq!(a, metrics_json(&cfg));
    cfg.federation.threads = Some(3);
    let b = metrics_json(&cfg);
    // the echoed config differs only in the thread count
    let strip = |s: &str| {
        let mut v: serde_json::Value = serde_json::from_str(s).unwrap();
        v["config_echo"]["federation"]["threads"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn zero_rounds_still_produce_valid_metrics() {
    let mut cfg = tiny();
    cfg.federation.rounds = 0;
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.metrics.rounds, 0);
    assert!(out.history.is_empty());
    let text = serde_json::to_string_pretty(&out.metrics).unwrap();
    let back: Metrics = serde_json::from_str(&text).unwrap();
    assert_eq!(back, out.metrics);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in [
        "schema_version",
        "config_echo",
        "rounds",
        "acc_in",
        "acc_inc",
        "auroc",
        "fpr95",
        "msp_auroc",
        "msp_fpr95",
        "divergence",
        "bound_report",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!((0.0..=1.0).contains(&out.metrics.auroc));
}

#[test]
fn metrics_record_divergence_and_bound() {
    let out = run_experiment(&tiny()).unwrap();
    let m = &out.metrics;
    assert_eq!(m.divergence.per_round.len(), 2);
    assert!(m.bound_report.is_some());
    assert_eq!(m.model_checksum, out.bundle.checksum());
    let w: f64 = m.per_client.iter().map(|c| c.weight).sum();
    assert!((w - 1.0).abs() < 1e-12);
}

#[test]
fn config_file_round_trip_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.output.dir = dir.path().join("ignored");
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let reparsed = ExperimentConfig::load(&path).unwrap();
    assert_eq!(reparsed, cfg);
    let out_dir = dir.path().join("run");
    let overrides = Overrides {
        seed: Some(4),
        lambda_m: Some(0.25),
        lambda_a: Some(0.0),
        out: Some(out_dir.clone()),
    };
    let (outcome, files) = run_experiment_file(&path, &overrides).unwrap();
    assert_eq!(outcome.metrics.config_echo.seed, 4);
    assert_eq!(outcome.metrics.config_echo.smd.lambda_m, 0.25);
    for name in ["metrics.json", "history.json", "checkpoint.json", "points.csv"] {
        assert!(out_dir.join(name).exists(), "{name} missing");
    }
    assert!(files.iter().all(|f| f.starts_with(&out_dir)));
    assert!(!dir.path().join("ignored").exists());
}

fn config_error(text: &str) -> (String, String) {
    match ExperimentConfig::from_toml_str(text, "test.toml").and_then(|c| c.validate().map(|_| c)) {
        Err(Error::Config { path, msg }) => (path, msg),
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn invalid_values_name_their_field() {
    let cases = [
        ("[federation]\nclients = 0\n", "federation.clients"),
        ("[federation]\nparticipation = 1.5\n", "federation.participation"),
        ("[federation]\nalpha = -1.0\n", "federation.alpha"),
        ("[federation.score_sgd]\nlr = -0.1\n", "federation.score_sgd.lr"),
        ("[smd]\nlambda_m = 1.5\n", "smd.lambda_m"),
        ("[smd.langevin]\nsigma = 0.0\n", "smd.langevin.sigma"),
        ("[sag]\nlambda_a = -0.05\n", "sag.lambda_a"),
        ("[dataset.shift]\nseverity = 9\n", "dataset.shift.severity"),
        ("[models]\nlatent_dim = 3\n", "output.plots"),
    ];
    for (text, want) in cases {
        let (path, _) = config_error(text);
        assert_eq!(path, want, "for {text:?}");
    }
}

#[test]
fn parse_errors_carry_origin_and_line() {
    let (path, msg) = config_error("seed = 1\n\n[federation]\nroundz = 3\n");
    assert_eq!(path, "test.toml:4");
    assert!(msg.contains("roundz"), "{msg}");
}

#[test]
fn csv_generator_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = foogd::numerics::RngStream::new(1, foogd::numerics::StreamLabel::new("csv"));
    let spec = GeneratorSpec::default();
    let train = foogd::workbench::data::sample_in(&spec, 120, &mut rng).unwrap();
    let test = foogd::workbench::data::sample_in(&spec, 60, &mut rng).unwrap();
    let out = foogd::workbench::data::sample_out(&spec, 30, &mut rng).unwrap();
    let p = |n: &str| dir.path().join(n);
    save_csv(&p("train.csv"), &train.x, Some(&train.y)).unwrap();
    save_csv(&p("test.csv"), &test.x, Some(&test.y)).unwrap();
    save_csv(&p("out.csv"), &out, None).unwrap();
    let (x, y) = load_csv(&p("train.csv"), true).unwrap();
    assert_eq!(x, train.x);
    assert_eq!(y.unwrap(), train.y);

    let mut cfg = tiny();
    cfg.dataset.generator = GeneratorSpec::Csv {
        train: p("train.csv"),
        test: p("test.csv"),
        out: p("out.csv"),
    };
    let m = run_experiment(&cfg).unwrap().metrics;
    assert!((0.0..=1.0).contains(&m.acc_in));
}

#[test]
fn malformed_csv_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "x0,x1,label\n0.5,1.0,2\n0.1,oops,1\n").unwrap();
    match load_csv(&path, true) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

fn tiny_toy() -> ToyConfig {
    ToyConfig {
        train_size: 96,
        heldout_size: 64,
        samples: 64,
        lambda_ms: vec![0.0, 1.0],
        seeds: vec![3, 4, 5],
        rounds: 2,
        score_hidden: vec![8],
        ..ToyConfig::default()
    }
}

#[test]
fn toy_sweep_reports_a_median_per_lambda_and_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_toy();
    let (report, files) = run_toy2d(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.runs.len(), 6);
    for l in [0.0, 1.0] {
        let mut mmds: Vec<f64> = report.runs.iter().filter(|r| r.lambda_m == l).map(|r| r.mmd).collect();
        mmds.sort_by(f64::total_cmp);
        assert_eq!(report.median_for(l), Some(mmds[1]));
    }
    assert!(report
        .runs
        .iter()
        .all(|r| r.mmd.is_finite() && r.mmd >= 0.0 && r.bandwidth > 0.0));
    assert!(dir.path().join("toy.json").exists());
    assert!(dir.path().join("lambda_0/field.csv").exists());
    assert!(files.iter().all(|f| f.exists()));
}

#[test]
fn toy_fits_are_paired_across_lambda_and_reproducible() {
    let cfg = tiny_toy();
    let a = toy_fit(&cfg, 0.0, 7).unwrap();
    let b = toy_fit(&cfg, 1.0, 7).unwrap();
    assert_eq!(a.heldout, b.heldout);
    assert_eq!(a.target, b.target);
    let again = toy_fit(&cfg, 1.0, 7).unwrap();
    assert_eq!(b.generated, again.generated);
    assert_eq!(b.run.mmd.to_bits(), again.run.mmd.to_bits());
}

#[test]
fn toy_config_rejects_out_of_range_lambda() {
    let cfg = ToyConfig {
        lambda_ms: vec![1.5],
        ..tiny_toy()
    };
    assert!(matches!(run_toy2d(&cfg, None), Err(Error::Config { .. })));
}
