use foogd::federation::{
    aggregate, bound_rhs, client_stream, dirichlet_partition, divergence_diagnostic, epoch_batches, run_rounds,
    size_weights, FederationConfig, Partition,
};
use foogd::models::{init_bundle, Activation, BundleSpec, MlpSpec, ModelBundle};
use foogd::numerics::{sgd_step, RngStream, SgdConfig, SgdState, StreamLabel, Tape, Tensor};
use foogd::sag::{feature_update_step, SagConfig};
use foogd::smd::{score_update_step, LangevinConfig};
use foogd::workbench::data::sample_in;
use foogd::workbench::GeneratorSpec;
use foogd::Error;

fn stream(tag: &str) -> RngStream {
    RngStream::new(11, StreamLabel::new(tag))
}

fn spec() -> BundleSpec {
    BundleSpec {
        feature: MlpSpec::new(&[2, 8, 2], Activation::Tanh),
        head: MlpSpec::new(&[2, 8], Activation::Tanh),
        score: MlpSpec::new(&[3, 8, 2], Activation::Tanh),
    }
}

fn bundle(tag: &str) -> ModelBundle {
    init_bundle(&spec(), &mut stream(tag)).unwrap()
}

fn data(n: usize) -> (Tensor, Vec<usize>) {
    let s = sample_in(&GeneratorSpec::default(), n, &mut stream("data")).unwrap();
    (s.x, s.y)
}

fn small_cfg(clients: usize) -> FederationConfig {
    FederationConfig {
        clients,
        rounds: 2,
        local_epochs: 2,
        batch_size: 16,
        langevin: LangevinConfig {
            steps: 3,
            ..LangevinConfig::default()
        },
        seed: 5,
        threads: Some(1),
        ..FederationConfig::default()
    }
}

#[test]
fn aggregate_matches_anchored_weighted_mean_bitwise() {
    let bs = [bundle("a"), bundle("b"), bundle("c")];
    let w = size_weights(&[10, 30, 60]);
    let refs: Vec<&ModelBundle> = bs.iter().collect();
    let agg = aggregate(&refs, &w).unwrap().flatten();
    let flats: Vec<Vec<f64>> = bs.iter().map(ModelBundle::flatten).collect();
    for (i, &got) in agg.iter().enumerate() {
        let anchor = flats[0][i];
        let mut acc = 0.0;
        for (f, wk) in flats.iter().zip(&w) {
            acc += wk * (f[i] - anchor);
        }
        assert_eq!(got.to_bits(), (anchor + acc).to_bits(), "parameter {i}");
        let plain: f64 = flats.iter().zip(&w).map(|(f, wk)| wk * f[i]).sum();
        assert!((got - plain).abs() <= 1e-12 * (1.0 + plain.abs()));
    }
}

#[test]
fn aggregate_two_point_example() {
    let template = bundle("t");
    let n = template.param_count();
    let a = ModelBundle::unflatten(&vec![1.0; n], &template).unwrap();
    let b = ModelBundle::unflatten(&vec![3.0; n], &template).unwrap();
    let agg = aggregate(&[&a, &b], &[0.25, 0.75]).unwrap();
    assert!(agg.flatten().iter().all(|&v| v == 2.5));
}

#[test]
fn aggregate_of_identical_bundles_is_identity() {
    let b = bundle("same");
    let agg = aggregate(&[&b, &b, &b], &[0.2, 0.3, 0.5]).unwrap();
    assert_eq!(agg, b);
}

#[test]
fn aggregate_rejects_weights_off_simplex() {
    let b = bundle("w");
    assert!(matches!(aggregate(&[&b, &b], &[0.5, 0.6]), Err(Error::Contract(_))));
    assert!(matches!(aggregate(&[&b, &b], &[1.5, -0.5]), Err(Error::Contract(_))));
    assert!(matches!(aggregate(&[], &[]), Err(Error::Empty(_))));
}

#[test]
fn size_weights_are_exact_ratios() {
    let w = size_weights(&[1, 3]);
    assert_eq!(w, vec![0.25, 0.75]);
    let w = size_weights(&[7, 11, 13, 0]);
    assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert_eq!(w[3], 0.0);
}

/// A plain sequential loop over the whole data set with the same streams.
fn centralized(cfg: &FederationConfig, x: &Tensor, y: &[usize], init: &ModelBundle) -> ModelBundle {
    let mut b = init.clone();
    let all: Vec<usize> = (0..x.rows()).collect();
    let sigma = cfg.smd.smallest_sigma();
    for round in 0..cfg.rounds {
        let st = client_stream(cfg.seed, 0, round);
        let (mut ss, mut fs) = (SgdState::default(), SgdState::default());
        let mut step = 0u64;
        for epoch in 0..cfg.local_epochs {
            for batch in epoch_batches(&st, &all, epoch, cfg.batch_size) {
                let s = st.fork("step", step);
                step += 1;
                let xb = x.select_rows(&batch);
                let yb: Vec<usize> = batch.iter().map(|&i| y[i]).collect();
                score_update_step(
                    &mut b,
                    &xb,
                    &mut ss,
                    &cfg.score_sgd,
                    &cfg.smd,
                    &cfg.langevin,
                    &s.fork("smd", 0),
                )
                .unwrap();
                feature_update_step(
                    &mut b,
                    &xb,
                    &yb,
                    &mut fs,
                    &cfg.feature_sgd,
                    &cfg.sag,
                    sigma,
                    &s.fork("sag", 0),
                )
                .unwrap();
            }
        }
    }
    b
}

#[test]
fn single_client_reduces_to_centralized_training_bitwise() {
    let (x, y) = data(80);
    let cfg = small_cfg(1);
    let partition = dirichlet_partition(&y, 8, 1, 0.5, &stream("p")).unwrap();
    let init = bundle("init");
    let (fed, history) = run_rounds(&cfg, &partition, &x, &y, init.clone(), None).unwrap();
    let reference = centralized(&cfg, &x, &y, &init);
    assert_eq!(
        fed.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        reference.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(history.rounds.last().unwrap().checksum, reference.checksum());
}

#[test]
fn cross_entropy_only_step_matches_independent_sgd() {
    let (x, y) = data(32);
    let mut b = bundle("ce");
    let cfg = SagConfig {
        lambda_a: 0.0,
        ..SagConfig::default()
    };
    let sgd = SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 5e-4,
    };
    let mut reference = b.clone();
    let mut st = SgdState::default();
    let mut ref_state = SgdState::default();
    for step in 0..3 {
        feature_update_step(
            &mut b,
            &x,
            &y,
            &mut st,
            &sgd,
            &cfg,
            0.1,
            &stream("ce").fork("step", step),
        )
        .unwrap();

        let tape = Tape::new();
        let f = reference.feature.bind(&tape, true);
        let g = reference.head.bind(&tape, true);
        let loss = g
            .forward(f.forward(tape.constant(x.clone())).unwrap())
            .unwrap()
            .cross_entropy(&y)
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut flat_grad = f.flat_grad(&grads);
        flat_grad.extend(g.flat_grad(&grads));
        let mut params = reference.feature.flat();
        params.extend(reference.head.flat());
        sgd_step(&mut params, &flat_grad, &sgd, &mut ref_state).unwrap();
        let nf = reference.feature.flat().len();
        reference.feature.set_flat(&params[..nf]).unwrap();
        reference.head.set_flat(&params[nf..]).unwrap();
    }
    for (a, r) in b.flatten().iter().zip(reference.flatten()) {
        assert!((a - r).abs() <= 1e-12 * (1.0 + r.abs()), "{a} vs {r}");
    }
}

#[test]
fn history_is_identical_across_thread_counts() {
    let (x, y) = data(120);
    let partition = dirichlet_partition(&y, 8, 4, 0.5, &stream("p4")).unwrap();
    let mut runs = Vec::new();
    for threads in [1, 2, 4] {
        let cfg = FederationConfig {
            threads: Some(threads),
            ..small_cfg(4)
        };
        let (b, h) = run_rounds(&cfg, &partition, &x, &y, bundle("init"), None).unwrap();
        runs.push((b.checksum(), serde_json::to_string(&h).unwrap()));
    }
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn partial_participation_is_deterministic_and_renormalized() {
    let (x, y) = data(120);
    let partition = dirichlet_partition(&y, 8, 5, 1.0, &stream("p5")).unwrap();
    let cfg = FederationConfig {
        participation: 0.6,
        ..small_cfg(5)
    };
    let (a, ha) = run_rounds(&cfg, &partition, &x, &y, bundle("init"), None).unwrap();
    let (b, _) = run_rounds(&cfg, &partition, &x, &y, bundle("init"), None).unwrap();
    assert_eq!(a, b);
    for r in &ha.rounds {
        assert_eq!(r.participants.len(), 3);
        let total: f64 = r.clients.iter().map(|c| c.weight).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn zero_rounds_returns_initial_bundle() {
    let (x, y) = data(40);
    let partition = dirichlet_partition(&y, 8, 2, 0.5, &stream("p0")).unwrap();
    let cfg = FederationConfig {
        rounds: 0,
        ..small_cfg(2)
    };
    let init = bundle("init");
    let (b, h) = run_rounds(&cfg, &partition, &x, &y, init.clone(), None).unwrap();
    assert_eq!(b, init);
    assert!(h.is_empty());
}

#[test]
fn partition_mismatch_is_a_config_error() {
    let (x, y) = data(40);
    let partition = dirichlet_partition(&y, 8, 3, 0.5, &stream("p3")).unwrap();
    let r = run_rounds(&small_cfg(2), &partition, &x, &y, bundle("init"), None);
    assert!(matches!(r, Err(Error::Config { .. })));
}

#[test]
fn divergence_bound_holds_every_round_with_several_local_steps() {
    let (x, y) = data(160);
    let partition = dirichlet_partition(&y, 8, 4, 0.3, &stream("pd")).unwrap();
    let cfg = FederationConfig {
        rounds: 3,
        ..small_cfg(4)
    };
    let (_, h) = run_rounds(&cfg, &partition, &x, &y, bundle("init"), None).unwrap();
    for r in &h.rounds {
        assert!(r.divergence.local_steps >= 2);
        assert!(r.divergence.lhs > 0.0);
        assert!(r.divergence.holds, "{:?}", r.divergence);
    }
    assert!(h.divergence_holds());
}

#[test]
fn divergence_with_a_single_local_step_has_zero_bound() {
    let g = bundle("g");
    let a = bundle("a");
    let d = divergence_diagnostic(&g, &[&a, &g], &[0.5, 0.5], 0.1, 1, 3.0).unwrap();
    assert_eq!(d.rhs, 0.0);
    assert!(d.lhs > 0.0);
    assert!(!d.holds);
    let same = divergence_diagnostic(&g, &[&g], &[1.0], 0.1, 1, 3.0).unwrap();
    assert!(same.holds);
    let d = divergence_diagnostic(&g, &[&a], &[1.0], 0.5, 3, 2.0).unwrap();
    assert_eq!(d.rhs, 4.0 * 0.25 * 4.0 * 4.0);
}

#[test]
fn bound_rhs_examples() {
    assert_eq!(bound_rhs(2, 1.0, 64, 1000, 0.0), 0.0);
    assert_eq!(bound_rhs(2, 0.5, 10, 100, 0.5), 8.0 - 2.0 + 5.0);
}

#[test]
fn partition_is_a_set_partition() {
    let (_, y) = data(500);
    let p: Partition = dirichlet_partition(&y, 8, 6, 0.1, &stream("sp")).unwrap();
    let mut all: Vec<usize> = p.clients.concat();
    all.sort_unstable();
    assert_eq!(all, (0..500).collect::<Vec<_>>());
    p.validate(500).unwrap();
}
