use super::*;
use crate::compress::Partition;
use crate::linalg::{max_rel_dev, mean_of};
use crate::objectives::make_quadratic_problem;

fn hp(s: usize) -> HyperParams {
    HyperParams {
        eta_l: 0.05,
        eta_g: 1.0,
        local_steps: 5,
        sampled_clients: s,
        rounds: 10,
        batch_size: 4,
    }
}

fn run(
    spec: &AlgorithmSpec,
    problem: &FederatedProblem,
    hp: &HyperParams,
    rounds: usize,
    parallel: bool,
) -> (ServerState, Vec<ClientState>, Vec<UplinkReport>) {
    let ctx = RoundContext {
        problem,
        hp,
        seed: 11,
        parallel,
    };
    let (mut server, mut states) = init_states(spec, problem, ControlInit::Zero, 11).unwrap();
    let mut reports = Vec::new();
    for _ in 0..rounds {
        let out = run_round(spec, &ctx, server, states).unwrap();
        server = out.server;
        states = out.states;
        reports.push(out.report);
    }
    (server, states, reports)
}

fn problem(sigma: f64) -> FederatedProblem {
    make_quadratic_problem(6, 5, 2.0, sigma, 3).unwrap()
}

#[test]
fn scafcom_beta_one_identity_is_scaffold() {
    let p = problem(0.5);
    let h = hp(3);
    let (a, sa, _) = run(&AlgorithmSpec::ScaffoldSingle, &p, &h, 6, false);
    let spec = AlgorithmSpec::Scafcom {
        compressor: CompressorSpec::Identity,
        beta: 1.0,
    };
    let (b, sb, _) = run(&spec, &p, &h, 6, false);
    assert_eq!(a.x, b.x);
    assert_eq!(a.c, b.c);
    for (x, y) in sa.iter().zip(&sb) {
        assert_eq!(x.c, y.c);
    }
}

#[test]
fn scallion_alpha_one_identity_is_scaffold() {
    let p = problem(0.5);
    let h = hp(2);
    let (a, _, ra) = run(&AlgorithmSpec::ScaffoldSingle, &p, &h, 5, false);
    let spec = AlgorithmSpec::Scallion {
        compressor: CompressorSpec::Identity,
        alpha: 1.0,
    };
    let (b, _, rb) = run(&spec, &p, &h, 5, false);
    assert_eq!(a.x, b.x);
    assert_eq!(ra, rb);
}

#[test]
fn formulations_agree() {
    for s in [6, 3] {
        let p = problem(0.3);
        let h = hp(s);
        let (a, sa, ra) = run(&AlgorithmSpec::ScaffoldSingle, &p, &h, 8, false);
        let (b, sb, rb) = run(&AlgorithmSpec::ScaffoldOriginal, &p, &h, 8, false);
        assert!(max_rel_dev(&a.x, &b.x) < 1e-10, "x differs for S={s}");
        assert!(max_rel_dev(&a.c, &b.c) < 1e-10);
        for (x, y) in sa.iter().zip(&sb) {
            assert!(max_rel_dev(&x.c, &y.c) < 1e-10);
        }
        let d = p.dim();
        assert_eq!(ra[0].uplink_bytes, s * (4 + 4 * d));
        assert_eq!(rb[0].uplink_bytes, 2 * s * (4 + 4 * d));
        assert_eq!(ra[0].participants, rb[0].participants);
    }
}

#[test]
fn one_local_step_full_participation_is_gradient_descent() {
    let p = problem(0.0);
    let h = HyperParams {
        eta_l: 0.1,
        eta_g: 1.0,
        local_steps: 1,
        sampled_clients: 6,
        rounds: 4,
        batch_size: 1,
    };
    let (server, _, _) = run(&AlgorithmSpec::ScaffoldSingle, &p, &h, 4, false);
    let mut x = p.x0().to_vec();
    for _ in 0..4 {
        let g = p.gradient(&x).unwrap();
        crate::linalg::axpy(-0.1, &g, &mut x);
    }
    assert!(max_rel_dev(&server.x, &x) < 1e-12);
}

#[test]
fn non_participants_keep_their_state() {
    let p = problem(0.5);
    let h = hp(2);
    let spec = AlgorithmSpec::Scafcom {
        compressor: CompressorSpec::TopR { r: 0.4 },
        beta: 0.3,
    };
    let (server, states) = init_states(&spec, &p, ControlInit::Minibatch { samples: 3 }, 5).unwrap();
    let ctx = RoundContext {
        problem: &p,
        hp: &h,
        seed: 5,
        parallel: false,
    };
    let before = states.clone();
    let out = run_round(&spec, &ctx, server, states).unwrap();
    for (i, (after, was)) in out.states.iter().zip(&before).enumerate() {
        if out.report.participants.contains(&i) {
            assert_ne!(after, was);
        } else {
            assert_eq!(after, was);
        }
    }
}

#[test]
fn global_control_tracks_client_mean() {
    let p = problem(0.5);
    let h = hp(3);
    let specs = [
        AlgorithmSpec::Scallion {
            compressor: CompressorSpec::RandomSparsify { s: 2 },
            alpha: 0.25,
        },
        AlgorithmSpec::Scafcom {
            compressor: CompressorSpec::GroupedSign {
                partition: Partition::contiguous(5, 2).unwrap(),
            },
            beta: 0.5,
        },
        AlgorithmSpec::ScaffoldOriginal,
    ];
    for spec in &specs {
        let (server, states, _) = run(spec, &p, &h, 12, false);
        let mean = mean_of(states.iter().map(|s| s.c.as_slice()), p.dim());
        for (a, b) in server.c.iter().zip(&mean) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{}", spec.name());
        }
    }
}

#[test]
fn control_anchored_momentum_is_scallion() {
    let p = problem(0.5);
    let h = hp(3);
    let comp = CompressorSpec::TopR { r: 0.4 };
    let ctx = RoundContext {
        problem: &p,
        hp: &h,
        seed: 9,
        parallel: false,
    };
    let scafcom = AlgorithmSpec::Scafcom {
        compressor: comp.clone(),
        beta: 0.3,
    };
    let (mut s1, mut st1) = init_states(&scafcom, &p, ControlInit::Zero, 9).unwrap();
    let (mut s2, mut st2) = (s1.clone(), st1.clone());
    for _ in 0..5 {
        let a = scafcom_with_anchor(&ctx, s1, st1, &comp, 0.3, Anchor::Control).unwrap();
        let rule = Increment::Scaled {
            compressor: &comp,
            alpha: 0.3,
        };
        let b = controlled_round(&ctx, s2, st2, rule).unwrap();
        assert_eq!(a.server.x, b.server.x);
        assert_eq!(a.report.uplink_bytes, b.report.uplink_bytes);
        (s1, st1) = (a.server, a.states);
        (s2, st2) = (b.server, b.states);
    }
    for (a, b) in st1.iter().zip(&st2) {
        assert_eq!(a.c, b.c);
    }
}

#[test]
fn compression_does_not_perturb_minibatches() {
    let p = problem(1.0);
    let h = hp(4);
    let plain = AlgorithmSpec::Scallion {
        compressor: CompressorSpec::Identity,
        alpha: 1.0,
    };
    let sparse = AlgorithmSpec::Scallion {
        compressor: CompressorSpec::RandomSparsify { s: 1 },
        alpha: 1.0,
    };
    let (_, _, ra) = run(&plain, &p, &h, 1, false);
    let (_, _, rb) = run(&sparse, &p, &h, 1, false);
    assert_eq!(ra[0].participants, rb[0].participants);
    for (a, b) in ra[0].clients.iter().zip(&rb[0].clients) {
        assert_eq!(a.payload_norm, b.payload_norm);
    }
    assert!(rb[0].uplink_bytes < ra[0].uplink_bytes);
}

#[test]
fn parallel_matches_sequential() {
    let p = problem(0.7);
    let h = hp(4);
    for spec in [
        AlgorithmSpec::FedAvg,
        AlgorithmSpec::ScaffoldOriginal,
        AlgorithmSpec::Scafcom {
            compressor: CompressorSpec::scaled(CompressorSpec::RandomDither { bits: 2 }),
            beta: 0.2,
        },
    ] {
        let (a, sa, ra) = run(&spec, &p, &h, 5, false);
        let (b, sb, rb) = run(&spec, &p, &h, 5, true);
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(ra, rb);
    }
}

#[test]
fn fedavg_byte_accounting() {
    let p = problem(0.0);
    let (server, states, reports) = run(&AlgorithmSpec::FedAvg, &p, &hp(2), 3, false);
    assert!(states.is_empty());
    assert_eq!(server.t, 3);
    let dense = 4 + 4 * p.dim();
    assert_eq!(reports[0].uplink_bytes, 2 * dense);
    assert_eq!(reports[0].downlink_bytes, 2 * dense);
}

#[test]
fn rejects_mismatched_compressors() {
    let spec = AlgorithmSpec::Scallion {
        compressor: CompressorSpec::TopR { r: 0.5 },
        alpha: 0.5,
    };
    assert!(matches!(spec.validate(10), Err(Error::Config { .. })));
    let spec = AlgorithmSpec::Scafcom {
        compressor: CompressorSpec::RandomSparsify { s: 2 },
        beta: 0.5,
    };
    assert!(matches!(spec.validate(10), Err(Error::Config { .. })));
    let spec = AlgorithmSpec::Scafcom {
        compressor: CompressorSpec::Identity,
        beta: 0.0,
    };
    assert!(matches!(spec.validate(10), Err(Error::Config { key, .. }) if key == "algorithm.beta"));
    assert!(hp(7).validate(6).is_err());
}

#[test]
fn minibatch_init_sets_momentum_to_control() {
    let p = problem(1.0);
    let spec = AlgorithmSpec::Scafcom {
        compressor: CompressorSpec::Identity,
        beta: 0.5,
    };
    let (server, states) = init_states(&spec, &p, ControlInit::Minibatch { samples: 4 }, 1).unwrap();
    for s in &states {
        assert_eq!(s.v.as_ref(), Some(&s.c));
        assert!(s.c.iter().any(|v| *v != 0.0));
    }
    let mean = mean_of(states.iter().map(|s| s.c.as_slice()), p.dim());
    assert_eq!(server.c, mean);
}
