//! Theory lab: closed forms, Monte-Carlo checks and the live-model ordering.

use dcr_core::config::RunConfig;
use dcr_core::data::make_synthetic_task;
use dcr_core::gates::draw_gumbel_gate;
use dcr_core::harness::make_teacher;
use dcr_core::rng::stream;
use dcr_core::theory::{
    curvature_bias_check, curvature_suite, empirical_gate_variance, hard_gate_variance_check,
    loss_path_check, make_snapshot, probe_batches, soft_gate_check, soft_gate_variance_closed_form,
    theseus_variance_closed_form, trace_variance, CurvatureProbe, GateKind, GradFamily, PathProbe,
    Psi,
};
use proptest::prelude::*;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn closed_form_examples() {
    // a fixed vector: only the gate varies
    let a = [3.0, 4.0];
    let v = theseus_variance_closed_form(0.2, &a, 0.0).unwrap();
    assert!((v - 0.2 * 0.8 * 25.0).abs() < 1e-12);
    assert_eq!(theseus_variance_closed_form(1.0, &a, 2.0).unwrap(), 2.0);
    assert_eq!(theseus_variance_closed_form(0.0, &a, 2.0).unwrap(), 0.0);
    // the soft form with Var(r) = p(1-p) and no spread in a reduces to the hard one
    let s = soft_gate_variance_closed_form(0.2, 0.16, 25.0, 0.0).unwrap();
    assert!((s - v).abs() < 1e-12);
    assert!(theseus_variance_closed_form(0.5, &a, -1.0).is_err());
    assert!(soft_gate_variance_closed_form(0.5, -0.1, 1.0, 1.0).is_err());
}

#[test]
fn trace_variance_of_a_known_sample() {
    let xs = vec![vec![0.0, 1.0], vec![2.0, 1.0], vec![4.0, 1.0]];
    // unbiased variance of 0, 2, 4 is 4, the constant coordinate adds 0
    assert!((trace_variance(&xs).value - 4.0).abs() < 1e-12);
}

#[test]
fn hard_gate_variance_matches_for_every_family() {
    for family in GradFamily::ALL {
        for p in [0.1, 0.5, 0.9] {
            let c = hard_gate_variance_check(family, p, 40_000, 3).unwrap();
            assert!(c.pass, "{} z={:.2}", c.label, c.z());
        }
    }
}

#[test]
fn soft_gate_excess_matches_and_orders() {
    let (rows, monotone) = soft_gate_check(&[0.1, 0.5, 1.0, 2.0], 40_000, 5).unwrap();
    assert!(monotone);
    for r in &rows {
        assert!(r.excess.pass, "tau {} z={:.2}", r.tau, r.excess.z());
        assert!(r.var_r < 0.25);
    }
    // hotter gates are less noisy
    assert!(rows.windows(2).all(|w| w[0].var_r > w[1].var_r));
}

#[test]
fn isotropic_quadratic_meets_the_curvature_bound_with_equality() {
    let c = 1.7;
    let probe = CurvatureProbe {
        psi: Psi::Quadratic {
            a: vec![c, 0.0, 0.0, 0.0, c, 0.0, 0.0, 0.0, c],
            b: vec![0.3, -0.2, 1.0],
        },
        t: vec![1.0, 2.0, -1.0],
        s: vec![-0.5, 0.0, 2.0],
        p: 0.35,
        m: c,
    };
    let o = curvature_bias_check(&probe, 10).unwrap();
    let d2 = norm(&probe.delta()).powi(2);
    let want = 0.5 * c * 0.35 * 0.65 * d2;
    assert!((o.bias - want).abs() < 1e-12, "{} vs {want}", o.bias);
    assert!((o.bound - want).abs() < 1e-12);
    assert!(o.holds);
    assert_eq!(o.dcr_bias, 0.0);
}

#[test]
fn linear_psi_has_no_bias() {
    let probe = CurvatureProbe::with_sampled_bound(
        Psi::Linear { b: vec![1.0, -3.0] },
        vec![0.5, 1.0],
        vec![2.0, -2.0],
        0.4,
        20,
    );
    let o = curvature_bias_check(&probe, 20).unwrap();
    assert_eq!(probe.m, 0.0);
    assert!(o.bias < 1e-15);
    assert!(o.holds);
}

#[test]
fn curvature_suite_has_no_violations() {
    let s = curvature_suite(20, 11).unwrap();
    assert_eq!(s.probes, 60);
    assert_eq!(s.violations, 0);
    assert!(s.worst_ratio <= 1.0);
    assert!(s.isotropic_gap <= 1e-12);
    assert_eq!(s.max_dcr_bias, 0.0);
}

#[test]
fn loss_path_bound_and_a_violated_one() {
    let f = |y: &[f64]| Ok(norm(y));
    let t = vec![1.0, 0.0, 2.0];
    let s = vec![-2.0, 1.0, 0.0];
    let d = norm(&[3.0, -1.0, 2.0]);
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let ok = PathProbe {
        t: t.clone(),
        s: s.clone(),
        lipschitz: 1.0,
        d_bound: d,
    };
    assert!(loss_path_check(&ok, &f, &grid).unwrap() <= 0.0);
    let bad = PathProbe {
        lipschitz: 0.01,
        ..ok
    };
    assert!(loss_path_check(&bad, &f, &grid).unwrap() > 0.0);
    assert!(loss_path_check(&bad, &f, &[1.5]).is_err());
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("model.depth", "3"),
        ("model.width", "8"),
        ("model.heads", "2"),
        ("model.mlp_hidden", "8"),
        ("model.seq_len", "6"),
        ("model.num_classes", "3"),
        ("model.replaced", "1,2"),
        ("task.train_size", "128"),
        ("task.val_size", "32"),
        ("teacher.epochs", "4"),
        ("teacher.batch_size", "16"),
        ("batch_size", "16"),
        ("theory.snapshot_epochs", "1"),
        ("theory.site", "1"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn live_gate_variance_orders_theseus_gumbel_dcr() {
    let cfg = tiny();
    let teacher = make_teacher(&cfg).unwrap().backbone;
    let snap = make_snapshot(&cfg, &teacher).unwrap();
    let (train, _) = make_synthetic_task(&cfg.task).unwrap();
    let batches = probe_batches(&train, 4, 16, 2);
    let mut rng = stream(9, &[1]);
    // a hot gate keeps Var(r) far below the Bernoulli p(1-p)
    let tau = 10.0;
    for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let r: Vec<Vec<f64>> = (0..4000)
            .map(|_| vec![draw_gumbel_gate(p, tau, &mut rng).unwrap()])
            .collect();
        assert!(trace_variance(&r).value < 0.05 * p * (1.0 - p), "p={p}");
        let run = |gate, rng: &mut _| {
            empirical_gate_variance(&snap, gate, p, &batches, 24, rng)
                .unwrap()
                .gate_induced
        };
        let theseus = run(GateKind::Bernoulli, &mut rng);
        let gumbel = run(GateKind::Gumbel { tau }, &mut rng);
        let dcr = run(GateKind::Dcr, &mut rng);
        assert_eq!(dcr, 0.0, "p={p}");
        assert!(gumbel > 0.0, "p={p}");
        assert!(theseus >= gumbel, "p={p}: {theseus} < {gumbel}");
    }
}

#[test]
fn gumbel_at_the_endpoints_is_deterministic() {
    let cfg = tiny();
    let teacher = make_teacher(&cfg).unwrap().backbone;
    let snap = make_snapshot(&cfg, &teacher).unwrap();
    let (train, _) = make_synthetic_task(&cfg.task).unwrap();
    let batches = probe_batches(&train, 2, 8, 4);
    let mut rng = stream(1, &[2]);
    for p in [0.0, 1.0] {
        for gate in [GateKind::Bernoulli, GateKind::Gumbel { tau: 1.0 }] {
            let r = empirical_gate_variance(&snap, gate, p, &batches, 4, &mut rng).unwrap();
            assert_eq!(r.gate_induced, 0.0);
            assert_eq!(r.closed_form, 0.0);
        }
    }
    assert!(
        empirical_gate_variance(&snap, GateKind::Bernoulli, 0.5, &batches, 1, &mut rng).is_err()
    );
}

proptest! {
    #[test]
    fn hard_gate_closed_form_dominates_the_blend(
        p in 0.0f64..=1.0,
        m in prop::collection::vec(-5.0f64..5.0, 1..6),
        var_a in 0.0f64..10.0,
    ) {
        let v = theseus_variance_closed_form(p, &m, var_a).unwrap();
        prop_assert!(v >= p * p * var_a - 1e-12);
    }

    #[test]
    fn random_quadratics_respect_the_curvature_bound(
        raw in prop::collection::vec(-2.0f64..2.0, 9),
        t in prop::collection::vec(-3.0f64..3.0, 3),
        s in prop::collection::vec(-3.0f64..3.0, 3),
        p in 0.0f64..=1.0,
    ) {
        let a: Vec<f64> = (0..9).map(|k| 0.5 * (raw[k] + raw[(k % 3) * 3 + k / 3])).collect();
        let probe = CurvatureProbe::with_sampled_bound(
            Psi::Quadratic { a, b: vec![0.1, 0.2, 0.3] }, t, s, p, 4,
        );
        prop_assert!(curvature_bias_check(&probe, 4).unwrap().holds);
    }

    #[test]
    fn log_sum_exp_respects_the_curvature_bound(
        t in prop::collection::vec(-4.0f64..4.0, 4),
        s in prop::collection::vec(-4.0f64..4.0, 4),
        p in 0.0f64..=1.0,
    ) {
        let probe = CurvatureProbe::with_sampled_bound(Psi::LogSumExp, t, s, p, 200);
        prop_assert!(curvature_bias_check(&probe, 200).unwrap().holds);
    }
}
