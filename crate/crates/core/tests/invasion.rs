mod common;

use kolmo_core::invasion::{
    closed_form_estimate, closed_form_lambda, estimate_lambda, lyapunov_exponent, InvasionError, LyapunovOptions,
    Method,
};
use kolmo_core::model::zoo::{LotkaVolterraParams, NoiseInput, ReplicatorParams};
use kolmo_core::model::{Face, ZooParams};
use kolmo_core::sdde::SimConfig;

fn long_run() -> SimConfig {
    SimConfig::new(1.0e4, 31).with_replicates(16)
}

fn agrees(p: &ZooParams, face: Face, species: usize) -> (f64, f64, f64) {
    let model = common::build(p);
    let exact = closed_form_lambda(&model, face, species).expect("closed form");
    let est = estimate_lambda(&model, face, species, &long_run()).unwrap();
    let se = est.se.expect("enough batches");
    assert!(
        (est.lambda - exact).abs() <= 4.0 * se + 1e-9 * exact.abs().max(1.0),
        "{} {} -> {}: {} ± {se} vs {exact}",
        model.name(),
        est.face_label,
        est.species_name,
        est.lambda
    );
    assert!(!est.flags.wrong_ergodic_measure && !est.flags.suspected_multiple_measures);
    (est.lambda, se, exact)
}

#[test]
fn competitive_boundary_rate() {
    agrees(&common::lv_identity(), Face::single(0), 1);
}

#[test]
fn predator_prey_prey_face_rates() {
    let p = common::predator_prey();
    agrees(&p, Face::single(0), 1);
    agrees(&p, Face::single(0), 2);
}

#[test]
fn sir_endemic_rate() {
    // -b2 - σ22/2 + a(c1 + c2)/b1 = -1 - 0.5 + 2
    let p = common::sir((1.0, 1.0), [0.5, 1.0]);
    let (_, _, exact) = agrees(&p, Face::single(0), 1);
    assert!(common::close(exact, 0.5, 1e-12));
}

#[test]
fn replicator_vertex_and_edge_rates() {
    let p = common::replicator3();
    let (_, _, vertex) = agrees(&p, Face::single(1), 2);
    // f(0, X, 0) = (1, 0, 2)
    assert!(common::close(vertex, 2.0 - 0.0 - (0.09 + 0.01) / 2.0, 1e-12));
    agrees(&p, Face::from_indices([1, 2]), 0);
}

#[test]
fn two_strategy_vertex_rates() {
    let p = common::replicator2([[1.0, 3.0], [0.5, 2.0]], [0.2, 0.4]);
    let model = common::build(&p);
    // λ1(δ2) = f1(0, X) - f2(0, X) - (σ1² + σ2²)/2
    let l12 = closed_form_lambda(&model, Face::single(1), 0).unwrap();
    assert!(common::close(l12, 3.0 - 2.0 - 0.1, 1e-12));
    let l21 = closed_form_lambda(&model, Face::single(0), 1).unwrap();
    assert!(common::close(l21, 0.5 - 1.0 - 0.1, 1e-12));
}

#[test]
fn origin_rates_are_exact() {
    for (p, i, want) in [
        (common::lv_boundary(), 1usize, 1.5 - 0.5),
        (common::sir_extinct(), 1, -1.0 - 0.5),
        (common::predator_prey(), 2, -0.3 - 0.1),
    ] {
        let model = common::build(&p);
        let exact = closed_form_lambda(&model, Face::empty(), i).unwrap();
        assert!(common::close(exact, want, 1e-12));
        let est = estimate_lambda(&model, Face::empty(), i, &SimConfig::new(100.0, 1)).unwrap();
        assert!(common::close(est.lambda, want, 1e-12), "{} vs {want}", est.lambda);
        // no noise enters the rate at the origin, only rounding
        assert!(est.se.unwrap() <= 1e-12, "{est:?}");
    }
}

#[test]
fn on_face_species_rate_is_zero() {
    let model = common::build(&common::predator_prey());
    let config = SimConfig::new(4000.0, 8).with_replicates(4);
    for i in [0, 1] {
        let est = estimate_lambda(&model, Face::from_indices([0, 1]), i, &config).unwrap();
        assert!(est.lambda.abs() <= 3.0 * est.se.unwrap(), "{est:?}");
    }
}

fn scaled_lv(c: f64) -> ZooParams {
    let ZooParams::CompetitiveLv(p) = common::lv_boundary() else { unreachable!() };
    let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| c * v).collect()).collect();
    ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: p.a.iter().map(|v| c * v).collect(),
        b: scale(&p.b),
        b_hat: scale(&p.b_hat),
        r: p.r / c,
        kernel: None,
        noise: NoiseInput::variances(p.noise.variances.unwrap().iter().map(|v| c * v).collect()),
    })
}

#[test]
fn rates_scale_with_time() {
    // the same increments drive both runs once dt and r shrink by c
    let c = 2.0;
    let base = common::build(&scaled_lv(1.0));
    let fast = common::build(&scaled_lv(c));
    let config = SimConfig::new(1000.0, 5).with_replicates(4);
    let mut quick = SimConfig::new(1000.0 / c, 5).with_replicates(4);
    quick.dt = Some(config.resolved_dt(&base) / c);
    for (face, i) in [(Face::single(0), 1), (Face::single(0), 0), (Face::empty(), 0)] {
        let slow = estimate_lambda(&base, face, i, &config).unwrap();
        let rapid = estimate_lambda(&fast, face, i, &quick).unwrap();
        assert!(common::close(rapid.lambda, c * slow.lambda, 1e-9), "{} vs {}", rapid.lambda, slow.lambda);
    }
}

#[test]
fn lyapunov_exponent_matches_closed_forms() {
    let model = common::build(&common::lv_boundary());
    let config = SimConfig::new(2000.0, 3).with_replicates(8);
    // x1 spends long spells near zero, so the invader needs room below the cap
    let est = lyapunov_exponent(&model, Face::single(0), 1, &config, LyapunovOptions::new(1e-30)).unwrap();
    assert_eq!(est.method, Method::LyapunovExponent);
    assert!(!est.flags.cap_exceeded, "{est:?}");
    assert!((est.lambda + 1.0).abs() <= 4.0 * est.se.unwrap(), "{est:?}");
    // growing invader, kept below the cap by a tiny starting level
    let config = SimConfig::new(60.0, 3).with_replicates(16);
    let est = lyapunov_exponent(&model, Face::empty(), 0, &config, LyapunovOptions::new(1e-100)).unwrap();
    assert!(!est.flags.cap_exceeded);
    assert!((est.lambda - 1.0).abs() <= 4.0 * est.se.unwrap(), "{est:?}");
    // a macroscopic invader trips the cap
    let est = lyapunov_exponent(&model, Face::empty(), 0, &config, LyapunovOptions::new(1e-3)).unwrap();
    assert!(est.flags.cap_exceeded);
}

#[test]
fn face_without_a_measure_has_no_closed_form() {
    // a1 - σ11/2 < 0: x1 alone dies out
    let p = common::lv_with([0.5, 1.5], [[1.0, 0.0], [0.5, 1.0]], [[0.0; 2]; 2], [2.0, 1.0], 1.0);
    let model = common::build(&p);
    assert!(closed_form_lambda(&model, Face::single(0), 1).is_none());
    assert!(closed_form_estimate(&model, Face::single(0), 1, 10.0).is_none());
    let est = estimate_lambda(&model, Face::single(0), 1, &SimConfig::new(500.0, 2).with_replicates(2)).unwrap();
    assert!(est.flags.wrong_ergodic_measure);
}

#[test]
fn chemostat_and_nonlinear_sir_have_no_closed_form() {
    use kolmo_core::model::zoo::{Incidence, SirParams, Uptake};
    let chem = common::build(&common::chemostat(vec![Uptake::Monod { m: 3.0, k: 0.5 }], 0.3));
    assert!(closed_form_lambda(&chem, Face::single(0), 1).is_none());
    let sir = common::build(&ZooParams::Sir(SirParams {
        a: 1.0,
        b1: 1.0,
        b2: 1.0,
        infection: Incidence::Saturated { c1: 0.5, c2: 0.5, alpha: 1.0 },
        depletion: None,
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![0.5, 1.0]),
    }));
    assert!(closed_form_lambda(&sir, Face::single(0), 1).is_none());
    // the origin rate does not depend on the incidence
    assert!(common::close(closed_form_lambda(&sir, Face::empty(), 1).unwrap(), -1.5, 1e-12));
}

#[test]
fn replicator_edge_without_a_measure() {
    // strategy 3 strictly dominates 2 on their edge
    let p = ZooParams::Replicator(ReplicatorParams {
        total: 1.0,
        payoff: vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 2.0, 2.0]],
        payoff_offset: None,
        sigma: vec![0.1, 0.1, 0.1],
        r: 0.5,
        kernel: None,
    });
    let model = common::build(&p);
    assert!(closed_form_lambda(&model, Face::from_indices([1, 2]), 0).is_none());
}

#[test]
fn invalid_species_is_rejected() {
    let model = common::build(&common::lv_boundary());
    let err = estimate_lambda(&model, Face::single(0), 7, &SimConfig::new(10.0, 1)).unwrap_err();
    assert!(matches!(err, InvasionError::InvalidSpecies(7)));
    assert!(closed_form_lambda(&model, Face::single(0), 7).is_none());
}
