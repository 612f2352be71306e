mod common;

use kolmo_core::audit::{
    check_drift_condition, check_generator_bound, check_growth_condition, check_moment_bound, check_nondegeneracy,
    evaluate_v, memory_integral, search_certificate, AssumptionCertificate, AuditError, GeneratorOptions,
    GrowthCertificate, HFunction, LyapunovCertificate, MomentOptions, SearchOptions, SegmentSampler,
};
use kolmo_core::model::{DelayKernel, History, ModelSpec, NoiseSpec, ZooParams};
use kolmo_core::sdde::Segment;

fn search(p: &ZooParams) -> (ModelSpec, AssumptionCertificate) {
    let model = common::build(p);
    let found = search_certificate(&model, &SearchOptions::new(SegmentSampler::new(50.0, 2000, 1))).unwrap();
    (model, found.certificate)
}

fn audit_sampler() -> SegmentSampler {
    SegmentSampler::new(50.0, 10_000, 42)
}

fn zero_model(n: usize) -> ModelSpec {
    let names = (1..=n).map(|i| format!("x{i}")).collect();
    ModelSpec::kolmogorov(
        "zero",
        names,
        NoiseSpec::identity(n),
        vec![1.0],
        |_: &dyn History, out: &mut [f64]| out.fill(0.0),
        |_: &dyn History, out: &mut [f64]| out.fill(0.0),
    )
    .unwrap()
}

fn plain_cert(n: usize) -> AssumptionCertificate {
    AssumptionCertificate {
        c: vec![1.0; n],
        gamma_b: 1e-6,
        gamma_0: 1e-6,
        a0: 1.0,
        a1: 0.5,
        a2: 0.25,
        m: 1e3,
        h: HFunction::constant(1.0),
        mu: None,
        growth: None,
        volatility: None,
        lyapunov: None,
    }
}

#[test]
fn zero_model_never_violates_the_drift_condition() {
    for n in [1, 2, 3] {
        let model = zero_model(n);
        let mut cert = plain_cert(n);
        let report = check_drift_condition(&model, &cert, &audit_sampler()).unwrap();
        assert_eq!(report.violations, 0);
        // LHS is 0 and RHS is A₀ − γ₀ − A₁ + A₂ at every sample
        assert_eq!(report.worst_margin, -(1.0 - 1e-6 - 0.5 + 0.25));
        assert!(report.summary.starts_with("no violation found over 10000 samples in radius 50"));
        // without the A₀ ball nothing offsets A₁ − A₂
        cert.m = 1e-9;
        let report = check_drift_condition(&model, &cert, &audit_sampler()).unwrap();
        assert_eq!(report.violations, 10_000);
    }
}

#[test]
fn v_of_a_constant_segment() {
    let model = common::build(&common::lv_boundary());
    let (gamma, r, a2) = (0.02, 1.0, 0.25);
    let mut cert = plain_cert(2);
    cert.c = vec![1.0, 0.5];
    cert.a2 = a2;
    cert.mu = Some(DelayKernel::single(r).unwrap());
    cert.lyapunov = Some(LyapunovCertificate { gamma, rho: vec![0.0, 0.0], p0: 0.001 });
    let x = [0.7, 1.3];
    let seg = Segment::constant(&x, 64, r / 64.0);
    let v = evaluate_v(&model, &cert, &seg).unwrap();
    // ∫_{-r}^0 e^{γ(u+r)} du = (e^{γr} − 1)/γ
    let want = (1.0 + 0.7 + 0.5 * 1.3) * (a2 * ((gamma * r).exp() - 1.0) / gamma).exp();
    // trapezoid error on e^{γ(u+r)}: r·dt²·γ²e^{γr}/12
    let dt = r / 64.0;
    let tol = a2 * r * dt * dt * gamma * gamma * (gamma * r).exp() / 12.0;
    assert!((v / want).ln().abs() <= tol * (1.0 + 1e-6), "{v} vs {want}");
    // a factor x_i^ρ_i on top
    cert.lyapunov.as_mut().unwrap().rho = vec![0.01, -0.005];
    let with_rho = evaluate_v(&model, &cert, &seg).unwrap();
    assert!(common::close(with_rho, v * 0.7f64.powf(0.01) * 1.3f64.powf(-0.005), 1e-12));
    // negative exponent on an absent species has no finite value
    let absent = Segment::constant(&[0.7, 0.0], 64, r / 64.0);
    assert!(matches!(evaluate_v(&model, &cert, &absent), Err(AuditError::NonFiniteV(_))));
}

#[test]
fn memory_integral_converges_at_second_order() {
    // φ(s) = 1 + s², h = 2 + s², antiderivative of e^{γu}(2 + u²)
    let (gamma, lag) = (0.3, 1.5);
    let anti = |u: f64| (gamma * u).exp() * ((2.0 + u * u) / gamma - 2.0 * u / (gamma * gamma) + 2.0 / gamma.powi(3));
    let exact = (gamma * lag).exp() * (anti(0.0) - anti(-lag));
    let mu = DelayKernel::single(lag).unwrap();
    let h = HFunction::power(1.0, 1.0, 1.0);
    let errors: Vec<f64> = [12usize, 24, 48, 96]
        .iter()
        .map(|&k| {
            let dt = lag / k as f64;
            let seg = Segment::from_fn(1, k, dt, |_, s| 1.0 + s * s);
            (memory_integral(&mu, &h, gamma, &seg, dt) - exact).abs()
        })
        .collect();
    for w in errors.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 4.0).abs() < 0.1, "{errors:?}");
    }
}

#[test]
fn searched_certificates_pass_an_independent_audit() {
    for p in [common::lv_identity(), common::lv_boundary(), common::predator_prey(), common::replicator3()] {
        let (model, cert) = search(&p);
        let report = check_drift_condition(&model, &cert, &audit_sampler()).unwrap();
        assert_eq!(report.samples, 10_000);
        assert_eq!(report.violations, 0, "{}: {}", model.name(), report.summary);
        assert!(report.worst_margin <= 0.0);
    }
}

#[test]
fn shrunken_ball_is_caught() {
    for p in [common::lv_identity(), common::predator_prey()] {
        let (model, mut cert) = search(&p);
        cert.m = 0.5;
        let report = check_drift_condition(&model, &cert, &audit_sampler()).unwrap();
        assert!(report.violations >= 1, "{}", model.name());
        let worst = report.worst_sample.as_ref().unwrap();
        let x: f64 = (0..worst.n).map(|i| worst.current(i).powi(2)).sum::<f64>().sqrt();
        assert!(x >= 0.5);
        assert!(report.worst_margin > 0.0);
    }
}

#[test]
fn nutrient_models_are_not_searched() {
    let model = common::build(&common::sir_extinct());
    let err = search_certificate(&model, &SearchOptions::new(SegmentSampler::new(10.0, 10, 1))).unwrap_err();
    assert!(matches!(err, AuditError::Unsupported(_)));
}

#[test]
fn growth_bound() {
    let (model, mut cert) = search(&common::lv_identity());
    let sampler = SegmentSampler::new(50.0, 2000, 7);
    assert!(matches!(check_growth_condition(&model, &cert, &sampler), Err(AuditError::InvalidCertificate(_))));
    cert.growth = Some(GrowthCertificate::Upper { k_tilde: 0.0 });
    let report = check_growth_condition(&model, &cert, &sampler).unwrap();
    assert_eq!(report.violations, 2000);
    // |f| grows linearly and g is constant, as does h
    cert.growth = Some(GrowthCertificate::Upper { k_tilde: 100.0 });
    let report = check_growth_condition(&model, &cert, &sampler).unwrap();
    assert_eq!(report.violations, 0, "{}", report.summary);
}

#[test]
fn identity_noise_is_nondegenerate() {
    let model = common::build(&common::lv_identity());
    let (epsilon, radius) = (0.1, 10.0);
    let report = check_nondegeneracy(&model, &SegmentSampler::new(50.0, 2000, 3), epsilon, radius).unwrap();
    assert_eq!(report.violations, 0);
    assert_eq!(report.singular, 0);
    assert!((report.min_eigenvalue - 1.0).abs() <= 1e-12);
    // (x_i x_j δ_ij) has inverse norm 1/min x_i² ≤ 1/ε², and ≤ n/ε² a fortiori
    assert!(report.max_inverse_norm <= 1.0 / (epsilon * epsilon) * (1.0 + 1e-9));
    assert!(report.max_inverse_norm <= 2.0 / (epsilon * epsilon));
    assert!(report.max_inverse_norm >= 1.0 / (radius * radius));
}

#[test]
fn rank_deficient_noise_is_reported() {
    let noise = NoiseSpec::new(vec![vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let model = ModelSpec::kolmogorov(
        "singular",
        vec!["x1".into(), "x2".into()],
        noise,
        vec![0.0],
        |_: &dyn History, out: &mut [f64]| out.fill(0.0),
        |_: &dyn History, out: &mut [f64]| out.fill(1.0),
    )
    .unwrap();
    let report = check_nondegeneracy(&model, &SegmentSampler::new(10.0, 200, 3), 0.1, 10.0).unwrap();
    assert_eq!(report.violations, 200);
    assert!(report.min_eigenvalue_sample.is_some());
    assert!(report.singular > 0);
}

#[test]
fn replicator_noise_degenerates_along_the_simplex() {
    // noise rows of the replicator sum to zero against x
    let model = common::build(&common::replicator3());
    let report = check_nondegeneracy(&model, &SegmentSampler::new(1.0, 200, 3), 0.05, 1.0).unwrap();
    assert!(report.violations > 0);
}

fn with_lyapunov(cert: &mut AssumptionCertificate, model: &ModelSpec) {
    let bounds = kolmo_core::audit::lyapunov_bounds(cert.gamma_b, model.dim(), model.noise().sigma_star());
    let gamma = 0.2 * cert.gamma_b;
    cert.lyapunov = Some(LyapunovCertificate { gamma, rho: vec![0.0; model.dim()], p0: 0.9 * bounds.p0 });
    cert.validate(model).unwrap();
}

#[test]
fn generator_bound_holds_on_random_segments() {
    let (model, mut cert) = search(&common::lv_identity());
    with_lyapunov(&mut cert, &model);
    let segments = SegmentSampler::new(20.0, 100, 9).generate(&model).unwrap();
    let mut failures = Vec::new();
    for (k, seg) in segments.iter().enumerate() {
        let r = check_generator_bound(&model, &cert, seg, GeneratorOptions { pairs: 500, seed: k as u64 }).unwrap();
        assert!(r.se.is_finite() && r.delta == seg.dt);
        if !r.holds {
            failures.push((k, r));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn moment_bound_holds_along_trajectories() {
    let (model, mut cert) = search(&common::lv_identity());
    with_lyapunov(&mut cert, &model);
    let (n_r, dt) = SegmentSampler::grid(&model);
    let init = Segment::constant(&[3.0, 0.2], n_r, dt);
    let options = MomentOptions { trajectories: 64, horizon: 20.0, checkpoints: 5, seed: 13 };
    let report = check_moment_bound(&model, &cert, &init, &SegmentSampler::new(cert.m, 2000, 5), &options).unwrap();
    assert!(report.sup_samples > 0);
    assert_eq!(report.checkpoints.len(), 5);
    assert!(report.holds, "{report:?}");
    let again = check_moment_bound(&model, &cert, &init, &SegmentSampler::new(cert.m, 2000, 5), &options).unwrap();
    assert_eq!(report, again);
}

#[test]
fn audits_are_deterministic() {
    let (model, cert) = search(&common::predator_prey());
    let a = check_drift_condition(&model, &cert, &SegmentSampler::new(50.0, 500, 8)).unwrap();
    let b = check_drift_condition(&model, &cert, &SegmentSampler::new(50.0, 500, 8)).unwrap();
    assert_eq!(a, b);
    let (again_model, again) = search(&common::predator_prey());
    assert_eq!(again, cert);
    assert_eq!(again_model.name(), model.name());
}

#[test]
fn certificate_bounds_are_validated() {
    let model = common::build(&common::lv_identity());
    let ok = plain_cert(2);
    ok.validate(&model).unwrap();
    let mut bad = ok.clone();
    bad.a2 = bad.a1;
    assert!(bad.validate(&model).is_err());
    let mut bad = ok.clone();
    bad.c = vec![1.0];
    assert!(bad.validate(&model).is_err());
    let mut bad = ok.clone();
    bad.c[1] = 0.0;
    assert!(bad.validate(&model).is_err());
    let mut bad = ok.clone();
    bad.growth = Some(GrowthCertificate::Upper { k_tilde: -1.0 });
    assert!(bad.validate(&model).is_err());
    // |ρ| must stay below min(γ_b/2, 1/n, γ_b/(4σ*)) and p₀ below min(1, γ_b/(8nσ*))
    let mut bad = ok.clone();
    bad.gamma_b = 0.1;
    bad.lyapunov = Some(LyapunovCertificate { gamma: 0.05, rho: vec![0.03, 0.0], p0: 0.001 });
    assert!(bad.validate(&model).is_err());
    bad.lyapunov = Some(LyapunovCertificate { gamma: 0.05, rho: vec![0.02, 0.0], p0: 0.001 });
    bad.validate(&model).unwrap();
    bad.lyapunov = Some(LyapunovCertificate { gamma: 0.05, rho: vec![0.02, 0.0], p0: 0.1 / 16.0 });
    assert!(bad.validate(&model).is_err());
    bad.lyapunov = Some(LyapunovCertificate { gamma: 0.2, rho: vec![0.0, 0.0], p0: 0.001 });
    assert!(bad.validate(&model).is_err());
}
