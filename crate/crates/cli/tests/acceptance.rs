//! One line per acceptance criterion; exits non-zero if any fails.

#![allow(clippy::needless_range_loop)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use kolmo_cli::RunConfig;
use kolmo_core::audit::{check_drift_condition, search_certificate, SearchOptions, SegmentSampler};
use kolmo_core::classify::{classify_regime, ClassifyOptions};
use kolmo_core::invasion::{closed_form_lambda, default_initial, estimate_lambda};
use kolmo_core::measures::{simulate_with_stats, OccupationStats};
use kolmo_core::model::zoo::{
    ChemostatParams, Incidence, LotkaVolterraParams, NoiseInput, ReplicatorParams, SirParams, Uptake,
};
use kolmo_core::model::{build_zoo_model, Face, ModelSpec, ZooParams};
use kolmo_core::sdde::{integrate, BrownianStream, Integrator, InvariantLog, Segment, SimConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn lv(a: [f64; 2], b: [[f64; 2]; 2], b_hat: [[f64; 2]; 2], var: [f64; 2], r: f64) -> ModelSpec {
    build_zoo_model(&ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: a.to_vec(),
        b: b.iter().map(|r| r.to_vec()).collect(),
        b_hat: b_hat.iter().map(|r| r.to_vec()).collect(),
        r,
        kernel: None,
        noise: NoiseInput::variances(var.to_vec()),
    }))
    .unwrap()
}

fn boundary_lv() -> ModelSpec {
    lv([2.0, 1.5], [[1.0, 0.0], [0.5, 1.0]], [[0.0, 0.0], [1.5, 0.0]], [2.0, 1.0], 1.0)
}

fn sir() -> ModelSpec {
    build_zoo_model(&ZooParams::Sir(SirParams {
        a: 1.0,
        b1: 1.0,
        b2: 1.0,
        infection: Incidence::Linear { c1: 0.5, c2: 0.5 },
        depletion: None,
        r: 1.0,
        kernel: None,
        // σ11 does not enter λ
        noise: NoiseInput::variances(vec![0.5, 1.0]),
    }))
    .unwrap()
}

fn replicator() -> ModelSpec {
    build_zoo_model(&ZooParams::Replicator(ReplicatorParams {
        total: 1.0,
        payoff: vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 2.0], vec![1.0, 2.0, 0.0]],
        payoff_offset: None,
        sigma: vec![0.2, 0.3, 0.1],
        r: 0.5,
        kernel: None,
    }))
    .unwrap()
}

fn predator_prey() -> ModelSpec {
    build_zoo_model(&ZooParams::PredatorPrey(LotkaVolterraParams {
        a: vec![2.0, 0.2, 0.3],
        b: vec![vec![1.0, 0.2, 0.2], vec![1.0, 1.0, 0.1], vec![0.5, 0.1, 1.0]],
        b_hat: vec![vec![0.0, 0.3, 0.0], vec![0.4, 0.0, 0.0], vec![0.0; 3]],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![0.5, 0.2, 0.2]),
    }))
    .unwrap()
}

fn chemostat() -> ModelSpec {
    build_zoo_model(&ZooParams::Chemostat(ChemostatParams {
        a: 0.3,
        uptake: vec![Uptake::Monod { m: 3.0, k: 0.5 }, Uptake::Sigmoid { m: 2.5, k: 0.4 }],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![0.3; 3]),
    }))
    .unwrap()
}

fn long_run() -> SimConfig {
    SimConfig::new(1.0e4, 2024).with_replicates(16).with_dt(1.0 / 64.0)
}

fn fmt_se(se: Option<f64>) -> String {
    se.map_or("n/a".into(), |s| format!("{s:.4}"))
}

fn criterion_1() -> Outcome {
    let model = boundary_lv();
    let start = Instant::now();
    let est = estimate_lambda(&model, Face::single(0), 1, &long_run()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let exact = closed_form_lambda(&model, Face::single(0), 1).unwrap();
    let se = est.se.unwrap_or(f64::INFINITY);
    let pass = (est.lambda - exact).abs() <= 4.0 * se && se <= 0.05 && secs <= 300.0 && (exact + 1.0).abs() <= 1e-12;
    outcome(pass, format!("lambda {:.4} SE {} vs closed form {exact}, {secs:.1} s", est.lambda, fmt_se(est.se)))
}

/// Pooled statistics of the 16 face runs shared by criteria 2, 3 and 6.
fn face_runs(model: &ModelSpec, face: Face, config: &SimConfig, log: &mut InvariantLog) -> OccupationStats {
    let init = default_initial(model, face, config.resolved_dt(model));
    let parts: Vec<OccupationStats> = (0..config.replicates as u64)
        .map(|k| {
            let (traj, stats) = simulate_with_stats(model, &init, config, face, k).unwrap();
            log.merge(&traj.invariants);
            stats
        })
        .collect();
    OccupationStats::merged(&parts).unwrap()
}

fn criterion_2(stats: &OccupationStats) -> Outcome {
    let now = stats.mean_current(0);
    let lag = stats.mean_lagged(0);
    let diff = stats.mean_difference(0);
    let pass = now.within(1.0, 3.0) && lag.within(1.0, 3.0) && diff.within(0.0, 3.0);
    outcome(
        pass,
        format!(
            "mean x1(0) {:.4} SE {}, mean x1(-r) {:.4} SE {}, difference {:.2e} SE {}",
            now.mean,
            fmt_se(now.se),
            lag.mean,
            fmt_se(lag.se),
            diff.mean,
            fmt_se(diff.se)
        ),
    )
}

fn criterion_3(stats: &OccupationStats) -> Outcome {
    let est = stats.mean_integrand(0);
    outcome(est.within(0.0, 3.0), format!("on-face integrand average {:.2e} SE {}", est.mean, fmt_se(est.se)))
}

fn criterion_4(log: &mut InvariantLog) -> Outcome {
    let model = sir();
    let exact = closed_form_lambda(&model, Face::single(0), 1).unwrap();
    let config = SimConfig::new(1.0e4, 7).with_replicates(8);
    let est = estimate_lambda(&model, Face::single(0), 1, &config).unwrap();
    let mc_ok = est.se.is_some_and(|se| (est.lambda - exact).abs() <= 4.0 * se);
    let regime = classify_regime(&model, &ClassifyOptions::new(config.clone())).unwrap().regime;
    // full system from an interior start
    let dt = config.resolved_dt(&model);
    let init = Segment::constant(&[1.0, 1.0], kolmo_core::sdde::history_points(model.max_lag(), dt), dt);
    let rates: Vec<f64> = (0..config.replicates as u64)
        .map(|k| {
            let traj = integrate(&model, &init, &config, model.restriction(), k).unwrap();
            log.merge(&traj.invariants);
            traj.final_log_state[1] / traj.horizon()
        })
        .collect();
    let k = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / k;
    let se = (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt();
    let decay_ok = (mean + 0.5).abs() <= (4.0 * se).max(0.05);
    let pass = exact == -0.5 && mc_ok && regime == "disease-extinct" && decay_ok;
    outcome(
        pass,
        format!(
            "closed form {exact}, estimate {:.4} SE {}, regime {regime}, ln I(T)/T {mean:.4} SE {se:.4}",
            est.lambda,
            fmt_se(est.se)
        ),
    )
}

fn criterion_5() -> Outcome {
    let cfg = RunConfig::load(&configs().join("competitive_bistable.json")).unwrap();
    let a = kolmo_cli::classify(&cfg, false, true).unwrap();
    let v: serde_json::Value = serde_json::from_str(&a.report).unwrap();
    let basins = &v["basins"];
    let find = |label: &str| basins["faces"].as_array().unwrap().iter().find(|f| f["label"] == label).cloned().unwrap();
    let (one, two) = (find("{x1}"), find("{x2}"));
    let p = |f: &serde_json::Value| f["probability"].as_f64().unwrap();
    let (p1, p2) = (p(&one), p(&two));
    let in_band = |x: f64| (0.4..=0.6).contains(&x);
    let pass =
        basins["replicates"] == 200 && basins["horizon"] == 2000.0 && p1 + p2 >= 0.95 && in_band(p1) && in_band(p2);
    outcome(
        pass,
        format!(
            "P{{x1}} {}, P{{x2}} {}, unassigned {}",
            one["summary"].as_str().unwrap(),
            two["summary"].as_str().unwrap(),
            basins["unassigned"]
        ),
    )
}

fn criterion_6(log: &mut InvariantLog) -> Outcome {
    let config = SimConfig::new(2000.0, 99).with_replicates(4);
    let runs: Vec<(ModelSpec, Face)> = vec![
        (replicator(), Face::full(3)),
        (replicator(), Face::from_indices([1, 2])),
        (predator_prey(), Face::full(3)),
        (predator_prey(), Face::from_indices([0, 2])),
        (chemostat(), Face::full(3)),
        (chemostat(), Face::from_indices([0, 1])),
        (sir(), Face::single(0)),
        (boundary_lv(), Face::empty()),
    ];
    for (model, face) in runs {
        face_runs(&model, face, &config, log);
    }
    let pass = log.is_clean(1e-12);
    outcome(
        pass,
        format!(
            "{} steps, {} positivity and {} off-face violations, simplex defect {:.1e}",
            log.steps, log.positivity_violations, log.off_face_violations, log.max_simplex_defect_post
        ),
    )
}

fn criterion_7() -> Outcome {
    let model = lv([2.0, 1.5], [[1.0, 0.25], [0.5, 1.0]], [[0.5, 0.0], [0.25, 0.5]], [2.0, 1.0], 0.0);
    let g = model.noise().gamma();
    let gamma = [[g[0][0], g[0][1]], [g[1][0], g[1][1]]];
    let (a, b) = ([2.0, 1.5], [[1.5, 0.25], [0.75, 1.5]]);
    let sigma = [2.0, 1.0];
    let dt = 1.0 / 128.0;
    let init = Segment::constant(&[0.2, 0.7], 0, dt);
    let mut it = Integrator::new(&model, &init, model.restriction(), dt).unwrap();
    let mut stream = BrownianStream::new(77, 0, 2);
    let mut log_x = [0.2f64.ln(), 0.7f64.ln()];
    let mut z = [0.0; 2];
    let mut worst: f64 = 0.0;
    let steps = 100_000;
    for _ in 0..steps {
        stream.next_normals(&mut z);
        let db = [z[0] * dt.sqrt(), z[1] * dt.sqrt()];
        it.advance(&db).unwrap();
        let x = [log_x[0].exp(), log_x[1].exp()];
        let mut next = log_x;
        for i in 0..2 {
            let f = a[i] - b[i][0] * x[0] - b[i][1] * x[1];
            next[i] += (f - 0.5 * sigma[i]) * dt + gamma[0][i] * db[0] + gamma[1][i] * db[1];
        }
        log_x = next;
        for i in 0..2 {
            let y = log_x[i].exp();
            worst = worst.max((it.state()[i] - y).abs() / y);
        }
    }
    outcome(worst <= 1e-12, format!("worst relative gap {worst:.2e} over {steps} steps"))
}

fn criterion_8() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    let zoo = [
        boundary_lv(),
        lv([2.0, 2.0], [[1.0, 2.0], [2.0, 1.0]], [[0.0; 2]; 2], [2.0, 2.0], 1.0),
        predator_prey(),
        replicator(),
    ];
    for model in &zoo {
        let found = search_certificate(model, &SearchOptions::new(SegmentSampler::new(50.0, 2000, 1))).unwrap();
        let report = check_drift_condition(model, &found.certificate, &SegmentSampler::new(50.0, 10_000, 42)).unwrap();
        pass &= report.samples == 10_000 && report.violations == 0;
        details.push(format!("{} {}", model.name(), report.violations));
    }
    let cfg = RunConfig::load(&configs().join("audit_counterexample.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&kolmo_cli::audit(&cfg).unwrap().report).unwrap();
    for r in v["reports"].as_array().unwrap() {
        let n = r["violations"].as_u64().unwrap();
        pass &= n >= 1;
        details.push(format!("counterexample {} {n}", r["assumption"].as_str().unwrap()));
    }
    outcome(pass, format!("violations: {}", details.join(", ")))
}

fn kolmo(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_kolmo")).args(args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut same = true;
    let mut checked = 0;
    let runs: [(&str, &str); 5] = [
        ("simulate", "lv_boundary.json"),
        ("invasion", "sir.json"),
        ("invasion", "lv_boundary.json"),
        ("classify", "competitive_bistable.json"),
        ("audit", "audit_lv.json"),
    ];
    for (cmd, name) in runs {
        let config = configs().join(name);
        let mut artifacts = Vec::new();
        for round in 0..2 {
            let report = dir.path().join(format!("{cmd}-{name}-{round}.json"));
            let csv = dir.path().join(format!("{cmd}-{name}-{round}.csv"));
            let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--report", report.to_str().unwrap()];
            if cmd == "simulate" {
                args.extend(["--trajectory", csv.to_str().unwrap()]);
            }
            kolmo(&args);
            let mut bytes = std::fs::read(&report).unwrap();
            if cmd == "simulate" {
                bytes.extend(std::fs::read(&csv).unwrap());
            }
            artifacts.push(bytes);
        }
        same &= artifacts[0] == artifacts[1];
        checked += 1;
    }
    outcome(same, format!("{checked} commands run twice, artifacts byte-identical: {same}"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn main() {
    let mut log = InvariantLog::default();
    let model = boundary_lv();
    let stats = face_runs(&model, Face::single(0), &long_run(), &mut log);
    let results = [
        criterion_1(),
        criterion_2(&stats),
        criterion_3(&stats),
        criterion_4(&mut log),
        criterion_5(),
        criterion_6(&mut log),
        criterion_7(),
        criterion_8(),
        criterion_9(),
    ];
    let mut failed = 0;
    for (k, r) in results.iter().enumerate() {
        println!("criterion {}: {} {}", k + 1, if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
