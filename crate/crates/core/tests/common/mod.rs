#![allow(dead_code)]

use kolmo_core::model::zoo::{
    ChemostatParams, Incidence, LotkaVolterraParams, NoiseInput, ReplicatorParams, SirParams, Uptake,
};
use kolmo_core::model::{build_zoo_model, ModelSpec, ZooParams};

pub fn build(p: &ZooParams) -> ModelSpec {
    build_zoo_model(p).expect("valid parameters")
}

/// Competitive pair whose face {x1} is invaded by x2 at rate -1.
pub fn lv_boundary() -> ZooParams {
    ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: vec![2.0, 1.5],
        b: vec![vec![1.0, 0.0], vec![0.5, 1.0]],
        b_hat: vec![vec![0.0, 0.0], vec![1.5, 0.0]],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![2.0, 1.0]),
    })
}

/// Symmetric bistable competition.
pub fn lv_bistable() -> ZooParams {
    ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: vec![2.0, 2.0],
        b: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        b_hat: vec![vec![0.0; 2]; 2],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![2.0, 2.0]),
    })
}

/// Weak competition with identity noise.
pub fn lv_identity() -> ZooParams {
    ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: vec![2.0, 1.5],
        b: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
        b_hat: vec![vec![0.0; 2]; 2],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::default(),
    })
}

pub fn lv_with(a: [f64; 2], b: [[f64; 2]; 2], b_hat: [[f64; 2]; 2], variances: [f64; 2], r: f64) -> ZooParams {
    ZooParams::CompetitiveLv(LotkaVolterraParams {
        a: a.to_vec(),
        b: b.iter().map(|r| r.to_vec()).collect(),
        b_hat: b_hat.iter().map(|r| r.to_vec()).collect(),
        r,
        kernel: None,
        noise: NoiseInput::variances(variances.to_vec()),
    })
}

pub fn predator_prey() -> ZooParams {
    ZooParams::PredatorPrey(LotkaVolterraParams {
        a: vec![2.0, 0.2, 0.3],
        b: vec![vec![1.0, 0.2, 0.2], vec![1.0, 1.0, 0.1], vec![0.5, 0.1, 1.0]],
        b_hat: vec![vec![0.0, 0.3, 0.0], vec![0.4, 0.0, 0.0], vec![0.0; 3]],
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![0.5, 0.2, 0.2]),
    })
}

pub fn replicator3() -> ZooParams {
    ZooParams::Replicator(ReplicatorParams {
        total: 1.0,
        payoff: vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 2.0], vec![1.0, 2.0, 0.0]],
        payoff_offset: None,
        sigma: vec![0.2, 0.3, 0.1],
        r: 0.5,
        kernel: None,
    })
}

pub fn replicator2(payoff: [[f64; 2]; 2], sigma: [f64; 2]) -> ZooParams {
    ZooParams::Replicator(ReplicatorParams {
        total: 1.0,
        payoff: payoff.iter().map(|r| r.to_vec()).collect(),
        payoff_offset: None,
        sigma: sigma.to_vec(),
        r: 0.5,
        kernel: None,
    })
}

pub fn sir(c: (f64, f64), variances: [f64; 2]) -> ZooParams {
    ZooParams::Sir(SirParams {
        a: 1.0,
        b1: 1.0,
        b2: 1.0,
        infection: Incidence::Linear { c1: c.0, c2: c.1 },
        depletion: None,
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(variances.to_vec()),
    })
}

/// Linear incidence with an extinct disease: `λ = -0.5`.
pub fn sir_extinct() -> ZooParams {
    sir((0.5, 0.5), [0.5, 1.0])
}

pub fn chemostat(uptake: Vec<Uptake>, a: f64) -> ZooParams {
    let n = uptake.len() + 1;
    ZooParams::Chemostat(ChemostatParams {
        a,
        uptake,
        r: 1.0,
        kernel: None,
        noise: NoiseInput::variances(vec![0.3; n]),
    })
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
