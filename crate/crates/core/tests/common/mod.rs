#![allow(dead_code)]

use std::path::PathBuf;

use num_complex::Complex64;
use phasebal::feeder::FeederModel;
use phasebal::powerflow::{self, InjectionVector, ReducedNetwork, SolveOptions, VoltageState};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

pub fn fixture(name: &str) -> FeederModel {
    phasebal::load_feeder(fixture_path(name)).expect("fixture loads")
}

/// Tolerance tight enough that finite differences at `FD_STEP` are not
/// dominated by power-flow truncation.
pub fn tight() -> SolveOptions {
    SolveOptions {
        tolerance: 1e-12,
        max_iter: 500,
    }
}

pub fn nominal(model: &FeederModel, options: &SolveOptions) -> (InjectionVector, VoltageState) {
    let inj = powerflow::injections_from_loads_uniform(model, 1.0);
    let state = powerflow::solve(model, &inj, options).expect("nominal power flow converges");
    (inj, state)
}

/// Injections with control column `control` (kind-major) moved by `h`.
pub fn perturbed(base: &InjectionVector, control: usize, h: f64) -> InjectionVector {
    let n = base.len();
    let mut inj = base.clone();
    let delta = if control < n {
        Complex64::new(h, 0.0)
    } else {
        Complex64::new(0.0, h)
    };
    inj.0[control % n] += delta;
    inj
}

/// Power-flow states at `x + h e_c` and `x - h e_c`.
pub fn central_states(
    model: &FeederModel,
    network: &ReducedNetwork,
    base: &InjectionVector,
    control: usize,
    h: f64,
    options: &SolveOptions,
) -> (VoltageState, VoltageState) {
    let plus = powerflow::solve_with(model, network, &perturbed(base, control, h), options)
        .expect("plus converges");
    let minus = powerflow::solve_with(model, network, &perturbed(base, control, -h), options)
        .expect("minus converges");
    (plus, minus)
}

pub fn fd_agrees(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= (FD_REL_TOL * fd.abs()).max(FD_ABS_FLOOR)
}
