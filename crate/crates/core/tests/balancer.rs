mod common;

use phasebal::balancer::{
    build_lp, control_values, feedback_step, linearize, run_profile, solve_lp, BalancerError,
    BalancingProblem, DecisionStatus, LinearizedModel,
};
use phasebal::feeder::FeederModel;
use phasebal::lp::{DenseSimplex, LinearProgram, LpSolver, LpStatus};
use phasebal::metrics::Metric;
use phasebal::powerflow::{InjectionVector, SolveOptions, VoltageState};
use phasebal::sensitivity::complex_sensitivities;

fn operating(name: &str) -> (FeederModel, InjectionVector, VoltageState) {
    let model = common::fixture(name);
    let (inj, state) = common::nominal(&model, &SolveOptions::default());
    (model, inj, state)
}

fn linearized(
    model: &FeederModel,
    inj: &InjectionVector,
    state: &VoltageState,
    metric: Metric,
) -> LinearizedModel {
    let sens = complex_sensitivities(model, state).unwrap();
    linearize(model, state, &sens, inj, metric).unwrap()
}

fn single_bus_problem(metric: Metric, beta: f64) -> BalancingProblem {
    let mut prob = BalancingProblem::new(metric, beta);
    prob.flexible_buses = Some(vec![4]);
    prob
}

#[test]
fn zero_deviation_predicts_base_values() {
    let (model, inj, state) = operating("synthetic30.json");
    for metric in Metric::ALL {
        let lin = linearized(&model, &inj, &state, metric);
        let zero = vec![0.0; lin.controls.len()];
        assert_eq!(lin.predict_metric(&zero), lin.base_metric);
        assert_eq!(lin.predict_voltage(&zero), lin.base_voltage);
        assert!(
            lin.excluded
                .iter()
                .all(|(bus, _)| *bus == model.slack_bus())
                || metric != Metric::Vuf
        );
    }
}

#[test]
fn single_bus_lp_dimensions() {
    let (model, inj, state) = operating("unbalanced4.json");
    let lin = linearized(&model, &inj, &state, Metric::Vuf);
    let blp = build_lp(&lin, &single_bus_problem(Metric::Vuf, 0.02));
    assert_eq!(blp.lp.n_vars(), 3);
    assert_eq!(blp.lp.a_eq.len(), 1);
    assert_eq!(blp.lp.lower.len() + blp.lp.upper.len(), 6);
    // Two metric rows per kept bus and two voltage rows per non-slack terminal.
    assert_eq!(
        blp.lp.a_ub.len(),
        2 * lin.buses.len() + 2 * lin.voltage_terminals.len()
    );
}

#[test]
fn zero_beta_pins_the_decision() {
    let (model, inj, state) = operating("unbalanced4.json");
    for metric in Metric::ALL {
        let lin = linearized(&model, &inj, &state, metric);
        let blp = build_lp(&lin, &BalancingProblem::new(metric, 0.0));
        let decision = solve_lp(&blp);
        assert_eq!(decision.status, DecisionStatus::Optimal);
        assert!(decision.dx.iter().all(|&x| x == 0.0));
        assert!(
            (decision.predicted_objective - lin.base_metric.iter().sum::<f64>()).abs() <= 1e-12
        );

        let out = feedback_step(
            &model,
            &inj,
            &state,
            &BalancingProblem::new(metric, 0.0),
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(out.base_total, out.predicted_total);
        assert_eq!(out.base_total, out.realized_total());
    }
}

#[test]
fn lp_optimum_matches_lattice_search() {
    let (model, inj, state) = operating("unbalanced4.json");
    for metric in Metric::ALL {
        let lin = linearized(&model, &inj, &state, metric);
        let blp = build_lp(&lin, &single_bus_problem(metric, 0.02));
        let decision = solve_lp(&blp);
        assert_eq!(decision.status, DecisionStatus::Optimal);
        let x: Vec<f64> = blp.vars.iter().map(|&c| decision.dx[c]).collect();

        // 21 x 21 lattice over the first two phases; conservation fixes the third.
        let lp = &blp.lp;
        let step: Vec<f64> = (0..3).map(|j| (lp.upper[j] - lp.lower[j]) / 20.0).collect();
        let mut best = f64::INFINITY;
        for i in 0..=20 {
            for k in 0..=20 {
                let a = lp.lower[0] + step[0] * i as f64;
                let b = lp.lower[1] + step[1] * k as f64;
                let point = [a, b, -a - b];
                if lp.max_violation(&point) <= 1e-12 {
                    best = best.min(lp.objective(&point));
                }
            }
        }
        let lipschitz: f64 = lp.cost.iter().map(|c| c.abs()).sum();
        let resolution = lipschitz * step.iter().cloned().fold(0.0, f64::max);
        assert!(
            decision.predicted_objective <= best + 1e-12,
            "{metric}: LP worse than lattice"
        );
        assert!(
            best - decision.predicted_objective <= resolution,
            "{metric}: lattice far from LP"
        );
        assert!(lp.max_violation(&x) <= 1e-9);
    }
}

#[test]
fn negated_cost_flips_the_decision_in_a_symmetric_box() {
    let (model, inj, state) = operating("unbalanced4.json");
    let lin = linearized(&model, &inj, &state, Metric::Vuf);
    let blp = build_lp(&lin, &BalancingProblem::new(Metric::Vuf, 0.02));
    let symmetric = |cost: Vec<f64>| LinearProgram {
        cost,
        constant: 0.0,
        a_ub: vec![],
        b_ub: vec![],
        a_eq: blp.lp.a_eq.clone(),
        b_eq: blp.lp.b_eq.clone(),
        lower: blp.lp.lower.clone(),
        upper: blp.lp.upper.clone(),
        elastic_rows: vec![],
    };
    let solver = DenseSimplex::default();
    let up = solver.solve(&symmetric(blp.lp.cost.clone()));
    let down = solver.solve(&symmetric(blp.lp.cost.iter().map(|c| -c).collect()));
    assert_eq!(
        (up.status, down.status),
        (LpStatus::Optimal, LpStatus::Optimal)
    );
    for (a, b) in up.x.iter().zip(&down.x) {
        assert!((a + b).abs() <= 1e-12, "{a} vs {b}");
    }
}

fn check_feasibility(model: &FeederModel, inj: &InjectionVector, prob: &BalancingProblem) {
    let state = phasebal::solve(model, inj, &SolveOptions::default()).unwrap();
    let out = feedback_step(model, inj, &state, prob, &SolveOptions::default()).unwrap();
    let x_hat = control_values(inj);
    let after = control_values(&out.injections);
    let n = inj.len();
    for (c, (&before, &now)) in x_hat.iter().zip(&after).enumerate() {
        let dx = now - before;
        assert!(dx.abs() <= prob.beta * before.abs() + 1e-9, "control {c}");
        assert!((dx - out.decision.dx[c]).abs() <= 1e-12);
    }
    let terminals = model.non_slack_terminals();
    for bus in model.buses() {
        for kind in 0..2 {
            let slots: Vec<usize> = (0..n)
                .filter(|&k| model.terminals()[terminals[k]].bus == bus.id)
                .collect();
            let sum_before: f64 = slots.iter().map(|&k| x_hat[kind * n + k]).sum();
            let sum_after: f64 = slots.iter().map(|&k| after[kind * n + k]).sum();
            assert!(
                (sum_before - sum_after).abs() <= 1e-9,
                "bus {} kind {kind}",
                bus.id
            );
        }
    }
    assert!(out.predicted_total <= out.base_total + 1e-12);
}

#[test]
fn decisions_respect_box_and_conservation() {
    let model = common::fixture("synthetic30.json");
    for metric in Metric::ALL {
        for beta in [0.01, 0.02, 0.05] {
            let inj = phasebal::powerflow::injections_from_loads_uniform(&model, 0.9);
            check_feasibility(&model, &inj, &BalancingProblem::new(metric, beta));
        }
    }
}

#[test]
fn vuf_improves_on_the_four_bus_fixture() {
    let (model, inj, state) = operating("unbalanced4.json");
    let out = feedback_step(
        &model,
        &inj,
        &state,
        &BalancingProblem::new(Metric::Vuf, 0.02),
        &SolveOptions::default(),
    )
    .unwrap();
    assert!(out.realized_total() < out.base_total);
}

#[test]
fn second_step_gains_less_than_the_first() {
    // The box is re-centred on every operating point, so gains only shrink
    // once a step lands close to the smooth metrics' optimum.
    let (model, inj, state) = operating("unbalanced4.json");
    for (metric, beta) in [
        (Metric::Vuf, 0.02),
        (Metric::Vuf, 0.05),
        (Metric::Lvur, 0.02),
        (Metric::Lvur, 0.05),
    ] {
        let prob = BalancingProblem::new(metric, beta);
        let first = feedback_step(&model, &inj, &state, &prob, &SolveOptions::default()).unwrap();
        let second = feedback_step(
            &model,
            &first.injections,
            &first.state,
            &prob,
            &SolveOptions::default(),
        )
        .unwrap();
        let gain1 = first.base_total - first.realized_total();
        let gain2 = second.base_total - second.realized_total();
        assert!(gain1 > 0.0);
        assert!(gain2 <= gain1, "{metric}: {gain1} then {gain2}");
    }
}

#[test]
fn linearization_gap_grows_with_beta() {
    for name in ["unbalanced4.json", "synthetic30.json"] {
        let (model, inj, state) = operating(name);
        for metric in Metric::ALL {
            let gap = |beta| {
                let out = feedback_step(
                    &model,
                    &inj,
                    &state,
                    &BalancingProblem::new(metric, beta),
                    &SolveOptions::default(),
                )
                .unwrap();
                (out.realized_total() - out.predicted_total).abs()
            };
            let (small, large) = (gap(0.01), gap(0.02));
            assert!(small <= large, "{name} {metric}: {small} > {large}");
        }
    }
}

#[test]
fn balanced_feeder_has_nothing_to_linearize_for_vuf() {
    let (model, inj, state) = operating("balanced4.json");
    let err = feedback_step(
        &model,
        &inj,
        &state,
        &BalancingProblem::new(Metric::Vuf, 0.02),
        &SolveOptions::default(),
    )
    .unwrap_err();
    assert_eq!(err, BalancerError::AllDegenerate(Metric::Vuf));
}

#[test]
fn constant_profile_with_zero_beta_keeps_all_series_equal() {
    let model = common::fixture("unbalanced4.json");
    for metric in Metric::ALL {
        let run = run_profile(
            &model,
            &BalancingProblem::new(metric, 0.0),
            &[1.0, 1.0, 1.0],
            &SolveOptions::default(),
        );
        assert_eq!(run.steps.len(), 3);
        for s in &run.steps {
            assert!(s.error.is_none());
            assert_eq!(s.base, s.predicted);
            assert_eq!(s.base, s.realized);
        }
        assert_eq!(run.reduction_percent(), 0.0);
    }
}

#[test]
fn failed_steps_are_recorded_and_the_run_continues() {
    let model = common::fixture("unbalanced4.json");
    let run = run_profile(
        &model,
        &BalancingProblem::new(Metric::Pvur, 0.01),
        &[1.0, 500.0, 0.9],
        &SolveOptions::default(),
    );
    assert!(run.steps[0].error.is_none());
    assert!(run.steps[1]
        .error
        .as_deref()
        .unwrap()
        .contains("power flow"));
    assert!(run.steps[2].error.is_none());
    assert!(run.base_total().is_finite());
}

#[test]
fn invalid_problems_are_rejected() {
    let (model, inj, state) = operating("unbalanced4.json");
    let err = feedback_step(
        &model,
        &inj,
        &state,
        &BalancingProblem::new(Metric::Vuf, 0.5),
        &SolveOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, BalancerError::InvalidProblem(_)));
}
