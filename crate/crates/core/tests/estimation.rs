mod common;

use common::{fixture, FIXTURES};
use gse_core::assembly::DecoupledModel;
use gse_core::estimator::{estimate_from, flat_start, EstimateError};
use gse_core::measurement::{evaluate_h, mean_squared_error, residuals, NoiseSigmas};
use gse_core::{build_graph, estimate, parse_case, EstimationMode, EstimationOptions, SystemState};

fn opts(mode: EstimationMode) -> EstimationOptions {
    EstimationOptions {
        mode,
        ..Default::default()
    }
}

#[test]
fn ieee14_noiseless_decoupled_recovers_truth() {
    let f = fixture("ieee14");
    let pm = f.measurements(NoiseSigmas::ZERO, 0);
    let r = estimate(&f.graph, &pm, &opts(EstimationMode::FastDecoupled)).unwrap();
    let (dv, _) = r.state.max_abs_diff(&f.truth);
    assert!(r.converged);
    assert!(dv <= 1e-7, "{dv:e}");
    assert!((3..=7).contains(&r.iterations), "{}", r.iterations);
}

#[test]
fn ieee14_noiseless_full_newton_has_negligible_mse() {
    let f = fixture("ieee14");
    let pm = f.measurements(NoiseSigmas::ZERO, 0);
    let r = estimate(&f.graph, &pm, &opts(EstimationMode::FullNewton)).unwrap();
    assert!(r.converged);
    assert!(r.mse < 1e-12);
}

#[test]
fn ieee118_noisy_converges_and_improves_objective() {
    let f = fixture("ieee118");
    let pm = f.measurements(NoiseSigmas::default(), 0);
    for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
        let r = estimate(&f.graph, &pm, &opts(mode)).unwrap();
        assert!(r.converged, "{mode:?}");
        assert!(r.iterations <= 10, "{mode:?}: {}", r.iterations);
        assert!(r.objective < r.initial_objective);
    }
}

#[test]
fn objective_never_worse_than_flat_start() {
    for name in FIXTURES {
        let f = fixture(name);
        let mut sets = vec![f.measurements(NoiseSigmas::ZERO, 0)];
        sets.extend((0..10).map(|seed| f.measurements(NoiseSigmas::default(), seed)));
        for pm in &sets {
            for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
                let r = estimate(&f.graph, pm, &opts(mode)).unwrap();
                assert!(r.objective <= r.initial_objective, "{name} {mode:?}");
            }
        }
    }
}

#[test]
fn modes_agree_on_noiseless_fixtures() {
    for name in FIXTURES {
        let f = fixture(name);
        let pm = f.measurements(NoiseSigmas::ZERO, 0);
        let full = estimate(&f.graph, &pm, &opts(EstimationMode::FullNewton)).unwrap();
        for model in [DecoupledModel::Xb, DecoupledModel::FlatStart] {
            let o = EstimationOptions {
                decoupled_model: model,
                max_iter: 200,
                ..opts(EstimationMode::FastDecoupled)
            };
            let dec = estimate(&f.graph, &pm, &o).unwrap();
            assert!(dec.converged, "{name} {model:?}");
            let (dv, dt) = dec.state.max_abs_diff(&full.state);
            assert!(dv <= 1e-6 && dt <= 1e-6, "{name} {model:?}: {dv:e} {dt:e}");
        }
    }
}

#[test]
fn decoupled_factorizes_each_gain_once() {
    let f = fixture("ieee14");
    let pm = f.measurements(NoiseSigmas::default(), 1);
    let r = estimate(&f.graph, &pm, &opts(EstimationMode::FastDecoupled)).unwrap();
    assert!(r.iterations > 1);
    let names: Vec<&str> = r.factorizations.iter().map(|(n, _)| *n).collect();
    assert_eq!(names, ["G_P", "G_Q"]);
    for (_, c) in &r.factorizations {
        assert_eq!((c.symbolic, c.numeric), (1, 1));
    }

    let r = estimate(&f.graph, &pm, &opts(EstimationMode::FullNewton)).unwrap();
    let (name, c) = r.factorizations[0];
    assert_eq!(name, "G");
    assert_eq!(c.symbolic, 1);
    assert_eq!(c.numeric, r.iterations);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    for name in ["ieee14", "ieee118"] {
        let f = fixture(name);
        let pm = f.measurements(NoiseSigmas::default(), 5);
        for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
            let base = estimate(&f.graph, &pm, &opts(mode)).unwrap();
            for workers in [2, 4, 8] {
                let o = EstimationOptions { workers, ..opts(mode) };
                let r = estimate(&f.graph, &pm, &o).unwrap();
                assert!(base.numerically_identical(&r), "{name} {mode:?} {workers}");
            }
        }
    }
}

#[test]
fn estimates_filter_measurement_noise() {
    let f = fixture("ieee14");
    let mut wins = 0;
    for seed in 0..100 {
        let pm = f.measurements(NoiseSigmas::default(), seed);
        let exact_here = evaluate_h(&f.graph, &f.truth, &pm);
        let r = estimate(&f.graph, &pm, &opts(EstimationMode::FastDecoupled)).unwrap();
        assert!(r.objective <= r.initial_objective);
        let raw = mean_squared_error(&residuals(&pm, &exact_here).unwrap()).unwrap();
        let fitted = evaluate_h(&f.graph, &r.state, &pm);
        let est = mean_squared_error(&fitted.iter().zip(&exact_here).map(|(a, b)| a - b).collect::<Vec<_>>()).unwrap();
        if est < raw {
            wins += 1;
        }
    }
    assert!(wins >= 95, "{wins}");
}

#[test]
fn starting_at_the_solution_stops_after_one_step() {
    let case = parse_case("BASE_MVA 1\nBUS\n1 slack 1 0 0 0\n2 pq 1 0 0 0\nBRANCH\n1 2 0 0.1 0 1\n").unwrap();
    let g = build_graph(&case).unwrap();
    let set = gse_core::measurement::generate_measurements(&g, &SystemState::truth(&case), NoiseSigmas::ZERO, 0);
    let pm = gse_core::PartitionedMeasurements::bind(&g, &set).unwrap();
    for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
        let r = estimate(&g, &pm, &opts(mode)).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
    }
}

#[test]
fn slack_angle_stays_pinned() {
    let f = fixture("ieee118");
    let pm = f.measurements(NoiseSigmas::default(), 2);
    for mode in [EstimationMode::FastDecoupled, EstimationMode::FullNewton] {
        let r = estimate(&f.graph, &pm, &opts(mode)).unwrap();
        assert_eq!(r.state.theta[f.graph.slack_index], 0.0);
    }
}

#[test]
fn one_iteration_is_not_enough_with_noise() {
    let f = fixture("ieee118");
    let pm = f.measurements(NoiseSigmas::default(), 0);
    let o = EstimationOptions {
        max_iter: 1,
        ..opts(EstimationMode::FastDecoupled)
    };
    let r = estimate(&f.graph, &pm, &o).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations, 1);
}

#[test]
fn bad_inputs_are_rejected() {
    let f = fixture("case5");
    let pm = f.measurements(NoiseSigmas::default(), 0);
    let short = SystemState::flat(3);
    assert!(matches!(
        estimate_from(&f.graph, &pm, &EstimationOptions::default(), short),
        Err(EstimateError::StateDimension { expected: 5, found: 3 })
    ));
    let other = fixture("ieee14");
    let pm14 = other.measurements(NoiseSigmas::default(), 0);
    assert!(estimate(&f.graph, &pm14, &EstimationOptions::default()).is_err());
    assert_eq!(flat_start(&f.graph), SystemState::flat(5));
}
