mod common;

use common::{fixture, load};
use gse_core::case_io::{
    validate_report, write_case, BusType, CaseError, MeasurementFileError, NetworkCase, RawBranch, RawBus, REPORT_KEYS,
    TIMING_KEYS,
};
use gse_core::measurement::{generate_measurements, Location, Measurement, MeasurementKind, NoiseSigmas};
use gse_core::{
    estimate, parse_case, parse_measurements, write_measurements, write_report, EstimationOptions, MeasurementSet,
};
use proptest::prelude::*;

#[test]
fn fixture_sizes() {
    for (name, n, m) in [
        ("case2", 2, 1),
        ("case5", 5, 7),
        ("ieee14", 14, 20),
        ("ieee118", 118, 186),
    ] {
        let case = load(name);
        assert_eq!((case.bus_count(), case.branch_count()), (n, m), "{name}");
        assert_eq!(case.buses.iter().filter(|b| b.bus_type == BusType::Slack).count(), 1);
    }
}

#[test]
fn fixtures_round_trip_through_the_writer() {
    for name in common::FIXTURES {
        let case = load(name);
        assert_eq!(parse_case(&write_case(&case)).unwrap(), case, "{name}");
    }
}

#[test]
fn generated_sets_round_trip() {
    let f = fixture("ieee14");
    for noise in [NoiseSigmas::ZERO, NoiseSigmas::default()] {
        let set = generate_measurements(&f.graph, &f.truth, noise, 12);
        assert_eq!(set.len(), 122);
        let text = write_measurements(&set);
        assert_eq!(parse_measurements(&text).unwrap(), set);
        assert_eq!(text.lines().count(), 123);
    }
}

#[test]
fn empty_and_single_record_files() {
    assert_eq!(
        write_measurements(&MeasurementSet::default()),
        "# KIND LOCATION VALUE SIGMA2\n"
    );
    let one = MeasurementSet::new(vec![Measurement {
        kind: MeasurementKind::QFlow,
        location: Location::Branch {
            from: 3,
            to: 4,
            circuit: 2,
        },
        value: -0.25,
        sigma2: 1e-4,
    }]);
    let text = write_measurements(&one);
    assert_eq!(text.lines().nth(1), Some("QF 3-4:2 -0.25 0.0001"));
    let parsed = parse_measurements("V 1 1.02 1e-4\n").unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed.measurements()[0].kind, MeasurementKind::Voltage);
    assert_eq!(parsed.measurements()[0].sigma2, 1e-4);
}

#[test]
fn malformed_measurement_records() {
    assert!(matches!(
        parse_measurements("V 1 1.0 0\n"),
        Err(MeasurementFileError::NonPositiveVariance { line: 1, .. })
    ));
    assert!(matches!(
        parse_measurements("X 1 1.0 1\n"),
        Err(MeasurementFileError::UnknownKind { .. })
    ));
    assert!(matches!(
        parse_measurements("PF 1 1.0 1\n"),
        Err(MeasurementFileError::BadLocation { .. })
    ));
    assert!(matches!(
        parse_measurements("V 1-2 1.0 1\n"),
        Err(MeasurementFileError::BadLocation { .. })
    ));
    assert!(matches!(
        parse_measurements("V 1 abc 1\n"),
        Err(MeasurementFileError::Syntax { .. })
    ));
}

#[test]
fn dangling_branch_is_reported() {
    let text = "BASE_MVA 100\nBUS\n1 slack 1 0 0 0\n2 pq 1 0 0 0\nBRANCH\n1 99 0 0.1 0 1\n";
    assert!(matches!(
        parse_case(text),
        Err(CaseError::DanglingEndpoint { id: 99, .. })
    ));
}

#[test]
fn report_document_has_the_expected_schema() {
    let f = fixture("ieee14");
    let pm = f.measurements(NoiseSigmas::ZERO, 0);
    let result = estimate(&f.graph, &pm, &EstimationOptions::default()).unwrap();
    let text = write_report(&result);
    let report = validate_report(&text).unwrap();
    assert_eq!(report.iterations, result.iterations);
    let json: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in REPORT_KEYS {
        assert!(json.get(key).is_some(), "{key}");
    }
    for key in TIMING_KEYS {
        assert!(json["timings_ms"][key].is_number(), "{key}");
    }
    assert_eq!(json["iterations"], result.iterations);
}

fn kind() -> impl Strategy<Value = MeasurementKind> {
    prop::sample::select(MeasurementKind::ALL.to_vec())
}

fn measurement() -> impl Strategy<Value = Measurement> {
    (kind(), 1u32..500, 1u32..500, 1u32..4, -10.0f64..10.0, 1e-12f64..1.0).prop_map(
        |(kind, a, b, circuit, value, sigma2)| {
            let location = if kind.is_bus_quantity() {
                Location::Bus(a)
            } else {
                Location::Branch {
                    from: a,
                    to: b,
                    circuit,
                }
            };
            Measurement {
                kind,
                location,
                value,
                sigma2,
            }
        },
    )
}

fn case() -> impl Strategy<Value = NetworkCase> {
    (2usize..12).prop_flat_map(|n| {
        let buses = prop::collection::vec((0.9f64..1.1, -1.0f64..1.0, -0.1f64..0.1, -0.5f64..0.5), n);
        let branches = prop::collection::vec((0..n, 1..n, 0.0f64..0.2, 0.01f64..0.5, 0.0f64..0.3, 0.9f64..1.1), 1..20);
        (100.0f64..1000.0, buses, branches).prop_map(move |(base_mva, buses, branches)| NetworkCase {
            base_mva,
            buses: buses
                .into_iter()
                .enumerate()
                .map(|(k, (v, t, gs, bs))| RawBus {
                    id: k as u32 * 3 + 1,
                    bus_type: match k {
                        0 => BusType::Slack,
                        k if k % 3 == 0 => BusType::Pv,
                        _ => BusType::Pq,
                    },
                    v_true: v,
                    theta_true: t,
                    gs,
                    bs,
                })
                .collect(),
            branches: branches
                .into_iter()
                .map(|(a, d, r, x, bc, tap)| RawBranch {
                    from: a as u32 * 3 + 1,
                    to: ((a + d) % n) as u32 * 3 + 1,
                    r,
                    x,
                    b_charging: bc,
                    tap,
                })
                .collect(),
        })
    })
}

proptest! {
    #[test]
    fn measurement_files_round_trip(ms in prop::collection::vec(measurement(), 0..40)) {
        let set = MeasurementSet::new(ms);
        prop_assert_eq!(parse_measurements(&write_measurements(&set)).unwrap(), set);
    }

    #[test]
    fn case_files_round_trip(case in case()) {
        prop_assert_eq!(parse_case(&write_case(&case)).unwrap(), case);
    }
}
