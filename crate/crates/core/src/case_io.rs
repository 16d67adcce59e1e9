//! Text formats: network case files, measurement files and estimation reports.
//!
//! Case file layout:
//!
//! ```text
//! # comment
//! BASE_MVA 100
//! ANGLE_UNIT deg          # optional, `rad` (default) or `deg`
//! BUS
//! # id  type  vm  va  gs  bs
//! 1 slack 1.06 0.0 0.0 0.0
//! BRANCH
//! # from  to  r  x  b  tap
//! 1 2 0.01938 0.05917 0.0528 1.0
//! ```
//!
//! Bus types are `slack`, `pv`, `pq` (or the numeric codes 3, 2, 1). Shunts,
//! impedances and charging are per-unit on `BASE_MVA`. A tap of `0` is read as
//! nominal (1.0), which lets tabular case data convert without edits.
//!
//! Measurement file layout is one record per line, `KIND LOCATION VALUE SIGMA2`,
//! with `KIND` one of `V PI QI PF QF` and `LOCATION` either a bus id or a
//! directed branch `from-to`. Parallel circuits between the same pair of buses
//! are addressed as `from-to:k`, `k` counting from 1 in case-file order.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{EstimationMode, EstimationResult};
use crate::measurement::{Location, Measurement, MeasurementKind, MeasurementSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

impl BusType {
    fn parse(token: &str) -> Option<Self> {
        match token.to_ascii_lowercase().as_str() {
            "slack" | "ref" | "3" => Some(BusType::Slack),
            "pv" | "2" => Some(BusType::Pv),
            "pq" | "1" => Some(BusType::Pq),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            BusType::Slack => "slack",
            BusType::Pv => "pv",
            BusType::Pq => "pq",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleUnit {
    Radians,
    Degrees,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBus {
    pub id: u32,
    pub bus_type: BusType,
    /// Truth voltage magnitude, p.u.
    pub v_true: f64,
    /// Truth voltage angle, radians.
    pub theta_true: f64,
    pub gs: f64,
    pub bs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawBranch {
    pub from: u32,
    pub to: u32,
    pub r: f64,
    pub x: f64,
    /// Total line charging susceptance.
    pub b_charging: f64,
    /// Off-nominal turns ratio on the from side.
    pub tap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<RawBus>,
    pub branches: Vec<RawBranch>,
}

impl NetworkCase {
    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CaseError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: invalid value: {message}")]
    InvalidValue { line: usize, message: String },
    #[error("line {line}: duplicate bus id {id}")]
    DuplicateBus { line: usize, id: u32 },
    #[error("line {line}: no slack bus defined")]
    MissingSlack { line: usize },
    #[error("line {line}: second slack bus {id}")]
    MultipleSlack { line: usize, id: u32 },
    #[error("line {line}: branch endpoint references unknown bus {id}")]
    DanglingEndpoint { line: usize, id: u32 },
}

impl CaseError {
    pub fn line(&self) -> usize {
        match self {
            CaseError::Syntax { line, .. }
            | CaseError::InvalidValue { line, .. }
            | CaseError::DuplicateBus { line, .. }
            | CaseError::MissingSlack { line }
            | CaseError::MultipleSlack { line, .. }
            | CaseError::DanglingEndpoint { line, .. } => *line,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MeasurementFileError {
    #[error("line {line}: syntax error: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown measurement kind `{kind}`")]
    UnknownKind { line: usize, kind: String },
    #[error("line {line}: variance must be positive, got {sigma2}")]
    NonPositiveVariance { line: usize, sigma2: f64 },
    #[error("line {line}: unresolvable location `{location}`")]
    BadLocation { line: usize, location: String },
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Header,
    Bus,
    Branch,
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_f64(token: &str, line: usize, what: &str) -> Result<f64, CaseError> {
    let value: f64 = token.parse().map_err(|_| CaseError::Syntax {
        line,
        message: format!("cannot parse {what} from `{token}`"),
    })?;
    if !value.is_finite() {
        return Err(CaseError::InvalidValue {
            line,
            message: format!("{what} must be finite"),
        });
    }
    Ok(value)
}

fn parse_id(token: &str, line: usize) -> Result<u32, CaseError> {
    token.parse().map_err(|_| CaseError::Syntax {
        line,
        message: format!("cannot parse bus id from `{token}`"),
    })
}

pub fn parse_case(text: &str) -> Result<NetworkCase, CaseError> {
    let mut section = Section::Header;
    let mut base_mva = None;
    let mut unit = AngleUnit::Radians;
    let mut buses: Vec<RawBus> = Vec::new();
    let mut branches = Vec::new();
    let mut branch_lines = Vec::new();
    let mut ids = HashSet::new();
    let mut slack_seen = false;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let fields: Vec<&str> = strip_comment(raw).split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        match fields[0].to_ascii_uppercase().as_str() {
            "BUS" if fields.len() == 1 => {
                section = Section::Bus;
                continue;
            }
            "BRANCH" if fields.len() == 1 => {
                section = Section::Branch;
                continue;
            }
            "BASE_MVA" => {
                if fields.len() != 2 {
                    return Err(CaseError::Syntax {
                        line,
                        message: "BASE_MVA takes one value".into(),
                    });
                }
                let value = parse_f64(fields[1], line, "base MVA")?;
                if value <= 0.0 {
                    return Err(CaseError::InvalidValue {
                        line,
                        message: "base MVA must be positive".into(),
                    });
                }
                base_mva = Some(value);
                continue;
            }
            "ANGLE_UNIT" => {
                unit = match fields.get(1).map(|s| s.to_ascii_lowercase()).as_deref() {
                    Some("deg") | Some("degrees") if fields.len() == 2 => AngleUnit::Degrees,
                    Some("rad") | Some("radians") if fields.len() == 2 => AngleUnit::Radians,
                    _ => {
                        return Err(CaseError::Syntax {
                            line,
                            message: "ANGLE_UNIT must be `deg` or `rad`".into(),
                        })
                    }
                };
                continue;
            }
            _ => {}
        }

        match section {
            Section::Header => {
                return Err(CaseError::Syntax {
                    line,
                    message: format!("unexpected `{}` outside BUS/BRANCH section", fields[0]),
                })
            }
            Section::Bus => {
                if fields.len() != 6 {
                    return Err(CaseError::Syntax {
                        line,
                        message: format!("bus record needs 6 fields, found {}", fields.len()),
                    });
                }
                let id = parse_id(fields[0], line)?;
                let bus_type = BusType::parse(fields[1]).ok_or_else(|| CaseError::Syntax {
                    line,
                    message: format!("unknown bus type `{}`", fields[1]),
                })?;
                let v_true = parse_f64(fields[2], line, "voltage magnitude")?;
                if v_true <= 0.0 {
                    return Err(CaseError::InvalidValue {
                        line,
                        message: "voltage magnitude must be positive".into(),
                    });
                }
                let angle = parse_f64(fields[3], line, "voltage angle")?;
                let theta_true = match unit {
                    AngleUnit::Radians => angle,
                    AngleUnit::Degrees => angle.to_radians(),
                };
                let gs = parse_f64(fields[4], line, "shunt conductance")?;
                let bs = parse_f64(fields[5], line, "shunt susceptance")?;
                if !ids.insert(id) {
                    return Err(CaseError::DuplicateBus { line, id });
                }
                if bus_type == BusType::Slack {
                    if slack_seen {
                        return Err(CaseError::MultipleSlack { line, id });
                    }
                    slack_seen = true;
                }
                buses.push(RawBus {
                    id,
                    bus_type,
                    v_true,
                    theta_true,
                    gs,
                    bs,
                });
            }
            Section::Branch => {
                if fields.len() != 6 {
                    return Err(CaseError::Syntax {
                        line,
                        message: format!("branch record needs 6 fields, found {}", fields.len()),
                    });
                }
                let from = parse_id(fields[0], line)?;
                let to = parse_id(fields[1], line)?;
                let r = parse_f64(fields[2], line, "resistance")?;
                let x = parse_f64(fields[3], line, "reactance")?;
                let b_charging = parse_f64(fields[4], line, "charging susceptance")?;
                let mut tap = parse_f64(fields[5], line, "tap ratio")?;
                if tap == 0.0 {
                    tap = 1.0;
                }
                if tap < 0.0 {
                    return Err(CaseError::InvalidValue {
                        line,
                        message: "tap ratio must be positive".into(),
                    });
                }
                if r == 0.0 && x == 0.0 {
                    return Err(CaseError::InvalidValue {
                        line,
                        message: "branch impedance is zero".into(),
                    });
                }
                if from == to {
                    return Err(CaseError::InvalidValue {
                        line,
                        message: format!("branch connects bus {from} to itself"),
                    });
                }
                branches.push(RawBranch {
                    from,
                    to,
                    r,
                    x,
                    b_charging,
                    tap,
                });
                branch_lines.push(line);
            }
        }
    }

    // Endpoints are checked once the whole bus table is known.
    for (branch, &line) in branches.iter().zip(&branch_lines) {
        for id in [branch.from, branch.to] {
            if !ids.contains(&id) {
                return Err(CaseError::DanglingEndpoint { line, id });
            }
        }
    }
    if !slack_seen {
        return Err(CaseError::MissingSlack { line: last_line });
    }
    let base_mva = base_mva.ok_or_else(|| CaseError::Syntax {
        line: last_line,
        message: "missing BASE_MVA".into(),
    })?;

    Ok(NetworkCase {
        base_mva,
        buses,
        branches,
    })
}

/// Serializes a case with angles in radians. Re-parses to an equal object.
pub fn write_case(case: &NetworkCase) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "BASE_MVA {:?}", case.base_mva);
    let _ = writeln!(out, "ANGLE_UNIT rad");
    let _ = writeln!(out, "\nBUS\n# id  type  vm  va  gs  bs");
    for bus in &case.buses {
        let _ = writeln!(
            out,
            "{} {} {:?} {:?} {:?} {:?}",
            bus.id,
            bus.bus_type.as_str(),
            bus.v_true,
            bus.theta_true,
            bus.gs,
            bus.bs
        );
    }
    let _ = writeln!(out, "\nBRANCH\n# from  to  r  x  b  tap");
    for br in &case.branches {
        let _ = writeln!(
            out,
            "{} {} {:?} {:?} {:?} {:?}",
            br.from, br.to, br.r, br.x, br.b_charging, br.tap
        );
    }
    out
}

pub const MEASUREMENT_HEADER: &str = "# KIND LOCATION VALUE SIGMA2";

fn parse_location(token: &str) -> Option<Location> {
    match token.split_once('-') {
        None => token.parse().ok().map(Location::Bus),
        Some((from, rest)) => {
            let (to, circuit) = match rest.split_once(':') {
                Some((to, circuit)) => (to, circuit.parse().ok().filter(|&c: &u32| c >= 1)?),
                None => (rest, 1),
            };
            Some(Location::Branch {
                from: from.parse().ok()?,
                to: to.parse().ok()?,
                circuit,
            })
        }
    }
}

fn format_location(location: &Location) -> String {
    match *location {
        Location::Bus(id) => id.to_string(),
        Location::Branch { from, to, circuit: 1 } => format!("{from}-{to}"),
        Location::Branch { from, to, circuit } => format!("{from}-{to}:{circuit}"),
    }
}

pub fn parse_measurements(text: &str) -> Result<MeasurementSet, MeasurementFileError> {
    let mut measurements = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let fields: Vec<&str> = strip_comment(raw).split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(MeasurementFileError::Syntax {
                line,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let kind = MeasurementKind::from_code(fields[0]).ok_or_else(|| MeasurementFileError::UnknownKind {
            line,
            kind: fields[0].to_string(),
        })?;
        let location = parse_location(fields[1]).ok_or_else(|| MeasurementFileError::BadLocation {
            line,
            location: fields[1].to_string(),
        })?;
        let bus_located = matches!(location, Location::Bus(_));
        if bus_located != kind.is_bus_quantity() {
            return Err(MeasurementFileError::BadLocation {
                line,
                location: fields[1].to_string(),
            });
        }
        let number = |token: &str, what: &str| -> Result<f64, MeasurementFileError> {
            token
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| MeasurementFileError::Syntax {
                    line,
                    message: format!("cannot parse {what} from `{token}`"),
                })
        };
        let value = number(fields[2], "value")?;
        let sigma2 = number(fields[3], "variance")?;
        if sigma2 <= 0.0 {
            return Err(MeasurementFileError::NonPositiveVariance { line, sigma2 });
        }
        measurements.push(Measurement {
            kind,
            location,
            value,
            sigma2,
        });
    }
    Ok(MeasurementSet::new(measurements))
}

pub fn write_measurements(set: &MeasurementSet) -> String {
    let mut out = String::with_capacity(32 * (set.len() + 1));
    out.push_str(MEASUREMENT_HEADER);
    out.push('\n');
    for m in set.iter() {
        let _ = writeln!(
            out,
            "{} {} {:?} {:?}",
            m.kind.code(),
            format_location(&m.location),
            m.value,
            m.sigma2
        );
    }
    out
}

/// Per-stage timings in milliseconds, as written to a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportTimings {
    pub gain_formulation: f64,
    pub factorization: f64,
    pub residual_and_substitution_per_iter: f64,
    pub rhs_per_iter: f64,
    pub total: f64,
}

/// Machine-readable estimation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub iterations: usize,
    pub converged: bool,
    pub mse: f64,
    pub objective: f64,
    pub max_voltage_residual: f64,
    pub timings_ms: ReportTimings,
}

pub const REPORT_KEYS: [&str; 7] = [
    "mode",
    "iterations",
    "converged",
    "mse",
    "objective",
    "max_voltage_residual",
    "timings_ms",
];

pub const TIMING_KEYS: [&str; 5] = [
    "gain_formulation",
    "factorization",
    "residual_and_substitution_per_iter",
    "rhs_per_iter",
    "total",
];

impl Report {
    pub fn from_result(result: &EstimationResult) -> Self {
        let t = &result.timings;
        let per_iter = |total: f64| {
            if result.iterations == 0 {
                0.0
            } else {
                total / result.iterations as f64
            }
        };
        Report {
            mode: match result.mode {
                EstimationMode::FullNewton => "full".into(),
                EstimationMode::FastDecoupled => "decoupled".into(),
            },
            iterations: result.iterations,
            converged: result.converged,
            mse: result.mse,
            objective: result.objective,
            max_voltage_residual: result.max_voltage_residual,
            timings_ms: ReportTimings {
                gain_formulation: t.gain_formulation_ms,
                factorization: t.factorization_ms,
                residual_and_substitution_per_iter: per_iter(t.residual_and_substitution_ms),
                rhs_per_iter: per_iter(t.rhs_ms),
                total: t.total_ms,
            },
        }
    }
}

pub fn write_report(result: &EstimationResult) -> String {
    let mut text =
        serde_json::to_string_pretty(&Report::from_result(result)).expect("report serialization is infallible");
    text.push('\n');
    text
}

/// Checks that `text` is a report document: every key present with the right
/// JSON type, and nothing else.
pub fn validate_report(text: &str) -> Result<Report, String> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let object = value.as_object().ok_or("report is not an object")?;
    for key in REPORT_KEYS {
        if !object.contains_key(key) {
            return Err(format!("missing key `{key}`"));
        }
    }
    if object.len() != REPORT_KEYS.len() {
        return Err("unexpected extra keys".into());
    }
    let timings = object["timings_ms"]
        .as_object()
        .ok_or("`timings_ms` is not an object")?;
    for key in TIMING_KEYS {
        let v = timings
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| format!("missing numeric timing `{key}`"))?;
        if v < 0.0 {
            return Err(format!("negative timing `{key}`"));
        }
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}
