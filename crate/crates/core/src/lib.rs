//! Graph-parallel weighted-least-squares state estimation for power networks.
//!
//! Buses are vertices and branches are edges. Each vertex assembles its own
//! dense Jacobian, gain and right-hand-side blocks from local data; the
//! blocks are merged into a CSR gain matrix that is factorized by a
//! level-scheduled sparse Cholesky. [`estimator::estimate`] drives the
//! Gauss-Newton loop in full-Newton or fast-decoupled form.

pub mod assembly;
pub mod bench;
pub mod case_io;
pub mod engine;
pub mod estimator;
pub mod measurement;
pub mod network;
pub mod sparse;

pub use case_io::{parse_case, parse_measurements, write_measurements, write_report, NetworkCase};
pub use estimator::{estimate, EstimationMode, EstimationOptions, EstimationResult};
pub use measurement::{MeasurementSet, PartitionedMeasurements, SystemState};
pub use network::{build_graph, PowerGraph};
