//! Synthetic round workloads, trace execution over the three serving paths,
//! reports, and the command line.
//!
//! Paths: `T1` recomputes every prompt from scratch and is the fidelity
//! oracle, `T2` recovers each request on its own, `T3` groups compatible
//! requests and stores each group as a master/mirror family.

pub mod cli;
pub mod config;
pub mod report;
pub mod trace;
pub mod verify;
pub mod workload;

pub use config::{load_spec, parse_spec, ConfigError, HistoryLen, PathLabel, WorkloadSpec};
pub use report::{Report, ReportRow};
pub use trace::{run_trace, TraceError, TraceOutput};
pub use workload::Workload;
