//! Batch stages behind the `fsgt` command line: synth, probe, fit, bridge
//! and audit. Each stage reads and writes plain files under an output
//! directory so runs can be resumed and audited.

pub mod audit;
pub mod bridge;
pub mod config;
pub mod fit;
pub mod json;
pub mod probe;
pub mod synth;

pub use audit::{cmd_audit, AuditReport};
pub use bridge::{cmd_bridge, BridgeReport};
pub use config::RunConfig;
pub use fit::{cmd_fit, FigureSummary, FitsFile};
pub use probe::{cmd_probe, ProbeOutcome, TemporalDynamicsFile};
pub use synth::cmd_synth;
