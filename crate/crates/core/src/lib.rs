//! Trace-driven simulator of a host CPU next to a 3D-stacked memory with
//! processing-in-memory logic in every vault.
//!
//! * [`machine`]: machine parameters and the vault mapping.
//! * [`trace`]: workload traces, their text format and generators.
//! * [`xlat`]: TLBs, the four-level table and the region-based PIM table.
//! * [`coherence`]: CPU/PIM coherence mechanisms.
//! * [`pei`]: PIM-enabled instructions.
//! * [`engine`]: the simulator and mechanism comparisons.
//! * [`analyzer`]: picks PIM targets from per-function profiles.

pub mod analyzer;
pub mod coherence;
pub mod engine;
pub mod machine;
pub mod par;
pub mod pei;
pub mod trace;
pub mod xlat;
