//! Filesystem and command-line layer over `modellab-core`: run configs,
//! checkpoints, metrics logs, rendered reports, and the subcommand
//! implementations the `modellab` binary dispatches to.
//!
//! Everything here follows two contracts: outputs are written atomically
//! (temp file + rename), and every artifact records the seed and argument
//! list that produced it, so any run can be reproduced from its own files.

pub mod checkpoint;
pub mod config;
pub mod dims;
pub mod fsutil;
pub mod metrics;
pub mod report;
pub mod runner;
