//! Artifact plumbing and subcommand drivers behind the `cobert` binary:
//! tensor/wav/manifest/checkpoint formats, flat key=value configs with
//! snapshots, run-directory layout, TSV reports, and the pipeline commands.

pub mod checkpoint;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod rundir;
pub mod tnsr;
pub mod wavio;
