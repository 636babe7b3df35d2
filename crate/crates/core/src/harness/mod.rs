//! Run configuration files, checkpoints, the block runtime benchmark and the
//! property-check suites behind the command-line tool.

pub mod bench;
pub mod check;
pub mod checkpoint;
pub mod config;

pub use bench::{run_bench, BenchConfig, BenchReport, BenchRow, BlockKind};
pub use check::{run_suite, CaseResult, CheckReport, Suite};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use config::RunConfig;
