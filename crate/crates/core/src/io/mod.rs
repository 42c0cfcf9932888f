//! Configuration, data ingestion, chain persistence and report files.

mod chainfile;
mod config;
mod dataset;
mod report;

pub use chainfile::{fvals_digest, load_chain, mask_bits, parse_mask_bits, persist_chain, DirLock, CHAIN_FILE};
pub use config::{parse_config, serialize_config, ParsedConfig, RunConfig, TruthShape, KEYS};
pub use dataset::{read_dataset, write_dataset, ReadOptions};
pub use report::{emit_report, Report};

/// Seventeen significant digits in scientific notation, enough to round-trip
/// any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
