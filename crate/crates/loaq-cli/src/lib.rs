//! Std-side companion to `loaq-core`: model persistence, calibration
//! ingestion, report files, and a wall clock for phase timings. The
//! binary in `main.rs` wires these into the `loaq` command-line tool.

pub mod clock;
pub mod config;
pub mod model_io;
pub mod report;
pub mod search;

pub use clock::StdClock;
pub use config::CalibSource;
pub use model_io::{load_model, save_model};
