//! Writes synthetic recordings in the UCI HAR and MotionSense layouts.
//!
//! ```text
//! cargo run --release -p fusionact-core --example synthetic_data -- OUT_DIR [WINDOWS_PER_RECORDING]
//! ```
//!
//! Produces `OUT_DIR/ucihar` and `OUT_DIR/motionsense`, usable as `root` in a
//! run config.

use std::path::PathBuf;
use std::process::ExitCode;

use fusionact_core::data::synthetic::{write_motionsense, write_ucihar, SyntheticConfig};
use fusionact_core::data::DatasetKind;

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1);
    let Some(out) = args.next().map(PathBuf::from) else {
        eprintln!("usage: synthetic_data OUT_DIR [WINDOWS_PER_RECORDING]");
        return ExitCode::from(2);
    };
    let per = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let result = write_ucihar(&out.join("ucihar"), &SyntheticConfig::for_dataset(DatasetKind::UciHar, per))
        .and_then(|()| {
            write_motionsense(
                &out.join("motionsense"),
                &SyntheticConfig::for_dataset(DatasetKind::MotionSense, per),
            )
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
