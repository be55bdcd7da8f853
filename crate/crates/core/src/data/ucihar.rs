//! Loader for the raw inertial signals of the UCI HAR smartphone dataset.
//!
//! Expected layout (the published archive, optionally without its top-level
//! `UCI HAR Dataset` directory):
//!
//! ```text
//! <root>/train/Inertial Signals/body_acc_x_train.txt   (one window per row, 128 floats)
//! <root>/train/y_train.txt                              (label id 1..6 per row)
//! <root>/train/subject_train.txt                        (subject id per row)
//! <root>/test/...                                       (same with _test)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Activity, Dataset, DatasetKind, Window, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Signal files in channel order.
pub const UCIHAR_SIGNALS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Label ids 1..=6 of the published archive.
pub(crate) fn activity_from_id(id: u32) -> Option<Activity> {
    use Activity::*;
    [Walking, WalkingUpstairs, WalkingDownstairs, Sitting, Standing, Lying]
        .get(id.checked_sub(1)? as usize)
        .copied()
}

pub(crate) fn activity_id(a: Activity) -> Option<u32> {
    (1..=6).find(|&id| activity_from_id(id) == Some(a))
}

fn resolve_root(root: &Path) -> PathBuf {
    let nested = root.join("UCI HAR Dataset");
    if !root.join("train").is_dir() && nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_signal_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if row.len() != WINDOW_LEN {
                return Err(Error::Data(format!(
                    "{}:{}: expected {WINDOW_LEN} values, found {}",
                    path.display(),
                    i + 1,
                    row.len()
                )));
            }
            Ok(row)
        })
        .collect()
}

fn parse_ids(path: &Path) -> Result<Vec<u32>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<u32>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Loads one split as 9-channel × 128-sample windows in file row order.
pub fn load_ucihar(root: &Path, split: Split) -> Result<Dataset> {
    let base = resolve_root(root).join(split.name());
    let s = split.name();
    let signals: Vec<Vec<Vec<f64>>> = UCIHAR_SIGNALS
        .par_iter()
        .map(|name| parse_signal_file(&base.join("Inertial Signals").join(format!("{name}_{s}.txt"))))
        .collect::<Result<_>>()?;
    let labels = parse_ids(&base.join(format!("y_{s}.txt")))?;
    let subjects = parse_ids(&base.join(format!("subject_{s}.txt")))?;

    let n = labels.len();
    if subjects.len() != n || signals.iter().any(|rows| rows.len() != n) {
        return Err(Error::Data(format!(
            "row counts disagree in {}: {n} labels, {} subjects, signals {:?}",
            base.display(),
            subjects.len(),
            signals.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }

    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let label = activity_from_id(labels[i])
            .ok_or_else(|| Error::Data(format!("unknown label id {} at row {}", labels[i], i + 1)))?;
        let mut data = Vec::with_capacity(UCIHAR_SIGNALS.len() * WINDOW_LEN);
        for channel in &signals {
            data.extend_from_slice(&channel[i]);
        }
        windows.push(Window {
            signal: Tensor::new(vec![UCIHAR_SIGNALS.len(), WINDOW_LEN], data)?,
            label,
            subject: subjects[i],
        });
    }
    Ok(Dataset::new(DatasetKind::UciHar, windows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_ids_round_trip() {
        for id in 1..=6 {
            assert_eq!(activity_id(activity_from_id(id).unwrap()), Some(id));
        }
        assert_eq!(activity_from_id(0), None);
        assert_eq!(activity_from_id(7), None);
        assert_eq!(activity_from_id(6), Some(Activity::Lying));
    }

    #[test]
    fn parses_published_number_format() {
        // The archive writes exponents with three digits.
        assert_eq!("1.8085150e-004".parse::<f64>().unwrap(), 1.808515e-4);
        assert_eq!("-9.9876700e-001".parse::<f64>().unwrap(), -0.998767);
    }

    #[test]
    fn missing_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_ucihar(dir.path(), Split::Train), Err(Error::Io { .. })));
    }
}
