//! Loader for the MotionSense device-motion recordings.
//!
//! Expected layout:
//!
//! ```text
//! <root>/A_DeviceMotion_data/wlk_7/sub_1.csv
//! <root>/A_DeviceMotion_data/sit_5/sub_24.csv
//! ```
//!
//! Directory names are `<activity code>_<trial>`; each CSV has a header row and
//! an unnamed leading index column. The root may also point straight at the
//! `A_DeviceMotion_data` directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{window_stream, Activity, Dataset, DatasetKind, Stream, WINDOW_LEN, WINDOW_OVERLAP};
use crate::error::{Error, Result};

/// Feature columns in channel order, located by header name.
pub const MOTIONSENSE_COLUMNS: [&str; 12] = [
    "attitude.roll",
    "attitude.pitch",
    "attitude.yaw",
    "gravity.x",
    "gravity.y",
    "gravity.z",
    "rotationRate.x",
    "rotationRate.y",
    "rotationRate.z",
    "userAcceleration.x",
    "userAcceleration.y",
    "userAcceleration.z",
];

pub(crate) fn activity_from_code(code: &str) -> Option<Activity> {
    Some(match code {
        "dws" => Activity::WalkingDownstairs,
        "ups" => Activity::WalkingUpstairs,
        "wlk" => Activity::Walking,
        "jog" => Activity::Jogging,
        "sit" => Activity::Sitting,
        "std" => Activity::Standing,
        _ => return None,
    })
}

pub(crate) fn activity_code(a: Activity) -> Option<&'static str> {
    ["dws", "ups", "wlk", "jog", "sit", "std"]
        .into_iter()
        .find(|c| activity_from_code(c) == Some(a))
}

fn resolve_root(root: &Path) -> PathBuf {
    let nested = root.join("A_DeviceMotion_data");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn parse_trial_dir(name: &str) -> Option<(Activity, u32)> {
    let (code, trial) = name.split_once('_')?;
    Some((activity_from_code(code)?, trial.parse().ok()?))
}

fn parse_subject_file(name: &str) -> Option<u32> {
    name.strip_prefix("sub_")?.strip_suffix(".csv")?.parse().ok()
}

fn parse_csv(path: &Path, subject: u32, label: Activity, trial: u32) -> Result<Stream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?
        .split(',')
        .map(|h| h.trim().trim_matches('"'))
        .collect();
    let idx: Vec<usize> = MOTIONSENSE_COLUMNS
        .iter()
        .map(|col| {
            header
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| Error::Data(format!("{}: missing column {col}", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut channels = vec![Vec::new(); MOTIONSENSE_COLUMNS.len()];
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Data(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                row + 2,
                header.len(),
                fields.len()
            )));
        }
        for (c, &i) in idx.iter().enumerate() {
            let v = fields[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), row + 2)))?;
            channels[c].push(v);
        }
    }
    Ok(Stream {
        subject,
        label,
        trial,
        channels,
    })
}

/// Reads every (trial, subject) recording as one continuous stream, sorted by
/// (trial directory name, subject). Unrecognised entries are ignored.
pub fn load_motionsense(root: &Path) -> Result<Vec<Stream>> {
    let base = resolve_root(root);
    let mut files = Vec::new();
    let entries = fs::read_dir(&base).map_err(|e| Error::io(&base, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&base, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some((label, trial)) = parse_trial_dir(&name) else { continue };
        if !entry.path().is_dir() {
            continue;
        }
        let dir = entry.path();
        for f in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let f = f.map_err(|e| Error::io(&dir, e))?;
            if let Some(subject) = parse_subject_file(&f.file_name().to_string_lossy()) {
                files.push((name.clone(), subject, label, trial, f.path()));
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Data(format!("no recordings found under {}", base.display())));
    }
    files.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    files
        .par_iter()
        .map(|(_, subject, label, trial, path)| parse_csv(path, *subject, *label, *trial))
        .collect()
}

/// Windows every stream (128 samples, 50% overlap) into one dataset.
pub fn motionsense_windows(streams: &[Stream]) -> Dataset {
    let windows = streams
        .iter()
        .flat_map(|s| window_stream(s, WINDOW_LEN, WINDOW_OVERLAP))
        .collect();
    Dataset::new(DatasetKind::MotionSense, windows)
}

/// Loads, windows and splits MotionSense into subject-disjoint (train, test)
/// with the standard training-subject count.
pub fn motionsense_split(root: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    let all = motionsense_windows(&load_motionsense(root)?);
    super::subject_split(&all, DatasetKind::MotionSense.train_subjects(), seed)
}
