//! Activity labels, windows, datasets and the transformations between them.

mod motionsense;
pub mod synthetic;
mod ucihar;

pub use motionsense::{load_motionsense, motionsense_split, motionsense_windows, MOTIONSENSE_COLUMNS};
pub use ucihar::{load_ucihar, Split, UCIHAR_SIGNALS};

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per window for both datasets (2.56 s at 50 Hz).
pub const WINDOW_LEN: usize = 128;
/// Fraction of consecutive windows that overlap when windowing raw streams.
pub const WINDOW_OVERLAP: f64 = 0.5;
/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activity {
    Walking,
    WalkingUpstairs,
    WalkingDownstairs,
    Sitting,
    Standing,
    Lying,
    Jogging,
}

impl Activity {
    pub const ALL: [Activity; 7] = [
        Activity::Walking,
        Activity::WalkingUpstairs,
        Activity::WalkingDownstairs,
        Activity::Sitting,
        Activity::Standing,
        Activity::Lying,
        Activity::Jogging,
    ];

    pub fn abbrev(self) -> &'static str {
        match self {
            Activity::Walking => "WA",
            Activity::WalkingUpstairs => "WU",
            Activity::WalkingDownstairs => "WD",
            Activity::Sitting => "SI",
            Activity::Standing => "ST",
            Activity::Lying => "LA",
            Activity::Jogging => "JG",
        }
    }

    pub fn from_abbrev(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.abbrev() == s)
    }

    pub fn superclass(self) -> Superclass {
        match self {
            Activity::Sitting | Activity::Standing | Activity::Lying => Superclass::Static,
            _ => Superclass::Dynamic,
        }
    }
}

impl fmt::Display for Activity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbrev())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Superclass {
    /// Body immobile.
    Static,
    /// Locomotion.
    Dynamic,
}

impl fmt::Display for Superclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Superclass::Static => "static",
            Superclass::Dynamic => "dynamic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DatasetKind {
    UciHar,
    MotionSense,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::UciHar => "ucihar",
            DatasetKind::MotionSense => "motionsense",
        }
    }

    /// Labels in the dataset's conventional order.
    pub fn labels(self) -> Vec<Activity> {
        use Activity::*;
        match self {
            DatasetKind::UciHar => vec![Walking, WalkingUpstairs, WalkingDownstairs, Sitting, Standing, Lying],
            DatasetKind::MotionSense => vec![Sitting, Standing, WalkingDownstairs, WalkingUpstairs, Jogging, Walking],
        }
    }

    pub fn static_labels(self) -> Vec<Activity> {
        self.labels_of(Superclass::Static)
    }

    pub fn dynamic_labels(self) -> Vec<Activity> {
        self.labels_of(Superclass::Dynamic)
    }

    pub fn labels_of(self, which: Superclass) -> Vec<Activity> {
        self.labels().into_iter().filter(|a| a.superclass() == which).collect()
    }

    /// Fused-model class order: static labels first, then dynamic.
    pub fn class_order(self) -> Vec<Activity> {
        let mut order = self.static_labels();
        order.extend(self.dynamic_labels());
        order
    }

    pub fn channels(self) -> usize {
        match self {
            DatasetKind::UciHar => UCIHAR_SIGNALS.len(),
            DatasetKind::MotionSense => MOTIONSENSE_COLUMNS.len(),
        }
    }

    pub fn total_subjects(self) -> usize {
        match self {
            DatasetKind::UciHar => 30,
            DatasetKind::MotionSense => 24,
        }
    }

    /// Subjects used for training and validation in the subject-disjoint split.
    pub fn train_subjects(self) -> usize {
        match self {
            DatasetKind::UciHar => 21,
            DatasetKind::MotionSense => 16,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ucihar" | "uci-har" | "uci_har" => Ok(DatasetKind::UciHar),
            "motionsense" | "motion-sense" => Ok(DatasetKind::MotionSense),
            other => Err(Error::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One fixed-length multichannel sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// [channels, len]
    pub signal: Tensor,
    pub label: Activity,
    pub subject: u32,
}

impl Window {
    pub fn superclass(&self) -> Superclass {
        self.label.superclass()
    }
}

/// A continuous multichannel recording of one subject doing one activity.
#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub subject: u32,
    pub label: Activity,
    pub trial: u32,
    /// Channel-major samples; all channels have equal length.
    pub channels: Vec<Vec<f64>>,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cuts `stream` into windows of `len` samples starting every
/// `len · (1 − overlap)` samples. A trailing partial window is dropped.
pub fn window_stream(stream: &Stream, len: usize, overlap: f64) -> Vec<Window> {
    let stride = ((len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    let total = stream.len();
    if len == 0 || total < len {
        return Vec::new();
    }
    let ch = stream.channels.len();
    (0..=total - len)
        .step_by(stride)
        .map(|start| {
            let mut data = Vec::with_capacity(ch * len);
            for c in &stream.channels {
                data.extend_from_slice(&c[start..start + len]);
            }
            Window {
                signal: Tensor::new(vec![ch, len], data).expect("window shape"),
                label: stream.label,
                subject: stream.subject,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Per-channel mean and population standard deviation over every sample
    /// of every window, with the standard deviation floored at [`STD_FLOOR`].
    pub fn from_windows(windows: &[Window]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("cannot compute channel statistics of zero windows".into()))?;
        let (ch, len) = (first.signal.shape()[0], first.signal.shape()[1]);
        let mut sum = vec![0.0; ch];
        let mut count = 0usize;
        for w in windows {
            if w.signal.shape() != [ch, len] {
                return Err(Error::shape("channel_stats", "windows differ in shape".to_string()));
            }
            for (c, row) in w.signal.data().chunks_exact(len).enumerate() {
                sum[c] += row.iter().sum::<f64>();
            }
            count += len;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; ch];
        for w in windows {
            for (c, row) in w.signal.data().chunks_exact(len).enumerate() {
                sq[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub windows: Vec<Window>,
    /// Statistics this dataset was normalized with, if any.
    pub channel_stats: Option<ChannelStats>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, windows: Vec<Window>) -> Self {
        Dataset {
            kind,
            windows,
            channel_stats: None,
        }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<u32> {
        self.windows
            .iter()
            .map(|w| w.subject)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn compute_stats(&self) -> Result<ChannelStats> {
        ChannelStats::from_windows(&self.windows)
    }

    fn with_windows(&self, windows: Vec<Window>) -> Dataset {
        Dataset {
            kind: self.kind,
            windows,
            channel_stats: self.channel_stats.clone(),
        }
    }

    pub fn filter(&self, keep: impl Fn(&Window) -> bool) -> Dataset {
        self.with_windows(self.windows.iter().filter(|w| keep(w)).cloned().collect())
    }

    pub fn only(&self, which: Superclass) -> Dataset {
        self.filter(|w| w.superclass() == which)
    }
}

/// Splits into (static, dynamic) windows; the two parts together hold every window.
pub fn partition_superclass(d: &Dataset) -> (Dataset, Dataset) {
    let (s, dy): (Vec<Window>, Vec<Window>) = d
        .windows
        .iter()
        .cloned()
        .partition(|w| w.superclass() == Superclass::Static);
    (d.with_windows(s), d.with_windows(dy))
}

/// Deterministic subject selection: sorts `subjects`, shuffles with `seed`
/// and returns (first `k` sorted, remaining sorted).
pub fn choose_subjects(subjects: &[u32], k: usize, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut order: Vec<u32> = subjects.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = k.min(order.len());
    let mut first = order[..k].to_vec();
    let mut rest = order[k..].to_vec();
    first.sort_unstable();
    rest.sort_unstable();
    (first, rest)
}

/// Subject-disjoint split into (train, test) with `train_subject_count`
/// subjects on the training side.
pub fn subject_split(d: &Dataset, train_subject_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let subjects = d.subjects();
    if train_subject_count >= subjects.len() {
        return Err(Error::Contract(format!(
            "cannot put {train_subject_count} of {} subjects in the training split",
            subjects.len()
        )));
    }
    let (train, _) = choose_subjects(&subjects, train_subject_count, seed);
    let (a, b): (Vec<Window>, Vec<Window>) = d
        .windows
        .iter()
        .cloned()
        .partition(|w| train.binary_search(&w.subject).is_ok());
    Ok((d.with_windows(a), d.with_windows(b)))
}

/// Per-channel z-scoring with the given (training) statistics.
pub fn normalize(d: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    let mut windows = d.windows.clone();
    for w in &mut windows {
        let (ch, len) = (w.signal.shape()[0], w.signal.shape()[1]);
        if ch != stats.channels() {
            return Err(Error::shape(
                "normalize",
                format!("window has {ch} channels, statistics have {}", stats.channels()),
            ));
        }
        for (c, row) in w.signal.data_mut().chunks_exact_mut(len).enumerate() {
            let (m, s) = (stats.mean[c], stats.std[c].max(STD_FLOOR));
            row.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
    Ok(Dataset {
        kind: d.kind,
        windows,
        channel_stats: Some(stats.clone()),
    })
}

/// Normalized train and test sets for one dataset.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: ChannelStats,
}

/// Loads the subject-disjoint train/test split of `kind` from `root` and
/// z-scores both parts with statistics of the training part. UCI HAR keeps
/// its published split; MotionSense subjects are drawn with `seed`.
pub fn load_experiment(kind: DatasetKind, root: &Path, seed: u64) -> Result<Experiment> {
    let (train, test) = load_raw_split(kind, root, seed)?;
    prepare(train, test)
}

/// Unnormalized (train, test) split.
pub fn load_raw_split(kind: DatasetKind, root: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    match kind {
        DatasetKind::UciHar => Ok((load_ucihar(root, Split::Train)?, load_ucihar(root, Split::Test)?)),
        DatasetKind::MotionSense => motionsense_split(root, seed),
    }
}

/// Normalizes both parts with the training statistics.
pub fn prepare(train: Dataset, test: Dataset) -> Result<Experiment> {
    let stats = train.compute_stats()?;
    Ok(Experiment {
        train: normalize(&train, &stats)?,
        test: normalize(&test, &stats)?,
        stats,
    })
}
