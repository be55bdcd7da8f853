//! Synthetic inertial recordings written in the same on-disk layouts the real
//! loaders read. Used to exercise the full pipeline where the public datasets
//! are not available.
//!
//! Static activities hold a class-specific gravity orientation with small
//! jitter; dynamic activities add periodic body acceleration and rotation at a
//! class-specific cadence and amplitude. Every subject gets its own tilt,
//! amplitude and cadence scaling so subject-disjoint splits are meaningful.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::motionsense::activity_code;
use super::ucihar::activity_id;
use super::{window_stream, Activity, DatasetKind, Stream, Window, UCIHAR_SIGNALS, WINDOW_LEN, WINDOW_OVERLAP};
use crate::error::{Error, Result};

const SAMPLE_RATE: f64 = 50.0;

/// Subjects the published UCI HAR archive places in its test split.
pub const UCIHAR_TEST_SUBJECTS: [u32; 9] = [2, 4, 9, 10, 12, 13, 18, 20, 24];

/// Trial directory numbers of the published MotionSense archive.
const MOTIONSENSE_TRIALS: [(Activity, &[u32]); 6] = [
    (Activity::WalkingDownstairs, &[1, 2, 11]),
    (Activity::WalkingUpstairs, &[3, 4, 12]),
    (Activity::Walking, &[7, 8, 15]),
    (Activity::Jogging, &[9, 16]),
    (Activity::Sitting, &[5, 13]),
    (Activity::Standing, &[6, 14]),
];

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub subjects: u32,
    /// Windows generated per (subject, activity) for the windowed format, or
    /// per (subject, trial) for the stream format.
    pub windows_per_recording: usize,
    /// Standard deviation of additive sensor noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn for_dataset(kind: DatasetKind, windows_per_recording: usize) -> Self {
        SyntheticConfig {
            subjects: kind.total_subjects() as u32,
            windows_per_recording,
            noise: 0.05,
            seed: 7,
        }
    }
}

struct SubjectTraits {
    tilt: [f64; 2],
    amplitude: f64,
    cadence: f64,
}

fn subject_traits(seed: u64, subject: u32) -> SubjectTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    rng.set_stream(u64::from(subject));
    SubjectTraits {
        tilt: [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)],
        amplitude: rng.random_range(0.85..1.15),
        cadence: rng.random_range(0.92..1.08),
    }
}

fn rotate(v: [f64; 3], tilt: [f64; 2]) -> [f64; 3] {
    let (sa, ca) = tilt[0].sin_cos();
    let (sb, cb) = tilt[1].sin_cos();
    let y = [v[0], v[1] * ca - v[2] * sa, v[1] * sa + v[2] * ca];
    [y[0] * cb + y[2] * sb, y[1], -y[0] * sb + y[2] * cb]
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Gravity direction (in g) and motion profile (cadence Hz, amplitude g,
/// forward/vertical mix) per activity.
fn profile(a: Activity) -> ([f64; 3], f64, f64, f64) {
    match a {
        Activity::Standing => ([1.0, 0.0, 0.0], 0.0, 0.0, 0.0),
        Activity::Sitting => (normalized([0.85, 0.1, 0.5]), 0.0, 0.0, 0.0),
        Activity::Lying => (normalized([0.1, 0.3, 0.95]), 0.0, 0.0, 0.0),
        Activity::Walking => ([1.0, 0.0, 0.0], 1.8, 0.30, 0.4),
        Activity::WalkingUpstairs => (normalized([0.97, 0.0, 0.25]), 1.5, 0.25, 0.9),
        Activity::WalkingDownstairs => (normalized([0.97, 0.0, -0.2]), 2.1, 0.45, 0.2),
        Activity::Jogging => ([1.0, 0.0, 0.0], 2.8, 0.85, 0.5),
    }
}

/// Gravity, body acceleration and angular rate, each as three channels.
struct Motion {
    gravity: [Vec<f64>; 3],
    body: [Vec<f64>; 3],
    gyro: [Vec<f64>; 3],
}

fn simulate(cfg: &SyntheticConfig, subject: u32, activity: Activity, trial: u32, samples: usize) -> Motion {
    let traits = subject_traits(cfg.seed, subject);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((u64::from(subject) << 32) | (u64::from(trial) << 8) | activity as u64);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let phase: f64 = rng.random_range(0.0..2.0 * PI);
    let (g_dir, freq, amp, mix) = profile(activity);
    let g = rotate(g_dir, traits.tilt);
    let freq = freq * traits.cadence;
    let amp = amp * traits.amplitude;

    let mut m = Motion {
        gravity: Default::default(),
        body: Default::default(),
        gyro: Default::default(),
    };
    for i in 0..samples {
        let t = i as f64 / SAMPLE_RATE;
        let w = 2.0 * PI * freq * t + phase;
        let sway = 0.05 * amp * (0.5 * w).sin();
        let gravity = [g[0], g[1] + sway, g[2] - sway];
        let body = [
            amp * (w.sin() + 0.3 * (2.0 * w).sin()),
            0.5 * amp * (0.5 * w).sin(),
            mix * amp * (w + 0.8).cos(),
        ];
        let gyro = [
            0.6 * amp * (0.5 * w + 0.3).sin(),
            mix * 1.2 * amp * w.cos(),
            0.8 * amp * (w - 0.4).sin(),
        ];
        for c in 0..3 {
            m.gravity[c].push(gravity[c] + 0.2 * noise.sample(&mut rng));
            m.body[c].push(body[c] + noise.sample(&mut rng));
            m.gyro[c].push(gyro[c] + noise.sample(&mut rng));
        }
    }
    m
}

fn samples_for(windows: usize) -> usize {
    let stride = (WINDOW_LEN as f64 * (1.0 - WINDOW_OVERLAP)) as usize;
    WINDOW_LEN + stride * windows.saturating_sub(1)
}

/// One 9-channel stream in the UCI HAR channel order.
pub fn ucihar_stream(cfg: &SyntheticConfig, subject: u32, activity: Activity) -> Stream {
    let m = simulate(cfg, subject, activity, 0, samples_for(cfg.windows_per_recording));
    let total: Vec<Vec<f64>> = (0..3)
        .map(|c| m.body[c].iter().zip(&m.gravity[c]).map(|(b, g)| b + g).collect())
        .collect();
    let [bx, by, bz] = m.body;
    let [gx, gy, gz] = m.gyro;
    let [tx, ty, tz]: [Vec<f64>; 3] = total.try_into().expect("three axes");
    Stream {
        subject,
        label: activity,
        trial: 0,
        channels: vec![bx, by, bz, tx, ty, tz, gx, gy, gz],
    }
}

/// One 12-channel stream in the MotionSense column order.
pub fn motionsense_stream(cfg: &SyntheticConfig, subject: u32, activity: Activity, trial: u32) -> Stream {
    let m = simulate(cfg, subject, activity, trial, samples_for(cfg.windows_per_recording));
    let n = m.gravity[0].len();
    let mut roll = Vec::with_capacity(n);
    let mut pitch = Vec::with_capacity(n);
    let mut yaw = Vec::with_capacity(n);
    let mut heading = 0.1 * f64::from(trial);
    for i in 0..n {
        let (gx, gy, gz) = (m.gravity[0][i], m.gravity[1][i], m.gravity[2][i]);
        roll.push(gy.atan2(gz));
        pitch.push((-gx).clamp(-1.0, 1.0).asin());
        heading += m.gyro[2][i] / SAMPLE_RATE;
        yaw.push(heading);
    }
    let [gx, gy, gz] = m.gravity;
    let [rx, ry, rz] = m.gyro;
    let [ux, uy, uz] = m.body;
    Stream {
        subject,
        label: activity,
        trial,
        channels: vec![roll, pitch, yaw, gx, gy, gz, rx, ry, rz, ux, uy, uz],
    }
}

/// In-memory UCI HAR-like windows for every subject and activity.
pub fn ucihar_windows(cfg: &SyntheticConfig) -> Vec<Window> {
    let mut out = Vec::new();
    for subject in 1..=cfg.subjects {
        for activity in DatasetKind::UciHar.labels() {
            out.extend(window_stream(&ucihar_stream(cfg, subject, activity), WINDOW_LEN, WINDOW_OVERLAP));
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a UCI HAR-shaped archive under `root` (train/ and test/ with
/// `Inertial Signals`), splitting subjects like the published archive.
pub fn write_ucihar(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    let windows = ucihar_windows(cfg);
    for split in ["train", "test"] {
        let part: Vec<&Window> = windows
            .iter()
            .filter(|w| UCIHAR_TEST_SUBJECTS.contains(&w.subject) == (split == "test"))
            .collect();
        let mut signals = vec![String::new(); UCIHAR_SIGNALS.len()];
        let mut labels = String::new();
        let mut subjects = String::new();
        for w in &part {
            for (c, row) in w.signal.data().chunks_exact(WINDOW_LEN).enumerate() {
                for v in row {
                    let _ = write!(signals[c], " {v:>15.7e}");
                }
                signals[c].push('\n');
            }
            let id = activity_id(w.label).expect("UCI HAR label");
            let _ = writeln!(labels, "{id}");
            let _ = writeln!(subjects, "{}", w.subject);
        }
        let base = root.join(split);
        for (name, text) in UCIHAR_SIGNALS.iter().zip(&signals) {
            write(&base.join("Inertial Signals").join(format!("{name}_{split}.txt")), text)?;
        }
        write(&base.join(format!("y_{split}.txt")), &labels)?;
        write(&base.join(format!("subject_{split}.txt")), &subjects)?;
    }
    Ok(())
}

/// Writes a MotionSense-shaped `A_DeviceMotion_data` tree under `root`.
pub fn write_motionsense(root: &Path, cfg: &SyntheticConfig) -> Result<()> {
    let base = root.join("A_DeviceMotion_data");
    for (activity, trials) in MOTIONSENSE_TRIALS {
        let code = activity_code(activity).expect("MotionSense label");
        for &trial in trials {
            for subject in 1..=cfg.subjects {
                let s = motionsense_stream(cfg, subject, activity, trial);
                let mut text = String::from("\"\"");
                for col in super::MOTIONSENSE_COLUMNS {
                    text.push(',');
                    text.push_str(col);
                }
                text.push('\n');
                for i in 0..s.len() {
                    let _ = write!(text, "{i}");
                    for c in &s.channels {
                        let _ = write!(text, ",{}", c[i]);
                    }
                    text.push('\n');
                }
                write(&base.join(format!("{code}_{trial}")).join(format!("sub_{subject}.csv")), &text)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_motionsense, load_ucihar, Split, Superclass};

    fn small(kind: DatasetKind) -> SyntheticConfig {
        SyntheticConfig {
            subjects: kind.total_subjects() as u32,
            windows_per_recording: 2,
            noise: 0.05,
            seed: 3,
        }
    }

    #[test]
    fn ucihar_archive_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(DatasetKind::UciHar);
        write_ucihar(dir.path(), &cfg).unwrap();
        let train = load_ucihar(dir.path(), Split::Train).unwrap();
        let test = load_ucihar(dir.path(), Split::Test).unwrap();
        assert_eq!(train.subjects().len(), 21);
        assert_eq!(test.subjects(), UCIHAR_TEST_SUBJECTS);
        assert_eq!(train.len() + test.len(), 30 * 6 * 2);
        let w = &test.windows[0];
        assert_eq!(w.signal.shape(), [9, 128]);
        let orig = ucihar_windows(&cfg)
            .into_iter()
            .find(|o| o.subject == w.subject && o.label == w.label)
            .unwrap();
        for (a, b) in orig.signal.data().iter().zip(w.signal.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn motionsense_tree_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { subjects: 3, ..small(DatasetKind::MotionSense) };
        write_motionsense(dir.path(), &cfg).unwrap();
        let streams = load_motionsense(dir.path()).unwrap();
        assert_eq!(streams.len(), 15 * 3);
        assert!(streams.iter().all(|s| s.channels.len() == 12 && s.len() == 192));
        let want = motionsense_stream(&cfg, streams[0].subject, streams[0].label, streams[0].trial);
        assert_eq!(streams[0], want);
    }

    #[test]
    fn static_classes_are_quiet() {
        let cfg = small(DatasetKind::UciHar);
        for a in DatasetKind::UciHar.labels() {
            let s = ucihar_stream(&cfg, 1, a);
            let energy: f64 = s.channels[0].iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
            if a.superclass() == Superclass::Static {
                assert!(energy < 0.01, "{a}: {energy}");
            } else {
                assert!(energy > 0.02, "{a}: {energy}");
            }
        }
    }
}
