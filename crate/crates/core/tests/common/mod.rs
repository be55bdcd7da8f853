#![allow(dead_code)]

use fusionact_core::data::synthetic::{ucihar_windows, SyntheticConfig};
use fusionact_core::data::{self, Dataset, DatasetKind};
use fusionact_core::model::{Architecture, GuidanceConfig, PathwayConfig};
use fusionact_core::nn::BlockSpec;
use fusionact_core::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `Σ y ⊙ w`: a scalar objective that does not vanish under batch-norm centring.
pub fn projected(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Two small blocks per expert and one guidance block.
pub fn tiny_arch(channels: usize, window_len: usize, n_static: usize, n_dynamic: usize) -> Architecture {
    let path = |n| PathwayConfig {
        blocks: vec![BlockSpec::new(channels, 4, 2), BlockSpec::new(4, 4, 2)],
        num_outputs: n,
    };
    Architecture {
        in_channels: channels,
        window_len,
        static_path: path(n_static),
        dynamic_path: path(n_dynamic),
        guidance: GuidanceConfig {
            channels: vec![channels, 4, 4],
        },
    }
}

/// Normalized synthetic UCI HAR-shaped experiment split like the published archive.
pub fn synthetic_ucihar(windows_per_recording: usize, noise: f64) -> data::Experiment {
    let cfg = SyntheticConfig {
        noise,
        ..SyntheticConfig::for_dataset(DatasetKind::UciHar, windows_per_recording)
    };
    let all = Dataset::new(DatasetKind::UciHar, ucihar_windows(&cfg));
    let test_subjects = data::synthetic::UCIHAR_TEST_SUBJECTS;
    let train = all.filter(|w| !test_subjects.contains(&w.subject));
    let test = all.filter(|w| test_subjects.contains(&w.subject));
    data::prepare(train, test).unwrap()
}
