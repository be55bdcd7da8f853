mod common;

use std::collections::BTreeSet;

use common::tiny_arch;
use fusionact_core::checkpoint::Checkpoint;
use fusionact_core::data::{self, Activity, ChannelStats, Dataset, DatasetKind, Stream, Window};
use fusionact_core::model::{fuse, FusionModel};
use fusionact_core::train::{validation_split, MetricsReport};
use fusionact_core::{Graph, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;

fn softmax_rows(rows: usize, cols: usize, z: Vec<f64>) -> Tensor {
    let mut g = Graph::new();
    let v = g.input(Tensor::new(vec![rows, cols], z).unwrap());
    let p = g.softmax(v, 1).unwrap();
    g.value(p).clone()
}

fn fusion_inputs() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(b, ns, nd)| {
        (Just(b), Just(ns), Just(nd), vec(-15.0f64..15.0, b * ns), vec(-15.0f64..15.0, b * nd))
    })
}

fn windows_strategy() -> impl Strategy<Value = Vec<Window>> {
    vec((1u32..12, 0usize..7, vec(-5.0f64..5.0, 2 * 4)), 2..40).prop_map(|items| {
        items
            .into_iter()
            .map(|(subject, a, data)| Window {
                signal: Tensor::new(vec![2, 4], data).unwrap(),
                label: Activity::ALL[a],
                subject,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn fused_rows_are_distributions(
        (batch, ns, nd, zs, zd) in fusion_inputs(),
        gate_logit in -40.0f64..40.0,
    ) {
        let ps = softmax_rows(batch, ns, zs);
        let pd = softmax_rows(batch, nd, zd);
        let gate = 1.0 / (1.0 + (-gate_logit).exp());
        let out = fuse(&ps, &pd, &Tensor::full(&[batch, 1], gate)).unwrap();
        prop_assert_eq!(out.shape(), &[batch, ns + nd][..]);
        for (b, row) in out.data().chunks_exact(ns + nd).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            // The static block carries exactly `gate` of the mass.
            let s: f64 = row[..ns].iter().sum();
            prop_assert!((s - gate).abs() <= 1e-9);
            for (v, p) in row[..ns].iter().zip(&ps.data()[b * ns..(b + 1) * ns]) {
                prop_assert!((v - gate * p).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn softmax_ignores_row_shifts(z in vec(-20.0f64..20.0, 6), shift in -50.0f64..50.0) {
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let v = g.input(Tensor::new(vec![2, 3], data).unwrap());
            let p = g.softmax(v, 1).unwrap();
            g.value(p).data().to_vec()
        };
        let a = run(z.clone());
        let b = run(z.iter().map(|v| v + shift).collect());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for row in a.chunks_exact(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn windows_are_contiguous_slices(total in 0usize..400, len in 1usize..64, overlap in 0.0f64..0.9) {
        let stream = Stream {
            subject: 3,
            label: Activity::Walking,
            trial: 1,
            channels: (0..2).map(|c| (0..total).map(|t| (c * 1000 + t) as f64).collect()).collect(),
        };
        let ws = data::window_stream(&stream, len, overlap);
        let stride = ((len as f64) * (1.0 - overlap)).round().max(1.0) as usize;
        let expected = if total < len { 0 } else { (total - len) / stride + 1 };
        prop_assert_eq!(ws.len(), expected);
        for (i, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.signal.shape(), &[2, len][..]);
            prop_assert_eq!((w.subject, w.label), (3, Activity::Walking));
            for c in 0..2 {
                for t in 0..len {
                    prop_assert_eq!(w.signal.data()[c * len + t], (c * 1000 + i * stride + t) as f64);
                }
            }
        }
    }

    #[test]
    fn subject_split_is_disjoint_and_complete(windows in windows_strategy(), k in 0usize..12, seed in any::<u64>()) {
        let d = Dataset::new(DatasetKind::UciHar, windows);
        let subjects = d.subjects();
        match data::subject_split(&d, k, seed) {
            Err(_) => prop_assert!(k >= subjects.len()),
            Ok((train, test)) => {
                let a: BTreeSet<u32> = train.subjects().into_iter().collect();
                let b: BTreeSet<u32> = test.subjects().into_iter().collect();
                prop_assert!(a.is_disjoint(&b));
                prop_assert_eq!(a.len(), k);
                prop_assert_eq!(train.len() + test.len(), d.len());
                let again = data::subject_split(&d, k, seed).unwrap();
                prop_assert_eq!(again.0.windows, train.windows);
            }
        }
    }

    #[test]
    fn validation_holds_out_whole_subjects(windows in windows_strategy(), fraction in 0.0f64..0.6, seed in any::<u64>()) {
        let d = Dataset::new(DatasetKind::UciHar, windows);
        let (train, val) = validation_split(&d, fraction, seed);
        if fraction <= 0.0 || d.subjects().len() < 2 {
            prop_assert_eq!(train.len(), d.len());
            prop_assert_eq!(val.len(), d.len());
        } else {
            let a: BTreeSet<u32> = train.subjects().into_iter().collect();
            let b: BTreeSet<u32> = val.subjects().into_iter().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert!(!a.is_empty() && !b.is_empty());
            prop_assert_eq!(train.len() + val.len(), d.len());
        }
    }

    #[test]
    fn normalized_training_data_is_standardized(windows in windows_strategy()) {
        let d = Dataset::new(DatasetKind::UciHar, windows);
        let stats = d.compute_stats().unwrap();
        let n = data::normalize(&d, &stats).unwrap();
        let again = ChannelStats::from_windows(&n.windows).unwrap();
        for c in 0..2 {
            prop_assert!(again.mean[c].abs() <= 1e-9);
            if stats.std[c] > 1e-6 {
                prop_assert!((again.std[c] - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn metrics_are_consistent(pairs in vec((0usize..5, 0usize..5), 1..60)) {
        let (preds, truths): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let labels = (0..5).map(|i| format!("c{i}")).collect();
        let r = MetricsReport::from_predictions(&preds, &truths, labels).unwrap();
        let correct = pairs.iter().filter(|(p, t)| p == t).count();
        prop_assert!((r.accuracy - correct as f64 / pairs.len() as f64).abs() <= 1e-12);
        for (row, &present) in r.confusion.iter().zip(&r.present) {
            let s: f64 = row.iter().sum();
            let ok = if present { (s - 1.0).abs() <= 1e-12 } else { s == 0.0 };
            prop_assert!(ok);
        }
        for m in [r.macro_precision, r.macro_recall, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        for c in &r.per_class {
            let hm = if c.precision + c.recall > 0.0 { 2.0 * c.precision * c.recall / (c.precision + c.recall) } else { 0.0 };
            prop_assert!((c.f1 - hm).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn damaged_checkpoints_are_rejected(cut in 0usize..10_000, extend in any::<bool>()) {
        let k = DatasetKind::UciHar;
        let model = FusionModel::new(tiny_arch(9, 32, 3, 3), &k.static_labels(), &k.dynamic_labels(), 5).unwrap();
        let bytes = Checkpoint::from_model(&model, k, None, Vec::new()).to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        if extend {
            let mut extended = bytes.clone();
            extended.push(0);
            prop_assert!(Checkpoint::from_bytes(&extended).is_err());
        }
    }
}
