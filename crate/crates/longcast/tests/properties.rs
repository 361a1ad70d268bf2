//! Property-based invariants over the numeric core and data plumbing.

use proptest::prelude::*;

use longcast::data::{make_windows, WindowSpec};
use longcast::embedding::{stamp_features, Granularity};
use longcast::tensor::Padding;
use longcast::{Rng, Tensor};

proptest! {
    /// Softmax rows are non-negative and sum to 1 within 1e-12, for
    /// magnitudes up to 1e3.
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..12,
        seed in 0u64..1000,
        scale in prop_oneof![Just(1.0f64), Just(100.0), Just(1e3)],
    ) {
        let mut rng = Rng::seeded(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
        let x = Tensor::from_vec(&[rows, cols], data).unwrap();
        let y = x.softmax_rows().unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    /// Pool/conv output length formulas hold for every L in [1, 512].
    #[test]
    fn pool_and_conv_length_formulas(
        l in 1usize..=512,
        kernel in 1usize..=5,
        stride in 1usize..=3,
    ) {
        let x = Tensor::<f64>::zeros(&[l, 2]);
        let padding = (kernel - 1) / 2;
        if l + 2 * padding >= kernel {
            let y = x.maxpool1d(kernel, stride, padding).unwrap();
            prop_assert_eq!(y.rows(), (l + 2 * padding - kernel) / stride + 1);
        }
        // odd kernels only for the convolution
        let k = if kernel % 2 == 0 { kernel + 1 } else { kernel };
        let w = Tensor::<f64>::zeros(&[k, 2, 3]);
        let w = Tensor::param(w.shape(), w.data().to_vec()).unwrap();
        let same = x.conv1d(&w, None, Padding::Replicate).unwrap();
        prop_assert_eq!(same.rows(), l);
        if l + 2 >= k {
            let padded = x.conv1d(&w, None, Padding::Zero(1)).unwrap();
            prop_assert_eq!(padded.rows(), l + 2 - k + 1);
        }
    }

    /// Evaluation-mode dropout is bit-identical to its input.
    #[test]
    fn dropout_eval_is_identity(seed in 0u64..500, p in 0.0f64..0.99) {
        let mut rng = Rng::seeded(seed);
        let data: Vec<f64> = (0..32).map(|_| rng.standard_normal()).collect();
        let x = Tensor::from_vec(&[8, 4], data).unwrap();
        let y = x.dropout(p, false, &mut rng).unwrap();
        let same = x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    /// Stamp indices stay inside their vocabularies for any timestamp
    /// between 1970 and 2030.
    #[test]
    fn stamp_indices_within_vocab(secs in 0i64..1_893_456_000) {
        let ts = chrono::DateTime::from_timestamp(secs, 0).unwrap().naive_utc();
        for granularity in [Granularity::Hourly, Granularity::QuarterHourly] {
            let s = stamp_features(ts, granularity);
            prop_assert!(s.month < 12);
            prop_assert!(s.day < 31);
            prop_assert!(s.weekday < 7);
            prop_assert!(s.hour < 24);
            match granularity {
                Granularity::Hourly => prop_assert!(s.quarter.is_none()),
                Granularity::QuarterHourly => prop_assert!(s.quarter.unwrap() < 4),
            }
        }
    }

    /// Window enumeration is exhaustive and duplicate-free at stride 1,
    /// and every window stays inside the frame.
    #[test]
    fn windows_exhaustive_and_in_bounds(
        t in 2usize..400,
        seq in 1usize..64,
        pred in 1usize..32,
        label_frac in 0.0f64..=1.0,
    ) {
        let label = ((seq as f64) * label_frac) as usize;
        let spec = WindowSpec::new(seq, label.min(seq), pred);
        match make_windows(t, &spec) {
            Ok(windows) => {
                prop_assert_eq!(windows.len(), t - seq - pred + 1);
                for (i, w) in windows.iter().enumerate() {
                    prop_assert_eq!(w.start, i);
                    prop_assert!(w.target_range(&spec).end <= t);
                }
            }
            Err(_) => prop_assert!(t < seq + pred),
        }
    }

    /// The measurement never goes below its ln(L_K) floor.
    #[test]
    fn measurement_floor(seed in 0u64..300, l_k in 1usize..48, d in 1usize..8) {
        let mut rng = Rng::seeded(seed);
        let q = Tensor::from_vec(&[1, d], (0..d).map(|_| rng.standard_normal()).collect()).unwrap();
        let k = Tensor::from_vec(&[l_k, d], (0..l_k * d).map(|_| rng.standard_normal()).collect()).unwrap();
        let m = longcast::attention::sparsity_measure_exact(&q, &k).unwrap();
        prop_assert!(m >= (l_k as f64).ln() - 1e-9);
    }
}
