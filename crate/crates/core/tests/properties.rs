use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nir_core::data::{generate_synthetic, read_csv, write_csv};
use nir_core::fairness::{confusion_rates, disparity, roc_auc, youden_threshold};
use nir_core::nir::{incidence, ir_loss, DEFAULT_EPSILON};
use nir_core::{Matrix, SyntheticConfig};

fn batch() -> impl Strategy<Value = (Matrix, Vec<f64>)> {
    (1usize..8, 2usize..10).prop_flat_map(|(b, d)| {
        (
            prop::collection::vec(0.0f64..5.0, b * d),
            prop::collection::vec(0.0f64..=1.0, b),
        )
            .prop_map(move |(z, p)| (Matrix::from_vec(b, d, z).unwrap(), p))
    })
}

fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..8).prop_map(|s| f64::from(s) / 8.0 + 0.01), n),
            prop::collection::vec(0u8..=1, n),
        )
            .prop_filter("needs both classes", |(_, y)| {
                y.contains(&0) && y.contains(&1)
            })
    })
}

proptest! {
    #[test]
    fn penalty_is_nonnegative((z, p) in batch()) {
        let v = ir_loss(&incidence(&z, &p, DEFAULT_EPSILON).unwrap()).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn neuron_permutation_permutes_incidence((z, p) in batch(), seed in any::<u64>()) {
        let d = z.cols();
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut zp = Matrix::zeros(z.rows(), d);
        for i in 0..z.rows() {
            for (j, &src) in perm.iter().enumerate() {
                zp.set(i, j, z.get(i, src));
            }
        }
        let a = incidence(&z, &p, DEFAULT_EPSILON).unwrap();
        let b = incidence(&zp, &p, DEFAULT_EPSILON).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.phi[j], a.phi[src]);
        }
        let (va, vb) = (ir_loss(&a).unwrap(), ir_loss(&b).unwrap());
        prop_assert!((va - vb).abs() <= 1e-12 * va.max(1e-300));
    }

    #[test]
    fn epsilon_perturbation_is_continuous((z, p) in batch()) {
        prop_assume!(p.iter().sum::<f64>() > 0.1);
        let a = incidence(&z, &p, 1e-8).unwrap();
        let b = incidence(&z, &p, 2e-8).unwrap();
        for (x, y) in a.phi.iter().zip(&b.phi) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms((s, y) in scored()) {
        let cubed: Vec<f64> = s.iter().map(|v| v.powi(3)).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&cubed, &y).unwrap());
    }

    #[test]
    fn metrics_ignore_sample_order((s, y) in scored(), seed in any::<u64>()) {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let s2: Vec<f64> = idx.iter().map(|&i| s[i]).collect();
        let y2: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&s2, &y2).unwrap());
        prop_assert_eq!(youden_threshold(&s, &y).unwrap(), youden_threshold(&s2, &y2).unwrap());
    }

    #[test]
    fn youden_picks_a_candidate_and_reports_its_j((s, y) in scored()) {
        let op = youden_threshold(&s, &y).unwrap();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.contains(&op.threshold) || op.threshold == max.next_up());
        let (tpr, fpr) = confusion_rates(&s, &y, op.threshold).unwrap();
        prop_assert_eq!(op.j, tpr.unwrap() - fpr.unwrap());
    }

    #[test]
    fn disparity_is_bounded_and_label_free(rates in prop::collection::vec(0.0f64..=1.0, 2..6)) {
        let named: BTreeMap<String, Option<f64>> =
            rates.iter().enumerate().map(|(i, r)| (format!("g{i}"), Some(*r))).collect();
        let renamed: BTreeMap<String, Option<f64>> =
            rates.iter().rev().enumerate().map(|(i, r)| (format!("h{i}"), Some(*r))).collect();
        let d = disparity(&named).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, disparity(&renamed).unwrap());
    }

    #[test]
    fn csv_round_trip(seed in 0u64..1000, n in 10usize..40) {
        let ds = generate_synthetic(&SyntheticConfig { n_samples: n, feature_dim: 5, seed, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<f64> = (0..500).map(|i| (i as f64 * 0.618).fract()).collect();
    let mut labels: Vec<u8> = (0..500).map(|i| u8::from(i % 3 == 0)).collect();
    let mean = (0..100)
        .map(|_| {
            labels.shuffle(&mut rng);
            roc_auc(&scores, &labels).unwrap()
        })
        .sum::<f64>()
        / 100.0;
    assert!((mean - 0.5).abs() < 0.05, "{mean}");
}
