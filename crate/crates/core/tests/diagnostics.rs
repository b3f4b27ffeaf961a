mod common;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;
use vqd_core::attention::build_denoising_mask;
use vqd_core::diagnostics::{attention_negative_entropy, noisy_to_learnable_mass, read_run_csv, write_run_csv, EpochRecord};
use vqd_core::numerics::Tensor;

#[test]
fn entropy_of_uniform_and_one_hot_rows() {
    let uniform = Tensor::full(&[3, 4], 0.25);
    assert_abs_diff_eq!(attention_negative_entropy(&uniform, None).unwrap(), -(4f64.ln()), epsilon = 1e-15);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    assert_eq!(attention_negative_entropy(&eye, None).unwrap(), 0.0);
}

#[test]
fn non_stochastic_rows_are_rejected() {
    let t = Tensor::full(&[2, 2], 0.4);
    assert!(attention_negative_entropy(&t, None).is_err());
}

#[test]
fn mass_example() {
    // N = 1, K = 1, C = 2: both noisy rows put 2/3 on the learnable column.
    let t = 1.0 / 3.0;
    let a = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 2.0 * t, t, 0.0, 2.0 * t, 0.0, t]).unwrap();
    assert_abs_diff_eq!(noisy_to_learnable_mass(&a, 1, 1, 2).unwrap(), 2.0 * t, epsilon = 1e-15);
    assert_eq!(noisy_to_learnable_mass(&Tensor::full(&[2, 2], 0.5), 2, 0, 0).unwrap(), 0.0);
    assert!(noisy_to_learnable_mass(&a, 1, 1, 1).is_err());
}

/// Row-stochastic map obeying the denoising mask.
fn masked_map(r: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize, c: usize) -> Tensor {
    let mask = build_denoising_mask(n, k, c);
    let s = mask.size();
    let mut data = vec![0.0; s * s];
    for i in 0..s {
        let w: Vec<f64> = (0..s).map(|j| if mask.allows(i, j) { r.random_range(0.01..1.0) } else { 0.0 }).collect();
        let z: f64 = w.iter().sum();
        for j in 0..s {
            data[i * s + j] = w[j] / z;
        }
    }
    Tensor::matrix(s, s, data).unwrap()
}

proptest! {
    #[test]
    fn mass_matches_direct_slicing(seed in any::<u64>(), n in 1usize..5, k in 1usize..4, c in 1usize..4) {
        let mut r = common::rng(seed);
        let a = masked_map(&mut r, n, k, c);
        let s = n + k * c;
        let mut direct = 0.0;
        let mut rest = 0.0;
        for i in n..s {
            let row = a.row(i);
            let learn: f64 = row[..n].iter().sum();
            direct += learn;
            rest += row[n..].iter().sum::<f64>();
            prop_assert!((learn + row[n..].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let mass = noisy_to_learnable_mass(&a, n, k, c).unwrap();
        prop_assert!((mass - direct / (s - n) as f64).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&mass));
        prop_assert!(rest >= 0.0);
        let e = attention_negative_entropy(&a, Some(&build_denoising_mask(n, k, c))).unwrap();
        prop_assert!(e <= 0.0);
        prop_assert!(e >= -(s as f64).ln() - 1e-12);
    }
}

#[test]
fn csv_round_trip() {
    let records: Vec<EpochRecord> = (0..3)
        .map(|e| EpochRecord {
            epoch: e,
            neg_entropy: -2.125 + e as f64 * 0.01,
            noisy_learnable_mass: 0.5,
            loss_det: 12.5,
            loss_dn: 3.25,
            loss_res: 3.0,
            loss_kl: 2.5,
            loss_distill: 0.0625,
            val_ap40: 0.075,
            wall_time_s: 0.0,
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    write_run_csv(&records, &path).unwrap();
    assert_eq!(read_run_csv(&path).unwrap(), records);
    let bytes = std::fs::read(&path).unwrap();
    write_run_csv(&read_run_csv(&path).unwrap(), &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}
