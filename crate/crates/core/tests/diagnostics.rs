use music_core::coder::{ProbCode, SegmentConfig};
use music_core::diagnostics::{
    code_covariance, collapse_fraction, cross_view_mutual_information, encoding_capacity, entropy, ideal_code,
    linear_probe, marginal_uniformity, segment_mutual_information, theory_report, ProbeConfig,
};
use music_core::diffcore::Array;
use nalgebra::DMatrix;
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_code(rng: &mut ChaCha8Rng, n: usize, s: usize, ds: usize) -> ProbCode {
    let mut data = Vec::with_capacity(n * s * ds);
    for _ in 0..n * s {
        let w: Vec<f64> = (0..ds).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-9).collect();
        let total: f64 = w.iter().sum();
        data.extend(w.iter().map(|v| v / total));
    }
    ProbCode::new(Array::new(vec![n, s, ds], data).unwrap(), SegmentConfig::new(s, ds).unwrap()).unwrap()
}

fn random_one_hot(rng: &mut ChaCha8Rng, n: usize, s: usize, ds: usize) -> ProbCode {
    let mut data = vec![0.0; n * s * ds];
    for k in 0..n * s {
        data[k * ds + rng.random_range(0..ds)] = 1.0;
    }
    ProbCode::new(Array::new(vec![n, s, ds], data).unwrap(), SegmentConfig::new(s, ds).unwrap()).unwrap()
}

#[test]
fn ideal_code_meets_the_independence_and_covariance_identities() {
    for (s, ds) in [(2, 2), (2, 3), (3, 2), (3, 4), (1, 5)] {
        let config = SegmentConfig::new(s, ds).unwrap();
        let code = ideal_code(&config).unwrap();
        assert_eq!(code.batch_size(), ds.pow(s as u32));

        let mi = segment_mutual_information(&code).unwrap();
        for a in 0..s {
            for b in 0..s {
                let expected = if a == b { (ds as f64).ln() } else { 0.0 };
                assert!((mi.matrix[a][b] - expected).abs() < 1e-9, "{s}x{ds} MI[{a}][{b}]");
            }
        }

        let cov = code_covariance(&code).unwrap();
        let inv = 1.0 / ds as f64;
        for r in 0..s * ds {
            for c in 0..s * ds {
                let v = cov.at2(r, c);
                if r / ds != c / ds {
                    assert!(v.abs() < 1e-12, "cross-segment cov[{r}][{c}] = {v}");
                } else if r == c {
                    assert!((v - inv * (1.0 - inv)).abs() < 1e-9);
                } else {
                    assert!((v + inv * inv).abs() < 1e-9, "within-segment cov[{r}][{c}] = {v}");
                }
            }
        }
        assert_eq!(marginal_uniformity(&code).max_deviation, 0.0);
        assert!(collapse_fraction(&code).iter().all(|&c| (c - inv).abs() < 1e-15));
    }
}

#[test]
fn collapsed_batch_statistics() {
    for ds in 2..6 {
        let config = SegmentConfig::new(2, ds).unwrap();
        let mut row = vec![0.0; 2 * ds];
        row[1] = 1.0;
        row[ds] = 1.0;
        let code = ProbCode::from_flat(&Array::from_rows(&vec![row; 7]).unwrap(), config).unwrap();
        assert!((marginal_uniformity(&code).max_deviation - (1.0 - 1.0 / ds as f64)).abs() < 1e-15);
        assert_eq!(collapse_fraction(&code), vec![1.0, 1.0]);
        assert!(theory_report(&code, None).unwrap().collapsed);
    }
}

#[test]
fn large_batch_of_independent_segments_has_little_shared_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let code = random_one_hot(&mut rng, 100_000, 2, 4);
    let mi = segment_mutual_information(&code).unwrap();
    assert!(mi.max_off_diagonal() < 5e-4, "{}", mi.max_off_diagonal());
    // Plug-in bias is about (D_S - 1)^2 / (2N) nats.
    assert!(mi.max_off_diagonal() > 0.0);
}

#[test]
fn cross_view_information_of_identical_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let code = random_one_hot(&mut rng, 50, 3, 3);
    let same = segment_mutual_information(&code).unwrap();
    let cross = cross_view_mutual_information(&code, &code).unwrap();
    for (a, b) in same.matrix.iter().flatten().zip(cross.matrix.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn covariance_is_symmetric_psd_with_zero_segment_row_sums(
        seed in any::<u64>(),
        s in 1usize..4,
        ds in 2usize..5,
        n in 2usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = random_code(&mut rng, n, s, ds);
        let cov = code_covariance(&code).unwrap();
        let d = s * ds;
        let m = DMatrix::from_row_slice(d, d, cov.data());
        prop_assert!((&m - m.transpose()).amax() < 1e-12);
        let eig = m.clone().symmetric_eigen();
        prop_assert!(eig.eigenvalues.iter().all(|&l| l > -1e-9), "{:?}", eig.eigenvalues);
        for r in 0..d {
            let seg = r / ds;
            let row_sum: f64 = (seg * ds..(seg + 1) * ds).map(|c| cov.at2(r, c)).sum();
            prop_assert!(row_sum.abs() < 1e-9);
        }
    }

    #[test]
    fn mutual_information_matrix_is_well_formed(
        seed in any::<u64>(),
        s in 1usize..4,
        ds in 2usize..5,
        n in 2usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = random_code(&mut rng, n, s, ds);
        let mi = segment_mutual_information(&code).unwrap();
        let marg = marginal_uniformity(&code);
        for a in 0..s {
            prop_assert!((marg.means[a].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((mi.matrix[a][a] - entropy(&marg.means[a])).abs() < 1e-9);
            for b in 0..s {
                prop_assert!((mi.matrix[a][b] - mi.matrix[b][a]).abs() < 1e-12);
                prop_assert!(mi.matrix[a][b] > -1e-12);
            }
        }
    }
}

#[test]
fn capacity_is_exact() {
    let mut expected = BigUint::from(1u32);
    for _ in 0..102 {
        expected *= 80u32;
    }
    let config = SegmentConfig::new(102, 80).unwrap();
    assert_eq!(encoding_capacity(&config), expected);
    assert_eq!(encoding_capacity(&config).to_string().len(), 195);
}

fn blobs(rng: &mut ChaCha8Rng, n: usize) -> (Array, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let c = if y == 0 { -2.0 } else { 2.0 };
        rows.push(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)]);
        labels.push(y);
    }
    (Array::from_rows(&rows).unwrap(), labels)
}

#[test]
fn probe_separates_separable_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = blobs(&mut rng, 200);
    let r = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(r.test_acc, 1.0);
    assert_eq!(r.train_acc, 1.0);
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let classes = 4;
    let n = 2000;
    let x = Array::new(vec![n, 6], (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let mut y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    y.shuffle(&mut rng);
    let r = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / r.n_test as f64).sqrt();
    assert!((r.test_acc - p).abs() < 3.0 * sigma, "{} vs {p} +- {}", r.test_acc, 3.0 * sigma);
}

#[test]
fn probe_split_depends_only_on_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y) = blobs(&mut rng, 101);
    let a = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
    let b = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.n_train, a.n_test), (80, 21));
}
