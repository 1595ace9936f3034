use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;

fn stats(mean: &[f64], cov: &[Vec<f64>]) -> GaussianStats {
    GaussianStats::new(mean.to_vec(), Mat::from_rows(cov)).unwrap()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    m.qr().q()
}

#[test]
fn fd_trivial_cases() {
    let a = stats(&[0.0], &[vec![1.0]]);
    let b = stats(&[1.0], &[vec![4.0]]);
    assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-6);
    assert_eq!(frechet_distance(&a, &a).unwrap(), 0.0);
    let c = stats(&[0.0, 1.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(frechet_distance(&a, &c).is_err());
}

#[test]
fn fd_matches_scipy_on_non_commuting_covariances() {
    // Frozen from scipy.linalg.sqrtm on the same inputs.
    let a = stats(
        &[0.5, -1.0, 2.0],
        &[vec![1.0, 0.3, -0.2], vec![0.3, 2.0, 0.5], vec![-0.2, 0.5, 0.8]],
    );
    let b = stats(
        &[-0.25, 0.75, 1.5],
        &[vec![0.6, -0.1, 0.0], vec![-0.1, 1.2, 0.4], vec![0.0, 0.4, 2.5]],
    );
    let want = 4.634180665422366;
    assert!((frechet_distance(&a, &b).unwrap() - want).abs() < 1e-9);
    assert!((frechet_distance(&b, &a).unwrap() - want).abs() < 1e-9);
}

#[test]
fn fd_symmetric_for_random_covariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let d = rng.random_range(1..7);
        let mk = |rng: &mut ChaCha8Rng| {
            let x = Mat::from_vec(
                d + 3,
                d,
                (0..(d + 3) * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let mean = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            GaussianStats::new(mean, crate::tensor::matmul_tn(&x, &x)).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }
}

#[test]
fn fd_grows_with_mean_separation() {
    let a = stats(&[0.0], &[vec![1.5]]);
    let mut prev = -1.0;
    for i in 0..20 {
        let b = stats(&[0.25 * i as f64], &[vec![0.5]]);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!(fd > prev);
        prev = fd;
    }
}

#[test]
fn fd_of_sampled_gaussians_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 5;
    let q = random_orthogonal(&mut rng, d);
    let var_a = [4.0, 1.0, 0.25, 2.0, 1.0];
    let var_b = [0.25, 4.0, 1.0, 0.5, 3.0];
    let mu_a = [0.0; 5];
    let mu_b = [0.0, 0.0, 0.5, 0.0, 0.0];
    // Shared eigenvectors: the covariances commute and the root is per-eigenvalue.
    let closed: f64 = var_a
        .iter()
        .zip(&var_b)
        .map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2))
        .sum::<f64>()
        + 0.25;
    let draw = |rng: &mut ChaCha8Rng, var: &[f64; 5], mu: &[f64; 5]| {
        let n = 10_000;
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let z: Vec<f64> = (0..d)
                .map(|j| {
                    var[j].sqrt() * {
                        let s: f64 = StandardNormal.sample(rng);
                        s
                    }
                })
                .collect();
            let mut x = vec![0.0; d];
            for (mu_r, (r, out)) in mu.iter().zip(x.iter_mut().enumerate()) {
                *out = mu_r + (0..d).map(|c| q[(r, c)] * z[c]).sum::<f64>();
            }
            m.row_mut(i).copy_from_slice(&x);
        }
        EmbeddingSet::new("test", m).unwrap()
    };
    let (a, b) = (draw(&mut rng, &var_a, &mu_a), draw(&mut rng, &var_b, &mu_b));
    let fd = frechet_distance_sets(&a, &b).unwrap();
    assert!(((fd - closed) / closed).abs() < 0.02, "fd {fd} closed {closed}");
}

#[test]
fn stats_validation_and_shrinkage() {
    assert!(GaussianStats::new(vec![0.0; 2], Mat::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]])).is_err());
    assert!(GaussianStats::new(vec![0.0; 2], Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])).is_err());
    assert!(GaussianStats::new(vec![0.0; 2], Mat::zeros(3, 3)).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let small = Mat::from_vec(3, 6, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect());
    let s = GaussianStats::from_embeddings(&EmbeddingSet::new("x", small.clone()).unwrap()).unwrap();
    let mut raw = small.clone();
    let mean = s.mean.clone();
    for i in 0..3 {
        for (v, m) in raw.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let plain = crate::tensor::matmul_tn(&raw, &raw);
    let tr: f64 = (0..6).map(|i| plain.get(i, i) / 2.0).sum();
    for i in 0..6 {
        assert!((s.cov.get(i, i) - plain.get(i, i) / 2.0 - 1e-6 * tr / 6.0).abs() < 1e-14);
    }
    assert!(GaussianStats::from_embeddings(&EmbeddingSet::new("x", Mat::zeros(0, 3)).unwrap()).is_err());
}

#[test]
fn cosine_cases() {
    let v = [1.0, -2.0, 0.5];
    assert!((cosine_semantic(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cosine_semantic(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
    let w: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
    assert!((cosine_semantic(&v, &w).unwrap() - 1.0).abs() < 1e-12);
    assert!(cosine_semantic(&v, &[0.0; 3]).is_err());
    assert!(cosine_semantic(&v, &[1.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = rng.random_range(0.01..100.0);
        let sa: Vec<f64> = a.iter().map(|x| s * x).collect();
        let c = cosine_semantic(&a, &b).unwrap();
        assert!((c - cosine_semantic(&sa, &b).unwrap()).abs() < 1e-12);
        assert!((-1.0..=1.0).contains(&c));
    }
}

#[test]
fn mfcc_frame_arithmetic() {
    assert_eq!(frame_count(44_100, 2048, 512).unwrap(), 83);
    assert_eq!(frame_count(2048, 2048, 512).unwrap(), 1);
    assert!(frame_count(2047, 2048, 512).is_err());
    let out = mfcc_like(&vec![0.0; 44_100], &MfccConfig::default()).unwrap();
    assert_eq!((out.len(), out.dim()), (83, 64));
    for i in 1..out.len() {
        assert_eq!(out.vectors.row(i), out.vectors.row(0));
    }
    assert!(mfcc_like(&[0.0; 100], &MfccConfig::default()).is_err());
}

#[test]
fn dct_of_constant_is_dc_only() {
    let c = dct2(&[3.5; 128], 64);
    assert!((c[0] - 3.5 * 128f64.sqrt()).abs() < 1e-10);
    assert!(c[1..].iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn mel_filters_are_nonempty() {
    let fb = mel_filterbank(&MfccConfig::default());
    assert_eq!((fb.rows(), fb.cols()), (128, 1025));
    for m in 0..128 {
        assert!(fb.row(m).iter().sum::<f64>() > 0.0, "filter {m} is empty");
    }
}

#[test]
fn mfcc_separates_tones() {
    let cfg = MfccConfig::default();
    let tone = |f: f64| -> Vec<f64> {
        (0..8192)
            .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / cfg.sample_rate).sin())
            .collect()
    };
    let a = mfcc_like(&tone(440.0), &cfg).unwrap();
    let b = mfcc_like(&tone(440.0), &cfg).unwrap();
    let c = mfcc_like(&tone(5000.0), &cfg).unwrap();
    assert_eq!(a, b);
    let dist = |x: &EmbeddingSet, y: &EmbeddingSet| -> f64 {
        x.vectors
            .data()
            .iter()
            .zip(y.vectors.data())
            .map(|(p, q)| (p - q).abs())
            .sum()
    };
    assert!(dist(&a, &c) > 1.0);
}

#[test]
fn kernel_shape() {
    let k = checkerboard_kernel(4).unwrap();
    assert!(k.get(0, 0) > 0.0 && k.get(0, 3) < 0.0 && k.get(3, 0) < 0.0 && k.get(3, 3) > 0.0);
    assert!(k.data().iter().sum::<f64>().abs() < 1e-12);
    assert!(k.get(1, 1) > k.get(0, 0));
    assert!(checkerboard_kernel(3).is_err());
    assert!(checkerboard_kernel(0).is_err());
}

fn two_segment(rng: &mut ChaCha8Rng, n: usize, boundary: usize) -> Mat {
    let mut m = Mat::zeros(n, 4);
    for i in 0..n {
        let base = if i < boundary {
            [1.0, 0.2, 0.0, 0.0]
        } else {
            [0.0, 0.0, 1.0, 0.3]
        };
        for (j, b) in base.iter().enumerate() {
            m.set(i, j, b + 0.05 * rng.random_range(-1.0..1.0));
        }
    }
    m
}

#[test]
fn novelty_peaks_at_segment_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for boundary in [12, 20, 31] {
        let seq = two_segment(&mut rng, 48, boundary);
        let curve = novelty_curve(&seq, 16).unwrap();
        let peak = crate::tensor::argmax(&curve);
        assert!(peak.abs_diff(boundary) <= 8, "peak {peak} boundary {boundary}");
    }
}

#[test]
fn novelty_score_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = two_segment(&mut rng, 40, 17);
    assert!((novelty_score(&seq, &seq, 16).unwrap() - 1.0).abs() < 1e-9);
    let mut scaled = seq.clone();
    scaled.scale(7.5);
    let other = two_segment(&mut rng, 30, 9);
    let mut other_scaled = other.clone();
    other_scaled.scale(7.5);
    let base = novelty_score(&seq, &other, 16).unwrap();
    assert!((base - novelty_score(&scaled, &other_scaled, 16).unwrap()).abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&base));
    assert_eq!(novelty_score(&Mat::zeros(20, 4), &seq, 16).unwrap(), 0.0);
    assert!(novelty_score(&Mat::zeros(10, 4), &seq, 16).is_err());
}

#[test]
fn pearson_cases() {
    let a = [1.0, 3.0, 2.0, 5.0];
    let neg: Vec<f64> = a.iter().map(|x| -x).collect();
    assert!((pearson(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&a, &neg).unwrap().unwrap() + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&a, &[2.0; 4]).unwrap(), None);
    assert!(pearson(&a, &[1.0]).is_err());
}

#[test]
fn embedding_file_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let m = Mat::from_vec(
        5,
        3,
        (0..15).map(|_| f64::from(rng.random_range(-1.0f32..1.0))).collect(),
    );
    let set = EmbeddingSet::new("mfcc-like", m).unwrap();
    let mut buf = Vec::new();
    write_embeddings(&set, &mut buf).unwrap();
    assert_eq!(read_embeddings(buf.as_slice()).unwrap(), set);
    assert!(read_embeddings(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(read_embeddings(bad.as_slice()).is_err());
}

#[test]
fn report_formats() {
    let mut r = MetricReport::default();
    r.push("fd_mfcc", 1.5);
    r.push("ns", -0.25);
    assert_eq!(r.get("ns"), Some(-0.25));
    assert_eq!(
        r.to_csv(),
        "metric,value\nfd_mfcc,1.500000000000e0\nns,-2.500000000000e-1\n"
    );
    assert!(r.to_table().contains("fd_mfcc"));
}
