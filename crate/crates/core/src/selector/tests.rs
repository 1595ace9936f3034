use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small_cfg() -> ScavConfig {
    ScavConfig {
        n_scav: 6,
        width: 4,
        hidden: 8,
        video_dim: 5,
        audio_dim: 3,
        groups: 8,
        ..ScavConfig::default()
    }
}

/// Video and audio are two different views of one latent sequence.
fn planted_pairs(n: usize, seed: u64) -> Vec<ScavExample> {
    let mut mix = ChaCha8Rng::seed_from_u64(1000);
    let a = random_mat(&mut mix, 3, 8);
    let b = random_mat(&mut mix, 3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut z = Mat::zeros(12, 3);
            let mut cur = [0.0; 3];
            for t in 0..12 {
                if t % 3 == 0 {
                    cur = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ];
                }
                z.row_mut(t).copy_from_slice(&cur);
            }
            let mut video = crate::tensor::matmul(&z, &a);
            for v in video.data_mut() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
            let zz = resample_nn(&z, 24).unwrap();
            let mut audio = crate::tensor::matmul(&zz, &b);
            for v in audio.data_mut() {
                *v = v.tanh();
            }
            ScavExample { video, audio }
        })
        .collect()
}

#[test]
fn distance_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_mat(&mut rng, 5, 3);
    assert_eq!(scav_distance(&a, &a).unwrap(), 0.0);
    let mut b = a.clone();
    b.set(2, 1, b.get(2, 1) + 0.75);
    assert!((scav_distance(&a, &b).unwrap() - 0.75 * 0.75 / 15.0).abs() < 1e-15);
    assert!(scav_distance(&a, &random_mat(&mut rng, 4, 3)).is_err());
    assert!(scav_distance(&a, &random_mat(&mut rng, 5, 2)).is_err());
}

#[test]
fn distance_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (n, h) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = random_mat(&mut rng, n, h);
        let b = random_mat(&mut rng, n, h);
        let mut s = 0.0;
        for t in 0..n {
            let mut row = 0.0;
            for j in 0..h {
                row += (a.get(t, j) - b.get(t, j)).powi(2);
            }
            s += row;
        }
        let want = s / (n * h) as f64;
        assert!((scav_distance(&a, &b).unwrap() - want).abs() < 1e-12);
        assert_eq!(scav_distance(&a, &b).unwrap(), scav_distance(&b, &a).unwrap());
    }
}

fn contrastive_oracle(batch: &[ScavPair], tau: f64) -> f64 {
    let b = batch.len();
    let d = |i: usize, j: usize| {
        let (x, y) = (&batch[i].e_video, &batch[j].e_audio);
        let mut s = 0.0;
        for t in 0..x.rows() {
            for c in 0..x.cols() {
                s += (x.get(t, c) - y.get(t, c)).powi(2);
            }
        }
        -s / (x.rows() * x.cols()) as f64 / tau
    };
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let mut z = 0.0;
        let mut zc = 0.0;
        for j in 0..b {
            z += d(i, j).exp();
            zc += d(j, i).exp();
        }
        rows += z.ln() - d(i, i);
        cols += zc.ln() - d(i, i);
    }
    0.5 * (rows + cols) / b as f64
}

#[test]
fn contrastive_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let b = rng.random_range(2..6);
        let (n, h) = (rng.random_range(1..6), rng.random_range(1..6));
        let batch: Vec<ScavPair> = (0..b)
            .map(|_| ScavPair {
                e_video: random_mat(&mut rng, n, h),
                e_audio: random_mat(&mut rng, n, h),
            })
            .collect();
        let tau = rng.random_range(0.2..2.0);
        let got = scav_contrastive_loss(&batch, tau).unwrap();
        assert!((got - contrastive_oracle(&batch, tau)).abs() < 1e-12);
    }
}

#[test]
fn contrastive_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_mat(&mut rng, 4, 3);
    let same: Vec<ScavPair> = (0..5)
        .map(|_| ScavPair {
            e_video: x.clone(),
            e_audio: x.clone(),
        })
        .collect();
    assert!((scav_contrastive_loss(&same, 0.1).unwrap() - 5f64.ln()).abs() < 1e-12);
    let apart: Vec<ScavPair> = (0..4)
        .map(|i| {
            let m = Mat::filled(4, 3, 100.0 * i as f64);
            ScavPair {
                e_video: m.clone(),
                e_audio: m,
            }
        })
        .collect();
    assert!(scav_contrastive_loss(&apart, 1.0).unwrap() < 1e-12);
    assert!(scav_contrastive_loss(&same[..1], 0.1).is_err());
    assert!(scav_contrastive_loss(&same, 0.0).is_err());
}

#[test]
fn contrastive_decreases_as_matched_pair_approaches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch: Vec<ScavPair> = (0..4)
        .map(|_| ScavPair {
            e_video: random_mat(&mut rng, 3, 3),
            e_audio: random_mat(&mut rng, 3, 3),
        })
        .collect();
    let target = batch[1].e_video.clone();
    let mut prev = scav_contrastive_loss(&batch, 0.5).unwrap();
    for _ in 0..5 {
        let a = &mut batch[1].e_audio;
        for (v, t) in a.data_mut().iter_mut().zip(target.data()) {
            *v = 0.5 * (*v + t);
        }
        let cur = scav_contrastive_loss(&batch, 0.5).unwrap();
        assert!(cur < prev);
        prev = cur;
    }
}

/// Straight-line per-element reimplementation of the audio branch.
fn audio_oracle(scav: &Scav, x: &Mat) -> Mat {
    let cfg = scav.config();
    let p = scav.params();
    let get = |name: &str| p.get(p.find(name).unwrap()).clone();
    let (w1, b1, w2, b2) = (
        get("scav.audio.fc1.weight"),
        get("scav.audio.fc1.bias"),
        get("scav.audio.fc2.weight"),
        get("scav.audio.fc2.bias"),
    );
    let n_in = x.rows();
    let mut out = Mat::zeros(cfg.n_scav, cfg.width);
    for j in 0..cfg.n_scav {
        // round-half-down nearest neighbour
        let pos = (j * n_in) as f64 / cfg.n_scav as f64;
        let src = ((pos - 0.5).ceil().max(0.0) as usize).min(n_in - 1);
        let mut hid = vec![0.0; cfg.hidden];
        for (h, hv) in hid.iter_mut().enumerate() {
            let mut s = b1.get(0, h);
            for i in 0..cfg.audio_dim {
                s += x.get(src, i) * w1.get(i, h);
            }
            let c = (2.0 / std::f64::consts::PI).sqrt();
            *hv = 0.5 * s * (1.0 + (c * (s + 0.044715 * s * s * s)).tanh());
        }
        for g in 0..cfg.groups {
            for o in 0..cfg.width {
                let col = g * cfg.width + o;
                let mut s = b2.get(0, col);
                for (h, hv) in hid.iter().enumerate() {
                    s += hv * w2.get(h, col);
                }
                let cur = out.get(j, o);
                out.set(j, o, cur + s / cfg.groups as f64);
            }
        }
    }
    out
}

#[test]
fn encoders_match_oracle_and_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut scav = Scav::new(small_cfg()).unwrap();
    for p in scav.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for n_in in [1, 4, 6, 11] {
        let x = random_mat(&mut rng, n_in, 3);
        let got = scav.encode_audio(&x).unwrap();
        let want = audio_oracle(&scav, &x);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(got, scav.encode_audio(&x).unwrap());
    }
    let v = scav.encode_video(&random_mat(&mut rng, 6, 5)).unwrap();
    assert_eq!((v.rows(), v.cols()), (6, 4));
    assert!(scav.encode_video(&Mat::zeros(0, 5)).is_err());
    assert!(scav.encode_video(&random_mat(&mut rng, 6, 3)).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ScavConfig {
        tau: 0.3,
        ..small_cfg()
    };
    let mut scav = Scav::new(cfg).unwrap();
    for p in scav.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let data: Vec<ScavExample> = (0..3)
        .map(|i| ScavExample {
            video: random_mat(&mut rng, 4 + i, 5),
            audio: random_mat(&mut rng, 7 - i, 3),
        })
        .collect();
    let batch: Vec<&ScavExample> = data.iter().collect();
    let loss = |s: &Scav| {
        let pairs: Vec<ScavPair> = data.iter().map(|e| s.encode_pair(e).unwrap()).collect();
        scav_contrastive_loss(&pairs, cfg.tau).unwrap()
    };
    let (l0, grads) = scav.loss_and_grads(&batch).unwrap();
    assert!((l0 - loss(&scav)).abs() < 1e-12);
    let n_params = scav.params().len();
    for pi in 0..n_params {
        let len = scav.params().iter().nth(pi).unwrap().value.data().len();
        for k in 0..len {
            let theta = scav.params().iter().nth(pi).unwrap().value.data()[k];
            let h = 1e-5 * theta.abs().max(1.0);
            scav.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[k] = theta + h;
            let up = loss(&scav);
            scav.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[k] = theta - h;
            let down = loss(&scav);
            scav.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[k] = theta;
            let num = (up - down) / (2.0 * h);
            let ana = grads.iter().nth(pi).unwrap().data()[k];
            let err = (num - ana).abs() / (num.abs().max(ana.abs()) + 1e-3);
            assert!(err < 1e-5, "param {pi}[{k}]: {num} vs {ana}");
        }
    }
}

#[test]
fn selection_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scav = Scav::new(small_cfg()).unwrap();
    let video = random_mat(&mut rng, 6, 5);
    let one = [random_mat(&mut rng, 6, 3)];
    assert_eq!(select_best(&video, &one, &scav).unwrap().index, 0);
    let a = random_mat(&mut rng, 6, 3);
    let b = random_mat(&mut rng, 6, 3);
    let sel = select_best(&video, &[b.clone(), a.clone(), a.clone(), b], &scav).unwrap();
    assert_eq!(sel.distances[1], sel.distances[2]);
    assert!(sel.index == 0 || sel.index == 1);
    assert!(select_best(&video, &[], &scav).is_err());
    assert_eq!(argmin_first(&[3.0, 1.0, 1.0, 2.0]).unwrap(), 1);
    assert!(argmin_first(&[1.0, f64::NAN]).is_err());
    let csv = sel.csv();
    assert!(csv.starts_with(&format!("{},", sel.index)));
    assert_eq!(csv.split(',').count(), 5);
}

proptest! {
    #[test]
    fn argmin_invariant_under_monotone_maps(d in prop::collection::vec(0.0f64..10.0, 1..20)) {
        let base = argmin_first(&d).unwrap();
        let sq: Vec<f64> = d.iter().map(|x| x.sqrt()).collect();
        let ex: Vec<f64> = d.iter().map(|x| 3.0 * x + 1.0).collect();
        prop_assert_eq!(argmin_first(&sq).unwrap(), base);
        prop_assert_eq!(argmin_first(&ex).unwrap(), base);
    }
}

#[test]
fn trained_encoders_find_planted_match() {
    let cfg = ScavConfig {
        audio_dim: 8,
        video_dim: 8,
        n_scav: 12,
        width: 8,
        hidden: 32,
        steps: 300,
        batch_size: 16,
        seed: 3,
        ..ScavConfig::default()
    };
    let train = planted_pairs(400, 11);
    let test = planted_pairs(100, 12);
    let mut scav = Scav::new(cfg).unwrap();
    let losses = scav.fit(&train, |_, _| {}).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut hits = 0;
    for (i, ex) in test.iter().enumerate() {
        let mut cands: Vec<Mat> = (0..9)
            .map(|_| {
                let mut j = rng.random_range(0..test.len() - 1);
                if j >= i {
                    j += 1;
                }
                test[j].audio.clone()
            })
            .collect();
        let at = rng.random_range(0..10);
        cands.insert(at, ex.audio.clone());
        hits += usize::from(select_best(&ex.video, &cands, &scav).unwrap().index == at);
    }
    assert!(hits >= 95, "hits {hits}/100");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scav.ckpt");
    let scav = Scav::new(ScavConfig { seed: 9, ..small_cfg() }).unwrap();
    scav.save(&path).unwrap();
    let back = Scav::load(*scav.config(), &path).unwrap();
    assert_eq!(back.params(), scav.params());
    assert!(Scav::load(
        ScavConfig {
            hidden: 9,
            ..small_cfg()
        },
        &path
    )
    .is_err());
}
