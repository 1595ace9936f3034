use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::tests::{tiny_bundle, tiny_config};
use crate::model::Structure;
use crate::tensor::Mat;

/// Puts all probability mass on a fixed target grid.
struct OneHot {
    target: Codegram,
    calls: AtomicUsize,
}

impl TokenModel for OneHot {
    fn spec(&self) -> CodebookSpec {
        *self.target.spec()
    }

    fn logits(&self, input: &MaskedCodegram, _cond: Option<&ConditioningBundle>) -> Result<LogitsGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let spec = self.spec();
        let mut g = LogitsGrid::new(
            input.len(),
            spec.levels,
            spec.vocab_size,
            Mat::filled(input.len(), spec.levels * spec.vocab_size, -1e9),
        )?;
        for l in 0..input.len() {
            for k in 0..spec.levels {
                g.at_mut(l, k)[self.target.get(l, k) as usize] = 0.0;
            }
        }
        Ok(g)
    }
}

/// Pseudo-random logits that depend on the input tokens and the conditioning flag.
struct Hashy {
    spec: CodebookSpec,
    calls: AtomicUsize,
}

impl TokenModel for Hashy {
    fn spec(&self) -> CodebookSpec {
        self.spec
    }

    fn logits(&self, input: &MaskedCodegram, cond: Option<&ConditioningBundle>) -> Result<LogitsGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h: u64 = if cond.is_some() { 1 } else { 2 };
        for &t in input.tokens() {
            h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let n = input.len() * self.spec.levels * self.spec.vocab_size;
        let data = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        LogitsGrid::new(
            input.len(),
            self.spec.levels,
            self.spec.vocab_size,
            Mat::from_vec(input.len(), self.spec.levels * self.spec.vocab_size, data),
        )
    }
}

fn empty_bundle() -> ConditioningBundle {
    ConditioningBundle::new(vec![crate::model::Stream {
        name: "clip".into(),
        role: crate::model::StreamRole::FrameSemantic,
        data: Mat::zeros(1, 1),
    }])
    .unwrap()
}

fn grid(rows: usize, cols: usize, v: f64) -> LogitsGrid {
    LogitsGrid::new(rows, 1, cols, Mat::filled(rows, cols, v)).unwrap()
}

#[test]
fn guided_logits_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = LogitsGrid::new(
        3,
        2,
        4,
        Mat::from_vec(3, 8, (0..24).map(|_| rng.random_range(-5.0..5.0)).collect()),
    )
    .unwrap();
    let u = LogitsGrid::new(
        3,
        2,
        4,
        Mat::from_vec(3, 8, (0..24).map(|_| rng.random_range(-5.0..5.0)).collect()),
    )
    .unwrap();
    assert_eq!(guided_logits(&c, &u, 0.0).unwrap(), c);
    for g in [0.5, 2.0, 3.0, 7.25] {
        assert_eq!(guided_logits(&c, &c, g).unwrap(), c);
    }
    let out = guided_logits(&grid(1, 1, 1.0), &grid(1, 1, 0.5), 2.0).unwrap();
    assert_eq!(out.values().data(), &[2.0]);
    assert!(guided_logits(&c, &u, -0.1).is_err());
    assert!(guided_logits(&c, &grid(3, 8, 0.0), 1.0).is_err());
}

#[test]
fn diversity_schedule() {
    assert_eq!(diversity_at(8.0, 31, 32).unwrap(), 0.0);
    assert_eq!(diversity_at(8.0, 15, 32).unwrap(), 4.0);
    assert_eq!(diversity_at(0.0, 3, 32).unwrap(), 0.0);
    assert_eq!(diversity_at(8.0, 0, 1).unwrap(), 0.0);
    assert!(diversity_at(8.0, 32, 32).is_err());
}

#[test]
fn gumbel_confidence_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zeros = vec![0.0; 100_000];
    let c = confidence(&zeros, 1.0, &mut rng);
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    // Euler-Mascheroni constant.
    assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    let lp = vec![-0.1, -2.0, -7.5];
    assert_eq!(confidence(&lp, 0.0, &mut rng), lp);
    let a = confidence(&lp, 3.0, &mut ChaCha8Rng::seed_from_u64(5));
    let b = confidence(&lp, 3.0, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

#[test]
fn one_hot_model_is_recovered_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = CodebookSpec::new(3, 16, 4).unwrap();
    for n_steps in 1..=10 {
        for delta in [0.0, 8.0] {
            let target = Codegram::random(7, spec, &mut rng);
            let model = OneHot {
                target: target.clone(),
                calls: AtomicUsize::new(0),
            };
            let cfg = SamplerConfig {
                n_steps,
                gamma: 0.0,
                delta,
                seed: n_steps as u64,
                ..SamplerConfig::default()
            };
            assert_eq!(sample(&model, &empty_bundle(), 7, &cfg).unwrap(), target);
        }
    }
}

#[test]
fn single_step_commits_everything() {
    let spec = CodebookSpec::new(2, 8, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    let cfg = SamplerConfig {
        n_steps: 1,
        ..SamplerConfig::default()
    };
    let schedule = build_sample_schedule(10, 1).unwrap();
    let s0 = SamplerState::new(5, spec, 0);
    let s1 = sample_step(&s0, &model, &empty_bundle(), &cfg, &schedule).unwrap();
    assert_eq!(s1.mask().count_masked(), 0);
    assert!(s1.grid().clone().into_codegram().is_ok());
}

#[test]
fn no_op_steps_only_advance_the_counter() {
    let spec = CodebookSpec::new(9, 8, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    let cfg = SamplerConfig::default();
    let schedule = build_sample_schedule(90, 32).unwrap();
    assert_eq!(schedule.kappa(0), 0);
    let s0 = SamplerState::new(10, spec, 3);
    let s1 = sample_step(&s0, &model, &empty_bundle(), &cfg, &schedule).unwrap();
    assert_eq!(s1.step(), 1);
    assert_eq!(s1.grid(), s0.grid());
    assert_eq!(s1.confidences(), s0.confidences());
    assert_eq!(s1.rng, s0.rng);
    assert_eq!(model.calls.load(Ordering::Relaxed), 0);
}

#[test]
fn forward_pass_count() {
    let spec = CodebookSpec::new(4, 8, 4).unwrap();
    let schedule = build_sample_schedule(64, 8).unwrap();
    assert!(schedule.kappas().iter().all(|&k| k > 0));
    for (gamma, two_pass, want) in [(0.0, false, 8), (3.0, false, 16), (0.0, true, 16)] {
        let model = Hashy {
            spec,
            calls: AtomicUsize::new(0),
        };
        let cfg = SamplerConfig {
            n_steps: 8,
            gamma,
            two_pass,
            ..SamplerConfig::default()
        };
        sample(&model, &empty_bundle(), 16, &cfg).unwrap();
        assert_eq!(model.calls.load(Ordering::Relaxed), want);
    }
}

#[test]
fn sampling_contract_holds_for_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let spec = CodebookSpec::new(rng.random_range(1..5), rng.random_range(2..12), 4).unwrap();
        let len = rng.random_range(1..12);
        let cfg = SamplerConfig {
            n_steps: rng.random_range(1..20),
            gamma: rng.random_range(0.0..4.0),
            delta: rng.random_range(0.0..10.0),
            temperature: rng.random_range(0.5..2.0),
            seed: rng.random(),
            ..SamplerConfig::default()
        };
        let model = Hashy {
            spec,
            calls: AtomicUsize::new(0),
        };
        let schedule = build_sample_schedule(len * spec.levels, cfg.n_steps).unwrap();
        let mut state = SamplerState::new(len, spec, cfg.seed);
        for n in 0..cfg.n_steps {
            let next = sample_step(&state, &model, &empty_bundle(), &cfg, &schedule).unwrap();
            assert_eq!(next.mask().count_masked(), schedule.masked_counts()[n + 1]);
            for i in 0..state.grid().tokens().len() {
                if !state.grid().is_masked(i) {
                    assert!(!next.grid().is_masked(i));
                    assert_eq!(next.grid().tokens()[i], state.grid().tokens()[i]);
                }
            }
            state = next;
        }
        assert_eq!(state.mask().count_masked(), 0);
        let out = state.grid().clone().into_codegram().unwrap();
        assert!(out.tokens().iter().all(|&t| (t as usize) < spec.vocab_size));
    }
}

#[test]
fn ties_keep_the_earliest_positions_masked() {
    // Uniform logits with no noise make every confidence equal.
    struct Flat(CodebookSpec);
    impl TokenModel for Flat {
        fn spec(&self) -> CodebookSpec {
            self.0
        }
        fn logits(&self, input: &MaskedCodegram, _: Option<&ConditioningBundle>) -> Result<LogitsGrid> {
            Ok(LogitsGrid::zeros(input.len(), self.0.levels, self.0.vocab_size))
        }
    }
    let spec = CodebookSpec::new(2, 4, 4).unwrap();
    let cfg = SamplerConfig {
        n_steps: 4,
        gamma: 0.0,
        delta: 0.0,
        ..SamplerConfig::default()
    };
    let schedule = build_sample_schedule(12, 4).unwrap();
    let s1 = sample_step(
        &SamplerState::new(6, spec, 0),
        &Flat(spec),
        &empty_bundle(),
        &cfg,
        &schedule,
    )
    .unwrap();
    let keep = schedule.masked_counts()[1];
    for i in 0..12 {
        assert_eq!(s1.grid().is_masked(i), i < keep);
    }
}

#[test]
fn zero_gamma_matches_explicit_two_pass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..20 {
        let model = MaskModel::new(tiny_config(Structure::Hybrid, 8, seed)).unwrap();
        let bundle = tiny_bundle(&mut rng, 3, 4);
        let one = SamplerConfig {
            n_steps: 6,
            gamma: 0.0,
            seed,
            ..SamplerConfig::default()
        };
        let two = SamplerConfig { two_pass: true, ..one };
        assert_eq!(
            sample(&model, &bundle, 5, &one).unwrap(),
            sample(&model, &bundle, 5, &two).unwrap()
        );
    }
}

#[test]
fn fixed_seed_is_reproducible_and_beams_are_ordered() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = MaskModel::new(tiny_config(Structure::Adaln, 8, 7)).unwrap();
    let bundle = tiny_bundle(&mut rng, 3, 4);
    let cfg = SamplerConfig {
        n_steps: 5,
        seed: 11,
        ..SamplerConfig::default()
    };
    assert_eq!(
        sample(&model, &bundle, 6, &cfg).unwrap(),
        sample(&model, &bundle, 6, &cfg).unwrap()
    );
    let beams = sample_beams(&model, &bundle, 6, &cfg, 4).unwrap();
    for (b, got) in beams.iter().enumerate() {
        let c = SamplerConfig {
            seed: beam_seed(11, b),
            ..cfg
        };
        assert_eq!(got, &sample(&model, &bundle, 6, &c).unwrap());
    }
    assert!(sample_beams(&model, &bundle, 6, &cfg, 0).is_err());
}

#[test]
fn step_mismatch_is_reported() {
    let spec = CodebookSpec::new(2, 8, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    let cfg = SamplerConfig {
        n_steps: 4,
        ..SamplerConfig::default()
    };
    let wrong = build_sample_schedule(10, 5).unwrap();
    let s0 = SamplerState::new(5, spec, 0);
    assert!(matches!(
        sample_step(&s0, &model, &empty_bundle(), &cfg, &wrong),
        Err(Error::StepMismatch { .. })
    ));
    let right = build_sample_schedule(10, 4).unwrap();
    let mut s = s0;
    for _ in 0..4 {
        s = sample_step(&s, &model, &empty_bundle(), &cfg, &right).unwrap();
    }
    assert!(matches!(
        sample_step(&s, &model, &empty_bundle(), &cfg, &right),
        Err(Error::StepMismatch { .. })
    ));
}

#[test]
fn resample_mode_still_follows_schedule() {
    let spec = CodebookSpec::new(2, 8, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    let cfg = SamplerConfig {
        n_steps: 6,
        resample_committed: true,
        ..SamplerConfig::default()
    };
    let schedule = build_sample_schedule(16, 6).unwrap();
    let mut s = SamplerState::new(8, spec, 1);
    for n in 0..6 {
        s = sample_step(&s, &model, &empty_bundle(), &cfg, &schedule).unwrap();
        assert_eq!(s.mask().count_masked(), schedule.masked_counts()[n + 1]);
    }
}

#[test]
fn trace_dump() {
    let spec = CodebookSpec::new(9, 8, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    let (_, trace) = sample_with_trace(&model, &empty_bundle(), 10, &SamplerConfig::default()).unwrap();
    assert_eq!(trace.len(), 32);
    assert_eq!(trace[0].mean_confidence, None);
    assert!(trace[31].mean_confidence.unwrap() <= 0.0);
    let csv = trace_csv(&trace);
    assert!(csv.starts_with("step,masked_count,mean_confidence\n0,90,\n"));
    assert!(csv.ends_with(",0,") || csv.lines().last().unwrap().starts_with("31,0,"));
}

#[test]
fn invalid_config_rejected() {
    let spec = CodebookSpec::new(1, 4, 4).unwrap();
    let model = Hashy {
        spec,
        calls: AtomicUsize::new(0),
    };
    for cfg in [
        SamplerConfig {
            n_steps: 0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            gamma: -1.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            delta: -1.0,
            ..SamplerConfig::default()
        },
        SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        },
    ] {
        assert!(sample(&model, &empty_bundle(), 4, &cfg).is_err());
    }
    assert!(sample(&model, &empty_bundle(), 0, &SamplerConfig::default()).is_err());
}
