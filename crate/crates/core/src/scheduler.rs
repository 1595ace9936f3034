//! Cosine masking: random training masks and the sampling-time unmasking
//! schedule.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rand::Rng;

use crate::codegram::MaskTensor;
use crate::error::{Error, Result};

/// Fraction of positions still masked at schedule position `t` in `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskCurve {
    #[default]
    Cosine,
}

impl MaskCurve {
    pub fn masked_fraction(self, t: f64) -> f64 {
        match self {
            MaskCurve::Cosine => (FRAC_PI_2 * t).cos(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMaskDraw {
    /// `u ~ U[0, pi/2]`
    pub u: f64,
    /// Per-position masking probability, `cos(u)`.
    pub p: f64,
    pub mask: MaskTensor,
}

/// Draws `u ~ U[0, pi/2]`, sets `p = cos(u)` and masks each position with
/// probability `p`.
pub fn draw_train_mask<R: Rng + ?Sized>(len: usize, levels: usize, rng: &mut R) -> TrainMaskDraw {
    let u = rng.random_range(0.0..=FRAC_PI_2);
    draw_train_mask_at(len, levels, u, rng)
}

/// Same as [`draw_train_mask`] with `u` fixed by the caller.
pub fn draw_train_mask_at<R: Rng + ?Sized>(len: usize, levels: usize, u: f64, rng: &mut R) -> TrainMaskDraw {
    let p = u.cos().clamp(0.0, 1.0);
    let flags = (0..len * levels).map(|_| rng.random::<f64>() < p).collect();
    TrainMaskDraw {
        u,
        p,
        mask: MaskTensor::filled(len, levels, false).with_flags(flags),
    }
}

impl MaskTensor {
    fn with_flags(mut self, flags: Vec<bool>) -> Self {
        self.flags_mut().copy_from_slice(&flags);
        self
    }
}

/// How many positions remain masked after each sampling step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSchedule {
    total: usize,
    /// `steps + 1` entries, from `total` down to 0.
    masked_counts: Vec<usize>,
}

impl SampleSchedule {
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn steps(&self) -> usize {
        self.masked_counts.len() - 1
    }

    pub fn masked_counts(&self) -> &[usize] {
        &self.masked_counts
    }

    /// Positions committed at step `n` (zero-based).
    pub fn kappa(&self, n: usize) -> usize {
        self.masked_counts[n] - self.masked_counts[n + 1]
    }

    pub fn kappas(&self) -> Vec<usize> {
        (0..self.steps()).map(|n| self.kappa(n)).collect()
    }

    /// `step,masked_count,kappa` lines; the last row has an empty kappa.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,masked_count,kappa\n");
        for (n, &c) in self.masked_counts.iter().enumerate() {
            if n < self.steps() {
                let _ = writeln!(out, "{n},{c},{}", self.kappa(n));
            } else {
                let _ = writeln!(out, "{n},{c},");
            }
        }
        out
    }
}

/// `masked_counts[n] = ceil(total * cos(pi/2 * n / n_steps))`, last entry forced to 0.
pub fn build_sample_schedule(total: usize, n_steps: usize) -> Result<SampleSchedule> {
    build_sample_schedule_with(MaskCurve::Cosine, total, n_steps)
}

pub fn build_sample_schedule_with(curve: MaskCurve, total: usize, n_steps: usize) -> Result<SampleSchedule> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be >= 1"));
    }
    let mut masked_counts: Vec<usize> = (0..=n_steps)
        .map(|n| {
            let frac = curve.masked_fraction(n as f64 / n_steps as f64);
            ((total as f64 * frac).ceil().max(0.0) as usize).min(total)
        })
        .collect();
    masked_counts[0] = total;
    masked_counts[n_steps] = 0;
    Ok(SampleSchedule { total, masked_counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

    #[test]
    fn u_zero_masks_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = draw_train_mask_at(10, 9, 0.0, &mut rng);
        assert_eq!(d.p, 1.0);
        assert_eq!(d.mask.count_masked(), 90);
    }

    #[test]
    fn u_half_pi_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = draw_train_mask_at(10, 9, FRAC_PI_2, &mut rng);
        assert!(d.p < 1e-15);
        assert_eq!(d.mask.count_masked(), 0);
    }

    #[test]
    fn mean_masked_fraction_is_two_over_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut total = 0usize;
        for _ in 0..draws {
            total += draw_train_mask(10, 9, &mut rng).mask.count_masked();
        }
        let mean = total as f64 / (draws * 90) as f64;
        assert!((mean - 2.0 / std::f64::consts::PI).abs() < 0.01, "mean {mean}");
    }

    fn binomial_chi2_rejects(seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = 0.9;
        let n = 90u64;
        let p = f64::cos(u);
        let samples = 10_000;
        let mut hist = vec![0usize; n as usize + 1];
        for _ in 0..samples {
            hist[draw_train_mask_at(10, 9, u, &mut rng).mask.count_masked()] += 1;
        }
        let binom = Binomial::new(p, n).unwrap();
        // Pool tails so every bin expects at least 5 observations.
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let (mut obs, mut exp) = (0.0, 0.0);
        for c in 0..=n {
            obs += hist[c as usize] as f64;
            exp += binom.pmf(c) * samples as f64;
            if exp >= 5.0 {
                bins.push((obs, exp));
                obs = 0.0;
                exp = 0.0;
            }
        }
        if let Some(last) = bins.last_mut() {
            last.0 += obs;
            last.1 += exp;
        }
        let stat: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
        let critical = ChiSquared::new((bins.len() - 1) as f64).unwrap().inverse_cdf(0.99);
        stat >= critical
    }

    #[test]
    fn fixed_u_counts_are_binomial() {
        // Each run rejects a correct sampler with probability 0.01;
        // more than 2 rejections in 10 runs has probability ~1e-4.
        let rejections = (0..10).filter(|&s| binomial_chi2_rejects(100 + s)).count();
        assert!(rejections <= 2, "{rejections} of 10 chi-square runs rejected");
    }

    #[test]
    fn zero_total_schedule() {
        let s = build_sample_schedule(0, 5).unwrap();
        assert!(s.masked_counts().iter().all(|&c| c == 0));
    }

    #[test]
    fn single_step_unmasks_all() {
        let s = build_sample_schedule(10, 1).unwrap();
        assert_eq!(s.masked_counts(), &[10, 0]);
        assert_eq!(s.kappas(), vec![10]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(build_sample_schedule(10, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn matches_direct_formula_for_90_by_32() {
        // Frozen from an independent evaluation of ceil(90 * cos(pi * n / 64)),
        // with the final entry forced to zero.
        let want: [usize; 33] = [
            90, 90, 90, 90, 89, 88, 87, 85, 84, 82, 80, 78, 75, 73, 70, 67, 64, 61, 58, 54, 51, 47, 43, 39, 35, 31, 27,
            22, 18, 14, 9, 5, 0,
        ];
        let s = build_sample_schedule(90, 32).unwrap();
        assert_eq!(s.masked_counts(), &want);
    }

    #[test]
    fn csv_dump() {
        let s = build_sample_schedule(10, 2).unwrap();
        assert_eq!(s.to_csv(), "step,masked_count,kappa\n0,10,2\n1,8,8\n2,0,\n");
    }

    proptest! {
        #[test]
        fn kappas_sum_to_total_and_counts_monotone(total in 0usize..5000, steps in 1usize..200) {
            let s = build_sample_schedule(total, steps).unwrap();
            prop_assert_eq!(s.kappas().iter().sum::<usize>(), total);
            prop_assert!(s.masked_counts().windows(2).all(|w| w[0] >= w[1]));
            prop_assert_eq!(s.masked_counts()[0], total);
            if total > 0 {
                prop_assert!(s.kappas().iter().any(|&k| k > 0));
            }
        }
    }
}
