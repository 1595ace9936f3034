//! Iterative parallel decoding with guidance and confidence re-masking.
//!
//! Each step runs the model on the partially committed grid, mixes
//! conditional and unconditional logits, draws a token at every masked
//! position, scores the draws by log-probability plus annealed Gumbel noise
//! and keeps only the `masked_counts[n+1]` least confident positions masked.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codegram::{CodebookSpec, Codegram, MaskTensor, MaskedCodegram};
use crate::error::{Error, Result};
use crate::model::{ConditioningBundle, LogitsGrid, MaskModel};
use crate::scheduler::{build_sample_schedule, SampleSchedule};
use crate::seed::derive_seed;
use crate::tensor::log_softmax;

/// Anything that scores a partially masked grid.
pub trait TokenModel: Sync {
    fn spec(&self) -> CodebookSpec;

    /// `cond = None` selects the unconditional mode.
    fn logits(&self, input: &MaskedCodegram, cond: Option<&ConditioningBundle>) -> Result<LogitsGrid>;
}

impl TokenModel for MaskModel {
    fn spec(&self) -> CodebookSpec {
        self.config().spec
    }

    fn logits(&self, input: &MaskedCodegram, cond: Option<&ConditioningBundle>) -> Result<LogitsGrid> {
        Ok(self.forward(input, cond, false)?.logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Guidance weight.
    pub gamma: f64,
    /// Initial Gumbel scale on confidences.
    pub delta: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Redraw committed positions every step instead of freezing them.
    pub resample_committed: bool,
    /// Run the unconditional pass even when `gamma = 0`.
    pub two_pass: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_steps: 32,
            gamma: 3.0,
            delta: 8.0,
            temperature: 1.0,
            seed: 0,
            resample_committed: false,
            two_pass: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 1 {
            return Err(Error::invalid("n_steps must be >= 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be finite and >= 0"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid("delta must be finite and >= 0"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be finite and > 0"));
        }
        Ok(())
    }

    fn unconditional_pass(&self) -> bool {
        self.gamma > 0.0 || self.two_pass
    }
}

/// `(1 + gamma) * cond - gamma * uncond`, evaluated as
/// `cond + gamma * (cond - uncond)` so that `gamma = 0` and `cond == uncond`
/// both return `cond` bit-exactly.
pub fn guided_logits(cond: &LogitsGrid, uncond: &LogitsGrid, gamma: f64) -> Result<LogitsGrid> {
    if !cond.same_shape(uncond) {
        return Err(Error::shape(
            "unconditional logits",
            cond.values().data().len(),
            uncond.values().data().len(),
        ));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma must be >= 0"));
    }
    let mut out = cond.clone();
    for (o, u) in out.values_mut().data_mut().iter_mut().zip(uncond.values().data()) {
        *o += gamma * (*o - u);
    }
    Ok(out)
}

/// Gumbel scale at zero-based step `n`: `delta * (1 - (n + 1) / n_steps)`, clamped at 0.
pub fn diversity_at(delta: f64, n: usize, n_steps: usize) -> Result<f64> {
    if n >= n_steps {
        return Err(Error::invalid(format!("step {n} out of range for {n_steps} steps")));
    }
    Ok((delta * (1.0 - (n + 1) as f64 / n_steps as f64)).max(0.0))
}

/// `log_probs[i] + delta_n * g_i` with i.i.d. standard Gumbel `g_i`.
pub fn confidence<R: Rng + ?Sized>(log_probs: &[f64], delta_n: f64, rng: &mut R) -> Vec<f64> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    log_probs.iter().map(|lp| lp + delta_n * gumbel.sample(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct SamplerState {
    step: usize,
    grid: MaskedCodegram,
    /// Confidence of the latest draw per position; `+inf` where nothing was drawn.
    confidences: Vec<f64>,
    last_mean_confidence: Option<f64>,
    rng: ChaCha8Rng,
}

impl SamplerState {
    /// Fully masked grid at step 0.
    pub fn new(len: usize, spec: CodebookSpec, seed: u64) -> Self {
        SamplerState {
            step: 0,
            grid: MaskedCodegram::fully_masked(len, spec),
            confidences: vec![f64::INFINITY; len * spec.levels],
            last_mean_confidence: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn grid(&self) -> &MaskedCodegram {
        &self.grid
    }

    pub fn mask(&self) -> MaskTensor {
        self.grid.mask()
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    /// Mean confidence of the draws made by the step that produced this state.
    pub fn last_mean_confidence(&self) -> Option<f64> {
        self.last_mean_confidence
    }
}

/// One decoding step. Returns the next state; `self` is untouched.
pub fn sample_step<M: TokenModel + ?Sized>(
    state: &SamplerState,
    model: &M,
    bundle: &ConditioningBundle,
    cfg: &SamplerConfig,
    schedule: &SampleSchedule,
) -> Result<SamplerState> {
    cfg.validate()?;
    let n = state.step;
    if schedule.steps() != cfg.n_steps || n >= cfg.n_steps {
        return Err(Error::StepMismatch {
            state: n,
            steps: schedule.steps(),
        });
    }
    let total = state.grid.tokens().len();
    if schedule.total() != total {
        return Err(Error::shape("schedule total", total, schedule.total()));
    }
    let counts = schedule.masked_counts();
    let currently_masked: Vec<usize> = (0..total).filter(|&i| state.grid.is_masked(i)).collect();
    if currently_masked.len() != counts[n] {
        return Err(Error::StepMismatch {
            state: n,
            steps: schedule.steps(),
        });
    }
    let mut next = state.clone();
    next.step += 1;
    next.last_mean_confidence = None;
    if counts[n] == counts[n + 1] && !cfg.resample_committed {
        return Ok(next);
    }

    let cond = model.logits(&state.grid, Some(bundle))?;
    let guided = if cfg.unconditional_pass() {
        let uncond = model.logits(&state.grid, None)?;
        guided_logits(&cond, &uncond, cfg.gamma)?
    } else {
        cond
    };
    let spec = model.spec();
    let levels = spec.levels;
    if guided.len() != state.grid.len() || guided.levels() != levels || guided.vocab() != spec.vocab_size {
        return Err(Error::shape(
            "model logits",
            total * spec.vocab_size,
            guided.values().data().len(),
        ));
    }

    let delta_n = diversity_at(cfg.delta, n, cfg.n_steps)?;
    let candidates: Vec<usize> = if cfg.resample_committed {
        (0..total).collect()
    } else {
        currently_masked
    };
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let mut drawn = Vec::with_capacity(candidates.len());
    for &i in &candidates {
        let (l, k) = (i / levels, i % levels);
        let scaled: Vec<f64> = guided.at(l, k).iter().map(|v| v / cfg.temperature).collect();
        let lp = log_softmax(&scaled);
        if !lp.iter().all(|v| v.is_finite() || *v == f64::NEG_INFINITY) {
            return Err(Error::NonFinite(format!("log-probabilities at ({l}, {k})")));
        }
        let weights = WeightedIndex::new(lp.iter().map(|v| v.exp()))
            .map_err(|e| Error::NonFinite(format!("sampling weights at ({l}, {k}): {e}")))?;
        let token = weights.sample(&mut next.rng);
        let conf = lp[token] + delta_n * gumbel.sample(&mut next.rng);
        drawn.push((i, token as u32, conf));
    }

    // Keep the `counts[n+1]` lowest confidences masked; ties by position.
    let mut order: Vec<usize> = (0..drawn.len()).collect();
    order.sort_by(|&a, &b| drawn[a].2.total_cmp(&drawn[b].2).then(drawn[a].0.cmp(&drawn[b].0)));
    let keep_masked = counts[n + 1];
    let mask_token = spec.mask_token();
    let tokens = next.grid.tokens_mut();
    for (rank, &j) in order.iter().enumerate() {
        let (i, token, _) = drawn[j];
        tokens[i] = if rank < keep_masked { mask_token } else { token };
    }
    for &(i, _, conf) in &drawn {
        next.confidences[i] = conf;
    }
    next.last_mean_confidence = Some(drawn.iter().map(|d| d.2).sum::<f64>() / drawn.len() as f64);
    Ok(next)
}

/// Per-step record for debugging dumps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub masked_count: usize,
    /// Mean confidence of this step's draws; `None` for no-op steps.
    pub mean_confidence: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,masked_count,mean_confidence\n");
    for r in rows {
        let c = r.mean_confidence.map_or(String::new(), |c| format!("{c:.6}"));
        s.push_str(&format!("{},{},{}\n", r.step, r.masked_count, c));
    }
    s
}

/// Decodes a length-`len` grid from fully masked.
pub fn sample<M: TokenModel + ?Sized>(
    model: &M,
    bundle: &ConditioningBundle,
    len: usize,
    cfg: &SamplerConfig,
) -> Result<Codegram> {
    Ok(sample_with_trace(model, bundle, len, cfg)?.0)
}

pub fn sample_with_trace<M: TokenModel + ?Sized>(
    model: &M,
    bundle: &ConditioningBundle,
    len: usize,
    cfg: &SamplerConfig,
) -> Result<(Codegram, Vec<TraceRow>)> {
    cfg.validate()?;
    if len == 0 {
        return Err(Error::invalid("length must be >= 1"));
    }
    let spec = model.spec();
    let schedule = build_sample_schedule(len * spec.levels, cfg.n_steps)?;
    let mut state = SamplerState::new(len, spec, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.n_steps);
    for _ in 0..cfg.n_steps {
        let next = sample_step(&state, model, bundle, cfg, &schedule)?;
        trace.push(TraceRow {
            step: state.step,
            masked_count: schedule.masked_counts()[state.step + 1],
            mean_confidence: next.last_mean_confidence,
        });
        state = next;
    }
    Ok((state.grid.into_codegram()?, trace))
}

/// Seed of beam `b` under base seed `seed`.
pub fn beam_seed(seed: u64, b: usize) -> u64 {
    derive_seed(seed, "beam", b as u64)
}

/// `beams` independent runs with derived seeds, computed in parallel and
/// returned in beam order.
pub fn sample_beams<M: TokenModel + ?Sized>(
    model: &M,
    bundle: &ConditioningBundle,
    len: usize,
    cfg: &SamplerConfig,
    beams: usize,
) -> Result<Vec<Codegram>> {
    if beams == 0 {
        return Err(Error::invalid("beams must be >= 1"));
    }
    (0..beams)
        .into_par_iter()
        .map(|b| {
            let c = SamplerConfig {
                seed: beam_seed(cfg.seed, b),
                ..*cfg
            };
            sample(model, bundle, len, &c)
        })
        .collect()
}

#[cfg(test)]
mod tests;
