//! Training objective, optimizer and loop.
//!
//! The objective is masked cross-entropy, plus (for structures with an
//! encoder) an MSE between the encoder sequence and projected audio
//! features and a symmetric contrastive loss between [CLS] and the mean
//! projected feature.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codegram::{apply_mask, Codegram, MaskTensor};
use crate::error::{Error, Result};
use crate::model::conditioning::resample_nn_backward;
use crate::model::{
    resample_nn, Adjoints, ConditioningBundle, ForwardOutput, Grads, LogitsGrid, MaskModel, ParamStore, MAX_LOGIT_SCALE,
};
use crate::scheduler::draw_train_mask;
use crate::seed::derived_rng;
use crate::tensor::{argmax, log_softmax, norm, Mat};

/// One paired training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub codegram: Codegram,
    pub bundle: ConditioningBundle,
    /// Raw auxiliary audio features, `N_beats x aux_dim`.
    pub aux: Option<Mat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mask: f64,
    pub l_mse: f64,
    pub l_contrastive: f64,
    pub lambda_reg: f64,
    pub lambda_cont: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_mask: f64, l_mse: f64, l_contrastive: f64, lambda_reg: f64, lambda_cont: f64) -> Self {
        LossBreakdown {
            l_mask,
            l_mse,
            l_contrastive,
            lambda_reg,
            lambda_cont,
            total: l_mask + lambda_reg * l_mse + lambda_cont * l_contrastive,
        }
    }
}

/// Projected auxiliary targets for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    /// `N_beats x H`
    pub target_sequence: Mat,
    pub target_mean: Vec<f64>,
}

impl AuxTargets {
    pub fn project(model: &MaskModel, features: &Mat) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid("auxiliary features need at least one frame"));
        }
        let target_sequence = model.project_targets(features)?;
        if !target_sequence.is_finite() {
            return Err(Error::NonFinite("auxiliary targets".into()));
        }
        let target_mean = target_sequence.mean_rows();
        Ok(AuxTargets {
            target_sequence,
            target_mean,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub lambda_cont: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub decay_power: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub cond_dropout_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_reg: 1.0,
            lambda_cont: 1.0,
            peak_lr: 2e-4,
            min_lr: 1e-6,
            warmup: 100,
            total_steps: 1000,
            decay_power: 1.0,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 32,
            cond_dropout_prob: 0.10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.lambda_reg,
            self.lambda_cont,
            self.peak_lr,
            self.min_lr,
            self.decay_power,
            self.weight_decay,
            self.beta1,
            self.beta2,
            self.eps,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::invalid(
                "loss weights and optimizer constants must be finite and >= 0",
            ));
        }
        if self.min_lr > self.peak_lr {
            return Err(Error::invalid("min_lr must not exceed peak_lr"));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::invalid("betas must be < 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout_prob) {
            return Err(Error::invalid("cond_dropout_prob must be in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate at 1-based iteration `it`: linear warmup to the peak over
    /// `warmup` iterations, then polynomial decay to `min_lr` at `total_steps`.
    pub fn lr_at(&self, it: usize) -> f64 {
        if self.warmup > 0 && it <= self.warmup {
            return self.peak_lr * it as f64 / self.warmup as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup);
        if span == 0 {
            return self.peak_lr;
        }
        let frac = ((it - self.warmup) as f64 / span as f64).min(1.0);
        self.min_lr + (self.peak_lr - self.min_lr) * (1.0 - frac).powf(self.decay_power)
    }
}

fn check_target(logits: &LogitsGrid, codegram: &Codegram, mask: &MaskTensor) -> Result<()> {
    if logits.len() != codegram.len() {
        return Err(Error::shape("logits length", codegram.len(), logits.len()));
    }
    if logits.levels() != codegram.levels() || logits.vocab() != codegram.spec().vocab_size {
        return Err(Error::shape(
            "logits levels x vocab",
            codegram.levels() * codegram.spec().vocab_size,
            logits.levels() * logits.vocab(),
        ));
    }
    mask.check_against(codegram.len(), codegram.levels())
}

/// Mean over masked positions of the token negative log-likelihood; 0 when
/// nothing is masked.
pub fn masked_ce(logits: &LogitsGrid, codegram: &Codegram, mask: &MaskTensor) -> Result<f64> {
    check_target(logits, codegram, mask)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for l in 0..codegram.len() {
        for k in 0..codegram.levels() {
            if mask.get(l, k) {
                sum -= log_softmax(logits.at(l, k))[codegram.get(l, k) as usize];
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Loss, adjoint `L x (K*D)` and masked count.
fn masked_ce_grad(logits: &LogitsGrid, codegram: &Codegram, mask: &MaskTensor) -> Result<(f64, Mat, usize)> {
    check_target(logits, codegram, mask)?;
    let vocab = logits.vocab();
    let mut d = Mat::zeros(codegram.len(), codegram.levels() * vocab);
    let n = mask.count_masked();
    if n == 0 {
        return Ok((0.0, d, 0));
    }
    let inv = 1.0 / n as f64;
    let mut sum = 0.0;
    for l in 0..codegram.len() {
        for k in 0..codegram.levels() {
            if !mask.get(l, k) {
                continue;
            }
            let t = codegram.get(l, k) as usize;
            let lp = log_softmax(logits.at(l, k));
            sum -= lp[t];
            let row = &mut d.row_mut(l)[k * vocab..(k + 1) * vocab];
            for (dv, v) in row.iter_mut().zip(&lp) {
                *dv = v.exp() * inv;
            }
            row[t] -= inv;
        }
    }
    Ok((sum / n as f64, d, n))
}

/// Fraction of masked positions whose argmax equals the true token; `None`
/// when nothing is masked.
pub fn masked_token_accuracy(logits: &LogitsGrid, codegram: &Codegram, mask: &MaskTensor) -> Result<Option<f64>> {
    let (hit, n) = accuracy_counts(logits, codegram, mask)?;
    Ok((n > 0).then(|| hit as f64 / n as f64))
}

fn accuracy_counts(logits: &LogitsGrid, codegram: &Codegram, mask: &MaskTensor) -> Result<(usize, usize)> {
    check_target(logits, codegram, mask)?;
    let (mut hit, mut n) = (0, 0);
    for l in 0..codegram.len() {
        for k in 0..codegram.levels() {
            if mask.get(l, k) {
                n += 1;
                hit += usize::from(argmax(logits.at(l, k)) == codegram.get(l, k) as usize);
            }
        }
    }
    Ok((hit, n))
}

/// Mean squared difference after resampling `target` to the encoder length.
pub fn seq_mse(encoder_seq: &Mat, target_seq: &Mat) -> Result<f64> {
    Ok(seq_mse_grad(encoder_seq, target_seq)?.0)
}

/// Loss, d/d encoder_seq and d/d target_seq (at the target's own length).
fn seq_mse_grad(encoder_seq: &Mat, target_seq: &Mat) -> Result<(f64, Mat, Mat)> {
    if encoder_seq.cols() != target_seq.cols() {
        return Err(Error::shape("sequence width", encoder_seq.cols(), target_seq.cols()));
    }
    let t = resample_nn(target_seq, encoder_seq.rows())?;
    let n = encoder_seq.data().len() as f64;
    let mut d = Mat::zeros(encoder_seq.rows(), encoder_seq.cols());
    let mut sum = 0.0;
    for ((dv, e), tv) in d.data_mut().iter_mut().zip(encoder_seq.data()).zip(t.data()) {
        let diff = e - tv;
        sum += diff * diff;
        *dv = 2.0 * diff / n;
    }
    let mut dt = d.clone();
    dt.scale(-1.0);
    Ok((sum / n, d, resample_nn_backward(&dt, target_seq.rows())))
}

/// Symmetric cross-entropy over a `B x B` score matrix with the diagonal
/// as labels: the mean of the row-wise and column-wise losses. Returns the
/// loss and its adjoint.
pub fn symmetric_cross_entropy(scores: &Mat) -> Result<(f64, Mat)> {
    let b = scores.rows();
    if b != scores.cols() {
        return Err(Error::shape("score matrix columns", b, scores.cols()));
    }
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    let bf = b as f64;
    let mut d = Mat::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let lp = log_softmax(scores.row(i));
        loss -= lp[i];
        for j in 0..b {
            d.row_mut(i)[j] += 0.5 * (lp[j].exp() - f64::from(u8::from(i == j))) / bf;
        }
    }
    let t = scores.transpose();
    for j in 0..b {
        let lp = log_softmax(t.row(j));
        loss -= lp[j];
        for i in 0..b {
            d.row_mut(i)[j] += 0.5 * (lp[i].exp() - f64::from(u8::from(i == j))) / bf;
        }
    }
    Ok((0.5 * loss / bf, d))
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(v).max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

fn check_pairs(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape("contrastive batch", a.len(), b.len()));
    }
    if let Some(w) = a.first().map(Vec::len) {
        if a.iter().chain(b).any(|v| v.len() != w) {
            return Err(Error::invalid("contrastive vectors must share one width"));
        }
    }
    Ok(())
}

/// CLIP-style loss between paired vectors under temperature `tau`.
pub fn clip_contrastive(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<f64> {
    Ok(clip_contrastive_grad(a, b, tau)?.loss)
}

pub struct ContrastiveGrad {
    pub loss: f64,
    pub da: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
    /// d loss / d log(1/tau).
    pub d_log_scale: f64,
}

pub fn clip_contrastive_grad(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<ContrastiveGrad> {
    check_pairs(a, b)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let (an, a_norm): (Vec<_>, Vec<_>) = a.iter().map(|v| unit(v)).unzip();
    let (bn, b_norm): (Vec<_>, Vec<_>) = b.iter().map(|v| unit(v)).unzip();
    let bsz = a.len();
    let mut scores = Mat::zeros(bsz, bsz);
    for i in 0..bsz {
        for j in 0..bsz {
            scores.row_mut(i)[j] = crate::tensor::dot(&an[i], &bn[j]) / tau;
        }
    }
    let (loss, ds) = symmetric_cross_entropy(&scores)?;
    let d_log_scale = crate::tensor::dot(ds.data(), scores.data());
    let w = a[0].len();
    let mut dan = vec![vec![0.0; w]; bsz];
    let mut dbn = vec![vec![0.0; w]; bsz];
    for i in 0..bsz {
        for j in 0..bsz {
            let g = ds.get(i, j) / tau;
            for c in 0..w {
                dan[i][c] += g * bn[j][c];
                dbn[j][c] += g * an[i][c];
            }
        }
    }
    let through_norm = |dn: &[f64], n: &[f64], len: f64| -> Vec<f64> {
        let p = crate::tensor::dot(dn, n);
        dn.iter().zip(n).map(|(d, u)| (d - u * p) / len).collect()
    };
    Ok(ContrastiveGrad {
        loss,
        da: (0..bsz).map(|i| through_norm(&dan[i], &an[i], a_norm[i])).collect(),
        db: (0..bsz).map(|j| through_norm(&dbn[j], &bn[j], b_norm[j])).collect(),
        d_log_scale,
    })
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Grads,
    v: Grads,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        AdamW {
            m: store.zero_grads(),
            v: store.zero_grads(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((pv, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let step = (*mv / bc1) / ((*vv / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *pv;
                *pv -= lr * step;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,l_mask,l_mse,l_cont,lr,accuracy";

impl StepRecord {
    /// One metrics-log line; accuracy is `na` when nothing was masked.
    pub fn csv_line(&self) -> String {
        let acc = self.accuracy.map_or("na".to_string(), |a| format!("{a:.6}"));
        format!(
            "{},{:.8},{:.8},{:.8},{:.6e},{}",
            self.step, self.loss.l_mask, self.loss.l_mse, self.loss.l_contrastive, self.lr, acc
        )
    }
}

/// An example with its drawn mask and dropout decision.
pub struct PreparedExample<'a> {
    pub example: &'a TrainExample,
    pub mask: MaskTensor,
    pub dropped: bool,
}

/// Draws a dropout decision then a training mask for each example, in order.
pub fn prepare_batch<'a>(
    batch: &[&'a TrainExample],
    levels: usize,
    cond_dropout_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<PreparedExample<'a>> {
    batch
        .iter()
        .map(|ex| {
            let dropped = rng.random::<f64>() < cond_dropout_prob;
            let draw = draw_train_mask(ex.codegram.len(), levels, rng);
            PreparedExample {
                example: ex,
                mask: draw.mask,
                dropped,
            }
        })
        .collect()
}

pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub grads: Grads,
    pub hits: usize,
    pub masked: usize,
}

/// Total objective over a prepared batch, without gradients.
pub fn batch_loss(model: &MaskModel, batch: &[PreparedExample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    Ok(objective(model, batch, cfg, false)?.loss)
}

/// Total objective and its gradient with respect to every parameter.
pub fn batch_gradients(model: &MaskModel, batch: &[PreparedExample], cfg: &TrainConfig) -> Result<BatchGradients> {
    objective(model, batch, cfg, true)
}

fn objective(
    model: &MaskModel,
    prepared: &[PreparedExample],
    cfg: &TrainConfig,
    want_grads: bool,
) -> Result<BatchGradients> {
    if prepared.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let outputs: Vec<ForwardOutput> = prepared
        .par_iter()
        .map(|p| {
            let input = apply_mask(&p.example.codegram, &p.mask)?;
            let cond = (!p.dropped).then_some(&p.example.bundle);
            model.forward(&input, cond, want_grads)
        })
        .collect::<Result<_>>()?;

    // Masked cross-entropy: mean of per-example means.
    let mut ce = Vec::with_capacity(prepared.len());
    let (mut hits, mut masked) = (0, 0);
    for (p, out) in prepared.iter().zip(&outputs) {
        let (loss, d, n) = masked_ce_grad(&out.logits, &p.example.codegram, &p.mask)?;
        let (h, c) = accuracy_counts(&out.logits, &p.example.codegram, &p.mask)?;
        hits += h;
        masked += c;
        ce.push((loss, d, n));
    }
    let ce_count = ce.iter().filter(|c| c.2 > 0).count();
    let ce_weight = if ce_count == 0 { 0.0 } else { 1.0 / ce_count as f64 };
    let l_mask = ce.iter().map(|c| c.0).sum::<f64>() * ce_weight;

    // Auxiliary losses on non-dropped examples that carry features.
    let active: Vec<usize> = if model.has_aux() {
        (0..prepared.len())
            .filter(|&i| !prepared[i].dropped && prepared[i].example.aux.is_some())
            .collect()
    } else {
        Vec::new()
    };
    let targets: Vec<AuxTargets> = active
        .iter()
        .map(|&i| AuxTargets::project(model, prepared[i].example.aux.as_ref().unwrap()))
        .collect::<Result<_>>()?;
    let mut d_seq: Vec<Option<Mat>> = vec![None; prepared.len()];
    let mut d_cls: Vec<Option<Vec<f64>>> = vec![None; prepared.len()];
    let mut d_proj: Vec<Mat> = targets
        .iter()
        .map(|t| Mat::zeros(t.target_sequence.rows(), t.target_sequence.cols()))
        .collect();
    let mut l_mse = 0.0;
    if !active.is_empty() {
        let w = cfg.lambda_reg / active.len() as f64;
        for (a, (&i, t)) in active.iter().zip(&targets).enumerate() {
            let enc = outputs[i].encoder.as_ref().expect("aux requires an encoder");
            let (loss, mut de, dt) = seq_mse_grad(&enc.sequence, &t.target_sequence)?;
            l_mse += loss / active.len() as f64;
            de.scale(w);
            d_seq[i] = Some(de);
            for (dp, v) in d_proj[a].data_mut().iter_mut().zip(dt.data()) {
                *dp += w * v;
            }
        }
    }
    let mut l_cont = 0.0;
    let mut d_log_scale = 0.0;
    if active.len() >= 2 {
        let tau = (-model.log_logit_scale().expect("aux head present")).exp();
        let cls: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| outputs[i].encoder.as_ref().unwrap().cls.clone())
            .collect();
        let means: Vec<Vec<f64>> = targets.iter().map(|t| t.target_mean.clone()).collect();
        let g = clip_contrastive_grad(&cls, &means, tau)?;
        l_cont = g.loss;
        let w = cfg.lambda_cont;
        for (a, &i) in active.iter().enumerate() {
            d_cls[i] = Some(g.da[a].iter().map(|v| w * v).collect());
            let rows = d_proj[a].rows();
            for r in 0..rows {
                for (dp, v) in d_proj[a].row_mut(r).iter_mut().zip(&g.db[a]) {
                    *dp += w * v / rows as f64;
                }
            }
        }
        let raw = model.params().get(model.logit_scale_id().unwrap()).data()[0];
        if raw > 0.0 && raw < MAX_LOGIT_SCALE {
            d_log_scale = w * g.d_log_scale;
        }
    }

    let loss = LossBreakdown::new(l_mask, l_mse, l_cont, cfg.lambda_reg, cfg.lambda_cont);
    for (name, v) in [("l_mask", l_mask), ("l_mse", l_mse), ("l_contrastive", l_cont)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let mut grads = model.params().zero_grads();
    if !want_grads {
        return Ok(BatchGradients {
            loss,
            grads,
            hits,
            masked,
        });
    }

    let per_example: Vec<Grads> = (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let mut g = model.params().zero_grads();
            let mut dl = ce[i].1.clone();
            dl.scale(ce_weight);
            model.backward(
                outputs[i].cache.as_ref(),
                &Adjoints {
                    logits: &dl,
                    cls: d_cls[i].as_deref(),
                    sequence: d_seq[i].as_ref(),
                },
                &mut g,
            )?;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    for g in &per_example {
        grads.add_assign(g);
    }
    for (a, &i) in active.iter().enumerate() {
        model.project_targets_backward(prepared[i].example.aux.as_ref().unwrap(), &d_proj[a], &mut grads)?;
    }
    if let Some(id) = model.logit_scale_id() {
        grads.get_mut(id).data_mut()[0] += d_log_scale;
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    Ok(BatchGradients {
        loss,
        grads,
        hits,
        masked,
    })
}

/// One optimization step on `batch`. `step` is the 1-based iteration that
/// selects the learning rate. Parameters are left untouched when any loss
/// component or gradient is non-finite.
pub fn train_step(
    model: &mut MaskModel,
    opt: &mut AdamW,
    batch: &[&TrainExample],
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let prepared = prepare_batch(batch, model.config().spec.levels, cfg.cond_dropout_prob, rng);
    let bg = batch_gradients(model, &prepared, cfg)?;
    let lr = cfg.lr_at(step);
    opt.update(model.params_mut(), &bg.grads, lr, cfg);
    if let Some(id) = model.logit_scale_id() {
        let v = &mut model.params_mut().get_mut(id).data_mut()[0];
        *v = v.clamp(0.0, MAX_LOGIT_SCALE);
    }
    Ok(StepRecord {
        step,
        loss: bg.loss,
        lr,
        accuracy: (bg.masked > 0).then(|| bg.hits as f64 / bg.masked as f64),
    })
}

/// Owns the model, optimizer state and data-order RNG.
pub struct Trainer {
    pub model: MaskModel,
    opt: AdamW,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: MaskModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(model.params());
        Ok(Trainer {
            model,
            opt,
            cfg,
            rng: derived_rng(cfg.seed, "train", 0),
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, batch: &[&TrainExample]) -> Result<StepRecord> {
        let rec = train_step(
            &mut self.model,
            &mut self.opt,
            batch,
            &self.cfg,
            self.step + 1,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs `total_steps` steps over shuffled epochs of `data`.
    pub fn fit(&mut self, data: &[TrainExample], mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut at = data.len();
        let mut records = Vec::with_capacity(self.cfg.total_steps);
        while self.step < self.cfg.total_steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            while batch.len() < self.cfg.batch_size.min(data.len()) {
                if at == order.len() {
                    order.shuffle(&mut self.rng);
                    at = 0;
                }
                batch.push(&data[order[at]]);
                at += 1;
            }
            let rec = self.step(&batch)?;
            on_step(&rec);
            records.push(rec);
        }
        Ok(records)
    }
}

/// Pooled masked-token accuracy under seeded training-style masks with
/// conditioning always present.
pub fn evaluate_masked_accuracy(model: &MaskModel, data: &[TrainExample], seed: u64) -> Result<Option<f64>> {
    let levels = model.config().spec.levels;
    let counts: Vec<(usize, usize)> = data
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = derived_rng(seed, "eval-mask", i as u64);
            let mask = draw_train_mask(ex.codegram.len(), levels, &mut rng).mask;
            let out = model.forward(&apply_mask(&ex.codegram, &mask)?, Some(&ex.bundle), false)?;
            accuracy_counts(&out.logits, &ex.codegram, &mask)
        })
        .collect::<Result<_>>()?;
    let (hit, n) = counts.iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
    Ok((n > 0).then(|| hit as f64 / n as f64))
}
