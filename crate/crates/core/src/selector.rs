//! Sequence-level audio-visual encoders and distance-based beam selection.
//!
//! Both branches map a feature sequence to `n_scav x width` through a
//! nearest-neighbour length adapter and a per-frame MLP. The audio branch
//! emits `groups` sub-vectors per frame which are averaged before any
//! distance is taken.

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{Mlp, MlpCache};
use crate::model::params::{load_checkpoint, save_checkpoint, Grads, ParamStore};
use crate::model::resample_nn;
use crate::seed::derived_rng;
use crate::tensor::Mat;
use crate::train::{symmetric_cross_entropy, AdamW, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScavConfig {
    pub n_scav: usize,
    pub width: usize,
    pub hidden: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub groups: usize,
    pub tau: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ScavConfig {
    fn default() -> Self {
        ScavConfig {
            n_scav: 16,
            width: 16,
            hidden: 64,
            video_dim: 8,
            audio_dim: 8,
            groups: 8,
            tau: 0.05,
            lr: 3e-3,
            steps: 400,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ScavConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_scav", self.n_scav),
            ("width", self.width),
            ("hidden", self.hidden),
            ("video_dim", self.video_dim),
            ("audio_dim", self.audio_dim),
            ("groups", self.groups),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        Ok(())
    }

    fn optimizer_config(&self) -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }
}

/// Video and audio sequences in the common space.
#[derive(Clone, Debug, PartialEq)]
pub struct ScavPair {
    pub e_video: Mat,
    pub e_audio: Mat,
}

/// Mean squared Euclidean distance between two sequences.
pub fn scav_distance(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::shape("sequence length", a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("sequence width", a.cols(), b.cols()));
    }
    if a.data().is_empty() {
        return Err(Error::invalid("empty sequences"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data().len() as f64)
}

fn neg_distance_scores(video: &[Mat], audio: &[Mat], tau: f64) -> Result<Mat> {
    let b = video.len();
    let mut scores = Mat::zeros(b, b);
    for (i, v) in video.iter().enumerate() {
        for (j, a) in audio.iter().enumerate() {
            scores.set(i, j, -scav_distance(v, a)? / tau);
        }
    }
    Ok(scores)
}

/// Symmetric cross-entropy over negative pairwise distances scaled by `1/tau`.
pub fn scav_contrastive_loss(batch: &[ScavPair], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be positive"));
    }
    let video: Vec<Mat> = batch.iter().map(|p| p.e_video.clone()).collect();
    let audio: Vec<Mat> = batch.iter().map(|p| p.e_audio.clone()).collect();
    if batch.len() < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    Ok(symmetric_cross_entropy(&neg_distance_scores(&video, &audio, tau)?)?.0)
}

/// Paired raw features: clip-like for video, beats-like for audio.
#[derive(Clone, Debug, PartialEq)]
pub struct ScavExample {
    pub video: Mat,
    pub audio: Mat,
}

#[derive(Clone, Debug)]
pub struct Scav {
    cfg: ScavConfig,
    store: ParamStore,
    video: Mlp,
    audio: Mlp,
}

struct Encoded {
    out: Mat,
    cache: MlpCache,
}

impl Scav {
    pub fn new(cfg: ScavConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derived_rng(cfg.seed, "scav", 0);
        let mut store = ParamStore::new();
        let video = Mlp::new(&mut store, "scav.video", cfg.video_dim, cfg.hidden, cfg.width, &mut rng);
        let audio = Mlp::new(
            &mut store,
            "scav.audio",
            cfg.audio_dim,
            cfg.hidden,
            cfg.groups * cfg.width,
            &mut rng,
        );
        Ok(Scav {
            cfg,
            store,
            video,
            audio,
        })
    }

    pub fn config(&self) -> &ScavConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    /// Builds the encoders for `cfg` and loads weights from `path`.
    pub fn load(cfg: ScavConfig, path: &Path) -> Result<Self> {
        let mut scav = Scav::new(cfg)?;
        scav.store.load_values(&load_checkpoint(path)?)?;
        Ok(scav)
    }

    fn check_input(&self, features: &Mat, dim: usize) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::invalid("empty feature sequence"));
        }
        if features.cols() != dim {
            return Err(Error::shape("feature width", dim, features.cols()));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("selector input".into()));
        }
        Ok(())
    }

    fn video_forward(&self, features: &Mat) -> Result<Encoded> {
        self.check_input(features, self.cfg.video_dim)?;
        let x = resample_nn(features, self.cfg.n_scav)?;
        let (out, cache) = self.video.forward(&self.store, &x);
        Ok(Encoded { out, cache })
    }

    fn audio_forward(&self, features: &Mat) -> Result<Encoded> {
        self.check_input(features, self.cfg.audio_dim)?;
        let x = resample_nn(features, self.cfg.n_scav)?;
        let (y, cache) = self.audio.forward(&self.store, &x);
        let (n, w, g) = (self.cfg.n_scav, self.cfg.width, self.cfg.groups);
        let mut out = Mat::zeros(n, w);
        for t in 0..n {
            let row = y.row(t);
            let dst = out.row_mut(t);
            for gi in 0..g {
                for (d, v) in dst.iter_mut().zip(&row[gi * w..(gi + 1) * w]) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d /= g as f64;
            }
        }
        Ok(Encoded { out, cache })
    }

    pub fn encode_video(&self, features: &Mat) -> Result<Mat> {
        Ok(self.video_forward(features)?.out)
    }

    /// Group-averaged audio sequence.
    pub fn encode_audio(&self, features: &Mat) -> Result<Mat> {
        Ok(self.audio_forward(features)?.out)
    }

    pub fn encode_pair(&self, ex: &ScavExample) -> Result<ScavPair> {
        Ok(ScavPair {
            e_video: self.encode_video(&ex.video)?,
            e_audio: self.encode_audio(&ex.audio)?,
        })
    }

    /// Contrastive loss and parameter gradients over one batch.
    pub fn loss_and_grads(&self, batch: &[&ScavExample]) -> Result<(f64, Grads)> {
        let b = batch.len();
        if b < 2 {
            return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
        }
        let enc: Vec<(Encoded, Encoded)> = batch
            .par_iter()
            .map(|ex| Ok((self.video_forward(&ex.video)?, self.audio_forward(&ex.audio)?)))
            .collect::<Result<_>>()?;
        let video: Vec<Mat> = enc.iter().map(|e| e.0.out.clone()).collect();
        let audio: Vec<Mat> = enc.iter().map(|e| e.1.out.clone()).collect();
        let (loss, dscores) = symmetric_cross_entropy(&neg_distance_scores(&video, &audio, self.cfg.tau)?)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("selector contrastive loss".into()));
        }
        let (n, w, g) = (self.cfg.n_scav, self.cfg.width, self.cfg.groups);
        let scale = 2.0 / (n * w) as f64 / self.cfg.tau;
        let mut dv: Vec<Mat> = (0..b).map(|_| Mat::zeros(n, w)).collect();
        let mut da: Vec<Mat> = (0..b).map(|_| Mat::zeros(n, w)).collect();
        for i in 0..b {
            for j in 0..b {
                // d(-dist/tau)/dv = -2 (v - a) / (n w tau)
                let c = dscores.get(i, j) * scale;
                for ((x, y), (gv, ga)) in video[i]
                    .data()
                    .iter()
                    .zip(audio[j].data())
                    .zip(dv[i].data_mut().iter_mut().zip(da[j].data_mut().iter_mut()))
                {
                    let diff = x - y;
                    *gv -= c * diff;
                    *ga += c * diff;
                }
            }
        }
        let parts: Vec<Grads> = enc
            .par_iter()
            .zip(dv.par_iter().zip(da.par_iter()))
            .map(|((ev, ea), (dvi, dai))| {
                let mut grads = self.store.zero_grads();
                self.video.backward(&self.store, &mut grads, &ev.cache, dvi);
                let mut dy = Mat::zeros(n, g * w);
                for t in 0..n {
                    let src = dai.row(t);
                    let dst = dy.row_mut(t);
                    for gi in 0..g {
                        for (d, s) in dst[gi * w..(gi + 1) * w].iter_mut().zip(src) {
                            *d = s / g as f64;
                        }
                    }
                }
                self.audio.backward(&self.store, &mut grads, &ea.cache, &dy);
                grads
            })
            .collect();
        let mut grads = self.store.zero_grads();
        for p in &parts {
            grads.add_assign(p);
        }
        Ok((loss, grads))
    }

    /// Minibatch training on paired features; returns per-step losses.
    pub fn fit(&mut self, data: &[ScavExample], mut on_step: impl FnMut(usize, f64)) -> Result<Vec<f64>> {
        if data.len() < 2 {
            return Err(Error::invalid("selector training needs at least 2 pairs"));
        }
        let opt_cfg = self.cfg.optimizer_config();
        let mut opt = AdamW::new(&self.store);
        let mut rng = derived_rng(self.cfg.seed, "scav-train", 0);
        let bs = self.cfg.batch_size.min(data.len());
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for step in 1..=self.cfg.steps {
            if order.len() < bs {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.split_off(order.len() - bs);
            let batch: Vec<&ScavExample> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = self.loss_and_grads(&batch)?;
            opt.update(&mut self.store, &grads, self.cfg.lr, &opt_cfg);
            on_step(step, loss);
            losses.push(loss);
        }
        Ok(losses)
    }
}

/// Chosen candidate and every candidate's distance.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub distances: Vec<f64>,
}

impl Selection {
    pub fn csv(&self) -> String {
        let d: Vec<String> = self.distances.iter().map(|d| format!("{d:.12e}")).collect();
        format!("{},{}", self.index, d.join(","))
    }
}

/// Index of the smallest distance; the earliest wins a tie.
pub fn argmin_first(distances: &[f64]) -> Result<usize> {
    if distances.is_empty() {
        return Err(Error::invalid("no candidates"));
    }
    let mut best = 0;
    for (i, &d) in distances.iter().enumerate() {
        if d.is_nan() {
            return Err(Error::NonFinite(format!("distance of candidate {i}")));
        }
        if d < distances[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Picks the candidate whose encoded audio is closest to the encoded video.
pub fn select_best(video: &Mat, candidates: &[Mat], scav: &Scav) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates"));
    }
    let e_video = scav.encode_video(video)?;
    let distances: Vec<f64> = candidates
        .par_iter()
        .map(|c| scav_distance(&e_video, &scav.encode_audio(c)?))
        .collect::<Result<_>>()?;
    Ok(Selection {
        index: argmin_first(&distances)?,
        distances,
    })
}

#[cfg(test)]
mod tests;
