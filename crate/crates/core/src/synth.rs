//! Synthetic paired data: conditioning streams, codegram targets and
//! beats-like audio features generated from fixed seeded rules.
//!
//! Every example draws a sequence of clip symbols. The clip stream carries
//! a fixed random embedding per symbol; each codegram row copies the tokens
//! that a seeded hash assigns to the symbol of its clip frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codegram::{load_codegram, save_codegram, CodebookSpec, Codegram};
use crate::error::{Error, Result};
use crate::metrics::{load_embeddings, save_embeddings, EmbeddingSet};
use crate::model::conditioning::{load_bundle, resample_index, save_bundle};
use crate::model::{resample_nn, ConditioningBundle, Stream, StreamRole, StreamSpec};
use crate::seed::{derive_seed, derived_rng};
use crate::tensor::Mat;
use crate::train::TrainExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Tokens are a pure function of the clip symbols.
    DeterministicMap,
    /// As above, but each position is independently replaced by a uniform
    /// random token with probability `noise`.
    NoisyMap,
    /// Silence tokens except for short bursts starting at impulse frames of
    /// the alignment stream.
    EventOnsets,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub rule: Rule,
    pub len: usize,
    pub levels: usize,
    pub vocab_size: usize,
    pub symbols: usize,
    pub clip_frames: usize,
    pub clip_dim: usize,
    pub s3d_frames: usize,
    pub s3d_dim: usize,
    pub aux_frames: usize,
    pub aux_dim: usize,
    pub noise: f64,
    /// Rows per event burst (event-onsets only).
    pub burst: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            rule: Rule::DeterministicMap,
            len: 32,
            levels: 4,
            vocab_size: 64,
            symbols: 16,
            clip_frames: 8,
            clip_dim: 16,
            s3d_frames: 16,
            s3d_dim: 8,
            aux_frames: 32,
            aux_dim: 8,
            noise: 0.0,
            burst: 3,
            seed: 0,
        }
    }
}

pub const CLIP: &str = "clip";
pub const S3D: &str = "s3d";

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("len", self.len),
            ("levels", self.levels),
            ("symbols", self.symbols),
            ("clip_frames", self.clip_frames),
            ("clip_dim", self.clip_dim),
            ("s3d_frames", self.s3d_frames),
            ("s3d_dim", self.s3d_dim),
            ("aux_frames", self.aux_frames),
            ("aux_dim", self.aux_dim),
            ("burst", self.burst),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("noise must lie in [0, 1]"));
        }
        if self.rule == Rule::EventOnsets && self.s3d_frames != self.len {
            return Err(Error::invalid("event-onsets needs s3d_frames == len"));
        }
        Ok(())
    }

    /// Codebook layout for a model of width `embed_dim`.
    pub fn codebook(&self, embed_dim: usize) -> Result<CodebookSpec> {
        CodebookSpec::new(self.levels, self.vocab_size, embed_dim)
    }

    pub fn stream_specs(&self) -> Vec<StreamSpec> {
        vec![
            StreamSpec {
                name: CLIP.into(),
                role: StreamRole::FrameSemantic,
                width: self.clip_dim,
            },
            StreamSpec {
                name: S3D.into(),
                role: StreamRole::AlignmentSensitive,
                width: self.s3d_dim,
            },
        ]
    }

    /// Token that the hash rule assigns to `symbol` at `level`.
    pub fn token(&self, symbol: usize, level: usize) -> u32 {
        let idx = (symbol * self.levels + level) as u64;
        (derive_seed(self.seed, "token", idx) % self.vocab_size as u64) as u32
    }

    fn silence(&self, level: usize) -> u32 {
        (derive_seed(self.seed, "silence", level as u64) % self.vocab_size as u64) as u32
    }
}

/// Fixed per-task lookup tables.
#[derive(Clone, Debug)]
pub struct Tables {
    clip: Mat,
    s3d: Mat,
    /// `(levels * vocab) x aux_dim`
    aux: Mat,
}

impl Tables {
    pub fn new(spec: &SyntheticTaskSpec) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |label: &str, rows: usize, cols: usize| {
            let mut rng = derived_rng(spec.seed, label, 0);
            let mut m = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut rng)).collect());
            round_to_f32(&mut m);
            m
        };
        Tables {
            clip: draw("clip-table", spec.symbols, spec.clip_dim),
            s3d: draw("s3d-table", spec.symbols, spec.s3d_dim),
            aux: draw("aux-table", spec.levels * spec.vocab_size, spec.aux_dim),
        }
    }
}

/// Per-row beats-like features: the sum over levels of a fixed random
/// vector per (level, token), resampled to `aux_frames` rows.
pub fn beats_like(spec: &SyntheticTaskSpec, tables: &Tables, codegram: &Codegram) -> Result<Mat> {
    if codegram.levels() != spec.levels || codegram.spec().vocab_size != spec.vocab_size {
        return Err(Error::invalid("codegram layout does not match the task"));
    }
    let mut rows = Mat::zeros(codegram.len(), spec.aux_dim);
    for l in 0..codegram.len() {
        let dst = rows.row_mut(l);
        for k in 0..spec.levels {
            let src = tables.aux.row(k * spec.vocab_size + codegram.get(l, k) as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut out = resample_nn(&rows, spec.aux_frames)?;
    round_to_f32(&mut out);
    Ok(out)
}

/// Features are stored as `f32`; rounding at generation makes files round-trip exactly.
fn round_to_f32(m: &mut Mat) {
    for v in m.data_mut() {
        *v = f64::from(*v as f32);
    }
}

/// One generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthExample {
    /// Training target (noisy for the noisy-map rule).
    pub codegram: Codegram,
    /// Noise-free target determined by the conditioning.
    pub clean: Codegram,
    pub bundle: ConditioningBundle,
    /// Beats-like features of `codegram`.
    pub aux: Mat,
}

impl SynthExample {
    pub fn to_train_example(&self) -> TrainExample {
        TrainExample {
            codegram: self.codegram.clone(),
            bundle: self.bundle.clone(),
            aux: Some(self.aux.clone()),
        }
    }

    pub fn clip(&self) -> &Mat {
        &self
            .bundle
            .stream(CLIP)
            .expect("synthetic bundles carry a clip stream")
            .data
    }
}

/// Deterministic generator for a task.
#[derive(Clone, Debug)]
pub struct Generator {
    spec: SyntheticTaskSpec,
    tables: Tables,
    codebook: CodebookSpec,
}

impl Generator {
    pub fn new(spec: SyntheticTaskSpec, embed_dim: usize) -> Result<Self> {
        spec.validate()?;
        let codebook = spec.codebook(embed_dim)?;
        Ok(Generator {
            tables: Tables::new(&spec),
            spec,
            codebook,
        })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    pub fn tables(&self) -> &Tables {
        &self.tables
    }

    pub fn codebook(&self) -> CodebookSpec {
        self.codebook
    }

    pub fn beats_like(&self, codegram: &Codegram) -> Result<Mat> {
        beats_like(&self.spec, &self.tables, codegram)
    }

    /// Conditioning and clean target for a symbol sequence and onset set.
    fn render(&self, symbols: &[usize], onsets: &[bool]) -> Result<(ConditioningBundle, Codegram)> {
        let s = &self.spec;
        let mut clip = Mat::zeros(s.clip_frames, s.clip_dim);
        for (f, &sym) in symbols.iter().enumerate() {
            clip.row_mut(f).copy_from_slice(self.tables.clip.row(sym));
        }
        let mut s3d = Mat::zeros(s.s3d_frames, s.s3d_dim);
        for t in 0..s.s3d_frames {
            let sym = symbols[resample_index(t, s.clip_frames, s.s3d_frames)];
            s3d.row_mut(t).copy_from_slice(self.tables.s3d.row(sym));
        }
        let mut tokens = Vec::with_capacity(s.len * s.levels);
        match s.rule {
            Rule::DeterministicMap | Rule::NoisyMap => {
                for l in 0..s.len {
                    let f = frame_of_row(l, s.len, s.clip_frames);
                    tokens.extend((0..s.levels).map(|k| s.token(symbols[f], k)));
                }
            }
            Rule::EventOnsets => {
                for t in 0..s.len {
                    if onsets[t] {
                        s3d.row_mut(t)[0] += 4.0;
                    }
                }
                let mut active: Option<(usize, usize)> = None;
                for l in 0..s.len {
                    if onsets[l] {
                        active = Some((l, symbols[frame_of_row(l, s.len, s.clip_frames)]));
                    }
                    match active {
                        Some((start, sym)) if l < start + s.burst => {
                            tokens.extend((0..s.levels).map(|k| s.token(sym, k)));
                        }
                        _ => tokens.extend((0..s.levels).map(|k| s.silence(k))),
                    }
                }
            }
        }
        round_to_f32(&mut clip);
        round_to_f32(&mut s3d);
        let bundle = ConditioningBundle::new(vec![
            Stream {
                name: CLIP.into(),
                role: StreamRole::FrameSemantic,
                data: clip,
            },
            Stream {
                name: S3D.into(),
                role: StreamRole::AlignmentSensitive,
                data: s3d,
            },
        ])?;
        Ok((bundle, Codegram::new(s.len, self.codebook, tokens)?))
    }

    /// Example `index`; a pure function of `(spec, index)`.
    pub fn example(&self, index: u64) -> Result<SynthExample> {
        let s = &self.spec;
        let mut rng = derived_rng(s.seed, "example", index);
        let symbols: Vec<usize> = (0..s.clip_frames).map(|_| rng.random_range(0..s.symbols)).collect();
        let onsets: Vec<bool> = match s.rule {
            Rule::EventOnsets => (0..s.len)
                .map(|_| rng.random_bool(1.0 / (2 * s.burst) as f64))
                .collect(),
            _ => vec![false; s.len],
        };
        let (bundle, clean) = self.render(&symbols, &onsets)?;
        let codegram = match s.rule {
            Rule::NoisyMap => {
                let mut tokens = clean.tokens().to_vec();
                for t in &mut tokens {
                    if rng.random_bool(s.noise) {
                        *t = rng.random_range(0..s.vocab_size as u32);
                    }
                }
                Codegram::new(s.len, self.codebook, tokens)?
            }
            _ => clean.clone(),
        };
        let aux = self.beats_like(&codegram)?;
        Ok(SynthExample {
            codegram,
            clean,
            bundle,
            aux,
        })
    }

    pub fn examples(&self, range: std::ops::Range<u64>) -> Result<Vec<SynthExample>> {
        range.map(|i| self.example(i)).collect()
    }
}

/// Clip frame that governs codegram row `l`: the frame the nearest-neighbour
/// resampler places at that row.
pub fn frame_of_row(l: usize, len: usize, clip_frames: usize) -> usize {
    resample_index(l, clip_frames, len)
}

/// Train/valid/test sizes for `count` examples: 80/10/10 by index.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 8 / 10;
    let valid = count / 10;
    (train, valid, count - train - valid)
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub embed_dim: usize,
    pub train: Vec<SynthExample>,
    pub valid: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

impl Dataset {
    pub fn generate(spec: SyntheticTaskSpec, embed_dim: usize, count: usize) -> Result<Self> {
        let g = Generator::new(spec.clone(), embed_dim)?;
        let (tr, va, _) = split_sizes(count);
        let all = g.examples(0..count as u64)?;
        let mut it = all.into_iter();
        let train: Vec<_> = it.by_ref().take(tr).collect();
        let valid: Vec<_> = it.by_ref().take(va).collect();
        let test: Vec<_> = it.collect();
        Ok(Dataset {
            spec,
            embed_dim,
            train,
            valid,
            test,
        })
    }

    pub fn split(&self, name: &str) -> Option<&[SynthExample]> {
        match name {
            "train" => Some(&self.train),
            "valid" => Some(&self.valid),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `task.toml` and `<split>/<index>.{cg,clean.cg,cond,aux}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            embed_dim: self.embed_dim,
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
            task: self.spec.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(dir.join(MANIFEST), text)?;
        let mut index = 0usize;
        for name in SPLITS {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            for ex in self.split(name).expect("known split") {
                let base = sub.join(format!("{index:06}"));
                save_codegram(&ex.codegram, &with_ext(&base, "cg"))?;
                save_codegram(&ex.clean, &with_ext(&base, "clean.cg"))?;
                save_bundle(&ex.bundle, &with_ext(&base, "cond"))?;
                save_embeddings(
                    &EmbeddingSet::new("beats-like", ex.aux.clone())?,
                    &with_ext(&base, "aux"),
                )?;
                index += 1;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", MANIFEST)))?;
        m.task.validate()?;
        let mut out = Dataset {
            spec: m.task.clone(),
            embed_dim: m.embed_dim,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        let mut index = 0usize;
        for (name, count) in SPLITS.into_iter().zip([m.train, m.valid, m.test]) {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let base = dir.join(name).join(format!("{index:06}"));
                v.push(SynthExample {
                    codegram: load_codegram(&with_ext(&base, "cg"), m.embed_dim)?,
                    clean: load_codegram(&with_ext(&base, "clean.cg"), m.embed_dim)?,
                    bundle: load_bundle(&with_ext(&base, "cond"))?,
                    aux: load_embeddings(&with_ext(&base, "aux"))?.vectors,
                });
                index += 1;
            }
            match name {
                "train" => out.train = v,
                "valid" => out.valid = v,
                _ => out.test = v,
            }
        }
        Ok(out)
    }
}

pub const MANIFEST: &str = "task.toml";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    embed_dim: usize,
    train: usize,
    valid: usize,
    test: usize,
    task: SyntheticTaskSpec,
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Toy audio for a codegram: each row contributes `samples_per_row`
/// samples of summed sinusoids, one per level, whose pitch is set by the
/// token and whose amplitude halves per level.
pub fn render_waveform(codegram: &Codegram, sample_rate: f64, samples_per_row: usize) -> Vec<f64> {
    let k_levels = codegram.levels();
    let vocab = codegram.spec().vocab_size;
    let span = (k_levels * vocab) as f64;
    let mut out = Vec::with_capacity(codegram.len() * samples_per_row);
    for l in 0..codegram.len() {
        let freqs: Vec<f64> = (0..k_levels)
            .map(|k| 80.0 * 2f64.powf(7.0 * (k * vocab + codegram.get(l, k) as usize) as f64 / span))
            .collect();
        for i in 0..samples_per_row {
            let t = (l * samples_per_row + i) as f64 / sample_rate;
            let v: f64 = freqs
                .iter()
                .enumerate()
                .map(|(k, f)| 0.5f64.powi(k as i32) * (2.0 * std::f64::consts::PI * f * t).sin())
                .sum();
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests;
