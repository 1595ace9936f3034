//! Pipeline stages shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use codegram_core::metrics::{frechet_distance_sets, mfcc_like, novelty_score, EmbeddingSet, MetricReport, MfccConfig};
use codegram_core::model::params::{load_checkpoint, save_checkpoint};
use codegram_core::sampler::{beam_seed, sample_with_trace, trace_csv, SamplerConfig, TraceRow};
use codegram_core::seed::{derive_seed, derived_rng};
use codegram_core::selector::{select_best, ScavExample, Selection};
use codegram_core::synth::{render_waveform, Dataset, Generator, SynthExample};
use codegram_core::train::{evaluate_masked_accuracy, StepRecord, TrainExample, METRICS_HEADER};
use codegram_core::{Codegram, MaskModel, Mat, Scav, Trainer};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const RUN_CONFIG: &str = "config.toml";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const SCAV_CKPT: &str = "scav.ckpt";
pub const TRAIN_METRICS: &str = "metrics.csv";
pub const SCAV_METRICS: &str = "scav_loss.csv";
pub const SELECTION_CSV: &str = "selection.csv";
pub const REPORT: &str = "report.txt";
/// Waveform samples rendered per codegram row for the MFCC-like metric.
pub const SAMPLES_PER_ROW: usize = 512;

pub fn generate(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    Ok(Dataset::generate(cfg.task.clone(), cfg.model.hidden, cfg.data.count)?)
}

/// Loads a dataset and checks it was generated for this config.
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> CliResult<Dataset> {
    let data = Dataset::load(dir)?;
    if data.spec != cfg.task || data.embed_dim != cfg.model.hidden {
        return Err(CliError::Validation(format!(
            "dataset at {} was generated for a different task or model width",
            dir.display()
        )));
    }
    Ok(data)
}

pub fn generator(cfg: &ExperimentConfig) -> CliResult<Generator> {
    Ok(Generator::new(cfg.task.clone(), cfg.model.hidden)?)
}

pub fn train_model(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<(MaskModel, Vec<StepRecord>)> {
    let model = MaskModel::new(cfg.model_config())?;
    let examples: Vec<TrainExample> = data.train.iter().map(SynthExample::to_train_example).collect();
    let mut trainer = Trainer::new(model, cfg.train)?;
    let every = (cfg.train.total_steps / 20).max(1);
    let records = trainer.fit(&examples, |r| {
        if r.step % every == 0 {
            log::info!("train step {} l_mask {:.5} lr {:.3e}", r.step, r.loss.l_mask, r.lr);
        }
    })?;
    Ok((trainer.model, records))
}

pub fn scav_examples(examples: &[SynthExample]) -> Vec<ScavExample> {
    examples
        .iter()
        .map(|e| ScavExample {
            video: e.clip().clone(),
            audio: e.aux.clone(),
        })
        .collect()
}

pub fn train_scav(cfg: &ExperimentConfig, data: &Dataset) -> CliResult<(Scav, Vec<f64>)> {
    let mut scav = Scav::new(cfg.scav)?;
    let every = (cfg.scav.steps / 10).max(1);
    let losses = scav.fit(&scav_examples(&data.train), |s, l| {
        if s % every == 0 {
            log::info!("scav step {s} loss {l:.5}");
        }
    })?;
    Ok((scav, losses))
}

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// A trained run directory: resolved config plus both checkpoints.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub model: MaskModel,
    pub scav: Scav,
}

impl Run {
    pub fn save(&self, dir: &Path, records: &[StepRecord], scav_losses: &[f64]) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(RUN_CONFIG), self.cfg.to_toml())?;
        save_checkpoint(self.model.params(), &dir.join(MODEL_CKPT))?;
        self.scav.save(&dir.join(SCAV_CKPT))?;
        fs::write(dir.join(TRAIN_METRICS), metrics_csv(records))?;
        let mut s = String::from("step,loss\n");
        for (i, l) in scav_losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.8}\n", i + 1));
        }
        fs::write(dir.join(SCAV_METRICS), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let cfg = ExperimentConfig::load(&dir.join(RUN_CONFIG))?;
        let model = load_model(&cfg, &dir.join(MODEL_CKPT))?;
        let scav = Scav::load(cfg.scav, &dir.join(SCAV_CKPT))?;
        Ok(Run { cfg, model, scav })
    }
}

pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> CliResult<MaskModel> {
    let mut model = MaskModel::new(cfg.model_config())?;
    model.params_mut().load_values(&load_checkpoint(path)?)?;
    Ok(model)
}

/// Sampler seed for the example with global dataset index `index`.
pub fn example_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, "example", index as u64)
}

/// One sampled beam and its per-step trace.
pub type Beam = (Codegram, Vec<TraceRow>);

/// Beams for one example, each with its per-step trace.
pub fn sample_example(
    model: &MaskModel,
    ex: &SynthExample,
    index: usize,
    cfg: &SamplerConfig,
    beams: usize,
) -> CliResult<Vec<Beam>> {
    let base = example_seed(cfg.seed, index);
    let len = ex.codegram.len();
    (0..beams)
        .into_par_iter()
        .map(|b| {
            let c = SamplerConfig {
                seed: beam_seed(base, b),
                ..*cfg
            };
            Ok(sample_with_trace(model, &ex.bundle, len, &c)?)
        })
        .collect()
}

/// Samples every example of a split; `first` is the split's global offset.
pub fn sample_split(
    model: &MaskModel,
    examples: &[SynthExample],
    first: usize,
    cfg: &SamplerConfig,
    beams: usize,
) -> CliResult<Vec<Vec<Beam>>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| sample_example(model, ex, first + i, cfg, beams))
        .collect()
}

pub fn example_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("{index:06}"))
}

pub fn beam_path(out: &Path, index: usize, b: usize) -> PathBuf {
    example_dir(out, index).join(format!("beam{b}.cg"))
}

pub fn write_samples(out: &Path, first: usize, samples: &[Vec<Beam>], trace: bool) -> CliResult<()> {
    for (i, beams) in samples.iter().enumerate() {
        let dir = example_dir(out, first + i);
        fs::create_dir_all(&dir)?;
        for (b, (cg, rows)) in beams.iter().enumerate() {
            codegram_core::codegram::save_codegram(cg, &beam_path(out, first + i, b))?;
            if trace {
                fs::write(dir.join(format!("trace{b}.csv")), trace_csv(rows))?;
            }
        }
    }
    Ok(())
}

pub fn load_beams(samples: &Path, index: usize, beams: usize, embed_dim: usize) -> CliResult<Vec<Codegram>> {
    (0..beams)
        .map(|b| {
            Ok(codegram_core::codegram::load_codegram(
                &beam_path(samples, index, b),
                embed_dim,
            )?)
        })
        .collect()
}

/// Ranks each example's beams by SCAV distance between its clip features
/// and the beats-like features of every candidate.
pub fn select_split(
    scav: &Scav,
    gen: &Generator,
    examples: &[SynthExample],
    beams: &[Vec<Codegram>],
) -> CliResult<Vec<Selection>> {
    examples
        .iter()
        .zip(beams)
        .map(|(ex, cands)| {
            let audio: Vec<Mat> = cands.iter().map(|c| gen.beats_like(c)).collect::<Result<_, _>>()?;
            Ok(select_best(ex.clip(), &audio, scav)?)
        })
        .collect()
}

pub fn selection_csv(first: usize, sel: &[Selection]) -> String {
    let b = sel.first().map_or(0, |s| s.distances.len());
    let head: Vec<String> = (0..b).map(|i| format!("d{i}")).collect();
    let mut s = format!("example,index,{}\n", head.join(","));
    for (i, x) in sel.iter().enumerate() {
        s.push_str(&format!("{},{}\n", first + i, x.csv()));
    }
    s
}

/// Reads `example,index,...` rows back into `(example, index)` pairs.
pub fn parse_selection(text: &str) -> CliResult<Vec<(usize, usize)>> {
    let bad = |l: &str| CliError::Validation(format!("malformed selection line `{l}`"));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut it = l.split(',');
            let e = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(l))?;
            let i = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(l))?;
            Ok((e, i))
        })
        .collect()
}

/// Share of trials where the true audio wins among `candidates - 1` decoys
/// drawn from the other examples.
pub fn planted_hit_rate(scav: &Scav, examples: &[SynthExample], candidates: usize, seed: u64) -> CliResult<f64> {
    if examples.len() < candidates {
        return Err(CliError::Validation(format!(
            "planted selection needs at least {candidates} examples, have {}",
            examples.len()
        )));
    }
    let hits: Vec<bool> = (0..examples.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, "planted", i as u64);
            let decoys: Vec<usize> = sample_indices(&mut rng, examples.len() - 1, candidates - 1)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j })
                .collect();
            let slot = rng.random_range(0..candidates);
            let mut audio: Vec<Mat> = decoys.iter().map(|&j| examples[j].aux.clone()).collect();
            audio.insert(slot, examples[i].aux.clone());
            Ok(select_best(examples[i].clip(), &audio, scav)?.index == slot)
        })
        .collect::<CliResult<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn mfcc_set(cgs: &[&Codegram], sample_rate: f64) -> CliResult<EmbeddingSet> {
    let cfg = MfccConfig {
        sample_rate,
        ..MfccConfig::default()
    };
    let parts: Vec<EmbeddingSet> = cgs
        .par_iter()
        .map(|cg| mfcc_like(&render_waveform(cg, sample_rate, SAMPLES_PER_ROW), &cfg))
        .collect::<Result<_, _>>()?;
    let dim = parts.first().map_or(0, EmbeddingSet::dim);
    let mut data = Vec::new();
    for p in &parts {
        data.extend_from_slice(p.vectors.data());
    }
    Ok(EmbeddingSet::new(
        "mfcc-like",
        Mat::from_vec(data.len() / dim.max(1), dim, data),
    )?)
}

/// Output-quality metrics of one chosen codegram per example.
pub fn output_metrics(
    cfg: &ExperimentConfig,
    gen: &Generator,
    examples: &[SynthExample],
    chosen: &[Codegram],
    report: &mut MetricReport,
) -> CliResult<()> {
    if examples.len() != chosen.len() || examples.is_empty() {
        return Err(CliError::Validation(
            "one chosen codegram per example is required".into(),
        ));
    }
    let exact = examples.iter().zip(chosen).filter(|(e, c)| &e.clean == *c).count();
    report.push("exact_match", exact as f64 / examples.len() as f64);
    let gen_refs: Vec<&Codegram> = chosen.iter().collect();
    let ref_refs: Vec<&Codegram> = examples.iter().map(|e| &e.codegram).collect();
    let fd = frechet_distance_sets(
        &mfcc_set(&gen_refs, cfg.eval.sample_rate)?,
        &mfcc_set(&ref_refs, cfg.eval.sample_rate)?,
    )?;
    report.push("fd_mfcc", fd);
    let ns: Vec<f64> = examples
        .par_iter()
        .zip(chosen)
        .map(|(e, c)| Ok(novelty_score(&gen.beats_like(c)?, &e.aux, cfg.eval.novelty_kernel)?))
        .collect::<CliResult<_>>()?;
    report.push("ns", ns.iter().sum::<f64>() / ns.len() as f64);
    Ok(())
}

/// Mean of the last tenth (at least one) of the `l_mask` curve.
pub fn l_mask_tail(records: &[StepRecord]) -> f64 {
    let n = (records.len() / 10).max(1).min(records.len());
    let tail = &records[records.len() - n..];
    tail.iter().map(|r| r.loss.l_mask).sum::<f64>() / n.max(1) as f64
}

pub fn masked_accuracy(cfg: &ExperimentConfig, model: &MaskModel, examples: &[SynthExample]) -> CliResult<f64> {
    let data: Vec<TrainExample> = examples.iter().map(SynthExample::to_train_example).collect();
    let acc = evaluate_masked_accuracy(model, &data, derive_seed(cfg.seed, "eval", 0))?;
    Ok(acc.unwrap_or(0.0))
}

/// Key=value lines followed by a table.
pub fn render_report(report: &MetricReport) -> String {
    let mut s = String::new();
    for (k, v) in &report.entries {
        s.push_str(&format!("{k}={v:.12e}\n"));
    }
    s.push('\n');
    s.push_str(&report.to_table());
    s
}

pub struct PipelineOutput {
    pub report: MetricReport,
    pub text: String,
}

/// gen-data, train, sample, select and eval in one pass. Intermediate
/// artifacts are written under `out` when given.
pub fn pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> CliResult<PipelineOutput> {
    let data = generate(cfg)?;
    let gen = generator(cfg)?;
    let first = data.train.len() + data.valid.len();
    log::info!("generated {} examples", cfg.data.count);
    let (model, records) = train_model(cfg, &data)?;
    let (scav, scav_losses) = train_scav(cfg, &data)?;
    let test = limit(&data.test, cfg.eval.limit);
    let samples = sample_split(&model, test, first, &cfg.sampler, cfg.eval.beams)?;
    let beams: Vec<Vec<Codegram>> = samples
        .iter()
        .map(|b| b.iter().map(|(c, _)| c.clone()).collect())
        .collect();
    let selections = select_split(&scav, &gen, test, &beams)?;
    let chosen: Vec<Codegram> = beams.iter().zip(&selections).map(|(b, s)| b[s.index].clone()).collect();

    let mut report = MetricReport::default();
    report.push("l_mask_last", records.last().map_or(f64::NAN, |r| r.loss.l_mask));
    report.push("l_mask_tail", l_mask_tail(&records));
    report.push("masked_accuracy", masked_accuracy(cfg, &model, &data.test)?);
    let first_beam: Vec<Codegram> = beams.iter().map(|b| b[0].clone()).collect();
    let exact0 = test.iter().zip(&first_beam).filter(|(e, c)| &e.clean == *c).count();
    report.push("exact_match_beam0", exact0 as f64 / test.len() as f64);
    output_metrics(cfg, &gen, test, &chosen, &mut report)?;
    let hit = planted_hit_rate(&scav, &data.test, cfg.eval.beams, derive_seed(cfg.seed, "planted", 0))?;
    report.push("selection_hit_rate", hit);

    let text = render_report(&report);
    if let Some(dir) = out {
        data.save(&dir.join("data"))?;
        Run {
            cfg: cfg.clone(),
            model,
            scav,
        }
        .save(&dir.join("run"), &records, &scav_losses)?;
        write_samples(&dir.join("samples"), first, &samples, false)?;
        fs::write(
            dir.join("samples").join(SELECTION_CSV),
            selection_csv(first, &selections),
        )?;
        fs::write(dir.join(REPORT), &text)?;
    }
    Ok(PipelineOutput { report, text })
}

pub fn limit(examples: &[SynthExample], n: usize) -> &[SynthExample] {
    if n == 0 {
        examples
    } else {
        &examples[..n.min(examples.len())]
    }
}
