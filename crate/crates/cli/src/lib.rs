//! Experiment harness for the codegram engine.
//!
//! Exit codes: 0 ok, 2 usage, 3 io, 4 validation.

pub mod config;
pub mod error;
pub mod workflow;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use codegram_core::metrics::{frechet_distance_sets, load_embeddings, novelty_score, MetricReport};
use codegram_core::scheduler::build_sample_schedule;
use codegram_core::Codegram;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult, EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION};
use workflow::*;

#[derive(Debug, Parser)]
#[command(
    name = "codegram",
    version,
    about = "Masked token modeling experiments on synthetic paired data"
)]
pub struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the token model and the selector on a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode beams for every example of a split.
    Sample(SampleArgs),
    /// Pick one beam per example with a trained selector.
    Select(SelectArgs),
    /// Compute metrics on embedding files or on sampled outputs.
    Eval(EvalArgs),
    /// gen-data, train, sample, select and eval in one go.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only the first N examples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub beams: Option<usize>,
    /// Always run the unconditional pass, even at gamma 0.
    #[arg(long)]
    pub two_pass: bool,
    /// Write per-step traces next to each beam.
    #[arg(long)]
    pub trace: bool,
    /// Write the unmasking schedule to this file.
    #[arg(long)]
    pub dump_schedule: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Run config written by `train`.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub scav_checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `sample`.
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub beams: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generated embedding set (with `--reference`).
    #[arg(long, requires = "reference", conflicts_with_all = ["run", "data", "samples"])]
    pub generated: Option<PathBuf>,
    #[arg(long, requires = "generated")]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub kernel: Option<usize>,
    /// Directory written by `train` (dataset mode).
    #[arg(long, requires_all = ["data", "samples"])]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to stdout. Returns the process exit code.
pub fn run_from<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(args: &ConfigArgs) -> CliResult<ExperimentConfig> {
    ExperimentConfig::load_or_default(args.config.as_deref())?
        .with_seed(args.seed)
        .resolve()
}

fn print_config(cfg: &ExperimentConfig) {
    println!("# seed = {}", cfg.seed);
    println!("# resolved config");
    for line in cfg.to_toml().lines() {
        println!("#   {line}");
    }
}

fn split_of<'a>(
    data: &'a codegram_core::synth::Dataset,
    name: &str,
) -> CliResult<(&'a [codegram_core::synth::SynthExample], usize)> {
    let first = match name {
        "train" => 0,
        "valid" => data.train.len(),
        "test" => data.train.len() + data.valid.len(),
        _ => return Err(CliError::Validation(format!("unknown split `{name}`"))),
    };
    Ok((data.split(name).expect("known split"), first))
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { cfg, out, count } => {
            let mut c = resolve(&cfg)?;
            if let Some(n) = count {
                c.data.count = n;
                c = c.resolve()?;
            }
            print_config(&c);
            generate(&c)?.save(&out)?;
            println!("examples={}", c.data.count);
            Ok(())
        }
        Command::Train { cfg, data, out } => {
            let c = resolve(&cfg)?;
            print_config(&c);
            let ds = load_dataset(&c, &data)?;
            let (model, records) = train_model(&c, &ds)?;
            let (scav, scav_losses) = train_scav(&c, &ds)?;
            let acc = masked_accuracy(&c, &model, &ds.valid)?;
            Run { cfg: c, model, scav }.save(&out, &records, &scav_losses)?;
            println!("l_mask_tail={:.12e}", l_mask_tail(&records));
            println!("valid_masked_accuracy={acc:.12e}");
            Ok(())
        }
        Command::Sample(a) => cmd_sample(a),
        Command::Select(a) => cmd_select(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Pipeline { cfg, out } => {
            let c = resolve(&cfg)?;
            print_config(&c);
            let result = pipeline(&c, out.as_deref())?;
            print!("{}", result.text);
            Ok(())
        }
    }
}

fn cmd_sample(a: SampleArgs) -> CliResult<()> {
    let run = Run::load(&a.run)?;
    let mut cfg = run.cfg.clone();
    let s = &mut cfg.sampler;
    if let Some(v) = a.steps {
        s.n_steps = v;
    }
    if let Some(v) = a.gamma {
        s.gamma = v;
    }
    if let Some(v) = a.delta {
        s.delta = v;
    }
    if let Some(v) = a.temp {
        s.temperature = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    s.two_pass |= a.two_pass;
    if let Some(b) = a.beams {
        cfg.eval.beams = b;
    }
    cfg.sampler.validate()?;
    if cfg.eval.beams < 1 {
        return Err(CliError::Validation("beams must be >= 1".into()));
    }
    print_config(&cfg);
    let ds = load_dataset(&cfg, &a.data)?;
    let (examples, first) = split_of(&ds, &a.split)?;
    let examples = limit(examples, a.limit.unwrap_or(0));
    if let Some(path) = &a.dump_schedule {
        let total = cfg.task.len * cfg.task.levels;
        fs::write(path, build_sample_schedule(total, cfg.sampler.n_steps)?.to_csv())?;
    }
    let samples = sample_split(&run.model, examples, first, &cfg.sampler, cfg.eval.beams)?;
    write_samples(&a.out, first, &samples, a.trace)?;
    let exact = examples.iter().zip(&samples).filter(|(e, b)| b[0].0 == e.clean).count();
    println!("examples={}", examples.len());
    println!("beams={}", cfg.eval.beams);
    println!("exact_match_beam0={:.12e}", exact as f64 / examples.len().max(1) as f64);
    Ok(())
}

fn cmd_select(a: SelectArgs) -> CliResult<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    print_config(&cfg);
    let scav = codegram_core::Scav::load(cfg.scav, &a.scav_checkpoint)?;
    let ds = load_dataset(&cfg, &a.data)?;
    let (examples, first) = split_of(&ds, &a.split)?;
    let examples = limit(examples, a.limit.unwrap_or(0));
    let beams: Vec<Vec<Codegram>> = (0..examples.len())
        .map(|i| load_beams(&a.samples, first + i, a.beams, cfg.model.hidden))
        .collect::<CliResult<_>>()?;
    let sel = select_split(&scav, &generator(&cfg)?, examples, &beams)?;
    let csv = selection_csv(first, &sel);
    fs::write(a.samples.join(SELECTION_CSV), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Novelty kernel that fits a sequence of `n` frames.
fn fit_kernel(kernel: usize, n: usize) -> usize {
    kernel.min(n - n % 2).max(2)
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let mut report = MetricReport::default();
    if let (Some(g), Some(r)) = (&a.generated, &a.reference) {
        let kernel = a.kernel.unwrap_or(codegram_core::metrics::DEFAULT_NOVELTY_KERNEL);
        println!("# seed = none");
        println!("# kernel = {kernel}");
        let (g, r) = (load_embeddings(g)?, load_embeddings(r)?);
        report.push("fd", frechet_distance_sets(&g, &r)?);
        let k = fit_kernel(kernel, g.len().min(r.len()));
        report.push("ns", novelty_score(&g.vectors, &r.vectors, k)?);
    } else if let (Some(run), Some(data), Some(samples)) = (&a.run, &a.data, &a.samples) {
        let mut cfg = ExperimentConfig::load(&run.join(RUN_CONFIG))?;
        if let Some(k) = a.kernel {
            cfg.eval.novelty_kernel = k;
        }
        print_config(&cfg);
        let ds = load_dataset(&cfg, data)?;
        let (examples, first) = split_of(&ds, &a.split)?;
        let examples = limit(examples, a.limit.unwrap_or(0));
        let chosen = chosen_outputs(samples, first, examples.len(), cfg.model.hidden)?;
        let model = load_model(&cfg, &run.join(MODEL_CKPT))?;
        report.push("masked_accuracy", masked_accuracy(&cfg, &model, examples)?);
        output_metrics(&cfg, &generator(&cfg)?, examples, &chosen, &mut report)?;
    } else {
        return Err(CliError::Validation(
            "eval needs --generated/--reference or --run/--data/--samples".into(),
        ));
    }
    print!("{}", render_report(&report));
    Ok(())
}

/// Selected beams when `selection.csv` exists, beam 0 otherwise.
fn chosen_outputs(samples: &Path, first: usize, n: usize, embed_dim: usize) -> CliResult<Vec<Codegram>> {
    let sel_path = samples.join(SELECTION_CSV);
    let picks: Vec<usize> = if sel_path.exists() {
        let rows = parse_selection(&fs::read_to_string(&sel_path)?)?;
        (0..n)
            .map(|i| {
                rows.iter()
                    .find(|(e, _)| *e == first + i)
                    .map(|r| r.1)
                    .ok_or_else(|| CliError::Validation(format!("no selection for example {}", first + i)))
            })
            .collect::<CliResult<_>>()?
    } else {
        vec![0; n]
    };
    picks
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            Ok(codegram_core::codegram::load_codegram(
                &beam_path(samples, first + i, b),
                embed_dim,
            )?)
        })
        .collect()
}
