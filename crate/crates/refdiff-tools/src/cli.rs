//! Command-line surface. One config document drives all stages; dotted
//! `--set` overrides make ablation sweeps one-line affairs. Exit codes:
//! 0 ok, 2 config error, 3 data error, 4 numeric failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refdiff_core::render::to_train_sample;
use refdiff_core::rng::child_seed;
use refdiff_core::trainer::TrainSample;

use crate::bench::{prompt_records, run_benchmark, BenchOptions};
use crate::checkpoint::{load_model, save_model};
use crate::config::{load_config, parse_config, RunConfig};
use crate::dataset::{build_dataset, load_dataset, save_rgb, LoadedSample};
use crate::error::{Result, ToolError};
use crate::ocr::{frozen_backend_from, RecognizerSample};
use crate::plot::plot_schedule;
use crate::stack::ModelStack;

const SEED_TRAIN: u64 = 10;
const SEED_SAMPLE: u64 = 11;
const SEED_RECOGNIZER: u64 = 12;

#[derive(Parser, Debug)]
#[command(name = "refdiff", version, about = "Reference-conditioned latent diffusion tooling")]
pub struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; every stage derives child seeds from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Dotted config override, e.g. --set sampler.rho_speed=1.0 (repeatable).
    #[arg(long = "set", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset; writes a checkpoint and streams step metrics
    /// as JSON lines on stdout.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one image per prompt into a directory, with a per-step
    /// guidance trace.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt set: a dataset directory (captions + references).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Generate only the first N prompts.
        #[arg(long)]
        count: Option<usize>,
        /// Guidance mode: none | standard | augmented | augmented_scheduled.
        #[arg(long)]
        guidance: Option<String>,
        /// Scale for standard guidance.
        #[arg(long)]
        omega: Option<f64>,
        /// Drop the reference channels (ablation baseline).
        #[arg(long)]
        no_reference: bool,
    },
    /// Generate, recognize, and score; writes report.json and an image grid.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation prompt set (dataset directory).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for report.json, grid.png, prompts.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth dataset for training the frozen recognizer;
        /// defaults to the evaluation set.
        #[arg(long)]
        recognizer_data: Option<PathBuf>,
        #[arg(long)]
        no_reference: bool,
    },
    /// Emit the guidance scale curves for (gamma, rho_speed, T).
    PlotSchedule {
        #[arg(long, default_value_t = 3.5)]
        gamma: f64,
        #[arg(long, default_value_t = 0.2)]
        rho: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        out_png: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { ref out } => {
            let config = base_config(&cli)?;
            let manifest = build_dataset(out, &config, cli.seed)?;
            println!(
                "wrote {} samples to {} (seed {})",
                manifest.counts.samples,
                out.display(),
                cli.seed
            );
            Ok(())
        }
        Command::Train { ref data, ref out } => {
            let config = base_config(&cli)?;
            train(&config, data, out, cli.seed)
        }
        Command::Sample {
            ref ckpt,
            ref data,
            ref out,
            count,
            ref guidance,
            omega,
            no_reference,
        } => {
            let mut stack = load_model(ckpt)?;
            let mut sets = cli.set.clone();
            if let Some(mode) = guidance {
                sets.push(format!("sampler.mode=\"{mode}\""));
            }
            if let Some(w) = omega {
                sets.push(format!("sampler.omega={w}"));
            }
            apply_runtime_overrides(&mut stack, &sets)?;
            sample(&stack, data, out, count, no_reference, cli.seed)
        }
        Command::Eval {
            ref ckpt,
            ref data,
            ref out,
            ref recognizer_data,
            no_reference,
        } => {
            let mut stack = load_model(ckpt)?;
            apply_runtime_overrides(&mut stack, &cli.set)?;
            eval(
                &stack,
                data,
                recognizer_data.as_deref().unwrap_or(data),
                out,
                no_reference,
                cli.seed,
            )
        }
        Command::PlotSchedule {
            gamma,
            rho,
            steps,
            ref out_csv,
            ref out_png,
        } => {
            plot_schedule(out_csv, out_png, gamma, rho, steps)?;
            println!("wrote {} and {}", out_csv.display(), out_png.display());
            Ok(())
        }
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(path) => load_config(path, &cli.set),
        None => parse_config("", &cli.set),
    }
}

/// Re-apply overrides on top of a checkpoint's embedded config. Keys that
/// would change the trained architecture are rejected; sampling and eval
/// knobs are fair game.
pub fn apply_runtime_overrides(stack: &mut ModelStack, sets: &[String]) -> Result<()> {
    if sets.is_empty() {
        return Ok(());
    }
    let echoed = stack.config.echo_toml()?;
    let mut table = toml::Table::from_str(&echoed)?;
    for entry in sets {
        crate::config::apply_override(&mut table, entry)?;
    }
    let next: RunConfig = table.try_into().map_err(ToolError::from)?;
    next.validate()?;
    let frozen = |c: &RunConfig| {
        (
            c.latent_spec(),
            c.schedule_config(),
            c.network_config(),
            c.aux_config(),
            c.text_config(),
            c.lora_config(),
            c.data.scripts.clone(),
            c.data.n_logos,
            c.data.max_word_len,
        )
    };
    if frozen(&next) != frozen(&stack.config) {
        return Err(ToolError::Config(
            "override would change the checkpoint's model geometry; retrain instead".into(),
        ));
    }
    stack.config = next;
    Ok(())
}

pub fn to_train_samples(
    stack: &ModelStack,
    samples: &[LoadedSample],
) -> Result<Vec<TrainSample<f32>>> {
    samples
        .iter()
        .map(|s| Ok(to_train_sample(&s.sample, &stack.codec)?))
        .collect()
}

fn train(config: &RunConfig, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let loaded = load_dataset(data)?;
    if loaded.is_empty() {
        return Err(ToolError::Data(format!(
            "dataset {} has no samples to train on",
            data.display()
        )));
    }
    let mut stack = ModelStack::init(config.clone(), seed)?;
    let train_set = to_train_samples(&stack, &loaded)?;
    let mut trainer = stack.trainer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, SEED_TRAIN));
    let batch_size = config.losses.batch.max(1);
    let stdout = std::io::stdout();
    let mut metrics_out = stdout.lock();
    for step in 0..config.losses.steps {
        let batch: Vec<TrainSample<f32>> = (0..batch_size)
            .map(|_| train_set[rng.gen_range(0..train_set.len())].clone())
            .collect();
        let metrics = trainer.train_step(&batch, &mut rng)?;
        serde_json::to_writer(&mut metrics_out, &metrics)?;
        metrics_out.write_all(b"\n")?;
        if step % 100 == 0 {
            eprintln!(
                "step {step}: total {:.4} diff {:.4}",
                metrics.loss_total, metrics.loss_diff_scaled
            );
        }
    }
    stack.adopt(&trainer);
    save_model(out, &stack)?;
    eprintln!("wrote checkpoint {}", out.display());
    Ok(())
}

fn sample(
    stack: &ModelStack,
    data: &Path,
    out: &Path,
    count: Option<usize>,
    no_reference: bool,
    seed: u64,
) -> Result<()> {
    let mut prompts = load_dataset(data)?;
    if let Some(n) = count {
        prompts.truncate(n);
    }
    fs::create_dir_all(out.join("images"))?;
    fs::write(out.join("config.toml"), stack.config.echo_toml()?)?;
    let sampler = stack.sampler()?;
    let guidance = stack.config.guidance_config();
    let mut trace_file = fs::File::create(out.join("trace.jsonl"))?;
    for (i, p) in prompts.iter().enumerate() {
        let reference = if no_reference {
            None
        } else {
            Some(to_train_sample(&p.sample, &stack.codec)?.reference)
        };
        let (image, result) = sampler.sample_indexed(
            &p.annotation.caption,
            reference.as_ref(),
            &guidance,
            child_seed(seed, SEED_SAMPLE),
            i as u64,
        )?;
        save_rgb(
            &out.join("images").join(format!("{}.png", p.annotation.id)),
            &image,
        )?;
        let record = serde_json::json!({
            "id": p.annotation.id,
            "caption": p.annotation.caption,
            "steps": result.trace,
        });
        serde_json::to_writer(&mut trace_file, &record)?;
        trace_file.write_all(b"\n")?;
    }
    println!("wrote {} images to {}", prompts.len(), out.display());
    Ok(())
}

fn eval(
    stack: &ModelStack,
    data: &Path,
    recognizer_data: &Path,
    out: &Path,
    no_reference: bool,
    seed: u64,
) -> Result<()> {
    let prompts = load_dataset(data)?;
    let recog_set = load_dataset(recognizer_data)?;
    if recog_set.is_empty() {
        return Err(ToolError::Data(format!(
            "recognizer dataset {} is empty",
            recognizer_data.display()
        )));
    }
    let recog_samples: Vec<RecognizerSample> = recog_set
        .iter()
        .map(|s| {
            let ts = to_train_sample(&s.sample, &stack.codec)?;
            Ok(RecognizerSample {
                z0: ts.z0,
                regions: ts.reference.regions,
            })
        })
        .collect::<Result<_>>()?;
    let backend = frozen_backend_from(stack, &recog_samples, child_seed(seed, SEED_RECOGNIZER))?;
    let mut options = BenchOptions::from_config(&stack.config);
    options.use_reference = !no_reference;
    let outcome = run_benchmark(
        stack,
        &prompts,
        &backend,
        &options,
        child_seed(seed, SEED_SAMPLE),
    )?;
    fs::create_dir_all(out)?;
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&outcome.report)?,
    )?;
    let mut prompt_file = fs::File::create(out.join("prompts.jsonl"))?;
    for record in prompt_records(&prompts) {
        serde_json::to_writer(&mut prompt_file, &record)?;
        prompt_file.write_all(b"\n")?;
    }
    if !outcome.generated.is_empty() {
        crate::bench::save_grid(&out.join("grid.png"), &outcome.generated)?;
    }
    println!(
        "accuracy {:.4} f1 {:.4} over {} prompts -> {}",
        outcome.report.accuracy,
        outcome.report.f1,
        outcome.report.sample_count,
        out.join("report.json").display()
    );
    Ok(())
}
