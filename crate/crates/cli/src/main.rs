use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use urmf_core::data::{generate_synthetic, read_embeddings, write_embeddings};
use urmf_core::harness::output::{
    save_ablation, save_loss_curve, save_metrics, save_robustness, write_robustness_summary,
};
use urmf_core::harness::{
    evaluate, load_checkpoint, run_ablations, run_gradcheck, run_robustness, save_checkpoint,
    summarize_robustness, train, CheckedTerm, GradCheckSetup, MetricsReport,
};
use urmf_core::{Dataset, InputModality, SynthSpec, TrainConfig};

#[derive(Parser)]
#[command(
    name = "urmf",
    version,
    about = "Uncertainty-aware robust multimodal fusion at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic incongruity dataset.
    Synth {
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// key=value synthetic spec; flags override its values.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory with its loss curve.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare tape gradients with finite differences on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Train every ablation variant for each seed.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate dynamic and equal-weight fusion under test-time corruption.
    Robustness {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "image")]
        modality: InputModality,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,0.5")]
        levels: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = read_embeddings(path).with_context(|| format!("reading {}", path.display()))?;
    log::info!("loaded {} samples from {}", ds.len(), path.display());
    Ok(ds)
}

fn print_metrics(m: &MetricsReport) {
    println!("samples    {}", m.samples);
    println!("accuracy   {:.4}", m.accuracy);
    println!("precision  {:.4}", m.precision);
    println!("recall     {:.4}", m.recall);
    println!("f1         {:.4}", m.f1);
    println!("alpha_f    {:.4}", m.alpha.alpha_f);
    println!("alpha_i    {:.4}", m.alpha.alpha_i);
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            n_samples,
            seed,
            spec,
            out,
        } => {
            let mut s = match spec {
                Some(p) => {
                    SynthSpec::load(&p).with_context(|| format!("loading spec {}", p.display()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(n) = n_samples {
                s.samples = n;
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let ds = generate_synthetic(&s)?;
            write_embeddings(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let outcome = train(&cfg, &ds)?;
            save_checkpoint(&out, &cfg, &outcome.model)?;
            save_loss_curve(&out.join("loss.csv"), &outcome.curve)?;
            if let Some(last) = outcome.curve.last() {
                println!("final epoch total loss {:.6}", last.total);
            }
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { model, data, csv } => {
            let (_, m) = load_checkpoint(&model)
                .with_context(|| format!("loading checkpoint {}", model.display()))?;
            let ds = load_data(&data)?;
            let report = evaluate(&m, &ds)?;
            print_metrics(&report);
            if let Some(p) = csv {
                save_metrics(&p, &report)?;
            }
        }
        Command::Gradcheck { tol } => {
            if tol.is_nan() || tol <= 0.0 {
                bail!("--tol must be positive");
            }
            let mut setup = GradCheckSetup::default();
            setup.options.tol = tol;
            let summary = run_gradcheck(&setup, &CheckedTerm::ALL)?;
            for c in &summary.checks {
                println!(
                    "{:<6} max rel err {:.3e}  worst {:<24} {}",
                    c.term.name(),
                    c.report.max_rel_err(),
                    c.worst_param,
                    if c.passed() { "ok" } else { "FAIL" }
                );
            }
            if !summary.passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let rows = run_ablations(&cfg, &ds, &seeds)?;
            for r in &rows {
                println!(
                    "{:<22} acc {:.4} ± {:.4}  f1 {:.4} ± {:.4}",
                    r.variant.label(),
                    r.acc_mean,
                    r.acc_std,
                    r.f1_mean,
                    r.f1_std
                );
            }
            save_ablation(&out, &rows)?;
        }
        Command::Robustness {
            config,
            data,
            modality,
            levels,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let rows = run_robustness(&cfg, &ds, modality, &levels, &seeds)?;
            save_robustness(&out, &rows)?;
            write_robustness_summary(std::io::stdout().lock(), &summarize_robustness(&rows))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
