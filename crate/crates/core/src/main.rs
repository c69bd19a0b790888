use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slm_tta::corrupt::{corrupt, write_wav};
use slm_tta::harness::{
    obtain_model, read_results_csv, run_grid, summarize, utterance_seed, write_outputs,
    ExperimentConfig,
};
use slm_tta::slm::Model;
use slm_tta::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "slm-tta",
    version,
    about = "Episodic test-time adaptation experiments"
)]
struct Cli {
    /// Experiment TOML file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the data, model and pretraining seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset (and its corrupted test sets) to WAV files.
    Synth,
    /// Pretrain the source model and write its checkpoint.
    Pretrain,
    /// Evaluate a pretrained checkpoint with and without adaptation.
    AdaptEval {
        /// Checkpoint to evaluate (default: the config's checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretrain if needed, then sweep the full adaptation grid.
    Grid,
    /// Rebuild `summary.md` from an existing `results.csv`.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model_seed = seed;
        cfg.data.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("model.slmt"))
}

fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let dir = cfg.output_dir.join("data");
    create_dir(&dir.join("clean"))?;
    let mut manifest = Vec::new();
    for u in data.train.iter().chain(&data.test) {
        let path = dir.join("clean").join(format!("{:05}.wav", u.id));
        write_wav(&path, &u.waveform, cfg.task.fs)?;
        manifest.push(serde_json::json!({
            "utterance": u,
            "wav": path,
        }));
    }
    let seed = cfg.eval_seeds[0];
    for (i, spec) in cfg.corruptions.iter().enumerate() {
        let sub = dir.join(format!("test_{i}_{}", spec.kind).to_lowercase());
        create_dir(&sub)?;
        for u in &data.test {
            let y = corrupt(&u.waveform, spec, utterance_seed(seed, u.id))?;
            write_wav(&sub.join(format!("{:05}.wav", u.id)), &y, cfg.task.fs)?;
        }
    }
    slm_tta::harness::write_jsonl(&dir.join("manifest.jsonl"), &manifest)?;
    println!("wrote {} utterances to {}", manifest.len(), dir.display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let ckpt = checkpoint_path(&cfg);
    create_dir(&cfg.output_dir)?;
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
    }
    cfg.checkpoint = Some(ckpt.clone());
    let data = cfg.dataset()?;
    let (_, report) = obtain_model(&cfg, &data)?;
    if let Some(report) = report {
        write_json(&cfg.output_dir.join("pretrain_report.json"), &report)?;
        println!(
            "held-out token accuracy {:.2}% after {} epochs; checkpoint {}",
            100.0 * report.final_accuracy(),
            report.epoch_losses.len(),
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_adapt_eval(cfg: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| checkpoint_path(cfg));
    let model = Model::load(&ckpt, &cfg.model)?;
    let data = cfg.dataset()?;
    let result = run_grid(cfg, &model, &data)?;
    write_outputs(&cfg.output_dir, &result)?;
    print!("{}", summarize(&result.rows));
    Ok(())
}

fn cmd_grid(cfg: &ExperimentConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    if cfg.checkpoint.is_none() {
        cfg.checkpoint = Some(checkpoint_path(&cfg));
    }
    create_dir(&cfg.output_dir)?;
    let data = cfg.dataset()?;
    let (model, report) = obtain_model(&cfg, &data)?;
    if let Some(report) = report {
        write_json(&cfg.output_dir.join("pretrain_report.json"), &report)?;
    }
    let result = run_grid(&cfg, &model, &data)?;
    write_outputs(&cfg.output_dir, &result)?;
    let resolved = cfg.output_dir.join("config.resolved.toml");
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;
    print!("{}", summarize(&result.rows));
    Ok(())
}

fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let rows = read_results_csv(&cfg.output_dir.join("results.csv"))?;
    let summary = summarize(&rows);
    let path = cfg.output_dir.join("summary.md");
    fs::write(&path, &summary).map_err(|e| Error::io(&path, e))?;
    print!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::AdaptEval { checkpoint } => cmd_adapt_eval(&cfg, checkpoint),
        Command::Grid => cmd_grid(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
