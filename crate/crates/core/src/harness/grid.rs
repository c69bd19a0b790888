//! Experiment configuration, grid sweeps and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corrupt::{CorruptionSpec, NoiseKind};
use crate::error::{Error, Result};
use crate::slm::{AdaptableSet, Model, ModelConfig};
use crate::tta::{AdaptationConfig, EpisodeReport, Objective};

use super::eval::{corrupted_inputs, score};
use super::metrics::MetricsRow;
use super::synth::{synth_dataset, Dataset, SynthTask};
use super::train::{pretrain, PretrainSettings, TrainingReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub objectives: Vec<Objective>,
    pub taus: Vec<f64>,
    pub steps: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub selection: AdaptableSet,
    pub redecode_each_step: bool,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            objectives: vec![Objective::Entropy, Objective::PseudoLabel],
            taus: vec![0.9, 0.8, 0.5, 0.0],
            steps: vec![1, 3, 5],
            lr: 1e-2,
            batch_size: 5,
            selection: AdaptableSet::NormPlusConv,
            redecode_each_step: true,
        }
    }
}

impl GridSettings {
    /// Every adaptation configuration of the sweep, in a fixed order.
    pub fn configs(&self) -> Vec<AdaptationConfig> {
        let mut out = Vec::new();
        for &objective in &self.objectives {
            for &tau in &self.taus {
                for &steps in &self.steps {
                    out.push(AdaptationConfig {
                        objective,
                        tau,
                        steps,
                        lr: self.lr,
                        batch_size: self.batch_size,
                        redecode_each_step: self.redecode_each_step,
                    });
                }
            }
        }
        out
    }
}

/// Top-level TOML experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Model checkpoint; loaded when it exists, otherwise written after pretraining.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default = "default_eval_seeds")]
    pub eval_seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub task: SynthTask,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default = "default_corruptions")]
    pub corruptions: Vec<CorruptionSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_eval_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_corruptions() -> Vec<CorruptionSpec> {
    vec![
        CorruptionSpec::anechoic(NoiseKind::Pink),
        CorruptionSpec::reverberant(NoiseKind::Pink),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            output_dir: default_output_dir(),
            checkpoint: None,
            model_seed: 0,
            eval_seeds: default_eval_seeds(),
            model: ModelConfig::default(),
            task: SynthTask::default(),
            data: DataSettings::default(),
            pretrain: PretrainSettings::default(),
            grid: GridSettings::default(),
            corruptions: default_corruptions(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.task.validate()?;
        if self.task.frame.n_bands != self.model.audio_dim {
            return Err(Error::Config(format!(
                "task has {} bands but the model expects audio_dim {}",
                self.task.frame.n_bands, self.model.audio_dim
            )));
        }
        if self.task.vocab != self.model.vocab {
            return Err(Error::Config("task and model vocabularies differ".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("data splits must be non-empty".into()));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::Config("eval_seeds must be non-empty".into()));
        }
        let mut seeds = self.eval_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.eval_seeds.len() {
            return Err(Error::Config("eval_seeds must be distinct".into()));
        }
        if self.grid.configs().is_empty() {
            return Err(Error::Config(
                "adaptation grid needs at least one objective, tau and step count".into(),
            ));
        }
        if self.corruptions.is_empty() {
            return Err(Error::Config("at least one corruption is required".into()));
        }
        self.pretrain.validate()?;
        for c in self.grid.configs() {
            c.validate()?;
        }
        for c in &self.corruptions {
            c.validate()?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        synth_dataset(
            &self.task,
            self.data.n_train,
            self.data.n_test,
            self.data.seed,
        )
    }
}

/// Builds and pretrains a model, or loads the configured checkpoint when present.
pub fn obtain_model(
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<(Model, Option<TrainingReport>)> {
    if let Some(path) = &cfg.checkpoint {
        if path.exists() {
            return Ok((Model::load(path, &cfg.model)?, None));
        }
    }
    let mut model = Model::build(cfg.model.clone(), cfg.model_seed)?;
    let report = pretrain(&mut model, &cfg.task, &data.train, &cfg.pretrain)?;
    if let Some(path) = &cfg.checkpoint {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(path)?;
    }
    Ok((model, Some(report)))
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<MetricsRow>,
    pub episodes: Vec<EpisodeReport>,
}

/// Runs the baseline and every adaptation configuration for each corruption
/// and evaluation seed. A failing cell is recorded in its row and the sweep
/// continues.
pub fn run_grid(cfg: &ExperimentConfig, model: &Model, data: &Dataset) -> Result<GridResult> {
    let configs = cfg.grid.configs();
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for corruption in &cfg.corruptions {
        for &seed in &cfg.eval_seeds {
            let inputs = corrupted_inputs(&cfg.task, &data.test, corruption, seed)?;
            let mut cells: Vec<Option<&AdaptationConfig>> = vec![None];
            cells.extend(configs.iter().map(Some));
            for cell in cells {
                let adaptation = cell.map(|c| (c, cfg.grid.selection));
                match score(
                    model, &cfg.task, &data.test, &inputs, corruption, adaptation, seed,
                ) {
                    Ok(out) => {
                        log::info!(
                            "{} seed {} {}: {:.2}%",
                            out.row.corruption,
                            seed,
                            out.row.condition(),
                            out.row.token_error_rate
                        );
                        rows.push(out.row);
                        episodes.extend(out.episodes);
                    }
                    Err(e) => {
                        log::warn!("cell failed: {e}");
                        rows.push(failed_row(corruption, seed, cell, cfg, data.test.len(), &e));
                    }
                }
            }
        }
    }
    Ok(GridResult { rows, episodes })
}

fn failed_row(
    corruption: &CorruptionSpec,
    seed: u64,
    cell: Option<&AdaptationConfig>,
    cfg: &ExperimentConfig,
    n: usize,
    e: &Error,
) -> MetricsRow {
    MetricsRow {
        corruption: corruption.label(),
        seed,
        objective: cell.map_or("NONE".to_string(), |c| c.objective.to_string()),
        selection: cell
            .map_or(AdaptableSet::None, |_| cfg.grid.selection)
            .to_string(),
        tau: cell.map(|c| c.tau),
        steps: cell.map(|c| c.steps),
        lr: cell.map(|c| c.lr),
        batch_size: cell.map_or(super::eval::BASELINE_BATCH, |c| c.batch_size),
        n_utterances: n,
        token_error_rate: f64::NAN,
        sequence_accuracy: f64::NAN,
        mean_entropy: f64::NAN,
        skipped_steps: 0,
        numeric_failures: 0,
        error: Some(e.to_string()),
    }
}

pub fn write_results_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for item in items {
        let line = serde_json::to_string(item).map_err(Error::from)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Relative improvement in percent of `adapted` over `baseline` (lower is better).
pub fn relative_improvement(baseline: f64, adapted: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (baseline - adapted) / baseline
    }
}

/// Markdown summary: per corruption, every condition's mean token error rate
/// over seeds with absolute and relative change against the baseline.
pub fn summarize(rows: &[MetricsRow]) -> String {
    let mut by_corruption: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_corruption.entry(&r.corruption).or_default().push(r);
    }
    let mut out = String::from("# Test-time adaptation results\n");
    for (corruption, rs) in by_corruption {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&MetricsRow>> = BTreeMap::new();
        for r in rs {
            let key = r.condition();
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let mean = |v: &[&MetricsRow]| -> Option<f64> {
            let ok: Vec<f64> = v
                .iter()
                .filter(|r| r.error.is_none())
                .map(|r| r.token_error_rate)
                .collect();
            (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
        };
        let base = groups.get("NONE").and_then(|v| mean(v));
        let _ = writeln!(out, "\n## {corruption}\n");
        let _ = writeln!(
            out,
            "| condition | seeds | WER (%) | abs. reduction | rel. reduction (%) | failed cells |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for key in &order {
            let v = &groups[key];
            let failed = v.iter().filter(|r| r.error.is_some()).count();
            let (wer, abs, rel) = match (mean(v), base) {
                (Some(m), Some(b)) => (
                    format!("{m:.2}"),
                    format!("{:.2}", b - m),
                    format!("{:.2}", relative_improvement(b, m)),
                ),
                (Some(m), None) => (format!("{m:.2}"), "-".into(), "-".into()),
                _ => ("-".into(), "-".into(), "-".into()),
            };
            let _ = writeln!(
                out,
                "| {key} | {} | {wer} | {abs} | {rel} | {failed} |",
                v.len()
            );
        }
        if let Some(b) = base {
            if let Some((key, m)) = order
                .iter()
                .filter(|k| k.as_str() != "NONE")
                .filter_map(|k| mean(&groups[k]).map(|m| (k, m)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
            {
                let _ = writeln!(
                    out,
                    "\nBest: {key} reaches {m:.2}% WER, {:.2} points below the baseline \
                     ({:.2}% relative).",
                    b - m,
                    relative_improvement(b, m)
                );
            }
        }
    }
    out
}

/// Writes `results.csv`, `results.jsonl`, `episodes.jsonl` and `summary.md` into `dir`.
pub fn write_outputs(dir: &Path, result: &GridResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results_csv(&dir.join("results.csv"), &result.rows)?;
    write_jsonl(&dir.join("results.jsonl"), &result.rows)?;
    write_jsonl(&dir.join("episodes.jsonl"), &result.episodes)?;
    let summary = dir.join("summary.md");
    fs::write(&summary, summarize(&result.rows)).map_err(|e| Error::io(&summary, e))?;
    Ok(())
}
