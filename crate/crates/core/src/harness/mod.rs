//! Experiment harness: synthetic audio task, features, pretraining, token
//! error rate, evaluation and grid sweeps.

mod eval;
mod grid;
mod metrics;
mod synth;
mod train;

pub use eval::{
    corrupted_inputs, evaluate, evaluate_inputs, score, utterance_seed, EvalOutcome, BASELINE_BATCH,
};
pub use grid::{
    obtain_model, read_results_csv, relative_improvement, run_grid, summarize, write_jsonl,
    write_outputs, write_results_csv, DataSettings, ExperimentConfig, GridResult, GridSettings,
    SCHEMA_VERSION,
};
pub use metrics::{edit_distance, token_error_rate, wer, ErrorCounter, MetricsRow};
pub use synth::{
    extract_features, front_end, render_tokens, synth_dataset, Background, Dataset, FrameSpec,
    Split, SynthTask, Tone, Utterance, LOG_FLOOR,
};
pub use train::{pretrain, PretrainSettings, TrainingReport};
