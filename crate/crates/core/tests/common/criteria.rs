//! Acceptance checks shared by the integration tests and the `acceptance`
//! runner. Each returns a one-line detail on success or the reason for failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::f64::consts::{LN_2, PI};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slm_tta::autodiff::{cross_entropy, entropy, Tape};
use slm_tta::corrupt::{
    apply_reverb, apply_reverb_fft, mean_square, mix_at_snr, simulate_rir, synth_noise,
    CorruptionSpec, NoiseKind, RoomSpec, SourceKind, SAMPLE_RATE, SPEED_OF_SOUND,
};
use slm_tta::harness::{evaluate, obtain_model, run_grid, wer, ExperimentConfig};
use slm_tta::slm::{AdaptableSet, Model, StepDistribution, TrackedSequence};
use slm_tta::tta::{
    adapt_episode, adapt_episode_observed, confidence_mask, predict_batch, pseudo_label_objective,
    run_stream, AdaptationConfig, Objective, TestInput,
};

use super::*;

pub type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: slm_tta::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let cases = op_cases();
    for case in &cases {
        let e = ok(check_op(case, 20, 11))?;
        ensure!(e < FD_TOL, "{}: relative error {e:e}", case.name);
        worst = worst.max(e);
    }
    let small = {
        let mut m = ok(Model::build(small_config(), 3))?;
        m.select_adaptable(AdaptableSet::All);
        m
    };
    let mut full = ok(Model::build(slm_tta::slm::ModelConfig::default(), 4))?;
    full.select_adaptable(AdaptableSet::NormPlusConv);
    for objective in [Objective::Entropy, Objective::PseudoLabel] {
        let batch = random_inputs(small.config(), 2, 12, 5);
        let e = ok(check_model_objective(&small, &batch, objective, None, 0))?;
        ensure!(e < FD_TOL, "small model {objective}: relative error {e:e}");
        worst = worst.max(e);
        let batch = synthetic_inputs(2, &CorruptionSpec::anechoic(NoiseKind::Pink), 7);
        let e = ok(check_model_objective(&full, &batch, objective, Some(4), 9))?;
        ensure!(
            e < FD_TOL,
            "default model {objective}: relative error {e:e}"
        );
        worst = worst.max(e);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!(
        "{} ops x 20 trials and both objectives, worst relative error {worst:.2e}, {secs:.1}s",
        cases.len()
    ))
}

fn dist(probs: &[f64]) -> StepDistribution {
    StepDistribution {
        probs: probs.to_vec(),
        step: 0,
        sample: 0,
    }
}

/// Teacher-forced sequences for `batch` under the model's own greedy hypotheses.
fn tracked(
    model: &Model,
    tape: &mut Tape,
    batch: &[TestInput],
) -> std::result::Result<Vec<TrackedSequence>, String> {
    let hyps = ok(predict_batch(model, batch))?;
    let b = model.bind(tape);
    batch
        .iter()
        .zip(&hyps)
        .map(|(x, g)| {
            ok(model.teacher_forced_distributions(tape, &b, &x.features, &x.prompt, &g.tokens))
        })
        .collect()
}

pub fn objective_values() -> Outcome {
    let h = ok(entropy(&[0.25; 4]))?;
    ensure!((h - 4f64.ln()).abs() <= 1e-12, "uniform entropy {h}");
    let h = ok(entropy(&[0.0, 1.0, 0.0, 0.0]))?;
    ensure!(h == 0.0, "one-hot entropy {h}");
    let ce = ok(cross_entropy(1, &[0.5, 0.25, 0.25]))?;
    ensure!((ce - LN_2).abs() > 0.5, "target index ignored");
    let ce = ok(cross_entropy(0, &[0.5, 0.25, 0.25]))?;
    ensure!((ce - LN_2).abs() <= 1e-12, "CE at p=0.5 is {ce}");

    // same values through the tape
    let mut tape = Tape::new();
    let z = ok(tape.constant(vec![0.0; 4], vec![1, 4]))?;
    let h = ok(tape.softmax_entropy(z))?;
    ensure!(
        (tape.value(h)[0] - 4f64.ln()).abs() <= 1e-12,
        "tape uniform entropy"
    );
    let z = ok(tape.constant(vec![0.0, 0.0], vec![1, 2]))?;
    let ce = ok(tape.softmax_nll(z, &[1]))?;
    ensure!(
        (tape.value(ce)[0] - LN_2).abs() <= 1e-12,
        "tape CE at p=0.5"
    );

    // pseudo-label loss against an independent mean of -log confidence
    let (model, batch) = toy_setup(3, 17);
    let mut tape = Tape::new();
    let seqs = tracked(&model, &mut tape, &batch)?;
    let dists: Vec<Vec<StepDistribution>> = seqs.iter().map(|s| s.distributions.clone()).collect();
    let mut confs: Vec<f64> = dists
        .iter()
        .flatten()
        .map(|d| d.probs.iter().copied().fold(0.0, f64::max))
        .collect();
    confs.sort_by(f64::total_cmp);
    let tau = confs[confs.len() / 2];
    let mask = confidence_mask(&dists, tau);
    ensure!(
        mask.kept_count() > 0 && mask.kept_count() < mask.total(),
        "median tau keeps {}",
        mask.kept_count()
    );
    let loss = ok(pseudo_label_objective(&mut tape, &seqs, &mask))?.ok_or("nothing kept")?;
    let mut sum = 0.0;
    let mut kept = 0usize;
    for d in dists.iter().flatten() {
        let c = d.probs.iter().copied().fold(0.0, f64::max);
        if c >= tau {
            sum += -c.max(1e-12).ln();
            kept += 1;
        }
    }
    let expected = sum / kept as f64;
    let got = tape.value(loss)[0];
    ensure!(
        got.to_bits() == expected.to_bits(),
        "L_pl {got:e} vs {expected:e}"
    );
    Ok(format!(
        "ln4, 0, ln2 exact; L_pl bit-identical over {kept} kept tokens"
    ))
}

pub fn episodic_contract() -> Outcome {
    let (mut model, inputs) = toy_setup(20, 23);
    let before = model.params().digest();
    let frozen: Vec<String> = model.params().frozen_paths().map(String::from).collect();
    let frozen_bits = tensor_bits(&model, &frozen);
    let adaptable: Vec<String> = model.params().adaptable_paths().iter().cloned().collect();
    let adaptable_bits = tensor_bits(&model, &adaptable);
    let mut checks = 0usize;
    let mut frozen_ok = true;
    let mut moved = false;
    for objective in [Objective::Entropy, Objective::PseudoLabel] {
        let cfg = AdaptationConfig {
            objective,
            tau: 0.0,
            steps: 3,
            lr: 1e-2,
            batch_size: 5,
            redecode_each_step: true,
        };
        ok(adapt_episode_observed(
            &mut model,
            &inputs[..5],
            &cfg,
            |_, m| {
                checks += 1;
                frozen_ok &= tensor_bits(m, &frozen) == frozen_bits;
                moved |= tensor_bits(m, &adaptable) != adaptable_bits;
            },
        ))?;
        ensure!(
            model.params().digest() == before,
            "{objective}: digest changed after episode"
        );
    }
    ensure!(frozen_ok, "frozen tensors changed mid-episode");
    ensure!(moved, "adaptation never changed the adaptable tensors");
    let batches: Vec<Vec<TestInput>> = inputs.chunks(2).map(<[TestInput]>::to_vec).collect();
    ensure!(batches.len() == 10, "expected 10 batches");
    let cfg = AdaptationConfig {
        steps: 2,
        lr: 1e-2,
        batch_size: 2,
        ..AdaptationConfig::default()
    };
    let reports = ok(run_stream(&mut model, &batches, &cfg))?;
    ensure!(
        reports.len() == 10,
        "run_stream returned {} reports",
        reports.len()
    );
    ensure!(
        model.params().digest() == before,
        "digest changed after run_stream"
    );
    Ok(format!(
        "digest unchanged after 2 episodes and a 10-batch stream; frozen tensors checked at {checks} steps"
    ))
}

pub fn masking_contract() -> Outcome {
    let (mut model, batch) = toy_setup(4, 29);
    let mut tape = Tape::new();
    let seqs = tracked(&model, &mut tape, &batch)?;
    let dists: Vec<Vec<StepDistribution>> = seqs.iter().map(|s| s.distributions.clone()).collect();
    let all = confidence_mask(&dists, 0.0);
    ensure!(
        all.kept_count() == all.total(),
        "tau=0 keeps {}/{}",
        all.kept_count(),
        all.total()
    );
    let mut prev = usize::MAX;
    for i in 0..=200 {
        let k = confidence_mask(&dists, i as f64 / 200.0).kept_count();
        ensure!(k <= prev, "kept count rises at tau={}", i as f64 / 200.0);
        prev = k;
    }
    // a token at exactly tau is kept
    let edge = confidence_mask(&[vec![dist(&[0.5, 0.5])]], 0.5);
    ensure!(edge.kept_count() == 1, "tau comparison is not inclusive");

    let max_conf = dists
        .iter()
        .flatten()
        .map(|d| d.probs.iter().copied().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let tau = (max_conf + 1e-6).min(1.0);
    ensure!(
        tau > max_conf,
        "max confidence {max_conf} leaves no room for tau"
    );
    let cfg = AdaptationConfig {
        tau,
        steps: 3,
        lr: 1e-2,
        batch_size: 4,
        ..AdaptationConfig::default()
    };
    let plain = ok(predict_batch(&model, &batch))?;
    let rep = ok(adapt_episode(&mut model, &batch, &cfg))?;
    ensure!(
        rep.skipped && rep.updates == 0,
        "episode was not skipped: {:?}",
        rep.kept_counts
    );
    ensure!(
        rep.kept_counts.iter().all(|&k| k == 0),
        "kept counts {:?}",
        rep.kept_counts
    );
    let same = plain
        .iter()
        .zip(&rep.predictions)
        .all(|(a, b)| a.tokens == b.tokens);
    ensure!(same, "skipped episode changed predictions");
    Ok(format!(
        "{} tokens kept at tau=0, monotone over 201 thresholds, skip above max confidence {max_conf:.4}",
        all.total()
    ))
}

type Trace = Vec<(Option<u64>, Vec<u64>)>;

fn trace(
    model: &Model,
    batch: &[TestInput],
    cfg: &AdaptationConfig,
) -> std::result::Result<(Trace, Vec<Vec<usize>>), String> {
    let mut m = model.clone();
    let paths: Vec<String> = m.params().adaptable_paths().iter().cloned().collect();
    let mut steps = Vec::new();
    let rep = ok(adapt_episode_observed(&mut m, batch, cfg, |e, m| {
        steps.push((e.loss.map(f64::to_bits), tensor_bits(m, &paths)));
    }))?;
    Ok((
        steps,
        rep.predictions.into_iter().map(|g| g.tokens).collect(),
    ))
}

pub fn baseline_equivalence() -> Outcome {
    let (model, batch) = toy_setup(5, 31);
    let pl = AdaptationConfig {
        objective: Objective::PseudoLabel,
        tau: 0.0,
        steps: 3,
        lr: 1e-2,
        batch_size: 5,
        redecode_each_step: true,
    };
    let dpl = AdaptationConfig::dynamic_pseudo_labeling(3, 1e-2, 5);
    let (a, pa) = trace(&model, &batch, &pl)?;
    let (b, pb) = trace(&model, &batch, &dpl)?;
    ensure!(
        a.len() == 3 && b.len() == 3,
        "step counts {} and {}",
        a.len(),
        b.len()
    );
    ensure!(a.iter().all(|s| s.0.is_some()), "tau=0 skipped a step");
    ensure!(a == b, "losses or parameters differ");
    ensure!(pa == pb, "predictions differ");
    Ok("3 steps with bit-identical losses and adaptable parameters".into())
}

pub fn acoustics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_snr = 0.0f64;
    for case in 0..100u64 {
        let n = rng.random_range(50..2000);
        let clean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise = ok(synth_noise(
            NoiseKind::White,
            rng.random_range(10..3000),
            case,
        ))?;
        let snr = rng.random_range(-10.0..30.0);
        let y = ok(mix_at_snr(&clean, &noise, snr))?;
        let added: Vec<f64> = y.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let measured = 10.0 * (mean_square(&clean) / mean_square(&added)).log10();
        worst_snr = worst_snr.max((measured - snr).abs());
    }
    ensure!(worst_snr < 1e-6, "SNR error {worst_snr:e} dB");

    let norm = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    for _ in 0..50 {
        let r = RoomSpec::sample(&mut rng, 0);
        let taps = ok(simulate_rir(&r, SourceKind::Target))?.nonzero_taps();
        let delay = SAMPLE_RATE as f64 * norm(r.source_pos, r.mic_pos) / SPEED_OF_SOUND;
        ensure!(taps.len() == 1, "order 0 gave {} taps", taps.len());
        ensure!(
            (taps[0].0 as f64 - delay).abs() <= 1.0,
            "delay {} vs {delay}",
            taps[0].0
        );
    }

    let room = RoomSpec {
        dims: [5.0, 4.0, 3.0],
        absorption: 0.3,
        source_pos: [0.8, 1.3, 1.1],
        noise_pos: [4.0, 3.0, 2.0],
        mic_pos: [3.5, 2.5, 1.7],
        order: 1,
        fs: SAMPLE_RATE,
        sound_speed: SPEED_OF_SOUND,
    };
    let [sx, sy, sz] = room.source_pos;
    let [lx, ly, lz] = room.dims;
    let images = [
        ([sx, sy, sz], 0.0),
        ([-sx, sy, sz], 1.0),
        ([2.0 * lx - sx, sy, sz], 1.0),
        ([sx, -sy, sz], 1.0),
        ([sx, 2.0 * ly - sy, sz], 1.0),
        ([sx, sy, -sz], 1.0),
        ([sx, sy, 2.0 * lz - sz], 1.0),
    ];
    let mut expected: Vec<(usize, f64)> = images
        .iter()
        .map(|&(p, refl)| {
            let d = norm(p, room.mic_pos);
            (
                (16000.0 * d / 343.0).round() as usize,
                0.7f64.powf(refl / 2.0) / (4.0 * PI * d),
            )
        })
        .collect();
    expected.sort_by_key(|e| e.0);
    let taps = ok(simulate_rir(&room, SourceKind::Target))?.nonzero_taps();
    ensure!(taps.len() == 7, "order 1 gave {} taps", taps.len());
    for ((i, a), (j, b)) in taps.iter().zip(&expected) {
        ensure!(
            i == j && (a - b).abs() < 1e-12,
            "tap ({i}, {a}) vs ({j}, {b})"
        );
    }

    let mut worst_conv = 0.0f64;
    for _ in 0..10 {
        let r = RoomSpec::sample(&mut rng, 4);
        let h = ok(simulate_rir(&r, SourceKind::Noise))?;
        let x: Vec<f64> = (0..rng.random_range(200..4000))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let a = ok(apply_reverb(&x, &h))?;
        let b = ok(apply_reverb_fft(&x, &h))?;
        worst_conv = a
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).abs())
            .fold(worst_conv, f64::max);
    }
    ensure!(worst_conv < 1e-9, "direct vs FFT {worst_conv:e}");
    Ok(format!(
        "SNR error {worst_snr:.1e} dB, order-0 delay within 1 sample, 7 first-order taps, conv gap {worst_conv:.1e}"
    ))
}

pub fn entropy_descent() -> Outcome {
    let (mut model, batch) = toy_setup(5, 37);
    let cfg = AdaptationConfig {
        objective: Objective::Entropy,
        tau: 0.0,
        steps: 5,
        lr: 1e-4,
        batch_size: 5,
        redecode_each_step: false,
    };
    let rep = ok(adapt_episode(&mut model, &batch, &cfg))?;
    let losses: Vec<f64> = rep
        .losses
        .iter()
        .map(|l| l.ok_or("skipped step"))
        .collect::<std::result::Result<_, _>>()?;
    ensure!(losses.len() == 5, "{} losses", losses.len());
    for w in losses.windows(2) {
        ensure!(w[1] <= w[0] + 1e-9, "loss rose: {losses:?}");
    }
    Ok(format!("losses {:.9} -> {:.9}", losses[0], losses[4]))
}

pub fn wer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for pair in 0..200 {
        let mut r = random_tokens(&mut rng, 12, 6);
        if r.is_empty() {
            r.push(rng.random_range(0..6));
        }
        let h = random_tokens(&mut rng, 12, 6);
        let expected = oracle_edit_distance(&r, &h) as f64 / r.len() as f64;
        let got = ok(wer(&r, &h))?;
        ensure!(got == expected, "pair {pair}: {got} vs {expected}");
    }
    Ok("200 random pairs match exactly".into())
}

pub struct Directional {
    pub clean: f64,
    pub anechoic: (f64, f64),
    pub reverb: (f64, f64),
    pub seeds: usize,
}

/// Pretrains with the default configuration and runs the restricted grid
/// ENTROPY tau=0 K=3 against the unadapted baseline.
pub fn directional_run() -> std::result::Result<Directional, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.grid.objectives = vec![Objective::Entropy];
    cfg.grid.taus = vec![0.0];
    cfg.grid.steps = vec![3];
    ok(cfg.validate())?;
    let data = ok(cfg.dataset())?;
    let (model, _) = ok(obtain_model(&cfg, &data))?;
    let clean = ok(evaluate(
        &model,
        &cfg.task,
        &data.test,
        &CorruptionSpec::clean(),
        None,
        cfg.eval_seeds[0],
    ))?
    .row
    .token_error_rate;
    let grid = ok(run_grid(&cfg, &model, &data))?;
    if let Some(bad) = grid.rows.iter().find(|r| r.error.is_some()) {
        return Err(format!("failed cell: {:?}", bad.error));
    }
    let mean = |label: String, baseline: bool| {
        let v: Vec<f64> = grid
            .rows
            .iter()
            .filter(|r| r.corruption == label && r.is_baseline() == baseline)
            .map(|r| r.token_error_rate)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let labels: Vec<String> = cfg.corruptions.iter().map(CorruptionSpec::label).collect();
    Ok(Directional {
        clean,
        anechoic: (
            mean(labels[0].clone(), true),
            mean(labels[0].clone(), false),
        ),
        reverb: (
            mean(labels[1].clone(), true),
            mean(labels[1].clone(), false),
        ),
        seeds: cfg.eval_seeds.len(),
    })
}

pub fn directional_reproduction() -> Outcome {
    let start = Instant::now();
    let d = directional_run()?;
    let secs = start.elapsed().as_secs_f64();
    let gain_a = d.anechoic.0 - d.anechoic.1;
    let gain_r = d.reverb.0 - d.reverb.1;
    let detail = format!(
        "clean {:.2}%, anechoic {:.2}% -> {:.2}% ({gain_a:+.2}), reverb {:.2}% -> {:.2}% ({gain_r:+.2}), {} seeds, {secs:.0}s",
        d.clean, d.anechoic.0, d.anechoic.1, d.reverb.0, d.reverb.1, d.seeds
    );
    ensure!(d.seeds >= 5, "only {} seeds: {detail}", d.seeds);
    ensure!(d.clean < 2.0, "clean WER too high: {detail}");
    ensure!(
        gain_a > 0.0 && gain_r > 0.0,
        "adaptation did not lower WER: {detail}"
    );
    ensure!(
        gain_r >= gain_a,
        "reverb gain below anechoic gain: {detail}"
    );
    ensure!(secs < 1800.0, "too slow: {detail}");
    Ok(detail)
}

pub const TINY_CONFIG: &str = r#"
schema_version = 1
eval_seeds = [1, 2]

[data]
n_train = 60
n_test = 6
seed = 3

[pretrain]
max_epochs = 1
heldout = 10

[grid]
objectives = ["ENTROPY", "PSEUDO_LABEL"]
taus = [0.5]
steps = [1]
lr = 0.01
batch_size = 3
"#;

fn run_cli(config: &Path, out: &Path) -> std::result::Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_slm-tta"))
        .arg("grid")
        .arg("--config")
        .arg(config)
        .arg("--out-dir")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        status.status.success(),
        "grid exited with {:?}: {}",
        status.status.code(),
        String::from_utf8_lossy(&status.stderr)
    );
    std::fs::read(out.join("results.csv")).map_err(|e| e.to_string())
}

pub fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, TINY_CONFIG).map_err(|e| e.to_string())?;
    let a = run_cli(&config, &dir.path().join("a"))?;
    let b = run_cli(&config, &dir.path().join("b"))?;
    ensure!(!a.is_empty(), "empty results.csv");
    ensure!(a == b, "results.csv differs between runs");
    let rows = a.iter().filter(|&&c| c == b'\n').count() - 1;
    Ok(format!(
        "{} bytes, {rows} rows identical across two runs",
        a.len()
    ))
}
