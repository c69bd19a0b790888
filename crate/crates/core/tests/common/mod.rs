#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slm_tta::autodiff::{
    finite_difference_check, finite_difference_check_sampled, Tape, Tensor, Var,
};
use slm_tta::corrupt::{corrupt, CorruptionSpec, NoiseKind};
use slm_tta::harness::{front_end, synth_dataset, SynthTask};
use slm_tta::slm::{AdaptableSet, CodebookVocab, ConvLayerSpec, Model, ModelConfig};
use slm_tta::tta::{
    confidence_mask, entropy_objective, pseudo_label_objective, Objective, TestInput,
};
use slm_tta::Result;

pub const FD_EPS: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rand_vec(rng, n, scale), shape.to_vec()).unwrap()
}

/// A differentiable op under test: builds a scalar loss and its inputs.
pub struct OpCase {
    pub name: &'static str,
    pub build: fn(&mut ChaCha8Rng) -> (Loss, Vec<Tensor>),
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(2..=5)
}

/// Contracts the op output with fixed random weights so every output entry
/// contributes to the checked gradient.
fn project(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    rand_vec(rng, n, 1.0)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            build: |rng| {
                let (m, k, n) = (dim(rng), dim(rng), dim(rng));
                let w = project(rng, m * n);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[m, k], 1.0),
                        rand_tensor(rng, &[k, n], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "transpose",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.transpose(v[0])?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "add",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[r, c], 1.0),
                        rand_tensor(rng, &[r, c], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "mul",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[r, c], 1.0),
                        rand_tensor(rng, &[r, c], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "scale",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let factor = rng.random_range(-3.0..3.0);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.scale(v[0], factor);
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "div_scalar",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let d = rng.random_range(0.5..4.0);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.div_scalar(v[0], d);
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "add_bias",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.add_bias(v[0], v[1])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![rand_tensor(rng, &[r, c], 1.0), rand_tensor(rng, &[c], 1.0)],
                )
            },
        },
        OpCase {
            name: "gelu",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.gelu(v[0]);
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 3.0)])
            },
        },
        OpCase {
            name: "conv1d_strided",
            build: |rng| {
                let k = rng.random_range(1..=3);
                let stride = rng.random_range(1..=3);
                let (c_in, c_out) = (dim(rng), dim(rng));
                let t_in = k + rng.random_range(0..6);
                let t_out = (t_in - k) / stride + 1;
                let w = project(rng, t_out * c_out);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.conv1d_strided(v[0], v[1], v[2], stride)?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[t_in, c_in], 1.0),
                        rand_tensor(rng, &[k, c_in, c_out], 1.0),
                        rand_tensor(rng, &[c_out], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "layer_norm",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[r, c], 2.0),
                        rand_tensor(rng, &[c], 1.5),
                        rand_tensor(rng, &[c], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "softmax",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.softmax(v[0])?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 2.0)])
            },
        },
        OpCase {
            name: "softmax_causal",
            build: |rng| {
                let c = dim(rng);
                let r = rng.random_range(1..=c);
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.softmax_causal(v[0])?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 2.0)])
            },
        },
        OpCase {
            name: "softmax_entropy",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.softmax_entropy(v[0])?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 2.0)])
            },
        },
        OpCase {
            name: "softmax_nll",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r);
                let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
                let f: Loss = Box::new(move |t, v| {
                    let y = t.softmax_nll(v[0], &targets)?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 2.0)])
            },
        },
        OpCase {
            name: "gather_rows",
            build: |rng| {
                let (size, c) = (dim(rng), dim(rng));
                let n = rng.random_range(1..=6);
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
                let w = project(rng, n * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &idx)?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[size, c], 1.0)])
            },
        },
        OpCase {
            name: "concat_rows",
            build: |rng| {
                let (r1, r2, c) = (dim(rng), dim(rng), dim(rng));
                let w = project(rng, (r1 + r2) * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.concat_rows(&[v[0], v[1]])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[r1, c], 1.0),
                        rand_tensor(rng, &[r2, c], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "slice_rows",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let start = rng.random_range(0..r);
                let len = rng.random_range(1..=r - start);
                let w = project(rng, len * c);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.slice_rows(v[0], start, len)?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "slice_cols",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let start = rng.random_range(0..c);
                let len = rng.random_range(1..=c - start);
                let w = project(rng, r * len);
                let f: Loss = Box::new(move |t, v| {
                    let y = t.slice_cols(v[0], start, len)?;
                    t.dot_const(y, &w)
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "concat_cols",
            build: |rng| {
                let (r, c1, c2) = (dim(rng), dim(rng), dim(rng));
                let w = project(rng, r * (c1 + c2));
                let f: Loss = Box::new(move |t, v| {
                    let y = t.concat_cols(&[v[0], v[1]])?;
                    t.dot_const(y, &w)
                });
                (
                    f,
                    vec![
                        rand_tensor(rng, &[r, c1], 1.0),
                        rand_tensor(rng, &[r, c2], 1.0),
                    ],
                )
            },
        },
        OpCase {
            name: "sum",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let f: Loss = Box::new(move |t, v| {
                    // square first so the gradient depends on the input
                    let sq = t.mul(v[0], v[0])?;
                    Ok(t.sum(sq))
                });
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
        OpCase {
            name: "dot_const",
            build: |rng| {
                let (r, c) = (dim(rng), dim(rng));
                let w = project(rng, r * c);
                let f: Loss = Box::new(move |t, v| t.dot_const(v[0], &w));
                (f, vec![rand_tensor(rng, &[r, c], 1.0)])
            },
        },
    ]
}

/// Worst relative error of `case` over `trials` seeded draws.
pub fn check_op(case: &OpCase, trials: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(trial as u64));
        let (f, params) = (case.build)(&mut rng);
        let err = finite_difference_check(|t: &mut Tape, v: &[Var]| f(t, v), &params, FD_EPS)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// A model small enough for an exhaustive finite-difference check.
pub fn small_config() -> ModelConfig {
    let conv = ConvLayerSpec {
        kernel: 3,
        stride: 2,
        out_channels: 6,
    };
    ModelConfig {
        audio_dim: 5,
        conv_layers: vec![conv, conv],
        d_model: 8,
        n_blocks: 1,
        n_heads: 2,
        ff_dim: 12,
        vocab: CodebookVocab::with_size(7),
        prompt_vocab_size: 2,
        max_len: 4,
    }
}

pub fn random_inputs(config: &ModelConfig, n: usize, frames: usize, seed: u64) -> Vec<TestInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TestInput {
            features: rand_tensor(&mut rng, &[frames, config.audio_dim], 1.0),
            prompt: vec![rng.random_range(0..config.prompt_vocab_size)],
        })
        .collect()
}

/// `n` corrupted synthetic utterances for the default model configuration.
pub fn synthetic_inputs(n: usize, spec: &CorruptionSpec, seed: u64) -> Vec<TestInput> {
    let task = SynthTask::default();
    let data = synth_dataset(&task, 1, n, seed).unwrap();
    data.test
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let y = corrupt(&u.waveform, spec, seed + i as u64).unwrap();
            TestInput {
                features: front_end(&task, &y).unwrap(),
                prompt: u.prompt.clone(),
            }
        })
        .collect()
}

/// Default-architecture model (untrained, seeded) and a corrupted batch.
pub fn toy_setup(batch: usize, seed: u64) -> (Model, Vec<TestInput>) {
    let mut model = Model::build(ModelConfig::default(), seed).unwrap();
    model.select_adaptable(AdaptableSet::NormPlusConv);
    let inputs = synthetic_inputs(batch, &CorruptionSpec::anechoic(NoiseKind::Pink), seed);
    (model, inputs)
}

/// Finite-difference check of an adaptation objective with respect to the
/// model's adaptable tensors. Hypotheses are decoded once and held fixed.
/// `per_tensor = None` checks every entry.
pub fn check_model_objective(
    model: &Model,
    batch: &[TestInput],
    objective: Objective,
    per_tensor: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let max_len = model.config().max_len;
    let hyps: Vec<Vec<usize>> = batch
        .iter()
        .map(|x| {
            model
                .decode_greedy(&x.features, &x.prompt, max_len)
                .map(|g| g.tokens)
        })
        .collect::<Result<_>>()?;
    let paths: Vec<String> = model.params().adaptable_paths().iter().cloned().collect();
    let params: Vec<Tensor> = paths
        .iter()
        .map(|p| model.params().get(p).unwrap().clone())
        .collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut b = model.bind(tape);
        for (p, v) in paths.iter().zip(vars) {
            b.set(p, *v);
        }
        let seqs = batch
            .iter()
            .zip(&hyps)
            .map(|(x, y)| model.teacher_forced_distributions(tape, &b, &x.features, &x.prompt, y))
            .collect::<Result<Vec<_>>>()?;
        let dists: Vec<_> = seqs.iter().map(|s| s.distributions.clone()).collect();
        let mask = confidence_mask(&dists, 0.0);
        let loss = match objective {
            Objective::Entropy => entropy_objective(tape, &seqs, &mask)?,
            Objective::PseudoLabel => pseudo_label_objective(tape, &seqs, &mask)?,
        };
        Ok(loss.expect("tau = 0 keeps every token"))
    };
    match per_tensor {
        None => finite_difference_check(f, &params, FD_EPS),
        Some(k) => finite_difference_check_sampled(f, &params, FD_EPS, k, seed),
    }
}

/// Edit distance by exhaustive recursion over (i, j) suffix pairs with a memo
/// table; independent of the library's two-row implementation.
pub fn oracle_edit_distance(r: &[usize], h: &[usize]) -> usize {
    fn go(
        r: &[usize],
        h: &[usize],
        i: usize,
        j: usize,
        memo: &mut Vec<Vec<Option<usize>>>,
    ) -> usize {
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if i == r.len() {
            h.len() - j
        } else if j == h.len() {
            r.len() - i
        } else {
            let options = [
                go(r, h, i + 1, j + 1, memo) + usize::from(r[i] != h[j]),
                go(r, h, i + 1, j, memo) + 1,
                go(r, h, i, j + 1, memo) + 1,
            ];
            *options.iter().min().unwrap()
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; h.len() + 1]; r.len() + 1];
    go(r, h, 0, 0, &mut memo)
}

pub fn random_tokens(rng: &mut ChaCha8Rng, max_len: usize, alphabet: usize) -> Vec<usize> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| rng.random_range(0..alphabet)).collect()
}

/// Bit patterns of the named tensors, in path order.
pub fn tensor_bits(model: &Model, paths: &[String]) -> Vec<u64> {
    paths
        .iter()
        .flat_map(|p| {
            model
                .params()
                .get(p)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
        })
        .collect()
}
