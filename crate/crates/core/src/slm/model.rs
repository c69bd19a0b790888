use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, softmax_row, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{AdaptableSet, ModelParams, ParamSnapshot};
use super::{ModelConfig, LN_EPS};

/// Parameter paths mapped to their leaves on one tape.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub(crate) fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, path: &str) -> Option<Var> {
        self.vars.get(path).copied()
    }

    /// Replaces the leaf used for `path`, e.g. to probe it from a gradient checker.
    pub fn set(&mut self, path: &str, var: Var) {
        self.vars.insert(path.to_string(), var);
    }

    fn var(&self, path: &str) -> Result<Var> {
        self.get(path)
            .ok_or_else(|| Error::Contract(format!("parameter {path} is not bound")))
    }
}

/// Next-token distribution `p(y_t | x, u, y_<t)` at one decode step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution {
    pub probs: Vec<f64>,
    pub step: usize,
    pub sample: usize,
}

impl StepDistribution {
    /// Largest probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn entropy(&self) -> f64 {
        crate::autodiff::entropy(&self.probs).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<usize>,
    pub distributions: Vec<StepDistribution>,
    pub confidences: Vec<f64>,
}

impl GenerationResult {
    pub(crate) fn set_sample(&mut self, b: usize) {
        for d in &mut self.distributions {
            d.sample = b;
        }
    }

    /// Tokens with a trailing end-of-sequence marker removed.
    pub fn content_tokens(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

/// Teacher-forced distributions whose logits live on a tape.
#[derive(Debug, Clone)]
pub struct TrackedSequence {
    /// `[T x |Q|]` logits, differentiable with respect to the bound parameters.
    pub logits: Var,
    pub distributions: Vec<StepDistribution>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
}

enum Init {
    Uniform { fan_in: usize },
    Const(f64),
}

fn param_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let mut out = Vec::new();
    let mut c_in = c.audio_dim;
    for (i, l) in c.conv_layers.iter().enumerate() {
        let fan_in = l.kernel * c_in;
        out.push((
            format!("encoder.conv.{i}.weight"),
            vec![l.kernel, c_in, l.out_channels],
            Uniform { fan_in },
        ));
        out.push((
            format!("encoder.conv.{i}.bias"),
            vec![l.out_channels],
            Uniform { fan_in },
        ));
        c_in = l.out_channels;
    }
    let d = c.d_model;
    let ln = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, width: usize| {
        out.push((format!("{name}.gamma"), vec![width], Const(1.0)));
        out.push((format!("{name}.beta"), vec![width], Const(0.0)));
    };
    ln(&mut out, "encoder.ln", c_in);
    out.push((
        "encoder.proj.weight".into(),
        vec![c_in, d],
        Uniform { fan_in: c_in },
    ));
    out.push((
        "encoder.proj.bias".into(),
        vec![d],
        Uniform { fan_in: c_in },
    ));
    out.push((
        "decoder.tok_emb".into(),
        vec![c.vocab.size, d],
        Uniform { fan_in: d },
    ));
    out.push((
        "decoder.prompt_emb".into(),
        vec![c.prompt_vocab_size, d],
        Uniform { fan_in: d },
    ));
    for b in 0..c.n_blocks {
        let p = format!("decoder.block.{b}");
        for (norm, attn) in [("ln1", "self_attn"), ("ln2", "cross_attn")] {
            ln(&mut out, &format!("{p}.{norm}"), d);
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.{attn}.{w}"), vec![d, d], Uniform { fan_in: d }));
            }
            out.push((format!("{p}.{attn}.bo"), vec![d], Uniform { fan_in: d }));
        }
        ln(&mut out, &format!("{p}.ln3"), d);
        out.push((
            format!("{p}.ff.w1"),
            vec![d, c.ff_dim],
            Uniform { fan_in: d },
        ));
        out.push((format!("{p}.ff.b1"), vec![c.ff_dim], Uniform { fan_in: d }));
        out.push((
            format!("{p}.ff.w2"),
            vec![c.ff_dim, d],
            Uniform { fan_in: c.ff_dim },
        ));
        out.push((format!("{p}.ff.b2"), vec![d], Uniform { fan_in: c.ff_dim }));
    }
    ln(&mut out, "decoder.ln_f", d);
    out.push((
        "decoder.out.weight".into(),
        vec![d, c.vocab.size],
        Uniform { fan_in: d },
    ));
    out.push((
        "decoder.out.bias".into(),
        vec![c.vocab.size],
        Uniform { fan_in: d },
    ));
    out
}

/// Fixed sinusoidal position table `[len x d]`.
fn sinusoid(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

impl Model {
    /// Builds a freshly initialized model. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; layer norms start at identity.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (path, shape, init) in param_layout(&config) {
            let t = match init {
                Init::Const(v) => Tensor::full(&shape, v),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(data, shape)?
                }
            };
            tensors.insert(path, t);
        }
        Ok(Self {
            config,
            params: ModelParams::from_tensors(tensors),
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ModelParams) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn select_adaptable(&mut self, set: AdaptableSet) {
        self.params.select(set);
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        self.params.snapshot()
    }

    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        self.params.restore(snap)
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    // ------------------------------------------------------------ encoder

    /// Conv stack (with GELU), layer norm, projector and sinusoidal positions.
    /// Returns `[T' x d_model]`.
    pub fn encode_audio(&self, tape: &mut Tape, b: &Binding, features: &Tensor) -> Result<Var> {
        let c = &self.config;
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != c.audio_dim {
            return Err(Error::shape("encode_audio", shape, &[0, c.audio_dim]));
        }
        let need = c.min_frames();
        if shape[0] < need {
            return Err(Error::InputTooShort {
                op: "encode_audio",
                needed: need,
                got: shape[0],
            });
        }
        let mut x = tape.constant(features.data().to_vec(), shape.to_vec())?;
        for (i, l) in c.conv_layers.iter().enumerate() {
            let w = b.var(&format!("encoder.conv.{i}.weight"))?;
            let bias = b.var(&format!("encoder.conv.{i}.bias"))?;
            let y = tape.conv1d_strided(x, w, bias, l.stride)?;
            x = tape.gelu(y);
        }
        let x = tape.layer_norm(
            x,
            b.var("encoder.ln.gamma")?,
            b.var("encoder.ln.beta")?,
            LN_EPS,
        )?;
        let x = tape.matmul(x, b.var("encoder.proj.weight")?)?;
        let x = tape.add_bias(x, b.var("encoder.proj.bias")?)?;
        let t = tape.shape(x)[0];
        let pos = tape.constant(sinusoid(t, c.d_model), vec![t, c.d_model])?;
        tape.add(x, pos)
    }

    // ------------------------------------------------------------ decoder

    fn attention(
        &self,
        tape: &mut Tape,
        b: &Binding,
        prefix: &str,
        query: Var,
        keys: Var,
        causal: bool,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = tape.matmul(query, b.var(&format!("{prefix}.wq"))?)?;
        let k = tape.matmul(keys, b.var(&format!("{prefix}.wk"))?)?;
        let v = tape.matmul(keys, b.var(&format!("{prefix}.wv"))?)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = if causal {
                tape.softmax_causal(scores)?
            } else {
                tape.softmax(scores)?
            };
            outs.push(tape.matmul(attn, vh)?);
        }
        let joined = tape.concat_cols(&outs)?;
        let o = tape.matmul(joined, b.var(&format!("{prefix}.wo"))?)?;
        tape.add_bias(o, b.var(&format!("{prefix}.bo"))?)
    }

    fn norm(&self, tape: &mut Tape, b: &Binding, name: &str, x: Var) -> Result<Var> {
        let g = b.var(&format!("{name}.gamma"))?;
        let beta = b.var(&format!("{name}.beta"))?;
        tape.layer_norm(x, g, beta, LN_EPS)
    }

    fn check_tokens(&self, prompt: &[usize], tokens: &[usize]) -> Result<()> {
        let c = &self.config;
        if let Some(&bad) = prompt.iter().find(|&&u| u >= c.prompt_vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: c.prompt_vocab_size,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&y| y >= c.vocab.size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: c.vocab.size,
            });
        }
        Ok(())
    }

    /// Logits `[context.len() x |Q|]`; row `i` is the prediction that follows `context[..=i]`.
    pub fn decoder_logits(
        &self,
        tape: &mut Tape,
        b: &Binding,
        memory: Var,
        prompt: &[usize],
        context: &[usize],
    ) -> Result<Var> {
        self.check_tokens(prompt, context)?;
        if context.is_empty() {
            return Err(Error::Contract("decoder context is empty".into()));
        }
        let d = self.config.d_model;
        let tok = tape.gather_rows(b.var("decoder.tok_emb")?, context)?;
        let h = if prompt.is_empty() {
            tok
        } else {
            let pr = tape.gather_rows(b.var("decoder.prompt_emb")?, prompt)?;
            tape.concat_rows(&[pr, tok])?
        };
        let n = prompt.len() + context.len();
        let pos = tape.constant(sinusoid(n, d), vec![n, d])?;
        let mut h = tape.add(h, pos)?;
        for blk in 0..self.config.n_blocks {
            let p = format!("decoder.block.{blk}");
            let x = self.norm(tape, b, &format!("{p}.ln1"), h)?;
            let a = self.attention(tape, b, &format!("{p}.self_attn"), x, x, true)?;
            h = tape.add(h, a)?;
            let x = self.norm(tape, b, &format!("{p}.ln2"), h)?;
            let a = self.attention(tape, b, &format!("{p}.cross_attn"), x, memory, false)?;
            h = tape.add(h, a)?;
            let x = self.norm(tape, b, &format!("{p}.ln3"), h)?;
            let f = tape.matmul(x, b.var(&format!("{p}.ff.w1"))?)?;
            let f = tape.add_bias(f, b.var(&format!("{p}.ff.b1"))?)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, b.var(&format!("{p}.ff.w2"))?)?;
            let f = tape.add_bias(f, b.var(&format!("{p}.ff.b2"))?)?;
            h = tape.add(h, f)?;
        }
        let h = tape.slice_rows(h, prompt.len(), context.len())?;
        let h = self.norm(tape, b, "decoder.ln_f", h)?;
        let logits = tape.matmul(h, b.var("decoder.out.weight")?)?;
        tape.add_bias(logits, b.var("decoder.out.bias")?)
    }

    fn distributions_of(&self, tape: &Tape, logits: Var) -> Vec<StepDistribution> {
        let v = self.config.vocab.size;
        tape.value(logits)
            .chunks(v)
            .enumerate()
            .map(|(t, row)| {
                let mut probs = vec![0.0; v];
                softmax_row(row, v, &mut probs);
                StepDistribution {
                    probs,
                    step: t,
                    sample: 0,
                }
            })
            .collect()
    }

    /// `p(y_t | x, u, y_<t)` for the given prefix.
    pub fn forward_distribution(
        &self,
        features: &Tensor,
        prompt: &[usize],
        prefix: &[usize],
    ) -> Result<StepDistribution> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let memory = self.encode_audio(&mut tape, &b, features)?;
        let mut context = vec![self.config.vocab.bos];
        context.extend_from_slice(prefix);
        let logits = self.decoder_logits(&mut tape, &b, memory, prompt, &context)?;
        let dists = self.distributions_of(&tape, logits);
        Ok(dists.into_iter().next_back().expect("context is non-empty"))
    }

    /// Greedy decoding until end-of-sequence or `max_len` tokens.
    pub fn decode_greedy(
        &self,
        features: &Tensor,
        prompt: &[usize],
        max_len: usize,
    ) -> Result<GenerationResult> {
        if max_len == 0 {
            return Err(Error::Contract("max_len must be >= 1".into()));
        }
        let eos = self.config.vocab.eos;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let memory = self.encode_audio(&mut tape, &b, features)?;
        let mut context = vec![self.config.vocab.bos];
        let mut out = GenerationResult {
            tokens: Vec::new(),
            distributions: Vec::new(),
            confidences: Vec::new(),
        };
        while out.tokens.len() < max_len {
            let logits = self.decoder_logits(&mut tape, &b, memory, prompt, &context)?;
            let last = tape.shape(logits)[0] - 1;
            let mut dist = self.distributions_of(&tape, logits).swap_remove(last);
            dist.step = out.tokens.len();
            let token = dist.argmax();
            out.confidences.push(dist.confidence());
            out.distributions.push(dist);
            out.tokens.push(token);
            context.push(token);
            if token == eos {
                break;
            }
        }
        Ok(out)
    }

    /// One forward pass with `y_hat` as the fixed context, returning the
    /// distributions for every position of `y_hat` with logits kept on `tape`.
    pub fn teacher_forced_distributions(
        &self,
        tape: &mut Tape,
        b: &Binding,
        features: &Tensor,
        prompt: &[usize],
        y_hat: &[usize],
    ) -> Result<TrackedSequence> {
        if y_hat.is_empty() {
            return Err(Error::Contract(
                "teacher forcing needs a non-empty sequence".into(),
            ));
        }
        self.check_tokens(prompt, y_hat)?;
        let memory = self.encode_audio(tape, b, features)?;
        let mut context = Vec::with_capacity(y_hat.len());
        context.push(self.config.vocab.bos);
        context.extend_from_slice(&y_hat[..y_hat.len() - 1]);
        let logits = self.decoder_logits(tape, b, memory, prompt, &context)?;
        let distributions = self.distributions_of(tape, logits);
        Ok(TrackedSequence {
            logits,
            distributions,
        })
    }
}
