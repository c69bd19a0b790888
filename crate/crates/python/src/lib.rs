//! Python bindings for `slm-tta`: the toy model, episodic adaptation, the
//! corruption pipeline, synthetic audio and token error rate.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use slm_tta::autodiff::Tensor;
use slm_tta::corrupt::{CorruptionSpec, NoiseKind};
use slm_tta::harness::{front_end, render_tokens, SynthTask};
use slm_tta::slm::{AdaptableSet, Model, ModelConfig};
use slm_tta::tta::{AdaptationConfig, Objective, TestInput};

fn err(e: slm_tta::Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(
            "features must be a rectangular list of rows",
        ));
    }
    let n = rows.len();
    Tensor::new(rows.into_iter().flatten().collect(), vec![n, cols]).map_err(err)
}

fn noise_kind(name: &str) -> PyResult<NoiseKind> {
    name.parse().map_err(err)
}

#[pyclass(name = "AdaptationConfig", from_py_object)]
#[derive(Clone)]
struct PyAdaptationConfig {
    inner: AdaptationConfig,
}

#[pymethods]
impl PyAdaptationConfig {
    #[new]
    #[pyo3(signature = (objective = "ENTROPY", tau = 0.0, steps = 1, lr = 1e-4, batch_size = 5, redecode_each_step = true))]
    fn new(
        objective: &str,
        tau: f64,
        steps: usize,
        lr: f64,
        batch_size: usize,
        redecode_each_step: bool,
    ) -> PyResult<Self> {
        let inner = AdaptationConfig {
            objective: objective.parse::<Objective>().map_err(err)?,
            tau,
            steps,
            lr,
            batch_size,
            redecode_each_step,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Pseudo-labeling with confidence masking disabled.
    #[staticmethod]
    fn dynamic_pseudo_labeling(steps: usize, lr: f64, batch_size: usize) -> Self {
        Self {
            inner: AdaptationConfig::dynamic_pseudo_labeling(steps, lr, batch_size),
        }
    }

    #[getter]
    fn objective(&self) -> String {
        self.inner.objective.to_string()
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    fn __repr__(&self) -> String {
        format!(
            "AdaptationConfig({}, lr={}, batch_size={})",
            self.inner.label(),
            self.inner.lr,
            self.inner.batch_size
        )
    }
}

/// The toy audio-conditioned sequence model with the default architecture.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> PyResult<Self> {
        let mut inner = Model::build(ModelConfig::default(), seed).map_err(err)?;
        inner.select_adaptable(AdaptableSet::NormPlusConv);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let mut inner = Model::load(&path, &ModelConfig::default()).map_err(err)?;
        inner.select_adaptable(AdaptableSet::NormPlusConv);
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// One of `NORM_ONLY`, `NORM_PLUS_CONV`, `ALL`, `NONE`.
    fn select_adaptable(&mut self, subset: &str) -> PyResult<()> {
        let set: AdaptableSet = subset.parse().map_err(err)?;
        self.inner.select_adaptable(set);
        Ok(())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_params()
    }

    #[getter]
    fn num_adaptable(&self) -> usize {
        self.inner.params().num_adaptable()
    }

    /// SHA-256 of every parameter, as hex.
    fn digest(&self) -> String {
        self.inner.params().digest_hex()
    }

    /// Greedy decoding; returns content tokens without the end marker.
    #[pyo3(signature = (features, prompt = vec![0]))]
    fn decode(&self, features: Vec<Vec<f64>>, prompt: Vec<usize>) -> PyResult<Vec<usize>> {
        let f = matrix(features)?;
        let cfg = self.inner.config();
        let g = self
            .inner
            .decode_greedy(&f, &prompt, cfg.max_len)
            .map_err(err)?;
        Ok(g.content_tokens(cfg.vocab.eos).to_vec())
    }

    /// Runs one adaptation episode on `(features, prompt)` pairs and resets
    /// the model. Returns the episode report with the adapted predictions.
    fn adapt_episode<'py>(
        &mut self,
        py: Python<'py>,
        batch: Vec<(Vec<Vec<f64>>, Vec<usize>)>,
        config: &PyAdaptationConfig,
    ) -> PyResult<Bound<'py, PyDict>> {
        let inputs = batch
            .into_iter()
            .map(|(f, prompt)| {
                Ok(TestInput {
                    features: matrix(f)?,
                    prompt,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let rep =
            slm_tta::tta::adapt_episode(&mut self.inner, &inputs, &config.inner).map_err(err)?;
        let eos = self.inner.config().vocab.eos;
        let predictions: Vec<Vec<usize>> = rep
            .predictions
            .iter()
            .map(|g| g.content_tokens(eos).to_vec())
            .collect();
        let d = PyDict::new(py);
        d.set_item("objective", rep.objective.to_string())?;
        d.set_item("tau", rep.tau)?;
        d.set_item("steps", rep.steps)?;
        d.set_item("lr", rep.lr)?;
        d.set_item("batch_size", rep.batch_size)?;
        d.set_item("losses", rep.losses)?;
        d.set_item("kept_counts", rep.kept_counts)?;
        d.set_item("skipped", rep.skipped)?;
        d.set_item("updates", rep.updates)?;
        d.set_item("numeric_failure", rep.numeric_failure)?;
        d.set_item("wall_time_s", rep.wall_time_s)?;
        d.set_item("predictions", predictions)?;
        Ok(d)
    }
}

/// Token error rate of one hypothesis as a fraction.
#[pyfunction]
fn wer(reference: Vec<usize>, hypothesis: Vec<usize>) -> PyResult<f64> {
    slm_tta::harness::wer(&reference, &hypothesis).map_err(err)
}

/// Unit-RMS `white`, `pink` or `babble` noise.
#[pyfunction]
fn synth_noise(kind: &str, length: usize, seed: u64) -> PyResult<Vec<f64>> {
    slm_tta::corrupt::synth_noise(noise_kind(kind)?, length, seed).map_err(err)
}

#[pyfunction]
fn mix_at_snr(clean: Vec<f64>, noise: Vec<f64>, snr_db: f64) -> PyResult<Vec<f64>> {
    slm_tta::corrupt::mix_at_snr(&clean, &noise, snr_db).map_err(err)
}

/// Applies `clean`, `anechoic` (-5..5 dB) or `reverberant` (10..20 dB) corruption.
#[pyfunction]
#[pyo3(signature = (x, kind, seed, noise = "pink"))]
fn corrupt(x: Vec<f64>, kind: &str, seed: u64, noise: &str) -> PyResult<Vec<f64>> {
    let noise = noise_kind(noise)?;
    let spec = match kind {
        "clean" => CorruptionSpec::clean(),
        "anechoic" => CorruptionSpec::anechoic(noise),
        "reverberant" => CorruptionSpec::reverberant(noise),
        _ => {
            return Err(PyValueError::new_err(format!(
                "unknown corruption {kind:?}"
            )))
        }
    };
    slm_tta::corrupt::corrupt(&x, &spec, seed).map_err(err)
}

/// Renders a token sequence as audio with the default synthetic task.
#[pyfunction]
fn synthesize(tokens: Vec<usize>, seed: u64) -> PyResult<Vec<f64>> {
    render_tokens(&SynthTask::default(), &tokens, seed).map_err(err)
}

/// Log band-energy features (frames x bands) of a waveform.
#[pyfunction]
fn features(wave: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let f = front_end(&SynthTask::default(), &wave).map_err(err)?;
    let (rows, _) = f.rows_cols();
    Ok((0..rows).map(|i| f.row(i).to_vec()).collect())
}

#[pymodule]
fn pyslmtta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyAdaptationConfig>()?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(synth_noise, m)?)?;
    m.add_function(wrap_pyfunction!(mix_at_snr, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(features, m)?)?;
    Ok(())
}
