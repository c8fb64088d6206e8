//! Python bindings. Tensors cross the boundary as flat lists plus a shape;
//! images are channel-first `3 × H × W` with values in `[0, 1]`.

use emma_core::bench::{self, StopRule};
use emma_core::mllm::{checkpoint, tokenizer, EmmaConfig, EmmaModel};
use emma_core::nn::Module;
use emma_core::ssm::{discretize, LtiSystem};
use emma_core::training::{self, RunConfig};
use emma_core::{Graph, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: emma_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Model hyperparameters.
#[pyclass(name = "Config", module = "emma", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: EmmaConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => EmmaConfig::from_toml(s).map_err(err)?,
            None => EmmaConfig::default(),
        };
        Ok(Self { inner })
    }

    /// A small configuration for quick experiments.
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: EmmaConfig::tiny(),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.num_patches()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn fusion_layer_indices(&self) -> Vec<usize> {
        self.inner.fusion_layer_indices.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(d_model={}, n_layers={}, image_size={}, patch_size={})",
            self.inner.d_model, self.inner.n_layers, self.inner.image_size, self.inner.patch_size
        )
    }
}

/// The full model, in 32-bit precision.
#[pyclass(name = "Model", module = "emma")]
struct PyModel {
    inner: EmmaModel<f32>,
}

impl PyModel {
    fn image(&self, pixels: Vec<f32>) -> PyResult<Tensor<f32>> {
        let s = self.inner.cfg.image_size;
        Tensor::new(vec![self.inner.cfg.channels, s, s], pixels).map_err(err)
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            inner: EmmaModel::new(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    #[getter]
    fn has_alignment_heads(&self) -> bool {
        self.inner.decoder.is_some()
    }

    fn strip_alignment_heads(&mut self) {
        self.inner.strip_alignment_heads();
    }

    /// Frozen encoder features, flat `K × d_vision`.
    fn encode_image(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let img = self.image(pixels)?;
        Ok(self.inner.encode_image(&img).map_err(err)?.into_data())
    }

    /// Logits over every position of `[visual; BOS caption EOS]`, flat
    /// `(K + L) × vocab`.
    fn text_logits(&self, pixels: Vec<f32>, caption: &str) -> PyResult<Vec<f32>> {
        let img = self.image(pixels)?;
        let features = self.inner.encode_image(&img).map_err(err)?;
        let ids = tokenizer::encode(caption).map_err(err)?;
        Ok(self.inner.text_logits(&features, &ids).map_err(err)?.into_data())
    }

    /// Loss parts for one example: `text`, `pixel` (absent without pixel
    /// alignment) and `total`.
    fn losses<'py>(&self, py: Python<'py>, pixels: Vec<f32>, caption: &str) -> PyResult<Bound<'py, PyDict>> {
        let img = self.image(pixels)?;
        let ids = tokenizer::encode(caption).map_err(err)?;
        let ex = self.inner.example(img, ids).map_err(err)?;
        let mut g = Graph::no_grad();
        let out = self.inner.forward(&mut g, &ex).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("text", g.item(out.losses.text))?;
        d.set_item("pixel", out.losses.pixel.map(|p| g.item(p)))?;
        d.set_item("total", g.item(out.losses.total))?;
        Ok(d)
    }

    /// Greedy continuation of `prompt`; returns the generated text.
    #[pyo3(signature = (pixels, prompt = "", n_tokens = 96, forced = false))]
    fn generate(&self, pixels: Vec<f32>, prompt: &str, n_tokens: usize, forced: bool) -> PyResult<String> {
        let img = self.image(pixels)?;
        let features = self.inner.encode_image(&img).map_err(err)?;
        let stop = if forced { StopRule::Forced } else { StopRule::AtEos };
        let out = bench::generate(
            &self.inner,
            &features,
            &tokenizer::encode_prompt(prompt),
            n_tokens,
            stop,
        )
        .map_err(err)?;
        Ok(tokenizer::decode(&out.tokens))
    }

    /// L2 norm of each visual token's hidden state at every fusion depth
    /// and the final depth, as `{depth: [norms]}`.
    fn activation_norms(&self, pixels: Vec<f32>, prompt: &str) -> PyResult<Vec<(usize, Vec<f64>)>> {
        let img = self.image(pixels)?;
        let maps = bench::activation_heatmaps(&self.inner, &img, prompt).map_err(err)?;
        Ok(maps.into_iter().map(|m| (m.depth, m.norms)).collect())
    }

    /// Latency protocol over forced generations; returns the report fields.
    #[pyo3(signature = (pixels, n_tokens = 256, repeats = 200))]
    fn latency<'py>(
        &self,
        py: Python<'py>,
        pixels: Vec<f32>,
        n_tokens: usize,
        repeats: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let img = self.image(pixels)?;
        let features = self.inner.encode_image(&img).map_err(err)?;
        let prompt = tokenizer::encode_prompt(bench::latency::DEFAULT_PROMPT);
        let r = bench::latency_bench(&self.inner, &features, &prompt, n_tokens, repeats).map_err(err)?;
        report_dict(py, &r)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &bench::LatencyReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("t_overall", r.t_overall)?;
    d.set_item("repeats", r.repeats)?;
    d.set_item("n_tokens", r.n_tokens)?;
    d.set_item("t_avg", r.t_avg)?;
    d.set_item("n_avg", r.n_avg)?;
    for (p, t) in &r.per_token {
        d.set_item(format!("per_token_{p}"), t)?;
    }
    Ok(d)
}

/// `T_avg` and `N_avg` from a measured total time.
#[pyfunction]
fn latency_report<'py>(
    py: Python<'py>,
    t_overall: f64,
    repeats: usize,
    n_tokens: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let r = bench::LatencyReport::from_timing(t_overall, repeats, n_tokens).map_err(err)?;
    report_dict(py, &r)
}

/// Synthetic `(pixels, caption)` pairs.
#[pyfunction]
#[pyo3(signature = (seed, n, image_size = 32))]
fn make_dataset(seed: u64, n: usize, image_size: usize) -> PyResult<Vec<(Vec<f32>, String)>> {
    let data = training::make_dataset::<f32>(seed, n, image_size).map_err(err)?;
    Ok(data.into_iter().map(|s| (s.image.into_data(), s.caption)).collect())
}

/// Parses a caption into `(color, shape, row, col)` tuples.
#[pyfunction]
fn parse_caption(caption: &str) -> PyResult<Vec<(String, String, usize, usize)>> {
    let scene = training::parse_caption(caption).map_err(err)?;
    Ok(scene
        .objects
        .iter()
        .map(|o| (o.color.name().to_owned(), o.shape.name().to_owned(), o.row, o.col))
        .collect())
}

/// Zero-order-hold discretisation of a diagonal system: `(A_bar, B_bar)`.
#[pyfunction]
fn discretize_zoh(a: Vec<f64>, b: Vec<f64>, delta: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let n = a.len();
    let sys = LtiSystem::new(a, b, vec![1.0; n], delta).map_err(err)?;
    let d = discretize(&sys).map_err(err)?;
    Ok((d.a_bar, d.b_bar))
}

#[pyfunction]
fn lr_at(step: usize, total: usize, peak: f64, warmup_ratio: f64) -> f64 {
    training::lr_at(step, total, peak, warmup_ratio)
}

/// Trains from a TOML run config; returns the model and the metrics CSV.
#[pyfunction]
#[pyo3(signature = (config_toml = ""))]
fn train(py: Python<'_>, config_toml: &str) -> PyResult<(PyModel, String)> {
    let run = RunConfig::from_toml(config_toml).map_err(err)?;
    let (model, log) = py.detach(|| training::train_run::<f32>(&run)).map_err(err)?;
    Ok((PyModel { inner: model }, log.to_csv()))
}

/// Runs the invariant suite: `[(name, passed, detail)]`.
#[pyfunction]
fn selftest(py: Python<'_>) -> Vec<(String, bool, String)> {
    py.detach(bench::run_selftest)
        .into_iter()
        .map(|c| (c.name.to_owned(), c.passed, c.detail))
        .collect()
}

#[pymodule]
fn emma(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(latency_report, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(parse_caption, m)?)?;
    m.add_function(wrap_pyfunction!(discretize_zoh, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add("BOS", tokenizer::BOS)?;
    m.add("EOS", tokenizer::EOS)?;
    Ok(())
}
