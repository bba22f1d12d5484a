//! Python module `mrla`: tensors, layer-attention forms, cost counting,
//! oracle suites and the toy model.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use mrla_core::attention::{
    kernel_rla_direct, kernel_rla_step, kernel_rla_weights, mh_base_step, mh_direct, mh_light_step,
    FeatureMap, HeadConfig, LayerTriple, LightState, RecurrentKV,
};
use mrla_core::blocks::{
    arch_cost, block_cost_count, block_param_count, eca_kernel_size, ArchSpec, AttnMode, BlockOptions,
    BlockShape,
};
use mrla_core::model::{build_model, config_dataset, train, MiniModel, TrainConfig};
use mrla_core::verify::{
    attn_score_matrix, complexity_suite, equivalence_suite, gradient_suite, query_cosine_stats,
    EquivalenceOptions,
};
use mrla_core::{DType, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::DegenerateNormalization(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mrla_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Serializes through JSON into plain Python dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse_mode(mode: &str) -> PyResult<AttnMode> {
    match mode {
        "base" => Ok(AttnMode::Base),
        "light" => Ok(AttnMode::Light),
        other => Err(PyValueError::new_err(format!("mode must be 'base' or 'light', got {other:?}"))),
    }
}

fn parse_phi(phi: &str) -> PyResult<FeatureMap> {
    match phi {
        "identity" => Ok(FeatureMap::Identity),
        "elu-plus-one" | "elu_plus_one" => Ok(FeatureMap::EluPlusOne),
        other => Err(PyValueError::new_err(format!(
            "phi must be 'identity' or 'elu-plus-one', got {other:?}"
        ))),
    }
}

fn parse_dtype(dtype: &str) -> PyResult<DType> {
    match dtype {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(PyValueError::new_err(format!("dtype must be 'f32' or 'f64', got {other:?}"))),
    }
}

#[pyclass(name = "Tensor", unsendable)]
struct PyTensor {
    inner: mrla_core::Tensor,
}

impl From<mrla_core::Tensor> for PyTensor {
    fn from(inner: mrla_core::Tensor) -> Self {
        PyTensor { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, dtype = "f64", requires_grad = false))]
    fn new(data: Vec<f64>, shape: Vec<usize>, dtype: &str, requires_grad: bool) -> PyResult<Self> {
        let dtype = parse_dtype(dtype)?;
        let t = if requires_grad {
            mrla_core::Tensor::param(data, &shape, dtype)
        } else {
            mrla_core::Tensor::from_vec_dtype(data, &shape, dtype)
        };
        Ok(t.py()?.into())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        match self.inner.dtype() {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    /// Accumulated gradient, or `None` before `backward`.
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().py()
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.add(&other.inner).py()?.into())
    }

    fn __sub__(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.sub(&other.inner).py()?.into())
    }

    fn __mul__(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.mul(&other.inner).py()?.into())
    }

    fn __matmul__(&self, other: &PyTensor) -> PyResult<Self> {
        Ok(self.inner.matmul(&other.inner).py()?.into())
    }

    fn sum(&self) -> Self {
        self.inner.sum().into()
    }

    fn sigmoid(&self) -> Self {
        self.inner.sigmoid().into()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.reshape(&shape).py()?.into())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, dtype={})", self.inner.shape(), self.dtype())
    }
}

fn triples(qs: &[Vec<f64>], ks: &[Vec<f64>], vs: &[Vec<f64>]) -> PyResult<Vec<LayerTriple>> {
    if qs.len() != ks.len() || qs.len() != vs.len() {
        return Err(PyValueError::new_err(format!(
            "need one query, key and value per layer, got {}, {}, {}",
            qs.len(),
            ks.len(),
            vs.len()
        )));
    }
    if qs.is_empty() {
        return Err(PyValueError::new_err("need at least one layer"));
    }
    qs.iter()
        .zip(ks)
        .zip(vs)
        .map(|((q, k), v)| LayerTriple::from_slices(q, k, v).py())
        .collect()
}

/// Direct multi-head layer attention: output of the last layer.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, heads = 1))]
fn layer_attention(qs: Vec<Vec<f64>>, ks: Vec<Vec<f64>>, vs: Vec<Vec<f64>>, heads: usize) -> PyResult<Vec<f64>> {
    let ts = triples(&qs, &ks, &vs)?;
    let cfg = HeadConfig::new(heads, ts[0].d_k() / heads.max(1)).py()?;
    Ok(mh_direct(&ts, &cfg).py()?.to_vec())
}

/// Recurrent MRLA-base: output of every layer.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, heads = 1))]
fn mrla_base(qs: Vec<Vec<f64>>, ks: Vec<Vec<f64>>, vs: Vec<Vec<f64>>, heads: usize) -> PyResult<Vec<Vec<f64>>> {
    let ts = triples(&qs, &ks, &vs)?;
    let cfg = HeadConfig::new(heads, ts[0].d_k() / heads.max(1)).py()?;
    let mut state: Option<RecurrentKV> = None;
    let mut outs = Vec::with_capacity(ts.len());
    for t in &ts {
        let (o, kv) = mh_base_step(state.as_ref(), t, &cfg).py()?;
        outs.push(o.to_vec());
        state = Some(kv);
    }
    Ok(outs)
}

/// Recurrent MRLA-light: `lambdas[t]` scales the previous output at layer
/// `t`; `lambdas[0]` is ignored.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, lambdas, heads = 1))]
fn mrla_light(
    qs: Vec<Vec<f64>>,
    ks: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    lambdas: Vec<Vec<f64>>,
    heads: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let ts = triples(&qs, &ks, &vs)?;
    if lambdas.len() != ts.len() {
        return Err(PyValueError::new_err("need one lambda vector per layer"));
    }
    let cfg = HeadConfig::new(heads, ts[0].d_k() / heads.max(1)).py()?;
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(ts.len());
    let mut prev: Option<mrla_core::Tensor> = None;
    for (t, lam) in ts.iter().zip(&lambdas) {
        let state = match prev {
            None => None,
            Some(o) => Some(LightState::new(o, mrla_core::Tensor::row(lam).py()?).py()?),
        };
        let o = mh_light_step(state.as_ref(), t, &cfg).py()?;
        outs.push(o.to_vec());
        prev = Some(o);
    }
    Ok(outs)
}

/// Kernel-linearized recurrent attention: output of every layer.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, phi = "elu-plus-one"))]
fn kernel_rla(qs: Vec<Vec<f64>>, ks: Vec<Vec<f64>>, vs: Vec<Vec<f64>>, phi: &str) -> PyResult<Vec<Vec<f64>>> {
    let phi = parse_phi(phi)?;
    let ts = triples(&qs, &ks, &vs)?;
    let mut state = None;
    let mut outs = Vec::with_capacity(ts.len());
    for t in &ts {
        let (o, next) = kernel_rla_step(state.as_ref(), t, phi).py()?;
        outs.push(o.to_vec());
        state = Some(next);
    }
    Ok(outs)
}

/// Kernel-normalized attention of the last layer, computed directly.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, phi = "elu-plus-one"))]
fn kernel_attention(qs: Vec<Vec<f64>>, ks: Vec<Vec<f64>>, vs: Vec<Vec<f64>>, phi: &str) -> PyResult<Vec<f64>> {
    let ts = triples(&qs, &ks, &vs)?;
    Ok(kernel_rla_direct(&ts, parse_phi(phi)?).py()?.to_vec())
}

/// Normalized weights of the last layer's query over all layers.
#[pyfunction]
#[pyo3(signature = (qs, ks, vs, phi = "elu-plus-one"))]
fn kernel_weights(qs: Vec<Vec<f64>>, ks: Vec<Vec<f64>>, vs: Vec<Vec<f64>>, phi: &str) -> PyResult<Vec<f64>> {
    let ts = triples(&qs, &ks, &vs)?;
    kernel_rla_weights(&ts, parse_phi(phi)?).py()
}

#[pyfunction(name = "eca_kernel_size")]
fn py_eca_kernel_size(channels: usize) -> usize {
    eca_kernel_size(channels)
}

#[pyfunction(name = "block_param_count")]
#[pyo3(signature = (channels, mode = "light", value_conv = true, fixed_lambda = false))]
fn py_block_param_count(channels: usize, mode: &str, value_conv: bool, fixed_lambda: bool) -> PyResult<usize> {
    let opts = BlockOptions { value_conv, fixed_lambda };
    Ok(block_param_count(channels, eca_kernel_size(channels), parse_mode(mode)?, opts))
}

/// `{macs, score_evals, state_values}` of the block at depth `t`.
#[pyfunction]
#[pyo3(signature = (channels, height, width, d_k, mode, t))]
fn block_cost<'py>(
    py: Python<'py>,
    channels: usize,
    height: usize,
    width: usize,
    d_k: usize,
    mode: &str,
    t: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let shape = BlockShape { channels, height, width, d_k };
    to_py(py, &block_cost_count(&shape, parse_mode(mode)?, t).py()?)
}

/// Parameter and MAC totals for the ResNet-50 stage layout.
#[pyfunction]
#[pyo3(signature = (mode = "light"))]
fn resnet50_cost<'py>(py: Python<'py>, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &arch_cost(&ArchSpec::resnet50(), parse_mode(mode)?, BlockOptions::default()).py()?)
}

/// Runs one oracle suite (`equivalence`, `gradients` or `complexity`).
#[pyfunction]
#[pyo3(signature = (suite, seeds = 50))]
fn verify<'py>(py: Python<'py>, suite: &str, seeds: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = match suite {
        "equivalence" => equivalence_suite(&EquivalenceOptions {
            seeds,
            ..Default::default()
        }),
        "gradients" => gradient_suite(seeds),
        "complexity" => complexity_suite(),
        other => return Err(PyValueError::new_err(format!("unknown suite {other:?}"))),
    };
    to_py(py, &report)
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: MiniModel,
}

#[pymethods]
impl PyModel {
    /// Builds a fresh model from `key = value` config text.
    #[new]
    #[pyo3(signature = (config = ""))]
    fn new(config: &str) -> PyResult<Self> {
        let cfg = TrainConfig::parse(config).py()?;
        Ok(PyModel {
            inner: build_model(&cfg).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: MiniModel::load(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).py()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_text()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn mrla_params(&self) -> usize {
        self.inner.mrla_param_count()
    }

    /// Trains on the config's synthetic dataset; returns per-epoch mean
    /// losses and accuracies.
    fn train<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let cfg = self.inner.config.clone();
        let data = config_dataset(&cfg).py()?;
        let run = train(&mut self.inner, &data, &cfg).py()?;
        let losses: Vec<f64> = run.epochs.iter().map(|e| e.mean_loss).collect();
        to_py(
            py,
            &serde_json::json!({ "epoch_mean_loss": losses, "eval_accuracy": run.eval_accuracy }),
        )
    }

    /// Score matrix `cells[head][t][s]` of one stage for dataset sample
    /// `sample`; `None` above the diagonal.
    #[pyo3(signature = (stage = 0, sample = 0))]
    fn attn_scores(&self, stage: usize, sample: usize) -> PyResult<Vec<Vec<Vec<Option<f64>>>>> {
        let data = config_dataset(&self.inner.config).py()?;
        let (x, _) = data
            .samples
            .get(sample)
            .ok_or_else(|| PyValueError::new_err(format!("sample {sample} out of range")))?;
        Ok(attn_score_matrix(&self.inner, stage, x).py()?.cells)
    }

    /// `|cos|` between consecutive blocks' per-head queries over the dataset.
    fn query_cosines(&self) -> PyResult<Vec<f64>> {
        let data = config_dataset(&self.inner.config).py()?;
        Ok(query_cosine_stats(&self.inner, &data, 1).py()?.values)
    }
}

#[pymodule]
fn mrla(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(layer_attention, m)?)?;
    m.add_function(wrap_pyfunction!(mrla_base, m)?)?;
    m.add_function(wrap_pyfunction!(mrla_light, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_rla, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_attention, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_weights, m)?)?;
    m.add_function(wrap_pyfunction!(py_eca_kernel_size, m)?)?;
    m.add_function(wrap_pyfunction!(py_block_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(block_cost, m)?)?;
    m.add_function(wrap_pyfunction!(resnet50_cost, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
