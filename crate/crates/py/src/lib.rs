//! Python bindings: dataset generation, training, evaluation and the
//! diagnostic harnesses of the `stambridge` crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stambridge::autodiff::Graph;
use stambridge::cli::load_config;
use stambridge::data::{self, DType, Split, SynthConfig};
use stambridge::eval::{embed, zero_shot_retrieval};
use stambridge::gradcheck::{gradcheck as run_gradcheck, GradCheckConfig};
use stambridge::objectives::info_nce_symmetric;
use stambridge::ringing::{ringing_compare, Transient};
use stambridge::train::{fit, Checkpoint as CoreCheckpoint};
use stambridge::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_usage() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(&shape, data).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

/// Loaded dataset directory.
#[pyclass(module = "stambridge_py")]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::Dataset::load(&path).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.manifest.n_classes
    }

    #[getter]
    fn test_classes(&self) -> Vec<usize> {
        self.inner.manifest.test_classes.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// `(channels, time)` of one trial.
    #[getter]
    fn trial_shape(&self) -> (usize, usize) {
        (self.inner.manifest.channels, self.inner.manifest.time)
    }

    /// Trial indices of `"train"` or `"test"`.
    fn split(&self, name: &str) -> PyResult<Vec<usize>> {
        let s = match name {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(self.inner.split_indices(s))
    }

    /// One trial as a list of channel rows.
    fn trial(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let b = self.inner.batch(&[index]).map_err(py_err)?;
        Ok(rows(&b.x))
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(module = "stambridge_py")]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreCheckpoint::load(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.meta.checkpoint_id.clone()
    }

    #[getter]
    fn precision(&self) -> String {
        self.inner.meta.precision.clone()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_text()
    }

    #[getter]
    fn temperature(&self) -> f64 {
        let m = &self.inner.model;
        m.temperature.tau(&m.store)
    }

    /// Unit-norm embeddings of the given trials.
    fn embed(&self, dataset: &Dataset, indices: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        let z = embed(&self.inner.model, &dataset.inner, &indices, 1).map_err(py_err)?;
        Ok(rows(&z))
    }

    /// Zero-shot retrieval on the held-out classes.
    #[pyo3(signature = (dataset, k_way = 20, seed = 7))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &Dataset,
        k_way: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = zero_shot_retrieval(
            &self.inner.model,
            &dataset.inner,
            k_way,
            seed,
            &self.inner.meta.checkpoint_id,
        )
        .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("k_way", r.k_way)?;
        d.set_item("n_queries", r.n_queries)?;
        d.set_item("top1", r.top1)?;
        d.set_item("top5", r.top5)?;
        d.set_item("ranks", r.ranks)?;
        d.set_item("checkpoint_id", r.checkpoint_id)?;
        Ok(d)
    }
}

/// Writes a synthetic dataset and returns the number of trials.
#[pyfunction]
#[pyo3(signature = (out, classes = 20, test_classes = 20, trials = 50, subjects = 1,
                    channels = 63, time = 250, dim = 64, snr_db = 0.0, seed = 7))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out: PathBuf,
    classes: usize,
    test_classes: usize,
    trials: usize,
    subjects: usize,
    channels: usize,
    time: usize,
    dim: usize,
    snr_db: f64,
    seed: u64,
) -> PyResult<usize> {
    let cfg = SynthConfig {
        train_classes: classes,
        test_classes,
        trials_per_class: trials,
        n_subjects: subjects,
        channels,
        time,
        dim,
        snr_db,
        seed,
        ..SynthConfig::default()
    };
    let m = data::synth_generate(&cfg, &out).map_err(py_err)?;
    Ok(m.n_trials())
}

/// Trains with defaults, then `config` file, then `overrides`; returns the
/// checkpoint id and the per-epoch mean of the main loss.
#[pyfunction]
#[pyo3(signature = (data, ckpt, config = None, overrides = None))]
fn train(
    data: PathBuf,
    ckpt: PathBuf,
    config: Option<PathBuf>,
    overrides: Option<Vec<(String, String)>>,
) -> PyResult<(String, Vec<f64>)> {
    let mut pairs: Vec<(&str, String)> = vec![
        ("data", data.display().to_string()),
        ("ckpt", ckpt.display().to_string()),
    ];
    let extra = overrides.unwrap_or_default();
    pairs.extend(extra.iter().map(|(k, v)| (k.as_str(), v.clone())));
    let cfg = load_config(config.as_deref(), &pairs).map_err(py_err)?;
    let dataset = data::Dataset::load(&cfg.data).map_err(py_err)?;
    let s = fit(&cfg, &dataset).map_err(py_err)?;
    Ok((s.checkpoint_id, s.epoch_main))
}

/// Finite-difference gradient check. Returns `(passed, offenders,
/// worst relative error)`.
#[pyfunction]
#[pyo3(signature = (seed = 11, fault = None))]
fn gradcheck(seed: u64, fault: Option<String>) -> PyResult<(bool, Vec<String>, f64)> {
    let fault = match fault {
        None => None,
        Some(op) => Some((
            stambridge::autodiff::op_name(&op)
                .ok_or_else(|| PyValueError::new_err(format!("unknown op `{op}`")))?,
            1.01,
        )),
    };
    let r = run_gradcheck(&GradCheckConfig {
        seed,
        fault,
        ..GradCheckConfig::default()
    })
    .map_err(py_err)?;
    let worst = r.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok((r.passed, r.offenders, worst))
}

/// Pre-onset energies `(hard, soft)` and the total hard energy for an
/// impulse at `pos`.
#[pyfunction]
#[pyo3(signature = (time = 250, pos = 125, keep = 0.5))]
fn ringing(time: usize, pos: usize, keep: f64) -> PyResult<(f64, f64, f64)> {
    let m = ringing_compare(time, pos, keep, Transient::Impulse).map_err(py_err)?;
    Ok((
        m.pre_onset_energy_hard,
        m.pre_onset_energy_soft,
        m.total_energy_hard,
    ))
}

/// Symmetric InfoNCE of two row-normalized matrices given as lists of rows.
#[pyfunction]
fn info_nce(z: Vec<Vec<f64>>, v: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let to_tensor = |m: Vec<Vec<f64>>| {
        let shape = vec![m.len(), m.first().map_or(0, Vec::len)];
        tensor(shape, m.concat())
    };
    let g = Graph::new();
    let l = info_nce_symmetric(
        g.constant(to_tensor(z)?),
        g.constant(to_tensor(v)?),
        g.constant(Tensor::scalar(1.0 / tau)),
    )
    .map_err(py_err)?;
    Ok(l.value().item())
}

/// Reads a tensor file: `(shape, flat values, dtype)`.
#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<(Vec<usize>, Vec<f64>, String)> {
    let (t, d) = data::read_tensor(&path).map_err(py_err)?;
    Ok((t.shape().to_vec(), t.data().to_vec(), d.to_string()))
}

#[pyfunction]
#[pyo3(signature = (path, shape, values, dtype = "f64"))]
fn write_tensor(path: PathBuf, shape: Vec<usize>, values: Vec<f64>, dtype: &str) -> PyResult<()> {
    let d: DType = dtype.parse().map_err(py_err)?;
    data::write_tensor(&path, &tensor(shape, values)?, d).map_err(py_err)
}

#[pymodule]
fn stambridge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", stambridge::cli::VERSION)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(ringing, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    Ok(())
}
