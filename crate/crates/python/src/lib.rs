//! Python bindings: configs, single runs, sweeps, datasets and the
//! structure-matrix math.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use structguard::anchor::{AnchorSet, AnchorSource};
use structguard::datakit::{gen_gaussian_clusters, save_dataset_csv, LabeledDataset};
use structguard::diffcore::Tensor;
use structguard::harness::{self, ExperimentConfig, RunReport, SweepResult};
use structguard::structloss::{self, AlignAxis, AlignVariant, Provenance, StructureMatrix};
use structguard::Error;

create_exception!(structguard_py, StructguardError, PyException);
create_exception!(structguard_py, ConfigError, StructguardError);
create_exception!(structguard_py, DivergenceError, StructguardError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config { .. } => ConfigError::new_err(e.to_string()),
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        other => StructguardError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_axis(axis: &str) -> PyResult<AlignAxis> {
    match axis {
        "row" | "per_probe_row" => Ok(AlignAxis::PerProbeRow),
        "column" | "per_anchor_column" => Ok(AlignAxis::PerAnchorColumn),
        _ => Err(ConfigError::new_err(format!("unknown axis `{axis}`"))),
    }
}

fn parse_variant(name: &str) -> PyResult<AlignVariant> {
    AlignVariant::ALL
        .into_iter()
        .find(|v| v.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| ConfigError::new_err(format!("unknown variant `{name}`")))
}

#[pyclass(name = "ExperimentConfig", module = "structguard_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// The reference fixture config bundled with the project.
    #[staticmethod]
    fn default() -> PyResult<Self> {
        Self::from_json(include_str!("../../../configs/default.json"))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_json_str(text).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = ExperimentConfig::load(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    /// A copy with a JSON patch merged in, e.g. `'{"unlearn": {"steps": 10}}'`.
    fn patched(&self, patch: &str) -> PyResult<Self> {
        let v: serde_json::Value = serde_json::from_str(patch)
            .map_err(|e| ConfigError::new_err(format!("patch is not JSON: {e}")))?;
        let inner = self.inner.patched(&v).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.unlearn.method.name()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(method={}, seed={}, k={})",
            self.inner.unlearn.method.name(),
            self.inner.seed,
            self.inner.data.k
        )
    }
}

#[pyclass(name = "RunReport", module = "structguard_py", frozen)]
struct PyReport {
    inner: RunReport,
}

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunReport::load(path).map_err(py_err)?,
        })
    }

    #[getter]
    fn a_test(&self) -> f64 {
        self.inner.a_test()
    }

    #[getter]
    fn a_r(&self) -> f64 {
        self.inner.a_r()
    }

    #[getter]
    fn a_f(&self) -> f64 {
        self.inner.a_f()
    }

    #[getter]
    fn deletion_score(&self) -> f64 {
        self.inner.deletion_score
    }

    #[getter]
    fn gap(&self) -> f64 {
        self.inner.gap()
    }

    #[getter]
    fn mean_collapse(&self) -> f64 {
        self.inner.collapse.mean
    }

    #[getter]
    fn collapse_trajectory(&self) -> Vec<f64> {
        self.inner.collapse.trajectory.clone()
    }

    #[getter]
    fn consistency_median(&self) -> f64 {
        self.inner.consistency.median
    }

    #[getter]
    fn confusion(&self) -> Vec<Vec<usize>> {
        self.inner.confusion.clone()
    }

    #[getter]
    fn steps_executed(&self) -> usize {
        self.inner.run.steps_executed
    }

    #[getter]
    fn unlearning_reads(&self) -> usize {
        self.inner.access.unlearning_reads
    }

    fn to_json(&self, with_timing: Option<bool>) -> String {
        if with_timing.unwrap_or(true) {
            self.inner.to_json()
        } else {
            self.inner.to_json_without_timing()
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport(method={}, A_test={:.2}, A_r={:.2}, A_f={:.2})",
            self.inner.run.method.name(),
            self.inner.a_test(),
            self.inner.a_r(),
            self.inner.a_f()
        )
    }
}

#[pyclass(name = "SweepResult", module = "structguard_py", frozen)]
struct PySweep {
    inner: SweepResult,
}

#[pymethods]
impl PySweep {
    fn table_csv(&self) -> String {
        self.inner.table_csv()
    }

    fn scatter_csv(&self) -> String {
        self.inner.scatter_csv()
    }

    /// One dict per cell: arm, k, seed and either `report` or `error`.
    fn cells<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .cells
            .iter()
            .map(|c| {
                let d = PyDict::new(py);
                d.set_item("arm", &c.arm)?;
                d.set_item("k", c.k)?;
                d.set_item("seed", c.seed)?;
                match &c.outcome {
                    Ok(out) => d.set_item(
                        "report",
                        PyReport {
                            inner: out.report.clone(),
                        },
                    )?,
                    Err(e) => d.set_item("error", e)?,
                }
                Ok(d)
            })
            .collect()
    }

    fn write_to_dir(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_to_dir(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.cells.len()
    }
}

#[pyclass(name = "Dataset", module = "structguard_py", frozen)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.inputs())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.class_count()
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        save_dataset_csv(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Runs the full pipeline for one config. The GIL is released meanwhile.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: &PyConfig) -> PyResult<PyReport> {
    let cfg = config.inner.clone();
    let out = py.detach(move || harness::run_experiment(&cfg)).map_err(py_err)?;
    Ok(PyReport { inner: out.report })
}

/// Runs the config's arm × k × seed grid. Failed cells are returned, not raised.
#[pyfunction]
fn sweep(py: Python<'_>, config: &PyConfig) -> PyResult<PySweep> {
    let cfg = config.inner.clone();
    let inner = py.detach(move || harness::sweep(&cfg)).map_err(py_err)?;
    Ok(PySweep { inner })
}

#[pyfunction]
fn gen_data(classes: usize, per_class: usize, d_in: usize, spread: f64, seed: u64) -> PyResult<PyDataset> {
    let inner = gen_gaussian_clusters(classes, per_class, d_in, spread, seed).map_err(py_err)?;
    Ok(PyDataset { inner })
}

/// Structure matrix of feature rows against anchors (anchors are
/// normalized first).
#[pyfunction]
fn structure(features: Vec<Vec<f64>>, anchors: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let a = AnchorSet::from_rows(&anchors, AnchorSource::File).map_err(py_err)?;
    let s = structloss::compute_structure(&matrix(&features)?, &a, Provenance::Ori).map_err(py_err)?;
    Ok(rows_of(s.matrix()))
}

#[pyfunction]
#[pyo3(signature = (s_ori, s_unl, axis = "row", variant = "cs"))]
fn align_loss(s_ori: Vec<Vec<f64>>, s_unl: Vec<Vec<f64>>, axis: &str, variant: &str) -> PyResult<f64> {
    let a = StructureMatrix::new(matrix(&s_ori)?, Provenance::Ori);
    let b = StructureMatrix::new(matrix(&s_unl)?, Provenance::Unl);
    match parse_variant(variant)? {
        AlignVariant::Cs => structloss::align_loss(&a, &b, parse_axis(axis)?),
        other => structloss::align_loss_variant(other, &a, &b),
    }
    .map_err(py_err)
}

#[pyfunction]
fn structural_collapse(s_ori: Vec<Vec<f64>>, s_t: Vec<Vec<f64>>) -> PyResult<f64> {
    let a = StructureMatrix::new(matrix(&s_ori)?, Provenance::Ori);
    let b = StructureMatrix::new(matrix(&s_t)?, Provenance::Unl);
    structloss::structural_collapse(&a, &b).map_err(py_err)
}

#[pymodule]
fn structguard_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("StructguardError", py.get_type::<StructguardError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DivergenceError", py.get_type::<DivergenceError>())?;
    m.add("SCHEMA_VERSION", harness::SCHEMA_VERSION)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PySweep>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(structure, m)?)?;
    m.add_function(wrap_pyfunction!(align_loss, m)?)?;
    m.add_function(wrap_pyfunction!(structural_collapse, m)?)?;
    Ok(())
}
