//! Python bindings: the machine, the classifier, and the privacy pipeline.
//!
//! Data crosses the boundary as plain lists (rows of floats); labels may be
//! arbitrary integers and are remapped to contiguous class indices.

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use kahm::{
    fit_classifier, fit_dp_classifier, fit_kahm, load_classifier, membership_inference_score,
    privatize_matrix, save_classifier, ClassifierModel, DataMatrix, DpMode, KahmModel,
    LabeledDataset, PrivacySpec,
};

fn to_py_err(e: kahm::KahmError) -> PyErr {
    match e {
        kahm::KahmError::Io(io) => PyRuntimeError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<DataMatrix> {
    DataMatrix::from_rows(&rows).map_err(to_py_err)
}

fn dataset_from_rows(rows: Vec<Vec<f64>>, labels: Vec<i64>) -> PyResult<LabeledDataset> {
    if rows.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let data = matrix_from_rows(rows)?;
    let mut distinct: Vec<i64> = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let index: std::collections::BTreeMap<i64, usize> =
        distinct.iter().enumerate().map(|(i, &l)| (l, i + 1)).collect();
    let mapped: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    let names: Vec<String> = distinct.iter().map(|l| l.to_string()).collect();
    LabeledDataset::new(data, mapped, names).map_err(to_py_err)
}

fn rows_from_matrix(m: &DataMatrix) -> Vec<Vec<f64>> {
    (0..m.n_rows())
        .map(|i| m.row(i).iter().cloned().collect())
        .collect()
}

/// One fitted kernel affine hull machine.
#[pyclass(name = "Kahm")]
struct PyKahm {
    inner: KahmModel,
}

#[pymethods]
impl PyKahm {
    /// Fit on rows (list of equal-length float lists) with subspace dim n.
    #[new]
    fn new(rows: Vec<Vec<f64>>, n: usize) -> PyResult<Self> {
        let data = matrix_from_rows(rows)?;
        Ok(PyKahm { inner: fit_kahm(&data, n).map_err(to_py_err)? })
    }

    /// Image of a point: an affine combination of the training rows.
    fn evaluate(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let out = self
            .inner
            .evaluate(&DVector::from_vec(y))
            .map_err(to_py_err)?;
        Ok(out.iter().cloned().collect())
    }

    /// Euclidean distance between a point and its image.
    fn distance(&self, y: Vec<f64>) -> PyResult<f64> {
        self.inner.distance(&DVector::from_vec(y)).map_err(to_py_err)
    }

    #[getter]
    fn lambda_star(&self) -> f64 {
        self.inner.lambda_star()
    }

    /// (tight ratio bound, loose ratio bound, norm bound).
    fn bound_certificate(&self) -> (f64, f64, f64) {
        let c = self.inner.bound_certificate();
        (c.ratio_bound_tight, c.ratio_bound_loose, c.norm_bound)
    }
}

/// Distance-based classifier: one wide composition per class.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    inner: ClassifierModel,
}

#[pymethods]
impl PyClassifier {
    /// Train on plain data.
    #[staticmethod]
    #[pyo3(signature = (rows, labels, n, layers, seed=0))]
    fn train(
        rows: Vec<Vec<f64>>,
        labels: Vec<i64>,
        n: usize,
        layers: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let ds = dataset_from_rows(rows, labels)?;
        Ok(PyClassifier {
            inner: fit_classifier(&ds, n, layers, None, seed).map_err(to_py_err)?,
        })
    }

    /// Train on privatized ("noisy") or fabricated data.
    #[staticmethod]
    #[pyo3(signature = (rows, labels, n, layers, epsilon, delta=1e-5, d=2.0, mode="fabricated", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train_dp(
        rows: Vec<Vec<f64>>,
        labels: Vec<i64>,
        n: usize,
        layers: usize,
        epsilon: f64,
        delta: f64,
        d: f64,
        mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let ds = dataset_from_rows(rows, labels)?;
        let spec = PrivacySpec::new(epsilon, delta, d, seed).map_err(to_py_err)?;
        let dp_mode = match mode {
            "noisy" => DpMode::Noisy,
            "fabricated" => DpMode::Fabricated,
            other => {
                return Err(PyValueError::new_err(format!(
                    "mode must be 'noisy' or 'fabricated', got {other:?}"
                )))
            }
        };
        Ok(PyClassifier {
            inner: fit_dp_classifier(&ds, &spec, n, layers, dp_mode, seed).map_err(to_py_err)?,
        })
    }

    /// (label name, per-class distances) for one point.
    fn predict(&self, y: Vec<f64>) -> PyResult<(String, Vec<f64>)> {
        let (label, gammas) = self
            .inner
            .predict(&DVector::from_vec(y))
            .map_err(to_py_err)?;
        Ok((self.inner.class_names[label - 1].clone(), gammas))
    }

    /// Per-class matching scores in [e⁻¹, 1].
    fn matching_scores(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner
            .matching_scores(&DVector::from_vec(y))
            .map_err(to_py_err)
    }

    fn accuracy(&self, rows: Vec<Vec<f64>>, labels: Vec<i64>) -> PyResult<f64> {
        let ds = dataset_from_rows(rows, labels)?;
        if ds.class_names != self.inner.class_names {
            return Err(PyValueError::new_err(
                "label set does not match the classifier's classes",
            ));
        }
        self.inner.accuracy(&ds).map_err(to_py_err)
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.class_names.clone()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_classifier(&self.inner, path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyClassifier { inner: load_classifier(path).map_err(to_py_err)? })
    }
}

/// Add (ε,δ)-differentially-private noise to every entry.
#[pyfunction]
#[pyo3(signature = (rows, epsilon, delta=1e-5, d=2.0, seed=0))]
fn privatize(
    rows: Vec<Vec<f64>>,
    epsilon: f64,
    delta: f64,
    d: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let data = matrix_from_rows(rows)?;
    let spec = PrivacySpec::new(epsilon, delta, d, seed).map_err(to_py_err)?;
    Ok(rows_from_matrix(&privatize_matrix(&data, &spec).map_err(to_py_err)?))
}

/// Differentially private fabricated copy of the rows.
#[pyfunction]
#[pyo3(signature = (rows, n, epsilon, delta=1e-5, d=2.0, seed=0))]
fn fabricate(
    rows: Vec<Vec<f64>>,
    n: usize,
    epsilon: f64,
    delta: f64,
    d: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let data = matrix_from_rows(rows)?;
    let spec = PrivacySpec::new(epsilon, delta, d, seed).map_err(to_py_err)?;
    Ok(rows_from_matrix(&kahm::fabricate_big(&data, n, &spec).map_err(to_py_err)?))
}

/// L2 distance between two scalar-sample densities.
#[pyfunction]
#[pyo3(signature = (samples_a, samples_b, seed=0))]
fn lsdd(samples_a: Vec<f64>, samples_b: Vec<f64>, seed: u64) -> PyResult<f64> {
    kahm::lsdd(&samples_a, &samples_b, seed).map_err(to_py_err)
}

/// Membership-inference score of a classifier on a train/test split.
#[pyfunction]
#[pyo3(signature = (classifier, train_rows, train_labels, test_rows, test_labels, seed=0))]
fn mis_score(
    classifier: &PyClassifier,
    train_rows: Vec<Vec<f64>>,
    train_labels: Vec<i64>,
    test_rows: Vec<Vec<f64>>,
    test_labels: Vec<i64>,
    seed: u64,
) -> PyResult<f64> {
    let train = dataset_from_rows(train_rows, train_labels)?;
    let test = dataset_from_rows(test_rows, test_labels)?;
    Ok(membership_inference_score(&classifier.inner, &train, &test, seed)
        .map_err(to_py_err)?
        .mis)
}

#[pymodule]
fn kahm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKahm>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(privatize, m)?)?;
    m.add_function(wrap_pyfunction!(fabricate, m)?)?;
    m.add_function(wrap_pyfunction!(lsdd, m)?)?;
    m.add_function(wrap_pyfunction!(mis_score, m)?)?;
    Ok(())
}
