//! Python bindings. Matrices cross the boundary as lists of rows of floats.

use std::collections::BTreeMap;

use pit_core::exec::{run_sparse_matmul, run_sparse_reduce_sum, DenseTensor, Layout};
use pit_core::tiles::{profile, register_builtin_kernels, ProfileTable};
use pit_core::{kernel_selection, PitError, SelectionOptions};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: PitError) -> PyErr {
    match e {
        PitError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f32>>) -> PyResult<DenseTensor<f32>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix rows"));
    }
    DenseTensor::from_vec_2d(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn to_rows(t: &DenseTensor<f32>) -> Vec<Vec<f32>> {
    let t = t.to_layout(Layout::RowMajor);
    let cols = t.shape().get(1).copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f32]>::to_vec).collect()
}

/// A parsed tensor expression.
#[pyclass(name = "TensorExpr", frozen)]
struct PyExpr(pit_core::TensorExpr);

#[pymethods]
impl PyExpr {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        pit_core::parse_expr(text).map(PyExpr).map_err(err)
    }

    fn pit_axes(&self) -> Vec<String> {
        self.0.pit_axes().into_iter().collect()
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

#[pyclass(name = "SparsityAnnotation", frozen, from_py_object)]
#[derive(Clone)]
struct PyAnnotation(pit_core::SparsityAnnotation);

#[pymethods]
impl PyAnnotation {
    #[staticmethod]
    fn random(
        shape: [usize; 2],
        granularity: [usize; 2],
        zero_ratio: f64,
        seed: u64,
    ) -> PyResult<Self> {
        pit_core::SparsityAnnotation::random(&shape, &granularity, zero_ratio, seed)
            .map(PyAnnotation)
            .map_err(err)
    }

    #[staticmethod]
    fn from_mask(mask: Vec<Vec<f32>>, granularity: [usize; 2]) -> PyResult<Self> {
        let t = to_tensor(mask)?;
        let shape = t.shape().to_vec();
        pit_core::SparsityAnnotation::from_mask(t.data(), &shape, &granularity)
            .map(PyAnnotation)
            .map_err(err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        pit_core::SparsityAnnotation::from_text(text)
            .map(PyAnnotation)
            .map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn shape(&self) -> [usize; 2] {
        self.0.shape()
    }

    #[getter]
    fn granularity(&self) -> [usize; 2] {
        self.0.granularity()
    }

    fn sparsity_ratio(&self) -> f64 {
        self.0.sparsity_ratio()
    }

    /// Random values on the non-zero blocks, zeros elsewhere.
    fn random_matrix(&self, seed: u64) -> Vec<Vec<f32>> {
        to_rows(&DenseTensor::random_sparse(&self.0, seed))
    }
}

#[pyclass(name = "ProfileTable", frozen)]
struct PyProfile(ProfileTable);

#[pymethods]
impl PyProfile {
    /// Times every built-in tile kernel on this machine.
    #[staticmethod]
    #[pyo3(signature = (reps = 5, warmup = 1))]
    fn measure(reps: usize, warmup: usize) -> PyResult<Self> {
        profile(&register_builtin_kernels(), reps, warmup)
            .map(PyProfile)
            .map_err(err)
    }

    #[staticmethod]
    fn flop_proportional(seconds_per_flop: f64) -> PyResult<Self> {
        ProfileTable::flop_proportional(&register_builtin_kernels(), seconds_per_flop)
            .map(PyProfile)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        ProfileTable::load(path).map(PyProfile).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// `(impl_id, seconds)` pairs.
    fn entries(&self) -> Vec<(String, f64)> {
        self.0
            .entries()
            .iter()
            .map(|e| (e.desc.impl_id.clone(), e.cost))
            .collect()
    }
}

#[pyclass(name = "SparseKernelPlan", frozen)]
struct PyPlan(pit_core::SparseKernelPlan);

#[pymethods]
impl PyPlan {
    #[getter]
    fn pit_axis(&self) -> String {
        self.0.axis_label().to_string()
    }

    #[getter]
    fn micro_tile(&self) -> [usize; 2] {
        self.0.micro_tile
    }

    #[getter]
    fn tile(&self) -> Vec<usize> {
        self.0.tile.shape.clone()
    }

    #[getter]
    fn impl_id(&self) -> String {
        self.0.tile.impl_id.clone()
    }

    #[getter]
    fn estimated_cost(&self) -> f64 {
        self.0.estimated_cost
    }

    #[getter]
    fn col_major(&self) -> bool {
        self.0.sparse_layout == Layout::ColMajor
    }

    fn dump(&self) -> String {
        self.0.dump()
    }

    fn __str__(&self) -> String {
        self.0.dump()
    }

    /// `C = A @ B` with `A` sparse as described by `ann`.
    #[pyo3(signature = (a, b, ann, workers = 1))]
    fn matmul(
        &self,
        a: Vec<Vec<f32>>,
        b: Vec<Vec<f32>>,
        ann: &PyAnnotation,
        workers: usize,
    ) -> PyResult<Vec<Vec<f32>>> {
        let a = to_tensor(a)?.to_layout(self.0.sparse_layout);
        let b = to_tensor(b)?;
        let (c, _) = run_sparse_matmul(&self.0, &a, &b, &ann.0, workers).map_err(err)?;
        Ok(to_rows(&c))
    }

    /// Row sums of `A`.
    #[pyo3(signature = (a, ann, workers = 1))]
    fn reduce_sum(
        &self,
        a: Vec<Vec<f32>>,
        ann: &PyAnnotation,
        workers: usize,
    ) -> PyResult<Vec<f32>> {
        let a = to_tensor(a)?.to_layout(self.0.sparse_layout);
        let (c, _) = run_sparse_reduce_sum(&self.0, &a, &ann.0, workers).map_err(err)?;
        Ok(c.into_data())
    }
}

/// Picks the cheapest plan for `expr` over the sample annotations.
#[pyfunction]
#[pyo3(signature = (expr, extents, samples, profile, allow_dense = true))]
fn select(
    expr: &PyExpr,
    extents: BTreeMap<String, usize>,
    samples: Vec<PyAnnotation>,
    profile: &PyProfile,
    allow_dense: bool,
) -> PyResult<PyPlan> {
    let samples: Vec<_> = samples.into_iter().map(|s| s.0).collect();
    let opts = SelectionOptions {
        allow_dense,
        ..SelectionOptions::default()
    };
    kernel_selection(
        &expr.0,
        &extents,
        &samples,
        &register_builtin_kernels(),
        &profile.0,
        opts,
    )
    .map(|s| PyPlan(s.best))
    .map_err(err)
}

#[pymodule]
fn pit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PyAnnotation>()?;
    m.add_class::<PyProfile>()?;
    m.add_class::<PyPlan>()?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    Ok(())
}
