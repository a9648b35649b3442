//! Python module `bpinn`: networks, spline compilation, prior draws and the
//! experiment drivers. Experiment results are returned as JSON strings.

use std::cell::RefCell;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bpinn::compiler::{compile_spline_network, derive_gadgets, CompileOptions};
use bpinn::experiments::{packing_demo, rate_study, sample_posterior, RunConfig};
use bpinn::network::{forward_jet, ClipSpec, NetworkParams, Scratch};
use bpinn::pde::preset;
use bpinn::prior::{sample_prior, PriorConfig};
use bpinn::spline::{quasi_interpolant, SplineSpec};

fn err(e: bpinn::Error) -> PyErr {
    match e {
        bpinn::Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Sparse σ3 network with an output clip of scale `clip`.
#[pyclass(name = "Network", module = "bpinn")]
pub struct PyNetwork {
    params: NetworkParams,
    clip: ClipSpec,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (text, clip = 1.0))]
    fn from_json(text: &str, clip: f64) -> PyResult<Self> {
        Ok(PyNetwork {
            params: NetworkParams::from_json(text).map_err(err)?,
            clip: ClipSpec::new(clip),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.params.to_json().map_err(err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.params.arch.input_dim
    }

    #[getter]
    fn depth(&self) -> usize {
        self.params.arch.depth
    }

    #[getter]
    fn width(&self) -> usize {
        self.params.arch.width
    }

    #[getter]
    fn sparsity(&self) -> usize {
        self.params.sparsity()
    }

    #[getter]
    fn clip_scale(&self) -> f64 {
        self.clip.scale
    }

    /// Raw network output at `x`.
    fn raw(&self, x: Vec<f64>) -> PyResult<f64> {
        self.check(&x)?;
        Ok(self.params.evaluator().eval_jet(&x, &mut Scratch::default()).value)
    }

    /// `(value, gradient, row-major Hessian)` of the clipped output at `x`.
    fn jet(&self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>, Vec<f64>)> {
        let j = forward_jet(&self.params, &self.clip, &x).map_err(err)?;
        Ok((j.value, j.grad.to_vec(), j.hess.to_vec()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(d={}, L={}, W={}, S={}, B={})",
            self.params.arch.input_dim,
            self.params.arch.depth,
            self.params.arch.width,
            self.params.sparsity(),
            self.params.bound
        )
    }
}

impl PyNetwork {
    fn check(&self, x: &[f64]) -> PyResult<()> {
        if x.len() != self.params.arch.input_dim {
            return Err(PyValueError::new_err(format!(
                "expected {} coordinates, got {}",
                self.params.arch.input_dim,
                x.len()
            )));
        }
        Ok(())
    }
}

/// Compiles the order-`k` quasi-interpolant of `f` on `l` cells per axis.
#[pyfunction]
#[pyo3(signature = (f, k, l, d, clip = None))]
fn compile_spline(py: Python<'_>, f: Py<PyAny>, k: usize, l: usize, d: usize, clip: Option<f64>) -> PyResult<PyNetwork> {
    let spec = SplineSpec::new(k, l, d).map_err(err)?;
    let failure: RefCell<Option<PyErr>> = RefCell::new(None);
    let coeffs = quasi_interpolant(
        |x| match f.call1(py, (x.to_vec(),)).and_then(|v| v.extract::<f64>(py)) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        spec,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let gadgets = derive_gadgets().map_err(err)?;
    let net = compile_spline_network(&coeffs.map_err(err)?, &gadgets, &CompileOptions { clip_scale: clip }).map_err(err)?;
    Ok(PyNetwork {
        params: net.params,
        clip: net.clip,
    })
}

/// One prior draw on `[0,1]^d`.
#[pyfunction]
#[pyo3(signature = (d, seed, lambda_w = 1.0, lambda_s = 2.0, lambda_b = 1.0, depth = 3))]
fn prior_draw(d: usize, seed: u64, lambda_w: f64, lambda_s: f64, lambda_b: f64, depth: usize) -> PyResult<PyNetwork> {
    let cfg = PriorConfig {
        lambda_w,
        lambda_s,
        lambda_b,
        depth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PyNetwork {
        params: sample_prior(&cfg, d, &mut rng).map_err(err)?,
        clip: ClipSpec::new(1.0),
    })
}

/// `(name, printed, max scaled error, passed)` for each gadget identity.
#[pyfunction]
fn gadget_checks() -> PyResult<Vec<(String, bool, f64, bool)>> {
    Ok(derive_gadgets()
        .map_err(err)?
        .checks
        .into_iter()
        .map(|c| (c.name, c.printed, c.max_scaled_error, c.passed))
        .collect())
}

fn config(text: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(text).map_err(err)
}

/// Posterior summary and samples for a run config, as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn sample(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = config(config_json)?;
    let run = py.detach(|| sample_posterior(&cfg)).map_err(err)?;
    serde_json::to_string(&serde_json::json!({"summary": run.summary, "samples": run.samples})).map_err(json_err)
}

/// Rate-study rows, medians and slope, as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn run_rate_study(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = config(config_json)?;
    let study = py
        .detach(|| {
            let (problem, loss) = cfg.problem.problem_config().build()?;
            rate_study(&problem, &loss, &cfg.prior, &cfg.mcmc, &cfg.sieve, &cfg.problem.rate_study_config())
        })
        .map_err(err)?;
    serde_json::to_string(&study).map_err(json_err)
}

/// Packing separation and KL tables, as JSON.
#[pyfunction]
#[pyo3(signature = (config_json = "{}"))]
fn run_packing_demo(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = config(config_json)?;
    let demo = py
        .detach(|| {
            let problem = preset(&cfg.packing.preset)?;
            packing_demo(&cfg.packing, &problem)
        })
        .map_err(err)?;
    serde_json::to_string(&demo).map_err(json_err)
}

#[pymodule(name = "bpinn")]
fn bpinn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(compile_spline, m)?)?;
    m.add_function(wrap_pyfunction!(prior_draw, m)?)?;
    m.add_function(wrap_pyfunction!(gadget_checks, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(run_rate_study, m)?)?;
    m.add_function(wrap_pyfunction!(run_packing_demo, m)?)?;
    Ok(())
}
