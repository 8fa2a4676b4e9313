//! Python bindings: Gaussian mean-shift sensors, the three detectors and the
//! Monte Carlo estimators. Estimates come back as `(mean, std_error)`.

use std::collections::BTreeMap;

use cusum_ac::experiment::{run_file, ExperimentFile};
use cusum_ac::montecarlo::DEFAULT_CAP;
use cusum_ac::{
    calibrate_threshold, estimate_arlfa, estimate_comm_rate, estimate_delay, gaussian_mean_shift,
    kl_divergence, optimize, CusumAcConfig, DelayConditioning, Detector, McEstimate, RateMode,
    SharedPair,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: cusum_ac::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `sensors` identical Gaussian sensors N(mu0, sigma^2) -> N(mu1, sigma^2).
#[pyclass(frozen)]
struct Network {
    pairs: Vec<SharedPair>,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (mu0 = 0.0, mu1 = 0.5, sigma = 1.0, sensors = 1))]
    fn new(mu0: f64, mu1: f64, sigma: f64, sensors: usize) -> PyResult<Self> {
        if sensors == 0 {
            return Err(PyValueError::new_err("sensors must be at least 1"));
        }
        let g = gaussian_mean_shift(mu0, mu1, sigma)
            .map_err(py_err)?
            .shared();
        Ok(Self {
            pairs: vec![g; sensors],
        })
    }

    #[getter]
    fn sensors(&self) -> usize {
        self.pairs.len()
    }

    /// Per-sensor K-L divergence D(f1 || f0).
    fn kl(&self) -> PyResult<f64> {
        Ok(kl_divergence(self.pairs[0].as_ref())
            .map_err(py_err)?
            .i_f1_f0)
    }

    /// Optimal send-rate-`epsilon` censoring rule as a dict.
    fn censoring(&self, epsilon: f64) -> PyResult<BTreeMap<&'static str, Option<f64>>> {
        let s = optimize(self.pairs[0].as_ref(), epsilon).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("rate", Some(s.rate)),
            ("nosend_x_lo", s.nosend_x_lo),
            ("nosend_x_hi", s.nosend_x_hi),
            ("llr_censored", Some(s.llr_censored)),
            ("post_kl", Some(s.post_kl)),
        ]))
    }
}

/// A detector: `cusum`, `cusum_ac` (needs `a1`, `eps1`) or `random_tx`
/// (needs `epsilon`).
#[pyclass(frozen, name = "Detector")]
struct PyDetector {
    inner: Detector,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (kind, network, a, a1 = None, eps1 = None, epsilon = None))]
    fn new(
        kind: &str,
        network: &Network,
        a: f64,
        a1: Option<f64>,
        eps1: Option<f64>,
        epsilon: Option<f64>,
    ) -> PyResult<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| PyValueError::new_err(format!("{kind} needs {name}")))
        };
        let inner = match kind {
            "cusum" => Detector::Cusum { a },
            "random_tx" => Detector::RandomTx {
                a,
                epsilon: need(epsilon, "epsilon")?,
            },
            "cusum_ac" => Detector::CusumAc(
                CusumAcConfig::two_level(
                    network.pairs[0].as_ref(),
                    a,
                    need(a1, "a1")?,
                    need(eps1, "eps1")?,
                )
                .map_err(py_err)?,
            ),
            other => return Err(PyValueError::new_err(format!("unknown detector {other:?}"))),
        };
        inner.validate(network.pairs.len()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }

    fn with_threshold(&self, a: f64) -> Self {
        Self {
            inner: self.inner.with_threshold(a),
        }
    }
}

fn pair(e: McEstimate) -> (f64, f64) {
    (e.mean, e.std_error)
}

#[pyfunction(name = "estimate_arlfa")]
#[pyo3(signature = (detector, network, n_reps, seed, cap = DEFAULT_CAP))]
fn py_estimate_arlfa(
    py: Python<'_>,
    detector: &PyDetector,
    network: &Network,
    n_reps: u64,
    seed: u64,
    cap: u64,
) -> PyResult<(f64, f64)> {
    py.detach(|| estimate_arlfa(&detector.inner, &network.pairs, n_reps, cap, seed))
        .map(pair)
        .map_err(py_err)
}

#[pyfunction(name = "estimate_delay")]
#[pyo3(signature = (detector, network, n_reps, seed, nu = 1, cap = DEFAULT_CAP))]
fn py_estimate_delay(
    py: Python<'_>,
    detector: &PyDetector,
    network: &Network,
    n_reps: u64,
    seed: u64,
    nu: u64,
    cap: u64,
) -> PyResult<(f64, f64)> {
    py.detach(|| {
        estimate_delay(
            &detector.inner,
            &network.pairs,
            n_reps,
            seed,
            nu,
            DelayConditioning::None,
            cap,
        )
    })
    .map(pair)
    .map_err(py_err)
}

#[pyfunction(name = "estimate_comm_rate")]
#[pyo3(signature = (detector, network, n_reps, seed, horizon = 10_000))]
fn py_estimate_comm_rate(
    py: Python<'_>,
    detector: &PyDetector,
    network: &Network,
    n_reps: u64,
    seed: u64,
    horizon: u64,
) -> PyResult<(f64, f64)> {
    py.detach(|| {
        estimate_comm_rate(
            &detector.inner,
            &network.pairs,
            horizon,
            n_reps,
            seed,
            RateMode::NoStop,
        )
    })
    .map(pair)
    .map_err(py_err)
}

/// Threshold whose ARLFA first reaches `zeta`.
#[pyfunction(name = "calibrate_threshold")]
fn py_calibrate_threshold(
    py: Python<'_>,
    detector: &PyDetector,
    network: &Network,
    zeta: f64,
    n_reps: u64,
    seed: u64,
) -> PyResult<f64> {
    py.detach(|| calibrate_threshold(&detector.inner, &network.pairs, zeta, n_reps, seed, None))
        .map(|c| c.a)
        .map_err(py_err)
}

/// Runs an experiment file given as TOML text; returns `{file name: CSV text}`.
#[pyfunction]
#[pyo3(signature = (text, seed = None))]
fn run_experiments(
    py: Python<'_>,
    text: &str,
    seed: Option<u64>,
) -> PyResult<BTreeMap<String, String>> {
    let file = ExperimentFile::parse(text).map_err(py_err)?;
    if file.experiments.is_empty() {
        return Ok(BTreeMap::new());
    }
    let resolved = file.resolve(seed, None).map_err(py_err)?;
    let out = py.detach(|| run_file(&resolved)).map_err(py_err)?;
    Ok(out
        .into_iter()
        .map(|f| (f.name, String::from_utf8_lossy(&f.contents).into_owned()))
        .collect())
}

#[pymodule]
fn cusum_ac_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Network>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(py_estimate_arlfa, m)?)?;
    m.add_function(wrap_pyfunction!(py_estimate_delay, m)?)?;
    m.add_function(wrap_pyfunction!(py_estimate_comm_rate, m)?)?;
    m.add_function(wrap_pyfunction!(py_calibrate_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiments, m)?)?;
    Ok(())
}
