//! Python bindings: networks, curvature, posteriors, training and the
//! evaluation scores, with plain lists as the array type.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use lae::arch::{from_config, mlp_autoencoder};
use lae::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lae::config::{parse_config_str, DEFAULT_MIXED_THRESHOLD};
use lae::curvature::oracle::ggn_oracle;
use lae::curvature::HessianMode;
use lae::posterior::{
    dataset_ggn_diagonal, dataset_nll, init_params, optimize_prior_precision, posterior_from_ggn,
    posterior_predict_batch,
};
use lae::trainer::{train_map, train_online};
use lae::{ArchSpec, Batch, DiagGaussianPosterior, InitScheme, LossModel, TrainConfig};

fn err(e: lae::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mode(name: &str) -> PyResult<HessianMode> {
    HessianMode::parse(name, DEFAULT_MIXED_THRESHOLD).map_err(err)
}

fn rows(xs: &[Vec<f64>]) -> Vec<&[f64]> {
    xs.iter().map(|x| x.as_slice()).collect()
}

/// Training configuration parsed from `key = value` text.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config_str(text).map_err(err)?,
        })
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn max_epochs(&self) -> usize {
        self.inner.max_epochs
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Feed-forward network with a fixed parameter layout.
#[pyclass(name = "Network", from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: lae::Network,
}

#[pymethods]
impl PyNetwork {
    /// Tanh MLP autoencoder over images of `shape`.
    #[staticmethod]
    fn mlp_autoencoder(shape: Vec<usize>, hidden: Vec<usize>, latent: usize) -> PyResult<Self> {
        Ok(Self {
            inner: lae::Network::autoencoder(mlp_autoencoder(&shape, &hidden, latent)).map_err(err)?,
        })
    }

    /// Autoencoder described by a training configuration.
    #[staticmethod]
    fn from_config(config: &PyTrainConfig, shape: Vec<usize>) -> PyResult<Self> {
        let spec = from_config(&config.inner, &shape).map_err(err)?;
        Ok(Self {
            inner: lae::Network::autoencoder(spec).map_err(err)?,
        })
    }

    /// Architecture from its JSON description.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: ArchSpec = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: lae::Network::new(spec).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(self.inner.arch()).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    /// Fan-in uniform initial parameters.
    #[pyo3(signature = (seed = 0))]
    fn init_params(&self, seed: u64) -> Vec<f64> {
        init_params(&self.inner, InitScheme::FanInUniform { seed })
    }

    fn predict(&self, params: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.predict(&params, &x).map_err(err)
    }

    fn encode(&self, params: Vec<f64>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.encode(&params, &x).map_err(err)
    }

    /// Summed GGN diagonal over autoencoding examples `xs`.
    #[pyo3(signature = (params, xs, mode = "approx", sigma_d = 1.0))]
    fn ggn_diagonal(&self, params: Vec<f64>, xs: Vec<Vec<f64>>, mode: &str, sigma_d: f64) -> PyResult<Vec<f64>> {
        let loss = LossModel::gaussian(sigma_d).map_err(err)?;
        let m = self::mode(mode)?;
        let r = lae::ggn_backprop(&self.inner, &params, &Batch::autoencoding(rows(&xs)), m, &loss).map_err(err)?;
        Ok(r.diagonal)
    }

    /// Brute-force reference GGN diagonal for one example (small nets only).
    #[pyo3(signature = (params, x, sigma_d = 1.0))]
    fn ggn_oracle_diagonal(&self, params: Vec<f64>, x: Vec<f64>, sigma_d: f64) -> PyResult<Vec<f64>> {
        let loss = LossModel::gaussian(sigma_d).map_err(err)?;
        Ok(ggn_oracle(&self.inner, &params, &x, &loss).map_err(err)?.diagonal())
    }
}

/// Diagonal Gaussian weight posterior.
#[pyclass(name = "Posterior", from_py_object)]
#[derive(Clone)]
struct PyPosterior {
    inner: DiagGaussianPosterior,
}

#[pymethods]
impl PyPosterior {
    #[new]
    fn new(mean: Vec<f64>, precision: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DiagGaussianPosterior::new(mean, precision).map_err(err)?,
        })
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.clone()
    }

    #[getter]
    fn precision(&self) -> Vec<f64> {
        self.inner.precision.clone()
    }

    fn sample(&self, seed: u64, index: u64) -> Vec<f64> {
        self.inner.sample(seed, index)
    }

    /// Monte Carlo prediction; returns one dict per input with `nll`,
    /// `nll_mean`, `sigma_latent`, `sigma_output`, `output_mean` and
    /// `output_var`.
    #[pyo3(signature = (net, xs, samples = 100, seed = 0, sigma_d = 1.0))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        net: &PyNetwork,
        xs: Vec<Vec<f64>>,
        samples: usize,
        seed: u64,
        sigma_d: f64,
    ) -> PyResult<Vec<Bound<'py, pyo3::types::PyDict>>> {
        let loss = LossModel::gaussian(sigma_d).map_err(err)?;
        let out = posterior_predict_batch(&net.inner, &self.inner, &rows(&xs), samples, seed, &loss).map_err(err)?;
        out.into_iter()
            .map(|u| {
                let d = pyo3::types::PyDict::new(py);
                d.set_item("nll", u.nll)?;
                d.set_item("nll_mean", u.nll_mean)?;
                d.set_item("sigma_latent", u.sigma_latent())?;
                d.set_item("sigma_output", u.sigma_output())?;
                d.set_item("output_mean", u.output_mean)?;
                d.set_item("output_var", u.output_var)?;
                Ok(d)
            })
            .collect()
    }
}

/// Standard autoencoder training; returns the parameters.
#[pyfunction]
fn py_train_map(net: &PyNetwork, train: Vec<Vec<f64>>, val: Vec<Vec<f64>>, config: &PyTrainConfig) -> PyResult<Vec<f64>> {
    Ok(train_map(&net.inner, &rows(&train), &rows(&val), &config.inner).map_err(err)?.0)
}

/// Online Laplacian autoencoder training; returns the posterior.
#[pyfunction]
fn py_train_online(
    net: &PyNetwork,
    train: Vec<Vec<f64>>,
    val: Vec<Vec<f64>>,
    config: &PyTrainConfig,
) -> PyResult<PyPosterior> {
    let (post, _) = train_online(&net.inner, &rows(&train), &rows(&val), &config.inner).map_err(err)?;
    Ok(PyPosterior { inner: post })
}

/// Post-hoc Laplace fit; `prior_precision=None` selects it by marginal
/// likelihood.
#[pyfunction]
#[pyo3(signature = (net, theta, xs, mode = "approx", prior_precision = None, sigma_d = 1.0))]
fn posthoc_fit(
    net: &PyNetwork,
    theta: Vec<f64>,
    xs: Vec<Vec<f64>>,
    mode: &str,
    prior_precision: Option<f64>,
    sigma_d: f64,
) -> PyResult<PyPosterior> {
    let loss = LossModel::gaussian(sigma_d).map_err(err)?;
    let m = self::mode(mode)?;
    let data = rows(&xs);
    let ggn = dataset_ggn_diagonal(&net.inner, &theta, &data, m, &loss, &Default::default()).map_err(err)?;
    let gamma2 = match prior_precision {
        Some(g) => g,
        None => optimize_prior_precision(&theta, &ggn, dataset_nll(&net.inner, &theta, &data, &loss).map_err(err)?),
    };
    Ok(PyPosterior {
        inner: posterior_from_ggn(&theta, &ggn, gamma2, m).map_err(err)?,
    })
}

/// AUROC for "higher score means out of distribution".
#[pyfunction]
fn auroc(scores_in: Vec<f64>, scores_out: Vec<f64>) -> PyResult<f64> {
    lae::tasks::auroc(&scores_in, &scores_out).map_err(err)
}

/// `(ece, mce, rmsce)` of class probabilities against labels.
#[pyfunction]
#[pyo3(signature = (probs, labels, n_bins = 10))]
fn calibration(probs: Vec<Vec<f64>>, labels: Vec<usize>, n_bins: usize) -> PyResult<(f64, f64, f64)> {
    let r = lae::tasks::calibration(&probs, &labels, n_bins).map_err(err)?;
    Ok((r.ece, r.mce, r.rmsce))
}

/// Images of an IDX file as flat rows in `[0, 1]`.
#[pyfunction]
fn load_images(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let ds = lae::dataio::load_images(&path, None).map_err(err)?;
    Ok(ds.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// `(network, mean, precision or None)` stored in a checkpoint.
#[pyfunction]
fn read_checkpoint(path: PathBuf) -> PyResult<(PyNetwork, Vec<f64>, Option<Vec<f64>>)> {
    let c = load_checkpoint(&path).map_err(err)?;
    let net = c.network().map_err(err)?;
    Ok((PyNetwork { inner: net }, c.mean, c.precision))
}

/// Save a posterior as an `online` checkpoint.
#[pyfunction]
fn write_checkpoint(path: PathBuf, net: &PyNetwork, posterior: &PyPosterior, config: &PyTrainConfig) -> PyResult<()> {
    let c = Checkpoint::from_posterior("online", net.inner.arch().clone(), config.inner.clone(), &posterior.inner);
    save_checkpoint(&path, &c).map_err(err)
}

#[pymodule]
fn lae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyPosterior>()?;
    m.add("train_map", wrap_pyfunction!(py_train_map, m)?)?;
    m.add("train_online", wrap_pyfunction!(py_train_online, m)?)?;
    m.add_function(wrap_pyfunction!(posthoc_fit, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(calibration, m)?)?;
    m.add_function(wrap_pyfunction!(load_images, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    Ok(())
}
