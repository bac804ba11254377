//! Python bindings: checkpoints, attacks and the command line.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rnnadv::attacks::project as project_linf;
use rnnadv::classifier::{self, ClassifierWeights, LossKind};
use rnnadv::data::Dataset;
use rnnadv::learned::{self, HiddenState, RnnOptimizerParams};
use rnnadv::{eval, Error, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::LabelOutOfRange { .. } | Error::EmptyDataset => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Number of parameters of the bias-free RNN optimizer with `hidden` units.
#[pyfunction]
#[pyo3(signature = (hidden = 10))]
fn param_count(hidden: usize) -> PyResult<usize> {
    Ok(learned::param_count(&RnnOptimizerParams::init(hidden, 0).map_err(err)?))
}

/// Projects `x_adv` onto the epsilon-ball around `x` intersected with [0, 1].
#[pyfunction]
fn project(x: Vec<f64>, x_adv: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    let p = project_linf(&Tensor::from_vec(x), &Tensor::from_vec(x_adv), epsilon).map_err(err)?;
    Ok(p.into_data())
}

/// A trained classifier loaded from a checkpoint.
#[pyclass]
struct Classifier {
    weights: ClassifierWeights,
}

impl Classifier {
    fn batch(&self, images: Vec<f64>) -> PyResult<Tensor> {
        let [c, h, w] = self.weights.spec().input_shape;
        let per = c * h * w;
        if images.is_empty() || !images.len().is_multiple_of(per) {
            return Err(PyValueError::new_err(format!(
                "expected a multiple of {per} pixels, got {}",
                images.len()
            )));
        }
        Tensor::new(vec![images.len() / per, c, h, w], images).map_err(err)
    }
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Classifier {
            weights: classifier::load_checkpoint(path).map_err(err)?,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Predicted labels for flattened images with pixels in [0, 1].
    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<usize>> {
        classifier::predict(&self.weights, &self.batch(images)?).map_err(err)
    }

    /// Mean cross-entropy.
    fn loss(&self, images: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
        classifier::loss(&self.weights, &self.batch(images)?, &LossKind::CrossEntropy(labels)).map_err(err)
    }

    /// Accuracy in percent under a named attack such as `pgd10`, `cw10` or
    /// `learned10` (the last needs `optimizer`, a checkpoint path).
    #[pyo3(signature = (images, labels, attack, epsilon = 0.3, seed = 0, optimizer = None))]
    fn robust_accuracy(
        &self,
        images: Vec<f64>,
        labels: Vec<usize>,
        attack: &str,
        epsilon: f64,
        seed: u64,
        optimizer: Option<&str>,
    ) -> PyResult<f64> {
        let opt = optimizer.map(learned::load_checkpoint).transpose().map_err(err)?;
        let attack = eval::parse_attack(attack, epsilon, opt.as_ref()).map_err(err)?;
        let classes = self.weights.spec().num_classes;
        let ds = Dataset::new(self.batch(images)?, labels, classes).map_err(err)?;
        eval::robust_accuracy(&self.weights, &attack, &ds, seed).map_err(err)
    }
}

/// One step of a learned optimizer checkpoint from a zero hidden state:
/// returns the per-coordinate update for gradient `g`.
#[pyfunction]
fn rnn_first_step(optimizer: &str, g: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = learned::load_checkpoint(optimizer).map_err(err)?;
    let g = Tensor::from_vec(g);
    let state = HiddenState::zeros(g.shape(), p.hidden_size());
    let (delta, _) = learned::rnn_step(&p, &g, &state).map_err(err)?;
    Ok(delta.into_data())
}

/// Runs the `rnnadv` command line with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    rnnadv::cli::run(std::iter::once("rnnadv".to_string()).chain(args))
}

#[pymodule]
fn rnnadv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(rnn_first_step, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Classifier>()?;
    Ok(())
}
