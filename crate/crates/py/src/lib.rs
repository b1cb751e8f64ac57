//! Python bindings for the recycling U-Net laboratory: task generation,
//! model construction, the cycle forward pass, training and evaluation.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use recyclenet::engine::Tensor;
use recyclenet::evaluate::{eval_sweep, mean_curve};
use recyclenet::model::{load_checkpoint, GradMode, UNetConfig, UNetModel};
use recyclenet::schedule::SchedulePolicy;
use recyclenet::tasks::{
    argmax_masks, dice_score, generate_range, AbsentClassPolicy, SyntheticTaskSpec,
};
use recyclenet::trainer::{save_run_checkpoint, train, TrainConfig, TrainGradMode};

fn err(e: recyclenet::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Synthetic segmentation task description.
#[pyclass(name = "TaskSpec")]
#[derive(Clone)]
struct PyTaskSpec {
    inner: SyntheticTaskSpec,
}

#[pymethods]
impl PyTaskSpec {
    #[new]
    #[pyo3(signature = (image_size=64, num_classes=4, contrast=1.0, noise_std=0.35, boundary_jitter=0.35, seed=17))]
    fn new(
        image_size: usize,
        num_classes: usize,
        contrast: f64,
        noise_std: f64,
        boundary_jitter: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = SyntheticTaskSpec {
            image_size,
            num_classes,
            contrast,
            noise_std,
            boundary_jitter,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(PyTaskSpec { inner })
    }

    /// Generates samples `offset .. offset + count` as (image, mask) pairs
    /// of flat row-major lists.
    fn generate(&self, offset: usize, count: usize) -> PyResult<Vec<(Vec<f32>, Vec<u32>)>> {
        let samples = generate_range(&self.inner, offset, count).map_err(err)?;
        Ok(samples.into_iter().map(|s| (s.image, s.mask)).collect())
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn __repr__(&self) -> String {
        format!(
            "TaskSpec(image_size={}, num_classes={}, contrast={}, noise_std={}, boundary_jitter={}, seed={})",
            self.inner.image_size,
            self.inner.num_classes,
            self.inner.contrast,
            self.inner.noise_std,
            self.inner.boundary_jitter,
            self.inner.seed
        )
    }
}

/// The recycling U-Net (single-channel input).
#[pyclass(name = "UNet", unsendable)]
struct PyUNet {
    model: UNetModel<f32>,
}

fn image_tensor(image: Vec<f32>, size: usize) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(vec![1, 1, size, size], image).map_err(err)
}

fn checkpoint_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        minibatches_per_epoch: 1,
        batch_size: 1,
        learning_rate: 0.03,
        momentum: 0.9,
        lr_decay_exponent: 0.9,
        seed,
        schedule: SchedulePolicy::robust(0, 1, 3),
        grad_mode: TrainGradMode::DetachLastOnly,
        augment_flips: false,
    }
}

#[pymethods]
impl PyUNet {
    #[new]
    #[pyo3(signature = (num_classes=4, base_channels=16, num_stages=4, seed=1))]
    fn new(num_classes: usize, base_channels: usize, num_stages: usize, seed: u64) -> PyResult<Self> {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes,
            base_channels,
            num_stages,
            ..UNetConfig::default()
        };
        Ok(PyUNet {
            model: UNetModel::new(cfg, seed).map_err(err)?,
        })
    }

    /// Loads a checkpoint written by `save` or the CLI.
    #[staticmethod]
    #[pyo3(signature = (path, num_classes=4, base_channels=16, num_stages=4))]
    fn load(
        path: PathBuf,
        num_classes: usize,
        base_channels: usize,
        num_stages: usize,
    ) -> PyResult<Self> {
        let cfg = UNetConfig {
            in_channels: 1,
            num_classes,
            base_channels,
            num_stages,
            ..UNetConfig::default()
        };
        let (model, _meta) = load_checkpoint(&path, &cfg).map_err(err)?;
        Ok(PyUNet { model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_run_checkpoint(&self.model, &checkpoint_train_config(0), 0, &path).map_err(err)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// Per-cycle logits of one image, flattened `[classes, h, w]` per cycle.
    fn forward_cycles(
        &self,
        image: Vec<f32>,
        size: usize,
        n_cycles: usize,
    ) -> PyResult<Vec<Vec<f32>>> {
        let x = image_tensor(image, size)?;
        let logits = self
            .model
            .forward_with_cycles(&x, n_cycles, GradMode::Inference)
            .map_err(err)?;
        Ok(logits.into_iter().map(|t| t.data().to_vec()).collect())
    }

    /// Per-cycle argmax masks of one image.
    fn predict_masks(
        &self,
        image: Vec<f32>,
        size: usize,
        n_cycles: usize,
    ) -> PyResult<Vec<Vec<u32>>> {
        let x = image_tensor(image, size)?;
        let logits = self
            .model
            .forward_with_cycles(&x, n_cycles, GradMode::Inference)
            .map_err(err)?;
        logits
            .iter()
            .map(|l| Ok(argmax_masks(l).map_err(err)?.pop().expect("one sample")))
            .collect()
    }

    /// Trains on freshly generated samples of `spec`; returns per-epoch
    /// mean losses.
    #[pyo3(signature = (spec, epochs, minibatches_per_epoch=8, batch_size=2, learning_rate=0.03, warmup_epochs=0, increment_interval=1, max_cycles=2, train_samples=32, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        spec: &PyTaskSpec,
        epochs: usize,
        minibatches_per_epoch: usize,
        batch_size: usize,
        learning_rate: f64,
        warmup_epochs: usize,
        increment_interval: usize,
        max_cycles: usize,
        train_samples: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let data = generate_range(&spec.inner, 0, train_samples).map_err(err)?;
        let cfg = TrainConfig {
            epochs,
            minibatches_per_epoch,
            batch_size,
            learning_rate,
            momentum: 0.9,
            lr_decay_exponent: 0.9,
            seed,
            schedule: SchedulePolicy::robust(warmup_epochs, increment_interval, max_cycles),
            grad_mode: TrainGradMode::DetachLastOnly,
            augment_flips: true,
        };
        let logs = train(&mut self.model, &data, &cfg).map_err(err)?;
        Ok(logs.into_iter().map(|l| l.mean_loss).collect())
    }

    /// Mean foreground Dice per inference cycle over `count` fresh
    /// samples starting at `offset`.
    #[pyo3(signature = (spec, offset, count, max_cycles=7))]
    fn sweep(
        &self,
        spec: &PyTaskSpec,
        offset: usize,
        count: usize,
        max_cycles: usize,
    ) -> PyResult<Vec<f64>> {
        let data = generate_range(&spec.inner, offset, count).map_err(err)?;
        let report =
            eval_sweep(&self.model, &data, max_cycles, AbsentClassPolicy::Exclude).map_err(err)?;
        Ok(mean_curve(&[report]))
    }
}

/// Mean foreground Dice between two integer masks.
#[pyfunction]
#[pyo3(name = "dice_score", signature = (pred, truth, num_classes, empty_scores_one=false))]
fn py_dice_score(
    pred: Vec<u32>,
    truth: Vec<u32>,
    num_classes: usize,
    empty_scores_one: bool,
) -> PyResult<Option<f64>> {
    let policy = if empty_scores_one {
        AbsentClassPolicy::ScoreOne
    } else {
        AbsentClassPolicy::Exclude
    };
    Ok(dice_score(&pred, &truth, num_classes, policy)
        .map_err(err)?
        .mean_foreground)
}

/// Mean of per-cycle softmax probabilities, flattened `[classes, h, w]`.
#[pyfunction]
fn ensemble_logits(per_cycle: Vec<Vec<f32>>, num_classes: usize, size: usize) -> PyResult<Vec<f32>> {
    let tensors: Vec<Tensor<f32>> = per_cycle
        .into_iter()
        .map(|data| Tensor::from_vec(vec![1, num_classes, size, size], data).map_err(err))
        .collect::<PyResult<_>>()?;
    let out = UNetModel::ensemble_cycles(&tensors).map_err(err)?;
    Ok(out.data().to_vec())
}

#[pymodule]
fn recyclenet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTaskSpec>()?;
    m.add_class::<PyUNet>()?;
    m.add_function(wrap_pyfunction!(py_dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_logits, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
