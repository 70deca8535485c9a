//! Adam optimization, plateau-based learning-rate decay, and the two
//! early-stopping regimes: epoch patience for pretraining and
//! images-presented patience for fine-tuning.

use thiserror::Error;

use crate::graph::ParamStore;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("validation loss is not finite ({value}); stopping")]
    NonFiniteLoss { value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Adam optimizer state: bias-corrected first and second moments per
/// parameter plus the step counter and current learning rate.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub alpha: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    /// Zero moments for every parameter in the store.
    pub fn new(params: &ParamStore<f32>, alpha: f32, beta1: f32, beta2: f32, epsilon: f32) -> Self {
        let m = params
            .iter()
            .map(|p| {
                if p.kind.is_learnable() {
                    vec![0.0; p.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState {
            alpha,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m,
            v,
        }
    }

    pub fn with_defaults(params: &ParamStore<f32>) -> Self {
        AdamState::new(params, 1e-4, 0.9, 0.999, 1e-8)
    }

    /// Divide the learning rate by `factor` (plateau decay).
    pub fn reduce_lr(&mut self, factor: f32) {
        self.alpha /= factor;
    }

    /// Moment buffers in parameter-store order, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut [Vec<f32>], &mut [Vec<f32>]) {
        (&mut self.m, &mut self.v)
    }
}

/// One bias-corrected Adam update applied in place; `t` is incremented.
/// Every learnable parameter must carry a populated gradient.
pub fn adam_step(params: &mut ParamStore<f32>, state: &mut AdamState) -> Result<(), OptimError> {
    // Validate first so a missing gradient leaves everything untouched.
    for p in params.iter() {
        if p.kind.is_learnable() && p.grad.is_none() {
            return Err(TensorError::MissingGrad {
                name: p.name.clone(),
            }
            .into());
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (idx, p) in params.iter_mut().enumerate() {
        if !p.kind.is_learnable() {
            continue;
        }
        let g = p.grad.as_ref().unwrap();
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        for i in 0..p.data.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= state.alpha * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Early-stopping patience regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatienceMode {
    /// Stop after this many consecutive non-improving epochs.
    Epochs(usize),
    /// Stop after this many images presented without improvement.
    Images(usize),
}

/// Outcome of a validation checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    /// Divide the learning rate by the configured factor.
    ReduceLr,
    Stop,
}

/// Training progress since the previous validation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Progress {
    pub epochs: usize,
    pub images: usize,
}

/// Plateau tracker. A strict improvement of the validation loss resets
/// both counters; the learning-rate counter also resets after each
/// reduction, while the stop counter keeps accumulating from the last
/// improvement.
#[derive(Clone, Debug)]
pub struct StopMonitor {
    pub best: f64,
    pub mode: PatienceMode,
    pub lr_patience: usize,
    pub lr_factor: f32,
    lr_counter: usize,
    stop_counter: usize,
}

impl StopMonitor {
    pub fn new(mode: PatienceMode, lr_patience: usize) -> Self {
        StopMonitor {
            best: f64::INFINITY,
            mode,
            lr_patience,
            lr_factor: 10.0,
            lr_counter: 0,
            stop_counter: 0,
        }
    }

    /// Counter value since the last strict improvement, in the stop
    /// regime's unit (epochs or images).
    pub fn stop_counter(&self) -> usize {
        self.stop_counter
    }

    pub fn lr_counter(&self) -> usize {
        self.lr_counter
    }

    /// Restore counters from checkpoint metadata.
    pub fn restore(&mut self, best: f64, lr_counter: usize, stop_counter: usize) {
        self.best = best;
        self.lr_counter = lr_counter;
        self.stop_counter = stop_counter;
    }

    /// Record a validation result and decide how training proceeds.
    pub fn on_validation(
        &mut self,
        val_loss: f64,
        progress: Progress,
    ) -> Result<Decision, OptimError> {
        if !val_loss.is_finite() {
            return Err(OptimError::NonFiniteLoss { value: val_loss });
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.lr_counter = 0;
            self.stop_counter = 0;
            return Ok(Decision::Continue);
        }
        self.lr_counter += progress.epochs;
        self.stop_counter += match self.mode {
            PatienceMode::Epochs(_) => progress.epochs,
            PatienceMode::Images(_) => progress.images,
        };
        let stop_patience = match self.mode {
            PatienceMode::Epochs(n) | PatienceMode::Images(n) => n,
        };
        if self.stop_counter >= stop_patience {
            return Ok(Decision::Stop);
        }
        if self.lr_counter >= self.lr_patience {
            self.lr_counter = 0;
            return Ok(Decision::ReduceLr);
        }
        Ok(Decision::Continue)
    }
}
