//! The two training phases: multimodal-reconstruction pretraining and
//! segmentation fine-tuning, sharing one loop (Adam, per-epoch validation,
//! plateau LR decay, early stopping, best-checkpoint tracking).
//!
//! Determinism: every epoch derives its own RNG stream from (seed, phase,
//! epoch), so a resumed run replays the exact shuffles and augmentations
//! of an uninterrupted one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::data::pnm::DataError;
use crate::data::{augment, SamplePair};
use crate::graph::{backward_into, ModelGraph};
use crate::loss::{bce_loss, masked_ssim_sum, roi_intersection, RoiMask};
use crate::nn::BnMode;
use crate::optim::{adam_step, AdamState, Decision, OptimError, PatienceMode, Progress, StopMonitor};
use crate::pipeline::checkpoint::{load_optimizer, snapshot, transfer, Checkpoint, CheckpointError};
use crate::pipeline::config::{Phase, RunConfig};
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Mismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Invalid(String),
}

/// Initialization source for fine-tuning.
pub enum Init<'a> {
    Scratch,
    Checkpoint(&'a Checkpoint),
}

/// Checkpoints needed to resume an interrupted run.
pub struct ResumeState<'a> {
    pub last: &'a Checkpoint,
    pub best: &'a Checkpoint,
}

/// One row of the loss history.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub images_presented: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha: f32,
    /// Total eroded-ROI pixels presented this epoch (pretraining only).
    pub omega: usize,
    pub event: String,
}

/// Result of one training phase.
pub struct TrainOutcome {
    /// Parameters at the best validation loss, no optimizer state.
    pub best: Checkpoint,
    /// Final state including optimizer moments and monitor counters.
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub images_presented: usize,
    pub images_presented_best: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    let mut text = String::from("epoch,images_presented,train_loss,val_loss,alpha,omega,event\n");
    for r in history {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.images_presented, r.train_loss, r.val_loss, r.alpha, r.omega, r.event
        ));
    }
    std::fs::write(path, text).map_err(|source| {
        TrainError::Data(DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

/// Splitmix64-style stream derivation; stable across runs and resumes.
pub fn derive_seed(master: u64, phase: Phase, epoch: usize, stream: u64) -> u64 {
    let mut z = master
        ^ (phase as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ stream.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_uniform_dims(pool: &[SamplePair]) -> Result<(usize, usize), TrainError> {
    let Some(first) = pool.first() else {
        return Err(TrainError::Invalid("empty dataset".into()));
    };
    let dims = (first.height(), first.width());
    for s in pool {
        if (s.height(), s.width()) != dims {
            return Err(TrainError::Invalid(format!(
                "sample '{}' is {}x{} but '{}' is {}x{}; batching needs uniform sizes",
                s.id,
                s.width(),
                s.height(),
                first.id,
                dims.1,
                dims.0
            )));
        }
    }
    Ok(dims)
}

fn stack_retinography(samples: &[&SamplePair]) -> Tensor<f32> {
    let s0 = samples[0].retinography.shape();
    let mut out = Tensor::zeros(Shape::new(samples.len(), 3, s0.h, s0.w));
    let per = 3 * s0.plane();
    for (i, s) in samples.iter().enumerate() {
        out.data_mut()[i * per..(i + 1) * per].copy_from_slice(s.retinography.data());
    }
    out
}

fn stack_single(channels: impl Iterator<Item = Tensor<f32>>, h: usize, w: usize) -> Tensor<f32> {
    let items: Vec<Tensor<f32>> = channels.collect();
    let mut out = Tensor::zeros(Shape::new(items.len(), 1, h, w));
    let per = h * w;
    for (i, t) in items.iter().enumerate() {
        out.data_mut()[i * per..(i + 1) * per].copy_from_slice(t.data());
    }
    out
}

/// Eroded multimodal ROI of one sample, or None when empty.
fn sample_omega(s: &SamplePair, radius: usize) -> Option<RoiMask<f32>> {
    let omega = roi_intersection(&s.roi_retinography, &s.roi_angiography)
        .ok()?
        .erode(radius);
    (!omega.is_empty()).then_some(omega)
}

/// Mean per-image reconstruction loss over a sample set (eval mode).
pub fn validation_loss_mr(
    model: &mut ModelGraph<f32>,
    samples: &[&SamplePair],
    omegas: &[RoiMask<f32>],
    cfg: &RunConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    for (chunk, omega_chunk) in samples
        .chunks(cfg.batch_size.max(1))
        .zip(omegas.chunks(cfg.batch_size.max(1)))
    {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let input = stack_retinography(chunk);
        let target = stack_single(chunk.iter().map(|s| s.angiography.clone()), h, w);
        let omega = stack_single(omega_chunk.iter().map(|o| o.tensor().clone()), h, w);
        let mut tape = Tape::new();
        let run = model.forward(&mut tape, input, BnMode::Eval)?;
        let t = tape.constant(target);
        let loss = masked_ssim_sum(&mut tape, run.output, t, &omega, &cfg.ssim)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Mean per-image BCE over a sample set (eval mode).
pub fn validation_loss_seg(
    model: &mut ModelGraph<f32>,
    samples: &[&SamplePair],
    cfg: &RunConfig,
) -> Result<f64, TrainError> {
    let mut total = 0.0f64;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let input = stack_retinography(chunk);
        let target = stack_single(
            chunk.iter().map(|s| s.vessel_mask.clone().expect("labelled")),
            h,
            w,
        );
        let mut tape = Tape::new();
        let run = model.forward(&mut tape, input, BnMode::Eval)?;
        let loss = bce_loss(&mut tape, run.output, &target)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / samples.len() as f64)
}

struct LoopState<'a> {
    cfg: &'a RunConfig,
    phase: Phase,
    opt: AdamState,
    monitor: StopMonitor,
    epoch: usize,
    images_presented: usize,
    images_since_val: usize,
    history: Vec<EpochRecord>,
    best: Option<Checkpoint>,
    best_val: f64,
    images_best: usize,
}

impl<'a> LoopState<'a> {
    fn new(cfg: &'a RunConfig, phase: Phase, model: &ModelGraph<f32>) -> Self {
        let mode = match phase {
            Phase::Pretrain => PatienceMode::Epochs(cfg.pretrain_stop_epochs),
            Phase::Finetune => PatienceMode::Images(cfg.finetune_stop_images),
        };
        LoopState {
            cfg,
            phase,
            opt: AdamState::new(&model.params, cfg.alpha, cfg.beta1, cfg.beta2, cfg.epsilon),
            monitor: StopMonitor::new(mode, cfg.lr_patience_epochs),
            epoch: 0,
            images_presented: 0,
            images_since_val: 0,
            history: Vec::new(),
            best: None,
            best_val: f64::INFINITY,
            images_best: 0,
        }
    }

    fn resume(&mut self, model: &mut ModelGraph<f32>, state: &ResumeState) -> Result<(), TrainError> {
        transfer(state.last, model).map_err(TrainError::Mismatch)?;
        if let Some(opt) = load_optimizer(
            state.last,
            &model.params,
            self.cfg.beta1,
            self.cfg.beta2,
            self.cfg.epsilon,
        ) {
            self.opt = opt;
        }
        let get = |k: &str| state.last.meta_get(k).and_then(|v| v.parse::<f64>().ok());
        self.epoch = get("epoch").unwrap_or(0.0) as usize;
        self.images_presented = get("images_presented_total").unwrap_or(0.0) as usize;
        self.best_val = get("best_val_loss").unwrap_or(f64::INFINITY);
        self.images_best = get("images_presented_best").unwrap_or(0.0) as usize;
        self.monitor.restore(
            self.best_val,
            get("monitor.lr_counter").unwrap_or(0.0) as usize,
            get("monitor.stop_counter").unwrap_or(0.0) as usize,
        );
        self.best = Some(state.best.clone());
        Ok(())
    }

    /// Run validation, drive the monitor, snapshot improvements. Returns
    /// true when training should stop.
    fn after_epoch(
        &mut self,
        model: &mut ModelGraph<f32>,
        val_loss: f64,
        train_loss: f64,
        omega: usize,
    ) -> Result<bool, TrainError> {
        let improved = val_loss < self.monitor.best;
        let decision = self.monitor.on_validation(
            val_loss,
            Progress {
                epochs: self.cfg.validate_every,
                images: self.images_since_val,
            },
        )?;
        self.images_since_val = 0;
        let mut event = String::new();
        if improved {
            self.best_val = val_loss;
            self.images_best = self.images_presented;
            let mut ck = snapshot(model, None);
            self.stamp(&mut ck);
            self.best = Some(ck);
            event.push_str("improved");
        }
        match decision {
            Decision::Continue => {}
            Decision::ReduceLr => {
                self.opt.reduce_lr(self.cfg.lr_factor);
                event = if event.is_empty() {
                    "reduce_lr".into()
                } else {
                    format!("{event}+reduce_lr")
                };
            }
            Decision::Stop => {
                event = if event.is_empty() {
                    "stop".into()
                } else {
                    format!("{event}+stop")
                };
            }
        }
        self.history.push(EpochRecord {
            epoch: self.epoch,
            images_presented: self.images_presented,
            train_loss,
            val_loss,
            alpha: self.opt.alpha,
            omega,
            event,
        });
        let hit_epoch_cap = self
            .cfg
            .max_epochs
            .is_some_and(|cap| self.epoch >= cap);
        let hit_image_cap = self
            .cfg
            .max_images
            .is_some_and(|cap| self.images_presented >= cap);
        Ok(decision == Decision::Stop || hit_epoch_cap || hit_image_cap)
    }

    fn stamp(&self, ck: &mut Checkpoint) {
        ck.meta_set("phase", self.phase.name());
        ck.meta_set("seed", self.cfg.seed);
        ck.meta_set("epoch", self.epoch);
        ck.meta_set("images_presented_total", self.images_presented);
        ck.meta_set("images_presented_best", self.images_best);
        ck.meta_set("best_val_loss", self.best_val);
        ck.meta_set("monitor.lr_counter", self.monitor.lr_counter());
        ck.meta_set("monitor.stop_counter", self.monitor.stop_counter());
    }

    fn finish(self, model: &ModelGraph<f32>) -> TrainOutcome {
        let mut last = snapshot(model, Some(&self.opt));
        self.stamp(&mut last);
        let mut best = self.best.unwrap_or_else(|| snapshot(model, None));
        // Tag the best checkpoint with the run totals.
        best.meta_set("images_presented_total", self.images_presented);
        best.meta_set("images_presented_best", self.images_best);
        best.meta_set("best_val_loss", self.best_val);
        TrainOutcome {
            best,
            last,
            history: self.history,
            images_presented: self.images_presented,
            images_presented_best: self.images_best,
            best_val_loss: self.best_val,
            epochs_run: self.epoch,
        }
    }
}

/// Multimodal-reconstruction pretraining over a pool of registered pairs.
/// The pool is split into train/validation at the published 44:15 ratio,
/// deterministically from the seed. Samples whose eroded multimodal ROI
/// is empty are rejected at load, by identifier.
pub fn pretrain_mr(
    model: &mut ModelGraph<f32>,
    pool: &[SamplePair],
    cfg: &RunConfig,
    resume: Option<ResumeState>,
) -> Result<TrainOutcome, TrainError> {
    check_uniform_dims(pool)?;
    let radius = cfg.ssim.window_radius;
    let mut omegas = Vec::with_capacity(pool.len());
    for s in pool {
        match sample_omega(s, radius) {
            Some(o) => omegas.push(o),
            None => {
                return Err(TrainError::Data(DataError::EmptyOmega { id: s.id.clone() }))
            }
        }
    }

    // 44:15 split of the pool, deterministic in the seed.
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut split_rng =
        ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, Phase::Pretrain, 0, 100));
    order.shuffle(&mut split_rng);
    let n_val = ((pool.len() * 15 + 29) / 59).max(1).min(pool.len() - 1);
    let val_idx: Vec<usize> = order[pool.len() - n_val..].to_vec();
    let train_idx: Vec<usize> = order[..pool.len() - n_val].to_vec();

    let mut state = LoopState::new(cfg, Phase::Pretrain, model);
    if let Some(r) = resume {
        state.resume(model, &r)?;
    }

    loop {
        state.epoch += 1;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
            cfg.seed,
            Phase::Pretrain,
            state.epoch,
            0,
        ));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut train_loss_sum = 0.0f64;
        let mut omega_total = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let samples: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment_enabled {
                        augment(&pool[i], &cfg.augment, &mut rng)
                    } else {
                        pool[i].clone()
                    }
                })
                .collect();
            // Augmented geometry, re-eroded; fall back to the base sample
            // if a transform emptied the domain.
            let mut batch: Vec<(&SamplePair, RoiMask<f32>)> = Vec::with_capacity(chunk.len());
            for (k, s) in samples.iter().enumerate() {
                match sample_omega(s, radius) {
                    Some(o) => batch.push((s, o)),
                    None => batch.push((&pool[chunk[k]], omegas[chunk[k]].clone())),
                }
            }
            let (h, w) = (batch[0].0.height(), batch[0].0.width());
            let refs: Vec<&SamplePair> = batch.iter().map(|(s, _)| *s).collect();
            let input = stack_retinography(&refs);
            let target = stack_single(refs.iter().map(|s| s.angiography.clone()), h, w);
            let omega = stack_single(batch.iter().map(|(_, o)| o.tensor().clone()), h, w);
            omega_total += omega.data().iter().filter(|&&v| v == 1.0).count();

            let mut tape = Tape::new();
            let run = model.forward(&mut tape, input, BnMode::Train)?;
            let t = tape.constant(target);
            let loss = masked_ssim_sum(&mut tape, run.output, t, &omega, &cfg.ssim)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(TrainError::Numeric(format!(
                    "non-finite training loss at epoch {}",
                    state.epoch
                )));
            }
            train_loss_sum += lv;
            model.params.zero_grads();
            backward_into(&mut tape, loss, &run, &mut model.params)?;
            adam_step(&mut model.params, &mut state.opt)?;
            state.images_presented += chunk.len();
            state.images_since_val += chunk.len();
        }

        if state.epoch % cfg.validate_every == 0 {
            let vs: Vec<&SamplePair> = val_idx.iter().map(|&i| &pool[i]).collect();
            let vo: Vec<RoiMask<f32>> = val_idx.iter().map(|&i| omegas[i].clone()).collect();
            let val_loss = validation_loss_mr(model, &vs, &vo, cfg)?;
            let train_loss = train_loss_sum / train_idx.len() as f64;
            if state.after_epoch(model, val_loss, train_loss, omega_total)? {
                break;
            }
        } else if state
            .cfg
            .max_epochs
            .is_some_and(|cap| state.epoch >= cap)
        {
            break;
        }
    }
    Ok(state.finish(model))
}

/// Segmentation fine-tuning on a labelled pool using the nested-split
/// protocol for the given train-set size. The fine-tuning code path is
/// identical for both initializations; only the starting parameters
/// differ.
pub fn finetune_seg(
    init: Init,
    pool: &[SamplePair],
    train_size: usize,
    cfg: &RunConfig,
) -> Result<(ModelGraph<f32>, TrainOutcome), TrainError> {
    check_uniform_dims(pool)?;
    for s in pool {
        if s.vessel_mask.is_none() {
            return Err(TrainError::Invalid(format!(
                "sample '{}' has no vessel mask; fine-tuning needs labelled data",
                s.id
            )));
        }
    }
    let mut model =
        crate::arch::build_by_tag::<f32>(&cfg.arch, cfg.base_channels)?;
    match &init {
        Init::Scratch => model.init_he(derive_seed(cfg.seed, Phase::Finetune, 0, 7)),
        Init::Checkpoint(ck) => {
            model.init_he(derive_seed(cfg.seed, Phase::Finetune, 0, 7));
            transfer(ck, &mut model).map_err(TrainError::Mismatch)?;
        }
    }

    let splits = crate::data::nested_splits(pool.len(), &[train_size], cfg.seed)
        .map_err(TrainError::Data)?;
    let split = &splits[0];
    let train_idx = split.train.clone();
    let val_idx = split.val.clone();
    if val_idx.is_empty() {
        return Err(TrainError::Invalid(
            "train size consumes the whole pool; nothing left for validation".into(),
        ));
    }

    let mut state = LoopState::new(cfg, Phase::Finetune, &model);
    loop {
        state.epoch += 1;
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(
            cfg.seed,
            Phase::Finetune,
            state.epoch,
            0,
        ));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);

        let mut train_loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let samples: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment_enabled {
                        augment(&pool[i], &cfg.augment, &mut rng)
                    } else {
                        pool[i].clone()
                    }
                })
                .collect();
            let (h, w) = (samples[0].height(), samples[0].width());
            let refs: Vec<&SamplePair> = samples.iter().collect();
            let input = stack_retinography(&refs);
            let target = stack_single(
                samples.iter().map(|s| s.vessel_mask.clone().unwrap()),
                h,
                w,
            );
            let mut tape = Tape::new();
            let run = model.forward(&mut tape, input, BnMode::Train)?;
            let loss = bce_loss(&mut tape, run.output, &target)?;
            let lv = tape.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(TrainError::Numeric(format!(
                    "non-finite training loss at epoch {}",
                    state.epoch
                )));
            }
            train_loss_sum += lv;
            model.params.zero_grads();
            backward_into(&mut tape, loss, &run, &mut model.params)?;
            adam_step(&mut model.params, &mut state.opt)?;
            state.images_presented += chunk.len();
            state.images_since_val += chunk.len();
        }

        if state.epoch % cfg.validate_every == 0 {
            let vs: Vec<&SamplePair> = val_idx.iter().map(|&i| &pool[i]).collect();
            let val_loss = validation_loss_seg(&mut model, &vs, cfg)?;
            let train_loss = train_loss_sum / train_idx.len() as f64;
            if state.after_epoch(&mut model, val_loss, train_loss, 0)? {
                break;
            }
        } else if state
            .cfg
            .max_epochs
            .is_some_and(|cap| state.epoch >= cap)
        {
            break;
        }
    }
    let outcome = state.finish(&model);
    Ok((model, outcome))
}
