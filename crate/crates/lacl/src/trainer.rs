//! The training loop: epoch-shuffled batches, two augmented views per patch,
//! a traced forward pass on the query branch, contrastive loss against the
//! queue, one SGD step, an EMA update of the key branch, and a
//! mode-dependent queue update.
//!
//! Three arms share this loop. `lacl` admits only divergence-filtered keys
//! into per-class queues; `lacl-no-qrs` admits every key; `moco-baseline`
//! collapses the queues into one class-blind FIFO and scores the plain
//! contrastive loss against all of it.
//!
//! Every random draw is derived from the run seed plus structural indices
//! (epoch, step, batch slot, view), never from call order, so runs are
//! bit-reproducible under any thread count and a resumed run replays exactly
//! the steps the uninterrupted run would have taken.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{Config, LrSchedule, Mode, QueueInitMode};
use crate::data::{
    augment, mix_seed, AugmentationPolicy, Split, SplitAssignment, SyntheticDataset,
};
use crate::error::{Error, Result};
use crate::loss::{info_nce, lesion_info_nce};
use crate::math::{kahan_sum, Embedding};
use crate::model::{ema_update, sgd_step, ModelParams};
use crate::qrs::{select_updates, QrsVerdict};
use crate::queue::{LesionQueue, QueueInit};

// Seed-stream tags; each distinct use of the run seed gets its own stream.
const STREAM_PARAMS: u64 = 2;
const STREAM_QUEUE: u64 = 3;
const STREAM_BATCHES: u64 = 4;
const STREAM_VIEWS: u64 = 5;

const QUERY_VIEW: u64 = 0;
const KEY_VIEW: u64 = 1;

/// Mutable training state; everything a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params_q: ModelParams,
    pub params_k: ModelParams,
    pub velocity: ModelParams,
    pub queue: LesionQueue,
    pub step: u64,
    pub epoch: u32,
}

/// What one step reports into the metrics log.
#[derive(Clone, Debug)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u32,
    pub warmup: bool,
    /// Mean batch loss; absent during warm-up.
    pub loss: Option<f64>,
    /// Admission statistics; present only in lacl mode outside warm-up.
    pub qrs: Option<QrsVerdict>,
    pub queue_counts: Vec<usize>,
    pub wall_ms: u128,
}

/// Paths produced by a completed run.
#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
}

pub struct Trainer<'a> {
    dataset: &'a SyntheticDataset,
    config: &'a Config,
    policy: AugmentationPolicy,
    /// Patch indices of training slides, in fixed ascending order.
    train_patches: Vec<usize>,
    warmup_steps: u64,
    pub state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        dataset: &'a SyntheticDataset,
        split: &'a SplitAssignment,
        config: &'a Config,
    ) -> Result<Self> {
        config.validate()?;
        let state = Self::initial_state(dataset, config)?;
        Self::assemble(dataset, split, config, state)
    }

    /// Continue from a saved checkpoint. The checkpoint must match the
    /// config's model dims and queue layout.
    pub fn resume(
        dataset: &'a SyntheticDataset,
        split: &'a SplitAssignment,
        config: &'a Config,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        let dims = config.model.dims();
        if checkpoint.params_q.dims != dims {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint dims {:?} do not match configured dims {dims:?}",
                checkpoint.params_q.dims
            )));
        }
        let expected_classes = match config.run.mode {
            Mode::MocoBaseline => 1,
            _ => dataset.params.num_classes,
        };
        if checkpoint.queue.num_classes() != expected_classes {
            return Err(Error::InvalidState(format!(
                "checkpoint queue has {} classes, mode {} needs {expected_classes}",
                checkpoint.queue.num_classes(),
                config.run.mode
            )));
        }
        if checkpoint.queue.dim() != dims.contrast_dim {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint queue dim {} does not match contrast dim {}",
                checkpoint.queue.dim(),
                dims.contrast_dim
            )));
        }
        let state = TrainState {
            params_q: checkpoint.params_q,
            params_k: checkpoint.params_k,
            velocity: checkpoint.velocity,
            queue: LesionQueue::from_snapshot(checkpoint.queue, checkpoint.per_class_capacity)?,
            step: checkpoint.step,
            epoch: checkpoint.epoch,
        };
        Self::assemble(dataset, split, config, state)
    }

    fn assemble(
        dataset: &'a SyntheticDataset,
        split: &'a SplitAssignment,
        config: &'a Config,
        state: TrainState,
    ) -> Result<Self> {
        if dataset.params.dim != config.model.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "dataset dim {} does not match model input dim {}",
                dataset.params.dim, config.model.input_dim
            )));
        }
        let policy = AugmentationPolicy::from_config(config);
        policy.validate()?;
        let train_patches = split.patch_indices(dataset, Split::Train);
        if train_patches.is_empty() {
            return Err(Error::InvalidState(
                "training split contains no patches".into(),
            ));
        }
        let steps_per_epoch = train_patches.len().div_ceil(config.train.batch_size) as u64;
        let warmup_steps = config.train.warmup_steps.unwrap_or(match config.train.queue_init {
            QueueInitMode::Empty => steps_per_epoch,
            QueueInitMode::RandomUnit => 0,
        });
        Ok(Trainer {
            dataset,
            config,
            policy,
            train_patches,
            warmup_steps,
            state,
        })
    }

    fn initial_state(dataset: &SyntheticDataset, config: &Config) -> Result<TrainState> {
        let dims = config.model.dims();
        let seed = config.run.seed;
        let params_q = ModelParams::init(dims, mix_seed(&[seed, STREAM_PARAMS]))?;
        // the key branch starts as an exact copy and then only ever moves
        // through the EMA
        let params_k = params_q.clone();
        let velocity = ModelParams::zeros(dims)?;
        let num_classes = match config.run.mode {
            Mode::MocoBaseline => 1,
            _ => dataset.params.num_classes,
        };
        let init = match config.train.queue_init {
            QueueInitMode::Empty => QueueInit::Empty,
            QueueInitMode::RandomUnit => QueueInit::RandomUnit {
                seed: mix_seed(&[seed, STREAM_QUEUE]),
            },
        };
        let queue = LesionQueue::new(
            num_classes,
            config.train.queue_capacity,
            dims.contrast_dim,
            init,
        )?;
        Ok(TrainState {
            params_q,
            params_k,
            velocity,
            queue,
            step: 0,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train_patches.len().div_ceil(self.config.train.batch_size) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    /// The patch batches of one epoch: a seeded shuffle of the training
    /// patches, chunked; the tail batch may be short.
    pub fn epoch_batches(&self, epoch: u32) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order = self.train_patches.clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.config.run.seed,
            STREAM_BATCHES,
            epoch as u64,
        ]));
        order.shuffle(&mut rng);
        order
            .chunks(self.config.train.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    fn view_seed(&self, step: u64, slot: usize, view: u64) -> u64 {
        mix_seed(&[
            self.config.run.seed,
            STREAM_VIEWS,
            step,
            slot as u64,
            view,
        ])
    }

    fn learning_rate(&self) -> f64 {
        let base = self.config.train.learning_rate;
        match self.config.train.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let total = (self.config.train.epochs as u64 * self.steps_per_epoch())
                    .saturating_sub(self.warmup_steps);
                if total == 0 {
                    return base;
                }
                let t = self.state.step.saturating_sub(self.warmup_steps) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t / total as f64).cos())
            }
        }
    }

    /// Key-branch projection of one augmented view, without gradient state.
    fn key_for(&self, patch: usize, step: u64, slot: usize) -> Result<Embedding> {
        let view = augment(
            &self.dataset.patches[patch],
            &self.policy,
            self.view_seed(step, slot, KEY_VIEW),
        );
        Ok(self.state.params_k.forward(&view, false)?.projection)
    }

    /// Run one step on the given batch of patch indices and advance state.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("batch must be non-empty".into()));
        }
        let started = std::time::Instant::now();
        let step = self.state.step;
        if step < self.warmup_steps {
            return self.warmup_step(batch, started);
        }

        let mode = self.config.run.mode;
        let tau = self.config.train.temperature;
        let include_positive = self.config.train.include_positive_in_denominator;
        let scale = 1.0 / batch.len() as f64;

        // negatives snapshot semantics: every item in the batch sees the
        // queue as it stands at step start; enqueues happen after all losses
        let moco_negatives: Vec<&Embedding> = match mode {
            Mode::MocoBaseline => self.state.queue.iter_all().map(|(_, k)| k).collect(),
            _ => Vec::new(),
        };

        struct ItemResult {
            loss: f64,
            grads: ModelParams,
            key: Embedding,
            label: usize,
        }

        let dims = self.state.params_q.dims;
        let per_item: Vec<Result<ItemResult>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &patch)| {
                let label = self.dataset.pseudo_label(patch);
                let query_view = augment(
                    &self.dataset.patches[patch],
                    &self.policy,
                    self.view_seed(step, slot, QUERY_VIEW),
                );
                let q_fwd = self.state.params_q.forward(&query_view, true)?;
                let key = self.key_for(patch, step, slot)?;
                let out = match mode {
                    Mode::MocoBaseline => {
                        info_nce(q_fwd.projection.values(), &key, &moco_negatives, tau)?
                    }
                    Mode::Lacl | Mode::LaclNoQrs => lesion_info_nce(
                        q_fwd.projection.values(),
                        &key,
                        label,
                        &self.state.queue,
                        tau,
                        include_positive,
                    )
                    .map_err(|e| match e {
                        Error::NoNegatives(msg) => Error::NoNegatives(format!(
                            "{msg}; use queue_init = \"random-unit\" or warmup_steps > 0 \
                             to populate the queues first"
                        )),
                        other => other,
                    })?,
                };
                // mean over the batch: scale each item's contribution here
                let d_proj: Vec<f64> = out.grad_q.iter().map(|g| g * scale).collect();
                let mut grads = ModelParams::zeros(dims)?;
                self.state
                    .params_q
                    .backward(q_fwd.trace.as_ref().unwrap(), &d_proj, &mut grads)?;
                Ok(ItemResult {
                    loss: out.loss,
                    grads,
                    key,
                    label,
                })
            })
            .collect();

        // fixed-order reduction keeps results independent of thread schedule
        let mut losses = Vec::with_capacity(batch.len());
        let mut grads = ModelParams::zeros(dims)?;
        let mut candidates: Vec<(usize, Embedding)> = Vec::with_capacity(batch.len());
        for item in per_item {
            let item = item?;
            losses.push(item.loss);
            grads.add_scaled(&item.grads, 1.0);
            candidates.push((item.label, item.key));
        }
        let mean_loss = kahan_sum(losses.iter().copied()) * scale;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                detail: format!("batch loss is {mean_loss}"),
            });
        }

        let lr = self.learning_rate();
        sgd_step(
            &mut self.state.params_q,
            &grads,
            &mut self.state.velocity,
            lr,
            self.config.train.momentum,
            self.config.train.weight_decay,
        )?;
        if !self.state.params_q.all_finite() {
            return Err(Error::TrainingDiverged {
                step,
                detail: "non-finite parameter after optimizer step".into(),
            });
        }
        ema_update(
            &mut self.state.params_k,
            &self.state.params_q,
            self.config.train.ema_m,
        )?;

        let qrs = match mode {
            Mode::Lacl => {
                let snapshot = self.state.queue.snapshot();
                let verdict =
                    select_updates(&candidates, &snapshot, self.config.train.qrs_temperature)?;
                for (item, (label, key)) in verdict.items.iter().zip(candidates) {
                    if item.selected {
                        self.state.queue.enqueue(label, key)?;
                    }
                }
                Some(verdict)
            }
            Mode::LaclNoQrs => {
                for (label, key) in candidates {
                    self.state.queue.enqueue(label, key)?;
                }
                None
            }
            Mode::MocoBaseline => {
                for (_, key) in candidates {
                    self.state.queue.enqueue(0, key)?;
                }
                None
            }
        };

        self.state.step += 1;
        let queue_counts = (0..self.state.queue.num_classes())
            .map(|c| self.state.queue.len(c).unwrap())
            .collect();
        Ok(StepMetrics {
            step,
            epoch: self.state.epoch,
            warmup: false,
            loss: Some(mean_loss),
            qrs,
            queue_counts,
            wall_ms: started.elapsed().as_millis(),
        })
    }

    /// Warm-up: populate the queues from key-branch projections without any
    /// parameter movement. The admission filter stays off.
    fn warmup_step(
        &mut self,
        batch: &[usize],
        started: std::time::Instant,
    ) -> Result<StepMetrics> {
        let step = self.state.step;
        let keys: Vec<Result<(usize, Embedding)>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &patch)| {
                let label = match self.config.run.mode {
                    Mode::MocoBaseline => 0,
                    _ => self.dataset.pseudo_label(patch),
                };
                Ok((label, self.key_for(patch, step, slot)?))
            })
            .collect();
        for key in keys {
            let (label, key) = key?;
            self.state.queue.enqueue(label, key)?;
        }
        self.state.step += 1;
        let queue_counts = (0..self.state.queue.num_classes())
            .map(|c| self.state.queue.len(c).unwrap())
            .collect();
        Ok(StepMetrics {
            step,
            epoch: self.state.epoch,
            warmup: true,
            loss: None,
            qrs: None,
            queue_counts,
            wall_ms: started.elapsed().as_millis(),
        })
    }

    /// Train from the current epoch to the configured epoch count, writing
    /// the metrics log and checkpoints under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainArtifacts> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.log");
        let mut lines = self.resumable_log_prefix(&metrics_path)?;
        if lines.is_empty() {
            lines.push(format!(
                "# mode={} config={} seed={}",
                self.config.run.mode,
                self.config.fingerprint(),
                self.config.run.seed
            ));
        }

        while self.state.epoch < self.config.train.epochs {
            let epoch = self.state.epoch;
            for batch in self.epoch_batches(epoch) {
                let metrics = self.train_step(&batch)?;
                lines.push(format_metrics_line(&metrics, self.config.run.mode));
            }
            self.state.epoch += 1;
            if (epoch + 1).is_multiple_of(self.config.train.checkpoint_every) {
                let path = out_dir.join(format!("checkpoint_epoch_{:04}.ckpt", epoch + 1));
                self.checkpoint().save(&path)?;
                crate::fsio::write_atomic(
                    &metrics_path,
                    (lines.join("\n") + "\n").as_bytes(),
                )?;
                log::info!("epoch {} done, checkpoint at {}", epoch + 1, path.display());
            }
        }

        let final_path = out_dir.join("checkpoint_final.ckpt");
        self.checkpoint().save(&final_path)?;
        crate::fsio::write_atomic(&metrics_path, (lines.join("\n") + "\n").as_bytes())?;
        Ok(TrainArtifacts {
            checkpoint: final_path,
            metrics_log: metrics_path,
        })
    }

    /// On resume, keep only log lines from before the checkpoint's step so
    /// the finished log matches an uninterrupted run's.
    fn resumable_log_prefix(&self, metrics_path: &Path) -> Result<Vec<String>> {
        if self.state.step == 0 || !metrics_path.exists() {
            return Ok(Vec::new());
        }
        let text =
            std::fs::read_to_string(metrics_path).map_err(|e| Error::io(metrics_path, e))?;
        let mut lines = Vec::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("step=") {
                let step: u64 = rest
                    .split_whitespace()
                    .next()
                    .unwrap_or_default()
                    .parse()
                    .map_err(|_| Error::Malformed {
                        path: metrics_path.to_path_buf(),
                        detail: format!("unparseable metrics line '{line}'"),
                    })?;
                if step >= self.state.step {
                    break;
                }
            }
            lines.push(line.to_string());
        }
        Ok(lines)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.state.step,
            epoch: self.state.epoch,
            params_q: self.state.params_q.clone(),
            params_k: self.state.params_k.clone(),
            velocity: self.state.velocity.clone(),
            queue: self.state.queue.snapshot(),
            per_class_capacity: self.state.queue.per_class_capacity(),
        }
    }
}

/// One metrics record. Wall time goes last so tooling that compares runs can
/// strip it; everything before it is deterministic.
pub fn format_metrics_line(m: &StepMetrics, mode: Mode) -> String {
    let phase = if m.warmup { "warmup" } else { "train" };
    let loss = m
        .loss
        .map_or_else(|| "NA".to_string(), |l| format!("{l:.12}"));
    let (mean_kl, selected, per_class) = match &m.qrs {
        Some(v) => (
            format!("{:.12}", v.batch_mean_kl),
            format!("{}/{}", v.selected_count(), v.items.len()),
            v.per_class_selected(m.queue_counts.len())
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("/"),
        ),
        None => ("NA".into(), "NA".into(), "NA".into()),
    };
    let fill = m
        .queue_counts
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("/");
    format!(
        "step={} epoch={} mode={mode} phase={phase} loss={loss} qrs_mean_kl={mean_kl} \
         selected={selected} selected_per_class={per_class} queue_fill={fill} wall_ms={}",
        m.step, m.epoch, m.wall_ms
    )
}

/// Strip the trailing wall-time field, leaving the deterministic prefix.
pub fn strip_wall_time(line: &str) -> &str {
    match line.rfind(" wall_ms=") {
        Some(pos) => &line[..pos],
        None => line,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::split_patient_level;

    fn tiny_config(mode: Mode, seed: u64) -> Config {
        let mut config = Config::default();
        config.run.mode = mode;
        config.run.seed = seed;
        // keep the rectified layers ≥ 16 wide: with zero-init biases a fully
        // dead layer (probability 2^-width per input) zeroes the projection,
        // which forward correctly rejects as degenerate
        config.model.input_dim = 8;
        config.model.hidden_dim = 16;
        config.model.backbone_dim = 6;
        config.model.proj_hidden_dim = 16;
        config.model.contrast_dim = 4;
        config.data.num_classes = 3;
        config.data.slides_per_class = 4;
        config.data.patches_per_slide = 10;
        config.train.epochs = 2;
        config.train.batch_size = 16;
        config.train.queue_capacity = 96;
        config.train.checkpoint_every = 1;
        config
    }

    fn build(config: &Config) -> (SyntheticDataset, SplitAssignment) {
        let params = crate::data::DatasetParams::from_config(config);
        let dataset = SyntheticDataset::generate(params).unwrap();
        let split =
            split_patient_level(&dataset, config.data.split_ratios, config.run.seed).unwrap();
        (dataset, split)
    }

    #[test]
    fn null_updates_leave_parameters_untouched() {
        let mut config = tiny_config(Mode::Lacl, 1);
        config.train.learning_rate = 0.0;
        config.train.momentum = 0.0;
        config.train.weight_decay = 0.0;
        config.train.ema_m = 0.0;
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let before_q = trainer.state.params_q.flatten();
        let before_k = trainer.state.params_k.flatten();
        let queue_before: Vec<Vec<f64>> = trainer
            .state
            .queue
            .iter_all()
            .map(|(_, k)| k.values().to_vec())
            .collect();

        let batch: Vec<usize> = (0..16).collect();
        let metrics = trainer.train_step(&batch).unwrap();
        assert!(metrics.loss.unwrap().is_finite());

        assert_eq!(trainer.state.params_q.flatten(), before_q);
        assert_eq!(trainer.state.params_k.flatten(), before_k);
        let queue_after: Vec<Vec<f64>> = trainer
            .state
            .queue
            .iter_all()
            .map(|(_, k)| k.values().to_vec())
            .collect();
        assert_ne!(queue_before, queue_after, "queue should still rotate");
    }

    #[test]
    fn two_runs_produce_bit_identical_logs_and_params() {
        let config = tiny_config(Mode::Lacl, 2);
        let (dataset, split) = build(&config);
        let run = || {
            let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
            let mut lines = Vec::new();
            for epoch in 0..config.train.epochs {
                for batch in trainer.epoch_batches(epoch) {
                    let m = trainer.train_step(&batch).unwrap();
                    lines.push(strip_wall_time(&format_metrics_line(&m, config.run.mode)).to_string());
                }
                trainer.state.epoch += 1;
            }
            (trainer.state.params_q.flatten(), lines)
        };
        let (params_a, lines_a) = run();
        let (params_b, lines_b) = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&params_a), bits(&params_b));
        assert_eq!(lines_a, lines_b);
    }

    #[test]
    fn repeated_steps_on_one_batch_reduce_its_loss() {
        let mut config = tiny_config(Mode::Lacl, 3);
        config.train.learning_rate = 0.05;
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let batch: Vec<usize> = trainer.train_patches[..8].to_vec();

        // score the same fixed views against the same frozen negatives
        // before and after training
        let frozen_queue = trainer.state.queue.clone();
        let eval_loss = |trainer: &Trainer| -> f64 {
            let mut total = 0.0;
            for (slot, &patch) in batch.iter().enumerate() {
                let label = dataset.pseudo_label(patch);
                let q_view = augment(
                    &dataset.patches[patch],
                    &trainer.policy,
                    trainer.view_seed(1_000_000, slot, QUERY_VIEW),
                );
                let k_view = augment(
                    &dataset.patches[patch],
                    &trainer.policy,
                    trainer.view_seed(1_000_000, slot, KEY_VIEW),
                );
                let q = trainer.state.params_q.forward(&q_view, false).unwrap();
                let k = trainer.state.params_k.forward(&k_view, false).unwrap();
                let out = lesion_info_nce(
                    q.projection.values(),
                    &k.projection,
                    label,
                    &frozen_queue,
                    config.train.temperature,
                    true,
                )
                .unwrap();
                total += out.loss;
            }
            total / batch.len() as f64
        };

        let before = eval_loss(&trainer);
        for _ in 0..50 {
            trainer.train_step(&batch).unwrap();
        }
        let after = eval_loss(&trainer);
        assert!(
            after < before,
            "fixed-view loss did not improve: {before} -> {after}"
        );
    }

    #[test]
    fn zero_ema_freezes_the_key_branch() {
        let mut config = tiny_config(Mode::Lacl, 4);
        config.train.ema_m = 0.0;
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let initial_k = trainer.state.params_k.flatten();
        for batch in trainer.epoch_batches(0) {
            trainer.train_step(&batch).unwrap();
        }
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trainer.state.params_k.flatten()), bits(&initial_k));
        assert_ne!(
            bits(&trainer.state.params_q.flatten()),
            bits(&initial_k),
            "query branch should have moved"
        );
    }

    #[test]
    fn warmup_populates_without_training() {
        let mut config = tiny_config(Mode::Lacl, 5);
        config.train.queue_init = QueueInitMode::Empty;
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        assert_eq!(trainer.warmup_steps(), trainer.steps_per_epoch());
        let before_q = trainer.state.params_q.flatten();
        assert_eq!(trainer.state.queue.total_len(), 0);

        let batch: Vec<usize> = trainer.train_patches[..16].to_vec();
        let metrics = trainer.train_step(&batch).unwrap();
        assert!(metrics.warmup);
        assert_eq!(metrics.loss, None);
        assert!(metrics.qrs.is_none());
        assert_eq!(trainer.state.queue.total_len(), 16);
        assert_eq!(trainer.state.params_q.flatten(), before_q);
        let line = format_metrics_line(&metrics, config.run.mode);
        assert!(line.contains("phase=warmup"));
        assert!(line.contains("loss=NA"));
    }

    #[test]
    fn cold_start_without_warmup_names_the_remedy() {
        let mut config = tiny_config(Mode::Lacl, 6);
        config.train.queue_init = QueueInitMode::Empty;
        config.train.warmup_steps = Some(0);
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let batch: Vec<usize> = trainer.train_patches[..4].to_vec();
        match trainer.train_step(&batch) {
            Err(Error::NoNegatives(msg)) => {
                assert!(msg.contains("warmup_steps"), "unhelpful message: {msg}");
            }
            other => panic!("expected a no-negatives error, got {other:?}"),
        }
    }

    #[test]
    fn moco_mode_uses_one_class_blind_queue() {
        let config = tiny_config(Mode::MocoBaseline, 7);
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        assert_eq!(trainer.state.queue.num_classes(), 1);
        assert_eq!(trainer.state.queue.per_class_capacity(), 96);
        let batch: Vec<usize> = trainer.train_patches[..8].to_vec();
        let metrics = trainer.train_step(&batch).unwrap();
        assert!(metrics.qrs.is_none());
        let line = format_metrics_line(&metrics, config.run.mode);
        assert!(line.contains("mode=moco-baseline"));
        assert!(line.contains("qrs_mean_kl=NA"));
    }

    #[test]
    fn lacl_admission_statistics_appear_in_the_log() {
        let config = tiny_config(Mode::Lacl, 8);
        let (dataset, split) = build(&config);
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let batch: Vec<usize> = trainer.train_patches[..16].to_vec();
        let metrics = trainer.train_step(&batch).unwrap();
        let verdict = metrics.qrs.as_ref().unwrap();
        assert_eq!(verdict.items.len(), 16);
        assert!(verdict.selected_count() >= 1, "mean rule admits at least one");
        let line = format_metrics_line(&metrics, config.run.mode);
        assert!(line.contains(&format!("selected={}/16", verdict.selected_count())));
    }

    #[test]
    fn zero_epochs_emits_only_the_initial_checkpoint() {
        let mut config = tiny_config(Mode::Lacl, 9);
        config.train.epochs = 0;
        let (dataset, split) = build(&config);
        let dir = tempfile::tempdir().unwrap();
        let mut trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let initial = trainer.state.params_q.flatten();
        let artifacts = trainer.run(dir.path()).unwrap();
        let ckpt = Checkpoint::load(&artifacts.checkpoint).unwrap();
        assert_eq!(ckpt.step, 0);
        assert_eq!(ckpt.epoch, 0);
        assert_eq!(ckpt.params_q.flatten(), initial);
        let log = std::fs::read_to_string(&artifacts.metrics_log).unwrap();
        assert!(log.lines().all(|l| l.starts_with('#')));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let seed = 10;
        let (dataset, split) = build(&tiny_config(Mode::Lacl, seed));

        // one shot: 4 epochs straight through
        let mut full_config = tiny_config(Mode::Lacl, seed);
        full_config.train.epochs = 4;
        let full_dir = tempfile::tempdir().unwrap();
        let full = Trainer::new(&dataset, &split, &full_config)
            .unwrap()
            .run(full_dir.path())
            .unwrap();

        // interrupted: stop after 2 epochs, then resume to 4 in place
        let mut half_config = tiny_config(Mode::Lacl, seed);
        half_config.train.epochs = 2;
        let half_dir = tempfile::tempdir().unwrap();
        let half = Trainer::new(&dataset, &split, &half_config)
            .unwrap()
            .run(half_dir.path())
            .unwrap();
        let resumed = Trainer::resume(
            &dataset,
            &split,
            &full_config,
            Checkpoint::load(&half.checkpoint).unwrap(),
        )
        .unwrap()
        .run(half_dir.path())
        .unwrap();

        let a = std::fs::read(&full.checkpoint).unwrap();
        let b = std::fs::read(&resumed.checkpoint).unwrap();
        assert_eq!(a, b, "resumed checkpoint differs from uninterrupted one");

        // headers record the launching config, which differs here (2 vs 4
        // epochs), so compare the data lines
        let strip = |path: &Path| {
            std::fs::read_to_string(path)
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(|l| strip_wall_time(l).to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&full.metrics_log), strip(&resumed.metrics_log));
    }

    #[test]
    fn resume_rejects_mismatched_shapes() {
        let config = tiny_config(Mode::Lacl, 11);
        let (dataset, split) = build(&config);
        let trainer = Trainer::new(&dataset, &split, &config).unwrap();
        let ckpt = trainer.checkpoint();

        let mut other_dims = tiny_config(Mode::Lacl, 11);
        other_dims.model.contrast_dim = 8;
        assert!(matches!(
            Trainer::resume(&dataset, &split, &other_dims, ckpt.clone()),
            Err(Error::ShapeMismatch(_))
        ));

        let moco = tiny_config(Mode::MocoBaseline, 11);
        assert!(matches!(
            Trainer::resume(&dataset, &split, &moco, ckpt),
            Err(Error::InvalidState(_))
        ));
    }
}
