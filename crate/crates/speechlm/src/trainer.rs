//! The training engine: weighted multi-task sampling, length filtering, the
//! staged curriculum, epoch-wise validation with early stopping, and
//! best-checkpoint retention.
//!
//! Stage order is fixed: align (downsampler and combiner only, transcription
//! data), adapter warmup (adapters appear with a zero delta, transcription
//! data), then multitask. Optimizer state is rebuilt at each stage boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{invalid_arg, Error, Result};
use crate::model::{CurriculumStage, MultimodalModel};
use crate::optim::{AdamConfig, OptimizerState, ParamSet};
use crate::tasks::TaskSample;
use crate::tensor::Tensor;

pub const TRAIN_RNG_STREAM: u64 = 2;
pub const SPLIT_RNG_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_audio_frames: usize,
    pub max_label_tokens: usize,
    pub patience_epochs: usize,
    pub validation_fraction: f64,
    pub stage1_steps: usize,
    pub stage2_warmup_steps: usize,
    pub stage2_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 2e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            batch_size: 8,
            max_audio_frames: 900,
            max_label_tokens: 600,
            patience_epochs: 5,
            validation_fraction: 0.05,
            stage1_steps: 300,
            stage2_warmup_steps: 100,
            stage2_steps: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.peak_lr <= 0.0 || self.warmup_steps == 0 {
            invalid_arg!("batch size, peak lr, and warmup must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) || self.validation_fraction == 0.0 {
            invalid_arg!("validation_fraction must lie in (0, 1)");
        }
        if self.patience_epochs == 0 {
            invalid_arg!("patience_epochs must be >= 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Keep a sample unless its audio or label exceeds the length limits
/// (strictly greater drops).
pub fn filter_sample(s: &TaskSample, cfg: &TrainConfig) -> bool {
    s.audio.rows() <= cfg.max_audio_frames && s.label_ids.len() <= cfg.max_label_tokens
}

#[derive(Debug)]
pub struct RegistryTask {
    pub task_id: String,
    pub weight: f64,
    pub train: Vec<TaskSample>,
    pub valid: Vec<TaskSample>,
}

/// Task datasets after length filtering and the deterministic validation
/// holdout.
#[derive(Debug)]
pub struct TaskRegistry {
    pub tasks: Vec<RegistryTask>,
}

impl TaskRegistry {
    /// Filter and split per task. The validation holdout is a seeded shuffle
    /// prefix, so it is disjoint from the training rows and stable across
    /// epochs for a fixed seed.
    pub fn new(tasks: Vec<(String, f64, Vec<TaskSample>)>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            invalid_arg!("registry needs at least one task");
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SPLIT_RNG_STREAM);
        let mut out = Vec::with_capacity(tasks.len());
        for (task_id, weight, samples) in tasks {
            if weight < 0.0 {
                invalid_arg!("task {task_id} has negative weight {weight}");
            }
            let kept: Vec<TaskSample> = samples.into_iter().filter(|s| filter_sample(s, cfg)).collect();
            if kept.is_empty() {
                invalid_arg!("task {task_id} has no samples after length filtering");
            }
            let mut order: Vec<usize> = (0..kept.len()).collect();
            // Fisher-Yates with the split stream.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let n_val = ((kept.len() as f64 * cfg.validation_fraction).ceil() as usize)
                .clamp(1, kept.len().saturating_sub(1).max(1));
            let mut train = Vec::with_capacity(kept.len() - n_val);
            let mut valid = Vec::with_capacity(n_val);
            for (rank, idx) in order.iter().enumerate() {
                if rank < n_val {
                    valid.push(kept[*idx].clone());
                } else {
                    train.push(kept[*idx].clone());
                }
            }
            out.push(RegistryTask {
                task_id,
                weight,
                train,
                valid,
            });
        }
        Ok(TaskRegistry { tasks: out })
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.tasks.iter().map(|t| t.task_id.as_str()).collect()
    }

    fn active_indices(&self, stage: CurriculumStage) -> Vec<usize> {
        self.tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| !stage.asr_only() || t.task_id == "asr")
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draw one batch: each slot picks task `t` with probability proportional to
/// `weight_t * n_t`, then a uniform sample within that task.
pub fn sample_batch<'r>(
    registry: &'r TaskRegistry,
    active: &[usize],
    batch_size: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<&'r TaskSample>> {
    let mut cum = Vec::with_capacity(active.len());
    let mut total = 0.0;
    for &i in active {
        let t = &registry.tasks[i];
        total += t.weight * t.train.len() as f64;
        cum.push(total);
    }
    if total <= 0.0 {
        return Err(Error::InvalidState(
            "no active task has positive sampling mass".into(),
        ));
    }
    let mut batch = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let u = rng.gen_range(0.0..total);
        let slot = cum.partition_point(|&c| c <= u).min(active.len() - 1);
        let task = &registry.tasks[active[slot]];
        let idx = rng.gen_range(0..task.train.len());
        batch.push(&task.train[idx]);
    }
    Ok(batch)
}

/// Move the model to `to`, which must be strictly after `from`.
pub fn transition_stage(
    model: &mut MultimodalModel,
    from: Option<CurriculumStage>,
    to: CurriculumStage,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    if let Some(f) = from {
        if to <= f {
            return Err(Error::InvalidState(format!(
                "curriculum transitions only move forward (requested {} -> {})",
                f.name(),
                to.name()
            )));
        }
    }
    model.apply_stage(to, rng)
}

#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: CurriculumStage,
    pub split: String,
    pub loss: f64,
    pub extras: Vec<(String, f64)>,
}

impl MetricRecord {
    /// One plain-text history line: `step, stage, split, loss[, key=value]*`.
    pub fn to_line(&self) -> String {
        let mut line = format!(
            "{}, {}, {}, {:.12e}",
            self.step,
            self.stage.name(),
            self.split,
            self.loss
        );
        for (k, v) in &self.extras {
            line.push_str(&format!(", {k}={v:.12e}"));
        }
        line
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub history: Vec<MetricRecord>,
    pub stage_log: Vec<(u64, CurriculumStage)>,
    pub final_step: u64,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    /// Sampler state at the end of the run, for checkpointing.
    pub rng: crate::checkpoint::RngState,
}

pub fn history_text(history: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

fn validation_loss(
    model: &MultimodalModel,
    registry: &TaskRegistry,
    active: &[usize],
) -> Result<(f64, Vec<(String, f64)>)> {
    let mut extras = Vec::new();
    let mut total = 0.0;
    let mut count = 0usize;
    for &i in active {
        let task = &registry.tasks[i];
        if task.valid.is_empty() {
            continue;
        }
        let mut task_total = 0.0;
        for s in &task.valid {
            let target = s.target_ids(model.cfg.lm.eos_id);
            task_total += model.nll(Some(&s.audio), &s.prompt_ids, &target)?;
        }
        total += task_total;
        count += task.valid.len();
        extras.push((task.task_id.clone(), task_total / task.valid.len() as f64));
    }
    if count == 0 {
        invalid_arg!("no validation samples for the active task set");
    }
    Ok((total / count as f64, extras))
}

/// Run the full curriculum. On success the model holds the best-validation
/// parameters seen during the multitask stage (or the final parameters if
/// that stage never validated).
pub fn run(
    model: &mut MultimodalModel,
    registry: &TaskRegistry,
    cfg: &TrainConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_RNG_STREAM);

    let stages = [
        (CurriculumStage::Stage1Align, cfg.stage1_steps),
        (CurriculumStage::Stage2Warmup, cfg.stage2_warmup_steps),
        (CurriculumStage::Stage2Multitask, cfg.stage2_steps),
    ];

    let mut history = Vec::new();
    let mut stage_log = Vec::new();
    let mut global_step: u64 = 0;
    let mut prev_stage: Option<CurriculumStage> = None;
    let mut best: Option<(f64, ParamSet)> = None;
    let mut stopped_early = false;

    for (stage, budget) in stages {
        transition_stage(model, prev_stage, stage, &mut rng)?;
        prev_stage = Some(stage);
        stage_log.push((global_step, stage));

        let active = registry.active_indices(stage);
        if active.is_empty() {
            invalid_arg!("stage {} has no usable tasks (asr data required)", stage.name());
        }
        let train_count: usize = active.iter().map(|&i| registry.tasks[i].train.len()).sum();
        let epoch_len = (train_count + cfg.batch_size - 1) / cfg.batch_size;
        let epoch_len = epoch_len.max(1);

        let mut opt = OptimizerState::new(cfg.adam());
        let mut since_best = 0usize;

        for step_in_stage in 0..budget {
            let batch = sample_batch(registry, &active, cfg.batch_size, &mut rng)?;
            let rows: Vec<(&Tensor, Vec<usize>, Vec<usize>)> = batch
                .iter()
                .map(|s| (&s.audio, s.prompt_ids.clone(), s.target_ids(model.cfg.lm.eos_id)))
                .collect();
            let refs: Vec<(&Tensor, &[usize], &[usize])> = rows
                .iter()
                .map(|(a, p, t)| (*a, p.as_slice(), t.as_slice()))
                .collect();
            let (loss, grads) = model.batch_loss_and_grads(&refs)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss is not finite at step {global_step}"
                )));
            }
            opt.adamw_step(&mut model.params, &grads)?;
            global_step += 1;
            history.push(MetricRecord {
                step: global_step,
                stage,
                split: "train".into(),
                loss,
                extras: vec![],
            });

            let end_of_epoch = (step_in_stage + 1) % epoch_len == 0;
            let end_of_stage = step_in_stage + 1 == budget;
            if end_of_epoch || end_of_stage {
                let (val, extras) = validation_loss(model, registry, &active)?;
                history.push(MetricRecord {
                    step: global_step,
                    stage,
                    split: "valid".into(),
                    loss: val,
                    extras,
                });
                if stage == CurriculumStage::Stage2Multitask {
                    let improved = best.as_ref().map_or(true, |(b, _)| val < *b);
                    if improved {
                        best = Some((val, model.params.clone()));
                        since_best = 0;
                    } else {
                        since_best += 1;
                        if since_best >= cfg.patience_epochs {
                            stopped_early = true;
                        }
                    }
                }
            }
            if stopped_early {
                break;
            }
        }
        if stopped_early {
            break;
        }
    }

    let best_valid_loss = match best {
        Some((loss, params)) => {
            model.params = params;
            loss
        }
        None => f64::NAN,
    };
    Ok(RunOutcome {
        history,
        stage_log,
        final_step: global_step,
        best_valid_loss,
        stopped_early,
        rng: crate::checkpoint::RngState::capture(&rng),
    })
}
