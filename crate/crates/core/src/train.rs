//! Three-phase training procedure, schedulers, loss, and evaluation.
//!
//! Every phase runs Adam with label-smoothed cross entropy (smoothing 0.1)
//! under a cosine annealing schedule with warm restarts (period 5 epochs,
//! eta_min 0) times a linear warmup; phase 3 chains a halve-on-plateau
//! factor driven by validation loss. The learning rate at global step `s` is
//!
//! `lr(s) = warmup(s) * cosine(s / steps_per_epoch) * 0.5^reductions`
//!
//! and is logged per step so the trace can be replayed in closed form.
//! Cosine progress is continuous within epochs.
//!
//! Frozen parameter groups are excluded from the optimizer entirely, and a
//! frozen front-end also runs its batchnorm in eval mode, so frozen values
//! and buffers are bit-identical across a phase. Per-clip augmentation RNG
//! derives from `(seed, clip_id, phase, epoch)`, so worker parallelism in
//! data preparation cannot change results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::config::{DataConfig, PhasePlan};
use crate::data::{clip_rng, Clip, LrwDataset, Split};
use crate::error::{Error, Result};
use crate::model::SpotFastModel;
use crate::preprocess::{self, AugmentParams};
use crate::windowing::window_start;

pub const LABEL_SMOOTHING: f64 = 0.1;
/// Cosine restart period in epochs (restart multiplier 1, so every cycle has
/// the same length).
pub const COSINE_PERIOD_EPOCHS: f64 = 5.0;
pub const PLATEAU_FACTOR: f64 = 2.0;

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Label-smoothed cross entropy:
/// `mean_b( -sum_k q_k log softmax(logits)_k )` with
/// `q = (1-eps) * onehot + eps/K`.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape(format!(
            "loss wants [B, K] logits with B == targets, got {shape:?} vs {}",
            targets.len()
        )));
    }
    let (b, k) = (shape[0], shape[1]);
    if k < 2 {
        return Err(Error::InvalidArgument("loss needs at least 2 classes".into()));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "smoothing {eps} outside [0, 1)"
        )));
    }
    if g.value(logits).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    for &t in targets {
        if t >= k {
            return Err(Error::InvalidArgument(format!("target {t} out of {k}")));
        }
    }
    let mut q = ArrayD::from_elem(IxDyn(&[b, k]), eps / k as f64);
    for (row, &t) in targets.iter().enumerate() {
        q[[row, t]] += 1.0 - eps;
    }
    let log_probs = g.log_softmax_last(logits);
    let qv = g.leaf(q);
    let weighted = g.mul(log_probs, qv);
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Entropy of the smoothed target distribution; the attainable lower bound
/// of [`label_smoothed_ce`].
pub fn smoothed_target_entropy(k: usize, eps: f64) -> f64 {
    let top = 1.0 - eps + eps / k as f64;
    let rest = eps / k as f64;
    let mut h = -top * top.ln();
    if eps > 0.0 {
        h -= (k - 1) as f64 * rest * rest.ln();
    }
    h
}

// ---------------------------------------------------------------------------
// Schedulers
// ---------------------------------------------------------------------------

/// Cosine annealing with warm restarts at fixed period
/// [`COSINE_PERIOD_EPOCHS`] and restart multiplier 1:
/// `eta_min + (lr0 - eta_min) * (1 + cos(pi * t_cur / T0)) / 2` with
/// `t_cur = progress mod T0`.
pub fn cosine_warm_restart_lr(epoch_progress: f64, eta_min: f64, lr0: f64) -> f64 {
    let t_cur = epoch_progress.rem_euclid(COSINE_PERIOD_EPOCHS);
    eta_min
        + (lr0 - eta_min) * 0.5 * (1.0 + (std::f64::consts::PI * t_cur / COSINE_PERIOD_EPOCHS).cos())
}

/// Linear warmup: `scheduled * min(1, step / warmup_steps)`; zero warmup
/// steps disable warmup.
pub fn warmup_lr(step: usize, warmup_steps: usize, scheduled_lr: f64) -> f64 {
    if warmup_steps == 0 {
        return scheduled_lr;
    }
    scheduled_lr * 1f64.min(step as f64 / warmup_steps as f64)
}

/// Replays a validation-loss history: every `patience` consecutive
/// evaluations without a new best loss halve the rate once.
pub fn plateau_reductions(val_losses: &[f64], patience: usize) -> u32 {
    let mut best = f64::INFINITY;
    let mut since = 0usize;
    let mut reductions = 0u32;
    for &loss in val_losses {
        if loss < best {
            best = loss;
            since = 0;
        } else {
            since += 1;
            if since >= patience {
                reductions += 1;
                since = 0;
            }
        }
    }
    reductions
}

/// Plateau-adjusted rate after replaying the full history. Composes
/// multiplicatively with the cosine schedule.
pub fn plateau_reduce(lr: f64, val_losses: &[f64], factor: f64, patience: usize) -> f64 {
    lr / factor.powi(plateau_reductions(val_losses, patience) as i32)
}

/// The full composed schedule at one step.
pub fn scheduled_lr(
    plan: &PhasePlan,
    step: usize,
    steps_per_epoch: usize,
    reductions: u32,
) -> f64 {
    let progress = step as f64 / steps_per_epoch as f64;
    let cos_lr = cosine_warm_restart_lr(progress, 0.0, plan.lr0);
    let plat_lr = cos_lr / PLATEAU_FACTOR.powi(reductions as i32);
    warmup_lr(step, plan.warmup_steps, plat_lr)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with L2 weight decay folded into the gradient at update time (the
/// stored `grad` fields are left untouched, so sparsity diagnostics see the
/// raw backward result).
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(ps: &crate::nn::ParamStore, weight_decay: f64) -> Self {
        let (m, v) = ps
            .entries()
            .map(|(_, e)| {
                (
                    ArrayD::zeros(e.value.raw_dim()),
                    ArrayD::zeros(e.value.raw_dim()),
                )
            })
            .unzip();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, ps: &mut crate::nn::ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, entry) in ps.entries_mut().enumerate() {
            if !entry.trainable() {
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((theta, g0), (mi, vi)) in entry
                .value
                .iter_mut()
                .zip(entry.grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g0 + self.weight_decay * *theta;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *theta -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// One prepared batch: model inputs plus labels and the augmentation draws.
pub struct Batch {
    pub window: ArrayD<f64>,
    pub full: ArrayD<f64>,
    pub labels: Vec<usize>,
    pub augment: Vec<(String, AugmentParams)>,
}

fn pipeline_eval(clip: &Clip, data: &DataConfig) -> Result<ndarray::Array4<f32>> {
    let cropped = match data.mouth_crop {
        Some(cbox) => preprocess::crop_mouth(clip, cbox)?,
        None => clip.clone(),
    };
    let gray = if data.grayscale {
        preprocess::to_grayscale(&cropped)
    } else {
        cropped
    };
    let normalized = preprocess::normalize(&gray);
    let out = preprocess::eval_transform(&normalized, &data.augment);
    Ok(out.pixels.to_f32_unit())
}

fn pipeline_train(
    clip: &Clip,
    data: &DataConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ndarray::Array4<f32>, AugmentParams)> {
    let cropped = match data.mouth_crop {
        Some(cbox) => preprocess::crop_mouth(clip, cbox)?,
        None => clip.clone(),
    };
    let gray = if data.grayscale {
        preprocess::to_grayscale(&cropped)
    } else {
        cropped
    };
    let normalized = preprocess::normalize(&gray);
    let (out, params) = preprocess::train_augment(&normalized, rng, &data.augment);
    Ok((out.pixels.to_f32_unit(), params))
}

fn stack_batch(
    frames: &[ndarray::Array4<f32>],
    window_size: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let b = frames.len();
    let (t, h, w, c) = frames[0].dim();
    let mut full = ArrayD::zeros(IxDyn(&[b, c, t, h, w]));
    for (bi, f) in frames.iter().enumerate() {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        full[[bi, ch, ti, y, x]] = f[[ti, y, x, ch]] as f64;
                    }
                }
            }
        }
    }
    let start = window_start(t, window_size);
    let window = full
        .slice(ndarray::s![.., .., start..start + window_size, .., ..])
        .to_owned()
        .into_dyn();
    (window, full)
}

/// Builds a training batch. Augmentation randomness is a pure function of
/// `(seed, clip_id, phase, epoch)`, so clips can be prepared in parallel.
pub fn prepare_train_batch(
    clips: &[&Clip],
    data: &DataConfig,
    window_size: usize,
    seed: u64,
    phase: u32,
    epoch: usize,
) -> Result<Batch> {
    let stream = ((phase as u64) << 32) | epoch as u64;
    let prepared: Result<Vec<_>> = clips
        .par_iter()
        .map(|clip| {
            let mut rng = clip_rng(seed, &clip.clip_id, stream);
            pipeline_train(clip, data, &mut rng)
                .map(|(frames, params)| (frames, params, clip.clip_id.clone(), clip.label))
        })
        .collect();
    let prepared = prepared?;
    let frames: Vec<_> = prepared.iter().map(|(f, _, _, _)| f.clone()).collect();
    let (window, full) = stack_batch(&frames, window_size);
    Ok(Batch {
        window,
        full,
        labels: prepared.iter().map(|(_, _, _, l)| *l).collect(),
        augment: prepared
            .iter()
            .map(|(_, p, id, _)| (id.clone(), *p))
            .collect(),
    })
}

pub fn prepare_eval_batch(
    clips: &[&Clip],
    data: &DataConfig,
    window_size: usize,
) -> Result<Batch> {
    let prepared: Result<Vec<_>> = clips
        .par_iter()
        .map(|clip| pipeline_eval(clip, data).map(|f| (f, clip.label)))
        .collect();
    let prepared = prepared?;
    let frames: Vec<_> = prepared.iter().map(|(f, _)| f.clone()).collect();
    let (window, full) = stack_batch(&frames, window_size);
    Ok(Batch {
        window,
        full,
        labels: prepared.iter().map(|(_, l)| *l).collect(),
        augment: Vec::new(),
    })
}

fn shuffled_indices(n: usize, seed: u64, phase: u32, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((phase as u64) << 48) ^ ((epoch as u64) << 16) ^ 0x51ab_71ed,
    );
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Phase runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetric {
    pub phase: u32,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub log_augment: bool,
    /// Epoch-budget override (the plan's value otherwise).
    pub epochs_override: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub metrics: Vec<StepMetric>,
    pub steps_per_epoch: usize,
    /// Plateau reductions active during each epoch.
    pub reductions_by_epoch: Vec<u32>,
    pub val_loss_history: Vec<f64>,
    pub val_acc_history: Vec<f64>,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

fn batch_accuracy(logits: &ArrayD<f64>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &label) in logits.rows().into_iter().zip(labels.iter()) {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Mean eval-mode loss and top-1 accuracy over a clip list.
pub fn evaluate_clips(
    model: &mut SpotFastModel,
    clips: &[Clip],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::Prerequisite("evaluation split is empty".into()));
    }
    let data = model.cfg.data.clone();
    let window_size = model.cfg.backbone.window_size;
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in clips.chunks(batch_size) {
        let refs: Vec<&Clip> = chunk.iter().collect();
        let batch = prepare_eval_batch(&refs, &data, window_size)?;
        let mut g = Graph::new(false, 0);
        let wv = g.leaf(batch.window.clone());
        let fv = g.leaf(batch.full.clone());
        let logits = model.forward(&mut g, wv, fv, false)?;
        let loss = label_smoothed_ce(&mut g, logits, &batch.labels, LABEL_SMOOTHING)?;
        loss_sum += g.value(loss)[0];
        batches += 1;
        correct += (batch_accuracy(g.value(logits), &batch.labels)
            * batch.labels.len() as f64)
            .round() as usize;
    }
    Ok((loss_sum / batches as f64, correct as f64 / clips.len() as f64))
}

/// Top-1 accuracy of a model on one dataset split, eval transforms,
/// deterministic.
pub fn evaluate(model: &mut SpotFastModel, root: &Path, split: Split) -> Result<f64> {
    let dataset = LrwDataset::open(root, split, Some(model.cfg.data.frames))?;
    let (clips, _) = dataset.load_all()?;
    if clips.is_empty() {
        return Err(Error::Prerequisite(format!("split {split} has no clips")));
    }
    let (_, acc) = evaluate_clips(model, &clips, 16)?;
    Ok(acc)
}

fn dump_diagnostics(
    out_dir: &Path,
    phase: u32,
    step: usize,
    lr: f64,
    model: &SpotFastModel,
) -> PathBuf {
    let grads: Vec<serde_json::Value> = model
        .ps
        .entries()
        .map(|(_, e)| {
            let norm: f64 = e.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            let finite = e.value.iter().all(|v| v.is_finite());
            serde_json::json!({"name": e.name, "grad_norm": norm, "values_finite": finite})
        })
        .collect();
    let path = out_dir.join(format!("diagnostic_phase{phase}_step{step}.json"));
    let doc = serde_json::json!({"phase": phase, "step": step, "lr": lr, "params": grads});
    let _ = fs::write(&path, serde_json::to_string_pretty(&doc).unwrap());
    path
}

/// Runs one training phase: frozen groups per the plan, Adam, the composed
/// schedule, per-step JSONL metrics, a checkpoint per epoch, and validation
/// after every epoch. A non-finite loss aborts with a diagnostic dump.
pub fn run_phase(
    model: &mut SpotFastModel,
    plan: &PhasePlan,
    opts: &TrainOptions,
) -> Result<PhaseOutcome> {
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let train_set = LrwDataset::open(&opts.data_root, Split::Train, Some(model.cfg.data.frames))?;
    let (train_clips, skipped) = train_set.load_all()?;
    if skipped > 0 {
        eprintln!("warning: {skipped} training clips skipped for frame-count mismatch");
    }
    if train_clips.is_empty() {
        return Err(Error::Prerequisite("train split has no clips".into()));
    }
    let val_clips = LrwDataset::open(&opts.data_root, Split::Val, Some(model.cfg.data.frames))
        .and_then(|d| d.load_all())
        .map(|(c, _)| c)
        .unwrap_or_default();

    model.unfreeze_all();
    model.freeze(&plan.frozen);
    let epochs = opts.epochs_override.unwrap_or(plan.epochs);
    let steps_per_epoch = train_clips.len().div_ceil(plan.batch_size);
    let mut optimizer = Adam::new(&model.ps, plan.weight_decay);

    let metrics_path = opts
        .out_dir
        .join(format!("metrics_phase{}.jsonl", plan.phase_id));
    let mut metrics_file =
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut augment_file = if opts.log_augment {
        let p = opts
            .out_dir
            .join(format!("augment_phase{}.jsonl", plan.phase_id));
        Some(fs::File::create(&p).map_err(|e| Error::io(&p, e))?)
    } else {
        None
    };

    let mut metrics = Vec::new();
    let mut val_loss_history: Vec<f64> = Vec::new();
    let mut val_acc_history: Vec<f64> = Vec::new();
    let mut reductions_by_epoch = Vec::new();
    let mut global_step = 0usize;
    let data_cfg = model.cfg.data.clone();
    let window_size = model.cfg.backbone.window_size;

    for epoch in 0..epochs {
        let reductions = if plan.plateau {
            plateau_reductions(&val_loss_history, plan.plateau_patience)
        } else {
            0
        };
        reductions_by_epoch.push(reductions);
        let order = shuffled_indices(train_clips.len(), opts.seed, plan.phase_id, epoch);
        for chunk in order.chunks(plan.batch_size) {
            let refs: Vec<&Clip> = chunk.iter().map(|&i| &train_clips[i]).collect();
            let batch = prepare_train_batch(
                &refs,
                &data_cfg,
                window_size,
                opts.seed,
                plan.phase_id,
                epoch,
            )?;
            let lr = scheduled_lr(plan, global_step, steps_per_epoch, reductions);

            model.ps.zero_grads();
            let graph_seed = opts.seed
                ^ ((plan.phase_id as u64) << 40)
                ^ ((global_step as u64) << 1)
                ^ 0x7ea1;
            let mut g = Graph::new(true, graph_seed);
            let wv = g.leaf(batch.window.clone());
            let fv = g.leaf(batch.full.clone());
            let logits = model.forward(&mut g, wv, fv, true)?;
            let loss = match label_smoothed_ce(&mut g, logits, &batch.labels, LABEL_SMOOTHING) {
                Ok(l) => l,
                Err(Error::Numeric(msg)) => {
                    let dump =
                        dump_diagnostics(&opts.out_dir, plan.phase_id, global_step, lr, model);
                    return Err(Error::Numeric(format!(
                        "{msg} at phase {} step {global_step}; diagnostics at {}",
                        plan.phase_id,
                        dump.display()
                    )));
                }
                Err(other) => return Err(other),
            };
            let loss_value = g.value(loss)[0];
            if !loss_value.is_finite() {
                let dump = dump_diagnostics(&opts.out_dir, plan.phase_id, global_step, lr, model);
                return Err(Error::Numeric(format!(
                    "non-finite loss at phase {} step {global_step}; diagnostics at {}",
                    plan.phase_id,
                    dump.display()
                )));
            }
            let grads = g.backward(loss);
            model.ps.accumulate_grads(&g, &grads);
            optimizer.step(&mut model.ps, lr);

            let metric = StepMetric {
                phase: plan.phase_id,
                step: global_step,
                lr,
                loss: loss_value,
                acc: batch_accuracy(g.value(logits), &batch.labels),
            };
            writeln!(metrics_file, "{}", serde_json::to_string(&metric).unwrap())
                .map_err(|e| Error::io(&metrics_path, e))?;
            if let Some(f) = augment_file.as_mut() {
                for (clip_id, params) in &batch.augment {
                    let line = serde_json::json!({
                        "clip_id": clip_id,
                        "epoch": epoch,
                        "upsample": params.upsample,
                        "top": params.top,
                        "left": params.left,
                        "flip": params.flip,
                    });
                    writeln!(f, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
                }
            }
            metrics.push(metric);
            global_step += 1;
        }

        if !val_clips.is_empty() {
            let (val_loss, val_acc) = evaluate_clips(model, &val_clips, plan.batch_size.max(8))?;
            val_loss_history.push(val_loss);
            val_acc_history.push(val_acc);
        }
        let ckpt = opts
            .out_dir
            .join(format!("phase{}_epoch{epoch}.sfckpt", plan.phase_id));
        model.save(&ckpt, plan.phase_id, epoch)?;
    }

    let final_checkpoint = opts
        .out_dir
        .join(format!("phase{}_final.sfckpt", plan.phase_id));
    model.save(&final_checkpoint, plan.phase_id, epochs.saturating_sub(1))?;
    Ok(PhaseOutcome {
        metrics,
        steps_per_epoch,
        reductions_by_epoch,
        val_loss_history,
        val_acc_history,
        final_checkpoint,
        metrics_path,
    })
}
