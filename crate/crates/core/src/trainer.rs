//! Multi-objective training loop.
//!
//! Every batch yields one focal and one contrastive loss per label. Each
//! loss gets its own backward pass; the shared-parameter gradients are
//! combined with min-norm simplex weights and head parameters take their own
//! task's gradient unchanged.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Parameters, Tape, Tensor};
use crate::encoder::EncodedDataset;
use crate::error::{Error, Result};
use crate::metrics::{metric_report, MetricReport};
use crate::mgda::{min_norm_solve, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::model::{AuxTokenSource, FusionModel, SampleInput};
use crate::objectives::{
    contrastive_loss, contrastive_on_tape, focal_mean, focal_on_tape, valid_anchor_count, ContrastParams,
    FocalParams,
};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::seed;
use crate::split::validate_fractions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub adamw: AdamWConfig,
    pub mgda_max_iters: usize,
    pub mgda_tol: f64,
    /// Divide each task gradient by its norm before the min-norm solve.
    pub normalize_gradients: bool,
    /// Steps whose combined squared norm falls at or below this are skipped.
    pub degenerate_tol: f64,
    /// Tasks whose gradient norm is below this fraction of the largest task
    /// gradient norm in the batch sit out the min-norm solve.
    pub vanishing_ratio: f64,
    pub focal_gamma: f64,
    /// Per-label focal weights; balanced from the training labels when absent.
    pub focal_alpha: Option<Vec<f64>>,
    pub contrast: ContrastParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 256,
            learning_rate: 0.003,
            batch_size: 64,
            seed: 0,
            split_fractions: [0.8, 0.1, 0.1],
            adamw: AdamWConfig::default(),
            mgda_max_iters: DEFAULT_MAX_ITERS,
            mgda_tol: DEFAULT_TOL,
            normalize_gradients: false,
            degenerate_tol: 1e-16,
            vanishing_ratio: 1e-8,
            focal_gamma: 2.0,
            focal_alpha: None,
            contrast: ContrastParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Validation(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.mgda_max_iters == 0 || !(self.mgda_tol.is_finite() && self.mgda_tol > 0.0) {
            return Err(Error::Validation("mgda_max_iters and mgda_tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.vanishing_ratio) {
            return Err(Error::Validation(format!("vanishing_ratio must lie in [0, 1), got {}", self.vanishing_ratio)));
        }
        validate_fractions(self.split_fractions)?;
        self.contrast.validate()?;
        FocalParams {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha.clone().unwrap_or_default(),
        }
        .validate()
    }
}

/// Model-ready rows: an embedding table plus per-row token references,
/// optional aux tokens, labels and subject ids.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub table: Tensor,
    pub samples: Vec<SampleInput>,
    pub labels: Vec<Vec<Option<bool>>>,
    pub subjects: Vec<String>,
    pub label_names: Vec<String>,
}

impl TrainData {
    /// `include_table = false` drops the tabular tokens (aux-only input).
    pub fn from_encoded(
        enc: &EncodedDataset,
        aux: Option<&AuxTokenSource>,
        include_table: bool,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if label_names.len() != enc.num_labels {
            return Err(Error::structure(
                "train_data",
                format!("{} label names for {} labels", label_names.len(), enc.num_labels),
            ));
        }
        let samples = enc
            .rows
            .iter()
            .zip(&enc.subjects)
            .map(|(toks, s)| SampleInput {
                tokens: if include_table { toks.clone() } else { Vec::new() },
                aux: aux.map(|a| a.tokens(s)).unwrap_or_default(),
            })
            .collect();
        Ok(TrainData {
            table: enc.table.clone(),
            samples,
            labels: enc.labels.clone(),
            subjects: enc.subjects.clone(),
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn subset(&self, idx: &[usize]) -> TrainData {
        TrainData {
            table: self.table.clone(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
            label_names: self.label_names.clone(),
        }
    }
}

/// Task order: focal for labels `0..L`, then contrastive for labels `0..L`.
pub fn task_names(label_names: &[String]) -> Vec<String> {
    label_names
        .iter()
        .map(|n| format!("{n}/focal"))
        .chain(label_names.iter().map(|n| format!("{n}/contrastive")))
        .collect()
}

/// Per-parameter update direction: `sum_t w_t g_t` on shared parameters and
/// the plain sum of task gradients on non-shared ones. Each non-shared
/// parameter belongs to a single task, so that sum is its own task's gradient.
pub fn combine_gradients(params: &Parameters, task_grads: &[&Gradients], weights: &[f64]) -> Vec<Vec<f64>> {
    params
        .iter()
        .map(|p| {
            let mut acc = vec![0.0; p.value.len()];
            for (g, &w) in task_grads.iter().zip(weights) {
                let gp = g.by_name(&p.name).expect("every parameter is bound on the tape");
                let w = if p.shared { w } else { 1.0 };
                if w != 0.0 {
                    acc.iter_mut().zip(gp).for_each(|(a, b)| *a += w * b);
                }
            }
            acc
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Simplex weight per task; inactive tasks get 0.
    pub alpha: Vec<f64>,
    pub losses: Vec<f64>,
    pub active: Vec<bool>,
    pub norm_sq: f64,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seed: u64,
    pub steps: usize,
    pub skipped_steps: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub per_label_auroc: Vec<(String, Option<f64>)>,
    pub val_macro: crate::metrics::MacroMetrics,
    pub tasks: Vec<String>,
    pub alpha: AlphaStats,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub probs: Vec<Vec<f64>>,
    pub report: MetricReport,
    pub focal: f64,
    pub contrastive: f64,
}

impl Evaluation {
    /// Mean focal plus mean contrastive loss over labels.
    pub fn loss(&self) -> f64 {
        self.focal + self.contrastive
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: Option<f64>,
    pub best_params: Parameters,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub focal: FocalParams,
    optimizer: AdamW,
    total_steps: usize,
    step: usize,
    /// Subjects whose rows may not enter a gradient step.
    pub forbidden_subjects: HashSet<String>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &FusionModel, train: &TrainData) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Precondition("training split is empty".into()));
        }
        let l = model.config.num_labels;
        if train.num_labels() != l {
            return Err(Error::structure(
                "train",
                format!("data has {} labels, model has {l}", train.num_labels()),
            ));
        }
        let focal = match &config.focal_alpha {
            Some(a) if a.len() != l => {
                return Err(Error::Validation(format!("focal_alpha has {} entries for {l} labels", a.len())));
            }
            Some(a) => FocalParams {
                gamma: config.focal_gamma,
                alpha: a.clone(),
            },
            None => FocalParams::balanced(&train.labels, l, config.focal_gamma),
        };
        let total_steps = config.epochs * train.len().div_ceil(config.batch_size);
        Ok(Trainer {
            optimizer: AdamW::new(config.adamw, &model.params),
            config,
            focal,
            total_steps,
            step: 0,
            forbidden_subjects: HashSet::new(),
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One multi-objective update on the rows `batch` of `data`.
    pub fn train_step(&mut self, model: &mut FusionModel, data: &TrainData, batch: &[usize]) -> Result<StepStats> {
        if let Some(&r) = batch.iter().find(|&&r| self.forbidden_subjects.contains(&data.subjects[r])) {
            return Err(Error::Leakage(format!(
                "row {r} of held-out subject `{}` reached a gradient step",
                data.subjects[r]
            )));
        }
        let lr = cosine_lr(self.config.learning_rate, self.step, self.total_steps);
        self.step += 1;
        let samples: Vec<SampleInput> = batch.iter().map(|&i| data.samples[i].clone()).collect();
        let l = model.config.num_labels;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &data.table, &samples)?;
        let mut losses = Vec::with_capacity(2 * l);
        let mut active = Vec::with_capacity(2 * l);
        let col = |k: usize| -> Vec<Option<bool>> { batch.iter().map(|&i| data.labels[i][k]).collect() };
        for k in 0..l {
            let y = col(k);
            losses.push(focal_on_tape(&mut tape, fwd.probs[k], &y, self.focal.alpha[k], self.focal.gamma)?);
            active.push(y.iter().any(|v| v.is_some()));
        }
        for k in 0..l {
            let y = col(k);
            losses.push(contrastive_on_tape(&mut tape, fwd.reps[k], &y, &self.config.contrast)?);
            active.push(valid_anchor_count(&y) > 0);
        }
        let values: Vec<f64> = losses.iter().map(|&v| tape.scalar(v)).collect();
        if let Some(t) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss for task {} at step {}",
                task_names(&data.label_names)[t],
                self.step
            )));
        }
        let idx: Vec<usize> = (0..2 * l).filter(|&t| active[t]).collect();
        let mut alpha = vec![0.0; 2 * l];
        if idx.is_empty() {
            return Ok(StepStats {
                alpha,
                losses: values,
                active,
                norm_sq: 0.0,
                skipped: true,
            });
        }
        let chosen: Vec<_> = idx.iter().map(|&t| losses[t]).collect();
        let tg = tape.grad_per_task(&chosen)?;
        let norms: Vec<f64> = tg.shared.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let floor = self.config.vanishing_ratio * norms.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..idx.len()).filter(|&j| norms[j] > floor).collect();
        if keep.len() < idx.len() {
            log::debug!("step {}: {} vanishing task gradients left out", self.step, idx.len() - keep.len());
        }
        let idx: Vec<usize> = keep.iter().map(|&j| idx[j]).collect();
        let full: Vec<&Gradients> = keep.iter().map(|&j| &tg.full[j]).collect();
        let mut shared: Vec<Vec<f64>> = keep.iter().map(|&j| tg.shared[j].clone()).collect();
        if shared.is_empty() {
            return Ok(StepStats {
                alpha,
                losses: values,
                active,
                norm_sq: 0.0,
                skipped: true,
            });
        }
        let mut scale = vec![1.0; shared.len()];
        if self.config.normalize_gradients {
            for (g, s) in shared.iter_mut().zip(scale.iter_mut()) {
                let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    *s = 1.0 / n;
                    g.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        let sol = min_norm_solve(&shared, self.config.mgda_max_iters, self.config.mgda_tol)?;
        for (j, &t) in idx.iter().enumerate() {
            alpha[t] = sol.alpha[j];
        }
        if sol.norm_sq <= self.config.degenerate_tol {
            log::info!("step {}: combined gradient norm^2 {:.3e}, update skipped", self.step, sol.norm_sq);
            return Ok(StepStats {
                alpha,
                losses: values,
                active,
                norm_sq: sol.norm_sq,
                skipped: true,
            });
        }
        let weights: Vec<f64> = sol.alpha.iter().zip(&scale).map(|(a, s)| a * s).collect();
        let grads = combine_gradients(&model.params, &full, &weights);
        self.optimizer.step(&mut model.params, &grads, lr)?;
        Ok(StepStats {
            alpha,
            losses: values,
            active,
            norm_sq: sol.norm_sq,
            skipped: false,
        })
    }

    /// Full training run. Leaves `model` at its final parameters and returns
    /// the best-validation parameters in the outcome. One NDJSON record per
    /// epoch goes to `log`.
    pub fn fit(
        &mut self,
        model: &mut FusionModel,
        train: &TrainData,
        val: &TrainData,
        mut log: Option<&mut dyn Write>,
    ) -> Result<TrainOutcome> {
        if val.is_empty() {
            return Err(Error::Precondition("validation split is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::sub_seed(self.config.seed, seed::SHUFFLE));
        let tasks = task_names(&train.label_names);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(usize, Option<f64>, Parameters)> = None;
        for epoch in 1..=self.config.epochs {
            order.shuffle(&mut rng);
            let lr = cosine_lr(self.config.learning_rate, self.step, self.total_steps);
            let (mut loss_sum, mut steps, mut skipped) = (0.0, 0usize, 0usize);
            let t = tasks.len();
            let (mut a_sum, mut a_min, mut a_max) = (vec![0.0; t], vec![f64::INFINITY; t], vec![f64::NEG_INFINITY; t]);
            for batch in order.chunks(self.config.batch_size) {
                let s = self.train_step(model, train, batch)?;
                let l = s.losses.len() / 2;
                let focal: f64 = s.losses[..l].iter().sum::<f64>() / l as f64;
                let contrast: f64 = s.losses[l..].iter().sum::<f64>() / l as f64;
                loss_sum += focal + contrast;
                steps += 1;
                skipped += s.skipped as usize;
                for (j, &a) in s.alpha.iter().enumerate() {
                    a_sum[j] += a;
                    a_min[j] = a_min[j].min(a);
                    a_max[j] = a_max[j].max(a);
                }
            }
            let ev = evaluate(model, val, self.config.batch_size, &self.focal, &self.config.contrast)?;
            let rec = EpochRecord {
                epoch,
                seed: self.config.seed,
                steps,
                skipped_steps: skipped,
                learning_rate: lr,
                train_loss: loss_sum / steps as f64,
                val_loss: ev.loss(),
                per_label_auroc: ev.report.per_label.iter().map(|m| (m.label.clone(), m.auroc)).collect(),
                val_macro: ev.report.macro_.clone(),
                tasks: tasks.clone(),
                alpha: AlphaStats {
                    mean: a_sum.iter().map(|s| s / steps as f64).collect(),
                    min: a_min,
                    max: a_max,
                },
            };
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            let score = ev.report.macro_auroc();
            let better = match &best {
                None => true,
                Some((_, b, _)) => score.unwrap_or(f64::NEG_INFINITY) > b.unwrap_or(f64::NEG_INFINITY),
            };
            if better {
                best = Some((epoch, score, model.params.clone()));
            }
            history.push(rec);
        }
        let (best_epoch, best_val_auroc, best_params) = best.expect("at least one epoch");
        Ok(TrainOutcome {
            history,
            best_epoch,
            best_val_auroc,
            best_params,
        })
    }
}

/// Forward the whole set in chunks of `batch_size` and score it. Contrastive
/// loss is averaged over chunks so it matches the training batch geometry.
pub fn evaluate(
    model: &FusionModel,
    data: &TrainData,
    batch_size: usize,
    focal: &FocalParams,
    contrast: &ContrastParams,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Precondition("cannot evaluate an empty set".into()));
    }
    let l = model.config.num_labels;
    let chunks: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect();
    let outs = crate::par::map_slice(&chunks, |c| {
        let samples: Vec<SampleInput> = c.iter().map(|&i| data.samples[i].clone()).collect();
        model.predict(&data.table, &samples)
    });
    let mut probs = Vec::with_capacity(data.len());
    let mut contrast_sum = vec![0.0; l];
    for (c, out) in chunks.iter().zip(outs) {
        let out = out?;
        for k in 0..l {
            let reps: Vec<Vec<f64>> = out.iter().map(|o| o.contrast_reps[k].clone()).collect();
            let y: Vec<Option<bool>> = c.iter().map(|&i| data.labels[i][k]).collect();
            contrast_sum[k] += contrastive_loss(&reps, &y, contrast);
        }
        probs.extend(out.into_iter().map(|o| o.probabilities));
    }
    let mut focal_sum = 0.0;
    for k in 0..l {
        let p: Vec<f64> = probs.iter().map(|r| r[k]).collect();
        let y: Vec<Option<bool>> = data.labels.iter().map(|r| r[k]).collect();
        focal_sum += focal_mean(&p, &y, focal.alpha[k], focal.gamma).unwrap_or(0.0);
    }
    let report = metric_report(&probs, &data.labels, &data.label_names, 0.5)?;
    Ok(Evaluation {
        probs,
        report,
        focal: focal_sum / l as f64,
        contrastive: contrast_sum.iter().sum::<f64>() / (l * chunks.len()) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::TokenRef;
    use crate::model::FusionConfig;

    fn toy(n: usize) -> TrainData {
        let table = Tensor::matrix(8, 6, (0..48).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect()).unwrap();
        let labels: Vec<Vec<Option<bool>>> = (0..n).map(|i| vec![Some(i % 2 == 0), Some(i % 3 == 0)]).collect();
        let samples = labels
            .iter()
            .enumerate()
            .map(|(i, y)| SampleInput {
                tokens: vec![
                    TokenRef { column: 0, entry: y[0].unwrap() as u32, scale: 1.0 },
                    TokenRef { column: 1, entry: 2 + y[1].unwrap() as u32, scale: 1.0 },
                    TokenRef { column: 2, entry: 4 + (i % 4) as u32, scale: 0.5 + (i % 5) as f64 / 5.0 },
                ],
                aux: Vec::new(),
            })
            .collect();
        TrainData {
            table,
            samples,
            labels,
            subjects: (0..n).map(|i| format!("s{i}")).collect(),
            label_names: vec!["a".into(), "b".into()],
        }
    }

    fn model(seed: u64) -> FusionModel {
        FusionModel::new(
            FusionConfig {
                d_model: 8,
                num_layers: 1,
                num_heads: 2,
                num_labels: 2,
                embed_dim: 6,
                ..FusionConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.01,
            ..TrainConfig::default()
        }
    }

    fn task_grads(m: &FusionModel, data: &TrainData) -> (Tape, Vec<Gradients>) {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &data.table, &data.samples).unwrap();
        let y: Vec<Option<bool>> = data.labels.iter().map(|r| r[0]).collect();
        let a = focal_on_tape(&mut tape, f.probs[0], &y, 1.0, 2.0).unwrap();
        let b = contrastive_on_tape(&mut tape, f.reps[0], &y, &ContrastParams::default()).unwrap();
        let g = tape.grad_per_task(&[a, b]).unwrap();
        (tape, g.full)
    }

    #[test]
    fn one_hot_weights_give_single_task_update() {
        let mut m = model(1);
        m.set_gates(0.3);
        let data = toy(12);
        let (_t, full) = task_grads(&m, &data);
        let refs: Vec<&Gradients> = full.iter().collect();
        let combined = combine_gradients(&m.params, &refs, &[0.0, 1.0]);
        for (p, g) in m.params.iter().zip(&combined) {
            if p.shared {
                assert_eq!(g.as_slice(), full[1].by_name(&p.name).unwrap(), "{}", p.name);
            }
        }
        // Heads keep their own task's gradient regardless of the weights.
        let head = m.params.index_of("head0.w").unwrap();
        assert_eq!(combined[head].as_slice(), full[0].by_name("head0.w").unwrap());
        let contrast = m.params.index_of("contrast0.w").unwrap();
        assert_eq!(combined[contrast].as_slice(), full[1].by_name("contrast0.w").unwrap());
    }

    #[test]
    fn identical_task_gradients_ignore_weights() {
        let mut m = model(2);
        m.set_gates(0.3);
        let data = toy(12);
        let (_t, full) = task_grads(&m, &data);
        let same = [&full[0], &full[0]];
        let a = combine_gradients(&m.params, &same, &[0.3, 0.7]);
        let b = combine_gradients(&m.params, &same[..1], &[1.0]);
        for ((p, x), y) in m.params.iter().zip(&a).zip(&b) {
            if p.shared {
                for (u, v) in x.iter().zip(y) {
                    assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn one_epoch_smoke_writes_one_record() {
        let data = toy(20);
        let (train, val) = (data.subset(&(0..16).collect::<Vec<_>>()), data.subset(&[16, 17, 18, 19]));
        let mut m = model(3);
        let mut tr = Trainer::new(cfg(1), &m, &train).unwrap();
        let mut log = Vec::new();
        let out = tr.fit(&mut m, &train, &val, Some(&mut log)).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec: EpochRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 1);
        assert_eq!(rec.steps, 2);
        assert_eq!(rec.alpha.mean.len(), 4);
        assert!((rec.alpha.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn runs_are_deterministic_and_learn() {
        let data = toy(48);
        let (train, val) = (data.subset(&(0..40).collect::<Vec<_>>()), data.subset(&(40..48).collect::<Vec<_>>()));
        let run = || {
            let mut m = model(4);
            let mut tr = Trainer::new(cfg(15), &m, &train).unwrap();
            let mut log = Vec::new();
            let out = tr.fit(&mut m, &train, &val, Some(&mut log)).unwrap();
            (m.params.to_bytes(), log, out.best_val_auroc)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert!(a.2.unwrap() > 0.9, "val auroc {:?}", a.2);
    }

    #[test]
    fn leakage_guard_trips_on_forbidden_rows() {
        let mut data = toy(16);
        data.subjects[5] = "held-out".into();
        let mut m = model(5);
        let mut tr = Trainer::new(cfg(1), &m, &data).unwrap();
        tr.forbidden_subjects.insert("held-out".into());
        assert!(tr.train_step(&mut m, &data, &[0, 1, 2]).is_ok());
        assert!(matches!(tr.train_step(&mut m, &data, &[4, 5]), Err(Error::Leakage(_))));
    }

    #[test]
    fn unlabelled_batch_is_skipped() {
        let mut data = toy(8);
        data.labels.iter_mut().for_each(|r| r.iter_mut().for_each(|y| *y = None));
        let mut m = model(6);
        let before = m.params.clone();
        let mut tr = Trainer::new(cfg(1), &m, &toy(8)).unwrap();
        let s = tr.train_step(&mut m, &data, &[0, 1, 2, 3]).unwrap();
        assert!(s.skipped);
        assert_eq!(m.params, before);
    }

    #[test]
    fn config_errors() {
        let m = model(1);
        let d = toy(8);
        for bad in [
            TrainConfig { epochs: 0, ..cfg(1) },
            TrainConfig { batch_size: 1, ..cfg(1) },
            TrainConfig { split_fractions: [0.5, 0.5, 0.5], ..cfg(1) },
            TrainConfig { focal_alpha: Some(vec![1.0]), ..cfg(1) },
        ] {
            assert!(Trainer::new(bad, &m, &d).is_err());
        }
    }
}
