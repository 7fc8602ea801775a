//! Fine-tuning harness: AdamW with per-group learning rates, linear warmup
//! and decay, gradient accumulation, per-epoch validation and
//! best-checkpoint selection.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::corpus::shuffle_with;
use crate::error::{Error, Result};
use crate::evaluation::{classification_metrics, regression_metrics};
use crate::model::{objective_loss, Example, Model, Objective};
use crate::nn::ForwardCtx;
use crate::params::{GradBuffer, ParamGroup, ParamStore};
use crate::tensor::Tensor;

fn default_lr_backbone() -> f64 {
    2e-5
}
fn default_lr_head() -> f64 {
    1e-4
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_warmup() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    8
}
fn default_batch() -> usize {
    64
}
fn default_seeds() -> Vec<u64> {
    vec![42, 0, 1, 2, 3]
}
fn default_objective() -> Objective {
    Objective::Rating
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr_backbone")]
    pub lr_backbone: f64,
    #[serde(default = "default_lr_head")]
    pub lr_head: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub effective_batch: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_objective")]
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: default_lr_backbone(),
            lr_head: default_lr_head(),
            weight_decay: default_weight_decay(),
            warmup_fraction: default_warmup(),
            epochs: default_epochs(),
            effective_batch: default_batch(),
            seeds: default_seeds(),
            objective: default_objective(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0,1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.lr_backbone > 0.0 && self.lr_head > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.epochs == 0 || self.effective_batch == 0 {
            return Err(Error::Config("epochs and effective_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        }
    }
}

pub fn steps_per_epoch(train_len: usize, effective_batch: usize) -> usize {
    train_len.div_ceil(effective_batch)
}

pub fn warmup_steps(total_steps: usize, warmup_fraction: f64) -> usize {
    (total_steps as f64 * warmup_fraction).floor() as usize
}

/// Learning-rate multiplier before optimizer step `step` (1-based): rises
/// linearly to 1 at the warmup boundary, then decays linearly to 0 at
/// `total`.
pub fn lr_multiplier(step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step <= warmup && warmup > 0 {
        step as f64 / warmup as f64
    } else if total == warmup {
        1.0
    } else {
        total.saturating_sub(step) as f64 / (total - warmup) as f64
    }
}

/// Decoupled-weight-decay Adam with one learning rate per parameter group.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr_backbone: f64, lr_head: f64, weight_decay: f64) -> Self {
        Self {
            lr_backbone,
            lr_head,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    pub fn from_config(store: &ParamStore, config: &TrainConfig) -> Self {
        Self::new(store, config.lr_backbone, config.lr_head, config.weight_decay)
    }

    pub fn lr_for(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Head => self.lr_head,
        }
    }

    /// Applies one update scaled by `multiplier`. Frozen parameters and
    /// parameters without a gradient this step are left untouched.
    /// Returns the learning rate used for each parameter, in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer, multiplier: f64) -> Vec<f64> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        let mut used = Vec::with_capacity(ids.len());
        for id in ids {
            let (group, decay, trainable) = {
                let p = store.get(id);
                (p.group, p.decay, p.trainable)
            };
            let lr = self.lr_for(group) * multiplier;
            used.push(lr);
            if !trainable {
                continue;
            }
            let k = id.index();
            let Some(g) = grads.get(id) else {
                continue;
            };
            let (rows, cols) = g.shape();
            let m = self.m[k].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let v = self.v[k].get_or_insert_with(|| Tensor::zeros(rows, cols));
            let p = store.value_mut(id);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                if decay {
                    *pv -= lr * wd * *pv;
                }
                *pv -= lr * (*mv / bc1) / ((*vv / bc2).sqrt() + eps);
            }
        }
        used
    }
}

/// A per-item differentiable loss over a borrowed parameter store.
pub trait TrainTask {
    type Item;
    fn loss(&self, g: &mut Graph<'_>, item: &Self::Item, ctx: &mut ForwardCtx) -> Result<Var>;
}

/// Outcome-model task: MSE for rating, BCE on the logit for acceptance.
pub struct OutcomeTask<'m> {
    pub model: &'m Model,
    pub objective: Objective,
}

impl TrainTask for OutcomeTask<'_> {
    type Item = Example;

    fn loss(&self, g: &mut Graph<'_>, item: &Example, ctx: &mut ForwardCtx) -> Result<Var> {
        let y = self.model.forward(g, item, ctx)?;
        Ok(objective_loss(g, y, item.label, self.objective))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    /// 1-based epoch of the selected checkpoint.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochMetrics>,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

/// Mean eval-mode loss over `items`.
pub fn mean_loss<T: TrainTask>(store: &ParamStore, task: &T, items: &[T::Item]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let mut ctx = ForwardCtx::eval();
    let mut total = 0.0;
    for item in items {
        let mut g = Graph::new(store);
        let l = task.loss(&mut g, item, &mut ctx)?;
        total += g.scalar(l);
    }
    let mean = total / items.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite("validation loss".into()));
    }
    Ok(mean)
}

/// Sums per-item gradients over `batch`, scaled by `1/|batch|`, into `buf`.
/// Returns the mean loss.
pub fn accumulate_batch<T: TrainTask>(
    store: &ParamStore,
    task: &T,
    batch: &[&T::Item],
    ctx: &mut ForwardCtx,
    buf: &mut GradBuffer,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for item in batch {
        let mut g = Graph::new(store);
        let l = task.loss(&mut g, item, ctx)?;
        let v = g.scalar(l);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("training loss {v}")));
        }
        total += v;
        g.backward(l).accumulate_into(store, buf, scale);
    }
    Ok(total * scale)
}

/// Trains `store` in place and leaves it holding the weights of the epoch
/// with the lowest validation loss (earliest on ties).
pub fn fit<T: TrainTask>(
    store: &mut ParamStore,
    task: &T,
    train: &[T::Item],
    val: &[T::Item],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Precondition("train and validation parts must be non-empty".into()));
    }
    let per_epoch = steps_per_epoch(train.len(), config.effective_batch);
    let total = per_epoch * config.epochs;
    let warmup = warmup_steps(total, config.warmup_fraction);
    let mut opt = AdamW::from_config(store, config);
    let mut buf = GradBuffer::new(store);
    let mut ctx = ForwardCtx::train(seed ^ 0x5eed_d20f);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        shuffle_with(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut last_mult = 0.0;
        for chunk in order.chunks(config.effective_batch) {
            step += 1;
            let batch: Vec<&T::Item> = chunk.iter().map(|&i| &train[i]).collect();
            buf.clear();
            let l = accumulate_batch(store, task, &batch, &mut ctx, &mut buf)?;
            epoch_loss += l * batch.len() as f64;
            last_mult = lr_multiplier(step, total, warmup);
            opt.step(store, &buf, last_mult);
            if !store.all_finite() {
                return Err(Error::NonFinite(format!("parameters after step {step}")));
            }
        }
        let val_loss = mean_loss(store, task, val)?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            lr_backbone: config.lr_backbone * last_mult,
            lr_head: config.lr_head * last_mult,
            steps: step,
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4}",
            metrics.train_loss,
            metrics.val_loss
        );
        on_epoch(&metrics);
        history.push(metrics);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, store.snapshot()));
        }
    }
    let (best_epoch, best_val_loss, snapshot) = best.expect("at least one epoch");
    store.restore(&snapshot);
    Ok(FitOutcome {
        best_epoch,
        best_val_loss,
        history,
        total_steps: total,
        warmup_steps: warmup,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub test_metrics: BTreeMap<String, f64>,
}

/// Test-set metrics for an outcome model: `mse`/`mae` for rating,
/// `acc`/`precision`/`recall`/`f1` at threshold 0.5 for acceptance.
pub fn outcome_metrics(
    model: &Model,
    store: &ParamStore,
    objective: Objective,
    examples: &[Example],
) -> Result<(BTreeMap<String, f64>, Vec<f64>)> {
    let raw = examples
        .iter()
        .map(|ex| model.predict_raw(store, ex))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
    let mut out = BTreeMap::new();
    match objective {
        Objective::Rating => {
            let m = regression_metrics(&raw, &labels)?;
            out.insert("mse".into(), m.mse);
            out.insert("mae".into(), m.mae);
        }
        Objective::Acceptance => {
            let probs: Vec<f64> = raw.iter().map(|&z| crate::autograd::sigmoid(z)).collect();
            let bools: Vec<bool> = labels.iter().map(|&l| l > 0.5).collect();
            let m = classification_metrics(&probs, &bools, 0.5)?;
            out.insert("acc".into(), m.accuracy);
            out.insert("precision".into(), m.precision);
            out.insert("recall".into(), m.recall);
            out.insert("f1".into(), m.f1);
        }
    }
    Ok((out, raw))
}

/// Fits an outcome model and scores its selected checkpoint on `test`.
pub fn train_outcome_model(
    model: &Model,
    store: &mut ParamStore,
    train: &[Example],
    val: &[Example],
    test: &[Example],
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(TrialResult, FitOutcome)> {
    if test.is_empty() {
        return Err(Error::Precondition("test part must be non-empty".into()));
    }
    let task = OutcomeTask {
        model,
        objective: config.objective,
    };
    let outcome = fit(store, &task, train, val, config, seed, on_epoch)?;
    let (test_metrics, _) = outcome_metrics(model, store, config.objective, test)?;
    Ok((
        TrialResult {
            seed,
            best_epoch: outcome.best_epoch,
            val_loss: outcome.best_val_loss,
            test_metrics,
        },
        outcome,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    Median,
    MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub value: f64,
    /// Population standard deviation, present in mean/std mode.
    pub std: Option<f64>,
}

/// Per-metric median, or mean with population standard deviation.
pub fn aggregate_trials(results: &[TrialResult], mode: AggregateMode) -> Result<BTreeMap<String, MetricSummary>> {
    let first = results
        .first()
        .ok_or_else(|| Error::Precondition("no trial results to aggregate".into()))?;
    let keys: Vec<&String> = first.test_metrics.keys().collect();
    for r in results {
        if r.test_metrics.keys().collect::<Vec<_>>() != keys {
            return Err(Error::Precondition(format!(
                "trial {} has inconsistent metric keys",
                r.seed
            )));
        }
    }
    let mut out = BTreeMap::new();
    for key in keys {
        let mut vals: Vec<f64> = results.iter().map(|r| r.test_metrics[key]).collect();
        let summary = match mode {
            AggregateMode::Median => {
                vals.sort_by(f64::total_cmp);
                let n = vals.len();
                let value = if n % 2 == 1 {
                    vals[n / 2]
                } else {
                    (vals[n / 2 - 1] + vals[n / 2]) / 2.0
                };
                MetricSummary { value, std: None }
            }
            AggregateMode::MeanStd => {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                MetricSummary {
                    value: mean,
                    std: Some(var.sqrt()),
                }
            }
        };
        out.insert(key.clone(), summary);
    }
    Ok(out)
}

/// Output directory of one training run.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const CHECKPOINT: &'static str = "checkpoint.json";
    pub const SUMMARY: &'static str = "summary.json";

    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        // a fresh metrics log per run
        fs::write(root.join(Self::METRICS), "")?;
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<()> {
        fs::write(self.root.join(Self::CONFIG), serde_json::to_vec_pretty(config)?)?;
        Ok(())
    }

    pub fn append_metrics(&self, metrics: &EpochMetrics) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(self.root.join(Self::METRICS))?;
        serde_json::to_writer(&mut f, metrics)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn write_checkpoint<T: Serialize>(&self, checkpoint: &T) -> Result<()> {
        fs::write(self.root.join(Self::CHECKPOINT), serde_json::to_vec(checkpoint)?)?;
        Ok(())
    }

    pub fn write_summary<T: Serialize>(&self, summary: &T) -> Result<()> {
        fs::write(self.root.join(Self::SUMMARY), serde_json::to_vec_pretty(summary)?)?;
        Ok(())
    }

    pub fn read_metrics(&self) -> Result<Vec<EpochMetrics>> {
        let text = fs::read_to_string(self.root.join(Self::METRICS))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}
