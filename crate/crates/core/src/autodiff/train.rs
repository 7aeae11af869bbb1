//! Minibatch training of the block stack on a generated task.
//!
//! Batches are drawn online: batch `s` is generated from `item_seed(train, s)`,
//! so a run is a pure function of its seed. Per-sample gradients may be
//! computed in parallel; they are summed in sample order.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_global_norm, AdamConfig, AdamState};
use super::model::{loss_and_output, loss_grad_output, ModelConfig, Target};
use super::params::ParamSet;
use crate::checkpoint::Checkpoint;
use crate::error::{config_err, FwpError, Result};
use crate::rng::{item_seed, split_seed};
use crate::tasks::{
    generate_episodes, generate_samples, Classifier, Episode, EpisodePredictor, Sample, TaskSpec, Vocab,
};
use crate::tensor::Vector;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on the last position only.
    #[default]
    Final,
    /// Mean cross-entropy over every prefix, including the empty one at BOS.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Evaluate every this many steps (and always before the first and after
    /// the last step). Zero disables intermediate evaluation.
    pub eval_every: usize,
    pub loss: LossMode,
    /// Ascending upper length bounds; bucket `i` evaluates lengths in
    /// `(bound[i-1], bound[i]]`, the first starting at the task's minimum.
    pub eval_buckets: Vec<usize>,
    pub eval_samples: usize,
    /// Compute per-sample gradients on the rayon pool.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: AdamConfig::default().lr,
            clip: 1.0,
            eval_every: 100,
            loss: LossMode::Final,
            eval_buckets: vec![32, 64],
            eval_samples: 256,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(config_err("lr and clip must be positive"));
        }
        if self.eval_buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err("eval_buckets must be strictly ascending"));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    /// `train` or `eval`
    pub split: String,
    pub loss: f64,
    /// Missing for regression.
    pub accuracy: Option<f64>,
    pub seq_len_bucket: Option<usize>,
}

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,seq_len_bucket";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.accuracy.map(|a| a.to_string()).unwrap_or_default();
        let bucket = r.seq_len_bucket.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.split, r.loss, acc, bucket);
    }
    out
}

/// What a trained model was trained on; stored as the checkpoint config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainedSetup {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<MetricRow>,
    pub checkpoint: Checkpoint<TrainedSetup>,
}

impl TrainOutcome {
    /// Eval rows from the last evaluation.
    pub fn final_eval(&self) -> Vec<&MetricRow> {
        let last = self.metrics.iter().filter(|r| r.split == "eval").map(|r| r.step).max();
        self.metrics
            .iter()
            .filter(|r| r.split == "eval" && Some(r.step) == last)
            .collect()
    }
}

/// The model config implied by a task: input width from the task encoding,
/// readout width from the class count or target dimension.
pub fn model_for_task(task: &TaskSpec, d_model: usize, blocks: usize, mixer: super::MixerSpec) -> Result<ModelConfig> {
    let d_output = match task.kind {
        crate::tasks::TaskKind::IclRegression { d_y, .. } => d_y,
        _ => task.num_classes(),
    };
    Ok(ModelConfig {
        d_input: task.input_width()?,
        d_model,
        blocks,
        d_output,
        mixer,
    })
}

struct Item {
    xs: Vec<Vector>,
    target: Target,
    label: Option<usize>,
}

fn sample_item(task: &TaskSpec, vocab: &Vocab, s: &Sample, mode: LossMode) -> Result<Item> {
    let xs = vocab.encode(&s.tokens)?;
    let target = match mode {
        LossMode::Final => Target::FinalClass(s.label),
        LossMode::PerStep => Target::PerStepClass(task.prefix_labels(&s.tokens)?.into_iter().map(Some).collect()),
    };
    Ok(Item {
        xs,
        target,
        label: Some(s.label),
    })
}

fn episode_item(e: &Episode) -> Item {
    Item {
        xs: e.encode(),
        target: Target::FinalRegression(e.query_target.clone()),
        label: None,
    }
}

fn argmax(v: &Vector) -> usize {
    let s = v.as_slice();
    (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best })
}

struct BatchResult {
    loss: f64,
    grads: ParamSet,
    correct: usize,
}

fn run_batch(
    cfg: &ModelConfig,
    params: &ParamSet,
    items: &[Item],
    parallel: bool,
    step: usize,
    with_grads: bool,
) -> Result<BatchResult> {
    let one = |item: &Item| -> Result<(f64, Option<ParamSet>, bool)> {
        let (loss, grads, last) = if with_grads {
            let (l, g, last) = loss_grad_output(cfg, params, &item.xs, &item.target)?;
            (l, Some(g), last)
        } else {
            let (l, last) = loss_and_output(cfg, params, &item.xs, &item.target)?;
            (l, None, last)
        };
        Ok((loss, grads, item.label.is_some_and(|l| argmax(&last) == l)))
    };
    let per_sample: Vec<Result<(f64, Option<ParamSet>, bool)>> = if parallel {
        items.par_iter().map(one).collect()
    } else {
        items.iter().map(one).collect()
    };
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for r in per_sample {
        let (l, g, ok) = r.map_err(|e| match e {
            FwpError::Numeric { .. } => FwpError::Divergence { step, loss: f64::NAN },
            other => other,
        })?;
        loss += l;
        if let Some(g) = g {
            total.axpy(1.0, &g)?;
        }
        correct += usize::from(ok);
    }
    let n = items.len() as f64;
    total.scale(1.0 / n);
    Ok(BatchResult {
        loss: loss / n,
        grads: total,
        correct,
    })
}

fn eval_rows(
    task: &TaskSpec,
    cfg: &ModelConfig,
    params: &ParamSet,
    train: &TrainConfig,
    eval_seed: u64,
    step: usize,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    if train.eval_samples == 0 {
        return Ok(rows);
    }
    if task.is_classification() {
        let vocab = task.vocab()?;
        let mut lower = task.min_len;
        for (b, &upper) in train.eval_buckets.iter().enumerate() {
            let lo = lower.max(task.min_len);
            lower = upper + 1;
            if lo > upper {
                continue;
            }
            let spec = task.with_lengths(lo, upper);
            let samples = generate_samples(&spec, item_seed(eval_seed, b as u64), train.eval_samples)?;
            let items = samples
                .iter()
                .map(|s| sample_item(task, &vocab, s, LossMode::Final))
                .collect::<Result<Vec<_>>>()?;
            let r = run_batch(cfg, params, &items, train.parallel, step, false)?;
            rows.push(MetricRow {
                step,
                split: "eval".into(),
                loss: r.loss,
                accuracy: Some(r.correct as f64 / items.len() as f64),
                seq_len_bucket: Some(upper),
            });
        }
    } else {
        let episodes = generate_episodes(task, eval_seed, train.eval_samples)?;
        let items: Vec<Item> = episodes.iter().map(episode_item).collect();
        let r = run_batch(cfg, params, &items, train.parallel, step, false)?;
        rows.push(MetricRow {
            step,
            split: "eval".into(),
            loss: r.loss,
            accuracy: None,
            seq_len_bucket: Some(task.max_len),
        });
    }
    Ok(rows)
}

/// Trains from a fresh seeded initialization.
pub fn train(task: &TaskSpec, model: &ModelConfig, config: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    task.validate()?;
    model.validate()?;
    config.validate()?;
    if model.d_input != task.input_width()? {
        return Err(config_err(format!(
            "model d_input {} does not match the task encoding width {}",
            model.d_input,
            task.input_width()?
        )));
    }
    let mut init_rng = crate::rng::component_rng(seed, "init");
    let mut params = model.init(&mut init_rng)?;
    let train_seed = split_seed(seed, "train");
    let eval_seed = split_seed(seed, "eval");
    let vocab = if task.is_classification() { Some(task.vocab()?) } else { None };
    let mut adam = AdamState::new(
        &params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut metrics = eval_rows(task, model, &params, config, eval_seed, 0)?;
    for step in 1..=config.steps {
        let batch_seed = item_seed(train_seed, step as u64);
        let items: Vec<Item> = match &vocab {
            Some(vocab) => generate_samples(task, batch_seed, config.batch_size)?
                .iter()
                .map(|s| sample_item(task, vocab, s, config.loss))
                .collect::<Result<_>>()?,
            None => generate_episodes(task, batch_seed, config.batch_size)?
                .iter()
                .map(episode_item)
                .collect(),
        };
        let mut batch = run_batch(model, &params, &items, config.parallel, step, true)?;
        if !batch.loss.is_finite() || !batch.grads.is_finite() {
            return Err(FwpError::Divergence { step, loss: batch.loss });
        }
        clip_global_norm(&mut batch.grads, config.clip);
        adam_step(&mut params, &batch.grads, &mut adam)?;
        metrics.push(MetricRow {
            step,
            split: "train".into(),
            loss: batch.loss,
            accuracy: vocab.as_ref().map(|_| batch.correct as f64 / items.len() as f64),
            seq_len_bucket: None,
        });
        let due = config.eval_every > 0 && step % config.eval_every == 0;
        if due || step == config.steps {
            metrics.extend(eval_rows(task, model, &params, config, eval_seed, step)?);
        }
    }
    let checkpoint = Checkpoint::new(
        TrainedSetup {
            task: task.clone(),
            model: model.clone(),
            seed,
        },
        params.clone(),
    );
    Ok(TrainOutcome {
        params,
        metrics,
        checkpoint,
    })
}

/// Final-position argmax of a trained classifier.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub params: ParamSet,
}

impl TrainedModel {
    pub fn from_checkpoint(ck: &Checkpoint<TrainedSetup>) -> Result<Self> {
        ck.config.model.validate()?;
        let expected = ck.config.model.init(&mut crate::rng::component_rng(0, "layout"))?;
        if !expected.same_layout(&ck.weights) {
            return Err(FwpError::Shape("checkpoint weights do not match the model config".into()));
        }
        Ok(Self {
            task: ck.config.task.clone(),
            model: ck.config.model.clone(),
            params: ck.weights.clone(),
        })
    }

    fn final_output(&self, xs: &[Vector]) -> Result<Vector> {
        let outs = self.model.outputs(&self.params, xs)?;
        outs.into_iter().last().ok_or_else(|| FwpError::Input("empty sequence".into()))
    }
}

impl Classifier for TrainedModel {
    fn classify(&self, tokens: &str) -> Result<usize> {
        let xs = self.task.vocab()?.encode(tokens)?;
        Ok(argmax(&self.final_output(&xs)?))
    }
}

impl EpisodePredictor for TrainedModel {
    fn predict(&self, episode: &Episode) -> Result<Vector> {
        self.final_output(&episode.encode())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MixerSpec;
    use crate::layer::PhiMap;
    use crate::rules::UpdateRule;
    use crate::tasks::TaskKind;

    fn quick() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_size: 4,
            eval_every: 2,
            eval_buckets: vec![4, 8],
            eval_samples: 8,
            ..TrainConfig::default()
        }
    }

    fn parity_model() -> (TaskSpec, ModelConfig) {
        let task = TaskSpec::new(TaskKind::Parity, 1, 4);
        let model = model_for_task(&task, 8, 1, MixerSpec::fwp(UpdateRule::Delta, 2, PhiMap::SiluL2norm)).unwrap();
        (task, model)
    }

    #[test]
    fn zero_steps_is_eval_only() {
        let (task, model) = parity_model();
        let cfg = TrainConfig { steps: 0, ..quick() };
        let out = train(&task, &model, &cfg, 5).unwrap();
        let init = model.init(&mut crate::rng::component_rng(5, "init")).unwrap();
        assert_eq!(out.params, init);
        assert!(out.metrics.iter().all(|r| r.split == "eval" && r.step == 0));
        assert_eq!(out.metrics.len(), 2);
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let (task, model) = parity_model();
        let a = train(&task, &model, &quick(), 11).unwrap();
        let b = train(&task, &model, &TrainConfig { parallel: false, ..quick() }, 11).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.metrics, b.metrics);
        let steps: Vec<usize> = a.metrics.iter().map(|r| r.step).collect();
        assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn csv_layout() {
        let (task, model) = parity_model();
        let out = train(&task, &model, &quick(), 1).unwrap();
        let csv = metrics_csv(&out.metrics);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        assert!(lines.all(|l| l.split(',').count() == 5));
    }

    #[test]
    fn regression_episodes_train() {
        let task = TaskSpec::new(
            TaskKind::IclRegression {
                d_x: 2,
                d_y: 1,
                noise_sd: 0.0,
                feedback: crate::tasks::Feedback::Synchronous,
            },
            3,
            5,
        );
        let model = model_for_task(&task, 8, 1, MixerSpec::fwp(UpdateRule::Additive, 1, PhiMap::Identity)).unwrap();
        let out = train(&task, &model, &quick(), 2).unwrap();
        assert!(out.final_eval().iter().all(|r| r.accuracy.is_none() && r.loss.is_finite()));
        let trained = TrainedModel::from_checkpoint(&out.checkpoint).unwrap();
        let ep = &generate_episodes(&task, 0, 1).unwrap()[0];
        assert_eq!(trained.predict(ep).unwrap().dim(), 1);
    }

    #[test]
    fn mismatched_width_rejected() {
        let (task, mut model) = parity_model();
        model.d_input += 1;
        assert!(matches!(train(&task, &model, &quick(), 0), Err(FwpError::Config(_))));
    }
}
