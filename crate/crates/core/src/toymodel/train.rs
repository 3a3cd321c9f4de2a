use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::model::{cross_entropy, forward, Gradients, ModelState};
use super::{BlockConfig, CombineMode, ModelConfig};
use crate::aligner::{AlignerVariant, FuserMode};
use crate::diagnostics::{
    average_summaries, fit_decay, layer_disparities, layer_series, mean_disparity, summarize,
    LayerSummary, Series,
};
use crate::modality::ModalityId;
use crate::modmask::MaskVariant;
use crate::rng::{self, streams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub eval_interval: usize,
    pub weight_decay: f64,
    /// Tail fraction of the dataset held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lr: 2e-3,
            steps: 2000,
            batch: 16,
            eval_interval: 100,
            weight_decay: 0.0,
            eval_fraction: 0.25,
            seed: 0,
        }
    }
}

/// Cosine decay from `base` at step 0 toward 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * step as f64 / total as f64))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl AdamW {
    pub fn new(model: &ModelState, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let params = model.tensors_mut();
        let g = grads.tensors();
        let m = self.m.tensors_mut();
        let v = self.v.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(g).zip(m).zip(v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (libm::sqrt(v_hat) + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// `acc += s·g` over every tensor.
pub(crate) fn accumulate(acc: &mut Gradients, g: &Gradients, s: f64) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        a.axpy(s, b);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Activation summaries averaged over the evaluated samples.
    pub summaries: Vec<LayerSummary>,
    pub mean_disparity: Option<f64>,
}

pub fn evaluate(model: &ModelState, samples: &[Sample]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut runs = Vec::with_capacity(samples.len());
    for s in samples {
        let fwd = forward(model, &model.embed(s)?)?;
        loss += cross_entropy(&fwd.logits, s.label).0;
        let row = fwd.logits.row(0);
        let pred = (0..row.len())
            .fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += usize::from(pred == s.label);
        runs.push(summarize(&fwd.trace)?);
    }
    let n = samples.len().max(1) as f64;
    let summaries = average_summaries(&runs);
    let mean_disparity = mean_disparity(&summaries);
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        summaries,
        mean_disparity,
    })
}

/// One evaluation checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
    /// Disparity per layer, averaged over focus modalities.
    pub layer_disparity: Vec<f64>,
    pub mean_disparity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub history: Vec<MetricRecord>,
    pub final_eval: Evaluation,
}

fn split(dataset: &[Sample], eval_fraction: f64) -> (&[Sample], &[Sample]) {
    let n = dataset.len();
    let n_eval = (libm::round(n as f64 * eval_fraction) as usize).min(n - 1);
    let (train, eval) = dataset.split_at(n - n_eval);
    if eval.is_empty() {
        (train, train)
    } else {
        (train, eval)
    }
}

/// Minibatch AdamW with a cosine schedule. Batches are drawn with
/// replacement from the training split using the `hyper.seed` stream.
pub fn train(mut model: ModelState, dataset: &[Sample], hyper: &HyperParams) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if hyper.batch == 0 || hyper.eval_interval == 0 {
        return Err(Error::InvalidConfig("batch and eval_interval must be positive".into()));
    }
    let (train_set, eval_set) = split(dataset, hyper.eval_fraction);
    let mut opt = AdamW::new(&model, hyper.weight_decay);
    let mut r = rng::stream(hyper.seed, streams::BATCHES);
    let mut history = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_steps = 0usize;
    for step in 0..hyper.steps {
        let lr = cosine_lr(hyper.lr, step, hyper.steps);
        let mut grads = model.zeros_like();
        let mut batch_loss = 0.0;
        let scale = 1.0 / hyper.batch as f64;
        for _ in 0..hyper.batch {
            let s = &train_set[r.random_range(0..train_set.len())];
            let (l, g) = model.loss_and_grad(s)?;
            batch_loss += l * scale;
            accumulate(&mut grads, &g, scale);
        }
        if !batch_loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        opt.step(&mut model, &grads, lr);
        if !model.all_finite() {
            return Err(Error::DivergedLoss { step });
        }
        loss_acc += batch_loss;
        loss_steps += 1;
        if (step + 1) % hyper.eval_interval == 0 || step + 1 == hyper.steps {
            let ev = evaluate(&model, eval_set)?;
            history.push(MetricRecord {
                step: step + 1,
                lr,
                train_loss: loss_acc / loss_steps as f64,
                eval_loss: ev.loss,
                eval_accuracy: ev.accuracy,
                layer_disparity: layer_disparities(&ev.summaries),
                mean_disparity: ev.mean_disparity.unwrap_or(f64::NAN),
            });
            loss_acc = 0.0;
            loss_steps = 0;
        }
    }
    let final_eval = evaluate(&model, eval_set)?;
    Ok(TrainOutcome {
        model,
        history,
        final_eval,
    })
}

/// Partial block configuration applied on top of a base config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockOverride {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub use_mdm: Option<bool>,
    #[serde(default)]
    pub use_daa: Option<bool>,
    #[serde(default)]
    pub mask: Option<MaskVariant>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub aligner: Option<AlignerVariant>,
    #[serde(default)]
    pub fuser: Option<FuserMode>,
    #[serde(default)]
    pub combine: Option<CombineMode>,
}

impl BlockOverride {
    pub fn toggles(use_mdm: bool, use_daa: bool) -> Self {
        BlockOverride {
            label: Some(alloc::format!(
                "mdm={}/daa={}",
                u8::from(use_mdm),
                u8::from(use_daa)
            )),
            use_mdm: Some(use_mdm),
            use_daa: Some(use_daa),
            ..Default::default()
        }
    }

    /// The four MDM/DAA toggle combinations, baseline first.
    pub fn toggle_grid() -> Vec<Self> {
        alloc::vec![
            Self::toggles(false, false),
            Self::toggles(true, false),
            Self::toggles(false, true),
            Self::toggles(true, true),
        ]
    }

    pub fn apply(&self, base: &BlockConfig) -> BlockConfig {
        let mut b = *base;
        if self.use_mdm.is_some() || self.use_daa.is_some() {
            b = b.with_toggles(
                self.use_mdm.unwrap_or(base.use_mdm),
                self.use_daa.unwrap_or(base.use_daa),
            );
        }
        if let Some(v) = self.mask {
            b.mask_spec.variant = v;
        }
        if let Some(beta) = self.beta {
            b.mask_spec.beta = beta;
        }
        if let Some(a) = self.aligner {
            b.aligner_variant = a;
        }
        if let Some(f) = self.fuser {
            b.fuser_mode = f;
        }
        if let Some(c) = self.combine {
            b.combine = c;
        }
        b
    }

    pub fn describe(&self, index: usize) -> String {
        self.label.clone().unwrap_or_else(|| alloc::format!("row{index}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub accuracy: f64,
    pub eval_loss: f64,
    pub mean_disparity: f64,
    /// Decay rate of the text-focus cross-modal activation across layers.
    pub gamma: Option<f64>,
}

/// Trains one model per grid row from the same seed and dataset.
pub fn ablate(
    grid: &[BlockOverride],
    base: &ModelConfig,
    dataset: &[Sample],
    hyper: &HyperParams,
    model_seed: u64,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty ablation grid".into()));
    }
    grid.iter()
        .enumerate()
        .map(|(i, o)| {
            let mut cfg = *base;
            cfg.block = o.apply(&base.block);
            let model = ModelState::init(cfg, model_seed)?;
            let out = train(model, dataset, hyper)?;
            let series = layer_series(&out.final_eval.summaries, ModalityId::TEXT, Series::CrossMean);
            Ok(AblationRow {
                label: o.describe(i),
                accuracy: out.final_eval.accuracy,
                eval_loss: out.final_eval.loss,
                mean_disparity: out.final_eval.mean_disparity.unwrap_or(f64::NAN),
                gamma: fit_decay(&series).ok().map(|f| f.gamma),
            })
        })
        .collect()
}
