//! Surrogate multiple-choice model: an MLP over `[x_T | x_I | c_1 | ... | c_r]`
//! producing one logit per answer choice.

use serde::{Deserialize, Serialize};

use crate::datamodel::{ContextUnit, Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::numerics::{
    backward_from_logits, cross_entropy, mlp_forward, softmax, softmax_cross_entropy_grad,
    GradBundle, Head, MlpParams, Vector,
};
use crate::training::{sgd_epochs, TrainConfig, TrainReport};

/// How inputs are laid out for the first layer. Context slots that receive no
/// unit are zero-filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub text_dim: usize,
    pub image_dim: usize,
    pub context_slots: usize,
    pub context_text_dim: usize,
    pub context_image_dim: usize,
    pub num_choices: usize,
}

impl InputLayout {
    pub fn for_meta(meta: &DatasetMeta, context_slots: usize) -> Self {
        InputLayout {
            text_dim: meta.text_dim,
            image_dim: meta.image_dim,
            context_slots,
            context_text_dim: meta.context_dim,
            context_image_dim: meta.context_dim,
            num_choices: meta.num_choices,
        }
    }

    pub fn slot_dim(&self) -> usize {
        self.context_text_dim + self.context_image_dim
    }

    pub fn input_dim(&self) -> usize {
        self.text_dim + self.image_dim + self.context_slots * self.slot_dim()
    }

    pub fn build_input(&self, s: &Sample, ctx: &[&ContextUnit]) -> Result<Vec<f64>> {
        if s.text_emb.len() != self.text_dim || s.image_emb.len() != self.image_dim {
            return Err(Error::shape(format!(
                "sample `{}` has input dims ({}, {}), model expects ({}, {})",
                s.id,
                s.text_emb.len(),
                s.image_emb.len(),
                self.text_dim,
                self.image_dim
            )));
        }
        if ctx.len() > self.context_slots {
            return Err(Error::shape(format!(
                "{} context units given but the model has {} slots",
                ctx.len(),
                self.context_slots
            )));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(s.text_emb.as_slice());
        x.extend_from_slice(s.image_emb.as_slice());
        for u in ctx {
            if u.text_emb.len() != self.context_text_dim
                || u.image_emb.len() != self.context_image_dim
            {
                return Err(Error::shape(format!(
                    "context unit {} has unexpected dims",
                    u.index
                )));
            }
            x.extend_from_slice(u.text_emb.as_slice());
            x.extend_from_slice(u.image_emb.as_slice());
        }
        x.resize(self.input_dim(), 0.0);
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub layout: InputLayout,
    pub uses_context: bool,
    pub params: MlpParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    /// Largest softmax probability.
    pub confidence: f64,
}

impl TaskModel {
    pub fn new(layout: InputLayout, hidden: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        let params = MlpParams::init(&Self::dims(&layout, hidden), Head::Identity, rng)?;
        Ok(TaskModel {
            uses_context: layout.context_slots > 0,
            layout,
            params,
        })
    }

    pub fn zeros(layout: InputLayout, hidden: &[usize]) -> Result<Self> {
        Ok(TaskModel {
            uses_context: layout.context_slots > 0,
            layout,
            params: MlpParams::zeros(&Self::dims(&layout, hidden), Head::Identity)?,
        })
    }

    fn dims(layout: &InputLayout, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![layout.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(layout.num_choices);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.in_dim() != self.layout.input_dim()
            || self.params.out_dim() != self.layout.num_choices
        {
            return Err(Error::shape(
                "task model parameters do not match its layout",
            ));
        }
        if self.uses_context != (self.layout.context_slots > 0) {
            return Err(Error::shape(
                "uses_context disagrees with the number of context slots",
            ));
        }
        Ok(())
    }

    /// Cross-entropy of the gold answer and its gradient for one input.
    pub(crate) fn loss_and_grad(
        &self,
        s: &Sample,
        ctx: &[&ContextUnit],
    ) -> Result<(f64, GradBundle)> {
        let x = self.layout.build_input(s, ctx)?;
        let acts = mlp_forward(&self.params, &x)?;
        let probs = softmax(acts.logits())?;
        let loss = cross_entropy(&probs, s.gold)?;
        let grad = backward_from_logits(
            &self.params,
            &acts,
            &softmax_cross_entropy_grad(&probs, s.gold),
        )?;
        Ok((loss, grad))
    }

    pub(crate) fn loss(&self, s: &Sample, ctx: &[&ContextUnit]) -> Result<f64> {
        let x = self.layout.build_input(s, ctx)?;
        let acts = mlp_forward(&self.params, &x)?;
        cross_entropy(&softmax(acts.logits())?, s.gold)
    }
}

/// Logits for the `K` answer choices. `ctx = None` is equivalent to zero-filled
/// context slots.
pub fn score_choices(m: &TaskModel, s: &Sample, ctx: Option<&[ContextUnit]>) -> Result<Vector> {
    let refs: Vec<&ContextUnit> = ctx.map(|c| c.iter().collect()).unwrap_or_default();
    let x = m.layout.build_input(s, &refs)?;
    Ok(mlp_forward(&m.params, &x)?.output)
}

pub fn predict(m: &TaskModel, s: &Sample, ctx: Option<&[ContextUnit]>) -> Result<Prediction> {
    let logits = score_choices(m, s, ctx)?;
    prediction_from_logits(logits.as_slice())
}

pub(crate) fn prediction_from_logits(logits: &[f64]) -> Result<Prediction> {
    let probs = softmax(logits)?;
    let label = crate::numerics::argmax(&probs).expect("nonempty");
    Ok(Prediction {
        label,
        confidence: probs[label],
    })
}

/// Which context units the task model sees for each sample.
pub enum ContextFeed<'a> {
    /// Vanilla model, no context slots.
    None,
    /// Oracle feed: the planted unit when there is one, otherwise nothing.
    GoldPlanted,
    /// Every window unit in temporal order, no selection.
    AllUnits { slots: usize },
    /// Arbitrary per-sample selection.
    Custom {
        slots: usize,
        select: &'a dyn Fn(&Sample) -> Result<Vec<ContextUnit>>,
    },
}

impl ContextFeed<'_> {
    pub fn slots(&self) -> usize {
        match self {
            ContextFeed::None => 0,
            ContextFeed::GoldPlanted => 1,
            ContextFeed::AllUnits { slots } | ContextFeed::Custom { slots, .. } => *slots,
        }
    }

    pub fn units(&self, s: &Sample) -> Result<Vec<ContextUnit>> {
        match self {
            ContextFeed::None => Ok(Vec::new()),
            ContextFeed::GoldPlanted => Ok(s
                .window
                .units()
                .iter()
                .filter(|u| u.is_planted())
                .cloned()
                .collect()),
            ContextFeed::AllUnits { .. } => Ok(s.window.units().to_vec()),
            ContextFeed::Custom { select, .. } => select(s),
        }
    }
}

/// Fraction of samples whose predicted label equals the gold label.
pub fn accuracy(m: &TaskModel, ds: &Dataset, feed: &ContextFeed) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in &ds.samples {
        let units = feed.units(s)?;
        if predict(m, s, Some(&units))?.label == s.gold {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// SGD on cross-entropy. The model is a vanilla VLM for `ContextFeed::None`
/// and a context model otherwise.
pub fn train_task_model(
    ds: &Dataset,
    cfg: &TrainConfig,
    feed: &ContextFeed,
) -> Result<(TaskModel, TrainReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::config(
            "cannot train a task model on an empty dataset",
        ));
    }
    let layout = InputLayout::for_meta(&ds.meta, feed.slots());
    let mut model = TaskModel::new(layout, &cfg.hidden, &mut cfg.init_rng())?;
    let feeds: Vec<Vec<ContextUnit>> = ds
        .samples
        .iter()
        .map(|s| feed.units(s))
        .collect::<Result<_>>()?;

    let epoch_losses = sgd_epochs(ds.len(), cfg, |batch| {
        let mut total = GradBundle::zeros_like(&model.params);
        let mut loss_sum = 0.0;
        for &i in batch {
            let refs: Vec<&ContextUnit> = feeds[i].iter().collect();
            let (loss, grad) = model.loss_and_grad(&ds.samples[i], &refs)?;
            loss_sum += loss;
            total.add_scaled(&grad, 1.0);
        }
        total.scale(1.0 / batch.len() as f64);
        model.params.sgd_step(&total, cfg.learning_rate)?;
        Ok(loss_sum)
    })?;

    let train_accuracy = accuracy(&model, ds, feed)?;
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}
