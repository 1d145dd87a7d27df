//! Probabilistic context selection.
//!
//! A selector MLP scores every unit of a sample's context window with a
//! sigmoid relevance `s_i`. During training the task model is run once per
//! candidate context and the cross-entropies are mixed by the scores:
//!
//! ```text
//! L = sum_i w_i * l(M(x, c_i), y),   w_i = s_i / sum_j s_j  (normalized)
//!                                    w_i = s_i              (raw)
//! ```
//!
//! so the selector learns to put weight on units that make the task model's
//! loss small. With a selection number `r > 1` the candidates are all
//! `r`-subsets of the window, scored by the sum of member scores and fed to the
//! task model concatenated in temporal order; `r = 1` is the per-unit loss
//! above. At inference the best-scoring candidate is used.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ContextUnit, ContextWindow, Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::numerics::{cosine, mlp_backward, mlp_forward, GradBundle, Head, MlpParams};
use crate::taskmodel::{predict, InputLayout, Prediction, TaskModel};
use crate::training::{sgd_epochs, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorModel {
    pub text_dim: usize,
    pub image_dim: usize,
    pub context_text_dim: usize,
    pub context_image_dim: usize,
    pub params: MlpParams,
}

impl SelectorModel {
    fn dims(meta: &DatasetMeta, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![meta.text_dim + meta.image_dim + 2 * meta.context_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        dims
    }

    pub fn new(meta: &DatasetMeta, hidden: &[usize], rng: &mut impl rand::Rng) -> Result<Self> {
        Ok(Self::with_params(
            meta,
            MlpParams::init(&Self::dims(meta, hidden), Head::Sigmoid, rng)?,
        ))
    }

    pub fn zeros(meta: &DatasetMeta, hidden: &[usize]) -> Result<Self> {
        Ok(Self::with_params(
            meta,
            MlpParams::zeros(&Self::dims(meta, hidden), Head::Sigmoid)?,
        ))
    }

    fn with_params(meta: &DatasetMeta, params: MlpParams) -> Self {
        SelectorModel {
            text_dim: meta.text_dim,
            image_dim: meta.image_dim,
            context_text_dim: meta.context_dim,
            context_image_dim: meta.context_dim,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let expected =
            self.text_dim + self.image_dim + self.context_text_dim + self.context_image_dim;
        if self.params.in_dim() != expected
            || self.params.out_dim() != 1
            || self.params.head != Head::Sigmoid
        {
            return Err(Error::shape("selector parameters do not match its layout"));
        }
        Ok(())
    }

    /// Network input for one (sample, context unit) pair.
    pub fn input(&self, s: &Sample, u: &ContextUnit) -> Result<Vec<f64>> {
        if s.text_emb.len() != self.text_dim
            || s.image_emb.len() != self.image_dim
            || u.text_emb.len() != self.context_text_dim
            || u.image_emb.len() != self.context_image_dim
        {
            return Err(Error::shape(format!(
                "selector input dims do not match sample `{}`",
                s.id
            )));
        }
        let mut x = Vec::with_capacity(self.params.in_dim());
        x.extend_from_slice(s.text_emb.as_slice());
        x.extend_from_slice(s.image_emb.as_slice());
        x.extend_from_slice(u.text_emb.as_slice());
        x.extend_from_slice(u.image_emb.as_slice());
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Strategy {
    Probabilistic,
    EmbeddingSimilarity,
    FixedIndex { index: i64 },
    Random { seed: u64 },
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Probabilistic => "probabilistic".into(),
            Strategy::EmbeddingSimilarity => "embedding_similarity".into(),
            Strategy::FixedIndex { index } => format!("fixed_index({index})"),
            Strategy::Random { .. } => "random".into(),
        }
    }
}

fn default_selector_hidden() -> Vec<usize> {
    vec![16]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Radius of the window considered for selection. 0 means no context at
    /// all.
    pub window_size: usize,
    /// Number of units handed to the task model (`r`).
    pub selection_number: usize,
    pub strategy: Strategy,
    #[serde(default = "default_true")]
    pub normalize_scores: bool,
    #[serde(default = "default_selector_hidden")]
    pub selector_hidden: Vec<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            window_size: 3,
            selection_number: 2,
            strategy: Strategy::Probabilistic,
            normalize_scores: true,
            selector_hidden: default_selector_hidden(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.selection_number == 0 {
            return Err(Error::config("selection_number must be at least 1"));
        }
        if self.window_size > 0 && self.selection_number > 2 * self.window_size + 1 {
            return Err(Error::config(format!(
                "selection_number {} exceeds the {} units of a radius-{} window",
                self.selection_number,
                2 * self.window_size + 1,
                self.window_size
            )));
        }
        if self.selector_hidden.contains(&0) {
            return Err(Error::config("selector hidden widths must be positive"));
        }
        Ok(())
    }

    /// Task-model context slots implied by this configuration.
    pub fn context_slots(&self) -> usize {
        if self.window_size == 0 {
            0
        } else {
            self.selection_number
        }
    }

    /// The part of `window` this configuration selects from.
    pub fn restrict(&self, window: &ContextWindow) -> ContextWindow {
        if self.window_size == 0 {
            ContextWindow::empty(0)
        } else {
            window.truncated(self.window_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// One `(index, score)` per available unit. Empty for strategies that do
    /// not score.
    pub scores: Vec<(i64, f64)>,
    /// Chosen units in temporal order.
    pub chosen: Vec<ContextUnit>,
    pub combinations_evaluated: usize,
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    if r == 0 {
        out.push(Vec::new());
        return out;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        while i > 0 {
            i -= 1;
            if idx[i] != i + n - r {
                break;
            }
            if i == 0 {
                return out;
            }
        }
        if idx[i] == i + n - r {
            return out;
        }
        idx[i] += 1;
        for j in i + 1..r {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Tie-break key: nearer the source clip first, then earlier in time.
fn priority(index: i64) -> (i64, i64) {
    (index.abs(), index)
}

/// Sigmoid relevance of every unit in the sample's window.
pub fn score_contexts(sel: &SelectorModel, s: &Sample) -> Result<Vec<(i64, f64)>> {
    s.window
        .units()
        .iter()
        .map(|u| {
            let acts = mlp_forward(&sel.params, &sel.input(s, u)?)?;
            Ok((u.index, acts.output[0]))
        })
        .collect()
}

/// One term of the mixture loss.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTerm {
    /// Context indices fed together, in temporal order.
    pub members: Vec<i64>,
    pub weight: f64,
    pub cross_entropy: f64,
    pub contribution: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointLoss {
    pub loss: f64,
    pub terms: Vec<JointTerm>,
}

struct Candidates {
    sets: Vec<Vec<usize>>,
    /// Number of candidate sets containing any given unit.
    per_unit: usize,
}

fn candidates(window_len: usize, slots: usize) -> Candidates {
    let r = slots.min(window_len);
    let sets = combinations(window_len, r);
    let per_unit = (sets.len() * r).checked_div(window_len).unwrap_or(0);
    Candidates { sets, per_unit }
}

fn mixture_weights(scores: &[f64], sets: &[Vec<usize>], normalize: bool) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = sets
        .iter()
        .map(|c| c.iter().map(|&i| scores[i]).sum())
        .collect();
    let total: f64 = raw.iter().sum();
    if !normalize {
        return (raw, total);
    }
    if total > 0.0 {
        (raw.iter().map(|a| a / total).collect(), total)
    } else {
        (vec![1.0 / sets.len() as f64; sets.len()], total)
    }
}

/// The mixture loss for one sample. An empty window (or a model without
/// context slots) falls back to the plain no-context cross-entropy.
pub fn joint_loss(
    m: &TaskModel,
    sel: &SelectorModel,
    s: &Sample,
    normalize: bool,
) -> Result<JointLoss> {
    joint_eval(m, sel, s, normalize, false).map(|(l, _, _)| l)
}

/// [`joint_loss`] together with its gradients with respect to the task-model
/// and selector parameters.
pub fn joint_loss_and_grad(
    m: &TaskModel,
    sel: &SelectorModel,
    s: &Sample,
    normalize: bool,
) -> Result<(JointLoss, GradBundle, GradBundle)> {
    let (loss, tg, sg) = joint_eval(m, sel, s, normalize, true)?;
    Ok((loss, tg.expect("requested"), sg.expect("requested")))
}

#[allow(clippy::type_complexity)]
fn joint_eval(
    m: &TaskModel,
    sel: &SelectorModel,
    s: &Sample,
    normalize: bool,
    with_grad: bool,
) -> Result<(JointLoss, Option<GradBundle>, Option<GradBundle>)> {
    let units = s.window.units();
    if units.is_empty() || m.layout.context_slots == 0 {
        let (ce, tg) = if with_grad {
            let (l, g) = m.loss_and_grad(s, &[])?;
            (l, Some(g))
        } else {
            (m.loss(s, &[])?, None)
        };
        let loss = JointLoss {
            loss: ce,
            terms: vec![JointTerm {
                members: Vec::new(),
                weight: 1.0,
                cross_entropy: ce,
                contribution: ce,
            }],
        };
        return Ok((
            loss,
            tg,
            with_grad.then(|| GradBundle::zeros_like(&sel.params)),
        ));
    }

    let mut sel_acts = Vec::with_capacity(units.len());
    let mut scores = Vec::with_capacity(units.len());
    for u in units {
        let a = mlp_forward(&sel.params, &sel.input(s, u)?)?;
        scores.push(a.output[0]);
        sel_acts.push(a);
    }
    let cands = candidates(units.len(), m.layout.context_slots);
    let (weights, total) = mixture_weights(&scores, &cands.sets, normalize);

    let mut task_grad = with_grad.then(|| GradBundle::zeros_like(&m.params));
    let mut terms = Vec::with_capacity(cands.sets.len());
    let mut ce_per_set = Vec::with_capacity(cands.sets.len());
    for (set, &w) in cands.sets.iter().zip(&weights) {
        let refs: Vec<&ContextUnit> = set.iter().map(|&i| &units[i]).collect();
        let ce = match task_grad.as_mut() {
            Some(tg) => {
                let (ce, g) = m.loss_and_grad(s, &refs)?;
                tg.add_scaled(&g, w);
                ce
            }
            None => m.loss(s, &refs)?,
        };
        ce_per_set.push(ce);
        terms.push(JointTerm {
            members: refs.iter().map(|u| u.index).collect(),
            weight: w,
            cross_entropy: ce,
            contribution: w * ce,
        });
    }
    let loss: f64 = terms.iter().map(|t| t.contribution).sum();

    let sel_grad = if with_grad {
        // dL/ds_i: raw       -> sum_{S ni i} l_S
        //          normalized -> (sum_{S ni i} l_S - m_i L) / A
        let mut ce_by_unit = vec![0.0; units.len()];
        for (set, ce) in cands.sets.iter().zip(&ce_per_set) {
            for &i in set {
                ce_by_unit[i] += ce;
            }
        }
        let mut g = GradBundle::zeros_like(&sel.params);
        for (i, acts) in sel_acts.iter().enumerate() {
            let d = if !normalize {
                ce_by_unit[i]
            } else if total > 0.0 {
                (ce_by_unit[i] - cands.per_unit as f64 * loss) / total
            } else {
                0.0
            };
            if d != 0.0 {
                let gi = mlp_backward(&sel.params, acts, &[d])?;
                g.add_scaled(&gi, 1.0);
            }
        }
        Some(g)
    } else {
        None
    };

    Ok((JointLoss { loss, terms }, task_grad, sel_grad))
}

/// Output of [`train_joint`].
#[derive(Clone, Debug)]
pub struct JointTraining {
    pub task: TaskModel,
    pub selector: SelectorModel,
    pub report: TrainReport,
}

/// Trains the task model and the selector together by SGD on the mean mixture
/// loss. Windows are first restricted to `scfg.window_size`; with window size 0
/// this reduces exactly to training a vanilla model.
pub fn train_joint(
    ds: &Dataset,
    cfg: &TrainConfig,
    scfg: &SelectionConfig,
) -> Result<JointTraining> {
    cfg.validate()?;
    scfg.validate()?;
    if scfg.strategy != Strategy::Probabilistic {
        return Err(Error::config(
            "joint training requires the probabilistic strategy",
        ));
    }
    if ds.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let layout = InputLayout::for_meta(&ds.meta, scfg.context_slots());
    let mut task = TaskModel::new(layout, &cfg.hidden, &mut cfg.init_rng())?;
    let mut selector =
        SelectorModel::new(&ds.meta, &scfg.selector_hidden, &mut cfg.aux_init_rng())?;
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .map(|s| s.with_window(scfg.restrict(&s.window)))
        .collect();

    let epoch_losses = sgd_epochs(samples.len(), cfg, |batch| {
        let mut tg = GradBundle::zeros_like(&task.params);
        let mut sg = GradBundle::zeros_like(&selector.params);
        let mut loss_sum = 0.0;
        for &i in batch {
            let (l, t, g) =
                joint_loss_and_grad(&task, &selector, &samples[i], scfg.normalize_scores)?;
            loss_sum += l.loss;
            tg.add_scaled(&t, 1.0);
            sg.add_scaled(&g, 1.0);
        }
        let inv = 1.0 / batch.len() as f64;
        tg.scale(inv);
        sg.scale(inv);
        task.params.sgd_step(&tg, cfg.learning_rate)?;
        selector.params.sgd_step(&sg, cfg.learning_rate)?;
        Ok(loss_sum)
    })?;

    let mut correct = 0usize;
    for s in &ds.samples {
        if predict_with_context(&task, &selector, s, scfg)?.label == s.gold {
            correct += 1;
        }
    }
    Ok(JointTraining {
        task,
        selector,
        report: TrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / ds.len() as f64,
        },
    })
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

type Ranked = (f64, Vec<(i64, i64)>, Vec<usize>);

/// Best candidate by summed key; ties go to the candidate whose members come
/// first under the priority order.
fn best_set(keys: &[f64], units: &[ContextUnit], r: usize) -> (Vec<usize>, usize) {
    let sets = combinations(units.len(), r);
    let count = sets.len();
    let rank = |set: &Vec<usize>| {
        let mut p: Vec<(i64, i64)> = set.iter().map(|&i| priority(units[i].index)).collect();
        p.sort();
        p
    };
    let mut best: Option<Ranked> = None;
    for set in sets {
        let total: f64 = set.iter().map(|&i| keys[i]).sum();
        let better = match &best {
            None => true,
            Some((bt, br, _)) => total > *bt || (total == *bt && rank(&set) < *br),
        };
        if better {
            best = Some((total, rank(&set), set));
        }
    }
    (best.map(|b| b.2).unwrap_or_default(), count)
}

/// Picks the context for one sample. The window is first restricted to
/// `scfg.window_size`. `sel` is required for the probabilistic strategy only.
pub fn select_context(
    sel: Option<&SelectorModel>,
    s: &Sample,
    scfg: &SelectionConfig,
) -> Result<SelectionResult> {
    scfg.validate()?;
    let window = scfg.restrict(&s.window);
    let units = window.units();
    let r = scfg.selection_number.min(units.len());
    if units.is_empty() {
        return Ok(SelectionResult {
            scores: Vec::new(),
            chosen: Vec::new(),
            combinations_evaluated: 0,
        });
    }
    let (scores, picked, evaluated) = match scfg.strategy {
        Strategy::Probabilistic => {
            let sel =
                sel.ok_or_else(|| Error::config("probabilistic selection needs a selector model"))?;
            let scores = score_contexts(sel, &s.with_window(window.clone()))?;
            let keys: Vec<f64> = scores.iter().map(|(_, v)| *v).collect();
            let (set, n) = best_set(&keys, units, r);
            (scores, set, n)
        }
        Strategy::EmbeddingSimilarity => {
            let mut keys = Vec::with_capacity(units.len());
            for u in units {
                if u.text_emb.len() != s.text_emb.len() {
                    return Err(Error::shape(
                        "embedding similarity needs context text dims equal to the sample text dims",
                    ));
                }
                keys.push(cosine(s.text_emb.as_slice(), u.text_emb.as_slice()).unwrap_or(-1.0));
            }
            let (set, n) = best_set(&keys, units, r);
            (units.iter().map(|u| u.index).zip(keys).collect(), set, n)
        }
        Strategy::FixedIndex { index } => {
            let set: Vec<usize> = units
                .iter()
                .position(|u| u.index == index)
                .into_iter()
                .collect();
            (Vec::new(), set, 1)
        }
        Strategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&s.id));
            let mut all: Vec<usize> = (0..units.len()).collect();
            all.shuffle(&mut rng);
            all.truncate(r);
            (Vec::new(), all, 1)
        }
    };
    let mut picked = picked;
    picked.sort_unstable();
    Ok(SelectionResult {
        scores,
        chosen: picked.into_iter().map(|i| units[i].clone()).collect(),
        combinations_evaluated: evaluated,
    })
}

pub fn predict_with_context(
    m: &TaskModel,
    sel: &SelectorModel,
    s: &Sample,
    scfg: &SelectionConfig,
) -> Result<Prediction> {
    if m.layout.context_slots == 0 {
        return predict(m, s, None);
    }
    let picked = select_context(Some(sel), s, scfg)?;
    predict(m, s, Some(&picked.chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_dataset, GeneratorConfig};
    use crate::numerics::{grad_check_flat, Vector};
    use crate::taskmodel::score_choices;
    use rand::Rng;

    fn unit(index: i64, v: f64) -> ContextUnit {
        ContextUnit {
            index,
            text_emb: Vector::new(vec![v, 1.0]),
            image_emb: Vector::new(vec![0.0, v]),
            tag: format!("clip_{index}"),
        }
    }

    fn toy_sample(indices: &[i64]) -> Sample {
        let units = indices.iter().map(|&i| unit(i, i as f64 * 0.3)).collect();
        let n = indices
            .iter()
            .map(|i| i.unsigned_abs() as usize)
            .max()
            .unwrap_or(0);
        Sample {
            id: "toy".into(),
            text_emb: Vector::new(vec![0.2, -0.4]),
            image_emb: Vector::new(vec![1.0, 0.5]),
            num_choices: 3,
            gold: 1,
            window: ContextWindow::new(units, n).unwrap(),
            question_kind: crate::datamodel::QuestionKind::Neutral,
            sufficiency_truth: None,
        }
    }

    fn toy_meta() -> DatasetMeta {
        DatasetMeta {
            text_dim: 2,
            image_dim: 2,
            context_dim: 2,
            num_choices: 3,
            window_radius: 3,
            seed: 0,
            config_hash: String::new(),
        }
    }

    #[test]
    fn combination_counts() {
        assert_eq!(combinations(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(combinations(7, 2).len(), 21);
        assert_eq!(combinations(7, 7).len(), 1);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert!(combinations(2, 3).is_empty());
        assert_eq!(combinations(1, 1), vec![vec![0]]);
    }

    #[test]
    fn zero_selector_scores_half() {
        let sel = SelectorModel::zeros(&toy_meta(), &[4]).unwrap();
        let s = toy_sample(&[-1, 0, 1]);
        let scores = score_contexts(&sel, &s).unwrap();
        assert!(scores.iter().all(|(_, v)| *v == 0.5));
    }

    #[test]
    fn duplicate_units_score_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sel = SelectorModel::new(&toy_meta(), &[4], &mut rng).unwrap();
        let mut s = toy_sample(&[-1, 1]);
        let mut units = s.window.units().to_vec();
        units[1].text_emb = units[0].text_emb.clone();
        units[1].image_emb = units[0].image_emb.clone();
        s.window = ContextWindow::new(units, 1).unwrap();
        let sc = score_contexts(&sel, &s).unwrap();
        assert_eq!(sc[0].1, sc[1].1);
    }

    #[test]
    fn single_unit_loss_is_its_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layout = InputLayout::for_meta(&toy_meta(), 1);
        let m = TaskModel::new(layout, &[5], &mut rng).unwrap();
        let sel = SelectorModel::new(&toy_meta(), &[4], &mut rng).unwrap();
        let s = toy_sample(&[2]);
        let jl = joint_loss(&m, &sel, &s, true).unwrap();
        assert_eq!(jl.terms.len(), 1);
        assert_eq!(jl.terms[0].weight, 1.0);
        let u = &s.window.units()[0];
        assert_eq!(jl.loss, m.loss(&s, &[u]).unwrap());
    }

    #[test]
    fn equal_scores_give_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TaskModel::new(InputLayout::for_meta(&toy_meta(), 1), &[5], &mut rng).unwrap();
        let sel = SelectorModel::zeros(&toy_meta(), &[3]).unwrap();
        let s = toy_sample(&[-1, 1]);
        let jl = joint_loss(&m, &sel, &s, true).unwrap();
        let mean = 0.5 * (jl.terms[0].cross_entropy + jl.terms[1].cross_entropy);
        assert!((jl.loss - mean).abs() < 1e-15);
    }

    #[test]
    fn empty_window_falls_back_to_no_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = TaskModel::new(InputLayout::for_meta(&toy_meta(), 1), &[5], &mut rng).unwrap();
        let sel = SelectorModel::zeros(&toy_meta(), &[3]).unwrap();
        let s = toy_sample(&[]);
        let jl = joint_loss(&m, &sel, &s, true).unwrap();
        assert_eq!(jl.loss, m.loss(&s, &[]).unwrap());
        let (_, _, sg) = joint_loss_and_grad(&m, &sel, &s, true).unwrap();
        assert!(sg.is_zero());
    }

    #[test]
    fn contributions_sum_to_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = TaskModel::new(InputLayout::for_meta(&toy_meta(), 2), &[5], &mut rng).unwrap();
        let sel = SelectorModel::new(&toy_meta(), &[4], &mut rng).unwrap();
        let s = toy_sample(&[-2, -1, 0, 1]);
        for normalize in [true, false] {
            let jl = joint_loss(&m, &sel, &s, normalize).unwrap();
            assert_eq!(jl.terms.len(), 6);
            let sum: f64 = jl.terms.iter().map(|t| t.contribution).sum();
            assert_eq!(sum, jl.loss);
        }
    }

    #[test]
    fn selection_examples() {
        let cfg = |r| SelectionConfig {
            window_size: 1,
            selection_number: r,
            ..SelectionConfig::default()
        };
        let keys = [0.9, 0.1, 0.5];
        let units: Vec<ContextUnit> = [-1, 0, 1].iter().map(|&i| unit(i, 0.0)).collect();
        assert_eq!(best_set(&keys, &units, 1).0, vec![0]);
        let (set, n) = best_set(&keys, &units, 2);
        assert_eq!(n, 3);
        assert_eq!(set, vec![0, 2]);
        // tie at +-1 -> negative first
        let (set, _) = best_set(&[0.7, 0.2, 0.7], &units, 1);
        assert_eq!(units[set[0]].index, -1);
        // tie between 0 and -1 -> nearest first
        let (set, _) = best_set(&[0.7, 0.7, 0.1], &units, 1);
        assert_eq!(units[set[0]].index, 0);

        let sel = SelectorModel::zeros(&toy_meta(), &[3]).unwrap();
        let s = toy_sample(&[-1, 0, 1]);
        let res = select_context(Some(&sel), &s, &cfg(2)).unwrap();
        assert_eq!(res.combinations_evaluated, 3);
        assert_eq!(res.scores.len(), 3);
        // all scores tie at 0.5 -> {0, -1}, returned in temporal order
        assert_eq!(
            res.chosen.iter().map(|u| u.index).collect::<Vec<_>>(),
            vec![-1, 0]
        );
        let res = select_context(Some(&sel), &s, &cfg(3)).unwrap();
        assert_eq!(res.chosen.len(), 3);
    }

    #[test]
    fn r_larger_than_window_returns_everything() {
        let sel = SelectorModel::zeros(&toy_meta(), &[3]).unwrap();
        let s = toy_sample(&[-1, 1]);
        let res = select_context(
            Some(&sel),
            &s,
            &SelectionConfig {
                window_size: 2,
                selection_number: 4,
                ..SelectionConfig::default()
            },
        )
        .unwrap();
        assert_eq!(res.chosen.len(), 2);
    }

    #[test]
    fn fixed_and_random_strategies() {
        let s = toy_sample(&[-1, 0, 1]);
        let fixed = |index| SelectionConfig {
            window_size: 1,
            selection_number: 1,
            strategy: Strategy::FixedIndex { index },
            ..SelectionConfig::default()
        };
        let res = select_context(None, &s, &fixed(1)).unwrap();
        assert_eq!(res.chosen[0].index, 1);
        let mut sparse = s.clone();
        sparse.window = s.window.retain(|u| u.index != 1);
        assert!(select_context(None, &sparse, &fixed(1))
            .unwrap()
            .chosen
            .is_empty());

        let rnd = SelectionConfig {
            window_size: 1,
            selection_number: 2,
            strategy: Strategy::Random { seed: 9 },
            ..SelectionConfig::default()
        };
        let a = select_context(None, &s, &rnd).unwrap();
        let b = select_context(None, &s, &rnd).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.chosen.len(), 2);
        assert!(a.chosen[0].index < a.chosen[1].index);

        assert!(select_context(None, &s, &SelectionConfig::default()).is_err());
    }

    #[test]
    fn embedding_similarity_ranks_by_cosine() {
        let mut s = toy_sample(&[-1, 0, 1]);
        let mut units = s.window.units().to_vec();
        units[2].text_emb = s.text_emb.scaled(3.0);
        s.window = ContextWindow::new(units, 1).unwrap();
        let cfg = SelectionConfig {
            window_size: 1,
            selection_number: 1,
            strategy: Strategy::EmbeddingSimilarity,
            ..SelectionConfig::default()
        };
        let res = select_context(None, &s, &cfg).unwrap();
        assert_eq!(res.chosen[0].index, 1);
    }

    #[test]
    fn window_restriction() {
        let s = toy_sample(&[-3, -1, 0, 2]);
        let cfg = SelectionConfig {
            window_size: 1,
            selection_number: 3,
            ..SelectionConfig::default()
        };
        assert_eq!(cfg.restrict(&s.window).indices(), vec![-1, 0]);
        let none = SelectionConfig {
            window_size: 0,
            ..cfg.clone()
        };
        assert!(none.restrict(&s.window).is_empty());
        assert_eq!(none.context_slots(), 0);
        assert!(SelectionConfig {
            selection_number: 4,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = generate_dataset(&GeneratorConfig {
            num_samples: 20,
            seed: 3,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            hidden: vec![6],
            ..TrainConfig::default()
        };
        let scfg = SelectionConfig {
            selection_number: 1,
            selector_hidden: vec![4],
            ..SelectionConfig::default()
        };
        let out = train_joint(&ds, &cfg, &scfg).unwrap();
        let layout = InputLayout::for_meta(&ds.meta, 1);
        let fresh_task = TaskModel::new(layout, &cfg.hidden, &mut cfg.init_rng()).unwrap();
        let fresh_sel =
            SelectorModel::new(&ds.meta, &scfg.selector_hidden, &mut cfg.aux_init_rng()).unwrap();
        assert_eq!(out.task, fresh_task);
        assert_eq!(out.selector, fresh_sel);
    }

    fn random_instance(
        seed: u64,
        window: &[i64],
        slots: usize,
    ) -> (TaskModel, SelectorModel, Sample) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TaskModel::new(InputLayout::for_meta(&toy_meta(), slots), &[5], &mut rng).unwrap();
        let sel = SelectorModel::new(&toy_meta(), &[4], &mut rng).unwrap();
        let mut s = toy_sample(window);
        let mut units = s.window.units().to_vec();
        for u in &mut units {
            u.text_emb = Vector::new(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
            u.image_emb = Vector::new(vec![
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]);
        }
        s.window = ContextWindow::new(units, s.window.radius()).unwrap();
        (m, sel, s)
    }

    /// Independent enumeration: softmax cross-entropy written out by hand.
    fn brute_force(m: &TaskModel, sel: &SelectorModel, s: &Sample) -> f64 {
        let scores: Vec<f64> = score_contexts(sel, s)
            .unwrap()
            .into_iter()
            .map(|(_, v)| v)
            .collect();
        let total: f64 = scores.iter().sum();
        let mut loss = 0.0;
        for (u, sc) in s.window.units().iter().zip(&scores) {
            let logits = score_choices(m, s, Some(std::slice::from_ref(u))).unwrap();
            let z = logits.as_slice();
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + z.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += sc / total * (lse - z[s.gold]);
        }
        loss
    }

    #[test]
    fn matches_brute_force_enumeration() {
        for seed in 0..20u64 {
            let (m, sel, s) = random_instance(seed, &[-3, -2, -1, 0, 1, 2, 3], 1);
            let jl = joint_loss(&m, &sel, &s, true).unwrap();
            assert!((jl.loss - brute_force(&m, &sel, &s)).abs() < 1e-10);
        }
    }

    #[test]
    fn weights_are_scale_invariant() {
        let scores = [0.2, 0.7, 0.4];
        let sets = combinations(3, 1);
        let (w, _) = mixture_weights(&scores, &sets, true);
        let scaled: Vec<f64> = scores.iter().map(|v| v * 3.7).collect();
        let (w2, _) = mixture_weights(&scaled, &sets, true);
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_survives_monotone_transforms() {
        let units: Vec<ContextUnit> = [-2, -1, 0, 1, 2].iter().map(|&i| unit(i, 0.0)).collect();
        let keys = [0.3, 0.8, 0.1, 0.8, 0.5];
        let base = best_set(&keys, &units, 1).0;
        let t: Vec<f64> = keys.iter().map(|v: &f64| (5.0 * v).exp() - 2.0).collect();
        assert_eq!(best_set(&t, &units, 1).0, base);
    }

    fn check_joint_grads(seed: u64, window: &[i64], slots: usize, normalize: bool) -> f64 {
        let (m, sel, s) = random_instance(seed, window, slots);
        let (_, tg, sg) = joint_loss_and_grad(&m, &sel, &s, normalize).unwrap();
        let nt = m.params.param_count();
        let mut theta = m.params.to_flat();
        theta.extend(sel.params.to_flat());
        let mut analytic = tg.to_flat();
        analytic.extend(sg.to_flat());
        let mut mp = m.clone();
        let mut sp = sel.clone();
        grad_check_flat(
            &theta,
            &analytic,
            |flat| {
                mp.params.set_flat(&flat[..nt]).unwrap();
                sp.params.set_flat(&flat[nt..]).unwrap();
                joint_loss(&mp, &sp, &s, normalize).unwrap().loss
            },
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            assert!(
                check_joint_grads(seed, &[-1, 0, 1], 1, true) < 1e-4,
                "seed {seed}"
            );
            assert!(
                check_joint_grads(seed, &[-1, 0, 1], 1, false) < 1e-4,
                "seed {seed}"
            );
            assert!(
                check_joint_grads(seed, &[-2, -1, 0, 1], 2, true) < 1e-4,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn window_zero_reproduces_vanilla_training() {
        let ds = generate_dataset(&GeneratorConfig {
            num_samples: 40,
            seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            hidden: vec![8],
            batch_size: 7,
            ..TrainConfig::default()
        };
        let scfg = SelectionConfig {
            window_size: 0,
            selection_number: 1,
            ..SelectionConfig::default()
        };
        let joint = train_joint(&ds, &cfg, &scfg).unwrap();
        let (plain, _) =
            crate::taskmodel::train_task_model(&ds, &cfg, &crate::taskmodel::ContextFeed::None)
                .unwrap();
        assert_eq!(joint.task, plain);
    }
}
