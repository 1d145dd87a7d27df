//! Context-blind detector of insufficient context, and the abstention rule
//! built on it.
//!
//! The detector sees only the question text and image embeddings, never the
//! context window. Its score `C` is the probability that the sample needs
//! context the model does not have. Two decision modes are offered:
//! `cara_only` abstains when `C > theta`; `fused` answers when
//! `H = w (1 - C) + (1 - w) V >= theta`, with `V` the task model's confidence.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Sample, Sufficiency};
use crate::error::{Error, Result};
use crate::numerics::{backward_from_logits, mlp_forward, GradBundle, Head, MlpParams, PROB_FLOOR};
use crate::selector::{predict_with_context, SelectionConfig, SelectorModel};
use crate::taskmodel::{predict, Prediction, TaskModel};
use crate::training::{sgd_epochs, TrainConfig, TrainReport};

pub const DEFAULT_POS_WEIGHT: f64 = 6.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaraModel {
    pub text_dim: usize,
    pub image_dim: usize,
    pub params: MlpParams,
}

impl CaraModel {
    fn dims(text_dim: usize, image_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut dims = vec![text_dim + image_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        dims
    }

    pub fn new(
        text_dim: usize,
        image_dim: usize,
        hidden: &[usize],
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        Ok(CaraModel {
            text_dim,
            image_dim,
            params: MlpParams::init(&Self::dims(text_dim, image_dim, hidden), Head::Sigmoid, rng)?,
        })
    }

    pub fn zeros(text_dim: usize, image_dim: usize, hidden: &[usize]) -> Result<Self> {
        Ok(CaraModel {
            text_dim,
            image_dim,
            params: MlpParams::zeros(&Self::dims(text_dim, image_dim, hidden), Head::Sigmoid)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.params.in_dim() != self.text_dim + self.image_dim
            || self.params.out_dim() != 1
            || self.params.head != Head::Sigmoid
        {
            return Err(Error::shape("detector parameters do not match its layout"));
        }
        Ok(())
    }

    pub fn input(&self, s: &Sample) -> Result<Vec<f64>> {
        if s.text_emb.len() != self.text_dim || s.image_emb.len() != self.image_dim {
            return Err(Error::shape(format!(
                "sample `{}` has dims ({}, {}), detector expects ({}, {})",
                s.id,
                s.text_emb.len(),
                s.image_emb.len(),
                self.text_dim,
                self.image_dim
            )));
        }
        let mut x = Vec::with_capacity(self.text_dim + self.image_dim);
        x.extend_from_slice(s.text_emb.as_slice());
        x.extend_from_slice(s.image_emb.as_slice());
        Ok(x)
    }
}

/// Detector score `C`. Reads `text_emb` and `image_emb` only.
pub fn cara_score(det: &CaraModel, s: &Sample) -> Result<f64> {
    Ok(mlp_forward(&det.params, &det.input(s)?)?.output[0])
}

/// Mean weighted binary cross-entropy over `batch` (label `true` = Positive)
/// and its gradient. Positive terms are multiplied by `pos_weight`.
pub fn weighted_bce_and_grad(
    det: &CaraModel,
    batch: &[(&Sample, bool)],
    pos_weight: f64,
) -> Result<(f64, GradBundle)> {
    if batch.is_empty() {
        return Err(Error::config("empty detector batch"));
    }
    let mut grad = GradBundle::zeros_like(&det.params);
    let mut loss = 0.0;
    for (s, positive) in batch {
        let acts = mlp_forward(&det.params, &det.input(s)?)?;
        let c = acts.output[0];
        // d/dz of -log(sigmoid(z)) is c - 1; of -log(1 - sigmoid(z)) is c.
        let (l, dz) = if *positive {
            (-pos_weight * c.max(PROB_FLOOR).ln(), pos_weight * (c - 1.0))
        } else {
            (-(1.0 - c).max(PROB_FLOOR).ln(), c)
        };
        loss += l;
        grad.add_scaled(&backward_from_logits(&det.params, &acts, &[dz])?, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss * inv, grad))
}

/// Trains the detector on pseudo-labeled samples (`true` = Positive).
pub fn train_cara(
    labeled: &[(Sample, bool)],
    pos_weight: f64,
    cfg: &TrainConfig,
) -> Result<(CaraModel, TrainReport)> {
    cfg.validate()?;
    if !(pos_weight > 0.0 && pos_weight.is_finite()) {
        return Err(Error::config("pos_weight must be positive"));
    }
    let positives = labeled.iter().filter(|(_, p)| *p).count();
    if positives == 0 || positives == labeled.len() {
        return Err(Error::config(format!(
            "detector training needs both classes, got {positives} positive of {}",
            labeled.len()
        )));
    }
    let first = &labeled[0].0;
    let mut det = CaraModel::new(
        first.text_emb.len(),
        first.image_emb.len(),
        &cfg.hidden,
        &mut cfg.init_rng(),
    )?;
    let epoch_losses = sgd_epochs(labeled.len(), cfg, |batch| {
        let items: Vec<(&Sample, bool)> = batch
            .iter()
            .map(|&i| (&labeled[i].0, labeled[i].1))
            .collect();
        let (loss, grad) = weighted_bce_and_grad(&det, &items, pos_weight)?;
        det.params.sgd_step(&grad, cfg.learning_rate)?;
        Ok(loss * batch.len() as f64)
    })?;
    let mut correct = 0usize;
    for (s, p) in labeled {
        if (cara_score(&det, s)? > 0.5) == *p {
            correct += 1;
        }
    }
    Ok((
        det,
        TrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / labeled.len() as f64,
        },
    ))
}

/// `H = w (1 - C) + (1 - w) V`.
pub fn heuristic_score(c: f64, v: f64, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&c) || !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation {
            id: "heuristic_score".into(),
            message: format!("C = {c} and V = {v} must lie in [0, 1]"),
        });
    }
    if !(w > 0.0 && w <= 1.0) {
        return Err(Error::Validation {
            id: "heuristic_score".into(),
            message: format!("w = {w} must lie in (0, 1]"),
        });
    }
    Ok(w * (1.0 - c) + (1.0 - w) * v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstentionMode {
    CaraOnly,
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbstentionConfig {
    pub theta: f64,
    pub w: f64,
    pub mode: AbstentionMode,
}

impl AbstentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config(format!(
                "theta = {} must lie in [0, 1]",
                self.theta
            )));
        }
        if !(self.w > 0.0 && self.w <= 1.0) {
            return Err(Error::config(format!("w = {} must lie in (0, 1]", self.w)));
        }
        Ok(())
    }
}

/// How the answer is produced once the detector lets a sample through.
#[derive(Clone, Copy, Debug)]
pub enum Answerer<'a> {
    Plain(&'a TaskModel),
    WithContext {
        task: &'a TaskModel,
        selector: &'a SelectorModel,
        selection: &'a SelectionConfig,
    },
}

impl Answerer<'_> {
    pub fn predict(&self, s: &Sample) -> Result<Prediction> {
        match self {
            Answerer::Plain(m) => predict(m, s, None),
            Answerer::WithContext {
                task,
                selector,
                selection,
            } => predict_with_context(task, selector, s, selection),
        }
    }
}

/// Everything a decision needs, computed once per sample so that threshold
/// sweeps do not rerun the models.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: String,
    pub c: f64,
    pub v: f64,
    pub label: usize,
    pub correct: bool,
    pub truth: Option<Sufficiency>,
}

pub fn score_sample(det: &CaraModel, answerer: &Answerer, s: &Sample) -> Result<ScoredSample> {
    let c = cara_score(det, s)?;
    let p = answerer.predict(s)?;
    Ok(ScoredSample {
        id: s.id.clone(),
        c,
        v: p.confidence,
        label: p.label,
        correct: p.label == s.gold,
        truth: s.sufficiency_truth,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub id: String,
    pub c: f64,
    pub v: f64,
    /// Present in fused mode only.
    pub h: Option<f64>,
    pub abstained: bool,
    pub label: Option<usize>,
    pub correct: Option<bool>,
}

pub fn decide_scored(x: &ScoredSample, acfg: &AbstentionConfig) -> Result<Decision> {
    acfg.validate()?;
    let (h, abstained) = match acfg.mode {
        AbstentionMode::CaraOnly => (None, x.c > acfg.theta),
        AbstentionMode::Fused => {
            let h = heuristic_score(x.c, x.v, acfg.w)?;
            (Some(h), h < acfg.theta)
        }
    };
    Ok(Decision {
        id: x.id.clone(),
        c: x.c,
        v: x.v,
        h,
        abstained,
        label: (!abstained).then_some(x.label),
        correct: (!abstained).then_some(x.correct),
    })
}

pub fn decide(
    det: &CaraModel,
    answerer: &Answerer,
    s: &Sample,
    acfg: &AbstentionConfig,
) -> Result<Decision> {
    decide_scored(&score_sample(det, answerer, s)?, acfg)
}

const DECISION_HEADER: [&str; 7] = ["id", "C", "V", "H", "abstained", "label", "correct"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Decision log CSV, preceded by a `# config_hash: <hash>` line.
pub fn write_decisions(path: &Path, config_hash: &str, decisions: &[Decision]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(file, "# config_hash: {config_hash}")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(DECISION_HEADER)?;
    for d in decisions {
        w.write_record([
            d.id.clone(),
            d.c.to_string(),
            d.v.to_string(),
            opt(d.h),
            d.abstained.to_string(),
            opt(d.label),
            opt(d.correct),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads the leading `# config_hash: ..` line of an artifact CSV.
pub fn read_csv_hash(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    first
        .trim()
        .strip_prefix("# config_hash:")
        .map(|h| h.trim().to_string())
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "missing `# config_hash:` line".into(),
        })
}

pub fn read_decisions(path: &Path) -> Result<(String, Vec<Decision>)> {
    let hash = read_csv_hash(path)?;
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    let bad = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != DECISION_HEADER {
        return Err(bad(2, format!("unexpected header {:?}", headers)));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 3;
        let f = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize| {
            f(k).parse::<f64>()
                .map_err(|e| bad(line, format!("{}: {e}", DECISION_HEADER[k])))
        };
        let flag = |k: usize| {
            f(k).parse::<bool>()
                .map_err(|e| bad(line, format!("{}: {e}", DECISION_HEADER[k])))
        };
        out.push(Decision {
            id: f(0).to_string(),
            c: num(1)?,
            v: num(2)?,
            h: if f(3).is_empty() { None } else { Some(num(3)?) },
            abstained: flag(4)?,
            label: if f(5).is_empty() {
                None
            } else {
                Some(f(5).parse().map_err(|e| bad(line, format!("label: {e}")))?)
            },
            correct: if f(6).is_empty() {
                None
            } else {
                Some(flag(6)?)
            },
        });
    }
    Ok((hash, out))
}
