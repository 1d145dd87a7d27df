//! Pseudo-labels for the sufficiency detector.
//!
//! A sample is Positive (context-insufficient) when the context-aware model
//! answers it correctly and confidently while the vanilla model gets it wrong
//! with low confidence, Negative when both are correct and confident, and
//! Excluded otherwise. Labels come from a two-half protocol: each half is
//! labeled by a model pair trained on the other half only.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{split_halves, Dataset, Sample};
use crate::error::{Error, Result};
use crate::selector::{predict_with_context, train_joint, SelectionConfig, SelectorModel};
use crate::taskmodel::{predict, train_task_model, ContextFeed, TaskModel};
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub gamma: f64,
    pub mu: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            gamma: 0.7,
            mu: 0.5,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("mu", self.mu)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Responses of the context-aware and vanilla models on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceRecord {
    pub id: String,
    pub cvlm_correct: bool,
    pub cvlm_conf: f64,
    pub vlm_correct: bool,
    pub vlm_conf: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabel {
    Positive,
    Negative,
    Excluded,
}

/// Strict inequalities throughout: a confidence equal to a threshold never
/// qualifies.
pub fn label_one(rec: &InferenceRecord, cfg: &PseudoLabelConfig) -> PseudoLabel {
    let cvlm_sure = rec.cvlm_correct && rec.cvlm_conf > cfg.gamma;
    if cvlm_sure && !rec.vlm_correct && rec.vlm_conf < cfg.mu {
        PseudoLabel::Positive
    } else if cvlm_sure && rec.vlm_correct && rec.vlm_conf > cfg.gamma {
        PseudoLabel::Negative
    } else {
        PseudoLabel::Excluded
    }
}

/// Runs both models on `s`. The context-aware model selects its own context.
pub fn infer_record(
    vlm: &TaskModel,
    cvlm: &TaskModel,
    selector: &SelectorModel,
    scfg: &SelectionConfig,
    s: &Sample,
) -> Result<InferenceRecord> {
    let v = predict(vlm, s, None)?;
    let c = predict_with_context(cvlm, selector, s, scfg)?;
    Ok(InferenceRecord {
        id: s.id.clone(),
        cvlm_correct: c.label == s.gold,
        cvlm_conf: c.confidence,
        vlm_correct: v.label == s.gold,
        vlm_conf: v.confidence,
    })
}

/// One labeled record and the half it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRecord {
    pub record: InferenceRecord,
    pub label: PseudoLabel,
    pub half: usize,
}

/// Detector training data plus the provenance needed to audit it.
#[derive(Clone, Debug)]
pub struct CaraTrainingSet {
    /// Every inference record, Excluded ones included.
    pub records: Vec<LabeledRecord>,
    /// Positive (`true`) and Negative (`false`) samples.
    pub labeled: Vec<(Sample, bool)>,
    /// Ids each half's model pair was trained on.
    pub trained_on: [HashSet<String>; 2],
}

impl CaraTrainingSet {
    pub fn count(&self, label: PseudoLabel) -> usize {
        self.records.iter().filter(|r| r.label == label).count()
    }

    /// Fails if any record was labeled by a model pair that saw it in training.
    pub fn check_no_leakage(&self) -> Result<()> {
        for r in &self.records {
            if self.trained_on[r.half].contains(&r.record.id) {
                return Err(Error::Consistency(format!(
                    "sample `{}` was labeled by models trained on it",
                    r.record.id
                )));
            }
        }
        Ok(())
    }
}

/// Half-split cross-labeling. Half `h` is labeled by a vanilla model and a
/// jointly trained context-aware pair, both trained on half `1 - h`.
pub fn build_cara_training_set(
    ds: &Dataset,
    cfg: &PseudoLabelConfig,
    train_cfg: &TrainConfig,
    scfg: &SelectionConfig,
    seed: u64,
) -> Result<CaraTrainingSet> {
    cfg.validate()?;
    if ds.len() < 4 {
        return Err(Error::config(format!(
            "pseudo-labeling needs at least 4 samples, got {}",
            ds.len()
        )));
    }
    let (a, b) = split_halves(ds, seed)?;
    let halves = [a, b];
    let mut records = Vec::with_capacity(ds.len());
    let mut labeled = Vec::new();
    let mut trained_on: [HashSet<String>; 2] = Default::default();
    for h in 0..2 {
        let target = &halves[h];
        let source = &halves[1 - h];
        let (vlm, _) = train_task_model(source, train_cfg, &ContextFeed::None)?;
        let joint = train_joint(source, train_cfg, scfg)?;
        trained_on[h] = source.samples.iter().map(|s| s.id.clone()).collect();
        for s in &target.samples {
            let record = infer_record(&vlm, &joint.task, &joint.selector, scfg, s)?;
            let label = label_one(&record, cfg);
            match label {
                PseudoLabel::Positive => labeled.push((s.clone(), true)),
                PseudoLabel::Negative => labeled.push((s.clone(), false)),
                PseudoLabel::Excluded => {}
            }
            records.push(LabeledRecord {
                record,
                label,
                half: h,
            });
        }
    }
    let set = CaraTrainingSet {
        records,
        labeled,
        trained_on,
    };
    set.check_no_leakage()?;
    Ok(set)
}

/// One line of the pseudo-label file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRow {
    pub id: String,
    pub pseudo_label: PseudoLabel,
    pub cvlm_conf: f64,
    pub vlm_conf: f64,
    pub half: usize,
}

impl From<&LabeledRecord> for PseudoLabelRow {
    fn from(r: &LabeledRecord) -> Self {
        PseudoLabelRow {
            id: r.record.id.clone(),
            pseudo_label: r.label,
            cvlm_conf: r.record.cvlm_conf,
            vlm_conf: r.record.vlm_conf,
            half: r.half,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
}

/// JSON lines: a `{"config_hash": ..}` header, then one row per record.
pub fn save_pseudolabels(path: &Path, config_hash: &str, rows: &[PseudoLabelRow]) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    serde_json::to_writer(
        &mut w,
        &Header {
            config_hash: config_hash.to_string(),
        },
    )?;
    w.write_all(b"\n").map_err(io)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Returns the header hash and the rows.
pub fn load_pseudolabels(path: &Path) -> Result<(String, Vec<PseudoLabelRow>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let parse = |line: usize, e: serde_json::Error| Error::Parse {
        path: path.display().to_string(),
        line,
        message: e.to_string(),
    };
    let mut hash = None;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        if hash.is_none() {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse(i + 1, e))?;
            hash = Some(h.config_hash);
        } else {
            rows.push(serde_json::from_str(&line).map_err(|e| parse(i + 1, e))?);
        }
    }
    let hash = hash.ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok((hash, rows))
}
