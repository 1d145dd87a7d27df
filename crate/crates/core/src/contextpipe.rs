//! Context-window assembly from clip corpora, descriptive-frame selection and
//! temporal-leakage filtering.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ContextUnit, ContextWindow, Dataset, QuestionKind};
use crate::error::{Error, Result};
use crate::numerics::{cosine, Vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_ordinal: i64,
    pub script_emb: Vector,
    pub frame_embs: Vec<Vector>,
    pub tag: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcludedSign {
    PositiveIndices,
    NegativeIndices,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageRule {
    pub keyword: String,
    pub excluded_sign: ExcludedSign,
}

impl LeakageRule {
    pub fn new(keyword: &str, excluded_sign: ExcludedSign) -> Result<Self> {
        let keyword = keyword.trim().to_lowercase();
        if keyword.is_empty() {
            return Err(Error::config("leakage keyword must be nonempty"));
        }
        Ok(LeakageRule {
            keyword,
            excluded_sign,
        })
    }
}

/// Shipped keyword list. Not canonical: the original keyword inventory is
/// unpublished, so treat this as a starting point.
pub fn default_rules() -> Vec<LeakageRule> {
    vec![
        LeakageRule::new("after", ExcludedSign::PositiveIndices).unwrap(),
        LeakageRule::new("before", ExcludedSign::NegativeIndices).unwrap(),
        LeakageRule::new("will", ExcludedSign::PositiveIndices).unwrap(),
    ]
}

/// Frame whose embedding best matches the clip script by cosine similarity.
/// Zero-norm embeddings score -1; ties go to the lowest index.
pub fn select_descriptive_frame(clip: &ClipRecord) -> Result<usize> {
    if clip.frame_embs.is_empty() {
        return Err(Error::Validation {
            id: clip.tag.clone(),
            message: "clip has no frames".into(),
        });
    }
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for (i, frame) in clip.frame_embs.iter().enumerate() {
        if frame.len() != clip.script_emb.len() {
            return Err(Error::shape(format!(
                "frame {i} of `{}` has length {} vs script {}",
                clip.tag,
                frame.len(),
                clip.script_emb.len()
            )));
        }
        let sim = cosine(frame.as_slice(), clip.script_emb.as_slice()).unwrap_or(-1.0);
        if sim > best_sim {
            best = i;
            best_sim = sim;
        }
    }
    Ok(best)
}

/// One unit per available offset in `[-n, n]` around the clip with ordinal
/// `center`. Offsets are positions in the temporally sorted corpus; offsets
/// past either end of the corpus are left out.
pub fn assemble_window(clips: &[ClipRecord], center: i64, n: usize) -> Result<ContextWindow> {
    let mut sorted: Vec<&ClipRecord> = clips.iter().collect();
    sorted.sort_by_key(|c| c.clip_ordinal);
    let pos = sorted
        .iter()
        .position(|c| c.clip_ordinal == center)
        .ok_or_else(|| Error::Lookup(format!("no clip with ordinal {center}")))?;
    let n_i = n as i64;
    let mut units = Vec::new();
    for offset in -n_i..=n_i {
        let p = pos as i64 + offset;
        if p < 0 || p >= sorted.len() as i64 {
            continue;
        }
        let clip = sorted[p as usize];
        let frame = select_descriptive_frame(clip)?;
        units.push(ContextUnit {
            index: offset,
            text_emb: clip.script_emb.clone(),
            image_emb: clip.frame_embs[frame].clone(),
            tag: clip.tag.clone(),
        });
    }
    ContextWindow::new(units, n)
}

/// Drops the units that could leak the answer of a temporal question.
/// Index 0 is always kept.
pub fn filter_temporal_leakage(window: &ContextWindow, kind: QuestionKind) -> ContextWindow {
    match kind {
        QuestionKind::Neutral => window.clone(),
        QuestionKind::AsksAfter => window.retain(|u| u.index <= 0),
        QuestionKind::AsksBefore => window.retain(|u| u.index >= 0),
    }
}

/// Applies [`filter_temporal_leakage`] to every sample using its own kind.
pub fn filter_dataset(ds: &Dataset) -> Dataset {
    ds.map_windows(|s| filter_temporal_leakage(&s.window, s.question_kind))
}

/// Case-insensitive substring match; the first matching rule wins.
pub fn match_question_kind(question: &str, rules: &[LeakageRule]) -> QuestionKind {
    let text = question.to_lowercase();
    rules
        .iter()
        .find(|r| text.contains(&r.keyword))
        .map(|r| match r.excluded_sign {
            ExcludedSign::PositiveIndices => QuestionKind::AsksAfter,
            ExcludedSign::NegativeIndices => QuestionKind::AsksBefore,
        })
        .unwrap_or(QuestionKind::Neutral)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub script_dim: usize,
    pub frame_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipCorpus {
    pub header: CorpusHeader,
    pub clips: Vec<ClipRecord>,
}

pub fn save_corpus(corpus: &ClipCorpus, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {display}"), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(format!("writing {display}"), e);
    serde_json::to_writer(&mut w, &corpus.header)?;
    w.write_all(b"\n").map_err(io)?;
    for c in &corpus.clips {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_corpus(path: &Path) -> Result<ClipCorpus> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {display}"), e))?;
    let mut header: Option<CorpusHeader> = None;
    let mut clips = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {display}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |e: serde_json::Error| Error::Parse {
            path: display.clone(),
            line: i + 1,
            message: e.to_string(),
        };
        match &header {
            None => header = Some(serde_json::from_str(&line).map_err(perr)?),
            Some(h) => {
                let clip: ClipRecord = serde_json::from_str(&line).map_err(perr)?;
                let bad_frames = clip.frame_embs.iter().any(|f| f.len() != h.frame_dim);
                if clip.script_emb.len() != h.script_dim || bad_frames || clip.frame_embs.is_empty()
                {
                    return Err(Error::Validation {
                        id: clip.tag,
                        message: "clip dims disagree with the corpus header or clip has no frames"
                            .into(),
                    });
                }
                clips.push(clip);
            }
        }
    }
    let header = header.ok_or_else(|| Error::Parse {
        path: display,
        line: 1,
        message: "missing header line".into(),
    })?;
    Ok(ClipCorpus { header, clips })
}

pub fn load_rules(path: &Path) -> Result<Vec<LeakageRule>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let raw: Vec<LeakageRule> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|r| LeakageRule::new(&r.keyword, r.excluded_sign))
        .collect()
}

pub fn save_rules(rules: &[LeakageRule], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rules)?;
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
