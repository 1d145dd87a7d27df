//! Samples, context windows, the planted-context generator and the JSON-lines
//! dataset format.
//!
//! The generator builds a world whose context sufficiency is known. Every
//! dataset has a fixed geometry (drawn from `geometry_seed`): one unit "answer
//! code" per class in each embedding space, plus a "needs context" marker
//! direction in text space.
//!
//! * Sufficient samples carry the gold code in `(x_T, x_I)` at a per-sample
//!   amplitude, and all of their context units are noise.
//! * Insufficient samples carry the marker plus the code of a decoy class drawn
//!   independently of the gold label, so the inputs hold no information about
//!   the answer. Exactly one context unit (the planted unit) carries the gold
//!   code; the others are noise.
//!
//! Every sample also has a random topic vector shared between `x_T` and its
//! planted unit, which makes plain embedding similarity a weak retrieval cue.
//! Planted units are tagged `planted_<i>`; noise units are tagged `clip_<i>`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Vector;

const PLANTED_TAG: &str = "planted";
const NOISE_TAG: &str = "clip";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextUnit {
    pub index: i64,
    pub text_emb: Vector,
    pub image_emb: Vector,
    pub tag: String,
}

impl ContextUnit {
    pub fn is_planted(&self) -> bool {
        self.tag.starts_with(PLANTED_TAG)
    }
}

/// Context units sorted by strictly increasing index within `[-n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindow {
    units: Vec<ContextUnit>,
    n: usize,
}

impl ContextWindow {
    pub fn new(units: Vec<ContextUnit>, n: usize) -> Result<Self> {
        let bound = n as i64;
        for u in &units {
            if u.index.abs() > bound {
                return Err(Error::shape(format!(
                    "context index {} outside [-{n}, {n}]",
                    u.index
                )));
            }
        }
        if units.windows(2).any(|w| w[0].index >= w[1].index) {
            return Err(Error::shape("context indices must be strictly increasing"));
        }
        Ok(ContextWindow { units, n })
    }

    pub fn empty(n: usize) -> Self {
        ContextWindow {
            units: Vec::new(),
            n,
        }
    }

    pub fn radius(&self) -> usize {
        self.n
    }

    pub fn units(&self) -> &[ContextUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn indices(&self) -> Vec<i64> {
        self.units.iter().map(|u| u.index).collect()
    }

    pub fn get(&self, index: i64) -> Option<&ContextUnit> {
        self.units.iter().find(|u| u.index == index)
    }

    /// Keeps the units that satisfy `keep`, preserving order.
    pub fn retain(&self, keep: impl Fn(&ContextUnit) -> bool) -> ContextWindow {
        ContextWindow {
            units: self.units.iter().filter(|u| keep(u)).cloned().collect(),
            n: self.n,
        }
    }

    /// Units with `|index| <= radius`; the result has radius `min(n, radius)`.
    pub fn truncated(&self, radius: usize) -> ContextWindow {
        let r = radius as i64;
        ContextWindow {
            units: self
                .units
                .iter()
                .filter(|u| u.index.abs() <= r)
                .cloned()
                .collect(),
            n: self.n.min(radius),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Neutral,
    AsksBefore,
    AsksAfter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sufficiency {
    Sufficient,
    Insufficient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub text_emb: Vector,
    pub image_emb: Vector,
    pub num_choices: usize,
    pub gold: usize,
    pub window: ContextWindow,
    pub question_kind: QuestionKind,
    /// Present only for generated samples.
    pub sufficiency_truth: Option<Sufficiency>,
}

impl Sample {
    pub fn is_insufficient(&self) -> bool {
        self.sufficiency_truth == Some(Sufficiency::Insufficient)
    }

    /// Index of the planted context unit, if the window still holds one.
    pub fn planted_index(&self) -> Option<i64> {
        self.window
            .units()
            .iter()
            .find(|u| u.is_planted())
            .map(|u| u.index)
    }

    pub fn with_window(&self, window: ContextWindow) -> Sample {
        Sample {
            window,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub text_dim: usize,
    pub image_dim: usize,
    pub context_dim: usize,
    pub num_choices: usize,
    pub window_radius: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same meta, samples selected by `keep`.
    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    pub fn map_windows(&self, f: impl Fn(&Sample) -> ContextWindow) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.iter().map(|s| s.with_window(f(s))).collect(),
        }
    }

    pub fn count_insufficient(&self) -> usize {
        self.samples.iter().filter(|s| s.is_insufficient()).count()
    }

    /// Checks every sample against the meta.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            validate_sample(s, &self.meta)?;
        }
        Ok(())
    }
}

fn validate_sample(s: &Sample, meta: &DatasetMeta) -> Result<()> {
    let fail = |message: String| Error::Validation {
        id: s.id.clone(),
        message,
    };
    if s.num_choices != meta.num_choices {
        return Err(fail(format!(
            "num_choices {} but dataset declares {}",
            s.num_choices, meta.num_choices
        )));
    }
    if s.gold >= s.num_choices {
        return Err(fail(format!(
            "gold {} is not below num_choices {}",
            s.gold, s.num_choices
        )));
    }
    if s.text_emb.len() != meta.text_dim || s.image_emb.len() != meta.image_dim {
        return Err(fail(format!(
            "input dims ({}, {}) but dataset declares ({}, {})",
            s.text_emb.len(),
            s.image_emb.len(),
            meta.text_dim,
            meta.image_dim
        )));
    }
    if !s.text_emb.is_finite() || !s.image_emb.is_finite() {
        return Err(fail("non-finite input embedding".into()));
    }
    for u in s.window.units() {
        if u.text_emb.len() != meta.context_dim || u.image_emb.len() != meta.context_dim {
            return Err(fail(format!(
                "context unit {} has dims other than {}",
                u.index, meta.context_dim
            )));
        }
        if u.index.unsigned_abs() as usize > meta.window_radius {
            return Err(fail(format!(
                "context index {} outside radius {}",
                u.index, meta.window_radius
            )));
        }
        if !u.text_emb.is_finite() || !u.image_emb.is_finite() {
            return Err(fail(format!("non-finite context unit {}", u.index)));
        }
    }
    Ok(())
}

fn default_amplitude_min() -> f64 {
    0.01
}
fn default_amplitude_max() -> f64 {
    0.6
}
fn default_marker_strength() -> f64 {
    1.0
}
fn default_topic_weight() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_samples: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub context_dim: usize,
    pub num_choices: usize,
    pub window_radius: usize,
    pub insufficient_fraction: f64,
    pub noise_scale: f64,
    pub seed: u64,
    /// Seed for the class codes and marker; datasets meant to be used together
    /// (train / held-out) must share it.
    #[serde(default)]
    pub geometry_seed: u64,
    /// Range of the per-sample signal amplitude on the answer code.
    #[serde(default = "default_amplitude_min")]
    pub amplitude_min: f64,
    #[serde(default = "default_amplitude_max")]
    pub amplitude_max: f64,
    #[serde(default = "default_marker_strength")]
    pub marker_strength: f64,
    #[serde(default = "default_topic_weight")]
    pub topic_weight: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_samples: 1000,
            text_dim: 16,
            image_dim: 16,
            context_dim: 16,
            num_choices: 4,
            window_radius: 3,
            insufficient_fraction: 0.5,
            noise_scale: 0.0,
            seed: 0,
            geometry_seed: 0,
            amplitude_min: default_amplitude_min(),
            amplitude_max: default_amplitude_max(),
            marker_strength: default_marker_strength(),
            topic_weight: default_topic_weight(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.text_dim < 2 || self.image_dim < 2 || self.context_dim < 2 {
            return Err(Error::config("embedding dims must be at least 2"));
        }
        if self.num_choices < 2 {
            return Err(Error::config("need at least 2 answer choices"));
        }
        if !(0.0..=1.0).contains(&self.insufficient_fraction) {
            return Err(Error::config("insufficient_fraction must lie in [0, 1]"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be finite and non-negative"));
        }
        if !(self.amplitude_min > 0.0
            && self.amplitude_min <= self.amplitude_max
            && self.amplitude_max.is_finite())
        {
            return Err(Error::config("amplitude range must satisfy 0 < min <= max"));
        }
        if !(self.marker_strength >= 0.0 && self.topic_weight >= 0.0) {
            return Err(Error::config(
                "marker_strength and topic_weight must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Short stable hash of any serializable configuration (hex, 16 chars).
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configuration serializes");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Fixed directions shared by every dataset with the same geometry seed.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub text_codes: Vec<Vec<f64>>,
    pub marker: Vec<f64>,
    pub image_codes: Vec<Vec<f64>>,
    pub context_text_codes: Vec<Vec<f64>>,
    pub context_image_codes: Vec<Vec<f64>>,
}

impl Geometry {
    pub fn from_config(cfg: &GeneratorConfig) -> Geometry {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.geometry_seed ^ 0x6e0d_e7c0_a11e_57ed);
        let k = cfg.num_choices;
        let mut text = unit_directions(&mut rng, cfg.text_dim, k + 1);
        let marker = text.pop().expect("k + 1 directions");
        Geometry {
            text_codes: text,
            marker,
            image_codes: unit_directions(&mut rng, cfg.image_dim, k),
            context_text_codes: unit_directions(&mut rng, cfg.context_dim, k),
            context_image_codes: unit_directions(&mut rng, cfg.context_dim, k),
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `count` unit vectors; orthonormal (Gram-Schmidt) when `dim >= count`.
fn unit_directions<R: Rng + ?Sized>(rng: &mut R, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit(rng, dim);
        if out.len() < dim {
            for u in &out {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        out.push(v);
    }
    out
}

fn combine(parts: &[(&[f64], f64)], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (v, w) in parts {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    out
}

/// Context indices that survive temporal-leakage filtering for `kind`.
pub fn leak_safe_indices(kind: QuestionKind, n: usize) -> Vec<i64> {
    let n = n as i64;
    match kind {
        QuestionKind::Neutral => (-n..=n).collect(),
        QuestionKind::AsksAfter => (-n..=0).collect(),
        QuestionKind::AsksBefore => (0..=n).collect(),
    }
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let geo = Geometry::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_insufficient = (cfg.insufficient_fraction * cfg.num_samples as f64).round() as usize;
    let mut flags: Vec<bool> = (0..cfg.num_samples).map(|i| i < n_insufficient).collect();
    flags.shuffle(&mut rng);

    let k = cfg.num_choices;
    let sigma = cfg.noise_scale;
    let n = cfg.window_radius as i64;
    let share_topic = cfg.context_dim == cfg.text_dim;
    let noise_text_std = ((cfg.topic_weight.powi(2) + 1.0) / cfg.context_dim as f64).sqrt();
    let noise_image_std = (1.0 / cfg.context_dim as f64).sqrt();

    let mut samples = Vec::with_capacity(cfg.num_samples);
    for (i, &insufficient) in flags.iter().enumerate() {
        let gold = rng.random_range(0..k);
        let question_kind = match rng.random_range(0..3) {
            0 => QuestionKind::Neutral,
            1 => QuestionKind::AsksBefore,
            _ => QuestionKind::AsksAfter,
        };
        let amplitude = rng.random_range(cfg.amplitude_min..=cfg.amplitude_max);
        let decoy = rng.random_range(0..k);
        let topic = random_unit(&mut rng, cfg.text_dim);
        let context_topic = if share_topic {
            topic.clone()
        } else {
            random_unit(&mut rng, cfg.context_dim)
        };
        let safe = leak_safe_indices(question_kind, cfg.window_radius);
        let planted = safe[rng.random_range(0..safe.len())];
        let eps_text = gaussian(&mut rng, cfg.text_dim, sigma);
        let eps_image = gaussian(&mut rng, cfg.image_dim, sigma);

        let (text_emb, image_emb) = if insufficient {
            (
                combine(
                    &[
                        (&topic, cfg.topic_weight),
                        (&geo.marker, cfg.marker_strength),
                        (&geo.text_codes[decoy], amplitude),
                        (&eps_text, 1.0),
                    ],
                    cfg.text_dim,
                ),
                combine(
                    &[(&geo.image_codes[decoy], amplitude), (&eps_image, 1.0)],
                    cfg.image_dim,
                ),
            )
        } else {
            (
                combine(
                    &[
                        (&topic, cfg.topic_weight),
                        (&geo.text_codes[gold], amplitude),
                        (&eps_text, 1.0),
                    ],
                    cfg.text_dim,
                ),
                combine(
                    &[(&geo.image_codes[gold], amplitude), (&eps_image, 1.0)],
                    cfg.image_dim,
                ),
            )
        };

        let mut units = Vec::with_capacity(2 * cfg.window_radius + 1);
        for index in -n..=n {
            let noise_text = gaussian(&mut rng, cfg.context_dim, noise_text_std);
            let noise_image = gaussian(&mut rng, cfg.context_dim, noise_image_std);
            let eps_ct = gaussian(&mut rng, cfg.context_dim, sigma);
            let eps_ci = gaussian(&mut rng, cfg.context_dim, sigma);
            let unit = if insufficient && index == planted {
                ContextUnit {
                    index,
                    text_emb: Vector::new(combine(
                        &[
                            (&context_topic, cfg.topic_weight),
                            (&geo.context_text_codes[gold], 1.0),
                            (&eps_ct, 1.0),
                        ],
                        cfg.context_dim,
                    )),
                    image_emb: Vector::new(combine(
                        &[(&geo.context_image_codes[gold], 1.0), (&eps_ci, 1.0)],
                        cfg.context_dim,
                    )),
                    tag: format!("{PLANTED_TAG}_{index}"),
                }
            } else {
                ContextUnit {
                    index,
                    text_emb: Vector::new(noise_text),
                    image_emb: Vector::new(noise_image),
                    tag: format!("{NOISE_TAG}_{index}"),
                }
            };
            units.push(unit);
        }

        samples.push(Sample {
            id: format!("g{}-{i:05}", cfg.seed),
            text_emb: Vector::new(text_emb),
            image_emb: Vector::new(image_emb),
            num_choices: k,
            gold,
            window: ContextWindow::new(units, cfg.window_radius)?,
            question_kind,
            sufficiency_truth: Some(if insufficient {
                Sufficiency::Insufficient
            } else {
                Sufficiency::Sufficient
            }),
        });
    }

    Ok(Dataset {
        meta: DatasetMeta {
            text_dim: cfg.text_dim,
            image_dim: cfg.image_dim,
            context_dim: cfg.context_dim,
            num_choices: k,
            window_radius: cfg.window_radius,
            seed: cfg.seed,
            config_hash: config_hash(cfg),
        },
        samples,
    })
}

/// Shuffles under `seed` and cuts in two; the first half takes the extra
/// sample when the count is odd.
pub fn split_halves(ds: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if ds.len() < 2 {
        return Err(Error::config(format!(
            "cannot halve a dataset of {} samples",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ds.len().div_ceil(2);
    let pick = |idx: &[usize]| Dataset {
        meta: ds.meta.clone(),
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    text_emb: Vector,
    image_emb: Vector,
    num_choices: usize,
    gold: usize,
    question_kind: QuestionKind,
    sufficiency_truth: Option<Sufficiency>,
    context: Vec<ContextUnit>,
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {display}"), e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(format!("writing {display}"), e);
    serde_json::to_writer(&mut w, &ds.meta)?;
    w.write_all(b"\n").map_err(io)?;
    for s in &ds.samples {
        let rec = SampleRecord {
            id: s.id.clone(),
            text_emb: s.text_emb.clone(),
            image_emb: s.image_emb.clone(),
            num_choices: s.num_choices,
            gold: s.gold,
            question_kind: s.question_kind,
            sufficiency_truth: s.sufficiency_truth,
            context: s.window.units().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {display}"), e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        message,
    };
    let mut meta: Option<DatasetMeta> = None;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {display}"), e))?;
        if line.trim().is_empty() {
            continue;
        }
        match &meta {
            None => {
                meta = Some(
                    serde_json::from_str(&line)
                        .map_err(|e| parse_err(lineno, format!("header: {e}")))?,
                );
            }
            Some(m) => {
                let rec: SampleRecord =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
                let window = ContextWindow::new(rec.context, m.window_radius).map_err(|e| {
                    Error::Validation {
                        id: rec.id.clone(),
                        message: e.to_string(),
                    }
                })?;
                let sample = Sample {
                    id: rec.id,
                    text_emb: rec.text_emb,
                    image_emb: rec.image_emb,
                    num_choices: rec.num_choices,
                    gold: rec.gold,
                    window,
                    question_kind: rec.question_kind,
                    sufficiency_truth: rec.sufficiency_truth,
                };
                validate_sample(&sample, m)?;
                samples.push(sample);
            }
        }
    }
    let meta = meta.ok_or_else(|| parse_err(1, "missing header line".into()))?;
    Ok(Dataset { meta, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(frac: f64, sigma: f64) -> GeneratorConfig {
        GeneratorConfig {
            num_samples: 60,
            insufficient_fraction: frac,
            noise_scale: sigma,
            seed: 4,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn all_sufficient_when_fraction_zero() {
        let ds = generate_dataset(&small(0.0, 0.1)).unwrap();
        assert!(ds
            .samples
            .iter()
            .all(|s| s.sufficiency_truth == Some(Sufficiency::Sufficient)));
        assert!(ds.samples.iter().all(|s| s.planted_index().is_none()));
    }

    #[test]
    fn stratified_counts_are_exact() {
        let cfg = GeneratorConfig {
            num_samples: 2000,
            insufficient_fraction: 0.5,
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        assert_eq!(ds.count_insufficient(), 1000);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(0.5, 0.2)).unwrap();
        let b = generate_dataset(&small(0.5, 0.2)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GeneratorConfig {
            seed: 5,
            ..small(0.5, 0.2)
        })
        .unwrap();
        assert_ne!(a.samples[0].text_emb, c.samples[0].text_emb);
    }

    #[test]
    fn planted_unit_survives_leakage_side() {
        let ds = generate_dataset(&small(1.0, 0.0)).unwrap();
        for s in &ds.samples {
            let p = s
                .planted_index()
                .expect("insufficient samples carry a planted unit");
            assert!(leak_safe_indices(s.question_kind, 3).contains(&p));
            assert_eq!(s.window.len(), 7);
        }
    }

    #[test]
    fn planted_unit_beats_distractors_in_cosine_to_gold_code() {
        let cfg = GeneratorConfig {
            num_samples: 300,
            insufficient_fraction: 1.0,
            ..small(1.0, 0.0)
        };
        let geo = Geometry::from_config(&cfg);
        let ds = generate_dataset(&cfg).unwrap();
        for s in &ds.samples {
            let proto: Vec<f64> = geo.context_text_codes[s.gold]
                .iter()
                .chain(&geo.context_image_codes[s.gold])
                .cloned()
                .collect();
            let cos = |u: &ContextUnit| {
                let e: Vec<f64> = u
                    .text_emb
                    .as_slice()
                    .iter()
                    .chain(u.image_emb.as_slice())
                    .cloned()
                    .collect();
                crate::numerics::cosine(&e, &proto).unwrap()
            };
            let planted = s.window.units().iter().find(|u| u.is_planted()).unwrap();
            let best_other = s
                .window
                .units()
                .iter()
                .filter(|u| !u.is_planted())
                .map(cos)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(cos(planted) > best_other, "sample {}", s.id);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GeneratorConfig {
                text_dim: 1,
                ..small(0.5, 0.0)
            },
            GeneratorConfig {
                num_choices: 1,
                ..small(0.5, 0.0)
            },
            GeneratorConfig {
                insufficient_fraction: 1.5,
                ..small(0.5, 0.0)
            },
            GeneratorConfig {
                noise_scale: -1.0,
                ..small(0.5, 0.0)
            },
        ] {
            assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn split_halves_sizes_and_determinism() {
        let ds = generate_dataset(&GeneratorConfig {
            num_samples: 11,
            ..small(0.5, 0.0)
        })
        .unwrap();
        let (a, b) = split_halves(&ds, 3).unwrap();
        assert_eq!((a.len(), b.len()), (6, 5));
        let mut ids: Vec<&str> = a
            .samples
            .iter()
            .chain(&b.samples)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 11);
        let (a2, _) = split_halves(&ds, 3).unwrap();
        assert_eq!(a, a2);

        let ten = ds.filtered(|s| s.id != ds.samples[0].id);
        let (a, b) = split_halves(&ten, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));

        let one = ds.filtered(|s| s.id == ds.samples[0].id);
        assert!(split_halves(&one, 1).is_err());
    }

    #[test]
    fn roundtrip_and_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(0.5, 0.3)).unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);

        let empty = ds.filtered(|_| false);
        save_dataset(&empty, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.meta, ds.meta);
    }

    #[test]
    fn gold_out_of_range_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_dataset(&small(0.5, 0.0)).unwrap();
        ds.samples[3].gold = 9;
        let bad_id = ds.samples[3].id.clone();
        let path = dir.path().join("bad.jsonl");
        save_dataset(&ds, &path).unwrap();
        match load_dataset(&path) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, bad_id),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(0.5, 0.0)).unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, ds.len() + 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dim_mismatch_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = generate_dataset(&small(0.5, 0.0)).unwrap();
        ds.samples[0].image_emb = Vector::zeros(3);
        let path = dir.path().join("ds.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Validation { .. })));
    }

    #[test]
    fn window_rejects_unsorted_or_out_of_range() {
        let unit = |index| ContextUnit {
            index,
            text_emb: Vector::zeros(2),
            image_emb: Vector::zeros(2),
            tag: String::new(),
        };
        assert!(ContextWindow::new(vec![unit(1), unit(0)], 2).is_err());
        assert!(ContextWindow::new(vec![unit(0), unit(0)], 2).is_err());
        assert!(ContextWindow::new(vec![unit(3)], 2).is_err());
        let w = ContextWindow::new(vec![unit(-2), unit(0), unit(2)], 2).unwrap();
        assert_eq!(w.truncated(1).indices(), vec![0]);
    }
}
