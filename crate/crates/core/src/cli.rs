//! Command-line orchestration: synthetic data generation, the five-stage
//! pipeline (vanilla model, joint context training, pseudo-labels, detector,
//! evaluation), ablation sweeps and reports.
//!
//! Every artifact records the hash of the [`RunConfig`] that produced it.
//! Stages whose artifact already carries the current hash are not rerun.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cara::{
    read_csv_hash, read_decisions, score_sample, train_cara, write_decisions, AbstentionConfig,
    AbstentionMode, Answerer, CaraModel, ScoredSample, DEFAULT_POS_WEIGHT,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::contextpipe::filter_dataset;
use crate::datamodel::{
    config_hash, generate_dataset, load_dataset, save_dataset, Dataset, GeneratorConfig, Sample,
};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    calibrate_theta, decide_all, default_theta_grid, default_w_grid, detection_sweep,
    risk_coverage, sweep_scored, write_detection_csv, write_sweep_csv, SweepRow,
};
use crate::pseudolabel::{
    build_cara_training_set, load_pseudolabels, save_pseudolabels, PseudoLabel, PseudoLabelConfig,
    PseudoLabelRow,
};
use crate::selector::{
    predict_with_context, select_context, train_joint, SelectionConfig, SelectorModel, Strategy,
};
use crate::taskmodel::{accuracy, train_task_model, ContextFeed, TaskModel};
use crate::training::TrainConfig;

pub const DATA_DIR: &str = "data";
pub const REPORTS_DIR: &str = "reports";

const KIND_TASK: &str = "task_model";
const KIND_SELECTOR: &str = "selector";
const KIND_CARA: &str = "cara";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
    Case,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Case];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Case => "case",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    /// Balanced detection set; always half insufficient.
    pub case: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 2000,
            validation: 500,
            test: 500,
            case: 1000,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
            Split::Case => self.case,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbstentionSettings {
    /// Mode used for `decisions.csv`.
    pub mode: AbstentionMode,
    pub w: f64,
    pub pos_weight: f64,
    /// Risk the decision threshold is calibrated to on the validation split.
    pub target_risk: f64,
    pub theta_grid: Vec<f64>,
    pub w_grid: Vec<f64>,
}

impl Default for AbstentionSettings {
    fn default() -> Self {
        AbstentionSettings {
            mode: AbstentionMode::CaraOnly,
            w: 0.5,
            pos_weight: DEFAULT_POS_WEIGHT,
            target_risk: 0.1,
            theta_grid: default_theta_grid(),
            w_grid: default_w_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub window_sizes: Vec<usize>,
    pub selection_numbers: Vec<usize>,
    pub strategies: Vec<Strategy>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            window_sizes: vec![0, 1, 3, 5, 7],
            selection_numbers: (1..=7).collect(),
            strategies: vec![
                Strategy::Probabilistic,
                Strategy::EmbeddingSimilarity,
                Strategy::FixedIndex { index: -1 },
                Strategy::FixedIndex { index: 1 },
                Strategy::Random { seed: 0 },
            ],
        }
    }
}

/// The whole experiment in one document. `generator.num_samples` and
/// `generator.seed`/`geometry_seed`, and the `seed` of every training
/// schedule, are replaced by values derived from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub splits: SplitSizes,
    pub vlm_train: TrainConfig,
    pub cvlm_train: TrainConfig,
    pub cara_train: TrainConfig,
    pub selection: SelectionConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub abstention: AbstentionSettings,
    pub ablation: AblationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            splits: SplitSizes::default(),
            vlm_train: TrainConfig::default(),
            cvlm_train: TrainConfig::default(),
            cara_train: TrainConfig {
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            selection: SelectionConfig::default(),
            pseudo_label: PseudoLabelConfig::default(),
            abstention: AbstentionSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.split_generator(Split::Train).validate()?;
        for split in Split::ALL {
            if self.splits.get(split) == 0 {
                return Err(Error::config(format!("split `{}` is empty", split.name())));
            }
        }
        if self.splits.train < 4 {
            return Err(Error::config("the train split needs at least 4 samples"));
        }
        self.vlm_train.validate()?;
        self.cvlm_train.validate()?;
        self.cara_train.validate()?;
        self.selection.validate()?;
        if self.selection.strategy != Strategy::Probabilistic {
            return Err(Error::config(
                "the pipeline trains a probabilistic selector",
            ));
        }
        if self.selection.window_size > self.generator.window_radius {
            return Err(Error::config(format!(
                "selection window {} exceeds the generated radius {}",
                self.selection.window_size, self.generator.window_radius
            )));
        }
        self.pseudo_label.validate()?;
        let a = &self.abstention;
        AbstentionConfig {
            theta: 0.5,
            w: a.w,
            mode: a.mode,
        }
        .validate()?;
        if !(a.pos_weight > 0.0 && a.pos_weight.is_finite()) {
            return Err(Error::config("pos_weight must be positive"));
        }
        if !in_unit(a.target_risk) {
            return Err(Error::config("target_risk must lie in [0, 1]"));
        }
        if a.theta_grid.is_empty() || !a.theta_grid.iter().all(|&t| in_unit(t)) {
            return Err(Error::config(
                "theta_grid must be a non-empty list of values in [0, 1]",
            ));
        }
        if a.w_grid.is_empty() || !a.w_grid.iter().all(|&w| w > 0.0 && w <= 1.0) {
            return Err(Error::config(
                "w_grid must be a non-empty list of values in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Checks the settings of one ablation axis.
    pub fn validate_ablation(&self, axis: Axis) -> Result<()> {
        let ab = &self.ablation;
        let empty = match axis {
            Axis::WindowSize => ab.window_sizes.is_empty(),
            Axis::SelectionNumber => ab.selection_numbers.is_empty(),
            Axis::Strategy => ab.strategies.is_empty(),
        };
        if empty {
            return Err(Error::config(format!(
                "ablation axis `{}` has no settings",
                axis.name()
            )));
        }
        if axis == Axis::SelectionNumber {
            for &r in &ab.selection_numbers {
                SelectionConfig {
                    selection_number: r,
                    ..self.selection.clone()
                }
                .validate()?;
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn split_generator(&self, split: Split) -> GeneratorConfig {
        GeneratorConfig {
            num_samples: self.splits.get(split),
            seed: derive_seed(self.seed, &format!("data/{}", split.name())),
            geometry_seed: derive_seed(self.seed, "geometry"),
            insufficient_fraction: match split {
                Split::Case => 0.5,
                _ => self.generator.insufficient_fraction,
            },
            ..self.generator.clone()
        }
    }

    fn schedule(&self, base: &TrainConfig, label: &str) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, label),
            ..base.clone()
        }
    }

    pub fn vlm_schedule(&self) -> TrainConfig {
        self.schedule(&self.vlm_train, "vlm")
    }

    pub fn cvlm_schedule(&self) -> TrainConfig {
        self.schedule(&self.cvlm_train, "cvlm")
    }

    pub fn pseudolabel_schedule(&self) -> TrainConfig {
        self.schedule(&self.cvlm_train, "pseudolabel")
    }

    pub fn cara_schedule(&self) -> TrainConfig {
        self.schedule(&self.cara_train, "cara")
    }

    pub fn abstention_config(&self, theta: f64) -> AbstentionConfig {
        AbstentionConfig {
            theta,
            w: self.abstention.w,
            mode: self.abstention.mode,
        }
    }
}

/// Reads a configuration (defaults when `path` is `None`), applies the seed
/// override and validates.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn data(&self, split: Split) -> PathBuf {
        self.root
            .join(DATA_DIR)
            .join(format!("{}.jsonl", split.name()))
    }

    pub fn vlm(&self) -> PathBuf {
        self.root.join("vlm.ckpt")
    }

    pub fn cvlm(&self) -> PathBuf {
        self.root.join("cvlm.ckpt")
    }

    pub fn selector(&self) -> PathBuf {
        self.root.join("selector.ckpt")
    }

    pub fn pseudolabels(&self) -> PathBuf {
        self.root.join("pseudolabels.jsonl")
    }

    pub fn cara(&self) -> PathBuf {
        self.root.join("cara.ckpt")
    }

    pub fn decisions(&self) -> PathBuf {
        self.root.join("decisions.csv")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join(REPORTS_DIR)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.reports().join(name)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub split: Split,
    pub total: usize,
    pub insufficient: usize,
    pub path: PathBuf,
}

/// Generates every split into `<out>/data/`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    let dir = RunDir::new(out);
    create_dir(&out.join(DATA_DIR))?;
    let mut summary = Vec::new();
    for split in Split::ALL {
        let ds = generate_dataset(&cfg.split_generator(split))?;
        let path = dir.data(split);
        save_dataset(&ds, &path)?;
        summary.push(SplitSummary {
            split,
            total: ds.len(),
            insufficient: ds.count_insufficient(),
            path,
        });
    }
    Ok(summary)
}

/// Loads a generated split, checks it matches `cfg` and applies the temporal
/// leakage filter.
pub fn load_split(cfg: &RunConfig, out: &Path, split: Split) -> Result<Dataset> {
    let path = RunDir::new(out).data(split);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "generate".into(),
            path,
        });
    }
    let ds = load_dataset(&path)?;
    if ds.meta.config_hash != config_hash(&cfg.split_generator(split)) {
        return Err(Error::Consistency(format!(
            "{} was generated under a different configuration; rerun `generate`",
            path.display()
        )));
    }
    Ok(filter_dataset(&ds))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Stage {
    Baseline,
    Context,
    Pseudolabel,
    Cara,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Context => "context",
            Stage::Pseudolabel => "pseudolabel",
            Stage::Cara => "cara",
            Stage::Evaluate => "evaluate",
        }
    }
}

/// Loads a checkpoint if it exists and carries `hash`.
fn resume<M: DeserializeOwned>(path: &Path, kind: &str, hash: &str) -> Result<Option<M>> {
    if !path.exists() {
        return Ok(None);
    }
    match load_checkpoint::<M>(path, kind) {
        Ok(ck) if ck.config_hash == hash => {
            info!("reusing {}", path.display());
            Ok(Some(ck.model))
        }
        Ok(_) => {
            warn!(
                "{} belongs to another configuration; recomputing",
                path.display()
            );
            Ok(None)
        }
        Err(e) => {
            warn!("{} is unreadable ({e}); recomputing", path.display());
            Ok(None)
        }
    }
}

/// Loads an upstream checkpoint that must exist.
fn require<M: DeserializeOwned>(path: &Path, kind: &str, hash: &str, stage: Stage) -> Result<M> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        });
    }
    let ck = load_checkpoint::<M>(path, kind)?;
    if ck.config_hash != hash {
        return Err(Error::Consistency(format!(
            "{} was produced under config {}, current config is {hash}; rerun stage `{}`",
            path.display(),
            ck.config_hash,
            stage.name()
        )));
    }
    Ok(ck.model)
}

fn require_pseudolabels(dir: &RunDir, hash: &str) -> Result<Vec<PseudoLabelRow>> {
    let path = dir.pseudolabels();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: Stage::Pseudolabel.name().into(),
            path,
        });
    }
    let (h, rows) = load_pseudolabels(&path)?;
    if h != hash {
        return Err(Error::Consistency(format!(
            "{} was produced under config {h}, current config is {hash}; rerun stage `pseudolabel`",
            path.display()
        )));
    }
    Ok(rows)
}

/// Headline numbers of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub config_hash: String,
    pub theta: f64,
    pub pseudo_label_counts: BTreeMap<String, usize>,
    pub test: crate::evalmetrics::RiskCoverageReport,
    pub answer_all_accuracy: f64,
}

struct Pipeline<'a> {
    cfg: &'a RunConfig,
    dir: RunDir,
    hash: String,
    train: Dataset,
}

impl Pipeline<'_> {
    fn baseline(&self, force: bool) -> Result<TaskModel> {
        let path = self.dir.vlm();
        if !force {
            if let Some(m) = resume(&path, KIND_TASK, &self.hash)? {
                return Ok(m);
            }
        }
        info!(
            "stage baseline: training the vanilla model on {} samples",
            self.train.len()
        );
        let (m, report) =
            train_task_model(&self.train, &self.cfg.vlm_schedule(), &ContextFeed::None)?;
        info!("vanilla model train accuracy {:.4}", report.train_accuracy);
        save_checkpoint(&path, KIND_TASK, &self.hash, &m)?;
        Ok(m)
    }

    fn context(&self, force: bool) -> Result<(TaskModel, SelectorModel)> {
        if !force {
            let task = resume::<TaskModel>(&self.dir.cvlm(), KIND_TASK, &self.hash)?;
            let sel = resume::<SelectorModel>(&self.dir.selector(), KIND_SELECTOR, &self.hash)?;
            if let (Some(t), Some(s)) = (task, sel) {
                return Ok((t, s));
            }
        }
        info!(
            "stage context: joint training, window {} selection {}",
            self.cfg.selection.window_size, self.cfg.selection.selection_number
        );
        let out = train_joint(&self.train, &self.cfg.cvlm_schedule(), &self.cfg.selection)?;
        info!(
            "context model train accuracy {:.4}",
            out.report.train_accuracy
        );
        save_checkpoint(&self.dir.cvlm(), KIND_TASK, &self.hash, &out.task)?;
        save_checkpoint(
            &self.dir.selector(),
            KIND_SELECTOR,
            &self.hash,
            &out.selector,
        )?;
        Ok((out.task, out.selector))
    }

    fn pseudolabel(&self, force: bool) -> Result<Vec<PseudoLabelRow>> {
        let path = self.dir.pseudolabels();
        if !force && path.exists() {
            match load_pseudolabels(&path) {
                Ok((h, rows)) if h == self.hash => {
                    info!("reusing {}", path.display());
                    return Ok(rows);
                }
                _ => warn!("{} is stale or unreadable; recomputing", path.display()),
            }
        }
        info!("stage pseudolabel: cross-labeling two halves of the train split");
        let set = build_cara_training_set(
            &self.train,
            &self.cfg.pseudo_label,
            &self.cfg.pseudolabel_schedule(),
            &self.cfg.selection,
            derive_seed(self.cfg.seed, "halves"),
        )?;
        let rows: Vec<PseudoLabelRow> = set.records.iter().map(PseudoLabelRow::from).collect();
        save_pseudolabels(&path, &self.hash, &rows)?;
        Ok(rows)
    }

    fn cara(&self, rows: &[PseudoLabelRow], force: bool) -> Result<CaraModel> {
        let path = self.dir.cara();
        if !force {
            if let Some(m) = resume(&path, KIND_CARA, &self.hash)? {
                return Ok(m);
            }
        }
        let by_id: HashMap<&str, &Sample> = self
            .train
            .samples
            .iter()
            .map(|s| (s.id.as_str(), s))
            .collect();
        let mut labeled = Vec::new();
        for r in rows {
            let positive = match r.pseudo_label {
                PseudoLabel::Positive => true,
                PseudoLabel::Negative => false,
                PseudoLabel::Excluded => continue,
            };
            let s = by_id.get(r.id.as_str()).ok_or_else(|| {
                Error::Lookup(format!(
                    "pseudo-labeled sample `{}` is not in the train split",
                    r.id
                ))
            })?;
            labeled.push(((*s).clone(), positive));
        }
        let positives = labeled.iter().filter(|(_, p)| *p).count();
        info!(
            "stage cara: {} positive, {} negative pseudo-labels",
            positives,
            labeled.len() - positives
        );
        let meta = &self.train.meta;
        let cfg = self.cfg.cara_schedule();
        if positives > 0 && positives * 100 < rows.len() {
            warn!(
                "only {positives} of {} samples are pseudo-labeled positive",
                rows.len()
            );
        }
        let det = if positives == 0 || positives == labeled.len() {
            warn!(
                "pseudo-labels hold a single class; the detector is left uninformative (C = 0.5)"
            );
            CaraModel::zeros(meta.text_dim, meta.image_dim, &cfg.hidden)?
        } else {
            train_cara(&labeled, self.cfg.abstention.pos_weight, &cfg)?.0
        };
        save_checkpoint(&path, KIND_CARA, &self.hash, &det)?;
        Ok(det)
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        out: &Path,
        vlm: &TaskModel,
        cvlm: &TaskModel,
        selector: &SelectorModel,
        det: &CaraModel,
        rows: &[PseudoLabelRow],
    ) -> Result<PipelineSummary> {
        info!("stage evaluate");
        let cfg = self.cfg;
        let validation = load_split(cfg, out, Split::Validation)?;
        let test = load_split(cfg, out, Split::Test)?;
        let case = load_split(cfg, out, Split::Case)?;
        let answerer = Answerer::Plain(vlm);
        let score = |ds: &Dataset| -> Result<Vec<ScoredSample>> {
            ds.samples
                .iter()
                .map(|s| score_sample(det, &answerer, s))
                .collect()
        };
        let val_scored = score(&validation)?;
        let test_scored = score(&test)?;
        let case_scored = score(&case)?;
        let a = &cfg.abstention;

        let theta = calibrate_theta(&a.theta_grid, a.target_risk, |t| {
            decide_all(&val_scored, &cfg.abstention_config(t))
        })?;
        let decisions = decide_all(&test_scored, &cfg.abstention_config(theta))?;
        let report = risk_coverage(&decisions)?;
        info!(
            "theta {theta} calibrated to risk <= {}: test coverage {:.4}, risk {:.4}",
            a.target_risk, report.coverage, report.risk
        );
        write_decisions(&self.dir.decisions(), &self.hash, &decisions)?;

        create_dir(&self.dir.reports())?;
        write_sweep_csv(
            &self.dir.report("selected.csv"),
            &self.hash,
            &[SweepRow {
                theta,
                w: a.w,
                report: report.clone(),
            }],
        )?;
        write_sweep_csv(
            &self.dir.report("risk_coverage_cara_only.csv"),
            &self.hash,
            &sweep_scored(
                &test_scored,
                &a.theta_grid,
                &[a.w],
                AbstentionMode::CaraOnly,
            )?,
        )?;
        write_sweep_csv(
            &self.dir.report("risk_coverage_fused.csv"),
            &self.hash,
            &sweep_scored(
                &test_scored,
                &a.theta_grid,
                &a.w_grid,
                AbstentionMode::Fused,
            )?,
        )?;
        let truth = |x: &ScoredSample| x.truth == Some(crate::datamodel::Sufficiency::Insufficient);
        let cara_scores: Vec<(f64, bool)> = case_scored.iter().map(|x| (x.c, truth(x))).collect();
        let maxprob_scores: Vec<(f64, bool)> =
            case_scored.iter().map(|x| (1.0 - x.v, truth(x))).collect();
        write_detection_csv(
            &self.dir.report("detection_cara.csv"),
            &self.hash,
            &detection_sweep(&cara_scores, &a.theta_grid)?,
        )?;
        write_detection_csv(
            &self.dir.report("detection_maxprob.csv"),
            &self.hash,
            &detection_sweep(&maxprob_scores, &a.theta_grid)?,
        )?;

        let mut acc_rows = Vec::new();
        let subsets: [(&str, Dataset); 3] = [
            ("all", test.clone()),
            ("sufficient", test.filtered(|s| !s.is_insufficient())),
            ("insufficient", test.filtered(|s| s.is_insufficient())),
        ];
        for (name, ds) in &subsets {
            acc_rows.push(("vlm", *name, accuracy(vlm, ds, &ContextFeed::None)?));
            let mut correct = 0usize;
            for s in &ds.samples {
                if predict_with_context(cvlm, selector, s, &cfg.selection)?.label == s.gold {
                    correct += 1;
                }
            }
            let acc = if ds.is_empty() {
                0.0
            } else {
                correct as f64 / ds.len() as f64
            };
            acc_rows.push(("cvlm", *name, acc));
        }
        write_accuracy_csv(&self.dir.report("accuracy.csv"), &self.hash, &acc_rows)?;

        let mut counts = BTreeMap::new();
        for r in rows {
            *counts
                .entry(label_name(r.pseudo_label).to_string())
                .or_insert(0) += 1;
        }
        let answer_all_accuracy =
            test_scored.iter().filter(|x| x.correct).count() as f64 / test_scored.len() as f64;
        Ok(PipelineSummary {
            config_hash: self.hash.clone(),
            theta,
            pseudo_label_counts: counts,
            test: report,
            answer_all_accuracy,
        })
    }
}

fn label_name(l: PseudoLabel) -> &'static str {
    match l {
        PseudoLabel::Positive => "positive",
        PseudoLabel::Negative => "negative",
        PseudoLabel::Excluded => "excluded",
    }
}

fn write_accuracy_csv(path: &Path, hash: &str, rows: &[(&str, &str, f64)]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(file, "# config_hash: {hash}")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["model", "subset", "accuracy"])?;
    for (m, s, a) in rows {
        w.write_record([m.to_string(), s.to_string(), a.to_string()])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs the pipeline on data produced by [`cmd_generate`]. With `only`, just
/// that stage is (re)run and its inputs must already exist; otherwise every
/// stage runs in order, reusing artifacts that carry the current hash.
pub fn cmd_pipeline(
    cfg: &RunConfig,
    out: &Path,
    only: Option<Stage>,
) -> Result<Option<PipelineSummary>> {
    cfg.validate()?;
    let p = Pipeline {
        cfg,
        dir: RunDir::new(out),
        hash: cfg.hash(),
        train: load_split(cfg, out, Split::Train)?,
    };
    let h = &p.hash;
    match only {
        None => {
            let vlm = p.baseline(false)?;
            let (cvlm, selector) = p.context(false)?;
            let rows = p.pseudolabel(false)?;
            let det = p.cara(&rows, false)?;
            p.evaluate(out, &vlm, &cvlm, &selector, &det, &rows)
                .map(Some)
        }
        Some(Stage::Baseline) => p.baseline(true).map(|_| None),
        Some(Stage::Context) => p.context(true).map(|_| None),
        Some(Stage::Pseudolabel) => p.pseudolabel(true).map(|_| None),
        Some(Stage::Cara) => {
            let rows = require_pseudolabels(&p.dir, h)?;
            p.cara(&rows, true).map(|_| None)
        }
        Some(Stage::Evaluate) => {
            let vlm = require(&p.dir.vlm(), KIND_TASK, h, Stage::Baseline)?;
            let cvlm = require(&p.dir.cvlm(), KIND_TASK, h, Stage::Context)?;
            let selector = require(&p.dir.selector(), KIND_SELECTOR, h, Stage::Context)?;
            let rows = require_pseudolabels(&p.dir, h)?;
            let det = require(&p.dir.cara(), KIND_CARA, h, Stage::Cara)?;
            p.evaluate(out, &vlm, &cvlm, &selector, &det, &rows)
                .map(Some)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    WindowSize,
    SelectionNumber,
    Strategy,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::WindowSize => "window_size",
            Axis::SelectionNumber => "selection_number",
            Axis::Strategy => "strategy",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: String,
    pub n: usize,
    pub r: usize,
    pub accuracy: f64,
}

/// Test accuracy of a context model trained and evaluated with `scfg`.
pub fn ablation_accuracy(
    train: &Dataset,
    test: &Dataset,
    tc: &TrainConfig,
    scfg: &SelectionConfig,
) -> Result<f64> {
    if scfg.strategy == Strategy::Probabilistic {
        let joint = train_joint(train, tc, scfg)?;
        let mut correct = 0usize;
        for s in &test.samples {
            if predict_with_context(&joint.task, &joint.selector, s, scfg)?.label == s.gold {
                correct += 1;
            }
        }
        return Ok(correct as f64 / test.len() as f64);
    }
    let select = |s: &Sample| Ok(select_context(None, s, scfg)?.chosen);
    let feed = ContextFeed::Custom {
        slots: scfg.context_slots(),
        select: &select,
    };
    let (m, _) = train_task_model(train, tc, &feed)?;
    accuracy(&m, test, &feed)
}

/// Sweeps one axis with the rest of `cfg.selection` fixed and writes
/// `<out>/reports/ablation_<axis>.csv`. Data is generated in memory from the
/// train and test split settings.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, axis: Axis) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.validate_ablation(axis)?;
    let radius = match axis {
        Axis::WindowSize => cfg
            .ablation
            .window_sizes
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            .max(cfg.generator.window_radius),
        _ => cfg.generator.window_radius,
    };
    let gen = |split| -> Result<Dataset> {
        let g = GeneratorConfig {
            window_radius: radius,
            ..cfg.split_generator(split)
        };
        Ok(filter_dataset(&generate_dataset(&g)?))
    };
    let train = gen(Split::Train)?;
    let test = gen(Split::Test)?;
    let tc = cfg.cvlm_schedule();
    let base = &cfg.selection;
    let mut rows = Vec::new();
    let mut push = |strategy: String, n: usize, r: usize, accuracy: f64| {
        info!("{strategy} n={n} r={r}: accuracy {accuracy:.4}");
        rows.push(AblationRow {
            strategy,
            n,
            r,
            accuracy,
        });
    };
    match axis {
        Axis::WindowSize => {
            for &n in &cfg.ablation.window_sizes {
                let r = if n == 0 {
                    base.selection_number
                } else {
                    base.selection_number.min(2 * n + 1)
                };
                let scfg = SelectionConfig {
                    window_size: n,
                    selection_number: r,
                    ..base.clone()
                };
                push(
                    base.strategy.label(),
                    n,
                    r,
                    ablation_accuracy(&train, &test, &tc, &scfg)?,
                );
            }
        }
        Axis::SelectionNumber => {
            let n = base.window_size;
            for &r in &cfg.ablation.selection_numbers {
                let scfg = SelectionConfig {
                    selection_number: r,
                    ..base.clone()
                };
                push(
                    base.strategy.label(),
                    n,
                    r,
                    ablation_accuracy(&train, &test, &tc, &scfg)?,
                );
                if n > 0 && r == 2 * n + 1 {
                    info!("r = {r} covers the whole window: no selection, same as concatenating every unit");
                    let feed = ContextFeed::AllUnits { slots: r };
                    let restrict = |ds: &Dataset| ds.map_windows(|s| base.restrict(&s.window));
                    let (m, _) = train_task_model(&restrict(&train), &tc, &feed)?;
                    push(
                        "concat_all".into(),
                        n,
                        r,
                        accuracy(&m, &restrict(&test), &feed)?,
                    );
                }
            }
        }
        Axis::Strategy => {
            for strategy in &cfg.ablation.strategies {
                let scfg = SelectionConfig {
                    strategy: *strategy,
                    ..base.clone()
                };
                push(
                    strategy.label(),
                    base.window_size,
                    base.selection_number,
                    ablation_accuracy(&train, &test, &tc, &scfg)?,
                );
            }
        }
    }
    let dir = RunDir::new(out);
    create_dir(&dir.reports())?;
    let path = dir.report(&format!("ablation_{}.csv", axis.name()));
    let mut file = std::fs::File::create(&path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(file, "# config_hash: {}", cfg.hash())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["strategy", "n", "r", "accuracy"])?;
    for row in &rows {
        w.write_record([
            row.strategy.clone(),
            row.n.to_string(),
            row.r.to_string(),
            row.accuracy.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(rows)
}

#[derive(Deserialize)]
struct RiskRow {
    theta: f64,
    w: f64,
    risk: f64,
    coverage: f64,
    phi1: f64,
    answered: usize,
    abstained: usize,
}

#[derive(Deserialize)]
struct DetectionRow {
    theta: f64,
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
}

fn read_rows<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: stage.name().into(),
            path: path.to_path_buf(),
        });
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Checks an artifact directory and renders a plain-text summary.
pub fn cmd_report(out: &Path) -> Result<String> {
    let dir = RunDir::new(out);
    let decisions_path = dir.decisions();
    if !decisions_path.exists() {
        return Err(Error::MissingArtifact {
            stage: Stage::Evaluate.name().into(),
            path: decisions_path,
        });
    }

    let mut hashes: Vec<(PathBuf, String)> = Vec::new();
    hashes.push((decisions_path.clone(), read_csv_hash(&decisions_path)?));
    let mut report_files: Vec<PathBuf> = match std::fs::read_dir(dir.reports()) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    report_files.sort();
    for p in &report_files {
        hashes.push((p.clone(), read_csv_hash(p)?));
    }
    if dir.pseudolabels().exists() {
        hashes.push((
            dir.pseudolabels(),
            load_pseudolabels(&dir.pseudolabels())?.0,
        ));
    }
    for (path, kind) in [
        (dir.vlm(), KIND_TASK),
        (dir.cvlm(), KIND_TASK),
        (dir.selector(), KIND_SELECTOR),
        (dir.cara(), KIND_CARA),
    ] {
        if path.exists() {
            let ck = load_checkpoint::<serde_json::Value>(&path, kind)?;
            hashes.push((path, ck.config_hash));
        }
    }
    let hash = hashes[0].1.clone();
    let mixed: Vec<String> = hashes
        .iter()
        .filter(|(_, h)| *h != hash)
        .map(|(p, h)| format!("{} ({h})", p.display()))
        .collect();
    if !mixed.is_empty() {
        return Err(Error::Consistency(format!(
            "artifacts come from different configurations: decisions.csv has {hash}, but {}",
            mixed.join(", ")
        )));
    }

    let (_, decisions) = read_decisions(&decisions_path)?;
    if decisions.is_empty() {
        return Err(Error::Consistency(
            "decisions.csv holds no decisions".into(),
        ));
    }
    for d in &decisions {
        if d.abstained != d.label.is_none() || d.label.is_some() != d.correct.is_some() {
            return Err(Error::Consistency(format!(
                "decision `{}` must carry a label and correctness exactly when it answers",
                d.id
            )));
        }
    }
    let rc = risk_coverage(&decisions)?;
    let selected: Vec<RiskRow> = read_rows(&dir.report("selected.csv"), Stage::Evaluate)?;
    let sel = selected
        .first()
        .ok_or_else(|| Error::Consistency("reports/selected.csv is empty".into()))?;
    if sel.answered + sel.abstained != decisions.len()
        || sel.answered != rc.answered
        || sel.abstained != rc.abstained
    {
        return Err(Error::Consistency(format!(
            "decisions.csv has {} answered and {} abstained of {}, reports/selected.csv records {} and {}",
            rc.answered,
            rc.abstained,
            decisions.len(),
            sel.answered,
            sel.abstained
        )));
    }

    let mut text = String::new();
    let _ = writeln!(text, "config {hash}");
    let _ = writeln!(
        text,
        "decisions: {} samples, theta {}, answered {}, abstained {}, coverage {:.4}, risk {:.4}{}, phi0 {:.4}, phi1 {:.4}",
        rc.total,
        sel.theta,
        rc.answered,
        rc.abstained,
        rc.coverage,
        rc.risk,
        if rc.risk_undefined { " (undefined)" } else { "" },
        rc.phi(0.0),
        rc.phi(1.0)
    );
    for (name, file) in [
        ("cara_only", "risk_coverage_cara_only.csv"),
        ("fused", "risk_coverage_fused.csv"),
    ] {
        let path = dir.report(file);
        if !path.exists() {
            continue;
        }
        let _ = writeln!(text, "risk/coverage ({name}):");
        for r in read_rows::<RiskRow>(&path, Stage::Evaluate)? {
            let _ = writeln!(
                text,
                "  theta {:<5} w {:<5} risk {:.4} coverage {:.4} phi1 {:.4}",
                r.theta, r.w, r.risk, r.coverage, r.phi1
            );
        }
    }
    for (name, file) in [
        ("cara", "detection_cara.csv"),
        ("maxprob", "detection_maxprob.csv"),
    ] {
        let path = dir.report(file);
        if !path.exists() {
            continue;
        }
        let rows = read_rows::<DetectionRow>(&path, Stage::Evaluate)?;
        if let Some(best) = rows.iter().max_by(|a, b| a.accuracy.total_cmp(&b.accuracy)) {
            let _ = writeln!(
                text,
                "detection ({name}): best accuracy {:.4} at theta {} (precision {:.4}, recall {:.4}, f1 {:.4})",
                best.accuracy, best.theta, best.precision, best.recall, best.f1
            );
        }
    }
    if dir.pseudolabels().exists() {
        let (_, rows) = load_pseudolabels(&dir.pseudolabels())?;
        let count = |l| rows.iter().filter(|r| r.pseudo_label == l).count();
        let _ = writeln!(
            text,
            "pseudo-labels: positive {}, negative {}, excluded {}",
            count(PseudoLabel::Positive),
            count(PseudoLabel::Negative),
            count(PseudoLabel::Excluded)
        );
    }
    Ok(text)
}

#[derive(clap::Parser, Debug)]
#[command(
    name = "ctxabstain",
    about = "Context selection and context-aware abstention experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct CommonArgs {
    /// Run configuration (JSON); defaults are used when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configuration's seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(clap::Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic splits into <out>/data
    Generate(CommonArgs),
    /// Train, pseudo-label, fit the detector and evaluate
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Rerun a single stage from existing upstream artifacts
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Sweep one selection setting
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Check a run directory and print a summary
    Report(CommonArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = load_config(c.config.as_deref(), c.seed)?;
            for s in cmd_generate(&cfg, &c.out)? {
                println!(
                    "{:<10} {:>6} samples: {:>6} insufficient, {:>6} sufficient -> {}",
                    s.split.name(),
                    s.total,
                    s.insufficient,
                    s.total - s.insufficient,
                    s.path.display()
                );
            }
        }
        Command::Pipeline { common, stage } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(s) = cmd_pipeline(&cfg, &common.out, stage)? {
                println!("config {}", s.config_hash);
                println!("pseudo-labels {:?}", s.pseudo_label_counts);
                println!(
                    "theta {}: coverage {:.4}, risk {:.4}{}, answered accuracy {:.4} (answer-all {:.4})",
                    s.theta,
                    s.test.coverage,
                    s.test.risk,
                    if s.test.risk_undefined { " (undefined)" } else { "" },
                    s.test.answered_accuracy(),
                    s.answer_all_accuracy
                );
            }
        }
        Command::Ablate { common, axis } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            println!("strategy,n,r,accuracy");
            for r in cmd_ablate(&cfg, &common.out, axis)? {
                println!("{},{},{},{}", r.strategy, r.n, r.r, r.accuracy);
            }
        }
        Command::Report(c) => {
            if c.config.is_some() || c.seed.is_some() {
                info!("report reads the run directory only; --config and --seed are ignored");
            }
            print!("{}", cmd_report(&c.out)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "vlm"), derive_seed(1, "vlm"));
        assert_ne!(derive_seed(1, "vlm"), derive_seed(1, "cvlm"));
        assert_ne!(derive_seed(1, "vlm"), derive_seed(2, "vlm"));
    }

    #[test]
    fn default_config_is_valid_and_follows_the_split_rules() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.split_generator(Split::Case).insufficient_fraction, 0.5);
        assert_eq!(cfg.split_generator(Split::Train).num_samples, 2000);
        assert_eq!(
            cfg.split_generator(Split::Train).geometry_seed,
            cfg.split_generator(Split::Test).geometry_seed
        );
        assert_ne!(
            cfg.split_generator(Split::Train).seed,
            cfg.split_generator(Split::Test).seed
        );
    }

    #[test]
    fn config_roundtrips_and_partial_documents_fill_defaults() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.hash(), cfg.hash());
        let partial: RunConfig = serde_json::from_str(r#"{"seed": 5}"#).unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.splits, SplitSizes::default());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = RunConfig::default();
        cfg.selection.window_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.abstention.theta_grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.ablation.selection_numbers = vec![8];
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_ablation(Axis::SelectionNumber).is_err());
        assert!(cfg.validate_ablation(Axis::Strategy).is_ok());
    }

    #[test]
    fn missing_config_file_is_an_io_error() {
        let err = load_config(Some(Path::new("/nonexistent/run.json")), None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
