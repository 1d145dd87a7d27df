//! Selective-prediction metrics: risk, coverage, effective reliability,
//! detection quality against ground-truth sufficiency, threshold calibration
//! and sweeps.

use std::io::Write;
use std::path::Path;

use crate::cara::{decide_scored, AbstentionConfig, AbstentionMode, Decision, ScoredSample};
use crate::error::{Error, Result};

/// `0.05, 0.10, .., 0.95`.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

pub fn default_w_grid() -> Vec<f64> {
    vec![0.25, 0.5, 0.75, 1.0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskCoverageReport {
    pub total: usize,
    pub answered: usize,
    pub abstained: usize,
    pub correct: usize,
    pub wrong: usize,
    pub coverage: f64,
    /// `wrong / answered`; 0 when nothing was answered (see `risk_undefined`).
    pub risk: f64,
    pub risk_undefined: bool,
    /// `(cost, phi)` for costs 0 and 1.
    pub effective_reliability: Vec<(f64, f64)>,
}

impl RiskCoverageReport {
    pub fn answered_accuracy(&self) -> f64 {
        if self.answered == 0 {
            0.0
        } else {
            self.correct as f64 / self.answered as f64
        }
    }

    pub fn phi(&self, cost: f64) -> f64 {
        (self.correct as f64 - cost * self.wrong as f64) / self.total as f64
    }
}

fn counts(decisions: &[Decision]) -> Result<(usize, usize, usize)> {
    if decisions.is_empty() {
        return Err(Error::config("no decisions to evaluate"));
    }
    let (mut answered, mut correct) = (0, 0);
    for d in decisions.iter().filter(|d| !d.abstained) {
        answered += 1;
        match d.correct {
            Some(true) => correct += 1,
            Some(false) => {}
            None => {
                return Err(Error::Validation {
                    id: d.id.clone(),
                    message: "answered decision without correctness".into(),
                })
            }
        }
    }
    Ok((decisions.len(), answered, correct))
}

pub fn risk_coverage(decisions: &[Decision]) -> Result<RiskCoverageReport> {
    let (total, answered, correct) = counts(decisions)?;
    let wrong = answered - correct;
    let mut report = RiskCoverageReport {
        total,
        answered,
        abstained: total - answered,
        correct,
        wrong,
        coverage: answered as f64 / total as f64,
        risk: if answered == 0 {
            0.0
        } else {
            wrong as f64 / answered as f64
        },
        risk_undefined: answered == 0,
        effective_reliability: Vec::new(),
    };
    report.effective_reliability = vec![(0.0, report.phi(0.0)), (1.0, report.phi(1.0))];
    Ok(report)
}

/// Mean of +1 per correct answer, `-cost` per wrong answer and 0 per
/// abstention.
pub fn effective_reliability(decisions: &[Decision], cost: f64) -> Result<f64> {
    if !(cost >= 0.0 && cost.is_finite()) {
        return Err(Error::config(format!(
            "cost must be finite and non-negative, got {cost}"
        )));
    }
    let (total, answered, correct) = counts(decisions)?;
    Ok((correct as f64 - cost * (answered - correct) as f64) / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectionReport {
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub accuracy: f64,
    /// 0 when nothing is predicted insufficient.
    pub precision: f64,
    /// 0 when no sample is insufficient.
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// `scores` holds `(C, truly_insufficient)`; a sample is predicted
/// insufficient iff `C > theta`.
pub fn detection_metrics(scores: &[(f64, bool)], theta: f64) -> Result<DetectionReport> {
    if scores.is_empty() {
        return Err(Error::config("no detector scores to evaluate"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(c, truth) in scores {
        match (c > theta, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionReport {
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fn_,
        accuracy: ratio(tp + tn, scores.len()),
        precision,
        recall,
        f1,
    })
}

/// The grid point with the largest coverage among those whose risk is at most
/// `target_risk`; if none qualifies, the one with the smallest risk. Ties go
/// to the earlier grid point.
pub fn calibrate_theta<F>(grid: &[f64], target_risk: f64, decisions_at: F) -> Result<f64>
where
    F: Fn(f64) -> Result<Vec<Decision>>,
{
    if grid.is_empty() {
        return Err(Error::config("empty theta grid"));
    }
    let mut qualified: Option<(f64, f64)> = None;
    let mut safest: Option<(f64, f64)> = None;
    for &theta in grid {
        let r = risk_coverage(&decisions_at(theta)?)?;
        if r.risk <= target_risk && qualified.is_none_or(|(_, cov)| r.coverage > cov) {
            qualified = Some((theta, r.coverage));
        }
        if safest.is_none_or(|(_, risk)| r.risk < risk) {
            safest = Some((theta, r.risk));
        }
    }
    Ok(qualified.or(safest).expect("grid is non-empty").0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    pub w: f64,
    pub report: RiskCoverageReport,
}

/// One row per `(theta, w)`, theta-major in grid order.
pub fn sweep<F>(theta_grid: &[f64], w_grid: &[f64], decisions_at: F) -> Result<Vec<SweepRow>>
where
    F: Fn(f64, f64) -> Result<Vec<Decision>>,
{
    if theta_grid.is_empty() || w_grid.is_empty() {
        return Err(Error::config("sweep grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(theta_grid.len() * w_grid.len());
    for &theta in theta_grid {
        for &w in w_grid {
            rows.push(SweepRow {
                theta,
                w,
                report: risk_coverage(&decisions_at(theta, w)?)?,
            });
        }
    }
    Ok(rows)
}

/// Decisions for every scored sample under one configuration.
pub fn decide_all(scored: &[ScoredSample], acfg: &AbstentionConfig) -> Result<Vec<Decision>> {
    scored.iter().map(|x| decide_scored(x, acfg)).collect()
}

pub fn sweep_scored(
    scored: &[ScoredSample],
    theta_grid: &[f64],
    w_grid: &[f64],
    mode: AbstentionMode,
) -> Result<Vec<SweepRow>> {
    sweep(theta_grid, w_grid, |theta, w| {
        decide_all(scored, &AbstentionConfig { theta, w, mode })
    })
}

pub fn detection_sweep(
    scores: &[(f64, bool)],
    theta_grid: &[f64],
) -> Result<Vec<(f64, DetectionReport)>> {
    theta_grid
        .iter()
        .map(|&t| Ok((t, detection_metrics(scores, t)?)))
        .collect()
}

fn create_with_hash(path: &Path, config_hash: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    writeln!(file, "# config_hash: {config_hash}")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn write_sweep_csv(path: &Path, config_hash: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = create_with_hash(path, config_hash)?;
    w.write_record([
        "theta",
        "w",
        "risk",
        "coverage",
        "phi1",
        "answered",
        "abstained",
    ])?;
    for r in rows {
        w.write_record([
            r.theta.to_string(),
            r.w.to_string(),
            r.report.risk.to_string(),
            r.report.coverage.to_string(),
            r.report.phi(1.0).to_string(),
            r.report.answered.to_string(),
            r.report.abstained.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn write_detection_csv(
    path: &Path,
    config_hash: &str,
    rows: &[(f64, DetectionReport)],
) -> Result<()> {
    let mut w = create_with_hash(path, config_hash)?;
    w.write_record(["theta", "accuracy", "precision", "recall", "f1"])?;
    for (t, d) in rows {
        w.write_record([
            t.to_string(),
            d.accuracy.to_string(),
            d.precision.to_string(),
            d.recall.to_string(),
            d.f1.to_string(),
        ])?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(abstained: bool, correct: bool) -> Decision {
        Decision {
            id: "d".into(),
            c: 0.5,
            v: 0.5,
            h: None,
            abstained,
            label: (!abstained).then_some(0),
            correct: (!abstained).then_some(correct),
        }
    }

    #[test]
    fn risk_coverage_examples() {
        let r = risk_coverage(&[
            d(false, true),
            d(false, true),
            d(false, false),
            d(true, false),
        ])
        .unwrap();
        assert_eq!(r.coverage, 0.75);
        assert!((r.risk - 1.0 / 3.0).abs() < 1e-15);
        let r = risk_coverage(&[d(true, false), d(true, true)]).unwrap();
        assert_eq!((r.coverage, r.risk, r.risk_undefined), (0.0, 0.0, true));
        let r = risk_coverage(&vec![d(false, true); 3]).unwrap();
        assert_eq!((r.coverage, r.risk), (1.0, 0.0));
        assert!(risk_coverage(&[]).is_err());
        let mut bad = d(false, true);
        bad.correct = None;
        assert!(risk_coverage(&[bad]).is_err());
    }

    #[test]
    fn effective_reliability_examples() {
        assert_eq!(
            effective_reliability(&vec![d(false, true); 4], 3.0).unwrap(),
            1.0
        );
        assert_eq!(
            effective_reliability(&vec![d(true, true); 4], 1.0).unwrap(),
            0.0
        );
        let mixed = [
            d(false, true),
            d(false, true),
            d(false, false),
            d(true, false),
        ];
        assert_eq!(effective_reliability(&mixed, 1.0).unwrap(), 0.25);
        assert_eq!(effective_reliability(&mixed, 0.0).unwrap(), 0.5);
        assert!(effective_reliability(&mixed, -1.0).is_err());
    }

    #[test]
    fn detection_examples() {
        let perfect = [(0.9, true), (0.9, true), (0.1, false)];
        assert_eq!(detection_metrics(&perfect, 0.5).unwrap().accuracy, 1.0);
        let constant = [(0.5, true), (0.5, false), (0.5, false), (0.5, false)];
        let r = detection_metrics(&constant, 0.5).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn random_scores_on_a_balanced_set_are_at_chance() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<(f64, bool)> =
                (0..1000).map(|i| (rng.random::<f64>(), i < 500)).collect();
            let acc = detection_metrics(&scores, 0.5).unwrap().accuracy;
            assert!((acc - 0.5).abs() <= 0.05, "seed {seed}: {acc}");
        }
    }

    fn scored(c: f64, correct: bool) -> ScoredSample {
        ScoredSample {
            id: "s".into(),
            c,
            v: 0.8,
            label: 0,
            correct,
            truth: None,
        }
    }

    #[test]
    fn calibration() {
        let set: Vec<ScoredSample> = (0..10)
            .map(|i| scored(i as f64 / 10.0 + 0.01, i < 6))
            .collect();
        let grid = default_theta_grid();
        let at = |theta| {
            decide_all(
                &set,
                &AbstentionConfig {
                    theta,
                    w: 0.5,
                    mode: AbstentionMode::CaraOnly,
                },
            )
        };
        let t = calibrate_theta(&grid, 1.0, at).unwrap();
        assert_eq!(risk_coverage(&at(t).unwrap()).unwrap().coverage, 1.0);
        let t = calibrate_theta(&grid, 0.0, at).unwrap();
        let r = risk_coverage(&at(t).unwrap()).unwrap();
        assert_eq!((r.risk, r.coverage), (0.0, 0.6));
        assert_eq!(calibrate_theta(&[0.3], 0.0, at).unwrap(), 0.3);
        assert!(calibrate_theta(&[], 0.0, at).is_err());
    }

    #[test]
    fn sweep_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set: Vec<ScoredSample> = (0..200)
            .map(|_| scored(rng.random(), rng.random()))
            .collect();
        let one = sweep_scored(&set, &[0.4], &[0.5], AbstentionMode::CaraOnly).unwrap();
        assert_eq!(one.len(), 1);
        let direct = risk_coverage(
            &decide_all(
                &set,
                &AbstentionConfig {
                    theta: 0.4,
                    w: 0.5,
                    mode: AbstentionMode::CaraOnly,
                },
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(one[0].report, direct);

        let grid = default_theta_grid();
        let rows = sweep_scored(&set, &grid, &[1.0], AbstentionMode::CaraOnly).unwrap();
        for pair in rows.windows(2) {
            assert!(pair[0].report.coverage <= pair[1].report.coverage);
        }
        let fused = sweep_scored(&set, &grid, &[1.0], AbstentionMode::Fused).unwrap();
        // H = 1 - C at w = 1, so fused at theta mirrors cara_only at 1 - theta
        for (a, b) in rows.iter().zip(fused.iter().rev()) {
            assert_eq!(a.report, b.report);
        }
        assert!(sweep_scored(&set, &[], &[1.0], AbstentionMode::Fused).is_err());
    }

    #[test]
    fn csv_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let set = vec![scored(0.2, true), scored(0.7, false)];
        let rows = sweep_scored(&set, &[0.5], &[0.5], AbstentionMode::CaraOnly).unwrap();
        let p = dir.path().join("rc.csv");
        write_sweep_csv(&p, "h1", &rows).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "# config_hash: h1\ntheta,w,risk,coverage,phi1,answered,abstained\n0.5,0.5,0,0.5,0.5,1,1\n"
        );
        let det = detection_sweep(&[(0.2, false), (0.7, true)], &[0.5]).unwrap();
        let p = dir.path().join("det.csv");
        write_detection_csv(&p, "h1", &det).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "# config_hash: h1\ntheta,accuracy,precision,recall,f1\n0.5,1,1,1,1\n"
        );
    }
}
