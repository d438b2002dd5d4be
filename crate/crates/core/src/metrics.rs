//! Threshold and threshold-free evaluation of fake-probability scores.
//!
//! Fake is the positive class throughout. Curves sweep the unique scores in
//! descending order; all predictions sharing a score enter together, which
//! makes the trapezoidal ROC area agree with the rank-statistic definition
//! (ties get half credit).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub id: String,
    /// Probability that the image is fake.
    pub score: f64,
    pub label: Label,
}

impl ScoredPrediction {
    pub fn new(id: impl Into<String>, score: f64, label: Label) -> Self {
        Self {
            id: id.into(),
            score,
            label,
        }
    }
}

/// One ROC point. `threshold` is None for the synthetic (0,0) anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: Option<f64>,
}

/// One precision-recall point. `threshold` is None for the (0,1) anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: Option<f64>,
}

/// Confusion counts with fake as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub threshold: f64,
    pub confusion: Confusion,
    /// None when only one class is present.
    pub roc: Option<Vec<RocPoint>>,
    pub roc_auc: Option<f64>,
    pub pr: Option<Vec<PrPoint>>,
    pub average_precision: Option<f64>,
    pub recall_at_precision_1: Option<f64>,
    pub n_real: usize,
    pub n_fake: usize,
}

fn check_scores(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    for p in preds {
        if !(0.0..=1.0).contains(&p.score) || p.score.is_nan() {
            return Err(Error::ScoreOutOfRange {
                id: p.id.clone(),
                score: p.score,
            });
        }
    }
    Ok(())
}

/// Sorted (score, n_fake_at_score, n_real_at_score) groups, descending score.
fn score_groups(preds: &[ScoredPrediction]) -> Vec<(f64, usize, usize)> {
    let mut sorted: Vec<(f64, Label)> = preds.iter().map(|p| (p.score, p.label)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("scores checked finite"));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (score, label) in sorted {
        match groups.last_mut() {
            Some((s, fake, real)) if *s == score => {
                if label == Label::Fake {
                    *fake += 1;
                } else {
                    *real += 1;
                }
            }
            _ => {
                let (fake, real) = if label == Label::Fake { (1, 0) } else { (0, 1) };
                groups.push((score, fake, real));
            }
        }
    }
    groups
}

/// Full metric bundle at the given hard-decision threshold (fake iff
/// score >= threshold). ROC/PR fields are None when a class is missing.
pub fn evaluate(preds: &[ScoredPrediction], threshold: f64) -> Result<EvalReport> {
    check_scores(preds)?;

    let n_fake = preds.iter().filter(|p| p.label == Label::Fake).count();
    let n_real = preds.len() - n_fake;

    let mut confusion = Confusion {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for p in preds {
        let predicted_fake = p.score >= threshold;
        match (predicted_fake, p.label) {
            (true, Label::Fake) => confusion.tp += 1,
            (true, Label::Real) => confusion.fp += 1,
            (false, Label::Real) => confusion.tn += 1,
            (false, Label::Fake) => confusion.fn_ += 1,
        }
    }
    let accuracy = (confusion.tp + confusion.tn) as f64 / preds.len() as f64;

    if n_fake == 0 || n_real == 0 {
        return Ok(EvalReport {
            accuracy,
            threshold,
            confusion,
            roc: None,
            roc_auc: None,
            pr: None,
            average_precision: None,
            recall_at_precision_1: None,
            n_real,
            n_fake,
        });
    }

    let groups = score_groups(preds);

    let mut roc = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let mut pr = vec![PrPoint {
        recall: 0.0,
        precision: 1.0,
        threshold: None,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut auc = 0.0;
    let mut ap = 0.0;
    let mut prev_tpr = 0.0;
    let mut prev_fpr = 0.0;
    let mut prev_recall = 0.0;
    for (score, g_fake, g_real) in groups {
        tp += g_fake;
        fp += g_real;
        let tpr = tp as f64 / n_fake as f64;
        let fpr = fp as f64 / n_real as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        // trapezoid over the ROC segment; ties enter as one diagonal step
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        // step sum: (R_i - R_{i-1}) * P_i
        ap += (tpr - prev_recall) * precision;
        roc.push(RocPoint {
            fpr,
            tpr,
            threshold: Some(score),
        });
        pr.push(PrPoint {
            recall: tpr,
            precision,
            threshold: Some(score),
        });
        prev_tpr = tpr;
        prev_fpr = fpr;
        prev_recall = tpr;
    }

    let recall_at_precision_1 = pr
        .iter()
        .filter(|p| p.precision == 1.0)
        .map(|p| p.recall)
        .fold(0.0, f64::max);

    Ok(EvalReport {
        accuracy,
        threshold,
        confusion,
        roc: Some(roc),
        roc_auc: Some(auc),
        pr: Some(pr),
        average_precision: Some(ap),
        recall_at_precision_1: Some(recall_at_precision_1),
        n_real,
        n_fake,
    })
}

/// Rank-statistic ROC AUC: over all fake-real pairs, full credit when the
/// fake outscores the real, half credit on ties. O(n^2); the independent
/// check for [`evaluate`]'s trapezoidal area.
pub fn auc_oracle(preds: &[ScoredPrediction]) -> Result<f64> {
    check_scores(preds)?;
    let fakes: Vec<f64> = preds
        .iter()
        .filter(|p| p.label == Label::Fake)
        .map(|p| p.score)
        .collect();
    let reals: Vec<f64> = preds
        .iter()
        .filter(|p| p.label == Label::Real)
        .map(|p| p.score)
        .collect();
    if fakes.is_empty() {
        return Err(Error::SingleClass("real"));
    }
    if reals.is_empty() {
        return Err(Error::SingleClass("fake"));
    }
    let mut credit = 0.0;
    for f in &fakes {
        for r in &reals {
            if f > r {
                credit += 1.0;
            } else if f == r {
                credit += 0.5;
            }
        }
    }
    Ok(credit / (fakes.len() as f64 * reals.len() as f64))
}

/// Brute-force average precision: the mean, over fake items, of the precision
/// of the prediction set `score >= s` where `s` is that item's score. Tied
/// items enter together, matching the step-sum in [`evaluate`].
pub fn ap_oracle(preds: &[ScoredPrediction]) -> Result<f64> {
    check_scores(preds)?;
    let n_fake = preds.iter().filter(|p| p.label == Label::Fake).count();
    if n_fake == 0 {
        return Err(Error::SingleClass("real"));
    }
    if n_fake == preds.len() {
        return Err(Error::SingleClass("fake"));
    }
    let mut total = 0.0;
    for p in preds.iter().filter(|p| p.label == Label::Fake) {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for q in preds {
            if q.score >= p.score {
                match q.label {
                    Label::Fake => tp += 1,
                    Label::Real => fp += 1,
                }
            }
        }
        total += tp as f64 / (tp + fp) as f64;
    }
    Ok(total / n_fake as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMetric {
    Accuracy,
    RocAuc,
    AveragePrecision,
}

/// Percentile bootstrap 95% interval for the chosen metric. Resamples that
/// lose a class are redrawn (bounded), since ROC/PR are undefined there.
pub fn bootstrap_ci(
    preds: &[ScoredPrediction],
    metric: BootstrapMetric,
    n_resamples: usize,
    seed: u64,
    threshold: f64,
) -> Result<(f64, f64)> {
    check_scores(preds)?;
    if n_resamples < 100 {
        return Err(Error::TooFewResamples {
            min: 100,
            got: n_resamples,
        });
    }
    let needs_both = !matches!(metric, BootstrapMetric::Accuracy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_resamples);
    const REDRAW_CAP: usize = 100;
    for _ in 0..n_resamples {
        let mut stat = None;
        for _attempt in 0..REDRAW_CAP {
            let sample: Vec<ScoredPrediction> = (0..preds.len())
                .map(|_| preds[rng.random_range(0..preds.len())].clone())
                .collect();
            if needs_both {
                let fakes = sample.iter().filter(|p| p.label == Label::Fake).count();
                if fakes == 0 || fakes == sample.len() {
                    continue;
                }
            }
            let report = evaluate(&sample, threshold)?;
            stat = Some(match metric {
                BootstrapMetric::Accuracy => report.accuracy,
                BootstrapMetric::RocAuc => report.roc_auc.expect("both classes present"),
                BootstrapMetric::AveragePrecision => {
                    report.average_precision.expect("both classes present")
                }
            });
            break;
        }
        match stat {
            Some(s) => stats.push(s),
            None => return Err(Error::SingleClass("resample")),
        }
    }
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite stats"));
    Ok((percentile(&stats, 0.025), percentile(&stats, 0.975)))
}

/// Linear-interpolated percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

/// `predictions.csv` with header `id,score,label`.
pub fn write_predictions(path: &Path, preds: &[ScoredPrediction]) -> Result<()> {
    let mut out = String::from("id,score,label\n");
    for p in preds {
        out.push_str(&format!("{},{},{}\n", p.id, p.score, p.label));
    }
    crate::data::write_atomic(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScoredPrediction>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut preds = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            row: line,
            reason: e.to_string(),
        })?;
        if row.len() != 3 {
            return Err(Error::MalformedRow {
                row: line,
                reason: format!("expected 3 columns, got {}", row.len()),
            });
        }
        let score: f64 = row[1].parse().map_err(|_| Error::MalformedRow {
            row: line,
            reason: format!("bad score {:?}", &row[1]),
        })?;
        let label = Label::parse(&row[2]).ok_or_else(|| Error::UnknownToken {
            field: "label",
            token: row[2].to_string(),
            row: line,
        })?;
        preds.push(ScoredPrediction::new(row[0].to_string(), score, label));
    }
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    Ok(preds)
}

/// `eval.json` plus `roc.csv` / `pr.csv` point lists for plotting.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidConfig(format!("serialize report: {e}")))?;
    crate::data::write_atomic(&dir.join("eval.json"), json.as_bytes())?;

    if let Some(roc) = &report.roc {
        let mut out = String::from("fpr,tpr,threshold\n");
        for p in roc {
            let t = p.threshold.map_or(String::new(), |t| t.to_string());
            out.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, t));
        }
        crate::data::write_atomic(&dir.join("roc.csv"), out.as_bytes())?;
    }
    if let Some(pr) = &report.pr {
        let mut out = String::from("recall,precision,threshold\n");
        for p in pr {
            let t = p.threshold.map_or(String::new(), |t| t.to_string());
            out.push_str(&format!("{},{},{}\n", p.recall, p.precision, t));
        }
        crate::data::write_atomic(&dir.join("pr.csv"), out.as_bytes())?;
    }
    Ok(())
}
