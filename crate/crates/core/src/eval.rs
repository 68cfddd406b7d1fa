//! Dataset-level crop evaluation: ACC at (K, N) against MOS-ranked ground
//! truth, and IoU / BDE against box ground truth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{rank_cmp, ScoredCrop};
use crate::geometry::{bde, equivalent, iou, ImageDims, PixelBox, DEFAULT_EQUIVALENCE_EPSILON};
use crate::objectives::compensated_sum;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("expected {expected} ground truth")]
    WrongGroundTruthKind { expected: &'static str },
    #[error("{found} ground-truth crops, at least {needed} required")]
    NotEnoughGroundTruth { found: usize, needed: usize },
    #[error("{found} predictions, at least {needed} required")]
    NotEnoughPredictions { found: usize, needed: usize },
    #[error("no records to evaluate")]
    EmptyEvaluation,
    #[error("image {0:?} has predictions but no ground truth")]
    MissingGroundTruth(String),
    #[error("image {0:?} has ground truth but no predictions")]
    MissingPredictions(String),
    #[error("image {0:?} appears more than once")]
    DuplicateImage(String),
    #[error("image {image:?}: {reason}")]
    InvalidRecord { image: String, reason: String },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GroundTruth {
    Ranked { crops: Vec<ScoredCrop> },
    Boxes { boxes: Vec<PixelBox> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image: String,
    pub dims: ImageDims,
    /// Ranked best-first.
    pub predictions: Vec<PixelBox>,
    pub ground_truth: GroundTruth,
}

/// The `n` highest-MOS ground-truth crops, ties broken by lexicographic box
/// order.
pub fn top_n(crops: &[ScoredCrop], n: usize) -> Vec<PixelBox> {
    let mut sorted: Vec<&ScoredCrop> = crops.iter().collect();
    sorted.sort_by(|a, b| rank_cmp(a, b));
    sorted.into_iter().take(n).map(|c| c.bbox).collect()
}

/// True iff one of the top-`k` predictions is equivalent at `epsilon` to one
/// of the `n` best ground-truth crops.
pub fn acc_k_n(record: &EvalRecord, k: usize, n: usize, epsilon: f64) -> Result<bool, EvalError> {
    let GroundTruth::Ranked { crops } = &record.ground_truth else {
        return Err(EvalError::WrongGroundTruthKind { expected: "ranked" });
    };
    if crops.len() < n {
        return Err(EvalError::NotEnoughGroundTruth {
            found: crops.len(),
            needed: n,
        });
    }
    if record.predictions.len() < k {
        return Err(EvalError::NotEnoughPredictions {
            found: record.predictions.len(),
            needed: k,
        });
    }
    let gt = top_n(crops, n);
    Ok(record.predictions[..k]
        .iter()
        .any(|p| gt.iter().any(|g| equivalent(p, g, epsilon))))
}

/// Rank-1 IoU (best over ground-truth boxes) and BDE (smallest over them).
pub fn eval_box_gt(record: &EvalRecord) -> Result<(f64, f64), EvalError> {
    let GroundTruth::Boxes { boxes } = &record.ground_truth else {
        return Err(EvalError::WrongGroundTruthKind { expected: "box" });
    };
    let pred = record.predictions.first().ok_or(EvalError::NotEnoughPredictions { found: 0, needed: 1 })?;
    if boxes.is_empty() {
        return Err(EvalError::NotEnoughGroundTruth { found: 0, needed: 1 });
    }
    let best_iou = boxes.iter().map(|g| iou(pred, g)).fold(f64::NEG_INFINITY, f64::max);
    let best_bde = boxes.iter().map(|g| bde(pred, g, record.dims)).fold(f64::INFINITY, f64::min);
    Ok((best_iou, best_bde))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub acc_1_5: Option<bool>,
    pub acc_1_10: Option<bool>,
    pub iou: Option<f64>,
    pub bde: Option<f64>,
}

/// Summary metrics; a metric is `None` when no record could be scored on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub acc_1_5: Option<f64>,
    pub acc_1_10: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_bde: Option<f64>,
    pub rows: Vec<ReportRow>,
}

/// Order-independent mean: values are sorted before compensated summation so
/// the result is exactly invariant under record permutation.
fn mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    Some(compensated_sum(v) / n)
}

fn percent(v: impl Iterator<Item = bool>) -> Option<f64> {
    let (hits, total) = v.fold((0usize, 0usize), |(h, t), b| (h + usize::from(b), t + 1));
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// Score every record on every metric its ground truth supports. A record
/// whose ground truth cannot serve a metric (wrong kind, too few crops) is
/// skipped for that metric only.
pub fn aggregate(records: &[EvalRecord], epsilon: f64) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyEvaluation);
    }
    let rows: Vec<ReportRow> = records
        .iter()
        .map(|r| {
            let boxes = eval_box_gt(r).ok();
            ReportRow {
                image: r.image.clone(),
                acc_1_5: acc_k_n(r, 1, 5, epsilon).ok(),
                acc_1_10: acc_k_n(r, 1, 10, epsilon).ok(),
                iou: boxes.map(|b| b.0),
                bde: boxes.map(|b| b.1),
            }
        })
        .collect();
    Ok(Report {
        acc_1_5: percent(rows.iter().filter_map(|r| r.acc_1_5)),
        acc_1_10: percent(rows.iter().filter_map(|r| r.acc_1_10)),
        mean_iou: mean(rows.iter().filter_map(|r| r.iou).collect()),
        mean_bde: mean(rows.iter().filter_map(|r| r.bde).collect()),
        rows,
    })
}

pub fn aggregate_default(records: &[EvalRecord]) -> Result<Report, EvalError> {
    aggregate(records, DEFAULT_EQUIVALENCE_EPSILON)
}

// ---------------------------------------------------------------------------
// Input records

/// Prediction line: `{image, boxes}` with boxes ranked best-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image: String,
    pub boxes: Vec<PixelBox>,
}

/// Ground-truth line in either dataset schema: `{image, width, height,
/// crops:[{box, mos}]}` or `{image, width, height, boxes:[[...]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

/// Pair predictions with ground truth by image name, in ground-truth order.
pub fn join_records(preds: &[PredictionRecord], truths: &[GroundTruthRecord]) -> Result<Vec<EvalRecord>, EvalError> {
    let mut by_image: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if by_image.insert(&p.image, p).is_some() {
            return Err(EvalError::DuplicateImage(p.image.clone()));
        }
    }
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(truths.len());
    for t in truths {
        if !seen.insert(t.image.as_str()) {
            return Err(EvalError::DuplicateImage(t.image.clone()));
        }
        let p = by_image
            .get(t.image.as_str())
            .ok_or_else(|| EvalError::MissingPredictions(t.image.clone()))?;
        let dims = ImageDims::new(t.width, t.height).map_err(|e| EvalError::InvalidRecord {
            image: t.image.clone(),
            reason: e.to_string(),
        })?;
        out.push(EvalRecord {
            image: t.image.clone(),
            dims,
            predictions: p.boxes.clone(),
            ground_truth: t.truth.clone(),
        });
    }
    if let Some(p) = preds.iter().find(|p| !seen.contains(p.image.as_str())) {
        return Err(EvalError::MissingGroundTruth(p.image.clone()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Report emission

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "text" | "text-table" => Ok(Self::Text),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Name of the CSV row carrying the summary metrics.
pub const SUMMARY_ROW: &str = "__mean__";
const CSV_HEADER: [&str; 5] = ["image", "acc_1_5", "acc_1_10", "iou", "bde"];

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn opt_bool(v: Option<bool>) -> String {
    v.map(|b| if b { "1" } else { "0" }.to_string()).unwrap_or_default()
}

pub fn emit_report(report: &Report, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report).expect("reports serialize");
            v.push(b'\n');
            v
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory csv");
            w.write_record([
                SUMMARY_ROW.to_string(),
                opt_num(report.acc_1_5),
                opt_num(report.acc_1_10),
                opt_num(report.mean_iou),
                opt_num(report.mean_bde),
            ])
            .expect("in-memory csv");
            for r in &report.rows {
                w.write_record([
                    r.image.clone(),
                    opt_bool(r.acc_1_5),
                    opt_bool(r.acc_1_10),
                    opt_num(r.iou),
                    opt_num(r.bde),
                ])
                .expect("in-memory csv");
            }
            w.into_inner().expect("in-memory csv")
        }
        ReportFormat::Text => text_table(report).into_bytes(),
    }
}

fn text_table(report: &Report) -> String {
    let pct = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
    let fix3 = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let mut s = String::new();
    s.push_str(&format!(
        "{:<8} {:>7} {:>8} {:>9} {:>7} {:>7}\n",
        "Subset", "Images", "ACC_1/5", "ACC_1/10", "IoU", "BDE"
    ));
    s.push_str(&format!(
        "{:<8} {:>7} {:>8} {:>9} {:>7} {:>7}\n",
        "all",
        report.rows.len(),
        pct(report.acc_1_5),
        pct(report.acc_1_10),
        fix3(report.mean_iou),
        fix3(report.mean_bde)
    ));
    s
}

/// Inverse of the CSV emission.
pub fn parse_csv_report(bytes: &[u8]) -> Result<Report, EvalError> {
    let err = |e: &dyn std::fmt::Display| EvalError::Csv(e.to_string());
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(|e| err(&e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(EvalError::Csv(format!("unexpected header {header:?}")));
    }
    let num = |s: &str| -> Result<Option<f64>, EvalError> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| err(&e))
        }
    };
    let flag = |s: &str| -> Result<Option<bool>, EvalError> {
        match s {
            "" => Ok(None),
            "1" => Ok(Some(true)),
            "0" => Ok(Some(false)),
            other => Err(EvalError::Csv(format!("bad flag {other:?}"))),
        }
    };
    let mut summary = None;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(&e))?;
        if &rec[0] == SUMMARY_ROW {
            summary = Some((num(&rec[1])?, num(&rec[2])?, num(&rec[3])?, num(&rec[4])?));
        } else {
            rows.push(ReportRow {
                image: rec[0].to_string(),
                acc_1_5: flag(&rec[1])?,
                acc_1_10: flag(&rec[2])?,
                iou: num(&rec[3])?,
                bde: num(&rec[4])?,
            });
        }
    }
    let (acc_1_5, acc_1_10, mean_iou, mean_bde) =
        summary.ok_or_else(|| EvalError::Csv(format!("missing {SUMMARY_ROW} row")))?;
    Ok(Report {
        acc_1_5,
        acc_1_10,
        mean_iou,
        mean_bde,
        rows,
    })
}
