//! Magnification-aware grounding accuracy and mIoU.
//!
//! A prediction is a hit when its IoU with the ground truth reaches the
//! threshold of the sample's magnification (ties count). The `all` subset
//! aggregates those per-magnification judgments.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::model::GroundingModel;
use crate::synth::{GroundingSample, Magnification};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold_x40: f64,
    pub threshold_x20: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_x40: 0.7,
            threshold_x20: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("threshold_x40", self.threshold_x40), ("threshold_x20", self.threshold_x20)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, mag: Magnification) -> f64 {
        match mag {
            Magnification::X40 => self.threshold_x40,
            Magnification::X20 => self.threshold_x20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    #[serde(default)]
    pub annotation_index: usize,
    #[serde(rename = "box")]
    pub box_: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub n: usize,
    pub hits: usize,
    /// Percentage of hits.
    pub acc: f64,
    /// Mean IoU as a percentage.
    pub miou: f64,
}

impl SubsetMetrics {
    fn from_parts(n: usize, hits: usize, iou_sum: f64) -> Option<Self> {
        (n > 0).then(|| Self {
            n,
            hits,
            acc: 100.0 * hits as f64 / n as f64,
            miou: 100.0 * iou_sum / n as f64,
        })
    }
}

/// Subsets with no samples are `None` (absent), never zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: Option<SubsetMetrics>,
    pub x40: Option<SubsetMetrics>,
    pub x20: Option<SubsetMetrics>,
}

impl EvalReport {
    pub fn subset(&self, mag: Magnification) -> Option<&SubsetMetrics> {
        match mag {
            Magnification::X40 => self.x40.as_ref(),
            Magnification::X20 => self.x20.as_ref(),
        }
    }

    /// One header row and one value row, Acc then mIoU for all, x40, x20.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| all Acc | all mIoU | x40 Acc | x40 mIoU | x20 Acc | x20 mIoU |\n|---|---|---|---|---|---|\n|",
        );
        for s in [&self.all, &self.x40, &self.x20] {
            match s {
                Some(m) => write!(out, " {:.2} | {:.2} |", m.acc, m.miou).expect("string write"),
                None => out.push_str(" — | — |"),
            }
        }
        let n = |s: &Option<SubsetMetrics>| s.map_or(0, |m| m.n);
        writeln!(
            out,
            "\n\nn: all {}, x40 {}, x20 {}",
            n(&self.all),
            n(&self.x40),
            n(&self.x20)
        )
        .expect("string write");
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub image_id: String,
    pub magnification: Magnification,
    pub iou: f64,
    pub hit: bool,
}

/// Scores predictions against the corpus, one per ground-truth box.
pub fn evaluate(
    predictions: &[Prediction],
    corpus: &[GroundingSample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    evaluate_detailed(predictions, corpus, cfg).map(|(r, _)| r)
}

/// As [`evaluate`], also returning per-sample results in corpus order.
pub fn evaluate_detailed(
    predictions: &[Prediction],
    corpus: &[GroundingSample],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<SampleResult>)> {
    cfg.validate()?;
    let known: HashMap<&str, &GroundingSample> =
        corpus.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let mut by_key: BTreeMap<(&str, usize), Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        by_key
            .entry((p.image_id.as_str(), p.annotation_index))
            .or_default()
            .push(p);
    }

    let mut problems = Vec::new();
    for ((id, idx), ps) in &by_key {
        if !known.contains_key(id) {
            problems.push(format!("prediction for unknown image {id}"));
        } else if *idx != 0 {
            problems.push(format!("prediction for {id} has annotation index {idx}, but the record has one box"));
        } else if ps.len() > 1 {
            problems.push(format!("{} duplicate predictions for {id}", ps.len()));
        }
    }
    for s in corpus {
        if !by_key.contains_key(&(s.image_id.as_str(), 0)) {
            problems.push(format!("missing prediction for {}", s.image_id));
        }
    }
    if !problems.is_empty() {
        return Err(Error::PredictionMismatch { problems });
    }

    let mut results = Vec::with_capacity(corpus.len());
    for s in corpus {
        let p = by_key[&(s.image_id.as_str(), 0)][0];
        let v = iou(&p.box_, &s.box_);
        results.push(SampleResult {
            image_id: s.image_id.clone(),
            magnification: s.magnification,
            iou: v,
            hit: v >= cfg.threshold(s.magnification),
        });
    }
    Ok((report_from_results(&results), results))
}

pub fn report_from_results(results: &[SampleResult]) -> EvalReport {
    let mut parts = [(0usize, 0usize, 0.0f64); 2];
    for r in results {
        let k = match r.magnification {
            Magnification::X40 => 0,
            Magnification::X20 => 1,
        };
        parts[k].0 += 1;
        parts[k].1 += usize::from(r.hit);
        parts[k].2 += r.iou;
    }
    let [a, b] = parts;
    EvalReport {
        all: SubsetMetrics::from_parts(a.0 + b.0, a.1 + b.1, results.iter().map(|r| r.iou).sum()),
        x40: SubsetMetrics::from_parts(a.0, a.1, a.2),
        x20: SubsetMetrics::from_parts(b.0, b.1, b.2),
    }
}

/// Runs inference over `samples` and scores the result.
pub fn evaluate_model(
    model: &GroundingModel,
    samples: &[GroundingSample],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let refs: Vec<&GroundingSample> = samples.iter().collect();
    let boxes = model.predict(&refs, batch_size)?;
    let preds: Vec<Prediction> = samples
        .iter()
        .zip(boxes)
        .map(|(s, b)| Prediction {
            image_id: s.image_id.clone(),
            annotation_index: 0,
            box_: b,
        })
        .collect();
    let report = evaluate(&preds, samples, cfg)?;
    Ok((report, preds))
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| Error::Schema {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Markdown,
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Markdown => report.to_markdown(),
    };
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
