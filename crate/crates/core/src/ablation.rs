//! Multi-seed comparison of the knowledge pathways.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, write_predictions, write_report, EvalConfig, EvalReport, ReportFormat};
use crate::model::{AblationMode, ModelConfig};
use crate::synth::{GroundingSample, Split};
use crate::train::{train, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub report: EvalReport,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AblationMode,
    pub runs: usize,
    pub mean_acc: f64,
    pub mean_miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub runs: Vec<AblationRun>,
    pub modes: Vec<ModeSummary>,
}

impl AblationSummary {
    pub fn from_runs(runs: Vec<AblationRun>) -> Self {
        let mut acc: BTreeMap<String, (AblationMode, usize, f64, f64)> = BTreeMap::new();
        for r in &runs {
            let all = r.report.all.unwrap_or(crate::eval::SubsetMetrics {
                n: 0,
                hits: 0,
                acc: 0.0,
                miou: 0.0,
            });
            let e = acc.entry(r.mode.as_str().to_string()).or_insert((r.mode, 0, 0.0, 0.0));
            e.1 += 1;
            e.2 += all.acc;
            e.3 += all.miou;
        }
        let mut modes: Vec<ModeSummary> = acc
            .into_values()
            .map(|(mode, n, a, m)| ModeSummary {
                mode,
                runs: n,
                mean_acc: a / n as f64,
                mean_miou: m / n as f64,
            })
            .collect();
        modes.sort_by_key(|m| AblationMode::ALL.iter().position(|x| *x == m.mode));
        Self { runs, modes }
    }

    pub fn mean_miou(&self, mode: AblationMode) -> Option<f64> {
        self.modes.iter().find(|m| m.mode == mode).map(|m| m.mean_miou)
    }

    /// `branch_kfm ≥ branch ≥ none` on mean test mIoU, with `branch_kfm`
    /// at least `margin` points above `none`.
    pub fn ordering_holds(&self, margin: f64) -> Option<bool> {
        let full = self.mean_miou(AblationMode::BranchKfm)?;
        let branch = self.mean_miou(AblationMode::Branch)?;
        let none = self.mean_miou(AblationMode::None)?;
        Some(full >= branch && branch >= none && full - none >= margin)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| mode | runs | mean Acc | mean mIoU |\n|---|---|---|---|\n");
        for m in &self.modes {
            writeln!(out, "| {} | {} | {:.2} | {:.2} |", m.mode, m.runs, m.mean_acc, m.mean_miou)
                .expect("string write");
        }
        out.push_str("\n| mode | seed | Acc | mIoU |\n|---|---|---|---|\n");
        for r in &self.runs {
            let (a, m) = r.report.all.map_or((f64::NAN, f64::NAN), |s| (s.acc, s.miou));
            writeln!(out, "| {} | {} | {a:.2} | {m:.2} |", r.mode, r.seed).expect("string write");
        }
        out
    }
}

/// Trains and evaluates every `(mode, seed)` pair, writing each run under
/// `out/<mode>/seed<k>/`.
pub fn run_ablation(
    corpus: &[GroundingSample],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    eval: &EvalConfig,
    modes: &[AblationMode],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationSummary> {
    let test: Vec<GroundingSample> = corpus.iter().filter(|s| s.split == Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::EmptyInput("test split is empty".into()));
    }
    let mut runs = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let dir = out.join(mode.as_str()).join(format!("seed{seed}"));
            let model_cfg = ModelConfig {
                ablation_mode: mode,
                ..base_model.clone()
            };
            let train_cfg = TrainConfig {
                seed,
                ..base_train.clone()
            };
            let mut opts = TrainOptions::new(&dir);
            opts.eval = *eval;
            tracing::info!(%mode, seed, "ablation run");
            let outcome = train(corpus, &model_cfg, &train_cfg, &opts)?;
            let (report, preds) = evaluate_model(&outcome.model, &test, eval, opts.eval_batch_size)?;
            write_predictions(&dir.join("predictions.jsonl"), &preds)?;
            write_report(&report, &dir.join("report.json"), ReportFormat::Json)?;
            runs.push(AblationRun {
                mode,
                seed,
                report,
                checkpoint: outcome.log.final_checkpoint,
            });
        }
    }
    let summary = AblationSummary::from_runs(runs);
    let path = out.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&path, e))?;
    let path = out.join("ablation.md");
    std::fs::write(&path, summary.to_markdown()).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
