//! Markdown run/sweep summaries assembled from artifacts on disk.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sweep::{emit_table, load_results, select_best_per_arch, CellStatus, RESULTS_FILE};
use crate::train::{TrainResult, CURVE_FILE, RESULT_FILE, SNAPSHOT_FILE};

/// Render a markdown summary for either a sweep directory or a single run
/// directory. Fails with "no runs found" when the directory holds neither.
pub fn render_report(dir: &Path) -> Result<String> {
    if dir.join(RESULTS_FILE).exists() {
        render_sweep_report(dir)
    } else if dir.join(RESULT_FILE).exists() || dir.join(CURVE_FILE).exists() {
        render_run_report(dir)
    } else {
        Err(Error::InvalidConfig(format!(
            "no runs found in {}",
            dir.display()
        )))
    }
}

fn render_sweep_report(dir: &Path) -> Result<String> {
    let results = load_results(dir)?;
    let mut out = String::new();
    let _ = writeln!(out, "# Sweep summary\n");
    let done = results
        .iter()
        .filter(|r| r.status == CellStatus::Done)
        .count();
    let failed = results
        .iter()
        .filter(|r| r.status == CellStatus::Failed)
        .count();
    let _ = writeln!(
        out,
        "{} cells: {} done, {} failed.\n",
        results.len(),
        done,
        failed
    );

    if done > 0 {
        let (_, txt) = emit_table(&results)?;
        let _ = writeln!(out, "## Best validation accuracy per cell\n");
        let _ = writeln!(out, "```text\n{txt}```\n");

        let _ = writeln!(out, "## Best cell per architecture\n");
        let _ = writeln!(out, "| architecture | init | scheduler | lr | best val acc | best epoch |");
        let _ = writeln!(out, "|---|---|---|---|---|---|");
        for cell in select_best_per_arch(&results) {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.3} | {} |",
                cell.key.arch.name(),
                cell.key.init.name(),
                cell.key.scheduler.name(),
                crate::sweep::format_lr(cell.key.lr),
                cell.best_val_accuracy.unwrap_or(f64::NAN),
                cell.best_epoch.map(|e| e.to_string()).unwrap_or_default()
            );
        }
        let _ = writeln!(out, "\n## Learning curves\n");
        for r in &results {
            if r.status == CellStatus::Done {
                let _ = writeln!(
                    out,
                    "- `{}`: [{}]({})",
                    r.key,
                    CURVE_FILE,
                    r.run_dir.join(CURVE_FILE).display()
                );
            }
        }
    }
    if failed > 0 {
        let _ = writeln!(out, "\n## Failures\n");
        for r in &results {
            if r.status == CellStatus::Failed {
                let _ = writeln!(
                    out,
                    "- `{}`: {}",
                    r.key,
                    r.message.as_deref().unwrap_or("unknown error")
                );
            }
        }
    }
    Ok(out)
}

fn render_run_report(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# Run summary\n");
    if let Ok(text) = std::fs::read_to_string(dir.join(RESULT_FILE)) {
        let result: TrainResult = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: dir.join(RESULT_FILE),
            reason: e.to_string(),
        })?;
        let _ = writeln!(
            out,
            "Best validation accuracy **{:.3}** at epoch {} over {} epochs{}; wall time {:.1}s.\n",
            result.best_val_accuracy,
            result.best_epoch,
            result.curve.len(),
            if result.stopped_early {
                " (stopped early)"
            } else {
                ""
            },
            result.wall_time_secs
        );
        let _ = writeln!(out, "| epoch | train loss | val loss | val acc | lr |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        for r in &result.curve {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:.3} | {:.2e} |",
                r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr
            );
        }
        let _ = writeln!(out, "\nBest checkpoint: `{}`", result.best_checkpoint.display());
    } else {
        let _ = writeln!(out, "Run in progress (no result yet).");
    }
    let _ = writeln!(out, "\nArtifacts: [{CURVE_FILE}]({}), [{SNAPSHOT_FILE}]({})",
        dir.join(CURVE_FILE).display(),
        dir.join(SNAPSHOT_FILE).display()
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_reports_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        match render_report(dir.path()) {
            Err(Error::InvalidConfig(msg)) => assert!(msg.contains("no runs found")),
            other => panic!("expected no-runs error, got {other:?}"),
        }
    }
}
