//! CSV emission and the run log. Reports are plain files; figures are made
//! elsewhere from these.

use super::cv::{BenchmarkReport, FoldResult, MeanStd, ModelSummary, WilcoxonRow};
use crate::error::{Error, Result};
use crate::fusion::write_attention_csv;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// `folds.csv`: one row per (model, seed, fold).
pub fn write_folds_csv(path: &Path, results: &[FoldResult]) -> Result<()> {
    let mut out = String::from("model,seed,fold,n_test,accuracy,weighted_f1,macro_f1,auc,best_epoch\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.model,
            r.seed,
            r.fold,
            r.truth.len(),
            r.metrics.accuracy,
            r.metrics.weighted_f1,
            r.metrics.macro_f1,
            r.metrics.auc,
            r.best_epoch
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reduced view of one `folds.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldCsvRow {
    pub model: String,
    pub seed: u64,
    pub fold: usize,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub auc: f64,
}

pub fn read_folds_csv(path: &Path) -> Result<Vec<FoldCsvRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 9 {
            return Err(Error::format(format!("{}:{}: expected 9 fields", path.display(), lineno + 1)));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::format(format!("{}:{}: bad {what} {s:?}", path.display(), lineno + 1)))
        };
        rows.push(FoldCsvRow {
            model: fields[0].to_string(),
            seed: fields[1]
                .parse()
                .map_err(|_| Error::format(format!("{}:{}: bad seed", path.display(), lineno + 1)))?,
            fold: fields[2]
                .parse()
                .map_err(|_| Error::format(format!("{}:{}: bad fold", path.display(), lineno + 1)))?,
            accuracy: parse_f(fields[4], "accuracy")?,
            weighted_f1: parse_f(fields[5], "weighted_f1")?,
            macro_f1: parse_f(fields[6], "macro_f1")?,
            auc: parse_f(fields[7], "auc")?,
        });
    }
    Ok(rows)
}

/// `report.csv`: per-model mean and std (over per-seed means) per metric.
pub fn write_report_csv(path: &Path, summaries: &[ModelSummary]) -> Result<()> {
    let mut out = String::from(
        "model,accuracy_mean,accuracy_std,weighted_f1_mean,weighted_f1_std,macro_f1_mean,macro_f1_std,auc_mean,auc_std,parameter_count\n",
    );
    for s in summaries {
        let cell = |m: &MeanStd| format!("{},{}", m.mean, m.std);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.model,
            cell(&s.accuracy),
            cell(&s.weighted_f1),
            cell(&s.macro_f1),
            cell(&s.auc),
            s.parameter_count
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// `wilcoxon.csv`: paired one-sided tests of the reference model.
pub fn write_wilcoxon_csv(path: &Path, rows: &[WilcoxonRow]) -> Result<()> {
    let mut out = String::from("reference,baseline,metric,n_nonzero,w_plus,p_one_sided,degenerate\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.reference,
            r.baseline,
            r.metric,
            r.result.n_nonzero,
            r.result.w_plus,
            r.result.p_one_sided,
            r.result.degenerate
        )
        .unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// `history/<model>_s<seed>_f<fold>.csv`: per-epoch training traces.
pub fn write_histories(dir: &Path, results: &[FoldResult]) -> Result<()> {
    let hdir = dir.join("history");
    fs::create_dir_all(&hdir)?;
    for r in results {
        let mut out = String::from("epoch,lr,train_loss,val_loss,is_best\n");
        for e in &r.history {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss, e.is_best).unwrap();
        }
        fs::write(hdir.join(format!("{}_s{}_f{}.csv", r.model, r.seed, r.fold)), out)?;
    }
    Ok(())
}

/// `epoch,loss` rows (pretraining curves).
pub fn write_loss_curve_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{l}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write the whole benchmark bundle under `dir`.
pub fn write_benchmark(dir: &Path, report: &BenchmarkReport, log_lines: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_folds_csv(&dir.join("folds.csv"), &report.fold_results)?;
    write_report_csv(&dir.join("report.csv"), &report.summaries)?;
    write_wilcoxon_csv(&dir.join("wilcoxon.csv"), &report.wilcoxon)?;
    write_histories(dir, &report.fold_results)?;
    if let Some(att) = &report.attention {
        write_attention_csv(&dir.join("attention_by_type.csv"), att)?;
    }
    let mut log = String::new();
    for line in log_lines {
        writeln!(log, "{line}").unwrap();
    }
    writeln!(log, "seeds={:?}", report.seeds).unwrap();
    writeln!(log, "k_folds={}", report.k_folds).unwrap();
    for s in &report.summaries {
        writeln!(
            log,
            "model={} parameters={} accuracy={:.4}+/-{:.4} auc={:.4}+/-{:.4}",
            s.model, s.parameter_count, s.accuracy.mean, s.accuracy.std, s.auc.mean, s.auc.std
        )
        .unwrap();
    }
    for w in &report.wilcoxon {
        writeln!(
            log,
            "wilcoxon {} > {} on {}: W+={} p={}",
            w.reference, w.baseline, w.metric, w.result.w_plus, w.result.p_one_sided
        )
        .unwrap();
    }
    fs::write(dir.join("run.log"), log)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::cv::seed_level_mean_std;
    use crate::eval::metrics::compute_metrics;
    use crate::training::EpochRecord;

    fn fold(model: &str, seed: u64, fold_no: usize, acc_bias: f64) -> FoldResult {
        let truth = vec![0, 1, 2, 0];
        let pred = if acc_bias > 0.5 { truth.clone() } else { vec![0, 0, 0, 0] };
        let probs: Vec<[f64; 3]> = truth
            .iter()
            .map(|&y| {
                let mut p = [0.1, 0.1, 0.1];
                p[y] = 0.8;
                p
            })
            .collect();
        FoldResult {
            model: model.to_string(),
            seed,
            fold: fold_no,
            patient_ids: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            truth: truth.clone(),
            pred: pred.clone(),
            probs: probs.clone(),
            metrics: compute_metrics(&truth, &pred, &probs).unwrap(),
            history: vec![EpochRecord { epoch: 0, lr: 1e-3, train_loss: 1.0, val_loss: 0.9, is_best: true }],
            best_epoch: 0,
        }
    }

    #[test]
    fn folds_csv_round_trips_and_matches_summary() {
        let dir = tempfile::tempdir().unwrap();
        let results: Vec<FoldResult> = (0..6)
            .map(|i| fold("m", (i / 3) as u64, i % 3, if i % 2 == 0 { 1.0 } else { 0.0 }))
            .collect();
        let path = dir.path().join("folds.csv");
        write_folds_csv(&path, &results).unwrap();
        let rows = read_folds_csv(&path).unwrap();
        assert_eq!(rows.len(), 6);
        // summary recomputable from the emitted CSV
        let emitted = seed_level_mean_std(&results, |m| m.accuracy);
        let by_seed = |seed: u64| -> f64 {
            let v: Vec<f64> = rows.iter().filter(|r| r.seed == seed).map(|r| r.accuracy).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let means = [by_seed(0), by_seed(1)];
        let mean = (means[0] + means[1]) / 2.0;
        assert!((emitted.mean - mean).abs() < 1e-12);
    }
}
