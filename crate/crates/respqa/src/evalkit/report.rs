//! Stratified metric reports, routing-utilization tables, forced-route
//! grids, and their CSV serializations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::routing::RoutingLogRecord;
use crate::synthdata::{QuestionFormat, TaskFamily};

use super::metrics::{
    discriminative_metrics, regression_metrics, DiscMetrics, MetricError, Prediction, RegMetrics,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumRow {
    pub dataset: String,
    pub format: QuestionFormat,
    pub task: String,
    pub family: TaskFamily,
    pub disc: Option<DiscMetrics>,
    pub reg: Option<RegMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FormatAggregate {
    pub format: QuestionFormat,
    pub n_datasets: usize,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub token_f1: Option<f64>,
    pub exact_match: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToleranceRow {
    pub dataset: String,
    pub task: String,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<StratumRow>,
    pub format_aggregates: Vec<FormatAggregate>,
    /// Unweighted mean over datasets of per-dataset discriminative macro-F1
    /// (each dataset pools its formats).
    pub global_disc_macro_f1: Option<f64>,
    pub global_disc_accuracy: Option<f64>,
    /// Unweighted mean over regression (dataset, task) cells of MAE.
    pub global_reg_mae: Option<f64>,
    pub tolerance: Vec<ToleranceRow>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Stratify by (dataset, format, task), compute per-stratum metrics, then
/// the macro aggregates.
pub fn build_report(preds: &[Prediction], taus: &[f64]) -> Result<MetricReport, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty("build_report"));
    }
    let mut strata: BTreeMap<(String, QuestionFormat, String), Vec<&Prediction>> = BTreeMap::new();
    for p in preds {
        strata
            .entry((p.dataset.clone(), p.format, p.task.clone()))
            .or_default()
            .push(p);
    }
    let mut rows = Vec::new();
    let mut tolerance = Vec::new();
    for ((dataset, format, task), group) in &strata {
        let family = group[0].family;
        let owned: Vec<Prediction> = group.iter().map(|p| (*p).clone()).collect();
        let (disc, reg) = match family {
            TaskFamily::Discriminative => (Some(discriminative_metrics(&owned)?), None),
            TaskFamily::Regression => {
                let r = regression_metrics(&owned, taus)?;
                tolerance.push(ToleranceRow {
                    dataset: dataset.clone(),
                    task: task.clone(),
                    curve: r.acc_at_tau.clone(),
                });
                (None, Some(r))
            }
        };
        rows.push(StratumRow {
            dataset: dataset.clone(),
            format: *format,
            task: task.clone(),
            family,
            disc,
            reg,
        });
    }

    // Per-format aggregates: macro-averaged across datasets.
    let mut format_aggregates = Vec::new();
    for format in [QuestionFormat::Sv, QuestionFormat::Oe, QuestionFormat::Mc] {
        let mut per_dataset: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
        for p in preds.iter().filter(|p| p.format == format) {
            per_dataset.entry(p.dataset.clone()).or_default().push(p.clone());
        }
        if per_dataset.is_empty() {
            continue;
        }
        let mut accs = Vec::new();
        let mut f1s = Vec::new();
        let mut tf1s = Vec::new();
        let mut ems = Vec::new();
        let mut maes = Vec::new();
        for group in per_dataset.values() {
            let disc: Vec<Prediction> = group
                .iter()
                .filter(|p| p.family == TaskFamily::Discriminative)
                .cloned()
                .collect();
            if !disc.is_empty() {
                let m = discriminative_metrics(&disc)?;
                accs.push(m.accuracy);
                f1s.push(m.macro_f1);
                tf1s.push(m.token_f1);
                ems.push(m.exact_match);
            }
            let reg: Vec<Prediction> = group
                .iter()
                .filter(|p| p.family == TaskFamily::Regression)
                .cloned()
                .collect();
            if !reg.is_empty() {
                if let Some(m) = regression_metrics(&reg, taus)?.mae {
                    maes.push(m);
                }
            }
        }
        format_aggregates.push(FormatAggregate {
            format,
            n_datasets: per_dataset.len(),
            accuracy: mean(&accs),
            macro_f1: mean(&f1s),
            token_f1: mean(&tf1s),
            exact_match: mean(&ems),
            mae: mean(&maes),
        });
    }

    // Global discriminative aggregate: per-dataset first, then across datasets.
    let mut disc_by_dataset: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.family == TaskFamily::Discriminative) {
        disc_by_dataset.entry(p.dataset.clone()).or_default().push(p.clone());
    }
    let mut ds_f1 = Vec::new();
    let mut ds_acc = Vec::new();
    for group in disc_by_dataset.values() {
        let m = discriminative_metrics(group)?;
        ds_f1.push(m.macro_f1);
        ds_acc.push(m.accuracy);
    }

    let mut reg_maes = Vec::new();
    for row in rows.iter().filter(|r| r.family == TaskFamily::Regression) {
        if let Some(m) = row.reg.as_ref().and_then(|r| r.mae) {
            reg_maes.push(m);
        }
    }

    Ok(MetricReport {
        rows,
        format_aggregates,
        global_disc_macro_f1: mean(&ds_f1),
        global_disc_accuracy: mean(&ds_acc),
        global_reg_mae: mean(&reg_maes),
        tolerance,
    })
}

// ── routing analysis ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilizationTable {
    /// Column group names ("dataset:coughset", "format:SV", "label:copd",
    /// "task:diagnosis").
    pub groups: Vec<String>,
    /// Rows: (stage, expert index) -> per-group selection fraction.
    pub rows: Vec<(String, usize, Vec<f64>)>,
}

/// Extra per-example grouping info carried by the prediction file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub example_id: String,
    pub dataset: String,
    pub format: QuestionFormat,
    pub task: String,
    pub label: Option<String>,
}

/// Per-group expert-selection fractions for both stages.
pub fn utilization_table(
    logs: &[RoutingLogRecord],
    meta: &[PredictionMeta],
) -> Result<UtilizationTable, MetricError> {
    let by_id: BTreeMap<&str, &PredictionMeta> =
        meta.iter().map(|m| (m.example_id.as_str(), m)).collect();
    let mut groups: BTreeSet<String> = BTreeSet::new();
    for m in meta {
        groups.insert(format!("dataset:{}", m.dataset));
        groups.insert(format!("format:{}", m.format.as_str()));
        groups.insert(format!("task:{}", m.task));
        if let Some(l) = &m.label {
            groups.insert(format!("label:{l}"));
        }
    }
    let groups: Vec<String> = groups.into_iter().collect();
    let gidx: BTreeMap<&str, usize> = groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();

    // (stage, expert) -> counts per group; plus totals per (stage, group).
    let mut counts: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    let mut totals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for log in logs {
        let m = by_id.get(log.example_id.as_str()).ok_or_else(|| {
            MetricError::WrongFamily(log.example_id.clone(), "covered by predictions")
        })?;
        let mut keys = vec![
            format!("dataset:{}", m.dataset),
            format!("format:{}", m.format.as_str()),
            format!("task:{}", m.task),
        ];
        if let Some(l) = &m.label {
            keys.push(format!("label:{l}"));
        }
        let row = counts
            .entry((log.stage.clone(), log.expert))
            .or_insert_with(|| vec![0.0; groups.len()]);
        for k in &keys {
            row[gidx[k.as_str()]] += 1.0;
        }
        let tot = totals
            .entry(log.stage.clone())
            .or_insert_with(|| vec![0.0; groups.len()]);
        for k in &keys {
            tot[gidx[k.as_str()]] += 1.0;
        }
    }
    let rows = counts
        .into_iter()
        .map(|((stage, expert), row)| {
            let tot = &totals[&stage];
            let fracs = row
                .iter()
                .zip(tot)
                .map(|(c, t)| if *t > 0.0 { c / t } else { 0.0 })
                .collect();
            (stage, expert, fracs)
        })
        .collect();
    Ok(UtilizationTable { groups, rows })
}

/// Forced-route grid: per (dataset, format) row, the primary metric
/// (macro-F1 for discriminative, MAE for regression) of every fixed path
/// plus the routed "Full" column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForcedGrid {
    pub paths: Vec<String>,
    pub rows: Vec<ForcedGridRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForcedGridRow {
    pub dataset: String,
    pub format: QuestionFormat,
    pub family: TaskFamily,
    pub values: Vec<Option<f64>>,
}

pub fn forced_grid(
    per_path: &BTreeMap<String, Vec<Prediction>>,
    taus: &[f64],
) -> Result<ForcedGrid, MetricError> {
    let paths: Vec<String> = per_path.keys().cloned().collect();
    let mut cells: BTreeSet<(String, QuestionFormat, TaskFamily)> = BTreeSet::new();
    for preds in per_path.values() {
        for p in preds {
            cells.insert((p.dataset.clone(), p.format, p.family));
        }
    }
    let mut rows = Vec::new();
    for (dataset, format, family) in cells {
        let mut values = Vec::with_capacity(paths.len());
        for path in &paths {
            let subset: Vec<Prediction> = per_path[path]
                .iter()
                .filter(|p| p.dataset == dataset && p.format == format)
                .cloned()
                .collect();
            if subset.is_empty() {
                values.push(None);
                continue;
            }
            let v = match family {
                TaskFamily::Discriminative => Some(discriminative_metrics(&subset)?.macro_f1),
                TaskFamily::Regression => regression_metrics(&subset, taus)?.mae,
            };
            values.push(v);
        }
        rows.push(ForcedGridRow {
            dataset,
            format,
            family,
            values,
        });
    }
    Ok(ForcedGrid { paths, rows })
}

// ── file formats ────────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, report: &MetricReport) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(
        w,
        "dataset,format,task,family,n,accuracy,macro_f1,token_f1,exact_match,unparsed_rate,accuracy_parsed_only,mae,rmse,parsing_coverage"
    )?;
    for r in &report.rows {
        let family = match r.family {
            TaskFamily::Discriminative => "discriminative",
            TaskFamily::Regression => "regression",
        };
        match (&r.disc, &r.reg) {
            (Some(d), _) => writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},,,",
                r.dataset,
                r.format.as_str(),
                r.task,
                family,
                d.n,
                d.accuracy,
                d.macro_f1,
                d.token_f1,
                d.exact_match,
                d.unparsed_rate,
                d.accuracy_parsed_only
            )?,
            (_, Some(g)) => writeln!(
                w,
                "{},{},{},{},{},,,,,,,{},{},{:.6}",
                r.dataset,
                r.format.as_str(),
                r.task,
                family,
                g.n,
                fmt_opt(g.mae),
                fmt_opt(g.rmse),
                g.parsing_coverage
            )?,
            _ => {}
        }
    }
    for a in &report.format_aggregates {
        writeln!(
            w,
            "ALL,{},macro,aggregate,{},{},{},{},{},,,{},,",
            a.format.as_str(),
            a.n_datasets,
            fmt_opt(a.accuracy),
            fmt_opt(a.macro_f1),
            fmt_opt(a.token_f1),
            fmt_opt(a.exact_match),
            fmt_opt(a.mae)
        )?;
    }
    writeln!(
        w,
        "ALL,ALL,global,aggregate,,{},{},,,,,{},,",
        fmt_opt(report.global_disc_accuracy),
        fmt_opt(report.global_disc_macro_f1),
        fmt_opt(report.global_reg_mae)
    )?;
    w.flush()
}

pub fn write_tolerance_csv(path: &Path, report: &MetricReport) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "dataset,task,tau,accuracy")?;
    for row in &report.tolerance {
        for (tau, acc) in &row.curve {
            writeln!(w, "{},{},{tau:.1},{acc:.6}", row.dataset, row.task)?;
        }
    }
    w.flush()
}

pub fn write_utilization_csv(path: &Path, table: &UtilizationTable) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "stage,expert,{}", table.groups.join(","))?;
    for (stage, expert, fracs) in &table.rows {
        let cells: Vec<String> = fracs.iter().map(|f| format!("{f:.6}")).collect();
        writeln!(w, "{stage},{expert},{}", cells.join(","))?;
    }
    w.flush()
}

pub fn write_forced_grid_csv(path: &Path, grid: &ForcedGrid) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "dataset,format,family,{}", grid.paths.join(","))?;
    for r in &grid.rows {
        let family = match r.family {
            TaskFamily::Discriminative => "discriminative",
            TaskFamily::Regression => "regression",
        };
        let cells: Vec<String> = r.values.iter().map(|v| fmt_opt(*v)).collect();
        writeln!(w, "{},{},{family},{}", r.dataset, r.format.as_str(), cells.join(","))?;
    }
    w.flush()
}

pub fn write_predictions_jsonl(path: &Path, preds: &[Prediction]) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_predictions_jsonl(path: &Path) -> io::Result<Vec<Prediction>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in io::BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(ds: &str, format: QuestionFormat, gen: &str, reference: &str) -> Prediction {
        Prediction {
            example_id: format!("{ds}-{}-{gen}", format.as_str()),
            generated_text: gen.into(),
            reference_text: reference.into(),
            format,
            family: TaskFamily::Discriminative,
            dataset: ds.into(),
            task: "diagnosis".into(),
            label_set: vec!["copd".into(), "healthy".into()],
            target: None,
            label: Some(reference.into()),
        }
    }

    #[test]
    fn global_equals_mean_of_per_dataset() {
        let preds = vec![
            pred("d1", QuestionFormat::Oe, "copd", "copd"),
            pred("d1", QuestionFormat::Oe, "healthy", "copd"),
            pred("d2", QuestionFormat::Oe, "copd", "copd"),
            pred("d2", QuestionFormat::Oe, "healthy", "healthy"),
        ];
        let report = build_report(&preds, &[0.5]).unwrap();
        let d1 = discriminative_metrics(&preds[..2].to_vec()).unwrap().macro_f1;
        let d2 = discriminative_metrics(&preds[2..].to_vec()).unwrap().macro_f1;
        let want = (d1 + d2) / 2.0;
        assert!((report.global_disc_macro_f1.unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn utilization_columns_sum_to_one_per_stage() {
        let meta = vec![
            PredictionMeta {
                example_id: "a".into(),
                dataset: "d1".into(),
                format: QuestionFormat::Sv,
                task: "diagnosis".into(),
                label: Some("copd".into()),
            },
            PredictionMeta {
                example_id: "b".into(),
                dataset: "d1".into(),
                format: QuestionFormat::Sv,
                task: "diagnosis".into(),
                label: Some("healthy".into()),
            },
        ];
        let logs = vec![
            RoutingLogRecord {
                example_id: "a".into(),
                stage: "audio".into(),
                policy: "fused".into(),
                probs: vec![1.0, 0.0],
                expert: 0,
                entropy: 0.0,
                step: 0,
                mode: "eval".into(),
            },
            RoutingLogRecord {
                example_id: "b".into(),
                stage: "audio".into(),
                policy: "fused".into(),
                probs: vec![0.0, 1.0],
                expert: 1,
                entropy: 0.0,
                step: 0,
                mode: "eval".into(),
            },
        ];
        let table = utilization_table(&logs, &meta).unwrap();
        let col = table.groups.iter().position(|g| g == "dataset:d1").unwrap();
        let sum: f64 = table
            .rows
            .iter()
            .filter(|(stage, _, _)| stage == "audio")
            .map(|(_, _, f)| f[col])
            .sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_log_for_pred_is_error() {
        let meta = vec![];
        let logs = vec![RoutingLogRecord {
            example_id: "ghost".into(),
            stage: "audio".into(),
            policy: "fused".into(),
            probs: vec![1.0, 0.0],
            expert: 0,
            entropy: 0.0,
            step: 0,
            mode: "eval".into(),
        }];
        assert!(utilization_table(&logs, &meta).is_err());
    }

    #[test]
    fn forced_grid_has_a_column_per_path() {
        let mut per_path = BTreeMap::new();
        per_path.insert("Full".to_string(), vec![pred("d1", QuestionFormat::Sv, "copd", "copd")]);
        per_path.insert("conv-L1".to_string(), vec![pred("d1", QuestionFormat::Sv, "healthy", "copd")]);
        let grid = forced_grid(&per_path, &[0.5]).unwrap();
        assert_eq!(grid.paths.len(), 2);
        assert_eq!(grid.rows.len(), 1);
        assert_eq!(grid.rows[0].values.len(), 2);
    }
}
