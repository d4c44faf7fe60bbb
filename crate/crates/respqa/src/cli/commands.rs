//! Command implementations behind the `respqa` binary: corpus generation,
//! training with checkpoint selection, evaluation, forced-route ablation,
//! shift evaluation, and routing reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::evalkit::{
    build_report, forced_grid, read_predictions_jsonl, utilization_table, write_forced_grid_csv,
    write_metrics_csv, write_predictions_jsonl, write_tolerance_csv, write_utilization_csv,
    Prediction, PredictionMeta,
};
use crate::model::{
    forward_generate, train_epoch, AdamW, EpochStats, ModelBundle, ModelError, StepRecord,
};
use crate::nn::checkpoint::Manifest;
use crate::nn::ModelConfig;
use crate::routing::{log as rlog, RoutingConfig, RoutingLogRecord, RoutingMode};
use crate::synthdata::{self, build_corpus, Corpus, CorpusSpec, QAExample, TaskFamily};

use super::config::ExperimentConfig;
use super::CliError;

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn data_err<E: std::fmt::Display>(what: &str) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::Data(format!("{what}: {e}"))
}

// ── generate ────────────────────────────────────────────────────────

/// Build the corpus from a spec file (or the default spec) and write the
/// six split files plus a split-summary table and a spec snapshot.
pub fn cmd_generate(
    spec_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut spec = match spec_path {
        Some(p) => synthdata::io::read_spec(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => CorpusSpec::default_spec(seed.unwrap_or(42)),
    };
    if let Some(s) = seed {
        spec.master_seed = s;
    }
    let corpus = build_corpus(&spec).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(data_err("create out dir"))?;
    synthdata::io::write_corpus(out_dir, &corpus).map_err(data_err("write corpus"))?;
    synthdata::io::write_spec(&out_dir.join("corpus_spec.json"), &spec)
        .map_err(data_err("write spec snapshot"))?;
    write_split_summary(&out_dir.join("split_summary.csv"), &corpus)
        .map_err(data_err("write summary"))?;
    Ok(())
}

/// Counts per split x dataset x format x task x label.
fn write_split_summary(path: &Path, corpus: &Corpus) -> std::io::Result<()> {
    let mut counts: BTreeMap<(String, String, String, String, String), usize> = BTreeMap::new();
    for name in Corpus::SPLIT_NAMES {
        for e in corpus.split(name).unwrap() {
            let key = (
                name.to_string(),
                e.dataset.clone(),
                e.format.as_str().to_string(),
                e.task.clone(),
                e.label.clone().unwrap_or_default(),
            );
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "split,dataset,format,task,label,count")?;
    for ((split, ds, fmt, task, label), n) in counts {
        writeln!(w, "{split},{ds},{fmt},{task},{label},{n}")?;
    }
    w.flush()
}

// ── prediction generation ───────────────────────────────────────────

fn make_prediction(example: &QAExample, text: String) -> Prediction {
    Prediction {
        example_id: example.example_id.clone(),
        generated_text: text,
        reference_text: example.answer.clone(),
        format: example.format,
        family: example.family,
        dataset: example.dataset.clone(),
        task: example.task.clone(),
        label_set: example.label_set.clone(),
        target: example.target,
        label: example.label.clone(),
    }
}

fn routing_records(
    bundle: &ModelBundle,
    routing: &crate::model::ExampleRouting,
) -> [RoutingLogRecord; 2] {
    let mode = if routing.forced { "forced" } else { "eval" };
    [
        RoutingLogRecord {
            example_id: routing.example_id.clone(),
            stage: "audio".into(),
            policy: bundle.routing_cfg.policy_audio.as_str().into(),
            probs: routing.audio.probs.clone(),
            expert: routing.audio.expert,
            entropy: routing.audio.entropy,
            step: routing.step,
            mode: mode.into(),
        },
        RoutingLogRecord {
            example_id: routing.example_id.clone(),
            stage: "lang".into(),
            policy: bundle.routing_cfg.policy_lang.as_str().into(),
            probs: routing.lang.probs.clone(),
            expert: routing.lang.expert,
            entropy: routing.lang.entropy,
            step: routing.step,
            mode: mode.into(),
        },
    ]
}

/// Sequential eval-mode generation over a slice of examples.
pub fn generate_predictions(
    bundle: &ModelBundle,
    examples: &[QAExample],
    forced: Option<(Option<usize>, Option<usize>)>,
) -> Result<(Vec<Prediction>, Vec<RoutingLogRecord>), CliError> {
    let mut preds = Vec::with_capacity(examples.len());
    let mut logs = Vec::with_capacity(examples.len() * 2);
    for e in examples {
        let (fa, fl) = forced.unwrap_or((None, None));
        let (text, routing) = forward_generate(bundle, e, fa, fl)?;
        preds.push(make_prediction(e, text));
        logs.extend(routing_records(bundle, &routing));
    }
    Ok((preds, logs))
}

/// Worker-pool generation: each thread restores its own bundle from the
/// checkpoint, evaluates a round-robin shard, and results merge in
/// example-id order, so output is identical across pool sizes.
pub fn generate_predictions_parallel(
    checkpoint: &Path,
    examples: &[QAExample],
    workers: usize,
    forced: Option<(Option<usize>, Option<usize>)>,
) -> Result<(Vec<Prediction>, Vec<RoutingLogRecord>), CliError> {
    let workers = workers.max(1);
    if workers == 1 {
        let (bundle, _) = load_bundle(checkpoint)?;
        let (mut preds, mut logs) = generate_predictions(&bundle, examples, forced)?;
        sort_outputs(&mut preds, &mut logs);
        return Ok((preds, logs));
    }
    let shards: Vec<Vec<QAExample>> = (0..workers)
        .map(|w| {
            examples
                .iter()
                .enumerate()
                .filter(|(i, _)| i % workers == w)
                .map(|(_, e)| e.clone())
                .collect()
        })
        .collect();
    let results: Vec<Result<(Vec<Prediction>, Vec<RoutingLogRecord>), CliError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = shards
                .iter()
                .map(|shard| {
                    scope.spawn(move || {
                        let (bundle, _) = load_bundle(checkpoint)?;
                        generate_predictions(&bundle, shard, forced)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
    let mut preds = Vec::with_capacity(examples.len());
    let mut logs = Vec::with_capacity(examples.len() * 2);
    for r in results {
        let (p, l) = r?;
        preds.extend(p);
        logs.extend(l);
    }
    sort_outputs(&mut preds, &mut logs);
    Ok((preds, logs))
}

fn sort_outputs(preds: &mut [Prediction], logs: &mut [RoutingLogRecord]) {
    preds.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    logs.sort_by(|a, b| (&a.example_id, &a.stage).cmp(&(&b.example_id, &b.stage)));
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub primary: &'static str,
    pub epochs_run: usize,
}

struct EpochRow {
    stats: EpochStats,
    val_metric: f64,
}

fn write_epoch_stats(path: &Path, rows: &[EpochRow]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    if rows.is_empty() {
        return w.flush();
    }
    let na = rows[0].stats.usage_audio.len();
    let nl = rows[0].stats.usage_lang.len();
    let audio_cols: Vec<String> = (0..na).map(|i| format!("usage_audio_{i}")).collect();
    let lang_cols: Vec<String> = (0..nl).map(|i| format!("usage_lang_{i}")).collect();
    writeln!(
        w,
        "epoch,main,lb_audio,lb_lang,ent_audio,ent_lang,total,{},{},val_primary_metric",
        audio_cols.join(","),
        lang_cols.join(",")
    )?;
    for r in rows {
        let m = &r.stats.mean;
        let ua: Vec<String> = r.stats.usage_audio.iter().map(|v| format!("{v:.6}")).collect();
        let ul: Vec<String> = r.stats.usage_lang.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
            r.stats.epoch,
            m.main,
            m.lb_audio,
            m.lb_lang,
            m.ent_audio,
            m.ent_lang,
            m.total,
            ua.join(","),
            ul.join(","),
            r.val_metric
        )?;
    }
    w.flush()
}

/// Validation primary metric: macro-F1 when the corpus has any
/// discriminative examples (higher is better), MAE otherwise (lower is
/// better). Returns (value, higher_is_better, name).
fn val_primary(preds: &[Prediction]) -> Result<(f64, bool, &'static str), CliError> {
    let has_disc = preds.iter().any(|p| p.family == TaskFamily::Discriminative);
    let report = build_report(preds, &crate::evalkit::default_taus())
        .map_err(|e| CliError::Data(e.to_string()))?;
    if has_disc {
        Ok((
            report.global_disc_macro_f1.unwrap_or(0.0),
            true,
            "macro_f1",
        ))
    } else {
        Ok((
            report.global_reg_mae.unwrap_or(f64::INFINITY),
            false,
            "mae",
        ))
    }
}

fn checkpoint_meta(
    config: &ExperimentConfig,
    epoch: usize,
    val_metric: f64,
    primary: &str,
) -> BTreeMap<String, serde_json::Value> {
    let mut meta = BTreeMap::new();
    meta.insert("model_config".into(), serde_json::to_value(&config.model).unwrap());
    meta.insert("routing_config".into(), serde_json::to_value(&config.routing).unwrap());
    meta.insert("seed".into(), serde_json::json!(config.seed));
    meta.insert("epoch".into(), serde_json::json!(epoch));
    meta.insert("val_metric".into(), serde_json::json!(val_metric));
    meta.insert("primary_metric".into(), serde_json::json!(primary));
    meta
}

/// Rebuild a bundle from a checkpoint directory (configs and seed come
/// from the manifest metadata).
pub fn load_bundle(dir: &Path) -> Result<(ModelBundle, Manifest), CliError> {
    let manifest = crate::nn::checkpoint::read_manifest(dir)
        .map_err(|e| CliError::Data(format!("read checkpoint {}: {e}", dir.display())))?;
    let model: ModelConfig = serde_json::from_value(
        manifest.meta.get("model_config").cloned().ok_or_else(|| {
            CliError::Config("checkpoint manifest missing model_config".into())
        })?,
    )
    .map_err(|e| CliError::Config(format!("bad model_config in checkpoint: {e}")))?;
    let routing: RoutingConfig = serde_json::from_value(
        manifest.meta.get("routing_config").cloned().ok_or_else(|| {
            CliError::Config("checkpoint manifest missing routing_config".into())
        })?,
    )
    .map_err(|e| CliError::Config(format!("bad routing_config in checkpoint: {e}")))?;
    let seed = manifest
        .meta
        .get("seed")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CliError::Config("checkpoint manifest missing seed".into()))?;
    let bundle = ModelBundle::new(model, routing, seed);
    bundle
        .load_checkpoint(dir)
        .map_err(|e| CliError::Config(format!("checkpoint mismatch: {e}")))?;
    Ok((bundle, manifest))
}

/// Train with early stopping on the validation primary metric; write the
/// best checkpoint, per-epoch stats, and the train-mode routing log.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutcome, CliError> {
    let train = read_split_required(&config.corpus_dir, "train")?;
    let val = read_split_required(&config.corpus_dir, "val")?;
    fs::create_dir_all(&config.out_dir).map_err(data_err("create out dir"))?;

    let mut routing_cfg = config.routing.clone();
    routing_cfg.mode = RoutingMode::Train;
    let bundle = ModelBundle::new(config.model.clone(), routing_cfg, config.seed);
    let trainable = bundle.trainable_parameters();
    let mut opt = AdamW::new(&trainable);

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut train_logs: Vec<RoutingLogRecord> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut primary_name = "macro_f1";
    let mut stale = 0usize;
    let ckpt_dir = config.out_dir.join("checkpoint_best");

    for epoch in 0..config.optimizer.max_epochs {
        let mut observer = |record: &StepRecord| {
            for r in &record.routing {
                let recs = routing_records(&bundle, r);
                for mut rec in recs {
                    rec.mode = "train".into();
                    train_logs.push(rec);
                }
            }
        };
        let stats = train_epoch(
            &bundle,
            &mut opt,
            &trainable,
            &train,
            &config.optimizer,
            epoch,
            &mut observer,
        )?;

        let (val_preds, _) = generate_predictions(&bundle, &val, None)?;
        let (metric, higher_better, name) = val_primary(&val_preds)?;
        primary_name = name;
        rows.push(EpochRow { stats, val_metric: metric });

        let improved = match best {
            None => true,
            Some((_, b)) => {
                if higher_better {
                    metric > b
                } else {
                    metric < b
                }
            }
        };
        if improved {
            best = Some((epoch, metric));
            stale = 0;
            bundle
                .save_checkpoint(&ckpt_dir, checkpoint_meta(config, epoch, metric, primary_name))
                .map_err(|e| CliError::Data(format!("save checkpoint: {e}")))?;
        } else {
            stale += 1;
            if stale > config.optimizer.patience {
                break;
            }
        }
    }

    write_epoch_stats(&config.out_dir.join("epoch_stats.csv"), &rows)
        .map_err(data_err("write epoch stats"))?;
    rlog::write_jsonl(&config.out_dir.join("routing_log.jsonl"), &train_logs)
        .map_err(data_err("write routing log"))?;
    config.save(&config.out_dir.join("config_snapshot.json"))?;

    let (best_epoch, best_metric) = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best_epoch,
        best_metric,
        primary: primary_name,
        epochs_run: rows.len(),
    })
}

fn read_split_required(dir: &Path, name: &str) -> Result<Vec<QAExample>, CliError> {
    let examples = synthdata::io::read_split(dir, name)
        .map_err(|e| CliError::Data(format!("read split {name}: {e}")))?;
    if examples.is_empty() {
        return Err(CliError::Data(format!("split {name} is empty")));
    }
    Ok(examples)
}

// ── evaluate ────────────────────────────────────────────────────────

/// Generate on a split and write predictions, routing log, metrics,
/// tolerance curves, and the routing heatmap.
pub fn cmd_evaluate(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: &str,
    taus: &[f64],
    out_dir: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let examples = read_split_required(corpus_dir, split)?;
    let (preds, logs) = generate_predictions_parallel(checkpoint, &examples, workers, None)?;
    let report = build_report(&preds, taus).map_err(|e| CliError::Data(e.to_string()))?;
    let meta: Vec<PredictionMeta> = preds
        .iter()
        .map(|p| PredictionMeta {
            example_id: p.example_id.clone(),
            dataset: p.dataset.clone(),
            format: p.format,
            task: p.task.clone(),
            label: p.label.clone(),
        })
        .collect();
    let table = utilization_table(&logs, &meta).map_err(|e| CliError::Data(e.to_string()))?;

    fs::create_dir_all(out_dir).map_err(data_err("create out dir"))?;
    write_predictions_jsonl(&out_dir.join("predictions.jsonl"), &preds)
        .map_err(data_err("write predictions"))?;
    rlog::write_jsonl(&out_dir.join("routing_log.jsonl"), &logs)
        .map_err(data_err("write routing log"))?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &report).map_err(data_err("write metrics"))?;
    write_tolerance_csv(&out_dir.join("tolerance_curve.csv"), &report)
        .map_err(data_err("write tolerance"))?;
    write_utilization_csv(&out_dir.join("routing_heatmap.csv"), &table)
        .map_err(data_err("write heatmap"))?;
    Ok(())
}

// ── forced-route ────────────────────────────────────────────────────

/// Expert kind + adapter path name, e.g. "conv-L1".
pub fn path_names(bundle: &ModelBundle) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for (a, expert) in bundle.audio.experts.iter().enumerate() {
        for l in 0..bundle.lora.n_adapters() {
            out.push((format!("{}-L{}", expert.kind(), l + 1), a, l));
        }
    }
    out
}

/// Evaluate every fixed (audio expert x adapter) path plus the routed model
/// and write the grid.
pub fn cmd_forced_route(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: &str,
    taus: &[f64],
    out_dir: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let examples = read_split_required(corpus_dir, split)?;
    let (bundle, _) = load_bundle(checkpoint)?;
    let mut per_path: BTreeMap<String, Vec<Prediction>> = BTreeMap::new();
    for (name, a, l) in path_names(&bundle) {
        let (preds, _) =
            generate_predictions_parallel(checkpoint, &examples, workers, Some((Some(a), Some(l))))?;
        per_path.insert(name, preds);
    }
    let (full, _) = generate_predictions_parallel(checkpoint, &examples, workers, None)?;
    per_path.insert("Full".into(), full);
    let grid = forced_grid(&per_path, taus).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(data_err("create out dir"))?;
    write_forced_grid_csv(&out_dir.join("forced_grid.csv"), &grid)
        .map_err(data_err("write forced grid"))?;
    Ok(())
}

// ── shift-eval ──────────────────────────────────────────────────────

/// Accuracy and macro-F1 per (shift axis, dataset, task) over the three
/// held-out shift splits.
pub fn cmd_shift_eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<(), CliError> {
    let axes = [
        ("dM", "shift_modality"),
        ("dD", "shift_dataset"),
        ("dT", "shift_task"),
    ];
    let mut rows: Vec<(String, String, String, usize, f64, f64)> = Vec::new();
    for (axis, split) in axes {
        let examples = read_split_required(corpus_dir, split)
            .map_err(|_| CliError::Data(format!("missing shift split {split}")))?;
        let (preds, _) = generate_predictions_parallel(checkpoint, &examples, workers, None)?;
        let mut cells: BTreeSet<(String, String)> = BTreeSet::new();
        for p in &preds {
            cells.insert((p.dataset.clone(), p.task.clone()));
        }
        for (dataset, task) in cells {
            let subset: Vec<Prediction> = preds
                .iter()
                .filter(|p| {
                    p.dataset == dataset
                        && p.task == task
                        && p.family == TaskFamily::Discriminative
                })
                .cloned()
                .collect();
            if subset.is_empty() {
                continue;
            }
            let m = crate::evalkit::discriminative_metrics(&subset)
                .map_err(|e| CliError::Data(e.to_string()))?;
            rows.push((
                axis.to_string(),
                dataset,
                task,
                m.n,
                m.accuracy,
                m.macro_f1,
            ));
        }
    }
    fs::create_dir_all(out_dir).map_err(data_err("create out dir"))?;
    let path = out_dir.join("shift_report.csv");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(data_err("create shift report"))?);
    writeln!(w, "shift,dataset,task,n,accuracy,macro_f1").map_err(data_err("write"))?;
    for (axis, ds, task, n, acc, f1) in rows {
        writeln!(w, "{axis},{ds},{task},{n},{acc:.6},{f1:.6}").map_err(data_err("write"))?;
    }
    w.flush().map_err(data_err("flush"))?;
    Ok(())
}

// ── route-report ────────────────────────────────────────────────────

/// Rebuild the routing heatmap from existing prediction and log files.
pub fn cmd_route_report(
    predictions: &Path,
    routing_log: &Path,
    out_dir: &Path,
) -> Result<(), CliError> {
    let preds = read_predictions_jsonl(predictions)
        .map_err(|e| CliError::Data(format!("read predictions: {e}")))?;
    let logs = rlog::read_jsonl(routing_log)
        .map_err(|e| CliError::Data(format!("read routing log: {e}")))?;
    let meta: Vec<PredictionMeta> = preds
        .iter()
        .map(|p| PredictionMeta {
            example_id: p.example_id.clone(),
            dataset: p.dataset.clone(),
            format: p.format,
            task: p.task.clone(),
            label: p.label.clone(),
        })
        .collect();
    let table = utilization_table(&logs, &meta).map_err(|e| CliError::Data(e.to_string()))?;
    fs::create_dir_all(out_dir).map_err(data_err("create out dir"))?;
    write_utilization_csv(&out_dir.join("routing_heatmap.csv"), &table)
        .map_err(data_err("write heatmap"))?;
    Ok(())
}

/// Parse a `--taus` flag value ("0.5,1.0,2.0") or fall back to the default
/// grid.
pub fn parse_taus(taus: Option<&str>) -> Result<Vec<f64>, CliError> {
    match taus {
        None => Ok(crate::evalkit::default_taus()),
        Some(s) => {
            let mut out = Vec::new();
            for part in s.split(',') {
                let v: f64 = part
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad tau value {part:?}")))?;
                out.push(v);
            }
            if out.windows(2).any(|w| w[0] > w[1]) {
                return Err(CliError::Config("taus must be sorted ascending".into()));
            }
            Ok(out)
        }
    }
}

/// Stable path used by several commands to agree on an output root.
pub fn default_out(base: &Path, sub: &str) -> PathBuf {
    base.join(sub)
}
