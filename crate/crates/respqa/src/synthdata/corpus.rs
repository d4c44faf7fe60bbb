//! Corpus assembly: subject-disjoint, label-stratified splits plus the
//! three held-out shift sets.

use thiserror::Error;

use serde::{Deserialize, Serialize};

use crate::rng::substream;

use super::questions::{
    draw_distractor, render_mc, render_oe_discriminative, render_oe_regression, render_sv,
    RenderedQuestion,
};
use super::spec::{ClassFeature, CorpusSpec, PseudoDataset, QuestionFormat, TaskFamily};
use super::spectro::{synthesize_spectrogram, RecordingContent, SynthError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error(
        "infeasible stratification: dataset {dataset} label {label} has {subjects} subjects, need at least 3 for subject-disjoint train/val/test"
    )]
    InfeasibleStratification {
        dataset: String,
        label: String,
        subjects: usize,
    },
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// One question-answer pair over one synthesized recording. Self-contained:
/// carries everything evaluation needs (label set, family, provenance tags).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub example_id: String,
    pub mel_bins: usize,
    pub frames: usize,
    /// Row-major mel grid, mel_bins x frames.
    pub spectrogram: Vec<f64>,
    pub question: String,
    pub answer: String,
    pub dataset: String,
    pub modality: String,
    pub format: QuestionFormat,
    pub family: TaskFamily,
    pub task: String,
    pub label: Option<String>,
    pub target: Option<f64>,
    pub subject_id: String,
    pub mc_options: Option<Vec<String>>,
    /// Label set for answer extraction (discriminative only).
    #[serde(default)]
    pub label_set: Vec<String>,
    /// Synthetic stand-in templates, not clinical text.
    #[serde(default = "default_template_note")]
    pub template_provenance: String,
}

fn default_template_note() -> String {
    "synthetic-template".into()
}

#[derive(Debug, Default)]
pub struct Corpus {
    pub train: Vec<QAExample>,
    pub val: Vec<QAExample>,
    pub test: Vec<QAExample>,
    pub shift_modality: Vec<QAExample>,
    pub shift_dataset: Vec<QAExample>,
    pub shift_task: Vec<QAExample>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&Vec<QAExample>> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            "shift_modality" => Some(&self.shift_modality),
            "shift_dataset" => Some(&self.shift_dataset),
            "shift_task" => Some(&self.shift_task),
            _ => None,
        }
    }

    pub const SPLIT_NAMES: [&'static str; 6] = [
        "train",
        "val",
        "test",
        "shift_modality",
        "shift_dataset",
        "shift_task",
    ];
}

/// Everything known about one recording before QA expansion.
struct Recording {
    subject: usize,
    rec: usize,
    modality: String,
    content: RecordingContent,
    label_name: Option<String>,
    target_name: Option<String>,
    target_value: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Val,
    Test,
}

/// Largest-remainder split of `n` items by the three ratios; every split
/// receives at least one item when `n >= 3`.
fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let raw = [ratios.0 * n as f64, ratios.1 * n as f64, ratios.2 * n as f64];
    let mut counts = [raw[0] as usize, raw[1] as usize, raw[2] as usize];
    let mut rem: Vec<(usize, f64)> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (i, r - counts[i] as f64))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut assigned: usize = counts.iter().sum();
    let mut k = 0;
    while assigned < n {
        counts[rem[k % 3].0] += 1;
        assigned += 1;
        k += 1;
    }
    // Guarantee non-empty splits by borrowing from the largest.
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    (counts[0], counts[1], counts[2])
}

/// Deterministic subject-to-split assignment, stratified by per-subject
/// label for discriminative datasets.
fn assign_splits(ds: &PseudoDataset, ratios: (f64, f64, f64)) -> Result<Vec<Split>, CorpusError> {
    let mut assignment = vec![Split::Train; ds.subjects];
    match ds.family {
        TaskFamily::Discriminative => {
            let n_labels = ds.labels.len();
            for (li, l) in ds.labels.iter().enumerate() {
                let members: Vec<usize> =
                    (0..ds.subjects).filter(|s| s % n_labels == li).collect();
                if members.len() < 3 {
                    return Err(CorpusError::InfeasibleStratification {
                        dataset: ds.name.clone(),
                        label: l.name.clone(),
                        subjects: members.len(),
                    });
                }
                let (tr, va, _te) = split_counts(members.len(), ratios);
                for (k, &s) in members.iter().enumerate() {
                    assignment[s] = if k < tr {
                        Split::Train
                    } else if k < tr + va {
                        Split::Val
                    } else {
                        Split::Test
                    };
                }
            }
        }
        TaskFamily::Regression => {
            if ds.subjects < 3 {
                return Err(CorpusError::InfeasibleStratification {
                    dataset: ds.name.clone(),
                    label: "(continuous)".into(),
                    subjects: ds.subjects,
                });
            }
            let (tr, va, _te) = split_counts(ds.subjects, ratios);
            for (s, slot) in assignment.iter_mut().enumerate() {
                *slot = if s < tr {
                    Split::Train
                } else if s < tr + va {
                    Split::Val
                } else {
                    Split::Test
                };
            }
        }
    }
    Ok(assignment)
}

/// Per-subject recording plan over the given modalities.
fn recordings_for_subject(ds: &PseudoDataset, subject: usize, modalities: &[String]) -> Vec<Recording> {
    let mut out = Vec::new();
    for rec in 0..ds.recordings_per_subject {
        for modality in modalities {
            match ds.family {
                TaskFamily::Discriminative => {
                    let li = subject % ds.labels.len();
                    out.push(Recording {
                        subject,
                        rec,
                        modality: modality.clone(),
                        content: RecordingContent::Label { index: li },
                        label_name: Some(ds.labels[li].name.clone()),
                        target_name: None,
                        target_value: None,
                    });
                }
                TaskFamily::Regression => {
                    let ti = rec % ds.targets.len();
                    let target = &ds.targets[ti];
                    let vi = (subject * ds.recordings_per_subject + rec) % target.grid.len();
                    let value = target.grid[vi];
                    out.push(Recording {
                        subject,
                        rec,
                        modality: modality.clone(),
                        content: RecordingContent::Target { target_index: ti, value },
                        label_name: None,
                        target_name: Some(target.name.clone()),
                        target_value: Some(value),
                    });
                }
            }
        }
    }
    out
}

fn example_from(
    spec: &CorpusSpec,
    ds: &PseudoDataset,
    r: &Recording,
    format: QuestionFormat,
    variant: &str,
    rendered: RenderedQuestion,
    task: &str,
    label_set: Vec<String>,
) -> Result<QAExample, CorpusError> {
    let grid = synthesize_spectrogram(spec, &ds.name, &r.modality, &r.content, r.subject, r.rec)?;
    let fmt = format.as_str().to_lowercase();
    Ok(QAExample {
        example_id: format!(
            "{}.s{:02}.r{}.{}.{}{}",
            ds.name, r.subject, r.rec, r.modality, fmt, variant
        ),
        mel_bins: spec.mel_bins,
        frames: spec.frames,
        spectrogram: grid,
        question: rendered.question,
        answer: rendered.answer,
        dataset: ds.name.clone(),
        modality: r.modality.clone(),
        format,
        family: ds.family,
        task: task.into(),
        label: r.label_name.clone(),
        target: r.target_value,
        subject_id: format!("{}-subj{:02}", ds.name, r.subject),
        mc_options: rendered.mc_options,
        label_set,
        template_provenance: default_template_note(),
    })
}

/// QA expansion of one recording over the dataset's offered formats.
/// Every (audio, question) variant becomes a separate example: SV yields a
/// true-label and a distractor variant, OE and MC one each.
fn expand_qa(
    spec: &CorpusSpec,
    ds: &PseudoDataset,
    r: &Recording,
    out: &mut Vec<QAExample>,
) -> Result<(), CorpusError> {
    for format in &ds.formats {
        match (ds.family, format) {
            (TaskFamily::Discriminative, QuestionFormat::Sv) => {
                let true_label = r.label_name.as_deref().unwrap();
                let sv_yes = render_sv(ds, true_label, true_label);
                out.push(example_from(
                    spec,
                    ds,
                    r,
                    QuestionFormat::Sv,
                    "0",
                    sv_yes,
                    &ds.task,
                    vec!["Yes".into(), "No".into()],
                )?);
                let mut rng = substream(
                    spec.master_seed,
                    &format!("template:{}:{}:{}:{}:svneg", ds.name, r.subject, r.rec, r.modality),
                );
                let distractor = draw_distractor(ds, true_label, &mut rng).to_string();
                let sv_no = render_sv(ds, true_label, &distractor);
                out.push(example_from(
                    spec,
                    ds,
                    r,
                    QuestionFormat::Sv,
                    "1",
                    sv_no,
                    &ds.task,
                    vec!["Yes".into(), "No".into()],
                )?);
            }
            (TaskFamily::Discriminative, QuestionFormat::Oe) => {
                let true_label = r.label_name.as_deref().unwrap();
                let rendered = render_oe_discriminative(ds, true_label);
                let labels = ds.labels.iter().map(|l| l.name.clone()).collect();
                out.push(example_from(spec, ds, r, QuestionFormat::Oe, "", rendered, &ds.task, labels)?);
            }
            (TaskFamily::Discriminative, QuestionFormat::Mc) => {
                let true_label = r.label_name.as_deref().unwrap();
                let mut rng = substream(
                    spec.master_seed,
                    &format!("template:{}:{}:{}:{}:mc", ds.name, r.subject, r.rec, r.modality),
                );
                let rendered = render_mc(ds, true_label, &mut rng);
                let labels = ds.labels.iter().map(|l| l.name.clone()).collect();
                out.push(example_from(spec, ds, r, QuestionFormat::Mc, "", rendered, &ds.task, labels)?);
            }
            (TaskFamily::Regression, QuestionFormat::Oe) => {
                let ti = match r.content {
                    RecordingContent::Target { target_index, .. } => target_index,
                    _ => unreachable!("regression recording without target"),
                };
                let rendered = render_oe_regression(&ds.targets[ti], r.target_value.unwrap());
                let task = r.target_name.clone().unwrap();
                out.push(example_from(spec, ds, r, QuestionFormat::Oe, "", rendered, &task, vec![])?);
            }
            (TaskFamily::Regression, _) => {
                // Regression is offered only in the open-ended format.
            }
        }
    }
    Ok(())
}

/// Build the full corpus: train/val/test plus the three shift sets.
/// Pure function of the spec (including its master seed).
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus, CorpusError> {
    let ratio_sum = spec.split.train + spec.split.val + spec.split.test;
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratio_sum));
    }
    let ratios = (spec.split.train, spec.split.val, spec.split.test);
    let mut corpus = Corpus::default();

    for ds in &spec.datasets {
        if ds.heldout {
            // Dataset-shift axis: never enters train/val/test.
            let modalities: Vec<String> = ds.modalities.iter().map(|m| m.name.clone()).collect();
            for subject in 0..ds.subjects {
                for r in recordings_for_subject(ds, subject, &modalities) {
                    expand_qa(spec, ds, &r, &mut corpus.shift_dataset)?;
                }
            }
            continue;
        }
        let assignment = assign_splits(ds, ratios)?;
        let modalities: Vec<String> = ds.modalities.iter().map(|m| m.name.clone()).collect();
        for subject in 0..ds.subjects {
            let bucket = match assignment[subject] {
                Split::Train => &mut corpus.train,
                Split::Val => &mut corpus.val,
                Split::Test => &mut corpus.test,
            };
            for r in recordings_for_subject(ds, subject, &modalities) {
                expand_qa(spec, ds, &r, bucket)?;
            }
        }
        // Modality-shift axis: held-out modalities on test subjects only.
        if !ds.shift_modalities.is_empty() {
            let shift_mods: Vec<String> =
                ds.shift_modalities.iter().map(|m| m.name.clone()).collect();
            for subject in 0..ds.subjects {
                if assignment[subject] == Split::Test {
                    for r in recordings_for_subject(ds, subject, &shift_mods) {
                        expand_qa(spec, ds, &r, &mut corpus.shift_modality)?;
                    }
                }
            }
        }
    }

    // Task-shift axis: an unseen verification task over test-subject
    // recordings of the source dataset.
    if let Some(ts) = &spec.task_shift {
        if let Some(ds) = spec.dataset(&ts.source_dataset) {
            if !ds.heldout {
                let assignment = assign_splits(ds, ratios)?;
                let modalities: Vec<String> =
                    ds.modalities.iter().map(|m| m.name.clone()).collect();
                for subject in 0..ds.subjects {
                    if assignment[subject] != Split::Test {
                        continue;
                    }
                    for r in recordings_for_subject(ds, subject, &modalities) {
                        let li = subject % ds.labels.len();
                        let is_tonal =
                            matches!(ds.labels[li].feature, ClassFeature::Tonal { .. });
                        let rendered = RenderedQuestion {
                            question: ts.question.clone(),
                            answer: if is_tonal { "Yes" } else { "No" }.into(),
                            mc_options: None,
                            queried_label: None,
                        };
                        let mut ex = example_from(
                            spec,
                            ds,
                            &r,
                            QuestionFormat::Sv,
                            "t",
                            rendered,
                            &ts.task,
                            vec!["Yes".into(), "No".into()],
                        )?;
                        ex.example_id = format!("{}.shiftT", ex.example_id);
                        corpus.shift_task.push(ex);
                    }
                }
            }
        }
    }

    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn default_corpus() -> (CorpusSpec, Corpus) {
        let spec = CorpusSpec::default_spec(77);
        let corpus = build_corpus(&spec).unwrap();
        (spec, corpus)
    }

    #[test]
    fn one_subject_per_class_is_infeasible() {
        let mut spec = CorpusSpec::default_spec(1);
        spec.datasets[0].subjects = 2; // 1 per class for the 2-class set
        assert!(matches!(
            build_corpus(&spec),
            Err(CorpusError::InfeasibleStratification { .. })
        ));
    }

    #[test]
    fn splits_are_subject_disjoint() {
        let (_, corpus) = default_corpus();
        let subjects = |xs: &[QAExample]| -> BTreeSet<String> {
            xs.iter().map(|e| e.subject_id.clone()).collect()
        };
        let train = subjects(&corpus.train);
        let val = subjects(&corpus.val);
        let test = subjects(&corpus.test);
        assert!(train.is_disjoint(&val));
        assert!(train.is_disjoint(&test));
        assert!(val.is_disjoint(&test));
        assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
    }

    #[test]
    fn qa_count_is_recordings_times_formats() {
        // coughset: 3 formats -> 4 QA per recording (SV yes + SV no + OE + MC).
        let (_, corpus) = default_corpus();
        let all: Vec<&QAExample> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .chain(&corpus.test)
            .filter(|e| e.dataset == "coughset")
            .collect();
        // 18 subjects x 1 recording x 1 modality = 18 recordings.
        assert_eq!(all.len(), 18 * 4);
    }

    #[test]
    fn determinism_bitwise() {
        let spec = CorpusSpec::default_spec(9);
        let a = build_corpus(&spec).unwrap();
        let b = build_corpus(&spec).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.example_id, y.example_id);
            assert_eq!(x.question, y.question);
            assert_eq!(x.answer, y.answer);
            assert!(x
                .spectrogram
                .iter()
                .zip(&y.spectrogram)
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn shift_sets_respect_holdouts() {
        let (spec, corpus) = default_corpus();
        // Dataset shift only references held-out datasets.
        let train_datasets: BTreeSet<&str> =
            corpus.train.iter().map(|e| e.dataset.as_str()).collect();
        for e in &corpus.shift_dataset {
            assert!(!train_datasets.contains(e.dataset.as_str()));
        }
        // Modality shift only uses modalities missing from training.
        let train_mods: BTreeSet<(String, String)> = corpus
            .train
            .iter()
            .map(|e| (e.dataset.clone(), e.modality.clone()))
            .collect();
        assert!(!corpus.shift_modality.is_empty());
        for e in &corpus.shift_modality {
            assert!(!train_mods.contains(&(e.dataset.clone(), e.modality.clone())));
        }
        // Task shift uses a task absent from training.
        let shift_task = spec.task_shift.as_ref().unwrap();
        assert!(corpus.train.iter().all(|e| e.task != shift_task.task));
        assert!(!corpus.shift_task.is_empty());
        // No shift example comes from a training subject.
        let train_subjects: BTreeSet<String> =
            corpus.train.iter().map(|e| e.subject_id.clone()).collect();
        for e in corpus
            .shift_modality
            .iter()
            .chain(&corpus.shift_dataset)
            .chain(&corpus.shift_task)
        {
            assert!(!train_subjects.contains(&e.subject_id));
        }
    }

    #[test]
    fn regression_examples_are_open_ended_only() {
        let (_, corpus) = default_corpus();
        for split in Corpus::SPLIT_NAMES {
            for e in corpus.split(split).unwrap() {
                if e.family == TaskFamily::Regression {
                    assert_eq!(e.format, QuestionFormat::Oe, "{}", e.example_id);
                }
            }
        }
    }

    #[test]
    fn mc_examples_embed_true_label_in_options_and_question() {
        let (_, corpus) = default_corpus();
        for e in corpus.train.iter().filter(|e| e.format == QuestionFormat::Mc) {
            let label = e.label.as_ref().unwrap();
            let options = e.mc_options.as_ref().unwrap();
            assert!(options.contains(label));
            for o in options {
                assert!(e.question.contains(o));
            }
        }
    }

    #[test]
    fn stratification_within_one_example() {
        // Per dataset and label, split sizes should match the ratios to
        // within one subject's worth of examples.
        let (spec, corpus) = default_corpus();
        for ds in spec.datasets.iter().filter(|d| {
            !d.heldout && d.family == TaskFamily::Discriminative
        }) {
            for l in &ds.labels {
                let count = |xs: &[QAExample]| {
                    xs.iter()
                        .filter(|e| e.dataset == ds.name && e.label.as_deref() == Some(&l.name))
                        .map(|e| e.subject_id.clone())
                        .collect::<BTreeSet<_>>()
                        .len() as f64
                };
                let (tr, va, te) = (count(&corpus.train), count(&corpus.val), count(&corpus.test));
                let n = tr + va + te;
                assert!(n > 0.0);
                assert!((tr - spec.split.train * n).abs() <= 1.0 + 1e-9);
                assert!((va - spec.split.val * n).abs() <= 1.0 + 1e-9);
                assert!((te - spec.split.test * n).abs() <= 1.0 + 1e-9);
            }
        }
    }
}
