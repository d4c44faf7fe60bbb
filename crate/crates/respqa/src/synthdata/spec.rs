//! Corpus specification: pseudo-datasets with planted acoustic signatures,
//! question formats, split ratios, and held-out shift axes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Discriminative,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
pub enum QuestionFormat {
    #[serde(rename = "OE")]
    Oe,
    #[serde(rename = "SV")]
    Sv,
    #[serde(rename = "MC")]
    Mc,
}

impl QuestionFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            QuestionFormat::Oe => "OE",
            QuestionFormat::Sv => "SV",
            QuestionFormat::Mc => "MC",
        }
    }
}

/// Acoustic feature planted for a class label.
///
/// `Tonal` features are sustained narrow-band ridges (long-range structure
/// that favors the attention expert); `Impulses` are sparse broadband bursts
/// (localized structure that favors the convolutional expert); `Flat` plants
/// nothing beyond the dataset signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ClassFeature {
    Tonal { band_center: f64, band_width: f64, amp: f64 },
    Impulses { count: usize, amp: f64 },
    Flat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSpec {
    pub name: String,
    pub feature: ClassFeature,
}

/// Additive time-envelope shape of a recording modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeKind {
    /// Slow sinusoidal breathing-like envelope.
    Smooth,
    /// A few sharp cough-like bumps.
    Burst,
    /// Constant offset.
    Steady,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub envelope: EnvelopeKind,
}

/// Continuous target rendered into the time envelope: the number of
/// envelope cycles over the window is `value * cycles_per_unit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTarget {
    pub name: String,
    pub unit: String,
    /// Admissible target values (a coarse grid keeps the task learnable
    /// by a character-level model).
    pub grid: Vec<f64>,
    pub cycles_per_unit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoDataset {
    pub name: String,
    pub family: TaskFamily,
    /// Which expert the planted signatures favor: "A" (impulse-like,
    /// convolution-friendly) or "B" (tonal, attention-friendly). Documented
    /// here and exploited by the specialization experiments.
    pub affinity_group: String,
    /// Task label shown in reports ("diagnosis", "severity", ...).
    pub task: String,
    #[serde(default)]
    pub labels: Vec<LabelSpec>,
    #[serde(default)]
    pub targets: Vec<RegressionTarget>,
    pub modalities: Vec<ModalitySpec>,
    /// Modalities generated only for the modality-shift split.
    #[serde(default)]
    pub shift_modalities: Vec<ModalitySpec>,
    pub formats: Vec<QuestionFormat>,
    /// Number of gaussian bumps in this dataset's mel signature.
    pub signature_bumps: usize,
    pub noise_amp: f64,
    pub subjects: usize,
    pub recordings_per_subject: usize,
    /// Entire dataset held out of training (dataset-shift axis).
    #[serde(default)]
    pub heldout: bool,
}

/// Task-shift construction: a verification question never seen in training,
/// asked over recordings of an existing dataset. The answer is derived from
/// whether the example's planted class feature is tonal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskShiftSpec {
    pub source_dataset: String,
    pub task: String,
    pub question: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub master_seed: u64,
    pub mel_bins: usize,
    pub frames: usize,
    /// Nominal duration of the analysis window in seconds.
    pub window_seconds: f64,
    pub split: SplitRatios,
    pub datasets: Vec<PseudoDataset>,
    #[serde(default)]
    pub task_shift: Option<TaskShiftSpec>,
}

fn disc(
    name: &str,
    group: &str,
    task: &str,
    labels: Vec<LabelSpec>,
    modalities: Vec<ModalitySpec>,
    shift_modalities: Vec<ModalitySpec>,
    formats: Vec<QuestionFormat>,
    subjects: usize,
    recordings_per_subject: usize,
) -> PseudoDataset {
    PseudoDataset {
        name: name.into(),
        family: TaskFamily::Discriminative,
        affinity_group: group.into(),
        task: task.into(),
        labels,
        targets: vec![],
        modalities,
        shift_modalities,
        formats,
        signature_bumps: 3,
        noise_amp: 0.05,
        subjects,
        recordings_per_subject,
        heldout: false,
    }
}

fn label(name: &str, feature: ClassFeature) -> LabelSpec {
    LabelSpec { name: name.into(), feature }
}

fn modality(name: &str, envelope: EnvelopeKind) -> ModalitySpec {
    ModalitySpec { name: name.into(), envelope }
}

impl CorpusSpec {
    /// Default corpus: five discriminative pseudo-datasets (one SV-only
    /// two-class set, two three-class SV/OE/MC sets, one two-class SV/OE/MC
    /// set, one five-level severity OE/MC set), two regression pseudo-datasets
    /// (two spirometry-like targets plus one rate target), a held-out
    /// dataset for the dataset-shift axis, held-out modalities for the
    /// modality-shift axis, and an unseen verification task for the
    /// task-shift axis. Group A sets carry impulse-like signatures, group B
    /// sets tonal signatures.
    pub fn default_spec(master_seed: u64) -> CorpusSpec {
        let tonal = |c: f64, a: f64| ClassFeature::Tonal {
            band_center: c,
            band_width: 2.2,
            amp: a,
        };
        let bursts = |n: usize, a: f64| ClassFeature::Impulses { count: n, amp: a };

        let datasets = vec![
            // SV-only two-class set (group B, tonal wheeze-like signature).
            disc(
                "breathset",
                "B",
                "asthma",
                vec![label("asthma", tonal(22.0, 1.2)), label("healthy", ClassFeature::Flat)],
                vec![modality("breathe-deep", EnvelopeKind::Smooth)],
                vec![modality("vowel", EnvelopeKind::Steady)],
                vec![QuestionFormat::Sv],
                20,
                2,
            ),
            // Three-class SV/OE/MC set (group A, burst-rate coding).
            disc(
                "coughset",
                "A",
                "diagnosis",
                vec![
                    label("healthy", ClassFeature::Flat),
                    label("symptomatic", bursts(7, 1.8)),
                    label("covid", bursts(18, 1.8)),
                ],
                vec![modality("cough", EnvelopeKind::Burst)],
                vec![],
                vec![QuestionFormat::Sv, QuestionFormat::Oe, QuestionFormat::Mc],
                18,
                1,
            ),
            // Two-class SV/OE/MC set (group A).
            disc(
                "clinicset",
                "A",
                "diagnosis",
                vec![label("urti", bursts(4, 2.0)), label("copd", bursts(18, 2.0))],
                vec![
                    modality("stetho-a", EnvelopeKind::Steady),
                    modality("stetho-b", EnvelopeKind::Smooth),
                ],
                vec![],
                vec![QuestionFormat::Sv, QuestionFormat::Oe, QuestionFormat::Mc],
                12,
                1,
            ),
            // Three-class SV/OE/MC set (group B, tonal band positions).
            disc(
                "lungset",
                "B",
                "diagnosis",
                vec![
                    label("healthy", ClassFeature::Flat),
                    label("lrti", tonal(8.0, 1.1)),
                    label("copd", tonal(18.0, 1.1)),
                ],
                vec![modality("chest", EnvelopeKind::Smooth)],
                vec![],
                vec![QuestionFormat::Sv, QuestionFormat::Oe, QuestionFormat::Mc],
                15,
                1,
            ),
            // Five-level ordinal severity set (group B): band center encodes level.
            disc(
                "severityset",
                "B",
                "severity",
                (0..5)
                    .map(|i| label(&format!("severity {i}"), tonal(6.0 + 5.0 * i as f64, 1.1)))
                    .collect(),
                vec![modality("posterior", EnvelopeKind::Steady)],
                vec![],
                vec![QuestionFormat::Oe, QuestionFormat::Mc],
                20,
                2,
            ),
            // Regression: two spirometry-like targets on one dataset.
            PseudoDataset {
                name: "spiroset".into(),
                family: TaskFamily::Regression,
                affinity_group: "A".into(),
                task: "spirometry".into(),
                labels: vec![],
                targets: vec![
                    RegressionTarget {
                        name: "fev1".into(),
                        unit: "liters".into(),
                        grid: (0..7).map(|i| 1.5 + 0.5 * i as f64).collect(),
                        cycles_per_unit: 2.0,
                    },
                    RegressionTarget {
                        name: "fvc".into(),
                        unit: "liters".into(),
                        grid: (0..9).map(|i| 2.0 + 0.5 * i as f64).collect(),
                        cycles_per_unit: 1.5,
                    },
                ],
                modalities: vec![modality("deep-breath", EnvelopeKind::Smooth)],
                shift_modalities: vec![],
                formats: vec![QuestionFormat::Oe],
                signature_bumps: 3,
                noise_amp: 0.05,
                subjects: 12,
                recordings_per_subject: 4,
                heldout: false,
            },
            // Regression: respiratory rate.
            PseudoDataset {
                name: "rateset".into(),
                family: TaskFamily::Regression,
                affinity_group: "A".into(),
                task: "respiratory-rate".into(),
                labels: vec![],
                targets: vec![RegressionTarget {
                    name: "respiratory rate".into(),
                    unit: "breaths per minute".into(),
                    grid: (0..12).map(|i| 8.0 + 2.0 * i as f64).collect(),
                    // r breaths/min over a 30 s window -> r/2 cycles.
                    cycles_per_unit: 0.5,
                }],
                modalities: vec![modality("nose-breath", EnvelopeKind::Smooth)],
                shift_modalities: vec![],
                formats: vec![QuestionFormat::Oe],
                signature_bumps: 3,
                noise_amp: 0.05,
                subjects: 12,
                recordings_per_subject: 3,
                heldout: false,
            },
            // Held-out dataset for the dataset-shift axis: a seen task
            // (covid verification) on an unseen pseudo-dataset signature.
            PseudoDataset {
                heldout: true,
                ..disc(
                    "fieldset",
                    "A",
                    "diagnosis",
                    vec![label("covid", bursts(18, 1.8)), label("healthy", ClassFeature::Flat)],
                    vec![modality("cough", EnvelopeKind::Burst)],
                    vec![],
                    vec![QuestionFormat::Sv],
                    6,
                    1,
                )
            },
        ];

        CorpusSpec {
            master_seed,
            mel_bins: 32,
            frames: 64,
            window_seconds: 30.0,
            split: SplitRatios {
                train: 0.6,
                val: 0.2,
                test: 0.2,
            },
            datasets,
            task_shift: Some(TaskShiftSpec {
                source_dataset: "lungset".into(),
                task: "wheeze-presence".into(),
                question: "Does this recording contain wheeze-like sounds?".into(),
            }),
        }
    }

    pub fn dataset(&self, name: &str) -> Option<&PseudoDataset> {
        self.datasets.iter().find(|d| d.name == name)
    }
}
