//! Deterministic synthetic QA corpus: pseudo-datasets with planted acoustic
//! signatures, three question formats, discriminative and regression task
//! families, subject-independent stratified splits, and held-out shift sets.

pub mod corpus;
pub mod io;
pub mod questions;
pub mod spec;
pub mod spectro;

pub use corpus::{build_corpus, Corpus, CorpusError, QAExample};
pub use spec::{
    ClassFeature, CorpusSpec, EnvelopeKind, LabelSpec, ModalitySpec, PseudoDataset,
    QuestionFormat, RegressionTarget, SplitRatios, TaskFamily, TaskShiftSpec,
};
pub use spectro::{count_envelope_peaks, synthesize_spectrogram, RecordingContent, SynthError};
