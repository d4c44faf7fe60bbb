//! Mel-grid synthesis with planted signatures.
//!
//! A spectrogram is the sum of: the dataset's band-energy template, the
//! class feature (tonal ridge, sparse impulses, or nothing), the modality
//! time envelope, a per-subject offset, and seeded noise. Regression
//! recordings replace the modality envelope with a periodic envelope whose
//! cycle count encodes the target value.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::nn::init::normal_sample;
use crate::rng::substream;

use super::spec::{ClassFeature, CorpusSpec, EnvelopeKind, PseudoDataset};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown dataset tag {0}")]
    UnknownDataset(String),
    #[error("unknown modality tag {0} for dataset {1}")]
    UnknownModality(String, String),
    #[error("unknown label {0} for dataset {1}")]
    UnknownLabel(String, String),
    #[error("unknown target {0} for dataset {1}")]
    UnknownTarget(String, String),
}

/// What a recording encodes: a class label or a continuous target.
#[derive(Debug, Clone)]
pub enum RecordingContent {
    Label { index: usize },
    Target { target_index: usize, value: f64 },
}

/// Dataset signature: a fixed sum of gaussian bumps over the mel axis.
pub(crate) fn band_template(spec: &CorpusSpec, ds: &PseudoDataset) -> Vec<f64> {
    let mut rng = substream(spec.master_seed, &format!("signature:{}", ds.name));
    let m = spec.mel_bins as f64;
    let mut profile = vec![0.0; spec.mel_bins];
    for _ in 0..ds.signature_bumps {
        let center: f64 = rng.gen_range(2.0..m - 2.0);
        let width: f64 = rng.gen_range(1.5..4.0);
        let amp: f64 = rng.gen_range(0.3..0.7);
        for (i, v) in profile.iter_mut().enumerate() {
            let d = (i as f64 - center) / width;
            *v += amp * (-0.5 * d * d).exp();
        }
    }
    profile
}

/// Per-subject constant offset plus a slight mel tilt.
pub(crate) fn subject_offset(spec: &CorpusSpec, ds: &PseudoDataset, subject: usize) -> Vec<f64> {
    let mut rng = substream(spec.master_seed, &format!("subject:{}:{subject}", ds.name));
    let base: f64 = rng.gen_range(-0.10..0.10);
    let tilt: f64 = rng.gen_range(-0.003..0.003);
    (0..spec.mel_bins).map(|m| base + tilt * m as f64).collect()
}

/// Modality time envelope (discriminative recordings only).
pub(crate) fn modality_envelope(kind: EnvelopeKind, frames: usize) -> Vec<f64> {
    let t = frames as f64;
    match kind {
        EnvelopeKind::Smooth => (0..frames)
            .map(|i| 0.35 * 0.5 * (1.0 + (2.0 * std::f64::consts::PI * 2.5 * i as f64 / t).sin()))
            .collect(),
        EnvelopeKind::Burst => (0..frames)
            .map(|i| {
                [0.2, 0.5, 0.8]
                    .iter()
                    .map(|c| {
                        let d = (i as f64 - c * t) / 1.5;
                        0.5 * (-0.5 * d * d).exp()
                    })
                    .sum()
            })
            .collect(),
        EnvelopeKind::Steady => vec![0.3; frames],
    }
}

/// Periodic envelope carrying a regression target: `cycles` full periods
/// across the window, peaks countable by a local-maximum scan.
pub(crate) fn target_envelope(cycles: f64, frames: usize) -> Vec<f64> {
    let t = frames as f64;
    (0..frames)
        .map(|i| 0.9 * 0.5 * (1.0 - (2.0 * std::f64::consts::PI * cycles * i as f64 / t).cos()))
        .collect()
}

/// Synthesize one mel grid (row-major, mel_bins x frames).
pub fn synthesize_spectrogram(
    spec: &CorpusSpec,
    dataset: &str,
    modality: &str,
    content: &RecordingContent,
    subject: usize,
    recording: usize,
) -> Result<Vec<f64>, SynthError> {
    let ds = spec
        .dataset(dataset)
        .ok_or_else(|| SynthError::UnknownDataset(dataset.into()))?;
    let known_modality = ds
        .modalities
        .iter()
        .chain(&ds.shift_modalities)
        .find(|mo| mo.name == modality)
        .ok_or_else(|| SynthError::UnknownModality(modality.into(), dataset.into()))?;

    let (m, t) = (spec.mel_bins, spec.frames);
    let template = band_template(spec, ds);
    let offset = subject_offset(spec, ds, subject);
    let mut grid = vec![0.0; m * t];
    for mi in 0..m {
        for ti in 0..t {
            grid[mi * t + ti] = template[mi] + offset[mi];
        }
    }

    let mut rec_rng = substream(
        spec.master_seed,
        &format!("recording:{}:{subject}:{recording}:{modality}", ds.name),
    );

    match content {
        RecordingContent::Label { index } => {
            let label = ds.labels.get(*index).ok_or_else(|| {
                SynthError::UnknownLabel(format!("#{index}"), dataset.into())
            })?;
            match &label.feature {
                ClassFeature::Tonal {
                    band_center,
                    band_width,
                    amp,
                } => {
                    for mi in 0..m {
                        let d = (mi as f64 - band_center) / band_width;
                        let ridge = amp * (-0.5 * d * d).exp();
                        for ti in 0..t {
                            grid[mi * t + ti] += ridge;
                        }
                    }
                }
                ClassFeature::Impulses { count, amp } => {
                    // Broadband bursts with a low-mel emphasis so their
                    // mel profile is not confusable with the flat
                    // per-subject offset.
                    let mut frames_pool: Vec<usize> = (0..t).collect();
                    frames_pool.shuffle(&mut rec_rng);
                    for &ti in frames_pool.iter().take(*count) {
                        for mi in 0..m {
                            let shape = 0.4 + 0.6 * (-(mi as f64) / 8.0).exp();
                            grid[mi * t + ti] += amp * shape;
                        }
                    }
                }
                ClassFeature::Flat => {}
            }
            // Modality envelope applies to discriminative recordings.
            let env = modality_envelope(known_modality.envelope, t);
            for mi in 0..m {
                for ti in 0..t {
                    grid[mi * t + ti] += env[ti];
                }
            }
        }
        RecordingContent::Target { target_index, value } => {
            let target = ds.targets.get(*target_index).ok_or_else(|| {
                SynthError::UnknownTarget(format!("#{target_index}"), dataset.into())
            })?;
            // The periodic target envelope is the breathing pattern itself;
            // it replaces the modality envelope.
            let env = target_envelope(value * target.cycles_per_unit, t);
            for mi in 0..m {
                for ti in 0..t {
                    grid[mi * t + ti] += env[ti];
                }
            }
        }
    }

    if ds.noise_amp > 0.0 {
        for v in grid.iter_mut() {
            *v += ds.noise_amp * normal_sample(&mut rec_rng);
        }
    }
    Ok(grid)
}

/// Count strict local maxima of the column-mean time profile after a light
/// 3-tap smoothing. Test oracle for the target-envelope cycle count.
pub fn count_envelope_peaks(grid: &[f64], mel_bins: usize, frames: usize) -> usize {
    let mut profile = vec![0.0; frames];
    for ti in 0..frames {
        let mut s = 0.0;
        for mi in 0..mel_bins {
            s += grid[mi * frames + ti];
        }
        profile[ti] = s / mel_bins as f64;
    }
    let smoothed: Vec<f64> = (0..frames)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(frames - 1);
            (profile[lo] + profile[i] + profile[hi]) / 3.0
        })
        .collect();
    let mean = smoothed.iter().sum::<f64>() / frames as f64;
    (1..frames - 1)
        .filter(|&i| {
            smoothed[i] > smoothed[i - 1] && smoothed[i] >= smoothed[i + 1] && smoothed[i] > mean
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::spec::CorpusSpec;

    fn spec() -> CorpusSpec {
        CorpusSpec::default_spec(123)
    }

    #[test]
    fn deterministic_generation() {
        let s = spec();
        let a = synthesize_spectrogram(&s, "coughset", "cough", &RecordingContent::Label { index: 2 }, 1, 0)
            .unwrap();
        let b = synthesize_spectrogram(&s, "coughset", "cough", &RecordingContent::Label { index: 2 }, 1, 0)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_healthy_equals_component_sum() {
        let mut s = spec();
        for d in &mut s.datasets {
            d.noise_amp = 0.0;
        }
        let ds_name = "lungset";
        let grid = synthesize_spectrogram(
            &s,
            ds_name,
            "chest",
            &RecordingContent::Label { index: 0 }, // healthy = Flat
            3,
            0,
        )
        .unwrap();
        let ds = s.dataset(ds_name).unwrap();
        let template = band_template(&s, ds);
        let offset = subject_offset(&s, ds, 3);
        let env = modality_envelope(EnvelopeKind::Smooth, s.frames);
        for mi in 0..s.mel_bins {
            for ti in 0..s.frames {
                let want = template[mi] + offset[mi] + env[ti];
                let got = grid[mi * s.frames + ti];
                assert!((want - got).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rate_fifteen_gives_seven_or_eight_peaks() {
        // 15 breaths/min over a 30 s window -> 7.5 envelope cycles.
        let s = spec();
        let grid = synthesize_spectrogram(
            &s,
            "rateset",
            "nose-breath",
            &RecordingContent::Target { target_index: 0, value: 15.0 },
            0,
            0,
        )
        .unwrap();
        let peaks = count_envelope_peaks(&grid, s.mel_bins, s.frames);
        assert!(peaks == 7 || peaks == 8, "peaks {peaks}");
    }

    #[test]
    fn unknown_tags_error() {
        let s = spec();
        assert!(synthesize_spectrogram(&s, "nope", "cough", &RecordingContent::Label { index: 0 }, 0, 0).is_err());
        assert!(synthesize_spectrogram(&s, "coughset", "violin", &RecordingContent::Label { index: 0 }, 0, 0).is_err());
    }
}
