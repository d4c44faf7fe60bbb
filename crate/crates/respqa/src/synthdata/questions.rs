//! Question/answer rendering for the three formats.
//!
//! The templates are synthetic stand-ins (marked as such in corpus
//! metadata): single-verify questions come in a true-label variant
//! (answer "Yes") and a distractor variant (answer "No"); multiple-choice
//! questions enumerate the full option set in seeded shuffled order;
//! open-ended questions ask for the label or the numeric target, which is
//! rendered with exactly one decimal place.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::spec::{PseudoDataset, RegressionTarget};

#[derive(Debug, Clone)]
pub struct RenderedQuestion {
    pub question: String,
    pub answer: String,
    pub mc_options: Option<Vec<String>>,
    /// The label the SV question asks about (true label or distractor).
    pub queried_label: Option<String>,
}

/// Fixed-format rendering of regression targets.
pub fn render_target_value(value: f64) -> String {
    format!("{value:.1}")
}

/// Single-verify question about `queried`; answer is Yes iff it matches the
/// true label.
pub fn render_sv(ds: &PseudoDataset, true_label: &str, queried: &str) -> RenderedQuestion {
    let subject = match ds.task.as_str() {
        "severity" => format!("severity level {queried}"),
        _ => queried.to_string(),
    };
    RenderedQuestion {
        question: format!("Does this recording indicate {subject}?"),
        answer: if queried == true_label { "Yes" } else { "No" }.to_string(),
        mc_options: None,
        queried_label: Some(queried.to_string()),
    }
}

/// Uniformly draw a distractor label distinct from the true one.
pub fn draw_distractor<'a>(
    ds: &'a PseudoDataset,
    true_label: &str,
    rng: &mut ChaCha8Rng,
) -> &'a str {
    let others: Vec<&str> = ds
        .labels
        .iter()
        .map(|l| l.name.as_str())
        .filter(|n| *n != true_label)
        .collect();
    others[rng.gen_range(0..others.len())]
}

pub fn render_oe_discriminative(ds: &PseudoDataset, true_label: &str) -> RenderedQuestion {
    let question = match ds.task.as_str() {
        "severity" => "What is the severity level of this condition?".to_string(),
        "asthma" => "What is the respiratory status of this patient?".to_string(),
        _ => "What is the most likely condition?".to_string(),
    };
    RenderedQuestion {
        question,
        answer: true_label.to_string(),
        mc_options: None,
        queried_label: None,
    }
}

/// Multiple choice over the full label set, shuffled by the template seed;
/// the true label always appears verbatim among the options.
pub fn render_mc(ds: &PseudoDataset, true_label: &str, rng: &mut ChaCha8Rng) -> RenderedQuestion {
    let mut options: Vec<String> = ds.labels.iter().map(|l| l.name.clone()).collect();
    options.shuffle(rng);
    let listed = options.join(", ");
    RenderedQuestion {
        question: format!("Which is most likely: {listed}?"),
        answer: true_label.to_string(),
        mc_options: Some(options),
        queried_label: None,
    }
}

pub fn render_oe_regression(target: &RegressionTarget, value: f64) -> RenderedQuestion {
    RenderedQuestion {
        question: format!("What is the estimated {} in {}?", target.name, target.unit),
        answer: render_target_value(value),
        mc_options: None,
        queried_label: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::synthdata::spec::CorpusSpec;

    #[test]
    fn sv_true_and_distractor() {
        let spec = CorpusSpec::default_spec(1);
        let ds = spec.dataset("lungset").unwrap();
        assert_eq!(render_sv(ds, "copd", "copd").answer, "Yes");
        assert_eq!(render_sv(ds, "copd", "lrti").answer, "No");
    }

    #[test]
    fn mc_contains_all_options_and_true_label() {
        let spec = CorpusSpec::default_spec(1);
        let ds = spec.dataset("lungset").unwrap();
        let mut rng = substream(5, "template");
        let q = render_mc(ds, "lrti", &mut rng);
        for l in ["healthy", "lrti", "copd"] {
            assert!(q.question.contains(l), "{} missing from {}", l, q.question);
        }
        assert!(q.mc_options.as_ref().unwrap().contains(&"lrti".to_string()));
        assert_eq!(q.answer, "lrti");
    }

    #[test]
    fn regression_answer_has_one_decimal() {
        let spec = CorpusSpec::default_spec(1);
        let ds = spec.dataset("rateset").unwrap();
        let q = render_oe_regression(&ds.targets[0], 16.0);
        assert_eq!(q.answer, "16.0");
        assert!(q.question.contains("breaths per minute"));
    }

    #[test]
    fn distractor_never_equals_true_label() {
        let spec = CorpusSpec::default_spec(1);
        let ds = spec.dataset("coughset").unwrap();
        let mut rng = substream(7, "template");
        for _ in 0..50 {
            assert_ne!(draw_distractor(ds, "covid", &mut rng), "covid");
        }
    }
}
