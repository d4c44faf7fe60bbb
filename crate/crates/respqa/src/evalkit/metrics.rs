//! Label-correctness and numeric metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synthdata::{QuestionFormat, TaskFamily};

use super::text::{extract_label, extract_number, normalize};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0}: empty prediction set")]
    Empty(&'static str),
    #[error("taus must be sorted ascending")]
    UnsortedTaus,
    #[error("prediction {0} is not {1}")]
    WrongFamily(String, &'static str),
}

/// One generated answer with everything needed to score it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub example_id: String,
    pub generated_text: String,
    pub reference_text: String,
    pub format: QuestionFormat,
    pub family: TaskFamily,
    pub dataset: String,
    pub task: String,
    #[serde(default)]
    pub label_set: Vec<String>,
    pub target: Option<f64>,
    /// Reference dataset label (discriminative), for stratified routing
    /// reports.
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub token_f1: f64,
    pub exact_match: f64,
    /// Fraction of generations from which no label could be extracted.
    pub unparsed_rate: f64,
    /// Accuracy over the parsed subset only (secondary; strict accuracy
    /// above counts unparsed generations as errors).
    pub accuracy_parsed_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegMetrics {
    pub n: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    /// (tau, cumulative accuracy); unparsed predictions count as failures.
    pub acc_at_tau: Vec<(f64, f64)>,
    pub parsing_coverage: f64,
}

/// Token-multiset F1 between normalized strings.
pub fn token_f1(generated: &str, reference: &str) -> f64 {
    let g = normalize(generated);
    let r = normalize(reference);
    let gt: Vec<&str> = g.split_whitespace().collect();
    let rt: Vec<&str> = r.split_whitespace().collect();
    if gt.is_empty() && rt.is_empty() {
        return 1.0;
    }
    if gt.is_empty() || rt.is_empty() {
        return 0.0;
    }
    let mut ref_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &rt {
        *ref_counts.entry(t).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for t in &gt {
        if let Some(c) = ref_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / gt.len() as f64;
    let recall = overlap as f64 / rt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Accuracy, macro-F1 (classes absent from both sides excluded), token F1,
/// and exact match over extracted labels / normalized strings.
pub fn discriminative_metrics(preds: &[Prediction]) -> Result<DiscMetrics, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty("discriminative_metrics"));
    }
    let mut correct = 0usize;
    let mut parsed = 0usize;
    let mut correct_parsed = 0usize;
    let mut tf1_sum = 0.0;
    let mut em = 0usize;
    // Confusion counts keyed by normalized class name.
    let mut tp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fp: BTreeMap<String, usize> = BTreeMap::new();
    let mut fn_: BTreeMap<String, usize> = BTreeMap::new();
    let mut seen: BTreeMap<String, bool> = BTreeMap::new();

    for p in preds {
        if p.family != TaskFamily::Discriminative {
            return Err(MetricError::WrongFamily(p.example_id.clone(), "discriminative"));
        }
        let reference = extract_label(&p.reference_text, p.format, &p.label_set)
            .map(|l| normalize(&l))
            .unwrap_or_else(|| normalize(&p.reference_text));
        let predicted = extract_label(&p.generated_text, p.format, &p.label_set).map(|l| normalize(&l));
        seen.insert(reference.clone(), true);
        match &predicted {
            Some(lab) => {
                parsed += 1;
                seen.insert(lab.clone(), true);
                if *lab == reference {
                    correct += 1;
                    correct_parsed += 1;
                    *tp.entry(reference.clone()).or_insert(0) += 1;
                } else {
                    *fp.entry(lab.clone()).or_insert(0) += 1;
                    *fn_.entry(reference.clone()).or_insert(0) += 1;
                }
            }
            None => {
                // Unparsed counts as an error: a miss for the true class,
                // but no "unparsed" pseudo-class enters the macro mean.
                *fn_.entry(reference.clone()).or_insert(0) += 1;
            }
        }
        tf1_sum += token_f1(&p.generated_text, &p.reference_text);
        if normalize(&p.generated_text) == normalize(&p.reference_text) {
            em += 1;
        }
    }

    let mut f1_sum = 0.0;
    let mut f1_classes = 0usize;
    for class in seen.keys() {
        let t = *tp.get(class).unwrap_or(&0) as f64;
        let p_ = *fp.get(class).unwrap_or(&0) as f64;
        let n_ = *fn_.get(class).unwrap_or(&0) as f64;
        if t + p_ + n_ == 0.0 {
            continue; // absent from both predictions and references
        }
        let denom = 2.0 * t + p_ + n_;
        f1_sum += if denom > 0.0 { 2.0 * t / denom } else { 0.0 };
        f1_classes += 1;
    }

    let n = preds.len();
    Ok(DiscMetrics {
        n,
        accuracy: correct as f64 / n as f64,
        macro_f1: if f1_classes > 0 { f1_sum / f1_classes as f64 } else { 0.0 },
        token_f1: tf1_sum / n as f64,
        exact_match: em as f64 / n as f64,
        unparsed_rate: (n - parsed) as f64 / n as f64,
        accuracy_parsed_only: if parsed > 0 {
            correct_parsed as f64 / parsed as f64
        } else {
            0.0
        },
    })
}

/// MAE/RMSE over the parsed subset; Acc@tau with unparsed counted as
/// failures; parsing coverage.
pub fn regression_metrics(preds: &[Prediction], taus: &[f64]) -> Result<RegMetrics, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty("regression_metrics"));
    }
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(MetricError::UnsortedTaus);
    }
    let mut errors = Vec::new();
    for p in preds {
        if p.family != TaskFamily::Regression {
            return Err(MetricError::WrongFamily(p.example_id.clone(), "regression"));
        }
        let target = p
            .target
            .unwrap_or_else(|| extract_number(&p.reference_text).unwrap_or(f64::NAN));
        if let Some(value) = extract_number(&p.generated_text) {
            errors.push((value - target).abs());
        }
    }
    let n = preds.len();
    let coverage = errors.len() as f64 / n as f64;
    let (mae, rmse) = if errors.is_empty() {
        (None, None)
    } else {
        let m = errors.iter().sum::<f64>() / errors.len() as f64;
        let ms = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
        (Some(m), Some(ms.sqrt()))
    };
    let acc_at_tau = taus
        .iter()
        .map(|&tau| {
            let hits = errors.iter().filter(|e| **e <= tau).count();
            (tau, hits as f64 / n as f64)
        })
        .collect();
    Ok(RegMetrics {
        n,
        mae,
        rmse,
        acc_at_tau,
        parsing_coverage: coverage,
    })
}

/// Default tolerance grid: 0.1 to 3.0 in steps of 0.1.
pub fn default_taus() -> Vec<f64> {
    (1..=30).map(|i| i as f64 * 0.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_pred(id: &str, gen: &str, reference: &str, labels: &[&str]) -> Prediction {
        Prediction {
            example_id: id.into(),
            generated_text: gen.into(),
            reference_text: reference.into(),
            format: QuestionFormat::Oe,
            family: TaskFamily::Discriminative,
            dataset: "d".into(),
            task: "diagnosis".into(),
            label_set: labels.iter().map(|s| s.to_string()).collect(),
            target: None,
            label: Some(reference.into()),
        }
    }

    fn reg_pred(id: &str, gen: &str, target: f64) -> Prediction {
        Prediction {
            example_id: id.into(),
            generated_text: gen.into(),
            reference_text: format!("{target:.1}"),
            format: QuestionFormat::Oe,
            family: TaskFamily::Regression,
            dataset: "d".into(),
            task: "rate".into(),
            label_set: vec![],
            target: Some(target),
            label: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let labels = ["copd", "healthy"];
        let preds = vec![
            disc_pred("1", "copd", "copd", &labels),
            disc_pred("2", "healthy", "healthy", &labels),
        ];
        let m = discriminative_metrics(&preds).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.exact_match, 1.0);
    }

    #[test]
    fn token_f1_hand_oracle() {
        // precision 3/3, recall 3/4 -> F1 = 6/7.
        let f = token_f1("patient has copd", "the patient has copd");
        assert!((f - 6.0 / 7.0).abs() < 1e-12, "{f}");
    }

    #[test]
    fn macro_f1_confusion_hand_oracle() {
        // ref [A,A,B], pred [A,B,B]: F1(A)=2/3, F1(B)=2/3, macro=2/3, acc=2/3.
        let labels = ["aa", "bb"];
        let preds = vec![
            disc_pred("1", "aa", "aa", &labels),
            disc_pred("2", "bb", "aa", &labels),
            disc_pred("3", "bb", "bb", &labels),
        ];
        let m = discriminative_metrics(&preds).unwrap();
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn regression_hand_oracles() {
        // errors {0.2, 0.6, 1.1}: Acc@0.5 = 1/3, MAE = 0.6333, RMSE = 0.7257.
        let preds = vec![
            reg_pred("1", "2.2", 2.0),
            reg_pred("2", "2.6", 2.0),
            reg_pred("3", "3.1", 2.0),
        ];
        let m = regression_metrics(&preds, &[0.5]).unwrap();
        assert!((m.mae.unwrap() - 0.6333333333333333).abs() < 1e-12);
        assert!((m.rmse.unwrap() - (((0.04f64 + 0.36 + 1.21) / 3.0).sqrt())).abs() < 1e-12);
        assert!((m.rmse.unwrap() - 0.7326).abs() < 1e-4);
        assert!((m.acc_at_tau[0].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unparsed_counts_as_failure_but_not_in_mae() {
        // coverage 2/3; MAE over parsed = 0.2; Acc@0.5 = 2/3.
        let preds = vec![
            reg_pred("1", "2.1", 2.0),
            reg_pred("2", "2.3", 2.0),
            reg_pred("3", "cannot say", 2.0),
        ];
        let m = regression_metrics(&preds, &[0.5]).unwrap();
        assert!((m.parsing_coverage - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.mae.unwrap() - 0.2).abs() < 1e-9);
        assert!((m.acc_at_tau[0].1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_unparsed_reports_absent_mae_and_zero_coverage() {
        let preds = vec![reg_pred("1", "none", 2.0), reg_pred("2", "nothing", 3.0)];
        let m = regression_metrics(&preds, &[0.5, 1.0]).unwrap();
        assert!(m.mae.is_none() && m.rmse.is_none());
        assert_eq!(m.parsing_coverage, 0.0);
        assert_eq!(m.acc_at_tau, vec![(0.5, 0.0), (1.0, 0.0)]);
    }

    #[test]
    fn zero_errors_give_zero_mae_and_full_acc() {
        let preds = vec![reg_pred("1", "2.0", 2.0), reg_pred("2", "3.0", 3.0)];
        let m = regression_metrics(&preds, &[0.5]).unwrap();
        assert_eq!(m.mae.unwrap(), 0.0);
        assert_eq!(m.rmse.unwrap(), 0.0);
        assert_eq!(m.acc_at_tau[0].1, 1.0);
    }
}
