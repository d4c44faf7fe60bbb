//! Corpus learnability guarantee: a plain non-routed probe (mean-pooled
//! spectrogram + linear softmax) must reach high validation accuracy on
//! every discriminative pseudo-dataset, so downstream routing experiments
//! measure routing rather than data noise.

use std::collections::BTreeMap;

use respqa::synthdata::{build_corpus, CorpusSpec, QAExample, TaskFamily};

/// Mean over time per mel bin, plus a bias feature.
fn features(e: &QAExample) -> Vec<f64> {
    let mut f = vec![0.0; e.mel_bins + 1];
    for m in 0..e.mel_bins {
        let row = &e.spectrogram[m * e.frames..(m + 1) * e.frames];
        f[m] = row.iter().sum::<f64>() / e.frames as f64;
    }
    f[e.mel_bins] = 1.0;
    f
}

/// Full-batch softmax regression, plain loops; independent of the crate's
/// autodiff engine.
fn probe_accuracy(train: &[(Vec<f64>, usize)], val: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let dim = train[0].0.len();
    let mut w = vec![0.0; classes * dim];
    let lr = 0.5;
    for _ in 0..400 {
        let mut grad = vec![0.0; classes * dim];
        for (x, y) in train {
            let mut logits = vec![0.0; classes];
            for (c, l) in logits.iter_mut().enumerate() {
                *l = x.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..classes {
                let p = exps[c] / z;
                let d = p - if c == *y { 1.0 } else { 0.0 };
                for (g, xi) in grad[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi / train.len() as f64;
        }
    }
    let mut correct = 0;
    for (x, y) in val {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..classes {
            let v: f64 = x.iter().zip(&w[c * dim..(c + 1) * dim]).map(|(a, b)| a * b).sum();
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == *y {
            correct += 1;
        }
    }
    correct as f64 / val.len() as f64
}

#[test]
fn linear_probe_reaches_high_accuracy_on_every_discriminative_set() {
    let spec = CorpusSpec::default_spec(42);
    let corpus = build_corpus(&spec).unwrap();
    for ds in spec
        .datasets
        .iter()
        .filter(|d| !d.heldout && d.family == TaskFamily::Discriminative)
    {
        let class_index: BTreeMap<&str, usize> = ds
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.as_str(), i))
            .collect();
        let collect = |xs: &[QAExample]| -> Vec<(Vec<f64>, usize)> {
            let mut seen = std::collections::BTreeSet::new();
            xs.iter()
                .filter(|e| e.dataset == ds.name)
                .filter(|e| {
                    // One probe point per recording.
                    seen.insert((e.subject_id.clone(), e.modality.clone(), {
                        let parts: Vec<&str> = e.example_id.split('.').collect();
                        parts[2].to_string()
                    }))
                })
                .map(|e| (features(e), class_index[e.label.as_deref().unwrap()]))
                .collect()
        };
        let train = collect(&corpus.train);
        let val = collect(&corpus.val);
        assert!(!train.is_empty() && !val.is_empty(), "{}", ds.name);
        let acc = probe_accuracy(&train, &val, ds.labels.len());
        assert!(
            acc >= 0.9,
            "probe accuracy {acc:.3} < 0.9 on {} ({} train, {} val recordings)",
            ds.name,
            train.len(),
            val.len()
        );
    }
}
