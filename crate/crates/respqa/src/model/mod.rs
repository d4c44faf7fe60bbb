//! End-to-end routed pipeline: bundle construction, sequence assembly,
//! the Eq-style training objective, generation, and the training loop.

pub mod assemble;
pub mod bundle;
pub mod forward;
pub mod optim;
pub mod train;

pub use bundle::{Instrumentation, ModelBundle, TraceEvent};
pub use forward::{
    forward_generate, forward_train, ExampleNoise, ExampleRouting, ForwardOptions, GateReference,
    LossBreakdown, ModelError, MAX_ANSWER_TOKENS,
};
pub use optim::{AdamW, OptimizerConfig};
pub use train::{train_epoch, usage_entropy, EpochStats, StepRecord};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::rng::{substream, substream_indexed};
    use crate::routing::{gumbel_noise, RoutingConfig};
    use crate::synthdata::{QAExample, QuestionFormat, TaskFamily};
    use crate::tensor::Tape;
    use rand::Rng;

    fn tiny_example(i: usize, question: &str, answer: &str) -> QAExample {
        let cfg = ModelConfig::tiny();
        let mut rng = substream_indexed(900, "tiny-data", i as u64);
        let grid: Vec<f64> = (0..cfg.mel_bins * cfg.frames)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        QAExample {
            example_id: format!("tiny-{i}"),
            mel_bins: cfg.mel_bins,
            frames: cfg.frames,
            spectrogram: grid,
            question: question.into(),
            answer: answer.into(),
            dataset: "tinyset".into(),
            modality: "breathe".into(),
            format: QuestionFormat::Sv,
            family: TaskFamily::Discriminative,
            task: "diagnosis".into(),
            label: Some(answer.into()),
            target: None,
            subject_id: format!("tinyset-subj{i:02}"),
            mc_options: None,
            label_set: vec!["Yes".into(), "No".into()],
            template_provenance: "synthetic-template".into(),
        }
    }

    fn tiny_bundle(warmup: u64) -> ModelBundle {
        let routing = RoutingConfig {
            warmup_steps: warmup,
            ..RoutingConfig::default()
        };
        ModelBundle::new(ModelConfig::tiny(), routing, 31)
    }

    fn fixed_noise(bundle: &ModelBundle, n: usize) -> Vec<ExampleNoise> {
        let mut rng = substream(77, "gumbel-fixed");
        (0..n)
            .map(|_| ExampleNoise {
                audio: gumbel_noise(&mut rng, bundle.audio.n_experts()),
                lang: gumbel_noise(&mut rng, bundle.lora.n_adapters()),
            })
            .collect()
    }

    #[test]
    fn total_loss_identity_holds_to_1e12() {
        let bundle = tiny_bundle(0);
        let batch = vec![tiny_example(0, "Is it?", "Yes"), tiny_example(1, "Is it?", "No")];
        let tape = Tape::new();
        let (_, b, _) = forward_train(&bundle, &tape, &batch, &ForwardOptions::default()).unwrap();
        let cfg = &bundle.routing_cfg;
        let recomputed = b.main + cfg.lambda_audio * b.lb_audio + cfg.lambda_lang * b.lb_lang
            - cfg.beta_audio * b.ent_audio
            - cfg.beta_lang * b.ent_lang;
        assert!((b.total - recomputed).abs() < 1e-12, "identity off: {}", b.total - recomputed);
    }

    #[test]
    fn corruption_of_nonanswer_targets_is_exactly_invisible() {
        let batch = vec![tiny_example(0, "What is it?", "copd")];
        let run = |corrupt: Option<usize>| {
            let bundle = tiny_bundle(0);
            let tape = Tape::new();
            let opts = ForwardOptions {
                noise_override: Some(&fixed_noise(&bundle, 1)),
                corrupt_nonanswer_targets_with: corrupt,
                ..ForwardOptions::default()
            };
            let (_, b, _) = forward_train(&bundle, &tape, &batch, &opts).unwrap();
            b.main
        };
        assert_eq!(run(None).to_bits(), run(Some(9)).to_bits());
    }

    #[test]
    fn gradients_reach_only_trainable_parameters() {
        let bundle = tiny_bundle(0);
        let batch = vec![tiny_example(0, "Is it?", "Yes")];
        let tape = Tape::new();
        let noise = fixed_noise(&bundle, 1);
        let opts = ForwardOptions {
            noise_override: Some(&noise),
            ..ForwardOptions::default()
        };
        let (total, _, _) = forward_train(&bundle, &tape, &batch, &opts).unwrap();
        tape.backward(&total).unwrap();
        for (name, t) in bundle.parameters() {
            if !t.requires_grad() {
                assert!(t.grad().is_none(), "frozen {name} accumulated gradient");
            }
        }
        // The active adapter, the selected aligner, and both routers see grads.
        let grads_present = bundle
            .trainable_parameters()
            .iter()
            .filter(|(_, t)| t.grad().is_some())
            .count();
        assert!(grads_present > 0);
    }

    #[test]
    fn single_path_instrumentation() {
        let bundle = tiny_bundle(0);
        bundle.trace.set_enabled(true);
        let batch = vec![tiny_example(0, "Is it?", "Yes"), tiny_example(1, "Is it?", "No")];
        let tape = Tape::new();
        forward_train(&bundle, &tape, &batch, &ForwardOptions::default()).unwrap();
        let events = bundle.trace.take();
        let encodes = events
            .iter()
            .filter(|e| matches!(e, TraceEvent::ExpertEncode { .. }))
            .count();
        assert_eq!(encodes, batch.len(), "exactly one encode per example");
        // Structural staging: proxy precedes expert selection; language
        // input precedes language routing.
        let mut idx_proxy = None;
        let mut idx_routed = None;
        for (i, e) in events.iter().enumerate() {
            if matches!(e, TraceEvent::ProxyComputed) && idx_proxy.is_none() {
                idx_proxy = Some(i);
            }
            if matches!(e, TraceEvent::AudioRouted { .. }) && idx_routed.is_none() {
                idx_routed = Some(i);
            }
        }
        assert!(idx_proxy.unwrap() < idx_routed.unwrap());
    }

    #[test]
    fn forced_paths_enumerate_and_unforced_matches_selected() {
        let bundle = tiny_bundle(0);
        let ex = tiny_example(3, "Is it?", "Yes");
        let mut answers = std::collections::BTreeMap::new();
        for a in 0..2 {
            for l in 0..2 {
                let (text, routing) = forward_generate(&bundle, &ex, Some(a), Some(l)).unwrap();
                assert!(routing.forced);
                assert_eq!((routing.audio.expert, routing.lang.expert), (a, l));
                answers.insert((a, l), text);
            }
        }
        let (free_text, free_routing) = forward_generate(&bundle, &ex, None, None).unwrap();
        assert!(!free_routing.forced);
        let selected = (free_routing.audio.expert, free_routing.lang.expert);
        assert_eq!(answers[&selected], free_text);
        // Determinism of unforced generation.
        let (again, _) = forward_generate(&bundle, &ex, None, None).unwrap();
        assert_eq!(free_text, again);
    }

    #[test]
    fn one_training_epoch_preserves_frozen_parameters() {
        let bundle = tiny_bundle(2);
        let before = bundle.frozen_hash();
        let train: Vec<QAExample> = (0..6)
            .map(|i| tiny_example(i, "Is it?", if i % 2 == 0 { "Yes" } else { "No" }))
            .collect();
        let trainable = bundle.trainable_parameters();
        let mut opt = AdamW::new(&trainable);
        let ocfg = OptimizerConfig {
            lr: 1e-3,
            batch_size: 2,
            ..OptimizerConfig::default()
        };
        let stats =
            train_epoch(&bundle, &mut opt, &trainable, &train, &ocfg, 0, &mut |_| {}).unwrap();
        assert_eq!(stats.steps, 3);
        assert_eq!(bundle.frozen_hash(), before);
        let usage_sum: f64 = stats.usage_audio.iter().sum();
        assert!((usage_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_check_on_sampled_coordinates() {
        // Tiny config; Gumbel noise, warmup assignment, and the
        // straight-through detach constants all held fixed at the base
        // point; 12 sampled coordinates across the trainable parameters
        // vs central differences.
        let bundle = tiny_bundle(0);
        let batch = vec![tiny_example(0, "Is it?", "Yes"), tiny_example(1, "Is x?", "No")];
        let noise = fixed_noise(&bundle, batch.len());

        // Base pass to capture the straight-through references.
        bundle.routing_step.set(1000);
        let tape0 = Tape::new();
        let opts0 = ForwardOptions {
            noise_override: Some(&noise),
            ..ForwardOptions::default()
        };
        let (_, _, base_routing) = forward_train(&bundle, &tape0, &batch, &opts0).unwrap();
        let refs: Vec<GateReference> = base_routing
            .iter()
            .map(|r| GateReference {
                audio: r.audio.probs[r.audio.expert],
                lang: r.lang.probs[r.lang.expert],
            })
            .collect();
        drop(tape0);

        let loss_value = |bundle: &ModelBundle| -> f64 {
            bundle.routing_step.set(1000);
            let tape = Tape::new();
            let opts = ForwardOptions {
                noise_override: Some(&noise),
                gate_reference: Some(&refs),
                ..ForwardOptions::default()
            };
            let (total, _, _) = forward_train(bundle, &tape, &batch, &opts).unwrap();
            total.item()
        };

        // Analytic gradients (same frozen references; the gradient is
        // identical with or without them, the forward constant shifts).
        bundle.routing_step.set(1000);
        let tape = Tape::new();
        let opts = ForwardOptions {
            noise_override: Some(&noise),
            gate_reference: Some(&refs),
            ..ForwardOptions::default()
        };
        let (total, _, _) = forward_train(&bundle, &tape, &batch, &opts).unwrap();
        tape.backward(&total).unwrap();
        let trainable = bundle.trainable_parameters();
        let analytic: Vec<Vec<f64>> = trainable
            .iter()
            .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        for (_, t) in &trainable {
            t.zero_grad();
        }

        let mut rng = substream(5, "coords");
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..12 {
            let pi = rng.gen_range(0..trainable.len());
            let ci = rng.gen_range(0..trainable[pi].1.numel());
            let orig = trainable[pi].1.data()[ci];
            trainable[pi].1.map_data(|d| d[ci] = orig + eps);
            let plus = loss_value(&bundle);
            trainable[pi].1.map_data(|d| d[ci] = orig - eps);
            let minus = loss_value(&bundle);
            trainable[pi].1.map_data(|d| d[ci] = orig);
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[pi][ci] - numeric).abs() / analytic[pi][ci].abs().max(1.0);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "end-to-end gradcheck worst rel err {worst}");
    }

    #[test]
    fn context_overflow_names_the_example() {
        let bundle = tiny_bundle(0);
        let mut ex = tiny_example(0, "Is it?", "Yes");
        ex.question = "q".repeat(400);
        let tape = Tape::new();
        let err = forward_train(&bundle, &tape, &[ex], &ForwardOptions::default()).unwrap_err();
        assert!(err.to_string().contains("tiny-0"), "{err}");
    }
}
