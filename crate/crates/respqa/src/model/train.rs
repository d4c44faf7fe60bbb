//! Epoch-level training loop: seeded shuffling, batched forward/backward,
//! AdamW updates, per-step records, and expert-usage accounting.

use rand::seq::SliceRandom;

use crate::routing::RoutingMode;
use crate::rng::substream_indexed;
use crate::synthdata::QAExample;
use crate::tensor::{Tape, Tensor};

use super::forward::{forward_train, ExampleRouting, ForwardOptions, LossBreakdown, ModelError};
use super::optim::{AdamW, OptimizerConfig};
use super::ModelBundle;

pub struct StepRecord {
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub routing: Vec<ExampleRouting>,
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
    /// Fraction of examples hard-routed to each audio expert this epoch.
    pub usage_audio: Vec<f64>,
    pub usage_lang: Vec<f64>,
    pub steps: usize,
}

/// Shannon entropy (nats) of a usage histogram.
pub fn usage_entropy(usage: &[f64]) -> f64 {
    crate::routing::shannon_entropy(usage)
}

/// One pass over the training set. The shuffle order is a pure function of
/// (master seed, epoch).
pub fn train_epoch(
    bundle: &ModelBundle,
    opt: &mut AdamW,
    trainable: &[(String, Tensor)],
    train: &[QAExample],
    ocfg: &OptimizerConfig,
    epoch: usize,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<EpochStats, ModelError> {
    assert!(!train.is_empty(), "empty training set");
    assert!(
        bundle.routing_cfg.mode == RoutingMode::Train,
        "train_epoch requires a bundle in train mode"
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut substream_indexed(bundle.master_seed, "shuffle", epoch as u64));

    let mut usage_audio = vec![0usize; bundle.audio.n_experts()];
    let mut usage_lang = vec![0usize; bundle.lora.n_adapters()];
    let mut sum = LossBreakdown::default();
    let mut steps = 0usize;

    for (step_in_epoch, chunk) in order.chunks(ocfg.batch_size).enumerate() {
        let batch: Vec<QAExample> = chunk.iter().map(|&i| train[i].clone()).collect();
        let tape = Tape::new();
        let (total, breakdown, routing) =
            forward_train(bundle, &tape, &batch, &ForwardOptions::default())?;
        if !breakdown.total.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step: bundle.routing_step.get(),
                diagnostic: format!(
                    "main={} lb_audio={} lb_lang={} ent_audio={} ent_lang={} usage_audio={:?} usage_lang={:?}",
                    breakdown.main,
                    breakdown.lb_audio,
                    breakdown.lb_lang,
                    breakdown.ent_audio,
                    breakdown.ent_lang,
                    usage_audio,
                    usage_lang
                ),
            });
        }
        tape.backward(&total)?;
        let grad_norm = opt.step(trainable, ocfg);

        for r in &routing {
            usage_audio[r.audio.expert] += 1;
            usage_lang[r.lang.expert] += 1;
        }
        sum.main += breakdown.main;
        sum.lb_audio += breakdown.lb_audio;
        sum.lb_lang += breakdown.lb_lang;
        sum.ent_audio += breakdown.ent_audio;
        sum.ent_lang += breakdown.ent_lang;
        sum.total += breakdown.total;
        steps += 1;

        observer(&StepRecord {
            epoch,
            step_in_epoch,
            breakdown,
            grad_norm,
            routing,
        });
    }

    let n = steps as f64;
    let total_examples = train.len() as f64;
    Ok(EpochStats {
        epoch,
        mean: LossBreakdown {
            main: sum.main / n,
            lb_audio: sum.lb_audio / n,
            lb_lang: sum.lb_lang / n,
            ent_audio: sum.ent_audio / n,
            ent_lang: sum.ent_lang / n,
            total: sum.total / n,
        },
        usage_audio: usage_audio.iter().map(|&c| c as f64 / total_examples).collect(),
        usage_lang: usage_lang.iter().map(|&c| c as f64 / total_examples).collect(),
        steps,
    })
}
