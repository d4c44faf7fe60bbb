//! End-to-end pipeline: proxy -> audio routing -> expert encode -> align ->
//! prefix assembly -> language routing -> adapter-conditioned LM -> masked
//! loss (training) or greedy generation (inference).

use thiserror::Error;

use crate::nn::tokenizer;
use crate::routing::{
    self, gumbel_noise, straight_through_gate, RoutingConfig, RoutingDecision, RoutingError,
    RoutingMode,
};
use crate::rng::substream_indexed;
use crate::synthdata::QAExample;
use crate::tensor::{Tape, Tensor, TensorError};

use super::assemble::{self, masked_nll};
use super::bundle::{ModelBundle, TraceEvent};

/// Longest generation we ever need; answers are short by construction.
pub const MAX_ANSWER_TOKENS: usize = 24;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("example {id}: {source}")]
    Example { id: String, source: TensorError },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: u64, diagnostic: String },
}

/// All loss terms of one step; `total` satisfies
/// `total = main + la*lb_a + ll*lb_l - ba*ent_a - bl*ent_l` exactly as the
/// tape computed it.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub main: f64,
    pub lb_audio: f64,
    pub lb_lang: f64,
    pub ent_audio: f64,
    pub ent_lang: f64,
    pub total: f64,
}

/// Routing outcome pair for one example.
#[derive(Debug, Clone)]
pub struct ExampleRouting {
    pub example_id: String,
    pub audio: RoutingDecision,
    pub lang: RoutingDecision,
    pub step: u64,
    pub forced: bool,
}

/// Per-example fixed Gumbel noise (used to hold routing constant while
/// finite-differencing the training loss).
#[derive(Debug, Clone)]
pub struct ExampleNoise {
    pub audio: Vec<f64>,
    pub lang: Vec<f64>,
}

/// Frozen stop-gradient constants for the straight-through gates of one
/// example (finite-difference verification only).
#[derive(Debug, Clone, Copy)]
pub struct GateReference {
    pub audio: f64,
    pub lang: f64,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Override the per-example Gumbel noise (indexed like the batch).
    pub noise_override: Option<&'a [ExampleNoise]>,
    /// Hold the straight-through detach constants at these base values
    /// (indexed like the batch).
    pub gate_reference: Option<&'a [GateReference]>,
    /// Overwrite target ids outside the supervised region with this value
    /// (loss-masking invariance checks).
    pub corrupt_nonanswer_targets_with: Option<usize>,
}

fn err_on(id: &str, e: TensorError) -> ModelError {
    ModelError::Example { id: id.into(), source: e }
}

fn spectrogram_tensor(example: &QAExample) -> Tensor {
    Tensor::from_vec(
        vec![example.mel_bins, example.frames],
        example.spectrogram.clone(),
        false,
    )
}

struct ExamplePass {
    nll_sum: Tensor,
    count: usize,
    probs_audio: Tensor,
    probs_lang: Tensor,
    routing: ExampleRouting,
}

/// One example's forward graph in train mode.
fn example_train_pass(
    bundle: &ModelBundle,
    tape: &Tape,
    example: &QAExample,
    noise: Option<&ExampleNoise>,
    gate_ref: Option<GateReference>,
    corrupt_with: Option<usize>,
) -> Result<ExamplePass, ModelError> {
    let id = example.example_id.as_str();
    let cfg = &bundle.routing_cfg;
    let step = bundle.next_routing_step();
    bundle.trace.record(TraceEvent::ExampleStart(id.into()));

    let spec_t = spectrogram_tensor(example);
    let prompt_e =
        assemble::prompt_embeds(tape, &bundle.lm, &example.question).map_err(|e| err_on(id, e))?;

    // Audio stage: the proxy is computed before any expert selection.
    let z_a = bundle
        .audio_proxy
        .input_for(tape, cfg.policy_audio, &spec_t, &prompt_e)
        .map_err(|e| err_on(id, e))?;
    let logits_a = bundle.audio_router.forward(tape, &z_a).map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ProxyComputed);
    let noise_a = match noise {
        Some(n) => n.audio.clone(),
        None => gumbel_noise(
            &mut substream_indexed(bundle.master_seed, "gumbel-audio", step),
            bundle.audio.n_experts(),
        ),
    };
    let decision_a = routing::route(&logits_a.to_vec(), cfg, step, Some(&noise_a))?;
    bundle.trace.record(TraceEvent::AudioRouted { expert: decision_a.expert });
    let (probs_a_t, gate_a) =
        straight_through_gate(tape, &logits_a, &decision_a, cfg, gate_ref.map(|g| g.audio))
            .map_err(|e| err_on(id, e))?;

    // Only the selected expert encodes.
    let h = bundle
        .audio
        .encode(tape, decision_a.expert, &spec_t, None)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ExpertEncode { expert: decision_a.expert });
    let aligned = bundle.aligners[decision_a.expert]
        .forward(tape, &h)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::Aligned);
    let gated = tape.mul_scalar_t(&aligned, &gate_a).map_err(|e| err_on(id, e))?;

    // Language stage: inputs come from the selected expert's aligned output.
    let z_l = bundle
        .lang_input
        .input_for(tape, cfg.policy_lang, &gated, &prompt_e)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::LangInputComputed);
    let logits_l = bundle.lang_router.forward(tape, &z_l).map_err(|e| err_on(id, e))?;
    let noise_l = match noise {
        Some(n) => n.lang.clone(),
        None => gumbel_noise(
            &mut substream_indexed(bundle.master_seed, "gumbel-lang", step),
            bundle.lora.n_adapters(),
        ),
    };
    let decision_l = routing::route(&logits_l.to_vec(), cfg, step, Some(&noise_l))?;
    bundle.trace.record(TraceEvent::LangRouted { adapter: decision_l.expert });
    let (probs_l_t, gate_l) =
        straight_through_gate(tape, &logits_l, &decision_l, cfg, gate_ref.map(|g| g.lang))
            .map_err(|e| err_on(id, e))?;

    let mut asm = assemble::build_train(tape, &bundle.lm, &example.question, &gated, &example.answer)
        .map_err(|e| err_on(id, e))?;
    if let Some(garbage) = corrupt_with {
        for pos in 0..asm.targets.len() {
            if !asm.loss_positions.contains(&pos) {
                asm.targets[pos] = garbage % tokenizer::VOCAB_SIZE;
            }
        }
    }
    let adapters = bundle.lora.get(decision_l.expert)?;
    let logits = bundle
        .lm
        .forward_embedded(tape, &asm.embeds, adapters, Some(&gate_l))
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::LmForward { adapter: decision_l.expert });
    let (nll_sum, count) = masked_nll(tape, &logits, &asm).map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ExampleEnd);

    Ok(ExamplePass {
        nll_sum,
        count,
        probs_audio: probs_a_t,
        probs_lang: probs_l_t,
        routing: ExampleRouting {
            example_id: id.into(),
            audio: decision_a,
            lang: decision_l,
            step,
            forced: false,
        },
    })
}

fn batch_mean(tape: &Tape, parts: &[Tensor]) -> crate::tensor::Result<Tensor> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = tape.add(&acc, p)?;
    }
    Ok(tape.scale(&acc, 1.0 / parts.len() as f64))
}

/// Differentiable Switch-style balance term over the batch: hard fractions
/// are constants, mean probabilities carry gradient.
fn balance_term(
    tape: &Tape,
    probs: &[Tensor],
    experts: &[usize],
    n: usize,
) -> crate::tensor::Result<Tensor> {
    let mean_p = batch_mean(tape, probs)?;
    let mut f = vec![0.0; n];
    for &e in experts {
        f[e] += 1.0 / experts.len() as f64;
    }
    let f_t = Tensor::from_vec(vec![n], f, false);
    Ok(tape.scale(&tape.sum(&tape.mul(&f_t, &mean_p)?), n as f64))
}

fn entropy_tensor(tape: &Tape, probs: &Tensor) -> crate::tensor::Result<Tensor> {
    let logp = tape.log(probs)?;
    Ok(tape.neg(&tape.sum(&tape.mul(probs, &logp)?)))
}

/// Masked-NLL objective with load-balance and entropy regularizers, Eq-style:
/// `total = main + la*lb_a + ll*lb_l - ba*ent_a - bl*ent_l`.
pub fn forward_train(
    bundle: &ModelBundle,
    tape: &Tape,
    batch: &[QAExample],
    options: &ForwardOptions,
) -> Result<(Tensor, LossBreakdown, Vec<ExampleRouting>), ModelError> {
    assert!(!batch.is_empty(), "empty batch");
    let cfg = &bundle.routing_cfg;
    let mut passes = Vec::with_capacity(batch.len());
    for (i, example) in batch.iter().enumerate() {
        let noise = options.noise_override.map(|n| &n[i]);
        let gate_ref = options.gate_reference.map(|g| g[i]);
        passes.push(example_train_pass(
            bundle,
            tape,
            example,
            noise,
            gate_ref,
            options.corrupt_nonanswer_targets_with,
        )?);
    }

    // main = pooled mean over all supervised positions in the batch.
    let total_count: usize = passes.iter().map(|p| p.count).sum();
    let mut nll_acc = passes[0].nll_sum.clone();
    for p in &passes[1..] {
        nll_acc = tape.add(&nll_acc, &p.nll_sum)?;
    }
    let main = tape.scale(&nll_acc, 1.0 / total_count as f64);

    let probs_a: Vec<Tensor> = passes.iter().map(|p| p.probs_audio.clone()).collect();
    let probs_l: Vec<Tensor> = passes.iter().map(|p| p.probs_lang.clone()).collect();
    let hard_a: Vec<usize> = passes.iter().map(|p| p.routing.audio.expert).collect();
    let hard_l: Vec<usize> = passes.iter().map(|p| p.routing.lang.expert).collect();
    let lb_a = balance_term(tape, &probs_a, &hard_a, bundle.audio.n_experts())?;
    let lb_l = balance_term(tape, &probs_l, &hard_l, bundle.lora.n_adapters())?;

    let ent_a_parts: Vec<Tensor> = probs_a
        .iter()
        .map(|p| entropy_tensor(tape, p))
        .collect::<crate::tensor::Result<_>>()?;
    let ent_l_parts: Vec<Tensor> = probs_l
        .iter()
        .map(|p| entropy_tensor(tape, p))
        .collect::<crate::tensor::Result<_>>()?;
    let ent_a = batch_mean(tape, &ent_a_parts)?;
    let ent_l = batch_mean(tape, &ent_l_parts)?;

    let with_lb_a = tape.add(&main, &tape.scale(&lb_a, cfg.lambda_audio))?;
    let with_lb = tape.add(&with_lb_a, &tape.scale(&lb_l, cfg.lambda_lang))?;
    let minus_ent_a = tape.sub(&with_lb, &tape.scale(&ent_a, cfg.beta_audio))?;
    let total = tape.sub(&minus_ent_a, &tape.scale(&ent_l, cfg.beta_lang))?;

    let breakdown = LossBreakdown {
        main: main.item(),
        lb_audio: lb_a.item(),
        lb_lang: lb_l.item(),
        ent_audio: ent_a.item(),
        ent_lang: ent_l.item(),
        total: total.item(),
    };
    let routing = passes.into_iter().map(|p| p.routing).collect();
    Ok((total, breakdown, routing))
}

/// Eval-mode (or forced-route) generation for one example.
pub fn forward_generate(
    bundle: &ModelBundle,
    example: &QAExample,
    forced_audio: Option<usize>,
    forced_adapter: Option<usize>,
) -> Result<(String, ExampleRouting), ModelError> {
    let id = example.example_id.as_str();
    let eval_cfg: RoutingConfig = bundle.routing_cfg.clone().with_mode(RoutingMode::Eval);
    bundle.trace.record(TraceEvent::ExampleStart(id.into()));

    let tape = Tape::new();
    let spec_t = spectrogram_tensor(example);
    let prompt_e =
        assemble::prompt_embeds(&tape, &bundle.lm, &example.question).map_err(|e| err_on(id, e))?;

    let z_a = bundle
        .audio_proxy
        .input_for(&tape, eval_cfg.policy_audio, &spec_t, &prompt_e)
        .map_err(|e| err_on(id, e))?;
    let logits_a = bundle.audio_router.forward(&tape, &z_a).map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ProxyComputed);
    let mut decision_a = routing::route(&logits_a.to_vec(), &eval_cfg, 0, None)?;
    if let Some(forced) = forced_audio {
        if forced >= bundle.audio.n_experts() {
            return Err(RoutingError::TooFewExperts(forced).into());
        }
        decision_a.expert = forced;
        decision_a.one_hot = vec![0.0; bundle.audio.n_experts()];
        decision_a.one_hot[forced] = 1.0;
    }
    bundle.trace.record(TraceEvent::AudioRouted { expert: decision_a.expert });

    let h = bundle
        .audio
        .encode(&tape, decision_a.expert, &spec_t, None)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ExpertEncode { expert: decision_a.expert });
    let aligned = bundle.aligners[decision_a.expert]
        .forward(&tape, &h)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::Aligned);

    let z_l = bundle
        .lang_input
        .input_for(&tape, eval_cfg.policy_lang, &aligned, &prompt_e)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::LangInputComputed);
    let logits_l = bundle.lang_router.forward(&tape, &z_l).map_err(|e| err_on(id, e))?;
    let mut decision_l = routing::route(&logits_l.to_vec(), &eval_cfg, 0, None)?;
    if let Some(forced) = forced_adapter {
        let _ = bundle.lora.get(forced)?;
        decision_l.expert = forced;
        decision_l.one_hot = vec![0.0; bundle.lora.n_adapters()];
        decision_l.one_hot[forced] = 1.0;
    }
    bundle.trace.record(TraceEvent::LangRouted { adapter: decision_l.expert });

    let prefix = assemble::build_prefix(&tape, &bundle.lm, &example.question, &aligned)
        .map_err(|e| err_on(id, e))?;
    let adapters = bundle.lora.get(decision_l.expert)?;
    bundle.trace.record(TraceEvent::LmForward { adapter: decision_l.expert });
    let ids = bundle
        .lm
        .greedy_decode(adapters, &prefix, MAX_ANSWER_TOKENS, tokenizer::EOS)
        .map_err(|e| err_on(id, e))?;
    bundle.trace.record(TraceEvent::ExampleEnd);

    let forced = forced_audio.is_some() || forced_adapter.is_some();
    Ok((
        tokenizer::decode(&ids),
        ExampleRouting {
            example_id: id.into(),
            audio: decision_a,
            lang: decision_l,
            step: 0,
            forced,
        },
    ))
}
