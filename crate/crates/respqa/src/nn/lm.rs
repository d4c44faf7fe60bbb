//! Shared frozen causal language model with a bank of LoRA adapters.
//!
//! The backbone (embeddings, positional table, decoder blocks, final norm)
//! never trains. Exactly one adapter set is active per forward pass; its
//! low-rank deltas attach to the query/value projections of every block.
//! The output projection is tied to the embedding table.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError};

use super::lora::LoraFactors;
use super::tokenizer::{EOS, VOCAB_SIZE};
use super::{init, ModelConfig};

/// Per-block adapter factors for the query and value projections.
pub struct BlockAdapters {
    pub q: LoraFactors,
    pub v: LoraFactors,
}

/// One language expert: adapter factors covering every decoder block.
pub struct AdapterSet {
    pub blocks: Vec<BlockAdapters>,
}

/// The bank of language experts. Exactly one set is active per forward.
pub struct LoraBank {
    pub adapters: Vec<AdapterSet>,
}

impl LoraBank {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let adapters = (0..cfg.n_adapters)
            .map(|_| AdapterSet {
                blocks: (0..cfg.n_blocks)
                    .map(|_| BlockAdapters {
                        q: LoraFactors::new(rng, d, d, cfg.lora_rank, cfg.lora_alpha),
                        v: LoraFactors::new(rng, d, d, cfg.lora_rank, cfg.lora_alpha),
                    })
                    .collect(),
            })
            .collect();
        LoraBank { adapters }
    }

    pub fn n_adapters(&self) -> usize {
        self.adapters.len()
    }

    pub fn get(&self, index: usize) -> Result<&AdapterSet> {
        self.adapters.get(index).ok_or(TensorError::Domain {
            op: "lm_forward",
            what: format!("adapter index {index} out of {}", self.adapters.len()),
        })
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, set) in self.adapters.iter().enumerate() {
            for (b, blk) in set.blocks.iter().enumerate() {
                blk.q.params(&format!("lora.adapter{i}.block{b}.q"), out);
                blk.v.params(&format!("lora.adapter{i}.block{b}.v"), out);
            }
        }
    }
}

struct DecoderBlock {
    ln1_g: Tensor,
    ln1_b: Tensor,
    wq: Tensor, // (d, d), frozen
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    w1: Tensor, // (4d, d)
    b1: Tensor,
    w2: Tensor, // (d, 4d)
    b2: Tensor,
}

impl DecoderBlock {
    fn new(rng: &mut ChaCha8Rng, d: usize) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        DecoderBlock {
            ln1_g: init::ones(vec![d], false),
            ln1_b: init::zeros(vec![d], false),
            wq: init::normal(rng, vec![d, d], s, false),
            wk: init::normal(rng, vec![d, d], s, false),
            wv: init::normal(rng, vec![d, d], s, false),
            wo: init::normal(rng, vec![d, d], s, false),
            ln2_g: init::ones(vec![d], false),
            ln2_b: init::zeros(vec![d], false),
            w1: init::normal(rng, vec![4 * d, d], s, false),
            b1: init::zeros(vec![4 * d], false),
            w2: init::normal(rng, vec![d, 4 * d], 1.0 / (4.0 * d as f64).sqrt(), false),
            b2: init::zeros(vec![d], false),
        }
    }

    fn forward(
        &self,
        tape: &Tape,
        h: &Tensor,
        n_heads: usize,
        adapters: &BlockAdapters,
        gate: Option<&Tensor>,
    ) -> Result<Tensor> {
        let d = self.wq.shape()[0];
        let dk = d / n_heads;
        let a_in = tape.layer_norm(h, &self.ln1_g, &self.ln1_b, 1e-5)?;

        let q_base = tape.matmul_t(&a_in, &self.wq)?;
        let q = tape.add(&q_base, &adapters.q.delta(tape, &a_in, gate)?)?;
        let k = tape.matmul_t(&a_in, &self.wk)?;
        let v_base = tape.matmul_t(&a_in, &self.wv)?;
        let v = tape.add(&v_base, &adapters.v.delta(tape, &a_in, gate)?)?;

        let mut head_outs = Vec::with_capacity(n_heads);
        for hd in 0..n_heads {
            let (s, e) = (hd * dk, (hd + 1) * dk);
            let qh = tape.slice_cols(&q, s, e)?;
            let kh = tape.slice_cols(&k, s, e)?;
            let vh = tape.slice_cols(&v, s, e)?;
            let scores = tape.scale(
                &tape.matmul_t(&qh, &kh)?,
                1.0 / (dk as f64).sqrt(),
            );
            let probs = tape.softmax_rows_causal(&scores)?;
            head_outs.push(tape.matmul(&probs, &vh)?);
        }
        let refs: Vec<&Tensor> = head_outs.iter().collect();
        let ctx = tape.concat(&refs, 1)?;
        let attn_out = tape.matmul_t(&ctx, &self.wo)?;
        let h = tape.add(h, &attn_out)?;

        let m_in = tape.layer_norm(&h, &self.ln2_g, &self.ln2_b, 1e-5)?;
        let mid = tape.gelu(&tape.add_bias(&tape.matmul_t(&m_in, &self.w1)?, &self.b1)?);
        let mlp = tape.add_bias(&tape.matmul_t(&mid, &self.w2)?, &self.b2)?;
        tape.add(&h, &mlp)
    }

    fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

pub struct FrozenCausalLm {
    pub embed: Tensor, // (V, d), frozen; also the output projection
    pub pos: Tensor,   // (max_ctx, d), frozen
    blocks: Vec<DecoderBlock>,
    lnf_g: Tensor,
    lnf_b: Tensor,
    n_heads: usize,
    pub max_ctx: usize,
}

impl FrozenCausalLm {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        FrozenCausalLm {
            embed: init::normal(rng, vec![VOCAB_SIZE, d], 0.5, false),
            pos: init::normal(rng, vec![cfg.max_ctx, d], 0.1, false),
            blocks: (0..cfg.n_blocks).map(|_| DecoderBlock::new(rng, d)).collect(),
            lnf_g: init::ones(vec![d], false),
            lnf_b: init::zeros(vec![d], false),
            n_heads: cfg.n_heads,
            max_ctx: cfg.max_ctx,
        }
    }

    pub fn d_model(&self) -> usize {
        self.embed.shape()[1]
    }

    /// Token-embedding lookup (no positions; those are added in the forward).
    pub fn embed_tokens(&self, tape: &Tape, ids: &[usize]) -> Result<Tensor> {
        tape.gather_rows(&self.embed, ids)
    }

    /// Causal forward over a mixed embedding sequence (token embeddings and
    /// injected continuous rows alike). `gate` is the straight-through
    /// routing scalar applied to the active adapter's deltas.
    pub fn forward_embedded(
        &self,
        tape: &Tape,
        x: &Tensor,
        adapters: &AdapterSet,
        gate: Option<&Tensor>,
    ) -> Result<Tensor> {
        let len = x.shape()[0];
        if len > self.max_ctx {
            return Err(TensorError::Domain {
                op: "lm_forward",
                what: format!("sequence length {len} exceeds max context {}", self.max_ctx),
            });
        }
        let pos = tape.slice_rows(&self.pos, 0, len)?;
        let mut h = tape.add(x, &pos)?;
        for (block, ba) in self.blocks.iter().zip(&adapters.blocks) {
            h = block.forward(tape, &h, self.n_heads, ba, gate)?;
        }
        let hf = tape.layer_norm(&h, &self.lnf_g, &self.lnf_b, 1e-5)?;
        tape.matmul_t(&hf, &self.embed)
    }

    /// Deterministic argmax decoding from an embedding prefix. Stops at
    /// `stop_token` or after `max_new` tokens. Ties break to the lowest id.
    pub fn greedy_decode(
        &self,
        adapters: &AdapterSet,
        prefix: &Tensor,
        max_new: usize,
        stop_token: usize,
    ) -> Result<Vec<usize>> {
        assert!(max_new >= 1, "max_new must be at least 1");
        let mut seq = prefix.detached();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let tape = Tape::new();
            let logits = self.forward_embedded(&tape, &seq, adapters, None)?;
            let last = logits.shape()[0] - 1;
            let row = &logits.to_vec()[last * VOCAB_SIZE..(last + 1) * VOCAB_SIZE];
            let next = argmax(row);
            if next == stop_token {
                break;
            }
            out.push(next);
            let tape = Tape::new();
            let emb = self.embed_tokens(&tape, &[next])?;
            seq = tape.concat(&[&seq, &emb], 0)?.detached();
        }
        Ok(out)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push(("lm.embed".into(), self.embed.clone()));
        out.push(("lm.pos".into(), self.pos.clone()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&format!("lm.block{i}"), out);
        }
        out.push(("lm.lnf.g".into(), self.lnf_g.clone()));
        out.push(("lm.lnf.b".into(), self.lnf_b.clone()));
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Convenience: decode until EOS with the default stop token.
pub fn decode_until_eos(
    lm: &FrozenCausalLm,
    adapters: &AdapterSet,
    prefix: &Tensor,
    max_new: usize,
) -> Result<Vec<usize>> {
    lm.greedy_decode(adapters, prefix, max_new, EOS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn setup() -> (FrozenCausalLm, LoraBank) {
        let cfg = ModelConfig {
            d_model: 16,
            n_blocks: 2,
            max_ctx: 32,
            ..ModelConfig::default()
        };
        let mut rng = substream(42, "init");
        (FrozenCausalLm::new(&mut rng, &cfg), LoraBank::new(&mut rng, &cfg))
    }

    #[test]
    fn causality_perturbation() {
        let (lm, bank) = setup();
        let tape = Tape::new();
        let mut rng = substream(1, "data");
        let x1 = init::normal(&mut rng, vec![6, 16], 1.0, false);
        let mut d2 = x1.to_vec();
        for v in &mut d2[5 * 16..] {
            *v += 3.0; // perturb only the last position
        }
        let x2 = Tensor::from_vec(vec![6, 16], d2, false);
        let l1 = lm.forward_embedded(&tape, &x1, &bank.adapters[0], None).unwrap();
        let l2 = lm.forward_embedded(&tape, &x2, &bank.adapters[0], None).unwrap();
        let v1 = l1.to_vec();
        let v2 = l2.to_vec();
        // positions 0..4 unchanged, last position changed
        assert_eq!(&v1[..5 * VOCAB_SIZE], &v2[..5 * VOCAB_SIZE]);
        assert_ne!(&v1[5 * VOCAB_SIZE..], &v2[5 * VOCAB_SIZE..]);
    }

    #[test]
    fn zero_init_adapters_are_interchangeable() {
        let (lm, bank) = setup();
        let tape = Tape::new();
        let mut rng = substream(2, "data");
        let x = init::normal(&mut rng, vec![4, 16], 1.0, false);
        let a = lm.forward_embedded(&tape, &x, &bank.adapters[0], None).unwrap();
        let b = lm.forward_embedded(&tape, &x, &bank.adapters[1], None).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn decode_budget_and_determinism() {
        let (lm, bank) = setup();
        let tape = Tape::new();
        let mut rng = substream(3, "data");
        let prefix = init::normal(&mut rng, vec![3, 16], 1.0, false);
        // Pick a stop token the random model will essentially never emit.
        let out1 = lm.greedy_decode(&bank.adapters[0], &prefix, 3, usize::MAX - 1).unwrap();
        assert_eq!(out1.len(), 3);
        let out2 = lm.greedy_decode(&bank.adapters[0], &prefix, 3, usize::MAX - 1).unwrap();
        assert_eq!(out1, out2);
        let _ = tape;
    }

    #[test]
    fn decode_stops_immediately_on_stop_token() {
        let (lm, bank) = setup();
        let mut rng = substream(4, "data");
        let prefix = init::normal(&mut rng, vec![2, 16], 1.0, false);
        // Find what the model wants to emit first, then declare it the stop token.
        let first = lm.greedy_decode(&bank.adapters[0], &prefix, 1, usize::MAX - 1).unwrap()[0];
        let out = lm.greedy_decode(&bank.adapters[0], &prefix, 5, first).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn context_overflow_is_an_error() {
        let (lm, bank) = setup();
        let tape = Tape::new();
        let x = Tensor::zeros(vec![33, 16], false);
        assert!(lm.forward_embedded(&tape, &x, &bank.adapters[0], None).is_err());
    }
}
