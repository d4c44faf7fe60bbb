//! Router inputs.
//!
//! Audio stage: a shallow spectrogram proxy (one conv, global mean pool,
//! linear to d_r), a question pooler, and a single-head cross-attention
//! fusion of question tokens over proxy audio tokens. The proxy cost never
//! depends on which expert is later selected.
//!
//! Language stage: pooled summaries of the selected aligned audio prefix
//! and of the prompt embeddings, plus a lightweight cross-attention fusion
//! of the two. Inputs are computed from the selected expert's aligned
//! output only.

use rand_chacha::ChaCha8Rng;

use crate::nn::init;
use crate::tensor::{Result, Tape, Tensor};

use super::RouterPolicy;

/// Two-layer feed-forward router head: d_in -> hidden -> n_experts.
pub struct RouterHead {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl RouterHead {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize, n_out: usize) -> Self {
        RouterHead {
            w1: init::normal(rng, vec![hidden, d_in], 1.0 / (d_in as f64).sqrt(), true),
            b1: init::zeros(vec![hidden], true),
            w2: init::normal(rng, vec![n_out, hidden], 1.0 / (hidden as f64).sqrt(), true),
            b2: init::zeros(vec![n_out], true),
        }
    }

    /// Logits over experts from a rank-1 routing vector. The input is
    /// RMS-normalized so router sharpness is set by the head weights, not
    /// by the (expert-dependent) magnitude of the pooled features.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let d = x.numel();
        let sq = tape.mul(x, x)?;
        let ms = tape.add_const(&tape.mean(&sq)?, 1e-8);
        let inv_rms = tape.exp(&tape.scale(&tape.log(&ms)?, -0.5));
        let xn = tape.mul_scalar_t(x, &inv_rms)?;
        let row = tape.reshape(&xn, vec![1, d])?;
        let h = tape.gelu(&tape.add_bias(&tape.matmul_t(&row, &self.w1)?, &self.b1)?);
        let logits = tape.add_bias(&tape.matmul_t(&h, &self.w2)?, &self.b2)?;
        let n = logits.numel();
        tape.reshape(&logits, vec![n])
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

/// Single-head cross-attention block used by both fusion variants:
/// queries from one token set, keys/values from another, mean-pooled
/// output projected to `d_out`.
pub struct CrossFusion {
    wq: Tensor, // (inner, d_q)
    wk: Tensor, // (inner, d_kv)
    wv: Tensor, // (inner, d_kv)
    wo: Tensor, // (d_out, inner)
    bo: Tensor,
}

impl CrossFusion {
    pub fn new(rng: &mut ChaCha8Rng, d_q: usize, d_kv: usize, inner: usize, d_out: usize) -> Self {
        CrossFusion {
            wq: init::normal(rng, vec![inner, d_q], 1.0 / (d_q as f64).sqrt(), true),
            wk: init::normal(rng, vec![inner, d_kv], 1.0 / (d_kv as f64).sqrt(), true),
            wv: init::normal(rng, vec![inner, d_kv], 1.0 / (d_kv as f64).sqrt(), true),
            wo: init::normal(rng, vec![d_out, inner], 1.0 / (inner as f64).sqrt(), true),
            bo: init::zeros(vec![d_out], true),
        }
    }

    /// queries (Lq, d_q) attend over keys/values (Lk, d_kv); returns the
    /// mean-pooled attended representation as a rank-1 (d_out) vector.
    pub fn forward(&self, tape: &Tape, queries: &Tensor, keys: &Tensor) -> Result<Tensor> {
        let q = tape.matmul_t(queries, &self.wq)?;
        let k = tape.matmul_t(keys, &self.wk)?;
        let v = tape.matmul_t(keys, &self.wv)?;
        let inner = self.wq.shape()[0] as f64;
        let scores = tape.scale(&tape.matmul_t(&q, &k)?, 1.0 / inner.sqrt());
        let probs = tape.softmax_rows(&scores)?;
        let ctx = tape.matmul(&probs, &v)?;
        let out = tape.add_bias(&tape.matmul_t(&ctx, &self.wo)?, &self.bo)?;
        tape.mean_axis(&out, 0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        out.push((format!("{prefix}.bo"), self.bo.clone()));
    }
}

/// Audio-stage routing inputs. All three policies emit a d_r vector.
pub struct AudioRoutingProxy {
    mel_bins: usize,
    frames: usize,
    conv_w: Tensor, // (9, channels)
    conv_b: Tensor,
    pool_proj_w: Tensor, // (d_r, channels)
    pool_proj_b: Tensor,
    token_proj_w: Tensor, // (d_r, channels) for fused proxy tokens
    token_proj_b: Tensor,
    q_proj_w: Tensor, // (d_r, d_model)
    q_proj_b: Tensor,
    fusion: CrossFusion, // question tokens over proxy audio tokens
    d_r: usize,
}

impl AudioRoutingProxy {
    pub fn new(
        rng: &mut ChaCha8Rng,
        mel_bins: usize,
        frames: usize,
        channels: usize,
        d_model: usize,
        d_r: usize,
    ) -> Self {
        AudioRoutingProxy {
            mel_bins,
            frames,
            conv_w: init::normal(rng, vec![9, channels], 1.0 / 3.0, true),
            conv_b: init::zeros(vec![channels], true),
            pool_proj_w: init::normal(rng, vec![d_r, channels], 1.0 / (channels as f64).sqrt(), true),
            pool_proj_b: init::zeros(vec![d_r], true),
            token_proj_w: init::normal(rng, vec![d_r, channels], 1.0 / (channels as f64).sqrt(), true),
            token_proj_b: init::zeros(vec![d_r], true),
            q_proj_w: init::normal(rng, vec![d_r, d_model], 1.0 / (d_model as f64).sqrt(), true),
            q_proj_b: init::zeros(vec![d_r], true),
            fusion: CrossFusion::new(rng, d_r, d_r, d_r, d_r),
            d_r,
        }
    }

    /// Shallow conv feature map: (positions, channels) over the whole grid.
    fn feature_map(&self, tape: &Tape, spec: &Tensor) -> Result<Tensor> {
        let x = tape.reshape(spec, vec![1, self.mel_bins, self.frames])?;
        let cols = tape.im2col(&x, 3, 3, 1, 1)?;
        let h = tape.add_bias(&tape.matmul(&cols, &self.conv_w)?, &self.conv_b)?;
        Ok(tape.gelu(&h))
    }

    /// Proxy audio tokens: one d_r token per surviving frame column.
    fn proxy_tokens(&self, tape: &Tape, spec: &Tensor) -> Result<Tensor> {
        let channels = self.conv_w.shape()[1];
        let (oh, ow) = (self.mel_bins - 2, self.frames - 2);
        let map = self.feature_map(tape, spec)?;
        let by_channel = tape.reshape(&tape.transpose2d(&map)?, vec![channels, oh, ow])?;
        let time_profile = tape.mean_axis(&by_channel, 1)?; // (channels, ow)
        let tokens = tape.transpose2d(&time_profile)?; // (ow, channels)
        tape.add_bias(
            &tape.matmul_t(&tokens, &self.token_proj_w)?,
            &self.token_proj_b,
        )
    }

    /// Audio-only summary: conv map, global mean pool, linear to d_r.
    pub fn z_audio(&self, tape: &Tape, spec: &Tensor) -> Result<Tensor> {
        let map = self.feature_map(tape, spec)?;
        let pooled = tape.mean_axis(&map, 0)?; // (channels)
        let channels = pooled.numel();
        let row = tape.reshape(&pooled, vec![1, channels])?;
        let z = tape.add_bias(
            &tape.matmul_t(&row, &self.pool_proj_w)?,
            &self.pool_proj_b,
        )?;
        tape.reshape(&z, vec![self.d_r])
    }

    /// Question-only summary: mean of prompt token embeddings, projected.
    pub fn z_question(&self, tape: &Tape, prompt_embeds: &Tensor) -> Result<Tensor> {
        let pooled = tape.mean_axis(prompt_embeds, 0)?;
        let d = pooled.numel();
        let row = tape.reshape(&pooled, vec![1, d])?;
        let z = tape.add_bias(
            &tape.matmul_t(&row, &self.q_proj_w)?,
            &self.q_proj_b,
        )?;
        tape.reshape(&z, vec![self.d_r])
    }

    /// Fused summary: question tokens cross-attend over proxy audio tokens.
    pub fn z_fused(&self, tape: &Tape, spec: &Tensor, prompt_embeds: &Tensor) -> Result<Tensor> {
        let audio_tokens = self.proxy_tokens(tape, spec)?;
        let q_tokens = tape.add_bias(
            &tape.matmul_t(prompt_embeds, &self.q_proj_w)?,
            &self.q_proj_b,
        )?;
        self.fusion.forward(tape, &q_tokens, &audio_tokens)
    }

    pub fn input_for(
        &self,
        tape: &Tape,
        policy: RouterPolicy,
        spec: &Tensor,
        prompt_embeds: &Tensor,
    ) -> Result<Tensor> {
        match policy {
            RouterPolicy::Audio => self.z_audio(tape, spec),
            RouterPolicy::Question => self.z_question(tape, prompt_embeds),
            RouterPolicy::Fused => self.z_fused(tape, spec, prompt_embeds),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.conv.w"), self.conv_w.clone()));
        out.push((format!("{prefix}.conv.b"), self.conv_b.clone()));
        out.push((format!("{prefix}.pool.w"), self.pool_proj_w.clone()));
        out.push((format!("{prefix}.pool.b"), self.pool_proj_b.clone()));
        out.push((format!("{prefix}.token.w"), self.token_proj_w.clone()));
        out.push((format!("{prefix}.token.b"), self.token_proj_b.clone()));
        out.push((format!("{prefix}.q.w"), self.q_proj_w.clone()));
        out.push((format!("{prefix}.q.b"), self.q_proj_b.clone()));
        self.fusion.params(&format!("{prefix}.fusion"), out);
    }
}

/// Language-stage routing inputs in the LM hidden space.
pub struct LanguageRoutingInput {
    fusion: CrossFusion, // prompt tokens over aligned audio tokens
}

impl LanguageRoutingInput {
    pub fn new(rng: &mut ChaCha8Rng, d_model: usize, inner: usize) -> Self {
        LanguageRoutingInput {
            fusion: CrossFusion::new(rng, d_model, d_model, inner, d_model),
        }
    }

    /// Pooled selected-aligned-audio summary.
    pub fn z_audio(&self, tape: &Tape, aligned: &Tensor) -> Result<Tensor> {
        tape.mean_axis(aligned, 0)
    }

    /// Pooled prompt summary.
    pub fn z_question(&self, tape: &Tape, prompt_embeds: &Tensor) -> Result<Tensor> {
        tape.mean_axis(prompt_embeds, 0)
    }

    /// Cross-attention between prompt tokens and the aligned audio prefix.
    pub fn z_fused(&self, tape: &Tape, aligned: &Tensor, prompt_embeds: &Tensor) -> Result<Tensor> {
        self.fusion.forward(tape, prompt_embeds, aligned)
    }

    pub fn input_for(
        &self,
        tape: &Tape,
        policy: RouterPolicy,
        aligned: &Tensor,
        prompt_embeds: &Tensor,
    ) -> Result<Tensor> {
        match policy {
            RouterPolicy::Audio => self.z_audio(tape, aligned),
            RouterPolicy::Question => self.z_question(tape, prompt_embeds),
            RouterPolicy::Fused => self.z_fused(tape, aligned, prompt_embeds),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.fusion.params(&format!("{prefix}.fusion"), out);
    }
}
