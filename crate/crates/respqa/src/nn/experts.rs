//! Frozen heterogeneous audio-encoder experts.
//!
//! Two architectures are provided so the bank is structurally heterogeneous:
//! a convolutional encoder with mel-axis pooling and a patchify/self-attention
//! encoder. Base parameters are frozen; only the LoRA wrap on each expert's
//! final projection trains. The two default experts produce sequences of
//! different lengths and dimensions for the same spectrogram.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError};

use super::lora::LoraLinear;
use super::{init, ModelConfig};

pub enum AudioExpert {
    Conv(ConvExpert),
    Attn(AttnExpert),
}

impl AudioExpert {
    pub fn kind(&self) -> &'static str {
        match self {
            AudioExpert::Conv(_) => "conv",
            AudioExpert::Attn(_) => "attn",
        }
    }

    /// Output embedding dimension d_e of this expert.
    pub fn d_e(&self) -> usize {
        match self {
            AudioExpert::Conv(e) => e.proj.weight.shape()[0],
            AudioExpert::Attn(e) => e.proj.weight.shape()[0],
        }
    }

    pub fn forward(&self, tape: &Tape, spec: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        match self {
            AudioExpert::Conv(e) => e.forward(tape, spec, gate),
            AudioExpert::Attn(e) => e.forward(tape, spec, gate),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match self {
            AudioExpert::Conv(e) => e.params(prefix, out),
            AudioExpert::Attn(e) => e.params(prefix, out),
        }
    }
}

fn check_spec(spec: &Tensor, mel_bins: usize, frames: usize) -> Result<()> {
    if spec.shape() != [mel_bins, frames] {
        return Err(TensorError::ShapeMismatch {
            op: "encode_audio",
            expected: format!("[{mel_bins}, {frames}]"),
            got: format!("{:?}", spec.shape()),
        });
    }
    if spec.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "encode_audio" });
    }
    Ok(())
}

/// Two conv layers with 2x2 average pooling between them, mel-axis mean
/// pooling, then the LoRA-wrapped final projection. Sequence length is the
/// surviving frame axis.
pub struct ConvExpert {
    mel_bins: usize,
    frames: usize,
    conv1_w: Tensor, // (9, c1) im2col layout, frozen
    conv1_b: Tensor,
    conv2_w: Tensor, // (c1*9, c2), frozen
    conv2_b: Tensor,
    pub proj: LoraLinear, // c2 -> d_e
}

impl ConvExpert {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let [c1, c2] = cfg.conv_channels;
        ConvExpert {
            mel_bins: cfg.mel_bins,
            frames: cfg.frames,
            conv1_w: init::normal(rng, vec![9, c1], 1.0 / 3.0, false),
            conv1_b: init::normal(rng, vec![c1], 0.1, false),
            conv2_w: init::normal(rng, vec![c1 * 9, c2], 1.0 / (9.0 * c1 as f64).sqrt(), false),
            conv2_b: init::normal(rng, vec![c2], 0.1, false),
            proj: LoraLinear::new(rng, cfg.conv_d_e, c2, cfg.audio_lora_rank, cfg.audio_lora_alpha),
        }
    }

    /// Sequence length produced for the configured spectrogram geometry.
    pub fn seq_len(&self) -> usize {
        let w1 = self.frames - 2; // conv 3x3 valid
        let w1p = (w1 - 2) / 2 + 1; // pool 2x2 stride 2
        w1p - 2 // conv 3x3 valid
    }

    pub fn forward(&self, tape: &Tape, spec: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        check_spec(spec, self.mel_bins, self.frames)?;
        let [c1, c2] = [self.conv1_w.shape()[1], self.conv2_w.shape()[1]];
        let (h0, w0) = (self.mel_bins, self.frames);

        let x = tape.reshape(spec, vec![1, h0, w0])?;
        let cols = tape.im2col(&x, 3, 3, 1, 1)?;
        let h = tape.gelu(&tape.add_bias(&tape.matmul(&cols, &self.conv1_w)?, &self.conv1_b)?);
        let (h1, w1) = (h0 - 2, w0 - 2);
        let h = tape.reshape(&tape.transpose2d(&h)?, vec![c1, h1, w1])?;
        let h = tape.avg_pool2d(&h, 2, 2)?;
        let (h1, w1) = ((h1 - 2) / 2 + 1, (w1 - 2) / 2 + 1);

        let cols2 = tape.im2col(&h, 3, 3, 1, 1)?;
        let h = tape.gelu(&tape.add_bias(&tape.matmul(&cols2, &self.conv2_w)?, &self.conv2_b)?);
        let (h2, w2) = (h1 - 2, w1 - 2);
        let h = tape.reshape(&tape.transpose2d(&h)?, vec![c2, h2, w2])?;

        // mel-axis pooling: average over the residual mel dimension
        let pooled = tape.mean_axis(&h, 1)?; // (c2, w2)
        let seq = tape.transpose2d(&pooled)?; // (w2, c2)
        self.proj.forward(tape, &seq, gate)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.conv1.w"), self.conv1_w.clone()));
        out.push((format!("{prefix}.conv1.b"), self.conv1_b.clone()));
        out.push((format!("{prefix}.conv2.w"), self.conv2_w.clone()));
        out.push((format!("{prefix}.conv2.b"), self.conv2_b.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// Patchify + one self-attention block (single head, bidirectional) with
/// learned-at-init positional embeddings, then the LoRA-wrapped final
/// projection. One token per patch.
pub struct AttnExpert {
    mel_bins: usize,
    frames: usize,
    patch: usize,
    embed_w: Tensor, // (patch*patch, d_e), frozen
    embed_b: Tensor,
    pos: Tensor, // (n_patches, d_e), frozen
    ln_g: Tensor,
    ln_b: Tensor,
    wq: Tensor, // (inner, d_e), frozen
    wk: Tensor,
    wv: Tensor,
    wo: Tensor, // (d_e, inner), frozen
    pub proj: LoraLinear, // d_e -> d_e
}

impl AttnExpert {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let p = cfg.patch;
        let d = cfg.attn_d_e;
        let inner = cfg.attn_inner;
        let n_patches = (cfg.mel_bins / p) * (cfg.frames / p);
        AttnExpert {
            mel_bins: cfg.mel_bins,
            frames: cfg.frames,
            patch: p,
            embed_w: init::normal(rng, vec![p * p, d], 1.0 / p as f64, false),
            embed_b: init::normal(rng, vec![d], 0.1, false),
            pos: init::normal(rng, vec![n_patches, d], 0.5, false),
            ln_g: init::ones(vec![d], false),
            ln_b: init::zeros(vec![d], false),
            wq: init::normal(rng, vec![inner, d], 1.0 / (d as f64).sqrt(), false),
            wk: init::normal(rng, vec![inner, d], 1.0 / (d as f64).sqrt(), false),
            wv: init::normal(rng, vec![inner, d], 1.0 / (d as f64).sqrt(), false),
            wo: init::normal(rng, vec![d, inner], 1.0 / (inner as f64).sqrt(), false),
            proj: LoraLinear::new(rng, d, d, cfg.audio_lora_rank, cfg.audio_lora_alpha),
        }
    }

    pub fn seq_len(&self) -> usize {
        (self.mel_bins / self.patch) * (self.frames / self.patch)
    }

    pub fn forward(&self, tape: &Tape, spec: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        check_spec(spec, self.mel_bins, self.frames)?;
        let p = self.patch;
        let x = tape.reshape(spec, vec![1, self.mel_bins, self.frames])?;
        let patches = tape.im2col(&x, p, p, p, p)?; // (n_patches, p*p)
        let emb = tape.add_bias(&tape.matmul(&patches, &self.embed_w)?, &self.embed_b)?;
        let emb = tape.add(&emb, &self.pos)?;

        let a_in = tape.layer_norm(&emb, &self.ln_g, &self.ln_b, 1e-5)?;
        let q = tape.matmul_t(&a_in, &self.wq)?;
        let k = tape.matmul_t(&a_in, &self.wk)?;
        let v = tape.matmul_t(&a_in, &self.wv)?;
        let inner = self.wq.shape()[0] as f64;
        let scores = tape.scale(&tape.matmul_t(&q, &k)?, 1.0 / inner.sqrt());
        let attn = tape.softmax_rows(&scores)?;
        let ctx = tape.matmul(&attn, &v)?;
        let out = tape.matmul_t(&ctx, &self.wo)?;
        let h = tape.add(&emb, &out)?;
        self.proj.forward(tape, &h, gate)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.embed.w"), self.embed_w.clone()));
        out.push((format!("{prefix}.embed.b"), self.embed_b.clone()));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        out.push((format!("{prefix}.ln.g"), self.ln_g.clone()));
        out.push((format!("{prefix}.ln.b"), self.ln_b.clone()));
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        out.push((format!("{prefix}.wo"), self.wo.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

/// The expert bank: at least two architecturally heterogeneous encoders.
pub struct AudioExpertBank {
    pub experts: Vec<AudioExpert>,
}

impl AudioExpertBank {
    /// Default bank: expert 0 convolutional, expert 1 attention-based.
    pub fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        AudioExpertBank {
            experts: vec![
                AudioExpert::Conv(ConvExpert::new(rng, cfg)),
                AudioExpert::Attn(AttnExpert::new(rng, cfg)),
            ],
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Run exactly one expert; the others never touch the input.
    pub fn encode(
        &self,
        tape: &Tape,
        expert_index: usize,
        spec: &Tensor,
        gate: Option<&Tensor>,
    ) -> Result<Tensor> {
        let expert = self.experts.get(expert_index).ok_or(TensorError::Domain {
            op: "encode_audio",
            what: format!("expert index {expert_index} out of {}", self.experts.len()),
        })?;
        expert.forward(tape, spec, gate)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        for (i, e) in self.experts.iter().enumerate() {
            e.params(&format!("audio.expert{i}"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn bank() -> AudioExpertBank {
        let mut rng = substream(11, "init");
        AudioExpertBank::new(&mut rng, &ModelConfig::default())
    }

    #[test]
    fn experts_are_heterogeneous() {
        let b = bank();
        let cfg = ModelConfig::default();
        let tape = Tape::new();
        let spec = Tensor::zeros(vec![cfg.mel_bins, cfg.frames], false);
        let h0 = b.encode(&tape, 0, &spec, None).unwrap();
        let h1 = b.encode(&tape, 1, &spec, None).unwrap();
        assert_ne!(h0.shape()[0], h1.shape()[0], "sequence lengths should differ");
        assert_ne!(h0.shape()[1], h1.shape()[1], "embedding dims should differ");
        assert_eq!(h0.shape(), [29, 48]);
        assert_eq!(h1.shape(), [32, 80]);
    }

    #[test]
    fn zero_input_is_reproducible_bit_exactly() {
        let b = bank();
        let tape = Tape::new();
        let spec = Tensor::zeros(vec![32, 64], false);
        let a = b.encode(&tape, 0, &spec, None).unwrap().to_vec();
        let b2 = b.encode(&tape, 0, &spec, None).unwrap().to_vec();
        assert_eq!(a, b2);
        // Bias pattern: the frozen response to zero input is not all zero.
        assert!(a.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn attention_expert_is_position_sensitive() {
        let b = bank();
        let tape = Tape::new();
        let mut rng = substream(3, "data");
        let data: Vec<f64> = (0..32 * 64).map(|_| crate::nn::init::normal_sample(&mut rng)).collect();
        // Swap two frame columns (same multiset of frames, different order).
        let mut swapped = data.clone();
        for row in 0..32 {
            swapped.swap(row * 64, row * 64 + 40);
        }
        let s1 = Tensor::from_vec(vec![32, 64], data, false);
        let s2 = Tensor::from_vec(vec![32, 64], swapped, false);
        let h1 = b.encode(&tape, 1, &s1, None).unwrap();
        let h2 = b.encode(&tape, 1, &s2, None).unwrap();
        assert_ne!(h1.to_vec(), h2.to_vec());
    }

    #[test]
    fn same_seed_same_output_across_reconstruction() {
        // Rebuilding the bank from the same substream reproduces outputs
        // bit-exactly (the cross-process determinism story).
        let cfg = ModelConfig::default();
        let build = || {
            let mut rng = substream(11, "init");
            AudioExpertBank::new(&mut rng, &cfg)
        };
        let spec_data: Vec<f64> = (0..32 * 64).map(|i| ((i * 37) % 101) as f64 * 0.01).collect();
        let run = |b: &AudioExpertBank| {
            let tape = Tape::new();
            let spec = Tensor::from_vec(vec![32, 64], spec_data.clone(), false);
            b.encode(&tape, 1, &spec, None).unwrap().to_vec()
        };
        assert_eq!(run(&build()), run(&build()));
    }

    #[test]
    fn out_of_range_expert_errors() {
        let b = bank();
        let tape = Tape::new();
        let spec = Tensor::zeros(vec![32, 64], false);
        assert!(b.encode(&tape, 5, &spec, None).is_err());
    }

    #[test]
    fn nonfinite_spectrogram_rejected() {
        let b = bank();
        let tape = Tape::new();
        let mut data = vec![0.0; 32 * 64];
        data[10] = f64::NAN;
        let spec = Tensor::from_vec(vec![32, 64], data, false);
        assert!(b.encode(&tape, 0, &spec, None).is_err());
    }
}
