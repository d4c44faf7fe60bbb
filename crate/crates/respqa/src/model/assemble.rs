//! Input sequence assembly: [prompt; selected audio prefix; answer tag;
//! teacher-forced answer], with role tags and the supervised positions.

use crate::nn::tokenizer::{self, BOS, EOS, PAD};
use crate::nn::FrozenCausalLm;
use crate::tensor::{Result, Tape, Tensor};

pub const ANSWER_TAG: &str = "Answer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Audio,
    AnswerTag,
    Answer,
}

pub struct Assembly {
    /// (L, d) input embeddings, positional rows not yet added.
    pub embeds: Tensor,
    pub roles: Vec<Role>,
    /// Next-token target ids, full length; meaningful only at
    /// `loss_positions`, PAD elsewhere.
    pub targets: Vec<usize>,
    /// Positions whose next-token prediction is supervised: the final
    /// answer-tag position (predicting the first answer token) through the
    /// last answer position (predicting EOS).
    pub loss_positions: Vec<usize>,
    pub prompt_len: usize,
    pub audio_len: usize,
}

fn prompt_ids(question: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(tokenizer::encode(question));
    ids
}

/// Training assembly with teacher-forced answer embeddings and right-shifted
/// targets inside the answer region.
pub fn build_train(
    tape: &Tape,
    lm: &FrozenCausalLm,
    question: &str,
    audio_prefix: &Tensor,
    answer: &str,
) -> Result<Assembly> {
    let p_ids = prompt_ids(question);
    let tag_ids = tokenizer::encode(ANSWER_TAG);
    let ans_ids = tokenizer::encode(answer);
    assert!(!ans_ids.is_empty(), "empty answer text");

    let h_p = lm.embed_tokens(tape, &p_ids)?;
    let h_tag = lm.embed_tokens(tape, &tag_ids)?;
    let h_y = lm.embed_tokens(tape, &ans_ids)?;
    let embeds = tape.concat(&[&h_p, audio_prefix, &h_tag, &h_y], 0)?;

    let audio_len = audio_prefix.shape()[0];
    let mut roles = Vec::with_capacity(embeds.shape()[0]);
    roles.extend(std::iter::repeat(Role::Prompt).take(p_ids.len()));
    roles.extend(std::iter::repeat(Role::Audio).take(audio_len));
    roles.extend(std::iter::repeat(Role::AnswerTag).take(tag_ids.len()));
    roles.extend(std::iter::repeat(Role::Answer).take(ans_ids.len()));

    let total = roles.len();
    let ans_start = p_ids.len() + audio_len + tag_ids.len();
    let mut targets = vec![PAD; total];
    let mut loss_positions = Vec::with_capacity(ans_ids.len() + 1);
    // The final tag position predicts the first answer token.
    targets[ans_start - 1] = ans_ids[0];
    loss_positions.push(ans_start - 1);
    for i in 0..ans_ids.len() {
        let pos = ans_start + i;
        targets[pos] = if i + 1 < ans_ids.len() { ans_ids[i + 1] } else { EOS };
        loss_positions.push(pos);
    }

    Ok(Assembly {
        embeds,
        roles,
        targets,
        loss_positions,
        prompt_len: p_ids.len(),
        audio_len,
    })
}

/// Generation prefix: [prompt; audio prefix; answer tag].
pub fn build_prefix(
    tape: &Tape,
    lm: &FrozenCausalLm,
    question: &str,
    audio_prefix: &Tensor,
) -> Result<Tensor> {
    let p_ids = prompt_ids(question);
    let tag_ids = tokenizer::encode(ANSWER_TAG);
    let h_p = lm.embed_tokens(tape, &p_ids)?;
    let h_tag = lm.embed_tokens(tape, &tag_ids)?;
    tape.concat(&[&h_p, audio_prefix, &h_tag], 0)
}

/// Prompt token embeddings alone (router inputs).
pub fn prompt_embeds(tape: &Tape, lm: &FrozenCausalLm, question: &str) -> Result<Tensor> {
    lm.embed_tokens(tape, &prompt_ids(question))
}

/// Sum of -log p(target) over the supervised positions, plus the count.
/// Only supervised rows are gathered, so targets outside `loss_positions`
/// cannot influence the value.
pub fn masked_nll(tape: &Tape, logits: &Tensor, assembly: &Assembly) -> Result<(Tensor, usize)> {
    let logp = tape.log_softmax_rows(logits)?;
    let rows = tape.gather_rows(&logp, &assembly.loss_positions)?;
    let ids: Vec<usize> = assembly.loss_positions.iter().map(|&p| assembly.targets[p]).collect();
    let picked = tape.pick_per_row(&rows, &ids)?;
    let nll = tape.neg(&tape.sum(&picked));
    Ok((nll, assembly.loss_positions.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use crate::rng::substream;

    fn lm() -> FrozenCausalLm {
        let mut rng = substream(1, "init");
        FrozenCausalLm::new(&mut rng, &ModelConfig::tiny())
    }

    #[test]
    fn segment_order_and_mask() {
        let lm = lm();
        let tape = Tape::new();
        let audio = Tensor::zeros(vec![5, 8], false);
        let asm = build_train(&tape, &lm, "Is it?", &audio, "yes").unwrap();
        // BOS + 6 chars prompt, 5 audio, 7 tag chars, 3 answer chars.
        assert_eq!(asm.roles.len(), 7 + 5 + 7 + 3);
        assert_eq!(asm.prompt_len, 7);
        assert_eq!(asm.roles[6], Role::Prompt);
        assert_eq!(asm.roles[7], Role::Audio);
        assert_eq!(asm.roles[12], Role::AnswerTag);
        assert_eq!(asm.roles[19], Role::Answer);
        // Supervised region: last tag position + every answer position.
        assert_eq!(asm.loss_positions, vec![18, 19, 20, 21]);
        // Targets: 'y','e','s',EOS
        let y = tokenizer::encode("yes");
        assert_eq!(asm.targets[18], y[0]);
        assert_eq!(asm.targets[19], y[1]);
        assert_eq!(asm.targets[20], y[2]);
        assert_eq!(asm.targets[21], tokenizer::EOS);
    }

    #[test]
    fn nll_hand_oracle() {
        // Two supervised positions with model probs 0.5 and 0.25 on the
        // targets: mean = -(ln 0.5 + ln 0.25)/2 = 1.0397207...
        let tape = Tape::new();
        let logits = Tensor::from_vec(
            vec![2, 2],
            vec![
                0.0,
                0.0, // softmax -> [0.5, 0.5]; target 0 -> p = 0.5
                (3.0f64).ln(),
                (1.0f64).ln(), // softmax -> [0.75, 0.25]; target 1 -> 0.25
            ],
            false,
        );
        let asm = Assembly {
            embeds: Tensor::zeros(vec![2, 1], false),
            roles: vec![Role::Answer; 2],
            targets: vec![0, 1],
            loss_positions: vec![0, 1],
            prompt_len: 0,
            audio_len: 0,
        };
        let (nll, count) = masked_nll(&tape, &logits, &asm).unwrap();
        let main = nll.item() / count as f64;
        assert!((main - 1.039721).abs() < 1e-6, "main {main}");
    }

    #[test]
    fn corrupting_unsupervised_targets_is_exactly_invisible() {
        let lm = lm();
        let tape = Tape::new();
        let audio = Tensor::zeros(vec![4, 8], false);
        let mut asm = build_train(&tape, &lm, "What is it?", &audio, "copd").unwrap();
        let logits = lm
            .forward_embedded(&tape, &asm.embeds, &crate::nn::LoraBank::new(
                &mut substream(2, "init"),
                &ModelConfig::tiny(),
            ).adapters[0], None)
            .unwrap();
        let (a, _) = masked_nll(&tape, &logits, &asm).unwrap();
        for pos in 0..asm.targets.len() {
            if !asm.loss_positions.contains(&pos) {
                asm.targets[pos] = 17; // arbitrary garbage
            }
        }
        let (b, _) = masked_nll(&tape, &logits, &asm).unwrap();
        assert_eq!(a.item().to_bits(), b.item().to_bits());
    }
}
