//! Low-rank adapters on frozen linear maps.
//!
//! A wrapped weight `W` (d_out x d_in) behaves as `W + (alpha/r) * B * A`
//! with `B` (d_out x r) zero-initialized and `A` (r x d_in) random, so every
//! adapter is an exact identity delta at initialization. Only A and B train.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor};

use super::init;

#[derive(Clone)]
pub struct LoraFactors {
    pub b: Tensor,
    pub a: Tensor,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraFactors {
    pub fn new(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize, rank: usize, alpha: f64) -> Self {
        LoraFactors {
            b: init::zeros(vec![d_out, rank], true),
            a: init::normal(rng, vec![rank, d_in], 1.0 / (d_in as f64).sqrt(), true),
            alpha,
            rank,
        }
    }

    /// Low-rank delta `(alpha/r) * x . A^T . B^T`, optionally scaled by a
    /// one-element gate tensor (the straight-through routing scalar).
    pub fn delta(&self, tape: &Tape, x: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        let xa = tape.matmul_t(x, &self.a)?;
        let xab = tape.matmul_t(&xa, &self.b)?;
        let scaled = tape.scale(&xab, self.alpha / self.rank as f64);
        match gate {
            Some(g) => tape.mul_scalar_t(&scaled, g),
            None => Ok(scaled),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.a"), self.a.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Frozen linear map `y = x . W^T + bias` with an attached LoRA wrap.
pub struct LoraLinear {
    pub weight: Tensor, // (d_out, d_in), frozen
    pub bias: Tensor,   // (d_out), frozen
    pub lora: LoraFactors,
}

impl LoraLinear {
    pub fn new(
        rng: &mut ChaCha8Rng,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
    ) -> Self {
        LoraLinear {
            weight: init::normal(rng, vec![d_out, d_in], 1.0 / (d_in as f64).sqrt(), false),
            bias: init::zeros(vec![d_out], false),
            lora: LoraFactors::new(rng, d_out, d_in, rank, alpha),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor, gate: Option<&Tensor>) -> Result<Tensor> {
        let base = tape.add_bias(&tape.matmul_t(x, &self.weight)?, &self.bias)?;
        let delta = self.lora.delta(tape, x, gate)?;
        tape.add(&base, &delta)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
        self.lora.params(&format!("{prefix}.lora"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn zero_b_is_identity_delta() {
        let mut rng = substream(1, "test");
        let ll = LoraLinear::new(&mut rng, 4, 3, 2, 4.0);
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.7], false);
        let with = ll.forward(&tape, &x, None).unwrap();
        let base = tape
            .add_bias(
                &tape.matmul(&x, &tape.transpose2d(&ll.weight).unwrap()).unwrap(),
                &ll.bias,
            )
            .unwrap();
        assert_eq!(with.to_vec(), base.to_vec());
    }

    #[test]
    fn rank_one_matches_hand_computed_effective_weight() {
        // 2x2 projection, r = 1: y = x . (W + alpha * B A)^T by hand.
        let mut rng = substream(2, "test");
        let ll = LoraLinear::new(&mut rng, 2, 2, 1, 3.0);
        ll.weight.set_data(vec![1.0, 2.0, -1.0, 0.5]); // W rows: [1,2], [-1,0.5]
        ll.lora.b.set_data(vec![0.5, -1.0]); // B (2x1)
        ll.lora.a.set_data(vec![2.0, 1.0]); // A (1x2)
        // W_eff = W + 3 * B.A = [[1+3,2+1.5],[-1-6,0.5-3]] = [[4,3.5],[-7,-2.5]]
        let tape = Tape::new();
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, 2.0], false);
        let y = ll.forward(&tape, &x, None).unwrap();
        // y = [1*4 + 2*3.5, 1*-7 + 2*-2.5] = [11, -12]
        assert_eq!(y.to_vec(), vec![11.0, -12.0]);
    }
}
