//! Expert-specific aligners: token-wise two-layer GELU MLPs mapping each
//! expert's embedding dimension to the language-model hidden size.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Result, Tape, Tensor, TensorError};

use super::init;

pub struct Aligner {
    pub w1: Tensor, // (2*d_model, d_e)
    pub b1: Tensor,
    pub w2: Tensor, // (d_model, 2*d_model)
    pub b2: Tensor,
}

impl Aligner {
    pub fn new(rng: &mut ChaCha8Rng, d_e: usize, d_model: usize) -> Self {
        let hidden = 2 * d_model;
        Aligner {
            w1: init::normal(rng, vec![hidden, d_e], 1.0 / (d_e as f64).sqrt(), true),
            b1: init::zeros(vec![hidden], true),
            w2: init::normal(rng, vec![d_model, hidden], 1.0 / (hidden as f64).sqrt(), true),
            b2: init::zeros(vec![d_model], true),
        }
    }

    /// Token-wise map; output keeps the input sequence length.
    pub fn forward(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        let d_e = self.w1.shape()[1];
        if h.shape().len() != 2 || h.shape()[1] != d_e {
            return Err(TensorError::ShapeMismatch {
                op: "align",
                expected: format!("[*, {d_e}]"),
                got: format!("{:?}", h.shape()),
            });
        }
        let mid = tape.gelu(&tape.add_bias(&tape.matmul_t(h, &self.w1)?, &self.b1)?);
        tape.add_bias(&tape.matmul_t(&mid, &self.w2)?, &self.b2)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w1"), self.w1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.w2"), self.w2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::tensor::gradcheck;

    #[test]
    fn single_token_shape_contract() {
        let mut rng = substream(5, "init");
        let al = Aligner::new(&mut rng, 48, 64);
        let tape = Tape::new();
        let h = Tensor::zeros(vec![1, 48], false);
        let out = al.forward(&tape, &h).unwrap();
        assert_eq!(out.shape(), [1, 64]);
    }

    #[test]
    fn zero_weights_map_every_token_to_bias_image() {
        let mut rng = substream(5, "init");
        let al = Aligner::new(&mut rng, 4, 6);
        al.w1.set_data(vec![0.0; al.w1.numel()]);
        al.w2.set_data(vec![0.0; al.w2.numel()]);
        al.b2.set_data(vec![0.25, -1.0, 0.5, 2.0, 0.0, -0.125]);
        let tape = Tape::new();
        let h = Tensor::from_vec(vec![3, 4], (0..12).map(|i| i as f64).collect(), false);
        let out = al.forward(&tape, &h).unwrap();
        for r in 0..3 {
            assert_eq!(&out.to_vec()[r * 6..(r + 1) * 6], &[0.25, -1.0, 0.5, 2.0, 0.0, -0.125]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = substream(5, "init");
        let al = Aligner::new(&mut rng, 48, 64);
        let tape = Tape::new();
        let h = Tensor::zeros(vec![2, 47], false);
        assert!(al.forward(&tape, &h).is_err());
    }

    #[test]
    fn gradcheck_through_aligner_and_scalar_head() {
        let mut rng = substream(9, "init");
        let al = Aligner::new(&mut rng, 4, 6);
        let x = init::normal(&mut rng, vec![3, 4], 1.0, true);
        let err = gradcheck(
            |tape, x| {
                let y = al.forward(tape, x)?;
                tape.mean(&y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "gradcheck err {err}");
    }
}
