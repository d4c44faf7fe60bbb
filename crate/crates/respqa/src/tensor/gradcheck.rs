//! Finite-difference verification of backward rules.

use super::{Result, Tape, Tensor, TensorError};

/// Compare the taped gradient of a scalar-valued function against central
/// finite differences at every coordinate of `x`. Returns the maximum of
/// `|analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be deterministic; `eps` must lie in (0, 1e-3].
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    let n = x.numel();
    gradcheck_coords(f, x, eps, &(0..n).collect::<Vec<_>>())
}

/// [`gradcheck`] restricted to a subset of coordinates (used for expensive
/// end-to-end losses where probing every coordinate is wasteful).
pub fn gradcheck_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    assert!(eps > 0.0 && eps <= 1e-3, "eps must be in (0, 1e-3]");
    let probe = Tensor::from_vec(x.shape().to_vec(), x.to_vec(), true);
    let tape = Tape::new();
    let loss = f(&tape, &probe)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    if !loss.item().is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" });
    }
    tape.backward(&loss)?;
    let analytic = probe
        .grad()
        .unwrap_or_else(|| vec![0.0; probe.numel()]);

    let eval_at = |i: usize, delta: f64| -> Result<f64> {
        let mut data = x.to_vec();
        data[i] += delta;
        let shifted = Tensor::from_vec(x.shape().to_vec(), data, false);
        let tape = Tape::new();
        let out = f(&tape, &shifted)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "gradcheck" });
        }
        Ok(v)
    };

    let mut worst = 0.0_f64;
    for &i in coords {
        let plus = eval_at(i, eps)?;
        let minus = eval_at(i, -eps)?;
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
