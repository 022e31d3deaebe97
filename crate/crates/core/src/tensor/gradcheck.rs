//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{DregError, Result};

/// Check the analytic gradient of `f` with respect to every input against
/// central finite differences of step `step`.
///
/// For each input at most `max_probes_per_input` elements are probed
/// (deterministically chosen through `rng`); `None` probes every element.
/// Returns the maximum relative error `|a - n| / max(|a|, |n|, 1)`.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    max_probes_per_input: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs
        .iter()
        .map(|t| Tensor::leaf(t.data().to_vec(), t.shape(), true))
        .collect::<Result<_>>()?;
    let loss = f(&tracked)?;
    if loss.numel() != 1 {
        return Err(DregError::NonScalarLoss(loss.shape().to_vec()));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| {
            t.grad().ok_or_else(|| {
                DregError::Numerical("gradient did not reach a grad_check input".into())
            })
        })
        .collect::<Result<_>>()?;

    let mut worst: f64 = 0.0;
    for (i, base) in tracked.iter().enumerate() {
        let mut idxs: Vec<usize> = (0..base.numel()).collect();
        if let Some(limit) = max_probes_per_input {
            idxs.shuffle(rng);
            idxs.truncate(limit);
            idxs.sort_unstable();
        }
        for &j in &idxs {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe: Vec<Tensor> = tracked.clone();
                let mut data = base.data().to_vec();
                data[j] += delta;
                probe[i] = Tensor::leaf(data, base.shape(), true)?;
                Ok(f(&probe)?.item())
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn composed_product_passes() {
        // x*y + x^2, the composite from the elementwise op contract
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x =
            Tensor::constant((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), &[6]).unwrap();
        let y =
            Tensor::constant((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), &[6]).unwrap();
        let err = grad_check(
            |ins| ins[0].mul(&ins[1])?.sum().add(&ins[0].square().sum()),
            &[x, y],
            1e-5,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn detects_a_broken_gradient() {
        // sum(x) reported through a wrong-scale op: mean pretending to be sum
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::constant(vec![0.3, -0.6, 1.1], &[3]).unwrap();
        let err = grad_check(
            |ins| Ok(ins[0].mean().mul_scalar(3.0).square()),
            &[x.clone()],
            1e-5,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-6);
        // and a genuinely non-smooth point trips the checker
        let kinked = Tensor::constant(vec![0.0], &[1]).unwrap();
        let err = grad_check(
            |ins| Ok(crate::tensor::leaky_relu(&ins[0], 0.1).sum()),
            &[kinked],
            1e-5,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(
            err > 1e-2,
            "kink at 0 should disagree with central differences, got {err}"
        );
    }
}
