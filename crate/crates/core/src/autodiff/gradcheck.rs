//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Compares the tape gradient of `f` at `at` against central differences.
///
/// Returns the largest per-coordinate relative error, using the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. A failing `f` yields `f64::INFINITY`.
pub fn grad_check<F>(f: F, at: &Tensor, eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(
        |tape: &Tape, vars: &[Var<'_>]| f(tape, vars[0]),
        std::slice::from_ref(at),
        eps,
    )
}

/// [`grad_check`] over several input tensors at once.
pub fn grad_check_many<F>(f: F, at: &[Tensor], eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(eps > 0.0, "eps must be positive");
    let inputs: Vec<Tensor> = at.iter().map(|t| t.clone().with_grad()).collect();

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = match f(&tape, &vars) {
            Ok(v) => v,
            Err(_) => return f64::INFINITY,
        };
        let grads = match tape.backward(out) {
            Ok(g) => g,
            Err(_) => return f64::INFINITY,
        };
        vars.iter()
            .zip(&inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Option<f64> {
        let tape = Tape::inference();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.leaf(t)).collect();
        f(&tape, &vars).ok().map(|v| v.item())
    };

    let mut worst = 0.0_f64;
    let mut work: Vec<Tensor> = at.to_vec();
    for (ti, tensor) in at.iter().enumerate() {
        for i in 0..tensor.len() {
            let x0 = tensor.data()[i];
            let mut shifted = tensor.data().to_vec();
            shifted[i] = x0 + eps;
            work[ti] = Tensor::new(tensor.shape().to_vec(), shifted.clone()).expect("finite");
            let up = eval(&work);
            shifted[i] = x0 - eps;
            work[ti] = Tensor::new(tensor.shape().to_vec(), shifted).expect("finite");
            let down = eval(&work);
            work[ti] = tensor.clone();
            let (Some(up), Some(down)) = (up, down) else {
                return f64::INFINITY;
            };
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return f64::INFINITY;
            }
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tanh_at_zero() {
        let at = Tensor::vector(vec![0.0]).unwrap();
        let err = grad_check(|_, x| Ok(x.tanh().sum()), &at, 1e-5);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn clip_min_interior_point() {
        let at = Tensor::vector(vec![1.0]).unwrap();
        let err = grad_check(|_, x| Ok(x.clip_min(0.0).sum()), &at, 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn two_layer_tanh_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rand_t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = vec![
            rand_t(vec![5, 3]),
            rand_t(vec![5]),
            rand_t(vec![2, 5]),
            rand_t(vec![2]),
            rand_t(vec![3]),
        ];
        let err = grad_check_many(
            |_, v| {
                let h = v[0].matmul(v[4])?.add(v[1])?.tanh();
                let y = v[2].matmul(h)?.add(v[3])?;
                Ok(y.mul(y)?.sum())
            },
            &inputs,
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn failing_function_reports_infinity() {
        let at = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = grad_check(|_, x| x.slice(1, 5), &at, 1e-5);
        assert!(err.is_infinite());
    }
}
