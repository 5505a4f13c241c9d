//! Central finite-difference validation of backward passes. Always f64.

use super::Tensor;

/// Max over elements of |analytic − central| / max(1, |central|) for a
/// scalar-valued function of one tensor.
pub fn grad_check(
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<f64, String> {
    grad_check_multi(|xs| f(&xs[0]), std::slice::from_ref(x), eps)
}

/// Same over several leaves; every leaf must have `requires_grad`.
pub fn grad_check_multi(
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<f64, String> {
    for x in inputs {
        x.zero_grad();
    }
    let loss = f(inputs);
    if loss.numel() != 1 {
        return Err(format!("gradcheck: loss must be scalar, got {:?}", loss.shape()));
    }
    let l0 = loss.item();
    if !l0.is_finite() {
        return Err(format!("gradcheck: non-finite loss {l0}"));
    }
    loss.backward();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    for (i, g) in analytic.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(format!("gradcheck: non-finite analytic grad in input {i}"));
        }
    }

    let mut max_err = 0.0f64;
    for (pi, x) in inputs.iter().enumerate() {
        for e in 0..x.numel() {
            let orig = x.data()[e];
            x.data_mut()[e] = orig + eps;
            let lp = f(inputs).item();
            x.data_mut()[e] = orig - eps;
            let lm = f(inputs).item();
            x.data_mut()[e] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(format!(
                    "gradcheck: non-finite perturbed loss at input {pi} elem {e}"
                ));
            }
            let central = (lp - lm) / (2.0 * eps);
            let err = (analytic[pi][e] - central).abs() / central.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        let n: usize = shape.iter().product();
        Tensor::leaf(shape, (0..n).map(|_| rng.normal()).collect(), true)
    }

    #[test]
    fn linear_layer_grads_match() {
        let x = randn(&[3, 4], 1);
        let w = randn(&[4, 2], 2);
        let err = grad_check_multi(
            |ins| ins[0].matmul(&ins[1]).sum_all(),
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_grad() {
        // softmax rows always sum to 1, so the loss is constant
        let x = randn(&[5], 3);
        let err = grad_check(|x| x.softmax(0).sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
        assert!(x.grad().unwrap().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn three_layer_composite_matches_finite_differences() {
        let x = randn(&[2, 3], 4);
        let w1 = randn(&[3, 5], 5);
        let w2 = randn(&[5, 2], 6);
        let err = grad_check_multi(
            |ins| {
                ins[0]
                    .matmul(&ins[1])
                    .gelu()
                    .matmul(&ins[2])
                    .sigmoid()
                    .mean_all()
            },
            &[x, w1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn unused_parameter_reports_zero_grad() {
        let x = randn(&[3], 7);
        let unused = randn(&[2], 8);
        x.zero_grad();
        unused.zero_grad();
        x.mul(&x).sum_all().backward();
        assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0]);
        assert!(x.grad().unwrap().iter().any(|&g| g != 0.0));
    }
}
