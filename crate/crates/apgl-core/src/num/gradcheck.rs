//! Central-difference gradient checking utilities.
//!
//! Used both by unit tests of individual ops and by the `gradcheck` CLI
//! command, which compares analytic whole-model gradients against finite
//! differences on a tiny batch.

use crate::num::tensor::Tensor;

/// Central finite difference of `eval` w.r.t. every element of
/// `params[target]`, leaving all tensors as found.
pub fn central_diff(
    params: &[Tensor],
    target: usize,
    eval: &impl Fn(&[Tensor]) -> f64,
    h: f64,
) -> Tensor {
    let mut work: Vec<Tensor> = params.to_vec();
    let n = work[target].len();
    let mut out = Tensor::zeros(params[target].dims());
    for j in 0..n {
        let orig = work[target].data()[j];
        work[target].data_mut()[j] = orig + h;
        let up = eval(&work);
        work[target].data_mut()[j] = orig - h;
        let down = eval(&work);
        work[target].data_mut()[j] = orig;
        out.data_mut()[j] = (up - down) / (2.0 * h);
    }
    out
}

/// Worst relative error between an analytic gradient and its finite
/// difference estimate, with an absolute floor for near-zero entries.
pub fn max_relative_error(analytic: &Tensor, fd: &Tensor, atol: f64) -> f64 {
    assert_eq!(analytic.dims(), fd.dims(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &f) in analytic.data().iter().zip(fd.data().iter()) {
        let denom = a.abs().max(f.abs()).max(atol);
        worst = worst.max((a - f).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_recovers_quadratic_slope() {
        let p = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5])];
        let eval = |ps: &[Tensor]| ps[0].data().iter().map(|&x| x * x).sum::<f64>();
        let fd = central_diff(&p, 0, &eval, 1e-5);
        for (j, &x) in p[0].data().iter().enumerate() {
            assert!((fd.data()[j] - 2.0 * x).abs() < 1e-8);
        }
    }

    #[test]
    fn relative_error_reports_worst_entry() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let b = Tensor::from_vec(&[2], vec![1.0, 2.2]);
        let e = max_relative_error(&a, &b, 1e-6);
        assert!((e - 0.2 / 2.2).abs() < 1e-12);
    }
}
