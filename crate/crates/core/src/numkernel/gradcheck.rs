use crate::scalar::Scalar;

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + T::of(1e-12))
}

/// Largest relative error between `analytic` and central finite differences of `f`.
///
/// `f` is evaluated at `params ± step·e_i` for every coordinate `i`.
pub fn finite_diff_check<T, F>(mut f: F, params: &[T], analytic: &[T], step: T) -> T
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut work = params.to_vec();
    let mut worst = T::zero();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + step;
        let up = f(&work);
        work[i] = orig - step;
        let down = f(&work);
        work[i] = orig;
        let numeric = (up - down) / (step + step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::{Tape, Tensor};

    #[test]
    fn quadratic() {
        let err = finite_diff_check(|w: &[f64]| w[0] * w[0], &[1.0], &[2.0], 1e-5);
        assert!(err < 1e-9);
    }

    #[test]
    fn constant_function() {
        let err = finite_diff_check(|_: &[f64]| 3.0, &[0.3, -0.2], &[0.0, 0.0], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn cross_entropy_on_three_logits() {
        let loss = |w: &[f64]| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::new(vec![1, 3], w.to_vec()).unwrap());
            let l = tape.cross_entropy(x, &[1]).unwrap();
            (tape.value(l).item().unwrap(), tape, x, l)
        };
        let w = [0.3, -0.7, 1.1];
        let (_, mut tape, x, l) = loss(&w);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap().to_vec();
        let err = finite_diff_check(|p| loss(p).0, &w, &g, 1e-5);
        assert!(err < 1e-6, "{err}");
    }
}
