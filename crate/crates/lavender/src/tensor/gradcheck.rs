//! Central-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const EPS_DEFAULT: f64 = 1e-5;

/// Compare the analytic gradient of a scalar-valued graph function against
/// central differences at `x`. Returns the maximum over elements of
/// `|analytic - numeric| / (|numeric| + 1e-12)`.
///
/// `build` receives a fresh graph and the registered input and must return
/// a scalar node. `eps` must lie in [1e-7, 1e-3].
pub fn grad_check<F>(build: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid {
            op: "grad_check",
            detail: format!("eps {eps} outside [1e-7, 1e-3]"),
        });
    }

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.param(t);
        let out = build(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(Error::Invalid {
                op: "grad_check",
                detail: format!("function must be scalar, got shape {:?}", val.shape()),
            });
        }
        let y = val.data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", node: out.index() });
        }
        Ok(y)
    };

    // Analytic gradient.
    let mut g = Graph::new();
    let v = g.param(x);
    let out = build(&mut g, v)?;
    g.backward(out)?;
    let analytic = g.grad_or_zero(v);

    // Central differences, one element at a time.
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let rel = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn sum_of_squares_checks_out() {
        let mut rng = stream(42, Stream::Other(10));
        let x = Tensor::randn(vec![4, 4], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel error {err}");
    }

    #[test]
    fn softmax_sum_is_constant() {
        // f(x) = sum(softmax(x)) == 1 per row, so the gradient is ~0.
        let mut rng = stream(43, Stream::Other(11));
        let x = Tensor::randn(vec![2, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.param(&x);
        let s = g.softmax(v, None).unwrap();
        let out = g.sum_all(s).unwrap();
        g.backward(out).unwrap();
        for gi in g.grad_or_zero(v).data() {
            assert!(gi.abs() < 1e-12, "constant function grad {gi}");
        }
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|g, v| g.sum_all(v), &x, 1e-2).is_err());
    }
}
