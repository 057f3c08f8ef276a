use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]. Coordinates whose gradient is
/// analytically zero (an attention key bias under softmax shift
/// invariance, say) only carry finite-difference roundoff, which this
/// turns into a small absolute error instead of a large relative one.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error used by every gradient check in the crate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error over all coordinates
/// of `x`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let eval = |input: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.constant(input);
        let out = f(&mut g, xv)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad(true));
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + T::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - T::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item().as_f64())
}
