use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the worst relative error
/// `|analytic − numeric| / max(1e-8, |analytic|)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let out = f(&mut g, xv)?;
    let analytic = g
        .backward(out)?
        .get(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(probe, false);
        let out = f(&mut g, v)?;
        g.value(out)
            .item()
            .ok_or_else(|| Error::Contract("grad_check function must return a scalar".into()))
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn exact_for_sum() {
        let err = grad_check(|g, x| Ok(g.sum(x)), &random(&[3, 4], 1), 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let err = grad_check(
            |g, x| {
                let y = g.sigmoid(x);
                Ok(g.sum(y))
            },
            &random(&[10], 2),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv1d_sum() {
        let w = random(&[3, 2, 3], 4);
        let b = random(&[3], 5);
        let err = grad_check(
            |g, x| {
                let w = g.input(w.clone());
                let b = g.input(b.clone());
                let y = g.conv1d(x, w, Some(b), 1, 1, 1)?;
                Ok(g.sum(y))
            },
            &random(&[2, 2, 7], 3),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_bad_eps_and_vector_output() {
        let x = random(&[2], 0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.5).is_err());
        assert!(grad_check(|g, x| Ok(g.relu(x)), &x, 1e-5).is_err());
    }
}
