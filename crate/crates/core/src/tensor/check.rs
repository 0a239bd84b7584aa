//! Central finite-difference gradient checking.

use super::{Graph, Result, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares analytic gradients against fp64 central differences.
///
/// `f` builds a scalar loss from a lifted copy of `x` on the supplied graph;
/// it must be deterministic. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`. Any NaN encountered along the
/// way is reported as `f64::INFINITY` so every tolerance comparison fails.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, &Var) -> Result<Var>,
{
    let g = Graph::new();
    let v = g.leaf(x);
    let loss = f(&g, &v)?;
    g.backward(&loss)?;
    let analytic = v.grad();

    let eval = |probe: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let v = g.leaf(probe);
        f(&g, &v)?.value().as_scalar()
    };

    let mut max_err: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn constant_gradient_is_exact() {
        let x = Tensor::new(vec![3], vec![0.2, -1.3, 4.0]).unwrap();
        let err = finite_diff_check(|_, v| v.sum_all(), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn softplus_grid_matches() {
        let xs: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let x = Tensor::new(vec![xs.len()], xs).unwrap();
        let err =
            finite_diff_check(|_, v| v.softplus()?.sum_all(), &x, DEFAULT_EPS).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn randomized_elementwise_chain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(vec![4, 3], -1.5, 1.5, &mut rng);
        let err = finite_diff_check(
            |_, v| v.silu()?.sigmoid()?.mul(v)?.sum_all(),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn conv_gradient_matches() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::rand_uniform(vec![5, 2], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform(vec![3, 2], -1.0, 1.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let wv = g.leaf(&w);
                let b = g.leaf(&Tensor::zeros(vec![2]));
                v.causal_conv1d(&wv, &b)?.silu()?.sum_all()
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }
}
