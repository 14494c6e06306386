//! Diagonal-Gaussian variational machinery: encoder heads, reparameterized
//! sampling, closed-form KL to the standard-normal prior, and stochastic
//! KL-weight sampling.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::AdvError;

/// (mean, log-variance) pair defining a diagonal-Gaussian posterior.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLatent {
    pub mean: Value,
    pub log_var: Value,
    pub dim: usize,
}

/// How a KL penalty weight is drawn each training batch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct BetaSpec {
    pub mu: f64,
    pub sigma: f64,
    pub floor: f64,
}

impl BetaSpec {
    pub fn fixed(mu: f64) -> Self {
        BetaSpec { mu, sigma: 0.0, floor: 0.0 }
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        BetaSpec { mu, sigma, floor: 0.0 }
    }

    pub fn is_fixed(&self) -> bool {
        self.sigma == 0.0
    }
}

/// Bound on the head's log-variance; keeps exp() finite when sampled latents
/// cascade into further encoders.
pub const LOG_VAR_BOUND: f64 = 10.0;

/// Splits a `batch x 2d` head output into mean (first d) and log-variance
/// (last d) halves. The log-variance is clamped to `[-LOG_VAR_BOUND,
/// LOG_VAR_BOUND]` to keep sigma^2 finite and positive.
pub fn gaussian_head(graph: &mut Graph, h: Value, d: usize) -> Result<GaussianLatent, AdvError> {
    let shape = graph.shape(h);
    if shape.cols != 2 * d {
        return Err(AdvError::ShapeMismatch {
            op: "gaussian_head".to_string(),
            lhs: shape.to_string(),
            rhs: format!("batch x {}", 2 * d),
        });
    }
    let mean = graph.slice_cols(h, 0, d)?;
    let raw_log_var = graph.slice_cols(h, d, 2 * d)?;
    let log_var = graph.clamp(raw_log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND);
    Ok(GaussianLatent { mean, log_var, dim: d })
}

/// `mean + exp(0.5 log_var) * noise` when noise is given; the posterior mean
/// in evaluation mode (`noise = None`).
pub fn reparameterize(
    graph: &mut Graph,
    g: &GaussianLatent,
    noise: Option<&Tensor>,
) -> Result<Value, AdvError> {
    let Some(n) = noise else {
        return Ok(g.mean);
    };
    let shape = graph.shape(g.mean);
    if n.nrows() != shape.rows || n.ncols() != shape.cols {
        return Err(AdvError::ShapeMismatch {
            op: "reparameterize".to_string(),
            lhs: shape.to_string(),
            rhs: format!("{}x{}", n.nrows(), n.ncols()),
        });
    }
    let half_lv = graph.scale(g.log_var, 0.5);
    let std = graph.exp(half_lv);
    let noise_leaf = graph.leaf(n.clone());
    let scaled = graph.mul(std, noise_leaf)?;
    graph.add(g.mean, scaled)
}

/// Standard-normal draws of the latent's shape.
pub fn sample_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Batch-mean of `0.5 * sum_d (mu^2 + sigma^2 - log sigma^2 - 1)`.
pub fn kl_standard_normal(graph: &mut Graph, g: &GaussianLatent) -> Result<Value, AdvError> {
    let shape = graph.shape(g.mean);
    let mu2 = graph.square(g.mean);
    let var = graph.exp(g.log_var);
    let a = graph.add(mu2, var)?;
    let b = graph.sub(a, g.log_var)?;
    let ones = graph.leaf(Tensor::from_elem((shape.rows, shape.cols), 1.0));
    let term = graph.sub(b, ones)?;
    let total = graph.sum(term);
    Ok(graph.scale(total, 0.5 / shape.rows as f64))
}

/// One penalty-weight draw: `mu` for fixed specs, otherwise a clamped normal.
pub fn sample_beta(spec: &BetaSpec, rng: &mut impl Rng) -> f64 {
    if spec.is_fixed() {
        return spec.mu;
    }
    let draw: f64 = Normal::new(spec.mu, spec.sigma).expect("valid sigma").sample(rng);
    draw.max(spec.floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    #[test]
    fn head_splits_halves() {
        let mut g = Graph::new();
        let h = g.leaf(array![[1.0, 2.0, 0.0, 0.0]]);
        let latent = gaussian_head(&mut g, h, 2).unwrap();
        assert_eq!(g.data(latent.mean), &array![[1.0, 2.0]]);
        assert_eq!(g.data(latent.log_var), &array![[0.0, 0.0]]);
    }

    #[test]
    fn head_shapes_and_errors() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros((20, 6)));
        let latent = gaussian_head(&mut g, h, 3).unwrap();
        assert_eq!(g.shape(latent.mean).rows, 20);
        assert_eq!(g.shape(latent.mean).cols, 3);
        let odd = g.leaf(Tensor::zeros((4, 5)));
        assert!(gaussian_head(&mut g, odd, 3).is_err());
    }

    #[test]
    fn reparameterize_zero_noise_gives_mean() {
        let mut g = Graph::new();
        let h = g.leaf(array![[1.5, -0.5, 0.3, 0.7]]);
        let latent = gaussian_head(&mut g, h, 2).unwrap();
        let z = reparameterize(&mut g, &latent, Some(&Tensor::zeros((1, 2)))).unwrap();
        assert_eq!(g.data(z), &array![[1.5, -0.5]]);
    }

    #[test]
    fn reparameterize_unit_variance_adds_noise() {
        let mut g = Graph::new();
        let h = g.leaf(array![[1.0, 2.0, 0.0, 0.0]]);
        let latent = gaussian_head(&mut g, h, 2).unwrap();
        let n = array![[0.3, -0.4]];
        let z = reparameterize(&mut g, &latent, Some(&n)).unwrap();
        assert_eq!(g.data(z), &array![[1.3, 1.6]]);
    }

    #[test]
    fn reparameterize_grad_wrt_mean_is_identity() {
        let mut g = Graph::new();
        let h = g.leaf(array![[1.0, 2.0, 0.2, -0.1]]);
        let latent = gaussian_head(&mut g, h, 2).unwrap();
        let n = array![[0.5, 0.5]];
        let z = reparameterize(&mut g, &latent, Some(&n)).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        let gh = g.grad(h).unwrap();
        // mean half gets exactly 1 per entry
        assert_eq!(gh[[0, 0]], 1.0);
        assert_eq!(gh[[0, 1]], 1.0);
    }

    #[test]
    fn kl_zero_at_prior() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::zeros((3, 4)));
        let latent = gaussian_head(&mut g, h, 2).unwrap();
        let kl = kl_standard_normal(&mut g, &latent).unwrap();
        assert!(g.data(kl)[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn kl_unit_mean_is_half() {
        let mut g = Graph::new();
        let h = g.leaf(array![[1.0, 0.0]]);
        let latent = gaussian_head(&mut g, h, 1).unwrap();
        let kl = kl_standard_normal(&mut g, &latent).unwrap();
        assert!((g.data(kl)[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_log_var_ln4_closed_form() {
        // mu = 0, sigma^2 = 4: 0.5 * (4 - ln 4 - 1)
        let mut g = Graph::new();
        let h = g.leaf(array![[0.0, 4.0f64.ln()]]);
        let latent = gaussian_head(&mut g, h, 1).unwrap();
        let kl = kl_standard_normal(&mut g, &latent).unwrap();
        let expected = 0.5 * (4.0 - 4.0f64.ln() - 1.0);
        assert!((g.data(kl)[[0, 0]] - expected).abs() < 1e-12);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_nonnegative_on_random_inputs() {
        let mut rng = stream_rng(13, "kl");
        for _ in 0..50 {
            let mut g = Graph::new();
            let h = g.leaf(Tensor::from_shape_fn((5, 6), |_| rng.gen_range(-2.0..2.0)));
            let latent = gaussian_head(&mut g, h, 3).unwrap();
            let kl = kl_standard_normal(&mut g, &latent).unwrap();
            assert!(g.data(kl)[[0, 0]] >= -1e-12);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = stream_rng(29, "klgrad");
        let base = Tensor::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let eval = |data: &Tensor| {
            let mut g = Graph::new();
            let h = g.leaf(data.clone());
            let latent = gaussian_head(&mut g, h, 3).unwrap();
            let kl = kl_standard_normal(&mut g, &latent).unwrap();
            (g, h, kl)
        };
        let (mut g, h, kl) = eval(&base);
        g.backward(kl).unwrap();
        let analytic = g.grad(h).unwrap().clone();
        let eps = 1e-5;
        for i in 0..base.nrows() {
            for j in 0..base.ncols() {
                let mut up = base.clone();
                up[[i, j]] += eps;
                let (gu, _, klu) = eval(&up);
                let mut dn = base.clone();
                dn[[i, j]] -= eps;
                let (gd, _, kld) = eval(&dn);
                let fd = (gu.data(klu)[[0, 0]] - gd.data(kld)[[0, 0]]) / (2.0 * eps);
                let a = analytic[[i, j]];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-5, "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn fixed_beta_returns_mu() {
        let spec = BetaSpec::fixed(8e-5);
        assert_eq!(sample_beta(&spec, &mut stream_rng(0, "beta")), 8e-5);
    }

    #[test]
    fn gaussian_beta_mean_monte_carlo() {
        let spec = BetaSpec::gaussian(0.25, 0.01);
        let mut rng = stream_rng(7, "beta");
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_beta(&spec, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.001, "mean {mean}");
    }

    #[test]
    fn beta_clamped_at_floor() {
        let spec = BetaSpec { mu: 0.0, sigma: 1.0, floor: 0.0 };
        let mut rng = stream_rng(1, "beta");
        for _ in 0..1000 {
            assert!(sample_beta(&spec, &mut rng) >= 0.0);
        }
    }
}
