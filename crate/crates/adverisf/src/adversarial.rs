//! Adversarial independence enforcement between the task and noise latents:
//! batch shuffling stands in for the product of marginals, and a critic is
//! trained to tell paired latents from shuffled ones. The default objective is
//! the Wasserstein estimate with a gradient penalty; a JSD (vanilla-GAN)
//! variant is kept behind a flag.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::AdvError;
use crate::nn::{mlp_forward, AttachedParams, MlpSpec};
use crate::rng::random_permutation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    WassersteinGp,
    Jsd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvSpec {
    pub critic: MlpSpec,
    pub lambda_adv: f64,
    pub gp_coeff: f64,
    pub n_critic: usize,
    pub objective: Objective,
    /// JSD only: encoders minimize -E_paired[log(1-D)] instead of the
    /// saturating form.
    pub non_saturating: bool,
}

pub const DEFAULT_GP_COEFF: f64 = 10.0;

impl AdvSpec {
    pub fn new(d_task: usize, d_noise: usize, hidden: &[usize], lambda_adv: f64, n_critic: usize) -> Self {
        AdvSpec {
            critic: MlpSpec::new(d_task + d_noise, hidden, 1),
            lambda_adv,
            gp_coeff: DEFAULT_GP_COEFF,
            n_critic,
            objective: Objective::WassersteinGp,
            non_saturating: false,
        }
    }

    pub fn validate(&self) -> Result<(), AdvError> {
        if self.n_critic < 1 {
            return Err(AdvError::Config("n_critic must be >= 1".into()));
        }
        if self.lambda_adv < 0.0 || self.gp_coeff < 0.0 {
            return Err(AdvError::Config("lambda_adv and gp_coeff must be >= 0".into()));
        }
        if self.critic.out_dim != 1 {
            return Err(AdvError::Config("critic output dim must be 1".into()));
        }
        Ok(())
    }
}

/// One batch of paired latents plus the permutation that builds the
/// shuffled (product-of-marginals) counterpart.
pub struct PairBatch {
    pub z_task: Value,
    pub z_noise: Value,
    pub perm: Vec<usize>,
}

impl PairBatch {
    pub fn new(graph: &Graph, z_task: Value, z_noise: Value, rng: &mut impl Rng) -> Result<Self, AdvError> {
        let (rt, rn) = (graph.shape(z_task).rows, graph.shape(z_noise).rows);
        if rt != rn {
            return Err(AdvError::Config(format!(
                "latent batch sizes differ: {rt} vs {rn}"
            )));
        }
        Ok(PairBatch { z_task, z_noise, perm: random_permutation(rt, rng) })
    }
}

/// Rows of `z_noise` reordered by `perm`, as a graph op (gradients route back
/// to the permuted source rows).
pub fn shuffle(graph: &mut Graph, z_noise: Value, perm: &[usize]) -> Result<Value, AdvError> {
    graph.permute_rows(z_noise, perm)
}

/// Per-row convex combination eps*paired + (1-eps)*shuffled, eps broadcast
/// across features.
pub fn interpolate(
    graph: &mut Graph,
    paired: Value,
    shuffled: Value,
    eps: &Tensor,
) -> Result<Value, AdvError> {
    let shape = graph.shape(paired);
    if shape != graph.shape(shuffled) {
        return Err(AdvError::ShapeMismatch {
            op: "interpolate".into(),
            lhs: shape.to_string(),
            rhs: graph.shape(shuffled).to_string(),
        });
    }
    if eps.nrows() != shape.rows || eps.ncols() != 1 {
        return Err(AdvError::ShapeMismatch {
            op: "interpolate".into(),
            lhs: format!("{}x1", shape.rows),
            rhs: format!("{}x{}", eps.nrows(), eps.ncols()),
        });
    }
    let e = graph.leaf(eps.clone());
    let e_full = graph.broadcast_cols(e, shape.cols)?;
    let ones = graph.leaf(Tensor::from_elem((shape.rows, 1), 1.0));
    let one_minus = graph.sub(ones, e)?;
    let om_full = graph.broadcast_cols(one_minus, shape.cols)?;
    let a = graph.mul(e_full, paired)?;
    let b = graph.mul(om_full, shuffled)?;
    graph.add(a, b)
}

/// Critic input in Eq.-order: concat(z_noise, z_task).
fn critic_input(graph: &mut Graph, z_task: Value, z_noise: Value) -> Result<Value, AdvError> {
    graph.concat(z_noise, z_task)
}

fn critic_score(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &MlpSpec,
    z_task: Value,
    z_noise: Value,
) -> Result<Value, AdvError> {
    let input = critic_input(graph, z_task, z_noise)?;
    mlp_forward(graph, critic, spec, input)
}

/// Wasserstein estimate E_paired[D] - E_shuffled[D] as a graph value.
pub fn wasserstein_estimate(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &AdvSpec,
    pair: &PairBatch,
) -> Result<Value, AdvError> {
    let d_paired = critic_score(graph, critic, &spec.critic, pair.z_task, pair.z_noise)?;
    let shuffled = shuffle(graph, pair.z_noise, &pair.perm)?;
    let d_shuffled = critic_score(graph, critic, &spec.critic, pair.z_task, shuffled)?;
    let m_paired = graph.mean(d_paired);
    let m_shuffled = graph.mean(d_shuffled);
    graph.sub(m_paired, m_shuffled)
}

/// Critic minimization target:
/// E_shuffled[D] - E_paired[D] + gp_coeff * E[(||grad_z D(z_hat)||_2 - 1)^2].
pub fn critic_loss(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &AdvSpec,
    pair: &PairBatch,
    eps: &Tensor,
) -> Result<Value, AdvError> {
    let est = wasserstein_estimate(graph, critic, spec, pair)?;
    let neg_est = graph.scale(est, -1.0);
    let gp = gradient_penalty(graph, critic, spec, pair, eps)?;
    graph.add(neg_est, gp)
}

/// The penalty term of the critic loss, built with a symbolic input gradient
/// so that it stays differentiable w.r.t. the critic weights.
pub fn gradient_penalty(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &AdvSpec,
    pair: &PairBatch,
    eps: &Tensor,
) -> Result<Value, AdvError> {
    let paired = critic_input(graph, pair.z_task, pair.z_noise)?;
    let shuffled_noise = shuffle(graph, pair.z_noise, &pair.perm)?;
    let shuffled = critic_input(graph, pair.z_task, shuffled_noise)?;
    let paired_data = graph.data(paired).clone();
    let shuffled_data = graph.data(shuffled).clone();
    let paired_const = graph.leaf(paired_data);
    let shuffled_const = graph.leaf(shuffled_data);
    let z_hat = interpolate(graph, paired_const, shuffled_const, eps)?;
    let d_hat = mlp_forward(graph, critic, &spec.critic, z_hat)?;
    let d_sum = graph.sum(d_hat);
    let grad_z = graph.input_gradient_graph(d_sum, z_hat)?;
    let norms = graph.row_l2_norm(grad_z);
    let rows = graph.shape(norms).rows;
    let ones = graph.leaf(Tensor::from_elem((rows, 1), 1.0));
    let dev = graph.sub(norms, ones)?;
    let sq = graph.square(dev);
    let mean = graph.mean(sq);
    Ok(graph.scale(mean, spec.gp_coeff))
}

/// Encoder-side minimization target: the Wasserstein estimate itself. The
/// caller must attach the critic parameters as constant leaves so no gradient
/// reaches them.
pub fn encoder_adv_loss(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &AdvSpec,
    pair: &PairBatch,
) -> Result<Value, AdvError> {
    wasserstein_estimate(graph, critic, spec, pair)
}

/// Vanilla-GAN objective. Returns (critic_loss, encoder_loss): the critic
/// minimizes the negated discriminator objective
/// -(E_paired[log D] + E_shuffled[log(1-D)]); the encoders minimize the same
/// objective (or its non-saturating form).
pub fn jsd_losses(
    graph: &mut Graph,
    critic: &AttachedParams,
    spec: &AdvSpec,
    pair: &PairBatch,
) -> Result<(Value, Value), AdvError> {
    const P_LO: f64 = 1e-7;
    const P_HI: f64 = 1.0 - 1e-7;
    let d_paired = critic_score(graph, critic, &spec.critic, pair.z_task, pair.z_noise)?;
    let shuffled = shuffle(graph, pair.z_noise, &pair.perm)?;
    let d_shuffled = critic_score(graph, critic, &spec.critic, pair.z_task, shuffled)?;

    let p_paired = graph.sigmoid(d_paired);
    let p_paired = graph.clamp(p_paired, P_LO, P_HI);
    let p_shuffled = graph.sigmoid(d_shuffled);
    let p_shuffled = graph.clamp(p_shuffled, P_LO, P_HI);

    let rows = graph.shape(p_paired).rows;
    let ones = graph.leaf(Tensor::from_elem((rows, 1), 1.0));
    let log_p = graph.log(p_paired);
    let one_minus = graph.sub(ones, p_shuffled)?;
    let log_om = graph.log(one_minus);
    let t1 = graph.mean(log_p);
    let t2 = graph.mean(log_om);
    let objective = graph.add(t1, t2)?;
    let critic_loss = graph.scale(objective, -1.0);

    let encoder_loss = if spec.non_saturating {
        // encoders push paired pairs to look shuffled: minimize -E_paired[log(1-D)]
        let one_minus_p = graph.sub(ones, p_paired)?;
        let log_omp = graph.log(one_minus_p);
        let m = graph.mean(log_omp);
        graph.scale(m, -1.0)
    } else {
        objective
    };
    Ok((critic_loss, encoder_loss))
}

/// Runs `critic_step` n_critic times then `encoder_step` once.
pub fn critic_schedule<E>(
    n_critic: usize,
    mut critic_step: impl FnMut(usize) -> Result<(), E>,
    encoder_step: impl FnOnce() -> Result<(), E>,
) -> Result<(), E> {
    for k in 0..n_critic {
        critic_step(k)?;
    }
    encoder_step()
}

/// Uniform(0,1) interpolation draws, one per row.
pub fn sample_eps(rows: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_shape_fn((rows, 1), |_| rng.gen::<f64>())
}
