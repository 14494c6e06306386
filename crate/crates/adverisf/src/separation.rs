//! One adversarial information separation block: a variational feature branch
//! predicting the target from z_task, and a conditional noise branch whose
//! joint predictor forces z_noise to absorb the residual predictive signal.
//! The adversarial term between the two latents lives in [`crate::adversarial`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Value};
use crate::error::AdvError;
use crate::latent::{gaussian_head, kl_standard_normal, reparameterize, sample_noise, BetaSpec, GaussianLatent};
use crate::nn::{init_params, mlp_forward, AttachedParams, MlpSpec, ParamStore};

/// Architecture and penalty weights of one block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockSpec {
    pub input_dim: usize,
    pub d_task: usize,
    pub d_noise: usize,
    /// Hidden sizes shared by both encoders and both predictors.
    pub hidden: Vec<usize>,
    pub activation_slope: f64,
    pub beta_task: BetaSpec,
    pub beta_noise: BetaSpec,
    /// When set, the noise encoder sees z_task as a constant (no gradient
    /// back to the feature encoder through that path).
    pub detach_z_task: bool,
}

impl BlockSpec {
    pub fn feature_encoder_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.input_dim, &self.hidden, 2 * self.d_task);
        s.activation_slope = self.activation_slope;
        s
    }

    pub fn noise_encoder_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.input_dim + self.d_task, &self.hidden, 2 * self.d_noise);
        s.activation_slope = self.activation_slope;
        s
    }

    pub fn task_predictor_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.d_task, &self.hidden, 1);
        s.activation_slope = self.activation_slope;
        s
    }

    pub fn joint_predictor_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.d_task + self.d_noise, &self.hidden, 1);
        s.activation_slope = self.activation_slope;
        s
    }
}

/// Parameters of the four sub-networks of one block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub feature_encoder: ParamStore,
    pub noise_encoder: ParamStore,
    pub task_predictor: ParamStore,
    pub joint_predictor: ParamStore,
}

impl BlockParams {
    pub fn init(spec: &BlockSpec, rng: &mut impl Rng) -> Self {
        BlockParams {
            feature_encoder: init_params(&spec.feature_encoder_spec(), rng),
            noise_encoder: init_params(&spec.noise_encoder_spec(), rng),
            task_predictor: init_params(&spec.task_predictor_spec(), rng),
            joint_predictor: init_params(&spec.joint_predictor_spec(), rng),
        }
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [
            ("feature_encoder", &self.feature_encoder),
            ("noise_encoder", &self.noise_encoder),
            ("task_predictor", &self.task_predictor),
            ("joint_predictor", &self.joint_predictor),
        ]
    }
}

/// Leaf handles of one block inside one step's graph.
pub struct AttachedBlock {
    pub feature_encoder: AttachedParams,
    pub noise_encoder: AttachedParams,
    pub task_predictor: AttachedParams,
    pub joint_predictor: AttachedParams,
}

impl BlockParams {
    pub fn attach(&self, graph: &mut Graph) -> AttachedBlock {
        AttachedBlock {
            feature_encoder: self.feature_encoder.attach(graph),
            noise_encoder: self.noise_encoder.attach(graph),
            task_predictor: self.task_predictor.attach(graph),
            joint_predictor: self.joint_predictor.attach(graph),
        }
    }
}

/// Forward products of one block on one batch.
pub struct BlockOutput {
    pub z_task_dist: GaussianLatent,
    pub z_task: Value,
    pub y_task: Value,
    pub z_noise_dist: GaussianLatent,
    pub z_noise: Value,
    pub y_joint: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Runs the block: x -> z_task -> y_task; concat(x, z_task) -> z_noise;
/// concat(z_task, z_noise) -> y_joint. Eval mode uses posterior means.
///
/// With `variational` disabled the latents are the raw head means and no
/// sampling occurs regardless of mode.
pub fn block_forward(
    graph: &mut Graph,
    attached: &AttachedBlock,
    spec: &BlockSpec,
    x: Value,
    mode: Mode,
    variational: bool,
    rng: &mut impl Rng,
) -> Result<BlockOutput, AdvError> {
    let batch = graph.shape(x).rows;
    let h_task = mlp_forward(graph, &attached.feature_encoder, &spec.feature_encoder_spec(), x)?;
    let z_task_dist = gaussian_head(graph, h_task, spec.d_task)?;
    let z_task = if variational && mode == Mode::Train {
        let noise = sample_noise(batch, spec.d_task, rng);
        reparameterize(graph, &z_task_dist, Some(&noise))?
    } else {
        reparameterize(graph, &z_task_dist, None)?
    };
    let y_task = mlp_forward(graph, &attached.task_predictor, &spec.task_predictor_spec(), z_task)?;

    let z_task_for_noise = if spec.detach_z_task {
        let data = graph.data(z_task).clone();
        graph.leaf(data)
    } else {
        z_task
    };
    let noise_in = graph.concat(x, z_task_for_noise)?;
    let h_noise = mlp_forward(graph, &attached.noise_encoder, &spec.noise_encoder_spec(), noise_in)?;
    let z_noise_dist = gaussian_head(graph, h_noise, spec.d_noise)?;
    let z_noise = if variational && mode == Mode::Train {
        let noise = sample_noise(batch, spec.d_noise, rng);
        reparameterize(graph, &z_noise_dist, Some(&noise))?
    } else {
        reparameterize(graph, &z_noise_dist, None)?
    };
    let joint_in = graph.concat(z_task, z_noise)?;
    let y_joint = mlp_forward(graph, &attached.joint_predictor, &spec.joint_predictor_spec(), joint_in)?;

    Ok(BlockOutput { z_task_dist, z_task, y_task, z_noise_dist, z_noise, y_joint })
}

/// Mean squared error between a prediction and a target column.
pub fn mse(graph: &mut Graph, pred: Value, y: Value) -> Result<Value, AdvError> {
    let diff = graph.sub(pred, y)?;
    let sq = graph.square(diff);
    Ok(graph.mean(sq))
}

/// Feature-branch loss: MSE(y_task, y) + beta_task * KL(z_task || prior).
/// `include_kl = false` drops the variational term (ablation A2).
pub fn task_loss(
    graph: &mut Graph,
    out: &BlockOutput,
    y: Value,
    beta_task: f64,
    include_kl: bool,
) -> Result<Value, AdvError> {
    let fit = mse(graph, out.y_task, y)?;
    if !include_kl {
        return Ok(fit);
    }
    let kl = kl_standard_normal(graph, &out.z_task_dist)?;
    let weighted = graph.scale(kl, beta_task);
    graph.add(fit, weighted)
}

/// Noise-branch loss: MSE(y_joint, y) + beta_noise * KL(z_noise || prior).
pub fn noise_loss(
    graph: &mut Graph,
    out: &BlockOutput,
    y: Value,
    beta_noise: f64,
    include_kl: bool,
) -> Result<Value, AdvError> {
    let fit = mse(graph, out.y_joint, y)?;
    if !include_kl {
        return Ok(fit);
    }
    let kl = kl_standard_normal(graph, &out.z_noise_dist)?;
    let weighted = graph.scale(kl, beta_noise);
    graph.add(fit, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::stream_rng;

    fn spec() -> BlockSpec {
        BlockSpec {
            input_dim: 13,
            d_task: 2,
            d_noise: 5,
            hidden: vec![16, 16],
            activation_slope: 0.01,
            beta_task: BetaSpec::fixed(0.25),
            beta_noise: BetaSpec::fixed(8e-5),
            detach_z_task: false,
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let spec = spec();
        let params = BlockParams::init(&spec, &mut stream_rng(0, "init"));
        let x_data = Tensor::from_shape_fn((4, 13), |(i, j)| ((i * 13 + j) as f64).sin());
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone());
            let attached = params.attach(&mut g);
            let mut rng = stream_rng(99, "sample");
            let out =
                block_forward(&mut g, &attached, &spec, x, Mode::Eval, true, &mut rng).unwrap();
            (g.data(out.y_task).clone(), g.data(out.y_joint).clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn latent_shapes_match_spec() {
        let spec = spec();
        let params = BlockParams::init(&spec, &mut stream_rng(0, "init"));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros((20, 13)));
        let attached = params.attach(&mut g);
        let mut rng = stream_rng(0, "sample");
        let out = block_forward(&mut g, &attached, &spec, x, Mode::Train, true, &mut rng).unwrap();
        assert_eq!((g.shape(out.z_task).rows, g.shape(out.z_task).cols), (20, 2));
        assert_eq!((g.shape(out.z_noise).rows, g.shape(out.z_noise).cols), (20, 5));
        assert_eq!((g.shape(out.y_task).rows, g.shape(out.y_task).cols), (20, 1));
        assert_eq!((g.shape(out.y_joint).rows, g.shape(out.y_joint).cols), (20, 1));
    }

    #[test]
    fn zeroed_noise_encoder_yields_zero_latent_in_eval() {
        let spec = spec();
        let mut params = BlockParams::init(&spec, &mut stream_rng(0, "init"));
        // zero the noise encoder's output layer entirely
        let enc_spec = spec.noise_encoder_spec();
        let last = enc_spec.hidden.len();
        *params.noise_encoder.get_mut(&format!("w{last}")).unwrap() *= 0.0;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_elem((3, 13), 0.5));
        let attached = params.attach(&mut g);
        let mut rng = stream_rng(0, "sample");
        let out = block_forward(&mut g, &attached, &spec, x, Mode::Eval, true, &mut rng).unwrap();
        assert!(g.data(out.z_noise).iter().all(|&v| v == 0.0));
        assert!(g.data(out.z_noise_dist.mean).iter().all(|&v| v == 0.0));
        assert!(g.data(out.z_noise_dist.log_var).iter().all(|&v| v == 0.0));
    }

    /// Builds an output whose prediction exactly equals the target and whose
    /// posterior is forced to the given (mean, log_var) constants.
    fn forced_output(
        g: &mut Graph,
        y_data: &Tensor,
        mu: f64,
        log_var: f64,
        d: usize,
    ) -> (BlockOutput, Value) {
        let batch = y_data.nrows();
        let y = g.leaf(y_data.clone());
        let pred = g.leaf(y_data.clone());
        let mut head = Tensor::zeros((batch, 2 * d));
        for i in 0..batch {
            for j in 0..d {
                head[[i, j]] = mu;
                head[[i, d + j]] = log_var;
            }
        }
        let h = g.leaf(head);
        let dist = gaussian_head(g, h, d).unwrap();
        let z = reparameterize(g, &dist, None).unwrap();
        let out = BlockOutput {
            z_task_dist: dist,
            z_task: z,
            y_task: pred,
            z_noise_dist: dist,
            z_noise: z,
            y_joint: pred,
        };
        (out, y)
    }

    #[test]
    fn task_loss_zero_at_perfect_prediction_and_prior() {
        let mut g = Graph::new();
        let y_data = Tensor::from_shape_fn((3, 1), |(i, _)| i as f64);
        let (out, y) = forced_output(&mut g, &y_data, 0.0, 0.0, 1);
        let loss = task_loss(&mut g, &out, y, 0.5, true).unwrap();
        assert!(g.data(loss)[[0, 0]].abs() < 1e-15);
    }

    #[test]
    fn task_loss_pure_kl_contribution() {
        // perfect prediction, mu = 1, log_var = 0, d = 1, beta = 0.5 -> 0.25
        let mut g = Graph::new();
        let y_data = Tensor::from_shape_fn((4, 1), |(i, _)| i as f64);
        let (out, y) = forced_output(&mut g, &y_data, 1.0, 0.0, 1);
        let loss = task_loss(&mut g, &out, y, 0.5, true).unwrap();
        assert!((g.data(loss)[[0, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn task_loss_beta_zero_is_plain_mse() {
        let mut g = Graph::new();
        let y_data = Tensor::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let (mut out, y) = forced_output(&mut g, &y_data, 0.7, 0.2, 1);
        let pred = g.leaf(Tensor::from_shape_vec((3, 1), vec![1.5, 1.0, 5.0]).unwrap());
        out.y_task = pred;
        let loss = task_loss(&mut g, &out, y, 0.0, true).unwrap();
        // hand MSE: (0.25 + 1 + 4) / 3
        let hand = (0.25 + 1.0 + 4.0) / 3.0;
        assert!((g.data(loss)[[0, 0]] - hand).abs() < 1e-12);
    }

    #[test]
    fn noise_loss_cases() {
        // beta_noise = 8e-5 with KL forced to 1 contributes 8e-5
        let mut g = Graph::new();
        let y_data = Tensor::from_shape_fn((2, 1), |(i, _)| i as f64);
        // KL per sample = 0.5 (mu^2 + var - lv - 1); choose mu so KL = 1: mu^2 = 2
        let (out, y) = forced_output(&mut g, &y_data, 2.0f64.sqrt(), 0.0, 1);
        let loss = noise_loss(&mut g, &out, y, 8e-5, true).unwrap();
        assert!((g.data(loss)[[0, 0]] - 8e-5).abs() < 1e-16);

        // y_joint = 0, y = 2 -> MSE 4
        let mut g = Graph::new();
        let y_data = Tensor::from_elem((3, 1), 2.0);
        let (mut out, y) = forced_output(&mut g, &y_data, 0.0, 0.0, 1);
        out.y_joint = g.leaf(Tensor::zeros((3, 1)));
        let loss = noise_loss(&mut g, &out, y, 0.0, true).unwrap();
        assert!((g.data(loss)[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn predictor_gradients_are_branch_local() {
        let spec = spec();
        let params = BlockParams::init(&spec, &mut stream_rng(5, "init"));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_shape_fn((6, 13), |(i, j)| ((i + j) as f64 * 0.37).cos()));
        let y = g.leaf(Tensor::from_shape_fn((6, 1), |(i, _)| i as f64 * 0.1));
        let attached = params.attach(&mut g);
        let mut rng = stream_rng(5, "sample");
        let out = block_forward(&mut g, &attached, &spec, x, Mode::Train, true, &mut rng).unwrap();

        // task_loss must not touch the joint predictor, and vice versa
        let tl = task_loss(&mut g, &out, y, 0.25, true).unwrap();
        g.backward(tl).unwrap();
        for (name, grad) in attached.joint_predictor.grads(&g) {
            assert!(grad.iter().all(|&x| x == 0.0), "joint predictor {name} touched by task_loss");
        }

        let nl = noise_loss(&mut g, &out, y, 8e-5, true).unwrap();
        g.backward(nl).unwrap();
        for (name, grad) in attached.task_predictor.grads(&g) {
            assert!(grad.iter().all(|&x| x == 0.0), "task predictor {name} touched by noise_loss");
        }
    }

    #[test]
    fn task_loss_gradient_matches_finite_differences() {
        let spec = BlockSpec {
            input_dim: 4,
            d_task: 2,
            d_noise: 2,
            hidden: vec![5],
            activation_slope: 0.01,
            beta_task: BetaSpec::fixed(0.3),
            beta_noise: BetaSpec::fixed(1e-4),
            detach_z_task: false,
        };
        let params = BlockParams::init(&spec, &mut stream_rng(2, "init"));
        let x_data = Tensor::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.31).sin());
        let y_data = Tensor::from_shape_fn((5, 1), |(i, _)| (i as f64 * 0.21).cos());

        // eval-mode forward keeps the loss a deterministic function of params
        let eval_loss = |p: &BlockParams| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone());
            let y = g.leaf(y_data.clone());
            let attached = p.attach(&mut g);
            let mut rng = stream_rng(0, "unused");
            let out =
                block_forward(&mut g, &attached, &spec, x, Mode::Eval, true, &mut rng).unwrap();
            let loss = task_loss(&mut g, &out, y, 0.3, true).unwrap();
            g.data(loss)[[0, 0]]
        };

        let mut g = Graph::new();
        let x = g.leaf(x_data.clone());
        let y = g.leaf(y_data.clone());
        let attached = params.attach(&mut g);
        let mut rng = stream_rng(0, "unused");
        let out = block_forward(&mut g, &attached, &spec, x, Mode::Eval, true, &mut rng).unwrap();
        let loss = task_loss(&mut g, &out, y, 0.3, true).unwrap();
        g.backward(loss).unwrap();

        let eps = 1e-5;
        for (store_name, attached_store) in
            [("feature_encoder", &attached.feature_encoder), ("task_predictor", &attached.task_predictor)]
        {
            let grads = attached_store.grads(&g);
            for (pname, grad) in &grads {
                let base = match store_name {
                    "feature_encoder" => params.feature_encoder.get(pname).unwrap().clone(),
                    _ => params.task_predictor.get(pname).unwrap().clone(),
                };
                for i in 0..base.nrows() {
                    for j in 0..base.ncols() {
                        let mut p2 = params.clone();
                        let slot = match store_name {
                            "feature_encoder" => p2.feature_encoder.get_mut(pname).unwrap(),
                            _ => p2.task_predictor.get_mut(pname).unwrap(),
                        };
                        slot[[i, j]] += eps;
                        let up = eval_loss(&p2);
                        let slot = match store_name {
                            "feature_encoder" => p2.feature_encoder.get_mut(pname).unwrap(),
                            _ => p2.task_predictor.get_mut(pname).unwrap(),
                        };
                        slot[[i, j]] -= 2.0 * eps;
                        let dn = eval_loss(&p2);
                        let fd = (up - dn) / (2.0 * eps);
                        let a = grad[[i, j]];
                        let denom = a.abs().max(fd.abs()).max(1e-5);
                        assert!(
                            (a - fd).abs() / denom < 1e-4,
                            "{store_name}/{pname}[{i},{j}]: {a} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}
