//! Multi-layer separation cascade: noise recycling across blocks, the summed
//! total objective, joint and two-stage schedules, ablation variants, and the
//! MLP/VIB baselines.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{
    encoder_adv_loss, gradient_penalty, sample_eps, wasserstein_estimate, AdvSpec, PairBatch,
};
use crate::autodiff::{Graph, Tensor, Value};
use crate::data::{r_squared, Dataset};
use crate::error::AdvError;
use crate::latent::{gaussian_head, kl_standard_normal, reparameterize, sample_beta, sample_noise};
use crate::nn::{
    adam_step, init_params, mlp_forward, AdamHyper, AdamState, AttachedParams, MlpSpec, ParamStore,
};
use crate::record::{EpochTrace, RunRecord, RECORD_VERSION};
use crate::rng::stream_rng;
use crate::separation::{mse, AttachedBlock, BlockOutput, BlockParams, BlockSpec, Mode};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<BlockSpec>,
    pub adv: Vec<AdvSpec>,
    pub final_predictor: MlpSpec,
}

impl ModelSpec {
    pub fn d_task_total(&self) -> usize {
        self.layers.iter().map(|l| l.d_task).sum()
    }

    pub fn validate(&self) -> Result<(), AdvError> {
        if self.layers.is_empty() {
            return Err(AdvError::Config("model needs at least one layer".into()));
        }
        if self.adv.len() != self.layers.len() {
            return Err(AdvError::Config(format!(
                "{} adv specs for {} layers",
                self.adv.len(),
                self.layers.len()
            )));
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            if pair[1].input_dim != pair[0].d_noise {
                return Err(AdvError::Config(format!(
                    "layer {} input_dim {} != layer {} d_noise {}",
                    l + 2,
                    pair[1].input_dim,
                    l + 1,
                    pair[0].d_noise
                )));
            }
        }
        for (l, (block, adv)) in self.layers.iter().zip(&self.adv).enumerate() {
            adv.validate()?;
            if adv.critic.in_dim != block.d_task + block.d_noise {
                return Err(AdvError::Config(format!(
                    "layer {} critic input {} != d_task + d_noise = {}",
                    l + 1,
                    adv.critic.in_dim,
                    block.d_task + block.d_noise
                )));
            }
        }
        if self.final_predictor.in_dim != self.d_task_total() {
            return Err(AdvError::Config(format!(
                "final predictor input {} != total d_task {}",
                self.final_predictor.in_dim,
                self.d_task_total()
            )));
        }
        if self.final_predictor.out_dim != 1 {
            return Err(AdvError::Config("final predictor output dim must be 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    TwoStage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub strategy: Strategy,
    /// Epoch count per phase: one entry for joint, one per layer for two-stage.
    pub epochs: Vec<usize>,
    /// Learning rate per phase, same length as `epochs`.
    pub lr: Vec<f64>,
    pub batch_size: usize,
    /// Early-stop window on validation R-squared; off when None.
    pub patience: Option<usize>,
}

impl ScheduleSpec {
    pub fn joint(epochs: usize, lr: f64, batch_size: usize) -> Self {
        ScheduleSpec { strategy: Strategy::Joint, epochs: vec![epochs], lr: vec![lr], batch_size, patience: None }
    }

    pub fn two_stage(epochs: &[usize], lr: &[f64], batch_size: usize) -> Self {
        ScheduleSpec {
            strategy: Strategy::TwoStage,
            epochs: epochs.to_vec(),
            lr: lr.to_vec(),
            batch_size,
            patience: None,
        }
    }

    pub fn validate(&self, n_layers: usize) -> Result<(), AdvError> {
        if self.epochs.is_empty() || self.epochs.len() != self.lr.len() {
            return Err(AdvError::Config("schedule needs matching epochs and lr lists".into()));
        }
        if self.epochs.iter().any(|&e| e == 0) {
            return Err(AdvError::Config("phase epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(AdvError::Config("batch_size must be > 0".into()));
        }
        if self.strategy == Strategy::TwoStage && self.epochs.len() != n_layers {
            return Err(AdvError::Config(format!(
                "two-stage schedule has {} phases for {} layers",
                self.epochs.len(),
                n_layers
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationVariant {
    A0,
    A1,
    A2,
    A3,
}

impl AblationVariant {
    pub fn tag(&self) -> &'static str {
        match self {
            AblationVariant::A0 => "A0",
            AblationVariant::A1 => "A1",
            AblationVariant::A2 => "A2",
            AblationVariant::A3 => "A3",
        }
    }

    pub fn parse(s: &str) -> Result<Self, AdvError> {
        match s {
            "A0" | "a0" => Ok(AblationVariant::A0),
            "A1" | "a1" => Ok(AblationVariant::A1),
            "A2" | "a2" => Ok(AblationVariant::A2),
            "A3" | "a3" => Ok(AblationVariant::A3),
            other => Err(AdvError::Config(format!("unknown ablation variant {other:?}"))),
        }
    }

    /// Reparameterization noise and KL terms enabled?
    pub fn variational(&self) -> bool {
        *self != AblationVariant::A2
    }

    /// Adversarial game enabled?
    pub fn adversarial(&self) -> bool {
        *self != AblationVariant::A3
    }
}

/// Applies a variant to a base (A0) model description. A1 truncates to a
/// single layer with a matching final predictor; A3 zeroes lambda_adv.
pub fn apply_variant(base: &ModelSpec, variant: AblationVariant) -> ModelSpec {
    let mut model = base.clone();
    match variant {
        AblationVariant::A0 | AblationVariant::A2 => {}
        AblationVariant::A1 => {
            model.layers.truncate(1);
            model.adv.truncate(1);
            let mut fp = model.final_predictor.clone();
            fp.in_dim = model.layers[0].d_task;
            model.final_predictor = fp;
        }
        AblationVariant::A3 => {
            for adv in &mut model.adv {
                adv.lambda_adv = 0.0;
            }
        }
    }
    model
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    pub critics: Vec<ParamStore>,
    pub final_predictor: ParamStore,
}

impl ModelParams {
    pub fn init(model: &ModelSpec, rng: &mut impl Rng) -> Self {
        let blocks = model.layers.iter().map(|l| BlockParams::init(l, rng)).collect();
        let critics = model.adv.iter().map(|a| init_params(&a.critic, rng)).collect();
        let final_predictor = init_params(&model.final_predictor, rng);
        ModelParams { blocks, critics, final_predictor }
    }
}

pub struct AttachedModel {
    pub blocks: Vec<AttachedBlock>,
    pub final_predictor: AttachedParams,
}

impl ModelParams {
    /// Attaches every non-critic store as graph leaves.
    pub fn attach_encoders(&self, graph: &mut Graph) -> AttachedModel {
        AttachedModel {
            blocks: self.blocks.iter().map(|b| b.attach(graph)).collect(),
            final_predictor: self.final_predictor.attach(graph),
        }
    }
}

/// Layer 1 consumes x; each later layer consumes the previous layer's sampled
/// z_noise; the final predictor consumes the concatenation of every z_task.
pub fn forward_cascade(
    graph: &mut Graph,
    model: &ModelSpec,
    attached: &AttachedModel,
    x: Value,
    mode: Mode,
    variational: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<BlockOutput>, Value), AdvError> {
    let mut outputs = Vec::with_capacity(model.layers.len());
    let mut input = x;
    for (spec, block) in model.layers.iter().zip(&attached.blocks) {
        let out = crate::separation::block_forward(graph, block, spec, input, mode, variational, rng)?;
        input = out.z_noise;
        outputs.push(out);
    }
    let mut agg = outputs[0].z_task;
    for out in &outputs[1..] {
        agg = graph.concat(agg, out.z_task)?;
    }
    let y_final = mlp_forward(graph, &attached.final_predictor, &model.final_predictor, agg)?;
    Ok((outputs, y_final))
}

#[derive(Debug, Clone, Copy)]
pub struct LossOpts {
    pub noise_weight: f64,
    pub include_kl: bool,
    /// Drop per-layer task MSE and read the prediction fit from `y_final`
    /// alone (the VIB-degenerate configuration ties y_final to the layer-1
    /// task predictor).
    pub tie_final_to_task: bool,
}

impl Default for LossOpts {
    fn default() -> Self {
        LossOpts { noise_weight: 1.0, include_kl: true, tie_final_to_task: false }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub task: f64,
    pub noise: f64,
    pub adversarial: f64,
    pub kl: f64,
    pub final_mse: f64,
}

/// Encoder/predictor objective: per layer the prediction fits, weighted KL
/// terms, and lambda_adv times the adversarial estimate, plus the aggregated
/// head's MSE. Critic losses are handled separately by the update schedule.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    graph: &mut Graph,
    model: &ModelSpec,
    outputs: &[BlockOutput],
    y_final: Value,
    y: Value,
    betas: &[(f64, f64)],
    adv_estimates: &[Option<Value>],
    opts: &LossOpts,
) -> Result<(Value, LossBreakdown), AdvError> {
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Value> = Vec::new();
    for (l, out) in outputs.iter().enumerate() {
        let (beta_task, beta_noise) = betas[l];
        if !opts.tie_final_to_task {
            let fit = mse(graph, out.y_task, y)?;
            breakdown.task += graph.data(fit)[[0, 0]];
            terms.push(fit);
        }
        if opts.noise_weight != 0.0 {
            let fit = mse(graph, out.y_joint, y)?;
            let weighted = graph.scale(fit, opts.noise_weight);
            breakdown.noise += graph.data(weighted)[[0, 0]];
            terms.push(weighted);
        }
        if opts.include_kl {
            let kl_t = kl_standard_normal(graph, &out.z_task_dist)?;
            let kt = graph.scale(kl_t, beta_task);
            breakdown.kl += graph.data(kt)[[0, 0]];
            terms.push(kt);
            if opts.noise_weight != 0.0 {
                let kl_n = kl_standard_normal(graph, &out.z_noise_dist)?;
                let kn = graph.scale(kl_n, beta_noise * opts.noise_weight);
                breakdown.kl += graph.data(kn)[[0, 0]];
                terms.push(kn);
            }
        }
        if let Some(est) = adv_estimates[l] {
            let lam = model.adv[l].lambda_adv;
            if lam != 0.0 {
                let scaled = graph.scale(est, lam);
                breakdown.adversarial += graph.data(scaled)[[0, 0]];
                terms.push(scaled);
            }
        }
    }
    let fit = mse(graph, y_final, y)?;
    breakdown.final_mse = graph.data(fit)[[0, 0]];
    terms.push(fit);

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = graph.add(total, t)?;
    }
    breakdown.total = graph.data(total)[[0, 0]];
    Ok((total, breakdown))
}

// ---------------------------------------------------------------------------
// VIB baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VibSpec {
    pub input_dim: usize,
    pub d_z: usize,
    pub encoder_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    pub beta: f64,
    pub activation_slope: f64,
}

impl VibSpec {
    pub fn encoder_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.input_dim, &self.encoder_hidden, 2 * self.d_z);
        s.activation_slope = self.activation_slope;
        s
    }

    pub fn predictor_spec(&self) -> MlpSpec {
        let mut s = MlpSpec::new(self.d_z, &self.predictor_hidden, 1);
        s.activation_slope = self.activation_slope;
        s
    }
}

#[derive(Debug, Clone)]
pub struct VibParams {
    pub encoder: ParamStore,
    pub predictor: ParamStore,
}

impl VibParams {
    pub fn init(spec: &VibSpec, rng: &mut impl Rng) -> Self {
        VibParams {
            encoder: init_params(&spec.encoder_spec(), rng),
            predictor: init_params(&spec.predictor_spec(), rng),
        }
    }
}

pub struct VibForward {
    pub prediction: Value,
    pub kl: Value,
}

pub fn vib_forward(
    graph: &mut Graph,
    encoder: &AttachedParams,
    predictor: &AttachedParams,
    spec: &VibSpec,
    x: Value,
    mode: Mode,
    rng: &mut impl Rng,
) -> Result<VibForward, AdvError> {
    let batch = graph.shape(x).rows;
    let h = mlp_forward(graph, encoder, &spec.encoder_spec(), x)?;
    let dist = gaussian_head(graph, h, spec.d_z)?;
    let z = if mode == Mode::Train {
        let noise = sample_noise(batch, spec.d_z, rng);
        reparameterize(graph, &dist, Some(&noise))?
    } else {
        reparameterize(graph, &dist, None)?
    };
    let prediction = mlp_forward(graph, predictor, &spec.predictor_spec(), z)?;
    let kl = kl_standard_normal(graph, &dist)?;
    Ok(VibForward { prediction, kl })
}

/// MSE + beta * KL.
pub fn vib_loss(
    graph: &mut Graph,
    fwd: &VibForward,
    y: Value,
    beta: f64,
) -> Result<Value, AdvError> {
    let fit = mse(graph, fwd.prediction, y)?;
    let weighted = graph.scale(fwd.kl, beta);
    graph.add(fit, weighted)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub params: ModelParams,
    pub record: RunRecord,
    /// Snapshot of all parameters at the end of each phase.
    pub phase_end_params: Vec<ModelParams>,
}

struct BlockAdam {
    feature_encoder: AdamState,
    noise_encoder: AdamState,
    task_predictor: AdamState,
    joint_predictor: AdamState,
}

impl BlockAdam {
    fn new() -> Self {
        BlockAdam {
            feature_encoder: AdamState::new(),
            noise_encoder: AdamState::new(),
            task_predictor: AdamState::new(),
            joint_predictor: AdamState::new(),
        }
    }
}

fn batches(train_idx: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = train_idx.to_vec();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn check_finite(name: &str, value: f64, epoch: usize) -> Result<(), AdvError> {
    if !value.is_finite() {
        return Err(AdvError::Diverged(format!("{name} became {value} at epoch {epoch}")));
    }
    Ok(())
}

struct Phase {
    epochs: usize,
    lr: f64,
    /// Layers whose parameters (and critics) move this phase.
    active_layers: Vec<usize>,
    /// Layers whose losses enter the encoder objective this phase.
    loss_layers: Vec<usize>,
    train_final: bool,
    include_final_mse: bool,
}

fn phases(model: &ModelSpec, schedule: &ScheduleSpec) -> Vec<Phase> {
    let all: Vec<usize> = (0..model.layers.len()).collect();
    match schedule.strategy {
        Strategy::Joint => schedule
            .epochs
            .iter()
            .zip(&schedule.lr)
            .map(|(&epochs, &lr)| Phase {
                epochs,
                lr,
                active_layers: all.clone(),
                loss_layers: all.clone(),
                train_final: true,
                include_final_mse: true,
            })
            .collect(),
        Strategy::TwoStage => schedule
            .epochs
            .iter()
            .zip(&schedule.lr)
            .enumerate()
            .map(|(l, (&epochs, &lr))| {
                let last = l == schedule.epochs.len() - 1;
                Phase {
                    epochs,
                    lr,
                    active_layers: vec![l],
                    loss_layers: vec![l],
                    train_final: last,
                    include_final_mse: last,
                }
            })
            .collect(),
    }
}

pub fn train_adverisf(
    model_base: &ModelSpec,
    data: &Dataset,
    schedule: &ScheduleSpec,
    variant: AblationVariant,
    seed: u64,
    config_hash: &str,
) -> Result<TrainOutcome, AdvError> {
    let start = Instant::now();
    let model = apply_variant(model_base, variant);
    model.validate()?;
    // Variants that truncate the cascade (A1) leave a two-stage schedule with
    // more phases than layers; fold the surplus phases into the last kept one
    // so the total epoch budget is preserved.
    let mut schedule = schedule.clone();
    if schedule.strategy == Strategy::TwoStage && schedule.epochs.len() > model.layers.len() {
        let keep = model.layers.len();
        let surplus: usize = schedule.epochs[keep..].iter().sum();
        schedule.epochs.truncate(keep);
        schedule.lr.truncate(keep);
        *schedule.epochs.last_mut().expect("non-empty schedule") += surplus;
    }
    let schedule = &schedule;
    schedule.validate(model.layers.len())?;

    let mut init_rng = stream_rng(seed, "init");
    let mut params = ModelParams::init(&model, &mut init_rng);
    let mut batch_rng = stream_rng(seed, "batches");
    let mut sample_rng = stream_rng(seed, "sample");
    let mut beta_rng = stream_rng(seed, "beta");
    let mut perm_rng = stream_rng(seed, "perm");
    let mut eps_rng = stream_rng(seed, "eps");

    let mut block_adam: Vec<BlockAdam> = model.layers.iter().map(|_| BlockAdam::new()).collect();
    let mut critic_adam: Vec<AdamState> = model.adv.iter().map(|_| AdamState::new()).collect();
    let mut final_adam = AdamState::new();

    let mut trace = EpochTrace::default();
    let mut critic_graph_builds = 0u64;
    let mut phase_end_params = Vec::new();
    let variational = variant.variational();
    let adversarial_on =
        variant.adversarial() && model.adv.iter().any(|a| a.lambda_adv != 0.0);
    let opts = LossOpts { noise_weight: 1.0, include_kl: variational, tie_final_to_task: false };

    for phase in phases(&model, schedule) {
        let hyper = AdamHyper::with_lr(phase.lr);
        let mut best_valid = f64::NEG_INFINITY;
        let mut since_best = 0usize;
        for epoch in 0..phase.epochs {
            let mut acc = LossBreakdown::default();
            let mut critic_acc = 0.0;
            let mut indep_acc = 0.0;
            let mut critic_steps = 0usize;
            let batch_list = batches(&data.train_idx, schedule.batch_size, &mut batch_rng);
            let n_batches = batch_list.len();
            for idx in batch_list {
                let x_data = data.x_rows(&idx);
                let y_data = data.y_rows(&idx);
                let betas: Vec<(f64, f64)> = model
                    .layers
                    .iter()
                    .map(|l| {
                        (sample_beta(&l.beta_task, &mut beta_rng), sample_beta(&l.beta_noise, &mut beta_rng))
                    })
                    .collect();

                // critic updates on detached latents, fresh pi and eps per step
                let mut latents: Vec<(Tensor, Tensor)> = Vec::new();
                if adversarial_on {
                    let mut g = Graph::new();
                    let x = g.leaf(x_data.clone());
                    let attached = params.attach_encoders(&mut g);
                    let (outs, _) = forward_cascade(
                        &mut g, &model, &attached, x, Mode::Train, variational, &mut sample_rng,
                    )?;
                    for out in &outs {
                        latents.push((g.data(out.z_task).clone(), g.data(out.z_noise).clone()));
                    }
                    for &l in &phase.active_layers {
                        let adv = &model.adv[l];
                        for _ in 0..adv.n_critic {
                            let mut g = Graph::new();
                            let zt = g.leaf(latents[l].0.clone());
                            let zn = g.leaf(latents[l].1.clone());
                            let pair = PairBatch::new(&g, zt, zn, &mut perm_rng)?;
                            let critic = params.critics[l].attach(&mut g);
                            critic_graph_builds += 1;
                            let est = wasserstein_estimate(&mut g, &critic, adv, &pair)?;
                            let eps = sample_eps(idx.len(), &mut eps_rng);
                            let neg = g.scale(est, -1.0);
                            let gp = gradient_penalty(&mut g, &critic, adv, &pair, &eps)?;
                            let loss = g.add(neg, gp)?;
                            let loss_val = g.data(loss)[[0, 0]];
                            check_finite("critic loss", loss_val, epoch)?;
                            critic_acc += loss_val;
                            indep_acc += g.data(est)[[0, 0]];
                            critic_steps += 1;
                            g.backward(loss)?;
                            let grads = critic.grads(&g);
                            adam_step(&mut params.critics[l], &grads, &mut critic_adam[l], &hyper)?;
                        }
                    }
                }

                // one encoder/predictor update
                let mut g = Graph::new();
                let x = g.leaf(x_data);
                let y = g.leaf(y_data);
                let attached = params.attach_encoders(&mut g);
                let (outs, y_final) = forward_cascade(
                    &mut g, &model, &attached, x, Mode::Train, variational, &mut sample_rng,
                )?;
                let mut adv_estimates: Vec<Option<Value>> = vec![None; model.layers.len()];
                if adversarial_on {
                    for &l in &phase.loss_layers {
                        if model.adv[l].lambda_adv == 0.0 {
                            continue;
                        }
                        let pair =
                            PairBatch::new(&g, outs[l].z_task, outs[l].z_noise, &mut perm_rng)?;
                        let critic = params.critics[l].attach(&mut g);
                        critic_graph_builds += 1;
                        adv_estimates[l] =
                            Some(encoder_adv_loss(&mut g, &critic, &model.adv[l], &pair)?);
                    }
                }
                let (loss, bd) = phase_loss(
                    &mut g,
                    &model,
                    &outs,
                    y_final,
                    y,
                    &betas,
                    &adv_estimates,
                    &opts,
                    &phase,
                )?;
                check_finite("encoder loss", bd.total, epoch)?;
                g.backward(loss)?;
                for &l in &phase.active_layers {
                    let block = &attached.blocks[l];
                    let adam = &mut block_adam[l];
                    let p = &mut params.blocks[l];
                    for (attached_store, store, state) in [
                        (&block.feature_encoder, &mut p.feature_encoder, &mut adam.feature_encoder),
                        (&block.noise_encoder, &mut p.noise_encoder, &mut adam.noise_encoder),
                        (&block.task_predictor, &mut p.task_predictor, &mut adam.task_predictor),
                        (&block.joint_predictor, &mut p.joint_predictor, &mut adam.joint_predictor),
                    ] {
                        let grads = attached_store.grads(&g);
                        adam_step(store, &grads, state, &hyper)?;
                    }
                }
                if phase.train_final {
                    let grads = attached.final_predictor.grads(&g);
                    adam_step(&mut params.final_predictor, &grads, &mut final_adam, &hyper)?;
                }
                acc.total += bd.total;
                acc.task += bd.task;
                acc.noise += bd.noise;
                acc.adversarial += bd.adversarial;
                acc.kl += bd.kl;
                acc.final_mse += bd.final_mse;
            }
            let nb = n_batches.max(1) as f64;
            trace.task.push(acc.task / nb);
            trace.noise.push(acc.noise / nb);
            trace.adversarial.push(acc.adversarial / nb);
            trace.kl.push(acc.kl / nb);
            let cs = critic_steps.max(1) as f64;
            trace.critic.push(if critic_steps > 0 { critic_acc / cs } else { 0.0 });
            trace.independence.push(if critic_steps > 0 { indep_acc / cs } else { 0.0 });

            if let Some(patience) = schedule.patience {
                let valid = evaluate_adverisf(&model, &params, data, &data.valid_idx)?;
                if valid > best_valid {
                    best_valid = valid;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= patience {
                        break;
                    }
                }
            }
        }
        phase_end_params.push(params.clone());
    }

    let train_r2 = evaluate_adverisf(&model, &params, data, &data.train_idx)?;
    let valid_r2 = evaluate_adverisf(&model, &params, data, &data.valid_idx)?;
    let test_r2 = evaluate_adverisf(&model, &params, data, &data.test_idx)?;
    let record = RunRecord {
        version: RECORD_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        model: format!("adverisf-{}", variant.tag()),
        seed,
        train_r2,
        valid_r2,
        test_r2,
        diverged: false,
        epochs_run: trace.task.len(),
        critic_graph_builds,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        trace,
    };
    Ok(TrainOutcome { params, record, phase_end_params })
}

#[allow(clippy::too_many_arguments)]
fn phase_loss(
    g: &mut Graph,
    model: &ModelSpec,
    outs: &[BlockOutput],
    y_final: Value,
    y: Value,
    betas: &[(f64, f64)],
    adv_estimates: &[Option<Value>],
    opts: &LossOpts,
    phase: &Phase,
) -> Result<(Value, LossBreakdown), AdvError> {
    // restrict the summed objective to this phase's layers by masking the
    // others out of the term list
    let mut masked_estimates = vec![None; outs.len()];
    for &l in &phase.loss_layers {
        masked_estimates[l] = adv_estimates[l];
    }
    if phase.loss_layers.len() == outs.len() && phase.include_final_mse {
        return total_loss(g, model, outs, y_final, y, betas, &masked_estimates, opts);
    }

    // phase-restricted objective (two-stage): only this phase's layers
    let mut breakdown = LossBreakdown::default();
    let mut terms: Vec<Value> = Vec::new();
    for &l in &phase.loss_layers {
        let out = &outs[l];
        let (beta_task, beta_noise) = betas[l];
        let fit = mse(g, out.y_task, y)?;
        breakdown.task += g.data(fit)[[0, 0]];
        terms.push(fit);
        let fitn = mse(g, out.y_joint, y)?;
        let wn = g.scale(fitn, opts.noise_weight);
        breakdown.noise += g.data(wn)[[0, 0]];
        terms.push(wn);
        if opts.include_kl {
            let kt = kl_standard_normal(g, &out.z_task_dist)?;
            let kt = g.scale(kt, beta_task);
            breakdown.kl += g.data(kt)[[0, 0]];
            terms.push(kt);
            let kn = kl_standard_normal(g, &out.z_noise_dist)?;
            let kn = g.scale(kn, beta_noise * opts.noise_weight);
            breakdown.kl += g.data(kn)[[0, 0]];
            terms.push(kn);
        }
        if let Some(est) = masked_estimates[l] {
            let lam = model.adv[l].lambda_adv;
            if lam != 0.0 {
                let s = g.scale(est, lam);
                breakdown.adversarial += g.data(s)[[0, 0]];
                terms.push(s);
            }
        }
    }
    if phase.include_final_mse {
        let fit = mse(g, y_final, y)?;
        breakdown.final_mse = g.data(fit)[[0, 0]];
        terms.push(fit);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    breakdown.total = g.data(total)[[0, 0]];
    Ok((total, breakdown))
}

pub fn predict_adverisf(
    model: &ModelSpec,
    params: &ModelParams,
    x_data: &Tensor,
) -> Result<Vec<f64>, AdvError> {
    let mut g = Graph::new();
    let x = g.leaf(x_data.clone());
    let attached = params.attach_encoders(&mut g);
    let mut rng = stream_rng(0, "eval");
    let (_, y_final) = forward_cascade(&mut g, model, &attached, x, Mode::Eval, true, &mut rng)?;
    Ok(g.data(y_final).column(0).to_vec())
}

pub fn evaluate_adverisf(
    model: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
) -> Result<f64, AdvError> {
    let preds = predict_adverisf(model, params, &data.x_rows(idx))?;
    let targets: Vec<f64> = data.y_rows(idx).column(0).to_vec();
    r_squared(&preds, &targets)
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

fn simple_record(
    model: &str,
    seed: u64,
    config_hash: &str,
    trace: EpochTrace,
    r2: (f64, f64, f64),
    start: Instant,
) -> RunRecord {
    RunRecord {
        version: RECORD_VERSION.to_string(),
        config_hash: config_hash.to_string(),
        model: model.to_string(),
        seed,
        train_r2: r2.0,
        valid_r2: r2.1,
        test_r2: r2.2,
        diverged: false,
        epochs_run: trace.task.len(),
        critic_graph_builds: 0,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        trace,
    }
}

fn baseline_epochs_lr(schedule: &ScheduleSpec) -> (usize, f64) {
    (schedule.epochs.iter().sum(), schedule.lr[0])
}

pub fn predict_mlp(spec: &MlpSpec, params: &ParamStore, x_data: &Tensor) -> Result<Vec<f64>, AdvError> {
    let mut g = Graph::new();
    let x = g.leaf(x_data.clone());
    let attached = params.attach(&mut g);
    let out = mlp_forward(&mut g, &attached, spec, x)?;
    Ok(g.data(out).column(0).to_vec())
}

fn eval_r2_with(
    data: &Dataset,
    idx: &[usize],
    predict: &mut impl FnMut(&Tensor) -> Result<Vec<f64>, AdvError>,
) -> Result<f64, AdvError> {
    let preds = predict(&data.x_rows(idx))?;
    let targets: Vec<f64> = data.y_rows(idx).column(0).to_vec();
    r_squared(&preds, &targets)
}

pub fn train_baseline_mlp(
    spec: &MlpSpec,
    data: &Dataset,
    schedule: &ScheduleSpec,
    seed: u64,
    config_hash: &str,
) -> Result<(ParamStore, RunRecord), AdvError> {
    let start = Instant::now();
    let (epochs, lr) = baseline_epochs_lr(schedule);
    let mut params = init_params(spec, &mut stream_rng(seed, "init"));
    let mut state = AdamState::new();
    let hyper = AdamHyper::with_lr(lr);
    let mut batch_rng = stream_rng(seed, "batches");
    let mut trace = EpochTrace::default();
    let mut best_valid = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..epochs {
        let mut acc = 0.0;
        let batch_list = batches(&data.train_idx, schedule.batch_size, &mut batch_rng);
        let nb = batch_list.len().max(1) as f64;
        for idx in batch_list {
            let mut g = Graph::new();
            let x = g.leaf(data.x_rows(&idx));
            let y = g.leaf(data.y_rows(&idx));
            let attached = params.attach(&mut g);
            let out = mlp_forward(&mut g, &attached, spec, x)?;
            let loss = mse(&mut g, out, y)?;
            let lv = g.data(loss)[[0, 0]];
            check_finite("mlp loss", lv, epoch)?;
            acc += lv;
            g.backward(loss)?;
            let grads = attached.grads(&g);
            adam_step(&mut params, &grads, &mut state, &hyper)?;
        }
        trace.task.push(acc / nb);
        trace.noise.push(0.0);
        trace.adversarial.push(0.0);
        trace.critic.push(0.0);
        trace.kl.push(0.0);
        trace.independence.push(0.0);
        if let Some(patience) = schedule.patience {
            let valid =
                eval_r2_with(data, &data.valid_idx, &mut |x| predict_mlp(spec, &params, x))?;
            if valid > best_valid {
                best_valid = valid;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    let mut predict = |x: &Tensor| predict_mlp(spec, &params, x);
    let train = eval_r2_with(data, &data.train_idx, &mut predict)?;
    let valid = eval_r2_with(data, &data.valid_idx, &mut predict)?;
    let test = eval_r2_with(data, &data.test_idx, &mut predict)?;
    let record = simple_record("mlp", seed, config_hash, trace, (train, valid, test), start);
    Ok((params, record))
}

pub fn predict_vib(spec: &VibSpec, params: &VibParams, x_data: &Tensor) -> Result<Vec<f64>, AdvError> {
    let mut g = Graph::new();
    let x = g.leaf(x_data.clone());
    let encoder = params.encoder.attach(&mut g);
    let predictor = params.predictor.attach(&mut g);
    let mut rng = stream_rng(0, "eval");
    let fwd = vib_forward(&mut g, &encoder, &predictor, spec, x, Mode::Eval, &mut rng)?;
    Ok(g.data(fwd.prediction).column(0).to_vec())
}

pub fn train_baseline_vib(
    spec: &VibSpec,
    data: &Dataset,
    schedule: &ScheduleSpec,
    seed: u64,
    config_hash: &str,
) -> Result<(VibParams, RunRecord), AdvError> {
    let start = Instant::now();
    let (epochs, lr) = baseline_epochs_lr(schedule);
    let mut params = VibParams::init(spec, &mut stream_rng(seed, "init"));
    let mut enc_state = AdamState::new();
    let mut pred_state = AdamState::new();
    let hyper = AdamHyper::with_lr(lr);
    let mut batch_rng = stream_rng(seed, "batches");
    let mut sample_rng = stream_rng(seed, "sample");
    let mut trace = EpochTrace::default();
    let mut best_valid = f64::NEG_INFINITY;
    let mut since_best = 0usize;
    for epoch in 0..epochs {
        let mut task_acc = 0.0;
        let mut kl_acc = 0.0;
        let batch_list = batches(&data.train_idx, schedule.batch_size, &mut batch_rng);
        let nb = batch_list.len().max(1) as f64;
        for idx in batch_list {
            let mut g = Graph::new();
            let x = g.leaf(data.x_rows(&idx));
            let y = g.leaf(data.y_rows(&idx));
            let encoder = params.encoder.attach(&mut g);
            let predictor = params.predictor.attach(&mut g);
            let fwd =
                vib_forward(&mut g, &encoder, &predictor, spec, x, Mode::Train, &mut sample_rng)?;
            let loss = vib_loss(&mut g, &fwd, y, spec.beta)?;
            let lv = g.data(loss)[[0, 0]];
            check_finite("vib loss", lv, epoch)?;
            let fit = mse(&mut g, fwd.prediction, y)?;
            task_acc += g.data(fit)[[0, 0]];
            kl_acc += spec.beta * g.data(fwd.kl)[[0, 0]];
            g.backward(loss)?;
            let enc_grads = encoder.grads(&g);
            adam_step(&mut params.encoder, &enc_grads, &mut enc_state, &hyper)?;
            let pred_grads = predictor.grads(&g);
            adam_step(&mut params.predictor, &pred_grads, &mut pred_state, &hyper)?;
        }
        trace.task.push(task_acc / nb);
        trace.noise.push(0.0);
        trace.adversarial.push(0.0);
        trace.critic.push(0.0);
        trace.kl.push(kl_acc / nb);
        trace.independence.push(0.0);
        if let Some(patience) = schedule.patience {
            let valid =
                eval_r2_with(data, &data.valid_idx, &mut |x| predict_vib(spec, &params, x))?;
            if valid > best_valid {
                best_valid = valid;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
    }
    let mut predict = |x: &Tensor| predict_vib(spec, &params, x);
    let train = eval_r2_with(data, &data.train_idx, &mut predict)?;
    let valid = eval_r2_with(data, &data.valid_idx, &mut predict)?;
    let test = eval_r2_with(data, &data.test_idx, &mut predict)?;
    let record = simple_record("vib", seed, config_hash, trace, (train, valid, test), start);
    Ok((params, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, normalize, split, SplitMode, SyntheticSpec};
    use crate::latent::BetaSpec;

    fn tiny_block(input_dim: usize, d_task: usize, d_noise: usize) -> BlockSpec {
        BlockSpec {
            input_dim,
            d_task,
            d_noise,
            hidden: vec![8],
            activation_slope: 0.01,
            beta_task: BetaSpec::fixed(0.01),
            beta_noise: BetaSpec::fixed(1e-4),
            detach_z_task: false,
        }
    }

    fn tiny_model() -> ModelSpec {
        let l1 = tiny_block(6, 2, 3);
        let l2 = tiny_block(3, 2, 2);
        let adv1 = AdvSpec::new(2, 3, &[6], 0.5, 2);
        let adv2 = AdvSpec::new(2, 2, &[6], 0.5, 2);
        ModelSpec {
            layers: vec![l1, l2],
            adv: vec![adv1, adv2],
            final_predictor: MlpSpec::new(4, &[8], 1),
        }
    }

    fn tiny_data(seed: u64) -> Dataset {
        let spec = SyntheticSpec { n_samples: 80, d_total: 6, d_dominant: 2, d_subtle: 2, ..Default::default() };
        let mut data = generate_synthetic(&spec, seed);
        split(&mut data, SplitMode::Ratio(0.6), 0.2, seed).unwrap();
        normalize(&mut data).unwrap();
        data
    }

    #[test]
    fn model_validation() {
        let model = tiny_model();
        assert!(model.validate().is_ok());
        assert_eq!(model.d_task_total(), 4);
        let mut bad = model.clone();
        bad.layers[1].input_dim = 4;
        assert!(bad.validate().is_err());
        let mut bad = model.clone();
        bad.final_predictor.in_dim = 5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cascade_shapes_and_eval_determinism() {
        let model = tiny_model();
        let params = ModelParams::init(&model, &mut stream_rng(0, "init"));
        let x_data = Tensor::from_shape_fn((7, 6), |(i, j)| ((i * 6 + j) as f64 * 0.17).sin());
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone());
            let attached = params.attach_encoders(&mut g);
            let mut rng = stream_rng(3, "sample");
            let (outs, y_final) =
                forward_cascade(&mut g, &model, &attached, x, Mode::Eval, true, &mut rng).unwrap();
            assert_eq!(outs.len(), 2);
            assert_eq!(g.shape(outs[1].z_task).cols, 2);
            assert_eq!((g.shape(y_final).rows, g.shape(y_final).cols), (7, 1));
            g.data(y_final).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_layer_cascade_is_final_of_z_task() {
        let block = tiny_block(6, 2, 3);
        let model = ModelSpec {
            layers: vec![block],
            adv: vec![AdvSpec::new(2, 3, &[6], 0.0, 1)],
            final_predictor: MlpSpec::new(2, &[8], 1),
        };
        let params = ModelParams::init(&model, &mut stream_rng(1, "init"));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_shape_fn((4, 6), |(i, j)| (i + j) as f64 * 0.1));
        let attached = params.attach_encoders(&mut g);
        let mut rng = stream_rng(1, "sample");
        let (outs, y_final) =
            forward_cascade(&mut g, &model, &attached, x, Mode::Eval, true, &mut rng).unwrap();
        let direct =
            mlp_forward(&mut g, &attached.final_predictor, &model.final_predictor, outs[0].z_task)
                .unwrap();
        assert_eq!(g.data(y_final), g.data(direct));
    }

    #[test]
    fn total_loss_matches_hand_combined_components() {
        let model = tiny_model();
        let params = ModelParams::init(&model, &mut stream_rng(4, "init"));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_shape_fn((3, 6), |(i, j)| ((i * 6 + j) as f64 * 0.23).cos()));
        let y = g.leaf(Tensor::from_shape_vec((3, 1), vec![0.3, -0.2, 1.1]).unwrap());
        let attached = params.attach_encoders(&mut g);
        let mut rng = stream_rng(4, "sample");
        let (outs, y_final) =
            forward_cascade(&mut g, &model, &attached, x, Mode::Eval, true, &mut rng).unwrap();
        let betas = vec![(0.25, 8e-5), (4e-4, 8e-5)];

        // independent arithmetic oracle from raw forward products
        let mut expected = 0.0;
        let y_arr = g.data(y).clone();
        let plain_mse = |p: &Tensor| -> f64 {
            p.iter().zip(y_arr.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0
        };
        for (l, out) in outs.iter().enumerate() {
            expected += plain_mse(g.data(out.y_task));
            expected += plain_mse(g.data(out.y_joint));
            let kl = |mean: &Tensor, lv: &Tensor| -> f64 {
                mean.iter()
                    .zip(lv.iter())
                    .map(|(m, v)| 0.5 * (m * m + v.exp() - v - 1.0))
                    .sum::<f64>()
                    / 3.0
            };
            let kt = kl(g.data(out.z_task_dist.mean), g.data(out.z_task_dist.log_var));
            let kn = kl(g.data(out.z_noise_dist.mean), g.data(out.z_noise_dist.log_var));
            expected += betas[l].0 * kt + betas[l].1 * kn;
        }
        expected += plain_mse(g.data(y_final));

        let (_, bd) = total_loss(
            &mut g,
            &model,
            &outs,
            y_final,
            y,
            &betas,
            &[None, None],
            &LossOpts::default(),
        )
        .unwrap();
        assert!((bd.total - expected).abs() < 1e-10, "{} vs {expected}", bd.total);
    }

    #[test]
    fn total_loss_zero_at_perfection() {
        // perfect predictors and prior posteriors, lambda 0 -> 0
        let model = ModelSpec {
            layers: vec![tiny_block(2, 1, 1)],
            adv: vec![AdvSpec::new(1, 1, &[4], 0.0, 1)],
            final_predictor: MlpSpec::new(1, &[], 1),
        };
        let mut g = Graph::new();
        let y_data = Tensor::from_shape_vec((2, 1), vec![0.5, -0.5]).unwrap();
        let y = g.leaf(y_data.clone());
        let pred = g.leaf(y_data.clone());
        let head = g.leaf(Tensor::zeros((2, 2)));
        let dist = gaussian_head(&mut g, head, 1).unwrap();
        let z = reparameterize(&mut g, &dist, None).unwrap();
        let out = BlockOutput {
            z_task_dist: dist.clone(),
            z_task: z,
            y_task: pred,
            z_noise_dist: dist,
            z_noise: z,
            y_joint: pred,
        };
        let (_, bd) = total_loss(
            &mut g,
            &model,
            &[out],
            pred,
            y,
            &[(0.25, 8e-5)],
            &[None],
            &LossOpts::default(),
        )
        .unwrap();
        assert!(bd.total.abs() < 1e-15);
    }

    #[test]
    fn vib_reduction_is_exact() {
        // degenerate single-layer model with tied final head equals the VIB
        // loss on shared parameters, eval mode and matched train-mode draws
        let hidden = vec![8usize];
        let block = BlockSpec {
            input_dim: 6,
            d_task: 3,
            d_noise: 2,
            hidden: hidden.clone(),
            activation_slope: 0.01,
            beta_task: BetaSpec::fixed(0.05),
            beta_noise: BetaSpec::fixed(0.0),
            detach_z_task: false,
        };
        let params = BlockParams::init(&block, &mut stream_rng(9, "init"));
        let vib_spec = VibSpec {
            input_dim: 6,
            d_z: 3,
            encoder_hidden: hidden.clone(),
            predictor_hidden: hidden.clone(),
            beta: 0.05,
            activation_slope: 0.01,
        };
        let vib_params =
            VibParams { encoder: params.feature_encoder.clone(), predictor: params.task_predictor.clone() };

        let x_data = Tensor::from_shape_fn((5, 6), |(i, j)| ((i * 6 + j) as f64 * 0.41).sin());
        let y_data = Tensor::from_shape_fn((5, 1), |(i, _)| (i as f64 * 0.3).cos());

        for mode in [Mode::Eval, Mode::Train] {
            // adverisf side
            let model = ModelSpec {
                layers: vec![block.clone()],
                adv: vec![AdvSpec::new(3, 2, &[4], 0.0, 1)],
                final_predictor: MlpSpec::new(3, &hidden, 1),
            };
            let mut g = Graph::new();
            let x = g.leaf(x_data.clone());
            let y = g.leaf(y_data.clone());
            let attached_block = params.attach(&mut g);
            let mut rng = stream_rng(42, "sample");
            let out = crate::separation::block_forward(
                &mut g, &attached_block, &block, x, mode, true, &mut rng,
            )
            .unwrap();
            // tie the final head to the task predictor
            let y_final = out.y_task;
            let opts = LossOpts { noise_weight: 0.0, include_kl: true, tie_final_to_task: true };
            let outs = vec![out];
            let (_, bd) = total_loss(
                &mut g,
                &model,
                &outs,
                y_final,
                y,
                &[(0.05, 0.0)],
                &[None],
                &opts,
            )
            .unwrap();

            // vib side with identical parameter values and draw stream
            let mut g2 = Graph::new();
            let x2 = g2.leaf(x_data.clone());
            let y2 = g2.leaf(y_data.clone());
            let encoder = vib_params.encoder.attach(&mut g2);
            let predictor = vib_params.predictor.attach(&mut g2);
            let mut rng2 = stream_rng(42, "sample");
            let fwd =
                vib_forward(&mut g2, &encoder, &predictor, &vib_spec, x2, mode, &mut rng2).unwrap();
            let vl = vib_loss(&mut g2, &fwd, y2, 0.05).unwrap();
            let vib_val = g2.data(vl)[[0, 0]];
            assert!(
                (bd.total - vib_val).abs() <= 1e-12,
                "{mode:?}: {} vs {vib_val}",
                bd.total
            );
        }
    }

    fn tiny_schedule_joint() -> ScheduleSpec {
        ScheduleSpec::joint(3, 1e-3, 16)
    }

    #[test]
    fn joint_training_is_seed_deterministic() {
        let model = tiny_model();
        let data = tiny_data(0);
        let a = train_adverisf(&model, &data, &tiny_schedule_joint(), AblationVariant::A0, 7, "h")
            .unwrap();
        let b = train_adverisf(&model, &data, &tiny_schedule_joint(), AblationVariant::A0, 7, "h")
            .unwrap();
        assert_eq!(a.record.test_r2.to_bits(), b.record.test_r2.to_bits());
        assert_eq!(a.record.trace.task, b.record.trace.task);
        assert_eq!(a.record.trace.critic, b.record.trace.critic);
        assert!(a.record.trace.is_finite());
        assert!(a.record.critic_graph_builds > 0);
    }

    #[test]
    fn two_stage_freezing_is_exact() {
        let model = tiny_model();
        let data = tiny_data(1);
        let schedule = ScheduleSpec::two_stage(&[2, 2], &[1e-3, 5e-4], 16);
        let out = train_adverisf(&model, &data, &schedule, AblationVariant::A0, 3, "h").unwrap();
        assert_eq!(out.phase_end_params.len(), 2);
        let after_p1 = &out.phase_end_params[0].blocks[0];
        let final_b0 = &out.params.blocks[0];
        for ((_, a), (_, b)) in after_p1
            .feature_encoder
            .iter()
            .chain(after_p1.noise_encoder.iter())
            .chain(after_p1.task_predictor.iter())
            .chain(after_p1.joint_predictor.iter())
            .zip(
                final_b0
                    .feature_encoder
                    .iter()
                    .chain(final_b0.noise_encoder.iter())
                    .chain(final_b0.task_predictor.iter())
                    .chain(final_b0.joint_predictor.iter()),
            )
        {
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // phase 1 must have left the final predictor at initialization
        let model_applied = apply_variant(&model, AblationVariant::A0);
        let init = ModelParams::init(&model_applied, &mut stream_rng(3, "init"));
        for ((_, a), (_, b)) in
            out.phase_end_params[0].final_predictor.iter().zip(init.final_predictor.iter())
        {
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        // ... and phase 2 must have moved block 2
        let p2_moved = out
            .params
            .blocks[1]
            .feature_encoder
            .iter()
            .zip(out.phase_end_params[0].blocks[1].feature_encoder.iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(p2_moved);
    }

    #[test]
    fn a3_builds_no_critic_graphs() {
        let model = tiny_model();
        let data = tiny_data(2);
        let out = train_adverisf(&model, &data, &tiny_schedule_joint(), AblationVariant::A3, 1, "h")
            .unwrap();
        assert_eq!(out.record.critic_graph_builds, 0);
        assert!(out.record.trace.critic.iter().all(|&v| v == 0.0));
        assert!(out.record.trace.adversarial.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn a1_truncates_to_single_layer() {
        let model = tiny_model();
        let applied = apply_variant(&model, AblationVariant::A1);
        assert_eq!(applied.layers.len(), 1);
        assert_eq!(applied.final_predictor.in_dim, 2);
        assert!(applied.validate().is_ok());
        let data = tiny_data(3);
        let out = train_adverisf(&model, &data, &tiny_schedule_joint(), AblationVariant::A1, 1, "h")
            .unwrap();
        assert!(out.record.trace.is_finite());
        assert_eq!(out.params.blocks.len(), 1);
    }

    #[test]
    fn a2_runs_without_kl() {
        let model = tiny_model();
        let data = tiny_data(4);
        let out = train_adverisf(&model, &data, &tiny_schedule_joint(), AblationVariant::A2, 1, "h")
            .unwrap();
        assert!(out.record.trace.kl.iter().all(|&v| v == 0.0));
        assert!(out.record.trace.is_finite());
    }

    #[test]
    fn mlp_baseline_fits_a_line() {
        // y = 2x + 1 with no noise: a linear model must reach R^2 > 0.999
        let n = 60;
        let x = Tensor::from_shape_fn((n, 1), |(i, _)| i as f64 / n as f64 - 0.5);
        let y: Vec<f64> = x.column(0).iter().map(|v| 2.0 * v + 1.0).collect();
        let mut data = Dataset {
            x,
            y: ndarray::Array1::from_vec(y),
            train_idx: vec![],
            valid_idx: vec![],
            test_idx: vec![],
            norm: None,
        };
        split(&mut data, SplitMode::Ratio(0.7), 0.15, 0).unwrap();
        normalize(&mut data).unwrap();
        let spec = MlpSpec::new(1, &[], 1);
        let schedule = ScheduleSpec::joint(800, 1e-2, 16);
        let (_, record) = train_baseline_mlp(&spec, &data, &schedule, 0, "h").unwrap();
        assert!(record.test_r2 > 0.999, "R^2 = {}", record.test_r2);
    }

    #[test]
    fn vib_baseline_trains_and_is_deterministic() {
        let data = tiny_data(5);
        let spec = VibSpec {
            input_dim: 6,
            d_z: 2,
            encoder_hidden: vec![8],
            predictor_hidden: vec![8],
            beta: 1e-3,
            activation_slope: 0.01,
        };
        let schedule = ScheduleSpec::joint(5, 1e-3, 16);
        let (_, a) = train_baseline_vib(&spec, &data, &schedule, 11, "h").unwrap();
        let (_, b) = train_baseline_vib(&spec, &data, &schedule, 11, "h").unwrap();
        assert_eq!(a.test_r2.to_bits(), b.test_r2.to_bits());
        assert!(a.trace.kl.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn schedule_validation() {
        let s = ScheduleSpec::two_stage(&[3, 2], &[1e-3, 5e-4], 20);
        assert!(s.validate(2).is_ok());
        assert!(s.validate(3).is_err());
        let bad = ScheduleSpec::joint(0, 1e-3, 20);
        assert!(bad.validate(1).is_err());
    }
}
