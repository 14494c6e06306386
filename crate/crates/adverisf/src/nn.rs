//! Dense network building blocks: LeakyReLU MLPs, parameter storage, Adam,
//! and a flat named-array checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Value};
use crate::error::AdvError;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Architecture of one MLP: hidden layers use LeakyReLU, output is linear.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    pub activation_slope: f64,
}

impl MlpSpec {
    pub fn new(in_dim: usize, hidden: &[usize], out_dim: usize) -> Self {
        MlpSpec { in_dim, hidden: hidden.to_vec(), out_dim, activation_slope: DEFAULT_LEAKY_SLOPE }
    }

    /// Layer (fan_in, fan_out) pairs from input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.in_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.out_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }
}

/// Named persistent tensors; graph leaves are re-attached each step.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Attaches every parameter as a fresh leaf of `graph`.
    pub fn attach(&self, graph: &mut Graph) -> AttachedParams {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), graph.leaf(t.clone()));
        }
        AttachedParams { ids }
    }
}

/// Leaf handles for one store inside one step's graph.
#[derive(Debug, Clone)]
pub struct AttachedParams {
    ids: BTreeMap<String, Value>,
}

impl AttachedParams {
    pub fn value(&self, name: &str) -> Value {
        self.ids[name]
    }

    /// Collects gradients after a backward pass; absent grads are zeros.
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .map(|(name, &v)| {
                let g = graph
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros((graph.shape(v).rows, graph.shape(v).cols)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// He-style initialization scaled for the LeakyReLU negative slope; biases zero.
pub fn init_params(spec: &MlpSpec, rng: &mut impl Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let gain2 = 2.0 / (1.0 + spec.activation_slope * spec.activation_slope);
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let std = (gain2 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Tensor::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng));
        let b = Tensor::zeros((1, fan_out));
        store.insert(&format!("w{i}"), w);
        store.insert(&format!("b{i}"), b);
    }
    store
}

/// Forward pass of `spec` through attached parameters.
pub fn mlp_forward(
    graph: &mut Graph,
    attached: &AttachedParams,
    spec: &MlpSpec,
    x: Value,
) -> Result<Value, AdvError> {
    if graph.shape(x).cols != spec.in_dim {
        return Err(AdvError::ShapeMismatch {
            op: "mlp_forward".to_string(),
            lhs: graph.shape(x).to_string(),
            rhs: format!("batch x {}", spec.in_dim),
        });
    }
    let n_layers = spec.hidden.len() + 1;
    let mut h = x;
    for i in 0..n_layers {
        let w = attached.value(&format!("w{i}"));
        let b = attached.value(&format!("b{i}"));
        h = graph.matmul(h, w)?;
        h = graph.add(h, b)?;
        if i + 1 < n_layers {
            h = graph.leaky_relu(h, spec.activation_slope);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort the run.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), AdvError> {
    for (name, g) in grads {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(AdvError::Diverged(format!("non-finite gradient for parameter '{name}'")));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (name, g) in grads {
        let p = store
            .get_mut(name)
            .ok_or_else(|| AdvError::Diverged(format!("unknown parameter '{name}' in adam_step")))?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dim()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dim()));
        *m = &*m * hyper.beta1 + g * (1.0 - hyper.beta1);
        *v = &*v * hyper.beta2 + &g.mapv(|x| x * x) * (1.0 - hyper.beta2);
        let m_hat = &*m / bc1;
        let v_hat = &*v / bc2;
        let update = m_hat / (v_hat.mapv(f64::sqrt) + hyper.eps);
        *p -= &(update * hyper.lr);
    }
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"ADVCKPT1";

/// Writes named stores as a flat binary container: magic, entry count, then
/// per entry `name_len,name,rows,cols,f64-LE data`.
pub fn save_checkpoint(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<(), AdvError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let total: u32 = stores.iter().map(|(_, s)| s.len() as u32).sum();
    buf.extend_from_slice(&total.to_le_bytes());
    for (prefix, store) in stores {
        for (name, t) in store.iter() {
            let full = format!("{prefix}/{name}");
            buf.extend_from_slice(&(full.len() as u32).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            buf.extend_from_slice(&(t.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.ncols() as u32).to_le_bytes());
            for x in t.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into prefix -> store maps.
pub fn load_checkpoint(path: &Path) -> Result<BTreeMap<String, ParamStore>, AdvError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], AdvError> {
        if *pos + n > bytes.len() {
            return Err(AdvError::Checkpoint("truncated file".to_string()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(AdvError::Checkpoint("bad magic / unsupported version".to_string()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut out: BTreeMap<String, ParamStore> = BTreeMap::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let full = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| AdvError::Checkpoint("non-utf8 name".to_string()))?;
        let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let data = take(&mut pos, rows * cols * 8)?;
        let vals: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_shape_vec((rows, cols), vals)
            .map_err(|e| AdvError::Checkpoint(e.to_string()))?;
        let (prefix, name) = full
            .split_once('/')
            .ok_or_else(|| AdvError::Checkpoint(format!("unprefixed entry '{full}'")))?;
        out.entry(prefix.to_string()).or_default().insert(name, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use ndarray::array;

    #[test]
    fn identity_linear_map() {
        let spec = MlpSpec::new(3, &[], 3);
        let mut store = ParamStore::new();
        store.insert("w0", Tensor::eye(3));
        store.insert("b0", Tensor::zeros((1, 3)));
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, -2.0, 0.5]]);
        let attached = store.attach(&mut g);
        let y = mlp_forward(&mut g, &attached, &spec, x).unwrap();
        assert_eq!(g.data(y), &array![[1.0, -2.0, 0.5]]);
    }

    #[test]
    fn single_hidden_unit_leaky_path() {
        let spec = MlpSpec::new(1, &[1], 1);
        let mut store = ParamStore::new();
        store.insert("w0", Tensor::from_elem((1, 1), 1.0));
        store.insert("b0", Tensor::zeros((1, 1)));
        store.insert("w1", Tensor::from_elem((1, 1), 1.0));
        store.insert("b1", Tensor::zeros((1, 1)));
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_elem((1, 1), -1.0));
        let attached = store.attach(&mut g);
        let y = mlp_forward(&mut g, &attached, &spec, x).unwrap();
        assert!((g.data(y)[[0, 0]] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn forward_shape_contract() {
        let mut rng = stream_rng(0, "init");
        let spec = MlpSpec::new(5, &[7, 3], 2);
        let store = init_params(&spec, &mut rng);
        for batch in [1usize, 20, 128] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::zeros((batch, 5)));
            let attached = store.attach(&mut g);
            let y = mlp_forward(&mut g, &attached, &spec, x).unwrap();
            assert_eq!((g.shape(y).rows, g.shape(y).cols), (batch, 2));
        }
    }

    #[test]
    fn init_is_seed_deterministic_with_zero_biases() {
        let spec = MlpSpec::new(4, &[6], 2);
        let a = init_params(&spec, &mut stream_rng(9, "init"));
        let b = init_params(&spec, &mut stream_rng(9, "init"));
        for (name, t) in a.iter() {
            assert_eq!(t, b.get(name).unwrap());
            if name.starts_with('b') {
                assert!(t.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn init_variance_matches_he_scaling() {
        // sample-statistics oracle: var ~= 2/fan_in within 20%
        let spec = MlpSpec::new(100, &[], 100);
        let store = init_params(&spec, &mut stream_rng(3, "init"));
        let w = store.get("w0").unwrap();
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let expected = 2.0 / 100.0;
        assert!((var - expected).abs() / expected < 0.2, "var {var}");
    }

    #[test]
    fn param_count_hand_check() {
        // [100, 100] spec on 8 inputs, scalar output
        let spec = MlpSpec::new(8, &[100, 100], 1);
        let hand = (8 + 1) * 100 + (100 + 1) * 100 + (100 + 1) * 1;
        assert_eq!(spec.param_count(), hand);
        let store = init_params(&spec, &mut stream_rng(0, "init"));
        assert_eq!(store.total_params(), hand);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_elem((1, 1), 1.0));
        let mut state = AdamState::new();
        let hyper = AdamHyper::with_lr(0.01);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_elem((1, 1), 0.37));
        adam_step(&mut store, &grads, &mut state, &hyper).unwrap();
        let delta = 1.0 - store.get("w").unwrap()[[0, 0]];
        assert!(delta > 0.99 * hyper.lr && delta <= hyper.lr, "delta {delta}");
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_zero_grad_is_identity() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_elem((2, 2), 5.0));
        let mut state = AdamState::new();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros((2, 2)));
        adam_step(&mut store, &grads, &mut state, &AdamHyper::with_lr(0.1)).unwrap();
        assert_eq!(store.get("w").unwrap(), &Tensor::from_elem((2, 2), 5.0));
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_optimizes_scalar_quadratic() {
        // 200 steps on f(x) = (x - 3)^2 with lr 0.1
        let mut store = ParamStore::new();
        store.insert("x", Tensor::from_elem((1, 1), 0.0));
        let mut state = AdamState::new();
        let hyper = AdamHyper::with_lr(0.1);
        for _ in 0..200 {
            let x = store.get("x").unwrap()[[0, 0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::from_elem((1, 1), 2.0 * (x - 3.0)));
            adam_step(&mut store, &grads, &mut state, &hyper).unwrap();
        }
        let x = store.get("x").unwrap()[[0, 0]];
        assert!((x - 3.0).abs() < 0.05, "x = {x}");
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_elem((1, 1), 1.0));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_elem((1, 1), f64::NAN));
        let err = adam_step(&mut store, &grads, &mut AdamState::new(), &AdamHyper::with_lr(0.1));
        assert!(matches!(err, Err(AdvError::Diverged(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = MlpSpec::new(3, &[4], 2);
        let store = init_params(&spec, &mut stream_rng(1, "init"));
        save_checkpoint(&path, &[("enc", &store)]).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        for (name, t) in store.iter() {
            assert_eq!(loaded["enc"].get(name).unwrap(), t);
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(AdvError::Checkpoint(_))));
    }
}
