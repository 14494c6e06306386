//! Synthetic hierarchical-factor dataset generation, CSV ingestion,
//! deterministic splits, and train-statistics normalization.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::AdvError;
use crate::rng::stream_rng;

/// Synthetic generator configuration. A 13-dim Gaussian source is projected
/// through a fixed random network into 3 dominant + 5 subtle factors; the
/// target mixes both (subtle scaled down) plus observation noise, while the
/// model only sees a linear mixing of the source.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub d_total: usize,
    pub d_dominant: usize,
    pub d_subtle: usize,
    pub subtle_scale: f64,
    pub target_noise: f64,
    /// Standard deviation of the dominant signal component in y.
    pub dominant_scale: f64,
    /// Standard deviation of the subtle signal before `subtle_scale` is applied.
    pub subtle_signal: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 1000,
            d_total: 13,
            d_dominant: 3,
            d_subtle: 5,
            subtle_scale: 0.2,
            target_noise: 0.15,
            dominant_scale: 2.4,
            subtle_signal: 3.2,
        }
    }
}

/// In-memory dataset with optional split indices and normalization stats.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub train_idx: Vec<usize>,
    pub valid_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub norm: Option<NormStats>,
}

/// Per-feature train statistics; applied to every split.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub x_mean: Array1<f64>,
    pub x_std: Array1<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

/// Split request: a train ratio or an absolute train count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum SplitMode {
    Ratio(f64),
    Count(usize),
}

/// Ground-truth latents kept alongside a synthetic dataset for verification.
#[derive(Debug, Clone)]
pub struct SyntheticLatents {
    pub z_dominant: Array2<f64>,
    pub z_subtle: Array2<f64>,
    pub f_dom: Array1<f64>,
    pub f_sub: Array1<f64>,
}

struct FixedMlp {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl FixedMlp {
    // single hidden layer of width 16, tanh, unit-Gaussian weights; the
    // saturating tanh over unit-scale weights makes each drawn function
    // substantially non-linear
    fn draw(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = 16;
        let mut t = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng));
        let w1 = t(in_dim, hidden);
        let w2 = t(hidden, out_dim);
        FixedMlp {
            w1,
            b1: Array1::from_shape_fn(hidden, |_| StandardNormal.sample(rng)),
            w2,
            b2: Array1::from_shape_fn(out_dim, |_| StandardNormal.sample(rng)),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = (x.dot(&self.w1) + &self.b1).mapv(f64::tanh);
        h.dot(&self.w2) + &self.b2
    }
}

/// Generates the synthetic dataset together with its ground-truth latents.
pub fn generate_synthetic_full(
    spec: &SyntheticSpec,
    seed: u64,
) -> (Dataset, SyntheticLatents) {
    let d_latent = spec.d_dominant + spec.d_subtle;
    let mut net_rng = stream_rng(seed, "synthetic/nets");
    let encoder = FixedMlp::draw(spec.d_total, d_latent, &mut net_rng);
    let f_dom_net = FixedMlp::draw(spec.d_dominant, 1, &mut net_rng);
    let f_sub_net = FixedMlp::draw(spec.d_subtle, 1, &mut net_rng);
    let w_trans =
        Array2::from_shape_fn((spec.d_total, spec.d_total), |_| StandardNormal.sample(&mut net_rng));
    let b_trans = Array1::from_shape_fn(spec.d_total, |_| {
        let v: f64 = StandardNormal.sample(&mut net_rng);
        0.1 * v
    });

    let mut sample_rng = stream_rng(seed, "synthetic/samples");
    let source = Array2::from_shape_fn((spec.n_samples, spec.d_total), |_| {
        StandardNormal.sample(&mut sample_rng)
    });
    let z_base = encoder.forward(&source);
    let z_dominant = z_base.slice(ndarray::s![.., ..spec.d_dominant]).to_owned();
    let z_subtle = z_base.slice(ndarray::s![.., spec.d_dominant..]).to_owned();
    // The raw network outputs are standardized and rescaled so the relative
    // strengths of dominant signal, subtle signal, and target noise are
    // controlled by the spec rather than by the random draw of the networks.
    let standardize = |v: Array1<f64>, scale: f64| {
        let n = v.len() as f64;
        let m = v.sum() / n;
        let sd = (v.mapv(|x| (x - m).powi(2)).sum() / n).sqrt().max(1e-12);
        v.mapv(|x| (x - m) / sd * scale)
    };
    let f_dom = standardize(
        f_dom_net.forward(&z_dominant).column(0).to_owned(),
        spec.dominant_scale,
    );
    let f_sub = standardize(
        f_sub_net.forward(&z_subtle).column(0).to_owned(),
        spec.subtle_signal,
    );
    let eps: Array1<f64> =
        Array1::from_shape_fn(spec.n_samples, |_| StandardNormal.sample(&mut sample_rng));
    let y = &f_dom + &(&f_sub * spec.subtle_scale) + &(&eps * spec.target_noise);
    let x = source.dot(&w_trans) + &b_trans;

    let ds = Dataset { x, y, train_idx: vec![], valid_idx: vec![], test_idx: vec![], norm: None };
    (ds, SyntheticLatents { z_dominant, z_subtle, f_dom, f_sub })
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Dataset {
    generate_synthetic_full(spec, seed).0
}

/// Loads a numeric CSV with a header row; the target column is removed from
/// the feature matrix.
pub fn load_csv(path: &Path, target_column: &str, delimiter: char) -> Result<Dataset, AdvError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AdvError::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| AdvError::Dataset(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(delimiter).map(|c| c.trim()).collect();
    let target_pos = cols
        .iter()
        .position(|&c| c == target_column)
        .ok_or_else(|| AdvError::Dataset(format!("target column '{target_column}' not found")))?;
    let n_features = cols.len() - 1;
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(delimiter).map(|c| c.trim()).collect();
        if cells.len() != cols.len() {
            return Err(AdvError::Dataset(format!(
                "row {}: expected {} cells, got {}",
                line_no + 1,
                cols.len(),
                cells.len()
            )));
        }
        for (i, cell) in cells.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                AdvError::Dataset(format!(
                    "row {}: non-numeric cell '{}' in column '{}'",
                    line_no + 1,
                    cell,
                    cols[i]
                ))
            })?;
            if i == target_pos {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(AdvError::Dataset(format!("{}: no data rows", path.display())));
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, n_features), xs)
        .map_err(|e| AdvError::Dataset(e.to_string()))?;
    Ok(Dataset {
        x,
        y: Array1::from_vec(ys),
        train_idx: vec![],
        valid_idx: vec![],
        test_idx: vec![],
        norm: None,
    })
}

/// Uniform random split without replacement; remaining rows become the test
/// set, and a validation slice is carved from train when requested.
pub fn split(
    dataset: &mut Dataset,
    mode: SplitMode,
    valid_fraction: f64,
    seed: u64,
) -> Result<(), AdvError> {
    let n = dataset.y.len();
    let n_train = match mode {
        SplitMode::Ratio(r) => {
            if !(0.0..1.0).contains(&r) || r <= 0.0 {
                return Err(AdvError::Dataset(format!("infeasible split ratio {r}")));
            }
            ((n as f64) * r).round() as usize
        }
        SplitMode::Count(c) => c,
    };
    if n_train == 0 || n_train >= n {
        return Err(AdvError::Dataset(format!("infeasible train size {n_train} of {n} rows")));
    }
    let mut rng = stream_rng(seed, "split");
    let perm = crate::rng::random_permutation(n, &mut rng);
    let mut train: Vec<usize> = perm[..n_train].to_vec();
    let test: Vec<usize> = perm[n_train..].to_vec();
    let n_valid = ((n_train as f64) * valid_fraction).round() as usize;
    let valid: Vec<usize> = train.split_off(n_train - n_valid);
    dataset.train_idx = train;
    dataset.valid_idx = valid;
    dataset.test_idx = test;
    Ok(())
}

/// Standardizes features and targets in place using train-set statistics only.
pub fn normalize(dataset: &mut Dataset) -> Result<(), AdvError> {
    if dataset.train_idx.is_empty() {
        return Err(AdvError::Dataset("normalize called before split".to_string()));
    }
    let d = dataset.x.ncols();
    let n_train = dataset.train_idx.len() as f64;
    let mut x_mean = Array1::zeros(d);
    for &i in &dataset.train_idx {
        x_mean += &dataset.x.row(i);
    }
    x_mean /= n_train;
    let mut x_var = Array1::<f64>::zeros(d);
    for &i in &dataset.train_idx {
        let diff = &dataset.x.row(i) - &x_mean;
        x_var += &diff.mapv(|v| v * v);
    }
    x_var /= n_train;
    let x_std = x_var.mapv(|v| v.sqrt().max(1e-8));
    let y_mean =
        dataset.train_idx.iter().map(|&i| dataset.y[i]).sum::<f64>() / n_train;
    let y_var = dataset
        .train_idx
        .iter()
        .map(|&i| (dataset.y[i] - y_mean).powi(2))
        .sum::<f64>()
        / n_train;
    let y_std = y_var.sqrt().max(1e-8);

    for mut row in dataset.x.rows_mut() {
        row -= &x_mean;
        row /= &x_std;
    }
    dataset.y.mapv_inplace(|v| (v - y_mean) / y_std);
    dataset.norm = Some(NormStats { x_mean, x_std, y_mean, y_std });
    Ok(())
}

impl Dataset {
    /// Rows of `x` at the given indices.
    pub fn x_rows(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), self.x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.x.row(i));
        }
        out
    }

    /// Targets at the given indices as a column vector.
    pub fn y_rows(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), 1), |(r, _)| self.y[idx[r]])
    }

    /// Maps a prediction back to the raw target scale.
    pub fn destandardize_y(&self, v: f64) -> f64 {
        match &self.norm {
            Some(s) => v * s.y_std + s.y_mean,
            None => v,
        }
    }

    pub fn raw_y(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&i| self.destandardize_y(self.y[i])).collect()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }
}

/// Coefficient of determination on equal-length slices. May be negative.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Result<f64, AdvError> {
    if predictions.len() != targets.len() || targets.len() < 2 {
        return Err(AdvError::Dataset(format!(
            "r_squared needs equal lengths >= 2, got {} and {}",
            predictions.len(),
            targets.len()
        )));
    }
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(AdvError::Dataset("zero target variance in r_squared".to_string()));
    }
    let ss_res: f64 =
        predictions.iter().zip(targets).map(|(p, y)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Writes a dataset as CSV with columns `x0..x{d-1},y`.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), AdvError> {
    use std::io::Write;
    let mut out = String::new();
    let d = dataset.x.ncols();
    for j in 0..d {
        out.push_str(&format!("x{j},"));
    }
    out.push_str("y\n");
    for i in 0..dataset.y.len() {
        for j in 0..d {
            out.push_str(&format!("{},", dataset.x[[i, j]]));
        }
        out.push_str(&format!("{}\n", dataset.y[i]));
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(out.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
