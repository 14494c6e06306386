//! Run artifacts: one versioned JSON record per (config, seed), plus
//! mean/std aggregation across seeds.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::AdvError;

pub const RECORD_VERSION: &str = "1.0";

/// Per-epoch loss component traces, each `epochs_run` long.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochTrace {
    pub task: Vec<f64>,
    pub noise: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub critic: Vec<f64>,
    pub kl: Vec<f64>,
    /// Wasserstein estimate E_paired[D] - E_shuffled[D] per epoch.
    pub independence: Vec<f64>,
}

impl EpochTrace {
    pub fn is_finite(&self) -> bool {
        [&self.task, &self.noise, &self.adversarial, &self.critic, &self.kl, &self.independence]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub model: String,
    pub seed: u64,
    pub train_r2: f64,
    pub valid_r2: f64,
    pub test_r2: f64,
    pub diverged: bool,
    pub epochs_run: usize,
    pub critic_graph_builds: u64,
    pub wall_clock_secs: f64,
    pub trace: EpochTrace,
}

fn major(version: &str) -> Option<&str> {
    version.split('.').next()
}

pub fn save_record(path: &Path, record: &RunRecord) -> Result<(), AdvError> {
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| AdvError::Checkpoint(format!("record serialization: {e}")))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_record(path: &Path) -> Result<RunRecord, AdvError> {
    let text = fs::read_to_string(path)?;
    let record: RunRecord = serde_json::from_str(&text)
        .map_err(|e| AdvError::Checkpoint(format!("{}: {e}", path.display())))?;
    if major(&record.version) != major(RECORD_VERSION) {
        return Err(AdvError::Checkpoint(format!(
            "{}: record version {} incompatible with {}",
            path.display(),
            record.version,
            RECORD_VERSION
        )));
    }
    Ok(record)
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub version: String,
    pub config_hash: String,
    pub model: String,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub mean_train_r2: f64,
    pub std_train_r2: f64,
    pub mean_valid_r2: f64,
    pub std_valid_r2: f64,
    pub mean_test_r2: f64,
    pub std_test_r2: f64,
}

pub fn aggregate(records: &[RunRecord]) -> Result<Aggregate, AdvError> {
    let first = records
        .first()
        .ok_or_else(|| AdvError::Config("aggregate of zero records".into()))?;
    let pick = |f: fn(&RunRecord) -> f64| -> Vec<f64> { records.iter().map(f).collect() };
    let (mean_train_r2, std_train_r2) = mean_std(&pick(|r| r.train_r2));
    let (mean_valid_r2, std_valid_r2) = mean_std(&pick(|r| r.valid_r2));
    let (mean_test_r2, std_test_r2) = mean_std(&pick(|r| r.test_r2));
    Ok(Aggregate {
        version: RECORD_VERSION.to_string(),
        config_hash: first.config_hash.clone(),
        model: first.model.clone(),
        n: records.len(),
        seeds: records.iter().map(|r| r.seed).collect(),
        mean_train_r2,
        std_train_r2,
        mean_valid_r2,
        std_valid_r2,
        mean_test_r2,
        std_test_r2,
    })
}

pub fn save_aggregate(path: &Path, agg: &Aggregate) -> Result<(), AdvError> {
    let json = serde_json::to_string_pretty(agg)
        .map_err(|e| AdvError::Checkpoint(format!("aggregate serialization: {e}")))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64, test_r2: f64) -> RunRecord {
        RunRecord {
            version: RECORD_VERSION.to_string(),
            config_hash: "abc".into(),
            model: "adverisf".into(),
            seed,
            train_r2: 0.9,
            valid_r2: 0.8,
            test_r2,
            diverged: false,
            epochs_run: 3,
            critic_graph_builds: 12,
            wall_clock_secs: 1.5,
            trace: EpochTrace {
                task: vec![1.0, 0.5, 0.2],
                noise: vec![1.0, 0.5, 0.2],
                adversarial: vec![0.0; 3],
                critic: vec![0.0; 3],
                kl: vec![0.1; 3],
                independence: vec![0.0; 3],
            },
        }
    }

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let rec = sample(7, 0.5);
        save_record(&path, &rec).unwrap();
        let back = load_record(&path).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.trace.task, rec.trace.task);
    }

    #[test]
    fn rejects_unknown_major_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut rec = sample(7, 0.5);
        rec.version = "2.0".into();
        save_record(&path, &rec).unwrap();
        assert!(load_record(&path).is_err());
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-15);
        assert!((s - 1.0).abs() < 1e-15);
        let (m, s) = mean_std(&[5.0]);
        assert_eq!((m, s), (5.0, 0.0));
        assert!(mean_std(&[]).0.is_nan());
    }

    #[test]
    fn aggregate_constant_records() {
        let records: Vec<_> = (0..10).map(|s| sample(s, 0.5)).collect();
        let agg = aggregate(&records).unwrap();
        assert_eq!(agg.n, 10);
        assert!((agg.mean_test_r2 - 0.5).abs() < 1e-15);
        assert!(agg.std_test_r2.abs() < 1e-15);
    }

    #[test]
    fn finite_trace_check() {
        let mut rec = sample(0, 0.5);
        assert!(rec.trace.is_finite());
        rec.trace.kl[1] = f64::NAN;
        assert!(!rec.trace.is_finite());
    }
}
