//! Experiment configuration: a flat, diff-able key/value text format with
//! one section per concern, strict unknown-key rejection, a stable content
//! hash, and sweep-grid expansion.
//!
//! ```text
//! [dataset]
//! source = synthetic
//! n_samples = 1000
//! split = ratio:0.7
//!
//! [model]
//! kind = adverisf
//!
//! [layer1]
//! d_task = 2
//! d_noise = 5
//! ...
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adversarial::{AdvSpec, Objective, DEFAULT_GP_COEFF};
use crate::data::{load_csv, Dataset, SplitMode, SyntheticSpec};
use crate::error::AdvError;
use crate::latent::BetaSpec;
use crate::nn::MlpSpec;
use crate::pipeline::{ModelSpec, ScheduleSpec, Strategy, VibSpec};
use crate::separation::BlockSpec;

#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section).and_then(|s| s.get(key)).map(|v| v.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn remove_section(&mut self, section: &str) {
        self.sections.remove(section);
    }
}

pub fn parse_raw(text: &str) -> Result<RawConfig, AdvError> {
    let mut raw = RawConfig::default();
    let mut section = String::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| AdvError::Config(format!("line {}: unterminated section header", lineno + 1)))?;
            section = name.trim().to_string();
            raw.sections.entry(section.clone()).or_default();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| AdvError::Config(format!("line {}: expected key = value", lineno + 1)))?;
        if section.is_empty() {
            return Err(AdvError::Config(format!("line {}: key outside any section", lineno + 1)));
        }
        raw.sections
            .get_mut(&section)
            .unwrap()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(raw)
}

/// FNV-1a over the sorted section/key/value triples, hex-encoded.
pub fn config_hash(raw: &RawConfig) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for (section, entries) in &raw.sections {
        eat(section.as_bytes());
        eat(b"\x1f");
        for (k, v) in entries {
            eat(k.as_bytes());
            eat(b"=");
            eat(v.as_bytes());
            eat(b"\x1e");
        }
    }
    format!("{h:016x}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Adverisf,
    Vib,
    Mlp,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Adverisf => "adverisf",
            ModelKind::Vib => "vib",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv { path: PathBuf, target_column: String, delimiter: char },
}

#[derive(Debug, Clone)]
pub struct LayerConfig {
    pub d_task: usize,
    pub d_noise: usize,
    pub hidden: Vec<usize>,
    pub beta_task: BetaSpec,
    pub beta_noise: BetaSpec,
    pub detach_z_task: bool,
}

#[derive(Debug, Clone)]
pub struct AdvConfig {
    pub lambda_adv: f64,
    pub n_critic: usize,
    pub gp_coeff: f64,
    pub critic_hidden: Vec<usize>,
    pub objective: Objective,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub split: SplitMode,
    pub valid_fraction: f64,
    pub data_seed: u64,
    pub model_kind: ModelKind,
    pub mlp_hidden: Vec<usize>,
    pub vib_d_z: usize,
    pub vib_beta: f64,
    pub vib_encoder_hidden: Vec<usize>,
    pub vib_predictor_hidden: Vec<usize>,
    pub layers: Vec<LayerConfig>,
    pub adv: AdvConfig,
    pub final_hidden: Vec<usize>,
    pub schedule: ScheduleSpec,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub hash: String,
}

fn parse_field<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, AdvError> {
    value
        .parse()
        .map_err(|_| AdvError::Config(format!("[{section}] {key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>, AdvError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_field(section, key, v.trim())).collect()
}

struct Section<'a> {
    name: &'a str,
    entries: &'a BTreeMap<String, String>,
    allowed: &'a [&'a str],
}

impl<'a> Section<'a> {
    fn check_keys(&self) -> Result<(), AdvError> {
        for key in self.entries.keys() {
            if !self.allowed.contains(&key.as_str()) {
                return Err(AdvError::Config(format!(
                    "unknown key {key:?} in section [{}]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|v| v.as_str())
    }

    fn req(&self, key: &str) -> Result<&str, AdvError> {
        self.get(key)
            .ok_or_else(|| AdvError::Config(format!("missing key {key:?} in section [{}]", self.name)))
    }

    fn field<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, AdvError> {
        match self.get(key) {
            Some(v) => parse_field(self.name, key, v),
            None => Ok(default),
        }
    }

    fn req_field<T: std::str::FromStr>(&self, key: &str) -> Result<T, AdvError> {
        parse_field(self.name, key, self.req(key)?)
    }

    fn list<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>, AdvError>
    where
        T: Clone,
    {
        match self.get(key) {
            Some(v) => parse_list(self.name, key, v),
            None => Ok(default.to_vec()),
        }
    }
}

fn section<'a>(
    raw: &'a RawConfig,
    name: &'a str,
    allowed: &'a [&'a str],
) -> Result<Option<Section<'a>>, AdvError> {
    match raw.sections.get(name) {
        Some(entries) => {
            let s = Section { name, entries, allowed };
            s.check_keys()?;
            Ok(Some(s))
        }
        None => Ok(None),
    }
}

fn req_section<'a>(
    raw: &'a RawConfig,
    name: &'a str,
    allowed: &'a [&'a str],
) -> Result<Section<'a>, AdvError> {
    section(raw, name, allowed)?
        .ok_or_else(|| AdvError::Config(format!("missing section [{name}]")))
}

const DATASET_KEYS: &[&str] = &[
    "source", "csv_path", "target_column", "delimiter", "n_samples", "d_total", "d_dominant",
    "d_subtle", "subtle_scale", "target_noise", "dominant_scale", "subtle_signal", "split",
    "valid_fraction", "data_seed",
];
const MODEL_KEYS: &[&str] = &[
    "kind", "hidden", "d_z", "beta", "encoder_hidden", "predictor_hidden",
];
const LAYER_KEYS: &[&str] = &[
    "d_task", "d_noise", "hidden", "beta_task", "beta_task_sigma", "beta_noise",
    "beta_noise_sigma", "detach_z_task",
];
const ADV_KEYS: &[&str] = &["lambda_adv", "n_critic", "gp_coeff", "critic_hidden", "objective"];
const FINAL_KEYS: &[&str] = &["hidden"];
const SCHEDULE_KEYS: &[&str] = &["strategy", "epochs", "lr", "batch_size", "patience"];
const RUN_KEYS: &[&str] = &["seeds", "output_dir"];
pub const SWEEP_SECTION: &str = "sweep";

fn parse_split(value: &str) -> Result<SplitMode, AdvError> {
    if let Some(r) = value.strip_prefix("ratio:") {
        return Ok(SplitMode::Ratio(parse_field("dataset", "split", r)?));
    }
    if let Some(c) = value.strip_prefix("count:") {
        return Ok(SplitMode::Count(parse_field("dataset", "split", c)?));
    }
    Err(AdvError::Config(format!(
        "dataset split must be ratio:<f> or count:<n>, got {value:?}"
    )))
}

fn parse_beta(s: &Section, key: &str, sigma_key: &str) -> Result<BetaSpec, AdvError> {
    let mu: f64 = s.req_field(key)?;
    let sigma: f64 = s.field(sigma_key, 0.0)?;
    Ok(if sigma == 0.0 { BetaSpec::fixed(mu) } else { BetaSpec::gaussian(mu, sigma) })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, AdvError> {
    let raw = parse_raw(text)?;
    parse_config_raw(&raw)
}

pub fn parse_config_raw(raw: &RawConfig) -> Result<ExperimentConfig, AdvError> {
    for name in raw.sections.keys() {
        let known = matches!(
            name.as_str(),
            "dataset" | "model" | "adversarial" | "final" | "schedule" | "run" | SWEEP_SECTION
        ) || name.strip_prefix("layer").is_some_and(|n| n.parse::<usize>().is_ok());
        if !known {
            return Err(AdvError::Config(format!("unknown section [{name}]")));
        }
    }

    let ds = req_section(raw, "dataset", DATASET_KEYS)?;
    let source = match ds.req("source")? {
        "synthetic" => {
            let mut spec = SyntheticSpec::default();
            spec.n_samples = ds.field("n_samples", spec.n_samples)?;
            spec.d_total = ds.field("d_total", spec.d_total)?;
            spec.d_dominant = ds.field("d_dominant", spec.d_dominant)?;
            spec.d_subtle = ds.field("d_subtle", spec.d_subtle)?;
            spec.subtle_scale = ds.field("subtle_scale", spec.subtle_scale)?;
            spec.target_noise = ds.field("target_noise", spec.target_noise)?;
            spec.dominant_scale = ds.field("dominant_scale", spec.dominant_scale)?;
            spec.subtle_signal = ds.field("subtle_signal", spec.subtle_signal)?;
            DataSource::Synthetic(spec)
        }
        "csv" => {
            let path = PathBuf::from(ds.req("csv_path")?);
            if !path.exists() {
                return Err(AdvError::Dataset(format!("csv_path {} does not exist", path.display())));
            }
            let delimiter = ds.get("delimiter").unwrap_or(",");
            let mut chars = delimiter.chars();
            let d = chars
                .next()
                .filter(|_| chars.next().is_none())
                .ok_or_else(|| AdvError::Config("delimiter must be a single character".into()))?;
            DataSource::Csv {
                path,
                target_column: ds.req("target_column")?.to_string(),
                delimiter: d,
            }
        }
        other => return Err(AdvError::Config(format!("dataset source must be synthetic or csv, got {other:?}"))),
    };
    let split = parse_split(ds.req("split")?)?;
    let valid_fraction: f64 = ds.field("valid_fraction", 0.15)?;
    let data_seed: u64 = ds.field("data_seed", 0)?;

    let m = req_section(raw, "model", MODEL_KEYS)?;
    let model_kind = match m.req("kind")? {
        "adverisf" => ModelKind::Adverisf,
        "vib" => ModelKind::Vib,
        "mlp" => ModelKind::Mlp,
        other => return Err(AdvError::Config(format!("model kind must be adverisf, vib, or mlp, got {other:?}"))),
    };
    let mlp_hidden: Vec<usize> = m.list("hidden", &[400, 400, 400])?;
    let vib_d_z: usize = m.field("d_z", 4)?;
    let vib_beta: f64 = m.field("beta", 0.05)?;
    let vib_encoder_hidden: Vec<usize> = m.list("encoder_hidden", &[200, 200, 200])?;
    let vib_predictor_hidden: Vec<usize> = m.list("predictor_hidden", &[200, 200, 200])?;

    let mut layers = Vec::new();
    for l in 1.. {
        let name = format!("layer{l}");
        let Some(entries) = raw.sections.get(&name) else { break };
        let s = Section { name: &name, entries, allowed: LAYER_KEYS };
        s.check_keys()?;
        layers.push(LayerConfig {
            d_task: s.req_field("d_task")?,
            d_noise: s.req_field("d_noise")?,
            hidden: s.list("hidden", &[100, 100])?,
            beta_task: parse_beta(&s, "beta_task", "beta_task_sigma")?,
            beta_noise: parse_beta(&s, "beta_noise", "beta_noise_sigma")?,
            detach_z_task: s.field("detach_z_task", false)?,
        });
    }
    if model_kind == ModelKind::Adverisf && layers.is_empty() {
        return Err(AdvError::Config("adverisf model needs at least a [layer1] section".into()));
    }

    let adv = match section(raw, "adversarial", ADV_KEYS)? {
        Some(s) => AdvConfig {
            lambda_adv: s.field("lambda_adv", 1.0)?,
            n_critic: s.field("n_critic", 2)?,
            gp_coeff: s.field("gp_coeff", DEFAULT_GP_COEFF)?,
            critic_hidden: s.list("critic_hidden", &[50, 50])?,
            objective: match s.get("objective").unwrap_or("wasserstein_gp") {
                "wasserstein_gp" => Objective::WassersteinGp,
                "jsd" => Objective::Jsd,
                other => {
                    return Err(AdvError::Config(format!(
                        "objective must be wasserstein_gp or jsd, got {other:?}"
                    )))
                }
            },
        },
        None => AdvConfig {
            lambda_adv: 1.0,
            n_critic: 2,
            gp_coeff: DEFAULT_GP_COEFF,
            critic_hidden: vec![50, 50],
            objective: Objective::WassersteinGp,
        },
    };

    let final_hidden = match section(raw, "final", FINAL_KEYS)? {
        Some(s) => s.list("hidden", &[])?,
        None => Vec::new(),
    };

    let sc = req_section(raw, "schedule", SCHEDULE_KEYS)?;
    let strategy = match sc.req("strategy")? {
        "joint" => Strategy::Joint,
        "two_stage" => Strategy::TwoStage,
        other => return Err(AdvError::Config(format!("strategy must be joint or two_stage, got {other:?}"))),
    };
    let epochs: Vec<usize> = parse_list("schedule", "epochs", sc.req("epochs")?)?;
    let lr: Vec<f64> = parse_list("schedule", "lr", sc.req("lr")?)?;
    let patience = match sc.get("patience") {
        Some("") | None => None,
        Some(v) => Some(parse_field("schedule", "patience", v)?),
    };
    let schedule = ScheduleSpec {
        strategy,
        epochs,
        lr,
        batch_size: sc.field("batch_size", 20)?,
        patience,
    };

    let r = req_section(raw, "run", RUN_KEYS)?;
    let seeds: Vec<u64> = parse_list("run", "seeds", r.req("seeds")?)?;
    if seeds.is_empty() {
        return Err(AdvError::Config("run seeds list is empty".into()));
    }
    let output_dir = r.get("output_dir").map(PathBuf::from);

    let mut hashed = raw.clone();
    hashed.remove_section("run");
    Ok(ExperimentConfig {
        source,
        split,
        valid_fraction,
        data_seed,
        model_kind,
        mlp_hidden,
        vib_d_z,
        vib_beta,
        vib_encoder_hidden,
        vib_predictor_hidden,
        layers,
        adv,
        final_hidden,
        schedule,
        seeds,
        output_dir,
        hash: config_hash(&hashed),
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, AdvError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| AdvError::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn load_dataset(&self) -> Result<Dataset, AdvError> {
        let mut data = match &self.source {
            DataSource::Synthetic(spec) => crate::data::generate_synthetic(spec, self.data_seed),
            DataSource::Csv { path, target_column, delimiter } => {
                load_csv(path, target_column, *delimiter)?
            }
        };
        crate::data::split(&mut data, self.split, self.valid_fraction, self.data_seed)?;
        crate::data::normalize(&mut data)?;
        Ok(data)
    }

    pub fn build_model(&self, n_features: usize) -> Result<ModelSpec, AdvError> {
        let mut blocks = Vec::new();
        let mut advs = Vec::new();
        let mut input_dim = n_features;
        for layer in &self.layers {
            blocks.push(BlockSpec {
                input_dim,
                d_task: layer.d_task,
                d_noise: layer.d_noise,
                hidden: layer.hidden.clone(),
                activation_slope: 0.01,
                beta_task: layer.beta_task.clone(),
                beta_noise: layer.beta_noise.clone(),
                detach_z_task: layer.detach_z_task,
            });
            let mut adv = AdvSpec::new(
                layer.d_task,
                layer.d_noise,
                &self.adv.critic_hidden,
                self.adv.lambda_adv,
                self.adv.n_critic,
            );
            adv.gp_coeff = self.adv.gp_coeff;
            adv.objective = self.adv.objective;
            advs.push(adv);
            input_dim = layer.d_noise;
        }
        let d_task_total: usize = blocks.iter().map(|b| b.d_task).sum();
        let model = ModelSpec {
            layers: blocks,
            adv: advs,
            final_predictor: MlpSpec::new(d_task_total, &self.final_hidden, 1),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn build_mlp(&self, n_features: usize) -> MlpSpec {
        MlpSpec::new(n_features, &self.mlp_hidden, 1)
    }

    pub fn build_vib(&self, n_features: usize) -> VibSpec {
        VibSpec {
            input_dim: n_features,
            d_z: self.vib_d_z,
            encoder_hidden: self.vib_encoder_hidden.clone(),
            predictor_hidden: self.vib_predictor_hidden.clone(),
            beta: self.vib_beta,
            activation_slope: 0.01,
        }
    }
}

/// One sweep axis: a (section, key) path and the values it takes.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub section: String,
    pub key: String,
    pub values: Vec<String>,
}

/// Reads the `[sweep]` section: each entry is `section.key = v1, v2, ...`.
pub fn sweep_axes(raw: &RawConfig) -> Result<Vec<SweepAxis>, AdvError> {
    let Some(entries) = raw.sections.get(SWEEP_SECTION) else {
        return Err(AdvError::Config("missing [sweep] section".into()));
    };
    let mut axes = Vec::new();
    for (path, value) in entries {
        let (section, key) = path.split_once('.').ok_or_else(|| {
            AdvError::Config(format!("sweep key {path:?} must be section.key"))
        })?;
        let values: Vec<String> =
            value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(AdvError::Config(format!("sweep axis {path:?} has no values")));
        }
        axes.push(SweepAxis { section: section.to_string(), key: key.to_string(), values });
    }
    if axes.is_empty() {
        return Err(AdvError::Config("sweep grid is empty".into()));
    }
    Ok(axes)
}

/// Cartesian product of the axes; each cell is the list of (section, key,
/// value) overrides to apply to the base config.
pub fn sweep_cells(axes: &[SweepAxis]) -> Vec<Vec<(String, String, String)>> {
    let mut cells: Vec<Vec<(String, String, String)>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::new();
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.push((axis.section.clone(), axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

/// Applies one sweep cell to a raw config and re-parses it.
pub fn apply_cell(
    base: &RawConfig,
    cell: &[(String, String, String)],
) -> Result<ExperimentConfig, AdvError> {
    let mut raw = base.clone();
    raw.remove_section(SWEEP_SECTION);
    for (section, key, value) in cell {
        raw.set(section, key, value);
    }
    parse_config_raw(&raw)
}
