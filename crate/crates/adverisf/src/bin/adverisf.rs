use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use adverisf::config::{
    apply_cell, load_config, parse_config_raw, parse_raw, sweep_axes, sweep_cells,
    ExperimentConfig, ModelKind, SweepAxis,
};
use adverisf::data::write_csv;
use adverisf::error::AdvError;
use adverisf::pipeline::{
    train_adverisf, train_baseline_mlp, train_baseline_vib, AblationVariant,
};
use adverisf::record::{aggregate, save_aggregate, save_record, Aggregate, RunRecord};
use adverisf::report::{build_report, collect_records, heatmap_csv};

const OUT_ENV: &str = "ADVERISF_OUT";

#[derive(Parser)]
#[command(name = "adverisf", version, about = "Adversarial information separation experiment runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Experiment config file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: config output_dir, then $ADVERISF_OUT, then ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list overriding the config
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads for independent runs
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one config across its seeds and write records plus an aggregate
    Run {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Ablation variant for adverisf models
        #[arg(long, default_value = "A0")]
        variant: String,
    },
    /// Expand the [sweep] grid and run every cell
    Sweep {
        #[command(flatten)]
        common: CommonRunArgs,
    },
    /// Run ablation variants A0-A3 under identical seeds
    Ablate {
        #[command(flatten)]
        common: CommonRunArgs,
        /// Restrict to one variant
        #[arg(long)]
        variant: Option<String>,
    },
    /// Build markdown and CSV tables from a directory of records
    Report {
        /// Directory containing record .json files
        records_dir: PathBuf,
        /// Where to write report.md and report.csv (default: records_dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the config's synthetic dataset as CSV
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &AdvError) -> u8 {
    match err {
        AdvError::Config(_) => 2,
        AdvError::Dataset(_) => 3,
        AdvError::Diverged(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), AdvError> {
    match cli.cmd {
        Cmd::Run { common, variant } => {
            let variant = AblationVariant::parse(&variant)?;
            let (cfg, out_dir, seeds, jobs) = prepare(&common)?;
            let agg = run_battery(&cfg, &seeds, &out_dir, variant, jobs, "")?;
            println!(
                "{}: test R2 {:.3} \u{b1} {:.3} over {} seeds -> {}",
                agg.model,
                agg.mean_test_r2,
                agg.std_test_r2,
                agg.n,
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Sweep { common } => sweep(&common),
        Cmd::Ablate { common, variant } => ablate(&common, variant.as_deref()),
        Cmd::Report { records_dir, out } => report(&records_dir, out.as_deref()),
        Cmd::GenData { config, out } => gen_data(&config, &out),
    }
}

fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn prepare(common: &CommonRunArgs) -> Result<(ExperimentConfig, PathBuf, Vec<u64>, usize), AdvError> {
    let cfg = load_config(&common.config)?;
    let out_dir = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(default_out_root);
    std::fs::create_dir_all(&out_dir)?;
    let seeds = match &common.seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| AdvError::Config(format!("invalid seed {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        None => cfg.seeds.clone(),
    };
    if seeds.is_empty() {
        return Err(AdvError::Config("empty seed list".into()));
    }
    Ok((cfg, out_dir, seeds, common.jobs.max(1)))
}

/// Runs all seeds for one config on a bounded worker pool; writes one record
/// per seed and one aggregate.
fn run_battery(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out_dir: &Path,
    variant: AblationVariant,
    jobs: usize,
    file_prefix: &str,
) -> Result<Aggregate, AdvError> {
    let data = cfg.load_dataset()?;
    let n_features = data.n_features();
    let results: Mutex<Vec<Result<RunRecord, AdvError>>> = Mutex::new(Vec::new());
    let next: Mutex<usize> = Mutex::new(0);

    std::thread::scope(|scope| {
        for _ in 0..jobs.min(seeds.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= seeds.len() {
                    break;
                }
                let seed = seeds[i];
                let result = (|| -> Result<RunRecord, AdvError> {
                    match cfg.model_kind {
                        ModelKind::Adverisf => {
                            let model = cfg.build_model(n_features)?;
                            let out = train_adverisf(&model, &data, &cfg.schedule, variant, seed, &cfg.hash)?;
                            Ok(out.record)
                        }
                        ModelKind::Mlp => {
                            let spec = cfg.build_mlp(n_features);
                            let (_, record) = train_baseline_mlp(&spec, &data, &cfg.schedule, seed, &cfg.hash)?;
                            Ok(record)
                        }
                        ModelKind::Vib => {
                            let spec = cfg.build_vib(n_features);
                            let (_, record) = train_baseline_vib(&spec, &data, &cfg.schedule, seed, &cfg.hash)?;
                            Ok(record)
                        }
                    }
                })();
                results.lock().unwrap().push(result);
            });
        }
    });

    let mut records = Vec::new();
    for r in results.into_inner().unwrap() {
        records.push(r?);
    }
    records.sort_by_key(|r| r.seed);
    for record in &records {
        let name = format!("{file_prefix}{}-seed{}.json", record.model, record.seed);
        save_record(&out_dir.join(name), record)?;
    }
    let agg = aggregate(&records)?;
    let name = format!("{file_prefix}aggregate-{}.json", agg.model);
    save_aggregate(&out_dir.join(name), &agg)?;
    Ok(agg)
}

fn sweep(common: &CommonRunArgs) -> Result<(), AdvError> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| AdvError::Config(format!("{}: {e}", common.config.display())))?;
    let raw = parse_raw(&text)?;
    let axes = sweep_axes(&raw)?;
    let cells = sweep_cells(&axes);
    let base_cfg = {
        let mut r = raw.clone();
        r.remove_section(adverisf::config::SWEEP_SECTION);
        parse_config_raw(&r)?
    };
    let out_dir = common
        .out
        .clone()
        .or_else(|| base_cfg.output_dir.clone())
        .unwrap_or_else(default_out_root);
    std::fs::create_dir_all(&out_dir)?;
    let seeds = match &common.seeds {
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| AdvError::Config(format!("invalid seed {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?,
        None => base_cfg.seeds.clone(),
    };

    let mut grid_csv = String::from("cell,mean_test_r2,std_test_r2,n\n");
    let mut cell_means: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (ci, cell) in cells.iter().enumerate() {
        let cfg = apply_cell(&raw, cell)?;
        let label: Vec<String> =
            cell.iter().map(|(s, k, v)| format!("{s}.{k}={v}")).collect();
        let label = label.join(";");
        let prefix = format!("cell{ci:03}-");
        let agg = run_battery(&cfg, &seeds, &out_dir, AblationVariant::A0, common.jobs.max(1), &prefix)?;
        println!("{label}: {:.3} \u{b1} {:.3}", agg.mean_test_r2, agg.std_test_r2);
        grid_csv.push_str(&format!(
            "\"{label}\",{:.6},{:.6},{}\n",
            agg.mean_test_r2, agg.std_test_r2, agg.n
        ));
        if axes.len() == 2 {
            cell_means.insert((cell[0].2.clone(), cell[1].2.clone()), agg.mean_test_r2);
        }
    }
    std::fs::write(out_dir.join("sweep-grid.csv"), grid_csv)?;
    if axes.len() == 2 {
        let name = |a: &SweepAxis| format!("{}.{}", a.section, a.key);
        let hm = heatmap_csv(&name(&axes[0]), &axes[0].values, &name(&axes[1]), &axes[1].values, &cell_means);
        std::fs::write(out_dir.join("sweep-heatmap.csv"), hm)?;
    }
    println!("{} cells -> {}", cells.len(), out_dir.display());
    Ok(())
}

fn ablate(common: &CommonRunArgs, only: Option<&str>) -> Result<(), AdvError> {
    let (cfg, out_dir, seeds, jobs) = prepare(common)?;
    if cfg.model_kind != ModelKind::Adverisf {
        return Err(AdvError::Config("ablate requires an adverisf model config".into()));
    }
    let variants = match only {
        Some(v) => vec![AblationVariant::parse(v)?],
        None => vec![
            AblationVariant::A0,
            AblationVariant::A1,
            AblationVariant::A2,
            AblationVariant::A3,
        ],
    };
    let mut lines = vec!["| variant | test R2 |".to_string(), "|---|---|".to_string()];
    for variant in variants {
        let prefix = format!("{}-", variant.tag());
        let agg = run_battery(&cfg, &seeds, &out_dir, variant, jobs, &prefix)?;
        println!(
            "{}: {:.3} \u{b1} {:.3} over {} seeds",
            variant.tag(),
            agg.mean_test_r2,
            agg.std_test_r2,
            agg.n
        );
        lines.push(format!(
            "| {} | {:.3} \u{b1} {:.3} |",
            variant.tag(),
            agg.mean_test_r2,
            agg.std_test_r2
        ));
    }
    std::fs::write(out_dir.join("ablation.md"), lines.join("\n") + "\n")?;
    Ok(())
}

fn report(records_dir: &Path, out: Option<&Path>) -> Result<(), AdvError> {
    let (records, skipped) = collect_records(records_dir)?;
    for name in &skipped {
        eprintln!("warning: skipping malformed record {name}");
    }
    let tables = build_report(&records)?;
    let out_dir = out.unwrap_or(records_dir);
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("report.md"), &tables.markdown)?;
    std::fs::write(out_dir.join("report.csv"), &tables.csv)?;
    print!("{}", tables.markdown);
    Ok(())
}

fn gen_data(config: &Path, out: &Path) -> Result<(), AdvError> {
    let cfg = load_config(config)?;
    // export the raw (unnormalized, unsplit) samples
    let data = match &cfg.source {
        adverisf::config::DataSource::Synthetic(spec) => {
            adverisf::data::generate_synthetic(spec, cfg.data_seed)
        }
        adverisf::config::DataSource::Csv { path, target_column, delimiter } => {
            adverisf::data::load_csv(path, target_column, *delimiter)?
        }
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    write_csv(&data, out)?;
    println!(
        "wrote {} rows x {} features -> {}",
        data.x.nrows(),
        data.n_features(),
        out.display()
    );
    Ok(())
}
