//! Table emission over run records: per (model, config) cells of
//! "mean ± std" test R-squared, as markdown (column maxima bolded) and CSV.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::AdvError;
use crate::record::{load_record, mean_std, RunRecord};

pub struct ReportTables {
    pub markdown: String,
    pub csv: String,
}

/// Loads every `.json` record under `dir`, skipping malformed files.
/// Returns the valid records and the skipped file names.
pub fn collect_records(dir: &Path) -> Result<(Vec<RunRecord>, Vec<String>), AdvError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    for path in entries {
        match load_record(&path) {
            Ok(r) => records.push(r),
            Err(_) => skipped.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned()),
        }
    }
    Ok((records, skipped))
}

fn cell_label(mean: f64, std: f64) -> String {
    format!("{mean:.3} \u{b1} {std:.3}")
}

/// Rows = model, columns = regime (config hash); cell = mean ± std of test
/// R-squared across seeds. The best mean per column is bolded in markdown.
pub fn build_report(records: &[RunRecord]) -> Result<ReportTables, AdvError> {
    if records.is_empty() {
        return Err(AdvError::Dataset("no valid run records".into()));
    }
    let mut regimes: Vec<String> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        if !regimes.contains(&r.config_hash) {
            regimes.push(r.config_hash.clone());
        }
        if !models.contains(&r.model) {
            models.push(r.model.clone());
        }
        cells.entry((r.model.clone(), r.config_hash.clone())).or_default().push(r.test_r2);
    }

    let stats: BTreeMap<(String, String), (f64, f64, usize)> = cells
        .iter()
        .map(|((m, g), xs)| {
            let (mean, std) = mean_std(xs);
            ((m.clone(), g.clone()), (mean, std, xs.len()))
        })
        .collect();
    let col_max: BTreeMap<&String, f64> = regimes
        .iter()
        .map(|g| {
            let best = models
                .iter()
                .filter_map(|m| stats.get(&(m.clone(), g.clone())))
                .map(|&(mean, _, _)| mean)
                .fold(f64::NEG_INFINITY, f64::max);
            (g, best)
        })
        .collect();

    let mut md = String::new();
    md.push_str("| model |");
    for g in &regimes {
        md.push_str(&format!(" {g} |"));
    }
    md.push('\n');
    md.push_str("|---|");
    for _ in &regimes {
        md.push_str("---|");
    }
    md.push('\n');
    for m in &models {
        md.push_str(&format!("| {m} |"));
        for g in &regimes {
            match stats.get(&(m.clone(), g.clone())) {
                Some(&(mean, std, _)) => {
                    let label = cell_label(mean, std);
                    if (mean - col_max[g]).abs() < 5e-4 {
                        md.push_str(&format!(" **{label}** |"));
                    } else {
                        md.push_str(&format!(" {label} |"));
                    }
                }
                None => md.push_str(" - |"),
            }
        }
        md.push('\n');
    }

    let mut csv = String::from("model,regime,mean_test_r2,std_test_r2,n\n");
    for ((m, g), (mean, std, n)) in &stats {
        csv.push_str(&format!("{m},{g},{mean:.6},{std:.6},{n}\n"));
    }
    Ok(ReportTables { markdown: md, csv })
}

/// Heatmap-ready CSV: rows = first axis values, columns = second axis values.
pub fn heatmap_csv(
    axis1_name: &str,
    axis1: &[String],
    axis2_name: &str,
    axis2: &[String],
    means: &BTreeMap<(String, String), f64>,
) -> String {
    let mut out = String::new();
    out.push_str(&format!("{axis1_name}\\{axis2_name}"));
    for c in axis2 {
        out.push_str(&format!(",{c}"));
    }
    out.push('\n');
    for r in axis1 {
        out.push_str(r);
        for c in axis2 {
            match means.get(&(r.clone(), c.clone())) {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push_str(","),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{save_record, EpochTrace, RECORD_VERSION};

    fn rec(model: &str, hash: &str, seed: u64, test_r2: f64) -> RunRecord {
        RunRecord {
            version: RECORD_VERSION.to_string(),
            config_hash: hash.to_string(),
            model: model.to_string(),
            seed,
            train_r2: 0.9,
            valid_r2: 0.8,
            test_r2,
            diverged: false,
            epochs_run: 1,
            critic_graph_builds: 0,
            wall_clock_secs: 0.1,
            trace: EpochTrace::default(),
        }
    }

    #[test]
    fn constant_records_format() {
        let records: Vec<_> = (0..10).map(|s| rec("mlp", "g1", s, 0.5)).collect();
        let tables = build_report(&records).unwrap();
        assert!(tables.markdown.contains("0.500 \u{b1} 0.000"), "{}", tables.markdown);
        assert!(tables.csv.contains("mlp,g1,0.500000,0.000000,10"));
    }

    #[test]
    fn column_maximum_is_bolded() {
        let mut records = vec![rec("mlp", "g1", 0, 0.3), rec("mlp", "g1", 1, 0.3)];
        records.push(rec("adverisf-A0", "g1", 0, 0.6));
        records.push(rec("adverisf-A0", "g1", 1, 0.6));
        let tables = build_report(&records).unwrap();
        assert!(tables.markdown.contains("**0.600 \u{b1} 0.000**"), "{}", tables.markdown);
        assert!(!tables.markdown.contains("**0.300"), "{}", tables.markdown);
    }

    #[test]
    fn mixed_models_one_row_each() {
        let records = vec![
            rec("mlp", "g1", 0, 0.2),
            rec("vib", "g1", 0, 0.3),
            rec("vib", "g2", 0, 0.4),
        ];
        let tables = build_report(&records).unwrap();
        let rows: Vec<&str> = tables.markdown.lines().collect();
        assert_eq!(rows.len(), 2 + 2); // header + separator + 2 model rows
        assert!(rows[2].starts_with("| mlp |"));
        assert!(rows[3].starts_with("| vib |"));
        assert!(rows[2].contains(" - |")); // mlp has no g2 cell
    }

    #[test]
    fn malformed_record_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        save_record(&dir.path().join("good.json"), &rec("mlp", "g", 0, 0.5)).unwrap();
        std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let (records, skipped) = collect_records(dir.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(skipped, vec!["bad.json".to_string()]);
    }

    #[test]
    fn empty_dir_yields_error_from_build() {
        let dir = tempfile::tempdir().unwrap();
        let (records, _) = collect_records(dir.path()).unwrap();
        assert!(build_report(&records).is_err());
    }

    #[test]
    fn heatmap_layout() {
        let mut means = BTreeMap::new();
        means.insert(("0.01".to_string(), "1".to_string()), 0.5);
        means.insert(("0.1".to_string(), "1".to_string()), 0.4);
        let csv = heatmap_csv(
            "lambda_adv",
            &["0.01".into(), "0.1".into()],
            "d_task",
            &["1".into(), "4".into()],
            &means,
        );
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "lambda_adv\\d_task,1,4");
        assert_eq!(lines[1], "0.01,0.500000,");
        assert_eq!(lines[2], "0.1,0.400000,");
    }
}
