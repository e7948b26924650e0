//! `ablate`: a cartesian grid of variants and seeds, one training run per
//! cell, resumable by a hash of each cell's resolved configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swipe_core::data::Split;
use swipe_core::geometry::Connectivity;

use crate::commands::{load_corpus, resolve, run_training, split_dice};
use crate::config::RunConfig;
use crate::{AblateArgs, CliError, CliResult};

pub const CELLS_DIR: &str = "cells";
pub const RESULT_FILE: &str = "result.json";
pub const CELLS_CSV: &str = "cells.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// One grid axis: a key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl Axis {
    /// Parses `key=v1,v2,...`.
    pub fn parse(s: &str) -> CliResult<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| CliError::user(format!("grid axis {s:?} is not key=v1,v2")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::user(format!("grid axis {s:?} has no values")));
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Sets one grid key on a configuration.
pub fn apply_assignment(cfg: &mut RunConfig, key: &str, value: &str) -> CliResult<()> {
    match key {
        "occurrence" => {
            cfg.train.spo.occurrence = value
                .parse()
                .map_err(|e| CliError::user(format!("occurrence {value:?}: {e}")))?
        }
        "connectivity" => {
            cfg.train.spo.connectivity = match value {
                "4" => Connectivity::Four,
                "8" => Connectivity::Eight,
                _ => return Err(CliError::user(format!("connectivity: expected 4 or 8, got {value:?}"))),
            }
        }
        "annotation_fraction" => {
            cfg.train.annotation_fraction = value
                .parse()
                .map_err(|e| CliError::user(format!("annotation_fraction {value:?}: {e}")))?
        }
        _ => cfg.train.ablation.set(&format!("{key}={value}"))?,
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Comma-joined `key=value` assignments; `full` for the empty grid.
    pub variant: String,
    pub seed: u64,
    pub config: RunConfig,
    pub hash: String,
}

/// Hex SHA-256 prefix of the configuration, ignoring the output directory.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut keyed = cfg.clone();
    keyed.out_dir = Default::default();
    let json = serde_json::to_string(&keyed).expect("run config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Cells in row-major grid order with seeds innermost.
pub fn plan(base: &RunConfig, axes: &[Axis], seeds: &[u64]) -> CliResult<Vec<Cell>> {
    if seeds.is_empty() {
        return Err(CliError::user("no seeds given"));
    }
    let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    let mut cells = Vec::with_capacity(combos.len() * seeds.len());
    for combo in combos {
        let mut cfg = base.clone();
        for (k, v) in &combo {
            apply_assignment(&mut cfg, k, v)?;
        }
        let variant = if combo.is_empty() {
            "full".to_string()
        } else {
            combo.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(",")
        };
        for &seed in seeds {
            let mut config = cfg.clone();
            config.train.seed = seed;
            config.validate()?;
            cells.push(Cell {
                variant: variant.clone(),
                seed,
                hash: config_hash(&config),
                config,
            });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub hash: String,
    pub variant: String,
    pub seed: u64,
    pub steps: usize,
    pub best_step: usize,
    pub val_dice: Option<f64>,
    pub test_dice: f64,
}

/// A cell's stored result when it matches the cell's hash.
pub fn completed(dir: &Path, cell: &Cell) -> Option<CellResult> {
    let text = fs::read_to_string(dir.join(CELLS_DIR).join(&cell.hash).join(RESULT_FILE)).ok()?;
    serde_json::from_str::<CellResult>(&text).ok().filter(|r| r.hash == cell.hash)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    /// Space-separated seeds.
    pub seeds: String,
    pub mean_test_dice: f64,
    pub std_test_dice: f64,
    pub mean_val_dice: Option<f64>,
}

/// Mean and population standard deviation of test Dice per variant, in plan order.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut variants: Vec<&str> = Vec::new();
    for r in results {
        if !variants.contains(&r.variant.as_str()) {
            variants.push(&r.variant);
        }
    }
    variants
        .into_iter()
        .map(|v| {
            let rows: Vec<&CellResult> = results.iter().filter(|r| r.variant == v).collect();
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.test_dice).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.test_dice - mean).powi(2)).sum::<f64>() / n;
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.val_dice).collect();
            SummaryRow {
                variant: v.to_string(),
                runs: rows.len(),
                seeds: rows.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(" "),
                mean_test_dice: mean,
                std_test_dice: var.sqrt(),
                mean_val_dice: (vals.len() == rows.len()).then(|| vals.iter().sum::<f64>() / n),
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let err = |e: &dyn std::fmt::Display| CliError::user(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let mut base = resolve(&a.cfg)?;
    if let Some(c) = &a.corpus {
        base.corpus_dir = c.clone();
    }
    if let Some(o) = &a.out {
        base.out_dir = o.clone();
    }
    if let Some(n) = a.iterations {
        base.train.iterations = n;
    }
    let axes = a.grid.iter().map(|s| Axis::parse(s)).collect::<CliResult<Vec<_>>>()?;
    let cells = plan(&base, &axes, &a.seeds)?;
    if a.plan {
        for c in &cells {
            println!("{} seed={} {}", c.hash, c.seed, c.variant);
        }
        return Ok(());
    }
    let dir = base.out_dir.clone();
    crate::commands::echo(&base, &dir.join(crate::config::RESOLVED_FILE))?;
    let corpus = load_corpus(&base.corpus_dir)?;
    let test = corpus.split(Split::Test);
    let mut results = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        if let Some(done) = completed(&dir, cell) {
            log::info!("cell {}/{} {} seed {} already complete", i + 1, cells.len(), cell.variant, cell.seed);
            results.push(done);
            continue;
        }
        log::info!("cell {}/{} {} seed {}", i + 1, cells.len(), cell.variant, cell.seed);
        let cell_dir = dir.join(CELLS_DIR).join(&cell.hash);
        let (summary, outcome, model) = run_training(&cell.config, &corpus, &cell_dir)?;
        let test_dice = split_dice(&model, &outcome.best_params, &test, Split::Test, &cell.config.reconstruction)?;
        let result = CellResult {
            hash: cell.hash.clone(),
            variant: cell.variant.clone(),
            seed: cell.seed,
            steps: summary.steps,
            best_step: summary.best_step,
            val_dice: summary.best_val_dice,
            test_dice,
        };
        let path = cell_dir.join(RESULT_FILE);
        let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::internal(e.to_string()))?;
        fs::write(&path, json).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        results.push(result);
    }
    write_csv(&dir.join(CELLS_CSV), &results)?;
    let summary = summarize(&results);
    write_csv(&dir.join(SUMMARY_CSV), &summary)?;
    for row in &summary {
        println!(
            "{:<40} n={} test Dice {:.4} ± {:.4}",
            row.variant, row.runs, row.mean_test_dice, row.std_test_dice
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn axes(specs: &[&str]) -> Vec<Axis> {
        specs.iter().map(|s| Axis::parse(s).unwrap()).collect()
    }

    #[test]
    fn spo_by_three_seeds_is_six_cells() {
        let cells = plan(&RunConfig::defaults(Preset::Desk), &axes(&["spo=on,off"]), &[0, 1, 2]).unwrap();
        assert_eq!(cells.len(), 6);
        let off: Vec<_> = cells.iter().filter(|c| !c.config.train.ablation.spo).collect();
        assert_eq!(off.len(), 3);
        let mut hashes: Vec<_> = cells.iter().map(|c| c.hash.clone()).collect();
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 6);
    }

    #[test]
    fn spo_variant_grid_contains_reference_rows() {
        let cells = plan(
            &RunConfig::defaults(Preset::Desk),
            &axes(&["occurrence=4,8", "connectivity=4,8"]),
            &[0],
        )
        .unwrap();
        let has = |n: usize, c: Connectivity| {
            cells
                .iter()
                .any(|x| x.config.train.spo.occurrence == n && x.config.train.spo.connectivity == c)
        };
        assert!(has(4, Connectivity::Four));
        assert!(has(4, Connectivity::Eight));
        assert!(has(8, Connectivity::Four));
    }

    #[test]
    fn hash_ignores_output_directory_only() {
        let a = RunConfig::defaults(Preset::Desk);
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.train.seed = 9;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn bad_axes_are_user_errors() {
        assert_eq!(Axis::parse("spo").unwrap_err().code, crate::EXIT_USER);
        assert_eq!(Axis::parse("spo=").unwrap_err().code, crate::EXIT_USER);
        let err = plan(&RunConfig::defaults(Preset::Desk), &axes(&["bogus=1"]), &[0]).unwrap_err();
        assert_eq!(err.code, crate::EXIT_USER);
    }

    #[test]
    fn summary_groups_by_variant() {
        let r = |v: &str, seed, d| CellResult {
            hash: format!("{v}{seed}"),
            variant: v.into(),
            seed,
            steps: 1,
            best_step: 1,
            val_dice: Some(d),
            test_dice: d,
        };
        let rows = summarize(&[r("a", 0, 0.5), r("a", 1, 0.7), r("b", 0, 0.9)]);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean_test_dice - 0.6).abs() < 1e-12);
        assert!((rows[0].std_test_dice - 0.1).abs() < 1e-12);
        assert_eq!(rows[0].seeds, "0 1");
        assert_eq!(rows[1].runs, 1);
    }
}
