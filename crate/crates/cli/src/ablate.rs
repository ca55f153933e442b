//! Ablation grids: the cartesian product of dotted-key axes, trained once per
//! seed.
//!
//! ```toml
//! seeds = [0, 1, 2]
//!
//! [axes]
//! "negnce.gamma2" = [0.0, 0.5]
//! "train.tpmcl_on" = [true, false]
//! ```

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use hnf_core::corpus::Corpus;
use hnf_core::{trainer, Config};
use log::info;
use serde::Deserialize;

use crate::Common;

pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: toml::Table,
}

/// A cell: one value per axis, as `key=value` overrides.
fn cells(grid: &Grid) -> Result<Vec<Vec<(String, String)>>> {
    if grid.axes.is_empty() {
        bail!("grid has no axes");
    }
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for (key, values) in &grid.axes {
        let values = values
            .as_array()
            .with_context(|| format!("axis `{key}` must be an array"))?;
        if values.is_empty() {
            bail!("axis `{key}` has no values");
        }
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((key.clone(), v.to_string()));
                    next
                })
            })
            .collect();
    }
    Ok(cells)
}

fn configure(base: &Config, cell: &[(String, String)], seed: u64) -> Result<Config> {
    let mut cfg = base.clone();
    for (k, v) in cell {
        cfg.apply_override(&format!("{k}={v}"))?;
    }
    cfg.train.seed = seed;
    Ok(cfg)
}

pub fn run(c: &Common, corpus: &Path, grid_path: &Path) -> Result<()> {
    let base = c.config()?;
    let out = c.out()?;
    let text = fs::read_to_string(grid_path).with_context(|| format!("reading {}", grid_path.display()))?;
    let grid: Grid = toml::from_str(&text).with_context(|| format!("parsing {}", grid_path.display()))?;
    let cells = cells(&grid)?;
    let seeds = if grid.seeds.is_empty() { vec![base.train.seed] } else { grid.seeds.clone() };

    // every cell must resolve before anything trains
    let mut configs = Vec::with_capacity(cells.len() * seeds.len());
    for (i, cell) in cells.iter().enumerate() {
        for &seed in &seeds {
            configs.push((i, seed, configure(&base, cell, seed).with_context(|| format!("cell {i}"))?));
        }
    }
    let corpus = Corpus::load(corpus).with_context(|| format!("loading corpus {}", corpus.display()))?;

    fs::create_dir_all(out)?;
    let path = out.join(ABLATION_FILE);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let keys: Vec<&String> = grid.axes.keys().collect();
    let mut header = vec!["cell".to_string(), "seed".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["t2v_r1", "v2t_r1", "t2v_rsum", "v2t_rsum", "rsum"].map(String::from));
    w.write_record(&header)?;
    for (i, seed, cfg) in configs {
        let outcome = trainer::fit(&corpus, &cfg, None)?;
        let e = outcome.final_eval().context("the grid needs train.total_steps >= 1")?;
        info!("cell {i} seed {seed}: rsum {:.2}", e.rsum());
        let mut row = vec![i.to_string(), seed.to_string()];
        row.extend(cells[i].iter().map(|(_, v)| v.clone()));
        row.extend([e.t2v.r1, e.v2t.r1, e.t2v.rsum, e.v2t.rsum, e.rsum()].map(|x| x.to_string()));
        w.write_record(&row)?;
        w.flush()?;
    }
    Ok(())
}
