//! Learning-rate sweeps and multiplier search.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{MultiplierKnobs, RunConfig, TuneGrid};
use crate::harness::run::{run_training_with, RunOptions};
use crate::model::{LayerMap, LayerRole};

/// One `(width, lr, seed)` training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub width: usize,
    pub width_multiplier: f64,
    pub lr: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub diverged: bool,
}

/// Best learning rate at one width. `lr` is `None` when every grid point diverged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthOptimum {
    pub width: usize,
    pub lr: Option<f64>,
    pub grid_index: Option<usize>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub cells: Vec<SweepCell>,
    pub optima: Vec<WidthOptimum>,
}

impl SweepResult {
    /// Spread of the per-width argmin in grid steps; `None` if some width has no stable lr.
    pub fn argmin_drift(&self) -> Option<usize> {
        let idx: Option<Vec<usize>> = self.optima.iter().map(|o| o.grid_index).collect();
        let idx = idx?;
        Some(idx.iter().max()? - idx.iter().min()?)
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Rejects grids that are empty, nonpositive or not geometric.
pub fn check_geometric(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Config("lr grid must be a nonempty list of positive numbers".into()));
    }
    if grid.len() > 2 {
        let r = grid[1] / grid[0];
        if grid.windows(2).any(|w| ((w[1] / w[0]) / r - 1.0).abs() > 1e-9) {
            return Err(Error::Config("lr grid must be geometric".into()));
        }
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("lr grid must be increasing".into()));
    }
    Ok(())
}

/// Full `(width, lr, seed)` factorial. An lr counts toward a width's argmin
/// only if none of its seeds diverged; its loss is the seed mean.
pub fn run_lr_sweep(config: &RunConfig, grid: &[f64], jobs: usize) -> Result<SweepResult> {
    config.validate()?;
    check_geometric(grid)?;
    let mut jobs_list = Vec::new();
    for &w in &config.width_multipliers {
        for &lr in grid {
            for &s in &config.seeds {
                jobs_list.push((w, lr, s));
            }
        }
    }
    let cells: Vec<SweepCell> = pool(jobs)?.install(|| {
        jobs_list
            .par_iter()
            .map(|&(w, lr, seed)| {
                let cfg = RunConfig { lr, ..config.clone() };
                let rec = run_training_with(&cfg, w, seed, RunOptions { probes: false })?;
                Ok(SweepCell {
                    width: rec.scale.n,
                    width_multiplier: w,
                    lr,
                    seed,
                    final_loss: rec.final_loss,
                    diverged: rec.diverged(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut widths: Vec<usize> = cells.iter().map(|c| c.width).collect();
    widths.dedup();
    let optima = widths
        .into_iter()
        .map(|width| {
            let mut best = WidthOptimum { width, lr: None, grid_index: None, mean_loss: f64::INFINITY };
            for (i, &lr) in grid.iter().enumerate() {
                let group: Vec<&SweepCell> = cells.iter().filter(|c| c.width == width && c.lr == lr).collect();
                if group.iter().any(|c| c.diverged) {
                    continue;
                }
                let mean = group.iter().map(|c| c.final_loss).sum::<f64>() / group.len() as f64;
                if mean < best.mean_loss {
                    best = WidthOptimum { width, lr: Some(lr), grid_index: Some(i), mean_loss: mean };
                }
            }
            best
        })
        .collect();
    Ok(SweepResult { grid: grid.to_vec(), cells, optima })
}

/// CSV with columns `width,lr,seed,final_loss,diverged`.
pub fn write_sweep_csv<W: Write>(out: W, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["width", "lr", "seed", "final_loss", "diverged"])?;
    for c in cells {
        w.write_record([c.width.to_string(), c.lr.to_string(), c.seed.to_string(), c.final_loss.to_string(), c.diverged.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub knobs: MultiplierKnobs,
    /// Seed-mean final loss; infinite if any seed diverged.
    pub final_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub width: usize,
    pub best: MultiplierKnobs,
    pub best_loss: f64,
    pub rows: Vec<TuneRow>,
}

/// Every point of the factorial grid, global knobs varying slowest.
pub fn grid_points(grid: &TuneGrid) -> Result<Vec<MultiplierKnobs>> {
    let dims: Vec<&Vec<f64>> = [&grid.global_init, &grid.global_lr]
        .into_iter()
        .chain(LayerRole::ALL.iter().map(|&r| match r {
            LayerRole::Embed => &grid.layer_lr.embed,
            LayerRole::Router => &grid.layer_lr.router,
            LayerRole::ExpertIn => &grid.layer_lr.expert_in,
            LayerRole::ExpertOut => &grid.layer_lr.expert_out,
            LayerRole::Readout => &grid.layer_lr.readout,
        }))
        .collect();
    if dims.iter().any(|d| d.is_empty()) {
        return Err(Error::Config("multiplier grid has an empty axis".into()));
    }
    let total: usize = dims.iter().map(|d| d.len()).product();
    let mut out = Vec::with_capacity(total);
    for mut k in 0..total {
        let mut pick = [0.0; 7];
        for (slot, d) in pick.iter_mut().zip(&dims).rev() {
            *slot = d[k % d.len()];
            k /= d.len();
        }
        let layer_lr = LayerMap::from_fn(|r| pick[2 + LayerRole::ALL.iter().position(|x| *x == r).unwrap_or(0)]);
        out.push(MultiplierKnobs { global_init: pick[0], global_lr: pick[1], layer_lr });
    }
    Ok(out)
}

/// Exhaustive multiplier search at the grid's width multiplier. Ties keep
/// the earlier grid point.
pub fn tune_multipliers(config: &RunConfig, grid: &TuneGrid, jobs: usize) -> Result<TuneResult> {
    config.validate()?;
    let points = grid_points(grid)?;
    let width = config.scale_at(grid.width)?.n;
    let rows: Vec<TuneRow> = pool(jobs)?.install(|| {
        points
            .par_iter()
            .map(|knobs| {
                let cfg = RunConfig { multipliers: *knobs, ..config.clone() };
                let mut total = 0.0;
                let mut diverged = false;
                for &seed in &config.seeds {
                    let rec = run_training_with(&cfg, grid.width, seed, RunOptions { probes: false })?;
                    diverged |= rec.diverged();
                    total += rec.final_loss;
                }
                let final_loss = if diverged { f64::INFINITY } else { total / config.seeds.len() as f64 };
                Ok(TuneRow { knobs: *knobs, final_loss, diverged })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.final_loss < rows[best].final_loss {
            best = i;
        }
    }
    Ok(TuneResult { width, best: rows[best].knobs, best_loss: rows[best].final_loss, rows })
}

/// CSV with one column per knob plus `final_loss,diverged`.
pub fn write_tune_csv<W: Write>(out: W, rows: &[TuneRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["global_init".to_string(), "global_lr".to_string()];
    header.extend(LayerRole::ALL.iter().map(|r| format!("lr_{}", r.name())));
    header.extend(["final_loss".to_string(), "diverged".to_string()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.knobs.global_init.to_string(), r.knobs.global_lr.to_string()];
        rec.extend(LayerRole::ALL.iter().map(|&role| r.knobs.layer_lr.get(role).to_string()));
        rec.extend([r.final_loss.to_string(), r.diverged.to_string()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::TaskSpec;
    use crate::model::ScaleVector;
    use crate::params::{Parameterization, Regime};

    fn small() -> RunConfig {
        let mut cfg = RunConfig::coord_check(Regime::II, Parameterization::Mup);
        cfg.task = TaskSpec { dataset_size: 64, ..TaskSpec::gaussian_teacher(4) };
        cfg.base_scale = Some(ScaleVector::new(8, 4, 4, 4, 4).unwrap());
        cfg.width_multipliers = vec![1.0];
        cfg.seeds = vec![0];
        cfg.steps = 4;
        cfg.batch = 4;
        cfg
    }

    #[test]
    fn divergent_lr_is_flagged_and_skipped() {
        let res = run_lr_sweep(&small(), &[0.01, 1e9], 1).unwrap();
        assert_eq!(res.cells.len(), 2);
        assert!(!res.cells[0].diverged && res.cells[1].diverged);
        assert_eq!(res.optima[0].lr, Some(0.01));
        assert_eq!(res.argmin_drift(), Some(0));
    }

    #[test]
    fn grid_shape_is_checked() {
        assert!(check_geometric(&[]).is_err());
        assert!(check_geometric(&[1.0, 2.0, 5.0]).is_err());
        assert!(check_geometric(&[4.0, 2.0]).is_err());
        assert!(check_geometric(&[0.1, 0.4, 1.6]).is_ok());
    }

    fn unit_layers() -> LayerMap<Vec<f64>> {
        let v = || vec![1.0];
        LayerMap { embed: v(), router: v(), expert_in: v(), expert_out: v(), readout: v() }
    }

    fn unit_grid() -> TuneGrid {
        TuneGrid { global_init: vec![1.0], global_lr: vec![1.0], layer_lr: unit_layers(), width: 1.0 }
    }

    #[test]
    fn factorial_enumerates_every_point_once() {
        let mut g = unit_grid();
        g.global_lr = vec![0.5, 1.0, 2.0];
        g.layer_lr.router = vec![0.0, 1.0];
        let pts = grid_points(&g).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].global_lr, 0.5);
        assert_eq!(pts[0].layer_lr.router, 0.0);
        assert_eq!(pts[1].layer_lr.router, 1.0);
        g.layer_lr.readout.clear();
        assert!(grid_points(&g).is_err());
    }

    #[test]
    fn singleton_grid_returns_its_point_and_tuning_never_loses_to_it() {
        let cfg = small();
        let one = tune_multipliers(&cfg, &unit_grid(), 1).unwrap();
        assert_eq!(one.best, MultiplierKnobs::default());
        let mut g = unit_grid();
        g.global_lr = vec![0.25, 1.0, 4.0];
        let tuned = tune_multipliers(&cfg, &g, 1).unwrap();
        assert!(tuned.best_loss <= one.best_loss);
        assert_eq!(tuned.rows.len(), 3);
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim(), "width,lr,seed,final_loss,diverged");
        let mut buf = Vec::new();
        write_tune_csv(&mut buf, &[]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("global_init,global_lr,lr_embed"));
    }
}
