//! One function per command. Each returns `Ok(pass)` once its artifacts are
//! written; `pass` drives the exit code.

use std::fs;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Serialize;

use moe_scaling::harness::{
    cross_layer_sum_check, gram_concentration_check, router_collapse_check, run_coord_check, run_lr_sweep, run_selftest,
    tune_multipliers, write_step_fits_csv, write_sweep_csv, write_tune_csv, write_verdicts_csv, PredictionCatalog, RunConfig,
};
use moe_scaling::params::emit_mixtral_config;
use moe_scaling::probes::write_series_csv;

use crate::configs::{CrossLayerConfig, EmitConfig, GramConfig};
use crate::output::{num, opt, OutDir};
use crate::Failure;

pub struct Context {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub jobs: usize,
    pub seed_offset: u64,
}

/// Grid steps the per-width argmin lr may drift before the transfer property fails.
pub const MAX_ARGMIN_DRIFT: usize = 1;

fn setup(e: moe_scaling::Error) -> Failure {
    Failure::Setup(e.to_string())
}

fn load<T: DeserializeOwned>(ctx: &Context) -> Result<T, Failure> {
    let path = ctx.config.as_ref().ok_or_else(|| Failure::Setup("--config is required for this command".into()))?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Setup(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Setup(format!("invalid config {}: {e}", path.display())))
}

fn shift(seeds: &mut [u64], by: u64) {
    for s in seeds {
        *s = s.wrapping_add(by);
    }
}

fn run_config(ctx: &Context) -> Result<RunConfig, Failure> {
    let mut cfg: RunConfig = load(ctx)?;
    shift(&mut cfg.seeds, ctx.seed_offset);
    cfg.validate().map_err(setup)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Echo<'a, C, R> {
    config: &'a C,
    #[serde(flatten)]
    report: &'a R,
}

pub fn coord_check(ctx: &Context) -> Result<bool, Failure> {
    let cfg = run_config(ctx)?;
    cfg.validate_for_fit().map_err(setup)?;
    let out = OutDir::create(&ctx.out)?;
    let report = run_coord_check(&cfg, &PredictionCatalog::standard(), ctx.jobs).map_err(setup)?;
    out.with("verdicts.csv", |f| write_verdicts_csv(f, &report.verdicts))?;
    out.with("step_fits.csv", |f| write_step_fits_csv(f, &report.step_fits))?;
    out.with("series.csv", |f| write_series_csv(f, &report.series))?;
    out.csv(
        "cells.csv",
        &["width", "width_multiplier", "seed", "final_loss", "diverged_at"],
        report.cells.iter().map(|c| {
            vec![
                c.width.to_string(),
                num(c.width_multiplier),
                c.seed.to_string(),
                num(c.final_loss),
                c.diverged_at.map(|s| s.to_string()).unwrap_or_default(),
            ]
        }),
    )?;
    out.json("summary.json", "moe-scaling/coord-check/v1", "coord-check", &Echo { config: &cfg, report: &report })?;
    let failures: Vec<_> = report.failures().collect();
    println!(
        "coord-check {} {}: {} verdicts, {} pass, {} fail",
        cfg.regime,
        cfg.parameterization,
        report.verdicts.len(),
        report.verdicts.len() - failures.len(),
        failures.len()
    );
    for v in failures.iter().take(20) {
        println!("  FAIL {:<18} {:<3} predicted {:<11} slope {:<10} {}", v.term, v.class, v.predicted.label(), opt(v.slope), v.note);
    }
    if failures.len() > 20 {
        println!("  ... {} more in verdicts.csv", failures.len() - 20);
    }
    Ok(failures.is_empty())
}

pub fn lr_sweep(ctx: &Context) -> Result<bool, Failure> {
    let cfg = run_config(ctx)?;
    let grid = cfg.lr_grid.ok_or_else(|| Failure::Setup("lr-sweep needs an lr_grid in the config".into()))?.values().map_err(setup)?;
    let out = OutDir::create(&ctx.out)?;
    let result = run_lr_sweep(&cfg, &grid, ctx.jobs).map_err(setup)?;
    out.with("sweep.csv", |f| write_sweep_csv(f, &result.cells))?;
    out.csv(
        "optima.csv",
        &["width", "lr", "grid_index", "mean_loss"],
        result.optima.iter().map(|o| vec![o.width.to_string(), opt(o.lr), o.grid_index.map(|i| i.to_string()).unwrap_or_default(), num(o.mean_loss)]),
    )?;
    let drift = result.argmin_drift();
    let pass = drift.is_some_and(|d| d <= MAX_ARGMIN_DRIFT);
    let note = match drift {
        None => "some width has no stable learning rate".to_string(),
        Some(d) => format!("argmin spans {d} grid steps"),
    };
    out.csv(
        "verdicts.csv",
        &["property", "value", "threshold", "pass", "note"],
        [vec!["argmin_lr_drift".into(), drift.map(|d| d.to_string()).unwrap_or_default(), MAX_ARGMIN_DRIFT.to_string(), pass.to_string(), note.clone()]],
    )?;
    out.json("summary.json", "moe-scaling/lr-sweep/v1", "lr-sweep", &Echo { config: &cfg, report: &result })?;
    println!("lr-sweep {} {}: {} cells, {note}, transfer {}", cfg.regime, cfg.parameterization, result.cells.len(), if pass { "PASS" } else { "FAIL" });
    for o in &result.optima {
        println!("  width {:>5}  best lr {:<12} mean loss {}", o.width, opt(o.lr), num(o.mean_loss));
    }
    Ok(true)
}

pub fn tune(ctx: &Context) -> Result<bool, Failure> {
    let cfg = run_config(ctx)?;
    let grid = cfg.tune_grid.clone().ok_or_else(|| Failure::Setup("tune needs a tune_grid in the config".into()))?;
    let out = OutDir::create(&ctx.out)?;
    let result = tune_multipliers(&cfg, &grid, ctx.jobs).map_err(setup)?;
    out.with("tune.csv", |f| write_tune_csv(f, &result.rows))?;
    out.json("summary.json", "moe-scaling/tune/v1", "tune", &Echo { config: &cfg, report: &result })?;
    println!("tune at width {}: {} grid points, best loss {}", result.width, result.rows.len(), num(result.best_loss));
    println!("  best knobs {}", serde_json::to_string(&result.best).unwrap_or_default());
    Ok(true)
}

pub fn gram_check(ctx: &Context) -> Result<bool, Failure> {
    let mut cfg: GramConfig = load(ctx)?;
    shift(&mut cfg.seeds, ctx.seed_offset);
    let sigma = cfg.sigma.unwrap_or((cfg.n as f64).powf(-0.5));
    let out = OutDir::create(&ctx.out)?;
    let r = gram_concentration_check(cfg.m, cfg.n, sigma, &cfg.seeds).map_err(setup)?;
    out.csv(
        "gram.csv",
        &["form", "mean_diag", "predicted_diag", "diag_ratio", "offdiag_std", "predicted_offdiag", "offdiag_ratio"],
        [("inner", &r.inner), ("outer", &r.outer)].into_iter().map(|(name, s)| {
            vec![
                name.into(),
                num(s.mean_diag),
                num(s.predicted_diag),
                num(s.diag_ratio()),
                num(s.offdiag_std),
                num(s.predicted_offdiag),
                num(s.offdiag_ratio()),
            ]
        }),
    )?;
    out.json("summary.json", "moe-scaling/gram-check/v1", "gram-check", &Echo { config: &cfg, report: &r })?;
    println!(
        "gram-check {}x{} sigma {} over {} seeds: inner diag {:.4} offdiag {:.4}, outer diag {:.4} offdiag {:.4} -> {}",
        r.m,
        r.n,
        num(sigma),
        r.seeds,
        r.inner.diag_ratio(),
        r.inner.offdiag_ratio(),
        r.outer.diag_ratio(),
        r.outer.offdiag_ratio(),
        if r.pass { "PASS" } else { "FAIL" }
    );
    Ok(true)
}

pub fn cross_layer_check(ctx: &Context) -> Result<bool, Failure> {
    let mut cfg: CrossLayerConfig = load(ctx)?;
    shift(&mut cfg.seeds, ctx.seed_offset);
    let out = OutDir::create(&ctx.out)?;
    let r = cross_layer_sum_check(&cfg.scales, &cfg.seeds).map_err(setup)?;
    out.csv(
        "cross_layer.csv",
        &["n", "n_e", "m", "entry_rms", "predicted_entry_var", "var_ratio", "gain"],
        r.points.iter().map(|p| {
            vec![p.n.to_string(), p.n_e.to_string(), p.m.to_string(), num(p.entry_rms), num(p.predicted_entry_var), num(p.var_ratio()), num(p.gain())]
        }),
    )?;
    out.json("summary.json", "moe-scaling/cross-layer-check/v1", "cross-layer-check", &Echo { config: &cfg, report: &r })?;
    println!(
        "cross-layer-check: {} scales, max variance error {:.4}, gain exponent {}",
        r.points.len(),
        r.max_var_error(),
        r.gain_fit.map(|f| format!("{:.4}", f.slope)).unwrap_or_else(|| "n/a (needs 3 widths)".into())
    );
    Ok(true)
}

pub fn router_collapse(ctx: &Context) -> Result<bool, Failure> {
    let cfg = run_config(ctx)?;
    let out = OutDir::create(&ctx.out)?;
    let r = router_collapse_check(&cfg, ctx.jobs).map_err(setup)?;
    out.csv("psi.csv", &["width", "step", "mean_rms_psi"], r.psi.iter().map(|(n, s, v)| vec![n.to_string(), s.to_string(), num(*v)]))?;
    out.csv(
        "psi_fits.csv",
        &["step", "slope", "r2"],
        r.fits.iter().map(|f| vec![f.step.to_string(), opt(f.slope), opt(f.r_squared)]),
    )?;
    out.json("summary.json", "moe-scaling/router-collapse/v1", "router-collapse", &Echo { config: &cfg, report: &r })?;
    let last = r.last_fit();
    println!(
        "router-collapse {}: initial psi zero {}, last step {} slope {} -> decaying {}",
        cfg.parameterization,
        r.initial_psi_zero,
        last.map(|f| f.step.to_string()).unwrap_or_default(),
        last.map(|f| opt(f.slope)).unwrap_or_default(),
        r.decaying
    );
    Ok(true)
}

pub fn emit_config(ctx: &Context) -> Result<bool, Failure> {
    let cfg: EmitConfig = load(ctx)?;
    if cfg.scales.is_empty() {
        return Err(Failure::Setup("emit-config needs at least one scale".into()));
    }
    let out = OutDir::create(&ctx.out)?;
    let emitted = cfg
        .scales
        .iter()
        .map(|s| emit_mixtral_config(cfg.regime, s, cfg.depth, cfg.base_lr, cfg.base_eps))
        .collect::<moe_scaling::Result<Vec<_>>>()
        .map_err(setup)?;
    out.csv(
        "prescription.csv",
        &["n", "n_e", "m", "k", "layer", "init_std", "adam_lr", "adam_eps", "multiplier", "notes"],
        emitted.iter().flat_map(|p| {
            p.rows.iter().map(move |r| {
                vec![
                    p.scale.n.to_string(),
                    p.scale.n_e.to_string(),
                    p.scale.m.to_string(),
                    p.scale.k.to_string(),
                    r.layer.clone(),
                    opt(r.init_std),
                    opt(r.adam_lr),
                    opt(r.adam_eps),
                    opt(r.multiplier),
                    r.notes.clone(),
                ]
            })
        }),
    )?;
    out.json("summary.json", "moe-scaling/emit-config/v1", "emit-config", &emitted)?;
    println!("emit-config Regime {}: {} scales, {} rows each", cfg.regime, emitted.len(), emitted[0].rows.len());
    Ok(true)
}

pub fn selftest(ctx: &Context) -> Result<bool, Failure> {
    let out = OutDir::create(&ctx.out)?;
    let r = run_selftest().map_err(setup)?;
    out.csv(
        "selftest.csv",
        &["check", "metric", "tolerance", "pass"],
        r.checks.iter().map(|c| vec![c.name.clone(), num(c.metric), num(c.tolerance), c.pass.to_string()]),
    )?;
    out.json("summary.json", "moe-scaling/selftest/v1", "selftest", &r)?;
    let failed: Vec<_> = r.checks.iter().filter(|c| !c.pass).collect();
    println!("selftest: {} checks, {} fail", r.checks.len(), failed.len());
    for c in failed {
        println!("  FAIL {}: {} > {}", c.name, num(c.metric), num(c.tolerance));
    }
    Ok(r.all_pass())
}
