//! Coordinate check: train a width ladder, fit the width exponent of every
//! probed term per time class, and compare against the catalog.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::catalog::{Prediction, PredictionCatalog};
use crate::harness::config::RunConfig;
use crate::harness::run::{run_training, RunRecord, TimeClass};
use crate::linalg::{ols_loglog_fit_dropping_zeros, ExponentFit};
use crate::probes::{TermId, TermSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub term: TermId,
    pub class: TimeClass,
    pub predicted: Prediction,
    /// `None` when every value was an exact zero or the fit was undefined.
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub n_widths: usize,
    pub all_zero: bool,
    pub pass: bool,
    pub note: String,
}

/// Fit of one term at one probe step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    pub term: TermId,
    pub step: usize,
    pub class: TimeClass,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub width: usize,
    pub width_multiplier: f64,
    pub seed: u64,
    pub final_loss: f64,
    pub diverged_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordReport {
    pub verdicts: Vec<Verdict>,
    pub step_fits: Vec<StepFit>,
    pub cells: Vec<CellSummary>,
    #[serde(skip)]
    pub series: Vec<TermSeries>,
}

impl CoordReport {
    pub fn failures(&self) -> impl Iterator<Item = &Verdict> {
        self.verdicts.iter().filter(|v| !v.pass)
    }

    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn verdict(&self, term: TermId, class: TimeClass) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.term == term && v.class == class)
    }
}

/// Runs every `(width, seed)` cell on a pool of `jobs` threads.
pub fn run_cells(config: &RunConfig, jobs: usize) -> Result<Vec<RunRecord>> {
    let cells: Vec<(f64, u64)> =
        config.width_multipliers.iter().flat_map(|&w| config.seeds.iter().map(move |&s| (w, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| cells.par_iter().map(|&(w, s)| run_training(config, w, s)).collect())
}

/// Seed-mean RMS per `(term, width, step)` over runs that reached the step.
type Means = BTreeMap<TermId, BTreeMap<usize, BTreeMap<usize, f64>>>;

fn seed_means(runs: &[RunRecord]) -> (Means, BTreeMap<usize, TimeClass>) {
    let mut acc: BTreeMap<TermId, BTreeMap<usize, BTreeMap<usize, (f64, usize)>>> = BTreeMap::new();
    let mut classes = BTreeMap::new();
    for r in runs {
        for p in &r.probes {
            classes.entry(p.step).or_insert(p.class);
            for (&term, &v) in &p.terms {
                let e = acc.entry(term).or_default().entry(r.scale.n).or_default().entry(p.step).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
    }
    let means = acc
        .into_iter()
        .map(|(t, by_w)| {
            let by_w = by_w
                .into_iter()
                .map(|(n, by_s)| (n, by_s.into_iter().map(|(s, (sum, c))| (s, sum / c as f64)).collect()))
                .collect();
            (t, by_w)
        })
        .collect();
    (means, classes)
}

/// Geometric mean, or zero if any value is zero.
fn geo_mean(vals: &[f64]) -> f64 {
    if vals.iter().any(|v| *v == 0.0) {
        return 0.0;
    }
    (vals.iter().map(|v| v.ln()).sum::<f64>() / vals.len() as f64).exp()
}

fn judge(pred: Prediction, points: &[(f64, f64)], tol: f64, r2_floor: f64) -> (Option<ExponentFit>, bool, bool, String) {
    let all_zero = points.iter().all(|p| p.1 == 0.0);
    if all_zero {
        let pass = pred == Prediction::Zero;
        let note = if pass { "structural zero".into() } else { "all values are exactly zero".into() };
        return (None, true, pass, note);
    }
    let fit = ols_loglog_fit_dropping_zeros(points);
    match (pred, fit) {
        (Prediction::Zero, f) => (f.ok(), false, false, "predicted zero but nonzero values observed".into()),
        (Prediction::Unspecified, f) => (f.ok(), false, true, "no prediction".into()),
        (Prediction::Exponent(_), Err(e)) => (None, false, false, e.to_string()),
        (Prediction::Exponent(p), Ok(f)) => {
            let slope_ok = (f.slope - p).abs() <= tol;
            // r^2 of a flat line carries no information
            let r2_ok = p == 0.0 || f.r_squared >= r2_floor;
            let mut note = String::new();
            if f.dropped_zeros > 0 {
                note = format!("{} zero widths dropped", f.dropped_zeros);
            }
            if !r2_ok {
                note = format!("r2 {:.3} below floor", f.r_squared);
            }
            (Some(f), false, slope_ok && r2_ok && f.dropped_zeros == 0, note)
        }
    }
}

/// Fits and judges a set of finished runs.
pub fn analyze(config: &RunConfig, catalog: &PredictionCatalog, runs: &[RunRecord]) -> Result<CoordReport> {
    let (means, classes) = seed_means(runs);
    let mut verdicts = Vec::new();
    let mut step_fits = Vec::new();
    for (&term, by_w) in &means {
        for class in TimeClass::ALL {
            let steps: Vec<usize> = classes
                .iter()
                .filter(|(s, c)| **c == class && (class != TimeClass::T2Plus || **s >= config.t2_from))
                .map(|(s, _)| *s)
                .collect();
            if steps.is_empty() {
                continue;
            }
            let pts: Vec<(f64, f64)> = by_w
                .iter()
                .filter_map(|(&n, by_s)| {
                    let vals: Vec<f64> = steps.iter().filter_map(|s| by_s.get(s).copied()).collect();
                    (vals.len() == steps.len()).then(|| (n as f64, geo_mean(&vals)))
                })
                .collect();
            let pred = catalog.get(config.regime, config.parameterization, term, class);
            if pts.is_empty() {
                continue;
            }
            let (fit, all_zero, pass, note) = judge(pred, &pts, config.tolerance, config.r2_floor);
            verdicts.push(Verdict {
                term,
                class,
                predicted: pred,
                slope: fit.map(|f| f.slope),
                r_squared: fit.map(|f| f.r_squared),
                n_widths: pts.len(),
                all_zero,
                pass,
                note,
            });
        }
        for (&step, &class) in &classes {
            let pts: Vec<(f64, f64)> = by_w.iter().filter_map(|(&n, by_s)| by_s.get(&step).map(|&v| (n as f64, v))).collect();
            if pts.len() < 2 {
                continue;
            }
            let all_zero = pts.iter().all(|p| p.1 == 0.0);
            let fit = if all_zero { None } else { ols_loglog_fit_dropping_zeros(&pts).ok() };
            step_fits.push(StepFit {
                term,
                step,
                class,
                slope: fit.map(|f| f.slope),
                r_squared: fit.map(|f| f.r_squared),
                all_zero,
            });
        }
    }
    let cells = runs
        .iter()
        .map(|r| CellSummary {
            width: r.scale.n,
            width_multiplier: r.width_multiplier,
            seed: r.seed,
            final_loss: r.final_loss,
            diverged_at: r.diverged_at,
        })
        .collect();
    let series = runs.iter().flat_map(|r| r.series()).collect();
    Ok(CoordReport { verdicts, step_fits, cells, series })
}

/// Trains the ladder of `config` and judges it against `catalog`.
pub fn run_coord_check(config: &RunConfig, catalog: &PredictionCatalog, jobs: usize) -> Result<CoordReport> {
    config.validate_for_fit()?;
    let runs = run_cells(config, jobs)?;
    analyze(config, catalog, &runs)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// CSV with columns `term,class,predicted,slope,r2,n_widths,all_zero,pass,note`.
pub fn write_verdicts_csv<W: Write>(out: W, verdicts: &[Verdict]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "class", "predicted", "slope", "r2", "n_widths", "all_zero", "pass", "note"])?;
    for v in verdicts {
        w.write_record([
            v.term.name().to_string(),
            v.class.name().to_string(),
            v.predicted.label(),
            opt(v.slope),
            opt(v.r_squared),
            v.n_widths.to_string(),
            v.all_zero.to_string(),
            v.pass.to_string(),
            v.note.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// CSV with columns `term,step,class,slope,r2,all_zero`.
pub fn write_step_fits_csv<W: Write>(out: W, fits: &[StepFit]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["term", "step", "class", "slope", "r2", "all_zero"])?;
    for f in fits {
        w.write_record([
            f.term.name().to_string(),
            f.step.to_string(),
            f.class.name().to_string(),
            opt(f.slope),
            opt(f.r_squared),
            f.all_zero.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
