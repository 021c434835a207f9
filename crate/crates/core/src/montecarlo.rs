//! Robustness study: many plants with a randomly perturbed parameter, each
//! driven by an open-loop schedule and by the receding-horizon controller,
//! both designed on the nominal model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{ExprError, TimeExpr};
use crate::model::{ModeSchedule, ModelError, QuadraticCost, SwitchedLinearSystem};
use crate::plant::{EntryOverride, Plant, PlantConfig, PlantError};
use crate::receding::{run_closed_loop, table_sequence, RecedingController, RhConfig, RhError};
use crate::sioms::{solve, Problem, SiomsError, SiomsParams};
use crate::transition::{TableError, TableParams, TransitionTables};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonteCarloError {
    #[error("perturbation template does not parse after substitution: {0}")]
    Template(#[from] ExprError),
    #[error("noise range [{low}, {high}] is empty")]
    Noise { low: f64, high: f64 },
    #[error("need at least one run")]
    Runs,
    #[error(transparent)]
    Solve(#[from] SiomsError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Receding(#[from] RhError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Which matrix entry is perturbed and how. `{c}` in `template` is
/// replaced by `nominal + omega`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// `None` applies the entry to every mode.
    pub mode: Option<usize>,
    /// Zero-based row and column.
    pub row: usize,
    pub col: usize,
    pub template: String,
    pub nominal: f64,
    /// `omega ~ U[low, high]`.
    pub low: f64,
    pub high: f64,
}

impl Perturbation {
    pub fn entry(&self, value: f64) -> Result<EntryOverride, ExprError> {
        let text = self.template.replace("{c}", &format!("{value:?}"));
        Ok(EntryOverride { mode: self.mode, row: self.row, col: self.col, expr: TimeExpr::parse(&text)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub runs: usize,
    pub seed: u64,
    pub perturbation: Perturbation,
    /// Evaluation window `[t0, t_m]`; also the open-loop design horizon.
    pub t0: f64,
    pub t_m: f64,
    pub open_loop: SiomsParams,
    pub table_dt: f64,
    pub rh: RhConfig,
    pub plant: PlantConfig,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    /// Cost per run; `None` for runs whose plant diverged.
    pub costs: Vec<Option<f64>>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
    pub diverged: usize,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub seed: u64,
    pub omegas: Vec<f64>,
    pub open_loop: VariantStats,
    pub closed_loop: VariantStats,
}

/// `omega` for run `k`: an independent ChaCha stream per run.
pub fn draw_omega(seed: u64, run: usize, low: f64, high: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    if low == high {
        return low;
    }
    rng.random_range(low..=high)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Histogram {
    let bins = bins.max(1);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

fn stats(costs: Vec<Option<f64>>, lo: f64, hi: f64, bins: usize) -> VariantStats {
    let ok: Vec<f64> = costs.iter().flatten().copied().collect();
    let (mean, std) = mean_std(&ok);
    VariantStats { diverged: costs.len() - ok.len(), histogram: histogram(&ok, lo, hi, bins), costs, mean, std }
}

/// Runs the study. The open-loop schedule and the closed-loop table
/// sequence depend only on the nominal model and are computed once.
pub fn monte_carlo(
    sys: &SwitchedLinearSystem,
    cost: &QuadraticCost,
    u0: &ModeSchedule,
    config: &MonteCarloConfig,
) -> Result<MonteCarloReport, MonteCarloError> {
    if config.runs == 0 {
        return Err(MonteCarloError::Runs);
    }
    let p = &config.perturbation;
    if !(p.low <= p.high) {
        return Err(MonteCarloError::Noise { low: p.low, high: p.high });
    }
    // fail early on a bad template
    p.entry(p.nominal)?;

    let window = cost.with_horizon(config.t0, config.t_m)?;
    let tables = TransitionTables::build(
        sys,
        &window,
        TableParams { samples: ((config.t_m - config.t0) / config.table_dt).round() as usize, ..config.rh.table },
    )?;
    let open = solve(&Problem { tables: &tables, sys, cost: &window, x0: sys.x0() }, u0, &config.open_loop)?;
    let open_schedule = open.schedule;
    drop(tables);

    let mut rh = config.rh;
    rh.duration = config.t_m - config.t0;
    let seq = Arc::new(table_sequence(sys, cost, &rh, config.t0, rh.steps())?);

    let omegas: Vec<f64> = (0..config.runs).map(|k| draw_omega(config.seed, k, p.low, p.high)).collect();
    let results: Vec<Result<(Option<f64>, Option<f64>), MonteCarloError>> = omegas
        .par_iter()
        .map(|&omega| {
            let entry = p.entry(p.nominal + omega)?;
            let plant = Plant::perturbed(sys, &[entry], config.plant)?;
            let open_cost = match plant.propagate(sys.x0(), &open_schedule, config.t0, config.t_m) {
                Ok(tr) => Some(tr.cost(&window)),
                Err(PlantError::Diverged { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let controller = RecedingController::with_shared_tables(sys.clone(), cost, rh, u0, Arc::clone(&seq))?;
            let log = run_closed_loop(controller, &plant, sys.x0(), &[])?;
            let closed_cost = if log.aborted.is_some() { None } else { Some(log.trajectory.cost(&window)) };
            Ok((open_cost.filter(|c| c.is_finite()), closed_cost.filter(|c| c.is_finite())))
        })
        .collect();
    let mut open_costs = Vec::with_capacity(config.runs);
    let mut closed_costs = Vec::with_capacity(config.runs);
    for r in results {
        let (a, b) = r?;
        open_costs.push(a);
        closed_costs.push(b);
    }
    let all: Vec<f64> = open_costs.iter().chain(&closed_costs).flatten().copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    Ok(MonteCarloReport {
        runs: config.runs,
        seed: config.seed,
        omegas,
        open_loop: stats(open_costs, lo, hi, config.bins),
        closed_loop: stats(closed_costs, lo, hi, config.bins),
    })
}
