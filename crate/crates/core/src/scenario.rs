//! Scenario files: system, cost, solver settings and optional
//! receding-horizon, disturbance, Monte-Carlo and benchmark sections.
//!
//! The format is TOML. Matrix entries are expression strings or numbers;
//! mode, state, row and column indices are one-based. Every error names the
//! field and, when it can be located, the line.
//!
//! ```toml
//! name = "example"
//! [system]
//! x0 = [1.0, 0.0]
//! [[system.modes]]
//! name = "soft"
//! a = [["0", "1"], ["-30", "-2"]]
//! [cost]
//! q = [[1, 0], [0, 0.1]]
//! p1 = [[0, 0], [0, 0]]
//! t0 = 0.0
//! tm = 2.0
//! [solver]          # optional; every SiomsParams field plus the table
//! initial_mode = 1  # settings table_dt, table_max_step, interpolation,
//! max_iter = 30     # anchor_limit, samples, and initial_schedule = {sigma, tau}
//! [output]          # optional; dir, cache, format ("csv" or "structured"), timings
//! ```

use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::baseline::BenchConfig;
use crate::expr::TimeExpr;
use crate::model::{ExprMatrix, Mat, ModeSchedule, QuadraticCost, SwitchedLinearSystem, Vector};
use crate::montecarlo::{MonteCarloConfig, Perturbation};
use crate::plant::PlantConfig;
use crate::receding::{Disturbance, RhConfig};
use crate::report::ReportFormat;
use crate::sioms::{LineSearch, SiomsParams};
use crate::transition::{Interpolation, TableParams};

const SPRING_MASS: &str = include_str!("../scenarios/spring_mass.toml");
const CART_MASS: &str = include_str!("../scenarios/cart_mass.toml");

/// Names of the scenarios compiled into the library.
pub const BUILTINS: [&str; 2] = ["spring_mass", "cart_mass"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioError {
    pub origin: String,
    pub line: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}: {}", self.origin, line, self.field, self.message),
            None => write!(f, "{}: {}: {}", self.origin, self.field, self.message),
        }
    }
}

impl std::error::Error for ScenarioError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Entry {
    Number(f64),
    Text(String),
}

type RawMatrix = Vec<Vec<Spanned<Entry>>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    #[serde(default)]
    description: String,
    system: Spanned<RawSystem>,
    cost: Spanned<RawCost>,
    #[serde(default)]
    solver: Option<Spanned<RawSolver>>,
    #[serde(default)]
    plant: Option<Spanned<RawPlant>>,
    #[serde(default)]
    rh: Option<Spanned<RawRh>>,
    #[serde(default)]
    disturbances: Vec<Spanned<RawDisturbance>>,
    #[serde(default)]
    montecarlo: Option<Spanned<RawMonteCarlo>>,
    #[serde(default)]
    bench: Option<Spanned<RawBench>>,
    #[serde(default)]
    output: Option<RawOutput>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<String>,
    cache: Option<String>,
    format: Option<ReportFormat>,
    #[serde(default)]
    timings: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    x0: Spanned<Vec<f64>>,
    #[serde(default)]
    state_names: Vec<String>,
    modes: Vec<Spanned<RawMode>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMode {
    #[serde(default)]
    name: Option<String>,
    a: Spanned<RawMatrix>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCost {
    q: Spanned<RawMatrix>,
    p1: Spanned<Vec<Vec<f64>>>,
    t0: f64,
    tm: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    sigma: Vec<usize>,
    tau: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    initial_mode: Option<usize>,
    initial_schedule: Option<RawSchedule>,
    max_iter: Option<usize>,
    theta_tol: Option<f64>,
    gamma0: Option<f64>,
    gamma_scale: Option<f64>,
    beta: Option<f64>,
    c_armijo: Option<f64>,
    m_max: Option<usize>,
    line_search: Option<LineSearch>,
    control_dt: Option<f64>,
    refine_evals: Option<usize>,
    quadrature_points: Option<usize>,
    table_dt: Option<f64>,
    samples: Option<Spanned<usize>>,
    table_max_step: Option<f64>,
    interpolation: Option<Interpolation>,
    anchor_limit: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    max_step: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRh {
    horizon: f64,
    delta: f64,
    duration: f64,
    #[serde(default)]
    inner_iterations: Option<usize>,
    #[serde(default)]
    table_dt: Option<f64>,
    #[serde(default)]
    settle_state: Option<usize>,
    #[serde(default)]
    settle_band: Option<f64>,
    #[serde(default)]
    open_loop_iterations: Option<usize>,
    #[serde(default)]
    open_loop_dt: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDisturbance {
    time: f64,
    state: usize,
    magnitude: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonteCarlo {
    runs: usize,
    seed: u64,
    t0: f64,
    tm: f64,
    horizon: f64,
    delta: f64,
    #[serde(default)]
    bins: Option<usize>,
    #[serde(default)]
    open_loop_iterations: Option<usize>,
    #[serde(default)]
    mode: Option<usize>,
    row: usize,
    col: usize,
    template: String,
    nominal: f64,
    low: f64,
    high: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBench {
    samples: Vec<usize>,
    #[serde(default)]
    iterations: Option<usize>,
    #[serde(default)]
    repetitions: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhSection {
    pub horizon: f64,
    pub delta: f64,
    pub duration: f64,
    pub inner_iterations: usize,
    pub table_dt: f64,
    /// Zero-based state and band used to measure disturbance settling.
    pub settle: Option<(usize, f64)>,
    /// Iterations of the open-loop comparison over the whole run; `None`
    /// skips it.
    pub open_loop_iterations: Option<usize>,
    /// Table and control spacing of the open-loop comparison.
    pub open_loop_dt: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSection {
    pub runs: usize,
    pub seed: u64,
    pub t0: f64,
    pub t_m: f64,
    pub horizon: f64,
    pub delta: f64,
    pub bins: usize,
    pub open_loop_iterations: usize,
    pub perturbation: Perturbation,
}

/// Where and how commands write their reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// Directory of the on-disk table cache.
    pub cache: Option<String>,
    pub format: Option<ReportFormat>,
    /// Also write wall-clock timing files.
    pub timings: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSection {
    pub samples: Vec<usize>,
    pub iterations: usize,
    pub repetitions: usize,
}

/// A fully validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub system: SwitchedLinearSystem,
    pub state_names: Vec<String>,
    pub cost: QuadraticCost,
    /// Initial schedule over the cost horizon.
    pub initial: ModeSchedule,
    pub solver: SiomsParams,
    pub table_dt: f64,
    /// Table interval count for the open-loop horizon; overrides `table_dt`.
    pub table_samples: Option<usize>,
    pub table: TableParams,
    pub plant: PlantConfig,
    pub rh: Option<RhSection>,
    pub disturbances: Vec<Disturbance>,
    pub montecarlo: Option<MonteCarloSection>,
    pub bench: Option<BenchSection>,
    pub output: OutputSection,
}

struct Ctx<'a> {
    origin: &'a str,
    src: &'a str,
}

impl Ctx<'_> {
    fn line(&self, span: Range<usize>) -> usize {
        self.src[..span.start.min(self.src.len())].matches('\n').count() + 1
    }

    fn err(&self, span: Option<Range<usize>>, field: &str, message: impl Into<String>) -> ScenarioError {
        ScenarioError {
            origin: self.origin.to_string(),
            line: span.map(|s| self.line(s)),
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn matrix(&self, m: &Spanned<RawMatrix>, field: &str, n: usize) -> Result<ExprMatrix, ScenarioError> {
        let rows = m.get_ref();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(self.err(Some(m.span()), field, format!("expected a {n}x{n} matrix")));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (r, row) in rows.iter().enumerate() {
            for (c, e) in row.iter().enumerate() {
                let expr = match e.get_ref() {
                    Entry::Number(v) => TimeExpr::constant(*v),
                    Entry::Text(s) => TimeExpr::parse(s.as_str()).map_err(|err| {
                        self.err(Some(e.span()), &format!("{field}[{}][{}]", r + 1, c + 1), err.to_string())
                    })?,
                };
                entries.push(expr);
            }
        }
        Ok(ExprMatrix::new(n, n, entries))
    }
}

fn positive(ctx: &Ctx<'_>, span: Range<usize>, field: &str, v: f64) -> Result<f64, ScenarioError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(ctx.err(Some(span), field, format!("must be positive, got {v}")))
    }
}

impl Scenario {
    /// Parses scenario text; `origin` names the source in error messages.
    pub fn parse(src: &str, origin: &str) -> Result<Self, ScenarioError> {
        let ctx = Ctx { origin, src };
        let raw: RawScenario = toml::from_str(src).map_err(|e| {
            let field = "document";
            let mut err = ctx.err(e.span(), field, e.message().to_string());
            if err.line.is_none() {
                err.message = e.to_string();
            }
            err
        })?;

        let sys_span = raw.system.span();
        let sys = raw.system.into_inner();
        let n = sys.x0.get_ref().len();
        if n == 0 {
            return Err(ctx.err(Some(sys.x0.span()), "system.x0", "state must have at least one entry"));
        }
        if sys.modes.is_empty() {
            return Err(ctx.err(Some(sys_span), "system.modes", "at least one mode is required"));
        }
        let mut modes = Vec::new();
        let mut labels = Vec::new();
        for (j, m) in sys.modes.iter().enumerate() {
            let field = format!("system.modes[{}].a", j + 1);
            modes.push(ctx.matrix(&m.get_ref().a, &field, n)?);
            labels.push(m.get_ref().name.clone().unwrap_or_else(|| format!("mode{}", j + 1)));
        }
        let x0 = Vector::from_vec(sys.x0.get_ref().clone());
        let system = SwitchedLinearSystem::new(modes, x0, labels)
            .map_err(|e| ctx.err(Some(sys_span.clone()), "system", e.to_string()))?;
        if !sys.state_names.is_empty() && sys.state_names.len() != n {
            return Err(ctx.err(Some(sys_span), "system.state_names", format!("expected {n} names")));
        }
        let state_names =
            if sys.state_names.is_empty() { (1..=n).map(|i| format!("x{i}")).collect() } else { sys.state_names };

        let cost_span = raw.cost.span();
        let rc = raw.cost.into_inner();
        let q = ctx.matrix(&rc.q, "cost.q", n)?;
        let p1_rows = rc.p1.get_ref();
        if p1_rows.len() != n || p1_rows.iter().any(|r| r.len() != n) {
            return Err(ctx.err(Some(rc.p1.span()), "cost.p1", format!("expected a {n}x{n} matrix")));
        }
        let p1 = Mat::from_fn(n, n, |r, c| p1_rows[r][c]);
        let cost = QuadraticCost::new(q, p1, rc.t0, rc.tm).map_err(|e| ctx.err(Some(cost_span), "cost", e.to_string()))?;
        system
            .check_finite(rc.t0, rc.tm, 64)
            .map_err(|e| ctx.err(Some(sys_span_of(src)), "system", e.to_string()))?;

        let (solver_span, rs) = match raw.solver {
            Some(s) => (Some(s.span()), s.into_inner()),
            None => (None, RawSolver::default()),
        };
        let d = SiomsParams::default();
        let solver = SiomsParams {
            max_iter: rs.max_iter.unwrap_or(d.max_iter),
            theta_tol: rs.theta_tol.or(d.theta_tol),
            gamma0: rs.gamma0.or(d.gamma0),
            gamma_scale: rs.gamma_scale.unwrap_or(d.gamma_scale),
            beta: rs.beta.unwrap_or(d.beta),
            c_armijo: rs.c_armijo.unwrap_or(d.c_armijo),
            m_max: rs.m_max.unwrap_or(d.m_max),
            line_search: rs.line_search.unwrap_or(d.line_search),
            control_dt: rs.control_dt.unwrap_or(d.control_dt),
            refine_evals: rs.refine_evals.unwrap_or(d.refine_evals),
            quadrature_points: rs.quadrature_points.unwrap_or(d.quadrature_points),
        };
        solver.validate().map_err(|e| ctx.err(solver_span.clone(), "solver", e.to_string()))?;
        let td = TableParams::default();
        let table = TableParams {
            samples: td.samples,
            max_step: rs.table_max_step.unwrap_or(td.max_step),
            interpolation: rs.interpolation.unwrap_or(td.interpolation),
            anchor_limit: rs.anchor_limit.unwrap_or(td.anchor_limit),
        };
        let table_dt = rs.table_dt.unwrap_or(solver.control_dt);
        let sspan = solver_span.clone().unwrap_or(0..0);
        positive(&ctx, sspan.clone(), "solver.table_dt", table_dt)?;
        positive(&ctx, sspan.clone(), "solver.table_max_step", table.max_step)?;
        let table_samples = match &rs.samples {
            Some(v) if *v.get_ref() < 2 => {
                return Err(ctx.err(Some(v.span()), "solver.samples", "must be at least 2"));
            }
            Some(v) => Some(*v.get_ref()),
            None => None,
        };

        let n_modes = system.n_modes();
        let mode_index = |m: usize, field: &str| {
            if m >= 1 && m <= n_modes {
                Ok(m - 1)
            } else {
                Err(ctx.err(solver_span.clone(), field, format!("mode {m} outside 1..={n_modes}")))
            }
        };
        let initial = match (rs.initial_schedule, rs.initial_mode) {
            (Some(s), _) => {
                let sigma = s
                    .sigma
                    .iter()
                    .map(|&m| mode_index(m, "solver.initial_schedule.sigma"))
                    .collect::<Result<Vec<_>, _>>()?;
                ModeSchedule::new(sigma, s.tau, cost.t0(), cost.t_m())
                    .map_err(|e| ctx.err(solver_span.clone(), "solver.initial_schedule", e.to_string()))?
            }
            (None, Some(m)) => ModeSchedule::constant(mode_index(m, "solver.initial_mode")?, cost.t0(), cost.t_m()),
            (None, None) => ModeSchedule::constant(0, cost.t0(), cost.t_m()),
        };

        let plant = match raw.plant {
            Some(p) => {
                let step = p.get_ref().max_step;
                if !(step > 0.0 && step <= 1e-3) {
                    return Err(ctx.err(Some(p.span()), "plant.max_step", "must lie in (0, 1e-3]"));
                }
                PlantConfig { max_step: step }
            }
            None => PlantConfig::default(),
        };

        let rh = match raw.rh {
            Some(r) => {
                let span = r.span();
                let r = r.into_inner();
                let sec = RhSection {
                    horizon: positive(&ctx, span.clone(), "rh.horizon", r.horizon)?,
                    delta: positive(&ctx, span.clone(), "rh.delta", r.delta)?,
                    duration: positive(&ctx, span.clone(), "rh.duration", r.duration)?,
                    inner_iterations: r.inner_iterations.unwrap_or(5),
                    table_dt: positive(&ctx, span.clone(), "rh.table_dt", r.table_dt.unwrap_or(table_dt))?,
                    settle: match (r.settle_state, r.settle_band) {
                        (Some(k), Some(b)) if k >= 1 && k <= n && b > 0.0 => Some((k - 1, b)),
                        (None, None) => None,
                        _ => {
                            return Err(ctx.err(
                                Some(span),
                                "rh.settle_state",
                                format!("settle_state (1..={n}) and a positive settle_band go together"),
                            ))
                        }
                    },
                    open_loop_iterations: r.open_loop_iterations,
                    open_loop_dt: positive(&ctx, span.clone(), "rh.open_loop_dt", r.open_loop_dt.unwrap_or(1e-2))?,
                };
                if sec.delta > sec.horizon {
                    return Err(ctx.err(Some(span), "rh.delta", "must not exceed rh.horizon"));
                }
                Some(sec)
            }
            None => None,
        };

        let disturbances = raw
            .disturbances
            .iter()
            .map(|d| {
                let v = d.get_ref();
                if v.state == 0 || v.state > n {
                    return Err(ctx.err(Some(d.span()), "disturbances.state", format!("state {} outside 1..={n}", v.state)));
                }
                Ok(Disturbance { time: v.time, index: v.state - 1, magnitude: v.magnitude })
            })
            .collect::<Result<Vec<_>, _>>()?;

        let montecarlo = match raw.montecarlo {
            Some(m) => {
                let span = m.span();
                let m = m.into_inner();
                let index = |v: usize, field: &str| {
                    if v >= 1 && v <= n {
                        Ok(v - 1)
                    } else {
                        Err(ctx.err(Some(span.clone()), field, format!("{v} outside 1..={n}")))
                    }
                };
                let mode = match m.mode {
                    Some(k) if k >= 1 && k <= n_modes => Some(k - 1),
                    Some(k) => return Err(ctx.err(Some(span), "montecarlo.mode", format!("mode {k} outside 1..={n_modes}"))),
                    None => None,
                };
                let perturbation = Perturbation {
                    mode,
                    row: index(m.row, "montecarlo.row")?,
                    col: index(m.col, "montecarlo.col")?,
                    template: m.template,
                    nominal: m.nominal,
                    low: m.low,
                    high: m.high,
                };
                perturbation
                    .entry(m.nominal)
                    .map_err(|e| ctx.err(Some(span.clone()), "montecarlo.template", e.to_string()))?;
                if !(m.low <= m.high) {
                    return Err(ctx.err(Some(span), "montecarlo.low", "low must not exceed high"));
                }
                if !(m.tm > m.t0) {
                    return Err(ctx.err(Some(span), "montecarlo.tm", "must exceed montecarlo.t0"));
                }
                Some(MonteCarloSection {
                    runs: m.runs,
                    seed: m.seed,
                    t0: m.t0,
                    t_m: m.tm,
                    horizon: positive(&ctx, span.clone(), "montecarlo.horizon", m.horizon)?,
                    delta: positive(&ctx, span.clone(), "montecarlo.delta", m.delta)?,
                    bins: m.bins.unwrap_or(20),
                    open_loop_iterations: m.open_loop_iterations.unwrap_or(solver.max_iter),
                    perturbation,
                })
            }
            None => None,
        };

        let bench = raw.bench.map(|b| {
            let b = b.into_inner();
            BenchSection { samples: b.samples, iterations: b.iterations.unwrap_or(10), repetitions: b.repetitions.unwrap_or(5) }
        });

        Ok(Scenario {
            name: raw.name,
            description: raw.description,
            system,
            state_names,
            cost,
            initial,
            solver,
            table_dt,
            table_samples,
            table,
            plant,
            rh,
            disturbances,
            montecarlo,
            bench,
            output: raw
                .output
                .map(|o| OutputSection { dir: o.dir, cache: o.cache, format: o.format, timings: o.timings })
                .unwrap_or_default(),
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let src = match name {
            "spring_mass" => SPRING_MASS,
            "cart_mass" => CART_MASS,
            _ => return None,
        };
        Some(Scenario::parse(src, name).expect("built-in scenarios are valid"))
    }

    /// Source text of a built-in scenario.
    pub fn builtin_source(name: &str) -> Option<&'static str> {
        match name {
            "spring_mass" => Some(SPRING_MASS),
            "cart_mass" => Some(CART_MASS),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, LoadError> {
        let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io { path: path.display().to_string(), source: e })?;
        Scenario::parse(&text, &path.display().to_string()).map_err(LoadError::Parse)
    }

    /// A built-in name or a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, LoadError> {
        match Scenario::builtin(name_or_path) {
            Some(s) => Ok(s),
            None => Scenario::load(Path::new(name_or_path)),
        }
    }

    /// Table parameters for a window of length `span`.
    pub fn table_params(&self, span: f64, dt: f64) -> TableParams {
        TableParams { samples: (span / dt).round().max(1.0) as usize, ..self.table }
    }

    /// Table parameters for the open-loop horizon `[t0, tm]`.
    pub fn open_loop_table_params(&self) -> TableParams {
        match self.table_samples {
            Some(samples) => TableParams { samples, ..self.table },
            None => self.table_params(self.cost.t_m() - self.cost.t0(), self.table_dt),
        }
    }

    pub fn rh_config(&self) -> Option<RhConfig> {
        self.rh.map(|r| RhConfig {
            horizon: r.horizon,
            delta: r.delta,
            duration: r.duration,
            inner: SiomsParams { max_iter: r.inner_iterations, ..self.solver },
            table_dt: r.table_dt,
            table: self.table,
        })
    }

    pub fn montecarlo_config(&self) -> Option<MonteCarloConfig> {
        let m = self.montecarlo.as_ref()?;
        let inner = self.rh.map_or(5, |r| r.inner_iterations);
        Some(MonteCarloConfig {
            runs: m.runs,
            seed: m.seed,
            perturbation: m.perturbation.clone(),
            t0: m.t0,
            t_m: m.t_m,
            open_loop: SiomsParams { max_iter: m.open_loop_iterations, ..self.solver },
            table_dt: self.table_dt,
            rh: RhConfig {
                horizon: m.horizon,
                delta: m.delta,
                duration: m.t_m - m.t0,
                inner: SiomsParams { max_iter: inner, ..self.solver },
                table_dt: self.table_dt,
                table: self.table,
            },
            plant: self.plant,
            bins: m.bins,
        })
    }

    pub fn bench_config(&self) -> BenchConfig {
        let d = BenchConfig::default();
        match &self.bench {
            Some(b) => BenchConfig {
                samples: b.samples.clone(),
                iterations: b.iterations,
                repetitions: b.repetitions,
                sioms: self.solver,
                table_max_step: self.table.max_step,
            },
            None => BenchConfig { sioms: self.solver, table_max_step: self.table.max_step, ..d },
        }
    }
}

fn sys_span_of(src: &str) -> Range<usize> {
    let at = src.find("[system]").unwrap_or(0);
    at..at
}

#[derive(Debug)]
pub enum LoadError {
    Io { path: String, source: std::io::Error },
    Parse(ScenarioError),
}

impl fmt::Display for LoadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LoadError::Io { path, source } => write!(f, "cannot read {path}: {source}"),
            LoadError::Parse(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for LoadError {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        let s = Scenario::builtin("spring_mass").unwrap();
        assert_eq!(s.system.n_modes(), 2);
        assert_eq!(s.system.a(0, 0.7)[(1, 0)], -30.0);
        assert_eq!(s.initial.sigma(), &[1]);
        let c = Scenario::builtin("cart_mass").unwrap();
        assert_eq!(c.system.n_states(), 5);
        assert!((c.system.a(0, 0.0)[(3, 2)] + 4.9).abs() < 1e-15);
        assert!(c.rh.is_some() && c.montecarlo.is_some());
        assert_eq!(c.disturbances[0].index, 3);
    }

    #[test]
    fn bad_expression_cites_line_and_field() {
        let src = Scenario::builtin_source("spring_mass").unwrap().replace("\"-70/1\"", "\"-70/sin(\"");
        let e = Scenario::parse(&src, "x.toml").unwrap_err();
        assert_eq!(e.field, "system.modes[2].a[2][1]");
        let line = src.lines().position(|l| l.contains("-70/sin(")).unwrap() + 1;
        assert_eq!(e.line, Some(line));
        assert!(e.to_string().starts_with(&format!("x.toml:{line}:")));
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let src = Scenario::builtin_source("spring_mass").unwrap().replace("max_iter = 30", "max_iters = 30");
        let e = Scenario::parse(&src, "x.toml").unwrap_err();
        assert!(e.line.is_some());
        assert!(e.message.contains("max_iters"), "{}", e.message);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let src = Scenario::builtin_source("spring_mass").unwrap().replace("[0, 0.1],", "[0, 0.1, 3],");
        let e = Scenario::parse(&src, "x.toml").unwrap_err();
        assert_eq!(e.field, "cost.q");
    }
}
