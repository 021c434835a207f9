//! Switched linear time-varying systems, quadratic costs and the two
//! equivalent descriptions of a switching signal: a mode schedule
//! `{sigma, tau}` and a grid-sampled switching control `u(t)`.
//!
//! Mode indices are zero-based in code. Files and reports use one-based
//! indices.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::TimeExpr;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("system needs at least one mode and one state")]
    Empty,
    #[error("mode {} is {rows}x{cols}, expected {n}x{n}", mode + 1)]
    ModeShape { mode: usize, rows: usize, cols: usize, n: usize },
    #[error("initial state has length {got}, expected {n}")]
    StateLength { got: usize, n: usize },
    #[error("mode index {} out of range (N = {n_modes})", mode + 1)]
    ModeIndex { mode: usize, n_modes: usize },
    #[error("mode {} entry ({},{}) is not finite at t = {t}", mode + 1, row + 1, col + 1)]
    NonFinite { mode: usize, row: usize, col: usize, t: f64 },
    #[error("cost matrix {name} is {rows}x{cols}, expected {n}x{n}")]
    CostShape { name: &'static str, rows: usize, cols: usize, n: usize },
    #[error("cost matrix {name} is not symmetric")]
    NotSymmetric { name: &'static str },
    #[error("cost matrix {name} is not positive semi-definite (min eigenvalue {min_eig:e})")]
    NotPsd { name: &'static str, min_eig: f64 },
    #[error("invalid horizon [{t0}, {t_m}]")]
    Horizon { t0: f64, t_m: f64 },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("switching control sample {index} has {active} active modes")]
    Indicator { index: usize, active: usize },
}

/// Matrix whose entries are expressions of time.
///
/// Constant entries are folded once so evaluation only walks the
/// time-varying ones.
#[derive(Debug, Clone)]
pub struct ExprMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<TimeExpr>,
    constant_part: Mat,
    varying: Vec<(usize, usize, TimeExpr)>,
}

impl ExprMatrix {
    /// Builds from row-major entries.
    pub fn new(rows: usize, cols: usize, entries: Vec<TimeExpr>) -> Self {
        assert_eq!(entries.len(), rows * cols, "entry count must be rows*cols");
        let mut constant_part = Mat::zeros(rows, cols);
        let mut varying = Vec::new();
        for (k, e) in entries.iter().enumerate() {
            let (r, c) = (k / cols, k % cols);
            match e.as_constant() {
                Some(v) => constant_part[(r, c)] = v,
                None => varying.push((r, c, e.clone())),
            }
        }
        ExprMatrix { rows, cols, entries, constant_part, varying }
    }

    pub fn from_constant(m: &Mat) -> Self {
        let mut entries = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                entries.push(TimeExpr::constant(m[(r, c)]));
            }
        }
        Self::new(m.nrows(), m.ncols(), entries)
    }

    pub fn parse_rows(rows: &[Vec<&str>]) -> Result<Self, crate::expr::ExprError> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(n_rows * n_cols);
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged matrix");
            for text in row {
                entries.push(TimeExpr::parse(text)?);
            }
        }
        Ok(Self::new(n_rows, n_cols, entries))
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn entry(&self, row: usize, col: usize) -> &TimeExpr {
        &self.entries[row * self.cols + col]
    }

    pub fn is_constant(&self) -> bool {
        self.varying.is_empty()
    }

    pub fn eval(&self, t: f64) -> Mat {
        let mut m = self.constant_part.clone();
        for (r, c, e) in &self.varying {
            m[(*r, *c)] = e.eval(t);
        }
        m
    }

    pub fn eval_into(&self, t: f64, out: &mut Mat) {
        out.copy_from(&self.constant_part);
        for (r, c, e) in &self.varying {
            out[(*r, *c)] = e.eval(t);
        }
    }

    pub fn with_entry(&self, row: usize, col: usize, expr: TimeExpr) -> Self {
        let mut entries = self.entries.clone();
        entries[row * self.cols + col] = expr;
        Self::new(self.rows, self.cols, entries)
    }

    /// Row-major textual form of every entry.
    pub fn to_strings(&self) -> Vec<Vec<String>> {
        (0..self.rows)
            .map(|r| (0..self.cols).map(|c| self.entry(r, c).to_string()).collect())
            .collect()
    }
}

/// `x' = A_sigma(t)(t) x` with `N` candidate modes.
#[derive(Debug, Clone)]
pub struct SwitchedLinearSystem {
    n: usize,
    modes: Vec<ExprMatrix>,
    x0: Vector,
    labels: Vec<String>,
}

impl SwitchedLinearSystem {
    pub fn new(modes: Vec<ExprMatrix>, x0: Vector, labels: Vec<String>) -> Result<Self, ModelError> {
        let n = x0.len();
        if modes.is_empty() || n == 0 {
            return Err(ModelError::Empty);
        }
        for (mode, m) in modes.iter().enumerate() {
            if m.nrows() != n || m.ncols() != n {
                return Err(ModelError::ModeShape { mode, rows: m.nrows(), cols: m.ncols(), n });
            }
        }
        let labels = if labels.len() == modes.len() {
            labels
        } else {
            (1..=modes.len()).map(|i| format!("mode{i}")).collect()
        };
        Ok(SwitchedLinearSystem { n, modes, x0, labels })
    }

    pub fn n_states(&self) -> usize {
        self.n
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn mode(&self, j: usize) -> &ExprMatrix {
        &self.modes[j]
    }

    pub fn with_x0(&self, x0: Vector) -> Result<Self, ModelError> {
        if x0.len() != self.n {
            return Err(ModelError::StateLength { got: x0.len(), n: self.n });
        }
        let mut s = self.clone();
        s.x0 = x0;
        Ok(s)
    }

    /// Replaces one entry in the given mode, or in every mode when `mode`
    /// is `None`.
    pub fn with_entry_override(&self, mode: Option<usize>, row: usize, col: usize, expr: &TimeExpr) -> Self {
        let mut s = self.clone();
        for (j, m) in s.modes.iter_mut().enumerate() {
            if mode.is_none_or(|k| k == j) {
                *m = m.with_entry(row, col, expr.clone());
            }
        }
        s
    }

    /// Entrywise evaluation of mode `j` at `t`, rejecting non-finite values.
    pub fn eval_mode(&self, j: usize, t: f64) -> Result<Mat, ModelError> {
        if j >= self.modes.len() {
            return Err(ModelError::ModeIndex { mode: j, n_modes: self.modes.len() });
        }
        let m = self.modes[j].eval(t);
        if let Some(k) = m.iter().position(|v| !v.is_finite()) {
            // nalgebra storage is column-major
            return Err(ModelError::NonFinite { mode: j, row: k % self.n, col: k / self.n, t });
        }
        Ok(m)
    }

    /// Unchecked evaluation for hot loops.
    pub fn a(&self, j: usize, t: f64) -> Mat {
        self.modes[j].eval(t)
    }

    pub fn a_into(&self, j: usize, t: f64, out: &mut Mat) {
        self.modes[j].eval_into(t, out)
    }

    pub fn is_time_invariant(&self) -> bool {
        self.modes.iter().all(ExprMatrix::is_constant)
    }

    /// Checks that every mode is finite on `samples` points of `[t0, t_m]`.
    pub fn check_finite(&self, t0: f64, t_m: f64, samples: usize) -> Result<(), ModelError> {
        let samples = samples.max(2);
        for k in 0..samples {
            let t = t0 + (t_m - t0) * k as f64 / (samples - 1) as f64;
            for j in 0..self.modes.len() {
                self.eval_mode(j, t)?;
            }
        }
        Ok(())
    }
}

/// `J = int_{t0}^{tM} 1/2 x'Q(t)x dt + 1/2 x(tM)' P1 x(tM)`.
#[derive(Debug, Clone)]
pub struct QuadraticCost {
    q: ExprMatrix,
    p1: Mat,
    t0: f64,
    t_m: f64,
}

impl QuadraticCost {
    pub fn new(q: ExprMatrix, p1: Mat, t0: f64, t_m: f64) -> Result<Self, ModelError> {
        let n = p1.nrows();
        if p1.ncols() != n {
            return Err(ModelError::CostShape { name: "P1", rows: p1.nrows(), cols: p1.ncols(), n });
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(ModelError::CostShape { name: "Q", rows: q.nrows(), cols: q.ncols(), n });
        }
        if !(t0.is_finite() && t_m.is_finite() && t_m > t0) {
            return Err(ModelError::Horizon { t0, t_m });
        }
        check_symmetric_psd("P1", &p1)?;
        for k in 0..=10 {
            let t = t0 + (t_m - t0) * k as f64 / 10.0;
            check_symmetric_psd("Q", &q.eval(t))?;
        }
        Ok(QuadraticCost { q, p1, t0, t_m })
    }

    pub fn q(&self, t: f64) -> Mat {
        self.q.eval(t)
    }

    pub fn q_expr(&self) -> &ExprMatrix {
        &self.q
    }

    pub fn p1(&self) -> &Mat {
        &self.p1
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_m(&self) -> f64 {
        self.t_m
    }

    pub fn n_states(&self) -> usize {
        self.p1.nrows()
    }

    /// Same weights on a different horizon; `Q` keeps absolute time.
    pub fn with_horizon(&self, t0: f64, t_m: f64) -> Result<Self, ModelError> {
        if !(t_m > t0) {
            return Err(ModelError::Horizon { t0, t_m });
        }
        let mut c = self.clone();
        c.t0 = t0;
        c.t_m = t_m;
        Ok(c)
    }
}

fn check_symmetric_psd(name: &'static str, m: &Mat) -> Result<(), ModelError> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(ModelError::NotSymmetric { name });
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 * scale {
        return Err(ModelError::NotPsd { name, min_eig });
    }
    Ok(())
}

/// `{sigma, tau}` over `[t0, t_m]`: mode `sigma[i]` is active on
/// `[T_i, T_{i+1})` with `T_0 = t0` and `T_M = t_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSchedule {
    sigma: Vec<usize>,
    tau: Vec<f64>,
    t0: f64,
    t_m: f64,
}

impl ModeSchedule {
    /// Builds a schedule, merging adjacent equal modes and zero-length
    /// segments.
    pub fn new(sigma: Vec<usize>, tau: Vec<f64>, t0: f64, t_m: f64) -> Result<Self, ModelError> {
        if !(t_m > t0) {
            return Err(ModelError::Horizon { t0, t_m });
        }
        if sigma.len() != tau.len() + 1 {
            return Err(ModelError::Schedule(format!(
                "{} modes need {} switching times, got {}",
                sigma.len(),
                sigma.len().saturating_sub(1),
                tau.len()
            )));
        }
        let mut prev = t0;
        for &t in &tau {
            if !(t >= prev && t <= t_m) {
                return Err(ModelError::Schedule(format!("switching time {t} out of order")));
            }
            prev = t;
        }
        let mut s = ModeSchedule { sigma, tau, t0, t_m };
        s.normalize();
        Ok(s)
    }

    pub fn constant(mode: usize, t0: f64, t_m: f64) -> Self {
        ModeSchedule { sigma: vec![mode], tau: Vec::new(), t0, t_m }
    }

    fn normalize(&mut self) {
        let mut sigma = Vec::with_capacity(self.sigma.len());
        let mut tau: Vec<f64> = Vec::with_capacity(self.tau.len());
        let bounds: Vec<f64> = std::iter::once(self.t0)
            .chain(self.tau.iter().copied())
            .chain(std::iter::once(self.t_m))
            .collect();
        for (i, &mode) in self.sigma.iter().enumerate() {
            let (a, b) = (bounds[i], bounds[i + 1]);
            if b <= a {
                continue;
            }
            match sigma.last() {
                Some(&last) if last == mode => {}
                Some(_) => {
                    tau.push(a);
                    sigma.push(mode);
                }
                None => sigma.push(mode),
            }
        }
        if sigma.is_empty() {
            // every segment had zero length: keep the final mode
            sigma.push(*self.sigma.last().expect("non-empty"));
        }
        self.sigma = sigma;
        self.tau = tau;
    }

    pub fn sigma(&self) -> &[usize] {
        &self.sigma
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_m(&self) -> f64 {
        self.t_m
    }

    /// Number of segments `M`.
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Segment start time `T_{i}` for `i` in `0..=M`.
    pub fn boundary(&self, i: usize) -> f64 {
        if i == 0 {
            self.t0
        } else if i == self.sigma.len() {
            self.t_m
        } else {
            self.tau[i - 1]
        }
    }

    /// Index of the segment containing `t` (half-open, `t_m` belongs to the
    /// last segment).
    pub fn segment_at(&self, t: f64) -> usize {
        self.tau.partition_point(|&s| s <= t)
    }

    pub fn mode_at(&self, t: f64) -> usize {
        self.sigma[self.segment_at(t)]
    }

    pub fn validate_modes(&self, n_modes: usize) -> Result<(), ModelError> {
        match self.sigma.iter().find(|&&m| m >= n_modes) {
            Some(&mode) => Err(ModelError::ModeIndex { mode, n_modes }),
            None => Ok(()),
        }
    }

    /// Re-targets the schedule to `[t0, t_m]`: segments before `t0` are
    /// dropped and the last segment is stretched to `t_m`.
    pub fn shifted(&self, t0: f64, t_m: f64) -> Self {
        let first = self.segment_at(t0.min(self.t_m));
        let mut sigma = self.sigma[first..].to_vec();
        let mut tau: Vec<f64> = self.tau[first..].iter().copied().filter(|&s| s < t_m).collect();
        sigma.truncate(tau.len() + 1);
        tau.retain(|&s| s > t0);
        let mut s = ModeSchedule { sigma, tau, t0, t_m };
        s.normalize();
        s
    }

    /// The part of the schedule covering `[a, b]`.
    pub fn restricted(&self, a: f64, b: f64) -> Self {
        let mut s = self.shifted(a, b);
        // shifted() extends the last segment, which is what we want
        // when b lies inside the original horizon too
        s.normalize();
        s
    }
}

/// Uniform sample times over `[t0, t_m]`.
pub fn uniform_grid(t0: f64, t_m: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2, "grid needs at least two points");
    let last = points - 1;
    (0..points)
        .map(|k| if k == last { t_m } else { t0 + (t_m - t0) * k as f64 / last as f64 })
        .collect()
}

/// Grid with spacing close to `dt` that ends exactly on `t_m`.
pub fn grid_with_step(t0: f64, t_m: f64, dt: f64) -> Vec<f64> {
    let intervals = ((t_m - t0) / dt).round().max(1.0) as usize;
    uniform_grid(t0, t_m, intervals + 1)
}

/// Grid-sampled switching control. Each sample stores the index of its
/// single active mode, which is the only representation that satisfies
/// `sum_i u_i(t) = 1` with `u_i(t)` in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingControl {
    grid: Vec<f64>,
    active: Vec<usize>,
    n_modes: usize,
}

impl SwitchingControl {
    pub fn from_active(grid: Vec<f64>, active: Vec<usize>, n_modes: usize) -> Result<Self, ModelError> {
        if grid.len() != active.len() || grid.len() < 2 {
            return Err(ModelError::Schedule("grid and samples disagree in length".into()));
        }
        if let Some(&mode) = active.iter().find(|&&m| m >= n_modes) {
            return Err(ModelError::ModeIndex { mode, n_modes });
        }
        Ok(SwitchingControl { grid, active, n_modes })
    }

    /// Builds from explicit 0/1 indicator vectors.
    pub fn from_indicators(grid: Vec<f64>, values: &[Vec<u8>]) -> Result<Self, ModelError> {
        let n_modes = values.first().map_or(0, Vec::len);
        let mut active = Vec::with_capacity(values.len());
        for (index, v) in values.iter().enumerate() {
            let ones: Vec<usize> = v.iter().enumerate().filter(|(_, &x)| x == 1).map(|(i, _)| i).collect();
            let others = v.iter().filter(|&&x| x != 0 && x != 1).count();
            if ones.len() != 1 || others != 0 || v.len() != n_modes {
                return Err(ModelError::Indicator { index, active: ones.len() });
            }
            active.push(ones[0]);
        }
        Self::from_active(grid, active, n_modes)
    }

    pub fn constant(grid: Vec<f64>, mode: usize, n_modes: usize) -> Self {
        let active = vec![mode; grid.len()];
        SwitchingControl { grid, active, n_modes }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn indicator(&self, k: usize) -> Vec<u8> {
        let mut v = vec![0u8; self.n_modes];
        v[self.active[k]] = 1;
        v
    }

    pub fn t0(&self) -> f64 {
        self.grid[0]
    }

    pub fn t_m(&self) -> f64 {
        *self.grid.last().expect("non-empty grid")
    }
}

/// Unconstrained real-valued control `mu(t)`, one length-N vector per
/// grid sample stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealControl {
    grid: Vec<f64>,
    values: Vec<f64>,
    n_modes: usize,
}

impl RealControl {
    pub fn new(grid: Vec<f64>, values: Vec<f64>, n_modes: usize) -> Self {
        assert_eq!(values.len(), grid.len() * n_modes, "one vector per sample");
        assert!(values.iter().all(|v| v.is_finite()), "real control must be finite");
        RealControl { grid, values, n_modes }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn sample(&self, k: usize) -> &[f64] {
        &self.values[k * self.n_modes..(k + 1) * self.n_modes]
    }
}

/// Mode schedule equivalent to a grid-sampled switching control. Switching
/// times are the grid times at which the active mode changes.
pub fn schedule_from_control(u: &SwitchingControl) -> ModeSchedule {
    let mut sigma = vec![u.active[0]];
    let mut tau = Vec::new();
    for k in 1..u.grid.len() {
        if u.active[k] != u.active[k - 1] {
            tau.push(u.grid[k]);
            sigma.push(u.active[k]);
        }
    }
    let mut s = ModeSchedule { sigma, tau, t0: u.t0(), t_m: u.t_m() };
    s.normalize();
    s
}

/// Samples a schedule on `grid` with the half-open segment convention.
pub fn control_from_schedule(s: &ModeSchedule, grid: &[f64], n_modes: usize) -> SwitchingControl {
    let mut active = Vec::with_capacity(grid.len());
    let mut seg = 0;
    for &t in grid {
        while seg < s.tau.len() && s.tau[seg] <= t {
            seg += 1;
        }
        active.push(s.sigma[seg]);
    }
    SwitchingControl { grid: grid.to_vec(), active, n_modes }
}
