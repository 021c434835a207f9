//! The closed loop behind a live session, advanced one sensor frame at a
//! time. Nothing here knows about threads or sockets.

use sioms_core::model::{ModeSchedule, SwitchedLinearSystem, Vector};
use sioms_core::plant::{Plant, PlantTrajectory};
use sioms_core::receding::{RecedingController, RhConfig};
use sioms_core::scenario::Scenario;

use crate::protocol::{ImpulseLog, Outbound, SettleLog, Summary};
use crate::LiveError;

/// Sensor frame rate (Hz).
pub const FRAME_RATE: f64 = 30.0;

/// How long a state must stay in its band to count as having re-entered it (s).
pub const REENTRY_HOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
struct SettleTrack {
    impulse_t: f64,
    /// Time of the first sample after the last out-of-band sample.
    back_in: Option<f64>,
    outside: bool,
    /// Start of the current in-band stretch.
    inside_since: Option<f64>,
    reentry: Option<f64>,
}

pub struct Engine {
    sys: SwitchedLinearSystem,
    plant: Plant,
    controller: RecedingController,
    config: RhConfig,
    x: Vector,
    t0: f64,
    t: f64,
    frame: u64,
    slice: ModeSchedule,
    impulses: Vec<ImpulseLog>,
    settle_band: Option<(usize, f64)>,
    tracks: Vec<SettleTrack>,
    optimize_millis: Vec<f64>,
}

impl Engine {
    /// Builds the first window and computes the first control slice.
    pub fn new(scenario: &Scenario) -> Result<Self, LiveError> {
        let rh = scenario.rh.ok_or_else(|| LiveError::Scenario(format!("scenario {} has no [rh] section", scenario.name)))?;
        let config = scenario.rh_config().expect("rh section present");
        let sys = scenario.system.clone();
        let t0 = scenario.cost.t0();
        let mut controller = RecedingController::new(sys.clone(), &scenario.cost, config, &scenario.initial, t0).map_err(|e| LiveError::Scenario(e.to_string()))?;
        let plant = Plant::new(sys.clone(), scenario.plant).map_err(|e| LiveError::Scenario(e.to_string()))?;
        let x = sys.x0().clone();
        let step = controller.step(&x).map_err(|e| LiveError::Numerical(e.to_string()))?;
        Ok(Engine {
            sys,
            plant,
            controller,
            config,
            x,
            t0,
            t: t0,
            frame: 0,
            slice: step.slice,
            impulses: Vec::new(),
            settle_band: rh.settle,
            tracks: Vec::new(),
            optimize_millis: vec![step.record.optimize_millis],
        })
    }

    pub fn system(&self) -> &SwitchedLinearSystem {
        &self.sys
    }

    pub fn config(&self) -> &RhConfig {
        &self.config
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.config.duration
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.t_end() - 1e-9
    }

    pub fn state(&self) -> &Vector {
        &self.x
    }

    /// The state frame for the current instant.
    pub fn frame(&self) -> Outbound {
        let mode = self.slice.mode_at(self.t.min(self.slice.t_m()));
        let mut u = vec![0u8; self.sys.n_modes()];
        u[mode] = 1;
        Outbound::State { t: self.t, x: self.x.iter().copied().collect(), mode: mode + 1, u }
    }

    /// Adds `magnitude` to state `index` (zero-based) at the current time.
    pub fn impulse(&mut self, index: usize, magnitude: f64) -> Result<ImpulseLog, LiveError> {
        if index >= self.x.len() {
            return Err(LiveError::Index { index: index + 1, n: self.x.len() });
        }
        if !magnitude.is_finite() {
            return Err(LiveError::Magnitude(magnitude));
        }
        self.x[index] += magnitude;
        let log = ImpulseLog { t: self.t, index: index + 1, magnitude, noop: magnitude == 0.0 };
        self.impulses.push(log);
        if !log.noop {
            if let Some((watched, band)) = self.settle_band {
                let outside = self.x[watched].abs() > band;
                let inside_since = if outside { None } else { Some(self.t) };
                self.tracks.push(SettleTrack { impulse_t: self.t, back_in: inside_since, outside, inside_since, reentry: None });
            }
        }
        Ok(log)
    }

    /// Simulates up to the next frame time, re-optimising at every
    /// `delta` boundary on the way.
    pub fn advance(&mut self) -> Result<Outbound, LiveError> {
        let target = (self.t0 + (self.frame + 1) as f64 / FRAME_RATE).min(self.t_end());
        while self.t < target - 1e-12 {
            let to = target.min(self.slice.t_m());
            let piece = self.plant.propagate(&self.x, &self.slice, self.t, to).map_err(|e| LiveError::Numerical(e.to_string()))?;
            self.watch(&piece);
            self.x = piece.final_state().clone();
            self.t = to;
            if self.t >= self.slice.t_m() - 1e-12 && !self.is_done() {
                // snap onto the boundary so the controller clock and ours agree
                self.t = self.controller.time();
                let step = self.controller.step(&self.x).map_err(|e| LiveError::Numerical(e.to_string()))?;
                self.optimize_millis.push(step.record.optimize_millis);
                self.slice = step.slice;
            }
        }
        self.t = target;
        self.frame += 1;
        Ok(self.frame())
    }

    fn watch(&mut self, piece: &PlantTrajectory) {
        let Some((index, band)) = self.settle_band else { return };
        for track in &mut self.tracks {
            for (k, x) in piece.x.iter().enumerate() {
                let (t, outside) = (piece.t[k], x[index].abs() > band);
                if outside {
                    track.back_in = None;
                    track.inside_since = None;
                } else {
                    if track.outside || track.back_in.is_none() {
                        track.back_in = Some(t);
                    }
                    let since = *track.inside_since.get_or_insert(t);
                    if track.reentry.is_none() && t - since >= REENTRY_HOLD {
                        track.reentry = Some(since - track.impulse_t);
                    }
                }
                track.outside = outside;
            }
        }
    }

    pub fn impulses(&self) -> &[ImpulseLog] {
        &self.impulses
    }

    pub fn settle(&self) -> Vec<SettleLog> {
        let (index, band) = self.settle_band.unwrap_or((0, f64::NAN));
        self.tracks
            .iter()
            .map(|tr| SettleLog {
                impulse_t: tr.impulse_t,
                index: index + 1,
                band,
                reentry: tr.reentry,
                settle: if tr.outside { None } else { tr.back_in.map(|b| b - tr.impulse_t) },
            })
            .collect()
    }

    pub fn summary(&self, error: Option<String>) -> Summary {
        let n = self.optimize_millis.len().max(1) as f64;
        Summary {
            t: self.t,
            completed: self.is_done(),
            steps: self.optimize_millis.len(),
            delta: self.config.delta,
            max_optimize_millis: self.optimize_millis.iter().copied().fold(0.0, f64::max),
            mean_optimize_millis: self.optimize_millis.iter().sum::<f64>() / n,
            x: self.x.iter().copied().collect(),
            impulses: self.impulses.clone(),
            settle: self.settle(),
            error,
        }
    }
}
