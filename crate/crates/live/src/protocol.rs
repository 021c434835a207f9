//! Wire frames. Every frame is one JSON text message carrying the schema
//! version `v` next to its `type` tag. State indices and modes are one-based.

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Created,
    Running,
    Paused,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownSession,
    InvalidState,
    IndexOutOfRange,
    InvalidMagnitude,
    BadFrame,
    UnsupportedVersion,
    InvalidScenario,
    InvalidRatio,
    ResourceLimit,
    Busy,
    Lagged,
    Internal,
}

/// An impulse as applied to the plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpulseLog {
    /// Simulated time at which the jump was applied.
    pub t: f64,
    pub index: usize,
    pub magnitude: f64,
    /// True for a zero magnitude, which leaves the state unchanged.
    pub noop: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SettleLog {
    pub impulse_t: f64,
    pub index: usize,
    pub band: f64,
    /// Seconds from the impulse until the state entered the band for a
    /// stretch of at least two seconds.
    pub reentry: Option<f64>,
    /// Seconds from the impulse until the state stays in the band for the
    /// rest of the run so far; `None` while it is outside.
    pub settle: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub t: f64,
    /// True when the configured duration was simulated, false after `stop`.
    pub completed: bool,
    pub steps: usize,
    pub delta: f64,
    pub max_optimize_millis: f64,
    pub mean_optimize_millis: f64,
    pub x: Vec<f64>,
    pub impulses: Vec<ImpulseLog>,
    pub settle: Vec<SettleLog>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    Hello {
        session: String,
        state: SessionState,
        scenario: String,
        labels: Vec<String>,
        n_modes: usize,
        delta: f64,
        duration: f64,
        ratio: f64,
        rate_hz: f64,
    },
    State {
        t: f64,
        x: Vec<f64>,
        mode: usize,
        u: Vec<u8>,
    },
    Ack {
        command: String,
        /// Simulated time the command took effect.
        t: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        index: Option<usize>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        magnitude: Option<f64>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
    Heartbeat {
        session: String,
        state: SessionState,
        t: f64,
    },
    Status {
        state: SessionState,
        t: f64,
    },
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub v: u32,
    #[serde(flatten)]
    pub frame: Outbound,
}

impl Outbound {
    pub fn to_text(&self) -> String {
        serde_json::to_string(&Envelope { v: SCHEMA_VERSION, frame: self.clone() }).expect("frames serialise")
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Outbound::Error { code, message: message.into() }
    }
}

/// Parses an outbound frame, e.g. on the client side.
pub fn parse_outbound(text: &str) -> Result<Envelope, serde_json::Error> {
    serde_json::from_str(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Inbound {
    /// Adds `magnitude` to state `index` (one-based).
    Impulse { index: usize, magnitude: f64 },
    Pause,
    Resume,
    Stop,
    /// Starts a created session without waiting for the first subscriber.
    Start,
}

/// Parses an inbound frame. A missing `v` is read as the current version.
pub fn parse_inbound(text: &str) -> Result<Inbound, Outbound> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Outbound::error(ErrorCode::BadFrame, e.to_string()))?;
    if let Some(v) = value.get("v") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(Outbound::error(ErrorCode::UnsupportedVersion, format!("schema version {v} is not supported")));
        }
    }
    serde_json::from_value(value).map_err(|e| Outbound::error(ErrorCode::BadFrame, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_frame_shape() {
        let text = Outbound::State { t: 0.5, x: vec![1.0, 2.0], mode: 2, u: vec![0, 1] }.to_text();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["v"], 1);
        assert_eq!(v["type"], "state");
        assert_eq!(v["mode"], 2);
        assert_eq!(v["x"][1], 2.0);
        assert_eq!(parse_outbound(&text).unwrap().frame, Outbound::State { t: 0.5, x: vec![1.0, 2.0], mode: 2, u: vec![0, 1] });
    }

    #[test]
    fn inbound_parsing() {
        assert_eq!(parse_inbound(r#"{"type":"impulse","index":4,"magnitude":0.5}"#).unwrap(), Inbound::Impulse { index: 4, magnitude: 0.5 });
        assert_eq!(parse_inbound(r#"{"v":1,"type":"pause"}"#).unwrap(), Inbound::Pause);
        let bad = |s: &str| match parse_inbound(s) {
            Err(Outbound::Error { code, .. }) => code,
            other => panic!("expected an error, got {other:?}"),
        };
        assert_eq!(bad(r#"{"v":2,"type":"pause"}"#), ErrorCode::UnsupportedVersion);
        assert_eq!(bad(r#"{"type":"jump"}"#), ErrorCode::BadFrame);
        assert_eq!(bad("not json"), ErrorCode::BadFrame);
    }
}
