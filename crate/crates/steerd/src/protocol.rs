//! Wire types. Every server-to-client message is one JSON object per line.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeLabel {
    Coupled,
    Forced,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePacket {
    pub t: u64,
    #[serde(rename = "R")]
    pub r: f64,
    pub mean_phase: f64,
    /// Twin output in physical units.
    pub output: Vec<f64>,
    pub mode: ModeLabel,
    pub lambda_estimate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value")]
pub enum CommandKind {
    /// `Forced` uses the current omega.
    SetMode(ModeLabel),
    SetOmega(f64),
    Freeze,
    /// Drive the twin open loop with the real system at this parameter;
    /// `null` returns to closed-loop feedback.
    SwitchInput(Option<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerCommand {
    #[serde(flatten)]
    pub kind: CommandKind,
    /// Client clock, opaque to the server.
    #[serde(default)]
    pub issued_at: Option<f64>,
}

impl SteerCommand {
    pub fn new(kind: CommandKind) -> Self {
        Self { kind, issued_at: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    /// Per-session command sequence number.
    pub seq: u64,
    /// First frame whose packet reflects the command.
    pub frame: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ServerMessage {
    Frame(FramePacket),
    Ack {
        ack: Ack,
    },
    Error {
        error: String,
    },
    /// The session stopped producing; carries the last frame index.
    Ended {
        ended: u64,
    },
}

impl ServerMessage {
    /// One JSON object terminated by a newline.
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire types serialize");
        s.push('\n');
        s
    }
}
