//! Replay logs: a header line with the session config, then one JSON line per
//! applied command with the frame at which it took effect.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rhythmic_core::bundle::Bundle;
use serde::{Deserialize, Serialize};

use crate::engine::{SessionConfig, TwinEngine};
use crate::error::SteerError;
use crate::protocol::{FramePacket, SteerCommand};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayHeader {
    pub session: u64,
    pub bundle: PathBuf,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub seq: u64,
    pub frame: u64,
    pub command: SteerCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayLog {
    pub header: ReplayHeader,
    pub entries: Vec<ReplayEntry>,
}

pub struct ReplayWriter<W: Write> {
    out: W,
}

impl<W: Write> ReplayWriter<W> {
    pub fn new(mut out: W, header: &ReplayHeader) -> std::io::Result<Self> {
        writeln!(out, "{}", serde_json::to_string(header)?)?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn record(&mut self, entry: &ReplayEntry) -> std::io::Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(entry)?)?;
        self.out.flush()
    }
}

impl ReplayLog {
    pub fn read(path: &Path) -> Result<Self, SteerError> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let bad = |what: String| SteerError::Replay(format!("{}: {what}", path.display()));
        let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let header: ReplayHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        let mut entries: Vec<ReplayEntry> = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", i + 2)))?;
            if entries.last().is_some_and(|p| (p.frame, p.seq) >= (e.frame, e.seq)) {
                return Err(bad(format!("line {}: entries out of order", i + 2)));
            }
            entries.push(e);
        }
        Ok(Self { header, entries })
    }
}

/// Re-runs a session offline for `frames` frames, applying each logged
/// command before the frame it is stamped with.
pub fn replay(bundle: &Bundle, log: &ReplayLog, frames: u64) -> Result<Vec<FramePacket>, SteerError> {
    let mut engine = TwinEngine::start(bundle, &log.header.config)?;
    let mut pending = log.entries.iter().peekable();
    let mut out = Vec::with_capacity(frames as usize);
    while engine.frame() < frames {
        while let Some(e) = pending.next_if(|e| e.frame == engine.frame()) {
            engine.apply(&e.command.kind)?;
        }
        out.push(engine.step()?);
    }
    Ok(out)
}
