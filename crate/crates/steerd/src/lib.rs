//! Live steering service for bundled twins: sessions produce frames at a
//! fixed rate, accept mode and input commands between frames, and log every
//! command so a session can be replayed offline.

pub mod engine;
pub mod error;
pub mod http;
pub mod protocol;
pub mod replay;
pub mod service;

pub use engine::{SessionConfig, TwinEngine};
pub use error::SteerError;
pub use http::{router, serve};
pub use protocol::{Ack, CommandKind, FramePacket, ModeLabel, ServerMessage, SteerCommand};
pub use replay::{replay, ReplayLog};
pub use service::{SessionInfo, SteerService};
