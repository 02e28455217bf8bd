//! WebSocket teleoperation gateway.
//!
//! A single browser client drives the simulated arm with clutch-gated
//! velocity controls while the server ticks the world at 20 Hz, streams
//! `state` at 10 Hz and records episodes into the standard dataset layout.
//! With [`SessionConfig::lockstep`] set, each control message advances exactly
//! one tick, which makes recorded message logs replay bit-for-bit.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{parse_client, ClientMessage, ServerMessage, WIRE_SCHEMA};
pub use server::{serve, GatewayError, ServerHandle, DEFAULT_PORT};
pub use session::{Session, SessionConfig};
