//! Asynchronous RPC over unreliable datagrams.
//!
//! This crate implements a client-driven RPC protocol for lossy datagram
//! networks: sessions with credit-based flow control, go-back-N loss
//! recovery with at-most-once execution, RTT-gradient congestion control
//! with a timing-wheel rate limiter, and an event-loop endpoint with
//! dispatch- and worker-mode request handlers.
//!
//! Two transports are provided: real UDP sockets ([`udp`]) for end-to-end
//! sanity, and a deterministic discrete-event network simulator ([`simnet`])
//! with configurable links, a shared-buffer switch, seeded packet loss, and
//! virtual time — the latter is what every quantitative test runs on.
//!
//! The main entry point is [`endpoint::Rpc`]; see `crates/bench` for a
//! command-line harness that drives the library through latency, rate,
//! bandwidth, incast, and key-value workloads.

pub mod config;
pub mod congestion;
pub mod endpoint;
pub mod error;
pub mod mgmt;
pub mod msgbuf;
pub mod protocol;
pub mod session;
pub mod simnet;
pub mod stats;
pub mod transport;
pub mod udp;

pub use config::{CongestionKnobs, CpuModel, OptimizationToggles, RpcConfig};
pub use endpoint::{CallResult, CallStatus, HandlerMode, ReqHandle, Rpc};
pub use error::{Error, Result, MAX_MSG_SIZE};
pub use msgbuf::{MsgBuf, PacketHeader, PktType, DEFAULT_MTU_DATA, HDR_SIZE};
pub use transport::{EndpointId, Transport};
