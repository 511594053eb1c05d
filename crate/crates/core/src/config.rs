//! Endpoint configuration: protocol constants, congestion-control knobs,
//! common-case optimization toggles, and the CPU cost model used when an
//! endpoint runs on the simulator's virtual clock.

use crate::msgbuf::DEFAULT_MTU_DATA;

/// Congestion-control parameters.
///
/// `tlow_us` / `thigh_us` bound the RTT band: below `tlow_us` the rate grows
/// additively by `add_step_bps`; above `thigh_us` it shrinks
/// multiplicatively by `beta * (1 - thigh/rtt)`; in between, the smoothed
/// normalized RTT gradient decides (additive increase when non-positive,
/// `beta * min(1, gradient)` decrease otherwise). `min_rtt_us` normalizes the
/// gradient. A session whose rate sits at `link_rate_bps` with its last RTT
/// below `tlow_us` is *uncongested* and eligible for the update bypass and
/// the rate-limiter bypass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongestionKnobs {
    pub tlow_us: f64,
    pub thigh_us: f64,
    pub ewma_alpha: f64,
    pub beta: f64,
    /// Additive increase step, bits/s.
    pub add_step_bps: f64,
    /// Gradient normalization constant (propagation-level RTT).
    pub min_rtt_us: f64,
    /// Hard floor for the computed rate, bits/s.
    pub min_rate_bps: f64,
    /// Line rate; also the initial and maximum session rate, bits/s.
    pub link_rate_bps: f64,
    /// Session rate at startup (defaults to the link rate).
    pub initial_rate_bps: f64,
}

impl Default for CongestionKnobs {
    fn default() -> Self {
        let link = 25e9;
        CongestionKnobs {
            tlow_us: 50.0,
            thigh_us: 1000.0,
            ewma_alpha: 0.46,
            beta: 0.26,
            add_step_bps: 10e6,
            min_rtt_us: 6.0,
            min_rate_bps: 1e6,
            link_rate_bps: link,
            initial_rate_bps: link,
        }
    }
}

impl CongestionKnobs {
    pub fn with_link_rate(mut self, bps: f64) -> Self {
        self.link_rate_bps = bps;
        self.initial_rate_bps = bps;
        self
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(Error::Config("ewma_alpha must be in (0, 1]".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config("beta must be in (0, 1)".into()));
        }
        if self.tlow_us >= self.thigh_us {
            return Err(Error::Config("tlow must be below thigh".into()));
        }
        if self.min_rate_bps <= 0.0 || self.link_rate_bps < self.min_rate_bps {
            return Err(Error::Config("need 0 < min_rate <= link_rate".into()));
        }
        Ok(())
    }
}

/// Runtime toggles for the common-case optimizations (all on by default) and
/// for congestion control as a whole. Disabling an optimization never changes
/// protocol behavior — only the work performed per packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimizationToggles {
    /// Congestion control (RTT updates + rate limiting) enabled at all.
    pub cc: bool,
    /// Skip the rate update entirely for uncongested sessions with RTT below
    /// the low threshold.
    pub timely_bypass: bool,
    /// Transmit directly (skip the timing wheel) for uncongested sessions.
    pub limiter_bypass: bool,
    /// One timestamp per RX/TX batch instead of one per packet.
    pub batched_ts: bool,
    /// Serve MTU-sized responses from the slot's preallocated msgbuf.
    pub prealloc_responses: bool,
    /// Run single-packet dispatch requests directly from the borrowed RX
    /// buffer (no copy, no allocation).
    pub zerocopy_rx: bool,
}

impl Default for OptimizationToggles {
    fn default() -> Self {
        OptimizationToggles {
            cc: true,
            timely_bypass: true,
            limiter_bypass: true,
            batched_ts: true,
            prealloc_responses: true,
            zerocopy_rx: true,
        }
    }
}

/// Per-operation CPU costs (ns) charged to a simulated endpoint's virtual
/// clock. These are what make the optimization toggles measurable: each
/// disabled optimization adds strictly positive work per packet or request.
///
/// On the bypass paths the bookkeeping checks themselves are folded into the
/// base packet costs, so an uncongested run charges identical time with
/// congestion control on or off (and therefore produces an identical packet
/// trace).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpuModel {
    /// Fixed cost of one event-loop iteration.
    pub iter_base_ns: u64,
    /// Per received packet (parse + protocol step).
    pub rx_pkt_ns: u64,
    /// Per transmitted packet (build + hand to NIC).
    pub tx_pkt_ns: u64,
    /// One clock read.
    pub timestamp_ns: u64,
    /// One RTT-gradient rate update.
    pub timely_update_ns: u64,
    /// Inserting one packet into the timing wheel.
    pub wheel_insert_ns: u64,
    /// Handing one packet straight to the NIC (limiter bypass path).
    pub direct_tx_ns: u64,
    /// One dynamic buffer allocation.
    pub alloc_ns: u64,
    /// Copying one KiB of payload.
    pub memcpy_ns_per_kb: u64,
    /// Draining the transmit queue of msgbuf references.
    pub flush_tx_ns: u64,
    /// Fixed overhead of invoking a request handler or continuation.
    pub call_ns: u64,
}

impl Default for CpuModel {
    fn default() -> Self {
        CpuModel {
            iter_base_ns: 30,
            rx_pkt_ns: 40,
            tx_pkt_ns: 40,
            timestamp_ns: 8,
            timely_update_ns: 20,
            wheel_insert_ns: 50,
            direct_tx_ns: 5,
            alloc_ns: 60,
            memcpy_ns_per_kb: 40,
            flush_tx_ns: 2000,
            call_ns: 15,
        }
    }
}

/// Top-level endpoint configuration.
#[derive(Debug, Clone)]
pub struct RpcConfig {
    /// Application payload bytes per packet.
    pub mtu_data: usize,
    /// Receive queue depth in packets; bounds the endpoint's total credit
    /// commitment across sessions.
    pub rq_capacity: usize,
    /// Per-session credit budget C.
    pub credits: u32,
    /// Request slots per session.
    pub num_slots: usize,
    /// Retransmission timeout, ns.
    pub rto_ns: u64,
    /// Max packets polled per event-loop iteration.
    pub rx_burst: usize,
    /// Heartbeat transmit period on the management channel, ns.
    pub heartbeat_period_ns: u64,
    /// Silence on the management channel after which a peer is declared
    /// dead, ns.
    pub failure_timeout_ns: u64,
    pub knobs: CongestionKnobs,
    pub toggles: OptimizationToggles,
    pub cpu: CpuModel,
    /// Timing wheel bucket width, ns.
    pub wheel_slot_ns: u64,
    /// Timing wheel horizon, ns.
    pub wheel_horizon_ns: u64,
    /// Give up on an RPC after this many go-back-N rounds and complete it
    /// with a timeout status.
    pub max_retx_rounds: u32,
    /// Threads serving worker-mode handlers (real-time transports only).
    pub worker_threads: usize,
}

impl Default for RpcConfig {
    fn default() -> Self {
        RpcConfig {
            mtu_data: DEFAULT_MTU_DATA,
            rq_capacity: 4096,
            credits: 8,
            num_slots: 8,
            rto_ns: 5_000_000,
            rx_burst: 16,
            heartbeat_period_ns: 100_000_000,
            failure_timeout_ns: 500_000_000,
            knobs: CongestionKnobs::default(),
            toggles: OptimizationToggles::default(),
            cpu: CpuModel::default(),
            wheel_slot_ns: 10_000,
            wheel_horizon_ns: 10_000_000,
            max_retx_rounds: 100,
            worker_threads: 2,
        }
    }
}

impl RpcConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.mtu_data == 0 {
            return Err(Error::Config("mtu_data must be >= 1".into()));
        }
        if self.num_slots == 0 || self.num_slots > u16::MAX as usize {
            return Err(Error::Config("num_slots out of range".into()));
        }
        if self.credits == 0 {
            return Err(Error::Config("credits must be >= 1".into()));
        }
        if self.wheel_slot_ns == 0 || self.wheel_horizon_ns < self.wheel_slot_ns {
            return Err(Error::Config("bad wheel geometry".into()));
        }
        self.knobs.validate()
    }
}
