//! Counters, latency percentiles, and benchmark report rows.

/// Per-endpoint event counters. Everything observable about an endpoint's
/// protocol behaviour that tests and benchmarks assert on lands here.
#[derive(Debug, Default, Clone)]
pub struct EndpointStats {
    pub rpcs_completed: u64,
    pub rpcs_failed: u64,
    pub rpcs_timed_out: u64,

    pub req_pkts_tx: u64,
    pub resp_pkts_tx: u64,
    pub crs_tx: u64,
    pub rfrs_tx: u64,
    pub pkts_rx: u64,

    pub retransmissions: u64,
    pub rtos_fired: u64,
    /// RTOs skipped (re-armed) because packets were still queued in the
    /// timing wheel.
    pub rtos_deferred_wheel: u64,

    pub drops_reordered: u64,
    pub drops_stale_epoch: u64,
    pub drops_bad_state: u64,
    /// Response packets dropped because a retransmitted request packet was
    /// still queued in the timing wheel.
    pub drops_retx_queued: u64,
    pub drops_unknown_session: u64,
    pub drops_bad_header: u64,

    pub handler_invocations: u64,
    pub wheel_inserts: u64,
    /// Wheel entries released after their slot's epoch already retired;
    /// transmitted anyway and absorbed by the receiver's duplicate handling.
    pub wheel_stale_releases: u64,
    pub direct_tx: u64,
    pub timely_updates: u64,
    pub timely_bypasses: u64,
    pub tx_flushes: u64,

    /// Request-buffer ownership checks that failed at completion time
    /// (references still live in the transmit path). Must stay zero.
    pub ownership_violations: u64,

    /// Client-measured RTT samples in microseconds. Collected by default;
    /// set the skip flag for runs too long to keep samples in memory.
    pub rtt_samples_us: Vec<f64>,
    pub skip_rtt_samples: bool,

    /// Completed-RPC latencies in microseconds (enqueue to continuation).
    pub rpc_latencies_us: Vec<f64>,
    pub skip_latency_samples: bool,

    /// Response payload bytes delivered to continuations.
    pub resp_bytes_delivered: u64,
    pub req_bytes_sent: u64,
}

impl EndpointStats {
    pub fn record_rtt(&mut self, rtt_us: f64) {
        if !self.skip_rtt_samples {
            self.rtt_samples_us.push(rtt_us);
        }
    }

    pub fn record_latency(&mut self, us: f64) {
        if !self.skip_latency_samples {
            self.rpc_latencies_us.push(us);
        }
    }

    /// Total packets dropped by protocol checks.
    pub fn protocol_drops(&self) -> u64 {
        self.drops_reordered
            + self.drops_stale_epoch
            + self.drops_bad_state
            + self.drops_retx_queued
            + self.drops_unknown_session
            + self.drops_bad_header
    }
}

/// Nearest-rank percentile of an unsorted sample set. `p` in [0, 100].
/// Returns 0.0 for an empty set (callers report it as missing data).
pub fn percentile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// One benchmark result row. All scenarios report through this shape so the
/// CSV output is uniform.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub scenario: String,
    pub fan_in: u32,
    pub cc: bool,
    pub bytes: u64,
    pub p50_rtt_us: f64,
    pub p99_rtt_us: f64,
    pub drops: u64,
}

impl ReportRow {
    pub fn csv_header() -> &'static str {
        "scenario, fan_in, cc, bytes, p50_rtt_us, p99_rtt_us, drops"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{}, {}, {}, {}, {:.3}, {:.3}, {}",
            self.scenario,
            self.fan_in,
            if self.cc { 1 } else { 0 },
            self.bytes,
            self.p50_rtt_us,
            self.p99_rtt_us,
            self.drops
        )
    }
}
