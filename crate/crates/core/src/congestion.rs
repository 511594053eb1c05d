//! Congestion control: RTT-gradient rate computation plus a timing-wheel
//! rate limiter.
//!
//! Each client session carries a [`Timely`] state machine fed with per-packet
//! RTT samples; its output is a transmit rate in bits/s. Packets of congested
//! sessions are spread out by the endpoint's single [`Wheel`], a bucketed
//! calendar queue: a packet scheduled for time `t` lands in bucket
//! `ceil(t / slot_width)` and is released by the first poll at or after that
//! bucket's boundary — never earlier. Entries cannot be deleted once
//! inserted; everything queued is eventually released (the protocol layer is
//! built to tolerate stale releases).
//!
//! Two common-case fast paths are implemented here and controlled by
//! [`OptimizationToggles`](crate::config::OptimizationToggles): sessions
//! whose rate sits at the link maximum skip the rate update entirely when a
//! sample is below the low RTT threshold (update bypass), and skip the wheel
//! when transmitting (limiter bypass).

use std::collections::VecDeque;

use crate::config::CongestionKnobs;

/// Per-session RTT-gradient congestion control state.
///
/// Update rule, applied per accepted RTT sample (µs):
///
/// ```text
/// rtt_diff = (1 - alpha) * rtt_diff + alpha * (rtt - prev_rtt)
/// prev_rtt = rtt
/// rtt < tlow  -> rate = rate + add_step
/// rtt > thigh -> rate = rate * (1 - beta * (1 - thigh / rtt))
/// otherwise   -> g = rtt_diff / min_rtt
///                g <= 0 -> rate = rate + add_step
///                g >  0 -> rate = rate * (1 - beta * min(1, g))
/// rate clamped to [min_rate, link_rate]
/// ```
///
/// Initial state: `rate = initial_rate`, `prev_rtt = min_rtt`, `rtt_diff = 0`.
#[derive(Debug, Clone)]
pub struct Timely {
    rate_bps: f64,
    prev_rtt_us: f64,
    rtt_diff_us: f64,
    /// Rate updates actually performed (not bypassed).
    pub updates: u64,
    /// Samples skipped by the update bypass.
    pub bypassed: u64,
}

impl Timely {
    pub fn new(k: &CongestionKnobs) -> Self {
        Timely {
            rate_bps: k.initial_rate_bps,
            prev_rtt_us: k.min_rtt_us,
            rtt_diff_us: 0.0,
            updates: 0,
            bypassed: 0,
        }
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    /// A session is uncongested while its computed rate sits at the link
    /// maximum; such sessions are eligible for both fast paths.
    pub fn is_uncongested(&self, k: &CongestionKnobs) -> bool {
        self.rate_bps >= k.link_rate_bps
    }

    /// Feed one RTT sample and return the (possibly unchanged) rate.
    ///
    /// With `bypass` set, a sample below `tlow` on an uncongested session
    /// performs no state write at all.
    pub fn record_rtt_and_update(&mut self, rtt_us: f64, k: &CongestionKnobs, bypass: bool) -> f64 {
        debug_assert!(rtt_us > 0.0);
        if bypass && self.is_uncongested(k) && rtt_us < k.tlow_us {
            self.bypassed += 1;
            return self.rate_bps;
        }
        self.updates += 1;
        let diff = rtt_us - self.prev_rtt_us;
        self.rtt_diff_us = (1.0 - k.ewma_alpha) * self.rtt_diff_us + k.ewma_alpha * diff;
        self.prev_rtt_us = rtt_us;
        let new_rate = if rtt_us < k.tlow_us {
            self.rate_bps + k.add_step_bps
        } else if rtt_us > k.thigh_us {
            self.rate_bps * (1.0 - k.beta * (1.0 - k.thigh_us / rtt_us))
        } else {
            let g = self.rtt_diff_us / k.min_rtt_us;
            if g <= 0.0 {
                self.rate_bps + k.add_step_bps
            } else {
                self.rate_bps * (1.0 - k.beta * g.min(1.0))
            }
        };
        self.rate_bps = new_rate.clamp(k.min_rate_bps, k.link_rate_bps);
        self.rate_bps
    }
}

/// Where a packet should go: straight to the NIC, or into the wheel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxDecision {
    Transmit,
    Scheduled { release_ns: u64 },
}

/// Per-session pacing cursor: the next time this session may transmit.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pacer {
    next_send_ns: u64,
}

impl Pacer {
    pub fn new() -> Self {
        Pacer::default()
    }

    /// Decide placement for one packet of `wire_bytes` at session `rate_bps`.
    /// Advances the cursor by the packet's serialization time when pacing.
    pub fn schedule_or_bypass(
        &mut self,
        now_ns: u64,
        wire_bytes: usize,
        rate_bps: f64,
        uncongested_bypass: bool,
    ) -> TxDecision {
        if uncongested_bypass {
            return TxDecision::Transmit;
        }
        let t = self.next_send_ns.max(now_ns);
        let ser_ns = (wire_bytes as f64 * 8.0 * 1e9 / rate_bps).ceil() as u64;
        self.next_send_ns = t + ser_ns;
        TxDecision::Scheduled { release_ns: t }
    }
}

/// One queued wheel entry.
#[derive(Debug)]
pub struct WheelEntry<T> {
    /// Time the entry asked for.
    pub sched_ns: u64,
    /// Bucket boundary it will actually be released at (>= sched_ns unless
    /// the entry was due in the past, in which case the next poll frees it).
    pub release_ns: u64,
    pub item: T,
}

/// Bucketed calendar queue ("timing wheel") covering `horizon_ns` at
/// `slot_ns` resolution. No deletion: entries leave only by being polled.
#[derive(Debug)]
pub struct Wheel<T> {
    slot_ns: u64,
    horizon_ns: u64,
    buckets: Vec<VecDeque<WheelEntry<T>>>,
    /// Next bucket index (absolute, un-wrapped) to poll.
    cursor: u64,
    queued: usize,
    /// Entries whose requested time exceeded the horizon and were clamped.
    pub horizon_clamps: u64,
}

impl<T> Wheel<T> {
    pub fn new(slot_ns: u64, horizon_ns: u64) -> Self {
        assert!(slot_ns > 0 && horizon_ns >= slot_ns);
        // Twice the horizon: while entries are queued the cursor may lag one
        // full horizon behind `now` (it only advances on poll), and a new
        // insert may land one horizon ahead.
        let nbuckets = (2 * (horizon_ns / slot_ns) + 2) as usize;
        Wheel {
            slot_ns,
            horizon_ns,
            buckets: (0..nbuckets).map(|_| VecDeque::new()).collect(),
            cursor: 0,
            queued: 0,
            horizon_clamps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.queued
    }

    pub fn is_empty(&self) -> bool {
        self.queued == 0
    }

    /// Queue `item` for release at `t_ns` (clamped into `(now, now+horizon]`).
    /// Returns the bucket boundary the entry will be released at.
    pub fn insert(&mut self, t_ns: u64, now_ns: u64, item: T) -> u64 {
        // An empty wheel is never polled, so the cursor may be arbitrarily
        // stale; catch it up before computing ring offsets.
        if self.queued == 0 {
            self.cursor = self.cursor.max(now_ns / self.slot_ns);
        }
        let mut k = t_ns.div_ceil(self.slot_ns);
        // Past-due entries go to the next unpolled bucket.
        if k < self.cursor {
            k = self.cursor;
        }
        // Enforce the horizon: schedule no further than horizon from now.
        let k_max = (now_ns + self.horizon_ns) / self.slot_ns;
        if k > k_max {
            k = k_max.max(self.cursor);
            self.horizon_clamps += 1;
        }
        debug_assert!(
            k - self.cursor < self.buckets.len() as u64,
            "wheel insert beyond ring span"
        );
        let release_ns = k * self.slot_ns;
        let nb = self.buckets.len() as u64;
        self.buckets[(k % nb) as usize].push_back(WheelEntry {
            sched_ns: t_ns,
            release_ns,
            item,
        });
        self.queued += 1;
        release_ns
    }

    /// Release every entry in buckets whose boundary is at or before `now_ns`,
    /// in bucket order (FIFO within a bucket).
    pub fn poll(&mut self, now_ns: u64) -> Vec<WheelEntry<T>> {
        let target = now_ns / self.slot_ns;
        let mut out = Vec::new();
        if self.queued == 0 {
            self.cursor = self.cursor.max(target + 1);
            return out;
        }
        let nb = self.buckets.len() as u64;
        while self.cursor <= target {
            let idx = (self.cursor % nb) as usize;
            while let Some(e) = self.buckets[idx].pop_front() {
                debug_assert!(e.release_ns <= now_ns);
                self.queued -= 1;
                out.push(e);
            }
            self.cursor += 1;
            if self.queued == 0 {
                self.cursor = self.cursor.max(target + 1);
                break;
            }
        }
        out
    }

    /// Boundary time of the earliest non-empty bucket, if any.
    pub fn next_release(&self) -> Option<u64> {
        if self.queued == 0 {
            return None;
        }
        let nb = self.buckets.len() as u64;
        for off in 0..nb {
            let k = self.cursor + off;
            if !self.buckets[(k % nb) as usize].is_empty() {
                return Some(k * self.slot_ns);
            }
        }
        None
    }
}
