//! Virtual-time co-scheduler for RPC endpoints on the simulated network.
//!
//! Real deployments spin: the dispatch thread polls its NIC continuously. In
//! virtual time that would make every nanosecond an iteration, so the runner
//! only services an endpoint when something can have changed: a packet or
//! management frame arrived, the endpoint reported a scheduled deadline
//! (retransmission timer, wheel release, worker completion, heartbeat), or
//! its previous iteration saturated the receive burst. Each serviced
//! iteration reports its modeled CPU cost; the host is busy until then, and
//! later wakeups are pushed back accordingly. Ties are broken
//! deterministically (network events before polls at the same instant, polls
//! by host index), so a fixed seed reproduces runs exactly.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::config::RpcConfig;
use crate::endpoint::Rpc;
use crate::error::Result;

use super::{NetConfig, SimNet, SimTransport};

/// One simulated host's endpoint plus its scheduling state.
pub struct SimRunner {
    net: SimNet,
    rpcs: Vec<Rpc<SimTransport>>,
    busy_until: Vec<u64>,
    /// Earliest scheduled poll per host; heap entries not matching this are
    /// stale and skipped.
    poll_at: Vec<Option<u64>>,
    poll_heap: BinaryHeap<Reverse<(u64, u16)>>,
    now: u64,
}

impl SimRunner {
    /// Build a network of `net_cfg.hosts` endpoints, all sharing `rpc_cfg`.
    pub fn new(net_cfg: NetConfig, rpc_cfg: RpcConfig) -> Result<Self> {
        let hosts = net_cfg.hosts;
        let net = SimNet::new(net_cfg, rpc_cfg.mtu_data)?;
        let mut rpcs = Vec::with_capacity(hosts);
        for h in 0..hosts {
            rpcs.push(Rpc::new_virtual_time(net.transport(h as u16), rpc_cfg.clone())?);
        }
        let mut r = SimRunner {
            net,
            rpcs,
            busy_until: vec![0; hosts],
            poll_at: vec![None; hosts],
            poll_heap: BinaryHeap::new(),
            now: 0,
        };
        for h in 0..hosts as u16 {
            r.schedule_poll(h, 0);
        }
        Ok(r)
    }

    pub fn net(&self) -> &SimNet {
        &self.net
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn rpc(&mut self, host: u16) -> &mut Rpc<SimTransport> {
        // The caller may enqueue work the endpoint doesn't yet have a
        // deadline for; make sure the host gets the CPU promptly. Duplicate
        // polls coalesce, so this is free when nothing changed.
        let at = self.now.max(self.busy_until[host as usize]);
        self.schedule_poll(host, at);
        &mut self.rpcs[host as usize]
    }

    pub fn rpcs(&self) -> &[Rpc<SimTransport>] {
        &self.rpcs
    }

    /// Kill `host` at time `t`: its endpoint stops being serviced and its
    /// NIC discards arrivals. Peers notice via heartbeat silence.
    pub fn kill_host_at(&mut self, host: u16, t: u64) {
        self.net.kill_host_at(host, t);
    }

    fn schedule_poll(&mut self, host: u16, t: u64) {
        let h = host as usize;
        match self.poll_at[h] {
            Some(cur) if cur <= t => {}
            _ => {
                self.poll_at[h] = Some(t);
                self.poll_heap.push(Reverse((t, host)));
            }
        }
    }

    /// Next valid poll instant, discarding stale heap entries.
    fn peek_poll(&mut self) -> Option<u64> {
        while let Some(&Reverse((t, h))) = self.poll_heap.peek() {
            if self.poll_at[h as usize] == Some(t) {
                return Some(t);
            }
            self.poll_heap.pop();
        }
        None
    }

    fn service_host(&mut self, host: u16, t: u64) {
        let h = host as usize;
        if self.net.is_dead(host) {
            self.poll_at[h] = None;
            return;
        }
        self.net.set_now(t);
        let report = self.rpcs[h].run_event_loop_once(t);
        self.busy_until[h] = t + report.cost_ns;
        // Its own transmissions became network events already; decide when
        // this endpoint next needs the CPU.
        let more_now = report.rx_saturated
            || self.net.rx_pending(host) > 0
            || self.net.mgmt_pending(host) > 0;
        if more_now {
            let at = self.busy_until[h];
            self.schedule_poll(host, at);
        } else if let Some(d) = report.next_deadline_ns {
            let at = d.max(self.busy_until[h]);
            self.schedule_poll(host, at);
        }
    }

    /// Advance until `stop(rpcs)` is true, no work remains, or the virtual
    /// clock would pass `t_limit`. Returns the final virtual time.
    pub fn run_until(
        &mut self,
        t_limit: u64,
        mut stop: impl FnMut(&[Rpc<SimTransport>]) -> bool,
    ) -> u64 {
        loop {
            if stop(&self.rpcs) {
                return self.now;
            }
            let t_net = self.net.next_event_time();
            let t_poll = self.peek_poll();
            let (t, net_first) = match (t_net, t_poll) {
                (None, None) => return self.now,
                (Some(a), None) => (a, true),
                (None, Some(b)) => (b, false),
                // Network events land before polls at the same instant, so a
                // poll at t sees everything that arrived at t.
                (Some(a), Some(b)) => {
                    if a <= b {
                        (a, true)
                    } else {
                        (b, false)
                    }
                }
            };
            if t > t_limit {
                return self.now;
            }
            self.now = t;
            if net_first {
                self.net.advance_one();
                for (at, h) in self.net.take_woken() {
                    if !self.net.is_dead(h) {
                        let t_run = at.max(self.busy_until[h as usize]);
                        self.schedule_poll(h, t_run);
                    }
                }
            } else {
                let Reverse((tp, host)) = self.poll_heap.pop().expect("validated peek");
                debug_assert_eq!(tp, t);
                self.poll_at[host as usize] = None;
                self.service_host(host, t);
            }
        }
    }

    /// Run for `dur_ns` of virtual time (or until idle).
    pub fn run_for(&mut self, dur_ns: u64) -> u64 {
        let limit = self.now + dur_ns;
        self.run_until(limit, |_| false)
    }
}
