//! Deterministic discrete-event network: hosts with NIC receive rings,
//! full-duplex links, and one shared-buffer switch.
//!
//! The model is a single-switch star. Every host connects to the switch by a
//! full-duplex link with a fixed rate and propagation delay. The switch is
//! store-and-forward with a fixed per-packet forwarding latency and one
//! dynamic buffer pool shared by all output ports: an arriving packet that
//! does not fit in the pool is dropped (and counted); a buffered packet
//! occupies the pool until its last bit has been serialized onto the output
//! link. Random per-link loss is drawn from per-link seeded streams, so a
//! fixed seed yields a bit-identical event history regardless of unrelated
//! configuration changes.
//!
//! Time is virtual nanoseconds. Events with equal timestamps are processed
//! in insertion order. Endpoints interact with the network through
//! [`SimTransport`], which implements [`Transport`] against the shared state;
//! the companion [`runner`] module schedules endpoint event-loop polls on the
//! same virtual clock.

pub mod runner;
pub mod scenario;

use std::cell::RefCell;
use std::collections::{BinaryHeap, VecDeque};
use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mgmt::MgmtFrame;
use crate::msgbuf::HDR_SIZE;
use crate::transport::{EndpointId, RxPacket, RxRing, Transport, TxPacket};

/// Star-topology network parameters.
#[derive(Debug, Clone)]
pub struct NetConfig {
    /// Hosts attached to the switch.
    pub hosts: usize,
    /// Per-link rate, bits per second (each direction).
    pub link_bps: f64,
    /// One-way propagation delay per link, ns.
    pub prop_ns: u64,
    /// Per-packet switch forwarding latency, ns.
    pub switch_latency_ns: u64,
    /// Shared switch buffer pool, bytes.
    pub switch_buf_bytes: usize,
    /// Per-host NIC receive-ring descriptors.
    pub rx_ring: usize,
    /// Independent per-packet loss probability, applied on each link
    /// traversal (once on the uplink, once on the downlink).
    pub loss: f64,
    /// Seed for every random stream in the network.
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        // 25 Gbps links and ~6 µs base RTT; the switch pool is far larger
        // than one flow's credit window, so uncongested traffic never drops.
        NetConfig {
            hosts: 2,
            link_bps: 25e9,
            prop_ns: 1_300,
            switch_latency_ns: 500,
            switch_buf_bytes: 12 << 20,
            rx_ring: 1024,
            loss: 0.0,
            seed: 1,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hosts < 2 || self.hosts > u16::MAX as usize {
            return Err(Error::Config(format!(
                "hosts must be in 2..=65535, got {}",
                self.hosts
            )));
        }
        if !(self.link_bps > 0.0) {
            return Err(Error::Config("link_bps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(Error::Config(format!("loss must be in [0,1), got {}", self.loss)));
        }
        if self.rx_ring == 0 {
            return Err(Error::Config("rx_ring must be >= 1".into()));
        }
        if self.switch_buf_bytes == 0 {
            return Err(Error::Config("switch_buf_bytes must be >= 1".into()));
        }
        Ok(())
    }

    /// Parse a plain-text key/value topology description: one `key value` or
    /// `key=value` pair per line, `#` comments. Unknown keys are errors;
    /// omitted keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = NetConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => match line.split_once(char::is_whitespace) {
                    Some((k, v)) => (k.trim(), v.trim()),
                    None => {
                        return Err(Error::Config(format!(
                            "line {}: expected `key value`, got {line:?}",
                            lineno + 1
                        )))
                    }
                },
            };
            let bad = |e: &dyn std::fmt::Display| {
                Error::Config(format!("line {}: bad value for {key}: {e}", lineno + 1))
            };
            match key {
                "hosts" => cfg.hosts = val.parse().map_err(|e| bad(&e))?,
                "link_bps" => cfg.link_bps = val.parse().map_err(|e| bad(&e))?,
                "prop_ns" => cfg.prop_ns = val.parse().map_err(|e| bad(&e))?,
                "switch_latency_ns" => cfg.switch_latency_ns = val.parse().map_err(|e| bad(&e))?,
                "switch_buf_bytes" => cfg.switch_buf_bytes = val.parse().map_err(|e| bad(&e))?,
                "rx_ring" => cfg.rx_ring = val.parse().map_err(|e| bad(&e))?,
                "loss" => cfg.loss = val.parse().map_err(|e| bad(&e))?,
                "seed" => cfg.seed = val.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Config(format!("unknown topology key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Base network round trip for a `req_bytes` request packet and a
    /// `resp_bytes` response packet, without queueing: serialization on two
    /// links each way, two propagation delays each way, one switch hop each
    /// way.
    pub fn base_rtt_ns(&self, req_wire: usize, resp_wire: usize) -> u64 {
        let ser = |b: usize| ((b as f64) * 8e9 / self.link_bps).ceil() as u64;
        2 * ser(req_wire) + 2 * ser(resp_wire)
            + 4 * self.prop_ns
            + 2 * self.switch_latency_ns
    }
}

/// One datagram transit record; the deterministic trace hashes these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRec {
    /// NIC handoff time at the sender (leg 0) or arrival time at the
    /// destination NIC (leg 1).
    pub t_ns: u64,
    /// 0 = offered by the sending host, 1 = reached the destination NIC.
    /// Lost or switch-dropped packets never produce a leg-1 record.
    pub leg: u8,
    pub from_host: u16,
    pub to_host: u16,
    pub wire_len: u32,
    /// First bytes of the datagram (the packet header).
    pub hdr: [u8; HDR_SIZE],
}

#[derive(Debug)]
enum Event {
    /// Last bit of a packet reached the switch.
    SwitchArrive {
        to: u16,
        from: EndpointId,
        bytes: Vec<u8>,
    },
    /// A buffered packet finished serializing out; its pool bytes free up.
    SwitchFreed { bytes: usize },
    /// Last bit of a packet reached the destination NIC.
    HostArrive {
        to: u16,
        from: EndpointId,
        bytes: Vec<u8>,
    },
    /// Management frame delivery (lossless control plane).
    MgmtArrive {
        to: u16,
        from: EndpointId,
        frame: MgmtFrame,
    },
    /// Fault injection: the host stops polling, transmitting, and receiving.
    KillHost { host: u16 },
}

struct Entry {
    t: u64,
    seq: u64,
    ev: Event,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Inverted: BinaryHeap is a max-heap, we want earliest (t, seq) first.
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

/// Aggregate network counters.
#[derive(Debug, Clone, Copy, Default)]
pub struct NetStats {
    /// Packets handed to NICs by endpoints.
    pub pkts_offered: u64,
    /// Packets fully delivered into a receive ring.
    pub pkts_delivered: u64,
    pub bytes_delivered: u64,
    /// Arrivals rejected by the shared switch pool.
    pub switch_drops: u64,
    /// Packets lost to random link errors (either traversal).
    pub link_loss_drops: u64,
    /// Highest shared-pool occupancy observed, bytes.
    pub pool_peak: usize,
}

struct SimNetInner {
    cfg: NetConfig,
    now: u64,
    events: BinaryHeap<Entry>,
    next_seq: u64,
    uplink_free: Vec<u64>,
    downlink_free: Vec<u64>,
    pool_used: usize,
    rings: Vec<RxRing>,
    mgmt_in: Vec<VecDeque<(EndpointId, MgmtFrame)>>,
    dead: Vec<bool>,
    up_rng: Vec<ChaCha8Rng>,
    down_rng: Vec<ChaCha8Rng>,
    stats: NetStats,
    /// Hosts with fresh arrivals since the last drain, with arrival times.
    woken: Vec<(u64, u16)>,
    trace: Vec<TraceRec>,
    trace_on: bool,
}

fn stream_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over (seed, tag) so per-link streams are independent.
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimNetInner {
    fn new(cfg: NetConfig) -> Self {
        let n = cfg.hosts;
        SimNetInner {
            now: 0,
            events: BinaryHeap::new(),
            next_seq: 0,
            uplink_free: vec![0; n],
            downlink_free: vec![0; n],
            pool_used: 0,
            rings: (0..n).map(|_| RxRing::new(cfg.rx_ring)).collect(),
            mgmt_in: (0..n).map(|_| VecDeque::new()).collect(),
            dead: vec![false; n],
            up_rng: (0..n)
                .map(|h| ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, h as u64 * 2)))
                .collect(),
            down_rng: (0..n)
                .map(|h| ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, h as u64 * 2 + 1)))
                .collect(),
            stats: NetStats::default(),
            woken: Vec::new(),
            trace: Vec::new(),
            trace_on: false,
            cfg,
        }
    }

    fn ser_ns(&self, bytes: usize) -> u64 {
        ((bytes as f64) * 8e9 / self.cfg.link_bps).ceil() as u64
    }

    fn mgmt_latency_ns(&self) -> u64 {
        2 * self.cfg.prop_ns + self.cfg.switch_latency_ns
    }

    fn schedule(&mut self, t: u64, ev: Event) {
        debug_assert!(t >= self.now, "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(Entry { t, seq, ev });
    }

    /// A host NIC accepts one outgoing datagram at the host's current time.
    fn handoff(&mut self, from_host: u16, pkt: &TxPacket) {
        let to = pkt.to.host;
        debug_assert!((to as usize) < self.cfg.hosts, "unknown destination host");
        let bytes = pkt.to_wire();
        self.stats.pkts_offered += 1;
        if self.trace_on {
            let mut hdr = [0u8; HDR_SIZE];
            hdr.copy_from_slice(&bytes[..HDR_SIZE]);
            self.trace.push(TraceRec {
                t_ns: self.now,
                leg: 0,
                from_host,
                to_host: to,
                wire_len: bytes.len() as u32,
                hdr,
            });
        }
        let h = from_host as usize;
        let start = self.now.max(self.uplink_free[h]);
        let done = start + self.ser_ns(bytes.len());
        self.uplink_free[h] = done;
        if self.cfg.loss > 0.0 && self.up_rng[h].gen::<f64>() < self.cfg.loss {
            self.stats.link_loss_drops += 1;
            return;
        }
        let from = EndpointId::new(from_host, pkt_queue_of(from_host));
        self.schedule(
            done + self.cfg.prop_ns,
            Event::SwitchArrive { to, from, bytes },
        );
    }

    fn handoff_mgmt(&mut self, from_host: u16, to: u16, frame: MgmtFrame) {
        let t = self.now + self.mgmt_latency_ns();
        let from = EndpointId::new(from_host, 0);
        self.schedule(t, Event::MgmtArrive { to, from, frame });
    }

    fn next_event_time(&self) -> Option<u64> {
        self.events.peek().map(|e| e.t)
    }

    /// Process the single earliest event. Returns its time.
    fn advance_one(&mut self) -> Option<u64> {
        let Entry { t, ev, .. } = self.events.pop()?;
        debug_assert!(t >= self.now);
        self.now = t;
        match ev {
            Event::SwitchArrive { to, from, bytes } => {
                let len = bytes.len();
                if self.pool_used + len > self.cfg.switch_buf_bytes {
                    self.stats.switch_drops += 1;
                    return Some(t);
                }
                self.pool_used += len;
                self.stats.pool_peak = self.stats.pool_peak.max(self.pool_used);
                let p = to as usize;
                let start = (t + self.cfg.switch_latency_ns).max(self.downlink_free[p]);
                let done = start + self.ser_ns(len);
                self.downlink_free[p] = done;
                self.schedule(done, Event::SwitchFreed { bytes: len });
                if self.cfg.loss > 0.0 && self.down_rng[p].gen::<f64>() < self.cfg.loss {
                    self.stats.link_loss_drops += 1;
                } else {
                    self.schedule(done + self.cfg.prop_ns, Event::HostArrive { to, from, bytes });
                }
            }
            Event::SwitchFreed { bytes } => {
                debug_assert!(self.pool_used >= bytes);
                self.pool_used -= bytes;
            }
            Event::HostArrive { to, from, bytes } => {
                let h = to as usize;
                if self.dead[h] {
                    return Some(t);
                }
                if self.trace_on {
                    let mut hdr = [0u8; HDR_SIZE];
                    hdr.copy_from_slice(&bytes[..HDR_SIZE]);
                    self.trace.push(TraceRec {
                        t_ns: t,
                        leg: 1,
                        from_host: from.host,
                        to_host: to,
                        wire_len: bytes.len() as u32,
                        hdr,
                    });
                }
                let len = bytes.len();
                if self.rings[h].offer(from, bytes, t) {
                    self.stats.pkts_delivered += 1;
                    self.stats.bytes_delivered += len as u64;
                }
                self.woken.push((t, to));
            }
            Event::MgmtArrive { to, from, frame } => {
                let h = to as usize;
                if self.dead[h] {
                    return Some(t);
                }
                self.mgmt_in[h].push_back((from, frame));
                self.woken.push((t, to));
            }
            Event::KillHost { host } => {
                self.dead[host as usize] = true;
            }
        }
        Some(t)
    }
}

fn pkt_queue_of(_host: u16) -> u16 {
    0
}

/// Shared handle to the simulated network.
#[derive(Clone)]
pub struct SimNet {
    inner: Rc<RefCell<SimNetInner>>,
    mtu_data: usize,
}

impl SimNet {
    pub fn new(cfg: NetConfig, mtu_data: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(SimNet {
            inner: Rc::new(RefCell::new(SimNetInner::new(cfg))),
            mtu_data,
        })
    }

    pub fn cfg(&self) -> NetConfig {
        self.inner.borrow().cfg.clone()
    }

    pub fn hosts(&self) -> usize {
        self.inner.borrow().cfg.hosts
    }

    /// The transport for `host`'s NIC queue.
    pub fn transport(&self, host: u16) -> SimTransport {
        assert!((host as usize) < self.hosts(), "host out of range");
        SimTransport {
            net: self.inner.clone(),
            host,
            mtu: self.mtu_data,
        }
    }

    /// Schedule `host` to drop dead at virtual time `t`.
    pub fn kill_host_at(&self, host: u16, t: u64) {
        let mut n = self.inner.borrow_mut();
        assert!((host as usize) < n.cfg.hosts);
        let at = t.max(n.now);
        n.schedule(at, Event::KillHost { host });
    }

    pub fn is_dead(&self, host: u16) -> bool {
        self.inner.borrow().dead[host as usize]
    }

    pub fn now(&self) -> u64 {
        self.inner.borrow().now
    }

    pub fn set_now(&self, t: u64) {
        let mut n = self.inner.borrow_mut();
        debug_assert!(t >= n.now);
        n.now = t;
    }

    pub fn next_event_time(&self) -> Option<u64> {
        self.inner.borrow().next_event_time()
    }

    pub fn advance_one(&self) -> Option<u64> {
        self.inner.borrow_mut().advance_one()
    }

    pub fn take_woken(&self) -> Vec<(u64, u16)> {
        std::mem::take(&mut self.inner.borrow_mut().woken)
    }

    /// Packets delivered to `host` but not yet polled by its endpoint.
    pub fn rx_pending(&self, host: u16) -> usize {
        self.inner.borrow().rings[host as usize].pending_len()
    }

    pub fn mgmt_pending(&self, host: u16) -> usize {
        self.inner.borrow().mgmt_in[host as usize].len()
    }

    pub fn stats(&self) -> NetStats {
        self.inner.borrow().stats
    }

    /// Receive-ring overflow drops summed over all hosts.
    pub fn rq_drops_total(&self) -> u64 {
        let n = self.inner.borrow();
        n.rings.iter().map(|r| r.dropped()).sum()
    }

    /// Record every NIC handoff for later comparison.
    pub fn set_trace(&self, on: bool) {
        self.inner.borrow_mut().trace_on = on;
    }

    pub fn trace_len(&self) -> usize {
        self.inner.borrow().trace.len()
    }

    pub fn trace(&self) -> Vec<TraceRec> {
        self.inner.borrow().trace.clone()
    }

    /// FNV-1a hash of the full handoff trace (times, endpoints, sizes, and
    /// packet headers). Equal hashes mean bit-identical packet histories.
    pub fn trace_hash(&self) -> u64 {
        let n = self.inner.borrow();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for r in &n.trace {
            for b in r.t_ns.to_le_bytes() {
                eat(b);
            }
            eat(r.leg);
            for b in r.from_host.to_le_bytes() {
                eat(b);
            }
            for b in r.to_host.to_le_bytes() {
                eat(b);
            }
            for b in r.wire_len.to_le_bytes() {
                eat(b);
            }
            for &b in &r.hdr {
                eat(b);
            }
        }
        h
    }
}

/// [`Transport`] implementation bound to one simulated host's NIC.
pub struct SimTransport {
    net: Rc<RefCell<SimNetInner>>,
    host: u16,
    mtu: usize,
}

impl Transport for SimTransport {
    fn local_id(&self) -> EndpointId {
        EndpointId::new(self.host, 0)
    }

    fn mtu_data(&self) -> usize {
        self.mtu
    }

    fn tx_burst(&mut self, pkts: Vec<TxPacket>) -> usize {
        let mut net = self.net.borrow_mut();
        let n = pkts.len();
        for p in &pkts {
            net.handoff(self.host, p);
        }
        n
    }

    fn rx_burst(&mut self, max: usize) -> Vec<RxPacket> {
        self.net.borrow_mut().rings[self.host as usize].poll(max)
    }

    fn release_rx(&mut self, desc: u64) {
        self.net.borrow_mut().rings[self.host as usize].release(desc);
    }

    fn flush_tx(&mut self) {}

    fn tx_holds_msgbuf(&self, _id: u64) -> bool {
        // The NIC copies datagrams at handoff; no references survive it.
        false
    }

    fn mgmt_send(&mut self, to: EndpointId, frame: MgmtFrame) {
        self.net.borrow_mut().handoff_mgmt(self.host, to.host, frame);
    }

    fn mgmt_recv(&mut self) -> Option<(EndpointId, MgmtFrame)> {
        self.net.borrow_mut().mgmt_in[self.host as usize].pop_front()
    }

    fn rq_empty_drops(&self) -> u64 {
        self.net.borrow().rings[self.host as usize].dropped()
    }
}
