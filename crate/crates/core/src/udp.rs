//! UDP socket transport: one datagram per packet, header first, then data
//! bytes. Exists for end-to-end sanity runs on real sockets; quantitative
//! experiments use the simulated transport, where time is virtual and
//! reproducible.
//!
//! The management channel rides the same socket as a distinct frame family
//! (`0xEE` tag, which can never collide with a data header's version nibble)
//! and gets reliability from a per-peer stop-and-wait: each frame carries a
//! sequence number, is resent every 20 ms until acked, and the receiver
//! delivers strictly in order, re-acking duplicates.

use std::collections::{HashMap, VecDeque};
use std::net::{SocketAddr, UdpSocket};
use std::sync::OnceLock;
use std::time::Instant;

use crate::error::Result;
use crate::mgmt::MgmtFrame;
use crate::msgbuf::HDR_SIZE;
use crate::transport::{EndpointId, RxRing, Transport, TxPacket};

/// Tag byte opening every management datagram. Data headers carry the wire
/// version in their low nibble, so their first byte can never be `0xEE`.
const MGMT_TAG: u8 = 0xEE;
const MGMT_MSG: u8 = 0;
const MGMT_ACK: u8 = 1;
/// Stop-and-wait retry interval.
const MGMT_RESEND_NS: u64 = 20_000_000;
/// Give up on a frame after this many sends (the failure detector owns
/// liveness; the channel only has to be reliable while the peer is up).
const MGMT_MAX_SENDS: u32 = 250;
/// Outbound management frames queued per peer before new ones are shed.
const MGMT_QUEUE_CAP: usize = 64;

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// Monotonic wall-clock nanoseconds on the process-wide epoch shared by all
/// UDP transports; pass this to the endpoint's event loop.
pub fn wall_now_ns() -> u64 {
    epoch().elapsed().as_nanos() as u64
}

struct PeerChannel {
    addr: SocketAddr,
    /// Frames awaiting their turn; front is in flight once sent.
    outbox: VecDeque<Vec<u8>>,
    next_tx_seq: u32,
    /// Sequence the front-of-queue frame was sent with, plus resend state.
    inflight: Option<(u32, u64, u32)>, // (seq, resend_at_ns, sends)
    /// Next sequence we will accept from this peer.
    next_rx_seq: u32,
}

impl PeerChannel {
    fn new(addr: SocketAddr) -> Self {
        PeerChannel {
            addr,
            outbox: VecDeque::new(),
            next_tx_seq: 0,
            inflight: None,
            next_rx_seq: 0,
        }
    }
}

/// Datagram transport over a nonblocking UDP socket.
///
/// Peers must be registered up front ([`UdpTransport::add_peer`]); datagrams
/// from unknown addresses are dropped and counted. Packets are serialized at
/// [`Transport::tx_burst`] time, so the transmit path never retains message
/// buffer references.
pub struct UdpTransport {
    sock: UdpSocket,
    local: EndpointId,
    mtu_data: usize,
    ring: RxRing,
    peers: HashMap<EndpointId, SocketAddr>,
    by_addr: HashMap<SocketAddr, EndpointId>,
    chans: HashMap<EndpointId, PeerChannel>,
    mgmt_inbox: VecDeque<(EndpointId, MgmtFrame)>,
    recv_buf: Vec<u8>,
    /// Datagrams from unregistered sources, malformed datagrams, and sends
    /// without a resolvable destination.
    pub unroutable_drops: u64,
    /// Datagrams the socket refused to accept (would-block, buffer full).
    pub tx_socket_drops: u64,
}

impl UdpTransport {
    /// Bind `addr` (use port 0 for an ephemeral port) as endpoint `local`.
    pub fn bind(addr: SocketAddr, local: EndpointId, mtu_data: usize, rx_ring: usize) -> Result<Self> {
        let sock = UdpSocket::bind(addr)?;
        sock.set_nonblocking(true)?;
        Ok(UdpTransport {
            sock,
            local,
            mtu_data,
            ring: RxRing::new(rx_ring),
            peers: HashMap::new(),
            by_addr: HashMap::new(),
            chans: HashMap::new(),
            mgmt_inbox: VecDeque::new(),
            recv_buf: vec![0u8; (mtu_data + HDR_SIZE).max(2048)],
            unroutable_drops: 0,
            tx_socket_drops: 0,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.sock.local_addr()?)
    }

    /// Register the socket address for a remote endpoint id.
    pub fn add_peer(&mut self, id: EndpointId, addr: SocketAddr) {
        self.peers.insert(id, addr);
        self.by_addr.insert(addr, id);
        self.chans.entry(id).or_insert_with(|| PeerChannel::new(addr));
    }

    /// Monotonic now on the shared epoch (same timebase as [`wall_now_ns`]).
    pub fn now_ns(&self) -> u64 {
        wall_now_ns()
    }

    fn send_raw(&mut self, addr: SocketAddr, bytes: &[u8]) {
        match self.sock.send_to(bytes, addr) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => self.tx_socket_drops += 1,
            Err(_) => self.tx_socket_drops += 1,
        }
    }

    /// Drive the stop-and-wait: (re)send the head frame of each peer channel
    /// when due, dropping frames that exhausted their send budget.
    fn pump_mgmt(&mut self) {
        let now = wall_now_ns();
        let ids: Vec<EndpointId> = self.chans.keys().copied().collect();
        for id in ids {
            loop {
                let ch = self.chans.get_mut(&id).unwrap();
                let Some(front) = ch.outbox.front() else { break };
                match ch.inflight {
                    Some((_, resend_at, _)) if now < resend_at => break,
                    Some((seq, _, sends)) if sends >= MGMT_MAX_SENDS => {
                        // Shed the frame; liveness handling is above us.
                        ch.outbox.pop_front();
                        ch.inflight = None;
                        let _ = seq;
                        continue;
                    }
                    Some((seq, _, sends)) => {
                        let wire = wrap_mgmt(MGMT_MSG, seq, front);
                        let addr = ch.addr;
                        ch.inflight = Some((seq, now + MGMT_RESEND_NS, sends + 1));
                        self.send_raw(addr, &wire);
                        break;
                    }
                    None => {
                        let seq = ch.next_tx_seq;
                        ch.next_tx_seq = ch.next_tx_seq.wrapping_add(1);
                        let wire = wrap_mgmt(MGMT_MSG, seq, front);
                        let addr = ch.addr;
                        ch.inflight = Some((seq, now + MGMT_RESEND_NS, 1));
                        self.send_raw(addr, &wire);
                        break;
                    }
                }
            }
        }
    }

    /// Drain the socket, routing management frames and ring-buffering data
    /// packets. Bounded per call so one busy peer cannot starve the loop.
    fn drain_socket(&mut self) {
        let now = wall_now_ns();
        for _ in 0..512 {
            let (n, src) = match self.sock.recv_from(&mut self.recv_buf) {
                Ok(v) => v,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                // Loopback can surface ICMP-unreachable as a recv error;
                // treat it as "no packet" and keep draining.
                Err(_) => continue,
            };
            let Some(&from) = self.by_addr.get(&src) else {
                self.unroutable_drops += 1;
                continue;
            };
            let bytes = &self.recv_buf[..n];
            if n >= 6 && bytes[0] == MGMT_TAG {
                let kind = bytes[1];
                let seq = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
                match kind {
                    MGMT_ACK => {
                        let ch = self.chans.get_mut(&from).expect("registered peer");
                        if let Some((inflight_seq, _, _)) = ch.inflight {
                            if inflight_seq == seq {
                                ch.outbox.pop_front();
                                ch.inflight = None;
                            }
                        }
                    }
                    MGMT_MSG => {
                        let ack = wrap_mgmt(MGMT_ACK, seq, &[]);
                        let (deliver, addr) = {
                            let ch = self.chans.get_mut(&from).expect("registered peer");
                            let deliver = if seq == ch.next_rx_seq {
                                ch.next_rx_seq = ch.next_rx_seq.wrapping_add(1);
                                true
                            } else {
                                // Duplicate (or future, which stop-and-wait
                                // never produces): re-ack, do not deliver.
                                false
                            };
                            (deliver, ch.addr)
                        };
                        self.send_raw(addr, &ack);
                        if deliver {
                            match MgmtFrame::decode(&self.recv_buf[6..n]) {
                                Ok(f) => self.mgmt_inbox.push_back((from, f)),
                                Err(_) => self.unroutable_drops += 1,
                            }
                        }
                    }
                    _ => self.unroutable_drops += 1,
                }
                continue;
            }
            if n < HDR_SIZE {
                self.unroutable_drops += 1;
                continue;
            }
            self.ring.offer(from, bytes.to_vec(), now);
        }
    }
}

fn wrap_mgmt(kind: u8, seq: u32, frame: &[u8]) -> Vec<u8> {
    let mut v = Vec::with_capacity(6 + frame.len());
    v.push(MGMT_TAG);
    v.push(kind);
    v.extend_from_slice(&seq.to_le_bytes());
    v.extend_from_slice(frame);
    v
}

impl Transport for UdpTransport {
    fn local_id(&self) -> EndpointId {
        self.local
    }

    fn mtu_data(&self) -> usize {
        self.mtu_data
    }

    fn tx_burst(&mut self, pkts: Vec<TxPacket>) -> usize {
        let mut sent = 0;
        for p in pkts {
            let Some(&addr) = self.peers.get(&p.to) else {
                self.unroutable_drops += 1;
                continue;
            };
            let wire = p.to_wire();
            self.send_raw(addr, &wire);
            sent += 1;
        }
        sent
    }

    fn rx_burst(&mut self, max: usize) -> Vec<crate::transport::RxPacket> {
        self.drain_socket();
        self.ring.poll(max)
    }

    fn release_rx(&mut self, desc: u64) {
        self.ring.release(desc);
    }

    fn flush_tx(&mut self) {
        // Packets are serialized and handed to the socket at tx_burst time;
        // nothing in the transmit path ever references a message buffer.
    }

    fn tx_holds_msgbuf(&self, _id: u64) -> bool {
        false
    }

    fn mgmt_send(&mut self, to: EndpointId, frame: MgmtFrame) {
        let Some(ch) = self.chans.get_mut(&to) else {
            self.unroutable_drops += 1;
            return;
        };
        if ch.outbox.len() >= MGMT_QUEUE_CAP {
            self.unroutable_drops += 1;
            return;
        }
        ch.outbox.push_back(frame.encode());
        self.pump_mgmt();
    }

    fn mgmt_recv(&mut self) -> Option<(EndpointId, MgmtFrame)> {
        if self.mgmt_inbox.is_empty() {
            self.drain_socket();
        }
        self.pump_mgmt();
        self.mgmt_inbox.pop_front()
    }

    fn rq_empty_drops(&self) -> u64 {
        self.ring.dropped()
    }
}
