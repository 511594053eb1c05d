//! Unreliable datagram transport abstraction.
//!
//! A [`Transport`] moves individual packets (16-byte header plus up to
//! `mtu_data` payload bytes) between endpoints with no delivery, ordering,
//! or duplication guarantees on the data path. Alongside the data path it
//! carries a small *management channel* — reliable and in-order — used for
//! session handshakes and heartbeats only.
//!
//! Receive-side buffers follow NIC descriptor semantics: the transport owns a
//! fixed number of receive descriptors ([`RxRing`]); a packet arriving while
//! no descriptor is free is dropped (and counted). Buffers handed to the
//! protocol layer stay checked out until [`Transport::release_rx`] returns
//! the descriptor.
//!
//! Transmit entries may reference a caller-owned [`MsgBuf`] instead of
//! carrying copied bytes; [`Transport::flush_tx`] forces every queued entry
//! to release such references (the transmit path keeps its own copy), which
//! the retransmission logic relies on before it can ever hand a buffer back
//! to the application.

use std::cell::RefCell;
use std::collections::{HashSet, VecDeque};
use std::rc::Rc;

use crate::mgmt::MgmtFrame;
use crate::msgbuf::{MsgBuf, PacketHeader, HDR_SIZE};

/// Identifies one RPC endpoint for routing: a host and a queue on that host.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EndpointId {
    pub host: u16,
    pub queue: u16,
}

impl EndpointId {
    pub fn new(host: u16, queue: u16) -> Self {
        EndpointId { host, queue }
    }
}

impl std::fmt::Display for EndpointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.host, self.queue)
    }
}

/// Payload of an outgoing packet.
///
/// `Msgbuf` entries hold a reference to the owning buffer and are serialized
/// at transmission time (zero copy until the wire); `Owned` entries carry
/// their bytes. Header-only packets use `None`.
#[derive(Debug, Clone)]
pub enum TxPayload {
    None,
    Owned(Vec<u8>),
    Msgbuf { buf: Rc<RefCell<MsgBuf>>, pkt_idx: u16 },
}

impl TxPayload {
    /// Length in bytes of the payload part.
    pub fn len(&self) -> usize {
        match self {
            TxPayload::None => 0,
            TxPayload::Owned(v) => v.len(),
            TxPayload::Msgbuf { buf, pkt_idx } => {
                let b = buf.borrow();
                let (_, len) = b.pkt_data_range(*pkt_idx as usize).expect("pkt in range");
                len
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Id of the referenced msgbuf, if this payload still holds a reference.
    pub fn msgbuf_id(&self) -> Option<u64> {
        match self {
            TxPayload::Msgbuf { buf, .. } => Some(buf.borrow().id()),
            _ => None,
        }
    }

    /// Copy the payload bytes out, dropping any msgbuf reference.
    pub fn materialize(&mut self) {
        if let TxPayload::Msgbuf { buf, pkt_idx } = self {
            let bytes = buf.borrow().pkt_data(*pkt_idx as usize).to_vec();
            *self = TxPayload::Owned(bytes);
        }
    }

    /// Payload bytes (copies msgbuf-referenced payloads).
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            TxPayload::None => Vec::new(),
            TxPayload::Owned(v) => v.clone(),
            TxPayload::Msgbuf { buf, pkt_idx } => buf.borrow().pkt_data(*pkt_idx as usize).to_vec(),
        }
    }
}

/// One packet queued for transmission.
#[derive(Debug, Clone)]
pub struct TxPacket {
    pub to: EndpointId,
    pub hdr: PacketHeader,
    pub payload: TxPayload,
}

impl TxPacket {
    /// Total wire size: header plus payload.
    pub fn wire_len(&self) -> usize {
        HDR_SIZE + self.payload.len()
    }

    /// Serialize header + payload into one datagram.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.wire_len());
        v.extend_from_slice(&self.hdr.pack());
        match &self.payload {
            TxPayload::None => {}
            TxPayload::Owned(b) => v.extend_from_slice(b),
            TxPayload::Msgbuf { buf, pkt_idx } => {
                v.extend_from_slice(buf.borrow().pkt_data(*pkt_idx as usize))
            }
        }
        v
    }
}

/// One received packet, holding a checked-out receive descriptor.
#[derive(Debug)]
pub struct RxPacket {
    pub from: EndpointId,
    /// Descriptor token; must be given back via [`Transport::release_rx`].
    pub desc: u64,
    /// Full wire packet: 16-byte header, then payload.
    pub bytes: Vec<u8>,
    /// Arrival timestamp (virtual ns in sim, monotonic ns over UDP).
    pub rx_ts: u64,
}

/// Fixed-capacity receive descriptor ring with drop-on-empty semantics.
#[derive(Debug)]
pub struct RxRing {
    capacity: usize,
    free: usize,
    pending: VecDeque<RxPacket>,
    checked_out: HashSet<u64>,
    next_desc: u64,
    dropped: u64,
}

impl RxRing {
    pub fn new(capacity: usize) -> Self {
        RxRing {
            capacity,
            free: capacity,
            pending: VecDeque::new(),
            checked_out: HashSet::new(),
            next_desc: 0,
            dropped: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_descs(&self) -> usize {
        self.free
    }

    /// Packets delivered but not yet polled.
    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Count of arrivals dropped because no descriptor was free.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Offer an arriving packet. Consumes a descriptor on success; counts a
    /// drop (and discards the packet) when the ring is empty.
    pub fn offer(&mut self, from: EndpointId, bytes: Vec<u8>, rx_ts: u64) -> bool {
        if self.free == 0 {
            self.dropped += 1;
            return false;
        }
        self.free -= 1;
        let desc = self.next_desc;
        self.next_desc += 1;
        self.checked_out.insert(desc);
        self.pending.push_back(RxPacket {
            from,
            desc,
            bytes,
            rx_ts,
        });
        true
    }

    /// Poll up to `max` delivered packets.
    pub fn poll(&mut self, max: usize) -> Vec<RxPacket> {
        let n = max.min(self.pending.len());
        self.pending.drain(..n).collect()
    }

    /// Return a descriptor. Double release is a logic error.
    pub fn release(&mut self, desc: u64) {
        let was_out = self.checked_out.remove(&desc);
        assert!(was_out, "descriptor {desc} released twice (or never issued)");
        self.free += 1;
        debug_assert!(self.free <= self.capacity);
    }
}

/// The datagram transport driven by an RPC endpoint's event loop.
///
/// All methods are non-blocking; time is supplied by the caller, never read
/// internally (the simulator runs endpoints on virtual time).
pub trait Transport {
    fn local_id(&self) -> EndpointId;

    /// Per-packet application payload budget.
    fn mtu_data(&self) -> usize;

    /// Queue packets for transmission. Ordering within a burst is preserved
    /// by the transmit path; delivery is not guaranteed. Returns the number
    /// accepted (always all of them for the provided implementations).
    fn tx_burst(&mut self, pkts: Vec<TxPacket>) -> usize;

    /// Poll up to `max` received packets.
    fn rx_burst(&mut self, max: usize) -> Vec<RxPacket>;

    /// Return one receive descriptor obtained via [`Transport::rx_burst`].
    fn release_rx(&mut self, desc: u64);

    /// Release every msgbuf reference held by the local transmit queue; the
    /// queue keeps its own copies and transmission timing is unchanged.
    fn flush_tx(&mut self);

    /// True while the local transmit queue still references the given msgbuf.
    fn tx_holds_msgbuf(&self, id: u64) -> bool;

    /// Send a frame on the reliable, in-order management channel.
    fn mgmt_send(&mut self, to: EndpointId, frame: MgmtFrame);

    /// Poll the management channel.
    fn mgmt_recv(&mut self) -> Option<(EndpointId, MgmtFrame)>;

    /// Packets dropped on arrival because the receive queue was empty.
    fn rq_empty_drops(&self) -> u64;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pkt(n: u64) -> Vec<u8> {
        vec![n as u8; 16]
    }

    #[test]
    fn ring_drops_when_empty_and_recovers_on_release() {
        let mut ring = RxRing::new(2);
        let from = EndpointId::new(0, 0);
        assert!(ring.offer(from, pkt(1), 10));
        assert!(ring.offer(from, pkt(2), 11));
        // No free descriptors: dropped and counted.
        assert!(!ring.offer(from, pkt(3), 12));
        assert_eq!(ring.dropped(), 1);

        let got = ring.poll(16);
        assert_eq!(got.len(), 2);
        // Still checked out: arrivals keep dropping.
        assert!(!ring.offer(from, pkt(4), 13));
        assert_eq!(ring.dropped(), 2);

        ring.release(got[0].desc);
        assert!(ring.offer(from, pkt(5), 14));
        assert_eq!(ring.free_descs(), 0);
    }

    #[test]
    #[should_panic(expected = "released twice")]
    fn double_release_asserts() {
        let mut ring = RxRing::new(1);
        ring.offer(EndpointId::new(0, 0), pkt(1), 0);
        let got = ring.poll(1);
        ring.release(got[0].desc);
        ring.release(got[0].desc);
    }

    #[test]
    fn with_capacity_r_at_most_r_delivered_without_release() {
        let mut ring = RxRing::new(8);
        let from = EndpointId::new(1, 0);
        for i in 0..100 {
            ring.offer(from, pkt(i), i);
        }
        let mut delivered = ring.poll(100).len();
        for i in 100..200 {
            ring.offer(from, pkt(i), i);
        }
        delivered += ring.poll(100).len();
        assert_eq!(delivered, 8);
        assert_eq!(ring.dropped(), 192);
    }

    #[test]
    fn tx_payload_materialize_drops_reference() {
        let m = MsgBuf::from_bytes(&[9u8; 100], 64).unwrap();
        let id = m.id();
        let rc = Rc::new(RefCell::new(m));
        let mut p = TxPayload::Msgbuf {
            buf: rc.clone(),
            pkt_idx: 1,
        };
        assert_eq!(p.msgbuf_id(), Some(id));
        assert_eq!(p.len(), 36);
        p.materialize();
        assert_eq!(p.msgbuf_id(), None);
        assert_eq!(p.to_bytes(), vec![9u8; 36]);
        assert_eq!(Rc::strong_count(&rc), 1);
    }
}
