//! Message buffers and the bit-exact packet header codec.
//!
//! A [`MsgBuf`] holds one message and every per-packet header needed to put
//! that message on the wire, in a single allocation:
//!
//! ```text
//! +----------+----------------------------------+----------+-----+------------+
//! | header 0 |  application data (contiguous)   | header 1 | ... | header N-1 |
//! +----------+----------------------------------+----------+-----+------------+
//! 0          16                       16+capacity
//! ```
//!
//! Header 0 immediately precedes byte 0 of the data, so the first packet
//! (header + payload) is one contiguous byte range and can be transmitted
//! without gathering. Headers for the remaining packets live past the end of
//! the data region; packet `i`'s payload is the `i`-th MTU-sized chunk of the
//! data. Shrinking `data_size` never moves the start of the data region.
//!
//! [`PacketHeader`] is the 16-byte wire header carried by every packet,
//! including the header-only credit-return and request-for-response packets.

use crate::error::{Error, Result, MAX_MSG_SIZE};

/// Serialized size of a [`PacketHeader`] in bytes.
pub const HDR_SIZE: usize = 16;

/// Default per-packet application payload (fits a UDP datagram with headroom
/// on 1500-MTU paths).
pub const DEFAULT_MTU_DATA: usize = 1408;

/// Wire protocol version stamped into every packet we send.
pub const PROTO_VERSION: u8 = 1;

/// Flag bit 0: this response reports a handler/endpoint error.
pub const FLAG_ERROR_RESPONSE: u16 = 1;

/// The four packet types of the wire protocol.
///
/// Credit returns and request-for-response packets consist of the header
/// only; their total wire size is exactly [`HDR_SIZE`] bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum PktType {
    /// Request data packet (client -> server).
    ReqData = 0,
    /// Response data packet (server -> client).
    RespData = 1,
    /// Explicit credit return for one request packet (server -> client).
    CreditReturn = 2,
    /// Request for one more response packet (client -> server).
    RequestForResponse = 3,
}

impl PktType {
    pub fn from_nibble(n: u8) -> Result<Self> {
        match n {
            0 => Ok(PktType::ReqData),
            1 => Ok(PktType::RespData),
            2 => Ok(PktType::CreditReturn),
            3 => Ok(PktType::RequestForResponse),
            other => Err(Error::UnknownPktType(other)),
        }
    }
}

/// The 16-byte packet header, one per wire packet.
///
/// Layout (little-endian, byte offsets):
///
/// ```text
/// 0        1         2..3         4..5     6..7    8..11     12..15
/// ver|type  req_type  session_num  pkt_num  flags   req_num   msg_size
/// ```
///
/// Byte 0 packs `version` in the low nibble and the packet type in the high
/// nibble. `pkt_num` is the packet's index within its message; for a credit
/// return it is the index of the request packet being credited, and for a
/// request-for-response it is the index of the response packet requested.
/// `req_num` increases per slot, with `req_num % num_slots` naming the slot.
/// `msg_size` is the total application payload of the message this packet
/// belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub version: u8, // 4 bits
    pub pkt_type: PktType,
    pub req_type: u8,
    pub session_num: u16,
    pub pkt_num: u16,
    pub flags: u16,
    pub req_num: u32,
    pub msg_size: u32,
}

impl PacketHeader {
    pub fn new(pkt_type: PktType, req_type: u8, session_num: u16) -> Self {
        PacketHeader {
            version: PROTO_VERSION,
            pkt_type,
            req_type,
            session_num,
            pkt_num: 0,
            flags: 0,
            req_num: 0,
            msg_size: 0,
        }
    }

    /// Serialize to the 16-byte wire form.
    pub fn pack(&self) -> [u8; HDR_SIZE] {
        debug_assert!(self.version <= 0xF);
        debug_assert!(self.msg_size as usize <= MAX_MSG_SIZE);
        let mut b = [0u8; HDR_SIZE];
        b[0] = (self.version & 0xF) | ((self.pkt_type as u8) << 4);
        b[1] = self.req_type;
        b[2..4].copy_from_slice(&self.session_num.to_le_bytes());
        b[4..6].copy_from_slice(&self.pkt_num.to_le_bytes());
        b[6..8].copy_from_slice(&self.flags.to_le_bytes());
        b[8..12].copy_from_slice(&self.req_num.to_le_bytes());
        b[12..16].copy_from_slice(&self.msg_size.to_le_bytes());
        b
    }

    /// Parse the 16-byte wire form. Rejects short/long input, unknown packet
    /// type nibbles, and msg_size beyond the supported maximum.
    pub fn unpack(b: &[u8]) -> Result<Self> {
        if b.len() != HDR_SIZE {
            return Err(Error::Codec("header must be exactly 16 bytes"));
        }
        let pkt_type = PktType::from_nibble(b[0] >> 4)?;
        let msg_size = u32::from_le_bytes([b[12], b[13], b[14], b[15]]);
        if msg_size as usize > MAX_MSG_SIZE {
            return Err(Error::Codec("msg_size exceeds supported maximum"));
        }
        Ok(PacketHeader {
            version: b[0] & 0xF,
            pkt_type,
            req_type: b[1],
            session_num: u16::from_le_bytes([b[2], b[3]]),
            pkt_num: u16::from_le_bytes([b[4], b[5]]),
            flags: u16::from_le_bytes([b[6], b[7]]),
            req_num: u32::from_le_bytes([b[8], b[9], b[10], b[11]]),
            msg_size,
        })
    }
}

/// Number of packets a payload of `data_size` bytes occupies at `mtu_data`
/// bytes per packet. Zero-byte messages still use one (header-only) packet.
pub fn num_pkts_for(data_size: usize, mtu_data: usize) -> usize {
    debug_assert!(mtu_data >= 1);
    std::cmp::max(1, data_size.div_ceil(mtu_data))
}

fn next_msgbuf_id() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static NEXT: AtomicU64 = AtomicU64::new(1);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

/// A message buffer: contiguous application data plus per-packet header
/// slots, in one allocation (see module docs for the layout).
///
/// Every msgbuf carries a process-unique `id`, used by the transmit path to
/// audit that no queue still references a buffer when its owner reclaims it.
#[derive(Debug)]
pub struct MsgBuf {
    buf: Box<[u8]>,
    capacity: usize,
    data_size: usize,
    mtu_data: usize,
    max_pkts: usize,
    id: u64,
}

impl MsgBuf {
    /// Allocate a msgbuf able to hold up to `data_capacity` bytes of
    /// application data segmented at `mtu_data` bytes per packet. The backing
    /// allocation is `16 * N + data_capacity` bytes where
    /// `N = ceil(data_capacity / mtu_data)`.
    pub fn alloc(data_capacity: usize, mtu_data: usize) -> Result<Self> {
        if data_capacity == 0 || data_capacity > MAX_MSG_SIZE {
            return Err(Error::SizeOutOfRange { got: data_capacity });
        }
        if mtu_data == 0 {
            return Err(Error::Config("mtu_data must be >= 1".into()));
        }
        let max_pkts = num_pkts_for(data_capacity, mtu_data);
        let backing = HDR_SIZE * max_pkts + data_capacity;
        MsgBuf {
            buf: vec![0u8; backing].into_boxed_slice(),
            capacity: data_capacity,
            data_size: data_capacity,
            mtu_data,
            max_pkts,
            id: next_msgbuf_id(),
        }
        .into_ok()
    }

    /// Allocate and fill with `bytes` (data_size = bytes.len()).
    pub fn from_bytes(bytes: &[u8], mtu_data: usize) -> Result<Self> {
        let mut m = MsgBuf::alloc(bytes.len().max(1), mtu_data)?;
        m.set_data_size(bytes.len())?;
        m.data_mut()[..bytes.len()].copy_from_slice(bytes);
        Ok(m)
    }

    fn into_ok(self) -> Result<Self> {
        // Layout sanity: regions must tile the backing without overlap.
        debug_assert!(self.hdr_offset(0) == 0);
        debug_assert!(self.data_offset() == HDR_SIZE);
        Ok(self)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn mtu_data(&self) -> usize {
        self.mtu_data
    }

    /// Current message length in bytes.
    pub fn data_size(&self) -> usize {
        self.data_size
    }

    /// Set the message length. Growing beyond capacity is an error; shrinking
    /// never moves the data region.
    pub fn set_data_size(&mut self, n: usize) -> Result<()> {
        if n > self.capacity {
            return Err(Error::SizeOutOfRange { got: n });
        }
        self.data_size = n;
        Ok(())
    }

    /// Packets in the current message.
    pub fn num_pkts(&self) -> usize {
        num_pkts_for(self.data_size, self.mtu_data)
    }

    fn data_offset(&self) -> usize {
        HDR_SIZE
    }

    fn hdr_offset(&self, i: usize) -> usize {
        debug_assert!(i < self.max_pkts);
        if i == 0 {
            0
        } else {
            HDR_SIZE + self.capacity + (i - 1) * HDR_SIZE
        }
    }

    /// The whole message payload.
    pub fn data(&self) -> &[u8] {
        &self.buf[HDR_SIZE..HDR_SIZE + self.data_size]
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.buf[HDR_SIZE..HDR_SIZE + self.data_size]
    }

    /// Payload placement of packet `i`: `(offset, length)` within the data
    /// region. Every packet covers `mtu_data` bytes except the last, which
    /// covers the remainder.
    pub fn pkt_data_range(&self, i: usize) -> Result<(usize, usize)> {
        let n = self.num_pkts();
        if i >= n {
            return Err(Error::Invalid(format!(
                "packet index {i} out of range for {n}-packet message"
            )));
        }
        let offset = i * self.mtu_data;
        let len = if i + 1 == n {
            self.data_size - offset
        } else {
            self.mtu_data
        };
        Ok((offset, len))
    }

    /// Payload bytes of packet `i`.
    pub fn pkt_data(&self, i: usize) -> &[u8] {
        let (off, len) = self.pkt_data_range(i).expect("packet index in range");
        &self.buf[HDR_SIZE + off..HDR_SIZE + off + len]
    }

    pub fn pkt_data_mut(&mut self, i: usize) -> &mut [u8] {
        let (off, len) = self.pkt_data_range(i).expect("packet index in range");
        &mut self.buf[HDR_SIZE + off..HDR_SIZE + off + len]
    }

    /// Write packet `i`'s wire header into its in-buffer slot.
    pub fn write_pkt_header(&mut self, i: usize, h: &PacketHeader) {
        let off = self.hdr_offset(i);
        self.buf[off..off + HDR_SIZE].copy_from_slice(&h.pack());
    }

    /// Packet `i`'s in-buffer header slot.
    pub fn hdr_bytes(&self, i: usize) -> &[u8] {
        let off = self.hdr_offset(i);
        &self.buf[off..off + HDR_SIZE]
    }

    /// Full wire packet `i` (header then payload) as byte vector. Packet 0 is
    /// copied out of one contiguous range; later packets gather their header
    /// slot and payload chunk.
    pub fn wire_pkt(&self, i: usize) -> Vec<u8> {
        let (off, len) = self.pkt_data_range(i).expect("packet index in range");
        if i == 0 {
            // Header 0 is adjacent to byte 0 of data: single contiguous copy.
            self.buf[0..HDR_SIZE + len].to_vec()
        } else {
            let mut v = Vec::with_capacity(HDR_SIZE + len);
            v.extend_from_slice(self.hdr_bytes(i));
            v.extend_from_slice(&self.buf[HDR_SIZE + off..HDR_SIZE + off + len]);
            v
        }
    }

    /// Wire size of packet `i` in bytes (header + payload).
    pub fn wire_len(&self, i: usize) -> usize {
        let (_, len) = self.pkt_data_range(i).expect("packet index in range");
        HDR_SIZE + len
    }
}
