//! The client-driven wire protocol engine.
//!
//! Every packet the server sends is an answer to one client packet: request
//! data packets are answered by explicit credit returns (all but the last),
//! the last request packet is answered — possibly much later — by the first
//! response packet (which carries that packet's credit implicitly), and every
//! further response packet is solicited by one request-for-response (RFR)
//! from the client. Consequently only the client holds state that loss
//! recovery must roll back.
//!
//! Loss recovery is go-back-N with a fixed retransmission timeout: the client
//! rolls its transmit counters back to the last point the server provably
//! received (packets covered by credit returns / response packets), reclaims
//! the credits of everything beyond it, and re-sends from there. Both sides
//! drop out-of-order packets instead of buffering them, and the server never
//! runs a request handler twice for the same request number: duplicates of
//! already-processed packets are answered idempotently (re-issued credit
//! return or re-sent response packet zero) or silently ignored while the
//! handler is still executing.
//!
//! The state machines in this module are pure: they take every timestamp as
//! an argument and emit [`ClientSend`]/[`ServerAction`] values for the owning
//! endpoint to execute, so the same code runs on virtual and real time.

use std::cell::RefCell;
use std::rc::Rc;

use crate::msgbuf::{num_pkts_for, MsgBuf, PacketHeader};

/// Why an incoming packet was discarded instead of processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Packet belongs to an earlier request number on this slot.
    StaleEpoch,
    /// Packet is not the next expected one (treated as a loss).
    Reordered,
    /// Packet cannot be handled in the slot's current phase.
    BadState,
    /// A retransmitted request packet is still queued in the rate limiter;
    /// accepting a response now could orphan a buffer reference.
    RetxQueued,
}

/// A transmission the client protocol wants performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientSend {
    /// Request data packet `pkt_num`. `retx` marks a go-back-N re-send.
    Req { pkt_num: u16, retx: bool },
    /// Request-for-response soliciting response packet `pkt_num`.
    Rfr { pkt_num: u16, retx: bool },
}

/// What an accepted response packet means for the RPC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RespAccept {
    /// Copy payload; more packets expected.
    More,
    /// Copy payload; the message is complete.
    Complete,
}

/// Which transmit timestamp an acknowledging packet measures RTT against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RttRef {
    ReqPkt(u16),
    RfrFor(u16),
}

/// Client-side wire state for one outstanding RPC.
///
/// Counters only grow within one request-number epoch; the sole exceptions
/// are [`ClientSlot::rollback`], which rewinds them to the proven-delivered
/// point, and completion, which retires the slot.
#[derive(Debug)]
pub struct ClientSlot {
    pub req_num: u32,
    pub req_type: u8,
    /// Request message; the transmit path holds references while packets are
    /// queued, and ownership returns to the application at completion.
    pub req: Rc<RefCell<MsgBuf>>,
    /// Response buffer filled as packets arrive (grown if the response
    /// announces a larger size).
    pub resp: Option<MsgBuf>,
    /// Token under which the endpoint holds this RPC's continuation.
    pub cont_token: u64,

    pub num_req_pkts: u16,
    pub req_pkts_sent: u16,
    pub crs_received: u16,
    pub resp_pkts_received: u16,
    pub rfrs_sent: u16,
    /// Known once the first response packet announces the total size.
    pub num_resp_pkts: Option<u16>,
    pub resp_msg_size: u32,
    /// Error flag carried by the response header.
    pub resp_error: bool,

    /// Absolute retransmission deadline while any packet is unacknowledged.
    pub rto_deadline: Option<u64>,
    pub retx_rounds: u32,
    /// True once this epoch has rolled back at least once; all request data
    /// packets sent afterwards count as retransmissions.
    pub retx_mode: bool,

    /// Packets of this epoch currently queued in the timing wheel.
    pub wheel_queued: u32,
    /// Retransmitted request data packets currently queued in the wheel;
    /// while nonzero, arriving response packets are dropped.
    pub retx_req_in_wheel: u32,

    /// Transmit timestamps per request packet (stamped at actual hand-off to
    /// the NIC, re-stamped on retransmission).
    pub tx_ts: Vec<u64>,
    /// Transmit timestamps per RFR, indexed by the response packet requested.
    pub rfr_ts: Vec<u64>,
    pub enqueue_ts: u64,
}

impl ClientSlot {
    pub fn new(
        req_num: u32,
        req_type: u8,
        req: Rc<RefCell<MsgBuf>>,
        resp: MsgBuf,
        cont_token: u64,
        enqueue_ts: u64,
    ) -> Self {
        let num_req_pkts = req.borrow().num_pkts() as u16;
        ClientSlot {
            req_num,
            req_type,
            req,
            resp: Some(resp),
            cont_token,
            num_req_pkts,
            req_pkts_sent: 0,
            crs_received: 0,
            resp_pkts_received: 0,
            rfrs_sent: 0,
            num_resp_pkts: None,
            resp_msg_size: 0,
            resp_error: false,
            rto_deadline: None,
            retx_rounds: 0,
            retx_mode: false,
            wheel_queued: 0,
            retx_req_in_wheel: 0,
            tx_ts: vec![0; num_req_pkts as usize],
            rfr_ts: Vec::new(),
            enqueue_ts,
        }
    }

    /// Emit the next window of transmissions, consuming one credit per
    /// packet. Request packets go out until the message is fully sent; once
    /// the first response packet has arrived, RFRs go out for each response
    /// packet not yet solicited. Stalls (returns fewer packets) when credits
    /// run out.
    pub fn tx_step(&mut self, credits: &mut u32) -> Vec<ClientSend> {
        let mut out = Vec::new();
        if self.resp_pkts_received == 0 {
            while *credits > 0 && self.req_pkts_sent < self.num_req_pkts {
                *credits -= 1;
                out.push(ClientSend::Req {
                    pkt_num: self.req_pkts_sent,
                    retx: self.retx_mode,
                });
                self.req_pkts_sent += 1;
            }
        } else if let Some(n_resp) = self.num_resp_pkts {
            while *credits > 0 && self.rfrs_sent < n_resp.saturating_sub(1) {
                *credits -= 1;
                // RFR number k solicits response packet k+1.
                out.push(ClientSend::Rfr {
                    pkt_num: self.rfrs_sent + 1,
                    retx: self.retx_mode,
                });
                self.rfrs_sent += 1;
            }
        }
        out
    }

    /// Handle an explicit credit return for request packet `pkt_num`.
    /// Accepts only the next expected CR; anything else is dropped as a loss.
    pub fn on_credit_return(
        &mut self,
        pkt_num: u16,
        credits: &mut u32,
    ) -> Result<RttRef, DropReason> {
        if self.resp_pkts_received > 0 {
            // Request already implicitly acknowledged in full.
            return Err(DropReason::BadState);
        }
        // CRs exist only for packets 0..Nr-1 and must arrive in order.
        if pkt_num != self.crs_received || pkt_num >= self.req_pkts_sent {
            return Err(DropReason::Reordered);
        }
        if pkt_num >= self.num_req_pkts.saturating_sub(1) {
            return Err(DropReason::BadState);
        }
        self.crs_received += 1;
        *credits += 1;
        Ok(RttRef::ReqPkt(pkt_num))
    }

    /// Handle a response data packet. On acceptance the caller copies the
    /// payload into the response buffer and replenishes `credit_delta`
    /// credits.
    pub fn on_resp_pkt(
        &mut self,
        hdr: &PacketHeader,
        mtu_data: usize,
    ) -> Result<(RespAccept, RttRef, u32), DropReason> {
        if self.retx_req_in_wheel > 0 {
            // A retransmitted request data packet is still queued for
            // transmission; processing this response would hand the request
            // buffer back to the application while the wheel still references
            // it. Drop the response; the duplicate-request path will re-send
            // it once the wheel drains.
            return Err(DropReason::RetxQueued);
        }
        if hdr.pkt_num != self.resp_pkts_received {
            return Err(DropReason::Reordered);
        }
        if hdr.pkt_num == 0 {
            if self.req_pkts_sent < self.num_req_pkts {
                // A response cannot precede the full request; stale packet.
                return Err(DropReason::BadState);
            }
            let n_resp = num_pkts_for(hdr.msg_size as usize, mtu_data) as u16;
            self.num_resp_pkts = Some(n_resp);
            self.resp_msg_size = hdr.msg_size;
            self.resp_error = hdr.flags & crate::msgbuf::FLAG_ERROR_RESPONSE != 0;
            self.rfr_ts = vec![0; n_resp as usize];
            // The first response packet confirms delivery of the entire
            // request: it returns the last packet's credit and covers any
            // credit returns that were lost in flight.
            let credit_delta = (self.req_pkts_sent - self.crs_received) as u32;
            self.crs_received = self.num_req_pkts - 1;
            self.resp_pkts_received = 1;
            let rtt = RttRef::ReqPkt(self.num_req_pkts - 1);
            let accept = if n_resp == 1 {
                RespAccept::Complete
            } else {
                RespAccept::More
            };
            Ok((accept, rtt, credit_delta))
        } else {
            let n_resp = match self.num_resp_pkts {
                Some(n) => n,
                None => return Err(DropReason::BadState),
            };
            if hdr.pkt_num >= n_resp || hdr.msg_size != self.resp_msg_size {
                return Err(DropReason::BadState);
            }
            if hdr.pkt_num > self.rfrs_sent {
                // We never asked for this packet yet.
                return Err(DropReason::Reordered);
            }
            self.resp_pkts_received += 1;
            let accept = if self.resp_pkts_received == n_resp {
                RespAccept::Complete
            } else {
                RespAccept::More
            };
            Ok((accept, RttRef::RfrFor(hdr.pkt_num), 1))
        }
    }

    /// Packets currently in flight (consumed credits not yet returned).
    pub fn in_flight(&self) -> u32 {
        let req = (self.req_pkts_sent - self.crs_received) as u32;
        let rfr_acked = self.resp_pkts_received.saturating_sub(1);
        let rfr = (self.rfrs_sent - rfr_acked) as u32;
        // Once the first response packet has arrived the request is fully
        // acknowledged (crs_received was advanced to Nr-1 and the last
        // packet's implicit credit was returned), so `req` reduces to the
        // last packet only before that point.
        if self.resp_pkts_received == 0 {
            req
        } else {
            rfr
        }
    }

    /// Go-back-N rollback to the client-known-delivered point. Returns the
    /// number of credits reclaimed; the next `tx_step` re-sends from the
    /// rolled-back counters with the retransmission flag set.
    pub fn rollback(&mut self, credits: &mut u32) -> u32 {
        debug_assert_eq!(self.wheel_queued, 0, "rollback with packets still queued");
        let reclaimed = self.in_flight();
        if self.resp_pkts_received == 0 {
            self.req_pkts_sent = self.crs_received;
        } else {
            self.rfrs_sent = self.resp_pkts_received - 1;
        }
        *credits += reclaimed;
        self.retx_mode = true;
        self.retx_rounds += 1;
        reclaimed
    }

    /// True once every expected response packet has been received.
    pub fn is_complete(&self) -> bool {
        matches!(self.num_resp_pkts, Some(n) if self.resp_pkts_received == n)
    }

    /// True while the slot has unacknowledged packets and needs a timeout.
    pub fn needs_rto(&self) -> bool {
        !self.is_complete()
    }
}

/// Server-side execution phase of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerPhase {
    /// No request number seen on this slot yet (fresh session).
    Idle,
    /// Collecting request packets in order.
    Receiving,
    /// Request fully received; handler running (or response deferred).
    Executing,
    /// Response enqueued; packets are served on demand.
    Responded,
}

/// How the server holds a fully-received request's payload.
#[derive(Debug)]
pub enum ServerReqBuf {
    /// Multi-packet (or copied) request reassembled into an owned buffer.
    Assembled(Rc<RefCell<MsgBuf>>),
    /// Single-packet request processed directly from the receive buffer
    /// (zero copy); payload starts after the 16-byte header.
    Borrowed(Vec<u8>),
}

impl ServerReqBuf {
    pub fn bytes(&self) -> Vec<u8> {
        match self {
            ServerReqBuf::Assembled(m) => m.borrow().data().to_vec(),
            ServerReqBuf::Borrowed(b) => b[crate::msgbuf::HDR_SIZE..].to_vec(),
        }
    }
}

/// What the server protocol wants done with an incoming packet.
#[derive(Debug, PartialEq, Eq)]
pub enum ServerAction {
    /// In-order request packet: copy its payload (offset `pkt_num * mtu`),
    /// then send a credit return.
    AcceptMiddle { pkt_num: u16 },
    /// In-order final packet: copy payload, then invoke the handler.
    AcceptLast { pkt_num: u16 },
    /// Duplicate of an already-received non-final packet: re-issue its CR.
    DupCreditReturn { pkt_num: u16 },
    /// Duplicate of the final packet after the response was enqueued:
    /// re-send response packet zero.
    DupResendResp0,
    /// Request-for-response: send response packet `pkt_num`.
    SendRespPkt { pkt_num: u16 },
    Drop(DropReason),
}

/// Server-side state for one slot: at most one request epoch at a time,
/// executed at most once.
#[derive(Debug)]
pub struct ServerSlot {
    pub cur_req_num: Option<u32>,
    pub phase: ServerPhase,
    pub req_type: u8,
    pub req_msg_size: u32,
    pub num_req_pkts: u16,
    pub pkts_received: u16,
    pub req: Option<ServerReqBuf>,
    pub resp: Option<Rc<RefCell<MsgBuf>>>,
    pub num_resp_pkts: u16,
    pub resp_error: bool,
    /// MTU-sized response buffer reused across epochs when available.
    pub prealloc: Rc<RefCell<MsgBuf>>,
}

impl ServerSlot {
    pub fn new(mtu_data: usize) -> Self {
        ServerSlot {
            cur_req_num: None,
            phase: ServerPhase::Idle,
            req_type: 0,
            req_msg_size: 0,
            num_req_pkts: 0,
            pkts_received: 0,
            req: None,
            resp: None,
            num_resp_pkts: 0,
            resp_error: false,
            prealloc: Rc::new(RefCell::new(
                MsgBuf::alloc(mtu_data, mtu_data).expect("prealloc msgbuf"),
            )),
        }
    }

    /// Classify an incoming request data packet. A packet 0 with a higher
    /// request number than the current epoch starts a new epoch (resetting
    /// the slot) and is then handled as that epoch's first packet.
    pub fn on_req_pkt(&mut self, hdr: &PacketHeader, mtu_data: usize) -> ServerAction {
        match self.cur_req_num {
            None => {
                if hdr.pkt_num != 0 {
                    return ServerAction::Drop(DropReason::Reordered);
                }
                self.start_epoch(hdr, mtu_data);
                self.on_cur_epoch_req_pkt(hdr)
            }
            Some(cur) if hdr.req_num < cur => ServerAction::Drop(DropReason::StaleEpoch),
            Some(cur) if hdr.req_num > cur => {
                if hdr.pkt_num != 0 {
                    return ServerAction::Drop(DropReason::Reordered);
                }
                if self.phase == ServerPhase::Executing {
                    // A client cannot legally move on before our response;
                    // drop rather than abandon a running handler.
                    debug_assert!(false, "new epoch while executing");
                    return ServerAction::Drop(DropReason::BadState);
                }
                self.start_epoch(hdr, mtu_data);
                self.on_cur_epoch_req_pkt(hdr)
            }
            Some(_) => self.on_cur_epoch_req_pkt(hdr),
        }
    }

    fn start_epoch(&mut self, hdr: &PacketHeader, mtu_data: usize) {
        self.cur_req_num = Some(hdr.req_num);
        self.phase = ServerPhase::Receiving;
        self.req_type = hdr.req_type;
        self.req_msg_size = hdr.msg_size;
        self.num_req_pkts = num_pkts_for(hdr.msg_size as usize, mtu_data) as u16;
        self.pkts_received = 0;
        self.req = None;
        self.resp = None;
        self.num_resp_pkts = 0;
        self.resp_error = false;
    }

    fn on_cur_epoch_req_pkt(&mut self, hdr: &PacketHeader) -> ServerAction {
        if hdr.msg_size != self.req_msg_size || hdr.req_type != self.req_type {
            return ServerAction::Drop(DropReason::BadState);
        }
        let last = self.num_req_pkts - 1;
        if self.phase == ServerPhase::Receiving && hdr.pkt_num == self.pkts_received {
            // In-order fresh packet.
            self.pkts_received += 1;
            return if hdr.pkt_num < last {
                ServerAction::AcceptMiddle {
                    pkt_num: hdr.pkt_num,
                }
            } else {
                self.phase = ServerPhase::Executing;
                ServerAction::AcceptLast {
                    pkt_num: hdr.pkt_num,
                }
            };
        }
        if hdr.pkt_num < self.pkts_received {
            // Duplicate (go-back-N re-send). Answer idempotently so the
            // client can make progress, but never re-run anything.
            return if hdr.pkt_num < last {
                ServerAction::DupCreditReturn {
                    pkt_num: hdr.pkt_num,
                }
            } else {
                match self.phase {
                    // Handler still running: stay silent, the client will
                    // retry and pick the response up later.
                    ServerPhase::Executing => ServerAction::Drop(DropReason::BadState),
                    ServerPhase::Responded => ServerAction::DupResendResp0,
                    _ => ServerAction::Drop(DropReason::BadState),
                }
            };
        }
        // Ahead of the expected packet: a gap means loss; drop it.
        ServerAction::Drop(DropReason::Reordered)
    }

    /// Classify an incoming request-for-response.
    pub fn on_rfr(&mut self, hdr: &PacketHeader) -> ServerAction {
        match self.cur_req_num {
            Some(cur) if hdr.req_num == cur => {
                if self.phase != ServerPhase::Responded {
                    return ServerAction::Drop(DropReason::BadState);
                }
                if hdr.pkt_num == 0 || hdr.pkt_num >= self.num_resp_pkts {
                    return ServerAction::Drop(DropReason::BadState);
                }
                ServerAction::SendRespPkt {
                    pkt_num: hdr.pkt_num,
                }
            }
            Some(cur) if hdr.req_num < cur => ServerAction::Drop(DropReason::StaleEpoch),
            _ => ServerAction::Drop(DropReason::BadState),
        }
    }

    /// Record the enqueued response. Returns false if one was already set.
    pub fn set_response(&mut self, resp: Rc<RefCell<MsgBuf>>, error: bool) -> bool {
        if self.phase != ServerPhase::Executing {
            return false;
        }
        self.num_resp_pkts = resp.borrow().num_pkts() as u16;
        self.resp = Some(resp);
        self.resp_error = error;
        self.phase = ServerPhase::Responded;
        true
    }
}
