//! Sessions: credit-scoped, slot-structured connections between endpoints.
//!
//! A session is a one-to-one connection between two endpoints with a fixed
//! credit budget `C` and a fixed number of request slots. Credits bound the
//! session's in-flight packets: every data/RFR packet handed to the transmit
//! path consumes one credit, and every acknowledging packet (credit return or
//! response packet) replenishes. The invariant
//! `consumed - replenished + available == C` holds at every step; violations
//! are counted rather than silently absorbed so tests can assert zero.
//!
//! A session is either client mode (it issues requests) or server mode (it
//! serves them); bidirectional traffic uses one session in each direction.
//! Requests enqueued while all slots are busy wait in a FIFO backlog and are
//! assigned to slots in order.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::rc::Rc;

use crate::congestion::{Pacer, Timely};
use crate::config::RpcConfig;
use crate::msgbuf::MsgBuf;
use crate::protocol::{ClientSlot, ServerSlot};
use crate::transport::EndpointId;

/// Which side of the connection this session is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionRole {
    Client,
    Server,
}

/// Connection lifecycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    /// Connect request sent, waiting for the peer's acceptance.
    Connecting,
    Connected,
    /// Peer declared dead; pending work is being failed over.
    Failed,
    Disconnected,
}

/// A request waiting for a free slot.
#[derive(Debug)]
pub struct PendingReq {
    pub req_type: u8,
    pub req: MsgBuf,
    pub resp: MsgBuf,
    pub cont_token: u64,
    pub enqueue_ts: u64,
}

/// One end of a connection.
#[derive(Debug)]
pub struct Session {
    pub role: SessionRole,
    pub state: SessionState,
    /// This session's index at the local endpoint.
    pub local_num: u16,
    /// The peer's session index, learned during the handshake; packet
    /// headers carry the *destination's* session number.
    pub remote_num: u16,
    pub remote: EndpointId,

    pub credit_budget: u32,
    credits: u32,
    consumed: u64,
    replenished: u64,
    violations: u64,

    pub num_slots: usize,
    /// Client mode: in-progress requests (None = free slot).
    pub client_slots: Vec<Option<ClientSlot>>,
    /// Client mode: the request number the next occupant of each slot gets;
    /// slot `i` issues numbers `i, i+num_slots, i+2*num_slots, ...` so a
    /// request number maps back to its slot by modulo.
    pub next_req_num: Vec<u32>,
    /// Server mode: per-slot request state (persistent across epochs).
    pub server_slots: Vec<ServerSlot>,
    pub backlog: VecDeque<PendingReq>,

    /// Per-session congestion state (one flow per session).
    pub timely: Timely,
    pub pacer: Pacer,

    /// Hand-off time of the connect request, for handshake retry pacing.
    pub connect_sent_at: u64,
}

impl Session {
    pub fn new_client(
        local_num: u16,
        remote: EndpointId,
        credits: u32,
        num_slots: usize,
        cfg: &RpcConfig,
    ) -> Self {
        Session {
            role: SessionRole::Client,
            state: SessionState::Connecting,
            local_num,
            remote_num: u16::MAX,
            remote,
            credit_budget: credits,
            credits,
            consumed: 0,
            replenished: 0,
            violations: 0,
            num_slots,
            client_slots: (0..num_slots).map(|_| None).collect(),
            next_req_num: (0..num_slots as u32).collect(),
            server_slots: Vec::new(),
            backlog: VecDeque::new(),
            timely: Timely::new(&cfg.knobs),
            pacer: Pacer::new(),
            connect_sent_at: 0,
        }
    }

    pub fn new_server(
        local_num: u16,
        remote: EndpointId,
        remote_num: u16,
        credits: u32,
        num_slots: usize,
        cfg: &RpcConfig,
    ) -> Self {
        Session {
            role: SessionRole::Server,
            state: SessionState::Connected,
            local_num,
            remote_num,
            remote,
            credit_budget: credits,
            credits,
            consumed: 0,
            replenished: 0,
            violations: 0,
            num_slots,
            client_slots: Vec::new(),
            next_req_num: Vec::new(),
            server_slots: (0..num_slots).map(|_| ServerSlot::new(cfg.mtu_data)).collect(),
            backlog: VecDeque::new(),
            timely: Timely::new(&cfg.knobs),
            pacer: Pacer::new(),
            connect_sent_at: 0,
        }
    }

    pub fn credits(&self) -> u32 {
        self.credits
    }

    /// Counters for the conservation audit.
    pub fn credit_flow(&self) -> (u64, u64) {
        (self.consumed, self.replenished)
    }

    pub fn credit_violations(&self) -> u64 {
        self.violations
    }

    /// Check `consumed - replenished + available == budget`.
    pub fn credit_invariant_holds(&self) -> bool {
        self.consumed - self.replenished + self.credits as u64 == self.credit_budget as u64
    }

    /// Replenish `n` credits, clamping at the budget. Over-replenishment is
    /// a protocol bug; it is counted (and panics in debug builds).
    pub fn replenish(&mut self, n: u32) {
        for _ in 0..n {
            if self.credits >= self.credit_budget {
                debug_assert!(false, "credit over-replenish");
                self.violations += 1;
            } else {
                self.credits += 1;
                self.replenished += 1;
            }
        }
    }

    /// Record `n` credits consumed by a slot's transmit step. The slot
    /// machines decrement the working counter themselves; this keeps the
    /// flow totals in sync.
    fn note_consumed(&mut self, n: u64) {
        self.consumed += n;
    }

    /// Run a closure with mutable access to a client slot and the credit
    /// counter (split borrow), tracking consumption for the audit.
    pub fn with_slot_credits<R>(
        &mut self,
        slot_idx: usize,
        f: impl FnOnce(&mut ClientSlot, &mut u32) -> R,
    ) -> R {
        let before = self.credits;
        let slot = self.client_slots[slot_idx]
            .as_mut()
            .expect("slot must be occupied");
        let mut credits = before;
        let r = f(slot, &mut credits);
        match credits.cmp(&before) {
            std::cmp::Ordering::Less => {
                self.credits = credits;
                self.note_consumed((before - credits) as u64);
            }
            std::cmp::Ordering::Greater => {
                self.credits = credits;
                let gained = credits - before;
                if self.credits > self.credit_budget {
                    debug_assert!(false, "credit over-replenish");
                    self.violations += 1;
                    self.credits = self.credit_budget;
                    self.replenished += (self.credit_budget - before) as u64;
                } else {
                    self.replenished += gained as u64;
                }
            }
            std::cmp::Ordering::Equal => {}
        }
        r
    }

    /// The slot a request number of this session maps to.
    pub fn slot_of(&self, req_num: u32) -> usize {
        (req_num as usize) % self.num_slots
    }

    /// First free client slot, if any.
    pub fn free_slot(&self) -> Option<usize> {
        self.client_slots.iter().position(|s| s.is_none())
    }

    /// Occupy `slot_idx` with a pending request, assigning the slot's next
    /// request number.
    pub fn occupy_slot(&mut self, slot_idx: usize, p: PendingReq) -> u32 {
        let req_num = self.next_req_num[slot_idx];
        self.next_req_num[slot_idx] += self.num_slots as u32;
        let slot = ClientSlot::new(
            req_num,
            p.req_type,
            Rc::new(RefCell::new(p.req)),
            p.resp,
            p.cont_token,
            p.enqueue_ts,
        );
        self.client_slots[slot_idx] = Some(slot);
        req_num
    }

    /// Move backlogged requests into free slots (FIFO), returning the slot
    /// indices that became active.
    pub fn drain_backlog(&mut self) -> Vec<usize> {
        let mut activated = Vec::new();
        while !self.backlog.is_empty() {
            match self.free_slot() {
                Some(i) => {
                    let p = self.backlog.pop_front().unwrap();
                    self.occupy_slot(i, p);
                    activated.push(i);
                }
                None => break,
            }
        }
        activated
    }

    /// Any client slot still holding an RPC?
    pub fn has_active_slots(&self) -> bool {
        self.client_slots.iter().any(|s| s.is_some())
    }

    /// Any server slot still executing a handler?
    pub fn has_executing_handlers(&self) -> bool {
        self.server_slots
            .iter()
            .any(|s| s.phase == crate::protocol::ServerPhase::Executing)
    }
}
