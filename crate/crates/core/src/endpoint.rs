//! The RPC endpoint: one polling event loop owning sessions, a timing wheel,
//! request handlers, and a transport.
//!
//! The loop is driven externally with explicit time (`run_event_loop_once`),
//! so the same endpoint code runs under the deterministic simulator (virtual
//! nanoseconds) and over real sockets (wall-clock nanoseconds). Each
//! iteration performs, in order: management frames, receive burst (protocol
//! steps and dispatch handlers run inline per packet), worker completions,
//! retransmission-timeout scan, per-session transmit steps, timing-wheel
//! release, liveness bookkeeping, and one transmit burst.
//!
//! Every iteration returns the CPU cost it would have consumed on a real
//! dispatch core, computed from the configured [`crate::config::CpuModel`].
//! The optimization toggles change only which costs are charged (and, for
//! the rate limiter, when packets reach the NIC) — never whether an RPC
//! completes or what its payload is.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::rc::Rc;
use std::sync::{mpsc, Arc, Mutex};

use crate::config::RpcConfig;
use crate::congestion::{TxDecision, Wheel};
use crate::error::{Error, Result};
use crate::mgmt::{MgmtFrame, CONNECT_OK, CONNECT_REJECT_BUDGET, CONNECT_REJECT_CONFIG};
use crate::msgbuf::{
    num_pkts_for, MsgBuf, PacketHeader, PktType, FLAG_ERROR_RESPONSE, HDR_SIZE, PROTO_VERSION,
};
use crate::protocol::{
    ClientSend, DropReason, RespAccept, RttRef, ServerAction, ServerPhase, ServerReqBuf,
};
use crate::session::{PendingReq, Session, SessionRole, SessionState};
use crate::stats::EndpointStats;
use crate::transport::{EndpointId, RxPacket, Transport, TxPacket, TxPayload};

/// How an RPC finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallStatus {
    /// Response received in full.
    Ok,
    /// Gave up after the configured number of go-back-N rounds.
    Timeout,
    /// The peer was declared dead (or refused the connection).
    NodeFailure,
}

/// Delivered to the continuation exactly once per enqueued request; returns
/// ownership of both buffers to the application.
pub struct CallResult {
    pub status: CallStatus,
    pub request: MsgBuf,
    pub response: MsgBuf,
    /// Server flagged the response as an application-level error.
    pub resp_error: bool,
}

/// Continuation invoked at RPC completion.
pub type Continuation<T> = Box<dyn FnOnce(&mut Rpc<T>, CallResult)>;

/// Where a request handler runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandlerMode {
    /// Inline on the dispatch loop; must be short.
    Dispatch,
    /// On a worker (real thread or virtual worker core); for long handlers.
    Worker,
}

/// Capability to respond to one received request. Valid until a response is
/// enqueued for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReqHandle {
    pub sess: u16,
    pub slot: u16,
    pub req_num: u32,
    pub req_type: u8,
}

struct HandlerEntry<T: Transport> {
    mode: HandlerMode,
    /// Modeled CPU cost of one invocation.
    compute_ns: u64,
    dispatch: Option<Rc<dyn Fn(&mut Rpc<T>, ReqHandle)>>,
    worker: Option<Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>>,
}

/// Packet parked in the timing wheel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WheelSend {
    Req { pkt_num: u16, retx: bool },
    Rfr { pkt_num: u16 },
}

struct WheelItem {
    sess: u16,
    slot: u16,
    req_num: u32,
    pkt: TxPacket,
    send: WheelSend,
}

struct DoneTask {
    sess: u16,
    slot: u16,
    req_num: u32,
    out: Vec<u8>,
}

struct ThreadTask {
    sess: u16,
    slot: u16,
    req_num: u32,
    payload: Vec<u8>,
    f: Arc<dyn Fn(&[u8]) -> Vec<u8> + Send + Sync>,
}

/// Worker-handler execution backend.
enum Workers {
    /// Deterministic virtual worker cores: results become visible when the
    /// simulated clock passes `enqueue + compute_ns` (earliest-free core).
    Virtual {
        free_at: Vec<u64>,
        done: BinaryHeap<Reverse<(u64, u64)>>,
        payloads: HashMap<u64, DoneTask>,
        next_seq: u64,
    },
    /// Real thread pool for wall-clock transports.
    Threads {
        task_tx: Option<mpsc::Sender<ThreadTask>>,
        done_rx: mpsc::Receiver<DoneTask>,
        done_tx: mpsc::Sender<DoneTask>,
        handles: Vec<std::thread::JoinHandle<()>>,
        spawned: bool,
    },
}

#[derive(Debug, Clone, Copy)]
struct PeerState {
    last_heard_ns: u64,
    alive: bool,
}

/// Outcome of one event-loop iteration, for external drivers.
#[derive(Debug, Clone, Copy)]
pub struct LoopReport {
    /// Modeled CPU time this iteration consumed.
    pub cost_ns: u64,
    /// Earliest future instant at which this endpoint has scheduled work
    /// (timeout, wheel release, worker completion, heartbeat).
    pub next_deadline_ns: Option<u64>,
    /// The receive burst filled completely; poll again soon.
    pub rx_saturated: bool,
}

/// An RPC endpoint bound to one transport queue.
pub struct Rpc<T: Transport> {
    transport: T,
    cfg: RpcConfig,
    sessions: Vec<Session>,
    /// Continuations by token; removal is what makes completion exactly-once.
    conts: HashMap<u64, Continuation<T>>,
    next_token: u64,
    handlers: HashMap<u8, HandlerEntry<T>>,
    wheel: Wheel<WheelItem>,
    /// Packets accumulated this iteration, handed to the transport in one
    /// burst at iteration end (or earlier by an explicit flush).
    pending_tx: Vec<TxPacket>,
    workers: Workers,
    /// Credits committed to sessions (both roles); bounded by RQ capacity.
    committed_credits: u32,
    /// Lazy min-heap of (deadline, sess, slot, req_num) retransmission
    /// timers; entries are validated against the slot when popped.
    rto_heap: BinaryHeap<Reverse<(u64, u16, u16, u32)>>,
    /// Sessions with possible transmit work, drained each iteration in
    /// session order (deterministic).
    dirty: BTreeSet<u16>,
    /// Client sessions whose peer died while packets were still wheel-queued;
    /// their slots complete once the wheel drains.
    dying: Vec<u16>,
    /// Failed server sessions waiting for in-flight worker handlers before
    /// their state can be released.
    closing_srv: Vec<u16>,
    peers: BTreeMap<EndpointId, PeerState>,
    /// Server-side handshake dedup: (client endpoint, client session) to the
    /// local session serving it.
    accepted: HashMap<(EndpointId, u16), u16>,
    connecting: u32,
    next_heartbeat_ns: u64,

    pub(crate) stats_: EndpointStats,
    now_ns: u64,
    loop_cost_ns: u64,
    ts_rx_charged: bool,
    ts_tx_charged: bool,
}

impl<T: Transport> Rpc<T> {
    /// Endpoint with real worker threads (wall-clock transports).
    pub fn new(transport: T, cfg: RpcConfig) -> Result<Self> {
        let (done_tx, done_rx) = mpsc::channel();
        let workers = Workers::Threads {
            task_tx: None,
            done_rx,
            done_tx,
            handles: Vec::new(),
            spawned: false,
        };
        Self::build(transport, cfg, workers)
    }

    /// Endpoint with virtual worker cores (deterministic simulation).
    pub fn new_virtual_time(transport: T, cfg: RpcConfig) -> Result<Self> {
        let n = cfg.worker_threads.max(1);
        let workers = Workers::Virtual {
            free_at: vec![0; n],
            done: BinaryHeap::new(),
            payloads: HashMap::new(),
            next_seq: 0,
        };
        Self::build(transport, cfg, workers)
    }

    fn build(transport: T, cfg: RpcConfig, workers: Workers) -> Result<Self> {
        cfg.validate()?;
        if transport.mtu_data() != cfg.mtu_data {
            return Err(Error::Config(format!(
                "transport mtu {} != configured mtu {}",
                transport.mtu_data(),
                cfg.mtu_data
            )));
        }
        let wheel = Wheel::new(cfg.wheel_slot_ns, cfg.wheel_horizon_ns);
        Ok(Rpc {
            transport,
            cfg,
            sessions: Vec::new(),
            conts: HashMap::new(),
            next_token: 1,
            handlers: HashMap::new(),
            wheel,
            pending_tx: Vec::new(),
            workers,
            committed_credits: 0,
            rto_heap: BinaryHeap::new(),
            dirty: BTreeSet::new(),
            dying: Vec::new(),
            closing_srv: Vec::new(),
            peers: BTreeMap::new(),
            accepted: HashMap::new(),
            connecting: 0,
            next_heartbeat_ns: 0,
            stats_: EndpointStats::default(),
            now_ns: 0,
            loop_cost_ns: 0,
            ts_rx_charged: false,
            ts_tx_charged: false,
        })
    }

    pub fn local_id(&self) -> EndpointId {
        self.transport.local_id()
    }

    pub fn cfg(&self) -> &RpcConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &EndpointStats {
        &self.stats_
    }

    pub fn stats_mut(&mut self) -> &mut EndpointStats {
        &mut self.stats_
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn session(&self, idx: u16) -> &Session {
        &self.sessions[idx as usize]
    }

    pub fn committed_credits(&self) -> u32 {
        self.committed_credits
    }

    /// Packets currently parked in the timing wheel.
    pub fn wheel_depth(&self) -> usize {
        self.wheel.len()
    }

    /// Allocate a message buffer shaped for this endpoint's MTU.
    pub fn alloc_msgbuf(&self, data_capacity: usize) -> Result<MsgBuf> {
        MsgBuf::alloc(data_capacity, self.cfg.mtu_data)
    }

    /// Register an inline (dispatch-loop) handler for `req_type`.
    pub fn register_dispatch_handler(
        &mut self,
        req_type: u8,
        compute_ns: u64,
        f: impl Fn(&mut Rpc<T>, ReqHandle) + 'static,
    ) -> Result<()> {
        if self.handlers.contains_key(&req_type) {
            return Err(Error::DuplicateHandler(req_type));
        }
        self.handlers.insert(
            req_type,
            HandlerEntry {
                mode: HandlerMode::Dispatch,
                compute_ns,
                dispatch: Some(Rc::new(f)),
                worker: None,
            },
        );
        Ok(())
    }

    /// Register a worker handler for `req_type`: runs off the dispatch loop
    /// and responds with the returned bytes.
    pub fn register_worker_handler(
        &mut self,
        req_type: u8,
        compute_ns: u64,
        f: impl Fn(&[u8]) -> Vec<u8> + Send + Sync + 'static,
    ) -> Result<()> {
        if self.handlers.contains_key(&req_type) {
            return Err(Error::DuplicateHandler(req_type));
        }
        self.spawn_worker_threads_if_needed();
        self.handlers.insert(
            req_type,
            HandlerEntry {
                mode: HandlerMode::Worker,
                compute_ns,
                dispatch: None,
                worker: Some(Arc::new(f)),
            },
        );
        Ok(())
    }

    fn spawn_worker_threads_if_needed(&mut self) {
        if let Workers::Threads {
            task_tx,
            done_tx,
            handles,
            spawned,
            ..
        } = &mut self.workers
        {
            if *spawned {
                return;
            }
            *spawned = true;
            let (tx, rx) = mpsc::channel::<ThreadTask>();
            let rx = Arc::new(Mutex::new(rx));
            for _ in 0..self.cfg.worker_threads.max(1) {
                let rx = Arc::clone(&rx);
                let done = done_tx.clone();
                handles.push(std::thread::spawn(move || loop {
                    let task = match rx.lock().unwrap().recv() {
                        Ok(t) => t,
                        Err(_) => break,
                    };
                    let out = (task.f)(&task.payload);
                    if done
                        .send(DoneTask {
                            sess: task.sess,
                            slot: task.slot,
                            req_num: task.req_num,
                            out,
                        })
                        .is_err()
                    {
                        break;
                    }
                }));
            }
            *task_tx = Some(tx);
        }
    }

    /// Open a client session to `remote` with the configured credit budget.
    pub fn create_session(&mut self, remote: EndpointId) -> Result<u16> {
        self.create_session_with(remote, self.cfg.credits, self.cfg.num_slots)
    }

    /// Open a client session with an explicit credit budget and slot count.
    pub fn create_session_with(
        &mut self,
        remote: EndpointId,
        credits: u32,
        num_slots: usize,
    ) -> Result<u16> {
        if credits == 0 || num_slots == 0 {
            return Err(Error::Config("session needs credits and slots".into()));
        }
        if self.committed_credits + credits > self.cfg.rq_capacity as u32 {
            return Err(Error::SessionBudget {
                committed: self.committed_credits,
                requested: credits,
                rq: self.cfg.rq_capacity as u32,
            });
        }
        if self.sessions.len() >= u16::MAX as usize {
            return Err(Error::Config("session table full".into()));
        }
        let local_num = self.sessions.len() as u16;
        let mut s = Session::new_client(local_num, remote, credits, num_slots, &self.cfg);
        s.connect_sent_at = self.now_ns;
        self.sessions.push(s);
        self.committed_credits += credits;
        self.connecting += 1;
        self.peers.entry(remote).or_insert(PeerState {
            last_heard_ns: self.now_ns,
            alive: true,
        });
        self.transport.mgmt_send(
            remote,
            MgmtFrame::ConnectReq {
                client_session: local_num,
                credits: credits as u16,
                num_slots: num_slots as u16,
                mtu_data: self.cfg.mtu_data as u32,
            },
        );
        Ok(local_num)
    }

    pub fn session_state(&self, sess: u16) -> SessionState {
        self.sessions[sess as usize].state
    }

    /// Issue an RPC on a client session. The continuation runs exactly once:
    /// with the response, or with a timeout/failure status. Both buffers are
    /// returned through it.
    pub fn enqueue_request(
        &mut self,
        sess: u16,
        req_type: u8,
        req: MsgBuf,
        resp: MsgBuf,
        cont: Continuation<T>,
    ) -> Result<()> {
        let idx = sess as usize;
        if idx >= self.sessions.len() {
            return Err(Error::Invalid(format!("no session {sess}")));
        }
        if req.data_size() == 0 {
            return Err(Error::SizeOutOfRange { got: 0 });
        }
        if req.mtu_data() != self.cfg.mtu_data || resp.mtu_data() != self.cfg.mtu_data {
            return Err(Error::Invalid("buffer mtu mismatch".into()));
        }
        if self.sessions[idx].role != SessionRole::Client {
            return Err(Error::Invalid("requests need a client session".into()));
        }
        let token = self.next_token;
        self.next_token += 1;
        let pending = PendingReq {
            req_type,
            req,
            resp,
            cont_token: token,
            enqueue_ts: self.now_ns,
        };
        match self.sessions[idx].state {
            SessionState::Connecting | SessionState::Connected => {
                self.conts.insert(token, cont);
                self.sessions[idx].backlog.push_back(pending);
                self.dirty.insert(sess);
                Ok(())
            }
            SessionState::Failed | SessionState::Disconnected => {
                // Fail immediately, still by continuation for uniformity.
                self.stats_.rpcs_failed += 1;
                cont(
                    self,
                    CallResult {
                        status: CallStatus::NodeFailure,
                        request: pending.req,
                        response: pending.resp,
                        resp_error: false,
                    },
                );
                Ok(())
            }
        }
    }

    /// Payload bytes of the request behind `h` (valid while its handler may
    /// still respond).
    pub fn req_payload(&self, h: &ReqHandle) -> Result<Vec<u8>> {
        let slot = self.server_slot_for(h)?;
        match &slot.req {
            Some(buf) => Ok(buf.bytes()),
            None => Err(Error::Invalid("request payload no longer held".into())),
        }
    }

    /// Size in bytes of the request behind `h`.
    pub fn req_size(&self, h: &ReqHandle) -> Result<usize> {
        Ok(self.server_slot_for(h)?.req_msg_size as usize)
    }

    fn server_slot_for(&self, h: &ReqHandle) -> Result<&crate::protocol::ServerSlot> {
        let sess = self
            .sessions
            .get(h.sess as usize)
            .ok_or_else(|| Error::Invalid(format!("no session {}", h.sess)))?;
        let slot = sess
            .server_slots
            .get(h.slot as usize)
            .ok_or_else(|| Error::Invalid(format!("no slot {}", h.slot)))?;
        if slot.cur_req_num != Some(h.req_num) || slot.phase != ServerPhase::Executing {
            return Err(Error::Invalid("stale request handle".into()));
        }
        Ok(slot)
    }

    /// Respond to a request with `bytes`.
    pub fn enqueue_response(&mut self, h: ReqHandle, bytes: &[u8]) -> Result<()> {
        self.enqueue_response_inner(h, bytes, false)
    }

    /// Respond with an application-level error payload (sets the error flag
    /// in every response packet header).
    pub fn enqueue_response_error(&mut self, h: ReqHandle, bytes: &[u8]) -> Result<()> {
        self.enqueue_response_inner(h, bytes, true)
    }

    /// Gracefully close an idle client session, telling the peer to free its
    /// server-side state.
    pub fn disconnect_session(&mut self, sess: u16) -> Result<()> {
        let si = sess as usize;
        if si >= self.sessions.len() {
            return Err(Error::Invalid(format!("no session {sess}")));
        }
        let s = &self.sessions[si];
        if s.role != SessionRole::Client || s.state != SessionState::Connected {
            return Err(Error::Invalid("only connected client sessions disconnect".into()));
        }
        if s.has_active_slots() || !s.backlog.is_empty() {
            return Err(Error::Invalid("session still has outstanding requests".into()));
        }
        let remote = s.remote;
        let remote_num = s.remote_num;
        let budget = s.credit_budget;
        self.sessions[si].state = SessionState::Disconnected;
        self.committed_credits -= budget;
        self.transport.mgmt_send(
            remote,
            MgmtFrame::Disconnect {
                local_session: remote_num,
            },
        );
        Ok(())
    }

    /// Declare `peer`'s host dead: fail every session to that host. Client
    /// RPCs complete with [`CallStatus::NodeFailure`] (deferred only while
    /// their packets are still wheel-queued); server sessions are freed once
    /// outstanding handlers finish. Normally driven by heartbeat silence,
    /// public for direct use by fault-injection tests.
    pub fn handle_node_failure(&mut self, peer: EndpointId) {
        let host = peer.host;
        if let Some(p) = self.peers.get(&peer) {
            if !p.alive {
                return;
            }
        }
        for (id, p) in self.peers.iter_mut() {
            if id.host == host {
                p.alive = false;
            }
        }
        // Drop NIC references to in-flight packets before failing slots over.
        self.transport.flush_tx();
        self.loop_cost_ns += self.cfg.cpu.flush_tx_ns;
        self.stats_.tx_flushes += 1;
        let mut clients = Vec::new();
        let mut servers = Vec::new();
        for i in 0..self.sessions.len() {
            let s = &self.sessions[i];
            if s.remote.host != host {
                continue;
            }
            match (s.role, s.state) {
                (SessionRole::Client, SessionState::Connecting)
                | (SessionRole::Client, SessionState::Connected) => clients.push(i),
                (SessionRole::Server, SessionState::Connected) => servers.push(i),
                _ => {}
            }
        }
        for i in clients {
            self.fail_client_session(i);
        }
        for i in servers {
            self.sessions[i].state = SessionState::Failed;
            self.closing_srv.push(i as u16);
        }
        self.accepted.retain(|(id, _), _| id.host != host);
    }

    // ----- event loop ------------------------------------------------------

    /// Run one iteration of the event loop at (virtual or wall-clock) time
    /// `now_ns`.
    pub fn run_event_loop_once(&mut self, now_ns: u64) -> LoopReport {
        self.now_ns = now_ns;
        self.loop_cost_ns = self.cfg.cpu.iter_base_ns;
        self.ts_rx_charged = false;
        self.ts_tx_charged = false;

        self.process_mgmt();
        let rx = self.transport.rx_burst(self.cfg.rx_burst);
        let rx_n = rx.len();
        for pkt in rx {
            self.process_rx_pkt(pkt);
        }
        self.drain_workers();
        self.scan_rtos();
        self.tx_steps();
        self.poll_wheel();
        self.liveness_steps();
        self.flush_pending_tx();

        LoopReport {
            cost_ns: self.loop_cost_ns,
            next_deadline_ns: self.next_deadline(),
            rx_saturated: rx_n > 0 && rx_n == self.cfg.rx_burst,
        }
    }

    fn charge_rx_ts(&mut self) {
        if self.cfg.toggles.batched_ts {
            if !self.ts_rx_charged {
                self.ts_rx_charged = true;
                self.loop_cost_ns += self.cfg.cpu.timestamp_ns;
            }
        } else {
            self.loop_cost_ns += self.cfg.cpu.timestamp_ns;
        }
    }

    fn charge_tx_ts(&mut self) {
        if self.cfg.toggles.batched_ts {
            if !self.ts_tx_charged {
                self.ts_tx_charged = true;
                self.loop_cost_ns += self.cfg.cpu.timestamp_ns;
            }
        } else {
            self.loop_cost_ns += self.cfg.cpu.timestamp_ns;
        }
    }

    /// RTT receive reference: the per-packet NIC timestamp, or the (slightly
    /// stale) once-per-iteration timestamp when batching is on.
    fn rx_time_ref(&self, pkt_rx_ts: u64) -> u64 {
        if self.cfg.toggles.batched_ts {
            self.now_ns
        } else {
            pkt_rx_ts
        }
    }

    fn flush_pending_tx(&mut self) {
        if self.pending_tx.is_empty() {
            return;
        }
        let pkts = std::mem::take(&mut self.pending_tx);
        self.loop_cost_ns += self.cfg.cpu.tx_pkt_ns * pkts.len() as u64;
        self.transport.tx_burst(pkts);
    }

    fn next_deadline(&self) -> Option<u64> {
        let mut d: Option<u64> = None;
        let upd = |v: u64, d: &mut Option<u64>| *d = Some(d.map_or(v, |x| x.min(v)));
        if let Some(&Reverse((t, _, _, _))) = self.rto_heap.peek() {
            upd(t, &mut d);
        }
        if let Some(t) = self.wheel.next_release() {
            upd(t, &mut d);
        }
        if let Workers::Virtual { done, .. } = &self.workers {
            if let Some(&Reverse((t, _))) = done.peek() {
                upd(t, &mut d);
            }
        }
        if !self.sessions.is_empty() {
            upd(self.next_heartbeat_ns, &mut d);
        }
        if self.connecting > 0 {
            upd(self.now_ns + CONNECT_RETRY_NS, &mut d);
        }
        if !self.dying.is_empty() || !self.closing_srv.is_empty() {
            upd(self.now_ns + 1_000_000, &mut d);
        }
        d
    }

    // ----- management channel ----------------------------------------------

    fn process_mgmt(&mut self) {
        while let Some((from, frame)) = self.transport.mgmt_recv() {
            let now = self.now_ns;
            self.peers
                .entry(from)
                .and_modify(|p| p.last_heard_ns = now)
                .or_insert(PeerState {
                    last_heard_ns: now,
                    alive: true,
                });
            match frame {
                MgmtFrame::ConnectReq {
                    client_session,
                    credits,
                    num_slots,
                    mtu_data,
                } => self.on_connect_req(from, client_session, credits, num_slots, mtu_data),
                MgmtFrame::ConnectResp {
                    client_session,
                    server_session,
                    status,
                } => self.on_connect_resp(client_session, server_session, status),
                MgmtFrame::Heartbeat => {}
                MgmtFrame::Disconnect { local_session } => self.on_disconnect(local_session),
            }
        }
    }

    fn on_connect_req(
        &mut self,
        from: EndpointId,
        client_session: u16,
        credits: u16,
        num_slots: u16,
        mtu_data: u32,
    ) {
        let reply = 'reply: {
            if let Some(&local) = self.accepted.get(&(from, client_session)) {
                // Duplicate handshake (retry): idempotent acceptance.
                break 'reply MgmtFrame::ConnectResp {
                    client_session,
                    server_session: local,
                    status: CONNECT_OK,
                };
            }
            if mtu_data as usize != self.cfg.mtu_data || credits == 0 || num_slots == 0 {
                break 'reply MgmtFrame::ConnectResp {
                    client_session,
                    server_session: 0,
                    status: CONNECT_REJECT_CONFIG,
                };
            }
            if self.committed_credits + credits as u32 > self.cfg.rq_capacity as u32
                || self.sessions.len() >= u16::MAX as usize
            {
                break 'reply MgmtFrame::ConnectResp {
                    client_session,
                    server_session: 0,
                    status: CONNECT_REJECT_BUDGET,
                };
            }
            let local = self.sessions.len() as u16;
            self.sessions.push(Session::new_server(
                local,
                from,
                client_session,
                credits as u32,
                num_slots as usize,
                &self.cfg,
            ));
            self.committed_credits += credits as u32;
            self.accepted.insert((from, client_session), local);
            MgmtFrame::ConnectResp {
                client_session,
                server_session: local,
                status: CONNECT_OK,
            }
        };
        self.transport.mgmt_send(from, reply);
    }

    fn on_connect_resp(&mut self, client_session: u16, server_session: u16, status: u8) {
        let si = client_session as usize;
        if si >= self.sessions.len() {
            return;
        }
        if self.sessions[si].role != SessionRole::Client
            || self.sessions[si].state != SessionState::Connecting
        {
            return; // duplicate response
        }
        self.connecting -= 1;
        if status == CONNECT_OK {
            self.sessions[si].state = SessionState::Connected;
            self.sessions[si].remote_num = server_session;
            self.dirty.insert(client_session);
        } else {
            self.fail_client_session_already_counted(si);
        }
    }

    fn on_disconnect(&mut self, local_session: u16) {
        let si = local_session as usize;
        if si >= self.sessions.len() {
            return;
        }
        let s = &mut self.sessions[si];
        if s.role != SessionRole::Server || s.state != SessionState::Connected {
            return;
        }
        if s.has_executing_handlers() {
            s.state = SessionState::Failed;
            self.closing_srv.push(local_session);
            return;
        }
        s.state = SessionState::Disconnected;
        for slot in &mut s.server_slots {
            slot.req = None;
            slot.resp = None;
        }
        let budget = s.credit_budget;
        self.committed_credits -= budget;
        self.accepted.retain(|_, &mut v| v != local_session);
    }

    // ----- receive paths ----------------------------------------------------

    fn count_drop(&mut self, r: DropReason) {
        match r {
            DropReason::StaleEpoch => self.stats_.drops_stale_epoch += 1,
            DropReason::Reordered => self.stats_.drops_reordered += 1,
            DropReason::BadState => self.stats_.drops_bad_state += 1,
            DropReason::RetxQueued => self.stats_.drops_retx_queued += 1,
        }
    }

    fn process_rx_pkt(&mut self, pkt: RxPacket) {
        self.stats_.pkts_rx += 1;
        self.loop_cost_ns += self.cfg.cpu.rx_pkt_ns;
        self.charge_rx_ts();
        let rx_ref = self.rx_time_ref(pkt.rx_ts);
        if pkt.bytes.len() < HDR_SIZE {
            self.stats_.drops_bad_header += 1;
            self.transport.release_rx(pkt.desc);
            return;
        }
        let hdr = match PacketHeader::unpack(&pkt.bytes[..HDR_SIZE]) {
            Ok(h) => h,
            Err(_) => {
                self.stats_.drops_bad_header += 1;
                self.transport.release_rx(pkt.desc);
                return;
            }
        };
        if hdr.version != PROTO_VERSION {
            self.stats_.drops_bad_header += 1;
            self.transport.release_rx(pkt.desc);
            return;
        }
        let si = hdr.session_num as usize;
        if si >= self.sessions.len() {
            self.stats_.drops_unknown_session += 1;
            self.transport.release_rx(pkt.desc);
            return;
        }
        match hdr.pkt_type {
            PktType::ReqData => self.rx_req_data(si, hdr, pkt),
            PktType::RequestForResponse => self.rx_rfr(si, hdr, pkt),
            PktType::RespData => self.rx_resp_data(si, hdr, pkt, rx_ref),
            PktType::CreditReturn => self.rx_credit_return(si, hdr, pkt, rx_ref),
        }
    }

    /// Expected payload length of packet `pkt_num` in a message of
    /// `msg_size` bytes.
    fn chunk_len(&self, msg_size: u32, pkt_num: u16) -> usize {
        let mtu = self.cfg.mtu_data;
        let n = num_pkts_for(msg_size as usize, mtu);
        let i = pkt_num as usize;
        debug_assert!(i < n);
        if i + 1 == n {
            msg_size as usize - i * mtu
        } else {
            mtu
        }
    }

    fn rx_credit_return(&mut self, si: usize, hdr: PacketHeader, pkt: RxPacket, rx_ref: u64) {
        let shape_ok = pkt.bytes.len() == HDR_SIZE;
        self.transport.release_rx(pkt.desc);
        if !shape_ok {
            self.stats_.drops_bad_header += 1;
            return;
        }
        let s = &self.sessions[si];
        if s.role != SessionRole::Client || s.state != SessionState::Connected {
            self.stats_.drops_bad_state += 1;
            return;
        }
        let li = s.slot_of(hdr.req_num);
        match s.client_slots[li].as_ref() {
            Some(sl) if sl.req_num == hdr.req_num => {}
            _ => {
                self.stats_.drops_stale_epoch += 1;
                return;
            }
        }
        let res = self.sessions[si]
            .with_slot_credits(li, |sl, c| sl.on_credit_return(hdr.pkt_num, c));
        match res {
            Ok(RttRef::ReqPkt(i)) => {
                let tx_ts =
                    self.sessions[si].client_slots[li].as_ref().unwrap().tx_ts[i as usize];
                self.feed_rtt(si, rx_ref, tx_ts);
                self.dirty.insert(si as u16);
            }
            Ok(RttRef::RfrFor(_)) => unreachable!("CRs acknowledge request packets"),
            Err(r) => self.count_drop(r),
        }
    }

    fn rx_resp_data(&mut self, si: usize, hdr: PacketHeader, pkt: RxPacket, rx_ref: u64) {
        let n_resp = num_pkts_for(hdr.msg_size as usize, self.cfg.mtu_data);
        if hdr.msg_size == 0
            || hdr.pkt_num as usize >= n_resp
            || pkt.bytes.len() != HDR_SIZE + self.chunk_len(hdr.msg_size, hdr.pkt_num)
        {
            self.stats_.drops_bad_header += 1;
            self.transport.release_rx(pkt.desc);
            return;
        }
        {
            let s = &self.sessions[si];
            if s.role != SessionRole::Client || s.state != SessionState::Connected {
                self.stats_.drops_bad_state += 1;
                self.transport.release_rx(pkt.desc);
                return;
            }
            let li = s.slot_of(hdr.req_num);
            match s.client_slots[li].as_ref() {
                Some(sl) if sl.req_num == hdr.req_num => {}
                _ => {
                    self.stats_.drops_stale_epoch += 1;
                    self.transport.release_rx(pkt.desc);
                    return;
                }
            }
        }
        let li = self.sessions[si].slot_of(hdr.req_num);
        let res = self.sessions[si].client_slots[li]
            .as_mut()
            .unwrap()
            .on_resp_pkt(&hdr, self.cfg.mtu_data);
        let (accept, rtt_ref, credit_delta) = match res {
            Ok(v) => v,
            Err(r) => {
                self.count_drop(r);
                self.transport.release_rx(pkt.desc);
                return;
            }
        };
        self.sessions[si].replenish(credit_delta);
        // Copy the payload chunk into the response buffer, growing it first
        // if the announced size exceeds what the caller provided.
        let mut grow_cost = false;
        {
            let slot = self.sessions[si].client_slots[li].as_mut().unwrap();
            if hdr.pkt_num == 0 {
                let need = hdr.msg_size as usize;
                let resp = slot.resp.as_mut().unwrap();
                if resp.capacity() < need {
                    let mtu = resp.mtu_data();
                    *resp = MsgBuf::alloc(need, mtu).expect("response buffer growth");
                    grow_cost = true;
                }
                resp.set_data_size(need).expect("size within capacity");
            }
            let resp = slot.resp.as_mut().unwrap();
            let (off, len) = resp.pkt_data_range(hdr.pkt_num as usize).unwrap();
            resp.data_mut()[off..off + len].copy_from_slice(&pkt.bytes[HDR_SIZE..]);
        }
        if grow_cost {
            self.loop_cost_ns += self.cfg.cpu.alloc_ns;
        }
        self.loop_cost_ns += memcpy_cost(&self.cfg.cpu, pkt.bytes.len() - HDR_SIZE);
        self.transport.release_rx(pkt.desc);
        let tx_ts = {
            let slot = self.sessions[si].client_slots[li].as_ref().unwrap();
            match rtt_ref {
                RttRef::ReqPkt(i) => slot.tx_ts[i as usize],
                RttRef::RfrFor(j) => slot.rfr_ts[j as usize],
            }
        };
        self.feed_rtt(si, rx_ref, tx_ts);
        self.dirty.insert(si as u16);
        if accept == RespAccept::Complete {
            self.complete_rpc(si, li, CallStatus::Ok);
        }
    }

    fn rx_req_data(&mut self, si: usize, hdr: PacketHeader, pkt: RxPacket) {
        let n_req = num_pkts_for(hdr.msg_size as usize, self.cfg.mtu_data);
        if hdr.msg_size == 0
            || hdr.pkt_num as usize >= n_req
            || pkt.bytes.len() != HDR_SIZE + self.chunk_len(hdr.msg_size, hdr.pkt_num)
        {
            self.stats_.drops_bad_header += 1;
            self.transport.release_rx(pkt.desc);
            return;
        }
        {
            let s = &self.sessions[si];
            if s.role != SessionRole::Server || s.state != SessionState::Connected {
                self.stats_.drops_bad_state += 1;
                self.transport.release_rx(pkt.desc);
                return;
            }
        }
        let li = (hdr.req_num as usize) % self.sessions[si].num_slots;
        let action = self.sessions[si].server_slots[li].on_req_pkt(&hdr, self.cfg.mtu_data);
        match action {
            ServerAction::Drop(r) => {
                self.count_drop(r);
                self.transport.release_rx(pkt.desc);
            }
            ServerAction::AcceptMiddle { pkt_num } => {
                self.reassemble_chunk(si, li, pkt_num, &pkt.bytes);
                self.transport.release_rx(pkt.desc);
                self.queue_server_pkt(si, li, ServerTx::Cr { pkt_num });
            }
            ServerAction::AcceptLast { pkt_num } => {
                let single = self.sessions[si].server_slots[li].num_req_pkts == 1;
                let zero_copy = single
                    && self.cfg.toggles.zerocopy_rx
                    && self
                        .handlers
                        .get(&hdr.req_type)
                        .map(|e| e.mode == HandlerMode::Dispatch)
                        .unwrap_or(false);
                if zero_copy {
                    // Run the handler straight off the receive buffer; the
                    // descriptor returns to the queue when the handler does.
                    self.sessions[si].server_slots[li].req =
                        Some(ServerReqBuf::Borrowed(pkt.bytes));
                    self.dispatch_request(si, li);
                    self.transport.release_rx(pkt.desc);
                    self.copy_out_if_deferred(si, li);
                } else {
                    self.reassemble_chunk(si, li, pkt_num, &pkt.bytes);
                    self.transport.release_rx(pkt.desc);
                    self.dispatch_request(si, li);
                }
            }
            ServerAction::DupCreditReturn { pkt_num } => {
                self.transport.release_rx(pkt.desc);
                self.queue_server_pkt(si, li, ServerTx::Cr { pkt_num });
            }
            ServerAction::DupResendResp0 => {
                self.transport.release_rx(pkt.desc);
                self.queue_server_pkt(si, li, ServerTx::Resp { pkt_num: 0 });
            }
            ServerAction::SendRespPkt { .. } => unreachable!("data packets never trigger RFRs"),
        }
    }

    fn rx_rfr(&mut self, si: usize, hdr: PacketHeader, pkt: RxPacket) {
        let shape_ok = pkt.bytes.len() == HDR_SIZE;
        self.transport.release_rx(pkt.desc);
        if !shape_ok {
            self.stats_.drops_bad_header += 1;
            return;
        }
        {
            let s = &self.sessions[si];
            if s.role != SessionRole::Server || s.state != SessionState::Connected {
                self.stats_.drops_bad_state += 1;
                return;
            }
        }
        let li = (hdr.req_num as usize) % self.sessions[si].num_slots;
        match self.sessions[si].server_slots[li].on_rfr(&hdr) {
            ServerAction::SendRespPkt { pkt_num } => {
                self.queue_server_pkt(si, li, ServerTx::Resp { pkt_num });
            }
            ServerAction::Drop(r) => self.count_drop(r),
            _ => unreachable!("RFR classification"),
        }
    }

    /// Copy one request packet's payload into the slot's reassembly buffer,
    /// allocating it on the first packet of the epoch.
    fn reassemble_chunk(&mut self, si: usize, li: usize, pkt_num: u16, bytes: &[u8]) {
        let mut alloc_cost = false;
        {
            let slot = &mut self.sessions[si].server_slots[li];
            if slot.req.is_none() {
                let mut m = MsgBuf::alloc(slot.req_msg_size as usize, self.cfg.mtu_data)
                    .expect("request reassembly buffer");
                m.set_data_size(slot.req_msg_size as usize).unwrap();
                slot.req = Some(ServerReqBuf::Assembled(Rc::new(RefCell::new(m))));
                alloc_cost = true;
            }
            if let Some(ServerReqBuf::Assembled(m)) = &slot.req {
                let mut m = m.borrow_mut();
                let (off, len) = m.pkt_data_range(pkt_num as usize).unwrap();
                m.data_mut()[off..off + len].copy_from_slice(&bytes[HDR_SIZE..]);
            }
        }
        if alloc_cost {
            self.loop_cost_ns += self.cfg.cpu.alloc_ns;
        }
        self.loop_cost_ns += memcpy_cost(&self.cfg.cpu, bytes.len() - HDR_SIZE);
    }

    /// A dispatch handler returned without responding while borrowing the
    /// receive buffer: take an owned copy so the descriptor's return (which
    /// already happened from the caller's perspective) stays sound.
    fn copy_out_if_deferred(&mut self, si: usize, li: usize) {
        let needs_copy = {
            let slot = &self.sessions[si].server_slots[li];
            slot.phase == ServerPhase::Executing
                && matches!(slot.req, Some(ServerReqBuf::Borrowed(_)))
        };
        if !needs_copy {
            return;
        }
        let bytes = self.sessions[si].server_slots[li]
            .req
            .as_ref()
            .unwrap()
            .bytes();
        let m = MsgBuf::from_bytes(&bytes, self.cfg.mtu_data).expect("deferred request copy");
        self.sessions[si].server_slots[li].req =
            Some(ServerReqBuf::Assembled(Rc::new(RefCell::new(m))));
        self.loop_cost_ns += self.cfg.cpu.alloc_ns + memcpy_cost(&self.cfg.cpu, bytes.len());
    }

    /// Run or schedule the handler for the fully-received request in
    /// `(si, li)`.
    fn dispatch_request(&mut self, si: usize, li: usize) {
        let (req_num, req_type) = {
            let slot = &self.sessions[si].server_slots[li];
            (slot.cur_req_num.unwrap(), slot.req_type)
        };
        let h = ReqHandle {
            sess: si as u16,
            slot: li as u16,
            req_num,
            req_type,
        };
        self.stats_.handler_invocations += 1;
        self.loop_cost_ns += self.cfg.cpu.call_ns;
        let entry = self
            .handlers
            .get(&req_type)
            .map(|e| (e.mode, e.compute_ns, e.dispatch.clone(), e.worker.clone()));
        match entry {
            None => {
                let _ = self.enqueue_response_inner(h, b"unsupported request type", true);
            }
            Some((HandlerMode::Dispatch, compute_ns, Some(f), _)) => {
                self.loop_cost_ns += compute_ns;
                f(self, h);
            }
            Some((HandlerMode::Worker, compute_ns, _, Some(f))) => {
                let payload = self.sessions[si].server_slots[li]
                    .req
                    .as_ref()
                    .expect("request payload for worker")
                    .bytes();
                self.sessions[si].server_slots[li].req = None;
                match &mut self.workers {
                    Workers::Virtual {
                        free_at,
                        done,
                        payloads,
                        next_seq,
                    } => {
                        // Earliest-free virtual core, lowest index on ties.
                        let mut w = 0;
                        for i in 1..free_at.len() {
                            if free_at[i] < free_at[w] {
                                w = i;
                            }
                        }
                        let start = free_at[w].max(self.now_ns);
                        let done_at = start + compute_ns;
                        free_at[w] = done_at;
                        let out = f(&payload);
                        let seq = *next_seq;
                        *next_seq += 1;
                        done.push(Reverse((done_at, seq)));
                        payloads.insert(
                            seq,
                            DoneTask {
                                sess: h.sess,
                                slot: h.slot,
                                req_num: h.req_num,
                                out,
                            },
                        );
                    }
                    Workers::Threads { task_tx, .. } => {
                        let tx = task_tx.as_ref().expect("worker threads spawned");
                        let _ = tx.send(ThreadTask {
                            sess: h.sess,
                            slot: h.slot,
                            req_num: h.req_num,
                            payload,
                            f,
                        });
                    }
                }
            }
            Some(_) => unreachable!("handler entry shape"),
        }
    }

    fn drain_workers(&mut self) {
        let mut ready: Vec<DoneTask> = Vec::new();
        match &mut self.workers {
            Workers::Virtual { done, payloads, .. } => {
                while let Some(&Reverse((t, seq))) = done.peek() {
                    if t > self.now_ns {
                        break;
                    }
                    done.pop();
                    ready.push(payloads.remove(&seq).expect("task payload"));
                }
            }
            Workers::Threads { done_rx, .. } => {
                while let Ok(d) = done_rx.try_recv() {
                    ready.push(d);
                }
            }
        }
        for d in ready {
            self.finish_worker_task(d);
        }
    }

    fn finish_worker_task(&mut self, d: DoneTask) {
        let si = d.sess as usize;
        if si >= self.sessions.len() {
            return;
        }
        let (state, valid, req_type) = {
            let s = &self.sessions[si];
            let slot = &s.server_slots[d.slot as usize];
            (
                s.state,
                slot.cur_req_num == Some(d.req_num) && slot.phase == ServerPhase::Executing,
                slot.req_type,
            )
        };
        if !valid {
            return;
        }
        if state != SessionState::Connected {
            // Peer gone: discard the result, settle the slot so the session
            // can finish closing.
            self.sessions[si].server_slots[d.slot as usize].phase = ServerPhase::Responded;
            return;
        }
        let h = ReqHandle {
            sess: d.sess,
            slot: d.slot,
            req_num: d.req_num,
            req_type,
        };
        let _ = self.enqueue_response_inner(h, &d.out, false);
    }

    // ----- transmit paths ---------------------------------------------------

    fn enqueue_response_inner(&mut self, h: ReqHandle, bytes: &[u8], error: bool) -> Result<()> {
        if bytes.is_empty() || bytes.len() > crate::error::MAX_MSG_SIZE {
            return Err(Error::SizeOutOfRange { got: bytes.len() });
        }
        {
            let s = self
                .sessions
                .get(h.sess as usize)
                .ok_or_else(|| Error::Invalid(format!("no session {}", h.sess)))?;
            let slot = s
                .server_slots
                .get(h.slot as usize)
                .ok_or_else(|| Error::Invalid(format!("no slot {}", h.slot)))?;
            if slot.cur_req_num != Some(h.req_num) || slot.phase != ServerPhase::Executing {
                return Err(Error::Invalid("stale request handle".into()));
            }
        }
        self.loop_cost_ns += self.cfg.cpu.call_ns;
        let mtu = self.cfg.mtu_data;
        let use_prealloc = {
            let slot = &self.sessions[h.sess as usize].server_slots[h.slot as usize];
            self.cfg.toggles.prealloc_responses
                && bytes.len() <= mtu
                && Rc::strong_count(&slot.prealloc) == 1
        };
        let rc = if use_prealloc {
            let slot = &self.sessions[h.sess as usize].server_slots[h.slot as usize];
            {
                let mut b = slot.prealloc.borrow_mut();
                b.set_data_size(bytes.len()).expect("fits preallocation");
                b.data_mut().copy_from_slice(bytes);
            }
            slot.prealloc.clone()
        } else {
            self.loop_cost_ns += self.cfg.cpu.alloc_ns;
            Rc::new(RefCell::new(MsgBuf::from_bytes(bytes, mtu)?))
        };
        self.loop_cost_ns += memcpy_cost(&self.cfg.cpu, bytes.len());
        let n = rc.borrow().num_pkts();
        {
            let s = &self.sessions[h.sess as usize];
            let flags = if error { FLAG_ERROR_RESPONSE } else { 0 };
            let mut b = rc.borrow_mut();
            for j in 0..n {
                let mut hd = PacketHeader::new(PktType::RespData, h.req_type, s.remote_num);
                hd.pkt_num = j as u16;
                hd.flags = flags;
                hd.req_num = h.req_num;
                hd.msg_size = bytes.len() as u32;
                b.write_pkt_header(j, &hd);
            }
        }
        {
            let slot = &mut self.sessions[h.sess as usize].server_slots[h.slot as usize];
            if !slot.set_response(rc, error) {
                return Err(Error::Invalid("response already enqueued".into()));
            }
            slot.req = None;
        }
        self.queue_server_pkt(h.sess as usize, h.slot as usize, ServerTx::Resp { pkt_num: 0 });
        Ok(())
    }

    /// Build and queue one server-side packet (credit return or response
    /// data). Server transmissions are answers to client packets, so they
    /// never pass through congestion control.
    fn queue_server_pkt(&mut self, si: usize, li: usize, what: ServerTx) {
        self.charge_tx_ts();
        let pkt = {
            let s = &self.sessions[si];
            let slot = &s.server_slots[li];
            let req_num = slot.cur_req_num.expect("active epoch");
            match what {
                ServerTx::Cr { pkt_num } => {
                    let mut h = PacketHeader::new(PktType::CreditReturn, slot.req_type, s.remote_num);
                    h.pkt_num = pkt_num;
                    h.req_num = req_num;
                    h.msg_size = slot.req_msg_size;
                    TxPacket {
                        to: s.remote,
                        hdr: h,
                        payload: TxPayload::None,
                    }
                }
                ServerTx::Resp { pkt_num } => {
                    let rc = slot.resp.clone().expect("response set");
                    let msg = rc.borrow().data_size() as u32;
                    let mut h = PacketHeader::new(PktType::RespData, slot.req_type, s.remote_num);
                    h.pkt_num = pkt_num;
                    h.flags = if slot.resp_error { FLAG_ERROR_RESPONSE } else { 0 };
                    h.req_num = req_num;
                    h.msg_size = msg;
                    TxPacket {
                        to: s.remote,
                        hdr: h,
                        payload: TxPayload::Msgbuf {
                            buf: rc,
                            pkt_idx: pkt_num,
                        },
                    }
                }
            }
        };
        match what {
            ServerTx::Cr { .. } => self.stats_.crs_tx += 1,
            ServerTx::Resp { .. } => self.stats_.resp_pkts_tx += 1,
        }
        self.loop_cost_ns += self.cfg.cpu.direct_tx_ns;
        self.stats_.direct_tx += 1;
        self.pending_tx.push(pkt);
    }

    /// Route one client-side transmission through congestion control: out
    /// the NIC immediately, or parked in the timing wheel.
    fn queue_client_pkt(&mut self, si: usize, li: usize, send: ClientSend) {
        let now = self.now_ns;
        let (pkt, wsend, retx) = {
            let s = &self.sessions[si];
            let remote = s.remote;
            let remote_num = s.remote_num;
            let slot = s.client_slots[li].as_ref().expect("occupied slot");
            let req_num = slot.req_num;
            match send {
                ClientSend::Req { pkt_num, retx } => {
                    let msg = slot.req.borrow().data_size() as u32;
                    let mut h = PacketHeader::new(PktType::ReqData, slot.req_type, remote_num);
                    h.pkt_num = pkt_num;
                    h.req_num = req_num;
                    h.msg_size = msg;
                    slot.req.borrow_mut().write_pkt_header(pkt_num as usize, &h);
                    (
                        TxPacket {
                            to: remote,
                            hdr: h,
                            payload: TxPayload::Msgbuf {
                                buf: slot.req.clone(),
                                pkt_idx: pkt_num,
                            },
                        },
                        WheelSend::Req { pkt_num, retx },
                        retx,
                    )
                }
                ClientSend::Rfr { pkt_num, retx } => {
                    let mut h =
                        PacketHeader::new(PktType::RequestForResponse, slot.req_type, remote_num);
                    h.pkt_num = pkt_num;
                    h.req_num = req_num;
                    h.msg_size = slot.resp_msg_size;
                    (
                        TxPacket {
                            to: remote,
                            hdr: h,
                            payload: TxPayload::None,
                        },
                        WheelSend::Rfr { pkt_num },
                        retx,
                    )
                }
            }
        };
        if retx {
            self.stats_.retransmissions += 1;
        }
        let decision = if !self.cfg.toggles.cc {
            TxDecision::Transmit
        } else {
            let bypass_ok = self.cfg.toggles.limiter_bypass;
            let s = &mut self.sessions[si];
            let uncongested = s.timely.is_uncongested(&self.cfg.knobs);
            s.pacer.schedule_or_bypass(
                now,
                pkt.wire_len(),
                s.timely.rate_bps(),
                uncongested && bypass_ok,
            )
        };
        match decision {
            TxDecision::Transmit => {
                self.transmit_client_pkt(si, li, pkt, wsend);
            }
            TxDecision::Scheduled { release_ns } => {
                self.loop_cost_ns += self.cfg.cpu.wheel_insert_ns;
                self.stats_.wheel_inserts += 1;
                let rto = self.cfg.rto_ns;
                let (sess, slot_idx, req_num) = {
                    let slot = self.sessions[si].client_slots[li].as_mut().unwrap();
                    slot.wheel_queued += 1;
                    if let WheelSend::Req { retx: true, .. } = wsend {
                        slot.retx_req_in_wheel += 1;
                    }
                    slot.rto_deadline = Some(now + rto);
                    (si as u16, li as u16, slot.req_num)
                };
                self.rto_heap.push(Reverse((now + rto, sess, slot_idx, req_num)));
                self.wheel.insert(
                    release_ns,
                    now,
                    WheelItem {
                        sess,
                        slot: slot_idx,
                        req_num,
                        pkt,
                        send: wsend,
                    },
                );
            }
        }
    }

    /// Hand one client packet to the NIC queue now, stamping its transmit
    /// time and refreshing the slot's retransmission deadline.
    fn transmit_client_pkt(&mut self, si: usize, li: usize, pkt: TxPacket, wsend: WheelSend) {
        self.charge_tx_ts();
        self.loop_cost_ns += self.cfg.cpu.direct_tx_ns;
        self.stats_.direct_tx += 1;
        let now = self.now_ns;
        let rto = self.cfg.rto_ns;
        let (sess, slot_idx, req_num) = {
            let slot = self.sessions[si].client_slots[li].as_mut().expect("slot");
            match wsend {
                WheelSend::Req { pkt_num, .. } => {
                    slot.tx_ts[pkt_num as usize] = now;
                    self.stats_.req_pkts_tx += 1;
                }
                WheelSend::Rfr { pkt_num } => {
                    slot.rfr_ts[pkt_num as usize] = now;
                    self.stats_.rfrs_tx += 1;
                }
            }
            slot.rto_deadline = Some(now + rto);
            (si as u16, li as u16, slot.req_num)
        };
        self.rto_heap.push(Reverse((now + rto, sess, slot_idx, req_num)));
        self.pending_tx.push(pkt);
    }

    /// Feed one RTT sample (ns timestamps) to stats and, when congestion
    /// control is on, to the session's rate computation.
    fn feed_rtt(&mut self, si: usize, rx_ts: u64, tx_ts: u64) {
        let rtt_us = (rx_ts.saturating_sub(tx_ts).max(1)) as f64 / 1000.0;
        self.stats_.record_rtt(rtt_us);
        if !self.cfg.toggles.cc {
            return;
        }
        let (updated, bypassed) = {
            let s = &mut self.sessions[si];
            let before = s.timely.updates;
            s.timely
                .record_rtt_and_update(rtt_us, &self.cfg.knobs, self.cfg.toggles.timely_bypass);
            (s.timely.updates > before, s.timely.updates == before)
        };
        if updated {
            self.loop_cost_ns += self.cfg.cpu.timely_update_ns;
            self.stats_.timely_updates += 1;
        } else if bypassed {
            self.stats_.timely_bypasses += 1;
        }
    }

    // ----- timers and liveness ----------------------------------------------

    fn scan_rtos(&mut self) {
        let now = self.now_ns;
        let mut due = Vec::new();
        while let Some(&Reverse((dl, s, sl, rn))) = self.rto_heap.peek() {
            if dl > now {
                break;
            }
            self.rto_heap.pop();
            due.push((dl, s, sl, rn));
        }
        for (dl, s, sl, rn) in due {
            self.handle_rto(dl, s, sl, rn);
        }
    }

    fn handle_rto(&mut self, dl: u64, sess: u16, slot_idx: u16, req_num: u32) {
        let now = self.now_ns;
        let rto = self.cfg.rto_ns;
        let si = sess as usize;
        let li = slot_idx as usize;
        if si >= self.sessions.len() {
            return;
        }
        {
            let s = &self.sessions[si];
            if s.role != SessionRole::Client || s.state != SessionState::Connected {
                return;
            }
            let slot = match s.client_slots.get(li).and_then(|x| x.as_ref()) {
                Some(sl) => sl,
                None => return,
            };
            if slot.req_num != req_num {
                return;
            }
            match slot.rto_deadline {
                // This heap entry is the live one.
                Some(d) if d == dl => {}
                // A later transmission refreshed the deadline; re-arm.
                Some(d) if d > dl => {
                    self.rto_heap.push(Reverse((d, sess, slot_idx, req_num)));
                    return;
                }
                _ => return,
            }
        }
        // Never roll back while this slot still has packets waiting in the
        // wheel: they have not been lost, merely not sent yet.
        {
            let slot = self.sessions[si].client_slots[li].as_mut().unwrap();
            if slot.wheel_queued > 0 {
                slot.rto_deadline = Some(now + rto);
                self.stats_.rtos_deferred_wheel += 1;
                self.rto_heap.push(Reverse((now + rto, sess, slot_idx, req_num)));
                return;
            }
        }
        self.stats_.rtos_fired += 1;
        let rounds = self.sessions[si].client_slots[li]
            .as_ref()
            .unwrap()
            .retx_rounds;
        if rounds >= self.cfg.max_retx_rounds {
            self.complete_rpc(si, li, CallStatus::Timeout);
            return;
        }
        let _reclaimed = self.sessions[si].with_slot_credits(li, |sl, c| sl.rollback(c));
        let sends = self.sessions[si].with_slot_credits(li, |sl, c| sl.tx_step(c));
        for send in sends {
            self.queue_client_pkt(si, li, send);
        }
        // Push the retransmission into the NIC queue, then flush so no stale
        // reference survives once the response arrives.
        self.flush_pending_tx();
        self.transport.flush_tx();
        self.loop_cost_ns += self.cfg.cpu.flush_tx_ns;
        self.stats_.tx_flushes += 1;
        {
            let slot = self.sessions[si].client_slots[li].as_mut().unwrap();
            slot.rto_deadline = Some(now + rto);
        }
        self.rto_heap.push(Reverse((now + rto, sess, slot_idx, req_num)));
        self.dirty.insert(sess);
    }

    fn tx_steps(&mut self) {
        if self.dirty.is_empty() {
            return;
        }
        let dirty: Vec<u16> = std::mem::take(&mut self.dirty).into_iter().collect();
        for sess in dirty {
            let si = sess as usize;
            {
                let s = &self.sessions[si];
                if s.role != SessionRole::Client || s.state != SessionState::Connected {
                    continue;
                }
            }
            self.sessions[si].drain_backlog();
            let n_slots = self.sessions[si].num_slots;
            for li in 0..n_slots {
                if self.sessions[si].client_slots[li].is_none() {
                    continue;
                }
                let sends = self.sessions[si].with_slot_credits(li, |sl, c| sl.tx_step(c));
                for send in sends {
                    self.queue_client_pkt(si, li, send);
                }
                if self.sessions[si].credits() == 0 {
                    break;
                }
            }
        }
    }

    fn poll_wheel(&mut self) {
        if self.wheel.is_empty() {
            return;
        }
        let now = self.now_ns;
        let rto = self.cfg.rto_ns;
        let entries = self.wheel.poll(now);
        for e in entries {
            let WheelItem {
                sess,
                slot: slot_idx,
                req_num,
                mut pkt,
                send,
            } = e.item;
            self.charge_tx_ts();
            self.loop_cost_ns += self.cfg.cpu.direct_tx_ns;
            self.stats_.direct_tx += 1;
            let si = sess as usize;
            let li = slot_idx as usize;
            let mut current = false;
            if si < self.sessions.len() {
                if let Some(sl) = self.sessions[si]
                    .client_slots
                    .get_mut(li)
                    .and_then(|x| x.as_mut())
                {
                    if sl.req_num == req_num {
                        current = true;
                        sl.wheel_queued -= 1;
                        match send {
                            WheelSend::Req { pkt_num, retx } => {
                                if retx {
                                    sl.retx_req_in_wheel -= 1;
                                    // Retransmissions forfeit zero copy: own
                                    // the bytes now so the request buffer can
                                    // return to the app as soon as the
                                    // response lands.
                                    pkt.payload.materialize();
                                }
                                sl.tx_ts[pkt_num as usize] = now;
                                self.stats_.req_pkts_tx += 1;
                            }
                            WheelSend::Rfr { pkt_num } => {
                                sl.rfr_ts[pkt_num as usize] = now;
                                self.stats_.rfrs_tx += 1;
                            }
                        }
                        sl.rto_deadline = Some(now + rto);
                        self.rto_heap
                            .push(Reverse((now + rto, sess, slot_idx, req_num)));
                        if let WheelSend::Req { retx: true, .. } = send {
                            self.loop_cost_ns +=
                                memcpy_cost(&self.cfg.cpu, pkt.payload.len());
                        }
                    }
                }
            }
            if !current {
                // The slot moved on (epoch retired under failure/timeout, or
                // a stale re-solicitation). Transmit anyway — receivers drop
                // duplicates — but never keep a buffer reference.
                debug_assert!(
                    matches!(send, WheelSend::Rfr { .. }),
                    "stale wheel entry must be header-only"
                );
                pkt.payload.materialize();
                self.stats_.wheel_stale_releases += 1;
            }
            self.pending_tx.push(pkt);
        }
    }

    fn liveness_steps(&mut self) {
        let now = self.now_ns;
        if self.connecting > 0 {
            for si in 0..self.sessions.len() {
                let (resend, remote) = {
                    let s = &self.sessions[si];
                    (
                        s.role == SessionRole::Client
                            && s.state == SessionState::Connecting
                            && now.saturating_sub(s.connect_sent_at) >= CONNECT_RETRY_NS,
                        s.remote,
                    )
                };
                if resend {
                    let s = &mut self.sessions[si];
                    s.connect_sent_at = now;
                    let frame = MgmtFrame::ConnectReq {
                        client_session: s.local_num,
                        credits: s.credit_budget as u16,
                        num_slots: s.num_slots as u16,
                        mtu_data: self.cfg.mtu_data as u32,
                    };
                    self.transport.mgmt_send(remote, frame);
                }
            }
        }
        if !self.dying.is_empty() {
            let dying = std::mem::take(&mut self.dying);
            for sess in dying {
                let si = sess as usize;
                let n_slots = self.sessions[si].num_slots;
                for li in 0..n_slots {
                    let ready = matches!(
                        self.sessions[si].client_slots[li].as_ref(),
                        Some(sl) if sl.wheel_queued == 0
                    );
                    if ready {
                        self.complete_rpc(si, li, CallStatus::NodeFailure);
                    }
                }
                if self.sessions[si].has_active_slots() {
                    self.dying.push(sess);
                }
            }
        }
        if !self.closing_srv.is_empty() {
            let closing = std::mem::take(&mut self.closing_srv);
            for sess in closing {
                let si = sess as usize;
                if self.sessions[si].has_executing_handlers() {
                    self.closing_srv.push(sess);
                    continue;
                }
                let s = &mut self.sessions[si];
                s.state = SessionState::Disconnected;
                for slot in &mut s.server_slots {
                    slot.req = None;
                    slot.resp = None;
                }
                self.committed_credits -= s.credit_budget;
            }
        }
        if now >= self.next_heartbeat_ns {
            self.next_heartbeat_ns = now + self.cfg.heartbeat_period_ns;
            let peers: Vec<(EndpointId, PeerState)> = self
                .peers
                .iter()
                .filter(|(_, p)| p.alive)
                .map(|(k, v)| (*k, *v))
                .collect();
            for (id, st) in peers {
                if now.saturating_sub(st.last_heard_ns) > self.cfg.failure_timeout_ns {
                    self.handle_node_failure(id);
                } else {
                    self.transport.mgmt_send(id, MgmtFrame::Heartbeat);
                }
            }
        }
    }

    // ----- completion --------------------------------------------------------

    /// Retire a client slot, returning both buffers to the application
    /// through its continuation (exactly once).
    fn complete_rpc(&mut self, si: usize, li: usize, status: CallStatus) {
        let now = self.now_ns;
        let slot = self.sessions[si].client_slots[li]
            .take()
            .expect("completing an occupied slot");
        let req_id = slot.req.borrow().id();
        if self.transport.tx_holds_msgbuf(req_id) {
            // Last-resort flush; the retransmission path should have cleared
            // every NIC reference already.
            self.transport.flush_tx();
            self.loop_cost_ns += self.cfg.cpu.flush_tx_ns;
            self.stats_.tx_flushes += 1;
        }
        let request = match Rc::try_unwrap(slot.req) {
            Ok(cell) => cell.into_inner(),
            Err(rc) => {
                // Ownership invariant broken — surface it loudly in stats
                // (tests pin this to zero) and fall back to a copy.
                self.stats_.ownership_violations += 1;
                let b = rc.borrow();
                let mut m = MsgBuf::alloc(b.capacity().max(1), b.mtu_data()).expect("rebuild");
                m.set_data_size(b.data_size()).unwrap();
                m.data_mut().copy_from_slice(b.data());
                m
            }
        };
        let mut response = slot.resp.expect("response buffer");
        if status != CallStatus::Ok {
            // No valid payload was delivered.
            response.set_data_size(0).ok();
        }
        match status {
            CallStatus::Ok => {
                self.stats_.rpcs_completed += 1;
                self.stats_.req_bytes_sent += request.data_size() as u64;
                self.stats_.resp_bytes_delivered += response.data_size() as u64;
                let lat_us = (now.saturating_sub(slot.enqueue_ts)) as f64 / 1000.0;
                self.stats_.record_latency(lat_us);
            }
            CallStatus::Timeout => self.stats_.rpcs_timed_out += 1,
            CallStatus::NodeFailure => self.stats_.rpcs_failed += 1,
        }
        self.loop_cost_ns += self.cfg.cpu.call_ns;
        let cont = self
            .conts
            .remove(&slot.cont_token)
            .expect("continuation invoked exactly once");
        cont(
            self,
            CallResult {
                status,
                request,
                response,
                resp_error: slot.resp_error,
            },
        );
        self.dirty.insert(si as u16);
    }

    fn fail_client_session_already_counted(&mut self, si: usize) {
        self.sessions[si].state = SessionState::Failed;
        self.drain_failed_client(si);
    }

    fn fail_client_session(&mut self, si: usize) {
        if self.sessions[si].state == SessionState::Connecting {
            self.connecting -= 1;
        }
        self.sessions[si].state = SessionState::Failed;
        self.drain_failed_client(si);
    }

    fn drain_failed_client(&mut self, si: usize) {
        // Backlogged requests never touched the wire; fail them directly.
        while let Some(p) = self.sessions[si].backlog.pop_front() {
            let cont = self.conts.remove(&p.cont_token).expect("backlog continuation");
            self.stats_.rpcs_failed += 1;
            self.loop_cost_ns += self.cfg.cpu.call_ns;
            cont(
                self,
                CallResult {
                    status: CallStatus::NodeFailure,
                    request: p.req,
                    response: p.resp,
                    resp_error: false,
                },
            );
        }
        let n_slots = self.sessions[si].num_slots;
        let mut defer = false;
        for li in 0..n_slots {
            match self.sessions[si].client_slots[li].as_ref() {
                Some(sl) if sl.wheel_queued == 0 => {
                    self.complete_rpc(si, li, CallStatus::NodeFailure);
                }
                Some(_) => defer = true,
                None => {}
            }
        }
        if defer {
            self.dying.push(si as u16);
        }
    }
}

/// Retry period for unanswered connection requests, ns.
const CONNECT_RETRY_NS: u64 = 20_000_000;

/// Server-side transmissions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ServerTx {
    Cr { pkt_num: u16 },
    Resp { pkt_num: u16 },
}

/// Modeled cost of copying `len` bytes.
fn memcpy_cost(cpu: &crate::config::CpuModel, len: usize) -> u64 {
    if len == 0 {
        0
    } else {
        ((len as u64) * cpu.memcpy_ns_per_kb).div_ceil(1024).max(1)
    }
}
