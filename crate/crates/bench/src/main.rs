//! Benchmark harness: latency, rate, bandwidth, incast, and key-value
//! workloads over either the deterministic simulator (default; virtual time,
//! reproducible) or real UDP loopback sockets (smoke tests only).
//!
//! Every run echoes its full configuration, seed, and git revision, prints an
//! aligned result table, and optionally writes the rows as CSV. Simulator
//! runs with the same inputs produce byte-identical output.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dgrpc::simnet::scenario::{
    bandwidth_scenario, incast_scenario, kv_scenario, latency_scenario, loss_sweep,
    rate_scenario, KvCfg, ScenarioOut,
};
use dgrpc::simnet::NetConfig;
use dgrpc::stats::{percentile, ReportRow};
use dgrpc::{RpcConfig, MAX_MSG_SIZE};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "RPC-over-datagrams benchmark harness (simulated network by default)"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    /// Deterministic discrete-event simulator (virtual time).
    Sim,
    /// Real UDP sockets on loopback (wall clock; latency subcommand only).
    Udp,
}

#[derive(Args, Clone)]
struct Common {
    /// Transport backend.
    #[arg(long, value_enum, default_value = "sim")]
    transport: TransportKind,

    /// Requests kept in flight per client (pipeline depth).
    #[arg(long, default_value_t = 8)]
    batch: usize,

    /// Per-session credit budget C.
    #[arg(long, default_value_t = 8)]
    credits: u32,

    /// Per-link-traversal packet loss probability.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,

    /// Clients converging on one server (incast).
    #[arg(long, default_value_t = 50)]
    fan_in: usize,

    /// Disable congestion control entirely.
    #[arg(long)]
    disable_cc: bool,

    /// Disable the rate-update bypass for uncongested sessions.
    #[arg(long)]
    disable_timely_bypass: bool,

    /// Disable the rate-limiter bypass for uncongested sessions.
    #[arg(long)]
    disable_limiter_bypass: bool,

    /// Timestamp every packet instead of once per RX/TX batch.
    #[arg(long)]
    disable_batched_ts: bool,

    /// Allocate every response instead of reusing preallocated buffers.
    #[arg(long)]
    disable_prealloc: bool,

    /// Copy every request out of the receive ring before dispatch.
    #[arg(long)]
    disable_zerocopy_rx: bool,

    /// Seed for every randomized choice (loss draws, workload mix).
    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Write result rows as CSV to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Round-trip latency of small echo RPCs, one outstanding.
    Latency {
        #[command(flatten)]
        common: Common,
        /// Request (and response) payload bytes.
        #[arg(long, default_value_t = 32)]
        msg_size: usize,
        /// Number of RPCs.
        #[arg(long, default_value_t = 1000)]
        n: u64,
    },
    /// Peak small-RPC rate between two symmetric endpoints.
    Rate {
        #[command(flatten)]
        common: Common,
        /// RPCs per side.
        #[arg(long, default_value_t = 200_000)]
        n: u64,
        /// Additionally disable data-path optimizations one by one
        /// (cumulative) and report each configuration.
        #[arg(long)]
        factor_analysis: bool,
    },
    /// Large-message goodput with one request outstanding.
    Bandwidth {
        #[command(flatten)]
        common: Common,
        /// Request payload bytes (max 8 MiB).
        #[arg(long, default_value_t = 8 << 20)]
        msg_size: usize,
        /// Number of transfers per measured point.
        #[arg(long, default_value_t = 3)]
        n: u64,
        /// Sweep canonical loss rates 0, 1e-7 .. 1e-2 instead of --loss.
        #[arg(long)]
        sweep: bool,
    },
    /// Many-to-one incast of large requests.
    Incast {
        #[command(flatten)]
        common: Common,
        /// Request payload bytes.
        #[arg(long, default_value_t = 1 << 20)]
        msg_size: usize,
        /// Sequential requests per client.
        #[arg(long, default_value_t = 2)]
        rpcs_per_client: u64,
        /// Run both with and without congestion control and report both.
        #[arg(long)]
        compare_cc: bool,
        /// Shared switch buffer pool, bytes.
        #[arg(long, default_value_t = 1 << 20)]
        switch_buf: usize,
    },
    /// In-memory key-value workload: dispatch-mode GET/PUT, worker-mode SCAN.
    Kv {
        #[command(flatten)]
        common: Common,
        /// Total operations across all clients.
        #[arg(long, default_value_t = 20_000)]
        ops: u64,
        /// Closed-loop client hosts.
        #[arg(long, default_value_t = 2)]
        clients: usize,
        /// Value size, bytes.
        #[arg(long, default_value_t = 64)]
        val_size: usize,
        /// Kill the server this many microseconds in (fault-injection demo).
        #[arg(long)]
        kill_at_us: Option<u64>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Latency {
            common,
            msg_size,
            n,
        } => cmd_latency(common, msg_size, n),
        Cmd::Rate {
            common,
            n,
            factor_analysis,
        } => cmd_rate(common, n, factor_analysis),
        Cmd::Bandwidth {
            common,
            msg_size,
            n,
            sweep,
        } => cmd_bandwidth(common, msg_size, n, sweep),
        Cmd::Incast {
            common,
            msg_size,
            rpcs_per_client,
            compare_cc,
            switch_buf,
        } => cmd_incast(common, msg_size, rpcs_per_client, compare_cc, switch_buf),
        Cmd::Kv {
            common,
            ops,
            clients,
            val_size,
            kill_at_us,
        } => cmd_kv(common, ops, clients, val_size, kill_at_us),
    }
}

fn validate(c: &Common) -> Result<()> {
    if c.batch == 0 {
        bail!("--batch must be >= 1");
    }
    if c.credits == 0 {
        bail!("--credits must be >= 1");
    }
    if !(0.0..1.0).contains(&c.loss) {
        bail!("--loss must be in [0, 1)");
    }
    if c.fan_in == 0 {
        bail!("--fan-in must be >= 1");
    }
    Ok(())
}

fn rpc_config(c: &Common) -> RpcConfig {
    let mut cfg = RpcConfig::default();
    cfg.credits = c.credits;
    cfg.num_slots = cfg.num_slots.max(c.batch);
    cfg.toggles.cc = !c.disable_cc;
    cfg.toggles.timely_bypass = !c.disable_timely_bypass;
    cfg.toggles.limiter_bypass = !c.disable_limiter_bypass;
    cfg.toggles.batched_ts = !c.disable_batched_ts;
    cfg.toggles.prealloc_responses = !c.disable_prealloc;
    cfg.toggles.zerocopy_rx = !c.disable_zerocopy_rx;
    cfg
}

fn net_config(c: &Common) -> NetConfig {
    NetConfig {
        loss: c.loss,
        seed: c.seed,
        ..NetConfig::default()
    }
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Configuration echo: every knob that affects the run, plus seed and
/// revision, so a report is reproducible from its own header.
fn header_lines(cmd: &str, c: &Common, extra: &[(&str, String)]) -> Vec<String> {
    let t = match c.transport {
        TransportKind::Sim => "sim",
        TransportKind::Udp => "udp",
    };
    let mut lines = vec![
        format!("command: {cmd}"),
        format!("transport: {t}"),
        format!("git_revision: {}", git_revision()),
        format!("seed: {}", c.seed),
        format!(
            "batch: {} credits: {} loss: {} fan_in: {}",
            c.batch, c.credits, c.loss, c.fan_in
        ),
        format!(
            "toggles: cc={} timely_bypass={} limiter_bypass={} batched_ts={} prealloc={} zerocopy_rx={}",
            !c.disable_cc,
            !c.disable_timely_bypass,
            !c.disable_limiter_bypass,
            !c.disable_batched_ts,
            !c.disable_prealloc,
            !c.disable_zerocopy_rx
        ),
    ];
    for (k, v) in extra {
        lines.push(format!("{k}: {v}"));
    }
    lines
}

/// Print the header and an aligned table to stdout; write CSV if asked.
fn emit(c: &Common, header: &[String], rows: &[ScenarioOut]) -> Result<()> {
    for l in header {
        println!("# {l}");
    }
    println!(
        "{:<14} {:>6} {:>3} {:>9} {:>11} {:>11} {:>12} {:>12} {:>13} {:>8} {:>7}",
        "scenario",
        "fan_in",
        "cc",
        "bytes",
        "p50_rtt_us",
        "p99_rtt_us",
        "p999_rtt_us",
        "goodput_gbps",
        "rpcs_per_sec",
        "retx",
        "drops"
    );
    for r in rows {
        println!(
            "{:<14} {:>6} {:>3} {:>9} {:>11.3} {:>11.3} {:>12.3} {:>12.3} {:>13.0} {:>8} {:>7}",
            r.scenario,
            r.fan_in,
            if r.cc { "on" } else { "off" },
            r.msg_bytes,
            r.p50_rtt_us,
            r.p99_rtt_us,
            r.p999_rtt_us,
            r.goodput_gbps,
            r.rpcs_per_sec,
            r.retransmissions,
            r.wire_drops()
        );
    }
    for r in rows {
        if r.timed_out + r.failed > 0 {
            println!(
                "note: {} completed {}, timed out {}, failed {}",
                r.scenario, r.completed, r.timed_out, r.failed
            );
        }
    }
    if let Some(path) = &c.out {
        let mut csv = String::new();
        for l in header {
            writeln!(csv, "# {l}")?;
        }
        writeln!(csv, "{}", ReportRow::csv_header())?;
        for r in rows {
            writeln!(csv, "{}", r.to_report_row().to_csv())?;
        }
        std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
        println!("csv written to {}", path.display());
    }
    Ok(())
}

fn cmd_latency(c: Common, msg_size: usize, n: u64) -> Result<()> {
    validate(&c)?;
    if msg_size == 0 || msg_size > MAX_MSG_SIZE {
        bail!("--msg-size must be in 1..={MAX_MSG_SIZE}");
    }
    let extra = [
        ("msg_size", msg_size.to_string()),
        ("rpcs", n.to_string()),
    ];
    let header = header_lines("latency", &c, &extra);
    let row = match c.transport {
        TransportKind::Sim => latency_scenario(net_config(&c), rpc_config(&c), msg_size, n)?,
        TransportKind::Udp => udp_latency(&c, msg_size, n)?,
    };
    emit(&c, &header, &[row])
}

fn cmd_rate(c: Common, n: u64, factor_analysis: bool) -> Result<()> {
    validate(&c)?;
    if c.transport == TransportKind::Udp {
        bail!("the rate benchmark runs on the simulator; UDP mode is latency-only");
    }
    let extra = [
        ("rpcs_per_side", n.to_string()),
        ("factor_analysis", factor_analysis.to_string()),
    ];
    let header = header_lines("rate", &c, &extra);
    let mut rows = Vec::new();
    let base = rpc_config(&c);
    let run = |cfg: RpcConfig, name: &str| -> Result<ScenarioOut> {
        let mut row = rate_scenario(net_config(&c), cfg, c.batch, n)?;
        row.scenario = name.to_string();
        Ok(row)
    };
    rows.push(run(base.clone(), "rate")?);
    if factor_analysis {
        // Cumulatively disable the data-path optimizations, mirroring a
        // factor analysis: each step keeps the previous steps disabled.
        let mut cfg = base;
        cfg.toggles.batched_ts = false;
        rows.push(run(cfg.clone(), "rate-ts")?);
        cfg.toggles.prealloc_responses = false;
        rows.push(run(cfg.clone(), "rate-ts-pre")?);
        cfg.toggles.zerocopy_rx = false;
        rows.push(run(cfg.clone(), "rate-ts-pre-zc")?);
    }
    emit(&c, &header, &rows)
}

fn cmd_bandwidth(c: Common, msg_size: usize, n: u64, sweep: bool) -> Result<()> {
    validate(&c)?;
    if c.transport == TransportKind::Udp {
        bail!("the bandwidth benchmark runs on the simulator; UDP mode is latency-only");
    }
    if msg_size == 0 || msg_size > MAX_MSG_SIZE {
        bail!("--msg-size must be in 1..={MAX_MSG_SIZE}");
    }
    let extra = [
        ("msg_size", msg_size.to_string()),
        ("transfers_per_point", n.to_string()),
        ("sweep", sweep.to_string()),
    ];
    let header = header_lines("bandwidth", &c, &extra);
    let mut cfg = rpc_config(&c);
    // One outstanding large transfer wants a credit window covering the
    // bandwidth-delay product unless the user pinned credits explicitly.
    if c.credits == 8 {
        cfg.credits = 32;
    }
    let rows = if sweep {
        let rates = [0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
        loss_sweep(net_config(&c), cfg, msg_size, n, &rates)?
            .into_iter()
            .map(|(loss, mut r)| {
                r.scenario = format!("bw@{loss:.0e}");
                r
            })
            .collect()
    } else {
        vec![bandwidth_scenario(net_config(&c), cfg, msg_size, n)?]
    };
    emit(&c, &header, &rows)
}

fn cmd_incast(
    c: Common,
    msg_size: usize,
    rpcs_per_client: u64,
    compare_cc: bool,
    switch_buf: usize,
) -> Result<()> {
    validate(&c)?;
    if c.transport == TransportKind::Udp {
        bail!("the incast benchmark runs on the simulator; UDP mode is latency-only");
    }
    if msg_size == 0 || msg_size > MAX_MSG_SIZE {
        bail!("--msg-size must be in 1..={MAX_MSG_SIZE}");
    }
    let extra = [
        ("msg_size", msg_size.to_string()),
        ("rpcs_per_client", rpcs_per_client.to_string()),
        ("switch_buf", switch_buf.to_string()),
    ];
    let header = header_lines("incast", &c, &extra);
    let net = NetConfig {
        switch_buf_bytes: switch_buf,
        ..net_config(&c)
    };
    let mut rows = Vec::new();
    if compare_cc {
        for cc in [false, true] {
            let mut cfg = rpc_config(&c);
            cfg.toggles.cc = cc;
            rows.push(incast_scenario(
                net.clone(),
                cfg,
                c.fan_in,
                msg_size,
                rpcs_per_client,
            )?);
        }
    } else {
        rows.push(incast_scenario(
            net,
            rpc_config(&c),
            c.fan_in,
            msg_size,
            rpcs_per_client,
        )?);
    }
    emit(&c, &header, &rows)?;
    if compare_cc && rows[1].p50_rtt_us > 0.0 {
        println!(
            "cc-off/cc-on median RTT ratio: {:.2}",
            rows[0].p50_rtt_us / rows[1].p50_rtt_us
        );
    }
    Ok(())
}

fn cmd_kv(
    c: Common,
    ops: u64,
    clients: usize,
    val_size: usize,
    kill_at_us: Option<u64>,
) -> Result<()> {
    validate(&c)?;
    if c.transport == TransportKind::Udp {
        bail!("the kv benchmark runs on the simulator; UDP mode is latency-only");
    }
    let kv = KvCfg {
        ops,
        clients,
        val_bytes: val_size,
        pipeline: c.batch,
        seed: c.seed,
        kill_server_at: kill_at_us.map(|us| us * 1_000),
        ..KvCfg::default()
    };
    let extra = [
        ("ops", ops.to_string()),
        ("clients", clients.to_string()),
        ("val_size", val_size.to_string()),
        (
            "kill_at_us",
            kill_at_us.map_or("none".into(), |v| v.to_string()),
        ),
    ];
    let header = header_lines("kv", &c, &extra);
    let row = kv_scenario(net_config(&c), rpc_config(&c), kv)?;
    emit(&c, &header, &[row])
}

/// Loopback smoke test on real sockets: two in-process endpoints, driven
/// alternately on the wall clock.
fn udp_latency(c: &Common, msg_size: usize, n: u64) -> Result<ScenarioOut> {
    use dgrpc::endpoint::{CallStatus, Rpc};
    use dgrpc::msgbuf::MsgBuf;
    use dgrpc::session::SessionState;
    use dgrpc::udp::{wall_now_ns, UdpTransport};
    use dgrpc::EndpointId;
    use std::cell::Cell;
    use std::rc::Rc;
    use std::time::{Duration, Instant};

    if c.loss != 0.0 {
        bail!("--loss applies to the simulator; UDP loopback has no loss injection");
    }
    let any: std::net::SocketAddr = "127.0.0.1:0".parse().unwrap();
    let cfg = rpc_config(c);
    let mut ta = UdpTransport::bind(any, EndpointId::new(0, 0), cfg.mtu_data, cfg.rq_capacity)?;
    let mut tb = UdpTransport::bind(any, EndpointId::new(1, 0), cfg.mtu_data, cfg.rq_capacity)?;
    let (aa, ba) = (ta.local_addr()?, tb.local_addr()?);
    ta.add_peer(EndpointId::new(1, 0), ba);
    tb.add_peer(EndpointId::new(0, 0), aa);
    let mut a = Rpc::new(ta, cfg.clone()).map_err(anyhow::Error::from)?;
    let mut b = Rpc::new(tb, cfg.clone()).map_err(anyhow::Error::from)?;
    b.register_dispatch_handler(1, 0, |rpc, h| {
        let p = rpc.req_payload(&h).unwrap();
        rpc.enqueue_response(h, &p).unwrap();
    })
    .map_err(anyhow::Error::from)?;

    let sess = a.create_session(EndpointId::new(1, 0)).map_err(anyhow::Error::from)?;
    let deadline = Instant::now() + Duration::from_secs(5);
    while a.session_state(sess) == SessionState::Connecting && Instant::now() < deadline {
        a.run_event_loop_once(wall_now_ns());
        b.run_event_loop_once(wall_now_ns());
    }
    if a.session_state(sess) != SessionState::Connected {
        bail!("loopback session failed to connect");
    }

    let remaining = Rc::new(Cell::new(n));
    fn issue(
        rpc: &mut Rpc<UdpTransport>,
        sess: u16,
        msg_size: usize,
        mtu: usize,
        req: MsgBuf,
        resp: MsgBuf,
        remaining: Rc<Cell<u64>>,
    ) {
        rpc.enqueue_request(
            sess,
            1,
            req,
            resp,
            Box::new(move |rpc, res| {
                if res.status != CallStatus::Ok {
                    remaining.set(0);
                    return;
                }
                let left = remaining.get();
                remaining.set(left.saturating_sub(1));
                if left > 1 {
                    issue(rpc, sess, msg_size, mtu, res.request, res.response, remaining);
                }
            }),
        )
        .expect("issue request");
    }
    let t0 = wall_now_ns();
    let mtu = cfg.mtu_data;
    let req = MsgBuf::from_bytes(&vec![0x42; msg_size], mtu).map_err(anyhow::Error::from)?;
    let resp = MsgBuf::alloc(msg_size, mtu).map_err(anyhow::Error::from)?;
    issue(&mut a, sess, msg_size, mtu, req, resp, remaining.clone());
    let deadline = Instant::now() + Duration::from_secs(30);
    while remaining.get() > 0 && Instant::now() < deadline {
        a.run_event_loop_once(wall_now_ns());
        b.run_event_loop_once(wall_now_ns());
    }
    let t1 = wall_now_ns();
    if remaining.get() > 0 {
        bail!(
            "udp loopback run incomplete: {} of {} RPCs left",
            remaining.get(),
            n
        );
    }
    let s = a.stats();
    let secs = ((t1 - t0).max(1)) as f64 / 1e9;
    Ok(ScenarioOut {
        scenario: "latency-udp".into(),
        fan_in: 1,
        cc: cfg.toggles.cc,
        msg_bytes: msg_size,
        completed: s.rpcs_completed,
        timed_out: s.rpcs_timed_out,
        failed: s.rpcs_failed,
        p50_rtt_us: percentile(&s.rtt_samples_us, 50.0),
        p99_rtt_us: percentile(&s.rtt_samples_us, 99.0),
        p999_rtt_us: percentile(&s.rtt_samples_us, 99.9),
        p50_lat_us: percentile(&s.rpc_latencies_us, 50.0),
        p99_lat_us: percentile(&s.rpc_latencies_us, 99.0),
        p999_lat_us: percentile(&s.rpc_latencies_us, 99.9),
        goodput_gbps: (s.rpcs_completed as f64 * msg_size as f64 * 8.0) / (secs * 1e9),
        rpcs_per_sec: s.rpcs_completed as f64 / secs,
        retransmissions: s.retransmissions,
        rtos_fired: s.rtos_fired,
        drops_retx_queued: s.drops_retx_queued,
        switch_drops: 0,
        link_loss_drops: 0,
        rq_drops: 0,
        pool_peak_bytes: 0,
        wheel_inserts: s.wheel_inserts,
        ownership_violations: s.ownership_violations,
        credit_violations: a.session(sess).credit_violations(),
        elapsed_ns: t1 - t0,
    })
}
