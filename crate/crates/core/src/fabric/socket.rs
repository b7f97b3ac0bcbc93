//! Stream-socket transport: the same trainers, shadow node, and switch
//! logic running as isolated threads over real TCP connections.
//!
//! The deterministic fabric is the canonical transport for every
//! correctness property; this one demonstrates the system end to end over
//! OS sockets. Nodes share no state and speak only frames. Where real
//! deployments splice into transport-level sequence numbers, connections
//! here register with an explicit HELLO control frame instead. TCP ordering
//! and backpressure stand in for credit flow control, and the shadow host
//! runs leniently, parking frames that arrive ahead of their iteration and
//! replaying them once it opens.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::fabric::frame::{MsgType, WireFrame, HEADER_LEN};
use crate::fabric::switch::{ctrl_op, rewrite_for_shadow, Action, SwitchCtrl, SwitchError};
use crate::fabric::LinkId;
use crate::optim::{Hyper, LrSchedule, OptimKind};
use crate::shadow::{compare_owned_state, IngestMode, ShadowConfig, ShadowError, ShadowEvent, ShadowNode};
use crate::trainer::{MlpSpec, TrainerConfig, TrainerError, TrainerNode};

/// Abandon a stuck socket read after this long; the demo normally
/// completes in milliseconds.
const IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum SocketError {
    #[error("socket demo config: {0}")]
    Config(String),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error("node thread panicked: {0}")]
    Panicked(String),
    #[error("connection closed mid-iteration")]
    EarlyClose,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
}

/// Shape of a socket demo run: one ring, one shadow host with two NICs.
#[derive(Debug, Clone)]
pub struct SocketDemoConfig {
    pub world_size: usize,
    pub num_channels: usize,
    pub model: MlpSpec,
    pub bucket_cap_bytes: u64,
    pub shard_count: usize,
    pub mtu_payload: usize,
    pub seed: u64,
    pub optim: OptimKind,
    pub hyper: Hyper,
    pub schedule: LrSchedule,
    pub iterations: u64,
}

impl Default for SocketDemoConfig {
    fn default() -> Self {
        Self {
            world_size: 4,
            num_channels: 2,
            model: MlpSpec { input_dim: 6, hidden: vec![8, 7, 6], output_dim: 5, batch_size: 4 },
            bucket_cap_bytes: 256,
            shard_count: 2,
            mtu_payload: 64,
            seed: 7,
            optim: OptimKind::AdamW,
            hyper: Hyper::default(),
            schedule: LrSchedule::Constant,
            iterations: 3,
        }
    }
}

/// What a socket run produced, for logs and cross-transport comparison.
#[derive(Debug, Clone)]
pub struct SocketReport {
    pub iterations: u64,
    pub world_size: usize,
    /// Mean loss per iteration across ranks, in rank order.
    pub losses: Vec<f32>,
    /// CRC-32 of each rank's final parameter bytes.
    pub param_digests: Vec<u32>,
    /// First trainer/shadow byte divergence, if any.
    pub shadow_divergence: Option<String>,
    /// Completed iterations per shadow shard.
    pub shadow_completed: Vec<(u8, u64)>,
    /// Frames the lenient shadow dropped.
    pub shadow_drops: u64,
    pub switch_rx_frames: u64,
    pub switch_tx_frames: u64,
    pub acks_dropped: u64,
}

const ROLE_TRAINER: u8 = 0;
const ROLE_SHADOW_NIC: u8 = 1;

/// First frame on every connection: who is on the other end.
fn hello_frame(role: u8, id: u16, sub: u8) -> WireFrame {
    let mut f = WireFrame::data();
    f.msg_type = MsgType::Ctrl;
    let id = id.to_le_bytes();
    f.payload = vec![ctrl_op::HELLO, role, id[0], id[1], sub];
    f
}

fn parse_hello(frame: &WireFrame) -> Result<(u8, u16, u8), SocketError> {
    if frame.msg_type != MsgType::Ctrl
        || frame.payload.len() != 5
        || frame.payload[0] != ctrl_op::HELLO
    {
        return Err(SocketError::Handshake("first frame must be a HELLO".into()));
    }
    let id = u16::from_le_bytes([frame.payload[2], frame.payload[3]]);
    Ok((frame.payload[1], id, frame.payload[4]))
}

fn write_frame(stream: &mut TcpStream, frame: &WireFrame) -> io::Result<()> {
    stream.write_all(&frame.encode())
}

/// Read one frame; None on a clean close before a new frame starts.
fn read_frame(stream: &mut TcpStream) -> io::Result<Option<WireFrame>> {
    let mut prefix = [0u8; HEADER_LEN + 4];
    if stream.read(&mut prefix[..1])? == 0 {
        return Ok(None);
    }
    stream.read_exact(&mut prefix[1..])?;
    let mut buf = prefix.to_vec();
    // Credit frames reuse the length slot as a count and carry no payload.
    if prefix[5] != MsgType::Credit as u8 {
        let len = u32::from_le_bytes(prefix[HEADER_LEN..HEADER_LEN + 4].try_into().unwrap());
        buf.resize(HEADER_LEN + 4 + len as usize, 0);
        stream.read_exact(&mut buf[HEADER_LEN + 4..])?;
    }
    let (frame, _) = WireFrame::decode(&buf).map_err(io::Error::other)?;
    Ok(Some(frame))
}

/// Feed frames from one connection into the switch loop; None marks close.
fn spawn_reader(
    mut stream: TcpStream,
    link: LinkId,
    tx: mpsc::Sender<(LinkId, Option<WireFrame>)>,
) {
    thread::spawn(move || loop {
        match read_frame(&mut stream) {
            Ok(Some(frame)) => {
                if tx.send((link, Some(frame))).is_err() {
                    break;
                }
            }
            _ => {
                let _ = tx.send((link, None));
                break;
            }
        }
    });
}

struct SwitchTally {
    rx_frames: u64,
    tx_frames: u64,
    acks_dropped: u64,
}

/// The switch context: registers every connection, then forwards frames by
/// the same classification and multicast rules as the deterministic fabric.
fn switch_thread(
    listener: TcpListener,
    world_size: usize,
    shard_count: usize,
) -> Result<SwitchTally, SocketError> {
    let n = world_size as u16;
    let shadow_node = n;
    let nic_links: [LinkId; 2] = [1000, 1001];

    let (tx, rx) = mpsc::channel();
    let mut writers: BTreeMap<LinkId, TcpStream> = BTreeMap::new();
    let mut registered_trainers = 0usize;
    let mut registered_nics = 0usize;
    while registered_trainers < world_size || registered_nics < 2 {
        let (mut stream, _) = listener.accept()?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_nodelay(true)?;
        let hello = read_frame(&mut stream)?.ok_or(SocketError::EarlyClose)?;
        let link = match parse_hello(&hello)? {
            (ROLE_TRAINER, rank, _) if (rank as usize) < world_size => {
                registered_trainers += 1;
                rank as LinkId
            }
            (ROLE_SHADOW_NIC, 0, nic) if nic < 2 => {
                registered_nics += 1;
                nic_links[nic as usize]
            }
            (role, id, sub) => {
                return Err(SocketError::Handshake(format!(
                    "unexpected registration ({role}, {id}, {sub})"
                )))
            }
        };
        if writers.insert(link, stream.try_clone()?).is_some() {
            return Err(SocketError::Handshake(format!("duplicate registration for {link}")));
        }
        spawn_reader(stream, link, tx.clone());
    }
    drop(tx);

    let mut ctrl = SwitchCtrl::new();
    let ranks: Vec<u16> = (0..n).collect();
    ctrl.install_ring(0, &ranks);
    for r in 0..n {
        ctrl.install_rank_link(0, r, r as LinkId);
    }
    ctrl.shadow_ports.register(shadow_node, nic_links[0], nic_links[1]);
    let mut members = Vec::new();
    for s in 0..shard_count as u8 {
        ctrl.shard_map.assign(0, s, shadow_node);
        members.push((shadow_node, s));
    }
    ctrl.shadow_stream_accept(shadow_node)?;
    ctrl.install_multicast_group(0, 0, 1, members.clone())?;
    ctrl.install_multicast_group(0, n - 1, 0, members)?;
    ctrl.mark_training_started();

    let mut tally = SwitchTally { rx_frames: 0, tx_frames: 0, acks_dropped: 0 };
    let mut open_trainers = world_size;
    while open_trainers > 0 {
        let (link, frame) = rx.recv().expect("a sender lives while trainers are open");
        let Some(frame) = frame else {
            if (link as usize) < world_size {
                open_trainers -= 1;
            }
            continue;
        };
        tally.rx_frames += 1;
        match frame.msg_type {
            MsgType::Data => match ctrl.classify(&frame)? {
                Action::Unicast(out) => {
                    write_frame(writers.get_mut(&out).expect("known link"), &frame)?;
                    tally.tx_frames += 1;
                }
                Action::Multicast(gid) => {
                    let outs = ctrl.multicast_members(gid, &frame)?;
                    write_frame(writers.get_mut(&outs[0]).expect("known link"), &frame)?;
                    let copy = rewrite_for_shadow(&frame, &ctrl.shard_map)?;
                    for out in &outs[1..] {
                        write_frame(writers.get_mut(out).expect("known link"), &copy)?;
                    }
                    tally.tx_frames += outs.len() as u64;
                }
            },
            MsgType::Ctrl => {
                let out = ctrl.route_ctrl(&frame)?;
                write_frame(writers.get_mut(&out).expect("known link"), &frame)?;
                tally.tx_frames += 1;
            }
            MsgType::Ack => tally.acks_dropped += 1,
            MsgType::Credit => {}
        }
    }
    // All trainers done: closing the write sides tells the shadow NICs that
    // the tagged streams are finished.
    for w in writers.values() {
        let _ = w.shutdown(Shutdown::Write);
    }
    Ok(tally)
}

/// One trainer context: drive the ring protocol over a single connection.
fn trainer_thread(
    addr: SocketAddr,
    cfg: TrainerConfig,
    iterations: u64,
) -> Result<(TrainerNode, Vec<f32>), SocketError> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_nodelay(true)?;
    write_frame(&mut stream, &hello_frame(ROLE_TRAINER, cfg.rank as u16, 0))?;

    let mut node = TrainerNode::new(cfg)?;
    let mut losses = Vec::new();
    for _ in 0..iterations {
        for f in node.begin_iteration()? {
            write_frame(&mut stream, &f)?;
        }
        losses.push(node.last_loss());
        while !node.iteration_done() {
            let frame = read_frame(&mut stream)?.ok_or(SocketError::EarlyClose)?;
            for out in node.on_frame(&frame)? {
                write_frame(&mut stream, &out)?;
            }
        }
        node.finish_iteration()?;
    }
    Ok((node, losses))
}

/// The shadow context: two NIC connections feeding one lenient node.
///
/// NIC reader threads can lag each other arbitrarily, so frames for a
/// not-yet-open iteration are parked per (shard, iteration) and replayed in
/// arrival order as soon as the previous update applies.
fn shadow_thread(
    addr: SocketAddr,
    cfg: ShadowConfig,
    shards: Vec<u8>,
) -> Result<ShadowNode, SocketError> {
    let (tx, rx) = mpsc::channel();
    for nic in 0..2u8 {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(IO_TIMEOUT))?;
        stream.set_nodelay(true)?;
        write_frame(&mut stream, &hello_frame(ROLE_SHADOW_NIC, 0, nic))?;
        spawn_reader(stream, nic as LinkId, tx.clone());
    }
    drop(tx);

    let mut node = ShadowNode::new(&cfg, &shards)?;
    node.set_mode(IngestMode::Lenient);
    let mut parked: BTreeMap<(u8, u64), Vec<WireFrame>> = BTreeMap::new();
    let mut open_nics = 2;
    while open_nics > 0 {
        let (_, frame) = rx.recv().expect("NIC readers live while open");
        let Some(frame) = frame else {
            open_nics -= 1;
            continue;
        };
        if frame.msg_type != MsgType::Data {
            continue;
        }
        let Ok(replica) = node.replica(frame.shadow_shard) else {
            node.handle_data(&frame)?;
            continue;
        };
        if frame.iteration > replica.completed() {
            parked.entry((frame.shadow_shard, frame.iteration)).or_default().push(frame);
            continue;
        }
        let mut applied: Vec<ShadowEvent> = node.handle_data(&frame)?;
        while let Some(ev) = applied.pop() {
            if let ShadowEvent::IterationApplied { shard, iteration } = ev {
                for f in parked.remove(&(shard, iteration + 1)).unwrap_or_default() {
                    applied.extend(node.handle_data(&f)?);
                }
            }
        }
    }
    Ok(node)
}

fn join<T>(handle: thread::JoinHandle<Result<T, SocketError>>) -> Result<T, SocketError> {
    handle
        .join()
        .map_err(|e| SocketError::Panicked(format!("{e:?}")))?
}

/// Run one complete demo: a switch, `world_size` trainers, and a two-NIC
/// shadow host, each in its own thread, speaking frames over loopback TCP.
pub fn run_socket_demo(cfg: &SocketDemoConfig) -> Result<SocketReport, SocketError> {
    if cfg.world_size < 2 {
        return Err(SocketError::Config("the ring needs at least two ranks".into()));
    }
    if cfg.iterations == 0 {
        return Err(SocketError::Config("run at least one iteration".into()));
    }

    let listener = TcpListener::bind((std::net::Ipv4Addr::LOCALHOST, 0))?;
    let addr = listener.local_addr()?;

    let trainer_cfg = |rank: usize| TrainerConfig {
        world_size: cfg.world_size,
        rank,
        dp_group: 0,
        num_channels: cfg.num_channels,
        model: cfg.model.clone(),
        bucket_cap_bytes: cfg.bucket_cap_bytes,
        shard_count: cfg.shard_count,
        mtu_payload: cfg.mtu_payload,
        seed: cfg.seed,
        optim: cfg.optim,
        hyper: cfg.hyper,
        schedule: cfg.schedule,
    };
    let shadow_cfg = ShadowConfig::from_trainer(&trainer_cfg(0));
    let shards: Vec<u8> = (0..cfg.shard_count as u8).collect();

    let world_size = cfg.world_size;
    let shard_count = cfg.shard_count;
    let switch = thread::spawn(move || switch_thread(listener, world_size, shard_count));
    let shadow = thread::spawn(move || shadow_thread(addr, shadow_cfg, shards));
    let trainers: Vec<_> = (0..cfg.world_size)
        .map(|r| {
            let tc = trainer_cfg(r);
            let iters = cfg.iterations;
            thread::spawn(move || trainer_thread(addr, tc, iters))
        })
        .collect();

    let mut nodes = Vec::new();
    let mut per_rank_losses = Vec::new();
    for handle in trainers {
        let (node, losses) = join(handle)?;
        nodes.push(node);
        per_rank_losses.push(losses);
    }
    let tally = join(switch)?;
    let shadow = join(shadow)?;

    let losses = (0..cfg.iterations as usize)
        .map(|i| {
            per_rank_losses.iter().map(|l| l[i]).sum::<f32>() / cfg.world_size as f32
        })
        .collect();
    let param_digests =
        nodes.iter().map(|t| crc32fast::hash(&t.params().to_le_bytes())).collect();

    let base = &nodes[0];
    let mut shadow_divergence = None;
    let mut shadow_completed = Vec::new();
    for s in shadow.shards() {
        let replica = shadow.replica(s)?;
        shadow_completed.push((s, replica.completed()));
        if replica.completed() != cfg.iterations {
            shadow_divergence.get_or_insert(format!(
                "shard {s} completed {} of {} iterations",
                replica.completed(),
                cfg.iterations
            ));
        } else if let Some(d) = compare_owned_state(replica, base.params(), base.optim()) {
            shadow_divergence.get_or_insert(format!(
                "shard {} diverges at {} byte {} of layer {}",
                d.shard, d.array, d.byte_offset, d.layer
            ));
        }
    }
    let d = shadow.drops;
    Ok(SocketReport {
        iterations: cfg.iterations,
        world_size: cfg.world_size,
        losses,
        param_digests,
        shadow_divergence,
        shadow_completed,
        shadow_drops: d.duplicates + d.out_of_expectation + d.wrong_iteration + d.unknown,
        switch_rx_frames: tally.rx_frames,
        switch_tx_frames: tally.tx_frames,
        acks_dropped: tally.acks_dropped,
    })
}
