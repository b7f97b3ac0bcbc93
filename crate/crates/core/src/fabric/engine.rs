//! In-process deterministic fabric.
//!
//! Topology is a star: every trainer, shadow, and mirror sink connects to one
//! switch. The engine owns the links, the event queue, and the switch data
//! plane; endpoint behavior is supplied through [`NodeHandler`]. Frames take
//! one tick per hop, the switch forwards with head-of-line blocking per
//! ingress FIFO, and every consumed frame returns credit to its sender, so
//! the fabric is lossless under any consumer schedule.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::frame::{MsgType, WireFrame};
use super::link::{Link, LinkError, LinkId, SendOutcome};
use super::sched::{Event, EventKind, EventQueue, NodeId, Tick};
use super::switch::{rewrite_for_shadow, Action, SwitchCtrl, SwitchError};

#[derive(Debug, Error)]
pub enum FabricError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error("fabric stalled with {in_flight} frames in flight and no runnable event")]
    Stalled { in_flight: usize },
    #[error("event budget {0} exhausted")]
    BudgetExhausted(u64),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Endpoint logic plugged into the fabric by the caller.
pub trait NodeHandler {
    /// Process one delivered frame; replies go into `out` and are sent on
    /// the node's egress link in order.
    fn handle_frame(&mut self, node: NodeId, frame: WireFrame, out: &mut Vec<WireFrame>);
}

/// How fast an endpoint drains its ingress queues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsumerPolicy {
    /// Consume everything as soon as it arrives.
    Immediate,
    /// Consume `burst` frames every `period` ticks.
    Steady { period: Tick, burst: u32 },
    /// Consume random bursts after random delays, seeded by the fabric.
    Random { max_delay: Tick, max_burst: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Switch,
    Endpoint,
    /// Consumes and counts shadow-copy traffic without node logic.
    Sink,
}

#[derive(Debug, Clone, Copy)]
pub struct FabricConfig {
    /// Credit budget per link (frames the receiver buffers).
    pub credit_capacity: u32,
    /// Consumed frames per CREDIT return.
    pub credit_batch: u32,
    /// Per-hop delivery latency.
    pub transit_ticks: Tick,
    /// Seed for randomized consumer policies.
    pub seed: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self { credit_capacity: 256, credit_batch: 1, transit_ticks: 1, seed: 0 }
    }
}

/// Per-port traffic counters at the switch.
#[derive(Debug, Default, Clone, Copy)]
pub struct SwitchCounters {
    pub rx_data: u64,
    pub rx_tagged: u64,
    pub rx_credit: u64,
    pub rx_ack: u64,
    pub rx_ctrl: u64,
    pub tx_data: u64,
    pub tx_shadow_copies: u64,
    pub tx_credit: u64,
    pub tx_ctrl: u64,
    pub multicast_frames: u64,
}

impl SwitchCounters {
    pub fn rx_total(&self) -> u64 {
        self.rx_data + self.rx_credit + self.rx_ack + self.rx_ctrl
    }

    pub fn tx_total(&self) -> u64 {
        self.tx_data + self.tx_credit + self.tx_ctrl
    }

    pub fn tx_rx_ratio(&self) -> f64 {
        self.tx_total() as f64 / self.rx_total() as f64
    }
}

/// One consumed frame, for determinism comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub time: Tick,
    pub node: NodeId,
    pub link: LinkId,
    pub msg_type: u8,
    pub src_rank: u16,
    pub channel: u16,
    pub inner_seq: u64,
    pub bytes: u32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    pub events: u64,
    pub end_time: Tick,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PurgeStats {
    pub frames: usize,
    pub outbox_frames: usize,
    pub events: usize,
}

/// Deterministic event-driven fabric around a single switch.
pub struct DetFabric {
    cfg: FabricConfig,
    pub ctrl: SwitchCtrl,
    links: Vec<Link>,
    link_src: Vec<NodeId>,
    link_dst: Vec<NodeId>,
    /// Opposite-direction link used for credit returns.
    reverse: Vec<Option<LinkId>>,
    roles: Vec<Role>,
    policies: Vec<ConsumerPolicy>,
    node_ingress: Vec<Vec<LinkId>>,
    node_egress: Vec<Option<LinkId>>,
    outbox: Vec<VecDeque<WireFrame>>,
    /// Frames consumed off each link but not yet returned as credit.
    pending_credit: Vec<u32>,
    queue: EventQueue,
    rng: ChaCha8Rng,
    tick_pending: Vec<bool>,
    /// Switch ingress links blocked on a downstream credit.
    stalled: BTreeSet<LinkId>,
    switch_id: NodeId,
    pub counters: SwitchCounters,
    pub purged_frames: u64,
    /// No drop path exists for data frames; this stays zero by construction.
    pub dropped_frames: u64,
    /// Shadow-copy frames and bytes absorbed per mirror sink.
    pub sink_totals: BTreeMap<NodeId, (u64, u64)>,
    trace: Option<Vec<TraceRow>>,
}

impl DetFabric {
    pub fn new(cfg: FabricConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fabric = Self {
            cfg,
            ctrl: SwitchCtrl::new(),
            links: Vec::new(),
            link_src: Vec::new(),
            link_dst: Vec::new(),
            reverse: Vec::new(),
            roles: Vec::new(),
            policies: Vec::new(),
            node_ingress: Vec::new(),
            node_egress: Vec::new(),
            outbox: Vec::new(),
            pending_credit: Vec::new(),
            queue: EventQueue::new(),
            rng,
            tick_pending: Vec::new(),
            stalled: BTreeSet::new(),
            switch_id: 0,
            counters: SwitchCounters::default(),
            purged_frames: 0,
            dropped_frames: 0,
            sink_totals: BTreeMap::new(),
            trace: None,
        };
        fabric.switch_id = fabric.add_node(Role::Switch);
        fabric
    }

    fn add_node(&mut self, role: Role) -> NodeId {
        let id = self.roles.len() as NodeId;
        self.roles.push(role);
        self.policies.push(ConsumerPolicy::Immediate);
        self.node_ingress.push(Vec::new());
        self.node_egress.push(None);
        self.outbox.push(VecDeque::new());
        self.tick_pending.push(false);
        id
    }

    fn add_link(&mut self, src: NodeId, dst: NodeId, label: String) -> LinkId {
        let id = self.links.len() as LinkId;
        self.links.push(Link::new(id, label, self.cfg.credit_capacity));
        self.link_src.push(src);
        self.link_dst.push(dst);
        self.reverse.push(None);
        self.pending_credit.push(0);
        self.node_ingress[dst as usize].push(id);
        id
    }

    fn pair(&mut self, a: LinkId, b: LinkId) {
        self.reverse[a as usize] = Some(b);
        self.reverse[b as usize] = Some(a);
    }

    /// Attach one trainer; installs its forwarding link in the switch tables.
    pub fn add_trainer(&mut self, dp_group: u16, rank: u16) -> NodeId {
        let node = self.add_node(Role::Endpoint);
        let up = self.add_link(node, self.switch_id, format!("rank{rank}->switch"));
        let down = self.add_link(self.switch_id, node, format!("switch->rank{rank}"));
        self.pair(up, down);
        self.node_egress[node as usize] = Some(up);
        self.ctrl.install_rank_link(dp_group, rank, down);
        node
    }

    /// Attach one shadow node with two ingress NICs and one egress link.
    pub fn add_shadow(&mut self, name: &str) -> NodeId {
        let node = self.add_node(Role::Endpoint);
        let up = self.add_link(node, self.switch_id, format!("{name}->switch"));
        let nic_a = self.add_link(self.switch_id, node, format!("switch->{name}.a"));
        let nic_b = self.add_link(self.switch_id, node, format!("switch->{name}.b"));
        self.node_egress[node as usize] = Some(up);
        self.pair(up, nic_a);
        self.reverse[nic_b as usize] = Some(up);
        self.ctrl.shadow_ports.register(node, nic_a, nic_b);
        node
    }

    /// Attach one mirror sink replicating all shadow-bound traffic.
    pub fn add_mirror_sink(&mut self, name: &str) -> NodeId {
        let node = self.add_node(Role::Sink);
        let up = self.add_link(node, self.switch_id, format!("{name}->switch"));
        let down = self.add_link(self.switch_id, node, format!("switch->{name}"));
        self.pair(up, down);
        self.node_egress[node as usize] = Some(up);
        self.ctrl.add_mirror_sink(down);
        self.sink_totals.insert(node, (0, 0));
        node
    }

    pub fn set_policy(&mut self, node: NodeId, policy: ConsumerPolicy) {
        self.policies[node as usize] = policy;
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.trace.replace(Vec::new()).unwrap_or_default()
    }

    pub fn now(&self) -> Tick {
        self.queue.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.queue.processed
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id as usize]
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn in_flight(&self) -> usize {
        self.links.iter().map(|l| l.queue_len()).sum::<usize>()
            + self.outbox.iter().map(|o| o.len()).sum::<usize>()
    }

    /// Queue frames for transmission on a node's egress link.
    pub fn submit(&mut self, node: NodeId, frames: Vec<WireFrame>) -> Result<(), FabricError> {
        for f in frames {
            self.outbox[node as usize].push_back(f);
        }
        self.drain_outbox(node)
    }

    fn trace_consume(&mut self, node: NodeId, link: LinkId, frame: &WireFrame) {
        if let Some(rows) = self.trace.as_mut() {
            rows.push(TraceRow {
                time: self.queue.now(),
                node,
                link,
                msg_type: frame.msg_type as u8,
                src_rank: frame.src_rank,
                channel: frame.channel_id,
                inner_seq: frame.inner_seq,
                bytes: frame.payload.len() as u32,
            });
        }
    }

    fn schedule_deliver(&mut self, link: LinkId) {
        self.queue.push(Event {
            time: self.queue.now() + self.cfg.transit_ticks,
            node: self.link_dst[link as usize],
            kind: EventKind::Deliver { link },
        });
    }

    /// Place a frame on a link, consuming one credit. The caller must have
    /// checked credit; running out here is an engine bug.
    fn credited_place(&mut self, link: LinkId, frame: WireFrame) -> Result<(), FabricError> {
        if self.link_src[link as usize] == self.switch_id {
            match frame.msg_type {
                MsgType::Data => self.counters.tx_data += 1,
                MsgType::Ctrl => self.counters.tx_ctrl += 1,
                MsgType::Credit | MsgType::Ack => {}
            }
        }
        let (outcome, _) = self.links[link as usize].try_send(frame);
        if outcome != SendOutcome::Sent {
            return Err(FabricError::Internal(format!(
                "credited send on link {link} without credit"
            )));
        }
        self.schedule_deliver(link);
        Ok(())
    }

    /// Place a credit-loop frame that is itself exempt from credits.
    fn uncredited_place(&mut self, link: LinkId, frame: WireFrame) {
        if self.link_src[link as usize] == self.switch_id && frame.msg_type == MsgType::Credit {
            self.counters.tx_credit += 1;
        }
        self.links[link as usize].send_uncredited(frame);
        self.schedule_deliver(link);
    }

    /// Record one consumed frame on `link` and return credit in batches.
    fn owe_credit(&mut self, link: LinkId) -> Result<(), FabricError> {
        self.pending_credit[link as usize] += 1;
        while self.pending_credit[link as usize] >= self.cfg.credit_batch {
            self.pending_credit[link as usize] -= self.cfg.credit_batch;
            self.emit_credit(link, self.cfg.credit_batch)?;
        }
        Ok(())
    }

    fn emit_credit(&mut self, link: LinkId, count: u32) -> Result<(), FabricError> {
        let rev = self.reverse[link as usize].ok_or_else(|| {
            FabricError::Internal(format!("link {link} has no reverse path for credit"))
        })?;
        self.uncredited_place(rev, WireFrame::credit_grant(link, count));
        Ok(())
    }

    /// Return any batched-up credit below the batch threshold. Called at
    /// iteration boundaries so every quiescent state has full credits.
    pub fn flush_credit_residue(&mut self) -> Result<(), FabricError> {
        for link in 0..self.links.len() as LinkId {
            let pending = self.pending_credit[link as usize];
            if pending > 0 {
                self.pending_credit[link as usize] = 0;
                self.emit_credit(link, pending)?;
            }
        }
        Ok(())
    }

    fn drain_outbox(&mut self, node: NodeId) -> Result<(), FabricError> {
        let Some(egress) = self.node_egress[node as usize] else {
            return if self.outbox[node as usize].is_empty() {
                Ok(())
            } else {
                Err(FabricError::Internal(format!("node {node} has frames but no egress")))
            };
        };
        while !self.outbox[node as usize].is_empty() {
            if !self.links[egress as usize].has_credit() {
                return Ok(());
            }
            let frame = self.outbox[node as usize].pop_front().unwrap();
            self.credited_place(egress, frame)?;
        }
        Ok(())
    }

    /// Forward arrived frames from one switch ingress FIFO until it empties
    /// or its head blocks on a downstream credit.
    fn pump_switch(&mut self, start: LinkId) -> Result<(), FabricError> {
        let mut work: VecDeque<LinkId> = VecDeque::new();
        work.push_back(start);
        while let Some(link) = work.pop_front() {
            self.process_switch_ingress(link, &mut work)?;
        }
        Ok(())
    }

    fn process_switch_ingress(
        &mut self,
        link: LinkId,
        work: &mut VecDeque<LinkId>,
    ) -> Result<(), FabricError> {
        loop {
            if !self.links[link as usize].available() {
                self.stalled.remove(&link);
                return Ok(());
            }
            let msg_type = self.links[link as usize].peek().unwrap().msg_type;
            match msg_type {
                MsgType::Credit => {
                    let f = self.links[link as usize].pop().unwrap();
                    self.trace_consume(self.switch_id, link, &f);
                    self.counters.rx_credit += 1;
                    let granted = f.bucket_id;
                    self.links[granted as usize].grant(f.credit)?;
                    if self.link_src[granted as usize] == self.switch_id {
                        // A switch egress freed up: retry every stalled FIFO.
                        for &s in &self.stalled {
                            if s != link && !work.contains(&s) {
                                work.push_back(s);
                            }
                        }
                    } else {
                        self.drain_outbox(self.link_src[granted as usize])?;
                    }
                }
                MsgType::Ack => {
                    let f = self.links[link as usize].pop().unwrap();
                    self.trace_consume(self.switch_id, link, &f);
                    self.counters.rx_ack += 1;
                    self.ctrl.acks_dropped += 1;
                    self.owe_credit(link)?;
                }
                MsgType::Ctrl => {
                    let dest = {
                        let head = self.links[link as usize].peek().unwrap();
                        self.ctrl.route_ctrl(head)?
                    };
                    if !self.links[dest as usize].has_credit() {
                        self.stalled.insert(link);
                        return Ok(());
                    }
                    let f = self.links[link as usize].pop().unwrap();
                    self.trace_consume(self.switch_id, link, &f);
                    self.counters.rx_ctrl += 1;
                    self.credited_place(dest, f)?;
                    self.owe_credit(link)?;
                }
                MsgType::Data => {
                    self.ctrl.mark_training_started();
                    let action = {
                        let head = self.links[link as usize].peek().unwrap();
                        self.ctrl.classify(head)?
                    };
                    match action {
                        Action::Unicast(dest) => {
                            if !self.links[dest as usize].has_credit() {
                                self.stalled.insert(link);
                                return Ok(());
                            }
                            let f = self.links[link as usize].pop().unwrap();
                            self.trace_consume(self.switch_id, link, &f);
                            self.counters.rx_data += 1;
                            if f.is_tagged() {
                                self.counters.rx_tagged += 1;
                            }
                            self.credited_place(dest, f)?;
                            self.owe_credit(link)?;
                        }
                        Action::Multicast(gid) => {
                            let members = {
                                let head = self.links[link as usize].peek().unwrap();
                                self.ctrl.multicast_members(gid, head)?
                            };
                            let all_ready = members
                                .iter()
                                .all(|&m| self.links[m as usize].has_credit());
                            if !all_ready {
                                self.stalled.insert(link);
                                return Ok(());
                            }
                            let f = self.links[link as usize].pop().unwrap();
                            self.trace_consume(self.switch_id, link, &f);
                            self.counters.rx_data += 1;
                            self.counters.rx_tagged += 1;
                            self.counters.multicast_frames += 1;
                            let shadow_copy = rewrite_for_shadow(&f, &self.ctrl.shard_map)?;
                            // Training copy stays byte-identical to the input.
                            self.credited_place(members[0], f)?;
                            for &m in &members[1..] {
                                self.credited_place(m, shadow_copy.clone())?;
                                self.counters.tx_shadow_copies += 1;
                            }
                            self.owe_credit(link)?;
                        }
                    }
                }
            }
        }
    }

    /// Drain up to `budget` arrived frames at an endpoint or sink.
    fn consume_endpoint(
        &mut self,
        node: NodeId,
        handler: &mut dyn NodeHandler,
        budget: u32,
    ) -> Result<(), FabricError> {
        let ingress = self.node_ingress[node as usize].clone();
        let mut remaining = budget;
        let mut replies = Vec::new();
        for link in ingress {
            while remaining > 0 && self.links[link as usize].available() {
                let f = self.links[link as usize].pop().unwrap();
                remaining -= 1;
                self.trace_consume(node, link, &f);
                if f.msg_type == MsgType::Credit {
                    // Exempt from the credit loop itself: absorb the grant.
                    let granted = f.bucket_id;
                    self.links[granted as usize].grant(f.credit)?;
                    self.drain_outbox(node)?;
                    continue;
                }
                self.owe_credit(link)?;
                if self.roles[node as usize] == Role::Sink {
                    let totals = self.sink_totals.get_mut(&node).unwrap();
                    totals.0 += 1;
                    totals.1 += f.payload.len() as u64;
                    continue;
                }
                replies.clear();
                handler.handle_frame(node, f, &mut replies);
                for r in replies.drain(..) {
                    self.outbox[node as usize].push_back(r);
                }
                self.drain_outbox(node)?;
            }
        }
        Ok(())
    }

    fn endpoint_backlog(&self, node: NodeId) -> bool {
        self.node_ingress[node as usize]
            .iter()
            .any(|&l| self.links[l as usize].available())
    }

    fn schedule_tick(&mut self, node: NodeId) {
        if self.tick_pending[node as usize] {
            return;
        }
        let delay = match self.policies[node as usize] {
            ConsumerPolicy::Immediate => return,
            ConsumerPolicy::Steady { period, .. } => period,
            ConsumerPolicy::Random { max_delay, .. } => self.rng.gen_range(0..=max_delay),
        };
        self.tick_pending[node as usize] = true;
        self.queue.push(Event {
            time: self.queue.now() + delay,
            node,
            kind: EventKind::ConsumeTick,
        });
    }

    /// Process one event. Returns false when the queue is empty.
    pub fn step(&mut self, handler: &mut dyn NodeHandler) -> Result<bool, FabricError> {
        let Some(event) = self.queue.pop() else {
            return Ok(false);
        };
        match event.kind {
            EventKind::Deliver { link } => {
                self.links[link as usize].arrive();
                if event.node == self.switch_id {
                    self.pump_switch(link)?;
                } else {
                    match self.policies[event.node as usize] {
                        ConsumerPolicy::Immediate => {
                            self.consume_endpoint(event.node, handler, u32::MAX)?;
                        }
                        _ => self.schedule_tick(event.node),
                    }
                }
            }
            EventKind::ConsumeTick => {
                self.tick_pending[event.node as usize] = false;
                let burst = match self.policies[event.node as usize] {
                    ConsumerPolicy::Immediate => u32::MAX,
                    ConsumerPolicy::Steady { burst, .. } => burst,
                    ConsumerPolicy::Random { max_burst, .. } => {
                        self.rng.gen_range(1..=max_burst)
                    }
                };
                self.consume_endpoint(event.node, handler, burst)?;
                if self.endpoint_backlog(event.node) {
                    self.schedule_tick(event.node);
                }
            }
        }
        Ok(true)
    }

    /// Run until no event remains. Errors if frames are still in flight at
    /// that point (a flow-control deadlock) or the event budget runs out.
    pub fn run_until_quiet(
        &mut self,
        handler: &mut dyn NodeHandler,
        budget: u64,
    ) -> Result<RunStats, FabricError> {
        let start_events = self.queue.processed;
        loop {
            if self.queue.processed - start_events > budget {
                return Err(FabricError::BudgetExhausted(budget));
            }
            if !self.step(handler)? {
                let in_flight = self.in_flight();
                if in_flight != 0 {
                    return Err(FabricError::Stalled { in_flight });
                }
                return Ok(RunStats {
                    events: self.queue.processed - start_events,
                    end_time: self.queue.now(),
                });
            }
        }
    }

    /// Drop everything in flight and restore all credits. Models yanking a
    /// failed iteration's traffic out of the fabric before recovery.
    pub fn purge(&mut self) -> PurgeStats {
        let mut stats = PurgeStats::default();
        for link in &mut self.links {
            stats.frames += link.purge();
        }
        for outbox in &mut self.outbox {
            stats.outbox_frames += outbox.len();
            outbox.clear();
        }
        stats.events = self.queue.clear();
        for p in &mut self.pending_credit {
            *p = 0;
        }
        self.stalled.clear();
        for t in &mut self.tick_pending {
            *t = false;
        }
        self.purged_frames += (stats.frames + stats.outbox_frames) as u64;
        stats
    }

    /// True when every link holds full credit and nothing is queued.
    pub fn is_pristine(&self) -> bool {
        self.in_flight() == 0
            && self
                .links
                .iter()
                .enumerate()
                .all(|(i, l)| l.credits() == l.capacity() && self.pending_credit[i] == 0)
    }
}
