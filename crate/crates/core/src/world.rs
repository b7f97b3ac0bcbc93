//! Full deterministic deployments: trainers, shadow nodes, and the switch
//! wired onto one fabric.
//!
//! The world runs data-parallel groups in lockstep iterations, verifies
//! trainer and shadow state bit-for-bit, injects mid-flight failures by
//! cutting the event loop and purging the fabric, and recovers by
//! consolidating the shadow replicas and fetching their checkpoints back
//! over control frames.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fabric::{
    ConsumerPolicy, DetFabric, FabricConfig, FabricError, MsgType, NodeHandler, NodeId,
    SwitchCounters, SwitchError, Tick, TraceRow, WireFrame,
};
use crate::optim::{Hyper, LrSchedule, OptimKind};
use crate::shadow::checkpoint::{consolidate_files, CheckpointError, CheckpointFile};
use crate::shadow::{
    compare_owned_state, consolidate, fetch_shard_request, parse_fetch_response, ShadowConfig,
    ShadowError, ShadowEvent, ShadowNode, ShadowReplica,
};
use crate::trainer::{MlpSpec, TrainerConfig, TrainerError, TrainerNode};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world config: {0}")]
    Config(String),
    #[error("iteration {iteration} diverged: {detail}")]
    Divergence { iteration: u64, detail: String },
    #[error("recovery failed: {0}")]
    Recovery(String),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Switch(#[from] SwitchError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Shape of one deployment: identical groups of trainers, each mirrored by
/// its own shadow nodes, all behind a single switch.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    /// Independent data-parallel groups running side by side.
    pub groups: u16,
    /// Ranks per group.
    pub world_size: usize,
    pub num_channels: usize,
    pub model: MlpSpec,
    pub bucket_cap_bytes: u64,
    pub shard_count: usize,
    /// Shadow hosts per group; shards are spread over them round-robin.
    pub shadows_per_group: usize,
    pub mtu_payload: usize,
    pub seed: u64,
    pub optim: OptimKind,
    pub hyper: Hyper,
    pub schedule: LrSchedule,
    pub fabric: FabricConfig,
    /// Scheduler events allowed per drain before declaring a hang.
    pub event_budget: u64,
    /// Extra sinks mirroring all shadow-bound traffic (replication scaling).
    pub mirror_sinks: usize,
    /// Byte-compare trainers and shadows after every iteration.
    pub verify_each_iteration: bool,
    /// Send an ACK frame per applied shard update (counted, then dropped).
    pub emit_acks: bool,
    /// A scheduled failure cuts the iteration after 1/divisor of the
    /// previous iteration's events.
    pub failure_cut_divisor: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            groups: 1,
            world_size: 4,
            num_channels: 2,
            model: MlpSpec { input_dim: 6, hidden: vec![8, 7, 6], output_dim: 5, batch_size: 4 },
            bucket_cap_bytes: 256,
            shard_count: 2,
            shadows_per_group: 1,
            mtu_payload: 64,
            seed: 7,
            optim: OptimKind::AdamW,
            hyper: Hyper::default(),
            schedule: LrSchedule::Constant,
            fabric: FabricConfig::default(),
            event_budget: 50_000_000,
            mirror_sinks: 0,
            verify_each_iteration: false,
            emit_acks: true,
            failure_cut_divisor: 4,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<(), WorldError> {
        if self.groups == 0 {
            return Err(WorldError::Config("at least one dp group required".into()));
        }
        if self.world_size == 0 {
            return Err(WorldError::Config("world_size must be positive".into()));
        }
        if self.world_size == 1 && self.shadows_per_group > 0 {
            return Err(WorldError::Config(
                "a single-rank ring emits no tagged traffic; shadows would never see frames"
                    .into(),
            ));
        }
        if self.world_size > 1 && self.shadows_per_group == 0 {
            return Err(WorldError::Config(
                "tagged frames need a shadow owner; set shadows_per_group >= 1".into(),
            ));
        }
        if self.shadows_per_group > self.shard_count {
            return Err(WorldError::Config(format!(
                "{} shadow hosts but only {} shards to spread over them",
                self.shadows_per_group, self.shard_count
            )));
        }
        if self.failure_cut_divisor == 0 {
            return Err(WorldError::Config("failure_cut_divisor must be positive".into()));
        }
        if self.mtu_payload == 0 || self.mtu_payload % 4 != 0 {
            return Err(WorldError::Config(format!(
                "mtu_payload {} must be a positive multiple of 4",
                self.mtu_payload
            )));
        }
        Ok(())
    }
}

/// One row of the per-group training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    /// Mean batch loss over the group's ranks.
    pub loss: f32,
    /// Tagged payload bytes the group emitted this iteration.
    pub tagged_bytes: u64,
    /// Fabric ticks the iteration took end to end.
    pub wall_ticks: u64,
}

pub const TRAINING_LOG_HEADER: &str = "iteration,loss,tagged_bytes,wall_ticks";

/// Render one group's training log as CSV.
pub fn render_training_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(TRAINING_LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.loss, r.tagged_bytes, r.wall_ticks
        ));
    }
    out
}

/// When to cut an iteration mid-flight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailurePlan {
    None,
    /// Interrupt iterations n-1, 2n-1, ... (every nth).
    EveryNth { n: u64 },
    /// Interrupt exactly these iteration indices.
    At(BTreeSet<u64>),
}

impl FailurePlan {
    /// Does this plan cut the given iteration?
    pub fn triggers(&self, iteration: u64) -> bool {
        match self {
            FailurePlan::None => false,
            FailurePlan::EveryNth { n } => *n > 0 && (iteration + 1) % n == 0,
            FailurePlan::At(set) => set.contains(&iteration),
        }
    }
}

/// What one injected failure did and where training resumed.
#[derive(Debug, Clone)]
pub struct RecoveryReport {
    /// Iteration whose run was cut.
    pub at_iteration: u64,
    /// Consolidated iteration: the next index the trainers will run.
    pub resumed_at: u64,
    /// Ranks rebuilt from scratch, as (group, rank).
    pub killed: Vec<(u16, usize)>,
    /// False when the cut budget outlasted the iteration, which then simply
    /// completed; no recovery was needed.
    pub interrupted: bool,
    pub purged_frames: usize,
    pub fetched_shards: usize,
}

/// Endpoint logic behind the fabric: every delivered frame lands here.
#[derive(Default)]
struct Endpoints {
    trainers: BTreeMap<NodeId, TrainerNode>,
    shadows: BTreeMap<NodeId, ShadowNode>,
    /// Tagged payload bytes emitted per dp group, current iteration.
    tagged_bytes: BTreeMap<u16, u64>,
    shadow_events: Vec<(NodeId, ShadowEvent)>,
    /// Whole-shard checkpoint bytes fetched back to a trainer node.
    fetched: BTreeMap<(NodeId, u8), Vec<u8>>,
    emit_acks: bool,
    first_error: Option<WorldError>,
}

impl Endpoints {
    fn fail(&mut self, err: WorldError) {
        if self.first_error.is_none() {
            self.first_error = Some(err);
        }
    }

    fn take_error(&mut self) -> Result<(), WorldError> {
        match self.first_error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn count_tagged(&mut self, frames: &[WireFrame]) {
        for f in frames {
            if f.is_tagged() {
                *self.tagged_bytes.entry(f.dp_group).or_default() += f.payload.len() as u64;
            }
        }
    }

    fn on_trainer_ctrl(&mut self, node: NodeId, frame: &WireFrame) {
        match parse_fetch_response(frame) {
            Ok(resp) => {
                if resp.offset != 0 || resp.bytes.len() as u64 != resp.total_len {
                    self.fail(WorldError::Recovery(format!(
                        "partial fetch response for shard {}: {} of {} bytes",
                        resp.shard,
                        resp.bytes.len(),
                        resp.total_len
                    )));
                    return;
                }
                self.fetched.insert((node, resp.shard), resp.bytes);
            }
            Err(e) => self.fail(e.into()),
        }
    }
}

impl NodeHandler for Endpoints {
    fn handle_frame(&mut self, node: NodeId, frame: WireFrame, out: &mut Vec<WireFrame>) {
        if let Some(t) = self.trainers.get_mut(&node) {
            match frame.msg_type {
                MsgType::Data => match t.on_frame(&frame) {
                    Ok(replies) => {
                        self.count_tagged(&replies);
                        out.extend(replies);
                    }
                    Err(e) => self.fail(e.into()),
                },
                MsgType::Ctrl => self.on_trainer_ctrl(node, &frame),
                MsgType::Credit | MsgType::Ack => {}
            }
            return;
        }
        if let Some(s) = self.shadows.get_mut(&node) {
            match frame.msg_type {
                MsgType::Data => match s.handle_data(&frame) {
                    Ok(events) => {
                        for ev in events {
                            if let ShadowEvent::IterationApplied { shard, iteration } = ev {
                                if self.emit_acks {
                                    let mut ack = WireFrame::data();
                                    ack.msg_type = MsgType::Ack;
                                    ack.dp_group = frame.dp_group;
                                    ack.shadow_shard = shard;
                                    ack.iteration = iteration;
                                    out.push(ack);
                                }
                            }
                            self.shadow_events.push((node, ev));
                        }
                    }
                    Err(e) => self.fail(e.into()),
                },
                MsgType::Ctrl => out.push(s.handle_ctrl(&frame)),
                MsgType::Credit | MsgType::Ack => {}
            }
            return;
        }
        self.fail(WorldError::Recovery(format!("frame delivered to unknown node {node}")));
    }
}

/// A running deployment.
pub struct World {
    cfg: WorldConfig,
    fabric: DetFabric,
    nodes: Endpoints,
    /// Trainer node ids as [group][rank].
    trainer_ids: Vec<Vec<NodeId>>,
    /// Shadow node ids as [group][host].
    shadow_ids: Vec<Vec<NodeId>>,
    iteration: u64,
    logs: Vec<Vec<LogRow>>,
    /// Losses captured at begin time, for rows the trainers never finish.
    pending_losses: Vec<Vec<f32>>,
    iter_start_tick: Tick,
    iter_start_events: u64,
    prev_iter_events: u64,
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self, WorldError> {
        cfg.validate()?;
        let mut fabric = DetFabric::new(cfg.fabric);
        let mut nodes = Endpoints { emit_acks: cfg.emit_acks, ..Endpoints::default() };
        let mut trainer_ids = Vec::new();
        let mut shadow_ids = Vec::new();

        for g in 0..cfg.groups {
            let mut ranks = Vec::new();
            for r in 0..cfg.world_size {
                let id = fabric.add_trainer(g, r as u16);
                nodes.trainers.insert(id, TrainerNode::new(trainer_config(&cfg, g, r))?);
                ranks.push(id);
            }
            trainer_ids.push(ranks);

            if cfg.world_size < 2 {
                shadow_ids.push(Vec::new());
                continue;
            }
            let ring: Vec<u16> = (0..cfg.world_size as u16).collect();
            fabric.ctrl.install_ring(g, &ring);

            let shadow_cfg = ShadowConfig::from_trainer(
                nodes.trainers[&trainer_ids[g as usize][0]].config(),
            );
            let mut hosts = Vec::new();
            let mut members: Vec<(NodeId, u8)> = Vec::new();
            for h in 0..cfg.shadows_per_group {
                let id = fabric.add_shadow(&format!("g{g}shadow{h}"));
                let shards: Vec<u8> = (0..cfg.shard_count as u8)
                    .filter(|s| *s as usize % cfg.shadows_per_group == h)
                    .collect();
                nodes.shadows.insert(id, ShadowNode::new(&shadow_cfg, &shards)?);
                for &s in &shards {
                    fabric.ctrl.shard_map.assign(g, s, id);
                    members.push((id, s));
                }
                fabric.ctrl.shadow_stream_accept(id)?;
                hosts.push(id);
            }
            members.sort_by_key(|&(_, s)| s);
            let last = (cfg.world_size - 1) as u16;
            fabric.ctrl.install_multicast_group(g, 0, 1, members.clone())?;
            fabric.ctrl.install_multicast_group(g, last, 0, members)?;
            shadow_ids.push(hosts);
        }

        for m in 0..cfg.mirror_sinks {
            fabric.add_mirror_sink(&format!("mirror{m}"));
        }

        let logs = vec![Vec::new(); cfg.groups as usize];
        Ok(Self {
            cfg,
            fabric,
            nodes,
            trainer_ids,
            shadow_ids,
            iteration: 0,
            logs,
            pending_losses: Vec::new(),
            iter_start_tick: 0,
            iter_start_events: 0,
            prev_iter_events: 0,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    /// Next iteration index to run (= completed iterations).
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn trainer(&self, group: u16, rank: usize) -> &TrainerNode {
        &self.nodes.trainers[&self.trainer_ids[group as usize][rank]]
    }

    pub fn shadow_hosts(&self, group: u16) -> impl Iterator<Item = &ShadowNode> {
        self.shadow_ids[group as usize].iter().map(|id| &self.nodes.shadows[id])
    }

    pub fn replicas(&self, group: u16) -> impl Iterator<Item = &ShadowReplica> {
        self.shadow_ids[group as usize].iter().flat_map(|id| {
            let host = &self.nodes.shadows[id];
            host.shards().into_iter().map(move |s| host.replica(s).expect("own shard"))
        })
    }

    /// Mutable access to one replica, for fault-seeding drills.
    pub fn replica_mut(&mut self, group: u16, shard: u8) -> Result<&mut ShadowReplica, WorldError> {
        let host = self.shadow_ids[group as usize][shard as usize % self.cfg.shadows_per_group];
        Ok(self.nodes.shadows.get_mut(&host).expect("installed host").replica_mut(shard)?)
    }

    pub fn counters(&self) -> SwitchCounters {
        self.fabric.counters
    }

    pub fn training_log(&self, group: u16) -> &[LogRow] {
        &self.logs[group as usize]
    }

    /// Scheduler events the last completed iteration consumed.
    pub fn events_last_iteration(&self) -> u64 {
        self.prev_iter_events
    }

    /// Shadow progress events observed during the current/last iteration.
    pub fn shadow_events(&self) -> &[(NodeId, ShadowEvent)] {
        &self.nodes.shadow_events
    }

    pub fn enable_trace(&mut self) {
        self.fabric.enable_trace();
    }

    pub fn take_trace(&mut self) -> Vec<TraceRow> {
        self.fabric.take_trace()
    }

    /// Ingress links of one shadow host, for traffic-balance checks.
    pub fn shadow_ingress_links(&self, group: u16, host: usize) -> [u32; 2] {
        let id = self.shadow_ids[group as usize][host];
        self.fabric.ctrl.shadow_ports.ports(id).expect("registered shadow")
    }

    /// Throttle every shadow host's consumption.
    pub fn set_shadow_policy(&mut self, policy: ConsumerPolicy) {
        for group in &self.shadow_ids {
            for &id in group {
                self.fabric.set_policy(id, policy);
            }
        }
    }

    pub fn set_trainer_policy(&mut self, group: u16, rank: usize, policy: ConsumerPolicy) {
        self.fabric.set_policy(self.trainer_ids[group as usize][rank], policy);
    }

    /// Frames a lenient shadow dropped, summed over all hosts.
    pub fn total_shadow_drops(&self) -> u64 {
        self.nodes
            .shadows
            .values()
            .map(|s| {
                let d = s.drops;
                d.duplicates + d.out_of_expectation + d.wrong_iteration + d.unknown
            })
            .sum()
    }

    /// Every (group, rank) pair, the kill list for whole-world failures.
    pub fn all_ranks(&self) -> Vec<(u16, usize)> {
        let mut all = Vec::new();
        for g in 0..self.cfg.groups {
            for r in 0..self.cfg.world_size {
                all.push((g, r));
            }
        }
        all
    }

    /// Run iterations until `iterations` have completed, injecting one
    /// mid-flight whole-world failure per scheduled iteration.
    pub fn run(
        &mut self,
        iterations: u64,
        plan: &FailurePlan,
    ) -> Result<Vec<RecoveryReport>, WorldError> {
        let mut reports = Vec::new();
        let mut consumed = BTreeSet::new();
        while self.iteration < iterations {
            let i = self.iteration;
            if plan.triggers(i) && consumed.insert(i) {
                let killed = self.all_ranks();
                reports.push(self.interrupt_and_recover(&killed)?);
            } else {
                self.step()?;
            }
        }
        Ok(reports)
    }

    /// Run one full iteration across all groups.
    pub fn step(&mut self) -> Result<(), WorldError> {
        self.begin_all()?;
        self.drain()?;
        self.finish_and_log()
    }

    /// Cut the current iteration mid-flight, rebuild the killed ranks, and
    /// restore every rank from the consolidated shadow checkpoints.
    pub fn interrupt_and_recover(
        &mut self,
        killed: &[(u16, usize)],
    ) -> Result<RecoveryReport, WorldError> {
        let at_iteration = self.iteration;
        let cut = if self.prev_iter_events > 0 {
            (self.prev_iter_events / self.cfg.failure_cut_divisor).max(1)
        } else {
            64
        };

        self.begin_all()?;
        let mut steps = 0u64;
        let mut drained = false;
        while steps < cut {
            if !self.fabric.step(&mut self.nodes)? {
                drained = true;
                break;
            }
            steps += 1;
        }
        self.nodes.take_error()?;

        if drained {
            // The cut budget outlasted the whole iteration: finish it.
            self.drain()?;
            self.finish_and_log()?;
            return Ok(RecoveryReport {
                at_iteration,
                resumed_at: at_iteration + 1,
                killed: killed.to_vec(),
                interrupted: false,
                purged_frames: 0,
                fetched_shards: 0,
            });
        }

        let cut_tick = self.fabric.now();
        let purge = self.fabric.purge();
        for t in self.nodes.trainers.values_mut() {
            t.abort_iteration();
        }
        for &(g, r) in killed {
            let id = self.trainer_ids[g as usize][r];
            let fresh = TrainerNode::new(trainer_config(&self.cfg, g, r))?;
            self.nodes.trainers.insert(id, fresh);
        }
        for s in self.nodes.shadows.values_mut() {
            for rep in s.replicas_mut() {
                rep.discard_inflight();
            }
        }

        let target = self.consolidate_groups()?;
        let fetched = self.fetch_and_restore(target)?;

        if target == at_iteration + 1 {
            // Every shard absorbed the cut iteration before the cut, so its
            // update survives in the restored state. Log its row from the
            // begin-time losses; the emission counters are complete because
            // every tagged frame was delivered.
            self.log_rows(cut_tick);
        }
        self.iteration = target;
        self.nodes.shadow_events.clear();

        Ok(RecoveryReport {
            at_iteration,
            resumed_at: target,
            killed: killed.to_vec(),
            interrupted: true,
            purged_frames: purge.frames + purge.outbox_frames,
            fetched_shards: fetched,
        })
    }

    /// Byte-compare all ranks and shadow replicas of every group.
    pub fn verify(&self) -> Result<(), WorldError> {
        for g in 0..self.cfg.groups {
            let base = self.trainer(g, 0);
            for r in 1..self.cfg.world_size {
                let other = self.trainer(g, r);
                if !bits_equal(base.params().as_slice(), other.params().as_slice())
                    || !bits_equal(&base.optim().m, &other.optim().m)
                    || !bits_equal(&base.optim().v, &other.optim().v)
                {
                    return Err(WorldError::Divergence {
                        iteration: self.iteration,
                        detail: format!("group {g}: rank {r} differs from rank 0"),
                    });
                }
            }
            for replica in self.replicas(g) {
                if replica.completed() != self.iteration {
                    return Err(WorldError::Divergence {
                        iteration: self.iteration,
                        detail: format!(
                            "group {g}: shard {} completed {} of {} iterations",
                            replica.shard(),
                            replica.completed(),
                            self.iteration
                        ),
                    });
                }
                if let Some(d) = compare_owned_state(replica, base.params(), base.optim()) {
                    return Err(WorldError::Divergence {
                        iteration: self.iteration,
                        detail: format!(
                            "group {g}: shard {} diverges at {} byte {} of layer {}",
                            d.shard, d.array, d.byte_offset, d.layer
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    /// CRC-32 digests of rank 0's parameter and optimizer bytes.
    pub fn state_digest(&self, group: u16) -> (u32, u32) {
        let t = self.trainer(group, 0);
        let params = t.params().to_le_bytes();
        let mut opt_bytes: Vec<u8> =
            t.optim().m.iter().flat_map(|x| x.to_le_bytes()).collect();
        opt_bytes.extend(t.optim().v.iter().flat_map(|x| x.to_le_bytes()));
        (crc32fast::hash(&params), crc32fast::hash(&opt_bytes))
    }

    fn begin_all(&mut self) -> Result<(), WorldError> {
        self.iter_start_tick = self.fabric.now();
        self.iter_start_events = self.fabric.events_processed();
        self.nodes.tagged_bytes.clear();
        self.nodes.shadow_events.clear();
        self.pending_losses = vec![Vec::new(); self.cfg.groups as usize];
        for g in 0..self.cfg.groups as usize {
            for r in 0..self.cfg.world_size {
                let id = self.trainer_ids[g][r];
                let trainer = self.nodes.trainers.get_mut(&id).expect("registered trainer");
                let frames = trainer.begin_iteration()?;
                self.pending_losses[g].push(trainer.last_loss());
                self.nodes.count_tagged(&frames);
                self.fabric.submit(id, frames)?;
            }
        }
        Ok(())
    }

    /// Deliver everything in flight, then settle the credit loop.
    fn drain(&mut self) -> Result<(), WorldError> {
        self.fabric.run_until_quiet(&mut self.nodes, self.cfg.event_budget)?;
        self.nodes.take_error()?;
        self.fabric.flush_credit_residue()?;
        self.fabric.run_until_quiet(&mut self.nodes, self.cfg.event_budget)?;
        self.nodes.take_error()?;
        debug_assert!(self.fabric.is_pristine(), "credits must settle between iterations");
        Ok(())
    }

    fn finish_and_log(&mut self) -> Result<(), WorldError> {
        for g in 0..self.cfg.groups as usize {
            for r in 0..self.cfg.world_size {
                let id = self.trainer_ids[g][r];
                let report =
                    self.nodes.trainers.get_mut(&id).expect("registered trainer").finish_iteration()?;
                debug_assert_eq!(report.iteration, self.iteration);
                debug_assert_eq!(report.loss.to_bits(), self.pending_losses[g][r].to_bits());
            }
        }
        self.log_rows(self.fabric.now());
        self.prev_iter_events = self.fabric.events_processed() - self.iter_start_events;
        self.iteration += 1;
        if self.cfg.verify_each_iteration {
            self.verify()?;
        }
        Ok(())
    }

    fn log_rows(&mut self, end_tick: Tick) {
        for g in 0..self.cfg.groups {
            let losses = &self.pending_losses[g as usize];
            let loss = losses.iter().sum::<f32>() / losses.len() as f32;
            self.logs[g as usize].push(LogRow {
                iteration: self.iteration,
                loss,
                tagged_bytes: self.nodes.tagged_bytes.get(&g).copied().unwrap_or(0),
                wall_ticks: end_tick - self.iter_start_tick,
            });
        }
    }

    /// Consolidate every group's replicas; all groups must land on the same
    /// iteration for the lockstep run loop to continue.
    fn consolidate_groups(&mut self) -> Result<u64, WorldError> {
        let mut target = None;
        for g in 0..self.cfg.groups as usize {
            let ids = self.shadow_ids[g].clone();
            let replicas: Vec<&mut ShadowReplica> = self
                .nodes
                .shadows
                .iter_mut()
                .filter(|(id, _)| ids.contains(id))
                .flat_map(|(_, s)| s.replicas_mut())
                .collect();
            let (t, _files) = consolidate(replicas)?;
            match target {
                None => target = Some(t),
                Some(prev) if prev != t => {
                    return Err(WorldError::Recovery(format!(
                        "groups consolidated at different iterations ({prev} vs {t})"
                    )))
                }
                Some(_) => {}
            }
        }
        target.ok_or_else(|| WorldError::Recovery("no shadow replicas to consolidate".into()))
    }

    /// Every rank fetches every shard of its group over control frames, then
    /// restores from the reassembled checkpoint set.
    fn fetch_and_restore(&mut self, target: u64) -> Result<usize, WorldError> {
        self.nodes.fetched.clear();
        for g in 0..self.cfg.groups as usize {
            for r in 0..self.cfg.world_size {
                let id = self.trainer_ids[g][r];
                let requests: Vec<WireFrame> = (0..self.cfg.shard_count as u8)
                    .map(|s| fetch_shard_request(g as u16, r as u16, s))
                    .collect();
                self.fabric.submit(id, requests)?;
            }
        }
        self.drain()?;

        let mut fetched = 0;
        for g in 0..self.cfg.groups as usize {
            for r in 0..self.cfg.world_size {
                let id = self.trainer_ids[g][r];
                let mut files = Vec::with_capacity(self.cfg.shard_count);
                for s in 0..self.cfg.shard_count as u8 {
                    let bytes = self.nodes.fetched.remove(&(id, s)).ok_or_else(|| {
                        WorldError::Recovery(format!(
                            "group {g} rank {r} never received shard {s}"
                        ))
                    })?;
                    files.push(CheckpointFile::decode(&bytes)?);
                    fetched += 1;
                }
                let trainer = self.nodes.trainers.get_mut(&id).expect("registered trainer");
                let table = trainer.params().layer_table();
                let (params, opt, iteration) = consolidate_files(&files, &table)?;
                if iteration != target {
                    return Err(WorldError::Recovery(format!(
                        "fetched checkpoint at iteration {iteration}, expected {target}"
                    )));
                }
                trainer.restore(params, opt, iteration)?;
            }
        }
        Ok(fetched)
    }
}

fn trainer_config(cfg: &WorldConfig, group: u16, rank: usize) -> TrainerConfig {
    TrainerConfig {
        world_size: cfg.world_size,
        rank,
        dp_group: group,
        num_channels: cfg.num_channels,
        model: cfg.model.clone(),
        bucket_cap_bytes: cfg.bucket_cap_bytes,
        shard_count: cfg.shard_count,
        mtu_payload: cfg.mtu_payload,
        seed: cfg.seed,
        optim: cfg.optim,
        hyper: cfg.hyper,
        schedule: cfg.schedule,
    }
}

fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
