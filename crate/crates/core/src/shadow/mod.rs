//! Shadow nodes: live checkpoints built from mirrored gradient traffic.
//!
//! A shadow replica owns one optimizer shard. It predicts the tagged streams
//! for its buckets, reassembles each iteration's reduced gradients, and runs
//! the same optimizer step as the trainers, keeping its parameter slice
//! byte-identical to theirs without ever running forward or backward passes.
//! On failure, replicas consolidate at the lowest iteration any shard
//! completed and serve their checkpoint files back to the trainers.

pub mod checkpoint;
pub mod expect;
pub mod reassembly;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collective::{RingConfig, ScheduleError};
use crate::fabric::frame::{MsgType, WireFrame};
use crate::fabric::switch::ctrl_op;
use crate::optim::{
    partition_parameters, Hyper, LrSchedule, OptimError, OptimKind, OptimState,
};
use crate::trainer::bucket::{build_buckets, BucketError, BucketLayout};
use crate::trainer::flat::{le_bytes_to_f32s, FlatError, FlatTensor};
use crate::trainer::model::{init_params, MlpSpec, ModelError};
use crate::trainer::node::{scale_mean, TrainerConfig};
use checkpoint::{CheckpointError, CheckpointFile, LayerRecord, CHECKPOINT_VERSION};
use expect::{expected_stream_layout, ExpectError, StreamExpectation};
use reassembly::{IngestEvent, ReassemblyError, ReassemblyState};

#[derive(Debug, Error, PartialEq)]
pub enum ShadowError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no replica for shard {0}")]
    UnknownShard(u8),
    #[error("frame from dp group {got}, node mirrors group {expected}")]
    WrongGroup { expected: u16, got: u16 },
    #[error("frame for iteration {got}, replica expects {expected}")]
    IterationGap { expected: u64, got: u64 },
    #[error("shard {shard} is missing buckets {missing:?}")]
    IncompleteBuckets { shard: u8, missing: Vec<u32> },
    #[error("no iteration in flight")]
    NoIterationInFlight,
    #[error("consolidation failed: {0}")]
    Consolidation(String),
    #[error("shard {0} has no consolidated checkpoint to serve")]
    NotConsolidated(u8),
    #[error("requested [{offset}, {offset}+{requested}) of a {len}-byte checkpoint")]
    RangeOutOfBounds { len: u64, offset: u64, requested: u64 },
    #[error("fetch rejected with code {code}")]
    FetchRejected { code: u8 },
    #[error("malformed control frame: {0}")]
    MalformedCtrl(String),
    #[error(transparent)]
    Expect(#[from] ExpectError),
    #[error(transparent)]
    Reassembly(#[from] ReassemblyError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Bucket(#[from] BucketError),
    #[error(transparent)]
    Flat(#[from] FlatError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Rejection codes carried in RESP_ERR control frames.
pub mod fetch_err {
    pub const UNKNOWN_SHARD: u8 = 1;
    pub const NOT_CONSOLIDATED: u8 = 2;
    pub const BAD_RANGE: u8 = 3;
    pub const MALFORMED: u8 = 4;
}

/// Everything a shadow must agree on with the trainers it mirrors.
#[derive(Debug, Clone)]
pub struct ShadowConfig {
    pub world_size: usize,
    pub num_channels: usize,
    pub dp_group: u16,
    pub model: MlpSpec,
    pub bucket_cap_bytes: u64,
    pub shard_count: usize,
    pub seed: u64,
    pub optim: OptimKind,
    pub hyper: Hyper,
    pub schedule: LrSchedule,
}

impl ShadowConfig {
    /// The shared subset of a trainer's configuration.
    pub fn from_trainer(cfg: &TrainerConfig) -> Self {
        Self {
            world_size: cfg.world_size,
            num_channels: cfg.num_channels,
            dp_group: cfg.dp_group,
            model: cfg.model.clone(),
            bucket_cap_bytes: cfg.bucket_cap_bytes,
            shard_count: cfg.shard_count,
            seed: cfg.seed,
            optim: cfg.optim,
            hyper: cfg.hyper,
            schedule: cfg.schedule,
        }
    }

    /// Stable identifier stored in checkpoint headers.
    pub fn model_id(&self) -> String {
        let dims: Vec<String> = std::iter::once(self.model.input_dim)
            .chain(self.model.hidden.iter().copied())
            .chain(std::iter::once(self.model.output_dim))
            .map(|d| d.to_string())
            .collect();
        format!("mlp-{}-seed{}", dims.join("x"), self.seed)
    }
}

/// Observable progress of a shadow replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowEvent {
    BucketComplete { shard: u8, bucket: u32 },
    /// The update for this 0-based iteration index was just applied.
    IterationApplied { shard: u8, iteration: u64 },
}

// Retained previous-iteration state, for min-rule consolidation.
#[derive(Debug, Clone)]
struct Snapshot {
    completed: u64,
    params: FlatTensor,
    opt: OptimState,
}

/// One optimizer shard's live checkpoint.
///
/// Parameters and moments span the full model extent so element offsets
/// match the trainers'; only the owned bucket ranges are ever written.
#[derive(Debug, Clone)]
pub struct ShadowReplica {
    cfg: ShadowConfig,
    shard: u8,
    layout: BucketLayout,
    expect: StreamExpectation,
    owned_buckets: Vec<u32>,
    params: FlatTensor,
    opt: OptimState,
    base_lr: f32,
    /// Optimizer steps applied; also the next iteration index to mirror.
    completed: u64,
    prev: Option<Snapshot>,
    current: Option<ReassemblyState>,
    /// Pinned (iteration, encoded file) once consolidation ran.
    consolidated: Option<(u64, Vec<u8>)>,
}

impl ShadowReplica {
    pub fn new(cfg: ShadowConfig, shard: u8) -> Result<Self, ShadowError> {
        cfg.model.validate()?;
        let ring =
            RingConfig::new(cfg.world_size, 0, cfg.num_channels, cfg.dp_group)?;
        let byte_table: Vec<(String, u64)> = cfg
            .model
            .layer_table()
            .into_iter()
            .map(|(name, elems)| (name, elems as u64 * 4))
            .collect();
        let layout = build_buckets(&byte_table, cfg.bucket_cap_bytes)?;
        let shards = partition_parameters(layout.num_buckets(), cfg.shard_count)?;
        let owned_buckets = shards.buckets_of(shard);
        if owned_buckets.is_empty() {
            return Err(ShadowError::Config(format!(
                "shard {shard} owns no buckets ({} buckets over {} shards)",
                layout.num_buckets(),
                cfg.shard_count
            )));
        }
        let expect = expected_stream_layout(&ring, &layout, &shards)?;
        let params = init_params(&cfg.model, cfg.seed)?;
        let opt = OptimState::new(cfg.optim, cfg.hyper, params.total_elems());
        let base_lr = cfg.hyper.lr;
        Ok(Self {
            cfg,
            shard,
            layout,
            expect,
            owned_buckets,
            params,
            opt,
            base_lr,
            completed: 0,
            prev: None,
            current: None,
            consolidated: None,
        })
    }

    pub fn shard(&self) -> u8 {
        self.shard
    }

    pub fn owned_buckets(&self) -> &[u32] {
        &self.owned_buckets
    }

    pub fn layout(&self) -> &BucketLayout {
        &self.layout
    }

    pub fn params(&self) -> &FlatTensor {
        &self.params
    }

    /// Mutable parameter access, for fault seeding in verification drills.
    pub fn params_mut(&mut self) -> &mut FlatTensor {
        &mut self.params
    }

    pub fn optim(&self) -> &OptimState {
        &self.opt
    }

    /// Iterations fully applied so far.
    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Owned layers as (name, element range) pairs, ascending by offset.
    pub fn owned_layer_extents(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        for &b in &self.owned_buckets {
            let bucket = self.layout.bucket(b).expect("owned bucket exists");
            for e in &bucket.entries {
                let start = e.flat_byte_start as usize / 4;
                out.push((e.layer.clone(), start..start + e.byte_len as usize / 4));
            }
        }
        out.sort_by_key(|(_, r)| r.start);
        out
    }

    /// Consume one mirrored tagged frame; may complete buckets and, with the
    /// last owned bucket, apply the iteration's update.
    pub fn ingest(&mut self, frame: &WireFrame) -> Result<Vec<ShadowEvent>, ShadowError> {
        if frame.shadow_shard != self.shard {
            return Err(ShadowError::UnknownShard(frame.shadow_shard));
        }
        if self.current.is_none() {
            if frame.iteration != self.completed {
                return Err(ShadowError::IterationGap {
                    expected: self.completed,
                    got: frame.iteration,
                });
            }
            self.current =
                Some(ReassemblyState::new(&self.expect, self.completed, Some(self.shard)));
        }
        let st = self.current.as_mut().expect("just ensured");
        let mut events = Vec::new();
        for ev in st.ingest_frame(frame)? {
            let IngestEvent::BucketComplete(bucket) = ev;
            events.push(ShadowEvent::BucketComplete { shard: self.shard, bucket });
        }
        if self.current.as_ref().is_some_and(|st| st.all_complete()) {
            let iteration = self.apply_update()?;
            events.push(ShadowEvent::IterationApplied { shard: self.shard, iteration });
        }
        Ok(events)
    }

    /// Step the optimizer over the owned range with the reassembled
    /// gradients. Requires every owned bucket of the in-flight iteration.
    pub fn apply_update(&mut self) -> Result<u64, ShadowError> {
        let st = self.current.as_ref().ok_or(ShadowError::NoIterationInFlight)?;
        if !st.all_complete() {
            return Err(ShadowError::IncompleteBuckets {
                shard: self.shard,
                missing: st.missing_buckets(),
            });
        }
        let iteration = st.iteration();
        debug_assert_eq!(iteration, self.completed);

        // Retain exactly one previous-iteration snapshot for consolidation.
        self.prev = Some(Snapshot {
            completed: self.completed,
            params: self.params.clone(),
            opt: self.opt.clone(),
        });

        let mut grads = self.params.zeros_like();
        for &b in &self.owned_buckets {
            let floats = le_bytes_to_f32s(st.bucket_bytes(b)?);
            self.layout.scatter_bucket(b, &floats, &mut grads)?;
        }
        scale_mean(grads.as_mut_slice(), self.cfg.world_size);
        self.opt.hyper.lr = self.cfg.schedule.lr_at(self.base_lr, iteration);
        self.opt.advance_step();
        for &b in &self.owned_buckets {
            let entries = self.layout.bucket(b)?.entries.clone();
            for e in &entries {
                let start = e.flat_byte_start as usize / 4;
                self.opt.step_range(
                    self.params.as_mut_slice(),
                    grads.as_slice(),
                    start..start + e.byte_len as usize / 4,
                )?;
            }
        }
        self.completed += 1;
        self.current = None;
        Ok(iteration)
    }

    /// Drop any partially reassembled iteration (trainers will replay it).
    pub fn discard_inflight(&mut self) {
        self.current = None;
    }

    // State pinned at `target` completed iterations: the live state, or the
    // retained snapshot if this shard already advanced one past it.
    fn pinned_state(&self, target: u64) -> Result<(&FlatTensor, &OptimState), ShadowError> {
        if target == self.completed {
            return Ok((&self.params, &self.opt));
        }
        if let Some(prev) = &self.prev {
            if prev.completed == target {
                return Ok((&prev.params, &prev.opt));
            }
        }
        Err(ShadowError::Consolidation(format!(
            "shard {} at iteration {} cannot produce iteration {target}",
            self.shard, self.completed
        )))
    }

    fn file_from(&self, params: &FlatTensor, opt: &OptimState, target: u64) -> CheckpointFile {
        let extents = self.owned_layer_extents();
        let layers = extents
            .iter()
            .map(|(name, r)| LayerRecord {
                name: name.clone(),
                params: params.as_slice()[r.clone()].to_vec(),
            })
            .collect();
        let m = extents.iter().map(|(_, r)| opt.m[r.clone()].to_vec()).collect();
        let v = match opt.kind {
            OptimKind::AdamW => extents.iter().map(|(_, r)| opt.v[r.clone()].to_vec()).collect(),
            OptimKind::Sgd => Vec::new(),
        };
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            model_id: self.cfg.model_id(),
            iteration: target,
            shard_id: self.shard as u32,
            shard_count: self.cfg.shard_count as u32,
            layers,
            kind: opt.kind,
            hyper: opt.hyper,
            step: opt.step,
            m,
            v,
        }
    }

    // Pin this replica to `target`: emit its checkpoint file, rewind live
    // state onto the pinned iteration, and retain the encoding for serving.
    fn pin(&mut self, target: u64) -> Result<CheckpointFile, ShadowError> {
        let (params, opt) = self.pinned_state(target)?;
        let file = self.file_from(params, opt, target);
        if target != self.completed {
            let prev = self.prev.take().expect("pinned_state used the snapshot");
            self.params = prev.params;
            self.opt = prev.opt;
            self.completed = prev.completed;
        }
        self.prev = None;
        self.current = None;
        self.consolidated = Some((target, file.encode()));
        Ok(file)
    }

    /// Encoded checkpoint bytes, whole or a window, after consolidation.
    pub fn serve_checkpoint(
        &self,
        range: Option<(u64, u32)>,
    ) -> Result<(Vec<u8>, u64), ShadowError> {
        let (_, bytes) = self
            .consolidated
            .as_ref()
            .ok_or(ShadowError::NotConsolidated(self.shard))?;
        let total = bytes.len() as u64;
        match range {
            None => Ok((bytes.clone(), total)),
            Some((offset, len)) => {
                if offset + len as u64 > total {
                    return Err(ShadowError::RangeOutOfBounds {
                        len: total,
                        offset,
                        requested: len as u64,
                    });
                }
                Ok((bytes[offset as usize..offset as usize + len as usize].to_vec(), total))
            }
        }
    }
}

/// Min-rule consolidation across every replica of every shadow node.
///
/// Pins all shards at the lowest completed iteration, rewinding any shard
/// that advanced one past it onto its retained snapshot. A shard further
/// ahead than that cannot produce the target and fails the consolidation.
pub fn consolidate(
    replicas: Vec<&mut ShadowReplica>,
) -> Result<(u64, Vec<CheckpointFile>), ShadowError> {
    let target = replicas
        .iter()
        .map(|r| r.completed)
        .min()
        .ok_or_else(|| ShadowError::Consolidation("no replicas".into()))?;
    let mut files = Vec::with_capacity(replicas.len());
    for r in replicas {
        files.push(r.pin(target)?);
    }
    files.sort_by_key(|f| f.shard_id);
    Ok((target, files))
}

/// Build the CTRL frame asking a shard's owner for its whole checkpoint.
pub fn fetch_shard_request(dp_group: u16, requester: u16, shard: u8) -> WireFrame {
    let mut f = WireFrame::data();
    f.msg_type = MsgType::Ctrl;
    f.dp_group = dp_group;
    f.src_rank = requester;
    f.shadow_shard = shard;
    f.payload = vec![ctrl_op::FETCH_SHARD];
    f.payload.extend_from_slice(&requester.to_le_bytes());
    f
}

/// Build the CTRL frame asking for a byte window of a shard checkpoint.
pub fn fetch_range_request(
    dp_group: u16,
    requester: u16,
    shard: u8,
    offset: u64,
    len: u32,
) -> WireFrame {
    let mut f = fetch_shard_request(dp_group, requester, shard);
    f.payload[0] = ctrl_op::FETCH_RANGE;
    f.payload.extend_from_slice(&offset.to_le_bytes());
    f.payload.extend_from_slice(&len.to_le_bytes());
    f
}

/// Parsed body of a successful fetch response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchResponse {
    pub shard: u8,
    pub offset: u64,
    /// Size of the complete encoded checkpoint, not just this window.
    pub total_len: u64,
    pub bytes: Vec<u8>,
}

/// Decode a RESP_OK/RESP_ERR control frame from a shadow node.
pub fn parse_fetch_response(frame: &WireFrame) -> Result<FetchResponse, ShadowError> {
    let payload = &frame.payload;
    let op = *payload.first().ok_or_else(|| {
        ShadowError::MalformedCtrl("empty control payload".into())
    })?;
    match op {
        ctrl_op::RESP_ERR => {
            let code = *payload.get(3).ok_or_else(|| {
                ShadowError::MalformedCtrl("short RESP_ERR".into())
            })?;
            Err(ShadowError::FetchRejected { code })
        }
        ctrl_op::RESP_OK => {
            if payload.len() < 16 {
                return Err(ShadowError::MalformedCtrl("short RESP_OK".into()));
            }
            Ok(FetchResponse {
                shard: payload[3],
                offset: u64::from_le_bytes(payload[4..12].try_into().unwrap()),
                total_len: u32::from_le_bytes(payload[12..16].try_into().unwrap()) as u64,
                bytes: payload[16..].to_vec(),
            })
        }
        other => Err(ShadowError::MalformedCtrl(format!("unexpected opcode {other:#04x}"))),
    }
}

/// How a shadow treats frames that fall outside its expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    /// Unexpected frames are logic bugs: fail loudly (deterministic runs).
    Strict,
    /// Unexpected frames are counted and dropped (socket runs).
    Lenient,
}

/// Frames a lenient shadow node dropped, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropCounters {
    pub duplicates: u64,
    pub out_of_expectation: u64,
    pub wrong_iteration: u64,
    pub unknown: u64,
}

/// One shadow host carrying one or more shard replicas plus the
/// checkpoint-serving endpoint.
#[derive(Debug)]
pub struct ShadowNode {
    replicas: BTreeMap<u8, ShadowReplica>,
    dp_group: u16,
    mode: IngestMode,
    pub drops: DropCounters,
}

impl ShadowNode {
    pub fn new(cfg: &ShadowConfig, shards: &[u8]) -> Result<Self, ShadowError> {
        let mut replicas = BTreeMap::new();
        for &s in shards {
            replicas.insert(s, ShadowReplica::new(cfg.clone(), s)?);
        }
        if replicas.is_empty() {
            return Err(ShadowError::Config("shadow node hosts no shards".into()));
        }
        Ok(Self {
            replicas,
            dp_group: cfg.dp_group,
            mode: IngestMode::Strict,
            drops: DropCounters::default(),
        })
    }

    pub fn set_mode(&mut self, mode: IngestMode) {
        self.mode = mode;
    }

    pub fn shards(&self) -> Vec<u8> {
        self.replicas.keys().copied().collect()
    }

    pub fn replica(&self, shard: u8) -> Result<&ShadowReplica, ShadowError> {
        self.replicas.get(&shard).ok_or(ShadowError::UnknownShard(shard))
    }

    pub fn replica_mut(&mut self, shard: u8) -> Result<&mut ShadowReplica, ShadowError> {
        self.replicas.get_mut(&shard).ok_or(ShadowError::UnknownShard(shard))
    }

    pub fn replicas_mut(&mut self) -> impl Iterator<Item = &mut ShadowReplica> {
        self.replicas.values_mut()
    }

    /// Route one mirrored DATA frame to its shard replica.
    pub fn handle_data(&mut self, frame: &WireFrame) -> Result<Vec<ShadowEvent>, ShadowError> {
        let result = if frame.dp_group != self.dp_group {
            Err(ShadowError::WrongGroup { expected: self.dp_group, got: frame.dp_group })
        } else {
            match self.replicas.get_mut(&frame.shadow_shard) {
                Some(r) => r.ingest(frame),
                None => Err(ShadowError::UnknownShard(frame.shadow_shard)),
            }
        };
        match (&result, self.mode) {
            (Err(err), IngestMode::Lenient) => {
                match err {
                    ShadowError::Reassembly(ReassemblyError::DuplicateRange { .. }) => {
                        self.drops.duplicates += 1;
                    }
                    ShadowError::Reassembly(ReassemblyError::WrongIteration { .. })
                    | ShadowError::IterationGap { .. } => self.drops.wrong_iteration += 1,
                    ShadowError::Reassembly(_) => self.drops.out_of_expectation += 1,
                    _ => self.drops.unknown += 1,
                }
                Ok(Vec::new())
            }
            _ => result,
        }
    }

    /// Serve one checkpoint-fetch CTRL frame; errors become RESP_ERR frames.
    pub fn handle_ctrl(&mut self, frame: &WireFrame) -> WireFrame {
        let mut resp = WireFrame::data();
        resp.msg_type = MsgType::Ctrl;
        resp.dp_group = frame.dp_group;
        resp.src_rank = frame.src_rank;
        resp.shadow_shard = frame.shadow_shard;

        let requester = match frame.payload.get(1..3) {
            Some(b) => u16::from_le_bytes(b.try_into().unwrap()),
            None => 0,
        };
        let reject = |mut resp: WireFrame, code: u8| {
            resp.payload = vec![ctrl_op::RESP_ERR];
            resp.payload.extend_from_slice(&requester.to_le_bytes());
            resp.payload.push(code);
            resp
        };

        let op = match frame.payload.first() {
            Some(&op) if frame.payload.len() >= 3 => op,
            _ => return reject(resp, fetch_err::MALFORMED),
        };
        let range = match op {
            ctrl_op::FETCH_SHARD => None,
            ctrl_op::FETCH_RANGE => {
                if frame.payload.len() < 15 {
                    return reject(resp, fetch_err::MALFORMED);
                }
                let offset = u64::from_le_bytes(frame.payload[3..11].try_into().unwrap());
                let len = u32::from_le_bytes(frame.payload[11..15].try_into().unwrap());
                Some((offset, len))
            }
            _ => return reject(resp, fetch_err::MALFORMED),
        };
        let replica = match self.replicas.get(&frame.shadow_shard) {
            Some(r) => r,
            None => return reject(resp, fetch_err::UNKNOWN_SHARD),
        };
        let (bytes, total) = match replica.serve_checkpoint(range) {
            Ok(ok) => ok,
            Err(ShadowError::NotConsolidated(_)) => {
                return reject(resp, fetch_err::NOT_CONSOLIDATED)
            }
            Err(_) => return reject(resp, fetch_err::BAD_RANGE),
        };
        resp.payload = vec![ctrl_op::RESP_OK];
        resp.payload.extend_from_slice(&requester.to_le_bytes());
        resp.payload.push(frame.shadow_shard);
        resp.payload.extend_from_slice(&range.map_or(0, |(o, _)| o).to_le_bytes());
        resp.payload.extend_from_slice(&(total as u32).to_le_bytes());
        resp.payload.extend_from_slice(&bytes);
        resp
    }
}

/// First byte-level divergence between a replica and full-model state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateDivergence {
    pub shard: u8,
    pub layer: String,
    /// Offset within the layer's little-endian image.
    pub byte_offset: u64,
    /// Which array diverged: "params", "m", or "v".
    pub array: &'static str,
}

/// Byte-compare a replica's owned extents against trainer-side state.
pub fn compare_owned_state(
    replica: &ShadowReplica,
    params: &FlatTensor,
    opt: &OptimState,
) -> Option<StateDivergence> {
    let diverge = |layer: &str, array: &'static str, a: &[f32], b: &[f32]| {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            if x.to_bits() != y.to_bits() {
                return Some(StateDivergence {
                    shard: replica.shard(),
                    layer: layer.to_string(),
                    byte_offset: i as u64 * 4,
                    array,
                });
            }
        }
        None
    };
    for (layer, range) in replica.owned_layer_extents() {
        if let Some(d) = diverge(
            &layer,
            "params",
            &replica.params().as_slice()[range.clone()],
            &params.as_slice()[range.clone()],
        ) {
            return Some(d);
        }
        if let Some(d) =
            diverge(&layer, "m", &replica.optim().m[range.clone()], &opt.m[range.clone()])
        {
            return Some(d);
        }
        if replica.optim().kind == OptimKind::AdamW {
            if let Some(d) =
                diverge(&layer, "v", &replica.optim().v[range.clone()], &opt.v[range])
            {
                return Some(d);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::node::TrainerNode;
    use checkpoint::consolidate_files;
    use std::collections::VecDeque;

    fn trainer_config(world: usize, rank: usize, shard_count: usize) -> TrainerConfig {
        TrainerConfig {
            world_size: world,
            rank,
            dp_group: 0,
            num_channels: 2,
            model: MlpSpec { input_dim: 6, hidden: vec![8, 7, 6], output_dim: 5, batch_size: 4 },
            bucket_cap_bytes: 256,
            shard_count,
            mtu_payload: 64,
            seed: 7,
            optim: OptimKind::AdamW,
            hyper: Hyper::default(),
            schedule: LrSchedule::Cosine { total_iters: 40 },
        }
    }

    fn cluster(world: usize, shard_count: usize) -> Vec<TrainerNode> {
        (0..world)
            .map(|r| TrainerNode::new(trainer_config(world, r, shard_count)).unwrap())
            .collect()
    }

    /// One relayed ring iteration; returns the tagged frames in order.
    fn run_iteration(nodes: &mut [TrainerNode]) -> Vec<WireFrame> {
        let n = nodes.len();
        let mut tagged = Vec::new();
        let mut inbox: Vec<VecDeque<WireFrame>> = (0..n).map(|_| VecDeque::new()).collect();
        for r in 0..n {
            for f in nodes[r].begin_iteration().unwrap() {
                if f.is_tagged() {
                    tagged.push(f.clone());
                }
                inbox[(r + 1) % n].push_back(f);
            }
        }
        loop {
            let mut progressed = false;
            for dst in 0..n {
                if let Some(f) = inbox[dst].pop_front() {
                    progressed = true;
                    for out in nodes[dst].on_frame(&f).unwrap() {
                        if out.is_tagged() {
                            tagged.push(out.clone());
                        }
                        inbox[(dst + 1) % n].push_back(out);
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        tagged
    }

    #[test]
    fn replicas_track_trainers_bit_exactly_for_all_shard_counts() {
        for shard_count in [1usize, 2, 4] {
            let world = 4;
            let mut nodes = cluster(world, shard_count);
            let cfg = ShadowConfig::from_trainer(nodes[0].config());
            let shards: Vec<u8> = (0..shard_count as u8).collect();
            let mut shadow = ShadowNode::new(&cfg, &shards).unwrap();

            for iter in 0..5u64 {
                let tagged = run_iteration(&mut nodes);
                let mut applied = Vec::new();
                for f in &tagged {
                    for ev in shadow.handle_data(f).unwrap() {
                        if let ShadowEvent::IterationApplied { shard, iteration } = ev {
                            applied.push((shard, iteration));
                        }
                    }
                }
                for t in nodes.iter_mut() {
                    t.finish_iteration().unwrap();
                }
                assert_eq!(applied.len(), shard_count, "k={shard_count} iter={iter}");
                assert!(applied.iter().all(|&(_, i)| i == iter));
                for &s in &shards {
                    let replica = shadow.replica(s).unwrap();
                    assert_eq!(replica.completed(), iter + 1);
                    assert_eq!(
                        compare_owned_state(replica, nodes[0].params(), nodes[0].optim()),
                        None,
                        "k={shard_count} iter={iter} shard={s}"
                    );
                }
            }
        }
    }

    #[test]
    fn consolidated_model_is_invariant_to_shard_count() {
        let results: Vec<(Vec<u8>, Vec<u8>)> = [1usize, 2, 4]
            .into_iter()
            .map(|k| {
                let mut nodes = cluster(4, k);
                let cfg = ShadowConfig::from_trainer(nodes[0].config());
                let shards: Vec<u8> = (0..k as u8).collect();
                let mut shadow = ShadowNode::new(&cfg, &shards).unwrap();
                for _ in 0..3 {
                    for f in run_iteration(&mut nodes) {
                        shadow.handle_data(&f).unwrap();
                    }
                    for t in nodes.iter_mut() {
                        t.finish_iteration().unwrap();
                    }
                }
                let (iteration, files) =
                    consolidate(shadow.replicas_mut().collect()).unwrap();
                assert_eq!(iteration, 3);
                let table = nodes[0].params().layer_table();
                let (params, opt, _) = consolidate_files(&files, &table).unwrap();
                assert_eq!(params.to_le_bytes(), nodes[0].params().to_le_bytes());
                let m_bytes: Vec<u8> =
                    opt.m.iter().flat_map(|x| x.to_le_bytes()).collect();
                (params.to_le_bytes(), m_bytes)
            })
            .collect();
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
    }

    #[test]
    fn consolidation_min_rule_rewinds_to_the_retained_snapshot() {
        let mut nodes = cluster(4, 2);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut shadow = ShadowNode::new(&cfg, &[0, 1]).unwrap();

        // Iteration 0 reaches both shards; iteration 1 only shard 0.
        for f in run_iteration(&mut nodes) {
            shadow.handle_data(&f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.finish_iteration().unwrap();
        }
        let snapshot_params = shadow.replica(0).unwrap().params().to_le_bytes();
        for f in run_iteration(&mut nodes) {
            if f.shadow_shard == 0 {
                shadow.handle_data(&f).unwrap();
            }
        }
        assert_eq!(shadow.replica(0).unwrap().completed(), 2);
        assert_eq!(shadow.replica(1).unwrap().completed(), 1);

        let (iteration, files) = consolidate(shadow.replicas_mut().collect()).unwrap();
        assert_eq!(iteration, 1);
        assert!(files.iter().all(|f| f.iteration == 1));
        // Shard 0 rewound onto its snapshot of iteration 1.
        assert_eq!(shadow.replica(0).unwrap().completed(), 1);
        assert_eq!(shadow.replica(0).unwrap().params().to_le_bytes(), snapshot_params);
    }

    #[test]
    fn a_shard_two_iterations_ahead_fails_consolidation() {
        let mut nodes = cluster(4, 2);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut shadow = ShadowNode::new(&cfg, &[0, 1]).unwrap();
        for _ in 0..2 {
            for f in run_iteration(&mut nodes) {
                if f.shadow_shard == 0 {
                    shadow.handle_data(&f).unwrap();
                }
            }
            for t in nodes.iter_mut() {
                t.finish_iteration().unwrap();
            }
        }
        assert_eq!(shadow.replica(0).unwrap().completed(), 2);
        assert_eq!(shadow.replica(1).unwrap().completed(), 0);
        assert!(matches!(
            consolidate(shadow.replicas_mut().collect()),
            Err(ShadowError::Consolidation(_))
        ));
    }

    #[test]
    fn discarded_iteration_replays_to_the_same_state() {
        let mut control_nodes = cluster(4, 1);
        let control_cfg = ShadowConfig::from_trainer(control_nodes[0].config());
        let mut control = ShadowNode::new(&control_cfg, &[0]).unwrap();
        let mut nodes = cluster(4, 1);
        let mut shadow = ShadowNode::new(&control_cfg, &[0]).unwrap();

        // Control: two clean iterations.
        for _ in 0..2 {
            for f in run_iteration(&mut control_nodes) {
                control.handle_data(&f).unwrap();
            }
            for t in control_nodes.iter_mut() {
                t.finish_iteration().unwrap();
            }
        }

        // Interrupted: iteration 0 clean, iteration 1 cut partway, aborted
        // on both sides, then replayed.
        for f in run_iteration(&mut nodes) {
            shadow.handle_data(&f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.finish_iteration().unwrap();
        }
        let tagged = run_iteration(&mut nodes);
        for f in &tagged[..tagged.len() / 3] {
            shadow.handle_data(f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.abort_iteration();
        }
        for r in shadow.replicas_mut() {
            r.discard_inflight();
        }
        for f in run_iteration(&mut nodes) {
            shadow.handle_data(&f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.finish_iteration().unwrap();
        }

        assert_eq!(
            shadow.replica(0).unwrap().params().to_le_bytes(),
            control.replica(0).unwrap().params().to_le_bytes()
        );
        assert_eq!(nodes[0].params().to_le_bytes(), control_nodes[0].params().to_le_bytes());
    }

    #[test]
    fn trainers_restored_from_shadows_match_the_control_run() {
        let total = 6;
        let cut = 3u64;

        let mut control = cluster(4, 2);
        let mut control_losses = Vec::new();
        for _ in 0..total {
            run_iteration(&mut control);
            control_losses
                .push(control.iter_mut().map(|t| t.finish_iteration().unwrap().loss).sum::<f32>());
        }

        let mut nodes = cluster(4, 2);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut shadow = ShadowNode::new(&cfg, &[0, 1]).unwrap();
        let mut losses = Vec::new();
        for _ in 0..cut {
            for f in run_iteration(&mut nodes) {
                shadow.handle_data(&f).unwrap();
            }
            losses.push(nodes.iter_mut().map(|t| t.finish_iteration().unwrap().loss).sum::<f32>());
        }

        // Lose the trainers mid-iteration; recover everything from shadows.
        let tagged = run_iteration(&mut nodes);
        for f in &tagged[..tagged.len() / 4] {
            shadow.handle_data(f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.abort_iteration();
        }
        let (iteration, files) = consolidate(shadow.replicas_mut().collect()).unwrap();
        assert_eq!(iteration, cut);
        let table = nodes[0].params().layer_table();
        let (params, opt, iteration) = consolidate_files(&files, &table).unwrap();
        for t in nodes.iter_mut() {
            t.restore(params.clone(), opt.clone(), iteration).unwrap();
        }

        for _ in cut..total as u64 {
            for f in run_iteration(&mut nodes) {
                shadow.handle_data(&f).unwrap();
            }
            losses.push(nodes.iter_mut().map(|t| t.finish_iteration().unwrap().loss).sum::<f32>());
        }
        assert_eq!(
            losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            control_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(nodes[0].params().to_le_bytes(), control[0].params().to_le_bytes());
    }

    #[test]
    fn checkpoints_are_served_whole_or_in_ranges() {
        let mut nodes = cluster(4, 2);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut shadow = ShadowNode::new(&cfg, &[0, 1]).unwrap();
        for f in run_iteration(&mut nodes) {
            shadow.handle_data(&f).unwrap();
        }
        for t in nodes.iter_mut() {
            t.finish_iteration().unwrap();
        }

        // Before consolidation the server refuses.
        let early = shadow.handle_ctrl(&fetch_shard_request(0, 2, 0));
        assert_eq!(
            parse_fetch_response(&early).unwrap_err(),
            ShadowError::FetchRejected { code: fetch_err::NOT_CONSOLIDATED }
        );

        let (_, files) = consolidate(shadow.replicas_mut().collect()).unwrap();
        let expected = files[0].encode();

        let whole = shadow.handle_ctrl(&fetch_shard_request(0, 2, 0));
        let resp = parse_fetch_response(&whole).unwrap();
        assert_eq!(resp.bytes, expected);
        assert_eq!(resp.total_len, expected.len() as u64);
        assert_eq!(CheckpointFile::decode(&resp.bytes).unwrap(), files[0]);

        // Ranged fetches stitch back to the same bytes.
        let mut stitched = Vec::new();
        let mut offset = 0u64;
        while offset < expected.len() as u64 {
            let len = 37.min(expected.len() as u64 - offset) as u32;
            let r = shadow.handle_ctrl(&fetch_range_request(0, 2, 0, offset, len));
            let resp = parse_fetch_response(&r).unwrap();
            assert_eq!(resp.offset, offset);
            stitched.extend_from_slice(&resp.bytes);
            offset += len as u64;
        }
        assert_eq!(stitched, expected);

        let bad = shadow.handle_ctrl(&fetch_range_request(0, 2, 0, expected.len() as u64, 1));
        assert_eq!(
            parse_fetch_response(&bad).unwrap_err(),
            ShadowError::FetchRejected { code: fetch_err::BAD_RANGE }
        );
        let missing = shadow.handle_ctrl(&fetch_shard_request(0, 2, 9));
        assert_eq!(
            parse_fetch_response(&missing).unwrap_err(),
            ShadowError::FetchRejected { code: fetch_err::UNKNOWN_SHARD }
        );
    }

    #[test]
    fn lenient_mode_counts_and_drops_bad_frames() {
        let mut nodes = cluster(4, 1);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut shadow = ShadowNode::new(&cfg, &[0]).unwrap();
        shadow.set_mode(IngestMode::Lenient);

        let tagged = run_iteration(&mut nodes);

        // A duplicate, a frame from the future, and a stray shard.
        shadow.handle_data(&tagged[0]).unwrap();
        assert!(shadow.handle_data(&tagged[0]).unwrap().is_empty());
        let mut future = tagged[1].clone();
        future.iteration = 9;
        shadow.handle_data(&future).unwrap();
        let mut stray = tagged[1].clone();
        stray.shadow_shard = 5;
        shadow.handle_data(&stray).unwrap();
        assert_eq!(
            shadow.drops,
            DropCounters { duplicates: 1, wrong_iteration: 1, unknown: 1, ..Default::default() }
        );

        // The real stream still lands.
        for f in &tagged[1..] {
            shadow.handle_data(f).unwrap();
        }
        assert_eq!(shadow.replica(0).unwrap().completed(), 1);

        // Strict mode would have failed instead.
        shadow.set_mode(IngestMode::Strict);
        assert!(shadow.handle_data(&tagged[0]).is_err());
    }

    #[test]
    fn empty_shards_are_rejected_up_front() {
        let nodes = cluster(4, 2);
        let mut cfg = ShadowConfig::from_trainer(nodes[0].config());
        // More shards than buckets leaves the high shard ids empty.
        cfg.shard_count = 200;
        assert!(matches!(
            ShadowReplica::new(cfg, 199),
            Err(ShadowError::Config(_))
        ));
    }

    #[test]
    fn apply_refuses_partial_iterations() {
        let mut nodes = cluster(4, 1);
        let cfg = ShadowConfig::from_trainer(nodes[0].config());
        let mut replica = ShadowReplica::new(cfg, 0).unwrap();
        assert_eq!(replica.apply_update(), Err(ShadowError::NoIterationInFlight));

        let tagged = run_iteration(&mut nodes);
        replica.ingest(&tagged[0]).unwrap();
        let err = replica.apply_update().unwrap_err();
        assert!(matches!(err, ShadowError::IncompleteBuckets { shard: 0, .. }));
        assert_eq!(replica.completed(), 0);
    }
}
