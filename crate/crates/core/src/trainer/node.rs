//! Per-rank training state machine, independent of transport.
//!
//! Each iteration: synthesize a batch, run forward/backward, then push the
//! gradient buckets around the ring. ReduceScatter accumulates sums chunk by
//! chunk; AllGather distributes the reduced chunks, and the boundary ranks
//! tag what they emit so the switch can replicate it toward shadow nodes.
//! When the last bucket finishes, the node scales the sums to a mean and
//! applies the optimizer.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collective::{
    allgather_recv_chunk, allgather_send_chunk, chunk_refs, reduce_scatter_schedule, should_tag,
    ChannelSeqState, ChunkRef, RingConfig, ScheduleError,
};
use crate::fabric::frame::{MsgType, WireFrame, FLAG_ALLGATHER, FLAG_TAGGED};
use crate::optim::{
    partition_parameters, Hyper, LrSchedule, OptimError, OptimKind, OptimState, ShardAssignment,
};
use crate::trainer::bucket::{build_buckets, BucketError, BucketLayout};
use crate::trainer::flat::{f32s_to_le_bytes, le_bytes_to_f32s, FlatError, FlatTensor};
use crate::trainer::model::{forward_backward, init_params, synth_batch, MlpSpec, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum TrainerError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{op} requires state {expected}, node is in {got}")]
    Phase { op: &'static str, expected: &'static str, got: String },
    #[error("unexpected frame: {0}")]
    UnexpectedFrame(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Bucket(#[from] BucketError),
    #[error(transparent)]
    Flat(#[from] FlatError),
}

/// Everything a rank needs to agree with its peers and shadows.
#[derive(Debug, Clone)]
pub struct TrainerConfig {
    pub world_size: usize,
    pub rank: usize,
    pub dp_group: u16,
    pub num_channels: usize,
    pub model: MlpSpec,
    pub bucket_cap_bytes: u64,
    pub shard_count: usize,
    pub mtu_payload: usize,
    pub seed: u64,
    pub optim: OptimKind,
    pub hyper: Hyper,
    pub schedule: LrSchedule,
}

/// Where the node stands within the current iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainState {
    Idle,
    ReduceScatter { bucket: u32, step: usize },
    AllGather { bucket: u32, round: usize },
    Done,
}

impl TrainState {
    fn name(&self) -> String {
        match self {
            TrainState::Idle => "Idle".into(),
            TrainState::ReduceScatter { bucket, step } => {
                format!("ReduceScatter(bucket {bucket}, step {step})")
            }
            TrainState::AllGather { bucket, round } => {
                format!("AllGather(bucket {bucket}, round {round})")
            }
            TrainState::Done => "Done".into(),
        }
    }
}

/// Outcome of one completed iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    /// 0-based index of the iteration just finished.
    pub iteration: u64,
    /// This rank's local batch loss.
    pub loss: f32,
    /// Tagged payload bytes this rank emitted.
    pub tagged_bytes: u64,
}

/// Scale summed gradients down to the mean. Trainers and shadows must share
/// this exact operation for their parameters to stay bit-identical.
pub fn scale_mean(grads: &mut [f32], world: usize) {
    let inv = 1.0f32 / world as f32;
    for g in grads {
        *g *= inv;
    }
}

/// One data-parallel rank.
pub struct TrainerNode {
    cfg: TrainerConfig,
    /// None in the degenerate single-rank setup, which skips the ring.
    ring: Option<RingConfig>,
    layout: BucketLayout,
    shards: ShardAssignment,
    /// Chunk extents per bucket, fixed for the whole run.
    refs: Vec<Vec<ChunkRef>>,
    params: FlatTensor,
    opt: OptimState,
    base_lr: f32,
    iteration: u64,
    state: TrainState,
    loss: f32,
    grads: Option<FlatTensor>,
    images: Vec<Vec<f32>>,
    /// Bytes received toward the currently expected chunk.
    recv_progress: u64,
    /// One gapless tagged-byte counter per (channel, shard) stream.
    seqs: BTreeMap<(u16, u8), ChannelSeqState>,
    tagged_bytes: u64,
}

impl TrainerNode {
    pub fn new(cfg: TrainerConfig) -> Result<Self, TrainerError> {
        // Segments accumulate in place as f32s, so they must not split one.
        if cfg.mtu_payload == 0 || cfg.mtu_payload % 4 != 0 {
            return Err(TrainerError::Config(format!(
                "mtu_payload {} must be a positive multiple of 4",
                cfg.mtu_payload
            )));
        }
        if cfg.shard_count == 0 || cfg.shard_count > 254 {
            return Err(TrainerError::Config(format!(
                "shard_count {} outside 1..=254",
                cfg.shard_count
            )));
        }
        if cfg.world_size == 0 {
            return Err(TrainerError::Config("world_size must be positive".into()));
        }
        cfg.model.validate()?;
        let ring = if cfg.world_size >= 2 {
            Some(RingConfig::new(cfg.world_size, cfg.rank, cfg.num_channels, cfg.dp_group)?)
        } else {
            None
        };
        let params = init_params(&cfg.model, cfg.seed)?;
        let byte_table: Vec<(String, u64)> = cfg
            .model
            .layer_table()
            .into_iter()
            .map(|(name, elems)| (name, elems as u64 * 4))
            .collect();
        let layout = build_buckets(&byte_table, cfg.bucket_cap_bytes)?;
        let shards = partition_parameters(layout.num_buckets(), cfg.shard_count)?;
        let refs = match &ring {
            Some(r) => (0..layout.num_buckets() as u32)
                .map(|b| {
                    layout
                        .bucket(b)
                        .map(|bk| chunk_refs(r, b, bk.raw_bytes))
                        .map_err(TrainerError::from)
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let opt = OptimState::new(cfg.optim, cfg.hyper, params.total_elems());
        let base_lr = cfg.hyper.lr;
        Ok(Self {
            cfg,
            ring,
            layout,
            shards,
            refs,
            params,
            opt,
            base_lr,
            iteration: 0,
            state: TrainState::Idle,
            loss: 0.0,
            grads: None,
            images: Vec::new(),
            recv_progress: 0,
            seqs: BTreeMap::new(),
            tagged_bytes: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.cfg.rank
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iteration_done(&self) -> bool {
        self.state == TrainState::Done
    }

    /// Batch loss computed by the most recent begin_iteration.
    pub fn last_loss(&self) -> f32 {
        self.loss
    }

    pub fn params(&self) -> &FlatTensor {
        &self.params
    }

    pub fn optim(&self) -> &OptimState {
        &self.opt
    }

    pub fn layout(&self) -> &BucketLayout {
        &self.layout
    }

    pub fn shards(&self) -> &ShardAssignment {
        &self.shards
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    /// Run forward/backward on this iteration's batch and emit the first
    /// ReduceScatter step. With a single rank there is nothing to exchange
    /// and the node goes straight to Done.
    pub fn begin_iteration(&mut self) -> Result<Vec<WireFrame>, TrainerError> {
        if self.state != TrainState::Idle {
            return Err(TrainerError::Phase {
                op: "begin_iteration",
                expected: "Idle",
                got: self.state.name(),
            });
        }
        let (xs, ys) = synth_batch(
            &self.cfg.model,
            self.cfg.seed,
            self.iteration,
            self.cfg.rank as u64,
            self.cfg.dp_group as u64,
        );
        let (loss, grads) = forward_backward(&self.cfg.model, &self.params, &xs, &ys)?;
        self.loss = loss;
        self.tagged_bytes = 0;
        self.seqs.clear();
        if self.ring.is_none() {
            self.grads = Some(grads);
            self.state = TrainState::Done;
            return Ok(Vec::new());
        }
        self.images = (0..self.layout.num_buckets() as u32)
            .map(|b| self.layout.fill_bucket(b, &grads, self.cfg.world_size))
            .collect::<Result<Vec<_>, _>>()?;
        self.grads = Some(grads);
        self.recv_progress = 0;
        self.state = TrainState::ReduceScatter { bucket: 0, step: 0 };
        self.send_current()
    }

    /// Frames for the current state's send obligation.
    fn send_current(&mut self) -> Result<Vec<WireFrame>, TrainerError> {
        let world = self.cfg.world_size;
        let rank = self.cfg.rank;
        match self.state {
            TrainState::ReduceScatter { bucket, step } => {
                let (send, _) = reduce_scatter_schedule(world, rank, step)?;
                self.build_frames(bucket, send as u32, false, step as u16, false)
            }
            TrainState::AllGather { bucket, round } => {
                let send = allgather_send_chunk(world, rank, round)?;
                let tagged = should_tag(world, rank, round);
                self.build_frames(bucket, send as u32, true, round as u16, tagged)
            }
            _ => Ok(Vec::new()),
        }
    }

    fn build_frames(
        &mut self,
        bucket: u32,
        chunk: u32,
        allgather: bool,
        round: u16,
        tagged: bool,
    ) -> Result<Vec<WireFrame>, TrainerError> {
        let r = self.refs[bucket as usize][chunk as usize];
        let image = &self.images[bucket as usize];
        let lo = (r.byte_offset / 4) as usize;
        let hi = ((r.byte_offset + r.byte_len) / 4) as usize;
        let bytes = f32s_to_le_bytes(&image[lo..hi]);
        let shard = self.shards.shard_of(bucket);
        let mut out = Vec::new();
        let mut offset = 0u64;
        for segment in bytes.chunks(self.cfg.mtu_payload) {
            let mut f = WireFrame::data();
            f.flags = if allgather { FLAG_ALLGATHER } else { 0 };
            f.dp_group = self.cfg.dp_group;
            f.src_rank = self.cfg.rank as u16;
            f.channel_id = r.channel_id;
            f.round = round;
            f.iteration = self.iteration;
            f.bucket_id = bucket;
            f.chunk_id = chunk;
            f.byte_offset = offset;
            if tagged {
                f.flags |= FLAG_TAGGED;
                f.shadow_shard = shard;
                let seq = self
                    .seqs
                    .entry((r.channel_id, shard))
                    .or_insert_with(|| ChannelSeqState::new(r.channel_id))
                    .next_tagged_seq(segment.len() as u64, true)
                    .expect("tagged send must assign a sequence");
                f.inner_seq = seq;
                self.tagged_bytes += segment.len() as u64;
            }
            f.payload = segment.to_vec();
            offset += segment.len() as u64;
            out.push(f);
        }
        Ok(out)
    }

    fn reject(&self, frame: &WireFrame, why: &str) -> TrainerError {
        TrainerError::UnexpectedFrame(format!(
            "{why} (state {}, frame: src {} bucket {} chunk {} round {} off {} iter {})",
            self.state.name(),
            frame.src_rank,
            frame.bucket_id,
            frame.chunk_id,
            frame.round,
            frame.byte_offset,
            frame.iteration,
        ))
    }

    /// Consume one DATA frame from the ring; returns the frames unlocked by
    /// it. Anything that does not match the expected chunk is an error.
    pub fn on_frame(&mut self, frame: &WireFrame) -> Result<Vec<WireFrame>, TrainerError> {
        if frame.msg_type != MsgType::Data {
            return Err(self.reject(frame, "trainer expects only DATA frames"));
        }
        let world = self.cfg.world_size;
        let rank = self.cfg.rank;
        let (bucket, expect_chunk, expect_round, expect_ag) = match self.state {
            TrainState::ReduceScatter { bucket, step } => {
                let (_, recv) = reduce_scatter_schedule(world, rank, step)?;
                (bucket, recv as u32, step as u16, false)
            }
            TrainState::AllGather { bucket, round } => {
                let recv = allgather_recv_chunk(world, rank, round)?;
                (bucket, recv as u32, round as u16, true)
            }
            _ => return Err(self.reject(frame, "no receive expected")),
        };
        let predecessor = ((rank + world - 1) % world) as u16;
        if frame.iteration != self.iteration {
            return Err(self.reject(frame, "wrong iteration"));
        }
        if frame.src_rank != predecessor || frame.dp_group != self.cfg.dp_group {
            return Err(self.reject(frame, "frame not from ring predecessor"));
        }
        if frame.bucket_id != bucket || frame.chunk_id != expect_chunk {
            return Err(self.reject(frame, "wrong chunk"));
        }
        if frame.round != expect_round || (frame.flags & FLAG_ALLGATHER != 0) != expect_ag {
            return Err(self.reject(frame, "wrong phase"));
        }
        let r = self.refs[bucket as usize][expect_chunk as usize];
        if frame.channel_id != r.channel_id {
            return Err(self.reject(frame, "wrong channel"));
        }
        if frame.byte_offset != self.recv_progress {
            return Err(self.reject(frame, "segment out of order"));
        }
        if frame.byte_offset + frame.payload.len() as u64 > r.byte_len {
            return Err(self.reject(frame, "segment overruns chunk"));
        }

        let incoming = le_bytes_to_f32s(&frame.payload);
        let base = ((r.byte_offset + frame.byte_offset) / 4) as usize;
        let image = &mut self.images[bucket as usize];
        if expect_ag {
            image[base..base + incoming.len()].copy_from_slice(&incoming);
        } else {
            // Running sum arrives on the left so every chunk accumulates in
            // ring order starting from its home rank.
            for (i, x) in incoming.iter().enumerate() {
                image[base + i] = x + image[base + i];
            }
        }
        self.recv_progress += frame.payload.len() as u64;
        if self.recv_progress < r.byte_len {
            return Ok(Vec::new());
        }
        self.recv_progress = 0;
        self.advance(bucket)
    }

    /// Move past a fully received chunk and emit the next send, if any.
    fn advance(&mut self, bucket: u32) -> Result<Vec<WireFrame>, TrainerError> {
        let last_step = self.cfg.world_size - 2;
        self.state = match self.state {
            TrainState::ReduceScatter { step, .. } if step < last_step => {
                TrainState::ReduceScatter { bucket, step: step + 1 }
            }
            TrainState::ReduceScatter { .. } => TrainState::AllGather { bucket, round: 0 },
            TrainState::AllGather { round, .. } if round < last_step => {
                TrainState::AllGather { bucket, round: round + 1 }
            }
            TrainState::AllGather { .. } => {
                if bucket as usize + 1 < self.layout.num_buckets() {
                    TrainState::ReduceScatter { bucket: bucket + 1, step: 0 }
                } else {
                    TrainState::Done
                }
            }
            other => other,
        };
        self.send_current()
    }

    /// Fold the reduced gradients into the optimizer and close the
    /// iteration.
    pub fn finish_iteration(&mut self) -> Result<IterationReport, TrainerError> {
        if self.state != TrainState::Done {
            return Err(TrainerError::Phase {
                op: "finish_iteration",
                expected: "Done",
                got: self.state.name(),
            });
        }
        let mut grads = self.grads.take().expect("Done state always holds gradients");
        if self.ring.is_some() {
            for b in 0..self.layout.num_buckets() as u32 {
                self.layout.scatter_bucket(b, &self.images[b as usize], &mut grads)?;
            }
            self.images = Vec::new();
        }
        scale_mean(grads.as_mut_slice(), self.cfg.world_size);
        self.opt.hyper.lr = self.cfg.schedule.lr_at(self.base_lr, self.iteration);
        self.opt.advance_step();
        let total = self.params.total_elems();
        self.opt.step_range(self.params.as_mut_slice(), grads.as_slice(), 0..total)?;
        let report = IterationReport {
            iteration: self.iteration,
            loss: self.loss,
            tagged_bytes: self.tagged_bytes,
        };
        self.iteration += 1;
        self.state = TrainState::Idle;
        Ok(report)
    }

    /// Throw away all progress of the current iteration. The completed-
    /// iteration counter is untouched; a later begin replays the same batch.
    pub fn abort_iteration(&mut self) {
        self.state = TrainState::Idle;
        self.images = Vec::new();
        self.grads = None;
        self.recv_progress = 0;
        self.seqs.clear();
        self.tagged_bytes = 0;
    }

    /// Adopt externally recovered state (parameters, optimizer, iteration).
    pub fn restore(
        &mut self,
        params: FlatTensor,
        opt: OptimState,
        iteration: u64,
    ) -> Result<(), TrainerError> {
        if self.state != TrainState::Idle {
            return Err(TrainerError::Phase {
                op: "restore",
                expected: "Idle",
                got: self.state.name(),
            });
        }
        if params.layer_table() != self.params.layer_table() {
            return Err(TrainerError::Config("restored parameter shape mismatch".into()));
        }
        if opt.elems() != self.opt.elems() || opt.kind != self.opt.kind {
            return Err(TrainerError::Config("restored optimizer shape mismatch".into()));
        }
        self.params = params;
        self.opt = opt;
        self.iteration = iteration;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::SHARD_NONE;
    use std::collections::VecDeque;

    fn small_model() -> MlpSpec {
        MlpSpec { input_dim: 6, hidden: vec![8, 7], output_dim: 5, batch_size: 4 }
    }

    fn config(world: usize, rank: usize) -> TrainerConfig {
        TrainerConfig {
            world_size: world,
            rank,
            dp_group: 0,
            num_channels: 2,
            model: small_model(),
            bucket_cap_bytes: 256,
            shard_count: 2,
            mtu_payload: 64,
            seed: 7,
            optim: OptimKind::AdamW,
            hyper: Hyper::default(),
            schedule: LrSchedule::Constant,
        }
    }

    fn cluster(world: usize) -> Vec<TrainerNode> {
        (0..world).map(|r| TrainerNode::new(config(world, r)).unwrap()).collect()
    }

    /// Drive one iteration by relaying each rank's frames to its successor.
    fn run_ring_iteration(nodes: &mut [TrainerNode], tagged_log: &mut Vec<WireFrame>) {
        let n = nodes.len();
        let mut inbox: Vec<VecDeque<WireFrame>> = (0..n).map(|_| VecDeque::new()).collect();
        for r in 0..n {
            for f in nodes[r].begin_iteration().unwrap() {
                if f.is_tagged() {
                    tagged_log.push(f.clone());
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
                            tagged_log.push(out.clone());
                        }
                        inbox[(dst + 1) % n].push_back(out);
                    }
                }
            }
            if !progressed {
                break;
            }
        }
        assert!(nodes.iter().all(|t| t.iteration_done()));
    }

    fn finish_all(nodes: &mut [TrainerNode]) -> Vec<IterationReport> {
        nodes.iter_mut().map(|t| t.finish_iteration().unwrap()).collect()
    }

    #[test]
    fn ranks_agree_bitwise_after_each_iteration() {
        for world in [2usize, 4] {
            let mut nodes = cluster(world);
            for _ in 0..3 {
                run_ring_iteration(&mut nodes, &mut Vec::new());
                finish_all(&mut nodes);
                let reference = nodes[0].params().to_le_bytes();
                for t in &nodes[1..] {
                    assert_eq!(t.params().to_le_bytes(), reference);
                }
            }
        }
    }

    #[test]
    fn loss_decreases_over_training() {
        let mut nodes = cluster(2);
        let mut first = None;
        let mut last = 0.0f32;
        for _ in 0..30 {
            run_ring_iteration(&mut nodes, &mut Vec::new());
            let reports = finish_all(&mut nodes);
            let mean = (reports[0].loss + reports[1].loss) / 2.0;
            first.get_or_insert(mean);
            last = mean;
        }
        assert!(last < first.unwrap(), "loss {last} did not drop below {}", first.unwrap());
    }

    #[test]
    fn tagged_bytes_cover_every_bucket_exactly_once() {
        let world = 4;
        let mut nodes = cluster(world);
        let mut tagged = Vec::new();
        run_ring_iteration(&mut nodes, &mut tagged);
        let reports = finish_all(&mut nodes);

        let total_padded = nodes[0].layout().total_padded_bytes(world);
        let sum: u64 = reports.iter().map(|r| r.tagged_bytes).sum();
        assert_eq!(sum, total_padded);
        // Only the two boundary ranks ever tag.
        assert_eq!(reports[1].tagged_bytes, 0);
        assert_eq!(reports[2].tagged_bytes, 0);
        assert!(reports[0].tagged_bytes > 0);
        assert!(reports[3].tagged_bytes > 0);

        // Tagged frames form gapless byte streams per (source, channel,
        // shard), and every tagged frame names a real shard.
        let mut cursors: BTreeMap<(u16, u16, u8), u64> = BTreeMap::new();
        for f in &tagged {
            assert_ne!(f.shadow_shard, SHARD_NONE);
            let key = (f.src_rank, f.channel_id, f.shadow_shard);
            let cursor = cursors.entry(key).or_insert(0);
            assert_eq!(f.inner_seq, *cursor, "gap in stream {key:?}");
            *cursor += f.payload.len() as u64;
        }
        let stream_total: u64 = cursors.values().sum();
        assert_eq!(stream_total, total_padded);
    }

    #[test]
    fn mtu_does_not_change_the_result() {
        let run = |mtu: usize| {
            let mut nodes: Vec<TrainerNode> = (0..4)
                .map(|r| {
                    let mut c = config(4, r);
                    c.mtu_payload = mtu;
                    TrainerNode::new(c).unwrap()
                })
                .collect();
            for _ in 0..2 {
                run_ring_iteration(&mut nodes, &mut Vec::new());
                finish_all(&mut nodes);
            }
            nodes[0].params().to_le_bytes()
        };
        assert_eq!(run(16), run(1 << 20));
    }

    #[test]
    fn single_rank_trains_without_a_ring() {
        let mut node = TrainerNode::new(config(1, 0)).unwrap();
        let before = node.params().to_le_bytes();
        let frames = node.begin_iteration().unwrap();
        assert!(frames.is_empty());
        assert!(node.iteration_done());
        let report = node.finish_iteration().unwrap();
        assert_eq!(report.iteration, 0);
        assert_eq!(report.tagged_bytes, 0);
        assert_ne!(node.params().to_le_bytes(), before);
    }

    #[test]
    fn identical_clusters_replay_identically() {
        let run = || {
            let mut nodes = cluster(4);
            let mut reports = Vec::new();
            for _ in 0..5 {
                run_ring_iteration(&mut nodes, &mut Vec::new());
                reports.push(finish_all(&mut nodes));
            }
            (nodes[0].params().to_le_bytes(), reports)
        };
        let (params_a, reports_a) = run();
        let (params_b, reports_b) = run();
        assert_eq!(params_a, params_b);
        assert_eq!(reports_a, reports_b);
    }

    #[test]
    fn aborted_iteration_replays_from_scratch() {
        let mut control = cluster(2);
        run_ring_iteration(&mut control, &mut Vec::new());
        finish_all(&mut control);

        let mut nodes = cluster(2);
        // Start, receive nothing, abort: progress is discarded.
        for t in nodes.iter_mut() {
            t.begin_iteration().unwrap();
        }
        for t in nodes.iter_mut() {
            t.abort_iteration();
            assert_eq!(t.state(), TrainState::Idle);
            assert_eq!(t.iteration(), 0);
        }
        run_ring_iteration(&mut nodes, &mut Vec::new());
        finish_all(&mut nodes);
        assert_eq!(nodes[0].params().to_le_bytes(), control[0].params().to_le_bytes());
    }

    #[test]
    fn phase_violations_are_rejected() {
        let mut node = TrainerNode::new(config(2, 0)).unwrap();
        assert!(matches!(
            node.finish_iteration(),
            Err(TrainerError::Phase { op: "finish_iteration", .. })
        ));
        let err = node.on_frame(&WireFrame::data()).unwrap_err();
        assert!(matches!(err, TrainerError::UnexpectedFrame(_)));

        node.begin_iteration().unwrap();
        assert!(matches!(
            node.begin_iteration(),
            Err(TrainerError::Phase { op: "begin_iteration", .. })
        ));

        // A frame for the wrong chunk is rejected.
        let mut wrong = WireFrame::data();
        wrong.src_rank = 1;
        wrong.bucket_id = 0;
        wrong.chunk_id = 99;
        assert!(matches!(node.on_frame(&wrong), Err(TrainerError::UnexpectedFrame(_))));
    }

    #[test]
    fn restore_requires_matching_shapes() {
        let mut node = TrainerNode::new(config(2, 0)).unwrap();
        let params = node.params().clone();
        let good = OptimState::new(OptimKind::AdamW, Hyper::default(), params.total_elems());
        let bad = OptimState::new(OptimKind::AdamW, Hyper::default(), 3);
        assert!(node.restore(params.clone(), bad, 5).is_err());
        node.restore(params, good, 5).unwrap();
        assert_eq!(node.iteration(), 5);
    }

    #[test]
    fn unaligned_mtu_is_rejected() {
        for mtu in [0usize, 2, 63] {
            let mut c = config(2, 0);
            c.mtu_payload = mtu;
            assert!(
                matches!(TrainerNode::new(c), Err(TrainerError::Config(_))),
                "mtu {mtu} accepted"
            );
        }
    }
}
