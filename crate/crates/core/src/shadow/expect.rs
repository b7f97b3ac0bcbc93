//! Static prediction of the tagged streams a shadow node will observe.
//!
//! Ring AllGather is fully deterministic, so the exact sequence of tagged
//! chunks each boundary rank emits per channel and shard is known before any
//! frame flows. Shadow nodes derive this expectation from configuration alone
//! and use it to reassemble buckets and to detect gaps or duplicates.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collective::{allgather_send_chunk, chunk_refs, should_tag, RingConfig, ScheduleError};
use crate::optim::ShardAssignment;
use crate::trainer::bucket::BucketLayout;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpectError {
    #[error("shard assignment covers {shards} buckets, layout has {buckets}")]
    ShardMismatch { shards: usize, buckets: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Identity of one gapless tagged stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StreamKey {
    /// Boundary rank feeding the stream.
    pub src_rank: u16,
    pub channel_id: u16,
    pub shard: u8,
}

/// One tagged chunk as it will appear on its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedSegment {
    pub bucket_id: u32,
    pub chunk_id: u32,
    /// Chunk extent within the padded bucket image.
    pub bucket_byte_offset: u64,
    pub byte_len: u64,
    /// First stream byte of this segment: the prefix sum of prior lengths.
    pub inner_seq: u64,
}

/// Every tagged stream of one iteration, in emission order.
///
/// The layout is identical for all iterations because the per-stream byte
/// counters reset when an iteration begins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamExpectation {
    streams: BTreeMap<StreamKey, Vec<ExpectedSegment>>,
    world_size: usize,
}

impl StreamExpectation {
    pub fn stream(&self, key: StreamKey) -> Option<&[ExpectedSegment]> {
        self.streams.get(&key).map(|v| v.as_slice())
    }

    pub fn streams(&self) -> impl Iterator<Item = (StreamKey, &[ExpectedSegment])> {
        self.streams.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn num_segments(&self) -> usize {
        self.streams.values().map(|v| v.len()).sum()
    }

    /// Tagged bytes one iteration delivers across all streams.
    pub fn total_bytes(&self) -> u64 {
        self.streams
            .values()
            .flat_map(|v| v.iter())
            .map(|s| s.byte_len)
            .sum()
    }
}

/// Predict every tagged stream from configuration shared with the trainers.
///
/// `ring` contributes only the ring size and channel count; any rank's view
/// works. Within a stream, segments appear in the order the sender walks its
/// buckets (bucket ascending, AllGather round ascending within each bucket).
pub fn expected_stream_layout(
    ring: &RingConfig,
    layout: &BucketLayout,
    shards: &ShardAssignment,
) -> Result<StreamExpectation, ExpectError> {
    if shards.num_buckets() != layout.num_buckets() {
        return Err(ExpectError::ShardMismatch {
            shards: shards.num_buckets(),
            buckets: layout.num_buckets(),
        });
    }
    let n = ring.world_size;
    let mut streams: BTreeMap<StreamKey, Vec<ExpectedSegment>> = BTreeMap::new();
    let mut cursors: BTreeMap<StreamKey, u64> = BTreeMap::new();
    for bucket in 0..layout.num_buckets() as u32 {
        let raw = layout.bucket(bucket).expect("bucket id in range").raw_bytes;
        let refs = chunk_refs(ring, bucket, raw);
        let shard = shards.shard_of(bucket);
        for round in 0..n - 1 {
            for src in [0, n - 1] {
                if !should_tag(n, src, round) {
                    continue;
                }
                let chunk = allgather_send_chunk(n, src, round)?;
                let r = refs[chunk];
                let key = StreamKey { src_rank: src as u16, channel_id: r.channel_id, shard };
                let seq = cursors.entry(key).or_insert(0);
                streams.entry(key).or_default().push(ExpectedSegment {
                    bucket_id: bucket,
                    chunk_id: chunk as u32,
                    bucket_byte_offset: r.byte_offset,
                    byte_len: r.byte_len,
                    inner_seq: *seq,
                });
                *seq += r.byte_len;
            }
        }
    }
    Ok(StreamExpectation { streams, world_size: n })
}
