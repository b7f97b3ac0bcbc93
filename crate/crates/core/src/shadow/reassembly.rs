//! Reassembling tagged streams back into reduced gradient buckets.
//!
//! Each stream is consumed strictly in order against its expectation: a
//! frame must start exactly at the stream cursor, name the chunk the cursor
//! sits in, and stay inside it. Anything behind the cursor is a duplicate;
//! anything ahead is a gap. Either way the byte is never written twice, so a
//! completed bucket is bit-exact by construction.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::fabric::frame::{MsgType, WireFrame, SHARD_NONE};
use crate::shadow::expect::{ExpectedSegment, StreamExpectation, StreamKey};
use crate::trainer::bucket::{BucketError, BucketLayout};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReassemblyError {
    #[error("frame is not tagged gradient data")]
    NotTagged,
    #[error("frame for iteration {got}, reassembling {expected}")]
    WrongIteration { expected: u64, got: u64 },
    #[error("no expected stream (src {src}, channel {channel}, shard {shard})")]
    UnknownStream { src: u16, channel: u16, shard: u8 },
    #[error("no expected chunk (bucket {bucket}, chunk {chunk})")]
    UnknownChunk { bucket: u32, chunk: u32 },
    #[error("duplicate range on {key:?}: seq {seq} behind cursor {cursor}")]
    DuplicateRange { key: StreamKey, seq: u64, cursor: u64 },
    #[error("frame outside expectation: {0}")]
    OutOfExpectation(String),
    #[error("bucket {0} is not complete")]
    Incomplete(u32),
    #[error("bucket {bucket} image holds {got} bytes, layout needs {need}")]
    SizeMismatch { bucket: u32, need: u64, got: u64 },
    #[error(transparent)]
    Bucket(#[from] BucketError),
}

/// Notification that reassembly finished a bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestEvent {
    BucketComplete(u32),
}

// One stream's consumption cursor over its expected segments.
#[derive(Debug, Clone)]
struct Lane {
    segments: Vec<ExpectedSegment>,
    seg_idx: usize,
    seg_offset: u64,
    cursor: u64,
}

/// Per-iteration reassembly buffers for one shard (or the whole model).
#[derive(Debug, Clone)]
pub struct ReassemblyState {
    iteration: u64,
    lanes: BTreeMap<StreamKey, Lane>,
    known_chunks: BTreeSet<(u32, u32)>,
    /// Padded bucket images, indexed by bucket id.
    buffers: BTreeMap<u32, Vec<u8>>,
    remaining: BTreeMap<u32, u64>,
    complete: BTreeSet<u32>,
}

impl ReassemblyState {
    /// Track the streams of `shard`, or every stream when `shard` is None.
    pub fn new(expect: &StreamExpectation, iteration: u64, shard: Option<u8>) -> Self {
        let mut lanes = BTreeMap::new();
        let mut known_chunks = BTreeSet::new();
        let mut sizes: BTreeMap<u32, u64> = BTreeMap::new();
        for (key, segs) in expect.streams() {
            if shard.is_some_and(|s| s != key.shard) {
                continue;
            }
            for s in segs {
                known_chunks.insert((s.bucket_id, s.chunk_id));
                let end = s.bucket_byte_offset + s.byte_len;
                let size = sizes.entry(s.bucket_id).or_insert(0);
                *size = (*size).max(end);
            }
            lanes.insert(
                key,
                Lane { segments: segs.to_vec(), seg_idx: 0, seg_offset: 0, cursor: 0 },
            );
        }
        // Chunks tile each padded bucket, so the furthest extent is also the
        // byte count to collect.
        let buffers = sizes.iter().map(|(&b, &size)| (b, vec![0u8; size as usize])).collect();
        let remaining = sizes;
        Self {
            iteration,
            lanes,
            known_chunks,
            buffers,
            remaining,
            complete: BTreeSet::new(),
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Buckets this state is collecting, ascending.
    pub fn buckets(&self) -> Vec<u32> {
        self.buffers.keys().copied().collect()
    }

    pub fn is_bucket_complete(&self, bucket: u32) -> bool {
        self.complete.contains(&bucket)
    }

    pub fn all_complete(&self) -> bool {
        self.complete.len() == self.buffers.len()
    }

    pub fn missing_buckets(&self) -> Vec<u32> {
        self.buffers.keys().filter(|b| !self.complete.contains(b)).copied().collect()
    }

    /// Padded image of a completed bucket.
    pub fn bucket_bytes(&self, bucket: u32) -> Result<&[u8], ReassemblyError> {
        if !self.complete.contains(&bucket) {
            return Err(ReassemblyError::Incomplete(bucket));
        }
        Ok(self.buffers[&bucket].as_slice())
    }

    fn out_of_expectation(frame: &WireFrame, why: &str) -> ReassemblyError {
        ReassemblyError::OutOfExpectation(format!(
            "{why} (src {} channel {} shard {} bucket {} chunk {} off {} seq {} len {})",
            frame.src_rank,
            frame.channel_id,
            frame.shadow_shard,
            frame.bucket_id,
            frame.chunk_id,
            frame.byte_offset,
            frame.inner_seq,
            frame.payload.len(),
        ))
    }

    /// Consume one tagged DATA frame; state is untouched on any error.
    pub fn ingest_frame(&mut self, frame: &WireFrame) -> Result<Vec<IngestEvent>, ReassemblyError> {
        if frame.msg_type != MsgType::Data
            || !frame.is_tagged()
            || frame.shadow_shard == SHARD_NONE
        {
            return Err(ReassemblyError::NotTagged);
        }
        if frame.iteration != self.iteration {
            return Err(ReassemblyError::WrongIteration {
                expected: self.iteration,
                got: frame.iteration,
            });
        }
        let key = StreamKey {
            src_rank: frame.src_rank,
            channel_id: frame.channel_id,
            shard: frame.shadow_shard,
        };
        let lane = self.lanes.get_mut(&key).ok_or(ReassemblyError::UnknownStream {
            src: key.src_rank,
            channel: key.channel_id,
            shard: key.shard,
        })?;
        if frame.inner_seq < lane.cursor {
            return Err(ReassemblyError::DuplicateRange {
                key,
                seq: frame.inner_seq,
                cursor: lane.cursor,
            });
        }
        if frame.inner_seq > lane.cursor {
            return Err(Self::out_of_expectation(frame, "gap before frame"));
        }
        if lane.seg_idx == lane.segments.len() {
            return Err(Self::out_of_expectation(frame, "stream already complete"));
        }
        let seg = lane.segments[lane.seg_idx];
        if (frame.bucket_id, frame.chunk_id) != (seg.bucket_id, seg.chunk_id) {
            if !self.known_chunks.contains(&(frame.bucket_id, frame.chunk_id)) {
                return Err(ReassemblyError::UnknownChunk {
                    bucket: frame.bucket_id,
                    chunk: frame.chunk_id,
                });
            }
            return Err(Self::out_of_expectation(frame, "wrong chunk at cursor"));
        }
        if frame.byte_offset != lane.seg_offset {
            return Err(Self::out_of_expectation(frame, "offset disagrees with cursor"));
        }
        let len = frame.payload.len() as u64;
        if len == 0 || lane.seg_offset + len > seg.byte_len {
            return Err(Self::out_of_expectation(frame, "segment overrun"));
        }

        let start = (seg.bucket_byte_offset + frame.byte_offset) as usize;
        self.buffers.get_mut(&seg.bucket_id).expect("buffer exists for expected bucket")
            [start..start + frame.payload.len()]
            .copy_from_slice(&frame.payload);
        lane.cursor += len;
        lane.seg_offset += len;
        if lane.seg_offset == seg.byte_len {
            lane.seg_idx += 1;
            lane.seg_offset = 0;
        }
        let remaining = self.remaining.get_mut(&seg.bucket_id).expect("tracked bucket");
        *remaining -= len;
        if *remaining == 0 {
            self.complete.insert(seg.bucket_id);
            return Ok(vec![IngestEvent::BucketComplete(seg.bucket_id)]);
        }
        Ok(Vec::new())
    }
}

/// Borrowed view of one layer's bytes inside a bucket image.
#[derive(Debug, PartialEq, Eq)]
pub struct LayerSlice<'a> {
    pub layer: &'a str,
    /// Byte extent of the layer in flat parameter storage.
    pub flat_byte_start: u64,
    pub byte_len: u64,
    pub bytes: &'a [u8],
}

/// Resolve a completed bucket image into per-layer views.
///
/// The slices point into `bucket_bytes`; nothing is copied and the zero
/// padding past the raw payload is excluded.
pub fn map_bucket_to_params<'a>(
    layout: &'a BucketLayout,
    bucket_id: u32,
    bucket_bytes: &'a [u8],
) -> Result<Vec<LayerSlice<'a>>, ReassemblyError> {
    let bucket = layout.bucket(bucket_id)?;
    if (bucket_bytes.len() as u64) < bucket.raw_bytes {
        return Err(ReassemblyError::SizeMismatch {
            bucket: bucket_id,
            need: bucket.raw_bytes,
            got: bucket_bytes.len() as u64,
        });
    }
    Ok(bucket
        .entries
        .iter()
        .map(|e| LayerSlice {
            layer: e.layer.as_str(),
            flat_byte_start: e.flat_byte_start,
            byte_len: e.byte_len,
            bytes: &bucket_bytes[e.bucket_byte_offset as usize
                ..(e.bucket_byte_offset + e.byte_len) as usize],
        })
        .collect())
}
