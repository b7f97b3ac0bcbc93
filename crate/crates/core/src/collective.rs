//! Ring AllReduce scheduling and the tagging discipline layered on top of it.
//!
//! An AllReduce over `n` ranks runs as ReduceScatter followed by AllGather,
//! each taking `n - 1` steps. Buckets are split into `n` equal chunks; during
//! AllGather the two boundary ranks mark the chunks they emit as tagged so
//! that the fabric can fork a copy of the fully reduced gradient toward the
//! shadow nodes. Tagged bytes are numbered by per-channel counters that reset
//! every iteration.

use thiserror::Error;

/// Marker for untagged frames in the shadow-shard header field.
pub const SHARD_NONE: u8 = 0xFF;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("ring needs at least 2 ranks, got {0}")]
    RingTooSmall(usize),
    #[error("rank {rank} out of range for ring of {world}")]
    RankOutOfRange { rank: usize, world: usize },
    #[error("step {step} out of range, ring of {world} has steps 0..={max}", max = world - 2)]
    StepOutOfRange { step: usize, world: usize },
    #[error("channel count must be at least 1")]
    NoChannels,
}

/// Static description of one rank's position in a data-parallel ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RingConfig {
    pub world_size: usize,
    pub rank: usize,
    pub num_channels: usize,
    pub dp_group: u16,
}

impl RingConfig {
    pub fn new(
        world_size: usize,
        rank: usize,
        num_channels: usize,
        dp_group: u16,
    ) -> Result<Self, ScheduleError> {
        if world_size < 2 {
            return Err(ScheduleError::RingTooSmall(world_size));
        }
        if rank >= world_size {
            return Err(ScheduleError::RankOutOfRange { rank, world: world_size });
        }
        if num_channels == 0 {
            return Err(ScheduleError::NoChannels);
        }
        Ok(Self { world_size, rank, num_channels, dp_group })
    }

    /// Rank this rank sends to (ring successor).
    pub fn next_rank(&self) -> usize {
        (self.rank + 1) % self.world_size
    }

    /// True if this rank is one of the two tagging boundaries.
    pub fn is_boundary(&self) -> bool {
        self.rank == 0 || self.rank == self.world_size - 1
    }
}

fn check_ring(world: usize, rank: usize, step: usize) -> Result<(), ScheduleError> {
    if world < 2 {
        return Err(ScheduleError::RingTooSmall(world));
    }
    if rank >= world {
        return Err(ScheduleError::RankOutOfRange { rank, world });
    }
    if step > world - 2 {
        return Err(ScheduleError::StepOutOfRange { step, world });
    }
    Ok(())
}

/// Chunk ids exchanged by `rank` at ReduceScatter `step`: (send, receive).
///
/// send = (rank - step) mod n, receive = (rank - step - 1) mod n. After the
/// n-1 steps, rank i holds the fully reduced chunk (i + 1) mod n, having
/// accumulated contributions in ring order starting from the chunk's home
/// rank.
pub fn reduce_scatter_schedule(
    world: usize,
    rank: usize,
    step: usize,
) -> Result<(usize, usize), ScheduleError> {
    check_ring(world, rank, step)?;
    let send = (rank + world - step % world) % world;
    let recv = (send + world - 1) % world;
    Ok((send, recv))
}

/// Chunk id `rank` sends in AllGather `round`: (rank + 1 - round) mod n.
pub fn allgather_send_chunk(
    world: usize,
    rank: usize,
    round: usize,
) -> Result<usize, ScheduleError> {
    check_ring(world, rank, round)?;
    Ok((rank + 1 + world - round % world) % world)
}

/// Chunk id `rank` receives in AllGather `round`: its predecessor's send.
pub fn allgather_recv_chunk(
    world: usize,
    rank: usize,
    round: usize,
) -> Result<usize, ScheduleError> {
    check_ring(world, rank, round)?;
    Ok((rank + world - round % world) % world)
}

/// Tagging rule: rank 0 tags only round 0, rank n-1 tags every round.
///
/// Every chunk of a bucket is emitted tagged exactly once per iteration, and
/// round 0 is the only round with two tagging sources.
pub fn should_tag(world: usize, rank: usize, round: usize) -> bool {
    (rank == 0 && round == 0) || rank == world - 1
}

/// Per-channel byte counter over tagged payload, reset each iteration.
///
/// The counter value rides in the frame header as `inner_seq`; consumers use
/// it to check the tagged stream for gaps. Senders keep one per
/// (channel, shadow shard) so every shadow-bound stream is gapless.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSeqState {
    pub channel_id: u16,
    next_tagged_seq: u64,
}

impl ChannelSeqState {
    pub fn new(channel_id: u16) -> Self {
        Self { channel_id, next_tagged_seq: 0 }
    }

    /// Sequence number for a tagged send of `payload_len` bytes, or `None`
    /// for untagged sends. Advances only when tagged.
    pub fn next_tagged_seq(&mut self, payload_len: u64, tagged: bool) -> Option<u64> {
        if !tagged {
            return None;
        }
        let seq = self.next_tagged_seq;
        self.next_tagged_seq += payload_len;
        Some(seq)
    }

    /// Total tagged bytes numbered so far this iteration.
    pub fn emitted(&self) -> u64 {
        self.next_tagged_seq
    }

    /// Per-iteration reset back to zero.
    pub fn reset(&mut self) {
        self.next_tagged_seq = 0;
    }
}

/// Channel carrying a chunk: (bucket_id + chunk_id) mod num_channels.
pub fn channel_for_chunk(cfg: &RingConfig, bucket_id: u32, chunk_id: u32) -> u16 {
    ((bucket_id as usize + chunk_id as usize) % cfg.num_channels) as u16
}

/// One chunk's byte extent within a (padded) bucket, plus its channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkRef {
    pub bucket_id: u32,
    pub chunk_id: u32,
    pub channel_id: u16,
    /// Offset of the chunk within the padded bucket image.
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// Bucket bytes rounded up so the bucket splits into n equal float chunks.
pub fn padded_bucket_bytes(raw_bytes: u64, world: usize) -> u64 {
    let grain = 4 * world as u64;
    raw_bytes.div_ceil(grain) * grain
}

/// Split a bucket into `n` equal chunks, assigning each its channel.
///
/// The refs are disjoint and cover the padded bucket exactly.
pub fn chunk_refs(cfg: &RingConfig, bucket_id: u32, raw_bytes: u64) -> Vec<ChunkRef> {
    let padded = padded_bucket_bytes(raw_bytes, cfg.world_size);
    let chunk_len = padded / cfg.world_size as u64;
    (0..cfg.world_size as u32)
        .map(|chunk_id| ChunkRef {
            bucket_id,
            chunk_id,
            channel_id: channel_for_chunk(cfg, bucket_id, chunk_id),
            byte_offset: chunk_id as u64 * chunk_len,
            byte_len: chunk_len,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduce_scatter_examples() {
        assert_eq!(reduce_scatter_schedule(4, 0, 0).unwrap(), (0, 3));
        assert_eq!(reduce_scatter_schedule(4, 0, 1).unwrap(), (3, 2));
        assert_eq!(reduce_scatter_schedule(4, 2, 0).unwrap(), (2, 1));
        assert_eq!(reduce_scatter_schedule(4, 3, 2).unwrap(), (1, 0));
        assert_eq!(reduce_scatter_schedule(2, 1, 0).unwrap(), (1, 0));
    }

    #[test]
    fn reduce_scatter_rejects_out_of_range_step() {
        assert_eq!(
            reduce_scatter_schedule(4, 0, 3),
            Err(ScheduleError::StepOutOfRange { step: 3, world: 4 })
        );
        assert_eq!(reduce_scatter_schedule(1, 0, 0), Err(ScheduleError::RingTooSmall(1)));
        assert_eq!(
            reduce_scatter_schedule(4, 4, 0),
            Err(ScheduleError::RankOutOfRange { rank: 4, world: 4 })
        );
    }

    #[test]
    fn allgather_examples() {
        assert_eq!(allgather_send_chunk(4, 0, 0).unwrap(), 1);
        assert_eq!(allgather_send_chunk(4, 3, 0).unwrap(), 0);
        assert_eq!(allgather_send_chunk(4, 3, 2).unwrap(), 2);
    }

    // Chunk-per-round table for a 4-rank ring. Rows are ranks 0..4, columns
    // rounds 0..3; starred entries in the source material are the tagged ones
    // (rank 0 round 0, rank 3 all rounds).
    #[test]
    fn allgather_four_rank_table() {
        let expect = [[1, 0, 3], [2, 1, 0], [3, 2, 1], [0, 3, 2]];
        for rank in 0..4 {
            for round in 0..3 {
                assert_eq!(allgather_send_chunk(4, rank, round).unwrap(), expect[rank][round]);
            }
        }
    }

    // Rank 0 opens AllGather holding chunk 1 and receives chunk 0 from the
    // last rank in the same round.
    #[test]
    fn allgather_round_zero_crossing() {
        assert_eq!(allgather_send_chunk(4, 0, 0).unwrap(), 1);
        assert_eq!(allgather_recv_chunk(4, 0, 0).unwrap(), 0);
        assert_eq!(allgather_send_chunk(4, 3, 0).unwrap(), 0);
    }

    #[test]
    fn recv_chunk_matches_predecessor_send() {
        for world in 2..12 {
            for rank in 0..world {
                let prev = (rank + world - 1) % world;
                for round in 0..world - 1 {
                    assert_eq!(
                        allgather_recv_chunk(world, rank, round).unwrap(),
                        allgather_send_chunk(world, prev, round).unwrap()
                    );
                }
            }
        }
    }

    // Simulate the full ReduceScatter on random inputs: every rank must end
    // with exactly one fully summed chunk, namely (rank + 1) mod n.
    #[test]
    fn reduce_scatter_ownership() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for world in 2..9 {
            let chunk = 5usize;
            let inputs: Vec<Vec<f64>> = (0..world)
                .map(|_| (0..world * chunk).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut bufs = inputs.clone();
            for step in 0..world - 1 {
                // Gather the outgoing chunks first: sends within a step are
                // concurrent and must read pre-step state.
                let mut outgoing = vec![vec![]; world];
                for rank in 0..world {
                    let (send, _) = reduce_scatter_schedule(world, rank, step).unwrap();
                    outgoing[rank] = bufs[rank][send * chunk..(send + 1) * chunk].to_vec();
                }
                for rank in 0..world {
                    let (_, recv) = reduce_scatter_schedule(world, rank, step).unwrap();
                    let prev = (rank + world - 1) % world;
                    for i in 0..chunk {
                        bufs[rank][recv * chunk + i] =
                            outgoing[prev][i] + bufs[rank][recv * chunk + i];
                    }
                }
            }
            for rank in 0..world {
                let owned = (rank + 1) % world;
                for i in 0..chunk {
                    let total: f64 = (0..world).map(|r| inputs[r][owned * chunk + i]).sum();
                    let got = bufs[rank][owned * chunk + i];
                    assert!((got - total).abs() < 1e-9, "world {world} rank {rank}");
                }
            }
        }
    }

    #[test]
    fn tagging_rule_examples() {
        assert!(should_tag(4, 0, 0));
        assert!(!should_tag(4, 0, 1));
        assert!(should_tag(4, 3, 0));
        assert!(should_tag(4, 3, 1));
        assert!(should_tag(4, 3, 2));
        assert!(!should_tag(4, 1, 0));
        assert!(!should_tag(4, 2, 2));
        // n=2: both ranks are boundaries and both tag the single round.
        assert!(should_tag(2, 0, 0));
        assert!(should_tag(2, 1, 0));
    }

    // Exactly-once tagging: for every ring size, each chunk id is emitted
    // tagged by exactly one (rank, round) pair, round 0 has exactly two
    // tagging sources and every later round exactly one.
    #[test]
    fn tagging_exactly_once() {
        for world in 2..=32 {
            let mut per_chunk = vec![0u32; world];
            let mut per_round = vec![0u32; world - 1];
            for rank in 0..world {
                for round in 0..world - 1 {
                    if should_tag(world, rank, round) {
                        per_chunk[allgather_send_chunk(world, rank, round).unwrap()] += 1;
                        per_round[round] += 1;
                    }
                }
            }
            assert!(per_chunk.iter().all(|&c| c == 1), "world {world}: {per_chunk:?}");
            assert_eq!(per_round[0], 2, "world {world}");
            assert!(per_round[1..].iter().all(|&c| c == 1), "world {world}");
        }
    }

    #[test]
    fn seq_counter_is_prefix_sum_of_tagged_payload() {
        let mut seq = ChannelSeqState::new(3);
        assert_eq!(seq.next_tagged_seq(64, true), Some(0));
        assert_eq!(seq.next_tagged_seq(64, true), Some(64));
        assert_eq!(seq.next_tagged_seq(512, false), None);
        assert_eq!(seq.next_tagged_seq(64, true), Some(128));
        assert_eq!(seq.emitted(), 192);
        seq.reset();
        assert_eq!(seq.next_tagged_seq(8, true), Some(0));
    }

    #[test]
    fn seq_counter_random_lengths_prefix_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut seq = ChannelSeqState::new(0);
        let mut expected = 0u64;
        for _ in 0..1000 {
            let len = rng.gen_range(1..10_000) as u64;
            let tagged = rng.gen_bool(0.5);
            let got = seq.next_tagged_seq(len, tagged);
            if tagged {
                assert_eq!(got, Some(expected));
                expected += len;
            } else {
                assert_eq!(got, None);
            }
        }
    }

    #[test]
    fn channel_assignment_and_chunk_cover() {
        let cfg = RingConfig::new(4, 0, 2, 0).unwrap();
        let refs = chunk_refs(&cfg, 3, 100);
        // 100 bytes pad to 112 (multiple of 4 * 4), 28 bytes per chunk.
        assert_eq!(refs.len(), 4);
        let padded: u64 = refs.iter().map(|r| r.byte_len).sum();
        assert_eq!(padded, padded_bucket_bytes(100, 4));
        for (i, r) in refs.iter().enumerate() {
            assert_eq!(r.chunk_id as usize, i);
            assert_eq!(r.byte_offset, i as u64 * 28);
            assert_eq!(r.byte_len, 28);
            assert_eq!(r.channel_id, ((3 + i) % 2) as u16);
        }
        // Already aligned input needs no padding.
        assert_eq!(padded_bucket_bytes(64, 4), 64);
    }

    #[test]
    fn chunk_refs_disjoint_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let world = rng.gen_range(2..16);
            let channels = [1, 2, 4][rng.gen_range(0..3)];
            let cfg = RingConfig::new(world, 0, channels, 0).unwrap();
            let raw = rng.gen_range(1..100_000);
            let refs = chunk_refs(&cfg, rng.gen_range(0..50), raw);
            let mut cursor = 0u64;
            for r in &refs {
                assert_eq!(r.byte_offset, cursor);
                assert_eq!(r.byte_len % 4, 0);
                cursor += r.byte_len;
            }
            assert_eq!(cursor, padded_bucket_bytes(raw, world));
            assert!(cursor >= raw);
            assert!(cursor - raw < 4 * world as u64);
        }
    }
}
