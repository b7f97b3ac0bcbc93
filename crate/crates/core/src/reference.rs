//! Plain reference implementations used as oracles by the test suites.
//!
//! Everything here favors obviousness over speed: sequential folds and a
//! mailbox-passing ring that exchanges raw float vectors instead of frames.
//! The distributed machinery must agree with these bit for bit.

use crate::collective::{allgather_recv_chunk, allgather_send_chunk, reduce_scatter_schedule};

/// Left-associated sum of one contribution per rank, starting at `home` and
/// walking the ring upward.
///
/// Float addition is not associative, so the order is the contract: this is
/// exactly the order a ring reduction accumulates in, because the partial
/// sum always arrives on the left of the local contribution.
pub fn ring_ordered_sum(contributions: &[f32], home: usize) -> f32 {
    let n = contributions.len();
    let mut acc = contributions[home % n];
    for i in 1..n {
        acc += contributions[(home + i) % n];
    }
    acc
}

/// Element-wise ring AllReduce oracle: the vector every rank must end up
/// holding, computed without any message passing.
///
/// The vector splits into one chunk per rank and chunk c accumulates in ring
/// order from rank c. Lengths that don't divide evenly are zero-padded the
/// way bucket images are, then truncated back.
pub fn ring_allreduce_oracle(inputs: &[Vec<f32>]) -> Vec<f32> {
    let n = inputs.len();
    assert!(n >= 2, "ring needs at least two ranks");
    let len = inputs[0].len();
    assert!(inputs.iter().all(|v| v.len() == len), "inputs must have equal length");
    let chunk_len = len.div_ceil(n);
    (0..len)
        .map(|e| {
            let column: Vec<f32> = inputs.iter().map(|v| v[e]).collect();
            ring_ordered_sum(&column, e / chunk_len.max(1))
        })
        .collect()
}

/// Run the ring protocol itself on raw vectors: n mailboxes, n-1
/// ReduceScatter steps of `incoming + own`, then n-1 AllGather rounds of
/// copying. Drives the production schedules, exercising both the chunk
/// arithmetic and the accumulation direction.
pub fn simulate_ring_allreduce(inputs: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let n = inputs.len();
    assert!(n >= 2, "ring needs at least two ranks");
    let len = inputs[0].len();
    assert!(inputs.iter().all(|v| v.len() == len), "inputs must have equal length");
    let padded = len.div_ceil(n) * n;
    let chunk_len = padded / n;
    let span = |c: usize| c * chunk_len..(c + 1) * chunk_len;

    let mut state: Vec<Vec<f32>> = inputs
        .iter()
        .map(|v| {
            let mut image = v.clone();
            image.resize(padded, 0.0);
            image
        })
        .collect();

    for step in 0..n - 1 {
        // Capture all sends first: exchanges within a step are concurrent.
        let sends: Vec<(usize, usize, Vec<f32>)> = (0..n)
            .map(|rank| {
                let (send, _) = reduce_scatter_schedule(n, rank, step).unwrap();
                ((rank + 1) % n, send, state[rank][span(send)].to_vec())
            })
            .collect();
        for (dst, chunk, incoming) in sends {
            let (_, recv) = reduce_scatter_schedule(n, dst, step).unwrap();
            assert_eq!(recv, chunk, "peer schedules must agree");
            for (own, inc) in state[dst][span(chunk)].iter_mut().zip(&incoming) {
                *own = inc + *own;
            }
        }
    }

    for round in 0..n - 1 {
        let sends: Vec<(usize, usize, Vec<f32>)> = (0..n)
            .map(|rank| {
                let send = allgather_send_chunk(n, rank, round).unwrap();
                ((rank + 1) % n, send, state[rank][span(send)].to_vec())
            })
            .collect();
        for (dst, chunk, reduced) in sends {
            let recv = allgather_recv_chunk(n, dst, round).unwrap();
            assert_eq!(recv, chunk, "peer schedules must agree");
            state[dst][span(chunk)].copy_from_slice(&reduced);
        }
    }

    for image in &mut state {
        image.truncate(len);
    }
    state
}
