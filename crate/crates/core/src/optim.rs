//! Functional sharded optimizers.
//!
//! The update rules are pure element-wise functions applied in a fixed
//! evaluation order so that a trainer and a shadow replica feeding the same
//! gradients produce byte-identical parameters. Optimizer state shards by
//! bucket (bucket i -> shard i mod k); results are invariant to the shard
//! count because the math never crosses element boundaries.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimError {
    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },
    #[error("shard count must be at least 1")]
    ZeroShards,
    #[error("state covers {state} elements, slice covers {slice}")]
    LengthMismatch { state: usize, slice: usize },
}

/// Optimizer hyperparameters; unused fields are ignored by the other kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub momentum: f32,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

/// SGD with momentum: velocity' = momentum * velocity + g, p' = p - lr * velocity'.
pub fn sgd_step(p: f32, g: f32, velocity: f32, h: &Hyper) -> (f32, f32) {
    let velocity = h.momentum * velocity + g;
    (p - h.lr * velocity, velocity)
}

/// AdamW with bias correction and decoupled weight decay.
///
/// `time` is the 1-based step count. Returns (p', m', v'). The operation
/// order below is the contract; reordering changes low bits.
pub fn adamw_step(p: f32, g: f32, m: f32, v: f32, time: u64, h: &Hyper) -> (f32, f32, f32) {
    let bias1 = 1.0 - h.beta1.powi(time as i32);
    let bias2 = 1.0 - h.beta2.powi(time as i32);
    adamw_element(p, g, m, v, bias1, bias2, h)
}

// Shared element kernel; bias terms are hoisted per step since they depend
// only on `time`.
#[inline]
fn adamw_element(p: f32, g: f32, m: f32, v: f32, bias1: f32, bias2: f32, h: &Hyper) -> (f32, f32, f32) {
    let m = h.beta1 * m + (1.0 - h.beta1) * g;
    let v = h.beta2 * v + (1.0 - h.beta2) * (g * g);
    let m_hat = m / bias1;
    let v_hat = v / bias2;
    let update = m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p;
    (p - h.lr * update, m, v)
}

/// Learning-rate schedule, evaluated identically by trainers and shadows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to zero over `total_iters`.
    Cosine { total_iters: u64 },
}

impl LrSchedule {
    /// Rate for the given 0-based iteration, computed in f64 then narrowed.
    pub fn lr_at(&self, base: f32, iteration: u64) -> f32 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_iters } => {
                let total = total_iters.max(1) as f64;
                let frac = (iteration as f64).min(total) / total;
                (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
            }
        }
    }
}

/// Moment buffers plus step counter for a contiguous range of elements.
///
/// For SGD, `m` holds the velocity and `v` stays empty. A trainer covers the
/// whole model; a shadow replica allocates the same extent but only ever
/// touches its owned ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub hyper: Hyper,
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl OptimState {
    pub fn new(kind: OptimKind, hyper: Hyper, elems: usize) -> Self {
        let v = match kind {
            OptimKind::Sgd => Vec::new(),
            OptimKind::AdamW => vec![0.0; elems],
        };
        Self { kind, hyper, step: 0, m: vec![0.0; elems], v }
    }

    pub fn elems(&self) -> usize {
        self.m.len()
    }

    /// Bump the step counter once per iteration, before any `step_range`.
    pub fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Apply the update rule over `range` of the full parameter vector.
    ///
    /// `params`, `grads` and the moment buffers are indexed by the same
    /// element offsets. Ranges may be applied in any order within one step;
    /// the math is element-local.
    pub fn step_range(
        &mut self,
        params: &mut [f32],
        grads: &[f32],
        range: std::ops::Range<usize>,
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(OptimError::LengthMismatch {
                state: self.m.len(),
                slice: params.len().min(grads.len()),
            });
        }
        match self.kind {
            OptimKind::Sgd => {
                for i in range {
                    let (p, g) = (params[i], grads[i]);
                    if !p.is_finite() || !g.is_finite() {
                        return Err(OptimError::NonFinite { index: i });
                    }
                    let (p2, vel) = sgd_step(p, g, self.m[i], &self.hyper);
                    params[i] = p2;
                    self.m[i] = vel;
                }
            }
            OptimKind::AdamW => {
                let bias1 = 1.0 - self.hyper.beta1.powi(self.step as i32);
                let bias2 = 1.0 - self.hyper.beta2.powi(self.step as i32);
                for i in range {
                    let (p, g) = (params[i], grads[i]);
                    if !p.is_finite() || !g.is_finite() {
                        return Err(OptimError::NonFinite { index: i });
                    }
                    let (p2, m2, v2) =
                        adamw_element(p, g, self.m[i], self.v[i], bias1, bias2, &self.hyper);
                    params[i] = p2;
                    self.m[i] = m2;
                    self.v[i] = v2;
                }
            }
        }
        Ok(())
    }
}

/// Bucket-to-shard assignment: bucket i belongs to shard i mod k.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    pub shard_count: usize,
    shard_by_bucket: Vec<u8>,
}

impl ShardAssignment {
    pub fn shard_of(&self, bucket_id: u32) -> u8 {
        self.shard_by_bucket[bucket_id as usize]
    }

    pub fn num_buckets(&self) -> usize {
        self.shard_by_bucket.len()
    }

    /// Bucket ids owned by `shard`, ascending.
    pub fn buckets_of(&self, shard: u8) -> Vec<u32> {
        (0..self.shard_by_bucket.len() as u32)
            .filter(|&b| self.shard_by_bucket[b as usize] == shard)
            .collect()
    }
}

/// Partition `num_buckets` buckets over `k` optimizer shards.
pub fn partition_parameters(num_buckets: usize, k: usize) -> Result<ShardAssignment, OptimError> {
    if k == 0 {
        return Err(OptimError::ZeroShards);
    }
    if k > u8::MAX as usize {
        return Err(OptimError::ZeroShards);
    }
    Ok(ShardAssignment {
        shard_count: k,
        shard_by_bucket: (0..num_buckets).map(|i| (i % k) as u8).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(x: f32) -> u32 {
        x.to_bits()
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let h = Hyper { lr: 0.1, momentum: 0.0, ..Hyper::default() };
        let (p, vel) = sgd_step(1.0, 0.5, 0.0, &h);
        assert_eq!(bits(p), bits(1.0 - 0.1 * 0.5));
        assert_eq!(bits(vel), bits(0.5));
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let h = Hyper { lr: 0.1, momentum: 0.9, ..Hyper::default() };
        let (_, v1) = sgd_step(1.0, 1.0, 0.0, &h);
        let (_, v2) = sgd_step(1.0, 1.0, v1, &h);
        assert_eq!(bits(v1), bits(1.0));
        assert_eq!(bits(v2), bits(0.9 * 1.0 + 1.0));
    }

    #[test]
    fn adamw_first_step_magnitude() {
        // p=0, g=1, t=1, wd=0: both bias-corrected moments are exactly 1, so
        // the update is lr * 1 / (1 + eps).
        let h = Hyper { lr: 0.01, weight_decay: 0.0, ..Hyper::default() };
        let (p, m, v) = adamw_step(0.0, 1.0, 0.0, 0.0, 1, &h);
        let expected = -0.01f32 * (1.0 / (1.0 + 1e-8));
        assert!((p - expected).abs() < 1e-9, "{p} vs {expected}");
        // Single-precision arithmetic: 1 - 0.9f32 is not the literal 0.1.
        assert_eq!(bits(m), bits(1.0f32 - 0.9f32));
        assert_eq!(bits(v), bits(1.0f32 - 0.999f32));
    }

    #[test]
    fn adamw_zero_gradient_still_decays_weights() {
        let h = Hyper::default();
        let (p, _, _) = adamw_step(2.0, 0.0, 0.0, 0.0, 1, &h);
        // Only the decoupled decay term moves the parameter.
        assert_eq!(bits(p), bits(2.0 - h.lr * (h.weight_decay * 2.0)));
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut st = OptimState::new(OptimKind::AdamW, Hyper::default(), 2);
        st.advance_step();
        let mut params = vec![0.0, 0.0];
        let err = st.step_range(&mut params, &[1.0, f32::NAN], 0..2);
        assert_eq!(err, Err(OptimError::NonFinite { index: 1 }));
    }

    #[test]
    fn scalar_path_equals_vector_path() {
        // 10 steps over a small vector: driving the scalar function by hand
        // must match step_range byte for byte.
        let h = Hyper { lr: 0.02, ..Hyper::default() };
        let grads: Vec<f32> = (0..7).map(|i| (i as f32 - 3.0) * 0.25).collect();
        let mut st = OptimState::new(OptimKind::AdamW, h, 7);
        let mut params = vec![0.5f32; 7];
        let mut ref_p = params.clone();
        let mut ref_m = vec![0.0f32; 7];
        let mut ref_v = vec![0.0f32; 7];
        for t in 1..=10u64 {
            st.advance_step();
            st.step_range(&mut params, &grads, 0..7).unwrap();
            for i in 0..7 {
                let (p2, m2, v2) = adamw_step(ref_p[i], grads[i], ref_m[i], ref_v[i], t, &h);
                ref_p[i] = p2;
                ref_m[i] = m2;
                ref_v[i] = v2;
            }
        }
        for i in 0..7 {
            assert_eq!(bits(params[i]), bits(ref_p[i]));
            assert_eq!(bits(st.m[i]), bits(ref_m[i]));
            assert_eq!(bits(st.v[i]), bits(ref_v[i]));
        }
    }

    #[test]
    fn sharded_and_unsharded_runs_are_byte_identical() {
        // 100 steps on a 1000-element vector, k=4 shards of contiguous
        // ranges vs one full-range state.
        let h = Hyper::default();
        let n = 1000;
        let mut whole = OptimState::new(OptimKind::AdamW, h, n);
        let mut shards: Vec<OptimState> =
            (0..4).map(|_| OptimState::new(OptimKind::AdamW, h, n)).collect();
        let mut p_whole = vec![0.1f32; n];
        let mut p_shard = vec![0.1f32; n];
        for t in 0..100u64 {
            let grads: Vec<f32> =
                (0..n).map(|i| ((i as u64 * 31 + t * 7) % 17) as f32 * 0.01 - 0.08).collect();
            whole.advance_step();
            whole.step_range(&mut p_whole, &grads, 0..n).unwrap();
            for (s, st) in shards.iter_mut().enumerate() {
                st.advance_step();
                st.step_range(&mut p_shard, &grads, s * 250..(s + 1) * 250).unwrap();
            }
        }
        for i in 0..n {
            assert_eq!(bits(p_whole[i]), bits(p_shard[i]), "element {i}");
        }
    }

    #[test]
    fn partition_examples() {
        let a = partition_parameters(5, 2).unwrap();
        assert_eq!(
            (0..5).map(|b| a.shard_of(b)).collect::<Vec<_>>(),
            vec![0, 1, 0, 1, 0]
        );
        assert_eq!(a.buckets_of(0), vec![0, 2, 4]);
        let b = partition_parameters(3, 1).unwrap();
        assert!((0..3).all(|i| b.shard_of(i) == 0));
        assert_eq!(partition_parameters(3, 0), Err(OptimError::ZeroShards));
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        for buckets in 1..=16 {
            for k in 1..=8 {
                let a = partition_parameters(buckets, k).unwrap();
                let mut seen = vec![false; buckets];
                for shard in 0..k as u8 {
                    for b in a.buckets_of(shard) {
                        assert!(!seen[b as usize]);
                        seen[b as usize] = true;
                    }
                }
                assert!(seen.iter().all(|&s| s));
            }
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { total_iters: 100 };
        assert_eq!(s.lr_at(1.0, 0), 1.0);
        assert!((s.lr_at(1.0, 50) - 0.5).abs() < 1e-6);
        assert!(s.lr_at(1.0, 100) < 1e-7);
        assert_eq!(LrSchedule::Constant.lr_at(0.25, 77), 0.25);
    }
}
