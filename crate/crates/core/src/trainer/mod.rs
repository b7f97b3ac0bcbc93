//! Data-parallel trainer: flat parameter storage, gradient bucketing, the
//! toy model, and the per-rank ring protocol machine.

pub mod bucket;
pub mod flat;
pub mod model;
pub mod node;

pub use bucket::{build_buckets, Bucket, BucketEntry, BucketError, BucketLayout};
pub use flat::{f32s_to_le_bytes, le_bytes_to_f32s, FlatError, FlatTensor, LayerInfo};
pub use model::{forward_backward, init_params, synth_batch, MlpSpec, ModelError};
pub use node::{scale_mean, IterationReport, TrainState, TrainerConfig, TrainerError, TrainerNode};
