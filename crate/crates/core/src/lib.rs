//! Deterministic emulation of training clusters that checkpoint every
//! iteration through the network fabric.
//!
//! Data-parallel trainers run ring AllReduce over a software switch. The two
//! boundary ranks tag the fully reduced gradient chunks they emit; the switch
//! multicasts tagged frames to shadow nodes, which replay the optimizer step
//! and thereby hold a bit-exact copy of the model after every iteration.
//! A cost model quantifies what that buys over stop-the-world checkpoints.

pub mod collective;
pub mod costmodel;
pub mod fabric;
pub mod optim;
pub mod reference;
pub mod shadow;
pub mod trainer;
pub mod world;

pub use collective::{ChannelSeqState, ChunkRef, RingConfig, ScheduleError};
