//! Emulated network fabric: wire format, credit-gated links, a deterministic
//! event scheduler, and the switch whose data plane replicates tagged
//! gradient frames toward shadow nodes.

pub mod engine;
pub mod frame;
pub mod link;
pub mod sched;
pub mod socket;
pub mod switch;

pub use engine::{
    ConsumerPolicy, DetFabric, FabricConfig, FabricError, NodeHandler, RunStats, SwitchCounters,
    TraceRow,
};
pub use frame::{
    FrameError, MsgType, WireFrame, DEFAULT_MTU_PAYLOAD, FLAG_ALLGATHER, FLAG_TAGGED, FRAME_MAGIC,
    FRAME_VERSION, HEADER_LEN,
};
pub use link::{Link, LinkError, LinkId, SendOutcome};
pub use sched::{Event, EventKind, EventQueue, NodeId, Tick};
pub use socket::{run_socket_demo, SocketDemoConfig, SocketError, SocketReport};
pub use switch::{
    ctrl_op, rewrite_for_shadow, Action, ShadowPortMap, ShardMap, StreamHandle, StreamId,
    SwitchCtrl, SwitchError,
};
