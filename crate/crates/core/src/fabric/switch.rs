//! Switch control plane: ring forwarding, multicast groups, shadow ports.
//!
//! The data plane is stateless: every routing decision is a pure function of
//! the frame header and these control-plane tables. Tagged DATA frames from a
//! boundary rank are replicated to their multicast group; everything else is
//! forwarded point to point.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::frame::{MsgType, WireFrame, SHARD_NONE};
use super::link::LinkId;
use super::sched::NodeId;

/// Control message opcodes carried in the first payload byte of CTRL frames.
pub mod ctrl_op {
    /// Stream registration handshake (socket transport).
    pub const HELLO: u8 = 0x01;
    /// Ask a shadow for a full shard checkpoint.
    pub const FETCH_SHARD: u8 = 0x10;
    /// Ask a shadow for a byte range of a shard checkpoint.
    pub const FETCH_RANGE: u8 = 0x11;
    /// Successful response; destination rank in payload bytes 1..3.
    pub const RESP_OK: u8 = 0x20;
    /// Failure response; destination rank in payload bytes 1..3.
    pub const RESP_ERR: u8 = 0x21;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SwitchError {
    #[error("no ring installed for dp group {0}")]
    UnknownDpGroup(u16),
    #[error("rank {rank} not in ring of dp group {dp_group}")]
    UnknownRank { dp_group: u16, rank: u16 },
    #[error("rank {0} is not a boundary rank of its ring")]
    NotBoundary(u16),
    #[error("multicast group for (dp {dp_group}, boundary {boundary}) already installed with different members")]
    ConflictingGroup { dp_group: u16, boundary: u16 },
    #[error("shadow shard {0} has no owner in the shard map")]
    UnknownShard(u8),
    #[error("shadow node {0} has no ingress ports registered")]
    UnknownShadow(NodeId),
    #[error("shadow node {0} sent traffic before stream registration")]
    UnregisteredShadow(NodeId),
    #[error("stream registration for shadow {0} after training start")]
    LateRegistration(NodeId),
    #[error("control frame with unroutable opcode {0:#04x}")]
    UnroutableCtrl(u8),
    #[error("control frame too short to route")]
    ShortCtrl,
    #[error("tagged frame carries no shadow shard")]
    TaglessShard,
}

/// Owner shadow node for each shard id. Shard ids are scoped per dp group,
/// so independent groups can both run shards 0..k without colliding.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShardMap {
    owners: BTreeMap<(u16, u8), NodeId>,
}

impl ShardMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, dp_group: u16, shard: u8, node: NodeId) {
        self.owners.insert((dp_group, shard), node);
    }

    pub fn owner(&self, dp_group: u16, shard: u8) -> Result<NodeId, SwitchError> {
        self.owners
            .get(&(dp_group, shard))
            .copied()
            .ok_or(SwitchError::UnknownShard(shard))
    }

    pub fn contains(&self, dp_group: u16, shard: u8) -> bool {
        self.owners.contains_key(&(dp_group, shard))
    }

    pub fn shards(&self) -> impl Iterator<Item = ((u16, u8), NodeId)> + '_ {
        self.owners.iter().map(|(&k, &n)| (k, n))
    }
}

/// Two ingress links per shadow node, bound to streams round-robin.
#[derive(Debug, Clone, Default)]
pub struct ShadowPortMap {
    ports: BTreeMap<NodeId, [LinkId; 2]>,
}

impl ShadowPortMap {
    pub fn register(&mut self, node: NodeId, nic_a: LinkId, nic_b: LinkId) {
        self.ports.insert(node, [nic_a, nic_b]);
    }

    pub fn ports(&self, node: NodeId) -> Result<[LinkId; 2], SwitchError> {
        self.ports.get(&node).copied().ok_or(SwitchError::UnknownShadow(node))
    }

    /// Ingress link for one tagged stream. Streams are keyed by the boundary
    /// rank that feeds them and the channel they ride on; alternating over
    /// both keys spreads every configuration across both links.
    pub fn ingress(
        &self,
        node: NodeId,
        boundary_idx: u8,
        channel_id: u16,
    ) -> Result<LinkId, SwitchError> {
        let ports = self.ports(node)?;
        Ok(ports[((boundary_idx as u16 + channel_id) % 2) as usize])
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ports.keys().copied()
    }
}

/// Forwarding decision for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Unicast(LinkId),
    Multicast(u32),
}

/// One installed replication group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MulticastGroup {
    pub group_id: u32,
    pub dp_group: u16,
    pub boundary_rank: u16,
    pub next_rank: u16,
    /// Shadow streams this boundary feeds, as (shadow node, shard) pairs.
    pub shadow_streams: Vec<(NodeId, u8)>,
}

/// Per-direction stream identity within a replication group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamId {
    pub dp_group: u16,
    pub boundary_rank: u16,
}

/// Registration receipt handed to a shadow node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHandle {
    pub shadow_id: NodeId,
    pub streams: Vec<StreamId>,
}

/// Control-plane tables plus the error counters the data plane updates.
#[derive(Debug, Default)]
pub struct SwitchCtrl {
    /// (dp group, rank) -> successor rank on the ring.
    ring_next: BTreeMap<(u16, u16), u16>,
    /// dp group -> ranks in ring order.
    rings: BTreeMap<u16, Vec<u16>>,
    /// (dp group, rank) -> egress link toward that rank.
    rank_links: BTreeMap<(u16, u16), LinkId>,
    pub shadow_ports: ShadowPortMap,
    pub shard_map: ShardMap,
    groups: Vec<MulticastGroup>,
    group_ids: BTreeMap<(u16, u16), u32>,
    /// Extra sinks receiving a copy of every shadow-bound frame.
    mirror_sinks: Vec<LinkId>,
    registered: BTreeSet<NodeId>,
    training_started: bool,
    /// Tagged frames whose source held no multicast entry.
    pub classify_errors: u64,
    /// ACK frames from shadow nodes, counted then discarded.
    pub acks_dropped: u64,
}

impl SwitchCtrl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Install the ring order for one data-parallel group.
    pub fn install_ring(&mut self, dp_group: u16, ranks: &[u16]) {
        self.rings.insert(dp_group, ranks.to_vec());
        for (i, &r) in ranks.iter().enumerate() {
            let next = ranks[(i + 1) % ranks.len()];
            self.ring_next.insert((dp_group, r), next);
        }
    }

    /// Bind the switch egress link that reaches `rank`.
    pub fn install_rank_link(&mut self, dp_group: u16, rank: u16, link: LinkId) {
        self.rank_links.insert((dp_group, rank), link);
    }

    pub fn next_rank(&self, dp_group: u16, rank: u16) -> Result<u16, SwitchError> {
        if !self.rings.contains_key(&dp_group) {
            return Err(SwitchError::UnknownDpGroup(dp_group));
        }
        self.ring_next
            .get(&(dp_group, rank))
            .copied()
            .ok_or(SwitchError::UnknownRank { dp_group, rank })
    }

    pub fn rank_link(&self, dp_group: u16, rank: u16) -> Result<LinkId, SwitchError> {
        self.rank_links
            .get(&(dp_group, rank))
            .copied()
            .ok_or(SwitchError::UnknownRank { dp_group, rank })
    }

    fn boundary_idx(&self, dp_group: u16, rank: u16) -> Result<u8, SwitchError> {
        let ring = self.rings.get(&dp_group).ok_or(SwitchError::UnknownDpGroup(dp_group))?;
        if rank == ring[0] {
            Ok(0)
        } else if rank == *ring.last().unwrap() {
            Ok(1)
        } else {
            Err(SwitchError::NotBoundary(rank))
        }
    }

    /// Install one replication group. Idempotent for identical members;
    /// differing members for the same key are rejected.
    pub fn install_multicast_group(
        &mut self,
        dp_group: u16,
        boundary_rank: u16,
        next_rank: u16,
        shadow_streams: Vec<(NodeId, u8)>,
    ) -> Result<u32, SwitchError> {
        self.boundary_idx(dp_group, boundary_rank)?;
        if let Some(&id) = self.group_ids.get(&(dp_group, boundary_rank)) {
            let existing = &self.groups[id as usize];
            if existing.next_rank == next_rank && existing.shadow_streams == shadow_streams {
                return Ok(id);
            }
            return Err(SwitchError::ConflictingGroup { dp_group, boundary: boundary_rank });
        }
        let id = self.groups.len() as u32;
        self.groups.push(MulticastGroup {
            group_id: id,
            dp_group,
            boundary_rank,
            next_rank,
            shadow_streams,
        });
        self.group_ids.insert((dp_group, boundary_rank), id);
        Ok(id)
    }

    pub fn group(&self, id: u32) -> Option<&MulticastGroup> {
        self.groups.get(id as usize)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Add a sink that mirrors all shadow-bound traffic (replication scaling
    /// experiments). Returns the resulting shadow copy count per frame.
    pub fn add_mirror_sink(&mut self, link: LinkId) -> usize {
        self.mirror_sinks.push(link);
        1 + self.mirror_sinks.len()
    }

    pub fn mirror_sinks(&self) -> &[LinkId] {
        &self.mirror_sinks
    }

    /// Copies of each tagged frame leaving the switch: next rank, owner
    /// shadow stream, and any mirror sinks.
    pub fn members_per_group(&self) -> usize {
        2 + self.mirror_sinks.len()
    }

    /// Register a shadow's streams before traffic flows. One stream per
    /// boundary-rank source in every dp group.
    pub fn shadow_stream_accept(&mut self, shadow_id: NodeId) -> Result<StreamHandle, SwitchError> {
        if self.training_started {
            return Err(SwitchError::LateRegistration(shadow_id));
        }
        self.shadow_ports.ports(shadow_id)?;
        self.registered.insert(shadow_id);
        let mut streams = Vec::new();
        for (&dp_group, ring) in &self.rings {
            streams.push(StreamId { dp_group, boundary_rank: ring[0] });
            streams.push(StreamId { dp_group, boundary_rank: *ring.last().unwrap() });
        }
        Ok(StreamHandle { shadow_id, streams })
    }

    pub fn is_registered(&self, shadow_id: NodeId) -> bool {
        self.registered.contains(&shadow_id)
    }

    /// First data frame latches this; registrations afterwards fail.
    pub fn mark_training_started(&mut self) {
        self.training_started = true;
    }

    pub fn training_started(&self) -> bool {
        self.training_started
    }

    /// Route one DATA frame. Tagged frames from a boundary rank map to that
    /// boundary's multicast group; everything else follows the ring. A tagged
    /// frame from a source with no group is counted and forwarded unicast.
    pub fn classify(&mut self, frame: &WireFrame) -> Result<Action, SwitchError> {
        debug_assert_eq!(frame.msg_type, MsgType::Data);
        if frame.is_tagged() {
            if let Some(&gid) = self.group_ids.get(&(frame.dp_group, frame.src_rank)) {
                return Ok(Action::Multicast(gid));
            }
            self.classify_errors += 1;
        }
        let next = self.next_rank(frame.dp_group, frame.src_rank)?;
        Ok(Action::Unicast(self.rank_link(frame.dp_group, next)?))
    }

    /// Resolve the concrete egress links for a multicast frame: the training
    /// next hop first, then the owning shadow stream, then mirror sinks.
    pub fn multicast_members(
        &self,
        group_id: u32,
        frame: &WireFrame,
    ) -> Result<Vec<LinkId>, SwitchError> {
        let group = &self.groups[group_id as usize];
        let mut members = Vec::with_capacity(2 + self.mirror_sinks.len());
        members.push(self.rank_link(group.dp_group, group.next_rank)?);
        if frame.shadow_shard == SHARD_NONE {
            return Err(SwitchError::TaglessShard);
        }
        let owner = self.shard_map.owner(frame.dp_group, frame.shadow_shard)?;
        if !self.registered.contains(&owner) {
            return Err(SwitchError::UnregisteredShadow(owner));
        }
        let boundary_idx = self.boundary_idx(group.dp_group, group.boundary_rank)?;
        members.push(self.shadow_ports.ingress(owner, boundary_idx, frame.channel_id)?);
        members.extend_from_slice(&self.mirror_sinks);
        Ok(members)
    }

    /// Route one CTRL frame by its opcode: fetch requests go to the shadow
    /// owning the named shard, responses go back to the rank named in the
    /// payload.
    pub fn route_ctrl(&self, frame: &WireFrame) -> Result<LinkId, SwitchError> {
        let op = *frame.payload.first().ok_or(SwitchError::ShortCtrl)?;
        match op {
            ctrl_op::FETCH_SHARD | ctrl_op::FETCH_RANGE => {
                let owner = self.shard_map.owner(frame.dp_group, frame.shadow_shard)?;
                Ok(self.shadow_ports.ports(owner)?[0])
            }
            ctrl_op::RESP_OK | ctrl_op::RESP_ERR => {
                if frame.payload.len() < 3 {
                    return Err(SwitchError::ShortCtrl);
                }
                let dst = u16::from_le_bytes([frame.payload[1], frame.payload[2]]);
                self.rank_link(frame.dp_group, dst)
            }
            other => Err(SwitchError::UnroutableCtrl(other)),
        }
    }
}

/// Produce the shadow-stream copy of a tagged frame. The copy keeps its
/// inner_seq as the stream sequence; delivery is steered by the shard map,
/// while the copy toward the next training rank stays byte-identical.
pub fn rewrite_for_shadow(
    frame: &WireFrame,
    shard_map: &ShardMap,
) -> Result<WireFrame, SwitchError> {
    debug_assert!(frame.is_tagged());
    if frame.shadow_shard == SHARD_NONE {
        return Err(SwitchError::TaglessShard);
    }
    shard_map.owner(frame.dp_group, frame.shadow_shard)?;
    Ok(frame.clone())
}
