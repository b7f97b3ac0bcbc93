//! Binary wire format shared by both transports.
//!
//! Every frame starts with a fixed 48-byte little-endian header, followed by
//! a u32 payload length and the payload bytes. CREDIT frames reuse the
//! payload-length slot as the credit count and carry no payload; their
//! `bucket_id` field names the link being granted.

use thiserror::Error;

pub const FRAME_MAGIC: u32 = 0x434B_4D54;
pub const FRAME_VERSION: u8 = 1;
/// Fixed header bytes preceding the payload length.
pub const HEADER_LEN: usize = 48;
/// Untagged frames carry this in the shadow-shard field.
pub const SHARD_NONE: u8 = crate::collective::SHARD_NONE;
/// Default segmentation limit for chunk payloads.
pub const DEFAULT_MTU_PAYLOAD: usize = 8192;

/// Frame is part of the tagged gradient stream.
pub const FLAG_TAGGED: u8 = 1 << 0;
/// Frame belongs to the AllGather phase (untoggled for ReduceScatter).
pub const FLAG_ALLGATHER: u8 = 1 << 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("buffer too short: need {need}, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    BadMsgType(u8),
    #[error("credit frame with payload")]
    CreditWithPayload,
    #[error("payload length {0} exceeds limit")]
    OversizedPayload(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Data = 0,
    Credit = 1,
    Ctrl = 2,
    Ack = 3,
}

impl TryFrom<u8> for MsgType {
    type Error = FrameError;
    fn try_from(v: u8) -> Result<Self, FrameError> {
        match v {
            0 => Ok(MsgType::Data),
            1 => Ok(MsgType::Credit),
            2 => Ok(MsgType::Ctrl),
            3 => Ok(MsgType::Ack),
            other => Err(FrameError::BadMsgType(other)),
        }
    }
}

// Guard against nonsense lengths when decoding byte streams.
const MAX_PAYLOAD: u32 = 1 << 24;

/// One fabric frame. Field order mirrors the wire layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub version: u8,
    pub msg_type: MsgType,
    pub flags: u8,
    pub shadow_shard: u8,
    pub dp_group: u16,
    pub src_rank: u16,
    pub channel_id: u16,
    pub round: u16,
    pub iteration: u64,
    pub bucket_id: u32,
    pub chunk_id: u32,
    pub inner_seq: u64,
    pub byte_offset: u64,
    /// Credit count for CREDIT frames; zero otherwise.
    pub credit: u32,
    pub payload: Vec<u8>,
}

impl WireFrame {
    /// Blank DATA frame; callers fill in routing and stream fields.
    pub fn data() -> Self {
        Self {
            version: FRAME_VERSION,
            msg_type: MsgType::Data,
            flags: 0,
            shadow_shard: SHARD_NONE,
            dp_group: 0,
            src_rank: 0,
            channel_id: 0,
            round: 0,
            iteration: 0,
            bucket_id: 0,
            chunk_id: 0,
            inner_seq: 0,
            byte_offset: 0,
            credit: 0,
            payload: Vec::new(),
        }
    }

    /// Credit grant of `count` frame slots for `link_id`.
    pub fn credit_grant(link_id: u32, count: u32) -> Self {
        let mut f = Self::data();
        f.msg_type = MsgType::Credit;
        f.bucket_id = link_id;
        f.credit = count;
        f
    }

    pub fn is_tagged(&self) -> bool {
        self.msg_type == MsgType::Data && self.flags & FLAG_TAGGED != 0
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 + self.payload.len()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(&FRAME_MAGIC.to_le_bytes());
        out.push(self.version);
        out.push(self.msg_type as u8);
        out.push(self.flags);
        out.push(self.shadow_shard);
        out.extend_from_slice(&self.dp_group.to_le_bytes());
        out.extend_from_slice(&self.src_rank.to_le_bytes());
        out.extend_from_slice(&self.channel_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.bucket_id.to_le_bytes());
        out.extend_from_slice(&self.chunk_id.to_le_bytes());
        out.extend_from_slice(&self.inner_seq.to_le_bytes());
        out.extend_from_slice(&self.byte_offset.to_le_bytes());
        let len = if self.msg_type == MsgType::Credit {
            self.credit
        } else {
            self.payload.len() as u32
        };
        out.extend_from_slice(&len.to_le_bytes());
        if self.msg_type != MsgType::Credit {
            out.extend_from_slice(&self.payload);
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    /// Decode one frame, returning it and the bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), FrameError> {
        let fixed = HEADER_LEN + 4;
        if bytes.len() < fixed {
            return Err(FrameError::Truncated { need: fixed, have: bytes.len() });
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());

        let magic = u32_at(0);
        if magic != FRAME_MAGIC {
            return Err(FrameError::BadMagic(magic));
        }
        let version = bytes[4];
        if version != FRAME_VERSION {
            return Err(FrameError::BadVersion(version));
        }
        let msg_type = MsgType::try_from(bytes[5])?;
        let flags = bytes[6];
        let shadow_shard = bytes[7];
        let dp_group = u16_at(8);
        let src_rank = u16_at(10);
        let channel_id = u16_at(12);
        let round = u16_at(14);
        let iteration = u64_at(16);
        let bucket_id = u32_at(24);
        let chunk_id = u32_at(28);
        let inner_seq = u64_at(32);
        let byte_offset = u64_at(40);
        let len = u32_at(48);

        let (credit, payload, consumed) = if msg_type == MsgType::Credit {
            (len, Vec::new(), fixed)
        } else {
            if len > MAX_PAYLOAD {
                return Err(FrameError::OversizedPayload(len));
            }
            let need = fixed + len as usize;
            if bytes.len() < need {
                return Err(FrameError::Truncated { need, have: bytes.len() });
            }
            (0, bytes[fixed..need].to_vec(), need)
        };

        Ok((
            Self {
                version,
                msg_type,
                flags,
                shadow_shard,
                dp_group,
                src_rank,
                channel_id,
                round,
                iteration,
                bucket_id,
                chunk_id,
                inner_seq,
                byte_offset,
                credit,
                payload,
            },
            consumed,
        ))
    }
}
