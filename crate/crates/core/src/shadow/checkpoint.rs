//! Binary checkpoint files and shard consolidation.
//!
//! Each shard emits one self-describing little-endian file: a header pinning
//! the model and iteration, per-layer parameter records, the optimizer state
//! for the same layers, and a trailing CRC-32. Concatenating a complete
//! shard set reconstructs the full model and optimizer exactly.

use thiserror::Error;

use crate::optim::{Hyper, OptimKind, OptimState};
use crate::trainer::flat::{f32s_to_le_bytes, le_bytes_to_f32s, FlatError, FlatTensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint truncated: need {need} more bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("unknown optimizer kind byte {0:#04x}")]
    BadKind(u8),
    #[error("checkpoint string is not UTF-8")]
    BadString,
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("shard set inconsistent: {0}")]
    Inconsistent(String),
    #[error("shard {0} missing from the set")]
    MissingShard(u32),
    #[error("layer {0:?} appears in more than one shard")]
    DuplicateLayer(String),
    #[error("layer {layer:?} holds {got} elements, model expects {expected}")]
    LayerMismatch { layer: String, expected: u64, got: u64 },
    #[error("layers {0:?} not covered by any shard")]
    MissingLayers(Vec<String>),
    #[error(transparent)]
    Flat(#[from] FlatError),
}

/// One layer's parameters as stored in a shard file.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub params: Vec<f32>,
}

/// One shard's restorable state at a pinned iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub model_id: String,
    /// Optimizer steps applied when the file was cut; a restored run
    /// executes this iteration index next.
    pub iteration: u64,
    pub shard_id: u32,
    pub shard_count: u32,
    /// Owned layers, ascending by their flat-storage offset.
    pub layers: Vec<LayerRecord>,
    pub kind: OptimKind,
    pub hyper: Hyper,
    pub step: u64,
    /// First moments (velocity for SGD), aligned with `layers`.
    pub m: Vec<Vec<f32>>,
    /// Second moments, aligned with `layers`; empty for SGD.
    pub v: Vec<Vec<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let have = self.buf.len() - self.pos;
        if have < n {
            return Err(CheckpointError::Truncated { need: n - have, have });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::BadString)
    }

    fn floats(&mut self, elems: usize) -> Result<Vec<f32>, CheckpointError> {
        Ok(le_bytes_to_f32s(self.take(elems * 4)?))
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl CheckpointFile {
    /// Serialize, appending the CRC-32 of everything before it.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.version.to_le_bytes());
        put_string(&mut out, &self.model_id);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.shard_id.to_le_bytes());
        out.extend_from_slice(&self.shard_count.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            put_string(&mut out, &l.name);
            out.extend_from_slice(&(l.params.len() as u64).to_le_bytes());
            out.extend_from_slice(&f32s_to_le_bytes(&l.params));
        }
        out.push(match self.kind {
            OptimKind::Sgd => 0,
            OptimKind::AdamW => 1,
        });
        for x in [
            self.hyper.lr,
            self.hyper.beta1,
            self.hyper.beta2,
            self.hyper.eps,
            self.hyper.weight_decay,
            self.hyper.momentum,
        ] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for m in &self.m {
            out.extend_from_slice(&f32s_to_le_bytes(m));
        }
        for v in &self.v {
            out.extend_from_slice(&f32s_to_le_bytes(v));
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parse and validate one shard file, checksum included.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated { need: 4 - bytes.len(), have: bytes.len() });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::ChecksumMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 0 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let model_id = r.string()?;
        let iteration = r.u64()?;
        let shard_id = r.u32()?;
        let shard_count = r.u32()?;
        let layer_count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let name = r.string()?;
            let elems = r.u64()? as usize;
            layers.push(LayerRecord { name, params: r.floats(elems)? });
        }
        let kind = match r.u8()? {
            0 => OptimKind::Sgd,
            1 => OptimKind::AdamW,
            other => return Err(CheckpointError::BadKind(other)),
        };
        let hyper = Hyper {
            lr: r.f32()?,
            beta1: r.f32()?,
            beta2: r.f32()?,
            eps: r.f32()?,
            weight_decay: r.f32()?,
            momentum: r.f32()?,
        };
        let step = r.u64()?;
        let mut m = Vec::with_capacity(layer_count);
        for l in &layers {
            m.push(r.floats(l.params.len())?);
        }
        let mut v = Vec::new();
        if kind == OptimKind::AdamW {
            for l in &layers {
                v.push(r.floats(l.params.len())?);
            }
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Inconsistent(format!(
                "{} trailing bytes after optimizer state",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            model_id,
            iteration,
            shard_id,
            shard_count,
            layers,
            kind,
            hyper,
            step,
            m,
            v,
        })
    }
}

/// CRC stored in an encoded checkpoint (its last four bytes).
pub fn encoded_crc(bytes: &[u8]) -> Option<u32> {
    let tail = bytes.len().checked_sub(4)?;
    Some(u32::from_le_bytes(bytes[tail..].try_into().unwrap()))
}

fn check_consistent<T: PartialEq + std::fmt::Debug>(
    what: &str,
    a: &T,
    b: &T,
) -> Result<(), CheckpointError> {
    if a != b {
        return Err(CheckpointError::Inconsistent(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Rebuild full (parameters, optimizer, iteration) from a complete shard set.
///
/// `table` is the model's layer table; every layer must be covered exactly
/// once and all headers must agree.
pub fn consolidate_files(
    files: &[CheckpointFile],
    table: &[(String, usize)],
) -> Result<(FlatTensor, OptimState, u64), CheckpointError> {
    let first = files
        .first()
        .ok_or_else(|| CheckpointError::Inconsistent("empty shard set".into()))?;
    if files.len() != first.shard_count as usize {
        return Err(CheckpointError::Inconsistent(format!(
            "{} files for shard count {}",
            files.len(),
            first.shard_count
        )));
    }
    for shard in 0..first.shard_count {
        if !files.iter().any(|f| f.shard_id == shard) {
            return Err(CheckpointError::MissingShard(shard));
        }
    }
    for f in &files[1..] {
        check_consistent("version", &first.version, &f.version)?;
        check_consistent("model id", &first.model_id, &f.model_id)?;
        check_consistent("iteration", &first.iteration, &f.iteration)?;
        check_consistent("shard count", &first.shard_count, &f.shard_count)?;
        check_consistent("optimizer kind", &first.kind, &f.kind)?;
        check_consistent("optimizer step", &first.step, &f.step)?;
        if first.hyper != f.hyper {
            return Err(CheckpointError::Inconsistent("hyperparameters differ".into()));
        }
    }

    let mut params = FlatTensor::from_layer_table(table)?;
    let mut opt = OptimState::new(first.kind, first.hyper, params.total_elems());
    opt.step = first.step;
    let mut covered: Vec<String> = Vec::new();
    for f in files {
        for (i, rec) in f.layers.iter().enumerate() {
            if covered.contains(&rec.name) {
                return Err(CheckpointError::DuplicateLayer(rec.name.clone()));
            }
            let info = params.layer(&rec.name)?.clone();
            if info.elems != rec.params.len()
                || f.m[i].len() != rec.params.len()
                || (f.kind == OptimKind::AdamW && f.v[i].len() != rec.params.len())
            {
                return Err(CheckpointError::LayerMismatch {
                    layer: rec.name.clone(),
                    expected: info.elems as u64,
                    got: rec.params.len() as u64,
                });
            }
            let range = info.offset..info.offset + info.elems;
            params.as_mut_slice()[range.clone()].copy_from_slice(&rec.params);
            opt.m[range.clone()].copy_from_slice(&f.m[i]);
            if f.kind == OptimKind::AdamW {
                opt.v[range].copy_from_slice(&f.v[i]);
            }
            covered.push(rec.name.clone());
        }
    }
    let missing: Vec<String> = table
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| !covered.contains(n))
        .collect();
    if !missing.is_empty() {
        return Err(CheckpointError::MissingLayers(missing));
    }
    Ok((params, opt, first.iteration))
}

/// Human-readable listing of a consolidated shard set.
pub fn render_manifest(files: &[CheckpointFile]) -> String {
    let mut out = String::new();
    if let Some(first) = files.first() {
        out.push_str(&format!("model: {}\n", first.model_id));
        out.push_str(&format!("iteration: {}\n", first.iteration));
        out.push_str(&format!("shards: {}\n", first.shard_count));
    }
    let mut sorted: Vec<&CheckpointFile> = files.iter().collect();
    sorted.sort_by_key(|f| f.shard_id);
    for f in sorted {
        let bytes = f.encode();
        let crc = encoded_crc(&bytes).unwrap_or(0);
        out.push_str(&format!(
            "shard {}: layers {}, bytes {}, crc32 {:08x}\n",
            f.shard_id,
            f.layers.len(),
            bytes.len(),
            crc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: OptimKind) -> CheckpointFile {
        let layers = vec![
            LayerRecord { name: "a".into(), params: vec![1.0, -2.5, 0.125] },
            LayerRecord { name: "b".into(), params: vec![3.5, 4.25] },
        ];
        let m = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5]];
        let v = match kind {
            OptimKind::AdamW => vec![vec![0.01, 0.02, 0.03], vec![0.04, 0.05]],
            OptimKind::Sgd => Vec::new(),
        };
        CheckpointFile {
            version: CHECKPOINT_VERSION,
            model_id: "mlp-2-3-2".into(),
            iteration: 7,
            shard_id: 0,
            shard_count: 1,
            layers,
            kind,
            hyper: Hyper::default(),
            step: 7,
            m,
            v,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        for kind in [OptimKind::AdamW, OptimKind::Sgd] {
            let file = sample(kind);
            let bytes = file.encode();
            assert_eq!(CheckpointFile::decode(&bytes).unwrap(), file);
        }
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let bytes = sample(OptimKind::AdamW).encode();

        let mut flipped = bytes.clone();
        flipped[10] ^= 0x40;
        assert!(matches!(
            CheckpointFile::decode(&flipped).unwrap_err(),
            CheckpointError::ChecksumMismatch { .. }
        ));

        assert!(matches!(
            CheckpointFile::decode(&bytes[..3]).unwrap_err(),
            CheckpointError::Truncated { .. }
        ));

        // Valid CRC over a body cut short still fails structurally.
        let mut short = bytes[..20].to_vec();
        let crc = crc32fast::hash(&short);
        short.extend_from_slice(&crc.to_le_bytes());
        assert!(CheckpointFile::decode(&short).is_err());

        let mut wrong_version = sample(OptimKind::Sgd);
        wrong_version.version = 9;
        assert_eq!(
            CheckpointFile::decode(&wrong_version.encode()).unwrap_err(),
            CheckpointError::BadVersion(9)
        );
    }

    fn two_shard_set() -> (Vec<CheckpointFile>, Vec<(String, usize)>) {
        let table = vec![("a".to_string(), 3usize), ("b".to_string(), 2)];
        let shard0 = CheckpointFile {
            version: CHECKPOINT_VERSION,
            model_id: "m".into(),
            iteration: 4,
            shard_id: 0,
            shard_count: 2,
            layers: vec![LayerRecord { name: "a".into(), params: vec![1.0, 2.0, 3.0] }],
            kind: OptimKind::AdamW,
            hyper: Hyper::default(),
            step: 4,
            m: vec![vec![0.1, 0.2, 0.3]],
            v: vec![vec![0.5, 0.6, 0.7]],
        };
        let shard1 = CheckpointFile {
            shard_id: 1,
            layers: vec![LayerRecord { name: "b".into(), params: vec![4.0, 5.0] }],
            m: vec![vec![0.8, 0.9]],
            v: vec![vec![1.1, 1.2]],
            ..shard0.clone()
        };
        (vec![shard0, shard1], table)
    }

    #[test]
    fn consolidation_rebuilds_the_full_state() {
        let (files, table) = two_shard_set();
        let (params, opt, iteration) = consolidate_files(&files, &table).unwrap();
        assert_eq!(iteration, 4);
        assert_eq!(params.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(opt.m, vec![0.1, 0.2, 0.3, 0.8, 0.9]);
        assert_eq!(opt.v, vec![0.5, 0.6, 0.7, 1.1, 1.2]);
        assert_eq!(opt.step, 4);
        assert_eq!(opt.kind, OptimKind::AdamW);
    }

    #[test]
    fn consolidation_rejects_broken_sets() {
        let (files, table) = two_shard_set();

        assert_eq!(
            consolidate_files(&files[..1], &table).unwrap_err(),
            CheckpointError::Inconsistent("1 files for shard count 2".into())
        );

        let mut dup = files.clone();
        dup[1] = dup[0].clone();
        assert_eq!(consolidate_files(&dup, &table).unwrap_err(), CheckpointError::MissingShard(1));

        let mut skewed = files.clone();
        skewed[1].iteration = 5;
        skewed[1].step = 5;
        assert!(matches!(
            consolidate_files(&skewed, &table).unwrap_err(),
            CheckpointError::Inconsistent(_)
        ));

        let mut overlap = files.clone();
        overlap[1].shard_id = 1;
        overlap[1].layers = files[0].layers.clone();
        overlap[1].m = files[0].m.clone();
        overlap[1].v = files[0].v.clone();
        assert_eq!(
            consolidate_files(&overlap, &table).unwrap_err(),
            CheckpointError::DuplicateLayer("a".into())
        );

        let mut wrong_size = files.clone();
        wrong_size[1].layers[0].params.push(9.0);
        wrong_size[1].m[0].push(9.0);
        wrong_size[1].v[0].push(9.0);
        assert!(matches!(
            consolidate_files(&wrong_size, &table).unwrap_err(),
            CheckpointError::LayerMismatch { .. }
        ));

        let wide_table = vec![
            ("a".to_string(), 3usize),
            ("b".to_string(), 2),
            ("c".to_string(), 1),
        ];
        assert_eq!(
            consolidate_files(&files, &wide_table).unwrap_err(),
            CheckpointError::MissingLayers(vec!["c".into()])
        );
    }

    #[test]
    fn manifest_lists_every_shard_with_its_crc() {
        let (files, _) = two_shard_set();
        let manifest = render_manifest(&files);
        assert!(manifest.contains("model: m"));
        assert!(manifest.contains("iteration: 4"));
        assert!(manifest.contains("shards: 2"));
        let crc0 = encoded_crc(&files[0].encode()).unwrap();
        assert!(manifest.contains(&format!("{crc0:08x}")));
        assert_eq!(manifest.lines().count(), 5);
    }
}
