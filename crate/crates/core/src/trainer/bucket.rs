//! Gradient bucketing.
//!
//! Buckets are filled from the last layer backwards, mirroring the order in
//! which backpropagation finishes gradients: a layer joins the current bucket
//! while the bucket stays within the size cap; a layer larger than the cap
//! gets a dedicated bucket of its own. On the wire each bucket is padded with
//! zero floats so it divides into `n` equal chunks.

use thiserror::Error;

use crate::collective::padded_bucket_bytes;
use crate::trainer::flat::FlatTensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BucketError {
    #[error("no layers to bucket")]
    Empty,
    #[error("bucket cap must be positive")]
    ZeroCap,
    #[error("layer {0:?} has zero bytes")]
    ZeroLayer(String),
    #[error("bucket {0} out of range")]
    UnknownBucket(u32),
}

/// One layer's placement inside a bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketEntry {
    pub layer: String,
    /// Byte extent of the layer in flat parameter storage.
    pub flat_byte_start: u64,
    pub byte_len: u64,
    /// Where the layer's bytes sit inside the bucket image.
    pub bucket_byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub bucket_id: u32,
    pub entries: Vec<BucketEntry>,
    /// Payload bytes before chunk padding.
    pub raw_bytes: u64,
}

/// Assignment of every layer to exactly one bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketLayout {
    pub cap_bytes: u64,
    pub buckets: Vec<Bucket>,
}

/// Pack `(name, byte size)` layers into capped buckets, last layer first.
///
/// Layer byte offsets are accumulated in declaration order; bucket 0 holds
/// the rearmost layers. Bucket-internal order is the reverse declaration
/// order, so a bucket's layers are contiguous in flat storage even though
/// their in-bucket order is flipped.
pub fn build_buckets(layers: &[(String, u64)], cap_bytes: u64) -> Result<BucketLayout, BucketError> {
    if layers.is_empty() {
        return Err(BucketError::Empty);
    }
    if cap_bytes == 0 {
        return Err(BucketError::ZeroCap);
    }
    let mut flat_starts = Vec::with_capacity(layers.len());
    let mut cursor = 0u64;
    for (name, bytes) in layers {
        if *bytes == 0 {
            return Err(BucketError::ZeroLayer(name.clone()));
        }
        flat_starts.push(cursor);
        cursor += bytes;
    }

    let mut buckets: Vec<Bucket> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut current_bytes = 0u64;
    let flush = |current: &mut Vec<usize>, current_bytes: &mut u64, buckets: &mut Vec<Bucket>| {
        if current.is_empty() {
            return;
        }
        let mut entries = Vec::with_capacity(current.len());
        let mut offset = 0u64;
        for &idx in current.iter() {
            let (name, bytes) = &layers[idx];
            entries.push(BucketEntry {
                layer: name.clone(),
                flat_byte_start: flat_starts[idx],
                byte_len: *bytes,
                bucket_byte_offset: offset,
            });
            offset += bytes;
        }
        buckets.push(Bucket {
            bucket_id: buckets.len() as u32,
            entries,
            raw_bytes: *current_bytes,
        });
        current.clear();
        *current_bytes = 0;
    };

    for idx in (0..layers.len()).rev() {
        let bytes = layers[idx].1;
        if bytes >= cap_bytes {
            // Oversized layers take a dedicated bucket.
            flush(&mut current, &mut current_bytes, &mut buckets);
            current.push(idx);
            current_bytes = bytes;
            flush(&mut current, &mut current_bytes, &mut buckets);
            continue;
        }
        if current_bytes + bytes > cap_bytes {
            flush(&mut current, &mut current_bytes, &mut buckets);
        }
        current.push(idx);
        current_bytes += bytes;
    }
    flush(&mut current, &mut current_bytes, &mut buckets);

    Ok(BucketLayout { cap_bytes, buckets })
}

impl BucketLayout {
    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket(&self, bucket_id: u32) -> Result<&Bucket, BucketError> {
        self.buckets.get(bucket_id as usize).ok_or(BucketError::UnknownBucket(bucket_id))
    }

    /// Bucket size on the wire once padded for an `n`-way chunk split.
    pub fn padded_bytes(&self, bucket_id: u32, world: usize) -> Result<u64, BucketError> {
        Ok(padded_bucket_bytes(self.bucket(bucket_id)?.raw_bytes, world))
    }

    /// Sum of padded bucket sizes: the tagged bytes one iteration emits.
    pub fn total_padded_bytes(&self, world: usize) -> u64 {
        self.buckets
            .iter()
            .map(|b| padded_bucket_bytes(b.raw_bytes, world))
            .sum()
    }

    /// Gather a bucket's layer gradients into one padded float image.
    pub fn fill_bucket(
        &self,
        bucket_id: u32,
        flat: &FlatTensor,
        world: usize,
    ) -> Result<Vec<f32>, BucketError> {
        let bucket = self.bucket(bucket_id)?;
        let padded = padded_bucket_bytes(bucket.raw_bytes, world) as usize / 4;
        let mut out = vec![0.0f32; padded];
        let data = flat.as_slice();
        for e in &bucket.entries {
            let src = e.flat_byte_start as usize / 4;
            let dst = e.bucket_byte_offset as usize / 4;
            let n = e.byte_len as usize / 4;
            out[dst..dst + n].copy_from_slice(&data[src..src + n]);
        }
        Ok(out)
    }

    /// Scatter a reduced bucket image back into flat storage, skipping pad.
    pub fn scatter_bucket(
        &self,
        bucket_id: u32,
        image: &[f32],
        flat: &mut FlatTensor,
    ) -> Result<(), BucketError> {
        let bucket = self.bucket(bucket_id)?;
        let data = flat.as_mut_slice();
        for e in &bucket.entries {
            let src = e.bucket_byte_offset as usize / 4;
            let dst = e.flat_byte_start as usize / 4;
            let n = e.byte_len as usize / 4;
            data[dst..dst + n].copy_from_slice(&image[src..src + n]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layers(spec: &[(&str, u64)]) -> Vec<(String, u64)> {
        spec.iter().map(|(n, b)| (n.to_string(), *b)).collect()
    }

    fn names(bucket: &Bucket) -> Vec<&str> {
        bucket.entries.iter().map(|e| e.layer.as_str()).collect()
    }

    #[test]
    fn packs_in_reverse_until_cap() {
        let l = build_buckets(&layers(&[("A", 10), ("B", 10), ("C", 10)]), 25).unwrap();
        assert_eq!(l.num_buckets(), 2);
        assert_eq!(names(&l.buckets[0]), vec!["C", "B"]);
        assert_eq!(names(&l.buckets[1]), vec!["A"]);
        assert_eq!(l.buckets[0].raw_bytes, 20);
    }

    #[test]
    fn oversized_layer_gets_dedicated_bucket() {
        let l = build_buckets(&layers(&[("big", 30)]), 25).unwrap();
        assert_eq!(l.num_buckets(), 1);
        assert_eq!(l.buckets[0].raw_bytes, 30);

        let l = build_buckets(&layers(&[("A", 10), ("big", 30), ("B", 10)]), 25).unwrap();
        assert_eq!(names(&l.buckets[0]), vec!["B"]);
        assert_eq!(names(&l.buckets[1]), vec!["big"]);
        assert_eq!(names(&l.buckets[2]), vec!["A"]);
    }

    #[test]
    fn layer_exactly_at_cap_is_dedicated() {
        let l = build_buckets(&layers(&[("A", 5), ("B", 25)]), 25).unwrap();
        assert_eq!(names(&l.buckets[0]), vec!["B"]);
        assert_eq!(names(&l.buckets[1]), vec!["A"]);
    }

    #[test]
    fn bucket_entries_are_contiguous_in_flat_storage() {
        let l = build_buckets(&layers(&[("A", 8), ("B", 4), ("C", 4)]), 12).unwrap();
        // Bucket 0 holds C then B; their flat extents are adjacent.
        let b0 = &l.buckets[0];
        assert_eq!(names(b0), vec!["C", "B"]);
        assert_eq!(b0.entries[0].flat_byte_start, 12);
        assert_eq!(b0.entries[0].bucket_byte_offset, 0);
        assert_eq!(b0.entries[1].flat_byte_start, 8);
        assert_eq!(b0.entries[1].bucket_byte_offset, 4);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert_eq!(build_buckets(&[], 10), Err(BucketError::Empty));
        assert_eq!(build_buckets(&layers(&[("A", 1)]), 0), Err(BucketError::ZeroCap));
        assert_eq!(
            build_buckets(&layers(&[("A", 0)]), 10),
            Err(BucketError::ZeroLayer("A".into()))
        );
    }

    #[test]
    fn every_layer_lands_in_exactly_one_bucket() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..30);
            let table: Vec<(String, u64)> =
                (0..n).map(|i| (format!("l{i}"), rng.gen_range(1..5000))).collect();
            let cap = rng.gen_range(1..6000);
            let layout = build_buckets(&table, cap).unwrap();
            let mut seen = std::collections::HashSet::new();
            let mut total = 0u64;
            for b in &layout.buckets {
                let entry_sum: u64 = b.entries.iter().map(|e| e.byte_len).sum();
                assert_eq!(entry_sum, b.raw_bytes);
                for e in &b.entries {
                    assert!(seen.insert(e.layer.clone()), "layer {} duplicated", e.layer);
                }
                total += b.raw_bytes;
            }
            assert_eq!(seen.len(), n);
            assert_eq!(total, table.iter().map(|(_, b)| b).sum::<u64>());
            // Multi-layer buckets never exceed the cap.
            for b in &layout.buckets {
                if b.entries.len() > 1 {
                    assert!(b.raw_bytes <= cap);
                }
            }
        }
    }

    #[test]
    fn fill_and_scatter_round_trip() {
        let table = vec![("a".to_string(), 8usize), ("b".to_string(), 4), ("c".to_string(), 4)];
        let byte_table: Vec<(String, u64)> =
            table.iter().map(|(n, e)| (n.clone(), *e as u64 * 4)).collect();
        let layout = build_buckets(&byte_table, 48).unwrap();
        let mut flat = FlatTensor::from_layer_table(&table).unwrap();
        for (i, x) in flat.as_mut_slice().iter_mut().enumerate() {
            *x = i as f32;
        }
        let world = 4;
        let mut rebuilt = flat.zeros_like();
        for b in 0..layout.num_buckets() as u32 {
            let image = layout.fill_bucket(b, &flat, world).unwrap();
            assert_eq!(image.len() as u64 * 4, layout.padded_bytes(b, world).unwrap());
            layout.scatter_bucket(b, &image, &mut rebuilt).unwrap();
        }
        assert_eq!(flat.as_slice(), rebuilt.as_slice());
    }
}
