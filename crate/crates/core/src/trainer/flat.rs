//! Contiguous f32 storage for model parameters and gradients.
//!
//! Layers occupy adjacent extents in declaration order. All wire and
//! checkpoint layouts are derived from this flat image, so the element type
//! is fixed at 32-bit floats.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlatError {
    #[error("no layers")]
    Empty,
    #[error("layer {0:?} has zero elements")]
    ZeroLayer(String),
    #[error("duplicate layer name {0:?}")]
    DuplicateLayer(String),
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub elems: usize,
    /// Element offset of the layer within the flat vector.
    pub offset: usize,
}

/// Named layers over one contiguous f32 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatTensor {
    layers: Vec<LayerInfo>,
    data: Vec<f32>,
}

impl FlatTensor {
    /// Zero-filled tensor over `(name, element count)` pairs.
    pub fn from_layer_table(table: &[(String, usize)]) -> Result<Self, FlatError> {
        if table.is_empty() {
            return Err(FlatError::Empty);
        }
        let mut layers = Vec::with_capacity(table.len());
        let mut offset = 0usize;
        for (name, elems) in table {
            if *elems == 0 {
                return Err(FlatError::ZeroLayer(name.clone()));
            }
            if layers.iter().any(|l: &LayerInfo| &l.name == name) {
                return Err(FlatError::DuplicateLayer(name.clone()));
            }
            layers.push(LayerInfo { name: name.clone(), elems: *elems, offset });
            offset += elems;
        }
        Ok(Self { layers, data: vec![0.0; offset] })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn layer_table(&self) -> Vec<(String, usize)> {
        self.layers.iter().map(|l| (l.name.clone(), l.elems)).collect()
    }

    pub fn layer(&self, name: &str) -> Result<&LayerInfo, FlatError> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| FlatError::UnknownLayer(name.to_string()))
    }

    pub fn layer_slice(&self, name: &str) -> Result<&[f32], FlatError> {
        let l = self.layer(name)?;
        Ok(&self.data[l.offset..l.offset + l.elems])
    }

    pub fn layer_slice_mut(&mut self, name: &str) -> Result<&mut [f32], FlatError> {
        let l = self.layer(name)?.clone();
        Ok(&mut self.data[l.offset..l.offset + l.elems])
    }

    pub fn total_elems(&self) -> usize {
        self.data.len()
    }

    pub fn total_bytes(&self) -> u64 {
        self.data.len() as u64 * 4
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Little-endian byte image of the whole vector.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }
}

/// Little-endian byte image of an f32 slice.
pub fn f32s_to_le_bytes(xs: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 4);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Inverse of `f32s_to_le_bytes`; `bytes.len()` must be a multiple of 4.
pub fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}
