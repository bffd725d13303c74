//! Per-layer key/value cache. Keys are stored post-rotary, so every cached
//! row carries the rotation of its absolute position. Whole-model forward
//! passes append all layers at once; the per-layer attention op appends one
//! layer at a time and realigns after a full sweep.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerKV {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    n_heads: usize,
    head_dim: usize,
    position_offset: usize,
    pub(crate) layers: Vec<LayerKV>,
}

impl KVCache {
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize, position_offset: usize) -> Self {
        KVCache {
            n_heads,
            head_dim,
            position_offset,
            layers: (0..n_layers)
                .map(|_| LayerKV {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Row width d = n_heads · head_dim.
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Number of cached positions (first layer's view; layers agree except
    /// mid-sweep of the per-layer op).
    pub fn extent(&self) -> usize {
        self.layer_extent(0)
    }

    pub fn layer_extent(&self, layer: usize) -> usize {
        self.layers
            .get(layer)
            .map(|l| l.keys.len() / self.width())
            .unwrap_or(0)
    }

    /// True when every layer caches the same number of positions.
    pub fn is_aligned(&self) -> bool {
        let e = self.extent();
        (0..self.n_layers()).all(|l| self.layer_extent(l) == e)
    }

    /// First absolute position represented by the cache.
    pub fn position_offset(&self) -> usize {
        self.position_offset
    }

    /// Absolute position the next new token takes when decoding over this
    /// cache: positions continue right after the cached span.
    pub fn next_position(&self) -> usize {
        self.position_offset + self.extent()
    }

    /// Cached key rows of one layer, [extent×d] row-major, post-rotary.
    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys
    }

    /// Cached value rows of one layer, [extent×d] row-major.
    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values
    }

    /// Append `t` new rows to every layer at once, keeping extents aligned.
    /// Each entry is ([t×d] keys, [t×d] values) for one layer.
    pub fn append(&mut self, per_layer: &[(Vec<f32>, Vec<f32>)]) -> Result<()> {
        if per_layer.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "cache has {} layers, append got {}",
                self.layers.len(),
                per_layer.len()
            )));
        }
        let d = self.width();
        let t = per_layer
            .first()
            .map(|(k, _)| k.len() / d)
            .unwrap_or_default();
        for (k, v) in per_layer {
            if k.len() != t * d || v.len() != t * d {
                return Err(Error::Dimension(
                    "cache append rows must be [t×d] and equal across layers".into(),
                ));
            }
        }
        for (layer, (k, v)) in self.layers.iter_mut().zip(per_layer) {
            layer.keys.extend_from_slice(k);
            layer.values.extend_from_slice(v);
        }
        Ok(())
    }

    /// Append rows to one layer (the per-layer attention op). The cache is
    /// transiently misaligned until every layer has been swept.
    pub fn append_layer(&mut self, layer: usize, keys: &[f32], values: &[f32]) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::Config(format!(
                "layer {layer} out of range for {} cached layers",
                self.layers.len()
            )));
        }
        let d = self.width();
        if keys.len() % d != 0 || keys.len() != values.len() {
            return Err(Error::Dimension("layer append rows must be [t×d]".into()));
        }
        self.layers[layer].keys.extend_from_slice(keys);
        self.layers[layer].values.extend_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_keeps_layers_aligned() {
        let mut cache = KVCache::new(2, 2, 4, 5);
        assert_eq!(cache.extent(), 0);
        assert_eq!(cache.next_position(), 5);
        let rows = vec![
            (vec![0.0; 3 * 8], vec![0.0; 3 * 8]),
            (vec![0.0; 3 * 8], vec![0.0; 3 * 8]),
        ];
        cache.append(&rows).unwrap();
        assert_eq!(cache.extent(), 3);
        assert!(cache.is_aligned());
        assert_eq!(cache.next_position(), 8);
    }

    #[test]
    fn layer_count_mismatch_is_config_error() {
        let mut cache = KVCache::new(2, 2, 4, 0);
        let rows = vec![(vec![0.0; 8], vec![0.0; 8])];
        assert!(matches!(cache.append(&rows), Err(Error::Config(_))));
    }

    #[test]
    fn per_layer_appends_realign_after_a_sweep() {
        let mut cache = KVCache::new(2, 1, 4, 0);
        cache.append_layer(0, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(!cache.is_aligned());
        cache.append_layer(1, &[0.0; 4], &[0.0; 4]).unwrap();
        assert!(cache.is_aligned());
        assert_eq!(cache.extent(), 1);
    }
}
