//! Per-layer key/value storage and KV-cache byte accounting.
//!
//! Local layers keep a ring of the most recent `window` entries, global
//! layers keep everything up to `max_context`. Entries carry their absolute
//! positions so rotary embeddings stay correct after eviction.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attention::LayerKind;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// How local layers store their history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CacheMode {
    /// Ring buffer of capacity `window` for local layers.
    #[default]
    Windowed,
    /// Every layer keeps the full history; windowing is left to the mask.
    Full,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    kind: LayerKind,
    capacity: usize,
    width: usize,
    keys: VecDeque<Vec<f64>>,
    values: VecDeque<Vec<f64>>,
    positions: VecDeque<usize>,
    next_pos: usize,
}

impl LayerCache {
    fn new(kind: LayerKind, capacity: usize, width: usize) -> Self {
        Self {
            kind,
            capacity,
            width,
            keys: VecDeque::with_capacity(capacity.min(4096)),
            values: VecDeque::with_capacity(capacity.min(4096)),
            positions: VecDeque::with_capacity(capacity.min(4096)),
            next_pos: 0,
        }
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Stored absolute positions, oldest first.
    pub fn positions(&self) -> Vec<usize> {
        self.positions.iter().copied().collect()
    }

    pub fn keys(&self) -> Matrix {
        stack(&self.keys, self.width)
    }

    pub fn values(&self) -> Matrix {
        stack(&self.values, self.width)
    }
}

fn stack(rows: &VecDeque<Vec<f64>>, width: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix::new(rows.len(), width, data).expect("rows have cache width")
}

/// Key/value cache for one generation stream.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    max_context: usize,
}

impl KvCache {
    /// `widths[i]` is `num_kv_heads · head_dim` of layer `i`.
    pub fn new(
        pattern: &[LayerKind],
        widths: &[usize],
        window: usize,
        max_context: usize,
        mode: CacheMode,
    ) -> Result<Self> {
        if pattern.len() != widths.len() {
            return shape_err("kv cache: one width per layer required");
        }
        if window == 0 || window > max_context {
            return Err(Error::Config(format!(
                "window {window} must be in 1..={max_context}"
            )));
        }
        let layers = pattern
            .iter()
            .zip(widths)
            .map(|(&kind, &w)| {
                let cap = match (kind, mode) {
                    (LayerKind::Local, CacheMode::Windowed) => window,
                    _ => max_context,
                };
                LayerCache::new(kind, cap, w)
            })
            .collect();
        Ok(Self {
            layers,
            max_context,
        })
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn max_context(&self) -> usize {
        self.max_context
    }

    /// Absolute position of the next token (number of tokens seen so far).
    pub fn next_pos(&self) -> usize {
        self.layers.first().map_or(0, |l| l.next_pos)
    }

    pub fn append(&mut self, layer: usize, k: &[f64], v: &[f64], pos: usize) -> Result<()> {
        let max_context = self.max_context;
        let lc = self
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::Shape(format!("no cache layer {layer}")))?;
        if k.len() != lc.width || v.len() != lc.width {
            return shape_err(format!(
                "kv append: widths {}/{} for layer width {}",
                k.len(),
                v.len(),
                lc.width
            ));
        }
        if pos != lc.next_pos {
            return Err(Error::Ordering {
                expected: lc.next_pos,
                got: pos,
            });
        }
        if pos >= max_context {
            return Err(Error::Capacity(format!(
                "position {pos} exceeds max_context {max_context}"
            )));
        }
        if lc.positions.len() == lc.capacity {
            lc.keys.pop_front();
            lc.values.pop_front();
            lc.positions.pop_front();
        }
        lc.keys.push_back(k.to_vec());
        lc.values.push_back(v.to_vec());
        lc.positions.push_back(pos);
        lc.next_pos = pos + 1;
        Ok(())
    }

    /// Checks the structural invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> bool {
        let np = self.next_pos();
        self.layers.iter().all(|l| {
            l.next_pos == np
                && l.positions.len() <= l.capacity
                && l.positions.iter().zip(l.positions.iter().skip(1)).all(|(a, b)| a < b)
                && l.positions.back().map_or(true, |&p| p + 1 == np)
                && l.positions.len() == np.min(l.capacity)
        })
    }
}

/// KV bytes per layer and in total.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvBytes {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// Bytes held by one layer's K and V at `context` tokens.
pub fn layer_kv_bytes(
    kind: LayerKind,
    context: usize,
    window: usize,
    num_kv_heads: usize,
    head_dim: usize,
    bits_per_elem: u32,
) -> u64 {
    let tokens = match kind {
        LayerKind::Global => context,
        LayerKind::Local => context.min(window),
    };
    let bits = 2u128 * tokens as u128 * num_kv_heads as u128 * head_dim as u128 * bits_per_elem as u128;
    (bits / 8) as u64
}

pub fn kv_bytes(
    pattern: &[LayerKind],
    context: usize,
    window: usize,
    num_kv_heads: usize,
    head_dim: usize,
    bits_per_elem: u32,
) -> KvBytes {
    let per_layer: Vec<u64> = pattern
        .iter()
        .map(|&k| layer_kv_bytes(k, context, window, num_kv_heads, head_dim, bits_per_elem))
        .collect();
    KvBytes {
        total: per_layer.iter().sum(),
        per_layer,
    }
}

/// `kv_bytes` totals at each context length.
pub fn kv_curve(
    pattern: &[LayerKind],
    window: usize,
    num_kv_heads: usize,
    head_dim: usize,
    bits_per_elem: u32,
    contexts: &[usize],
) -> Result<Vec<(usize, u64)>> {
    if !contexts.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("contexts must be strictly ascending".into()));
    }
    Ok(contexts
        .iter()
        .map(|&c| {
            (
                c,
                kv_bytes(pattern, c, window, num_kv_heads, head_dim, bits_per_elem).total,
            )
        })
        .collect())
}

/// `context,bytes` CSV with a header line.
pub fn curve_csv(points: &[(usize, u64)]) -> String {
    let mut out = String::from("context,bytes\n");
    for (c, b) in points {
        let _ = writeln!(out, "{c},{b}");
    }
    out
}
