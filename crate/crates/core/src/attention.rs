//! Grouped-query attention with QK-norm and kind-dependent masking.
//!
//! Local layers use a causal sliding window: a query at position `p` sees the
//! keys in `[p - window + 1, p]`. Global layers see the whole causal prefix.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, rms_norm_rows, softmax_in_place, Matrix, RopeParams, RMS_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Local,
    Global,
}

impl LayerKind {
    pub fn symbol(self) -> char {
        match self {
            LayerKind::Local => 'L',
            LayerKind::Global => 'G',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub kind: LayerKind,
    /// Sliding window in tokens, counting the query token. `Some` iff `kind` is Local.
    pub window: Option<usize>,
    pub rope: RopeParams,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_query_heads == 0 || self.num_kv_heads == 0 {
            return Err(Error::Config("head counts must be positive".into()));
        }
        if self.num_query_heads % self.num_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} kv heads do not divide {} query heads",
                self.num_kv_heads, self.num_query_heads
            )));
        }
        match (self.kind, self.window) {
            (LayerKind::Local, Some(0)) => {
                return Err(Error::Config("local window must be >= 1".into()))
            }
            (LayerKind::Local, None) => {
                return Err(Error::Config("local attention requires a window".into()))
            }
            (LayerKind::Global, Some(_)) => {
                return Err(Error::Config("global attention takes no window".into()))
            }
            _ => {}
        }
        if self.rope.head_dim != self.head_dim {
            return Err(Error::Config(format!(
                "rope head_dim {} != head_dim {}",
                self.rope.head_dim, self.head_dim
            )));
        }
        self.rope.validate()
    }

    /// Query heads sharing one kv head.
    pub fn group_size(&self) -> usize {
        self.num_query_heads / self.num_kv_heads
    }

    pub fn q_width(&self) -> usize {
        self.num_query_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

/// Whether a query at `q` may attend to a key at `k`.
#[inline]
pub fn allowed(kind: LayerKind, q: usize, k: usize, window: Option<usize>) -> bool {
    k <= q
        && match kind {
            LayerKind::Global => true,
            LayerKind::Local => q - k < window.unwrap_or(usize::MAX),
        }
}

/// Additive attention mask with entries in `{0, -inf}`.
pub fn build_mask(
    kind: LayerKind,
    q_positions: &[usize],
    k_positions: &[usize],
    window: Option<usize>,
) -> Result<Matrix> {
    if kind == LayerKind::Local && window.is_none() {
        return Err(Error::Config("local mask requires a window".into()));
    }
    if !q_positions.windows(2).all(|w| w[0] <= w[1])
        || !k_positions.windows(2).all(|w| w[0] <= w[1])
    {
        return Err(Error::Config("mask positions must be non-decreasing".into()));
    }
    Ok(Matrix::from_fn(q_positions.len(), k_positions.len(), |i, j| {
        if allowed(kind, q_positions[i], k_positions[j], window) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }))
}

/// RMS-normalize every head vector of `q` and `k` independently.
///
/// `q_gain` and `k_gain` have length `head_dim` and are shared by all heads.
pub fn qk_norm(q: &Matrix, k: &Matrix, q_gain: &[f64], k_gain: &[f64]) -> Result<(Matrix, Matrix)> {
    if q_gain.len() != k_gain.len() {
        return shape_err("qk_norm: q and k gains differ in length");
    }
    Ok((
        rms_norm_rows(q, q_gain, RMS_EPS)?,
        rms_norm_rows(k, k_gain, RMS_EPS)?,
    ))
}

/// Grouped-query attention over already normalized and rotated `q`, `k`.
///
/// Shapes: `q` is `len_q × (num_query_heads·head_dim)`, `k` and `v` are
/// `len_k × (num_kv_heads·head_dim)` and `mask` is `len_q × len_k`.
pub fn gqa_attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    mask: &Matrix,
) -> Result<Matrix> {
    let hd = cfg.head_dim;
    if q.cols() != cfg.q_width() || k.cols() != cfg.kv_width() || v.cols() != cfg.kv_width() {
        return shape_err(format!(
            "gqa_attend: q {:?}, k {:?}, v {:?} for {}q/{}kv heads of {hd}",
            q.shape(),
            k.shape(),
            v.shape(),
            cfg.num_query_heads,
            cfg.num_kv_heads
        ));
    }
    if k.rows() != v.rows() || mask.shape() != (q.rows(), k.rows()) {
        return shape_err(format!(
            "gqa_attend: mask {:?} for {} queries and {} keys",
            mask.shape(),
            q.rows(),
            k.rows()
        ));
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let group = cfg.group_size();
    let mut out = Matrix::zeros(q.rows(), cfg.q_width());
    let mut logits = vec![0.0; k.rows()];
    for h in 0..cfg.num_query_heads {
        let kv = h / group;
        let (qo, ko) = (h * hd, kv * hd);
        for i in 0..q.rows() {
            let qi = &q.row(i)[qo..qo + hd];
            for (j, l) in logits.iter_mut().enumerate() {
                let m = mask.get(i, j);
                *l = if m == f64::NEG_INFINITY {
                    m
                } else {
                    dot(qi, &k.row(j)[ko..ko + hd]) * scale + m
                };
            }
            softmax_in_place(&mut logits).map_err(|_| Error::FullyMasked { row: i })?;
            let dst = &mut out.row_mut(i)[qo..qo + hd];
            for (j, &p) in logits.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (d, &vv) in dst.iter_mut().zip(&v.row(j)[ko..ko + hd]) {
                    *d += p * vv;
                }
            }
        }
    }
    Ok(out)
}
