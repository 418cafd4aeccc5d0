//! Analytical weight and KV-cache memory planner.
//!
//! Sizes are in bytes; `GB` means 10⁹ bytes. Vision-encoder parameters are
//! not counted.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::layer_kv_bytes;
use crate::model::ModelConfig;

pub const GB: f64 = 1e9;
pub const DEFAULT_CONTEXT: usize = 32_768;
pub const DEFAULT_KV_BITS: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Bf16,
    Int4,
    Int4Block32,
    Sfp8,
}

impl SchemeName {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::Bf16 => "bf16",
            SchemeName::Int4 => "int4",
            SchemeName::Int4Block32 => "int4_block32",
            SchemeName::Sfp8 => "sfp8",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionScheme {
    pub name: SchemeName,
    pub bits_per_weight: u32,
    /// Weights sharing one scale; `None` for per-channel or unscaled formats.
    pub block_size: Option<u32>,
    /// Scale metadata bits per block.
    pub scale_bits: u32,
    pub embedding_bits: u32,
}

impl PrecisionScheme {
    pub const BF16: PrecisionScheme = PrecisionScheme {
        name: SchemeName::Bf16,
        bits_per_weight: 16,
        block_size: None,
        scale_bits: 0,
        embedding_bits: 16,
    };
    pub const INT4: PrecisionScheme = PrecisionScheme {
        name: SchemeName::Int4,
        bits_per_weight: 4,
        block_size: None,
        scale_bits: 0,
        embedding_bits: 8,
    };
    pub const INT4_BLOCK32: PrecisionScheme = PrecisionScheme {
        name: SchemeName::Int4Block32,
        bits_per_weight: 4,
        block_size: Some(32),
        scale_bits: 16,
        embedding_bits: 8,
    };
    pub const SFP8: PrecisionScheme = PrecisionScheme {
        name: SchemeName::Sfp8,
        bits_per_weight: 8,
        block_size: None,
        scale_bits: 0,
        embedding_bits: 8,
    };

    /// Column order of the report table.
    pub const ALL: [PrecisionScheme; 4] = [Self::BF16, Self::INT4, Self::INT4_BLOCK32, Self::SFP8];

    pub fn by_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name.as_str() == name)
            .ok_or_else(|| Error::Lookup { kind: "scheme", name: name.to_string() })
    }

    pub fn with_embedding_bits(mut self, bits: u32) -> Self {
        self.embedding_bits = bits;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if ![4, 8, 16].contains(&self.bits_per_weight) {
            return Err(Error::Config(format!("{} bits per weight", self.bits_per_weight)));
        }
        if self.block_size == Some(0) {
            return Err(Error::Config("block size must be positive".into()));
        }
        Ok(())
    }
}

/// Weight bytes, rounded up to whole bytes.
pub fn weight_bytes(embedding_params: u64, non_embedding_params: u64, scheme: &PrecisionScheme) -> u64 {
    let mut bits = embedding_params as u128 * scheme.embedding_bits as u128
        + non_embedding_params as u128 * scheme.bits_per_weight as u128;
    if let Some(b) = scheme.block_size {
        bits += (non_embedding_params as u128).div_ceil(b as u128) * scheme.scale_bits as u128;
    }
    bits.div_ceil(8) as u64
}

/// KV bytes of `cfg` at `context` tokens, with each layer's own head layout.
pub fn model_kv_bytes(cfg: &ModelConfig, context: usize, kv_bits: u32) -> u64 {
    cfg.layer_kinds()
        .into_iter()
        .map(|k| {
            let a = cfg.attention(k);
            layer_kv_bytes(k, context, cfg.window, a.num_kv_heads, a.head_dim, kv_bits)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: SchemeName,
    pub weights_bytes: u64,
    pub total_bytes: u64,
    pub weights_gb: f64,
    pub total_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub model: String,
    pub context: usize,
    pub kv_bits: u32,
    pub kv_bytes: u64,
    pub kv_gb: f64,
    pub rows: Vec<SchemeRow>,
}

impl MemoryReport {
    pub fn row(&self, scheme: SchemeName) -> Option<&SchemeRow> {
        self.rows.iter().find(|r| r.scheme == scheme)
    }
}

pub fn report_for(cfg: &ModelConfig, context: usize, kv_bits: u32, schemes: &[PrecisionScheme]) -> Result<MemoryReport> {
    let published = cfg
        .published
        .ok_or_else(|| Error::Config(format!("{} has no published parameter counts", cfg.name)))?;
    let kv = model_kv_bytes(cfg, context, kv_bits);
    let rows = schemes
        .iter()
        .map(|s| {
            s.validate()?;
            let w = weight_bytes(published.embedding, published.non_embedding, s);
            Ok(SchemeRow {
                scheme: s.name,
                weights_bytes: w,
                total_bytes: w + kv,
                weights_gb: w as f64 / GB,
                total_gb: (w + kv) as f64 / GB,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MemoryReport {
        model: cfg.name.clone(),
        context,
        kv_bits,
        kv_bytes: kv,
        kv_gb: kv as f64 / GB,
        rows,
    })
}

/// Report for a named preset over all four schemes.
pub fn report(preset: &str, context: usize, kv_bits: u32) -> Result<MemoryReport> {
    report_for(&ModelConfig::preset(preset)?, context, kv_bits, &PrecisionScheme::ALL)
}

/// Raw and `+KV` rows per model, one column per scheme, values in GB.
pub fn render_table(reports: &[MemoryReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let _ = write!(out, "{:<14}", "model");
    for r in &first.rows {
        let _ = write!(out, "{:>14}", r.scheme.as_str());
    }
    out.push('\n');
    for rep in reports {
        let _ = write!(out, "{:<14}", rep.model);
        for r in &rep.rows {
            let _ = write!(out, "{:>11.1} GB", r.weights_gb);
        }
        out.push('\n');
        let _ = write!(out, "{:<14}", " +KV");
        for r in &rep.rows {
            let _ = write!(out, "{:>11.1} GB", r.total_gb);
        }
        out.push('\n');
    }
    out
}
