//! Weight tensors, initialization, parameter counting and the raw weight
//! file format (little-endian f64 blob plus a text manifest).

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LayerKind;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::config::ModelConfig;

/// Per-layer parameters. Norm gains are stored as `1 × n` row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub input_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub q_norm: T,
    pub k_norm: T,
    pub wo: T,
    pub post_attn_norm: T,
    pub pre_ffn_norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
    pub post_ffn_norm: T,
}

const LAYER_FIELDS: [&str; 13] = [
    "input_norm",
    "wq",
    "wk",
    "wv",
    "q_norm",
    "k_norm",
    "wo",
    "post_attn_norm",
    "pre_ffn_norm",
    "w_gate",
    "w_up",
    "w_down",
    "post_ffn_norm",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&T; 13] {
        [
            &self.input_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.q_norm,
            &self.k_norm,
            &self.wo,
            &self.post_attn_norm,
            &self.pre_ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
            &self.post_ffn_norm,
        ]
    }

    fn from_fn(mut f: impl FnMut(&'static str) -> T) -> Self {
        Self {
            input_norm: f("input_norm"),
            wq: f("wq"),
            wk: f("wk"),
            wv: f("wv"),
            q_norm: f("q_norm"),
            k_norm: f("k_norm"),
            wo: f("wo"),
            post_attn_norm: f("post_attn_norm"),
            pre_ffn_norm: f("pre_ffn_norm"),
            w_gate: f("w_gate"),
            w_up: f("w_up"),
            w_down: f("w_down"),
            post_ffn_norm: f("post_ffn_norm"),
        }
    }
}

/// Every tensor of a model. `Weights` is `ModelParams<Matrix>`; the training
/// code reuses the same layout for tape variables and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: T,
    /// Output projection, only when embeddings are untied.
    pub lm_head: Option<T>,
}

pub type Weights = ModelParams<Matrix>;

impl<T> ModelParams<T> {
    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.fields()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.named().into_iter().map(|(_, t)| t)
    }

    /// Builds a structure of the same layout, visiting tensors in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        let embed = f(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let fields = l.fields();
                let mut i = 0;
                LayerParams::from_fn(|_| {
                    i += 1;
                    f(fields[i - 1])
                })
            })
            .collect();
        ModelParams {
            embed,
            layers,
            final_norm: f(&self.final_norm),
            lm_head: self.lm_head.as_ref().map(f),
        }
    }

    /// Mutable tensors in canonical order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        let mut out = vec![&mut self.embed];
        for a in self.layers.iter_mut() {
            out.extend([
                &mut a.input_norm,
                &mut a.wq,
                &mut a.wk,
                &mut a.wv,
                &mut a.q_norm,
                &mut a.k_norm,
                &mut a.wo,
                &mut a.post_attn_norm,
                &mut a.pre_ffn_norm,
                &mut a.w_gate,
                &mut a.w_up,
                &mut a.w_down,
                &mut a.post_ffn_norm,
            ]);
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out.into_iter()
    }
}

/// Shapes of every tensor for `cfg`, in canonical order.
pub fn tensor_shapes(cfg: &ModelConfig) -> ModelParams<(usize, usize)> {
    let d = cfg.d_model;
    let layers = cfg
        .layer_kinds()
        .into_iter()
        .map(|kind| {
            let a = cfg.attention(kind);
            LayerParams::from_fn(|name| match name {
                "input_norm" | "post_attn_norm" | "pre_ffn_norm" | "post_ffn_norm" => (1, d),
                "wq" => (d, a.q_width()),
                "wk" | "wv" => (d, a.kv_width()),
                "q_norm" | "k_norm" => (1, a.head_dim),
                "wo" => (a.q_width(), d),
                "w_gate" | "w_up" => (d, cfg.hidden_dim),
                "w_down" => (cfg.hidden_dim, d),
                other => unreachable!("unknown layer tensor {other}"),
            })
        })
        .collect();
    ModelParams {
        embed: (cfg.vocab_size, d),
        layers,
        final_norm: (1, d),
        lm_head: (!cfg.tie_embeddings).then_some((cfg.vocab_size, d)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Embedding table, plus the output head when untied.
    pub embedding: u64,
    pub non_embedding: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.embedding + self.non_embedding
    }
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let d = cfg.d_model as u64;
    let vocab = cfg.vocab_size as u64;
    let hidden = cfg.hidden_dim as u64;
    let per_layer = |kind: LayerKind| {
        let a = cfg.attention(kind);
        let (q, kv, hd) = (a.q_width() as u64, a.kv_width() as u64, a.head_dim as u64);
        let attn = d * q + 2 * d * kv + q * d + 2 * hd;
        let mlp = 3 * d * hidden;
        attn + mlp + 4 * d
    };
    let non_embedding = cfg.layer_kinds().into_iter().map(per_layer).sum::<u64>() + d;
    let heads = if cfg.tie_embeddings { 1 } else { 2 };
    ParamCount {
        embedding: heads * vocab * d,
        non_embedding,
    }
}

impl Weights {
    /// Random init: uniform with variance `1/fan_in` for projections,
    /// `1/d_model` for the embedding, unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = tensor_shapes(cfg);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        shapes.map(|&(r, c)| {
            let name = &names[i];
            i += 1;
            if r == 1 && name.ends_with("norm") {
                return Matrix::filled(1, c, 1.0);
            }
            let fan_in = if name == "embed" || name == "lm_head" { c } else { r };
            let a = (3.0 / fan_in as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.gen_range(-a..a))
        })
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        tensor_shapes(cfg).map(|&(r, c)| Matrix::zeros(r, c))
    }

    pub fn num_params(&self) -> usize {
        self.iter().map(|m| m.data().len()).sum()
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = tensor_shapes(cfg);
        let want = expected.named();
        let got = self.named();
        if want.len() != got.len() {
            return Err(Error::Shape(format!(
                "{} tensors, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, shape), (_, m)) in want.iter().zip(&got) {
            if **shape != m.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?}, config implies {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Writes `path` (raw little-endian f64) and `path.manifest`
    /// (`name rows cols byte_offset` per line).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut manifest = String::from("# name rows cols byte_offset (f64, little-endian)\n");
        let mut offset = 0usize;
        for (name, m) in self.named() {
            let _ = writeln!(manifest, "{name} {} {} {offset}", m.rows(), m.cols());
            for x in m.data() {
                blob.write_all(&x.to_le_bytes())?;
            }
            offset += m.data().len() * 8;
        }
        blob.flush()?;
        std::fs::write(manifest_path(path), manifest)?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mut blob = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut blob)?;
        let manifest = std::fs::read_to_string(manifest_path(path))?;
        let mut entries = std::collections::HashMap::new();
        for (i, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = || Error::Parse {
                line: i + 1,
                msg: format!("bad manifest line {line:?}"),
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, rows, cols, off] = parts[..] else {
                return Err(parse_err());
            };
            let nums: Vec<usize> = [rows, cols, off]
                .iter()
                .map(|s| s.parse().map_err(|_| parse_err()))
                .collect::<Result<_>>()?;
            entries.insert(name.to_string(), (nums[0], nums[1], nums[2]));
        }
        let shapes = tensor_shapes(cfg);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        let mut failure = None;
        let weights = shapes.map(|&(r, c)| {
            let name = &names[i];
            i += 1;
            match read_tensor(&blob, name, entries.get(name), (r, c)) {
                Ok(m) => m,
                Err(e) => {
                    failure.get_or_insert(e);
                    Matrix::zeros(0, 0)
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(weights),
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    with_suffix(path, ".manifest")
}

/// Model config stored next to a weights file.
pub fn config_path(path: &Path) -> PathBuf {
    with_suffix(path, ".cfg")
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_tensor(
    blob: &[u8],
    name: &str,
    entry: Option<&(usize, usize, usize)>,
    shape: (usize, usize),
) -> Result<Matrix> {
    let &(r, c, off) = entry.ok_or_else(|| Error::Shape(format!("manifest lacks {name}")))?;
    if (r, c) != shape {
        return Err(Error::Shape(format!(
            "{name}: manifest {:?}, config implies {:?}",
            (r, c),
            shape
        )));
    }
    let end = off + r * c * 8;
    let bytes = blob
        .get(off..end)
        .ok_or_else(|| Error::Shape(format!("{name}: bytes {off}..{end} past end of file")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Matrix::new(r, c, data)
}
