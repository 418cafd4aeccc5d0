//! Model configuration, the flat `key = value` config format and the
//! shipped presets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, LayerKind};
use crate::error::{Error, Result};
use crate::tensor::RopeParams;

use super::tokenizer::VOCAB_SIZE;

/// Environment variable pointing at a directory of `<name>.cfg` presets.
pub const PRESETS_ENV: &str = "GEMMA_MINI_PRESETS";

pub const PRESET_NAMES: [&str; 4] = ["gemma3-1b", "gemma3-4b", "gemma3-12b", "gemma3-27b"];

const BUILTIN_PRESETS: [(&str, &str); 4] = [
    ("gemma3-1b", include_str!("../../presets/gemma3-1b.cfg")),
    ("gemma3-4b", include_str!("../../presets/gemma3-4b.cfg")),
    ("gemma3-12b", include_str!("../../presets/gemma3-12b.cfg")),
    ("gemma3-27b", include_str!("../../presets/gemma3-27b.cfg")),
];

/// Reported parameter counts carried as metadata by the presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedParams {
    pub embedding: u64,
    pub non_embedding: u64,
    pub vision: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub local_per_global: usize,
    pub window: usize,
    pub max_context: usize,
    pub attn_local: AttentionConfig,
    pub attn_global: AttentionConfig,
    pub tie_embeddings: bool,
    /// Depth/width fields are stand-ins rather than published values.
    pub placeholder_dims: bool,
    pub published: Option<PublishedParams>,
}

/// `ratio` local layers then one global layer, repeated and truncated to `n_layers`.
pub fn layer_kinds(n_layers: usize, local_per_global: usize) -> Vec<LayerKind> {
    (0..n_layers)
        .map(|i| {
            if i % (local_per_global + 1) == local_per_global {
                LayerKind::Global
            } else {
                LayerKind::Local
            }
        })
        .collect()
}

/// `LLLLLG...` rendering of a layer pattern.
pub fn render_pattern(kinds: &[LayerKind]) -> String {
    kinds.iter().map(|k| k.symbol()).collect()
}

impl ModelConfig {
    /// A small byte-level config for tests and the toy training loops.
    pub fn tiny(n_layers: usize, local_per_global: usize, window: usize) -> Self {
        let hd = 8;
        let rope = |base| RopeParams {
            base_freq: base,
            scale: 1.0,
            head_dim: hd,
        };
        Self {
            name: "tiny".into(),
            n_layers,
            d_model: 32,
            hidden_dim: 64,
            vocab_size: VOCAB_SIZE,
            local_per_global,
            window,
            max_context: 512,
            attn_local: AttentionConfig {
                num_query_heads: 4,
                num_kv_heads: 2,
                head_dim: hd,
                kind: LayerKind::Local,
                window: Some(window),
                rope: rope(RopeParams::LOCAL_BASE),
            },
            attn_global: AttentionConfig {
                num_query_heads: 4,
                num_kv_heads: 2,
                head_dim: hd,
                kind: LayerKind::Global,
                window: None,
                rope: rope(RopeParams::GLOBAL_BASE),
            },
            tie_embeddings: true,
            placeholder_dims: false,
            published: None,
        }
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        layer_kinds(self.n_layers, self.local_per_global)
    }

    pub fn attention(&self, kind: LayerKind) -> &AttentionConfig {
        match kind {
            LayerKind::Local => &self.attn_local,
            LayerKind::Global => &self.attn_global,
        }
    }

    /// Sets the window on both the model and its local attention config.
    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self.attn_local.window = Some(window);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 {
            return bad("n_layers must be >= 1".into());
        }
        if self.d_model == 0 || self.hidden_dim == 0 || self.vocab_size == 0 {
            return bad("d_model, hidden_dim and vocab_size must be positive".into());
        }
        if self.window == 0 || self.window > self.max_context {
            return bad(format!(
                "window {} must be in 1..={}",
                self.window, self.max_context
            ));
        }
        if self.attn_local.kind != LayerKind::Local || self.attn_global.kind != LayerKind::Global {
            return bad("attn_local/attn_global carry the wrong kinds".into());
        }
        if self.attn_local.window != Some(self.window) {
            return bad("attn_local.window must equal window".into());
        }
        self.attn_local.validate()?;
        self.attn_global.validate()
    }

    /// Parse the flat `key = value` format. Unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let mut p = Fields { kv };
        let attn = |p: &mut Fields, prefix: &str, kind: LayerKind, window: Option<usize>| -> Result<AttentionConfig> {
            let head_dim = p.num(&format!("{prefix}.head_dim"))?;
            Ok(AttentionConfig {
                num_query_heads: p.num(&format!("{prefix}.num_query_heads"))?,
                num_kv_heads: p.num(&format!("{prefix}.num_kv_heads"))?,
                head_dim,
                kind,
                window,
                rope: RopeParams {
                    base_freq: p.num(&format!("{prefix}.rope.base_freq"))?,
                    scale: p.opt(&format!("{prefix}.rope.scale"))?.unwrap_or(1.0),
                    head_dim,
                },
            })
        };
        let window = p.num("window")?;
        let published = match p.opt::<u64>("published.embedding_params")? {
            Some(embedding) => Some(PublishedParams {
                embedding,
                non_embedding: p.num("published.non_embedding_params")?,
                vision: p.opt("published.vision_params")?.unwrap_or(0),
            }),
            None => None,
        };
        let cfg = Self {
            name: p.opt::<String>("name")?.unwrap_or_else(|| "custom".into()),
            n_layers: p.num("n_layers")?,
            d_model: p.num("d_model")?,
            hidden_dim: p.num("hidden_dim")?,
            vocab_size: p.opt("vocab_size")?.unwrap_or(VOCAB_SIZE),
            local_per_global: p.opt("local_per_global")?.unwrap_or(5),
            window,
            max_context: p.num("max_context")?,
            attn_local: attn(&mut p, "attn_local", LayerKind::Local, Some(window))?,
            attn_global: attn(&mut p, "attn_global", LayerKind::Global, None)?,
            tie_embeddings: p.opt("tie_embeddings")?.unwrap_or(true),
            placeholder_dims: p.opt("placeholder_dims")?.unwrap_or(false),
            published,
        };
        if let Some((key, (line, _))) = p.kv.into_iter().next() {
            return Err(Error::Parse {
                line,
                msg: format!("unknown key {key:?}"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("name", &self.name);
        put("n_layers", &self.n_layers);
        put("d_model", &self.d_model);
        put("hidden_dim", &self.hidden_dim);
        put("vocab_size", &self.vocab_size);
        put("local_per_global", &self.local_per_global);
        put("window", &self.window);
        put("max_context", &self.max_context);
        put("tie_embeddings", &self.tie_embeddings);
        for (prefix, a) in [("attn_local", &self.attn_local), ("attn_global", &self.attn_global)] {
            put(&format!("{prefix}.num_query_heads"), &a.num_query_heads);
            put(&format!("{prefix}.num_kv_heads"), &a.num_kv_heads);
            put(&format!("{prefix}.head_dim"), &a.head_dim);
            put(&format!("{prefix}.rope.base_freq"), &a.rope.base_freq);
            put(&format!("{prefix}.rope.scale"), &a.rope.scale);
        }
        put("placeholder_dims", &self.placeholder_dims);
        if let Some(p) = &self.published {
            put("published.embedding_params", &p.embedding);
            put("published.non_embedding_params", &p.non_embedding);
            put("published.vision_params", &p.vision);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Look up a preset, preferring `$GEMMA_MINI_PRESETS/<name>.cfg` when set.
    pub fn preset(name: &str) -> Result<Self> {
        if let Some(dir) = std::env::var_os(PRESETS_ENV) {
            let path = Path::new(&dir).join(format!("{name}.cfg"));
            if path.exists() {
                return Self::load(&path);
            }
        }
        BUILTIN_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Lookup {
                kind: "preset",
                name: name.to_string(),
            })
            .and_then(|(_, text)| Self::parse(text))
    }
}

struct Fields {
    kv: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.kv.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Parse {
                line,
                msg: format!("bad value {v:?} for {key}"),
            }),
        }
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.opt(key)?
            .ok_or_else(|| Error::Config(format!("missing key {key}")))
    }
}
