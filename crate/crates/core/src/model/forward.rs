//! Inference forward pass and autoregressive generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_mask, gqa_attend, qk_norm, LayerKind};
use crate::autograd::gelu;
use crate::error::{Error, Result};
use crate::kvcache::{CacheMode, KvCache};
use crate::tensor::{matmul, matmul_transposed, rms_norm_rows, rope_apply, Matrix, RMS_EPS};

use super::config::ModelConfig;
use super::weights::{config_path, LayerParams, Weights};

/// A config with its weights. Immutable once built; share it freely.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub weights: Weights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampler {
    Greedy,
    Temperature { t: f64, seed: u64 },
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub sampler: Sampler,
    pub stop_ids: Vec<u32>,
    pub cache_mode: CacheMode,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 32,
            sampler: Sampler::Greedy,
            stop_ids: Vec::new(),
            cache_mode: CacheMode::Windowed,
        }
    }
}

fn gain(m: &Matrix) -> &[f64] {
    m.data()
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: Weights) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        Ok(Self { cfg, weights })
    }

    /// Randomly initialized model.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let w = Weights::init(&cfg, seed);
        Self::new(cfg, w)
    }

    /// Writes the weights to `path` and the config to [`config_path`].
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.weights.save(path)?;
        std::fs::write(config_path(path), self.cfg.to_text())?;
        Ok(())
    }

    /// Loads weights from `path`; the config comes from `config` or, if
    /// absent, from [`config_path`].
    pub fn load(path: &std::path::Path, config: Option<&std::path::Path>) -> Result<Self> {
        let cfg = ModelConfig::load(&config.map_or_else(|| config_path(path), |c| c.to_path_buf()))?;
        let weights = Weights::load(path, &cfg)?;
        Self::new(cfg, weights)
    }

    pub fn new_cache(&self, mode: CacheMode) -> KvCache {
        let kinds = self.cfg.layer_kinds();
        let widths: Vec<usize> = kinds
            .iter()
            .map(|&k| self.cfg.attention(k).kv_width())
            .collect();
        KvCache::new(&kinds, &widths, self.cfg.window, self.cfg.max_context, mode)
            .expect("validated config yields a valid cache")
    }

    /// Logits (`tokens.len() × vocab`) for `tokens`, continuing from `cache` if given.
    ///
    /// Without a cache the tokens sit at positions `0..len`. With one they
    /// follow `cache.next_pos()` and their keys/values are appended.
    pub fn forward(&self, tokens: &[u32], cache: Option<&mut KvCache>) -> Result<Matrix> {
        let cfg = &self.cfg;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Shape(format!(
                "token {bad} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        let kinds = cfg.layer_kinds();
        let start = cache.as_ref().map_or(0, |c| c.next_pos());
        if let Some(c) = cache.as_ref() {
            let layout_ok = c.num_layers() == kinds.len()
                && c.layers().iter().zip(&kinds).all(|(l, &k)| l.kind() == k)
                && c.max_context() == cfg.max_context;
            if !layout_ok {
                return Err(Error::Config("cache layout does not match model".into()));
            }
        }
        if start + tokens.len() > cfg.max_context {
            return Err(Error::Capacity(format!(
                "{start} cached + {} new tokens exceed max_context {}",
                tokens.len(),
                cfg.max_context
            )));
        }
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let w = &self.weights;
        let mut x = Matrix::from_fn(tokens.len(), cfg.d_model, |r, c| {
            w.embed.get(tokens[r] as usize, c)
        });
        let mut cache = cache;
        for (li, (&kind, lw)) in kinds.iter().zip(&w.layers).enumerate() {
            let layer_cache = cache.as_deref_mut().map(|c| (c, li));
            x = self.block(&x, kind, lw, &positions, layer_cache)?;
        }
        let h = rms_norm_rows(&x, gain(&w.final_norm), RMS_EPS)?;
        matmul_transposed(&h, w.lm_head.as_ref().unwrap_or(&w.embed))
    }

    fn block(
        &self,
        x: &Matrix,
        kind: LayerKind,
        lw: &LayerParams<Matrix>,
        positions: &[usize],
        cache: Option<(&mut KvCache, usize)>,
    ) -> Result<Matrix> {
        let acfg = self.cfg.attention(kind);
        let h = rms_norm_rows(x, gain(&lw.input_norm), RMS_EPS)?;
        let q = matmul(&h, &lw.wq)?;
        let k = matmul(&h, &lw.wk)?;
        let v = matmul(&h, &lw.wv)?;
        let (q, k) = qk_norm(&q, &k, gain(&lw.q_norm), gain(&lw.k_norm))?;
        let q = rope_apply(&q, positions, &acfg.rope)?;
        let k = rope_apply(&k, positions, &acfg.rope)?;

        let (keys, values, k_pos) = match &cache {
            Some((c, li)) if !c.layer(*li).is_empty() => {
                let lc = c.layer(*li);
                let mut kp = lc.positions();
                kp.extend_from_slice(positions);
                (
                    Matrix::concat_rows(&[lc.keys(), k.clone()])?,
                    Matrix::concat_rows(&[lc.values(), v.clone()])?,
                    kp,
                )
            }
            _ => (k.clone(), v.clone(), positions.to_vec()),
        };
        let mask = build_mask(kind, positions, &k_pos, acfg.window)?;
        let att = gqa_attend(&q, &keys, &values, acfg, &mask)?;
        if let Some((c, li)) = cache {
            for (r, &p) in positions.iter().enumerate() {
                c.append(li, k.row(r), v.row(r), p)?;
            }
        }

        let o = matmul(&att, &lw.wo)?;
        let x = x.add(&rms_norm_rows(&o, gain(&lw.post_attn_norm), RMS_EPS)?)?;
        let h = rms_norm_rows(&x, gain(&lw.pre_ffn_norm), RMS_EPS)?;
        let gate = matmul(&h, &lw.w_gate)?.map(gelu);
        let up = matmul(&h, &lw.w_up)?;
        let f = matmul(&gate.zip_with(&up, |a, b| a * b)?, &lw.w_down)?;
        x.add(&rms_norm_rows(&f, gain(&lw.post_ffn_norm), RMS_EPS)?)
    }

    /// Autoregressive decoding. Returns the prompt followed by the generated
    /// tokens; a generated stop id is included and ends decoding.
    pub fn generate(&self, prompt: &[u32], opts: &GenerateOptions) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Shape("generate needs a non-empty prompt".into()));
        }
        let mut out = prompt.to_vec();
        if opts.max_new == 0 {
            return Ok(out);
        }
        let mut rng = match opts.sampler {
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Sampler::Greedy => None,
        };
        let mut cache = self.new_cache(opts.cache_mode);
        let mut logits = self.forward(prompt, Some(&mut cache))?;
        for step in 0..opts.max_new {
            let last = logits.row(logits.rows() - 1);
            let next = match (opts.sampler, rng.as_mut()) {
                (Sampler::Temperature { t, .. }, Some(rng)) if t > 0.0 => sample(last, t, rng),
                _ => argmax(last),
            };
            out.push(next);
            if opts.stop_ids.contains(&next) || step + 1 == opts.max_new {
                break;
            }
            logits = self.forward(&[next], Some(&mut cache))?;
        }
        Ok(out)
    }
}

/// Index of the largest logit; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

fn sample(logits: &[f64], t: f64, rng: &mut impl Rng) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    let probs: Vec<f64> = crate::tensor::log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let mut u: f64 = rng.gen();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i as u32;
        }
        u -= p;
    }
    argmax(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tokenizer::EOS_ID;

    fn tiny(n: usize, ratio: usize, window: usize, seed: u64) -> Model {
        Model::init(ModelConfig::tiny(n, ratio, window), seed).unwrap()
    }

    #[test]
    fn cached_incremental_matches_full() {
        let m = tiny(3, 1, 2, 1);
        let toks = [256, 72, 105, 33];
        let full = m.forward(&toks, None).unwrap();
        let mut cache = m.new_cache(CacheMode::Windowed);
        m.forward(&toks[..3], Some(&mut cache)).unwrap();
        let last = m.forward(&toks[3..], Some(&mut cache)).unwrap();
        let diff = last
            .row(0)
            .iter()
            .zip(full.row(3))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);
        assert!(cache.check_invariants());
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let cfg = ModelConfig::tiny(2, 1, 4);
        let m = Model::new(cfg.clone(), Weights::zeros(&cfg)).unwrap();
        let l = m.forward(&[1, 2, 3], None).unwrap();
        assert!(l.data().iter().all(|&x| x == l.get(0, 0)));
    }

    #[test]
    fn local_and_global_agree_when_window_covers() {
        let mut cfg = ModelConfig::tiny(1, 5, 8);
        let w = Weights::init(&cfg, 4);
        let local = Model::new(cfg.clone(), w.clone()).unwrap();
        cfg.local_per_global = 0;
        cfg.attn_global.rope = cfg.attn_local.rope;
        let global = Model::new(cfg, w).unwrap();
        let toks = [5, 6, 7, 8, 9, 10];
        let a = local.forward(&toks, None).unwrap();
        let b = global.forward(&toks, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn capacity_and_vocab_errors() {
        let mut cfg = ModelConfig::tiny(2, 1, 4);
        cfg.max_context = 8;
        let m = Model::init(cfg, 0).unwrap();
        assert!(matches!(m.forward(&[1; 9], None), Err(Error::Capacity(_))));
        assert!(matches!(m.forward(&[999], None), Err(Error::Shape(_))));
        let opts = GenerateOptions { max_new: 10, ..Default::default() };
        assert!(matches!(m.generate(&[1, 2], &opts), Err(Error::Capacity(_))));
    }

    #[test]
    fn generate_basics() {
        let m = tiny(2, 1, 4, 7);
        let prompt = [256, 104, 105];
        let zero = GenerateOptions { max_new: 0, ..Default::default() };
        assert_eq!(m.generate(&prompt, &zero).unwrap(), prompt);
        let opts = GenerateOptions { max_new: 20, ..Default::default() };
        let a = m.generate(&prompt, &opts).unwrap();
        assert_eq!(a, m.generate(&prompt, &opts).unwrap());
        assert_eq!(a.len(), 23);
        let full = GenerateOptions { cache_mode: CacheMode::Full, ..opts.clone() };
        assert_eq!(a, m.generate(&prompt, &full).unwrap());

        let sampled = GenerateOptions {
            sampler: Sampler::Temperature { t: 1.0, seed: 3 },
            ..opts.clone()
        };
        assert_eq!(m.generate(&prompt, &sampled).unwrap(), m.generate(&prompt, &sampled).unwrap());

        let first = a[3];
        let stop = GenerateOptions { stop_ids: vec![first, EOS_ID], ..opts };
        assert_eq!(m.generate(&prompt, &stop).unwrap(), [&prompt[..], &[first]].concat());
        assert!(m.generate(&[], &stop).is_err());
    }
}
