//! Toy training: the differentiable forward pass, Adam, next-token training
//! and sampled-logit distillation from a teacher model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::build_mask;
use crate::autograd::{Tape, Var};
use crate::distill::{renormalize, sample_support_with};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, Matrix};

use super::config::ModelConfig;
use super::forward::Model;
use super::tokenizer::BOS_ID;
use super::weights::{ModelParams, Weights};

/// Builds the logits of `tokens` (positions `0..len`) on `tape`.
pub fn tape_logits(
    tape: &mut Tape,
    p: &ModelParams<Var>,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<Var> {
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = tape.gather(p.embed, &ids)?;
    for (kind, lw) in cfg.layer_kinds().into_iter().zip(&p.layers) {
        let a = cfg.attention(kind);
        let hd = a.head_dim;
        let h = tape.rms_norm(x, lw.input_norm)?;
        let q = tape.matmul(h, lw.wq)?;
        let k = tape.matmul(h, lw.wk)?;
        let v = tape.matmul(h, lw.wv)?;
        let q = tape.rms_norm(q, lw.q_norm)?;
        let k = tape.rms_norm(k, lw.k_norm)?;
        let q = tape.rope(q, &positions, a.rope)?;
        let k = tape.rope(k, &positions, a.rope)?;
        let mask = build_mask(kind, &positions, &positions, a.window)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(a.num_query_heads);
        for head in 0..a.num_query_heads {
            let kv = head / a.group_size();
            let qh = tape.col_slice(q, head * hd, hd)?;
            let kh = tape.col_slice(k, kv * hd, hd)?;
            let vh = tape.col_slice(v, kv * hd, hd)?;
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let probs = tape.masked_softmax(logits, mask.clone())?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let att = tape.concat_cols(&heads)?;
        let o = tape.matmul(att, lw.wo)?;
        let o = tape.rms_norm(o, lw.post_attn_norm)?;
        x = tape.add(x, o)?;
        let h = tape.rms_norm(x, lw.pre_ffn_norm)?;
        let gate = tape.matmul(h, lw.w_gate)?;
        let gate = tape.gelu(gate);
        let up = tape.matmul(h, lw.w_up)?;
        let gu = tape.mul(gate, up)?;
        let f = tape.matmul(gu, lw.w_down)?;
        let f = tape.rms_norm(f, lw.post_ffn_norm)?;
        x = tape.add(x, f)?;
    }
    let h = tape.rms_norm(x, p.final_norm)?;
    tape.matmul_t(h, p.lm_head.unwrap_or(p.embed))
}

/// Dense one-hot targets for next-token prediction.
pub fn one_hot(targets: &[u32], vocab: usize) -> Matrix {
    let mut m = Matrix::zeros(targets.len(), vocab);
    for (r, &t) in targets.iter().enumerate() {
        m.set(r, t as usize, 1.0);
    }
    m
}

/// Mean cross-entropy of `model` on (`inputs`, `targets`) and its gradient.
///
/// `targets` holds one distribution per input row.
pub fn loss_and_grads(model: &Model, inputs: &[u32], targets: Matrix) -> Result<(f64, Weights)> {
    let mut tape = Tape::new();
    let vars = model.weights.map(|m| tape.leaf(m.clone()));
    let logits = tape_logits(&mut tape, &vars, &model.cfg, inputs)?;
    let loss = tape.cross_entropy(logits, targets)?;
    let grads = tape.backward(loss);
    let g = vars.map(|&v| grads.get(&tape, v));
    Ok((tape.value(loss).get(0, 0), g))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Weights,
    v: Weights,
    t: i32,
}

impl Adam {
    pub fn new(like: &Weights, lr: f64) -> Self {
        let zeros = like.map(|m| Matrix::zeros(m.rows(), m.cols()));
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((w, g), (m, v)) in weights.iter_mut().zip(grads.iter()).zip(moments) {
            let w = w.data_mut().iter_mut();
            let m = m.data_mut().iter_mut();
            let v = v.data_mut().iter_mut();
            for (((x, &g), m), v) in w.zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    /// Tokens per training window (inputs; targets are shifted by one).
    pub seq_len: usize,
    pub seed: u64,
    /// Decay the learning rate linearly to zero over `steps`.
    pub linear_decay: bool,
}

impl TrainOptions {
    fn lr_at(&self, step: usize) -> f64 {
        if self.linear_decay {
            self.lr * (1.0 - step as f64 / self.steps as f64)
        } else {
            self.lr
        }
    }
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-2,
            seq_len: 256,
            seed: 0,
            linear_decay: false,
        }
    }
}

/// `[BOS] + doc` for every doc.
pub fn with_bos(docs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    docs.iter()
        .map(|d| std::iter::once(BOS_ID).chain(d.iter().copied()).collect())
        .collect()
}

/// Picks a training window: `(inputs, next-token targets)`.
fn pick_window<'a>(seqs: &'a [Vec<u32>], seq_len: usize, rng: &mut impl Rng) -> (&'a [u32], &'a [u32]) {
    let s = &seqs[rng.gen_range(0..seqs.len())];
    let span = (seq_len + 1).min(s.len());
    let start = rng.gen_range(0..=s.len() - span);
    (&s[start..start + span - 1], &s[start + 1..start + span])
}

fn check_docs(seqs: &[Vec<u32>]) -> Result<()> {
    if seqs.is_empty() || seqs.iter().any(|s| s.len() < 2) {
        return Err(Error::Shape("training needs non-empty documents".into()));
    }
    Ok(())
}

/// Next-token cross-entropy training on `[BOS] + doc` windows.
/// Calls `on_step(step, loss)` after every update and returns all losses.
pub fn train_lm(
    model: &mut Model,
    docs: &[Vec<u32>],
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, f64, &Model),
) -> Result<Vec<f64>> {
    let seqs = with_bos(docs);
    check_docs(&seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&model.weights, opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (inputs, targets) = pick_window(&seqs, opts.seq_len, &mut rng);
        let (loss, grads) = loss_and_grads(model, inputs, one_hot(targets, model.cfg.vocab_size))?;
        adam.lr = opts.lr_at(step);
        adam.step(&mut model.weights, &grads);
        losses.push(loss);
        on_step(step, loss, model);
    }
    Ok(losses)
}

/// Distills `teacher` into `student`: per position, `k` vocabulary ids are
/// sampled from the teacher distribution, the rest zeroed, the kept mass
/// renormalized, and the student trained by cross-entropy on that target.
pub fn distill_lm(
    student: &mut Model,
    teacher: &Model,
    docs: &[Vec<u32>],
    k: usize,
    opts: &TrainOptions,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if student.cfg.vocab_size != teacher.cfg.vocab_size {
        return Err(Error::Config("student and teacher vocabularies differ".into()));
    }
    let seqs = with_bos(docs);
    check_docs(&seqs)?;
    let vocab = student.cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(&student.weights, opts.lr);
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (inputs, _) = pick_window(&seqs, opts.seq_len, &mut rng);
        let t_logits = teacher.forward(inputs, None)?;
        let mut targets = Matrix::zeros(inputs.len(), vocab);
        for r in 0..inputs.len() {
            let probs: Vec<f64> = log_softmax(t_logits.row(r)).into_iter().map(f64::exp).collect();
            let support = sample_support_with(&probs, k, &mut rng)?;
            let target = renormalize(&probs, &support)?;
            for (&id, &p) in target.support.iter().zip(&target.probs) {
                targets.set(r, id, p);
            }
        }
        let (loss, grads) = loss_and_grads(student, inputs, targets)?;
        adam.lr = opts.lr_at(step);
        adam.step(&mut student.weights, &grads);
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}

/// Mean next-token cross-entropy (nats) over every position of `[BOS] + doc`,
/// evaluated in windows of `seq_len`.
pub fn eval_ce(model: &Model, docs: &[Vec<u32>], seq_len: usize) -> Result<f64> {
    let seqs = with_bos(docs);
    check_docs(&seqs)?;
    let (mut total, mut n) = (0.0, 0usize);
    for s in &seqs {
        let mut start = 0;
        while start + 1 < s.len() {
            let end = (start + seq_len + 1).min(s.len());
            let logits = model.forward(&s[start..end - 1], None)?;
            for (r, &t) in s[start + 1..end].iter().enumerate() {
                total -= log_softmax(logits.row(r))[t as usize];
                n += 1;
            }
            start = end - 1;
        }
    }
    Ok(total / n as f64)
}
