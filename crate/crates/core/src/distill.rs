//! Sampled-logit distillation targets and loss.
//!
//! For every token, `k` vocabulary ids are drawn without replacement with
//! probability proportional to the teacher's mass. The teacher distribution
//! is zeroed outside the drawn set and renormalized; the student is trained
//! by cross-entropy against that sparse target, with its softmax taken over
//! the full vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::log_softmax;

/// Default number of sampled logits per token.
pub const DEFAULT_K: usize = 256;

/// Sparse renormalized teacher distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillTarget {
    /// Distinct vocabulary ids, in draw order.
    pub support: Vec<usize>,
    pub probs: Vec<f64>,
}

impl DistillTarget {
    pub fn to_dense(&self, vocab: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab];
        for (&i, &p) in self.support.iter().zip(&self.probs) {
            out[i] = p;
        }
        out
    }
}

fn check_distribution(probs: &[f64]) -> Result<()> {
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Distribution("negative or non-finite probability".into()));
    }
    let total: f64 = probs.iter().sum();
    if total == 0.0 {
        return Err(Error::Distribution("all-zero teacher distribution".into()));
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Distribution(format!("probabilities sum to {total}")));
    }
    Ok(())
}

/// Draws `min(k, #nonzero)` distinct ids, each draw proportional to the
/// teacher mass of the ids not yet drawn. Deterministic for a given seed.
pub fn sample_support(teacher_probs: &[f64], k: usize, seed: u64) -> Result<Vec<usize>> {
    sample_support_with(teacher_probs, k, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_support_with(teacher_probs: &[f64], k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    check_distribution(teacher_probs)?;
    if k == 0 {
        return Err(Error::Distribution("k must be >= 1".into()));
    }
    let mut remaining: Vec<usize> = (0..teacher_probs.len())
        .filter(|&i| teacher_probs[i] > 0.0)
        .collect();
    let draws = k.min(remaining.len());
    let mut support = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mass: f64 = remaining.iter().map(|&i| teacher_probs[i]).sum();
        let mut u = rng.gen::<f64>() * mass;
        let mut pick = remaining.len() - 1;
        for (slot, &i) in remaining.iter().enumerate() {
            if u < teacher_probs[i] {
                pick = slot;
                break;
            }
            u -= teacher_probs[i];
        }
        support.push(remaining.remove(pick));
    }
    Ok(support)
}

/// Teacher restricted to `support` and rescaled to sum to one.
pub fn renormalize(teacher_probs: &[f64], support: &[usize]) -> Result<DistillTarget> {
    if support.is_empty() {
        return Err(Error::Distribution("empty support".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for &i in support {
        if i >= teacher_probs.len() || teacher_probs[i] <= 0.0 || !seen.insert(i) {
            return Err(Error::Distribution(format!(
                "support id {i} is out of range, zero-mass or repeated"
            )));
        }
    }
    let mass: f64 = support.iter().map(|&i| teacher_probs[i]).sum();
    Ok(DistillTarget {
        support: support.to_vec(),
        probs: support.iter().map(|&i| teacher_probs[i] / mass).collect(),
    })
}

/// `-Σ_{i ∈ support} target(i) · log softmax(student_logits)(i)`.
pub fn distill_loss(student_logits: &[f64], target: &DistillTarget) -> f64 {
    let lp = log_softmax(student_logits);
    -target
        .support
        .iter()
        .zip(&target.probs)
        .map(|(&i, &t)| t * lp[i])
        .sum::<f64>()
}

/// Gradient of [`distill_loss`] with respect to the student logits.
pub fn distill_grad(student_logits: &[f64], target: &DistillTarget) -> Vec<f64> {
    let mass: f64 = target.probs.iter().sum();
    let mut g: Vec<f64> = log_softmax(student_logits)
        .into_iter()
        .map(|l| l.exp() * mass)
        .collect();
    for (&i, &t) in target.support.iter().zip(&target.probs) {
        g[i] -= t;
    }
    g
}

/// Largest relative error between [`distill_grad`] and central differences
/// with step `h`. Components are compared as `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn distill_grad_check(student_logits: &[f64], target: &DistillTarget, h: f64) -> f64 {
    let analytic = distill_grad(student_logits, target);
    let mut z = student_logits.to_vec();
    let mut worst = 0.0f64;
    for i in 0..z.len() {
        let orig = z[i];
        z[i] = orig + h;
        let up = distill_loss(&z, target);
        z[i] = orig - h;
        let down = distill_loss(&z, target);
        z[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    worst
}
