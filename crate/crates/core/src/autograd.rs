//! Reverse-mode differentiation over the small kernel set the model uses.
//!
//! Values live on a [`Tape`]; every op records its inputs and
//! [`Tape::backward`] walks the tape in reverse, accumulating gradients.
//! Only what the toy training and distillation loops need is covered.

use crate::error::{shape_err, Result};
use crate::tensor::{
    inv_rms, matmul, matmul_transposed, rope_apply, rope_apply_inverse, softmax_in_place, Matrix,
    RopeParams, RMS_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RmsNorm { x: Var, gain: Var },
    Gelu(Var),
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rope { x: Var, positions: Vec<usize>, params: RopeParams },
    MaskedSoftmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Matrix, probs: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_transposed(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    /// RMSNorm of each `gain.cols()`-wide segment of every row of `x`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let g = self.value(gain);
        if g.rows() != 1 {
            return shape_err("rms_norm gain must be a row vector");
        }
        let out = crate::tensor::rms_norm_rows(self.value(x), g.data(), RMS_EPS)?;
        Ok(self.push(out, Op::RmsNorm { x, gain }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).col_slice(start, len)?;
        Ok(self.push(out, Op::ColSlice { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Matrix> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Matrix::concat_cols(&vals)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], params: RopeParams) -> Result<Var> {
        let out = rope_apply(self.value(x), positions, &params)?;
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                params,
            },
        ))
    }

    /// Row softmax of `x + mask`, `mask` entries in `{0, -inf}`.
    pub fn masked_softmax(&mut self, x: Var, mask: Matrix) -> Result<Var> {
        let mut out = self.value(x).add(&mask)?;
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r))
                .map_err(|_| crate::error::Error::FullyMasked { row: r })?;
        }
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return shape_err(format!("gather id {bad} of {} rows", t.rows()));
        }
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| t.row(i).to_vec()).collect();
        let out = if rows.is_empty() {
            Matrix::zeros(0, t.cols())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows of `-Σ_j targets[r][j] · log softmax(logits[r])[j]`, a 1×1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Matrix) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() || z.rows() == 0 {
            return shape_err(format!(
                "cross_entropy logits {:?} targets {:?}",
                z.shape(),
                targets.shape()
            ));
        }
        let mut probs = z.clone();
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let lp = crate::tensor::log_softmax(z.row(r));
            loss -= lp
                .iter()
                .zip(targets.row(r))
                .filter(|(_, &t)| t != 0.0)
                .map(|(l, t)| l * t)
                .sum::<f64>();
            for (p, l) in probs.row_mut(r).iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let n = z.rows() as f64;
        Ok(self.push(
            Matrix::filled(1, 1, loss / n),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        ))
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let (r, c) = self.value(out).shape();
        grads[out.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=out.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = matmul_transposed(&dy, self.value(*b)).unwrap();
                    let db = matmul(&self.value(*a).transpose(), &dy).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulT(a, b) => {
                    let da = matmul(&dy, self.value(*b)).unwrap();
                    let db = matmul(&dy.transpose(), self.value(*a)).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_with(self.value(*b), |g, v| g * v).unwrap();
                    let db = dy.zip_with(self.value(*a), |g, v| g * v).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, dy.scale(*s)),
                Op::RmsNorm { x, gain } => {
                    let (dx, dg) = rms_norm_backward(self.value(*x), self.value(*gain), &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dg);
                }
                Op::Gelu(x) => {
                    let dx = dy.zip_with(self.value(*x), |g, v| g * gelu_grad(v)).unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::ColSlice { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..dy.rows() {
                        dx.row_mut(r)[*start..*start + dy.cols()].copy_from_slice(dy.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        accumulate(&mut grads, *p, dy.col_slice(off, w).unwrap());
                        off += w;
                    }
                }
                Op::Rope {
                    x,
                    positions,
                    params,
                } => {
                    let dx = rope_apply_inverse(&dy, positions, params).unwrap();
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskedSoftmax(x) => {
                    let mut dx = dy.clone();
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let s: f64 = dy.row(r).iter().zip(yr).map(|(g, p)| g * p).sum();
                        for (d, p) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = p * (*d - s);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, g) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let g = dy.get(0, 0) / probs.rows() as f64;
                    let mut dz = probs.clone();
                    for r in 0..dz.rows() {
                        let mass: f64 = targets.row(r).iter().sum();
                        for (d, t) in dz.row_mut(r).iter_mut().zip(targets.row(r)) {
                            *d = g * (*d * mass - t);
                        }
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn rms_norm_backward(x: &Matrix, gain: &Matrix, dy: &Matrix) -> (Matrix, Matrix) {
    let g = gain.data();
    let seg = g.len();
    let n = seg as f64;
    let mut dx = Matrix::zeros(x.rows(), x.cols());
    let mut dg = Matrix::zeros(1, seg);
    for r in 0..x.rows() {
        for (s, xs) in x.row(r).chunks(seg).enumerate() {
            let dys = &dy.row(r)[s * seg..(s + 1) * seg];
            let inv = inv_rms(xs, RMS_EPS);
            let mut proj = 0.0;
            for j in 0..seg {
                dg.data_mut()[j] += dys[j] * xs[j] * inv;
                proj += g[j] * dys[j] * xs[j];
            }
            let coef = inv * inv * inv * proj / n;
            let out = &mut dx.row_mut(r)[s * seg..(s + 1) * seg];
            for j in 0..seg {
                out[j] = inv * g[j] * dys[j] - coef * xs[j];
            }
        }
    }
    (dx, dg)
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of the right shape when `v` did not influence the output.
    pub fn get(&self, tape: &Tape, v: Var) -> Matrix {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}
