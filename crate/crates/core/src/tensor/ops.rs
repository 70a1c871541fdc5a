//! The closed operation set and its forward kernels.

use super::matmul;
use super::scalar::Scalar;
use super::Tensor;
use crate::error::{CoreError, Result};

pub(crate) const GELU_COEFF: f64 = 0.044715;

pub enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    /// Row-broadcast vector addition: `x[n x d] + b[d]`.
    AddBias(Tensor<S>, Tensor<S>),
    MatMul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Gelu(Tensor<S>),
    Tanh(Tensor<S>),
    Sum(Tensor<S>),
    GatherRows(Tensor<S>, Vec<usize>),
    ConcatRows(Vec<Tensor<S>>),
    LayerNorm {
        x: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        eps: S,
    },
    SoftmaxRows(Tensor<S>),
    /// Segmented multi-head scaled-dot-product attention over packed rows.
    /// Each `(start, len)` segment attends only within itself; `key_mask`
    /// marks rows usable as keys. Softmax weights are saved for backward,
    /// packed per segment and head at `weight_offsets`.
    Attention {
        q: Tensor<S>,
        k: Tensor<S>,
        v: Tensor<S>,
        heads: usize,
        segments: Vec<(usize, usize)>,
        key_mask: Vec<bool>,
        weights: Vec<S>,
        weight_offsets: Vec<usize>,
    },
    CrossEntropy {
        logits: Tensor<S>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    L2Loss {
        pred: Tensor<S>,
        target: Tensor<S>,
    },
    BceWithLogits {
        logits: Tensor<S>,
        labels: Vec<S>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::SoftmaxRows(a) => vec![a],
            Op::ConcatRows(xs) => xs.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::L2Loss { pred, target } => vec![pred, target],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn dims2<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        other => Err(CoreError::Contract(format!("{op} expects a 2-d tensor, got {other:?}"))),
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("add", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("mul", self, other)?;
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    /// `self[n x d] + bias[d]` broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, d) = dims2(self, "add_bias")?;
        if bias.shape() != [d] {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for i in 0..n {
                for j in 0..d {
                    data[i * d + j] += b[j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, d],
            data,
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, k) = dims2(self, "matmul")?;
        let (k2, p) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(CoreError::MatmulShape {
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut out = vec![S::ZERO; n * p];
        matmul::matmul_acc(&self.data(), &other.data(), n, k, p, &mut out);
        Ok(Tensor::from_op(
            vec![n, p],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (n, d) = dims2(self, "transpose")?;
        let out = matmul::transpose_copy(&self.data(), n, d);
        Ok(Tensor::from_op(vec![d, n], out, Op::Transpose(self.clone())))
    }

    /// Tanh-approximation gelu, elementwise.
    pub fn gelu(&self) -> Tensor<S> {
        let c0 = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let c1 = S::from_f64(GELU_COEFF);
        let half = S::from_f64(0.5);
        let data = self
            .data()
            .iter()
            .map(|&x| {
                let u = c0 * (x + c1 * x * x * x);
                half * x * (S::ONE + u.tanh())
            })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    pub fn tanh_act(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&x| x.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Tanh(self.clone()))
    }

    /// Sum of all elements, as a `[1]`-shaped tensor.
    pub fn sum(&self) -> Tensor<S> {
        let mut s = S::ZERO;
        for &x in self.data().iter() {
            s += x;
        }
        Tensor::from_op(vec![1], vec![s], Op::Sum(self.clone()))
    }

    /// Select rows of a 2-d tensor by index; repeated indices permitted,
    /// backward scatter-adds into the source.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let (n, d) = dims2(self, "gather_rows")?;
        let mut out = Vec::with_capacity(indices.len() * d);
        {
            let data = self.data();
            for &idx in indices {
                if idx >= n {
                    return Err(CoreError::IndexOutOfRange {
                        what: "gather_rows row",
                        index: idx,
                        size: n,
                    });
                }
                out.extend_from_slice(&data[idx * d..idx * d + d]);
            }
        }
        Ok(Tensor::from_op(
            vec![indices.len(), d],
            out,
            Op::GatherRows(self.clone(), indices.to_vec()),
        ))
    }

    /// Stack 2-d blocks with equal column counts.
    pub fn concat_rows(blocks: &[Tensor<S>]) -> Result<Tensor<S>> {
        if blocks.is_empty() {
            return Err(CoreError::Contract("concat_rows of zero blocks".into()));
        }
        let (_, d) = dims2(&blocks[0], "concat_rows")?;
        let mut rows = 0;
        for b in blocks {
            let (bn, bd) = dims2(b, "concat_rows")?;
            if bd != d {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    left: blocks[0].shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            rows += bn;
        }
        let mut data = Vec::with_capacity(rows * d);
        for b in blocks {
            data.extend_from_slice(&b.data());
        }
        Ok(Tensor::from_op(
            vec![rows, d],
            data,
            Op::ConcatRows(blocks.to_vec()),
        ))
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
        let (n, d) = dims2(self, "layer_norm")?;
        if d == 0 {
            return Err(CoreError::EmptyDimension { what: "layer_norm row" });
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm affine",
                left: gamma.shape().to_vec(),
                right: vec![d],
            });
        }
        let mut out = vec![S::ZERO; n * d];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            let inv_d = S::ONE / S::from_usize(d);
            for i in 0..n {
                let row = &x[i * d..i * d + d];
                let mut mean = S::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = S::ZERO;
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var *= inv_d;
                let inv_std = S::ONE / (var + eps).sqrt();
                for j in 0..d {
                    out[i * d + j] = g[j] * ((row[j] - mean) * inv_std) + b[j];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let (n, d) = dims2(self, "softmax_rows")?;
        let mut out = vec![S::ZERO; n * d];
        {
            let x = self.data();
            for i in 0..n {
                softmax_row(&x[i * d..i * d + d], &mut out[i * d..i * d + d]);
            }
        }
        Ok(Tensor::from_op(vec![n, d], out, Op::SoftmaxRows(self.clone())))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        let (n, v) = dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(CoreError::Contract(format!(
                "cross_entropy: {n} logit rows but {} targets",
                targets.len()
            )));
        }
        let mut probs = vec![S::ZERO; n * v];
        let mut total = S::ZERO;
        {
            let z = logits.data();
            for i in 0..n {
                let t = targets[i];
                if t >= v {
                    return Err(CoreError::IndexOutOfRange {
                        what: "cross_entropy target",
                        index: t,
                        size: v,
                    });
                }
                let row = &z[i * v..i * v + v];
                let p = &mut probs[i * v..i * v + v];
                softmax_row(row, p);
                let mut m = row[0];
                for &x in row.iter() {
                    m = m.maximum(x);
                }
                let mut s = S::ZERO;
                for &x in row.iter() {
                    s += (x - m).exp();
                }
                total += m + s.ln() - row[t];
            }
        }
        let mean = total / S::from_usize(n);
        Ok(Tensor::from_op(
            vec![1],
            vec![mean],
            Op::CrossEntropy {
                logits: logits.clone(),
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows of the squared Euclidean distance.
    pub fn l2_loss(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape("l2_loss", pred, target)?;
        let (n, _) = dims2(pred, "l2_loss")?;
        let mut total = S::ZERO;
        {
            let p = pred.data();
            let t = target.data();
            for (&x, &y) in p.iter().zip(t.iter()) {
                let d = x - y;
                total += d * d;
            }
        }
        let mean = total / S::from_usize(n);
        Ok(Tensor::from_op(
            vec![1],
            vec![mean],
            Op::L2Loss {
                pred: pred.clone(),
                target: target.clone(),
            },
        ))
    }

    /// Mean binary cross-entropy on raw logits, numerically stable.
    pub fn bce_with_logits(logits: &Tensor<S>, labels: &[S]) -> Result<Tensor<S>> {
        let n = logits.len();
        if labels.len() != n {
            return Err(CoreError::Contract(format!(
                "bce_with_logits: {n} logits but {} labels",
                labels.len()
            )));
        }
        if n == 0 {
            return Err(CoreError::EmptyDimension { what: "bce_with_logits" });
        }
        let mut total = S::ZERO;
        {
            let z = logits.data();
            for i in 0..n {
                let zi = z[i];
                let yi = labels[i];
                total += zi.maximum(S::ZERO) - zi * yi + (S::ONE + (-zi.abs()).exp()).ln();
            }
        }
        let mean = total / S::from_usize(n);
        Ok(Tensor::from_op(
            vec![1],
            vec![mean],
            Op::BceWithLogits {
                logits: logits.clone(),
                labels: labels.to_vec(),
            },
        ))
    }

    /// Multi-head attention over packed segments. `q`, `k`, `v` are
    /// `[total x d]` with `d % heads == 0`; rows of distinct segments never
    /// attend to each other; keys with `key_mask == false` get exactly zero
    /// weight. Queries at masked rows are still computed (their outputs are
    /// simply never read by any loss).
    pub fn attention(
        q: &Tensor<S>,
        k: &Tensor<S>,
        v: &Tensor<S>,
        heads: usize,
        segments: &[(usize, usize)],
        key_mask: &[bool],
    ) -> Result<Tensor<S>> {
        let (n, d) = dims2(q, "attention")?;
        same_shape("attention", q, k)?;
        same_shape("attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(CoreError::Config(format!(
                "attention: hidden dim {d} not divisible by heads {heads}"
            )));
        }
        if key_mask.len() != n {
            return Err(CoreError::Contract(format!(
                "attention: mask length {} != rows {n}",
                key_mask.len()
            )));
        }
        for &(start, len) in segments {
            if start + len > n {
                return Err(CoreError::Contract(format!(
                    "attention: segment ({start}, {len}) exceeds {n} rows"
                )));
            }
        }
        let dh = d / heads;
        let inv_sqrt = S::ONE / S::from_usize(dh).sqrt();

        let mut weight_offsets = Vec::with_capacity(segments.len());
        let mut total_w = 0;
        for &(_, len) in segments {
            weight_offsets.push(total_w);
            total_w += heads * len * len;
        }
        let mut weights = vec![S::ZERO; total_w];
        let mut out = vec![S::ZERO; n * d];
        {
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            for (si, &(start, len)) in segments.iter().enumerate() {
                let w_base = weight_offsets[si];
                for h in 0..heads {
                    let hoff = h * dh;
                    let w_head = w_base + h * len * len;
                    for i in 0..len {
                        let qrow = &qd[(start + i) * d + hoff..(start + i) * d + hoff + dh];
                        let wrow = &mut weights[w_head + i * len..w_head + i * len + len];
                        // Scores over unmasked keys, then a stable softmax;
                        // masked keys keep exactly zero weight.
                        let mut max_score = None::<S>;
                        for (j, w) in wrow.iter_mut().enumerate() {
                            if !key_mask[start + j] {
                                continue;
                            }
                            let krow = &kd[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                            let mut s = S::ZERO;
                            for t in 0..dh {
                                s += qrow[t] * krow[t];
                            }
                            s *= inv_sqrt;
                            *w = s;
                            max_score = Some(match max_score {
                                Some(m) => m.maximum(s),
                                None => s,
                            });
                        }
                        let Some(m) = max_score else {
                            continue; // every key masked: row contributes nothing
                        };
                        let mut denom = S::ZERO;
                        for (j, w) in wrow.iter_mut().enumerate() {
                            if key_mask[start + j] {
                                *w = (*w - m).exp();
                                denom += *w;
                            } else {
                                *w = S::ZERO;
                            }
                        }
                        let inv_denom = S::ONE / denom;
                        let orow = &mut out[(start + i) * d + hoff..(start + i) * d + hoff + dh];
                        for j in 0..len {
                            let w = wrow[j] * inv_denom;
                            wrow[j] = w;
                            if w != S::ZERO {
                                let vrow = &vd[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                                for t in 0..dh {
                                    orow[t] += w * vrow[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, d],
            out,
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                heads,
                segments: segments.to_vec(),
                key_mask: key_mask.to_vec(),
                weights,
                weight_offsets,
            },
        ))
    }
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mut m = row[0];
    for &x in row.iter() {
        m = m.maximum(x);
    }
    let mut s = S::ZERO;
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        *o = (x - m).exp();
        s += *o;
    }
    let inv = S::ONE / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::ZERO {
        S::ONE / (S::ONE + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::ONE + e)
    }
}
