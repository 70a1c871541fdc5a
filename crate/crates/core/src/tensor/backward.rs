//! Reverse pass: topological sort and per-op gradient accumulation.

use super::matmul;
use super::ops::{sigmoid, Op, GELU_COEFF};
use super::scalar::Scalar;
use super::Tensor;
use crate::error::{CoreError, Result};
use std::collections::HashSet;

impl<S: Scalar> Tensor<S> {
    /// Populate gradients of every `requires_grad` tensor reachable from this
    /// scalar. Gradients accumulate additively across fan-out; traversal
    /// order is fixed by graph construction order, so repeated backward runs
    /// on the same graph are bitwise identical.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(CoreError::NonScalarLoss {
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(()); // nothing reachable can accumulate a gradient
        }

        let order = topological_order(self);
        self.accumulate_grad(|g| g[0] += S::ONE);
        for node in order.iter().rev() {
            let grad = match node.grad() {
                Some(g) => g,
                None => continue,
            };
            propagate(node, &grad);
        }
        Ok(())
    }
}

/// Post-order over the `requires_grad` subgraph; children precede parents.
fn topological_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (tensor, inputs_done)
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
    while let Some((node, inputs_done)) = stack.pop() {
        if inputs_done {
            order.push(node);
            continue;
        }
        if !visited.insert(node.key()) {
            continue;
        }
        stack.push((node.clone(), true));
        for input in node.op().inputs() {
            if input.requires_grad() && !visited.contains(&input.key()) {
                stack.push(((*input).clone(), false));
            }
        }
    }
    order
}

fn propagate<S: Scalar>(node: &Tensor<S>, g: &[S]) {
    match node.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            a.accumulate_grad(|da| {
                for (d, &gi) in da.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            b.accumulate_grad(|db| {
                for (d, &gi) in db.iter_mut().zip(g) {
                    *d += gi;
                }
            });
        }
        Op::Mul(a, b) => {
            {
                let bd = b.data();
                a.accumulate_grad(|da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                });
            }
            let ad = a.data();
            b.accumulate_grad(|db| {
                for i in 0..g.len() {
                    db[i] += g[i] * ad[i];
                }
            });
        }
        Op::Scale(a, c) => {
            a.accumulate_grad(|da| {
                for i in 0..g.len() {
                    da[i] += g[i] * *c;
                }
            });
        }
        Op::AddBias(x, bias) => {
            x.accumulate_grad(|dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            let d = bias.len();
            let n = g.len() / d;
            bias.accumulate_grad(|db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
            });
        }
        Op::MatMul(a, b) => {
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let p = b.shape()[1];
            {
                let bd = b.data();
                // dA += g . B^T
                a.accumulate_grad(|da| matmul::matmul_nt_acc(g, &bd, n, p, k, da));
            }
            let ad = a.data();
            // dB += A^T . g
            let at = matmul::transpose_copy(&ad, n, k);
            b.accumulate_grad(|db| matmul::matmul_acc(&at, g, k, n, p, db));
        }
        Op::Transpose(a) => {
            let (d, n) = (node.shape()[0], node.shape()[1]);
            a.accumulate_grad(|da| {
                for i in 0..d {
                    for j in 0..n {
                        da[j * d + i] += g[i * n + j];
                    }
                }
            });
        }
        Op::Gelu(a) => {
            let c0 = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
            let c1 = S::from_f64(GELU_COEFF);
            let half = S::from_f64(0.5);
            let three = S::from_f64(3.0);
            let xd = a.data();
            a.accumulate_grad(|da| {
                for i in 0..g.len() {
                    let x = xd[i];
                    let u = c0 * (x + c1 * x * x * x);
                    let th = u.tanh();
                    let sech2 = S::ONE - th * th;
                    let du = c0 * (S::ONE + three * c1 * x * x);
                    da[i] += g[i] * (half * (S::ONE + th) + half * x * sech2 * du);
                }
            });
        }
        Op::Tanh(a) => {
            let yd = node.data();
            a.accumulate_grad(|da| {
                for i in 0..g.len() {
                    let y = yd[i];
                    da[i] += g[i] * (S::ONE - y * y);
                }
            });
        }
        Op::Sum(a) => {
            let g0 = g[0];
            a.accumulate_grad(|da| {
                for d in da.iter_mut() {
                    *d += g0;
                }
            });
        }
        Op::GatherRows(x, indices) => {
            let d = x.shape()[1];
            x.accumulate_grad(|dx| {
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dx[idx * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::ConcatRows(blocks) => {
            let d = node.shape()[1];
            let mut offset = 0;
            for b in blocks {
                let rows = b.shape()[0];
                let span = rows * d;
                b.accumulate_grad(|db| {
                    for (dst, &gi) in db.iter_mut().zip(&g[offset..offset + span]) {
                        *dst += gi;
                    }
                });
                offset += span;
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let inv_d = S::ONE / S::from_usize(d);
            let xd = x.data();
            let gd = gamma.data();
            // Per-row statistics are recomputed; cheaper than caching given
            // toy-scale rows.
            let mut stats = Vec::with_capacity(n);
            for i in 0..n {
                let row = &xd[i * d..i * d + d];
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
                stats.push((mean, S::ONE / (var + *eps).sqrt()));
            }
            x.accumulate_grad(|dx| {
                for i in 0..n {
                    let (mean, inv_std) = stats[i];
                    let row = &xd[i * d..i * d + d];
                    let grow = &g[i * d..i * d + d];
                    let mut mean_gg = S::ZERO;
                    let mut mean_ggx = S::ZERO;
                    for j in 0..d {
                        let gg = gd[j] * grow[j];
                        let xh = (row[j] - mean) * inv_std;
                        mean_gg += gg;
                        mean_ggx += gg * xh;
                    }
                    mean_gg *= inv_d;
                    mean_ggx *= inv_d;
                    for j in 0..d {
                        let gg = gd[j] * grow[j];
                        let xh = (row[j] - mean) * inv_std;
                        dx[i * d + j] += (gg - mean_gg - xh * mean_ggx) * inv_std;
                    }
                }
            });
            gamma.accumulate_grad(|dg| {
                for i in 0..n {
                    let (mean, inv_std) = stats[i];
                    for j in 0..d {
                        let xh = (xd[i * d + j] - mean) * inv_std;
                        dg[j] += g[i * d + j] * xh;
                    }
                }
            });
            beta.accumulate_grad(|db| {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
            });
        }
        Op::SoftmaxRows(x) => {
            let (n, d) = (node.shape()[0], node.shape()[1]);
            let yd = node.data();
            x.accumulate_grad(|dx| {
                for i in 0..n {
                    let y = &yd[i * d..i * d + d];
                    let grow = &g[i * d..i * d + d];
                    let mut dot = S::ZERO;
                    for j in 0..d {
                        dot += grow[j] * y[j];
                    }
                    for j in 0..d {
                        dx[i * d + j] += y[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            key_mask,
            weights,
            weight_offsets,
        } => {
            let d = q.shape()[1];
            let dh = d / heads;
            let inv_sqrt = S::ONE / S::from_usize(dh).sqrt();
            let qd = q.data();
            let kd = k.data();
            let vd = v.data();
            let mut dq = vec![S::ZERO; qd.len()];
            let mut dk = vec![S::ZERO; kd.len()];
            let mut dv = vec![S::ZERO; vd.len()];
            for (si, &(start, len)) in segments.iter().enumerate() {
                let w_base = weight_offsets[si];
                let mut d_scores = vec![S::ZERO; len];
                for h in 0..*heads {
                    let hoff = h * dh;
                    let w_head = w_base + h * len * len;
                    for i in 0..len {
                        let grow = &g[(start + i) * d + hoff..(start + i) * d + hoff + dh];
                        let wrow = &weights[w_head + i * len..w_head + i * len + len];
                        // dV and dA
                        let mut dot_aw = S::ZERO;
                        for j in 0..len {
                            let w = wrow[j];
                            let vrow = &vd[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                            let mut da = S::ZERO;
                            for t in 0..dh {
                                da += grow[t] * vrow[t];
                            }
                            d_scores[j] = da;
                            dot_aw += da * w;
                            if w != S::ZERO {
                                let dvrow =
                                    &mut dv[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                                for t in 0..dh {
                                    dvrow[t] += w * grow[t];
                                }
                            }
                        }
                        // softmax backward, then into q and k
                        let qrow_base = (start + i) * d + hoff;
                        for j in 0..len {
                            if !key_mask[start + j] {
                                continue;
                            }
                            let ds = wrow[j] * (d_scores[j] - dot_aw) * inv_sqrt;
                            if ds == S::ZERO {
                                continue;
                            }
                            let krow = &kd[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                            for t in 0..dh {
                                dq[qrow_base + t] += ds * krow[t];
                            }
                            let qrow = &qd[qrow_base..qrow_base + dh];
                            let dkrow =
                                &mut dk[(start + j) * d + hoff..(start + j) * d + hoff + dh];
                            for t in 0..dh {
                                dkrow[t] += ds * qrow[t];
                            }
                        }
                    }
                }
            }
            q.accumulate_grad(|dst| {
                for (s, &x) in dst.iter_mut().zip(&dq) {
                    *s += x;
                }
            });
            k.accumulate_grad(|dst| {
                for (s, &x) in dst.iter_mut().zip(&dk) {
                    *s += x;
                }
            });
            v.accumulate_grad(|dst| {
                for (s, &x) in dst.iter_mut().zip(&dv) {
                    *s += x;
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let (n, v) = (logits.shape()[0], logits.shape()[1]);
            let scale = g[0] / S::from_usize(n);
            logits.accumulate_grad(|dz| {
                for i in 0..n {
                    for j in 0..v {
                        let indicator = if j == targets[i] { S::ONE } else { S::ZERO };
                        dz[i * v + j] += scale * (probs[i * v + j] - indicator);
                    }
                }
            });
        }
        Op::L2Loss { pred, target } => {
            let n = pred.shape()[0];
            let scale = g[0] * S::from_f64(2.0) / S::from_usize(n);
            {
                let pd = pred.data();
                let td = target.data();
                pred.accumulate_grad(|dp| {
                    for i in 0..dp.len() {
                        dp[i] += scale * (pd[i] - td[i]);
                    }
                });
            }
            let pd = pred.data();
            let td = target.data();
            target.accumulate_grad(|dt| {
                for i in 0..dt.len() {
                    dt[i] -= scale * (pd[i] - td[i]);
                }
            });
        }
        Op::BceWithLogits { logits, labels } => {
            let n = logits.len();
            let scale = g[0] / S::from_usize(n);
            let zd = logits.data();
            logits.accumulate_grad(|dz| {
                for i in 0..n {
                    dz[i] += scale * (sigmoid(zd[i]) - labels[i]);
                }
            });
        }
    }
}
