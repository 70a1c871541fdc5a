//! Shared Transformer encoder.
//!
//! One parameter set serves text-only, image-only, and paired inputs; the
//! caller decides what the rows mean. Blocks are post-norm (residual, then
//! layer norm). Inputs arrive packed: multiple instances concatenated along
//! the row axis with `(start, len)` segments that never attend across each
//! other.

use crate::embed::init_matrix;
use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    /// Toy scale: trains in minutes on one CPU while exercising every
    /// mechanism. (BERT-base would be 12/12/768/3072/512.)
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            heads: 4,
            hidden_dim: 128,
            ffn_dim: 512,
            max_positions: 128,
        }
    }
}

impl EncoderConfig {
    /// `layers == 0` is allowed as the degenerate identity encoder; every
    /// other count must be positive and heads must divide the hidden dim.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.max_positions == 0
        {
            return Err(CoreError::Config(
                "encoder heads, hidden_dim, ffn_dim, max_positions must be >= 1".into(),
            ));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

pub struct LayerParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub ff1_w: Tensor<S>,
    pub ff1_b: Tensor<S>,
    pub ff2_w: Tensor<S>,
    pub ff2_b: Tensor<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
}

pub struct EncoderParams<S: Scalar> {
    pub config: EncoderConfig,
    pub layers: Vec<LayerParams<S>>,
    /// Pooled-[CLS] projection: `tanh(H[cls] . w + b)`.
    pub pool_w: Tensor<S>,
    pub pool_b: Tensor<S>,
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::parameter(vec![n], vec![S::ONE; n]).unwrap()
}

fn zeros_param<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::parameter(vec![n], vec![S::ZERO; n]).unwrap()
}

/// Queries and keys start tied at this multiple of the base init scale, so
/// attention is content-matching from step 0 (rows sharing an embedding
/// component, like a region and its tag's coordinate, attend to each other
/// before any training).
const QK_INIT_SCALE: f64 = 5.0;

fn identity<S: Scalar>(d: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; d * d];
    for i in 0..d {
        data[i * d + i] = S::ONE;
    }
    Tensor::parameter(vec![d, d], data).unwrap()
}

impl<S: Scalar> EncoderParams<S> {
    /// Residual-friendly initialization: value and output projections start
    /// at identity (attention transports content unrotated into the residual
    /// stream), queries and keys start as one tied matrix. All weights
    /// remain independent trainable tensors.
    pub fn init(config: EncoderConfig, init_std: f64, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let f = config.ffn_dim;
        let layers = (0..config.layers)
            .map(|_| {
                let wq: Tensor<S> = init_matrix(rng, vec![d, d], init_std * QK_INIT_SCALE);
                let wk = Tensor::parameter(vec![d, d], wq.to_vec()).unwrap();
                LayerParams {
                    wq,
                    bq: zeros_param(d),
                    wk,
                    bk: zeros_param(d),
                    wv: identity(d),
                    bv: zeros_param(d),
                    wo: identity(d),
                    bo: zeros_param(d),
                    ln1_gamma: ones(d),
                    ln1_beta: zeros_param(d),
                    ff1_w: init_matrix(rng, vec![d, f], init_std),
                    ff1_b: zeros_param(f),
                    ff2_w: init_matrix(rng, vec![f, d], init_std),
                    ff2_b: zeros_param(d),
                    ln2_gamma: ones(d),
                    ln2_beta: zeros_param(d),
                }
            })
            .collect();
        Ok(EncoderParams {
            config,
            layers,
            pool_w: init_matrix(rng, vec![d, d], init_std),
            pool_b: zeros_param(d),
        })
    }

    /// One attention block: projections, masked multi-head attention,
    /// output projection, residual, layer norm.
    pub fn attention_block(
        &self,
        layer: &LayerParams<S>,
        x: &Tensor<S>,
        attn_mask: &[bool],
        segments: &[(usize, usize)],
    ) -> Result<Tensor<S>> {
        let q = x.matmul(&layer.wq)?.add_bias(&layer.bq)?;
        let k = x.matmul(&layer.wk)?.add_bias(&layer.bk)?;
        let v = x.matmul(&layer.wv)?.add_bias(&layer.bv)?;
        let ctx = Tensor::attention(&q, &k, &v, self.config.heads, segments, attn_mask)?;
        let o = ctx.matmul(&layer.wo)?.add_bias(&layer.bo)?;
        x.add(&o)?
            .layer_norm(&layer.ln1_gamma, &layer.ln1_beta, S::from_f64(LN_EPS))
    }

    fn ffn_block(&self, layer: &LayerParams<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let h = x
            .matmul(&layer.ff1_w)?
            .add_bias(&layer.ff1_b)?
            .gelu()
            .matmul(&layer.ff2_w)?
            .add_bias(&layer.ff2_b)?;
        x.add(&h)?
            .layer_norm(&layer.ln2_gamma, &layer.ln2_beta, S::from_f64(LN_EPS))
    }

    /// Last-layer contextual representations of packed rows. Padded (masked)
    /// positions flow through but are never read by any loss.
    pub fn forward(
        &self,
        embeddings: &Tensor<S>,
        attn_mask: &[bool],
        segments: &[(usize, usize)],
    ) -> Result<Tensor<S>> {
        let rows = embeddings.shape()[0];
        // Each packed instance is length-bounded; the packed total is not.
        for &(_, len) in segments {
            if len > self.config.max_positions {
                return Err(CoreError::InputTooLong {
                    len,
                    max: self.config.max_positions,
                });
            }
        }
        if attn_mask.len() != rows {
            return Err(CoreError::Contract(format!(
                "attention mask has {} entries for {} rows",
                attn_mask.len(),
                rows
            )));
        }
        let mut h = embeddings.clone();
        for layer in &self.layers {
            h = self.attention_block(layer, &h, attn_mask, segments)?;
            h = self.ffn_block(layer, &h)?;
        }
        Ok(h)
    }

    /// `tanh(H[rows] . w_pool + b_pool)`, batched over the given rows.
    pub fn pooled_cls(&self, h: &Tensor<S>, cls_rows: &[usize]) -> Result<Tensor<S>> {
        let picked = h.gather_rows(cls_rows)?;
        Ok(picked.matmul(&self.pool_w)?.add_bias(&self.pool_b)?.tanh_act())
    }

    pub fn named_parameters(&self, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, l) in self.layers.iter().enumerate() {
            let pre = format!("encoder.layer{i}");
            out.push((format!("{pre}.wq"), l.wq.clone()));
            out.push((format!("{pre}.bq"), l.bq.clone()));
            out.push((format!("{pre}.wk"), l.wk.clone()));
            out.push((format!("{pre}.bk"), l.bk.clone()));
            out.push((format!("{pre}.wv"), l.wv.clone()));
            out.push((format!("{pre}.bv"), l.bv.clone()));
            out.push((format!("{pre}.wo"), l.wo.clone()));
            out.push((format!("{pre}.bo"), l.bo.clone()));
            out.push((format!("{pre}.ln1_gamma"), l.ln1_gamma.clone()));
            out.push((format!("{pre}.ln1_beta"), l.ln1_beta.clone()));
            out.push((format!("{pre}.ff1_w"), l.ff1_w.clone()));
            out.push((format!("{pre}.ff1_b"), l.ff1_b.clone()));
            out.push((format!("{pre}.ff2_w"), l.ff2_w.clone()));
            out.push((format!("{pre}.ff2_b"), l.ff2_b.clone()));
            out.push((format!("{pre}.ln2_gamma"), l.ln2_gamma.clone()));
            out.push((format!("{pre}.ln2_beta"), l.ln2_beta.clone()));
        }
        out.push(("encoder.pool_w".into(), self.pool_w.clone()));
        out.push(("encoder.pool_b".into(), self.pool_b.clone()));
    }
}
