//! Full model: shared embedder, shared encoder, loss heads.
//!
//! Exactly one parameter set exists per model; text-only, image-only, and
//! paired inputs all flow through the same tensors. The masked-word and
//! masked-tag prediction heads are the token embedding transposed (weight
//! tying) plus one shared vocabulary bias.

use crate::embed::{init_matrix, MaskableInput, SharedEmbeddingParams};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::rng::stream;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Detector feature dimension.
    pub f_dim: usize,
    /// Detector label space (noisy-label head).
    pub num_detector_classes: usize,
    pub encoder: EncoderConfig,
    pub init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size == 0 || self.f_dim == 0 || self.num_detector_classes == 0 {
            return Err(crate::CoreError::Config(
                "vocab_size, f_dim, num_detector_classes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    pub shared: SharedEmbeddingParams<S>,
    pub encoder: EncoderParams<S>,
    /// Bias of the tied prediction softmax, `[V]`.
    pub vocab_bias: Tensor<S>,
    /// Masked-region feature regressor, `[d, f_dim]` + bias.
    pub regress_w: Tensor<S>,
    pub regress_b: Tensor<S>,
    /// Noisy detector-label classifier, `[d, C]` + bias.
    pub label_w: Tensor<S>,
    pub label_b: Tensor<S>,
    /// Text-image match head over pooled [CLS], `[d, 1]` + bias.
    pub match_w: Tensor<S>,
    pub match_b: Tensor<S>,
    /// Per-region referring head, `[d, 1]` + bias.
    pub refer_w: Tensor<S>,
    pub refer_b: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model<S>> {
        config.validate()?;
        let d = config.encoder.hidden_dim;
        let mut rng = stream(seed, "model-init", 0);
        let shared = SharedEmbeddingParams::init(
            config.vocab_size,
            d,
            config.encoder.max_positions,
            config.f_dim,
            config.init_std,
            &mut rng,
        );
        let encoder = EncoderParams::init(config.encoder, config.init_std, &mut rng)?;
        let zero = |n: usize| Tensor::parameter(vec![n], vec![S::ZERO; n]).unwrap();
        Ok(Model {
            shared,
            encoder,
            vocab_bias: zero(config.vocab_size),
            regress_w: init_matrix(&mut rng, vec![d, config.f_dim], config.init_std),
            regress_b: zero(config.f_dim),
            label_w: init_matrix(&mut rng, vec![d, config.num_detector_classes], config.init_std),
            label_b: zero(config.num_detector_classes),
            match_w: init_matrix(&mut rng, vec![d, 1], config.init_std),
            match_b: zero(1),
            refer_w: init_matrix(&mut rng, vec![d, 1], config.init_std),
            refer_b: zero(1),
            config,
        })
    }

    /// Stable enumeration of every trainable tensor. Shared tensors appear
    /// once: the tied softmax weight IS `shared.token_embedding`.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = vec![
            ("shared.token_embedding".to_string(), self.shared.token_embedding.clone()),
            ("shared.position_embedding".to_string(), self.shared.position_embedding.clone()),
            ("shared.segment_embedding".to_string(), self.shared.segment_embedding.clone()),
            ("shared.box_w".to_string(), self.shared.box_w.clone()),
            ("shared.box_b".to_string(), self.shared.box_b.clone()),
            ("shared.feat_w".to_string(), self.shared.feat_w.clone()),
            ("shared.feat_b".to_string(), self.shared.feat_b.clone()),
        ];
        self.encoder.named_parameters(&mut out);
        out.push(("heads.vocab_bias".into(), self.vocab_bias.clone()));
        out.push(("heads.regress_w".into(), self.regress_w.clone()));
        out.push(("heads.regress_b".into(), self.regress_b.clone()));
        out.push(("heads.label_w".into(), self.label_w.clone()));
        out.push(("heads.label_b".into(), self.label_b.clone()));
        out.push(("heads.match_w".into(), self.match_w.clone()));
        out.push(("heads.match_b".into(), self.match_b.clone()));
        out.push(("heads.refer_w".into(), self.refer_w.clone()));
        out.push(("heads.refer_b".into(), self.refer_b.clone()));
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Encoder pass over an assembled input.
    pub fn forward(&self, input: &MaskableInput<S>) -> Result<Tensor<S>> {
        let rows = input.embeddings.shape()[0];
        self.encoder
            .forward(&input.embeddings, &input.attn_mask, &[(0, rows)])
    }

    /// Encoder pass over a packed batch of segments.
    pub fn forward_packed(
        &self,
        embeddings: &Tensor<S>,
        attn_mask: &[bool],
        segments: &[(usize, usize)],
    ) -> Result<Tensor<S>> {
        self.encoder.forward(embeddings, attn_mask, segments)
    }

    /// Tied prediction logits: `rows . token_embedding^T + vocab_bias`.
    /// Used identically for masked words and masked tags.
    pub fn tied_vocab_logits(&self, rows: &Tensor<S>) -> Result<Tensor<S>> {
        rows.matmul(&self.shared.token_embedding.transpose()?)?
            .add_bias(&self.vocab_bias)
    }

    /// Match logit per pooled row.
    pub fn match_logits(&self, pooled: &Tensor<S>) -> Result<Tensor<S>> {
        pooled.matmul(&self.match_w)?.add_bias(&self.match_b)
    }

    /// Referring score logit per region row.
    pub fn refer_logits(&self, region_rows: &Tensor<S>) -> Result<Tensor<S>> {
        region_rows.matmul(&self.refer_w)?.add_bias(&self.refer_b)
    }

    /// Copy all parameter values from another model with identical config.
    pub fn copy_from(&mut self, other: &Model<S>) -> Result<()> {
        if self.config != other.config {
            return Err(crate::CoreError::Contract(
                "copy_from requires identical model configs".into(),
            ));
        }
        for ((_, dst), (_, src)) in self
            .named_parameters()
            .iter()
            .zip(other.named_parameters().iter())
        {
            dst.replace_data(src.to_vec());
        }
        Ok(())
    }
}
