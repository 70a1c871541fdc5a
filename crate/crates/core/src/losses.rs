//! The five pretraining loss heads and their weighted sum.
//!
//! Masked words and masked tags flow through literally the same tied softmax
//! (token embedding transposed + shared vocabulary bias); that sharing is the
//! anchor mechanism. Empty target sets contribute an exact zero with a
//! warning rather than an error, so degenerate batches stay auditable.

use crate::error::{CoreError, Result};
use crate::masking::{BatchKind, MaskedBatch};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lm: f64,
    pub regress: f64,
    pub label: f64,
    pub tag: f64,
    #[serde(rename = "match")]
    pub match_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lm: 1.0,
            regress: 1.0,
            label: 1.0,
            tag: 1.0,
            match_: 1.0,
        }
    }
}

/// Per-term scalars (weighted), plus their in-graph sum.
pub struct LossOutput<S: Scalar> {
    pub total: Tensor<S>,
    pub lm: Option<Tensor<S>>,
    pub regress: Option<Tensor<S>>,
    pub label: Option<Tensor<S>>,
    pub tag: Option<Tensor<S>>,
    pub match_: Option<Tensor<S>>,
}

/// Flat numeric view for logging; term values are the weighted scalars.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub lm: f32,
    pub regress: f32,
    pub label: f32,
    pub tag: f32,
    #[serde(rename = "match")]
    pub match_: f32,
}

impl<S: Scalar> LossOutput<S> {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let term = |t: &Option<Tensor<S>>| -> Result<f32> {
            Ok(match t {
                Some(t) => t.item()?.to_f32(),
                None => 0.0,
            })
        };
        Ok(LossBreakdown {
            total: self.total.item()?.to_f32(),
            lm: term(&self.lm)?,
            regress: term(&self.regress)?,
            label: term(&self.label)?,
            tag: term(&self.tag)?,
            match_: term(&self.match_)?,
        })
    }
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any (NaN-guard diagnostics).
    pub fn non_finite_term(&self) -> Option<&'static str> {
        for (name, v) in [
            ("lm", self.lm),
            ("regress", self.regress),
            ("label", self.label),
            ("tag", self.tag),
            ("match", self.match_),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

fn warn_empty(term: &str) {
    eprintln!("warning: {term} loss over zero positions, contributing 0");
}

/// Masked-token prediction through the tied softmax; used verbatim for text
/// words and for tag subwords.
pub fn masked_token_loss<S: Scalar>(
    model: &Model<S>,
    hidden: &Tensor<S>,
    positions: &[usize],
    targets: &[usize],
    term: &str,
) -> Result<Option<Tensor<S>>> {
    if positions.is_empty() {
        warn_empty(term);
        return Ok(None);
    }
    let rows = hidden.gather_rows(positions)?;
    let logits = model.tied_vocab_logits(&rows)?;
    Ok(Some(Tensor::cross_entropy(&logits, targets)?))
}

/// L2 regression from masked region rows back to the detector features.
pub fn region_regression_loss<S: Scalar>(
    model: &Model<S>,
    hidden: &Tensor<S>,
    positions: &[usize],
    feature_targets: &[Vec<f32>],
) -> Result<Option<Tensor<S>>> {
    if positions.is_empty() {
        warn_empty("regress");
        return Ok(None);
    }
    let rows = hidden.gather_rows(positions)?;
    let pred = rows.matmul(&model.regress_w)?.add_bias(&model.regress_b)?;
    let f_dim = model.config.f_dim;
    let mut data = Vec::with_capacity(positions.len() * f_dim);
    for t in feature_targets {
        if t.len() != f_dim {
            return Err(CoreError::ShapeMismatch {
                op: "region_regression_loss target",
                left: vec![t.len()],
                right: vec![f_dim],
            });
        }
        data.extend(t.iter().map(|&x| S::from_f32(x)));
    }
    let target = Tensor::constant(vec![positions.len(), f_dim], data)?;
    Ok(Some(Tensor::l2_loss(&pred, &target)?))
}

/// Cross-entropy over detector classes at masked region rows; targets are
/// the detector's own top-1 labels, not gold.
pub fn noisy_label_loss<S: Scalar>(
    model: &Model<S>,
    hidden: &Tensor<S>,
    positions: &[usize],
    label_targets: &[usize],
) -> Result<Option<Tensor<S>>> {
    if positions.is_empty() {
        warn_empty("label");
        return Ok(None);
    }
    let rows = hidden.gather_rows(positions)?;
    let logits = rows.matmul(&model.label_w)?.add_bias(&model.label_b)?;
    Ok(Some(Tensor::cross_entropy(&logits, label_targets)?))
}

/// Binary text-image match over pooled [CLS] rows.
pub fn match_loss<S: Scalar>(
    model: &Model<S>,
    hidden: &Tensor<S>,
    batch: &MaskedBatch<S>,
    labels: &[f32],
) -> Result<Tensor<S>> {
    if batch.kind != BatchKind::Paired {
        return Err(CoreError::Contract(
            "match loss on an unpaired batch".into(),
        ));
    }
    let cls_rows: Vec<usize> = batch.layouts.iter().map(|l| l.cls).collect();
    let pooled = model.encoder.pooled_cls(hidden, &cls_rows)?;
    let logits = model.match_logits(&pooled)?;
    let labels: Vec<S> = labels.iter().map(|&x| S::from_f32(x)).collect();
    Tensor::bce_with_logits(&logits, &labels)
}

/// Forward pass plus every applicable loss head, summed in-graph. The
/// breakdown terms sum to the total exactly (same additions, same order).
pub fn total_loss<S: Scalar>(
    model: &Model<S>,
    batch: &MaskedBatch<S>,
    weights: &LossWeights,
) -> Result<LossOutput<S>> {
    let hidden = model.forward_packed(&batch.embeddings, &batch.attn_mask, &batch.segments)?;
    total_loss_given_hidden(model, batch, weights, &hidden)
}

pub fn total_loss_given_hidden<S: Scalar>(
    model: &Model<S>,
    batch: &MaskedBatch<S>,
    weights: &LossWeights,
    hidden: &Tensor<S>,
) -> Result<LossOutput<S>> {
    let weigh = |t: Option<Tensor<S>>, w: f64| t.map(|t| t.scale(S::from_f64(w)));

    let lm = match batch.kind {
        BatchKind::TextOnly | BatchKind::Paired => weigh(
            masked_token_loss(model, hidden, &batch.word_positions, &batch.word_targets, "lm")?,
            weights.lm,
        ),
        BatchKind::ImageOnly => None,
    };
    let (regress, label, tag) = match batch.kind {
        BatchKind::ImageOnly | BatchKind::Paired => {
            let regress = weigh(
                region_regression_loss(
                    model,
                    hidden,
                    &batch.region_positions,
                    &batch.feature_targets,
                )?,
                weights.regress,
            );
            let label = weigh(
                noisy_label_loss(model, hidden, &batch.region_positions, &batch.label_targets)?,
                weights.label,
            );
            let tag = if batch.tag_positions.is_empty() {
                None // tags disabled or nothing masked
            } else {
                weigh(
                    masked_token_loss(
                        model,
                        hidden,
                        &batch.tag_positions,
                        &batch.tag_targets,
                        "tag",
                    )?,
                    weights.tag,
                )
            };
            (regress, label, tag)
        }
        BatchKind::TextOnly => (None, None, None),
    };
    let match_ = match &batch.match_labels {
        Some(labels) => Some(match_loss(model, hidden, batch, labels)?.scale(S::from_f64(weights.match_))),
        None => None,
    };

    let mut total: Option<Tensor<S>> = None;
    for term in [&lm, &regress, &label, &tag, &match_] {
        if let Some(t) = term {
            total = Some(match total {
                Some(acc) => acc.add(t)?,
                None => t.clone(),
            });
        }
    }
    let total = total.unwrap_or_else(|| {
        warn_empty("total");
        Tensor::scalar(S::ZERO)
    });
    Ok(LossOutput {
        total,
        lm,
        regress,
        label,
        tag,
        match_,
    })
}
