//! Mask-and-predict corruption and batch assembly.
//!
//! Masking happens on instance copies before embedding: text tokens are
//! corrupted per the mask/random/keep ratios, masked region features are
//! zeroed (targets keep the original feature and detector label), masked tag
//! subwords are corrupted like text. A batch packs all corrupted instances
//! into one row-concatenated input with per-instance attention segments, and
//! records absolute target positions for every loss head.

use crate::embed::{ImageInstance, Layout, SharedEmbeddingParams, TextInstance, Vocab};
use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingPolicy {
    pub text_mask_prob: f64,
    pub region_mask_prob: f64,
    pub tag_mask_prob: f64,
    /// Corruption split for selected token positions (text and tags).
    pub replace_mask: f64,
    pub replace_random: f64,
    pub keep: f64,
    /// Masking a region forces masking all of its tag subwords, so a visible
    /// tag cannot leak the masked region's label.
    pub joint_region_tag_mask: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            text_mask_prob: 0.15,
            region_mask_prob: 0.15,
            tag_mask_prob: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
            joint_region_tag_mask: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("text_mask_prob", self.text_mask_prob),
            ("region_mask_prob", self.region_mask_prob),
            ("tag_mask_prob", self.tag_mask_prob),
            ("replace_mask", self.replace_mask),
            ("replace_random", self.replace_random),
            ("keep", self.keep),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let s = self.replace_mask + self.replace_random + self.keep;
        if (s - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config(format!(
                "corruption ratios sum to {s}, need 1"
            )));
        }
        Ok(())
    }

    /// Corrupt one selected token per the mask/random/keep split.
    fn corrupt_token(&self, original: usize, vocab: &Vocab, rng: &mut impl Rng) -> usize {
        let r: f64 = rng.gen();
        if r < self.replace_mask {
            vocab.mask()
        } else if r < self.replace_mask + self.replace_random {
            rng.gen_range(vocab.first_content()..vocab.size())
        } else {
            original
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskedText {
    pub tokens: Vec<usize>,
    /// Indices into the token list (not yet absolute).
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Independent per-position selection; if the probability is positive but no
/// position got selected, one is forced so the instance always contributes.
pub fn mask_text(
    tokens: &[usize],
    policy: &MaskingPolicy,
    vocab: &Vocab,
    rng: &mut impl Rng,
) -> MaskedText {
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        if policy.text_mask_prob > 0.0 && rng.gen_bool(policy.text_mask_prob) {
            positions.push(i);
            targets.push(tok);
            out[i] = policy.corrupt_token(tok, vocab, rng);
        }
    }
    if positions.is_empty() && policy.text_mask_prob > 0.0 && !tokens.is_empty() {
        let i = rng.gen_range(0..tokens.len());
        positions.push(i);
        targets.push(tokens[i]);
        out[i] = policy.corrupt_token(tokens[i], vocab, rng);
    }
    MaskedText {
        tokens: out,
        positions,
        targets,
    }
}

#[derive(Debug, Clone)]
pub struct MaskedImage {
    pub image: ImageInstance,
    /// Region indices whose features were zeroed.
    pub masked_regions: Vec<usize>,
    pub feature_targets: Vec<Vec<f32>>,
    pub label_targets: Vec<usize>,
    /// (region index, subword index) pairs of masked tag subwords.
    pub masked_tags: Vec<(usize, usize)>,
    pub tag_targets: Vec<usize>,
}

pub fn mask_image(
    img: &ImageInstance,
    policy: &MaskingPolicy,
    vocab: &Vocab,
    tags_enabled: bool,
    rng: &mut impl Rng,
) -> MaskedImage {
    let mut out = img.clone();
    let mut masked_regions = Vec::new();
    let mut feature_targets = Vec::new();
    let mut label_targets = Vec::new();
    for (j, region) in img.regions.iter().enumerate() {
        if policy.region_mask_prob > 0.0 && rng.gen_bool(policy.region_mask_prob) {
            masked_regions.push(j);
            feature_targets.push(region.feature.clone());
            label_targets.push(region.detector_label);
            out.regions[j].feature = vec![0.0; region.feature.len()];
        }
    }
    let mut masked_tags = Vec::new();
    let mut tag_targets = Vec::new();
    if tags_enabled {
        for (j, region) in img.regions.iter().enumerate() {
            let forced = policy.joint_region_tag_mask && masked_regions.contains(&j);
            for (s, &tok) in region.tag_tokens.iter().enumerate() {
                if forced {
                    // forced joint masks always hide the token outright
                    masked_tags.push((j, s));
                    tag_targets.push(tok);
                    out.regions[j].tag_tokens[s] = vocab.mask();
                } else if policy.tag_mask_prob > 0.0 && rng.gen_bool(policy.tag_mask_prob) {
                    masked_tags.push((j, s));
                    tag_targets.push(tok);
                    out.regions[j].tag_tokens[s] = policy.corrupt_token(tok, vocab, rng);
                }
            }
        }
    }
    MaskedImage {
        image: out,
        masked_regions,
        feature_targets,
        label_targets,
        masked_tags,
        tag_targets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    TextOnly,
    ImageOnly,
    Paired,
}

impl BatchKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BatchKind::TextOnly => "text",
            BatchKind::ImageOnly => "image",
            BatchKind::Paired => "paired",
        }
    }
}

/// A fully assembled training batch: packed embeddings plus absolute target
/// positions for every loss head.
pub struct MaskedBatch<S: Scalar> {
    pub kind: BatchKind,
    pub embeddings: Tensor<S>,
    pub attn_mask: Vec<bool>,
    /// One `(start, len)` per packed instance.
    pub segments: Vec<(usize, usize)>,
    /// Per-instance layouts, already offset into packed coordinates.
    pub layouts: Vec<Layout>,
    pub word_positions: Vec<usize>,
    pub word_targets: Vec<usize>,
    pub region_positions: Vec<usize>,
    pub feature_targets: Vec<Vec<f32>>,
    pub label_targets: Vec<usize>,
    pub tag_positions: Vec<usize>,
    pub tag_targets: Vec<usize>,
    /// One label per instance for the match head (paired batches only).
    pub match_labels: Option<Vec<f32>>,
}

impl<S: Scalar> MaskedBatch<S> {
    /// Every target position must sit inside its block.
    pub fn validate(&self) -> Result<()> {
        let inside = |pos: usize, (start, len): (usize, usize)| pos >= start && pos < start + len;
        for &p in &self.word_positions {
            if !self.layouts.iter().any(|l| inside(p, l.text)) {
                return Err(CoreError::Contract(format!(
                    "word target at {p} outside every text block"
                )));
            }
        }
        for &p in &self.region_positions {
            if !self.layouts.iter().any(|l| inside(p, l.regions)) {
                return Err(CoreError::Contract(format!(
                    "region target at {p} outside every region block"
                )));
            }
        }
        for &p in &self.tag_positions {
            if !self.layouts.iter().any(|l| inside(p, l.tags)) {
                return Err(CoreError::Contract(format!(
                    "tag target at {p} outside every tag block"
                )));
            }
        }
        match self.kind {
            BatchKind::TextOnly => {
                if !self.region_positions.is_empty() || !self.tag_positions.is_empty() {
                    return Err(CoreError::Contract(
                        "text-only batch carries visual targets".into(),
                    ));
                }
            }
            BatchKind::ImageOnly => {
                if !self.word_positions.is_empty() {
                    return Err(CoreError::Contract(
                        "image-only batch carries word targets".into(),
                    ));
                }
            }
            BatchKind::Paired => {}
        }
        Ok(())
    }
}

/// Options threaded through the batch builders.
#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub tags_enabled: bool,
    pub max_len: usize,
    /// Probability of swapping a paired instance's caption for the match
    /// objective.
    pub mismatch_prob: f64,
    /// Whether paired batches carry match labels at all.
    pub match_enabled: bool,
}

struct Packer<S: Scalar> {
    blocks: Vec<Tensor<S>>,
    mask: Vec<bool>,
    segments: Vec<(usize, usize)>,
    layouts: Vec<Layout>,
    cursor: usize,
}

impl<S: Scalar> Packer<S> {
    fn new() -> Self {
        Packer {
            blocks: Vec::new(),
            mask: Vec::new(),
            segments: Vec::new(),
            layouts: Vec::new(),
            cursor: 0,
        }
    }

    fn push(&mut self, input: crate::embed::MaskableInput<S>) -> usize {
        let len = input.layout.len;
        let offset = self.cursor;
        self.segments.push((offset, len));
        self.layouts.push(input.layout.offset(offset));
        self.mask.extend(input.attn_mask);
        self.blocks.push(input.embeddings);
        self.cursor += len;
        offset
    }

    fn finish(self, kind: BatchKind) -> Result<(MaskedBatch<S>, Vec<Layout>)> {
        let embeddings = Tensor::concat_rows(&self.blocks)?;
        let layouts = self.layouts.clone();
        Ok((
            MaskedBatch {
                kind,
                embeddings,
                attn_mask: self.mask,
                segments: self.segments,
                layouts: self.layouts,
                word_positions: Vec::new(),
                word_targets: Vec::new(),
                region_positions: Vec::new(),
                feature_targets: Vec::new(),
                label_targets: Vec::new(),
                tag_positions: Vec::new(),
                tag_targets: Vec::new(),
                match_labels: None,
            },
            layouts,
        ))
    }
}

pub fn build_text_batch<S: Scalar>(
    shared: &SharedEmbeddingParams<S>,
    texts: &[&TextInstance],
    policy: &MaskingPolicy,
    vocab: &Vocab,
    opts: &BatchOptions,
    rng: &mut impl Rng,
) -> Result<MaskedBatch<S>> {
    if texts.is_empty() {
        return Err(CoreError::EmptyDimension { what: "text batch" });
    }
    let mut packer = Packer::new();
    let mut masked = Vec::with_capacity(texts.len());
    for t in texts {
        let m = mask_text(&t.tokens, policy, vocab, rng);
        let corrupted = TextInstance {
            tokens: m.tokens.clone(),
            source_id: t.source_id.clone(),
        };
        let input = shared.assemble_input(Some(&corrupted), None, opts.tags_enabled, opts.max_len)?;
        packer.push(input);
        masked.push(m);
    }
    let (mut batch, layouts) = packer.finish(BatchKind::TextOnly)?;
    for (m, layout) in masked.iter().zip(&layouts) {
        for (&pos, &target) in m.positions.iter().zip(&m.targets) {
            batch.word_positions.push(layout.text_pos(pos));
            batch.word_targets.push(target);
        }
    }
    batch.validate()?;
    Ok(batch)
}

fn collect_image_targets<S: Scalar>(
    batch: &mut MaskedBatch<S>,
    masked: &MaskedImage,
    layout: &Layout,
) {
    for (k, &j) in masked.masked_regions.iter().enumerate() {
        batch.region_positions.push(layout.region_pos(j));
        batch.feature_targets.push(masked.feature_targets[k].clone());
        batch.label_targets.push(masked.label_targets[k]);
    }
    for (k, &(j, s)) in masked.masked_tags.iter().enumerate() {
        let (start, len) = layout.tag_spans[j];
        debug_assert!(s < len);
        batch.tag_positions.push(start + s);
        batch.tag_targets.push(masked.tag_targets[k]);
    }
}

pub fn build_image_batch<S: Scalar>(
    shared: &SharedEmbeddingParams<S>,
    images: &[&ImageInstance],
    policy: &MaskingPolicy,
    vocab: &Vocab,
    opts: &BatchOptions,
    rng: &mut impl Rng,
) -> Result<MaskedBatch<S>> {
    if images.is_empty() {
        return Err(CoreError::EmptyDimension { what: "image batch" });
    }
    let mut packer = Packer::new();
    let mut masked = Vec::with_capacity(images.len());
    for img in images {
        let m = mask_image(img, policy, vocab, opts.tags_enabled, rng);
        let input = shared.assemble_input(None, Some(&m.image), opts.tags_enabled, opts.max_len)?;
        packer.push(input);
        masked.push(m);
    }
    let (mut batch, layouts) = packer.finish(BatchKind::ImageOnly)?;
    for (m, layout) in masked.iter().zip(&layouts) {
        collect_image_targets(&mut batch, m, layout);
    }
    batch.validate()?;
    Ok(batch)
}

/// Paired batch with the text-image match objective: each instance keeps its
/// caption with probability `1 - mismatch_prob`, otherwise the caption is
/// swapped for another batch member's (label 0). Masking applies after the
/// swap. With a single-instance batch there is nothing to swap against, so
/// the pair stays matched.
pub fn build_paired_batch<S: Scalar>(
    shared: &SharedEmbeddingParams<S>,
    pairs: &[(&TextInstance, &ImageInstance)],
    policy: &MaskingPolicy,
    vocab: &Vocab,
    opts: &BatchOptions,
    rng: &mut impl Rng,
) -> Result<MaskedBatch<S>> {
    if pairs.is_empty() {
        return Err(CoreError::EmptyDimension { what: "paired batch" });
    }
    let mut labels = Vec::with_capacity(pairs.len());
    let mut texts: Vec<&TextInstance> = Vec::with_capacity(pairs.len());
    for (i, (t, _)) in pairs.iter().enumerate() {
        let mismatch =
            opts.match_enabled && pairs.len() > 1 && rng.gen_bool(opts.mismatch_prob);
        if mismatch {
            let mut j = rng.gen_range(0..pairs.len() - 1);
            if j >= i {
                j += 1;
            }
            texts.push(pairs[j].0);
            labels.push(0.0);
        } else {
            texts.push(t);
            labels.push(1.0);
        }
    }

    let mut packer = Packer::new();
    let mut masked_texts = Vec::with_capacity(pairs.len());
    let mut masked_images = Vec::with_capacity(pairs.len());
    for (i, (_, img)) in pairs.iter().enumerate() {
        let mt = mask_text(&texts[i].tokens, policy, vocab, rng);
        let mi = mask_image(img, policy, vocab, opts.tags_enabled, rng);
        let corrupted = TextInstance {
            tokens: mt.tokens.clone(),
            source_id: texts[i].source_id.clone(),
        };
        let input = shared.assemble_input(
            Some(&corrupted),
            Some(&mi.image),
            opts.tags_enabled,
            opts.max_len,
        )?;
        packer.push(input);
        masked_texts.push(mt);
        masked_images.push(mi);
    }
    let (mut batch, layouts) = packer.finish(BatchKind::Paired)?;
    for ((mt, mi), layout) in masked_texts.iter().zip(&masked_images).zip(&layouts) {
        for (&pos, &target) in mt.positions.iter().zip(&mt.targets) {
            batch.word_positions.push(layout.text_pos(pos));
            batch.word_targets.push(target);
        }
        collect_image_targets(&mut batch, mi, layout);
    }
    if opts.match_enabled {
        batch.match_labels = Some(labels);
    }
    batch.validate()?;
    Ok(batch)
}

/// Packed unmasked inputs (fine-tuning and evaluation assemble these).
pub struct PackedInput<S: Scalar> {
    pub embeddings: Tensor<S>,
    pub attn_mask: Vec<bool>,
    pub segments: Vec<(usize, usize)>,
    pub layouts: Vec<Layout>,
}

pub fn pack_unmasked<S: Scalar>(
    shared: &SharedEmbeddingParams<S>,
    items: &[(Option<&TextInstance>, Option<&ImageInstance>)],
    tags_enabled: bool,
    max_len: usize,
) -> Result<PackedInput<S>> {
    if items.is_empty() {
        return Err(CoreError::EmptyDimension { what: "packed batch" });
    }
    let mut packer = Packer::new();
    for (text, image) in items {
        let input = shared.assemble_input(*text, *image, tags_enabled, max_len)?;
        packer.push(input);
    }
    let embeddings = Tensor::concat_rows(&packer.blocks)?;
    Ok(PackedInput {
        embeddings,
        attn_mask: packer.mask,
        segments: packer.segments,
        layouts: packer.layouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::world::{generate_world, WorldSpec};

    fn world() -> crate::world::WorldModel {
        generate_world(&WorldSpec::default(), 99).unwrap()
    }

    #[test]
    fn ratio_validation() {
        assert!(MaskingPolicy::default().validate().is_ok());
        let bad = MaskingPolicy {
            replace_mask: 0.5,
            replace_random: 0.2,
            keep: 0.2,
            ..MaskingPolicy::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_probability_masks_nothing() {
        let w = world();
        let policy = MaskingPolicy {
            text_mask_prob: 0.0,
            region_mask_prob: 0.0,
            tag_mask_prob: 0.0,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(1);
        let t = w.sample_text(&mut rng, "t");
        let m = mask_text(&t.tokens, &policy, &w.vocab, &mut rng);
        assert!(m.positions.is_empty());
        assert_eq!(m.tokens, t.tokens);

        let img = w.sample_image(&mut rng, "i");
        let mi = mask_image(&img, &policy, &w.vocab, true, &mut rng);
        assert!(mi.masked_regions.is_empty() && mi.masked_tags.is_empty());
        assert_eq!(mi.image, img);
    }

    #[test]
    fn full_probability_masks_everything_with_mask_token() {
        let w = world();
        let policy = MaskingPolicy {
            text_mask_prob: 1.0,
            replace_mask: 1.0,
            replace_random: 0.0,
            keep: 0.0,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(2);
        let t = w.sample_text(&mut rng, "t");
        let m = mask_text(&t.tokens, &policy, &w.vocab, &mut rng);
        assert_eq!(m.positions.len(), t.tokens.len());
        assert!(m.tokens.iter().all(|&tok| tok == w.vocab.mask()));
        assert_eq!(m.targets, t.tokens);
    }

    #[test]
    fn at_least_one_position_is_forced_for_positive_probability() {
        let w = world();
        let policy = MaskingPolicy {
            text_mask_prob: 1e-9,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(3);
        for _ in 0..50 {
            let t = w.sample_text(&mut rng, "t");
            let m = mask_text(&t.tokens, &policy, &w.vocab, &mut rng);
            assert!(!m.positions.is_empty());
        }
    }

    #[test]
    fn empirical_text_mask_rate_tracks_policy() {
        let w = world();
        let policy = MaskingPolicy::default();
        let mut rng = rng_from_seed(4);
        // long sequences keep the force-one rule's bias negligible
        let tokens: Vec<usize> = (0..64).map(|i| w.class_tokens[i % w.class_tokens.len()]).collect();
        let mut selected = 0usize;
        let mut total = 0usize;
        while total < 100_000 {
            let m = mask_text(&tokens, &policy, &w.vocab, &mut rng);
            selected += m.positions.len();
            total += tokens.len();
        }
        let rate = selected as f64 / total as f64;
        assert!((rate - policy.text_mask_prob).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn masked_region_features_are_zeroed_at_exactly_the_masked_positions() {
        let w = world();
        let policy = MaskingPolicy {
            region_mask_prob: 0.5,
            tag_mask_prob: 0.0,
            joint_region_tag_mask: false,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(5);
        for _ in 0..100 {
            let img = w.sample_image(&mut rng, "i");
            let m = mask_image(&img, &policy, &w.vocab, true, &mut rng);
            for (j, region) in m.image.regions.iter().enumerate() {
                if m.masked_regions.contains(&j) {
                    assert!(region.feature.iter().all(|&x| x == 0.0));
                } else {
                    assert_eq!(region.feature, img.regions[j].feature);
                }
            }
            // targets keep the originals
            for (k, &j) in m.masked_regions.iter().enumerate() {
                assert_eq!(m.feature_targets[k], img.regions[j].feature);
                assert_eq!(m.label_targets[k], img.regions[j].detector_label);
            }
        }
    }

    #[test]
    fn joint_flag_forces_all_tag_subwords_of_masked_regions() {
        let w = world();
        let policy = MaskingPolicy {
            region_mask_prob: 0.5,
            tag_mask_prob: 0.0,
            joint_region_tag_mask: true,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(6);
        for _ in 0..100 {
            let mut img = w.sample_image(&mut rng, "i");
            img.regions[0].tag_tokens = vec![w.class_tokens[0], w.filler_tokens[0]];
            let m = mask_image(&img, &policy, &w.vocab, true, &mut rng);
            for &j in &m.masked_regions {
                for s in 0..img.regions[j].tag_tokens.len() {
                    assert!(
                        m.masked_tags.contains(&(j, s)),
                        "region {j} subword {s} not jointly masked"
                    );
                    assert_eq!(m.image.regions[j].tag_tokens[s], w.vocab.mask());
                }
            }
        }
    }

    #[test]
    fn tags_disabled_never_masks_tags() {
        let w = world();
        let policy = MaskingPolicy {
            tag_mask_prob: 1.0,
            ..MaskingPolicy::default()
        };
        let mut rng = rng_from_seed(7);
        let img = w.sample_image(&mut rng, "i");
        let m = mask_image(&img, &policy, &w.vocab, false, &mut rng);
        assert!(m.masked_tags.is_empty());
    }

    #[test]
    fn packed_batches_have_consistent_targets() {
        let w = world();
        let mut rng = rng_from_seed(8);
        let model = crate::model::Model::<f32>::init(
            crate::model::ModelConfig {
                vocab_size: w.vocab.size(),
                f_dim: w.spec.f_dim,
                num_detector_classes: w.spec.num_classes,
                encoder: crate::encoder::EncoderConfig {
                    layers: 1,
                    heads: 2,
                    hidden_dim: 8,
                    ffn_dim: 16,
                    max_positions: 64,
                },
                init_std: 0.05,
            },
            1,
        )
        .unwrap();
        let opts = BatchOptions {
            tags_enabled: true,
            max_len: 64,
            mismatch_prob: 0.5,
            match_enabled: true,
        };
        let pairs: Vec<_> = (0..6).map(|_| w.sample_pair(&mut rng, "p")).collect();
        let refs: Vec<(&TextInstance, &ImageInstance)> =
            pairs.iter().map(|(t, i)| (t, i)).collect();
        let batch = build_paired_batch(
            &model.shared,
            &refs,
            &MaskingPolicy::default(),
            &w.vocab,
            &opts,
            &mut rng,
        )
        .unwrap();
        batch.validate().unwrap();
        assert_eq!(batch.kind, BatchKind::Paired);
        assert_eq!(batch.segments.len(), 6);
        assert_eq!(batch.match_labels.as_ref().unwrap().len(), 6);
        let total: usize = batch.segments.iter().map(|&(_, l)| l).sum();
        assert_eq!(batch.embeddings.shape()[0], total);
        // word targets land on [MASK]-able rows, i.e. inside text ranges
        for &p in &batch.word_positions {
            assert!(batch.layouts.iter().any(|l| p >= l.text.0 && p < l.text.0 + l.text.1));
        }
    }

    #[test]
    fn mismatch_rate_is_half() {
        let w = world();
        let model_shared = {
            let mut rng = rng_from_seed(10);
            SharedEmbeddingParams::<f32>::init(w.vocab.size(), 8, 64, w.spec.f_dim, 0.05, &mut rng)
        };
        let opts = BatchOptions {
            tags_enabled: true,
            max_len: 64,
            mismatch_prob: 0.5,
            match_enabled: true,
        };
        let mut rng = rng_from_seed(11);
        let pairs: Vec<_> = (0..8).map(|_| w.sample_pair(&mut rng, "p")).collect();
        let refs: Vec<(&TextInstance, &ImageInstance)> =
            pairs.iter().map(|(t, i)| (t, i)).collect();
        let mut mismatches = 0usize;
        let mut total = 0usize;
        for _ in 0..1500 {
            let batch = build_paired_batch(
                &model_shared,
                &refs,
                &MaskingPolicy::default(),
                &w.vocab,
                &opts,
                &mut rng,
            )
            .unwrap();
            for &l in batch.match_labels.as_ref().unwrap() {
                total += 1;
                if l == 0.0 {
                    mismatches += 1;
                }
            }
        }
        let rate = mismatches as f64 / total as f64;
        assert!((rate - 0.5).abs() < 0.02, "mismatch rate {rate}");
    }
}
