//! Input embedding for text, image regions, and detector tags.
//!
//! Parameter sharing is the load-bearing design here: tag subwords and text
//! subwords look up the *same* token embedding matrix, and a tag's coordinate
//! embedding is its region's box pushed through the *same* projection. Region
//! and tag rows carry no sequential position embedding, so image blocks are
//! permutation-equivariant; only the text block is position-indexed.

use crate::error::{CoreError, Result};
use crate::rng::{fnv1a64, sample_normal};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const MASK_TOKEN: &str = "[MASK]";
const NUM_SPECIALS: usize = 3;

pub const SEG_TEXT: usize = 0;
pub const SEG_VISUAL: usize = 1;

/// Word-level vocabulary shared by text tokens and detector tags.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from content words; specials are prepended.
    pub fn with_specials(content: impl IntoIterator<Item = String>) -> Result<Vocab> {
        let mut words = vec![
            CLS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
        ];
        words.extend(content);
        Vocab::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Result<Vocab> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(CoreError::Config(format!("duplicate vocab word `{w}`")));
            }
        }
        Ok(Vocab { words, index })
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn cls(&self) -> usize {
        0
    }

    pub fn sep(&self) -> usize {
        1
    }

    pub fn mask(&self) -> usize {
        2
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < NUM_SPECIALS
    }

    /// First non-special id; content ids are `first_content()..size()`.
    pub fn first_content(&self) -> usize {
        NUM_SPECIALS
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.words.join("\n").as_bytes())
    }
}

/// Axis-aligned box, all coordinates normalized to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Result<BBox> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason| CoreError::InvalidBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
            reason,
        };
        if !(self.x1 < self.x2) {
            return Err(bad("x1 must be < x2"));
        }
        if !(self.y1 < self.y2) {
            return Err(bad("y1 must be < y2"));
        }
        if [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .any(|&c| !(0.0..=1.0).contains(&c))
        {
            return Err(bad("coordinates must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn iou(&self, other: &BBox) -> f32 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// The 5-vector fed to the coordinate projection.
    pub fn features(&self) -> [f32; 5] {
        [self.x1, self.y1, self.x2, self.y2, self.area()]
    }
}

/// One text segment: word-level token ids into the shared vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TextInstance {
    pub tokens: Vec<usize>,
    pub source_id: String,
}

/// One detected region: dense feature, box, and the detector's (noisy) tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Vec<f32>,
    pub bbox: BBox,
    /// Tag as subword ids; always at least one, drawn from the text vocab.
    pub tag_tokens: Vec<usize>,
    pub detector_label: usize,
    pub detector_confidence: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageInstance {
    pub regions: Vec<Region>,
    pub source_id: String,
}

impl ImageInstance {
    pub fn total_tag_len(&self) -> usize {
        self.regions.iter().map(|r| r.tag_tokens.len()).sum()
    }
}

/// All embedding-side parameters, each existing exactly once.
pub struct SharedEmbeddingParams<S: Scalar> {
    /// `[V, d]`; looked up by text tokens AND tag subwords AND (transposed)
    /// by the prediction softmax.
    pub token_embedding: Tensor<S>,
    /// `[P, d]`; text block only.
    pub position_embedding: Tensor<S>,
    /// `[2, d]`; text vs visual.
    pub segment_embedding: Tensor<S>,
    /// Coordinate projection `[5, d]` + bias, shared by regions and tags.
    pub box_w: Tensor<S>,
    pub box_b: Tensor<S>,
    /// Detector-feature projection `[f_dim, d]` + bias.
    pub feat_w: Tensor<S>,
    pub feat_b: Tensor<S>,
}

pub(crate) fn init_matrix<S: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(sample_normal(rng) * std))
        .collect();
    Tensor::parameter(shape, data).expect("shape/data constructed together")
}

impl<S: Scalar> SharedEmbeddingParams<S> {
    pub fn init(
        vocab_size: usize,
        hidden_dim: usize,
        max_positions: usize,
        f_dim: usize,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        SharedEmbeddingParams {
            token_embedding: init_matrix(rng, vec![vocab_size, hidden_dim], init_std),
            position_embedding: init_matrix(rng, vec![max_positions, hidden_dim], init_std),
            segment_embedding: init_matrix(rng, vec![2, hidden_dim], init_std),
            box_w: init_matrix(rng, vec![5, hidden_dim], init_std),
            box_b: Tensor::parameter(vec![hidden_dim], vec![S::ZERO; hidden_dim]).unwrap(),
            feat_w: init_matrix(rng, vec![f_dim, hidden_dim], init_std),
            feat_b: Tensor::parameter(vec![hidden_dim], vec![S::ZERO; hidden_dim]).unwrap(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.token_embedding.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.shape()[0]
    }

    pub fn f_dim(&self) -> usize {
        self.feat_w.shape()[0]
    }

    fn segment_rows(&self, segment: usize, n: usize) -> Result<Tensor<S>> {
        self.segment_embedding.gather_rows(&vec![segment; n])
    }

    /// Coordinate embedding of a list of boxes: `[x1,y1,x2,y2,area] . W + b`.
    /// Regions and tag subwords both go through here, so a tag's coordinate
    /// row is bitwise identical to its region's.
    pub fn coordinate_embedding(&self, boxes: &[BBox]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(boxes.len() * 5);
        for b in boxes {
            b.validate()?;
            data.extend(b.features().iter().map(|&v| S::from_f32(v)));
        }
        let coords = Tensor::constant(vec![boxes.len(), 5], data)?;
        coords.matmul(&self.box_w)?.add_bias(&self.box_b)
    }

    /// Text rows: token + position + segment(A), positions indexed from 0.
    pub fn embed_text(&self, t: &TextInstance) -> Result<Tensor<S>> {
        self.embed_tokens_at(&t.tokens, 0)
    }

    fn embed_tokens_at(&self, tokens: &[usize], first_position: usize) -> Result<Tensor<S>> {
        if tokens.is_empty() {
            return Err(CoreError::EmptyDimension { what: "text tokens" });
        }
        let max_pos = self.position_embedding.shape()[0];
        let last = first_position + tokens.len() - 1;
        if last >= max_pos {
            return Err(CoreError::InputTooLong {
                len: last + 1,
                max: max_pos,
            });
        }
        let tok = self.token_embedding.gather_rows(tokens)?;
        let positions: Vec<usize> = (first_position..=last).collect();
        let pos = self.position_embedding.gather_rows(&positions)?;
        let seg = self.segment_rows(SEG_TEXT, tokens.len())?;
        tok.add(&pos)?.add(&seg)
    }

    /// Region rows: projected feature + coordinate + segment(B). No position
    /// embedding, so rows are a pointwise function of (feature, box).
    pub fn embed_regions(&self, img: &ImageInstance) -> Result<Tensor<S>> {
        if img.regions.is_empty() {
            return Err(CoreError::EmptyDimension { what: "image regions" });
        }
        let f_dim = self.f_dim();
        let mut feat_data = Vec::with_capacity(img.regions.len() * f_dim);
        for r in &img.regions {
            if r.feature.len() != f_dim {
                return Err(CoreError::ShapeMismatch {
                    op: "region feature",
                    left: vec![r.feature.len()],
                    right: vec![f_dim],
                });
            }
            feat_data.extend(r.feature.iter().map(|&v| S::from_f32(v)));
        }
        let feats = Tensor::constant(vec![img.regions.len(), f_dim], feat_data)?;
        let projected = feats.matmul(&self.feat_w)?.add_bias(&self.feat_b)?;
        let boxes: Vec<BBox> = img.regions.iter().map(|r| r.bbox).collect();
        let coords = self.coordinate_embedding(&boxes)?;
        let seg = self.segment_rows(SEG_VISUAL, img.regions.len())?;
        projected.add(&coords)?.add(&seg)
    }

    /// Tag rows: token + coordinate-of-owning-region + segment(B). Subwords
    /// of one tag share one coordinate row.
    pub fn embed_tags(&self, img: &ImageInstance, tags_enabled: bool) -> Result<Tensor<S>> {
        if !tags_enabled {
            return Err(CoreError::Contract(
                "embed_tags called with tags disabled".into(),
            ));
        }
        let mut tokens = Vec::new();
        let mut boxes = Vec::new();
        for r in &img.regions {
            if r.tag_tokens.is_empty() {
                return Err(CoreError::Contract("region with empty tag_tokens".into()));
            }
            for &t in &r.tag_tokens {
                tokens.push(t);
                boxes.push(r.bbox);
            }
        }
        let tok = self.token_embedding.gather_rows(&tokens)?;
        let coords = self.coordinate_embedding(&boxes)?;
        let seg = self.segment_rows(SEG_VISUAL, tokens.len())?;
        tok.add(&coords)?.add(&seg)
    }

    fn special_row(
        &self,
        token: usize,
        segment: usize,
        position: Option<usize>,
    ) -> Result<Tensor<S>> {
        let tok = self.token_embedding.gather_rows(&[token])?;
        let seg = self.segment_rows(segment, 1)?;
        let row = tok.add(&seg)?;
        match position {
            Some(p) => {
                let pos = self.position_embedding.gather_rows(&[p])?;
                row.add(&pos)
            }
            None => Ok(row),
        }
    }
}

/// Index ranges of each block inside an assembled input, used to route loss
/// targets. All ranges are `(start, len)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub len: usize,
    pub cls: usize,
    /// Text tokens, exclusive of [CLS] / [SEP].
    pub text: (usize, usize),
    pub text_sep: Option<usize>,
    pub regions: (usize, usize),
    /// The whole tag block.
    pub tags: (usize, usize),
    /// Per region: absolute rows of its tag subwords.
    pub tag_spans: Vec<(usize, usize)>,
    pub visual_sep: Option<usize>,
}

impl Layout {
    pub fn text_pos(&self, i: usize) -> usize {
        debug_assert!(i < self.text.1);
        self.text.0 + i
    }

    pub fn region_pos(&self, j: usize) -> usize {
        debug_assert!(j < self.regions.1);
        self.regions.0 + j
    }

    /// Shift every index by `delta` (packing multiple inputs into one batch).
    pub fn offset(&self, delta: usize) -> Layout {
        let sh = |(s, l): (usize, usize)| (s + delta, l);
        Layout {
            len: self.len,
            cls: self.cls + delta,
            text: sh(self.text),
            text_sep: self.text_sep.map(|p| p + delta),
            regions: sh(self.regions),
            tags: sh(self.tags),
            tag_spans: self.tag_spans.iter().map(|&sp| sh(sp)).collect(),
            visual_sep: self.visual_sep.map(|p| p + delta),
        }
    }
}

/// An assembled (possibly masked) model input.
pub struct MaskableInput<S: Scalar> {
    pub embeddings: Tensor<S>,
    pub attn_mask: Vec<bool>,
    pub layout: Layout,
}

impl<S: Scalar> SharedEmbeddingParams<S> {
    /// Build `[CLS] text [SEP] regions tags [SEP]`, omitting absent modality
    /// blocks. [CLS] always opens the sequence (position 0 of the text
    /// indexing) so the match head is well-defined on any input.
    pub fn assemble_input(
        &self,
        text: Option<&TextInstance>,
        image: Option<&ImageInstance>,
        tags_enabled: bool,
        max_len: usize,
    ) -> Result<MaskableInput<S>> {
        if text.is_none() && image.is_none() {
            return Err(CoreError::Contract(
                "assemble_input needs at least one modality".into(),
            ));
        }

        let mut blocks: Vec<Tensor<S>> = Vec::new();
        let mut cursor = 0usize;

        // Text block, [CLS]-first. The trailing [SEP] belongs to the text
        // block and is omitted with it.
        let (text_range, text_sep) = match text {
            Some(t) => {
                let mut tokens = Vec::with_capacity(t.tokens.len() + 2);
                tokens.push(0); // CLS
                tokens.extend_from_slice(&t.tokens);
                tokens.push(1); // SEP
                blocks.push(self.embed_tokens_at(&tokens, 0)?);
                let range = (cursor + 1, t.tokens.len());
                let sep = cursor + 1 + t.tokens.len();
                cursor = sep + 1;
                (range, Some(sep))
            }
            None => {
                blocks.push(self.special_row(0, SEG_TEXT, Some(0))?);
                cursor += 1;
                ((cursor, 0), None)
            }
        };

        let mut region_range = (cursor, 0);
        let mut tag_range = (cursor, 0);
        let mut tag_spans = Vec::new();
        let mut visual_sep = None;
        if let Some(img) = image {
            blocks.push(self.embed_regions(img)?);
            region_range = (cursor, img.regions.len());
            cursor += img.regions.len();
            tag_range = (cursor, 0);
            if tags_enabled {
                let total = img.total_tag_len();
                if total > 0 {
                    blocks.push(self.embed_tags(img, true)?);
                    tag_range = (cursor, total);
                    let mut t = cursor;
                    for r in &img.regions {
                        tag_spans.push((t, r.tag_tokens.len()));
                        t += r.tag_tokens.len();
                    }
                    cursor += total;
                }
            }
            blocks.push(self.special_row(1, SEG_VISUAL, None)?);
            visual_sep = Some(cursor);
            cursor += 1;
        }

        if cursor > max_len {
            return Err(CoreError::InputTooLong {
                len: cursor,
                max: max_len,
            });
        }

        let embeddings = Tensor::concat_rows(&blocks)?;
        debug_assert_eq!(embeddings.shape()[0], cursor);
        Ok(MaskableInput {
            embeddings,
            attn_mask: vec![true; cursor],
            layout: Layout {
                len: cursor,
                cls: 0,
                text: text_range,
                text_sep,
                regions: region_range,
                tags: tag_range,
                tag_spans,
                visual_sep,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn shared(seed: u64) -> SharedEmbeddingParams<f64> {
        let mut rng = rng_from_seed(seed);
        SharedEmbeddingParams::init(12, 6, 16, 4, 0.5, &mut rng)
    }

    fn zero_shared() -> SharedEmbeddingParams<f64> {
        SharedEmbeddingParams {
            token_embedding: Tensor::parameter(vec![12, 6], vec![0.0; 72]).unwrap(),
            position_embedding: Tensor::parameter(vec![16, 6], vec![0.0; 96]).unwrap(),
            segment_embedding: Tensor::parameter(vec![2, 6], vec![0.0; 12]).unwrap(),
            box_w: Tensor::parameter(vec![5, 6], vec![0.0; 30]).unwrap(),
            box_b: Tensor::parameter(vec![6], vec![0.0; 6]).unwrap(),
            feat_w: Tensor::parameter(vec![4, 6], vec![0.0; 24]).unwrap(),
            feat_b: Tensor::parameter(vec![6], vec![0.0; 6]).unwrap(),
        }
    }

    fn region(tag: usize, bbox: BBox) -> Region {
        Region {
            feature: vec![0.1, -0.2, 0.3, 0.4],
            bbox,
            tag_tokens: vec![tag],
            detector_label: 0,
            detector_confidence: 0.9,
        }
    }

    fn image(regions: Vec<Region>) -> ImageInstance {
        ImageInstance {
            regions,
            source_id: "test".into(),
        }
    }

    #[test]
    fn zero_tables_embed_text_to_zero() {
        let p = zero_shared();
        let t = TextInstance {
            tokens: vec![3, 4, 5],
            source_id: "t".into(),
        };
        let e = p.embed_text(&t).unwrap();
        assert!(e.to_vec().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_tokens_differ_by_position_rows() {
        let p = shared(1);
        let t = TextInstance {
            tokens: vec![7, 7],
            source_id: "t".into(),
        };
        let e = p.embed_text(&t).unwrap();
        let pos = p.position_embedding.to_vec();
        let d = 6;
        for j in 0..d {
            let diff = e.value(j) - e.value(d + j);
            let expect = pos[j] - pos[d + j];
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn text_row_is_sum_of_three_lookups() {
        let p = shared(2);
        let t = TextInstance {
            tokens: vec![9, 3, 11],
            source_id: "t".into(),
        };
        let e = p.embed_text(&t).unwrap();
        let tok = p.token_embedding.to_vec();
        let pos = p.position_embedding.to_vec();
        let seg = p.segment_embedding.to_vec();
        let d = 6;
        for (i, &w) in t.tokens.iter().enumerate() {
            for j in 0..d {
                let expect = tok[w * d + j] + pos[i * d + j] + seg[SEG_TEXT * d + j];
                assert_eq!(e.value(i * d + j), expect);
            }
        }
    }

    #[test]
    fn embed_text_rejects_out_of_vocab_token() {
        let p = shared(3);
        let t = TextInstance {
            tokens: vec![12],
            source_id: "t".into(),
        };
        assert!(p.embed_text(&t).is_err());
    }

    #[test]
    fn zeroed_region_inputs_broadcast_visual_segment() {
        let mut p = zero_shared();
        let mut rng = rng_from_seed(4);
        p.segment_embedding = init_matrix(&mut rng, vec![2, 6], 1.0);
        let mut r = region(5, BBox::new(0.1, 0.1, 0.5, 0.5).unwrap());
        r.feature = vec![0.0; 4];
        let e = p.embed_regions(&image(vec![r])).unwrap();
        let seg = p.segment_embedding.to_vec();
        for j in 0..6 {
            assert_eq!(e.value(j), seg[SEG_VISUAL * 6 + j]);
        }
    }

    #[test]
    fn identical_regions_embed_identically_regardless_of_order() {
        let p = shared(5);
        let b = BBox::new(0.2, 0.3, 0.6, 0.9).unwrap();
        let img = image(vec![region(4, b), region(7, b), region(4, b)]);
        let e = p.embed_regions(&img).unwrap();
        for j in 0..6 {
            // rows 0 and 2 share feature and box
            assert_eq!(e.value(j), e.value(2 * 6 + j));
        }
        // permuting regions permutes rows exactly
        let img_perm = image(vec![
            img.regions[2].clone(),
            img.regions[0].clone(),
            img.regions[1].clone(),
        ]);
        let ep = p.embed_regions(&img_perm).unwrap();
        for j in 0..6 {
            assert_eq!(ep.value(j), e.value(2 * 6 + j));
            assert_eq!(ep.value(6 + j), e.value(j));
            assert_eq!(ep.value(2 * 6 + j), e.value(6 + j));
        }
    }

    #[test]
    fn region_row_matches_manual_recomputation() {
        let p = shared(6);
        let b = BBox::new(0.25, 0.1, 0.75, 0.6).unwrap();
        let img = image(vec![region(6, b)]);
        let e = p.embed_regions(&img).unwrap();
        let feat_w = p.feat_w.to_vec();
        let feat_b = p.feat_b.to_vec();
        let box_w = p.box_w.to_vec();
        let box_b = p.box_b.to_vec();
        let seg = p.segment_embedding.to_vec();
        let f5 = b.features();
        for j in 0..6 {
            let mut v = feat_b[j] + box_b[j] + seg[SEG_VISUAL * 6 + j];
            for (t, &fv) in img.regions[0].feature.iter().enumerate() {
                v += fv as f64 * feat_w[t * 6 + j];
            }
            for (t, &bv) in f5.iter().enumerate() {
                v += bv as f64 * box_w[t * 6 + j];
            }
            assert!((e.value(j) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tag_row_with_zero_token_equals_coordinate_plus_segment() {
        let p = shared(7);
        p.token_embedding.with_data_mut(|d| {
            for x in &mut d[5 * 6..6 * 6] {
                *x = 0.0;
            }
        });
        let b = BBox::new(0.3, 0.2, 0.8, 0.7).unwrap();
        let img = image(vec![region(5, b)]);
        let tags = p.embed_tags(&img, true).unwrap();
        let coord = p.coordinate_embedding(&[b]).unwrap();
        let seg = p.segment_embedding.to_vec();
        for j in 0..6 {
            assert_eq!(tags.value(j), coord.value(j) + seg[SEG_VISUAL * 6 + j]);
        }
    }

    #[test]
    fn same_tag_on_two_regions_differs_by_box_projection_exactly() {
        let p = shared(8);
        let b1 = BBox::new(0.1, 0.1, 0.4, 0.4).unwrap();
        let b2 = BBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        let img = image(vec![region(9, b1), region(9, b2)]);
        let tags = p.embed_tags(&img, true).unwrap();
        let coords = p.coordinate_embedding(&[b1, b2]).unwrap();
        for j in 0..6 {
            let diff = tags.value(j) - tags.value(6 + j);
            let expect = coords.value(j) - coords.value(6 + j);
            // token and segment rows cancel mathematically; the float
            // difference only matches to rounding
            assert!((diff - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_subword_tag_shares_one_coordinate_row() {
        let p = shared(9);
        let b = BBox::new(0.2, 0.2, 0.7, 0.8).unwrap();
        let mut r = region(4, b);
        r.tag_tokens = vec![4, 8]; // the two-subword fixture
        let img = image(vec![r]);
        let tags = p.embed_tags(&img, true).unwrap();
        assert_eq!(tags.shape(), &[2, 6]);
        let tok = p.token_embedding.to_vec();
        let coord = p.coordinate_embedding(&[b]).unwrap();
        let seg = p.segment_embedding.to_vec();
        for (row, &w) in [4usize, 8].iter().enumerate() {
            for j in 0..6 {
                let expect = tok[w * 6 + j] + coord.value(j) + seg[SEG_VISUAL * 6 + j];
                assert_eq!(tags.value(row * 6 + j), expect);
            }
        }
    }

    #[test]
    fn tag_coordinate_equals_region_coordinate_bitwise() {
        let p = shared(10);
        let boxes = [
            BBox::new(0.11, 0.22, 0.53, 0.64).unwrap(),
            BBox::new(0.05, 0.4, 0.45, 0.95).unwrap(),
        ];
        let region_coords = p.coordinate_embedding(&boxes).unwrap();
        // per-tag expansion: [b0, b0, b1] for tag lengths [2, 1]
        let tag_coords = p
            .coordinate_embedding(&[boxes[0], boxes[0], boxes[1]])
            .unwrap();
        for j in 0..6 {
            assert_eq!(tag_coords.value(j), region_coords.value(j));
            assert_eq!(tag_coords.value(6 + j), region_coords.value(j));
            assert_eq!(tag_coords.value(12 + j), region_coords.value(6 + j));
        }
    }

    #[test]
    fn embed_tags_disabled_is_contract_error() {
        let p = shared(11);
        let img = image(vec![region(3, BBox::new(0.1, 0.1, 0.2, 0.2).unwrap())]);
        assert!(matches!(
            p.embed_tags(&img, false),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn assemble_text_only_layout() {
        let p = shared(12);
        let t = TextInstance {
            tokens: vec![3, 4, 5],
            source_id: "t".into(),
        };
        let input = p.assemble_input(Some(&t), None, true, 64).unwrap();
        assert_eq!(input.layout.len, 5); // CLS + 3 + SEP
        assert_eq!(input.layout.text, (1, 3));
        assert_eq!(input.layout.text_sep, Some(4));
        assert_eq!(input.layout.regions.1, 0);
        assert_eq!(input.layout.tags.1, 0);
        assert_eq!(input.attn_mask.len(), 5);
    }

    #[test]
    fn assemble_image_only_layout_arithmetic() {
        let p = shared(13);
        let img = image(vec![
            region(3, BBox::new(0.1, 0.1, 0.3, 0.3).unwrap()),
            region(4, BBox::new(0.4, 0.4, 0.8, 0.8).unwrap()),
        ]);
        let input = p.assemble_input(None, Some(&img), true, 64).unwrap();
        // CLS + 2 regions + 2 single-token tags + SEP
        assert_eq!(input.layout.len, 6);
        assert_eq!(input.layout.regions, (1, 2));
        assert_eq!(input.layout.tags, (3, 2));
        assert_eq!(input.layout.tag_spans, vec![(3, 1), (4, 1)]);
        assert_eq!(input.layout.visual_sep, Some(5));
        // tags disabled drops the tag block
        let nt = p.assemble_input(None, Some(&img), false, 64).unwrap();
        assert_eq!(nt.layout.len, 4);
        assert_eq!(nt.layout.tags.1, 0);
    }

    #[test]
    fn assemble_paired_blocks_partition_the_sequence() {
        let p = shared(14);
        let t = TextInstance {
            tokens: vec![6, 7],
            source_id: "t".into(),
        };
        let mut r2 = region(8, BBox::new(0.5, 0.2, 0.9, 0.6).unwrap());
        r2.tag_tokens = vec![8, 9];
        let img = image(vec![region(5, BBox::new(0.1, 0.1, 0.4, 0.5).unwrap()), r2]);
        let input = p.assemble_input(Some(&t), Some(&img), true, 64).unwrap();
        let l = &input.layout;
        // blocks: cls | text | sep | regions | tags | sep
        let mut covered = vec![false; l.len];
        covered[l.cls] = true;
        for i in 0..l.text.1 {
            covered[l.text.0 + i] = true;
        }
        covered[l.text_sep.unwrap()] = true;
        for i in 0..l.regions.1 {
            covered[l.regions.0 + i] = true;
        }
        for i in 0..l.tags.1 {
            assert!(!covered[l.tags.0 + i], "tag block overlaps another block");
            covered[l.tags.0 + i] = true;
        }
        covered[l.visual_sep.unwrap()] = true;
        assert!(covered.iter().all(|&c| c), "blocks must cover [0, L)");
        assert_eq!(l.len, 1 + 2 + 1 + 2 + 3 + 1);
    }

    #[test]
    fn assemble_rejects_empty_input_and_overlong_input() {
        let p = shared(15);
        assert!(p.assemble_input(None, None, true, 64).is_err());
        let t = TextInstance {
            tokens: vec![3; 4],
            source_id: "t".into(),
        };
        assert!(matches!(
            p.assemble_input(Some(&t), None, true, 5),
            Err(CoreError::InputTooLong { .. })
        ));
    }

    #[test]
    fn bbox_validation_and_iou() {
        assert!(BBox::new(0.5, 0.1, 0.4, 0.2).is_err()); // x1 > x2
        assert!(BBox::new(0.1, 0.5, 0.2, 0.4).is_err()); // y1 > y2
        assert!(BBox::new(-0.1, 0.1, 0.5, 0.5).is_err());
        let a = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert!((a.iou(&a) - 1.0).abs() < 1e-7);
        let b = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(a.iou(&b), 0.0);
    }

    #[test]
    fn vocab_roundtrip_and_hash() {
        let v = Vocab::with_specials(["cat".into(), "dog".into()]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("[MASK]"), Some(2));
        assert_eq!(v.id("cat"), Some(3));
        assert_eq!(v.word(4), "dog");
        assert!(v.is_special(0) && !v.is_special(3));
        let v2 = Vocab::with_specials(["cat".into(), "dog".into()]).unwrap();
        assert_eq!(v.hash(), v2.hash());
        let v3 = Vocab::with_specials(["cat".into(), "fox".into()]).unwrap();
        assert_ne!(v.hash(), v3.hash());
        assert!(Vocab::with_specials(["cat".into(), "cat".into()]).is_err());
    }
}
