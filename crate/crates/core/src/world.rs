//! Parameterized synthetic universe: a class inventory with separated
//! feature centers, a word-level vocabulary, and samplers for text segments,
//! images (region features + noisy detector tags), and aligned pairs.
//!
//! Everything is a pure function of `(spec, seed, rng stream)`, so corpora
//! and evaluation sets are reproducible byte for byte.

use crate::embed::{BBox, ImageInstance, Region, TextInstance, Vocab};
use crate::error::{CoreError, Result};
use crate::rng::{sample_normal, stream};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub num_filler_words: usize,
    /// Detector feature dimension.
    pub f_dim: usize,
    /// Per-coordinate Gaussian noise around class centers.
    pub feature_noise_sigma: f64,
    /// Probability a detector tag/label is replaced by a random *other* class.
    pub tag_noise: f64,
    pub regions_per_image: (usize, usize),
    pub tokens_per_text: (usize, usize),
    /// Probability a sampled text token is filler rather than a class word.
    pub filler_fraction: f64,
    /// Fraction of classes shared between the text-source and image-source
    /// distributions: 1 = identical marginals, 0 = disjoint.
    pub source_overlap: f64,
    pub max_regions: usize,
    /// Two surface words per class: detector tags use the tag word, paired
    /// captions use the synonym, and only the text corpus links them (topic
    /// co-occurrence). Kills string-level caption/tag matching, so grounding
    /// has to be learned.
    pub synonyms: bool,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            num_classes: 8,
            num_filler_words: 12,
            f_dim: 16,
            feature_noise_sigma: 0.5,
            tag_noise: 0.1,
            regions_per_image: (2, 5),
            tokens_per_text: (3, 8),
            filler_fraction: 0.5,
            source_overlap: 1.0,
            max_regions: 36,
            synonyms: false,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.f_dim == 0 {
            return bad("f_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.tag_noise) {
            return bad(format!("tag_noise {} must lie in [0, 1)", self.tag_noise));
        }
        if !(0.0..=1.0).contains(&self.filler_fraction) {
            return bad("filler_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.source_overlap) {
            return bad("source_overlap must lie in [0, 1]".into());
        }
        let (rlo, rhi) = self.regions_per_image;
        if rlo == 0 || rlo > rhi || rhi > self.max_regions {
            return bad(format!(
                "regions_per_image ({rlo}, {rhi}) must satisfy 1 <= lo <= hi <= max_regions {}",
                self.max_regions
            ));
        }
        let (tlo, thi) = self.tokens_per_text;
        if tlo == 0 || tlo > thi {
            return bad(format!("tokens_per_text ({tlo}, {thi}) invalid"));
        }
        Ok(())
    }
}

/// Realized world: vocabulary, class centers, and per-source class menus.
pub struct WorldModel {
    pub spec: WorldSpec,
    pub seed: u64,
    pub vocab: Vocab,
    /// Token id of each class's tag word (detector vocabulary).
    pub class_tokens: Vec<usize>,
    /// Token id of each class's caption synonym; empty unless the world has
    /// synonyms enabled.
    pub synonym_tokens: Vec<usize>,
    /// Token ids of filler words.
    pub filler_tokens: Vec<usize>,
    /// Unit-normalized feature centers, one per class.
    pub centers: Vec<Vec<f32>>,
    /// Classes the text source draws from / the image source draws from.
    pub text_classes: Vec<usize>,
    pub image_classes: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "ro", "mi", "ta", "lu", "ne", "so", "vi", "pa", "ze", "du", "fo", "gi", "ha", "be", "yo",
];

fn synth_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())])
        .collect()
}

/// Deterministic world construction. Class centers are sampled on the unit
/// sphere and rejected until every pair is separated by more than twice the
/// feature noise.
pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<WorldModel> {
    spec.validate()?;
    let mut rng = stream(seed, "world", 0);

    // distinct pronounceable words: classes get 2 syllables, fillers 3
    let mut words = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let take = |rng: &mut rand_chacha::ChaCha8Rng, syll: usize, seen: &mut std::collections::BTreeSet<String>| {
        loop {
            let w = synth_word(rng, syll);
            if seen.insert(w.clone()) {
                return w;
            }
        }
    };
    for _ in 0..spec.num_classes {
        let w = take(&mut rng, 2, &mut seen);
        words.push(w);
    }
    if spec.synonyms {
        for _ in 0..spec.num_classes {
            let w = take(&mut rng, 2, &mut seen);
            words.push(w);
        }
    }
    for _ in 0..spec.num_filler_words {
        let w = take(&mut rng, 3, &mut seen);
        words.push(w);
    }
    let vocab = Vocab::with_specials(words)?;
    let class_tokens: Vec<usize> = (0..spec.num_classes)
        .map(|c| vocab.first_content() + c)
        .collect();
    let synonym_tokens: Vec<usize> = if spec.synonyms {
        (0..spec.num_classes)
            .map(|c| vocab.first_content() + spec.num_classes + c)
            .collect()
    } else {
        Vec::new()
    };
    let word_classes = if spec.synonyms { 2 } else { 1 } * spec.num_classes;
    let filler_tokens: Vec<usize> = (0..spec.num_filler_words)
        .map(|i| vocab.first_content() + word_classes + i)
        .collect();

    let min_sep = 2.0 * spec.feature_noise_sigma;
    let mut centers = Vec::new();
    'attempt: for attempt in 0..200 {
        let _ = attempt;
        centers.clear();
        for _ in 0..spec.num_classes {
            let mut v: Vec<f64> = (0..spec.f_dim).map(|_| sample_normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            centers.push(v);
        }
        for i in 0..centers.len() {
            for j in 0..i {
                let dist: f64 = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if dist <= min_sep {
                    continue 'attempt;
                }
            }
        }
        let centers: Vec<Vec<f32>> = centers
            .iter()
            .map(|c| c.iter().map(|&x| x as f32).collect())
            .collect();

        let shared = (spec.source_overlap * spec.num_classes as f64).round() as usize;
        let shared = shared.min(spec.num_classes);
        let mut text_classes: Vec<usize> = (0..shared).collect();
        let mut image_classes: Vec<usize> = (0..shared).collect();
        // leftover classes alternate between the two exclusive pools
        for (i, c) in (shared..spec.num_classes).enumerate() {
            if i % 2 == 0 {
                text_classes.push(c);
            } else {
                image_classes.push(c);
            }
        }
        if text_classes.is_empty() {
            text_classes.push(0);
        }
        if image_classes.is_empty() {
            image_classes.push(spec.num_classes - 1);
        }

        return Ok(WorldModel {
            spec: spec.clone(),
            seed,
            vocab,
            class_tokens,
            synonym_tokens,
            filler_tokens,
            centers,
            text_classes,
            image_classes,
        });
    }
    Err(CoreError::WorldGeneration(format!(
        "could not separate {} class centers by {min_sep:.3} in {} dims after 200 attempts",
        spec.num_classes, spec.f_dim
    )))
}

impl WorldModel {
    pub fn class_of_token(&self, token: usize) -> Option<usize> {
        self.class_tokens
            .iter()
            .position(|&t| t == token)
            .or_else(|| self.synonym_tokens.iter().position(|&t| t == token))
    }

    /// The word paired captions use for a class: the synonym when the world
    /// has one, else the tag word itself.
    pub fn caption_token(&self, class: usize) -> usize {
        if self.spec.synonyms {
            self.synonym_tokens[class]
        } else {
            self.class_tokens[class]
        }
    }

    /// Either surface form of a class, uniformly.
    fn any_class_word(&self, class: usize, rng: &mut impl Rng) -> usize {
        if self.spec.synonyms && rng.gen_bool(0.5) {
            self.synonym_tokens[class]
        } else {
            self.class_tokens[class]
        }
    }

    /// Text segment. Without synonyms: filler and class words interleaved by
    /// coin flips. With synonyms: the segment sticks to one topic class, so
    /// a class's two surface forms co-occur and masked prediction links them.
    pub fn sample_text(&self, rng: &mut impl Rng, source: &str) -> TextInstance {
        let (lo, hi) = self.spec.tokens_per_text;
        let n = rng.gen_range(lo..=hi);
        let topic = self.text_classes[rng.gen_range(0..self.text_classes.len())];
        let tokens = (0..n)
            .map(|_| {
                if !self.filler_tokens.is_empty() && rng.gen_bool(self.spec.filler_fraction) {
                    self.filler_tokens[rng.gen_range(0..self.filler_tokens.len())]
                } else if self.spec.synonyms {
                    self.any_class_word(topic, rng)
                } else {
                    let c = self.text_classes[rng.gen_range(0..self.text_classes.len())];
                    self.class_tokens[c]
                }
            })
            .collect();
        TextInstance {
            tokens,
            source_id: source.to_string(),
        }
    }

    fn sample_box(&self, rng: &mut impl Rng) -> BBox {
        loop {
            let x1: f32 = rng.gen_range(0.0..0.9);
            let y1: f32 = rng.gen_range(0.0..0.9);
            let x2: f32 = rng.gen_range((x1 + 0.05).min(0.99)..=1.0);
            let y2: f32 = rng.gen_range((y1 + 0.05).min(0.99)..=1.0);
            if let Ok(b) = BBox::new(x1, y1, x2, y2) {
                return b;
            }
        }
    }

    fn sample_region(&self, class: usize, rng: &mut impl Rng) -> Region {
        let sigma = self.spec.feature_noise_sigma;
        let feature = self.centers[class]
            .iter()
            .map(|&c| c + (sample_normal(rng) * sigma) as f32)
            .collect();
        let bbox = self.sample_box(rng);
        // detector output: truthful with prob 1 - p, else a random OTHER class
        let detected = if self.spec.tag_noise > 0.0 && rng.gen_bool(self.spec.tag_noise) {
            let mut other = rng.gen_range(0..self.spec.num_classes - 1);
            if other >= class {
                other += 1;
            }
            other
        } else {
            class
        };
        Region {
            feature,
            bbox,
            tag_tokens: vec![self.class_tokens[detected]],
            detector_label: detected,
            detector_confidence: rng.gen_range(0.5..1.0),
        }
    }

    /// Image plus the true class of each region (the instance itself only
    /// carries the detector's noisy view).
    pub fn sample_image_with_truth(
        &self,
        rng: &mut impl Rng,
        source: &str,
    ) -> (ImageInstance, Vec<usize>) {
        let (lo, hi) = self.spec.regions_per_image;
        let m = rng.gen_range(lo..=hi);
        let mut truth = Vec::with_capacity(m);
        let regions = (0..m)
            .map(|_| {
                let class = self.image_classes[rng.gen_range(0..self.image_classes.len())];
                truth.push(class);
                self.sample_region(class, rng)
            })
            .collect();
        (
            ImageInstance {
                regions,
                source_id: source.to_string(),
            },
            truth,
        )
    }

    pub fn sample_image(&self, rng: &mut impl Rng, source: &str) -> ImageInstance {
        self.sample_image_with_truth(rng, source).0
    }

    /// Aligned pair: the caption's class words are drawn from the image's
    /// true region classes (at least one mention guaranteed).
    pub fn sample_pair_with_truth(
        &self,
        rng: &mut impl Rng,
        source: &str,
    ) -> (TextInstance, ImageInstance, Vec<usize>) {
        let (image, truth) = self.sample_image_with_truth(rng, source);
        let (lo, hi) = self.spec.tokens_per_text;
        let n = rng.gen_range(lo..=hi);
        let mut tokens: Vec<usize> = (0..n)
            .map(|_| {
                if !self.filler_tokens.is_empty() && rng.gen_bool(self.spec.filler_fraction) {
                    self.filler_tokens[rng.gen_range(0..self.filler_tokens.len())]
                } else {
                    self.caption_token(truth[rng.gen_range(0..truth.len())])
                }
            })
            .collect();
        // force at least one class mention so alignment holds by construction
        if !tokens.iter().any(|t| self.class_of_token(*t).is_some()) {
            let slot = rng.gen_range(0..tokens.len());
            tokens[slot] = self.caption_token(truth[rng.gen_range(0..truth.len())]);
        }
        (
            TextInstance {
                tokens,
                source_id: source.to_string(),
            },
            image,
            truth,
        )
    }

    pub fn sample_pair(&self, rng: &mut impl Rng, source: &str) -> (TextInstance, ImageInstance) {
        let (t, i, _) = self.sample_pair_with_truth(rng, source);
        (t, i)
    }
}
