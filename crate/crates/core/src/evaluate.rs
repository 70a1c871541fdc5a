//! Downstream evaluation: caption-to-image retrieval and referring
//! expressions, plus the synthetic task generators they run on.

use crate::embed::{BBox, ImageInstance, TextInstance, Vocab};
use crate::error::Result;
use crate::masking::pack_unmasked;
use crate::model::Model;
use crate::world::WorldModel;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub queries: usize,
}

/// Recall@k from a dense score matrix (`scores[i][j]` = caption i vs image
/// j); the gold image of caption i is image i. Ties break toward the lower
/// image index, which counts against the gold when an earlier image ties it.
pub fn recall_from_scores(scores: &[Vec<f32>]) -> RetrievalMetrics {
    let n = scores.len();
    let mut hits = [0usize; 3];
    for (i, row) in scores.iter().enumerate() {
        let gold = row[i];
        let mut rank = 0usize;
        for (j, &s) in row.iter().enumerate() {
            if s > gold || (s == gold && j < i) {
                rank += 1;
            }
        }
        for (slot, k) in [(0, 1), (1, 5), (2, 10)] {
            if rank < k {
                hits[slot] += 1;
            }
        }
    }
    RetrievalMetrics {
        r_at_1: hits[0] as f64 / n as f64,
        r_at_5: hits[1] as f64 / n as f64,
        r_at_10: hits[2] as f64 / n as f64,
        queries: n,
    }
}

/// Match score (raw logit) for every (caption, image) pair of the eval set.
pub fn retrieval_score_matrix(
    model: &Model<f32>,
    eval_pairs: &[(TextInstance, ImageInstance)],
    tags_enabled: bool,
) -> Result<Vec<Vec<f32>>> {
    let n = eval_pairs.len();
    let max_len = model.config.encoder.max_positions;
    let mut scores = vec![vec![0.0f32; n]; n];
    // scoring is read-only; batch the image axis to amortize packing
    const CHUNK: usize = 16;
    for i in 0..n {
        let text = &eval_pairs[i].0;
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let items: Vec<(Option<&TextInstance>, Option<&ImageInstance>)> = (start..end)
                .map(|j| (Some(text), Some(&eval_pairs[j].1)))
                .collect();
            let packed = pack_unmasked(&model.shared, &items, tags_enabled, max_len)?;
            let hidden =
                model.forward_packed(&packed.embeddings, &packed.attn_mask, &packed.segments)?;
            let cls_rows: Vec<usize> = packed.layouts.iter().map(|l| l.cls).collect();
            let pooled = model.encoder.pooled_cls(&hidden, &cls_rows)?;
            let logits = model.match_logits(&pooled)?;
            for (k, j) in (start..end).enumerate() {
                scores[i][j] = logits.value(k);
            }
        }
    }
    Ok(scores)
}

/// Rank every image for every caption by match score; R@k = fraction of
/// captions whose own image lands in the top k.
pub fn eval_retrieval(
    model: &Model<f32>,
    eval_pairs: &[(TextInstance, ImageInstance)],
    tags_enabled: bool,
) -> Result<RetrievalMetrics> {
    if eval_pairs.len() < 10 {
        return Err(crate::CoreError::Config(format!(
            "retrieval eval needs >= 10 pairs, got {}",
            eval_pairs.len()
        )));
    }
    let scores = retrieval_score_matrix(model, eval_pairs, tags_enabled)?;
    Ok(recall_from_scores(&scores))
}

/// One referring-expression instance: a phrase naming a class, proposal
/// regions (the image's own regions plus jittered decoys), and the gold box.
#[derive(Debug, Clone)]
pub struct ReferringInstance {
    pub phrase: TextInstance,
    pub proposals: ImageInstance,
    pub gold: BBox,
    pub gold_class: usize,
}

pub const IOU_THRESHOLD: f32 = 0.5;

/// Sample a referring instance whose target class appears exactly once among
/// the true regions, so the phrase is unambiguous. Proposals are the image's
/// own regions plus one distractor per region: a different-class feature at
/// a fresh box, so localization is decided by grounding rather than by
/// box-geometry accidents.
pub fn sample_referring(
    world: &WorldModel,
    rng: &mut impl Rng,
    source: &str,
) -> ReferringInstance {
    loop {
        let (img, truth) = world.sample_image_with_truth(rng, source);
        let unique: Vec<usize> = (0..truth.len())
            .filter(|&j| truth.iter().filter(|&&c| c == truth[j]).count() == 1)
            .collect();
        if unique.is_empty() {
            continue;
        }
        let target = unique[rng.gen_range(0..unique.len())];
        let gold = img.regions[target].bbox;
        let gold_class = truth[target];

        // phrase: the class word with a little filler context
        let mut tokens = Vec::new();
        if !world.filler_tokens.is_empty() {
            for _ in 0..rng.gen_range(0..=2) {
                tokens.push(world.filler_tokens[rng.gen_range(0..world.filler_tokens.len())]);
            }
        }
        // referring phrases name the detector-vocabulary word for the class
        let slot = rng.gen_range(0..=tokens.len());
        tokens.insert(slot, world.class_tokens[gold_class]);

        // proposals: true regions, then per region one distractor drawn from
        // a different class (phrase class excluded)
        let mut proposals = img.clone();
        for _ in 0..img.regions.len() {
            let mut other = rng.gen_range(0..world.spec.num_classes - 1);
            if other >= gold_class {
                other += 1;
            }
            let (decoy_img, _) = world.sample_image_with_truth(rng, source);
            let mut decoy = decoy_img.regions[0].clone();
            let sigma = world.spec.feature_noise_sigma;
            decoy.feature = world.centers[other]
                .iter()
                .map(|&c| c + (crate::rng::sample_normal(rng) * sigma) as f32)
                .collect();
            decoy.detector_label = other;
            decoy.tag_tokens = vec![world.class_tokens[other]];
            proposals.regions.push(decoy);
        }
        return ReferringInstance {
            phrase: TextInstance {
                tokens,
                source_id: source.to_string(),
            },
            proposals,
            gold,
            gold_class,
        };
    }
}

/// Per-proposal referring logits for one instance.
pub fn referring_scores(
    model: &Model<f32>,
    instance: &ReferringInstance,
    tags_enabled: bool,
) -> Result<Vec<f32>> {
    let packed = pack_unmasked(
        &model.shared,
        &[(Some(&instance.phrase), Some(&instance.proposals))],
        tags_enabled,
        model.config.encoder.max_positions,
    )?;
    let hidden = model.forward_packed(&packed.embeddings, &packed.attn_mask, &packed.segments)?;
    let layout = &packed.layouts[0];
    let rows: Vec<usize> = (0..layout.regions.1).map(|j| layout.region_pos(j)).collect();
    let region_rows = hidden.gather_rows(&rows)?;
    let logits = model.refer_logits(&region_rows)?;
    Ok(logits.to_vec())
}

/// Predicted proposal = argmax score (first index wins ties); correct iff its
/// IoU with the gold box exceeds the threshold.
pub fn eval_referring(
    model: &Model<f32>,
    instances: &[ReferringInstance],
    tags_enabled: bool,
) -> Result<f64> {
    let mut correct = 0usize;
    for inst in instances {
        let scores = referring_scores(model, inst, tags_enabled)?;
        let mut best = 0usize;
        for (j, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = j;
            }
        }
        if inst.proposals.regions[best].bbox.iou(&inst.gold) > IOU_THRESHOLD {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// Accuracy of an arbitrary scorer on referring instances (chance-level
/// calibration uses a seeded random scorer here).
pub fn eval_referring_scored(
    instances: &[ReferringInstance],
    mut score: impl FnMut(&ReferringInstance, usize) -> f32,
) -> f64 {
    let mut correct = 0usize;
    for inst in instances {
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for j in 0..inst.proposals.regions.len() {
            let s = score(inst, j);
            if s > best_score {
                best_score = s;
                best = j;
            }
        }
        if inst.proposals.regions[best].bbox.iou(&inst.gold) > IOU_THRESHOLD {
            correct += 1;
        }
    }
    correct as f64 / instances.len() as f64
}

/// Structured metric report written into run directories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub split: String,
    pub metrics: serde_json::Value,
    pub config_hash: String,
    pub checkpoint: String,
}

pub fn binary_targets(instance: &ReferringInstance) -> Vec<f32> {
    instance
        .proposals
        .regions
        .iter()
        .map(|r| {
            if r.bbox.iou(&instance.gold) > IOU_THRESHOLD {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn vocab_words_of(vocab: &Vocab, tokens: &[usize]) -> Vec<String> {
    tokens.iter().map(|&t| vocab.word(t).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, stream};
    use crate::world::{generate_world, WorldSpec};

    #[test]
    fn recall_of_oracle_scorer_is_one_and_monotone() {
        let n = 32;
        let mut scores = vec![vec![0.0f32; n]; n];
        for (i, row) in scores.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let m = recall_from_scores(&scores);
        assert_eq!(m.r_at_1, 1.0);
        assert_eq!(m.r_at_5, 1.0);
        assert_eq!(m.r_at_10, 1.0);
    }

    #[test]
    fn recall_of_random_scorer_sits_at_chance() {
        let n = 40;
        let mut rng = rng_from_seed(3);
        let trials = 200;
        let mut sum1 = 0.0;
        let mut sum5 = 0.0;
        for _ in 0..trials {
            let scores: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen::<f32>()).collect())
                .collect();
            let m = recall_from_scores(&scores);
            sum1 += m.r_at_1;
            sum5 += m.r_at_5;
            assert!(m.r_at_1 <= m.r_at_5 && m.r_at_5 <= m.r_at_10);
        }
        let mean1 = sum1 / trials as f64;
        let mean5 = sum5 / trials as f64;
        // 3-sigma binomial bounds around 1/n and 5/n
        let sd1 = (0.025f64 * 0.975 / (trials * n) as f64).sqrt();
        assert!((mean1 - 1.0 / n as f64).abs() < 3.0 * sd1, "{mean1}");
        let sd5 = (0.125f64 * 0.875 / (trials * n) as f64).sqrt();
        assert!((mean5 - 5.0 / n as f64).abs() < 3.0 * sd5, "{mean5}");
    }

    #[test]
    fn ties_break_by_stable_image_index() {
        // all scores equal: gold at index 0 ranks first, gold at index 9 ranks last
        let n = 10;
        let scores = vec![vec![0.5f32; n]; n];
        let m = recall_from_scores(&scores);
        // caption i's gold has rank i, so exactly 1 caption hits @1, 5 hit @5
        assert!((m.r_at_1 - 0.1).abs() < 1e-12);
        assert!((m.r_at_5 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn iou_closed_forms() {
        let unit = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        assert!(unit.iou(&unit) > IOU_THRESHOLD); // identical: IoU 1

        let disjoint = BBox::new(0.6, 0.6, 0.9, 0.9).unwrap();
        assert_eq!(unit.iou(&disjoint), 0.0);

        // half-shifted squares: intersection 1/2 * area, union 3/2 * area
        let a = BBox::new(0.0, 0.0, 0.4, 0.4).unwrap();
        let b = BBox::new(0.2, 0.0, 0.6, 0.4).unwrap();
        let iou = a.iou(&b);
        assert!((iou - 1.0 / 3.0).abs() < 1e-6);
        assert!(iou <= IOU_THRESHOLD); // 1/3 does not count as matched
    }

    #[test]
    fn referring_instances_are_well_formed() {
        let world = generate_world(&WorldSpec::default(), 21).unwrap();
        let mut rng = stream(5, "referring", 0);
        for _ in 0..50 {
            let inst = sample_referring(&world, &mut rng, "r");
            // gold box is among the proposals with IoU 1
            let targets = binary_targets(&inst);
            assert!(targets.iter().any(|&t| t == 1.0));
            assert_eq!(targets.len(), inst.proposals.regions.len());
            // phrase mentions the gold class exactly
            assert!(inst
                .phrase
                .tokens
                .contains(&world.class_tokens[inst.gold_class]));
            // proposals double the original regions
            assert_eq!(inst.proposals.regions.len() % 2, 0);
        }
    }

    #[test]
    fn random_referring_scorer_hits_near_valid_fraction() {
        let world = generate_world(&WorldSpec::default(), 22).unwrap();
        let mut rng = stream(6, "referring", 0);
        let instances: Vec<_> = (0..400)
            .map(|_| sample_referring(&world, &mut rng, "r"))
            .collect();
        // expected accuracy of a uniform scorer = mean fraction of valid proposals
        let expect: f64 = instances
            .iter()
            .map(|i| {
                let t = binary_targets(i);
                t.iter().sum::<f32>() as f64 / t.len() as f64
            })
            .sum::<f64>()
            / instances.len() as f64;
        let mut score_rng = rng_from_seed(7);
        let mut accs = Vec::new();
        for _ in 0..30 {
            let acc = eval_referring_scored(&instances, |_, _| score_rng.gen::<f32>());
            accs.push(acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sd = (expect * (1.0 - expect) / (instances.len() * accs.len()) as f64).sqrt();
        assert!(
            (mean - expect).abs() < 3.0 * sd.max(0.01),
            "mean {mean} vs expected {expect}"
        );
    }

    #[test]
    fn referring_eval_is_stable_under_proposal_permutation() {
        let world = generate_world(&WorldSpec::default(), 23).unwrap();
        let model = crate::model::Model::<f32>::init(
            crate::model::ModelConfig {
                vocab_size: world.vocab.size(),
                f_dim: world.spec.f_dim,
                num_detector_classes: world.spec.num_classes,
                encoder: crate::encoder::EncoderConfig {
                    layers: 1,
                    heads: 2,
                    hidden_dim: 16,
                    ffn_dim: 32,
                    max_positions: 64,
                },
                init_std: 0.05,
            },
            9,
        )
        .unwrap();
        let mut rng = stream(8, "referring", 0);
        let inst = sample_referring(&world, &mut rng, "r");
        let scores = referring_scores(&model, &inst, true).unwrap();

        // reverse the proposals and re-score: scores must follow the regions
        let mut reversed = inst.clone();
        reversed.proposals.regions.reverse();
        let scores_rev = referring_scores(&model, &reversed, true).unwrap();
        let n = scores.len();
        for j in 0..n {
            let diff = (scores[j] - scores_rev[n - 1 - j]).abs();
            assert!(diff < 1e-5, "proposal {j}: {diff}");
        }
    }
}
