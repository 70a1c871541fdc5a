//! The pretraining loop: scheduler x masking x loss x backward x Adam,
//! with per-step metric records and per-epoch checkpoints. Single-threaded
//! over optimizer state; fully reproducible from the config seed.

use crate::embed::{ImageInstance, TextInstance, Vocab};
use crate::error::{CoreError, Result};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::masking::{
    build_image_batch, build_paired_batch, build_text_batch, BatchOptions, MaskedBatch,
    MaskingPolicy,
};
use crate::model::Model;
use crate::scheduler::{Regime, SchedulerState, Source};
use crate::tensor::{AdamConfig, AdamState, LrSchedule, Tensor};
use crate::rng::stream;
use serde::{Deserialize, Serialize};

/// Instance pools a pretraining run draws from. Which pools are live depends
/// on the regime; regime W decomposes any paired corpus into its text and
/// image halves (alignment discarded).
#[derive(Default, Clone)]
pub struct Corpora {
    pub texts: Vec<TextInstance>,
    pub images: Vec<ImageInstance>,
    pub pairs: Vec<(TextInstance, ImageInstance)>,
    pub extra_images: Vec<ImageInstance>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub adam: AdamConfig,
    pub masking: MaskingPolicy,
    pub weights: LossWeights,
    pub tags_enabled: bool,
    /// Text-image match objective on paired batches.
    pub match_enabled: bool,
    /// When false, regime S processes each pair as separate text-only and
    /// image-only inputs within the step (objective additivity ablation).
    pub pairing_enabled: bool,
    pub mismatch_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            regime: Regime::W,
            epochs: 30,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_fraction: 0.1,
            adam: AdamConfig::default(),
            masking: MaskingPolicy::default(),
            weights: LossWeights::default(),
            tags_enabled: true,
            match_enabled: true,
            pairing_enabled: true,
            mismatch_prob: 0.5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Paper-scale preset, recorded for documentation; not used by the toy
    /// acceptance runs.
    pub fn real_scale() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 144,
            peak_lr: 6e-5,
            ..PretrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mismatch_prob) {
            return Err(CoreError::Config("mismatch_prob must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(CoreError::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub regime: String,
    pub batch_kind: String,
    pub lr: f32,
    pub loss_total: f32,
    pub loss_lm: f32,
    pub loss_regress: f32,
    pub loss_label: f32,
    pub loss_tag: f32,
    pub loss_match: f32,
}

pub trait TrainObserver {
    fn on_step(&mut self, record: &StepRecord);
    /// Called after each epoch with the epoch index (0-based).
    fn on_epoch_end(&mut self, _epoch: usize, _model: &Model<f32>) -> Result<()> {
        Ok(())
    }
}

/// No-op observer for callers that only want the final model.
pub struct NullObserver;

impl TrainObserver for NullObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
}

/// Collects records in memory (tests, reports).
#[derive(Default)]
pub struct RecordingObserver {
    pub records: Vec<StepRecord>,
}

impl TrainObserver for RecordingObserver {
    fn on_step(&mut self, record: &StepRecord) {
        self.records.push(record.clone());
    }
}

fn pools_for_regime(regime: Regime, corpora: &Corpora) -> Result<Vec<(Source, usize)>> {
    let pools = match regime {
        // W sees no pairing: paired corpora contribute their halves to the
        // unpaired pools.
        Regime::W => vec![
            (Source::Text, corpora.texts.len() + corpora.pairs.len()),
            (
                Source::Image,
                corpora.images.len() + corpora.pairs.len() + corpora.extra_images.len(),
            ),
        ],
        Regime::S => vec![
            (Source::Pair, corpora.pairs.len()),
            (Source::Text, corpora.texts.len()),
        ],
        Regime::H => vec![
            (Source::Pair, corpora.pairs.len()),
            (Source::Text, corpora.texts.len()),
            (Source::ExtraImage, corpora.extra_images.len()),
            (Source::Image, corpora.images.len()),
        ],
        Regime::Base => vec![],
    };
    Ok(pools)
}

/// Total optimizer steps one epoch takes (needed up front for the schedule).
pub fn steps_per_epoch(regime: Regime, corpora: &Corpora, batch_size: usize) -> Result<u64> {
    let pools = pools_for_regime(regime, corpora)?;
    Ok(pools
        .iter()
        .map(|(_, n)| n.div_ceil(batch_size) as u64)
        .sum())
}

struct TextView<'a> {
    own: &'a [TextInstance],
    from_pairs: &'a [(TextInstance, ImageInstance)],
}

impl<'a> TextView<'a> {
    fn get(&self, i: usize) -> &'a TextInstance {
        if i < self.own.len() {
            &self.own[i]
        } else {
            &self.from_pairs[i - self.own.len()].0
        }
    }
}

struct ImageView<'a> {
    own: &'a [ImageInstance],
    from_pairs: &'a [(TextInstance, ImageInstance)],
    extra: &'a [ImageInstance],
}

impl<'a> ImageView<'a> {
    fn get(&self, i: usize) -> &'a ImageInstance {
        if i < self.own.len() {
            &self.own[i]
        } else if i < self.own.len() + self.from_pairs.len() {
            &self.from_pairs[i - self.own.len()].1
        } else {
            &self.extra[i - self.own.len() - self.from_pairs.len()]
        }
    }
}

/// Run pretraining and return the number of optimizer steps taken.
///
/// Regime `Base` performs zero steps, leaving the model at initialization.
/// A non-finite loss aborts immediately, naming the offending term.
pub fn pretrain(
    model: &Model<f32>,
    corpora: &Corpora,
    config: &PretrainConfig,
    vocab: &Vocab,
    observer: &mut dyn TrainObserver,
) -> Result<u64> {
    config.validate()?;
    if config.regime == Regime::Base {
        observer.on_epoch_end(0, model)?;
        return Ok(0);
    }
    let params = model.named_parameters();
    let mut adam = AdamState::new(config.adam, &params);
    let per_epoch = steps_per_epoch(config.regime, corpora, config.batch_size)?;
    let total_steps = per_epoch * config.epochs as u64;
    if total_steps == 0 {
        return Err(CoreError::Config("no training data for regime".into()));
    }
    let schedule = LrSchedule::new(config.peak_lr, total_steps, config.warmup_fraction);
    let opts = BatchOptions {
        tags_enabled: config.tags_enabled,
        max_len: model.config.encoder.max_positions,
        mismatch_prob: config.mismatch_prob,
        match_enabled: config.match_enabled,
    };
    let text_view = TextView {
        own: &corpora.texts,
        from_pairs: if config.regime == Regime::W {
            &corpora.pairs
        } else {
            &[]
        },
    };
    let image_view = ImageView {
        own: &corpora.images,
        from_pairs: if config.regime == Regime::W {
            &corpora.pairs
        } else {
            &[]
        },
        extra: if config.regime == Regime::W {
            &corpora.extra_images
        } else {
            &[]
        },
    };

    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let mut sched_rng = stream(config.seed, "scheduler", epoch as u64);
        let mut mask_rng = stream(config.seed, "masking", epoch as u64);
        let pools = pools_for_regime(config.regime, corpora)?;
        let mut scheduler = SchedulerState::new(&pools, config.batch_size, &mut sched_rng)?;
        while let Some(sb) = scheduler.next_batch(&mut sched_rng) {
            let lr = schedule.lr_at(step);
            let breakdown = match sb.source {
                Source::Text => {
                    let texts: Vec<&TextInstance> =
                        sb.indices.iter().map(|&i| text_view.get(i)).collect();
                    let batch = build_text_batch(
                        &model.shared,
                        &texts,
                        &config.masking,
                        vocab,
                        &opts,
                        &mut mask_rng,
                    )?;
                    train_step(model, &params, &mut adam, &batch, config, lr)?
                }
                Source::Image | Source::ExtraImage => {
                    let images: Vec<&ImageInstance> = match sb.source {
                        Source::Image => sb.indices.iter().map(|&i| image_view.get(i)).collect(),
                        _ => sb.indices.iter().map(|&i| &corpora.extra_images[i]).collect(),
                    };
                    let batch = build_image_batch(
                        &model.shared,
                        &images,
                        &config.masking,
                        vocab,
                        &opts,
                        &mut mask_rng,
                    )?;
                    train_step(model, &params, &mut adam, &batch, config, lr)?
                }
                Source::Pair => {
                    let pairs: Vec<(&TextInstance, &ImageInstance)> = sb
                        .indices
                        .iter()
                        .map(|&i| (&corpora.pairs[i].0, &corpora.pairs[i].1))
                        .collect();
                    if config.pairing_enabled {
                        let batch = build_paired_batch(
                            &model.shared,
                            &pairs,
                            &config.masking,
                            vocab,
                            &opts,
                            &mut mask_rng,
                        )?;
                        train_step(model, &params, &mut adam, &batch, config, lr)?
                    } else {
                        // pairing disabled: the pair contributes a text-only
                        // and an image-only input inside one step
                        let texts: Vec<&TextInstance> = pairs.iter().map(|p| p.0).collect();
                        let images: Vec<&ImageInstance> = pairs.iter().map(|p| p.1).collect();
                        let tb = build_text_batch(
                            &model.shared,
                            &texts,
                            &config.masking,
                            vocab,
                            &opts,
                            &mut mask_rng,
                        )?;
                        let ib = build_image_batch(
                            &model.shared,
                            &images,
                            &config.masking,
                            vocab,
                            &opts,
                            &mut mask_rng,
                        )?;
                        train_step_two(model, &params, &mut adam, &tb, &ib, config, lr)?
                    }
                }
            };
            if let Some(term) = breakdown.non_finite_term() {
                return Err(CoreError::NonFiniteLoss {
                    step: step as usize,
                    term,
                });
            }
            step += 1;
            observer.on_step(&StepRecord {
                step,
                regime: config.regime.as_str().to_string(),
                batch_kind: match sb.source {
                    Source::Text => "text",
                    Source::Image | Source::ExtraImage => "image",
                    Source::Pair => "paired",
                }
                .to_string(),
                lr: lr as f32,
                loss_total: breakdown.total,
                loss_lm: breakdown.lm,
                loss_regress: breakdown.regress,
                loss_label: breakdown.label,
                loss_tag: breakdown.tag,
                loss_match: breakdown.match_,
            });
        }
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(step)
}

fn apply_grads(
    model: &Model<f32>,
    params: &[(String, Tensor<f32>)],
    adam: &mut AdamState<f32>,
    lr: f64,
) -> Result<()> {
    // parameters outside this step's graph still need a zero grad for Adam
    for (_, p) in params {
        p.ensure_grad();
    }
    adam.step(params, lr)?;
    model.zero_grads();
    Ok(())
}

fn train_step(
    model: &Model<f32>,
    params: &[(String, Tensor<f32>)],
    adam: &mut AdamState<f32>,
    batch: &MaskedBatch<f32>,
    config: &PretrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    model.zero_grads();
    let out = total_loss(model, batch, &config.weights)?;
    let breakdown = out.breakdown()?;
    out.total.backward()?;
    apply_grads(model, params, adam, lr)?;
    Ok(breakdown)
}

/// One optimizer step over the sum of two batch losses.
fn train_step_two(
    model: &Model<f32>,
    params: &[(String, Tensor<f32>)],
    adam: &mut AdamState<f32>,
    a: &MaskedBatch<f32>,
    b: &MaskedBatch<f32>,
    config: &PretrainConfig,
    lr: f64,
) -> Result<LossBreakdown> {
    model.zero_grads();
    let out_a = total_loss(model, a, &config.weights)?;
    let out_b = total_loss(model, b, &config.weights)?;
    let ba = out_a.breakdown()?;
    let bb = out_b.breakdown()?;
    let total = out_a.total.add(&out_b.total)?;
    total.backward()?;
    apply_grads(model, params, adam, lr)?;
    Ok(LossBreakdown {
        total: ba.total + bb.total,
        lm: ba.lm + bb.lm,
        regress: ba.regress + bb.regress,
        label: ba.label + bb.label,
        tag: ba.tag + bb.tag,
        match_: ba.match_ + bb.match_,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::world::{generate_world, WorldModel, WorldSpec};

    fn tiny_setup(seed: u64) -> (WorldModel, Model<f32>, Corpora) {
        let world = generate_world(&WorldSpec::default(), 17).unwrap();
        let model = Model::init(
            ModelConfig {
                vocab_size: world.vocab.size(),
                f_dim: world.spec.f_dim,
                num_detector_classes: world.spec.num_classes,
                encoder: EncoderConfig {
                    layers: 1,
                    heads: 2,
                    hidden_dim: 16,
                    ffn_dim: 32,
                    max_positions: 64,
                },
                init_std: 0.05,
            },
            seed,
        )
        .unwrap();
        let mut rng = crate::rng::stream(seed, "corpus", 0);
        let corpora = Corpora {
            texts: (0..30).map(|_| world.sample_text(&mut rng, "t")).collect(),
            images: (0..30).map(|_| world.sample_image(&mut rng, "i")).collect(),
            pairs: (0..20).map(|_| world.sample_pair(&mut rng, "p")).collect(),
            extra_images: vec![],
        };
        (world, model, corpora)
    }

    fn snapshot(model: &Model<f32>) -> Vec<Vec<f32>> {
        model.named_parameters().iter().map(|(_, p)| p.to_vec()).collect()
    }

    #[test]
    fn base_regime_performs_zero_steps() {
        let (world, model, corpora) = tiny_setup(1);
        let before = snapshot(&model);
        let config = PretrainConfig {
            regime: Regime::Base,
            ..PretrainConfig::default()
        };
        let steps = pretrain(&model, &corpora, &config, &world.vocab, &mut NullObserver).unwrap();
        assert_eq!(steps, 0);
        assert_eq!(snapshot(&model), before);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_models_and_streams() {
        let config = PretrainConfig {
            regime: Regime::W,
            epochs: 2,
            batch_size: 8,
            seed: 5,
            ..PretrainConfig::default()
        };
        let run = || {
            let (world, model, corpora) = tiny_setup(2);
            let mut obs = RecordingObserver::default();
            pretrain(&model, &corpora, &config, &world.vocab, &mut obs).unwrap();
            (snapshot(&model), obs.records)
        };
        let (pa, ra) = run();
        let (pb, rb) = run();
        assert_eq!(pa, pb);
        assert_eq!(ra, rb);
    }

    #[test]
    fn different_seed_changes_the_trajectory() {
        let base = PretrainConfig {
            regime: Regime::W,
            epochs: 1,
            batch_size: 8,
            seed: 5,
            ..PretrainConfig::default()
        };
        let (world, model, corpora) = tiny_setup(3);
        let mut obs = RecordingObserver::default();
        pretrain(&model, &corpora, &base, &world.vocab, &mut obs).unwrap();
        let first = snapshot(&model);

        let (world2, model2, corpora2) = tiny_setup(3);
        let other = PretrainConfig { seed: 6, ..base };
        pretrain(&model2, &corpora2, &other, &world2.vocab, &mut NullObserver).unwrap();
        assert_ne!(first, snapshot(&model2));
    }

    #[test]
    fn w_regime_visits_text_and_image_batches_and_never_match() {
        let (world, model, corpora) = tiny_setup(4);
        let config = PretrainConfig {
            regime: Regime::W,
            epochs: 1,
            batch_size: 8,
            seed: 7,
            ..PretrainConfig::default()
        };
        let mut obs = RecordingObserver::default();
        let steps = pretrain(&model, &corpora, &config, &world.vocab, &mut obs).unwrap();
        let expected = steps_per_epoch(Regime::W, &corpora, 8).unwrap();
        assert_eq!(steps, expected);
        assert!(obs.records.iter().any(|r| r.batch_kind == "text"));
        assert!(obs.records.iter().any(|r| r.batch_kind == "image"));
        assert!(obs.records.iter().all(|r| r.batch_kind != "paired"));
        assert!(obs.records.iter().all(|r| r.loss_match == 0.0));
        // lr envelope: warmup from ~0, decay toward 0
        let peak = obs.records.iter().map(|r| r.lr).fold(0.0f32, f32::max);
        assert!(peak <= config.peak_lr as f32 + 1e-9);
        assert!(obs.records.last().unwrap().lr < peak / 2.0);
    }

    #[test]
    fn s_regime_trains_on_paired_batches_with_match_term() {
        let (world, model, corpora) = tiny_setup(5);
        let config = PretrainConfig {
            regime: Regime::S,
            epochs: 1,
            batch_size: 4,
            seed: 8,
            ..PretrainConfig::default()
        };
        let mut obs = RecordingObserver::default();
        pretrain(&model, &corpora, &config, &world.vocab, &mut obs).unwrap();
        assert!(obs.records.iter().any(|r| r.batch_kind == "paired"));
        assert!(obs.records.iter().any(|r| r.loss_match > 0.0));
    }

    #[test]
    fn training_reduces_probe_batch_loss() {
        let (world, model, corpora) = tiny_setup(6);
        let config = PretrainConfig {
            regime: Regime::W,
            epochs: 60,
            batch_size: 8,
            peak_lr: 3e-3,
            seed: 9,
            ..PretrainConfig::default()
        };
        // fixed probe batch: tag reconstruction from visible region features
        // is the learnable structure (jointly-masked regions are designed to
        // be unrecoverable, so the default policy's floor sits high)
        let opts = BatchOptions {
            tags_enabled: true,
            max_len: 64,
            mismatch_prob: 0.5,
            match_enabled: false,
        };
        let probe_policy = MaskingPolicy {
            region_mask_prob: 0.0,
            tag_mask_prob: 0.5,
            joint_region_tag_mask: false,
            ..MaskingPolicy::default()
        };
        let probe_loss = |m: &Model<f32>| {
            let mut rng = crate::rng::stream(999, "probe", 0);
            let images: Vec<&ImageInstance> = corpora.images[..8].iter().collect();
            let batch = build_image_batch(
                &m.shared,
                &images,
                &probe_policy,
                &world.vocab,
                &opts,
                &mut rng,
            )
            .unwrap();
            total_loss(m, &batch, &LossWeights::default())
                .unwrap()
                .breakdown()
                .unwrap()
                .total
        };
        let before = probe_loss(&model);
        pretrain(&model, &corpora, &config, &world.vocab, &mut NullObserver).unwrap();
        let after = probe_loss(&model);
        assert!(
            after < 0.7 * before,
            "loss did not drop enough: {before} -> {after}"
        );
    }
}
