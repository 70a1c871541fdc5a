// Pilot for the downstream-ordering pipeline: pretrain W/S/Base on a shared
// paired corpus, fine-tune retrieval and referring, and print the metric
// spreads used to pin acceptance thresholds.
use std::time::Instant;
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::evaluate::{eval_referring, eval_retrieval, sample_referring};
use tagalign_core::finetune::{finetune_referring, finetune_retrieval, FinetuneConfig};
use tagalign_core::masking::MaskingPolicy;
use tagalign_core::model::{Model, ModelConfig};
use tagalign_core::rng::stream;
use tagalign_core::scheduler::Regime;
use tagalign_core::trainer::{pretrain, Corpora, PretrainConfig, RecordingObserver};
use tagalign_core::world::{generate_world, WorldSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let finetune_steps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let pairs_n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let seeds: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);

    let spec = WorldSpec {
        num_classes: 12,
        feature_noise_sigma: 0.45,
        filler_fraction: 0.25,
        tokens_per_text: (4, 8),
        synonyms: true,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec, 42).unwrap();
    let model_cfg = ModelConfig {
        vocab_size: world.vocab.size(),
        f_dim: spec.f_dim,
        num_detector_classes: spec.num_classes,
        encoder: EncoderConfig {
            layers: 2,
            heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            max_positions: 64,
        },
        init_std: 0.02,
    };
    let masking = MaskingPolicy {
        joint_region_tag_mask: false,
        region_mask_prob: 0.3,
        tag_mask_prob: 0.3,
        ..Default::default()
    };

    for seed in 0..seeds {
        let mut rng = stream(100 + seed, "corpus", 0);
        let corpora = Corpora {
            texts: (0..800).map(|_| world.sample_text(&mut rng, "t")).collect(),
            images: vec![],
            pairs: (0..pairs_n).map(|_| world.sample_pair(&mut rng, "p")).collect(),
            extra_images: vec![],
        };
        let eval_pairs: Vec<_> = (0..32).map(|_| world.sample_pair(&mut rng, "eval")).collect();

        for regime in [Regime::W, Regime::S, Regime::Base] {
            let t0 = Instant::now();
            let model = Model::<f32>::init(model_cfg, 1000 + seed).unwrap();
            let epochs = match regime {
                Regime::S => pretrain_epochs + pretrain_epochs / 2,
                _ => pretrain_epochs,
            };
            let config = PretrainConfig {
                regime,
                epochs,
                batch_size: 16,
                peak_lr: 3e-3,
                masking,
                seed: 2000 + seed,
                ..PretrainConfig::default()
            };
            let mut obs = RecordingObserver::default();
            pretrain(&model, &corpora, &config, &world.vocab, &mut obs).unwrap();
            let pretrain_time = t0.elapsed();
            let match_tail: Vec<f64> = obs
                .records
                .iter()
                .rev()
                .filter(|r| r.loss_match > 0.0)
                .take(30)
                .map(|r| r.loss_match as f64)
                .collect();
            if !match_tail.is_empty() {
                println!(
                    "  {} match tail: {:.4}",
                    regime.as_str(),
                    match_tail.iter().sum::<f64>() / match_tail.len() as f64
                );
            }
            let pre_metrics = eval_retrieval(&model, &eval_pairs, true).unwrap();
            println!("  {} pre-finetune R@1={:.3} R@5={:.3}", regime.as_str(), pre_metrics.r_at_1, pre_metrics.r_at_5);

            // retrieval
            let t1 = Instant::now();
            let ft = FinetuneConfig {
                steps: finetune_steps,
                batch_size: 8,
                negatives: 2,
                peak_lr: 1e-3,
                seed: 3000 + seed,
                ..FinetuneConfig::default()
            };
            let retrieval_model = {
                let m = Model::<f32>::init(model_cfg, 1).unwrap();
                let mut m = m;
                m.copy_from(&model).unwrap();
                m
            };
            finetune_retrieval(&retrieval_model, &corpora.pairs[..96], &ft, |_| {}).unwrap();
            let metrics = eval_retrieval(&retrieval_model, &eval_pairs, true).unwrap();

            // referring
            let refer_model = {
                let m = Model::<f32>::init(model_cfg, 1).unwrap();
                let mut m = m;
                m.copy_from(&model).unwrap();
                m
            };
            let rft = FinetuneConfig {
                steps: finetune_steps / 2,
                batch_size: 8,
                peak_lr: 1e-3,
                seed: 4000 + seed,
                ..FinetuneConfig::default()
            };
            let refer_corpus: Vec<_> = {
                let mut rng = stream(6000 + seed, "refer-train", 0);
                (0..64)
                    .map(|_| sample_referring(&world, &mut rng, "refer-train"))
                    .collect()
            };
            finetune_referring(&refer_model, &refer_corpus, &rft, |_| {}).unwrap();
            let mut eval_rng = stream(5000 + seed, "refer-eval", 0);
            let instances: Vec<_> = (0..100)
                .map(|_| sample_referring(&world, &mut eval_rng, "refer-eval"))
                .collect();
            let refer_acc = eval_referring(&refer_model, &instances, true).unwrap();

            println!(
                "seed={seed} regime={}: R@1={:.3} R@5={:.3} R@10={:.3} refer={:.3} (pretrain {:.0?}, downstream {:.0?})",
                regime.as_str(),
                metrics.r_at_1,
                metrics.r_at_5,
                metrics.r_at_10,
                refer_acc,
                pretrain_time,
                t1.elapsed()
            );
        }
    }
}
