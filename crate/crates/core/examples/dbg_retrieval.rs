// Fine-tune hyperparameter sweep on one pretrained W model vs Base.
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::evaluate::eval_retrieval;
use tagalign_core::finetune::{finetune_retrieval, FinetuneConfig};
use tagalign_core::masking::MaskingPolicy;
use tagalign_core::model::{Model, ModelConfig};
use tagalign_core::rng::stream;
use tagalign_core::scheduler::Regime;
use tagalign_core::trainer::{pretrain, Corpora, NullObserver, PretrainConfig};
use tagalign_core::world::{generate_world, WorldSpec};

fn main() {
    let spec = WorldSpec {
        num_classes: 12,
        f_dim: 32,
        feature_noise_sigma: 0.6,
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
        encoder: EncoderConfig { layers: 2, heads: 4, hidden_dim: 64, ffn_dim: 128, max_positions: 64 },
        init_std: 0.02,
    };
    let masking = MaskingPolicy {
        joint_region_tag_mask: false,
        region_mask_prob: 0.3,
        tag_mask_prob: 0.3,
        ..Default::default()
    };
    let mut rng = stream(100, "corpus", 0);
    let corpora = Corpora {
        texts: (0..800).map(|_| world.sample_text(&mut rng, "t")).collect(),
        images: vec![],
        pairs: (0..1200).map(|_| world.sample_pair(&mut rng, "p")).collect(),
        extra_images: vec![],
    };
    let eval_pairs: Vec<_> = (0..48).map(|_| world.sample_pair(&mut rng, "eval")).collect();

    let w_model = Model::<f32>::init(model_cfg, 1000).unwrap();
    let config = PretrainConfig {
        regime: Regime::W,
        epochs: 40,
        batch_size: 16,
        peak_lr: 3e-3,
        masking,
        seed: 2000,
        ..PretrainConfig::default()
    };
    pretrain(&w_model, &corpora, &config, &world.vocab, &mut NullObserver).unwrap();
    println!("pretrained W ready");
    let s_model = Model::<f32>::init(model_cfg, 1000).unwrap();
    let s_config = PretrainConfig { regime: Regime::S, epochs: 60, ..config.clone() };
    {
        let mut obs = tagalign_core::trainer::RecordingObserver::default();
        pretrain(&s_model, &corpora, &s_config, &world.vocab, &mut obs).unwrap();
        let tail: Vec<f64> = obs.records.iter().rev().take(50).map(|r| r.loss_match as f64).collect();
        println!("pretrained S ready, match tail {:.4}", tail.iter().sum::<f64>() / tail.len() as f64);
    }

    let scarce: Vec<_> = corpora.pairs.clone();
    for (steps, lr, bs) in [(300u64, 1e-3f64, 8usize), (500, 1e-3, 8), (800, 1e-3, 8)] {
        for (name, source) in [("w", Some(&w_model)), ("s", Some(&s_model)), ("base", None)] {
            let mut m = Model::<f32>::init(model_cfg, 1000).unwrap();
            if let Some(src) = source {
                m.copy_from(src).unwrap();
            }
            let ft = FinetuneConfig {
                steps,
                batch_size: bs,
                negatives: 2,
                peak_lr: lr,
                seed: 3000,
                ..FinetuneConfig::default()
            };
            let mut first = None;
            let mut tail = Vec::new();
            finetune_retrieval(&m, &scarce, &ft, |r| {
                if first.is_none() { first = Some(r.loss); }
                if r.step > steps - 20 { tail.push(r.loss as f64); }
            })
            .unwrap();
            let metrics = eval_retrieval(&m, &eval_pairs, true).unwrap();
            println!(
                "{name} steps={steps} lr={lr} bs={bs}: loss {:.3} -> {:.3}, R@1={:.3} R@5={:.3} R@10={:.3}",
                first.unwrap(),
                tail.iter().sum::<f64>() / tail.len() as f64,
                metrics.r_at_1, metrics.r_at_5, metrics.r_at_10
            );
        }
    }
}
