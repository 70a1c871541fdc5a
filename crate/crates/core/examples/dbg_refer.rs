// Referring-expression fine-tune calibration on W-pretrained vs Base.
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::evaluate::{eval_referring, sample_referring};
use tagalign_core::finetune::{finetune_referring, FinetuneConfig};
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
    println!("W ready");

    let mut eval_rng = stream(5000, "refer-eval", 0);
    let instances: Vec<_> = (0..150)
        .map(|_| sample_referring(&world, &mut eval_rng, "refer-eval"))
        .collect();

    for (steps, lr, corpus_n) in [
        (400u64, 1e-3f64, 128usize),
        (800, 5e-4, 256),
        (1600, 5e-4, 256),
    ] {
        let refer_corpus: Vec<_> = {
            let mut rng = stream(6000, "refer-train", 0);
            (0..corpus_n)
                .map(|_| sample_referring(&world, &mut rng, "refer-train"))
                .collect()
        };
        for (name, source) in [("w", Some(&w_model)), ("base", None)] {
            let mut m = Model::<f32>::init(model_cfg, 1000).unwrap();
            if let Some(src) = source {
                m.copy_from(src).unwrap();
            }
            let rft = FinetuneConfig {
                steps,
                batch_size: 8,
                peak_lr: lr,
                tags_enabled: false,
                seed: 4000,
                ..FinetuneConfig::default()
            };
            finetune_referring(&m, &refer_corpus, &rft, |_| {}).unwrap();
            let acc = eval_referring(&m, &instances, false).unwrap();
            println!("{name} steps={steps} lr={lr} corpus={corpus_n}: refer={acc:.3}");
        }
    }
}
