// Does pretraining leave match evidence linearly readable at [CLS]?
// Train only the pooler + match head on frozen encoders.
use tagalign_core::embed::{ImageInstance, TextInstance};
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::evaluate::eval_retrieval;
use tagalign_core::masking::{pack_unmasked, MaskingPolicy};
use tagalign_core::model::{Model, ModelConfig};
use tagalign_core::rng::stream;
use tagalign_core::scheduler::Regime;
use tagalign_core::tensor::{AdamConfig, AdamState, Tensor};
use tagalign_core::trainer::{pretrain, Corpora, NullObserver, PretrainConfig};
use tagalign_core::world::{generate_world, WorldSpec};
use rand::Rng;

fn main() {
    let spec = WorldSpec::default();
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
        texts: vec![],
        images: vec![],
        pairs: (0..1200).map(|_| world.sample_pair(&mut rng, "p")).collect(),
        extra_images: vec![],
    };
    let eval_pairs: Vec<_> = (0..48).map(|_| world.sample_pair(&mut rng, "eval")).collect();

    let w_model = Model::<f32>::init(model_cfg, 1000).unwrap();
    let config = PretrainConfig {
        regime: Regime::W,
        epochs: 60,
        batch_size: 16,
        peak_lr: 3e-3,
        masking,
        seed: 2000,
        ..PretrainConfig::default()
    };
    pretrain(&w_model, &corpora, &config, &world.vocab, &mut NullObserver).unwrap();
    let base_model = Model::<f32>::init(model_cfg, 1000).unwrap();

    for (name, model) in [("w", &w_model), ("base", &base_model)] {
        let head_params: Vec<(String, Tensor<f32>)> = vec![
            ("pool_w".into(), model.encoder.pool_w.clone()),
            ("pool_b".into(), model.encoder.pool_b.clone()),
            ("match_w".into(), model.match_w.clone()),
            ("match_b".into(), model.match_b.clone()),
        ];
        let mut adam = AdamState::new(AdamConfig::default(), &head_params);
        let mut rng = stream(7, "head", 0);
        let mut tail = Vec::new();
        for step in 0..800u64 {
            let mut items: Vec<(Option<&TextInstance>, Option<&ImageInstance>)> = Vec::new();
            let mut labels = Vec::new();
            for _ in 0..8 {
                let i = rng.gen_range(0..corpora.pairs.len());
                items.push((Some(&corpora.pairs[i].0), Some(&corpora.pairs[i].1)));
                labels.push(1.0f32);
                for _ in 0..2 {
                    let mut j = rng.gen_range(0..corpora.pairs.len() - 1);
                    if j >= i { j += 1; }
                    items.push((Some(&corpora.pairs[i].0), Some(&corpora.pairs[j].1)));
                    labels.push(0.0);
                }
            }
            let packed = pack_unmasked(&model.shared, &items, true, 64).unwrap();
            model.zero_grads();
            let hidden = model.forward_packed(&packed.embeddings, &packed.attn_mask, &packed.segments).unwrap();
            let cls: Vec<usize> = packed.layouts.iter().map(|l| l.cls).collect();
            let pooled = model.encoder.pooled_cls(&hidden, &cls).unwrap();
            let logits = model.match_logits(&pooled).unwrap();
            let loss = Tensor::bce_with_logits(&logits, &labels).unwrap();
            let v = loss.item().unwrap();
            loss.backward().unwrap();
            for (_, p) in &head_params { p.ensure_grad(); }
            adam.step(&head_params, 2e-3).unwrap();
            model.zero_grads();
            if step >= 780 { tail.push(v as f64); }
        }
        let metrics = eval_retrieval(model, &eval_pairs, true).unwrap();
        println!(
            "{name} head-only: tail loss {:.4}, R@1={:.3} R@5={:.3}",
            tail.iter().sum::<f64>() / tail.len() as f64,
            metrics.r_at_1, metrics.r_at_5
        );
    }
}
