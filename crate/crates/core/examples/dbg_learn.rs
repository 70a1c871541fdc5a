// Pilot for the alignment-emergence pipeline: W pretraining with and without
// tags, then the cross-modal probe. Prints timing and accuracy so thresholds
// can be pinned from observed behavior.
use std::time::Instant;
use tagalign_core::encoder::EncoderConfig;
use tagalign_core::model::{Model, ModelConfig};
use tagalign_core::probe::{collect_representations, probe_alignment, Modality, ProbeConfig};
use tagalign_core::rng::stream;
use tagalign_core::scheduler::Regime;
use tagalign_core::trainer::{pretrain, Corpora, PretrainConfig, RecordingObserver};
use tagalign_core::world::{generate_world, WorldSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let corpus_n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let peak_lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let layers: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);
    let hidden: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(64);

    let spec = WorldSpec::default();
    let world = generate_world(&spec, 42).unwrap();
    let model_cfg = ModelConfig {
        vocab_size: world.vocab.size(),
        f_dim: spec.f_dim,
        num_detector_classes: spec.num_classes,
        encoder: EncoderConfig {
            layers,
            heads: 4,
            hidden_dim: hidden,
            ffn_dim: hidden * 2,
            max_positions: 64,
        },
        init_std: 0.02,
    };
    let mut rng = stream(42, "corpus", 0);
    let corpora = Corpora {
        texts: (0..corpus_n).map(|_| world.sample_text(&mut rng, "t")).collect(),
        images: (0..corpus_n).map(|_| world.sample_image(&mut rng, "i")).collect(),
        pairs: vec![],
        extra_images: vec![],
    };

    for tags in [true, false] {
        let t0 = Instant::now();
        let model = Model::<f32>::init(model_cfg, 7).unwrap();
        let masking = tagalign_core::masking::MaskingPolicy {
            joint_region_tag_mask: false,
            region_mask_prob: 0.3,
            tag_mask_prob: 0.3,
            ..Default::default()
        };
        let config = PretrainConfig {
            regime: Regime::W,
            epochs,
            batch_size: 16,
            peak_lr,
            tags_enabled: tags,
            masking,
            seed: 11,
            ..PretrainConfig::default()
        };
        let mut obs = RecordingObserver::default();
        let steps = pretrain(&model, &corpora, &config, &world.vocab, &mut obs).unwrap();
        let train_time = t0.elapsed();
        let tail_mean = |f: &dyn Fn(&tagalign_core::trainer::StepRecord) -> f32, kind: &str| -> f64 {
            let vals: Vec<f64> = obs.records.iter().rev().filter(|r| r.batch_kind == kind).take(30).map(|r| f(r) as f64).collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        println!(
            "  tail: lm={:.3} tag={:.3} regress={:.3} label={:.3}",
            tail_mean(&|r| r.loss_lm, "text"),
            tail_mean(&|r| r.loss_tag, "image"),
            tail_mean(&|r| r.loss_regress, "image"),
            tail_mean(&|r| r.loss_label, "image"),
        );
        let probe_cfg = ProbeConfig {
            per_class: 50,
            tags_enabled: tags,
            seed: 3,
            ..ProbeConfig::default()
        };
        let t1 = Instant::now();
        let report = probe_alignment(&model, &world, &probe_cfg).unwrap();
        println!(
            "tags={tags}: steps={steps} train={:.1?} probe={:.1?} acc={:.3} cos={:.3} samples={}",
            train_time,
            t1.elapsed(),
            report.nearest_centroid_accuracy,
            report.mean_intra_class_cosine,
            report.samples
        );
        // diagnostics: which modality pairs align, raw vs mean-centered
        let reps = collect_representations(&model, &world, &probe_cfg).unwrap();
        let acc_of = |query: Modality, against: Modality, center: bool| -> f64 {
            let k = world.spec.num_classes;
            let d = reps[0].vector.len();
            let mut mean_q = vec![0.0f64; d];
            let mut mean_a = vec![0.0f64; d];
            let (mut nq, mut na) = (0usize, 0usize);
            for r in &reps {
                if r.modality == query { for (m, &x) in mean_q.iter_mut().zip(&r.vector) { *m += x as f64; } nq += 1; }
                if r.modality == against { for (m, &x) in mean_a.iter_mut().zip(&r.vector) { *m += x as f64; } na += 1; }
            }
            mean_q.iter_mut().for_each(|m| *m /= nq.max(1) as f64);
            mean_a.iter_mut().for_each(|m| *m /= na.max(1) as f64);
            let adjust = |v: &[f32], mean: &[f64]| -> Vec<f64> {
                v.iter().zip(mean).map(|(&x, &m)| x as f64 - if center { m } else { 0.0 }).collect()
            };
            let mut cents = vec![vec![0.0f64; d]; k];
            let mut counts = vec![0usize; k];
            for r in reps.iter().filter(|r| r.modality == against) {
                let v = adjust(&r.vector, &mean_a);
                for (c, x) in cents[r.class].iter_mut().zip(&v) { *c += x; }
                counts[r.class] += 1;
            }
            for (c, n) in cents.iter_mut().zip(&counts) { if *n > 0 { c.iter_mut().for_each(|x| *x /= *n as f64); } }
            let cos = |a: &[f64], b: &[f64]| -> f64 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 { 0.0 } else { dot / na / nb }
            };
            let (mut ok, mut tot) = (0usize, 0usize);
            for r in reps.iter().filter(|r| r.modality == query) {
                let v = adjust(&r.vector, &mean_q);
                let mut best = 0; let mut best_c = f64::NEG_INFINITY;
                for c in 0..k { if counts[c] > 0 { let s = cos(&v, &cents[c]); if s > best_c { best_c = s; best = c; } } }
                tot += 1; if best == r.class { ok += 1; }
            }
            ok as f64 / tot.max(1) as f64
        };
        if tags {
            println!(
                "  diag: tag-vs-word raw={:.3} centered={:.3} | region-vs-word raw={:.3} centered={:.3} | region-vs-tag raw={:.3}",
                acc_of(Modality::Tag, Modality::Word, false),
                acc_of(Modality::Tag, Modality::Word, true),
                acc_of(Modality::Region, Modality::Word, false),
                acc_of(Modality::Region, Modality::Word, true),
                acc_of(Modality::Region, Modality::Tag, false),
            );
        }
    }
}
