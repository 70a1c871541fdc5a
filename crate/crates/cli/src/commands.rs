//! Command implementations. Each command validates its inputs, runs, and
//! leaves a self-describing run directory: effective config echo, manifest
//! with content hashes, metrics stream, checkpoints, and reports. Reruns with
//! the same config and seed produce bitwise-identical metrics and
//! checkpoints.

use crate::config::{RunConfig, Task};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use tagalign_core::checkpoint::{load_model, save_model};
use tagalign_core::corpus::{
    read_image_corpus, read_paired_corpus, read_text_corpus, write_image_corpus,
    write_paired_corpus, write_text_corpus, CorpusLimits,
};
use tagalign_core::evaluate::{eval_referring, eval_retrieval, sample_referring, MetricReport};
use tagalign_core::finetune::{finetune_referring, finetune_retrieval, FinetuneRecord};
use tagalign_core::model::Model;
use tagalign_core::probe::{collect_representations, export_embeddings, probe_alignment, ProbeConfig};
use tagalign_core::rng::{fnv1a64, stream};
use tagalign_core::trainer::{pretrain, Corpora, StepRecord, TrainObserver};
use tagalign_core::world::{generate_world, WorldModel, WorldSpec};
use tagalign_core::{CoreError, Result};

/// World manifest written next to generated corpora.
#[derive(Serialize, Deserialize)]
struct WorldManifest {
    spec: WorldSpec,
    seed: u64,
    vocab: Vec<String>,
    vocab_hash: String,
}

/// Run manifest: everything needed to reconstruct and audit a run.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub regime: String,
    pub tags_enabled: bool,
    pub seed: u64,
    pub world_seed: u64,
    pub config_hash: String,
    pub corpus_hashes: BTreeMap<String, String>,
    pub status: String,
    pub steps: u64,
    pub checkpoints: Vec<String>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CoreError + '_ {
    move |e| CoreError::io(path.display().to_string(), e)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn corpus_paths(dir: &Path) -> BTreeMap<&'static str, PathBuf> {
    [
        ("world", dir.join("world.json")),
        ("text", dir.join("text.jsonl")),
        ("images", dir.join("images.jsonl")),
        ("paired", dir.join("paired.jsonl")),
        ("paired_eval", dir.join("paired_eval.jsonl")),
        ("extra_images", dir.join("extra_images.jsonl")),
    ]
    .into_iter()
    .collect()
}

fn load_world(config: &RunConfig) -> Result<WorldModel> {
    let path = config.corpus_dir().join("world.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: WorldManifest = serde_json::from_str(&text).map_err(|e| CoreError::Parse {
            record: 0,
            msg: format!("{}: {e}", path.display()),
        })?;
        if manifest.spec != config.world {
            return Err(CoreError::Config(format!(
                "world spec in {} differs from the run config; regenerate or fix the config",
                path.display()
            )));
        }
        generate_world(&manifest.spec, manifest.seed)
    } else {
        generate_world(&config.world, config.world_seed)
    }
}

fn prepare_run_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.run_dir();
    if dir.exists() && dir.join("run.json").exists() {
        return Err(CoreError::Config(format!(
            "run directory {} already holds a completed run; directories are append-only, pick a new out_dir",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir.join("checkpoints")).map_err(io_err(&dir))?;
    write_file(&dir.join("config.toml"), &config.echo())?;
    Ok(dir)
}

fn finish_run(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_file(&dir.join("run.json"), &json)
}

fn manifest_base(config: &RunConfig, command: &str) -> RunManifest {
    RunManifest {
        command: command.to_string(),
        regime: config.regime.as_str().to_string(),
        tags_enabled: config.tags.enabled,
        seed: config.seed,
        world_seed: config.world_seed,
        config_hash: format!("{:016x}", config.hash()),
        corpus_hashes: BTreeMap::new(),
        status: "completed".into(),
        steps: 0,
        checkpoints: Vec::new(),
    }
}

fn hash_existing_corpora(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, path) in corpus_paths(dir) {
        if path.exists() {
            out.insert(name.to_string(), file_hash(&path)?);
        }
    }
    Ok(out)
}

/// Generate the synthetic world and all corpora. Refuses to overwrite
/// existing corpora unless forced.
pub fn cmd_generate(config: &RunConfig, force: bool) -> Result<()> {
    let dir = config.corpus_dir();
    let paths = corpus_paths(&dir);
    if !force {
        if let Some((_, existing)) = paths.iter().find(|(_, p)| p.exists()) {
            return Err(CoreError::Parse {
                record: 0,
                msg: format!(
                    "{} already exists; pass --force to overwrite",
                    existing.display()
                ),
            });
        }
    }
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let world = generate_world(&config.world, config.world_seed)?;
    let manifest = WorldManifest {
        spec: config.world.clone(),
        seed: config.world_seed,
        vocab: world.vocab.words().to_vec(),
        vocab_hash: format!("{:016x}", world.vocab.hash()),
    };
    write_file(
        &paths["world"],
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;

    let mut rng = stream(config.world_seed, "corpus-text", 0);
    let texts: Vec<_> = (0..config.corpus.text_count)
        .map(|_| world.sample_text(&mut rng, "synth-text"))
        .collect();
    write_text_corpus(&paths["text"], &texts, &world.vocab)?;

    let mut rng = stream(config.world_seed, "corpus-images", 0);
    let images: Vec<_> = (0..config.corpus.image_count)
        .map(|_| world.sample_image(&mut rng, "synth-images"))
        .collect();
    write_image_corpus(&paths["images"], &images, &world.vocab)?;

    let mut rng = stream(config.world_seed, "corpus-pairs", 0);
    let pairs: Vec<_> = (0..config.corpus.pair_count)
        .map(|_| world.sample_pair(&mut rng, "synth-pairs"))
        .collect();
    write_paired_corpus(&paths["paired"], &pairs, &world.vocab)?;

    let mut rng = stream(config.world_seed, "corpus-pairs-eval", 0);
    let eval_pairs: Vec<_> = (0..config.corpus.eval_pair_count)
        .map(|_| world.sample_pair(&mut rng, "synth-pairs-eval"))
        .collect();
    write_paired_corpus(&paths["paired_eval"], &eval_pairs, &world.vocab)?;

    let mut rng = stream(config.world_seed, "corpus-extra-images", 0);
    let extra: Vec<_> = (0..config.corpus.extra_image_count)
        .map(|_| world.sample_image(&mut rng, "synth-extra-images"))
        .collect();
    write_image_corpus(&paths["extra_images"], &extra, &world.vocab)?;

    // corpus statistics: sizes and the class marginal over text tokens
    let mut class_counts = vec![0usize; config.world.num_classes];
    let mut class_total = 0usize;
    for t in &texts {
        for &tok in &t.tokens {
            if let Some(c) = world.class_of_token(tok) {
                class_counts[c] += 1;
                class_total += 1;
            }
        }
    }
    println!(
        "generated: {} texts, {} images, {} pairs, {} eval pairs, {} extra images",
        texts.len(),
        images.len(),
        pairs.len(),
        eval_pairs.len(),
        extra.len()
    );
    println!("vocab: {} words (hash {})", world.vocab.size(), manifest.vocab_hash);
    if class_total > 0 {
        let marginal: Vec<String> = class_counts
            .iter()
            .map(|&n| format!("{:.3}", n as f64 / class_total as f64))
            .collect();
        println!("text class marginal: [{}]", marginal.join(", "));
    }
    Ok(())
}

fn limits(config: &RunConfig) -> CorpusLimits {
    CorpusLimits {
        max_regions: config.world.max_regions,
        max_text_len: config.model.max_positions.saturating_sub(2),
        num_detector_classes: config.world.num_classes,
    }
}

fn load_corpora(config: &RunConfig, world: &WorldModel) -> Result<Corpora> {
    let dir = config.corpus_dir();
    let paths = corpus_paths(&dir);
    let lim = limits(config);
    let read_if = |key: &str| -> Result<Vec<tagalign_core::embed::TextInstance>> {
        let p = &paths[key];
        if p.exists() {
            read_text_corpus(p, &world.vocab, &lim)
        } else {
            Ok(Vec::new())
        }
    };
    let read_images_if = |key: &str| -> Result<Vec<tagalign_core::embed::ImageInstance>> {
        let p = &paths[key];
        if p.exists() {
            read_image_corpus(p, &world.vocab, &lim)
        } else {
            Ok(Vec::new())
        }
    };
    let pairs = if paths["paired"].exists() {
        read_paired_corpus(&paths["paired"], &world.vocab, &lim)?
    } else {
        Vec::new()
    };
    Ok(Corpora {
        texts: read_if("text")?,
        images: read_images_if("images")?,
        pairs,
        extra_images: read_images_if("extra_images")?,
    })
}

struct StreamingObserver {
    file: std::io::BufWriter<std::fs::File>,
    ckpt_dir: PathBuf,
    every_epoch: bool,
    vocab_hash: u64,
    steps: u64,
    checkpoints: Vec<String>,
}

impl TrainObserver for StreamingObserver {
    fn on_step(&mut self, record: &StepRecord) {
        self.steps = record.step;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(self.file, "{line}").expect("metrics stream writable");
    }

    fn on_epoch_end(&mut self, epoch: usize, model: &Model<f32>) -> Result<()> {
        if self.every_epoch {
            let path = self.ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
            save_model(&path, model, self.vocab_hash, self.steps)?;
            self.checkpoints.push(path.display().to_string());
        }
        Ok(())
    }
}

/// Pretrain under the configured regime; regime `base` writes the
/// initialization checkpoint and performs zero steps.
pub fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let world = load_world(config)?;
    let corpora = load_corpora(config, &world)?;
    let dir = prepare_run_dir(config)?;
    let model = Model::<f32>::init(config.model_config(), config.seed)?;

    let metrics_path = dir.join("metrics.jsonl");
    let file = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut observer = StreamingObserver {
        file: std::io::BufWriter::new(file),
        ckpt_dir: dir.join("checkpoints"),
        every_epoch: config.pretrain.checkpoint_every_epoch,
        vocab_hash: world.vocab.hash(),
        steps: 0,
        checkpoints: Vec::new(),
    };
    let steps = pretrain(
        &model,
        &corpora,
        &config.pretrain_config(),
        &world.vocab,
        &mut observer,
    )?;
    observer.file.flush().map_err(io_err(&metrics_path))?;

    let final_path = dir.join("checkpoints").join("final.ckpt");
    save_model(&final_path, &model, world.vocab.hash(), steps)?;
    let mut manifest = manifest_base(config, "pretrain");
    manifest.steps = steps;
    manifest.corpus_hashes = hash_existing_corpora(&config.corpus_dir())?;
    manifest.checkpoints = observer
        .checkpoints
        .into_iter()
        .chain([final_path.display().to_string()])
        .collect();
    finish_run(&dir, &manifest)?;
    println!("pretrain {}: {} steps -> {}", config.regime.as_str(), steps, dir.display());
    Ok(())
}

fn load_or_init_model(config: &RunConfig, checkpoint: &str) -> Result<Model<f32>> {
    if checkpoint.is_empty() {
        return Model::<f32>::init(config.model_config(), config.seed);
    }
    let path = PathBuf::from(checkpoint);
    let path = if path.is_absolute() {
        path
    } else {
        RunConfig::output_root().join(path)
    };
    let loaded = load_model(&path)?;
    if loaded.header.config != config.model_config() {
        return Err(CoreError::Config(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(loaded.model)
}

/// Fine-tune retrieval or referring from a checkpoint (or fresh init).
pub fn cmd_finetune(config: &RunConfig) -> Result<()> {
    let world = load_world(config)?;
    let dir = prepare_run_dir(config)?;
    let model = load_or_init_model(config, &config.finetune.checkpoint)?;

    let metrics_path = dir.join("metrics.jsonl");
    let file = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut sink = std::io::BufWriter::new(file);
    let mut write_record = |r: &FinetuneRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(sink, "{line}").expect("metrics stream writable");
    };

    match config.finetune.task {
        Task::Retrieval => {
            let mut pairs = read_paired_corpus(
                &config.corpus_dir().join("paired.jsonl"),
                &world.vocab,
                &limits(config),
            )?;
            if config.finetune.max_pairs > 0 && pairs.len() > config.finetune.max_pairs {
                pairs.truncate(config.finetune.max_pairs);
            }
            finetune_retrieval(&model, &pairs, &config.finetune_config(), &mut write_record)?;
        }
        Task::Referring => {
            let mut rng = stream(config.seed, "referring-corpus", 0);
            let corpus: Vec<_> = (0..config.finetune.referring_instances)
                .map(|_| sample_referring(&world, &mut rng, "referring-train"))
                .collect();
            let stats =
                finetune_referring(&model, &corpus, &config.finetune_config(), &mut write_record)?;
            if stats.skipped > 0 {
                println!("referring: skipped {} instances without a valid proposal", stats.skipped);
            }
        }
    }
    drop(write_record);
    sink.flush().map_err(io_err(&metrics_path))?;

    let final_path = dir.join("checkpoints").join("final.ckpt");
    save_model(&final_path, &model, world.vocab.hash(), config.finetune.steps)?;
    let mut manifest = manifest_base(config, "finetune");
    manifest.steps = config.finetune.steps;
    manifest.corpus_hashes = hash_existing_corpora(&config.corpus_dir())?;
    manifest.checkpoints = vec![final_path.display().to_string()];
    finish_run(&dir, &manifest)?;
    println!(
        "finetune {}: {} steps -> {}",
        config.finetune.task.as_str(),
        config.finetune.steps,
        dir.display()
    );
    Ok(())
}

/// Evaluate a checkpoint on the configured task and write `report.json`.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    let world = load_world(config)?;
    let dir = prepare_run_dir(config)?;
    let model = load_or_init_model(config, &config.eval.checkpoint)?;

    let metrics = match config.eval.task {
        Task::Retrieval => {
            let pairs = read_paired_corpus(
                &config.corpus_dir().join("paired_eval.jsonl"),
                &world.vocab,
                &limits(config),
            )?;
            let m = eval_retrieval(&model, &pairs, config.tags.enabled)?;
            serde_json::json!({"r_at_1": m.r_at_1, "r_at_5": m.r_at_5, "r_at_10": m.r_at_10, "queries": m.queries})
        }
        Task::Referring => {
            let mut rng = stream(config.seed, "referring-eval", 0);
            let instances: Vec<_> = (0..config.eval.referring_instances)
                .map(|_| sample_referring(&world, &mut rng, "referring-eval"))
                .collect();
            let acc = eval_referring(&model, &instances, config.tags.enabled)?;
            serde_json::json!({"accuracy": acc, "instances": instances.len()})
        }
    };
    let report = MetricReport {
        task: config.eval.task.as_str().to_string(),
        split: "eval".into(),
        metrics: metrics.clone(),
        config_hash: format!("{:016x}", config.hash()),
        checkpoint: config.eval.checkpoint.clone(),
    };
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let mut manifest = manifest_base(config, "eval");
    manifest.corpus_hashes = hash_existing_corpora(&config.corpus_dir())?;
    finish_run(&dir, &manifest)?;
    println!("eval {}: {metrics}", config.eval.task.as_str());
    Ok(())
}

/// Representation-space probe; writes `report.json` (summary) and
/// `probe.json` (full centroids + projection).
pub fn cmd_probe(config: &RunConfig) -> Result<()> {
    let world = load_world(config)?;
    let dir = prepare_run_dir(config)?;
    let model = load_or_init_model(config, &config.probe.checkpoint)?;
    let probe_cfg = ProbeConfig {
        per_class: config.probe.per_class,
        tags_enabled: config.tags.enabled,
        seed: config.seed,
        max_draws: config.probe.max_draws,
    };
    let report = probe_alignment(&model, &world, &probe_cfg)?;
    write_file(
        &dir.join("probe.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let summary = MetricReport {
        task: "probe".into(),
        split: "eval".into(),
        metrics: serde_json::json!({
            "nearest_centroid_accuracy": report.nearest_centroid_accuracy,
            "mean_intra_class_cosine": report.mean_intra_class_cosine,
            "samples": report.samples,
            "excluded_classes": report.excluded_classes,
        }),
        config_hash: format!("{:016x}", config.hash()),
        checkpoint: config.probe.checkpoint.clone(),
    };
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(&summary).expect("report serializes"),
    )?;
    let mut manifest = manifest_base(config, "probe");
    manifest.corpus_hashes = hash_existing_corpora(&config.corpus_dir())?;
    finish_run(&dir, &manifest)?;
    println!(
        "probe: accuracy {:.4}, mean cosine {:.4}, {} samples",
        report.nearest_centroid_accuracy, report.mean_intra_class_cosine, report.samples
    );
    Ok(())
}

/// Export raw last-layer representations for external projection tools.
pub fn cmd_export_embeddings(config: &RunConfig) -> Result<()> {
    let world = load_world(config)?;
    let dir = prepare_run_dir(config)?;
    let model = load_or_init_model(config, &config.probe.checkpoint)?;
    let probe_cfg = ProbeConfig {
        per_class: config.probe.per_class,
        tags_enabled: config.tags.enabled,
        seed: config.seed,
        max_draws: config.probe.max_draws,
    };
    let reps = collect_representations(&model, &world, &probe_cfg)?;
    let path = dir.join("embeddings.jsonl");
    export_embeddings(&reps, &world, &path)?;
    let mut manifest = manifest_base(config, "export-embeddings");
    manifest.corpus_hashes = hash_existing_corpora(&config.corpus_dir())?;
    finish_run(&dir, &manifest)?;
    println!("exported {} representations -> {}", reps.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct ReportRow {
    run: String,
    command: String,
    regime: String,
    tags: bool,
    corpus_hashes: BTreeMap<String, String>,
    status: String,
    metrics: serde_json::Value,
}

fn regime_order(regime: &str) -> usize {
    match regime {
        "w" => 0,
        "s" => 1,
        "h" => 2,
        "base" => 3,
        _ => 4,
    }
}

/// Aligned comparison table over completed run directories.
pub fn cmd_report(run_dirs: &[PathBuf], json: bool) -> Result<()> {
    let mut rows = Vec::new();
    let mut incomplete = Vec::new();
    for dir in run_dirs {
        let manifest_path = dir.join("run.json");
        if !manifest_path.exists() {
            incomplete.push(format!("{}: no run.json (incomplete or not a run)", dir.display()));
            continue;
        }
        let manifest: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?,
        )
        .map_err(|e| CoreError::Parse {
            record: 0,
            msg: format!("{}: {e}", manifest_path.display()),
        })?;
        let metrics = {
            let report_path = dir.join("report.json");
            if report_path.exists() {
                let report: MetricReport = serde_json::from_str(
                    &std::fs::read_to_string(&report_path).map_err(io_err(&report_path))?,
                )
                .map_err(|e| CoreError::Parse {
                    record: 0,
                    msg: format!("{}: {e}", report_path.display()),
                })?;
                report.metrics
            } else {
                serde_json::json!({})
            }
        };
        rows.push(ReportRow {
            run: dir.display().to_string(),
            command: manifest.command,
            regime: manifest.regime,
            tags: manifest.tags_enabled,
            corpus_hashes: manifest.corpus_hashes,
            status: manifest.status,
            metrics,
        });
    }
    rows.sort_by_key(|r| (regime_order(&r.regime), r.run.clone()));

    if json {
        let doc = serde_json::json!({
            "rows": rows,
            "incomplete": incomplete,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
        return Ok(());
    }
    println!(
        "{:<28} {:<10} {:<7} {:<5} {:<10} metrics",
        "run", "command", "regime", "tags", "status"
    );
    for r in &rows {
        println!(
            "{:<28} {:<10} {:<7} {:<5} {:<10} {}",
            r.run, r.command, r.regime, r.tags, r.status, r.metrics
        );
    }
    for line in &incomplete {
        println!("INCOMPLETE {line}");
    }
    Ok(())
}
