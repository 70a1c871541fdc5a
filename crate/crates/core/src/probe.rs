//! Representation-space probe: last-layer contextual representations of
//! class words, regions, and tags from paired inputs, summarized as
//! per-class per-modality centroids, cross-modal nearest-centroid accuracy,
//! and a 2-D PCA projection. Raw vectors can be exported for external
//! projection tools.

use crate::error::{CoreError, Result};
use crate::masking::pack_unmasked;
use crate::model::Model;
use crate::rng::stream;
use crate::world::WorldModel;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Word,
    Region,
    Tag,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Word => "word",
            Modality::Region => "region",
            Modality::Tag => "tag",
        }
    }
}

/// One sampled last-layer representation.
#[derive(Debug, Clone)]
pub struct Representation {
    pub modality: Modality,
    pub class: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Sample budget per class (region representations drive the stop rule).
    pub per_class: usize,
    pub tags_enabled: bool,
    pub seed: u64,
    /// Hard cap on drawn pairs, guarding degenerate worlds.
    pub max_draws: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            per_class: 50,
            tags_enabled: true,
            seed: 0,
            max_draws: 4000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentroidRecord {
    pub modality: String,
    pub class: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionRecord {
    pub modality: String,
    pub class: usize,
    pub x: f32,
    pub y: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Fraction of region representations whose nearest word centroid (by
    /// cosine) carries the correct class.
    pub nearest_centroid_accuracy: f64,
    /// Mean over classes of cos(word centroid, region centroid).
    pub mean_intra_class_cosine: f64,
    pub samples: usize,
    /// Classes excluded for lack of word or region samples.
    pub excluded_classes: Vec<usize>,
    pub centroids: Vec<CentroidRecord>,
    pub projection: Vec<ProjectionRecord>,
}

/// Feed paired instances and harvest last-layer representations, capped at
/// `per_class` per (modality, class). Tag representations are taken only
/// where the detector's tag is truthful, mirroring "successfully detected"
/// sampling.
pub fn collect_representations(
    model: &Model<f32>,
    world: &WorldModel,
    config: &ProbeConfig,
) -> Result<Vec<Representation>> {
    let mut rng = stream(config.seed, "probe", 0);
    let mut reps: Vec<Representation> = Vec::new();
    let mut counts: BTreeMap<(Modality, usize), usize> = BTreeMap::new();
    let k = world.spec.num_classes;
    let max_len = model.config.encoder.max_positions;

    let mut draws = 0usize;
    loop {
        let done = (0..k).all(|c| {
            counts.get(&(Modality::Region, c)).copied().unwrap_or(0) >= config.per_class
        });
        if done || draws >= config.max_draws {
            break;
        }
        draws += 1;
        let (text, image, truth) = world.sample_pair_with_truth(&mut rng, "probe");
        let packed = pack_unmasked(
            &model.shared,
            &[(Some(&text), Some(&image))],
            config.tags_enabled,
            max_len,
        )?;
        let hidden =
            model.forward_packed(&packed.embeddings, &packed.attn_mask, &packed.segments)?;
        let layout = &packed.layouts[0];
        let d = model.config.encoder.hidden_dim;
        let hd = hidden.data();
        let row = |pos: usize| hd[pos * d..(pos + 1) * d].to_vec();

        let mut push = |modality: Modality, class: usize, vector: Vec<f32>,
                        counts: &mut BTreeMap<(Modality, usize), usize>| {
            let slot = counts.entry((modality, class)).or_insert(0);
            if *slot < config.per_class {
                *slot += 1;
                reps.push(Representation {
                    modality,
                    class,
                    vector,
                });
            }
        };

        for (i, &tok) in text.tokens.iter().enumerate() {
            if let Some(c) = world.class_of_token(tok) {
                push(Modality::Word, c, row(layout.text_pos(i)), &mut counts);
            }
        }
        for (j, &c) in truth.iter().enumerate() {
            push(Modality::Region, c, row(layout.region_pos(j)), &mut counts);
        }
        if config.tags_enabled {
            for (j, &c) in truth.iter().enumerate() {
                if image.regions[j].detector_label != c {
                    continue; // noisy tag: skip
                }
                let (start, len) = layout.tag_spans[j];
                for s in 0..len {
                    push(Modality::Tag, c, row(start + s), &mut counts);
                }
            }
        }
    }
    Ok(reps)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn centroid(vectors: &[&Vec<f32>]) -> Vec<f32> {
    let d = vectors[0].len();
    let mut out = vec![0.0f64; d];
    for v in vectors {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += x as f64;
        }
    }
    out.iter().map(|&x| (x / vectors.len() as f64) as f32).collect()
}

/// Summarize harvested representations into the probe report.
pub fn probe_from_representations(reps: &[Representation], num_classes: usize) -> Result<ProbeReport> {
    if reps.is_empty() {
        return Err(CoreError::EmptyDimension { what: "probe sample" });
    }
    let mut grouped: BTreeMap<(Modality, usize), Vec<&Vec<f32>>> = BTreeMap::new();
    for r in reps {
        grouped.entry((r.modality, r.class)).or_default().push(&r.vector);
    }
    let mut centroids: BTreeMap<(Modality, usize), Vec<f32>> = BTreeMap::new();
    for (key, vs) in &grouped {
        centroids.insert(*key, centroid(vs));
    }

    // classes usable for the cross-modal comparison need both modalities
    let mut excluded = Vec::new();
    let mut live = Vec::new();
    for c in 0..num_classes {
        let has_word = centroids.contains_key(&(Modality::Word, c));
        let has_region = centroids.contains_key(&(Modality::Region, c));
        if has_word && has_region {
            live.push(c);
        } else {
            excluded.push(c);
        }
    }
    if live.is_empty() {
        return Err(CoreError::Contract(
            "probe found no class with both word and region samples".into(),
        ));
    }

    let mut correct = 0usize;
    let mut total = 0usize;
    for r in reps.iter().filter(|r| r.modality == Modality::Region) {
        if !live.contains(&r.class) {
            continue;
        }
        total += 1;
        let mut best_class = live[0];
        let mut best_cos = f64::NEG_INFINITY;
        for &c in &live {
            let cw = &centroids[&(Modality::Word, c)];
            let cos = cosine(&r.vector, cw);
            if cos > best_cos {
                best_cos = cos;
                best_class = c;
            }
        }
        if best_class == r.class {
            correct += 1;
        }
    }

    let mean_cos = live
        .iter()
        .map(|&c| {
            cosine(
                &centroids[&(Modality::Word, c)],
                &centroids[&(Modality::Region, c)],
            )
        })
        .sum::<f64>()
        / live.len() as f64;

    let vectors: Vec<Vec<f32>> = reps.iter().map(|r| r.vector.clone()).collect();
    let coords = pca_2d(&vectors);
    let projection = reps
        .iter()
        .zip(&coords)
        .map(|(r, &(x, y))| ProjectionRecord {
            modality: r.modality.as_str().to_string(),
            class: r.class,
            x,
            y,
        })
        .collect();

    Ok(ProbeReport {
        nearest_centroid_accuracy: correct as f64 / total.max(1) as f64,
        mean_intra_class_cosine: mean_cos,
        samples: reps.len(),
        excluded_classes: excluded,
        centroids: centroids
            .into_iter()
            .map(|((m, c), v)| CentroidRecord {
                modality: m.as_str().to_string(),
                class: c,
                vector: v,
            })
            .collect(),
        projection,
    })
}

pub fn probe_alignment(
    model: &Model<f32>,
    world: &WorldModel,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let reps = collect_representations(model, world, config)?;
    probe_from_representations(&reps, world.spec.num_classes)
}

/// 2-D PCA: center, eigendecompose the covariance (cyclic Jacobi), project
/// onto the top-2 eigenvectors. Component signs are fixed by making each
/// eigenvector's largest-magnitude coordinate positive, so output is
/// deterministic.
pub fn pca_2d(vectors: &[Vec<f32>]) -> Vec<(f32, f32)> {
    let n = vectors.len();
    if n == 0 {
        return Vec::new();
    }
    let d = vectors[0].len();
    let mut mean = vec![0.0f64; d];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; d * d];
    for v in vectors {
        for i in 0..d {
            let ci = v[i] as f64 - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (v[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= n as f64;
            cov[j * d + i] = cov[i * d + j];
        }
    }

    let (eigvals, eigvecs) = jacobi_eigen(&cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let mut axes = Vec::new();
    for &idx in order.iter().take(2) {
        let mut axis: Vec<f64> = (0..d).map(|i| eigvecs[i * d + idx]).collect();
        let lead = axis
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
        axes.push(axis);
    }
    while axes.len() < 2 {
        axes.push(vec![0.0; d]); // rank-deficient data: flat second axis
    }

    vectors
        .iter()
        .map(|v| {
            let proj = |axis: &[f64]| {
                axis.iter()
                    .zip(v.iter())
                    .zip(mean.iter())
                    .map(|((&a, &x), &m)| a * (x as f64 - m))
                    .sum::<f64>() as f32
            };
            (proj(&axes[0]), proj(&axes[1]))
        })
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..d).map(|i| a[i * d + i]).collect();
    (eigvals, v)
}

#[derive(Serialize, Deserialize)]
struct ExportRecord {
    modality: String,
    class: String,
    vector: Vec<f32>,
}

/// Write one line-delimited record per representation:
/// `{"modality": "word|region|tag", "class": "<class word>", "vector": [...]}`.
pub fn export_embeddings(
    reps: &[Representation],
    world: &WorldModel,
    path: &Path,
) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for r in reps {
        let rec = ExportRecord {
            modality: r.modality.as_str().to_string(),
            class: world.vocab.word(world.class_tokens[r.class]).to_string(),
            vector: r.vector.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| CoreError::Parse {
            record: 0,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    w.flush()
        .map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Read an embedding export back. Classes resolve through the world's
/// class-word list; unknown class words are rejected with their record index.
pub fn read_embeddings(path: &Path, world: &WorldModel) -> Result<Vec<Representation>> {
    let file =
        std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExportRecord = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            record: i,
            msg: e.to_string(),
        })?;
        let modality = match rec.modality.as_str() {
            "word" => Modality::Word,
            "region" => Modality::Region,
            "tag" => Modality::Tag,
            other => {
                return Err(CoreError::Parse {
                    record: i,
                    msg: format!("unknown modality `{other}`"),
                })
            }
        };
        let token = world.vocab.id(&rec.class).ok_or_else(|| CoreError::Parse {
            record: i,
            msg: format!("unknown class word `{}`", rec.class),
        })?;
        let class = world.class_of_token(token).ok_or_else(|| CoreError::Parse {
            record: i,
            msg: format!("`{}` is not a class word", rec.class),
        })?;
        out.push(Representation {
            modality,
            class,
            vector: rec.vector,
        });
    }
    Ok(out)
}
