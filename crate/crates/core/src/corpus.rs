//! On-disk corpus formats: line-delimited JSON, one instance per line.
//!
//! Tokens and tags are stored as vocabulary words (a multi-subword tag is a
//! whitespace-joined word sequence), features as decimal floats with 32-bit
//! round-trip fidelity. Readers validate every instance invariant and report
//! failures with the offending record index. This is also the ingestion
//! format for externally precomputed region features.

use crate::embed::{BBox, ImageInstance, Region, TextInstance, Vocab};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct TextRecord {
    tokens: Vec<String>,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct RegionRecord {
    feature: Vec<f32>,
    #[serde(rename = "box")]
    bbox: [f32; 4],
    tag: String,
    label: usize,
    conf: f32,
}

#[derive(Serialize, Deserialize)]
struct ImageRecord {
    regions: Vec<RegionRecord>,
    source: String,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    text: TextRecord,
    image: ImageRecord,
}

/// Bounds the reader enforces beyond per-field checks.
#[derive(Debug, Clone, Copy)]
pub struct CorpusLimits {
    pub max_regions: usize,
    pub max_text_len: usize,
    pub num_detector_classes: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        CorpusLimits {
            max_regions: 36,
            max_text_len: 126,
            num_detector_classes: usize::MAX,
        }
    }
}

fn text_to_record(t: &TextInstance, vocab: &Vocab) -> TextRecord {
    TextRecord {
        tokens: t.tokens.iter().map(|&id| vocab.word(id).to_string()).collect(),
        source: t.source_id.clone(),
    }
}

fn record_to_text(
    rec: TextRecord,
    vocab: &Vocab,
    limits: &CorpusLimits,
    record: usize,
) -> Result<TextInstance> {
    if rec.tokens.is_empty() || rec.tokens.len() > limits.max_text_len {
        return Err(CoreError::Parse {
            record,
            msg: format!(
                "text length {} outside [1, {}]",
                rec.tokens.len(),
                limits.max_text_len
            ),
        });
    }
    let tokens = rec
        .tokens
        .iter()
        .map(|w| {
            vocab.id(w).ok_or_else(|| CoreError::Parse {
                record,
                msg: format!("unknown word `{w}`"),
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(TextInstance {
        tokens,
        source_id: rec.source,
    })
}

fn image_to_record(img: &ImageInstance, vocab: &Vocab) -> ImageRecord {
    ImageRecord {
        regions: img
            .regions
            .iter()
            .map(|r| RegionRecord {
                feature: r.feature.clone(),
                bbox: [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2],
                tag: r
                    .tag_tokens
                    .iter()
                    .map(|&id| vocab.word(id))
                    .collect::<Vec<_>>()
                    .join(" "),
                label: r.detector_label,
                conf: r.detector_confidence,
            })
            .collect(),
        source: img.source_id.clone(),
    }
}

fn record_to_image(
    rec: ImageRecord,
    vocab: &Vocab,
    limits: &CorpusLimits,
    record: usize,
) -> Result<ImageInstance> {
    if rec.regions.is_empty() || rec.regions.len() > limits.max_regions {
        return Err(CoreError::Parse {
            record,
            msg: format!(
                "region count {} outside [1, {}]",
                rec.regions.len(),
                limits.max_regions
            ),
        });
    }
    let mut regions = Vec::with_capacity(rec.regions.len());
    for r in rec.regions {
        let bbox = BBox::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]).map_err(|e| {
            CoreError::Parse {
                record,
                msg: e.to_string(),
            }
        })?;
        if r.tag.trim().is_empty() {
            return Err(CoreError::Parse {
                record,
                msg: "empty tag".into(),
            });
        }
        let tag_tokens = r
            .tag
            .split_whitespace()
            .map(|w| {
                vocab.id(w).ok_or_else(|| CoreError::Parse {
                    record,
                    msg: format!("unknown tag word `{w}`"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        if r.label >= limits.num_detector_classes {
            return Err(CoreError::Parse {
                record,
                msg: format!(
                    "detector label {} outside [0, {})",
                    r.label, limits.num_detector_classes
                ),
            });
        }
        if !(0.0..=1.0).contains(&r.conf) {
            return Err(CoreError::Parse {
                record,
                msg: format!("confidence {} outside [0, 1]", r.conf),
            });
        }
        if r.feature.is_empty() {
            return Err(CoreError::Parse {
                record,
                msg: "empty feature vector".into(),
            });
        }
        regions.push(Region {
            feature: r.feature,
            bbox,
            tag_tokens,
            detector_label: r.label,
            detector_confidence: r.conf,
        });
    }
    Ok(ImageInstance {
        regions,
        source_id: rec.source,
    })
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item)
            .map_err(|e| CoreError::Parse { record: 0, msg: e.to_string() })?;
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn read_lines<T, F, O>(path: &Path, parse: F) -> Result<Vec<O>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(T, usize) -> Result<O>,
{
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            record: i,
            msg: e.to_string(),
        })?;
        out.push(parse(rec, i)?);
    }
    Ok(out)
}

pub fn write_text_corpus(path: &Path, items: &[TextInstance], vocab: &Vocab) -> Result<()> {
    write_lines(path, items.iter().map(|t| text_to_record(t, vocab)))
}

pub fn read_text_corpus(path: &Path, vocab: &Vocab, limits: &CorpusLimits) -> Result<Vec<TextInstance>> {
    read_lines(path, |rec, i| record_to_text(rec, vocab, limits, i))
}

pub fn write_image_corpus(path: &Path, items: &[ImageInstance], vocab: &Vocab) -> Result<()> {
    write_lines(path, items.iter().map(|img| image_to_record(img, vocab)))
}

pub fn read_image_corpus(
    path: &Path,
    vocab: &Vocab,
    limits: &CorpusLimits,
) -> Result<Vec<ImageInstance>> {
    read_lines(path, |rec, i| record_to_image(rec, vocab, limits, i))
}

pub fn write_paired_corpus(
    path: &Path,
    items: &[(TextInstance, ImageInstance)],
    vocab: &Vocab,
) -> Result<()> {
    write_lines(
        path,
        items.iter().map(|(t, img)| PairRecord {
            text: text_to_record(t, vocab),
            image: image_to_record(img, vocab),
        }),
    )
}

pub fn read_paired_corpus(
    path: &Path,
    vocab: &Vocab,
    limits: &CorpusLimits,
) -> Result<Vec<(TextInstance, ImageInstance)>> {
    read_lines(path, |rec: PairRecord, i| {
        Ok((
            record_to_text(rec.text, vocab, limits, i)?,
            record_to_image(rec.image, vocab, limits, i)?,
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_world, WorldSpec};
    use crate::rng::rng_from_seed;

    fn setup() -> (crate::world::WorldModel, tempfile::TempDir) {
        let world = generate_world(&WorldSpec::default(), 42).unwrap();
        (world, tempfile::tempdir().unwrap())
    }

    #[test]
    fn text_corpus_roundtrips_exactly() {
        let (w, dir) = setup();
        let mut rng = rng_from_seed(1);
        let items: Vec<_> = (0..40).map(|_| w.sample_text(&mut rng, "t")).collect();
        let path = dir.path().join("text.jsonl");
        write_text_corpus(&path, &items, &w.vocab).unwrap();
        let back = read_text_corpus(&path, &w.vocab, &CorpusLimits::default()).unwrap();
        assert_eq!(items, back);
    }

    #[test]
    fn image_and_paired_corpora_roundtrip_exactly() {
        let (w, dir) = setup();
        let mut rng = rng_from_seed(2);
        let images: Vec<_> = (0..30).map(|_| w.sample_image(&mut rng, "i")).collect();
        let ipath = dir.path().join("images.jsonl");
        write_image_corpus(&ipath, &images, &w.vocab).unwrap();
        let back = read_image_corpus(&ipath, &w.vocab, &CorpusLimits::default()).unwrap();
        assert_eq!(images, back); // f32 decimal round-trip must be lossless

        let pairs: Vec<_> = (0..20).map(|_| w.sample_pair(&mut rng, "p")).collect();
        let ppath = dir.path().join("pairs.jsonl");
        write_paired_corpus(&ppath, &pairs, &w.vocab).unwrap();
        let pback = read_paired_corpus(&ppath, &w.vocab, &CorpusLimits::default()).unwrap();
        assert_eq!(pairs, pback);
    }

    #[test]
    fn empty_corpus_file_reads_as_empty() {
        let (w, dir) = setup();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_text_corpus(&path, &w.vocab, &CorpusLimits::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn corrupted_box_is_rejected_at_its_record_index() {
        let (w, dir) = setup();
        let mut rng = rng_from_seed(3);
        let images: Vec<_> = (0..3).map(|_| w.sample_image(&mut rng, "i")).collect();
        let path = dir.path().join("bad.jsonl");
        write_image_corpus(&path, &images, &w.vocab).unwrap();
        // corrupt record 1: swap x1/x2 so x1 > x2
        let content = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = content.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        let b = rec["regions"][0]["box"].clone();
        rec["regions"][0]["box"] = serde_json::json!([b[2], b[1], b[0], b[3]]);
        lines[1] = serde_json::to_string(&rec).unwrap();
        std::fs::write(&path, lines.join("\n")).unwrap();

        let err = read_image_corpus(&path, &w.vocab, &CorpusLimits::default()).unwrap_err();
        match err {
            CoreError::Parse { record, msg } => {
                assert_eq!(record, 1);
                assert!(msg.contains("x1"), "{msg}");
            }
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn unknown_words_and_bad_labels_are_rejected() {
        let (w, dir) = setup();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(&path, "{\"tokens\":[\"nosuchword\"],\"source\":\"x\"}\n").unwrap();
        assert!(matches!(
            read_text_corpus(&path, &w.vocab, &CorpusLimits::default()),
            Err(CoreError::Parse { record: 0, .. })
        ));

        let limits = CorpusLimits {
            num_detector_classes: 8,
            ..CorpusLimits::default()
        };
        let ipath = dir.path().join("badlabel.jsonl");
        let word = w.vocab.word(w.class_tokens[0]);
        std::fs::write(
            &ipath,
            format!(
                "{{\"regions\":[{{\"feature\":[0.1],\"box\":[0.1,0.1,0.5,0.5],\"tag\":\"{word}\",\"label\":9,\"conf\":0.7}}],\"source\":\"x\"}}\n"
            ),
        )
        .unwrap();
        assert!(matches!(
            read_image_corpus(&ipath, &w.vocab, &limits),
            Err(CoreError::Parse { record: 0, .. })
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn arbitrary_image_instances_roundtrip(
                seed in 0u64..1000,
                m in 1usize..6,
                f_dim in 1usize..8,
            ) {
                let (w, dir) = setup();
                let mut rng = rng_from_seed(seed);
                let regions: Vec<Region> = (0..m)
                    .map(|_| {
                        let feature: Vec<f32> = (0..f_dim)
                            .map(|_| crate::rng::sample_normal(&mut rng) as f32)
                            .collect();
                        let x1: f32 = rng.gen_range(0.0..0.8);
                        let y1: f32 = rng.gen_range(0.0..0.8);
                        let bbox = BBox::new(
                            x1,
                            y1,
                            x1 + rng.gen_range(0.01..0.2),
                            y1 + rng.gen_range(0.01..0.2),
                        )
                        .unwrap();
                        Region {
                            feature,
                            bbox,
                            tag_tokens: vec![w.class_tokens[seed as usize % w.class_tokens.len()]],
                            detector_label: seed as usize % w.spec.num_classes,
                            detector_confidence: 0.75,
                        }
                    })
                    .collect();
                let img = ImageInstance { regions, source_id: format!("s{seed}") };
                let path = dir.path().join("prop.jsonl");
                write_image_corpus(&path, &[img.clone()], &w.vocab).unwrap();
                let back = read_image_corpus(&path, &w.vocab, &CorpusLimits::default()).unwrap();
                prop_assert_eq!(back, vec![img]);
            }
        }
    }

    #[test]
    fn multi_subword_tags_roundtrip_through_whitespace_join() {
        let (w, dir) = setup();
        let mut rng = rng_from_seed(4);
        let mut img = w.sample_image(&mut rng, "i");
        img.regions[0].tag_tokens = vec![w.class_tokens[0], w.filler_tokens[0]];
        let path = dir.path().join("multi.jsonl");
        write_image_corpus(&path, &[img.clone()], &w.vocab).unwrap();
        let back = read_image_corpus(&path, &w.vocab, &CorpusLimits::default()).unwrap();
        assert_eq!(back[0].regions[0].tag_tokens, img.regions[0].tag_tokens);
    }
}
