//! Scoring images against their identity centers, equal-size similarity
//! groups, and raw embedding export.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedder::{cosine_similarity, identity_centers, ClassifierHead, EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::manifest::{digest_str, DatasetManifest, ImageRecord, Source};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub subject_id: String,
    pub path: String,
    pub similarity_to_center: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGroup {
    pub group_id: usize,
    pub members: Vec<ScoredImage>,
    pub mean_similarity: f64,
}

/// Records the scorer looks at; oversampled inquiry copies can be left out.
pub fn scoring_records(manifest: &DatasetManifest, exclude_oversampled: bool) -> Vec<&ImageRecord> {
    manifest
        .records
        .iter()
        .filter(|r| !(exclude_oversampled && r.source == Source::OversampledInquiry))
        .collect()
}

/// Scores precomputed embeddings against the centers of `subjects` (the head's class order).
pub fn score_embeddings(
    records: &[&ImageRecord],
    embeddings: &[IdentityEmbedding],
    centers: &[IdentityEmbedding],
    subjects: &[String],
) -> Result<Vec<ScoredImage>> {
    if records.len() != embeddings.len() {
        return Err(validation("one embedding per record required"));
    }
    if subjects.len() != centers.len() {
        return Err(Error::Mapping(format!(
            "{} subject ids for {} centers",
            subjects.len(),
            centers.len()
        )));
    }
    let index: HashMap<&str, usize> = subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    records
        .iter()
        .zip(embeddings)
        .map(|(r, e)| {
            let k = *index
                .get(r.subject_id.as_str())
                .ok_or_else(|| Error::Mapping(format!("subject {} has no center in the head", r.subject_id)))?;
            Ok(ScoredImage {
                subject_id: r.subject_id.clone(),
                path: r.path.clone(),
                similarity_to_center: cosine_similarity(e, &centers[k])?,
            })
        })
        .collect()
}

/// Embeds the manifest's images (resized to the encoder input).
pub fn embed_records(records: &[&ImageRecord], root: &Path, encoder: &EncoderCheckpoint<f32>) -> Result<Vec<IdentityEmbedding>> {
    let r = encoder.config().resolution;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(256) {
        let images = chunk
            .iter()
            .map(|rec| Ok(ImageArray::load_png(&root.join(&rec.path))?.resized(r, r)))
            .collect::<Result<Vec<_>>>()?;
        out.extend(encoder.embed_batch(&images)?);
    }
    Ok(out)
}

/// Cosine similarity of every image to its subject's normalized head row.
pub fn score_to_center(
    manifest: &DatasetManifest,
    root: &Path,
    encoder: &EncoderCheckpoint<f32>,
    head: &ClassifierHead<f32>,
    subjects: &[String],
    exclude_oversampled: bool,
) -> Result<Vec<ScoredImage>> {
    let records = scoring_records(manifest, exclude_oversampled);
    let centers = identity_centers(head)?;
    let embeddings = embed_records(&records, root, encoder)?;
    score_embeddings(&records, &embeddings, &centers, subjects)
}

/// Descending similarity; ties broken by `(subject_id, path)`.
pub fn similarity_order(a: &ScoredImage, b: &ScoredImage) -> Ordering {
    b.similarity_to_center
        .total_cmp(&a.similarity_to_center)
        .then_with(|| a.subject_id.cmp(&b.subject_id))
        .then_with(|| a.path.cmp(&b.path))
}

/// Sorts and cuts into `n_groups` contiguous chunks; the first `len % n_groups` get one extra.
pub fn bucket_by_similarity(scored: &[ScoredImage], n_groups: usize) -> Result<Vec<SimilarityGroup>> {
    if n_groups == 0 || n_groups > scored.len() {
        return Err(validation(format!("cannot split {} images into {n_groups} groups", scored.len())));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(similarity_order);
    let base = sorted.len() / n_groups;
    let extra = sorted.len() % n_groups;
    let mut rest = sorted.into_iter();
    Ok((0..n_groups)
        .map(|g| {
            let size = base + usize::from(g < extra);
            let members: Vec<ScoredImage> = rest.by_ref().take(size).collect();
            let mean_similarity = members.iter().map(|m| m.similarity_to_center).sum::<f64>() / size as f64;
            SimilarityGroup {
                group_id: g,
                members,
                mean_similarity,
            }
        })
        .collect())
}

/// One manifest per group, carrying the source records of its members.
pub fn group_manifests(source: &DatasetManifest, groups: &[SimilarityGroup]) -> Result<Vec<DatasetManifest>> {
    let by_path: HashMap<&str, &ImageRecord> = source.records.iter().map(|r| (r.path.as_str(), r)).collect();
    groups
        .iter()
        .map(|g| {
            let mut m = DatasetManifest::new(digest_str(&format!("group:{}:{}", source.header.digest, g.group_id)));
            m.header.group_id = Some(g.group_id);
            m.header.mean_similarity = Some(g.mean_similarity);
            m.header.partial = source.header.partial;
            for member in &g.members {
                let rec = by_path
                    .get(member.path.as_str())
                    .ok_or_else(|| Error::Mapping(format!("{} is not in the source manifest", member.path)))?;
                m.records.push((*rec).clone());
            }
            Ok(m)
        })
        .collect()
}

/// Copies the images of `manifest` from `source_root` into `out_dir` under the
/// same relative paths and writes `out_dir/manifest.jsonl`.
pub fn materialize(manifest: &DatasetManifest, source_root: &Path, out_dir: &Path) -> Result<()> {
    for r in &manifest.records {
        let dst = out_dir.join(&r.path);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::copy(source_root.join(&r.path), &dst)?;
    }
    manifest.write(&out_dir.join("manifest.jsonl"))
}

/// Header line of an embedding export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExportHeader {
    pub count: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub subject_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarities: Option<Vec<f64>>,
}

/// An exported embedding set read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingExport {
    pub header: EmbeddingExportHeader,
    pub vectors: Vec<Vec<f32>>,
}

/// Writes a JSON header line then `count · D` little-endian f32 values.
pub fn write_embeddings(
    out: &Path,
    subject_ids: &[String],
    embeddings: &[IdentityEmbedding],
    similarities: Option<&[f64]>,
) -> Result<()> {
    let first = embeddings.first().ok_or_else(|| validation("nothing to export"))?;
    if subject_ids.len() != embeddings.len() || similarities.is_some_and(|s| s.len() != embeddings.len()) {
        return Err(validation("one subject id (and similarity) per embedding required"));
    }
    let header = EmbeddingExportHeader {
        count: embeddings.len(),
        dim: first.dim(),
        subject_ids: subject_ids.to_vec(),
        similarities: similarities.map(<[f64]>::to_vec),
    };
    let mut f = std::io::BufWriter::new(fs::File::create(out)?);
    f.write_all(serde_json::to_string(&header)?.as_bytes())?;
    f.write_all(b"\n")?;
    for e in embeddings {
        if e.dim() != header.dim {
            return Err(Error::Dimension("mixed embedding widths".into()));
        }
        for v in e.as_slice() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingExport> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: EmbeddingExportHeader = serde_json::from_str(line.trim_end())?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.count * header.dim * 4 {
        return Err(Error::Format(format!(
            "expected {} floats, found {} bytes",
            header.count * header.dim,
            bytes.len()
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let vectors = floats.chunks(header.dim.max(1)).map(<[f32]>::to_vec).collect();
    Ok(EmbeddingExport { header, vectors })
}

/// Embeds every record of `manifest` and writes the export.
pub fn export_embeddings(
    manifest: &DatasetManifest,
    root: &Path,
    encoder: &EncoderCheckpoint<f32>,
    scores: Option<&[ScoredImage]>,
    out: &Path,
) -> Result<()> {
    if manifest.is_empty() {
        return Err(validation("manifest is empty"));
    }
    let records: Vec<&ImageRecord> = manifest.records.iter().collect();
    let embeddings = embed_records(&records, root, encoder)?;
    let ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
    let sims = scores.map(|s| {
        let by_path: HashMap<&str, f64> = s.iter().map(|x| (x.path.as_str(), x.similarity_to_center)).collect();
        records
            .iter()
            .map(|r| by_path.get(r.path.as_str()).copied().unwrap_or(f64::NAN))
            .collect::<Vec<f64>>()
    });
    write_embeddings(out, &ids, &embeddings, sims.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn unit(v: &[f64]) -> IdentityEmbedding {
        IdentityEmbedding::normalized(v).unwrap()
    }

    fn rec(subject: &str, path: &str) -> ImageRecord {
        ImageRecord {
            subject_id: subject.into(),
            path: path.into(),
            source: Source::Real,
            m: None,
            seed: None,
        }
    }

    fn scored(sims: &[f64]) -> Vec<ScoredImage> {
        sims.iter()
            .enumerate()
            .map(|(i, &s)| ScoredImage {
                subject_id: format!("s{}", i % 3),
                path: format!("p{i:03}"),
                similarity_to_center: s,
            })
            .collect()
    }

    #[test]
    fn score_examples() {
        let head = ClassifierHead::<f32>::new(Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 3.0]), 0.4, 64.0).unwrap();
        let centers = identity_centers(&head).unwrap();
        let subjects = vec!["a".to_string(), "b".to_string()];
        let r1 = rec("a", "x");
        let r2 = rec("b", "y");
        let r3 = rec("c", "z");
        let s = score_embeddings(&[&r1, &r2], &[unit(&[1.0, 0.0]), unit(&[1.0, 0.0])], &centers, &subjects).unwrap();
        assert_eq!(s[0].similarity_to_center, 1.0);
        assert_eq!(s[1].similarity_to_center, 0.0);
        assert!(matches!(
            score_embeddings(&[&r3], &[unit(&[1.0, 0.0])], &centers, &subjects),
            Err(Error::Mapping(_))
        ));
    }

    #[test]
    fn ten_into_five() {
        let g = bucket_by_similarity(&scored(&[0.1, 0.9, 0.3, 0.5, 0.7, 0.2, 0.4, 0.6, 0.8, 0.0]), 5).unwrap();
        assert!(g.iter().all(|x| x.members.len() == 2));
        assert!(g.windows(2).all(|w| w[0].mean_similarity > w[1].mean_similarity));
        assert!(bucket_by_similarity(&scored(&[0.1]), 2).is_err());
        assert!(bucket_by_similarity(&scored(&[0.1]), 0).is_err());
    }

    #[test]
    fn ties_ordered_by_subject_then_path() {
        let items = vec![
            ScoredImage {
                subject_id: "b".into(),
                path: "1".into(),
                similarity_to_center: 0.5,
            },
            ScoredImage {
                subject_id: "a".into(),
                path: "2".into(),
                similarity_to_center: 0.5,
            },
            ScoredImage {
                subject_id: "a".into(),
                path: "1".into(),
                similarity_to_center: 0.5,
            },
        ];
        let g = bucket_by_similarity(&items, 1).unwrap();
        let order: Vec<_> = g[0].members.iter().map(|m| (m.subject_id.as_str(), m.path.as_str())).collect();
        assert_eq!(order, vec![("a", "1"), ("a", "2"), ("b", "1")]);
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let e = vec![unit(&[1.0, 2.0, 3.0, 4.0]), unit(&[0.0, 1.0, 0.0, 1.0]), unit(&[-1.0, 0.5, 0.0, 2.0])];
        let ids = vec!["a".to_string(), "a".to_string(), "b".to_string()];
        write_embeddings(&path, &ids, &e, Some(&[0.9, 0.8, 0.7])).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.header.count, 3);
        assert_eq!(back.header.dim, 4);
        assert!(back.vectors.iter().all(|v| v.len() == 4));
        for v in &back.vectors {
            let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
        for i in 0..3 {
            for j in 0..3 {
                let want = cosine_similarity(&e[i], &e[j]).unwrap();
                let got: f64 = back.vectors[i].iter().zip(&back.vectors[j]).map(|(a, b)| *a as f64 * *b as f64).sum();
                assert!((want - got).abs() < 1e-6);
            }
        }
        let text = fs::read(&path).unwrap();
        let nl = text.iter().position(|&b| b == b'\n').unwrap();
        let head: serde_json::Value = serde_json::from_slice(&text[..nl]).unwrap();
        assert_eq!(head["count"], 3);
        assert_eq!(head["D"], 4);
    }

    #[test]
    fn group_manifest_headers() {
        let mut src = DatasetManifest::new("d");
        let items = scored(&[0.9, 0.1, 0.5, 0.3]);
        for s in &items {
            src.records.push(rec(&s.subject_id, &s.path));
        }
        let groups = bucket_by_similarity(&items, 2).unwrap();
        let ms = group_manifests(&src, &groups).unwrap();
        assert_eq!(ms[1].header.group_id, Some(1));
        assert_eq!(ms[0].records[0].path, "p000");
        assert!(ms[0].to_jsonl().unwrap().lines().next().unwrap().contains("\"group_id\":0"));
    }
}
