//! Synthetic dataset assembly: inquiry filtering, m schedules, per-subject
//! generation with oversampled inquiry copies, and manifest emission.

use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{m_grid, DenoiserModel, NoiseSchedule};
use crate::embedder::{cosine_similarity, EncoderCheckpoint, IdentityEmbedding};
use crate::error::{validation, Result};
use crate::image::ImageArray;
use crate::manifest::{digest_str, DatasetManifest, ImageRecord, Source};
use crate::sampler::{ddim_sample_batch, SamplerConfig};
use crate::toy::subject_dir;

/// Greedy filter in input order: a candidate is kept iff its similarity to every
/// already-kept candidate is at most `threshold`.
pub fn select_by_embedding(embeddings: &[IdentityEmbedding], threshold: f64) -> Result<Vec<usize>> {
    if embeddings.is_empty() {
        return Err(validation("inquiry pool is empty"));
    }
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(validation(format!("threshold {threshold} outside (-1, 1]")));
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, e) in embeddings.iter().enumerate() {
        let mut ok = true;
        for &k in &kept {
            if cosine_similarity(e, &embeddings[k])? > threshold {
                ok = false;
                break;
            }
        }
        if ok {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Embeds `pool` with `encoder` and applies [`select_by_embedding`].
pub fn select_inquiries(pool: &[ImageArray], encoder: &EncoderCheckpoint<f32>, threshold: f64) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(validation("inquiry pool is empty"));
    }
    let r = encoder.config().resolution;
    let resized: Vec<ImageArray> = pool.iter().map(|i| i.resized(r, r)).collect();
    let embeddings = encoder.embed_batch(&resized)?;
    select_by_embedding(&embeddings, threshold)
}

/// Ordered, duplicate-free similarity factors used round-robin during generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    m_values: Vec<f64>,
}

impl MixSchedule {
    pub fn new(m_values: Vec<f64>) -> Result<Self> {
        if m_values.is_empty() {
            return Err(validation("m schedule is empty"));
        }
        if let Some(m) = m_values.iter().find(|m| !(-1.0..=1.0).contains(*m)) {
            return Err(validation(format!("m = {m} outside [-1, 1]")));
        }
        for (i, a) in m_values.iter().enumerate() {
            if m_values[..i].contains(a) {
                return Err(validation(format!("m = {a} repeated in schedule")));
            }
        }
        Ok(Self { m_values })
    }

    pub fn fixed(m: f64) -> Result<Self> {
        Self::new(vec![m])
    }

    pub fn values(&self) -> &[f64] {
        &self.m_values
    }

    pub fn len(&self) -> usize {
        self.m_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_values.is_empty()
    }

    /// m of the `j`-th generated image of a subject.
    pub fn at(&self, j: usize) -> f64 {
        self.m_values[j % self.m_values.len()]
    }
}

/// `low, low + interval, …` capped at `high`.
pub fn mix_m_schedule(low: f64, high: f64, interval: f64) -> Result<MixSchedule> {
    MixSchedule::new(m_grid(low, high, interval)?)
}

/// Produces the generated images of one subject.
pub trait SubjectGenerator {
    /// One image per `(m, seed)` pair, in order.
    fn generate(&self, inquiry: &ImageArray, m_values: &[f64], seeds: &[u64]) -> Result<Vec<ImageArray>>;

    /// Stable description folded into the manifest digest.
    fn describe(&self) -> String;
}

/// Receives finished images by relative path.
pub trait ImageSink {
    fn put(&mut self, rel_path: &str, image: &ImageArray) -> Result<()>;
}

/// Writes PNGs under a root directory.
pub struct DirSink {
    root: PathBuf,
}

impl DirSink {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }
}

impl ImageSink for DirSink {
    fn put(&mut self, rel_path: &str, image: &ImageArray) -> Result<()> {
        let path = self.root.join(rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        image.save_png(&path)
    }
}

/// Discards images; for counting runs.
#[derive(Default)]
pub struct NullSink;

impl ImageSink for NullSink {
    fn put(&mut self, _: &str, _: &ImageArray) -> Result<()> {
        Ok(())
    }
}

/// The similarity-conditioned sampler as a [`SubjectGenerator`].
pub struct DiffusionGenerator<'a> {
    pub model: &'a DenoiserModel<f32>,
    pub schedule: &'a NoiseSchedule,
    pub encoder: &'a EncoderCheckpoint<f32>,
    pub sampler: SamplerConfig,
    /// Side length of the emitted images.
    pub output_resolution: usize,
}

impl SubjectGenerator for DiffusionGenerator<'_> {
    fn generate(&self, inquiry: &ImageArray, m_values: &[f64], seeds: &[u64]) -> Result<Vec<ImageArray>> {
        let r = self.encoder.config().resolution;
        let c_id = self.encoder.embed(&inquiry.resized(r, r))?;
        let conds: Vec<(&IdentityEmbedding, f64)> = m_values.iter().map(|&m| (&c_id, m)).collect();
        let out = ddim_sample_batch(self.model, self.schedule, &conds, seeds, &self.sampler)?;
        let o = self.output_resolution;
        Ok(out.into_iter().map(|i| i.resized(o, o).clamped()).collect())
    }

    fn describe(&self) -> String {
        format!(
            "ddim:steps={}:eta={}:clip={}:res={}",
            self.sampler.num_steps, self.sampler.eta, self.sampler.clip_x0, self.output_resolution
        )
    }
}

/// Counts and seeding of one assembly run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyPlan {
    pub schedule: MixSchedule,
    pub per_subject: usize,
    pub oversample: usize,
    pub seed: u64,
    /// Index of the first subject id, so separately assembled parts can be concatenated.
    pub subject_offset: usize,
}

impl AssemblyPlan {
    pub fn validate(&self) -> Result<()> {
        if self.per_subject == 0 {
            return Err(validation("per_subject must be at least 1"));
        }
        Ok(())
    }

    /// Seed of generated image `j` of subject `i` (0-based within this run).
    pub fn seed_of(&self, i: usize, j: usize) -> u64 {
        self.seed
            .wrapping_add(((self.subject_offset + i) * self.per_subject + j) as u64)
    }

    pub fn digest(&self, generator: &str, inquiry_digest: &str) -> Result<String> {
        Ok(digest_str(&format!(
            "assemble:v1:{}:{generator}:{inquiry_digest}",
            serde_json::to_string(self)?
        )))
    }
}

/// Digest of a set of inquiry images (their 8-bit contents, in order).
pub fn inquiry_digest(inquiries: &[ImageArray]) -> String {
    let mut s = String::new();
    for img in inquiries {
        s.push_str(&hex::encode(Sha256::digest(img.to_bytes())));
    }
    digest_str(&s)
}

/// Builds the dataset with an arbitrary generator and sink. Subjects whose
/// generation fails are skipped, logged, and flag the manifest as partial.
pub fn assemble_with(
    inquiries: &[ImageArray],
    generator: &dyn SubjectGenerator,
    sink: &mut dyn ImageSink,
    plan: &AssemblyPlan,
) -> Result<DatasetManifest> {
    plan.validate()?;
    let digest = plan.digest(&generator.describe(), &inquiry_digest(inquiries))?;
    let mut manifest = DatasetManifest::new(digest);
    manifest.records.reserve(inquiries.len() * (plan.per_subject + plan.oversample));
    for (i, inquiry) in inquiries.iter().enumerate() {
        let subject = subject_dir(plan.subject_offset + i);
        let m_values: Vec<f64> = (0..plan.per_subject).map(|j| plan.schedule.at(j)).collect();
        let seeds: Vec<u64> = (0..plan.per_subject).map(|j| plan.seed_of(i, j)).collect();
        let images = match generator.generate(inquiry, &m_values, &seeds) {
            Ok(images) if images.len() == plan.per_subject => images,
            Ok(images) => {
                error!("{subject}: generator returned {} of {} images", images.len(), plan.per_subject);
                manifest.header.partial = true;
                continue;
            }
            Err(e) => {
                error!("{subject}: generation failed: {e}");
                manifest.header.partial = true;
                continue;
            }
        };
        let (h, w) = (images[0].height(), images[0].width());
        let copy = inquiry.resized(h, w);
        for (j, img) in images.iter().enumerate() {
            let rel = format!("{subject}/img_{j:04}.png");
            sink.put(&rel, img)?;
            manifest.records.push(ImageRecord {
                subject_id: subject.clone(),
                path: rel,
                source: Source::Generated,
                m: Some(m_values[j]),
                seed: Some(seeds[j]),
            });
        }
        for k in 0..plan.oversample {
            let rel = format!("{subject}/img_{:04}.png", plan.per_subject + k);
            sink.put(&rel, &copy)?;
            manifest.records.push(ImageRecord {
                subject_id: subject.clone(),
                path: rel,
                source: Source::OversampledInquiry,
                m: None,
                seed: None,
            });
        }
        if (i + 1) % 100 == 0 {
            info!("assembled {} of {} subjects", i + 1, inquiries.len());
        }
    }
    Ok(manifest)
}

/// Generates the dataset into `out_dir` and writes `out_dir/manifest.jsonl`.
pub fn assemble_dataset(
    inquiries: &[ImageArray],
    generator: &dyn SubjectGenerator,
    plan: &AssemblyPlan,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let mut sink = DirSink::new(out_dir)?;
    let manifest = assemble_with(inquiries, generator, &mut sink, plan)?;
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Every PNG under `dir` (recursively), sorted by relative path.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, ImageArray)>> {
    let mut paths = Vec::new();
    collect_pngs(dir, &mut paths)?;
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
            Ok((rel, ImageArray::load_png(&p)?))
        })
        .collect()
}

fn collect_pngs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_pngs(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    Ok(())
}
