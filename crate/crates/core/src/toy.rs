//! Procedural identity corpus.
//!
//! Each identity is a seeded code: a background colour plus three coloured
//! shapes at fixed positions. Each image of that identity re-renders the code
//! under nuisance jitter (translation, colour shift, an occluding patch, blur
//! and pixel noise) small enough that images of one identity stay closer to
//! each other than to any other identity.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::Corpus;
use crate::error::{validation, Result};
use crate::image::ImageArray;
use crate::manifest::{digest_str, DatasetManifest, ImageRecord, Source};

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Disk,
    Rect,
    Ring,
    Bar,
}

#[derive(Clone, Debug)]
struct Shape {
    kind: ShapeKind,
    color: [f32; 3],
    cx: f32,
    cy: f32,
    size: f32,
}

#[derive(Clone, Debug)]
struct IdentityCode {
    background: [f32; 3],
    shapes: Vec<Shape>,
}

fn color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
        rng.random_range(-0.9..0.9),
    ]
}

impl IdentityCode {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let background = color(rng);
        let shapes = (0..3)
            .map(|_| Shape {
                kind: match rng.random_range(0..4) {
                    0 => ShapeKind::Disk,
                    1 => ShapeKind::Rect,
                    2 => ShapeKind::Ring,
                    _ => ShapeKind::Bar,
                },
                color: color(rng),
                cx: rng.random_range(0.25..0.75),
                cy: rng.random_range(0.25..0.75),
                size: rng.random_range(0.12..0.26),
            })
            .collect();
        Self { background, shapes }
    }
}

/// Nuisance parameters applied to one rendering.
struct Jitter {
    dx: f32,
    dy: f32,
    color_shift: [f32; 3],
    occluder: Option<(f32, f32, f32)>,
    blur: usize,
    noise: f32,
}

impl Jitter {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            dx: rng.random_range(-0.06..0.06),
            dy: rng.random_range(-0.06..0.06),
            color_shift: [
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ],
            occluder: rng.random_bool(0.4).then(|| {
                (
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.08..0.16),
                )
            }),
            blur: rng.random_range(0..2),
            noise: 0.03,
        }
    }
}

fn inside(shape: &Shape, x: f32, y: f32) -> bool {
    let (dx, dy) = (x - shape.cx, y - shape.cy);
    match shape.kind {
        ShapeKind::Disk => dx * dx + dy * dy <= shape.size * shape.size,
        ShapeKind::Rect => dx.abs() <= shape.size && dy.abs() <= shape.size * 0.7,
        ShapeKind::Ring => {
            let r2 = dx * dx + dy * dy;
            r2 <= shape.size * shape.size && r2 >= 0.36 * shape.size * shape.size
        }
        ShapeKind::Bar => dx.abs() <= shape.size * 0.35 && dy.abs() <= shape.size * 1.2,
    }
}

fn render(code: &IdentityCode, jitter: &Jitter, resolution: usize, rng: &mut ChaCha8Rng) -> ImageArray {
    let r = resolution;
    let mut img = ImageArray::zeros(3, r, r);
    let noise = Normal::new(0.0f32, jitter.noise).expect("valid noise std");
    for py in 0..r {
        for px in 0..r {
            let x = (px as f32 + 0.5) / r as f32 - jitter.dx;
            let y = (py as f32 + 0.5) / r as f32 - jitter.dy;
            let mut c = code.background;
            for s in &code.shapes {
                if inside(s, x, y) {
                    c = s.color;
                }
            }
            if let Some((ox, oy, os)) = jitter.occluder {
                let (ux, uy) = ((px as f32 + 0.5) / r as f32, (py as f32 + 0.5) / r as f32);
                if (ux - ox).abs() <= os && (uy - oy).abs() <= os {
                    c = [0.0; 3];
                }
            }
            for (ch, v) in c.iter().enumerate() {
                img.set(ch, py, px, v + jitter.color_shift[ch]);
            }
        }
    }
    for _ in 0..jitter.blur {
        img = box_blur(&img);
    }
    for v in img.data_mut() {
        *v += noise.sample(rng);
    }
    img.clamped()
}

fn box_blur(img: &ImageArray) -> ImageArray {
    let [c, h, w] = img.dims();
    let mut out = ImageArray::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += img.at(ch, yy, xx);
                        n += 1.0;
                    }
                }
                out.set(ch, y, x, acc / n);
            }
        }
    }
    out
}

/// Toy corpus dimensions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub identities: usize,
    pub per_identity: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl ToySpec {
    fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(validation(format!("toy corpus needs at least 2 identities, got {}", self.identities)));
        }
        if self.per_identity == 0 || self.resolution < 4 {
            return Err(validation("toy corpus needs at least 1 image per identity and resolution >= 4"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        digest_str(&format!(
            "toy:v1:{}:{}:{}:{}",
            self.identities, self.per_identity, self.resolution, self.seed
        ))
    }
}

/// Renders identity `index` of the toy universe seeded by `seed`.
fn identity_code(seed: u64, index: usize) -> IdentityCode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    IdentityCode::sample(&mut rng)
}

/// Renders the whole corpus in memory; images are ordered identity-major.
pub fn render_toy_corpus(spec: &ToySpec) -> Result<Corpus> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.identities * spec.per_identity);
    let mut labels = Vec::with_capacity(images.capacity());
    for id in 0..spec.identities {
        let code = identity_code(spec.seed, id);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1_000_003 * (id as u64 + 1)));
        for _ in 0..spec.per_identity {
            let jitter = Jitter::sample(&mut rng);
            images.push(render(&code, &jitter, spec.resolution, &mut rng));
            labels.push(id);
        }
    }
    let subject_ids = (0..spec.identities).map(subject_dir).collect();
    Corpus::new(images, labels, subject_ids)
}

pub(crate) fn subject_dir(i: usize) -> String {
    format!("subject_{i:05}")
}

/// Writes the corpus as PNGs under `out_dir/subject_<05d>/img_<04d>.png` and
/// returns its manifest (also written to `out_dir/manifest.jsonl`).
pub fn make_toy_corpus(spec: &ToySpec, out_dir: &Path) -> Result<DatasetManifest> {
    let corpus = render_toy_corpus(spec)?;
    let mut manifest = DatasetManifest::new(spec.digest());
    let mut per_subject = vec![0usize; corpus.num_classes()];
    for (img, &label) in corpus.images().iter().zip(corpus.labels()) {
        let subject = &corpus.subject_ids()[label];
        let rel = format!("{subject}/img_{:04}.png", per_subject[label]);
        per_subject[label] += 1;
        let path = out_dir.join(&rel);
        std::fs::create_dir_all(path.parent().expect("image path has a parent"))?;
        img.save_png(&path)?;
        manifest.records.push(ImageRecord {
            subject_id: subject.clone(),
            path: rel,
            source: Source::Real,
            m: None,
            seed: None,
        });
    }
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_and_determinism() {
        let spec = ToySpec {
            identities: 4,
            per_identity: 3,
            resolution: 16,
            seed: 5,
        };
        let a = render_toy_corpus(&spec).unwrap();
        let b = render_toy_corpus(&spec).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a.num_classes(), 4);
        assert_eq!(a.images(), b.images());
        assert!(a.images().iter().all(|i| i.validate().is_ok()));
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let spec = ToySpec {
            identities: 1,
            per_identity: 3,
            resolution: 16,
            seed: 0,
        };
        assert!(render_toy_corpus(&spec).is_err());
    }

    #[test]
    fn intra_identity_distance_below_inter_identity() {
        let spec = ToySpec {
            identities: 10,
            per_identity: 6,
            resolution: 32,
            seed: 1,
        };
        let c = render_toy_corpus(&spec).unwrap();
        let dist = |a: &ImageArray, b: &ImageArray| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f32>()
        };
        let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0, 0.0, 0);
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                let d = dist(&c.images()[i], &c.images()[j]);
                if c.labels()[i] == c.labels()[j] {
                    intra += d;
                    ni += 1;
                } else {
                    inter += d;
                    nx += 1;
                }
            }
        }
        assert!(intra / (ni as f32) < 0.6 * inter / (nx as f32));
    }
}
