//! Recognition training on a labelled (real or synthetic) dataset: SGD with
//! momentum under CosFace, step-decayed learning rate, and the standard
//! crop / flip / colour-jitter / erasing augmentations.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::corpus::Corpus;
use crate::embedder::{
    check_corpus, cosface_loss_graph, count_correct, ClassifierHead, EncoderCheckpoint, EncoderConfig, EpochLog,
};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::nn::Sgd;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale: [f64; 2],
    /// Aspect-ratio range of the crop (sampled log-uniformly).
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub erase_prob: f64,
    /// Area fraction range of the erased rectangle.
    pub erase_scale: [f64; 2],
    pub erase_ratio: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.9, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.1,
            erase_prob: 0.5,
            erase_scale: [0.02, 0.1],
            erase_ratio: [0.3, 3.3],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            erase_prob: 0.0,
            erase_scale: [0.02, 0.1],
            erase_ratio: [0.3, 3.3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("flip_prob", self.flip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(validation(format!("{name} = {p} outside [0, 1]")));
            }
        }
        for (name, [lo, hi]) in [
            ("crop_scale", self.crop_scale),
            ("erase_scale", self.erase_scale),
        ] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(validation(format!("{name} [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
            }
        }
        for (name, [lo, hi]) in [("crop_ratio", self.crop_ratio), ("erase_ratio", self.erase_ratio)] {
            if !(0.0 < lo && lo <= hi) {
                return Err(validation(format!("{name} [{lo}, {hi}] invalid")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(validation(format!("{name} jitter {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn log_uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    uniform(rng, [lo.ln(), hi.ln()]).exp()
}

/// Picks an `h × w` rectangle with area fraction in `scale` and aspect in `ratio`.
fn sample_rect(rng: &mut impl Rng, height: usize, width: usize, scale: [f64; 2], ratio: [f64; 2]) -> Option<(usize, usize)> {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = uniform(rng, scale) * area;
        let r = log_uniform(rng, ratio);
        let w = (target * r).sqrt().round() as usize;
        let h = (target / r).sqrt().round() as usize;
        let frac = (h * w) as f64 / area;
        if w >= 1 && h >= 1 && w <= width && h <= height && frac >= scale[0] - 1e-12 && frac <= scale[1] + 1e-12 {
            return Some((h, w));
        }
    }
    None
}

fn crop(image: &ImageArray, y0: usize, x0: usize, h: usize, w: usize) -> ImageArray {
    let c = image.channels();
    let mut out = ImageArray::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, image.at(ch, y0 + y, x0 + x));
            }
        }
    }
    out
}

fn random_resized_crop(image: &ImageArray, config: &AugmentConfig, rng: &mut impl Rng) -> ImageArray {
    let [_, h, w] = image.dims();
    let (ch, cw) = sample_rect(rng, h, w, config.crop_scale, config.crop_ratio).unwrap_or_else(|| {
        let s = h.min(w);
        (s, s)
    });
    if (ch, cw) == (h, w) {
        return image.clone();
    }
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    crop(image, y0, x0, ch, cw).resized(h, w)
}

fn hflip(image: &ImageArray) -> ImageArray {
    let [c, h, w] = image.dims();
    let mut out = ImageArray::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ch, y, x, image.at(ch, y, w - 1 - x));
            }
        }
    }
    out
}

/// Brightness, contrast, saturation and hue jitter on `[0, 1]` intensities.
fn color_jitter(image: &ImageArray, config: &AugmentConfig, rng: &mut impl Rng) -> ImageArray {
    let b = 1.0 + uniform(rng, [-config.brightness, config.brightness]);
    let c = 1.0 + uniform(rng, [-config.contrast, config.contrast]);
    let s = 1.0 + uniform(rng, [-config.saturation, config.saturation]);
    let hue = uniform(rng, [-config.hue, config.hue]);
    let [chs, h, w] = image.dims();
    if chs != 3 {
        return image.clone();
    }
    let n = h * w;
    let mut px: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            [0, 1, 2].map(|k| (image.at(k, y, x) as f64 + 1.0) / 2.0 * b)
        })
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mean = px.iter().map(gray).sum::<f64>() / n as f64;
    for p in &mut px {
        for v in p.iter_mut() {
            *v = mean + c * (*v - mean);
        }
        let g = gray(p);
        for v in p.iter_mut() {
            *v = g + s * (*v - g);
        }
        // rotate chroma in YIQ space by `hue` turns
        let (yy, i, q) = (
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2],
            0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2],
            0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2],
        );
        let (sin, cos) = (hue * std::f64::consts::TAU).sin_cos();
        let (i2, q2) = (i * cos - q * sin, i * sin + q * cos);
        *p = [
            yy + 0.956 * i2 + 0.621 * q2,
            yy - 0.272 * i2 - 0.647 * q2,
            yy - 1.106 * i2 + 1.703 * q2,
        ];
    }
    let mut out = ImageArray::zeros(3, h, w);
    for (i, p) in px.iter().enumerate() {
        for (k, v) in p.iter().enumerate() {
            out.set(k, i / w, i % w, (v.clamp(0.0, 1.0) * 2.0 - 1.0) as f32);
        }
    }
    out
}

fn random_erase(image: &mut ImageArray, config: &AugmentConfig, rng: &mut impl Rng) {
    let [c, h, w] = image.dims();
    let Some((eh, ew)) = sample_rect(rng, h, w, config.erase_scale, config.erase_ratio) else {
        return;
    };
    let y0 = rng.random_range(0..=h - eh);
    let x0 = rng.random_range(0..=w - ew);
    for ch in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                image.set(ch, y, x, rng.random_range(-1.0f32..=1.0));
            }
        }
    }
}

/// Crop, flip, colour jitter, then erasing; the output keeps the input shape and range.
pub fn augment(image: &ImageArray, config: &AugmentConfig, rng: &mut impl Rng) -> ImageArray {
    let mut out = random_resized_crop(image, config, rng);
    if config.flip_prob > 0.0 && rng.random_bool(config.flip_prob) {
        out = hflip(&out);
    }
    if config.brightness > 0.0 || config.contrast > 0.0 || config.saturation > 0.0 || config.hue > 0.0 {
        out = color_jitter(&out, config, rng);
    }
    if config.erase_prob > 0.0 && rng.random_bool(config.erase_prob) {
        random_erase(&mut out, config, rng);
    }
    out.clamped()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrTrainConfig {
    pub encoder: EncoderConfig,
    pub margin: f64,
    pub scale: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// 1-based epochs at whose start the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for FrTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            margin: 0.4,
            scale: 64.0,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            decay_epochs: vec![26, 34],
            decay_factor: 0.1,
            batch_size: 128,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl FrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(validation("epochs and batch size must be positive"));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(validation("decay epochs must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(validation("decay epochs must be before the last epoch"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(validation(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0) {
            return Err(validation("learning rate and decay factor must be positive"));
        }
        self.augment.validate()?;
        self.encoder.validate()
    }

    /// Learning rate in effect during 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRecognizer {
    pub encoder: EncoderCheckpoint<f32>,
    pub head: ClassifierHead<f32>,
    /// Class order of the head.
    pub subjects: Vec<String>,
    pub epochs: Vec<EpochLog>,
}

/// Trains trunk and head from scratch.
pub fn train_fr(corpus: &Corpus, config: &FrTrainConfig) -> Result<TrainedRecognizer> {
    config.validate()?;
    if corpus.num_classes() < 2 {
        return Err(validation(format!("need at least 2 subjects, found {}", corpus.num_classes())));
    }
    check_corpus(corpus)?;
    let mut encoder = EncoderCheckpoint::<f32>::init(config.encoder.clone(), config.seed)?;
    let mut head = ClassifierHead::<f32>::init(
        corpus.num_classes(),
        config.encoder.dim,
        config.margin,
        config.scale,
        config.seed.wrapping_add(1),
    )?;
    let images = corpus.resized(config.encoder.resolution);
    let mut opt_enc = Sgd::new(encoder.params(), config.learning_rate, config.momentum, config.weight_decay);
    let mut opt_head = Sgd::new(head.params(), config.learning_rate, config.momentum, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.learning_rate_at(epoch);
        opt_enc.lr = lr;
        opt_head.lr = lr;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let augmented: Vec<ImageArray> = batch.iter().map(|&i| augment(&images[i], &config.augment, &mut rng)).collect();
            let refs: Vec<&ImageArray> = augmented.iter().collect();
            let labels: Vec<usize> = batch.iter().map(|&i| corpus.labels()[i]).collect();
            let mut g = Graph::<f32>::new();
            let pe = encoder.params().bind(&mut g, true);
            let ph = head.params().bind(&mut g, true);
            let x = g.constant(ImageArray::batch(&refs)?);
            let emb = encoder.forward(&mut g, &pe, x);
            let w = head.weight_var(&ph);
            let (loss, cos) = cosface_loss_graph(&mut g, emb, w, &labels, config.margin, config.scale);
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite recognition loss at epoch {epoch}")));
            }
            correct += count_correct(g.value(cos), &labels);
            seen += labels.len();
            loss_sum += lv * labels.len() as f64;
            let mut grads = g.backward(loss);
            let ge = pe.grads(&g, &mut grads);
            let gh = ph.grads(&g, &mut grads);
            opt_enc.step(encoder.params_mut(), &ge);
            opt_head.step(head.params_mut(), &gh);
        }
        if !head.params().all_finite() {
            return Err(Error::Numeric(format!("classifier weights became non-finite at epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            learning_rate: lr,
            train_accuracy: correct as f64 / seen as f64,
        };
        info!(
            "recognition epoch {epoch}: loss {:.4} lr {lr} acc {:.4}",
            log.loss, log.train_accuracy
        );
        epochs.push(log);
    }
    Ok(TrainedRecognizer {
        encoder,
        head,
        subjects: corpus.subject_ids().to_vec(),
        epochs,
    })
}

/// `epoch,loss,lr,train_acc` rows.
pub fn write_metrics_csv(path: &Path, epochs: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,loss,lr,train_acc")?;
    for e in epochs {
        writeln!(f, "{},{},{},{}", e.epoch, e.loss, e.learning_rate, e.train_accuracy)?;
    }
    Ok(())
}
