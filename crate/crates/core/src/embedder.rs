//! The identity embedder: a small convolutional trunk mapping images onto the
//! unit hypersphere, the CosFace margin head trained with it, and the
//! identity centers read off that head.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Header};
use crate::corpus::Corpus;
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::nn::{AdamW, Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::{Elem, Tensor};

pub const ENCODER_ARCH: &str = "convnet-gn-v1";
const NORM_TOLERANCE: f64 = 1e-4;

/// A unit-norm identity feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEmbedding(Vec<f32>);

impl IdentityEmbedding {
    /// Wraps an already normalized vector; rejects non-finite or non-unit input.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(validation("empty embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("embedding has non-finite entries"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(validation(format!("embedding norm {norm} is not 1")));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm.
    pub fn normalized(values: &[f64]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("embedding has non-finite entries"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(validation("cannot normalize a zero vector"));
        }
        Ok(Self(values.iter().map(|v| (v / norm) as f32).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity of two unit embeddings.
///
/// Computed as `a·b / sqrt(|a|²|b|²)` in double precision, so the result is
/// symmetric and `cosine_similarity(a, a)` is exactly 1.
pub fn cosine_similarity(a: &IdentityEmbedding, b: &IdentityEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("embedding dims {} vs {}", a.dim(), b.dim())));
    }
    for e in [a, b] {
        let n = e.norm();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(validation(format!("embedding norm {n} is not 1")));
        }
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Architecture of the convolutional trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input resolution.
    pub resolution: usize,
    pub in_channels: usize,
    /// Output channels of each conv block; every block after the first halves the resolution.
    pub widths: Vec<usize>,
    /// Embedding dimension D.
    pub dim: usize,
    pub norm_groups: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            widths: vec![16, 32, 64, 64],
            dim: 128,
            norm_groups: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.dim == 0 || self.resolution == 0 {
            return Err(validation("encoder needs at least one block, a positive dim and resolution"));
        }
        let downs = self.widths.len() - 1;
        if !self.resolution.is_multiple_of(1 << downs) {
            return Err(validation(format!(
                "resolution {} not divisible by 2^{downs}",
                self.resolution
            )));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.norm_groups != 0) {
            return Err(validation(format!("width {w} not divisible by {} groups", self.norm_groups)));
        }
        Ok(())
    }

    fn final_resolution(&self) -> usize {
        self.resolution >> (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug)]
struct Trunk {
    blocks: Vec<Conv2d>,
    proj: Linear,
}

impl Trunk {
    fn build<T: Elem>(config: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::new();
        let mut in_ch = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(Conv2d::new(store, rng, &format!("enc.block{i}"), in_ch, w, 3, stride, 1));
            in_ch = w;
        }
        let r = config.final_resolution();
        let proj = Linear::new(store, rng, "enc.proj", in_ch * r * r, config.dim, true);
        Self { blocks, proj }
    }
}

/// Encoder weights plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct EncoderCheckpoint<T = f32> {
    config: EncoderConfig,
    params: ParamStore<T>,
    trunk: Trunk,
}

impl<T: Elem> EncoderCheckpoint<T> {
    /// Randomly initialised encoder.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let trunk = Trunk::build(&config, &mut params, &mut rng);
        Ok(Self { config, params, trunk })
    }

    /// Rebuilds the architecture around existing parameters.
    pub fn from_params(config: EncoderConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Elem>(&self) -> EncoderCheckpoint<U> {
        EncoderCheckpoint {
            config: self.config.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
        }
    }

    /// Unit-norm embeddings `[N, D]` of an `[N, C, H, W]` batch already on the tape.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for block in &self.trunk.blocks {
            h = block.forward(g, p, h);
            h = g.group_norm(h, self.config.norm_groups, 1e-5);
            h = g.silu(h);
        }
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[n, flat]);
        let e = self.trunk.proj.forward(g, p, h);
        g.l2_normalize(e)
    }

    fn check_image(&self, image: &ImageArray) -> Result<()> {
        let r = self.config.resolution;
        if image.dims() != [self.config.in_channels, r, r] {
            return Err(Error::Dimension(format!(
                "image {:?} does not match encoder input {}x{r}x{r}",
                image.dims(),
                self.config.in_channels
            )));
        }
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(validation("image has non-finite pixels"));
        }
        Ok(())
    }

    /// Embeds a batch of images in inference mode.
    pub fn embed_batch(&self, images: &[ImageArray]) -> Result<Vec<IdentityEmbedding>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for img in chunk {
                self.check_image(img)?;
            }
            let refs: Vec<&ImageArray> = chunk.iter().collect();
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let x = g.constant(ImageArray::batch::<T>(&refs)?);
            let e = self.forward(&mut g, &p, x);
            let dim = self.config.dim;
            for row in g.value(e).data().chunks(dim) {
                let values: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                out.push(IdentityEmbedding::normalized(&values)?);
            }
        }
        Ok(out)
    }

    /// Embeds one image.
    pub fn embed(&self, image: &ImageArray) -> Result<IdentityEmbedding> {
        Ok(self.embed_batch(std::slice::from_ref(image))?.remove(0))
    }

    pub fn header(&self) -> Header {
        let mut h = Header::new();
        h.set("kind", "encoder")
            .set("format_version", checkpoint::FORMAT_VERSION)
            .set("arch", ENCODER_ARCH)
            .set("dim", self.config.dim)
            .set("resolution", self.config.resolution)
            .set("in_channels", self.config.in_channels)
            .set("widths", join(&self.config.widths))
            .set("norm_groups", self.config.norm_groups);
        h
    }

    /// Writes the blob and header; `extra` fields (digests, versions) are merged in.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut h = self.header();
        for (k, v) in extra {
            h.set(k, v);
        }
        checkpoint::save(path, &self.params, &h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, h) = checkpoint::load::<T>(path)?;
        if h.raw("kind") != Some("encoder") {
            return Err(Error::Format(format!("{} is not an encoder checkpoint", path.display())));
        }
        if h.raw("arch") != Some(ENCODER_ARCH) {
            return Err(Error::Format(format!("unknown encoder architecture {:?}", h.raw("arch"))));
        }
        let config = EncoderConfig {
            resolution: h.get("resolution")?,
            in_channels: h.get("in_channels")?,
            widths: h.get_list("widths")?,
            dim: h.get("dim")?,
            norm_groups: h.get("norm_groups")?,
        };
        Self::from_params(config, params)
    }
}

pub(crate) fn join<V: ToString>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

pub(crate) fn check_layout<T: Elem>(expected: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, architecture expects {}",
            got.len(),
            expected.len()
        )));
    }
    for ((en, et), (gn, gt)) in expected.entries().iter().zip(got.entries()) {
        if en != gn || et.shape() != gt.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {gn} {:?} does not match expected {en} {:?}",
                gt.shape(),
                et.shape()
            )));
        }
    }
    Ok(())
}

/// CosFace classification head: one weight row per class.
#[derive(Clone, Debug)]
pub struct ClassifierHead<T = f32> {
    params: ParamStore<T>,
    weight: ParamId,
    pub margin: f64,
    pub scale: f64,
}

impl<T: Elem> ClassifierHead<T> {
    pub fn new(weights: Tensor<T>, margin: f64, scale: f64) -> Result<Self> {
        if weights.shape().len() != 2 || weights.shape()[0] == 0 {
            return Err(Error::Dimension(format!("head weights must be [classes, D], got {:?}", weights.shape())));
        }
        if !(0.0..1.0).contains(&margin) {
            return Err(validation(format!("margin {margin} outside [0, 1)")));
        }
        if scale <= 0.0 || !scale.is_finite() {
            return Err(validation(format!("scale {scale} must be positive")));
        }
        let mut params = ParamStore::new();
        let weight = params.add("head.weight", weights);
        Ok(Self {
            params,
            weight,
            margin,
            scale,
        })
    }

    pub fn init(num_classes: usize, dim: usize, margin: f64, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<T>::new();
        let id = store.add_uniform("head.weight", &[num_classes, dim], 1.0 / (dim as f64).sqrt(), &mut rng);
        Self::new(store.get(id).clone(), margin, scale)
    }

    pub fn num_classes(&self) -> usize {
        self.weights().shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights().shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        self.params.get(self.weight)
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn weight_var(&self, p: &Bound) -> Var {
        p.var(self.weight)
    }

    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut h = Header::new();
        h.set("kind", "classifier_head")
            .set("format_version", checkpoint::FORMAT_VERSION)
            .set("num_classes", self.num_classes())
            .set("dim", self.dim())
            .set("margin", self.margin)
            .set("scale", self.scale);
        for (k, v) in extra {
            h.set(k, v);
        }
        checkpoint::save(path, &self.params, &h)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, h) = checkpoint::load::<T>(path)?;
        if h.raw("kind") != Some("classifier_head") || params.len() != 1 {
            return Err(Error::Format(format!("{} is not a classifier head", path.display())));
        }
        Self::new(params.entries()[0].1.clone(), h.get("margin")?, h.get("scale")?)
    }
}

/// Batch-mean CosFace loss on the tape.
///
/// `embeddings` is `[N, D]` (unit rows), `weights` is `[C, D]` (normalized
/// here); the logit of class `j` is `scale · (cos θ_j − margin·[j = label])`.
pub fn cosface_loss_graph<T: Elem>(
    g: &mut Graph<T>,
    embeddings: Var,
    weights: Var,
    labels: &[usize],
    margin: f64,
    scale: f64,
) -> (Var, Var) {
    let classes = g.shape(weights)[0];
    let n = labels.len();
    assert_eq!(g.shape(embeddings)[0], n, "one label per embedding");
    let w = g.l2_normalize(weights);
    let cos = g.matmul_t(embeddings, w, false, true);
    let mut onehot = Tensor::<T>::zeros(&[n, classes]);
    let mut shift = Tensor::<T>::zeros(&[n, classes]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + l] = T::one();
        shift.data_mut()[i * classes + l] = T::cast_from(-margin * scale);
    }
    let scaled = g.scale(cos, scale);
    let shift = g.constant(shift);
    let logits = g.add(scaled, shift);
    let logp = g.log_softmax(logits);
    let onehot = g.constant(onehot);
    let picked = g.mul(logp, onehot);
    let total = g.sum_all(picked);
    let loss = g.scale(total, -1.0 / n as f64);
    (loss, cos)
}

/// CosFace loss of one embedding against a head.
pub fn cosface_loss<T: Elem>(embedding: &IdentityEmbedding, head: &ClassifierHead<T>, label: usize) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    if embedding.dim() != head.dim() {
        return Err(Error::Dimension(format!(
            "embedding dim {} vs head dim {}",
            embedding.dim(),
            head.dim()
        )));
    }
    let mut g = Graph::<f64>::new();
    let e = g.constant(Tensor::new(
        vec![1, embedding.dim()],
        embedding.as_slice().iter().map(|&v| v as f64).collect(),
    ));
    let w = g.constant(head.weights().cast());
    let (loss, _) = cosface_loss_graph(&mut g, e, w, &[label], head.margin, head.scale);
    Ok(g.value(loss).item().max(0.0))
}

/// Each class's weight row, normalized, in class order.
pub fn identity_centers<T: Elem>(head: &ClassifierHead<T>) -> Result<Vec<IdentityEmbedding>> {
    let w = head.weights();
    let d = head.dim();
    w.data()
        .chunks(d)
        .enumerate()
        .map(|(i, row)| {
            let values: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            if values.iter().all(|&v| v == 0.0) {
                return Err(Error::DegenerateCenter(i));
            }
            IdentityEmbedding::normalized(&values)
        })
        .collect()
}

/// Hyperparameters for fitting the identity embedder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub scale: f64,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs: 12,
            batch_size: 64,
            learning_rate: 2e-3,
            weight_decay: 5e-4,
            margin: 0.4,
            scale: 64.0,
            seed: 0,
        }
    }
}

/// Per-epoch record from a classifier training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub train_accuracy: f64,
}

/// Result of [`train_encoder`].
#[derive(Clone, Debug)]
pub struct TrainedEncoder {
    pub encoder: EncoderCheckpoint<f32>,
    pub head: ClassifierHead<f32>,
    pub epochs: Vec<EpochLog>,
    /// Per-batch losses in training order.
    pub batch_losses: Vec<f64>,
    /// Accuracy of nearest-center classification over the whole corpus after training.
    pub final_accuracy: f64,
}

pub(crate) fn check_corpus(corpus: &Corpus) -> Result<()> {
    if corpus.num_classes() < 2 {
        return Err(validation(format!(
            "corpus needs at least 2 identities, found {}",
            corpus.num_classes()
        )));
    }
    let counts = corpus.class_counts();
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(validation(format!("identity {c} has {n} image(s); at least 2 required")));
    }
    Ok(())
}

/// Fits the trunk and a CosFace head with AdamW on a labelled corpus.
pub fn train_encoder(corpus: &Corpus, config: &EncoderTrainConfig) -> Result<TrainedEncoder> {
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
    let mut opt_enc = AdamW::new(encoder.params(), config.learning_rate, config.weight_decay);
    let mut opt_head = AdamW::new(head.params(), config.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epochs = Vec::new();
    let mut batch_losses = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size.max(1)) {
            let refs: Vec<&ImageArray> = batch.iter().map(|&i| &images[i]).collect();
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
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            correct += count_correct(g.value(cos), &labels);
            seen += labels.len();
            loss_sum += lv * labels.len() as f64;
            batch_losses.push(lv);
            let mut grads = g.backward(loss);
            let ge = pe.grads(&g, &mut grads);
            let gh = ph.grads(&g, &mut grads);
            opt_enc.step(encoder.params_mut(), &ge);
            opt_head.step(head.params_mut(), &gh);
        }
        let log = EpochLog {
            epoch,
            loss: loss_sum / seen as f64,
            learning_rate: config.learning_rate,
            train_accuracy: correct as f64 / seen as f64,
        };
        info!(
            "encoder epoch {epoch}: loss {:.4} acc {:.4}",
            log.loss, log.train_accuracy
        );
        epochs.push(log);
    }
    let final_accuracy = classification_accuracy(&encoder, &head, &images, corpus.labels())?;
    Ok(TrainedEncoder {
        encoder,
        head,
        epochs,
        batch_losses,
        final_accuracy,
    })
}

pub(crate) fn count_correct<T: Elem>(cos: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = cos.shape()[1];
    cos.data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax<T: Elem>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of images whose nearest normalized head row is their own class.
pub fn classification_accuracy(
    encoder: &EncoderCheckpoint<f32>,
    head: &ClassifierHead<f32>,
    images: &[ImageArray],
    labels: &[usize],
) -> Result<f64> {
    let centers = identity_centers(head)?;
    let embeddings = encoder.embed_batch(images)?;
    let mut correct = 0;
    for (e, &l) in embeddings.iter().zip(labels) {
        let sims = centers
            .iter()
            .map(|c| cosine_similarity(e, c))
            .collect::<Result<Vec<f64>>>()?;
        if argmax(&sims) == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len().max(1) as f64)
}
