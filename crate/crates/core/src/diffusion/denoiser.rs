//! The conditional noise predictor: a small UNet with AdaGN timestep
//! injection in every residual block and a cross-attention block per
//! resolution level attending to the fused identity/similarity condition.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Header};
use crate::embedder::{check_layout, join, IdentityEmbedding};
use crate::error::{validation, Error, Result};
use crate::image::ImageArray;
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::tensor::{Elem, Tensor};

pub const DENOISER_ARCH: &str = "unet-adagn-xattn-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Square image resolution the model denoises at.
    pub resolution: usize,
    pub in_channels: usize,
    /// Channels per resolution level; each level after the first halves the resolution.
    pub channels: Vec<usize>,
    pub norm_groups: usize,
    pub time_dim: usize,
    /// Identity embedding width (the encoder's D).
    pub id_dim: usize,
    /// Width of `C_sim = F₁(m)`.
    pub sim_dim: usize,
    /// Number of condition tokens cross-attention attends over.
    pub cond_tokens: usize,
    /// Width of each condition token.
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            in_channels: 3,
            channels: vec![32, 64],
            norm_groups: 8,
            time_dim: 64,
            id_dim: 128,
            sim_dim: 32,
            cond_tokens: 4,
            cond_dim: 64,
        }
    }
}

impl DenoiserConfig {
    /// Width of the flattened `C_att`.
    pub fn condition_width(&self) -> usize {
        self.cond_tokens * self.cond_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(validation("denoiser needs at least one level"));
        }
        let downs = self.channels.len() - 1;
        if !self.resolution.is_multiple_of(1 << downs) {
            return Err(validation(format!("resolution {} not divisible by 2^{downs}", self.resolution)));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.norm_groups != 0) {
            return Err(validation(format!("{c} channels not divisible by {} groups", self.norm_groups)));
        }
        if !self.time_dim.is_multiple_of(2) || self.time_dim == 0 {
            return Err(validation("time_dim must be even"));
        }
        if self.cond_tokens == 0 || self.cond_dim == 0 || self.sim_dim == 0 || self.id_dim == 0 {
            return Err(validation("condition widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    ada_scale: Linear,
    ada_shift: Linear,
    skip: Option<Conv2d>,
    out_ch: usize,
}

impl ResBlock {
    fn new<T: Elem>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &DenoiserConfig, in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv1: Conv2d::same(s, rng, &format!("{name}.conv1"), in_ch, out_ch),
            conv2: Conv2d::same(s, rng, &format!("{name}.conv2"), out_ch, out_ch),
            ada_scale: Linear::new(s, rng, &format!("{name}.adagn_scale"), cfg.time_dim, out_ch, true),
            ada_shift: Linear::new(s, rng, &format!("{name}.adagn_shift"), cfg.time_dim, out_ch, true),
            skip: (in_ch != out_ch).then(|| Conv2d::new(s, rng, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0)),
            out_ch,
        }
    }

    fn forward<T: Elem>(&self, g: &mut Graph<T>, p: &Bound, x: Var, temb_act: Var, groups: usize) -> Var {
        let n = g.shape(x)[0];
        let h = g.group_norm(x, groups, 1e-5);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let h = g.group_norm(h, groups, 1e-5);
        // AdaGN: GN(h)·(1 + scale) + shift
        let scale = self.ada_scale.forward(g, p, temb_act);
        let scale = g.reshape(scale, &[n, self.out_ch, 1, 1]);
        let scale = g.add_scalar(scale, 1.0);
        let shift = self.ada_shift.forward(g, p, temb_act);
        let shift = g.reshape(shift, &[n, self.out_ch, 1, 1]);
        let h = g.mul(h, scale);
        let h = g.add(h, shift);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x),
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    dim: usize,
}

impl CrossAttention {
    fn new<T: Elem>(s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, ch: usize, cond_dim: usize) -> Self {
        Self {
            q: Linear::new(s, rng, &format!("{name}.q"), ch, ch, false),
            k: Linear::new(s, rng, &format!("{name}.k"), cond_dim, ch, false),
            v: Linear::new(s, rng, &format!("{name}.v"), cond_dim, ch, false),
            out: Linear::new(s, rng, &format!("{name}.out"), ch, ch, true),
            dim: ch,
        }
    }

    /// `x` is `[N, C, H, W]`, `ctx` is `[N, tokens, cond_dim]`.
    fn forward<T: Elem>(&self, g: &mut Graph<T>, p: &Bound, x: Var, ctx: Var, groups: usize) -> Var {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hn = g.group_norm(x, groups, 1e-5);
        let tokens = g.reshape(hn, &[n, c, h * w]);
        let tokens = g.permute(tokens, &[0, 2, 1]);
        let q = self.q.forward(g, p, tokens);
        let k = self.k.forward(g, p, ctx);
        let v = self.v.forward(g, p, ctx);
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax(scores);
        let o = g.matmul(attn, v);
        let o = self.out.forward(g, p, o);
        let o = g.permute(o, &[0, 2, 1]);
        let o = g.reshape(o, &[n, c, h, w]);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: CrossAttention,
}

#[derive(Clone, Debug)]
struct UNet {
    time1: Linear,
    time2: Linear,
    f1: Linear,
    f2: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    up: Vec<Level>,
    upconv: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl UNet {
    fn build<T: Elem>(cfg: &DenoiserConfig, s: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let ch = &cfg.channels;
        let levels = ch.len();
        let time1 = Linear::new(s, rng, "time.fc1", cfg.time_dim, cfg.time_dim, true);
        let time2 = Linear::new(s, rng, "time.fc2", cfg.time_dim, cfg.time_dim, true);
        let f1 = Linear::new(s, rng, "cond.f1", 1, cfg.sim_dim, true);
        let f2 = Linear::new(s, rng, "cond.f2", cfg.id_dim + cfg.sim_dim, cfg.condition_width(), true);
        let conv_in = Conv2d::same(s, rng, "conv_in", cfg.in_channels, ch[0]);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            down.push(Level {
                res: ResBlock::new(s, rng, &format!("down{i}.res"), cfg, prev, c),
                attn: CrossAttention::new(s, rng, &format!("down{i}.attn"), c, cfg.cond_dim),
            });
            if i + 1 < levels {
                downsample.push(Conv2d::new(s, rng, &format!("down{i}.downsample"), c, c, 3, 2, 1));
            }
            prev = c;
        }
        let last = ch[levels - 1];
        let mid1 = ResBlock::new(s, rng, "mid.res1", cfg, last, last);
        let mid_attn = CrossAttention::new(s, rng, "mid.attn", last, cfg.cond_dim);
        let mid2 = ResBlock::new(s, rng, "mid.res2", cfg, last, last);
        let mut up = Vec::new();
        let mut upconv = Vec::new();
        for i in (0..levels).rev() {
            up.push(Level {
                res: ResBlock::new(s, rng, &format!("up{i}.res"), cfg, 2 * ch[i], ch[i]),
                attn: CrossAttention::new(s, rng, &format!("up{i}.attn"), ch[i], cfg.cond_dim),
            });
            if i > 0 {
                upconv.push(Conv2d::same(s, rng, &format!("up{i}.upsample"), ch[i], ch[i - 1]));
            }
        }
        let conv_out = Conv2d::same(s, rng, "conv_out", ch[0], cfg.in_channels);
        Self {
            time1,
            time2,
            f1,
            f2,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upconv,
            conv_out,
        }
    }
}

/// Sinusoidal features of integer timesteps, `[N, dim]`.
pub fn timestep_features<T: Elem>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        let freqs = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((step * f).sin(), (step * f).cos())).unzip();
        data.extend(sin.into_iter().chain(cos).map(T::cast_from));
    }
    Tensor::new(vec![t.len(), dim], data)
}

/// The fused conditions handed to the denoiser for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// `C_id`, the inquiry embedding.
    pub c_id: IdentityEmbedding,
    /// The similarity controlling factor.
    pub m: f64,
    /// `C_att = F₂(cat(C_id, F₁(m)))`, flattened.
    pub c_att: Vec<f32>,
    /// Diffusion timestep.
    pub t: usize,
}

impl ConditioningBundle {
    pub fn at_timestep(mut self, t: usize) -> Self {
        self.t = t;
        self
    }
}

pub(crate) fn check_m(m: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&m) || m.is_nan() {
        return Err(validation(format!("similarity factor m = {m} outside [-1, 1]")));
    }
    Ok(())
}

/// Denoiser weights (σ_θ together with F₁ and F₂) and their architecture.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T = f32> {
    config: DenoiserConfig,
    params: ParamStore<T>,
    net: UNet,
}

impl<T: Elem> DenoiserModel<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = UNet::build(&config, &mut params, &mut rng);
        Ok(Self { config, params, net })
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        let mut fresh = Self::init(config, 0)?;
        check_layout(&fresh.params, &params)?;
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Elem>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    /// `C_att` for a batch: `c_id` is `[N, D]`, `m` is `[N, 1]`.
    pub fn conditions(&self, g: &mut Graph<T>, p: &Bound, c_id: Var, m: Var) -> Var {
        let c_sim = self.net.f1.forward(g, p, m);
        let cat = g.concat(&[c_id, c_sim], 1);
        self.net.f2.forward(g, p, cat)
    }

    /// Predicted noise for `x_t` (`[N, C, H, W]`) at timesteps `t` under `c_att` (`[N, width]`).
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, x_t: Var, t: &[usize], c_att: Var) -> Var {
        let cfg = &self.config;
        let net = &self.net;
        let n = g.shape(x_t)[0];
        let groups = cfg.norm_groups;
        let tf = g.constant(timestep_features(t, cfg.time_dim));
        let temb = net.time1.forward(g, p, tf);
        let temb = g.silu(temb);
        let temb = net.time2.forward(g, p, temb);
        let temb_act = g.silu(temb);
        let ctx = g.reshape(c_att, &[n, cfg.cond_tokens, cfg.cond_dim]);

        let mut h = net.conv_in.forward(g, p, x_t);
        let mut skips = Vec::with_capacity(net.down.len());
        for (i, level) in net.down.iter().enumerate() {
            h = level.res.forward(g, p, h, temb_act, groups);
            h = level.attn.forward(g, p, h, ctx, groups);
            skips.push(h);
            if let Some(ds) = net.downsample.get(i) {
                h = ds.forward(g, p, h);
            }
        }
        h = net.mid1.forward(g, p, h, temb_act, groups);
        h = net.mid_attn.forward(g, p, h, ctx, groups);
        h = net.mid2.forward(g, p, h, temb_act, groups);
        for (j, level) in net.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat(&[h, skip], 1);
            h = level.res.forward(g, p, h, temb_act, groups);
            h = level.attn.forward(g, p, h, ctx, groups);
            if let Some(uc) = net.upconv.get(j) {
                h = g.upsample2x(h);
                h = uc.forward(g, p, h);
            }
        }
        let h = g.group_norm(h, groups, 1e-5);
        let h = g.silu(h);
        net.conv_out.forward(g, p, h)
    }

    /// Inference-mode noise prediction on plain tensors.
    pub fn predict_noise(&self, x_t: &Tensor<T>, t: &[usize], c_att: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let c = g.constant(c_att.clone());
        let out = self.forward(&mut g, &p, x, t, c);
        g.value(out).clone()
    }

    /// Inference-mode `C_att` rows for `(embedding, m)` pairs.
    pub fn condition_rows(&self, items: &[(&IdentityEmbedding, f64)]) -> Result<Tensor<T>> {
        let d = self.config.id_dim;
        let mut ids = Vec::with_capacity(items.len() * d);
        let mut ms = Vec::with_capacity(items.len());
        for (e, m) in items {
            check_m(*m)?;
            if e.dim() != d {
                return Err(Error::Dimension(format!("identity embedding dim {} but model expects {d}", e.dim())));
            }
            ids.extend(e.as_slice().iter().map(|&v| T::cast_from(v as f64)));
            ms.push(T::cast_from(*m));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let c_id = g.constant(Tensor::new(vec![items.len(), d], ids));
        let m = g.constant(Tensor::new(vec![items.len(), 1], ms));
        let c = self.conditions(&mut g, &p, c_id, m);
        Ok(g.value(c).clone())
    }

    pub fn header(&self) -> Header {
        let c = &self.config;
        let mut h = Header::new();
        h.set("kind", "denoiser")
            .set("format_version", checkpoint::FORMAT_VERSION)
            .set("arch", DENOISER_ARCH)
            .set("resolution", c.resolution)
            .set("in_channels", c.in_channels)
            .set("channels", join(&c.channels))
            .set("norm_groups", c.norm_groups)
            .set("time_dim", c.time_dim)
            .set("id_dim", c.id_dim)
            .set("sim_dim", c.sim_dim)
            .set("cond_tokens", c.cond_tokens)
            .set("cond_dim", c.cond_dim)
            .set("condition_width", c.condition_width());
        h
    }

    /// Writes the blob and header; `extra` carries schedule and training metadata.
    pub fn save(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut h = self.header();
        for (k, v) in extra {
            h.set(k, v);
        }
        checkpoint::save(path, &self.params, &h)
    }

    pub fn load(path: &Path) -> Result<(Self, Header)> {
        let (params, h) = checkpoint::load::<T>(path)?;
        if h.raw("kind") != Some("denoiser") || h.raw("arch") != Some(DENOISER_ARCH) {
            return Err(Error::Format(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let config = DenoiserConfig {
            resolution: h.get("resolution")?,
            in_channels: h.get("in_channels")?,
            channels: h.get_list("channels")?,
            norm_groups: h.get("norm_groups")?,
            time_dim: h.get("time_dim")?,
            id_dim: h.get("id_dim")?,
            sim_dim: h.get("sim_dim")?,
            cond_tokens: h.get("cond_tokens")?,
            cond_dim: h.get("cond_dim")?,
        };
        Ok((Self::from_params(config, params)?, h))
    }
}

/// `C_att = F₂(cat(C_id, F₁(m)))` for one inquiry embedding.
pub fn build_conditions<T: Elem>(embedding: &IdentityEmbedding, m: f64, model: &DenoiserModel<T>) -> Result<ConditioningBundle> {
    let rows = model.condition_rows(&[(embedding, m)])?;
    Ok(ConditioningBundle {
        c_id: embedding.clone(),
        m,
        c_att: rows.data().iter().map(|v| v.as_f64() as f32).collect(),
        t: 0,
    })
}

/// Predicts the noise in `x_t` under a conditioning bundle.
pub fn denoise<T: Elem>(x_t: &ImageArray, bundle: &ConditioningBundle, model: &DenoiserModel<T>) -> Result<ImageArray> {
    let cfg = model.config();
    let r = cfg.resolution;
    if x_t.dims() != [cfg.in_channels, r, r] {
        return Err(Error::Dimension(format!(
            "input {:?} does not match denoiser resolution {}x{r}x{r}",
            x_t.dims(),
            cfg.in_channels
        )));
    }
    if bundle.c_att.len() != cfg.condition_width() {
        return Err(Error::Dimension(format!(
            "c_att width {} but model expects {}",
            bundle.c_att.len(),
            cfg.condition_width()
        )));
    }
    check_m(bundle.m)?;
    let x = ImageArray::batch::<T>(&[x_t])?;
    let c = Tensor::new(
        vec![1, bundle.c_att.len()],
        bundle.c_att.iter().map(|&v| T::cast_from(v as f64)).collect(),
    );
    let eps = model.predict_noise(&x, &[bundle.t], &c);
    if !eps.all_finite() {
        return Err(Error::Numeric("denoiser produced non-finite output".into()));
    }
    Ok(ImageArray::unbatch(&eps)?.remove(0))
}
