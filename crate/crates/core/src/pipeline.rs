//! End-to-end workflow: toy corpus, encoder, denoiser, inquiry filtering,
//! dataset assembly, recognition training and evaluation.
//!
//! Every stage writes into `work_dir/<stage>/` and leaves a `stage.json`
//! marker holding the digest of its inputs. A stage whose marker matches is
//! skipped on re-runs; a stage digest folds in the digests of the stages it
//! depends on, so a changed key invalidates exactly the stages downstream of it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::dataset::{assemble_dataset, load_image_dir, mix_m_schedule, select_inquiries, AssemblyPlan, DiffusionGenerator, MixSchedule};
use crate::diffusion::{
    load_denoiser, save_denoiser, train_diffusion, DenoiserConfig, DiffusionTrainConfig, ScheduleSpec, SimilarityPenalty,
};
use crate::embedder::{train_encoder, EncoderCheckpoint, EncoderConfig, EncoderTrainConfig};
use crate::error::{validation, Error, Result};
use crate::eval::{evaluate_suite, make_toy_pairs, EvalReport, PairList};
use crate::fr::{train_fr, write_metrics_csv, AugmentConfig, FrTrainConfig};
use crate::image::ImageArray;
use crate::manifest::{digest_str, DatasetManifest, TOOL_VERSION};
use crate::sampler::SamplerConfig;
use crate::toy::{render_toy_corpus, ToySpec};

/// Every recognised key with its default value.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("work_dir", "runs/toy"),
    ("toy.identities", "100"),
    ("toy.per_identity", "30"),
    ("toy.resolution", "32"),
    ("toy.seed", "0"),
    ("encoder.dim", "128"),
    ("encoder.widths", "16,32,64,64"),
    ("encoder.epochs", "12"),
    ("encoder.batch", "64"),
    ("encoder.lr", "0.002"),
    ("encoder.weight_decay", "0.0005"),
    ("encoder.margin", "0.4"),
    ("encoder.scale", "64"),
    ("encoder.seed", "0"),
    ("diffusion.T", "200"),
    ("diffusion.beta_start", "auto"),
    ("diffusion.beta_end", "auto"),
    ("diffusion.resolution", "16"),
    ("diffusion.channels", "16,32"),
    ("diffusion.norm_groups", "8"),
    ("diffusion.time_dim", "64"),
    ("diffusion.sim_dim", "32"),
    ("diffusion.cond_tokens", "4"),
    ("diffusion.cond_dim", "64"),
    ("diffusion.lambda", "0.05"),
    ("diffusion.penalty", "squared"),
    ("diffusion.m_low", "-1"),
    ("diffusion.m_high", "1"),
    ("diffusion.m_interval", "0.02"),
    ("diffusion.epochs", "120"),
    ("diffusion.batch", "32"),
    ("diffusion.lr", "0.002"),
    ("diffusion.weight_decay", "0"),
    ("diffusion.ema", "0.999"),
    ("diffusion.clip_x0", "false"),
    ("diffusion.seed", "0"),
    ("inquiry.pool", "60"),
    ("inquiry.threshold", "0.3"),
    ("inquiry.max", "20"),
    ("inquiry.seed", "1"),
    ("generate.m", "0"),
    ("generate.m_mix", "none"),
    ("generate.per_subject", "10"),
    ("generate.oversample", "2"),
    ("generate.steps", "20"),
    ("generate.eta", "0"),
    ("generate.clip_x0", "true"),
    ("generate.batch", "50"),
    ("generate.seed", "0"),
    ("fr.dim", "128"),
    ("fr.widths", "16,32,64,64"),
    ("fr.margin", "0.4"),
    ("fr.scale", "64"),
    ("fr.lr", "0.1"),
    ("fr.momentum", "0.9"),
    ("fr.weight_decay", "0.0005"),
    ("fr.epochs", "40"),
    ("fr.decay", "26,34"),
    ("fr.decay_factor", "0.1"),
    ("fr.batch", "128"),
    ("fr.augment", "true"),
    ("fr.seed", "0"),
    ("eval.sets", "2"),
    ("eval.identities", "50"),
    ("eval.per_identity", "4"),
    ("eval.pairs", "400"),
    ("eval.seed", "2"),
    ("eval.baseline", "real"),
];

/// Flat `key = value` run configuration; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineConfig {
    values: BTreeMap<String, String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            values: CONFIG_KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl PipelineConfig {
    /// Defaults overlaid with the `key = value` lines of `text` (`#` starts a comment).
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", lineno + 1)))?;
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(validation(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| validation(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key comes from the fixed key table")
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| validation(format!("config key `{key}` has invalid value `{raw}`")))
    }

    /// Comma-separated list value; empty items are ignored.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| validation(format!("config key `{key}` has invalid item `{s}`")))
            })
            .collect()
    }

    pub fn work_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("work_dir"))
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Digest of every key except `work_dir`.
    pub fn digest(&self) -> String {
        self.digest_of("")
    }

    /// Digest of the keys starting with `prefix`, excluding `work_dir`.
    pub fn digest_of(&self, prefix: &str) -> String {
        let body: String = self
            .values
            .iter()
            .filter(|(k, _)| k.as_str() != "work_dir" && k.starts_with(prefix))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        digest_str(&body)
    }

    pub fn toy_spec(&self) -> Result<ToySpec> {
        Ok(ToySpec {
            identities: self.get("toy.identities")?,
            per_identity: self.get("toy.per_identity")?,
            resolution: self.get("toy.resolution")?,
            seed: self.get("toy.seed")?,
        })
    }

    pub fn encoder_config(&self) -> Result<EncoderTrainConfig> {
        Ok(EncoderTrainConfig {
            encoder: EncoderConfig {
                resolution: self.get("toy.resolution")?,
                widths: self.list("encoder.widths")?,
                dim: self.get("encoder.dim")?,
                ..EncoderConfig::default()
            },
            epochs: self.get("encoder.epochs")?,
            batch_size: self.get("encoder.batch")?,
            learning_rate: self.get("encoder.lr")?,
            weight_decay: self.get("encoder.weight_decay")?,
            margin: self.get("encoder.margin")?,
            scale: self.get("encoder.scale")?,
            seed: self.get("encoder.seed")?,
        })
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let mut spec = ScheduleSpec::scaled(self.get("diffusion.T")?);
        if self.raw("diffusion.beta_start") != "auto" {
            spec.beta_start = self.get("diffusion.beta_start")?;
        }
        if self.raw("diffusion.beta_end") != "auto" {
            spec.beta_end = self.get("diffusion.beta_end")?;
        }
        Ok(spec)
    }

    pub fn diffusion_config(&self) -> Result<DiffusionTrainConfig> {
        Ok(DiffusionTrainConfig {
            denoiser: DenoiserConfig {
                resolution: self.get("diffusion.resolution")?,
                channels: self.list("diffusion.channels")?,
                norm_groups: self.get("diffusion.norm_groups")?,
                time_dim: self.get("diffusion.time_dim")?,
                id_dim: self.get("encoder.dim")?,
                sim_dim: self.get("diffusion.sim_dim")?,
                cond_tokens: self.get("diffusion.cond_tokens")?,
                cond_dim: self.get("diffusion.cond_dim")?,
                ..DenoiserConfig::default()
            },
            lambda: self.get("diffusion.lambda")?,
            m_range: [self.get("diffusion.m_low")?, self.get("diffusion.m_high")?],
            m_interval: self.get("diffusion.m_interval")?,
            epochs: self.get("diffusion.epochs")?,
            batch_size: self.get("diffusion.batch")?,
            learning_rate: self.get("diffusion.lr")?,
            weight_decay: self.get("diffusion.weight_decay")?,
            ema_decay: self.get("diffusion.ema")?,
            seed: self.get("diffusion.seed")?,
            penalty: self.get::<SimilarityPenalty>("diffusion.penalty")?,
            clip_x0: self.get("diffusion.clip_x0")?,
        })
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            num_steps: self.get("generate.steps")?,
            eta: self.get("generate.eta")?,
            seed: self.get("generate.seed")?,
            clip_x0: self.get("generate.clip_x0")?,
            batch_size: self.get("generate.batch")?,
        })
    }

    /// One mix schedule per dataset to assemble: the `generate.m_mix` range
    /// when set, otherwise one fixed-m schedule per entry of `generate.m`.
    pub fn generation_schedules(&self) -> Result<Vec<MixSchedule>> {
        if self.raw("generate.m_mix") != "none" {
            let v: Vec<f64> = self.list("generate.m_mix")?;
            if v.len() != 3 {
                return Err(validation("generate.m_mix must be `low,high,interval` or `none`"));
            }
            return Ok(vec![mix_m_schedule(v[0], v[1], v[2])?]);
        }
        let ms: Vec<f64> = self.list("generate.m")?;
        if ms.is_empty() {
            return Err(validation("generate.m must list at least one value"));
        }
        ms.into_iter().map(MixSchedule::fixed).collect()
    }

    pub fn fr_config(&self) -> Result<FrTrainConfig> {
        Ok(FrTrainConfig {
            encoder: EncoderConfig {
                resolution: self.get("toy.resolution")?,
                widths: self.list("fr.widths")?,
                dim: self.get("fr.dim")?,
                ..EncoderConfig::default()
            },
            margin: self.get("fr.margin")?,
            scale: self.get("fr.scale")?,
            learning_rate: self.get("fr.lr")?,
            momentum: self.get("fr.momentum")?,
            weight_decay: self.get("fr.weight_decay")?,
            epochs: self.get("fr.epochs")?,
            decay_epochs: self.list("fr.decay")?,
            decay_factor: self.get("fr.decay_factor")?,
            batch_size: self.get("fr.batch")?,
            augment: if self.get("fr.augment")? {
                AugmentConfig::default()
            } else {
                AugmentConfig::identity()
            },
            seed: self.get("fr.seed")?,
        })
    }

    /// Held-out toy universes for evaluation, one per test set.
    pub fn eval_specs(&self) -> Result<Vec<ToySpec>> {
        let sets: usize = self.get("eval.sets")?;
        if sets == 0 {
            return Err(validation("eval.sets must be at least 1"));
        }
        let seed: u64 = self.get("eval.seed")?;
        (0..sets as u64)
            .map(|k| {
                Ok(ToySpec {
                    identities: self.get("eval.identities")?,
                    per_identity: self.get("eval.per_identity")?,
                    resolution: self.get("toy.resolution")?,
                    seed: seed.wrapping_mul(7919).wrapping_add(1000 + k),
                })
            })
            .collect()
    }

    /// `Some(avg)` for a numeric baseline, `None` for `real` (train on the toy corpus).
    pub fn baseline(&self) -> Result<Option<f64>> {
        match self.raw("eval.baseline") {
            "real" => Ok(None),
            _ => Ok(Some(self.get("eval.baseline")?)),
        }
    }

    /// Checks that every typed view parses and validates.
    pub fn validate(&self) -> Result<()> {
        self.toy_spec()?;
        self.encoder_config()?.encoder.validate()?;
        self.schedule_spec()?.build()?;
        self.diffusion_config()?.validate()?;
        self.sampler_config()?;
        self.generation_schedules()?;
        self.fr_config()?.validate()?;
        self.eval_specs()?;
        self.baseline()?;
        let _: f64 = self.get("inquiry.threshold")?;
        let _: usize = self.get("inquiry.pool")?;
        let _: usize = self.get("inquiry.max")?;
        let _: u64 = self.get("inquiry.seed")?;
        let _: usize = self.get("generate.per_subject")?;
        let _: usize = self.get("generate.oversample")?;
        let _: usize = self.get("eval.pairs")?;
        Ok(())
    }
}

/// Contents of a stage's `stage.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMarker {
    pub stage: String,
    pub digest: String,
    pub config_digest: String,
    pub tool_version: String,
}

/// Whether a stage ran or was served from its cached output.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRun {
    pub name: String,
    pub digest: String,
    pub skipped: bool,
}

/// The result of [`run_pipeline`]: one report per assembled dataset.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// Label of each generation schedule (e.g. `m+0.00`) with its report.
    pub reports: Vec<(String, EvalReport)>,
    pub stages: Vec<StageRun>,
}

impl PipelineOutcome {
    pub fn ran(&self) -> Vec<&str> {
        self.stages.iter().filter(|s| !s.skipped).map(|s| s.name.as_str()).collect()
    }
}

/// Directory-safe label of a generation schedule.
pub fn schedule_label(schedule: &MixSchedule) -> String {
    match schedule.values() {
        [m] => format!("m{m:+.2}"),
        v => format!("mix{:+.2}_{:+.2}_n{}", v[0], v[v.len() - 1], v.len()),
    }
}

const PAIR_KEYS: [&str; 6] = [
    "eval.sets",
    "eval.identities",
    "eval.per_identity",
    "eval.pairs",
    "eval.seed",
    "toy.resolution",
];

struct Runner {
    work: PathBuf,
    config_digest: String,
    stages: Vec<StageRun>,
}

impl Runner {
    /// Runs `body` in a fresh `work/<name>` unless the marker there already
    /// carries `digest`.
    fn stage(&mut self, name: &str, digest: String, body: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let dir = self.work.join(name);
        let marker_path = dir.join("stage.json");
        let cached = fs::read_to_string(&marker_path)
            .ok()
            .and_then(|t| serde_json::from_str::<StageMarker>(&t).ok())
            .is_some_and(|m| m.digest == digest);
        if cached {
            info!("stage {name}: cached");
        } else {
            info!("stage {name}: running");
            let wrap = |e: Error| Error::Stage {
                stage: name.to_string(),
                source: Box::new(e),
            };
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| wrap(e.into()))?;
            }
            fs::create_dir_all(&dir).map_err(|e| wrap(e.into()))?;
            body(&dir).map_err(wrap)?;
            let marker = StageMarker {
                stage: name.to_string(),
                digest: digest.clone(),
                config_digest: self.config_digest.clone(),
                tool_version: TOOL_VERSION.to_string(),
            };
            fs::write(&marker_path, serde_json::to_string_pretty(&marker)?).map_err(|e| wrap(e.into()))?;
        }
        self.stages.push(StageRun {
            name: name.to_string(),
            digest,
            skipped: cached,
        });
        Ok(dir)
    }
}

fn stage_digest(name: &str, config: &PipelineConfig, prefixes: &[&str], upstream: &[&str]) -> String {
    let mut s = format!("{name}:{TOOL_VERSION}");
    for p in prefixes {
        s.push(':');
        s.push_str(&config.digest_of(p));
    }
    for u in upstream {
        s.push(':');
        s.push_str(u);
    }
    digest_str(&s)
}

fn provenance(config_digest: &str, stage_digest: &str) -> Vec<(&'static str, String)> {
    vec![
        ("config_digest", config_digest.to_string()),
        ("stage_digest", stage_digest.to_string()),
    ]
}

fn train_recognizer(corpus: &Corpus, config: &FrTrainConfig, dir: &Path, extra: &[(&str, String)]) -> Result<()> {
    let trained = train_fr(corpus, config)?;
    trained.encoder.save(&dir.join("encoder.bin"), extra)?;
    let mut head_extra = extra.to_vec();
    head_extra.push(("subjects", trained.subjects.join(" ")));
    trained.head.save(&dir.join("head.bin"), &head_extra)?;
    write_metrics_csv(&dir.join("metrics.csv"), &trained.epochs)
}

fn load_pair_lists(dirs: &[PathBuf]) -> Result<Vec<PairList>> {
    dirs.iter()
        .enumerate()
        .map(|(k, d)| {
            let mut p = PairList::read(&d.join("pairs.txt"))?;
            p.name = format!("toy_{k}");
            Ok(p)
        })
        .collect()
}

/// Runs every stage in order, reusing cached stage outputs under `work_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let cd = config.digest();
    let mut run = Runner {
        work: config.work_dir(),
        config_digest: cd.clone(),
        stages: Vec::new(),
    };
    fs::create_dir_all(&run.work)?;
    fs::write(run.work.join("config.txt"), config.to_text())?;

    let toy_d = stage_digest("toy", config, &["toy."], &[]);
    let toy_dir = run.stage("toy", toy_d.clone(), |dir| {
        let mut manifest = crate::toy::make_toy_corpus(&config.toy_spec()?, dir)?;
        manifest.header.config_digest = Some(cd.clone());
        manifest.write(&dir.join("manifest.jsonl"))
    })?;
    let load_real = || Corpus::load(&toy_dir.join("manifest.jsonl"));

    let enc_d = stage_digest("encoder", config, &["encoder.", "toy.resolution"], &[&toy_d]);
    let enc_dir = run.stage("encoder", enc_d.clone(), |dir| {
        let trained = train_encoder(&load_real()?, &config.encoder_config()?)?;
        let extra = provenance(&cd, &enc_d);
        trained.encoder.save(&dir.join("encoder.bin"), &extra)?;
        let mut head_extra = extra.clone();
        head_extra.push(("subjects", load_real()?.subject_ids().join(" ")));
        trained.head.save(&dir.join("head.bin"), &head_extra)?;
        write_metrics_csv(&dir.join("metrics.csv"), &trained.epochs)
    })?;
    let load_encoder = || EncoderCheckpoint::<f32>::load(&enc_dir.join("encoder.bin"));

    let diff_d = stage_digest("diffusion", config, &["diffusion."], &[&enc_d]);
    let diff_dir = run.stage("diffusion", diff_d.clone(), |dir| {
        let dc = config.diffusion_config()?;
        let spec = config.schedule_spec()?;
        let trained = train_diffusion(&load_real()?, &load_encoder()?, &dc, &spec.build()?)?;
        let mut extra = provenance(&cd, &diff_d);
        extra.push(("encoder", "../encoder/encoder.bin".to_string()));
        save_denoiser(&dir.join("denoiser.bin"), &trained.model, &spec, &dc, &extra)?;
        let mut csv = String::from("epoch,mse,simmat,total\n");
        for e in &trained.epochs {
            csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.mse, e.simmat, e.total));
        }
        fs::write(dir.join("metrics.csv"), csv)?;
        Ok(())
    })?;

    let inq_d = stage_digest("inquiries", config, &["inquiry.", "toy.resolution"], &[&enc_d]);
    let inq_dir = run.stage("inquiries", inq_d.clone(), |dir| {
        let pool = render_toy_corpus(&ToySpec {
            identities: config.get("inquiry.pool")?,
            per_identity: 1,
            resolution: config.get("toy.resolution")?,
            seed: config.get("inquiry.seed")?,
        })?;
        let encoder = load_encoder()?;
        let r = encoder.config().resolution;
        let resized: Vec<ImageArray> = pool.images().iter().map(|i| i.resized(r, r)).collect();
        let accepted = select_inquiries(&resized, &encoder, config.get("inquiry.threshold")?)?;
        let keep: usize = config.get("inquiry.max")?;
        for (k, &i) in accepted.iter().take(keep).enumerate() {
            pool.images()[i].save_png(&dir.join(format!("inquiry_{k:05}.png")))?;
        }
        info!("accepted {} of {} inquiry candidates", accepted.len(), pool.len());
        Ok(())
    })?;

    let mut pair_dirs = Vec::new();
    for (k, spec) in config.eval_specs()?.iter().enumerate() {
        let name = format!("pairs_{k}");
        let d = stage_digest(&name, config, &PAIR_KEYS, &[]);
        pair_dirs.push(run.stage(&name, d, |dir| {
            make_toy_pairs(spec, config.get("eval.pairs")?, config.get::<u64>("eval.seed")?.wrapping_add(k as u64), dir)?;
            Ok(())
        })?);
    }
    let pairs_d: Vec<String> = run.stages.iter().filter(|s| s.name.starts_with("pairs_")).map(|s| s.digest.clone()).collect();
    let pairs_refs: Vec<&str> = pairs_d.iter().map(String::as_str).collect();

    let baseline_avg = match config.baseline()? {
        Some(b) => b,
        None => {
            let mut up = vec![toy_d.as_str()];
            up.extend(&pairs_refs);
            let d = stage_digest("baseline", config, &["fr."], &up);
            let dir = run.stage("baseline", d.clone(), |dir| {
                train_recognizer(&load_real()?, &config.fr_config()?, dir, &provenance(&cd, &d))?;
                let encoder = EncoderCheckpoint::<f32>::load(&dir.join("encoder.bin"))?;
                let mut report = evaluate_suite(&load_pair_lists(&pair_dirs)?, &encoder, 0.0)?;
                report.config_digest = Some(cd.clone());
                report.write(&dir.join("report.json"))
            })?;
            EvalReport::read(&dir.join("report.json"))?.avg
        }
    };

    let mut reports = Vec::new();
    for schedule in config.generation_schedules()? {
        let label = schedule_label(&schedule);
        let mut tag = digest_str(&format!("{:?}", schedule.values()));
        let asm_name = format!("assemble_{label}");
        let asm_d = stage_digest(&asm_name, config, &["generate.", "toy.resolution"], &[&diff_d, &inq_d, &tag]);
        let asm_dir = run.stage(&asm_name, asm_d.clone(), |dir| {
            let (model, schedule_t, _) = load_denoiser(&diff_dir.join("denoiser.bin"))?;
            let encoder = load_encoder()?;
            let inquiries: Vec<ImageArray> = load_image_dir(&inq_dir)?.into_iter().map(|(_, i)| i).collect();
            if inquiries.is_empty() {
                return Err(validation("no inquiries were accepted"));
            }
            let generator = DiffusionGenerator {
                model: &model,
                schedule: &schedule_t,
                encoder: &encoder,
                sampler: config.sampler_config()?,
                output_resolution: config.get("toy.resolution")?,
            };
            let plan = AssemblyPlan {
                schedule: schedule.clone(),
                per_subject: config.get("generate.per_subject")?,
                oversample: config.get("generate.oversample")?,
                seed: config.get("generate.seed")?,
                subject_offset: 0,
            };
            let mut manifest = assemble_dataset(&inquiries, &generator, &plan, dir)?;
            manifest.header.config_digest = Some(cd.clone());
            manifest.write(&dir.join("manifest.jsonl"))
        })?;

        let fr_name = format!("fr_{label}");
        let fr_d = stage_digest(&fr_name, config, &["fr."], &[&asm_d]);
        let fr_dir = run.stage(&fr_name, fr_d.clone(), |dir| {
            let corpus = Corpus::load(&asm_dir.join("manifest.jsonl"))?;
            train_recognizer(&corpus, &config.fr_config()?, dir, &provenance(&cd, &fr_d))
        })?;

        let eval_name = format!("eval_{label}");
        tag = format!("{baseline_avg}");
        let mut up = vec![fr_d.as_str(), tag.as_str()];
        up.extend(&pairs_refs);
        let eval_d = stage_digest(&eval_name, config, &[], &up);
        let eval_dir = run.stage(&eval_name, eval_d, |dir| {
            let encoder = EncoderCheckpoint::<f32>::load(&fr_dir.join("encoder.bin"))?;
            let mut report = evaluate_suite(&load_pair_lists(&pair_dirs)?, &encoder, baseline_avg)?;
            report.config_digest = Some(cd.clone());
            report.write(&dir.join("report.json"))
        })?;
        reports.push((label, EvalReport::read(&eval_dir.join("report.json"))?));
    }
    Ok(PipelineOutcome {
        reports,
        stages: run.stages,
    })
}

/// Reads the `subjects` list stored in a classifier-head header.
pub fn head_subjects(head_path: &Path) -> Result<Vec<String>> {
    let h = crate::checkpoint::read_header(head_path)?;
    Ok(h.raw("subjects")
        .ok_or_else(|| Error::Format(format!("{} has no subjects field", head_path.display())))?
        .split_whitespace()
        .map(str::to_string)
        .collect())
}

/// Loads a manifest and the directory its paths are relative to.
pub fn read_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    Ok((DatasetManifest::read(path)?, DatasetManifest::root_of(path)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = PipelineConfig::parse("# comment\ntoy.identities = 7\n\nfr.epochs=3 # trailing\nfr.decay = 2\n").unwrap();
        assert_eq!(c.get::<usize>("toy.identities").unwrap(), 7);
        assert_eq!(c.get::<usize>("fr.epochs").unwrap(), 3);
        c.apply_overrides(&["generate.m=-0.4,0,0.4"]).unwrap();
        assert_eq!(c.list::<f64>("generate.m").unwrap(), vec![-0.4, 0.0, 0.4]);
        assert_eq!(c.generation_schedules().unwrap().len(), 3);
        assert!(PipelineConfig::parse("nope = 1").is_err());
        assert!(c.apply_overrides(&["toy.seed"]).is_err());
        assert!(c.set("bogus.key", "1").is_err());
        c.validate().unwrap();
    }

    #[test]
    fn digest_tracks_values_but_not_work_dir() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.set("work_dir", "/elsewhere").unwrap();
        assert_eq!(a.digest(), b.digest());
        b.set("fr.lr", "0.05").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest_of("toy."), b.digest_of("toy."));
        assert_ne!(a.digest_of("fr."), b.digest_of("fr."));
        let again = PipelineConfig::parse(&a.to_text()).unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn typed_views() {
        let c = PipelineConfig::default();
        let d = c.diffusion_config().unwrap();
        assert_eq!(d.grid().unwrap().len(), 101);
        assert_eq!(d.lambda, 0.05);
        assert_eq!(c.schedule_spec().unwrap(), ScheduleSpec::scaled(200));
        let f = c.fr_config().unwrap();
        assert_eq!((f.epochs, f.decay_epochs.clone(), f.batch_size), (40, vec![26, 34], 128));
        assert_eq!(c.baseline().unwrap(), None);
        let mut n = c.clone();
        n.set("eval.baseline", "94.26").unwrap();
        assert_eq!(n.baseline().unwrap(), Some(94.26));
        n.set("generate.m_mix", "-0.2,0.2,0.1").unwrap();
        let s = n.generation_schedules().unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 5);
        assert_eq!(schedule_label(&MixSchedule::fixed(-0.4).unwrap()), "m-0.40");
        assert_eq!(schedule_label(&s[0]), "mix-0.20_+0.20_n5");
    }
}
