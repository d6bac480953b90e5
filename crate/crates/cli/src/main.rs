use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use simcond::checkpoint::read_header;
use simcond::corpus::Corpus;
use simcond::dataset::{
    assemble_dataset, load_image_dir, mix_m_schedule, select_inquiries, AssemblyPlan, DiffusionGenerator, MixSchedule,
};
use simcond::diffusion::{
    load_denoiser, save_denoiser, train_diffusion, DenoiserConfig, DenoiserModel, DiffusionTrainConfig, ScheduleSpec,
    SimilarityPenalty,
};
use simcond::embedder::{train_encoder, ClassifierHead, EncoderCheckpoint, EncoderConfig, EncoderTrainConfig};
use simcond::eval::{evaluate_suite, make_toy_pairs, PairList};
use simcond::fr::{train_fr, write_metrics_csv, FrTrainConfig};
use simcond::image::ImageArray;
use simcond::pipeline::{head_subjects, read_manifest, run_pipeline, PipelineConfig};
use simcond::report::sample_grid;
use simcond::sampler::{ddim_sample_batch, SamplerConfig};
use simcond::similarity::{bucket_by_similarity, export_embeddings, group_manifests, materialize, score_to_center};
use simcond::toy::{make_toy_corpus, ToySpec};

#[derive(Parser)]
#[command(name = "simcond", version, about = "Similarity-conditioned synthetic recognition datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural toy corpus (or a held-out pair list with --pairs).
    MakeToyData {
        #[arg(long, default_value_t = 100)]
        identities: usize,
        #[arg(long, default_value_t = 30)]
        per_identity: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write this many verification pairs instead of a training manifest.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the identity encoder with a CosFace head.
    TrainEncoder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Classifier head output; defaults to `<out>.head`.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 12)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the similarity-conditioned denoiser against a frozen encoder.
    TrainDiffusion {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long = "T", default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 0.05)]
        lambda: f64,
        #[arg(long, num_args = 2, allow_hyphen_values = true, default_values_t = [-1.0, 1.0])]
        m_range: Vec<f64>,
        #[arg(long, default_value_t = 0.02)]
        m_interval: f64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
        /// Channels per UNet level.
        #[arg(long, value_delimiter = ',', default_value = "16,32")]
        channels: Vec<usize>,
        /// `squared` or `absolute`.
        #[arg(long, default_value = "squared")]
        penalty: SimilarityPenalty,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Greedily keep pool images whose embeddings are mutually dissimilar.
    FilterInquiries {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        threshold: f64,
        #[arg(long)]
        max: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample images of one or more inquiries at a fixed m.
    Generate {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the encoder recorded in the model header.
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// An image or a directory of images.
        #[arg(long)]
        inquiry: PathBuf,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        m: f64,
        #[arg(long, default_value_t = 50)]
        per_subject: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a synthetic dataset with a manifest.
    Assemble {
        #[arg(long)]
        inquiries: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        m: f64,
        /// Cycle m over the grid `low..=high` in steps of `interval`.
        #[arg(long, num_args = 3, allow_hyphen_values = true, value_names = ["LOW", "HIGH", "INTERVAL"])]
        m_mix: Option<Vec<f64>>,
        #[arg(long, default_value_t = 50)]
        per_subject: usize,
        #[arg(long, default_value_t = 5)]
        oversample: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        subject_offset: usize,
        /// Output side length; defaults to the encoder resolution.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into groups by similarity to the identity centers.
    SplitSim {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        /// Leave oversampled inquiry copies out of the scoring.
        #[arg(long)]
        exclude_oversampled: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recognition model on a manifest.
    TrainFr {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        margin: f64,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long, num_args = 0.., default_values_t = [26, 34])]
        decay: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `metrics.csv` next to `out`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Ten-fold verification accuracy over one or more pair lists.
    Eval {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        pairs: Vec<PathBuf>,
        /// AVG of the real-data model, in percent.
        #[arg(long)]
        baseline: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run every stage from a config file, reusing cached stages.
    RunPipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Print the effective configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Render a sample grid: one row per inquiry, one column per m.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        inquiries: PathBuf,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-0.8,-0.4,0,0.4,0.8")]
        m: Vec<f64>,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        cell: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn head_path_for(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".head");
    PathBuf::from(os)
}

/// The explicit encoder, or the one recorded in the denoiser header (relative to the model).
fn resolve_encoder(model: &Path, explicit: Option<PathBuf>) -> Result<EncoderCheckpoint<f32>> {
    let path = match explicit {
        Some(p) => p,
        None => {
            let h = read_header(model)?;
            let rel = h
                .raw("encoder")
                .context("model header records no encoder; pass --encoder")?;
            model.parent().unwrap_or(Path::new(".")).join(rel)
        }
    };
    EncoderCheckpoint::load(&path).with_context(|| format!("loading encoder {}", path.display()))
}

fn load_inquiries(path: &Path) -> Result<Vec<ImageArray>> {
    if path.is_dir() {
        let images: Vec<ImageArray> = load_image_dir(path)?.into_iter().map(|(_, i)| i).collect();
        if images.is_empty() {
            bail!("no PNG images under {}", path.display());
        }
        Ok(images)
    } else {
        Ok(vec![ImageArray::load_png(path)?])
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeToyData {
            identities,
            per_identity,
            resolution,
            seed,
            pairs,
            out,
        } => {
            let spec = ToySpec {
                identities,
                per_identity,
                resolution,
                seed,
            };
            match pairs {
                Some(n) => {
                    let list = make_toy_pairs(&spec, n, seed, &out)?;
                    println!("wrote {} pairs to {}", list.pairs.len(), out.join("pairs.txt").display());
                }
                None => {
                    let m = make_toy_corpus(&spec, &out)?;
                    println!("wrote {} images of {} subjects to {}", m.len(), m.subjects().len(), out.display());
                }
            }
        }
        Command::TrainEncoder {
            corpus,
            out,
            head,
            dim,
            epochs,
            lr,
            batch,
            seed,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let resolution = corpus.images()[0].height();
            let config = EncoderTrainConfig {
                encoder: EncoderConfig {
                    resolution,
                    dim,
                    ..EncoderConfig::default()
                },
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
                ..EncoderTrainConfig::default()
            };
            let trained = train_encoder(&corpus, &config)?;
            trained.encoder.save(&out, &[("seed", seed.to_string())])?;
            let head = head.unwrap_or_else(|| head_path_for(&out));
            trained
                .head
                .save(&head, &[("subjects", corpus.subject_ids().join(" "))])?;
            println!("train accuracy {:.4}", trained.final_accuracy);
        }
        Command::TrainDiffusion {
            corpus,
            encoder,
            horizon,
            lambda,
            m_range,
            m_interval,
            epochs,
            lr,
            batch,
            resolution,
            channels,
            penalty,
            out,
            seed,
        } => {
            let enc = EncoderCheckpoint::<f32>::load(&encoder)?;
            let config = DiffusionTrainConfig {
                denoiser: DenoiserConfig {
                    resolution,
                    channels,
                    id_dim: enc.config().dim,
                    ..DenoiserConfig::default()
                },
                lambda,
                m_range: [m_range[0], m_range[1]],
                m_interval,
                epochs,
                batch_size: batch,
                learning_rate: lr,
                seed,
                penalty,
                ..DiffusionTrainConfig::default()
            };
            let spec = ScheduleSpec::scaled(horizon);
            let trained = train_diffusion(&Corpus::load(&corpus)?, &enc, &config, &spec.build()?)?;
            let enc_abs = fs::canonicalize(&encoder)?;
            save_denoiser(
                &out,
                &trained.model,
                &spec,
                &config,
                &[("encoder", enc_abs.display().to_string()), ("seed", seed.to_string())],
            )?;
            if let Some(last) = trained.epochs.last() {
                println!("final mse {:.5} simmat {:.5}", last.mse, last.simmat);
            }
        }
        Command::FilterInquiries {
            encoder,
            pool,
            threshold,
            max,
            out,
        } => {
            let enc = EncoderCheckpoint::<f32>::load(&encoder)?;
            let images = load_inquiries(&pool)?;
            let r = enc.config().resolution;
            let resized: Vec<ImageArray> = images.iter().map(|i| i.resized(r, r)).collect();
            let accepted = select_inquiries(&resized, &enc, threshold)?;
            fs::create_dir_all(&out)?;
            let keep = max.unwrap_or(usize::MAX);
            for (k, &i) in accepted.iter().take(keep).enumerate() {
                images[i].save_png(&out.join(format!("inquiry_{k:05}.png")))?;
            }
            println!("accepted {} of {} candidates", accepted.len().min(keep), images.len());
        }
        Command::Generate {
            model,
            encoder,
            inquiry,
            m,
            per_subject,
            steps,
            eta,
            seed,
            out,
        } => {
            let (den, schedule, _) = load_denoiser(&model)?;
            let enc = resolve_encoder(&model, encoder)?;
            let sampler = SamplerConfig {
                num_steps: steps,
                eta,
                seed,
                ..SamplerConfig::default()
            };
            let r = enc.config().resolution;
            for (i, inq) in load_inquiries(&inquiry)?.iter().enumerate() {
                let c_id = enc.embed(&inq.resized(r, r))?;
                let conds = vec![(&c_id, m); per_subject];
                let seeds: Vec<u64> = (0..per_subject)
                    .map(|j| seed.wrapping_add((i * per_subject + j) as u64))
                    .collect();
                let dir = out.join(format!("subject_{i:05}"));
                fs::create_dir_all(&dir)?;
                for (j, img) in ddim_sample_batch(&den, &schedule, &conds, &seeds, &sampler)?.iter().enumerate() {
                    img.resized(r, r).clamped().save_png(&dir.join(format!("img_{j:04}.png")))?;
                }
                info!("generated subject {i}");
            }
        }
        Command::Assemble {
            inquiries,
            model,
            encoder,
            m,
            m_mix,
            per_subject,
            oversample,
            steps,
            seed,
            subject_offset,
            resolution,
            out,
        } => {
            let (den, schedule, _) = load_denoiser(&model)?;
            let enc = resolve_encoder(&model, encoder)?;
            let mix = match m_mix {
                Some(v) => mix_m_schedule(v[0], v[1], v[2])?,
                None => MixSchedule::fixed(m)?,
            };
            let generator = DiffusionGenerator {
                model: &den,
                schedule: &schedule,
                encoder: &enc,
                sampler: SamplerConfig {
                    num_steps: steps,
                    seed,
                    ..SamplerConfig::default()
                },
                output_resolution: resolution.unwrap_or(enc.config().resolution),
            };
            let plan = AssemblyPlan {
                schedule: mix,
                per_subject,
                oversample,
                seed,
                subject_offset,
            };
            let manifest = assemble_dataset(&load_inquiries(&inquiries)?, &generator, &plan, &out)?;
            println!(
                "{} images of {} subjects{}",
                manifest.len(),
                manifest.subjects().len(),
                if manifest.header.partial { " (partial)" } else { "" }
            );
        }
        Command::SplitSim {
            manifest,
            encoder,
            head,
            groups,
            exclude_oversampled,
            out,
        } => {
            let (source, root) = read_manifest(&manifest)?;
            let enc = EncoderCheckpoint::<f32>::load(&encoder)?;
            let cls = ClassifierHead::<f32>::load(&head)?;
            let subjects = head_subjects(&head)?;
            let scored = score_to_center(&source, &root, &enc, &cls, &subjects, exclude_oversampled)?;
            let buckets = bucket_by_similarity(&scored, groups)?;
            fs::create_dir_all(&out)?;
            for (g, gm) in buckets.iter().zip(group_manifests(&source, &buckets)?) {
                materialize(&gm, &root, &out.join(format!("group_{}", g.group_id)))?;
                println!("group {}: {} images, mean similarity {:.4}", g.group_id, g.members.len(), g.mean_similarity);
            }
            export_embeddings(&source, &root, &enc, Some(&scored), &out.join("embeddings.bin"))?;
        }
        Command::TrainFr {
            manifest,
            margin,
            lr,
            epochs,
            decay,
            batch,
            seed,
            out,
            metrics,
        } => {
            let corpus = Corpus::load(&manifest)?;
            let resolution = corpus.images()[0].height();
            let config = FrTrainConfig {
                encoder: EncoderConfig {
                    resolution,
                    ..EncoderConfig::default()
                },
                margin,
                learning_rate: lr,
                epochs,
                decay_epochs: decay,
                batch_size: batch,
                seed,
                ..FrTrainConfig::default()
            };
            let trained = train_fr(&corpus, &config)?;
            trained.encoder.save(&out, &[("seed", seed.to_string())])?;
            trained
                .head
                .save(&head_path_for(&out), &[("subjects", trained.subjects.join(" "))])?;
            let metrics = metrics.unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).join("metrics.csv"));
            write_metrics_csv(&metrics, &trained.epochs)?;
        }
        Command::Eval {
            encoder,
            pairs,
            baseline,
            report,
        } => {
            let enc = EncoderCheckpoint::<f32>::load(&encoder)?;
            let lists = pairs.iter().map(|p| PairList::read(p)).collect::<simcond::Result<Vec<_>>>()?;
            let r = evaluate_suite(&lists, &enc, baseline)?;
            r.write(&report)?;
            for s in &r.sets {
                println!("{}: {:.2}", s.name, s.accuracy);
            }
            println!("AVG {:.2} GtR {:.2}", r.avg, r.gap_to_real);
        }
        Command::RunPipeline {
            config,
            overrides,
            print_config,
        } => {
            let mut cfg = match config {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            };
            cfg.apply_overrides(&overrides)?;
            if print_config {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let outcome = run_pipeline(&cfg)?;
            for s in &outcome.stages {
                println!("{:<24} {}", s.name, if s.skipped { "cached" } else { "ran" });
            }
            for (label, r) in &outcome.reports {
                println!("{label}: AVG {:.2} baseline {:.2} GtR {:.2}", r.avg, r.baseline_avg, r.gap_to_real);
            }
        }
        Command::Report {
            model,
            encoder,
            inquiries,
            m,
            rows,
            steps,
            seed,
            cell,
            out,
        } => {
            let (den, schedule, _): (DenoiserModel<f32>, _, _) = load_denoiser(&model)?;
            let enc = resolve_encoder(&model, encoder)?;
            let mut inq = load_inquiries(&inquiries)?;
            inq.truncate(rows.max(1));
            let sampler = SamplerConfig {
                num_steps: steps,
                ..SamplerConfig::default()
            };
            let grid = sample_grid(&den, &schedule, &enc, &inq, &m, seed, &sampler, cell)?;
            grid.save_png(&out)?;
            println!("wrote {}x{} grid to {}", inq.len(), m.len() + 1, out.display());
        }
    }
    Ok(())
}
