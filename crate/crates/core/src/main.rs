use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Deserialize;

use dpod::alignment::{train_alignment, AlignmentConfig};
use dpod::corpus::{generate_synthetic, load_manifest, save_manifest, stratified_subset, ClusterMap, Dataset, SyntheticConfig};
use dpod::domain_vectors::{domain_mean_table, domain_vectors, DomainVectors};
use dpod::embeddings::{import_jsonl, load_precomputed};
use dpod::encoder::EncoderConfig;
use dpod::experiments::{gradcheck_report, init_encoder, init_stage3, run_experiment, seeded_alignment, seeded_stage3, ExperimentConfig, Variant};
use dpod::io::write_string_atomic;
use dpod::model_io::{
    domain_means_container, domain_means_from_container, encoder_container, encoder_from_container, stage3_container, stage3_from_container,
    ModelContainer,
};
use dpod::prompt_classifier::{train_stage3, PromptMode, Stage3Config, Stage3Model};

#[derive(Parser)]
#[command(name = "dpod", version, about = "Domain-prompted out-of-context misinformation detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a clustered synthetic manifest.
    Generate {
        #[arg(long, default_value_t = 8)]
        domains: usize,
        #[arg(long, default_value_t = 200)]
        samples_per_domain: usize,
        /// Number of contiguous clusters, or an explicit comma-separated assignment.
        #[arg(long, default_value = "3")]
        clusters: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cross_domain_fakes: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a domain-stratified, label-balanced fraction of a manifest.
    Subset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert JSONL embeddings into the binary embedding container.
    ImportEmbeddings {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: label-aware alignment of the dual encoder.
    Align {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train every anchor with the true-pair loss.
        #[arg(long)]
        label_agnostic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: domain mean joints and the semantic domain-vector matrix.
    Domvec {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3: prompt tuning and classifier training.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        domvec: PathBuf,
        /// Domain means written by `domvec`; defaults to domain_means.bin beside the matrix.
        #[arg(long)]
        means: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "dpod")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        freeze_prefix: bool,
        /// Comma-separated domains to train on.
        #[arg(long, value_delimiter = ',')]
        train_domains: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a manifest with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Fail on unseen domains instead of estimating their domain vector.
        #[arg(long)]
        strict_domains: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation / fraction sweep described by a JSON config.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        target_domain: Option<String>,
        #[arg(long, value_delimiter = ',')]
        train_domains: Option<Vec<String>>,
        #[arg(long)]
        no_gradcheck: bool,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Embedding container used to resolve `image_ref` entries.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let ds = load_manifest(&self.data).with_context(|| format!("loading {}", self.data.display()))?;
        resolve(ds, self.embeddings.as_deref())
    }
}

fn resolve(ds: Dataset, embeddings: Option<&Path>) -> Result<Dataset> {
    match embeddings {
        Some(p) => {
            let store = load_precomputed(p).with_context(|| format!("loading {}", p.display()))?;
            Ok(ds.resolve_images(&store)?)
        }
        None => Ok(ds),
    }
}

/// Training hyper-parameters shared by `align` and `train`.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainingConfig {
    encoder: EncoderConfig,
    alignment: AlignmentConfig,
    stage3: Stage3Config,
}

fn read_config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(TrainingConfig::default()),
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn parse_mode(s: &str) -> Result<PromptMode> {
    Ok(match s {
        "onehot" => PromptMode::OnehotDomain,
        other => PromptMode::parse(other)?,
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate {
            domains,
            samples_per_domain,
            clusters,
            seed,
            cross_domain_fakes,
            out,
        } => {
            let cfg = SyntheticConfig {
                n_domains: domains,
                samples_per_domain,
                cluster_map: ClusterMap::parse(&clusters, domains)?,
                cross_domain_fakes,
                seed,
                ..SyntheticConfig::default()
            };
            let ds = generate_synthetic(&cfg)?;
            save_manifest(&ds, &out)?;
            info!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Subset { data, fraction, seed, out } => {
            let ds = load_manifest(&data)?;
            let sub = stratified_subset(&ds, fraction, seed)?;
            save_manifest(&sub, &out)?;
            info!("kept {} of {} samples", sub.len(), ds.len());
        }
        Command::ImportEmbeddings { input, out } => {
            let store = import_jsonl(&input)?;
            store.save(&out)?;
            info!("imported {} embedding rows", store.len());
        }
        Command::Align {
            data,
            config,
            seed,
            label_agnostic,
            out,
        } => {
            let ds = data.load()?;
            let cfg = read_config(config.as_deref())?;
            let encoder = init_encoder(&ds, cfg.encoder, seed)?;
            let align = AlignmentConfig {
                label_aware: !label_agnostic,
                ..seeded_alignment(&cfg.alignment, seed)
            };
            let (encoder, log) = train_alignment(&ds, &encoder, &align)?;
            encoder_container(&encoder).save(&out)?;
            write_string_atomic(&sibling(&out, "alignment_log.csv"), &log.to_csv())?;
            info!("aligned encoder checksum {}", encoder.checksum());
        }
        Command::Domvec { data, model, out } => {
            let ds = data.load()?;
            let encoder = encoder_from_container(&ModelContainer::load(&model)?)?;
            let table = domain_mean_table(&ds, &encoder)?;
            let w = domain_vectors(&table)?;
            write_string_atomic(&out, &w.to_csv())?;
            domain_means_container(&table).save(sibling(&out, "domain_means.bin"))?;
            info!("{} domains", w.n());
        }
        Command::Train {
            data,
            model,
            domvec,
            means,
            config,
            mode,
            seed,
            freeze_prefix,
            train_domains,
            out,
        } => {
            let ds = data.load()?;
            let cfg = read_config(config.as_deref())?;
            let encoder = encoder_from_container(&ModelContainer::load(&model)?)?;
            let vectors = DomainVectors::from_csv(&fs::read_to_string(&domvec).with_context(|| format!("reading {}", domvec.display()))?)?;
            let means_path = means.unwrap_or_else(|| sibling(&domvec, "domain_means.bin"));
            let means = domain_means_from_container(&ModelContainer::load(&means_path)?)?;
            if means.catalog.domains != vectors.domains {
                bail!("{} and {} describe different domains", means_path.display(), domvec.display());
            }
            let train = match &train_domains {
                Some(d) => ds.filter_domains(d),
                None => ds,
            };
            let mode = parse_mode(&mode)?;
            let (prompts, classifier) = init_stage3(mode, &encoder, vectors.n(), seed);
            let s3 = Stage3Config {
                freeze_prefix: freeze_prefix || cfg.stage3.freeze_prefix,
                ..seeded_stage3(&cfg.stage3, seed)
            };
            let frozen = encoder.checksum();
            let (prompts, classifier, log) = train_stage3(&train, &encoder, &vectors, &prompts, &classifier, &s3)?;
            if encoder.checksum() != frozen {
                bail!("encoder weights changed during prompt tuning; refusing to write {}", out.display());
            }
            let m = Stage3Model {
                encoder,
                vectors,
                means,
                prompts,
                classifier,
                threshold: s3.threshold,
                estimate_unknown: true,
            };
            stage3_container(&m).save(&out)?;
            write_string_atomic(&sibling(&out, "stage3_log.csv"), &log.to_csv())?;
        }
        Command::Infer {
            model,
            manifest,
            embeddings,
            strict_domains,
            out,
        } => {
            let mut m = stage3_from_container(&ModelContainer::load(&model)?)?;
            m.estimate_unknown = !strict_domains;
            let ds = resolve(load_manifest(&manifest)?, embeddings.as_deref())?;
            let mut csv = String::from("id,domain,score,label\n");
            for s in ds.samples() {
                let p = m.infer(s).with_context(|| format!("sample {}", s.id))?;
                csv.push_str(&format!("{},{},{:.9},{}\n", s.id, s.domain, p.score, p.label as u8));
            }
            write_string_atomic(&out, &csv)?;
        }
        Command::Experiment {
            config,
            out_dir,
            data,
            variants,
            fractions,
            seeds,
            target_domain,
            train_domains,
            no_gradcheck,
        } => {
            let mut cfg: ExperimentConfig = match &config {
                Some(p) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => ExperimentConfig::default(),
            };
            if let Some(v) = out_dir {
                cfg.out_dir = v;
            }
            if data.is_some() {
                cfg.data = data;
            }
            if let Some(v) = variants {
                cfg.variants = v.iter().map(|s| Variant::parse(s)).collect::<dpod::Result<_>>()?;
            }
            if let Some(v) = fractions {
                cfg.fractions = v;
            }
            if let Some(v) = seeds {
                cfg.seeds = v;
            }
            if target_domain.is_some() {
                cfg.target_domain = target_domain;
            }
            if train_domains.is_some() {
                cfg.train_domains = train_domains;
            }
            if no_gradcheck {
                cfg.gradcheck = false;
            }
            let report = run_experiment(&cfg)?;
            let dir = &cfg.out_dir;
            write_string_atomic(&dir.join("report.csv"), &report.to_csv())?;
            write_string_atomic(&dir.join("report.json"), &report.to_json()?)?;
            write_string_atomic(&dir.join("simmatrix.csv"), &report.similarity_csv())?;
            if cfg.gradcheck {
                let (text, worst) = gradcheck_report(1e-4, 0)?;
                write_string_atomic(&dir.join("gradcheck.txt"), &text)?;
                info!("gradient check max relative error {worst:.3e}");
            }
            for s in &report.summaries {
                info!(
                    "{} @ {}: {:.2} ± {:.2} over {} seeds (reference {:.3})",
                    s.variant.as_str(),
                    s.fraction,
                    s.mean_accuracy,
                    s.std_accuracy,
                    s.runs,
                    s.reference_accuracy
                );
            }
            info!("experiment finished in {:.1}s", report.runtime_secs);
        }
    }
    Ok(())
}
