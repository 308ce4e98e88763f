//! `lung-anomaly`: phantom generation, patch extraction, featurization,
//! density fitting, scoring, evaluation and model selection.
//!
//! Exit status is 0 on success, 2 when inputs fail validation and 1 on
//! runtime failures (I/O, diverged training).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lung_anomaly::augment::AugmentConfig;
use lung_anomaly::encode::{read_embeddings, write_embeddings};
use lung_anomaly::eval::{auroc, choose_threshold, threshold_metrics, MetricsReport};
use lung_anomaly::flow::{nf_fit, FlowConfig};
use lung_anomaly::gmm::{gmm_fit, EmConfig};
use lung_anomaly::score::{read_scores_csv, score_cohort, write_scores_csv, ScoreRow};
use lung_anomaly::select::{select_best, CandidateScore};
use lung_anomaly::store::{extract_cohort, featurize_store, make_pairs, ExtractConfig, PatchStore};
use lung_anomaly::synth::{generate_cohort, CohortSpec};
use lung_anomaly::volume::{CohortManifest, Split};
use lung_anomaly::{AggregationStrategy, DensityModel, Error, Model};
use serde::de::DeserializeOwned;
use serde::Serialize;

mod error;

use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(
    name = "lung-anomaly",
    version,
    about = "Density-based anomaly detection on lung CT patches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom cohort (VOL1 volumes, masks, manifest.json).
    Synth {
        #[arg(long)]
        healthy: usize,
        #[arg(long)]
        diseased: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cohort spec JSON; command-line counts and seed take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Edge length of the cubic phantoms in voxels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
    },
    /// Extract lung patches with normality flags into a patch store.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 32)]
        patch_size: usize,
        #[arg(long, default_value_t = 0.0)]
        overlap: f64,
        #[arg(long, default_value_t = 0.5)]
        min_coverage: f64,
        #[arg(long, default_value_t = 100)]
        max_ppp: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write augmented view pairs for contrastive pretraining.
    MakePairs {
        #[arg(long)]
        patches: PathBuf,
        /// Augmentation JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to these splits (repeatable); all when omitted.
        #[arg(long, value_enum)]
        split: Vec<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed patches into an EMB1 file.
    Featurize {
        #[arg(long, value_enum, default_value_t = Encoder::Handcrafted)]
        encoder: Encoder,
        /// Patch store (handcrafted encoder).
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Existing EMB1 file (external encoder).
        #[arg(long)]
        emb: Option<PathBuf>,
        /// Restrict to these splits (repeatable); all when omitted.
        #[arg(long, value_enum)]
        split: Vec<SplitArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a density model on the rows flagged normal.
    Fit {
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        /// Mixture components (gmm only).
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// EM or flow settings JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score patients: aggregate per-patch negative log-densities.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        #[arg(long, default_value = "mean")]
        strategy: AggregationStrategy,
        /// Manifest JSON or patch store directory supplying patient labels.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUROC and thresholded metrics of a scores CSV.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Scores used to choose the threshold; the evaluated file otherwise.
        #[arg(long)]
        val_scores: Option<PathBuf>,
        /// Model that produced the scores, for its name and parameter count.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the report with the best AUROC (ties: fewer parameters, then order).
    Select {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Encoder {
    Handcrafted,
    External,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Gmm,
    Nf,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json(value: &impl Serialize, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn splits(args: &[SplitArg]) -> Vec<Split> {
    args.iter().map(|&s| s.into()).collect()
}

fn load_labels(path: &Path) -> CliResult<HashMap<String, u8>> {
    if path.is_dir() {
        return Ok(PatchStore::open(path)?.labels());
    }
    let manifest = CohortManifest::load(path)?;
    Ok(manifest
        .patients
        .iter()
        .map(|e| (e.patient_id.clone(), e.subject_label.as_class()))
        .collect())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            healthy,
            diseased,
            out,
            seed,
            config,
            size,
            channels,
        } => {
            let mut spec: CohortSpec = read_config(config.as_deref())?;
            spec.n_healthy = healthy;
            spec.n_diseased = diseased;
            spec.seed = seed;
            if let Some(s) = size {
                spec.phantom.dims = [s; 3];
            }
            if let Some(c) = channels {
                spec.phantom.channels = c;
            }
            generate_cohort(&spec, &out)?;
            write_json(&spec, &out.join("cohort_spec.json"))
        }
        Command::Extract {
            manifest,
            patch_size,
            overlap,
            min_coverage,
            max_ppp,
            seed,
            out,
        } => {
            let manifest = CohortManifest::load(&manifest)?;
            let cfg = ExtractConfig {
                patch_size,
                overlap,
                min_lung_coverage: min_coverage,
                max_patches_per_patient: max_ppp,
                seed,
            };
            extract_cohort(&manifest, &cfg, &out)?;
            Ok(())
        }
        Command::MakePairs {
            patches,
            config,
            seed,
            split,
            out,
        } => {
            let cfg: AugmentConfig = read_config(config.as_deref())?;
            let store = PatchStore::open(&patches)?;
            make_pairs(&store, &cfg, seed, &splits(&split), &out)?;
            Ok(())
        }
        Command::Featurize {
            encoder,
            patches,
            emb,
            split,
            out,
        } => {
            let set = match encoder {
                Encoder::Handcrafted => {
                    let dir = patches.ok_or_else(|| CliError::invalid("--encoder handcrafted needs --patches"))?;
                    featurize_store(&PatchStore::open(&dir)?, &splits(&split))?
                }
                Encoder::External => {
                    let path = emb.ok_or_else(|| CliError::invalid("--encoder external needs --emb"))?;
                    if !split.is_empty() {
                        return Err(CliError::invalid("--split applies to the handcrafted encoder only"));
                    }
                    let set = read_embeddings(&path)?;
                    set.validate()?;
                    set
                }
            };
            write_embeddings(&set, &out)?;
            Ok(())
        }
        Command::Fit {
            emb,
            model,
            k,
            config,
            seed,
            out,
        } => {
            let set = read_embeddings(&emb)?;
            let data = set.normal_matrix::<f64>();
            if data.is_empty() {
                return Err(CliError::invalid("no embeddings flagged normal"));
            }
            let fitted = match model {
                ModelKind::Gmm => {
                    let mut cfg: EmConfig = read_config(config.as_deref())?;
                    cfg.seed = seed.unwrap_or(cfg.seed);
                    let mut fit = gmm_fit(&data, k, &cfg)?;
                    fit.model.fit_config = Some(cfg);
                    Model::Gmm(fit.model)
                }
                ModelKind::Nf => {
                    let mut cfg: FlowConfig = read_config(config.as_deref())?;
                    cfg.seed = seed.unwrap_or(cfg.seed);
                    Model::Flow(nf_fit(&data, &cfg)?.model)
                }
            };
            fitted.save(&out)?;
            Ok(())
        }
        Command::Score {
            model,
            emb,
            strategy,
            labels,
            out,
        } => {
            let model = Model::load(&model)?;
            let set = read_embeddings(&emb)?;
            let labels = load_labels(&labels)?;
            let records = score_cohort(&model, &set, |id| labels.get(id).copied(), strategy)?;
            let rows = records
                .iter()
                .map(|r| ScoreRow::from_record(r, strategy))
                .collect::<Result<Vec<_>, Error>>()?;
            write_scores_csv(&rows, &out)?;
            Ok(())
        }
        Command::Evaluate {
            scores,
            val_scores,
            model,
            out,
        } => {
            let rows = read_scores_csv(&scores)?;
            let strategy = match rows.first() {
                None => return Err(CliError::invalid("scores file has no rows")),
                Some(r) if rows.iter().all(|x| x.strategy == r.strategy) => r.strategy,
                Some(_) => return Err(CliError::invalid("scores mix aggregation strategies")),
            };
            let records: Vec<_> = rows.iter().map(ScoreRow::to_record::<f64>).collect();
            let threshold = match &val_scores {
                Some(p) => {
                    let val: Vec<_> = read_scores_csv(p)?.iter().map(ScoreRow::to_record::<f64>).collect();
                    choose_threshold(&val)?
                }
                None => choose_threshold(&records)?,
            };
            let cm = threshold_metrics(&records, threshold)?;
            let model = model.map(|p| Model::load(&p)).transpose()?;
            let config = serde_json::json!({
                "scores": scores,
                "threshold_source": val_scores.as_ref().unwrap_or(&scores),
                "threshold_rule": "max youden j, ties to lower threshold",
                "model_hyperparameters": match &model {
                    Some(Model::Gmm(m)) => serde_json::to_value(&m.fit_config).unwrap_or_default(),
                    Some(Model::Flow(m)) => serde_json::to_value(&m.fit_config).unwrap_or_default(),
                    None => serde_json::Value::Null,
                },
            });
            let report = MetricsReport {
                model: model.as_ref().map_or_else(|| "unknown".into(), |m| m.label()),
                strategy: strategy.name().into(),
                auroc: auroc(&records)?,
                acc: cm.accuracy(),
                precision: cm.precision().ok(),
                recall: cm.recall(),
                threshold,
                n: records.len(),
                n_params: model.as_ref().map(|m| m.n_params()),
                config,
            };
            write_json(&report, &out)
        }
        Command::Select { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                    serde_json::from_str::<MetricsReport>(&text)
                        .map_err(|e| CliError::invalid(format!("{}: {e}", p.display())))
                })
                .collect::<CliResult<Vec<_>>>()?;
            let candidates: Vec<CandidateScore> = loaded
                .iter()
                .map(|r| CandidateScore {
                    label: r.model.clone(),
                    // unknown sizes never win a tie
                    n_params: r.n_params.unwrap_or(usize::MAX),
                    auroc: r.auroc,
                })
                .collect();
            let best = select_best(&candidates)?;
            let summary = serde_json::json!({
                "selected": reports[best],
                "report": loaded[best],
                "candidates": reports
                    .iter()
                    .zip(&loaded)
                    .map(|(p, r)| serde_json::json!({"path": p, "model": r.model, "strategy": r.strategy, "auroc": r.auroc, "n_params": r.n_params}))
                    .collect::<Vec<_>>(),
                "rule": "max auroc, then fewer parameters, then input order",
            });
            write_json(&summary, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
