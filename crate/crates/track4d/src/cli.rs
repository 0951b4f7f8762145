//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! divergence, 4 failed verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use track4d_core::decoder::DecoderConfig;
use track4d_core::encoding::{FourierTimeConfig, VisualToken};
use track4d_core::geometry::{make_plucker, WorldPoint};
use track4d_core::learn::{grad_check, train_toy, GradCheckConfig, GradCheckReport, LossOptions, TrainConfig};
use track4d_core::model::{DialogueSample, DialogueTurnSpec, HistoryMode, Model, ModelDims, TurnTarget};
use track4d_core::state::QueryEmbedding;
use track4d_core::HORIZON;

use crate::bench::{load_corpus, read_predictions, validate_corpus, write_predictions};
use crate::checkpoint::Checkpoint;
use crate::manifest::{display, manifest_path, RunManifest};
use crate::pipeline::{
    corpus_feature_dim, corpus_frequencies, dialogue_sample, evaluate, history_label, load_corpus_with_tokens,
    predict_corpus, EvalConfig, PredictOptions,
};
use crate::synth::{generate_clip, CorpusConfig};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "track4d", version, about = "Geometry-grounded trajectory decoding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HistoryArg {
    None,
    #[value(name = "self")]
    SelfHistory,
    Gold,
}

impl From<HistoryArg> for HistoryMode {
    fn from(h: HistoryArg) -> Self {
        match h {
            HistoryArg::None => HistoryMode::None,
            HistoryArg::SelfHistory => HistoryMode::SelfHistory,
            HistoryArg::Gold => HistoryMode::Gold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnchorMode {
    /// Differentiate through the anchor solve.
    Implicit,
    /// Treat anchors as constants.
    Detach,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        /// Corpus config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of clips.
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Training config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `model.ckpt`, `loss.csv` and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Overrides both the initialization and the batch-sampling seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Zero and freeze the residual head.
        #[arg(long)]
        anchor_only: bool,
    },
    /// Decode every turn of a corpus.
    Predict {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output prediction file (JSON Lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "self")]
        history: HistoryArg,
        /// Same as `--history none`.
        #[arg(long, conflicts_with = "history")]
        no_history: bool,
        /// Attach anchors, attention entropies, fallback flags and the slot.
        #[arg(long)]
        audit: bool,
        /// Keep only the R best-scoring tokens per step.
        #[arg(long)]
        top_r: Option<usize>,
        /// Accepted for uniformity; decoding is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predictions against a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Output metrics report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Thresholds and BLEU smoothing (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// Dimensions and tolerances (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "implicit")]
        anchor_mode: AnchorMode,
        #[arg(long)]
        seed: Option<u64>,
        /// Output report (JSON); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Test hook: scale the analytic gradient of this block.
        #[arg(long, hide = true)]
        corrupt_block: Option<String>,
        #[arg(long, hide = true, default_value_t = 1.5)]
        corrupt_factor: f64,
    },
    /// Validate every clip of a corpus directory.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
        /// Output summary (JSON); printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reads a JSON config, naming the offending field on failure.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| e.in_file(path))
}

pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("field `{path}`: {}", e.into_inner()))
    })
}

fn optional_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("corpus directory {} does not exist", path.display())))
    }
}

const LOSS_COLUMNS: [&str; 5] = ["iteration", "total", "trajectory", "smoothness", "identity"];

/// Model hyperparameters plus the optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub init_seed: u64,
    pub score_hidden: usize,
    pub residual_hidden: usize,
    pub num_frequencies: usize,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            init_seed: 0,
            score_hidden: dims.score_hidden,
            residual_hidden: dims.residual_hidden,
            num_frequencies: dims.num_frequencies,
            train: TrainConfig::default(),
        }
    }
}

/// Small problem on which `gradcheck` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSettings {
    pub token_dim: usize,
    pub num_frequencies: usize,
    pub score_hidden: usize,
    pub residual_hidden: usize,
    pub num_tokens: usize,
    pub num_dialogues: usize,
    pub turns_per_dialogue: usize,
    pub top_r: Option<usize>,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        let g = GradCheckConfig::default();
        Self {
            token_dim: 6,
            num_frequencies: 2,
            score_hidden: 5,
            residual_hidden: 4,
            num_tokens: 12,
            num_dialogues: 2,
            turns_per_dialogue: 3,
            top_r: None,
            tolerance: g.tolerance,
            step: g.step,
            seed: 0,
        }
    }
}

fn point(rng: &mut ChaCha8Rng, s: f64) -> WorldPoint {
    WorldPoint::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

/// Random model and dialogues; ray origins surround a small region so every
/// bundle is well conditioned.
pub fn gradcheck_problem(s: &GradCheckSettings) -> Result<(Model, Vec<DialogueSample>)> {
    if s.token_dim == 0 || s.num_tokens == 0 || s.num_dialogues == 0 {
        return Err(Error::Config("gradcheck dimensions must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let dims = ModelDims {
        token_dim: s.token_dim,
        num_frequencies: s.num_frequencies,
        score_hidden: s.score_hidden,
        residual_hidden: s.residual_hidden,
        horizon: HORIZON,
    };
    let times = [0.0, 0.5, 1.0, 1.5];
    let mut model = Model::init(dims, FourierTimeConfig::geometric(s.num_frequencies, 2.0)?, rng.random())?;
    for (_, values) in model.blocks_mut() {
        values.iter_mut().for_each(|v| *v = rng.random_range(-0.6..0.6));
    }
    let d = s.token_dim;
    let batch = (0..s.num_dialogues)
        .map(|_| {
            let tokens = (0..s.num_tokens)
                .map(|i| {
                    let origin = point(&mut rng, 5.0);
                    let aim = point(&mut rng, 1.0);
                    Ok(VisualToken {
                        feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        ray: make_plucker(origin, aim - origin)?,
                        timestamp: times[i % times.len()],
                        view_id: format!("v{}", i % 3),
                        patch_id: i as u32,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let turns = (0..s.turns_per_dialogue)
                .map(|k| DialogueTurnSpec {
                    query: QueryEmbedding {
                        vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    },
                    target: (k % 3 != 2).then(|| TurnTarget {
                        target_id: ["a", "b"][rng.random_range(0..2)].to_string(),
                        points: (0..HORIZON).map(|_| point(&mut rng, 1.5)).collect(),
                        valid: (0..HORIZON).map(|h| h == 0 || rng.random_bool(0.7)).collect(),
                        times: None,
                    }),
                })
                .collect();
            Ok(DialogueSample { tokens, turns })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, batch))
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (mut manifest, manifest_at) = match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            clips,
        } => {
            let mut cfg: CorpusConfig = optional_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            if let Some(n) = clips {
                cfg.num_clips = n;
            }
            cfg.validate()?;
            create_dir(&out)?;
            let mut m = RunManifest::new("synth", serde_json::to_value(&cfg)?, Some(cfg.scene.seed));
            m.inputs.extend(config.as_deref().map(display));
            for i in 0..cfg.num_clips {
                let scene = generate_clip(&cfg, i as u64)?;
                let id = &scene.clip.clip_id;
                let clip_path = out.join(format!("{id}.json"));
                crate::bench::save_clip(&scene.clip, &clip_path)?;
                let tokens_path = out.join(format!("{id}.tokens.json"));
                fs::write(&tokens_path, serde_json::to_string(&scene.tokens)? + "\n").map_err(|e| Error::io(&tokens_path, e))?;
                let trace_path = out.join(format!("{id}.trace.json"));
                write_json(&scene.trace, &trace_path)?;
                m.outputs.extend([display(&clip_path), display(&tokens_path), display(&trace_path)]);
            }
            (m, manifest_path(&out, true))
        }
        Command::Train {
            corpus,
            config,
            out,
            seed,
            iterations,
            anchor_only,
        } => {
            require_dir(&corpus)?;
            let mut s: TrainSettings = optional_config(config.as_deref())?;
            if let Some(seed) = seed {
                s.init_seed = seed;
                s.train.seed = seed;
            }
            if let Some(n) = iterations {
                s.train.iterations = n;
            }
            s.train.anchor_only |= anchor_only;
            let clips = load_corpus_with_tokens(&corpus)?;
            let d = corpus_feature_dim(&clips)?;
            let mut fourier = corpus_frequencies(&clips)?;
            if s.num_frequencies != fourier.num_frequencies() {
                let duration = 2.0 * std::f64::consts::PI / fourier.frequencies()[0];
                fourier = FourierTimeConfig::geometric(s.num_frequencies, duration)?;
            }
            let dims = ModelDims {
                token_dim: d,
                num_frequencies: s.num_frequencies,
                score_hidden: s.score_hidden,
                residual_hidden: s.residual_hidden,
                horizon: HORIZON,
            };
            let dataset = clips.iter().map(|c| dialogue_sample(c, d)).collect::<Result<Vec<_>>>()?;
            let init = Model::init(dims, fourier, s.init_seed)?;
            let outcome = train_toy(&s.train, &dataset, init)?;
            create_dir(&out)?;
            let ckpt_path = out.join("model.ckpt");
            Checkpoint::new(outcome.model, s.init_seed, s.train.clone()).save(&ckpt_path)?;
            let csv_path = out.join("loss.csv");
            let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", csv_path.display()));
            // explicit header so a zero-iteration run still names its columns
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path).map_err(csv_err)?;
            w.write_record(LOSS_COLUMNS).map_err(csv_err)?;
            for row in &outcome.curve {
                w.serialize(row).map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(&csv_path, e))?;
            let mut m = RunManifest::new("train", serde_json::to_value(&s)?, Some(s.train.seed));
            m.inputs.push(display(&corpus));
            m.inputs.extend(config.as_deref().map(display));
            m.outputs.extend([display(&ckpt_path), display(&csv_path)]);
            (m, manifest_path(&out, true))
        }
        Command::Predict {
            corpus,
            checkpoint,
            out,
            history,
            no_history,
            audit,
            top_r,
            seed,
        } => {
            require_dir(&corpus)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let clips = load_corpus_with_tokens(&corpus)?;
            let mode = if no_history { HistoryMode::None } else { history.into() };
            let opts = PredictOptions {
                history: mode,
                audit,
                decoder: DecoderConfig {
                    top_r,
                    detach_anchor: false,
                },
            };
            let records = predict_corpus(&ckpt.model, &clips, &opts)?;
            ensure_parent(&out)?;
            write_predictions(&records, &out)?;
            let mut config = serde_json::json!({
                "history": history_label(mode),
                "audit": audit,
                "decoder": opts.decoder,
            });
            if mode == HistoryMode::Gold {
                config["history_note"] = "gold: evidence after each geometric turn is pooled with weights derived from its ground-truth trajectory (an artifact-defined oracle)".into();
            }
            let mut m = RunManifest::new("predict", config, seed);
            m.inputs.extend([display(&corpus), display(&checkpoint)]);
            m.outputs.push(display(&out));
            (m, manifest_path(&out, false))
        }
        Command::Eval {
            corpus,
            predictions,
            out,
            config,
            seed,
        } => {
            require_dir(&corpus)?;
            let cfg: EvalConfig = optional_config(config.as_deref())?;
            let clips = load_corpus(&corpus)?;
            let preds = read_predictions(&predictions)?;
            let report = evaluate(&clips, &preds, &cfg)?;
            ensure_parent(&out)?;
            write_json(&report, &out)?;
            let mut m = RunManifest::new("eval", serde_json::to_value(cfg)?, seed);
            m.inputs.extend([display(&corpus), display(&predictions)]);
            m.inputs.extend(config.as_deref().map(display));
            m.outputs.push(display(&out));
            (m, manifest_path(&out, false))
        }
        Command::Gradcheck {
            config,
            anchor_mode,
            seed,
            out,
            corrupt_block,
            corrupt_factor,
        } => {
            let mut s: GradCheckSettings = optional_config(config.as_deref())?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let (model, batch) = gradcheck_problem(&s)?;
            let modes: &[bool] = match anchor_mode {
                AnchorMode::Implicit => &[false],
                AnchorMode::Detach => &[true],
                AnchorMode::Both => &[false, true],
            };
            let reports = modes
                .iter()
                .map(|&detach| {
                    let cfg = GradCheckConfig {
                        tolerance: s.tolerance,
                        step: s.step,
                        loss: LossOptions {
                            decoder: DecoderConfig {
                                top_r: s.top_r,
                                detach_anchor: detach,
                            },
                            ..LossOptions::default()
                        },
                        corrupt_block: corrupt_block.clone().map(|b| (b, corrupt_factor)),
                    };
                    Ok(grad_check(&model, &batch, &cfg)?)
                })
                .collect::<Result<Vec<GradCheckReport>>>()?;
            let mut m = RunManifest::new("gradcheck", serde_json::to_value(&s)?, Some(s.seed));
            m.inputs.extend(config.as_deref().map(display));
            let at = match &out {
                Some(path) => {
                    ensure_parent(path)?;
                    write_json(&reports, path)?;
                    m.outputs.push(display(path));
                    Some(manifest_path(path, false))
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&reports)?);
                    None
                }
            };
            m.wall_time = start.elapsed().as_secs_f64();
            if let Some(at) = &at {
                m.write(at)?;
            }
            let failing: Vec<String> = reports
                .iter()
                .flat_map(|r| {
                    let mode = if r.detach_anchor { "detached anchor" } else { "implicit anchor" };
                    r.failing_blocks().into_iter().map(move |b| format!("{b} ({mode})"))
                })
                .collect();
            if !failing.is_empty() {
                return Err(Error::Verification(format!("gradient mismatch in {}", failing.join(", "))));
            }
            return Ok(());
        }
        Command::Validate { corpus, out } => {
            require_dir(&corpus)?;
            let summary = validate_corpus(&corpus)?;
            let mut m = RunManifest::new("validate", serde_json::json!({}), None);
            m.inputs.push(display(&corpus));
            let at = match &out {
                Some(path) => {
                    ensure_parent(path)?;
                    write_json(&summary, path)?;
                    m.outputs.push(display(path));
                    Some(manifest_path(path, false))
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                    None
                }
            };
            m.wall_time = start.elapsed().as_secs_f64();
            if let Some(at) = &at {
                m.write(at)?;
            }
            if !summary.is_valid() {
                let files: Vec<String> = summary.invalid_files.iter().map(|f| format!("{}: {}", f.file, f.error)).collect();
                return Err(Error::Data(format!("invalid clips:\n  {}", files.join("\n  "))));
            }
            return Ok(());
        }
    };
    manifest.wall_time = start.elapsed().as_secs_f64();
    manifest.write(&manifest_at)
}
