use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use srnn::arch::{compile, export_dot};
use srnn::data::SequenceBatch;
use srnn::io::{self, NormStats};
use srnn::runtime::{swap_unit, SrnnModel, TaskMode, DEFAULT_HORIZON, DEFAULT_SEED_FRAMES};
use srnn::stgraph::{derive_factor_graph, FactorId};
use srnn::tasks::{self, ManeuverConfig, MetricResult};
use srnn::trainer::{train, NoiseSchedule, TrainConfig};
use srnn::{Result, SrnnError};

#[derive(Parser)]
#[command(name = "srnn", version, about = "Structural-RNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    AngleError,
    F1,
    Maneuver,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a graph spec into its unit architecture (JSON, optional DOT).
    Compile {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a CSV log.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: String,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Train without input noise even for regression.
        #[arg(long)]
        no_noise: bool,
    },
    /// Closed-loop forecast from the seed frames of one sequence.
    Forecast {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED_FRAMES)]
        seed_frames: usize,
        #[arg(long, default_value_t = DEFAULT_HORIZON)]
        horizon: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = tasks::STRAIGHT)]
        default_class: usize,
    },
    /// Replace one unit of a model with the same unit of another.
    Swap {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        factor: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record LSTM memory-cell values over one sequence.
    TraceCells {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        unit: String,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        cells: Vec<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

/// `SRNN_SEED`, when set, replaces every configured seed.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("SRNN_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| SrnnError::Input(format!("SRNN_SEED={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| SrnnError::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| SrnnError::Parse {
        line: e.line(),
        column: e.column(),
        message: format!("{}: {e}", path.display()),
    })
}

/// The model in `ckpt`. With `graph` the architecture is compiled from
/// that spec; otherwise graph and architecture come from the sidecar.
fn open_model(ckpt: &Path, graph: Option<&Path>) -> Result<(SrnnModel, Option<NormStats>)> {
    let Some(graph) = graph else {
        let (model, meta) = io::load_model(ckpt)?;
        return Ok((model, meta.normalization));
    };
    let spec = io::load_graph_spec(graph)?;
    let arch = compile(&derive_factor_graph(&spec.graph), &spec.graph, &spec.specs)?;
    let stats = if io::sidecar_path(ckpt).exists() {
        io::load_meta(ckpt)?.normalization
    } else {
        None
    };
    Ok((io::load_checkpoint(ckpt, spec.graph, arch)?, stats))
}

fn pick_sequence(
    model: &SrnnModel,
    data: &Path,
    stats: Option<&NormStats>,
    split: SplitArg,
    index: usize,
) -> Result<(SequenceBatch, NormStats)> {
    let loaded = io::load_dataset(data, model.graph(), stats)?;
    let seqs = match split {
        SplitArg::Train => &loaded.dataset.train,
        SplitArg::Val => &loaded.dataset.val,
        SplitArg::Test => &loaded.dataset.test,
    };
    let seq = seqs
        .get(index)
        .cloned()
        .ok_or_else(|| SrnnError::Data(format!("split has {} sequences, no sequence {index}", seqs.len())))?;
    Ok((seq, loaded.stats))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Compile { graph, out, dot } => {
            let spec = io::load_graph_spec(&graph)?;
            let arch = compile(&derive_factor_graph(&spec.graph), &spec.graph, &spec.specs)?;
            io::write_file(&out, arch.to_json())?;
            if let Some(dot) = dot {
                io::write_file(&dot, export_dot(&arch))?;
            }
            Ok(())
        }
        Command::Train {
            graph,
            data,
            task,
            config,
            out,
            log,
            no_noise,
        } => {
            let mode: TaskMode = task.parse()?;
            let mut config = read_config(config.as_deref())?;
            if let Some(seed) = seed_override()? {
                config.rng_seed = seed;
            }
            config.validate()?;
            let spec = io::load_graph_spec(&graph)?;
            let loaded = io::load_dataset(&data, &spec.graph, None)?;
            let mut model = SrnnModel::new(spec.graph, &spec.specs, config.rng_seed)?;
            let schedule = if mode == TaskMode::Regression && !no_noise {
                NoiseSchedule::default()
            } else {
                NoiseSchedule::none()
            };
            let history = train(&mut model, &loaded.dataset, &config, &schedule, mode)?;
            io::save_model(&model, &out, Some(&loaded.stats), Some(&mode.to_string()))?;
            io::write_file(&log, io::log_csv(&history))
        }
        Command::Forecast {
            graph,
            ckpt,
            seed_frames,
            horizon,
            data,
            split,
            sequence,
            out,
        } => {
            let (model, stats) = open_model(&ckpt, graph.as_deref())?;
            let (seq, stats) = pick_sequence(&model, &data, stats.as_ref(), split, sequence)?;
            if seq.len < seed_frames {
                return Err(SrnnError::Data(format!(
                    "sequence has {} frames, {seed_frames} seed frames requested",
                    seq.len
                )));
            }
            let fc = model.forecast(&seq.window(0, seed_frames)?, horizon)?;
            let frames = fc
                .frames
                .iter()
                .map(|(v, x)| (v.clone(), stats.denormalize_node(model.graph(), v, x)))
                .collect();
            io::write_file(&out, io::forecast_csv(&frames)?)
        }
        Command::Eval {
            metric,
            pred,
            truth,
            out,
            threshold,
            default_class,
        } => {
            let results = match metric {
                Metric::AngleError => {
                    let (ph, p) = io::read_matrix(&pred)?;
                    let (th, t) = io::read_matrix(&truth)?;
                    if ph != th || p.shape() != t.shape() {
                        return Err(SrnnError::Data(format!(
                            "prediction {:?} and truth {:?} differ in shape or columns",
                            p.shape(),
                            t.shape()
                        )));
                    }
                    let per_step = tasks::angle_error_by_horizon(&[p], &[t])?;
                    let mean = per_step.iter().sum::<f64>() / per_step.len().max(1) as f64;
                    vec![MetricResult {
                        metric: "angle-error".into(),
                        per_class: per_step
                            .iter()
                            .enumerate()
                            .map(|(k, e)| (format!("t{k}"), *e))
                            .collect(),
                        aggregate: mean,
                    }]
                }
                Metric::F1 => {
                    vec![tasks::f1_macro(&io::read_classes(&pred)?, &io::read_classes(&truth)?)?.to_result()]
                }
                Metric::Maneuver => {
                    let tracks = io::read_maneuver_tracks(&pred, &truth)?;
                    let cfg = ManeuverConfig {
                        default_class,
                        threshold,
                    };
                    tasks::maneuver_metrics(&tracks, &cfg)?.to_result()
                }
            };
            io::write_file(&out, io::metrics_csv(&results))
        }
        Command::Swap {
            target,
            donor,
            factor,
            out,
        } => {
            let (t, meta) = io::load_model(&target)?;
            let (d, _) = io::load_model(&donor)?;
            let factor: FactorId = factor.parse()?;
            let hybrid = swap_unit(&t, &d, &factor)?;
            io::save_model(&hybrid, &out, meta.normalization.as_ref(), meta.task.as_deref())
        }
        Command::TraceCells {
            graph,
            ckpt,
            data,
            unit,
            layer,
            cells,
            split,
            sequence,
            out,
        } => {
            let (model, stats) = open_model(&ckpt, graph.as_deref())?;
            let (seq, _) = pick_sequence(&model, &data, stats.as_ref(), split, sequence)?;
            let traces = model.trace_cells(&seq, &unit.parse()?, layer, &cells)?;
            io::write_file(&out, io::traces_csv(&traces))
        }
    }
}
