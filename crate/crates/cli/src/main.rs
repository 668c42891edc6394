use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use aerotrl::checkpoint::Checkpoint;
use aerotrl::experiment::{
    embed_dataset, experiment_dataset, fit_pipeline, pretrain_encoder, run_experiment, train_task_head, ExperimentConfig,
    ExperimentReport, Task, TaskResults,
};
use aerotrl::flightgen::{AnomalyKind, SyntheticConfig};
use aerotrl::heads::{classify_flight, predict_trajectory, score_anomaly, Head};
use aerotrl::trajectory::{parse_trajectory_file, write_trajectory_file, IngestConfig, Trajectory};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

mod plot;

#[derive(Parser)]
#[command(name = "aerotrl", version, about = "Flight trajectory representation learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Ftp,
    Fr,
    Ad,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Ftp => Task::Ftp,
            TaskArg::Fr => Task::Fr,
            TaskArg::Ad => Task::Ad,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory table.
    Synthesize {
        /// Generator config; the four desk corridors when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        count_per_class: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder on every trajectory of a table.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve table.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Fit a task head on top of a pretrained encoder.
    TrainHead {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Anomaly kind for `--task ad` (SMA, HD, VD, GoAround).
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Write pooled representations.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict future positions with an FTP head.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use only the first `history` points of each trajectory.
        #[arg(long)]
        history: Option<usize>,
        /// Comma-separated horizons; every horizon up to the head maximum
        /// when omitted.
        #[arg(long, value_delimiter = ',')]
        horizons: Vec<usize>,
    },
    /// Classify flights with an FR head.
    Recognize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score flights with an AD head.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment and write its report.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also render the report plots.
        #[arg(long)]
        plots: bool,
    },
    /// Render SVG plots from a report and/or a trajectory table.
    Plot {
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint whose normalization and patching are used for
        /// trajectory overlays.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Trajectory ids to overlay; the first three when omitted.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize {
            config,
            count_per_class,
            seed,
            out,
        } => {
            let cfg = match &config {
                Some(path) => SyntheticConfig::from_toml(&read(path)?)?,
                None => SyntheticConfig {
                    count_per_class,
                    classes: aerotrl::experiment::desk_classes(),
                    anomalies: None,
                },
            };
            let data = cfg.generate(seed)?;
            write_table(&out, &data)?;
            write_record(&out, "synthesize", Some(seed), toml::Table::try_from(&cfg)?, &[])?;
            println!("wrote {} trajectories to {}", data.len(), out.display());
        }
        Command::Pretrain {
            data,
            config,
            seed,
            out,
            curve,
        } => {
            let cfg = load_config(config.as_deref(), None, seed)?;
            let set = match &data {
                Some(path) => read_table(path)?,
                None => experiment_dataset(&cfg)?,
            };
            let pipeline = fit_pipeline(&set, cfg.patching)?;
            let outcome = pretrain_encoder(&set, &pipeline, cfg.encoder, &cfg.pretrain, seed)?;
            Checkpoint::from_pretrain(&outcome.model, &pipeline).save(&out)?;
            if let Some(path) = &curve {
                let mut w = csv_writer(path)?;
                w.write_record(["epoch", "l_mse", "l_md", "l_m", "train_l_m", "masked_points"])?;
                for r in &outcome.curve {
                    w.write_record([
                        r.epoch.to_string(),
                        r.l_mse.to_string(),
                        r.l_md.to_string(),
                        r.l_m.to_string(),
                        r.train_l_m.to_string(),
                        r.masked_points.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            write_record(&out, "pretrain", Some(seed), toml::Table::try_from(&cfg)?, &inputs(&[data.as_deref()]))?;
            println!(
                "l_m {} -> {} over {} epochs",
                outcome.initial().l_m,
                outcome.last().l_m,
                cfg.pretrain.epochs
            );
        }
        Command::TrainHead {
            task,
            checkpoint,
            data,
            config,
            kind,
            seed,
            out,
            curve,
        } => {
            let task = Task::from(task);
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = load_config(config.as_deref(), Some(task), seed)?;
            cfg.encoder = ck.encoder;
            cfg.patching = ck.pipeline.patching;
            let ad_kind = match (task, kind) {
                (Task::Ad, Some(name)) => {
                    let kind = parse_kind(&name)?;
                    let index = cfg.ad.kinds.iter().position(|k| *k == kind).unwrap_or(0);
                    Some((index, kind))
                }
                (Task::Ad, None) => bail!("--task ad needs --kind"),
                (_, Some(_)) => bail!("--kind only applies to --task ad"),
                (_, None) => None,
            };
            let encoder = ck.to_encoder()?;
            let set = read_table(&data)?;
            let trained = train_task_head(&cfg, &encoder, &ck.pipeline, &set, ad_kind)?;
            let names = match ad_kind {
                Some((_, kind)) => vec![kind.as_str().to_string()],
                None => trained.class_names.clone(),
            };
            Checkpoint::from_head(&trained.outcome.encoder, &trained.outcome.head, &ck.pipeline, &names).save(&out)?;
            if let Some(path) = &curve {
                let mut w = csv_writer(path)?;
                w.write_record(["epoch", "loss"])?;
                for (e, l) in trained.outcome.curve.iter().enumerate() {
                    w.write_record([(e + 1).to_string(), l.to_string()])?;
                }
                w.flush()?;
            }
            write_record(
                &out,
                "train-head",
                Some(seed),
                toml::Table::try_from(&cfg)?,
                &inputs(&[Some(&checkpoint), Some(&data)]),
            )?;
            println!(
                "{} head on {} examples, final loss {}",
                task.as_str(),
                trained.examples,
                trained.outcome.curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Embed { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let encoder = ck.to_encoder()?;
            let set = read_table(&data)?;
            let vectors = embed_dataset(&encoder, &ck.pipeline, &set)?;
            let mut w = csv_writer(&out)?;
            let mut header = vec!["id".to_string()];
            header.extend((0..ck.encoder.d_model).map(|k| format!("v{k}")));
            w.write_record(&header)?;
            for (t, v) in set.iter().zip(&vectors) {
                let mut row = vec![t.id.clone()];
                row.extend(v.iter().map(|x| x.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Command::Predict {
            checkpoint,
            data,
            out,
            history,
            horizons,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (encoder, head) = ck.to_head()?;
            let Head::Ftp(head) = head else {
                bail!("{} does not hold an FTP head", checkpoint.display());
            };
            let horizons = if horizons.is_empty() {
                (1..=head.h_max).collect()
            } else {
                horizons
            };
            let mut w = csv_writer(&out)?;
            w.write_record(["id", "horizon", "lon", "lat", "alt"])?;
            for t in read_table(&data)? {
                let hist = match history {
                    Some(h) if t.len() < h => bail!("trajectory {} has {} points, fewer than --history {h}", t.id, t.len()),
                    Some(h) => t.slice(0..h),
                    None => t.clone(),
                };
                let pred = predict_trajectory(&encoder, &head, &ck.pipeline, &hist, &horizons).with_context(|| t.id.clone())?;
                for (h, p) in pred {
                    w.write_record([t.id.clone(), h.to_string(), p[0].to_string(), p[1].to_string(), p[2].to_string()])?;
                }
            }
            w.flush()?;
        }
        Command::Recognize { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let names = ck.head.as_ref().map(|h| h.class_names.clone()).unwrap_or_default();
            let (encoder, head) = ck.to_head()?;
            let Head::Fr(head) = head else {
                bail!("{} does not hold an FR head", checkpoint.display());
            };
            let mut w = csv_writer(&out)?;
            let mut header = vec!["id".to_string(), "class".to_string()];
            header.extend(names.iter().map(|n| format!("p_{n}")));
            w.write_record(&header)?;
            for t in read_table(&data)? {
                let probs = classify_flight(&encoder, &head, &ck.pipeline, &t)?;
                let best = (0..probs.len()).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap_or(0);
                let mut row = vec![t.id.clone(), names.get(best).cloned().unwrap_or_else(|| best.to_string())];
                row.extend(probs.iter().map(|p| p.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
        }
        Command::Detect { checkpoint, data, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (encoder, head) = ck.to_head()?;
            let Head::Ad(head) = head else {
                bail!("{} does not hold an AD head", checkpoint.display());
            };
            let mut w = csv_writer(&out)?;
            w.write_record(["id", "score"])?;
            for t in read_table(&data)? {
                w.write_record([t.id.clone(), score_anomaly(&encoder, &head, &ck.pipeline, &t)?.to_string()])?;
            }
            w.flush()?;
        }
        Command::Evaluate {
            config,
            task,
            seed,
            out_dir,
            plots,
        } => {
            let cfg = load_config(config.as_deref(), task.map(Task::from), seed)?;
            if config.is_none() && task.is_none() {
                bail!("evaluate needs --config or --task");
            }
            let outcome = run_experiment(&cfg)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("report.json"), outcome.report.to_json()?)?;
            fs::write(out_dir.join("timings.json"), serde_json::to_string_pretty(&outcome.timings)?)?;
            fs::write(out_dir.join("config.toml"), cfg.to_toml()?)?;
            if plots {
                plot::report_plots(&outcome.report, &out_dir.join("plots"))?;
            }
            print_summary(&outcome.report);
        }
        Command::Plot {
            report,
            data,
            checkpoint,
            ids,
            out_dir,
        } => {
            if report.is_none() && data.is_none() {
                bail!("plot needs --report or --data");
            }
            fs::create_dir_all(&out_dir)?;
            if let Some(path) = &report {
                let report: ExperimentReport = serde_json::from_str(&read(path)?)?;
                plot::report_plots(&report, &out_dir)?;
            }
            if let Some(path) = &data {
                let set = read_table(path)?;
                let pipeline = match &checkpoint {
                    Some(ck) => Checkpoint::load(ck)?.pipeline,
                    None => fit_pipeline(&set, aerotrl::experiment::desk_patching())?,
                };
                let chosen: Vec<&Trajectory> = if ids.is_empty() {
                    set.iter().take(3).collect()
                } else {
                    ids.iter()
                        .map(|id| set.iter().find(|t| &t.id == id).with_context(|| format!("no trajectory `{id}`")))
                        .collect::<Result<_>>()?
                };
                for t in chosen {
                    plot::trajectory_overlay(t, &pipeline, &out_dir.join(format!("trajectory_{}.svg", sanitize(&t.id))))?;
                }
            }
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Config file (or the desk defaults) with CLI task and seed applied.
/// Pretraining ignores the task, so a document without one is read as `fr`.
fn load_config(path: Option<&Path>, task: Option<Task>, seed: u64) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => read(p)?,
        None => String::new(),
    };
    let has_task = toml::from_str::<toml::Table>(&text)?.contains_key("task");
    let task = task.or(if has_task { None } else { Some(Task::Fr) });
    ExperimentConfig::from_toml_with(&text, task, Some(seed)).context("invalid config")
}

fn read_table(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let parsed = parse_trajectory_file(BufReader::new(file), &IngestConfig::default())?;
    for (line, message) in parsed.row_errors() {
        log::warn!("{}:{line}: {message}", path.display());
    }
    if parsed.trajectories.is_empty() {
        bail!("{} holds no usable trajectories", path.display());
    }
    Ok(parsed.trajectories)
}

fn write_table(path: &Path, data: &[Trajectory]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trajectory_file(BufWriter::new(file), data)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn inputs(paths: &[Option<&Path>]) -> Vec<String> {
    paths.iter().flatten().map(|p| p.display().to_string()).collect()
}

/// Writes `<out>.run.toml` with everything needed to repeat the command.
fn write_record(out: &Path, command: &str, seed: Option<u64>, config: toml::Table, inputs: &[String]) -> Result<()> {
    let mut doc = toml::Table::new();
    doc.insert("command".into(), command.into());
    if let Some(seed) = seed {
        doc.insert("seed".into(), toml::Value::Integer(i64::try_from(seed)?));
    }
    doc.insert("inputs".into(), toml::Value::Array(inputs.iter().map(|s| s.as_str().into()).collect()));
    doc.insert("config".into(), toml::Value::Table(config));
    let mut name = out.as_os_str().to_owned();
    name.push(".run.toml");
    fs::write(PathBuf::from(name), toml::to_string(&doc)?)?;
    Ok(())
}

fn parse_kind(name: &str) -> Result<AnomalyKind> {
    AnomalyKind::ALL
        .into_iter()
        .find(|k| k.as_str().eq_ignore_ascii_case(name))
        .with_context(|| format!("unknown anomaly kind `{name}`"))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn print_summary(report: &ExperimentReport) {
    if let (Some(first), Some(last)) = (report.pretrain_curve.first(), report.pretrain_curve.last()) {
        println!("pretrain\tl_m\t{}\t{}", first.l_m, last.l_m);
    }
    match &report.results {
        TaskResults::Ftp(f) => {
            println!("horizon\tmodel_mde_km\tconstant_mde_km\tlinear_mde_km");
            for h in &f.horizons {
                println!(
                    "{}\t{}\t{}\t{}",
                    h.horizon, h.model.mde_km, h.constant_position.mde_km, h.linear_extrapolation.mde_km
                );
            }
        }
        TaskResults::Fr(f) => {
            println!("metric\tmodel\tnearest_centroid");
            println!("accuracy\t{}\t{}", f.model.accuracy, f.nearest_centroid.accuracy);
            println!("precision\t{}\t{}", f.model.precision, f.nearest_centroid.precision);
            println!("recall\t{}\t{}", f.model.recall, f.nearest_centroid.recall);
        }
        TaskResults::Ad(a) => {
            println!("kind\tauc\taupr\tresidual_auc\trandom_aupr");
            for k in &a.kinds {
                let control = k.random_control_aupr.iter().sum::<f64>() / k.random_control_aupr.len().max(1) as f64;
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    k.kind, k.detection.auc, k.detection.aupr, k.residual_baseline.auc, control
                );
            }
        }
    }
}
