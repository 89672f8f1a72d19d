//! Command-line front end.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::dataio::{
    generate_synthetic, label_output_path, load_dataset, save_dataset, write_label_file, Dataset, SynthConfig,
};
use crate::decoder::expand_framewise;
use crate::error::{Error, Result};
use crate::eval::{align, evaluate, segment, Task};
use crate::grammar::{estimate_grammar, parse_grammar, serialize_grammar, Grammar};
use crate::stats::UnseenLengthInit;
use crate::trainer::{
    decode_checkpoint, log_line, read_model, train_with, write_checkpoint, LengthTerm, SampleOrder, TrainConfig,
    TrainSample, TrainerState, LOG_HEADER,
};

#[derive(Parser, Debug)]
#[command(name = "nnviterbi", version, about = "Weakly supervised temporal segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from transcripts and write a checkpoint and a log.
    Train(Opts),
    /// Segment test videos under the dataset grammar.
    Segment(Opts),
    /// Align test videos to their transcripts.
    Align(Opts),
    /// Evaluate on test videos with ground truth.
    Eval(Opts),
    /// Write a synthetic dataset.
    Synth(Opts),
    /// Estimate grammar.txt from the training transcripts.
    GrammarEstimate(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// `key = value` config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    sampling_ratio: Option<usize>,
    /// Number of sequences, or `unlimited`.
    #[arg(long)]
    buffer_capacity: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Training video ids, one per line, visited cyclically.
    #[arg(long)]
    order_file: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Continue from the checkpoint instead of starting over.
    #[arg(long)]
    resume: bool,
    /// Which task `eval` runs.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum TaskArg {
    Segmentation,
    Alignment,
    Both,
}

/// Everything a run depends on. Written to `run.json` next to the outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub order_file: Option<PathBuf>,
    pub jobs: usize,
    pub task: String,
    pub checkpoint_period: usize,
    pub synth_num_train: usize,
    pub synth_num_test: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::desk_scale(0);
        RunConfig {
            dataset: None,
            checkpoint: None,
            out: None,
            order_file: None,
            jobs: 1,
            task: "both".into(),
            checkpoint_period: 1000,
            synth_num_train: synth.num_train,
            synth_num_test: synth.num_test,
            train: TrainConfig::default(),
        }
    }
}

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(line, format!("bad value {v:?} for {key}")))
}

fn parse_capacity(v: &str) -> Option<Option<usize>> {
    if v == "unlimited" {
        Some(None)
    } else {
        v.parse().ok().map(Some)
    }
}

impl RunConfig {
    /// Applies a `key = value` file. Unknown keys are errors.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            let (key, v) = (key.trim(), value.trim());
            let t = &mut self.train;
            match key {
                "dataset" => self.dataset = Some(v.into()),
                "checkpoint" => self.checkpoint = Some(v.into()),
                "out" => self.out = Some(v.into()),
                "order_file" => self.order_file = Some(v.into()),
                "jobs" => self.jobs = parse_num(line, key, v)?,
                "task" => self.task = v.into(),
                "checkpoint_period" => self.checkpoint_period = parse_num(line, key, v)?,
                "synth_num_train" => self.synth_num_train = parse_num(line, key, v)?,
                "synth_num_test" => self.synth_num_test = parse_num(line, key, v)?,
                "iterations" => t.iterations = parse_num(line, key, v)?,
                "lr" => t.lr = parse_num(line, key, v)?,
                "lr_drop_iteration" => t.lr_drop_iteration = parse_num(line, key, v)?,
                "lr_dropped" => t.lr_dropped = parse_num(line, key, v)?,
                "sampling_ratio" => t.sampling_ratio = parse_num(line, key, v)?,
                "buffer_capacity" => {
                    t.buffer_capacity =
                        parse_capacity(v).ok_or_else(|| config_err(line, format!("bad buffer_capacity {v:?}")))?
                }
                "minibatch_frames" => t.minibatch_frames = parse_num(line, key, v)?,
                "max_len" => t.max_len = parse_num(line, key, v)?,
                "seed" => t.seed = parse_num(line, key, v)?,
                "batch_size" => t.batch_size = parse_num(line, key, v)?,
                "hidden" => t.hidden = parse_num(line, key, v)?,
                "grad_clip" => t.grad_clip = parse_num(line, key, v)?,
                "length_term" => {
                    t.length_term = match v {
                        "poisson" => LengthTerm::Poisson,
                        "flat" => LengthTerm::Flat,
                        _ => return Err(config_err(line, format!("bad length_term {v:?}"))),
                    }
                }
                "unseen_length_init" => {
                    t.unseen_length_init = match v {
                        "segments_per_frame" => UnseenLengthInit::SegmentsPerFrame,
                        "frames_per_segment" => UnseenLengthInit::FramesPerSegment,
                        _ => return Err(config_err(line, format!("bad unseen_length_init {v:?}"))),
                    }
                }
                _ => return Err(config_err(line, format!("unknown key {key:?}"))),
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, o: &Opts) -> Result<()> {
        if let Some(v) = &o.dataset {
            self.dataset = Some(v.clone());
        }
        if let Some(v) = &o.checkpoint {
            self.checkpoint = Some(v.clone());
        }
        if let Some(v) = &o.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = &o.order_file {
            self.order_file = Some(v.clone());
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = o.task {
            self.task = match v {
                TaskArg::Segmentation => "segmentation",
                TaskArg::Alignment => "alignment",
                TaskArg::Both => "both",
            }
            .into();
        }
        let t = &mut self.train;
        if let Some(v) = o.seed {
            t.seed = v;
        }
        if let Some(v) = o.iterations {
            t.iterations = v;
        }
        if let Some(v) = o.sampling_ratio {
            t.sampling_ratio = v;
        }
        if let Some(v) = &o.buffer_capacity {
            t.buffer_capacity =
                parse_capacity(v).ok_or_else(|| Error::Config(format!("bad --buffer-capacity {v:?}")))?;
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = o.max_len {
            t.max_len = v;
        }
        Ok(())
    }

    fn tasks(&self) -> Result<Vec<Task>> {
        match self.task.as_str() {
            "segmentation" => Ok(vec![Task::Segmentation]),
            "alignment" => Ok(vec![Task::Alignment]),
            "both" => Ok(vec![Task::Segmentation, Task::Alignment]),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }

    fn require<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        v.as_deref().ok_or_else(|| Error::Config(format!("--{name} is required")))
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a RunConfig,
}

fn write_provenance(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = Provenance { command, version: env!("CARGO_PKG_VERSION"), config: cfg };
    let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("run.json"), json + "\n")?;
    Ok(())
}

/// Parses `argv` and runs the command. Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    let (name, opts) = match &cmd {
        Command::Train(o) => ("train", o),
        Command::Segment(o) => ("segment", o),
        Command::Align(o) => ("align", o),
        Command::Eval(o) => ("eval", o),
        Command::Synth(o) => ("synth", o),
        Command::GrammarEstimate(o) => ("grammar-estimate", o),
    };
    let mut cfg = RunConfig::default();
    if let Some(path) = &opts.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.clone(), msg: e.to_string() })?;
        cfg.apply_file(&text)?;
    }
    cfg.apply_flags(opts)?;
    if cfg.jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    match cmd {
        Command::Train(_) => cmd_train(&cfg, opts.resume),
        Command::Segment(_) => cmd_infer(&cfg, Task::Segmentation, name),
        Command::Align(_) => cmd_infer(&cfg, Task::Alignment, name),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Synth(_) => cmd_synth(&cfg),
        Command::GrammarEstimate(_) => cmd_grammar(&cfg),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = RunConfig::require(&cfg.out, "out")?;
    let mut synth = SynthConfig::desk_scale(cfg.train.seed);
    synth.num_train = cfg.synth_num_train;
    synth.num_test = cfg.synth_num_test;
    let ds = generate_synthetic(&synth)?;
    save_dataset(&ds, out)?;
    write_provenance(out, "synth", cfg)?;
    info!("wrote {} videos to {}", ds.videos.len(), out.display());
    Ok(())
}

fn dataset_grammar(ds: &Dataset) -> Result<Grammar> {
    match &ds.grammar {
        Some(text) => parse_grammar(text, &ds.labels),
        None => estimate_grammar(&ds.train_transcripts(), ds.num_classes()),
    }
}

fn cmd_grammar(cfg: &RunConfig) -> Result<()> {
    let root = RunConfig::require(&cfg.dataset, "dataset")?;
    let ds = load_dataset(root)?;
    let g = estimate_grammar(&ds.train_transcripts(), ds.num_classes())?;
    let path = cfg.out.clone().unwrap_or_else(|| root.join("grammar.txt"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, serialize_grammar(&g, &ds.labels)?)?;
    Ok(())
}

fn train_samples(ds: &Dataset) -> Vec<TrainSample> {
    ds.train
        .iter()
        .map(|&i| TrainSample {
            source: i,
            features: Arc::clone(&ds.videos[i].features),
            transcript: ds.videos[i].transcript.clone(),
        })
        .collect()
}

fn read_order(path: &Path, ds: &Dataset, samples: &[TrainSample]) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.into(), msg: e.to_string() })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            ds.find(id)
                .and_then(|vi| samples.iter().position(|s| s.source == vi))
                .ok_or_else(|| Error::Load { path: path.into(), msg: format!("{id} is not a training video") })
        })
        .collect()
}

fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let root = RunConfig::require(&cfg.dataset, "dataset")?;
    let ckpt = RunConfig::require(&cfg.checkpoint, "checkpoint")?.to_path_buf();
    let out = cfg.out.clone().unwrap_or_else(|| ckpt.parent().map_or_else(PathBuf::new, Path::to_path_buf));
    let ds = load_dataset(root)?;
    let samples = train_samples(&ds);
    if samples.is_empty() {
        return Err(Error::InvalidInput("dataset has no training videos".into()));
    }
    let order = match &cfg.order_file {
        Some(p) => SampleOrder::Fixed(read_order(p, &ds, &samples)?),
        None => SampleOrder::Shuffled,
    };
    cfg.train.validate()?;
    let mut state = if resume {
        let bytes = fs::read(&ckpt).map_err(|e| Error::Load { path: ckpt.clone(), msg: e.to_string() })?;
        decode_checkpoint(&bytes, &samples)?
    } else {
        TrainerState::new(&cfg.train, ds.feature_dim(), ds.num_classes())?
    };
    if state.model.num_classes() != ds.num_classes() || state.model.params.dims().0 != ds.feature_dim() {
        return Err(Error::Checkpoint("checkpoint does not match the dataset".into()));
    }
    write_provenance(&out, "train", cfg)?;
    let log_path = out.join("train_log.csv");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    if !resume || log.metadata()?.len() == 0 {
        log.set_len(0)?;
        log.write_all(LOG_HEADER.as_bytes())?;
    }
    let period = cfg.checkpoint_period.max(1) as u64;
    train_with(&samples, &cfg.train, &order, &mut state, |st, stats| {
        log.write_all(log_line(stats).as_bytes())?;
        if st.iteration % period == 0 {
            write_checkpoint(st, &ckpt)?;
            info!("iteration {}: loss {:.4}", st.iteration, stats.loss);
        }
        Ok(())
    })?;
    write_checkpoint(&state, &ckpt)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

fn cmd_infer(cfg: &RunConfig, task: Task, name: &str) -> Result<()> {
    use rayon::prelude::*;
    let root = RunConfig::require(&cfg.dataset, "dataset")?;
    let ckpt = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let out = RunConfig::require(&cfg.out, "out")?;
    let ds = load_dataset(root)?;
    let (model, _) = read_model(ckpt)?;
    let grammar = match task {
        Task::Segmentation => Some(dataset_grammar(&ds)?),
        Task::Alignment => None,
    };
    let opts = cfg.train.decode_options();
    fs::create_dir_all(out)?;
    thread_pool(cfg.jobs)?.install(|| {
        ds.test.par_iter().try_for_each(|&i| {
            let v = &ds.videos[i];
            let seg = match &grammar {
                Some(g) => segment(&model, &v.features, g, &opts),
                None => align(&model, &v.features, &v.transcript, &opts),
            }
            .map_err(|e| Error::InvalidInput(format!("video {}: {e}", v.id)))?;
            write_label_file(&label_output_path(out, &v.id), &expand_framewise(&seg), &ds.labels)
        })
    })?;
    write_provenance(out, name, cfg)
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let root = RunConfig::require(&cfg.dataset, "dataset")?;
    let ckpt = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let out = RunConfig::require(&cfg.out, "out")?;
    let tasks = cfg.tasks()?;
    let ds = load_dataset(root)?;
    if ds.test.is_empty() {
        return Err(Error::InvalidInput("dataset has no test videos".into()));
    }
    if let Some(v) = ds.test_videos().find(|v| v.ground_truth.is_none()) {
        return Err(Error::InvalidInput(format!(
            "eval needs ground truth, but groundtruth/{}.txt is missing",
            v.id
        )));
    }
    let (model, _) = read_model(ckpt)?;
    let grammar = if tasks.contains(&Task::Segmentation) { Some(dataset_grammar(&ds)?) } else { None };
    let opts = cfg.train.decode_options();
    fs::create_dir_all(out)?;
    let pool = thread_pool(cfg.jobs)?;
    for task in tasks {
        let report = pool.install(|| evaluate(&model, &ds, task, grammar.as_ref(), &opts))?;
        let stem = match task {
            Task::Segmentation => "segmentation",
            Task::Alignment => "alignment",
        };
        fs::write(out.join(format!("{stem}_report.csv")), report.to_csv())?;
        fs::write(out.join(format!("{stem}_report.txt")), report.to_text())?;
        print!("{}", report.to_text());
    }
    write_provenance(out, "eval", cfg)
}
