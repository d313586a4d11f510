use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dreamhead_core::pipeline::{
    evaluate, frame_progression, infer, lip_track, prepare_source, read_log, tau_sweep, write_evaluation,
    write_inference, Checkpoint, Evaluation, ExperimentConfig, InferenceManifest, StatsSource, StdInit,
    TrainingSet, Trainer,
};
use dreamhead_core::metrics::MetricReport;
use dreamhead_core::plot;
use dreamhead_core::synthdata::{generate_dataset, load_clip, load_dataset};

const SEED_ENV: &str = "DREAMHEAD_SEED";

/// Audio-driven talking-head generation on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "dreamhead", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of clips.
    GenData(GenDataArgs),
    /// Train both hierarchies and write checkpoints.
    Train(TrainArgs),
    /// Generate frames for a source clip driven by audio.
    Infer(InferArgs),
    /// Score checkpoints on a test dataset.
    Eval(EvalArgs),
    /// Render charts and image strips.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON). Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and sampling. Overrides the config
    /// file; without it, DREAMHEAD_SEED fills seeds the config leaves unset.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    clips: usize,
    /// Frames per clip.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory; defaults to `data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Source clip directory: identity, poses and landmark statistics.
    #[arg(long)]
    clip: PathBuf,
    /// Clip whose audio drives the output; defaults to the source clip.
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N audio frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Use a single source frame with a randomly initialized deviation.
    #[arg(long)]
    single_frame: Option<usize>,
    #[arg(long)]
    l2i_stride: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint to score, as PATH or LABEL=PATH. Repeatable.
    #[arg(long)]
    ckpt: Vec<String>,
    /// Test dataset directory; defaults to `test_data` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train and score one model per reference interval (comma separated).
    #[arg(long, value_delimiter = ',')]
    taus: Vec<usize>,
    /// Training dataset for --taus; defaults to `data` from the config.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    max_clips: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["report", "clip", "log"])))]
struct PlotArgs {
    /// `report.json` written by eval.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Clip directory: lip-opening trajectories and frame strips.
    #[arg(long)]
    clip: Option<PathBuf>,
    /// `train_log.jsonl` written by train.
    #[arg(long)]
    log: Option<PathBuf>,
    /// With --clip: overlay generated trajectories and a denoising strip.
    #[arg(long, requires = "clip")]
    ckpt: Option<PathBuf>,
    /// With --ckpt: frame whose denoising is shown.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 6)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an integer"))?)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

const SEED_KEYS: [&[&str]; 3] = [&["seed"], &["generator", "seed"], &["infer", "seed"]];

fn set_seed(cfg: &mut ExperimentConfig, key: &[&str], seed: u64) {
    match key {
        ["seed"] => cfg.seed = seed,
        ["generator", "seed"] => cfg.generator.seed = seed,
        _ => cfg.infer.seed = seed,
    }
}

/// Defaults < DREAMHEAD_SEED < config file < `--seed`.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let (mut cfg, raw) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let raw: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            (ExperimentConfig::from_json_str(&text)?, raw)
        }
        None => (ExperimentConfig::default(), serde_json::Value::Null),
    };
    if let Some(s) = env_seed()? {
        for key in SEED_KEYS {
            if key.iter().try_fold(&raw, |v, k| v.get(k)).is_none() {
                set_seed(&mut cfg, key, s);
            }
        }
    }
    if let Some(s) = seed {
        for key in SEED_KEYS {
            set_seed(&mut cfg, key, s);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sampling_seed(flag: Option<u64>, ckpt: &Checkpoint) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(ckpt.config.infer.seed),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.common.config.as_deref(), args.common.seed)?;
    if let Some(n) = args.frames {
        cfg.generator.frames = n;
    }
    let index = generate_dataset(&cfg.generator, args.clips, &args.out)?;
    eprintln!("wrote {} clip(s) to {}", index.clips.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.resume {
        Some(p) if args.common.config.is_none() => Checkpoint::load(p)?.config,
        _ => load_config(args.common.config.as_deref(), args.common.seed)?,
    };
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    let data_dir = args.data.clone().or_else(|| cfg.data.clone()).context("no dataset: pass --data or set `data`")?;
    let clips = load_dataset(&data_dir)?;
    if clips.is_empty() {
        bail!("dataset {} has no clips", data_dir.display());
    }
    eprintln!("loaded {} clip(s) from {}", clips.len(), data_dir.display());
    let data = TrainingSet::new(clips)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let mut state = Checkpoint::load(p)?;
            state.config.train.steps = cfg.train.steps;
            Trainer::resume(state, &data)?
        }
        None => Trainer::new(&cfg, &data)?,
    };
    create_dir(&args.out)?;
    std::fs::write(args.out.join("config.json"), trainer.state.config.to_json_string())?;
    let total = trainer.state.config.train.steps;
    let every = trainer.state.config.train.log_every.max(1);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    let written = trainer.run(Some(&args.out), |r| {
        if r.step % every == 0 || r.step == total {
            eprintln!(
                "step {:>6}/{total}  a2l {}  l2i {}  {:.1}s",
                r.step,
                fmt(r.loss_a2l),
                fmt(r.loss_l2i),
                r.wall_time
            );
        }
    })?;
    for p in &written {
        eprintln!("checkpoint {}", p.display());
    }
    Ok(())
}

fn infer_cmd(args: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let clip = load_clip(&args.clip)?;
    let driver = match &args.audio {
        Some(p) => load_clip(p)?,
        None => clip.clone(),
    };
    let mut audio = driver.audio;
    if let Some(n) = args.frames {
        audio = audio.window(0, n.min(audio.len()))?;
    }
    let mut opts = ckpt.config.infer.clone();
    opts.seed = sampling_seed(args.seed, &ckpt)?;
    if let Some(s) = args.l2i_stride {
        opts.l2i_stride = s;
    }
    let stats = match args.single_frame {
        Some(frame) => StatsSource::SingleFrame {
            frame,
            std: StdInit::Random { seed: opts.seed, scale: 0.05 },
        },
        None => StatsSource::FromClip,
    };
    let source = prepare_source(&clip, stats)?;
    eprintln!("generating {} frame(s)", audio.len());
    let out = infer(&ckpt, &source, &audio, &opts)?;
    let manifest = InferenceManifest {
        frames: out.frames.len(),
        fps: audio.fps(),
        image_size: clip.image_size(),
        landmarks: clip.landmark_count(),
        seed: opts.seed,
        config_hash: ckpt.config_hash(),
        clipped_points: out.clipped,
        landmark_reads: source.landmark_reads.clone(),
    };
    write_inference(&out, &manifest, &args.out)?;
    eprintln!("wrote {} frame(s) to {}", out.frames.len(), args.out.display());
    Ok(())
}

fn checkpoint_label(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => (spec.to_string(), PathBuf::from(spec)),
    }
}

fn eval_cmd(args: EvalArgs) -> Result<()> {
    if args.ckpt.is_empty() && args.taus.is_empty() {
        bail!("nothing to evaluate: pass --ckpt or --taus");
    }
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    if let Some(n) = args.max_frames {
        cfg.eval.max_frames = Some(n);
    }
    if let Some(n) = args.max_clips {
        cfg.eval.max_clips = Some(n);
    }
    let data_dir = args.data.clone().or_else(|| cfg.test_data.clone()).context("no test data: pass --data")?;
    let test = load_dataset(&data_dir)?;
    let mut all = Evaluation {
        report: MetricReport::default(),
        traces: Vec::new(),
    };
    if !args.ckpt.is_empty() {
        let mut loaded = Vec::new();
        for spec in &args.ckpt {
            let (label, path) = checkpoint_label(spec);
            loaded.push((label, Checkpoint::load(&path)?));
        }
        let mut opts = loaded[0].1.config.infer.clone();
        opts.seed = sampling_seed(args.seed, &loaded[0].1)?;
        let entries: Vec<_> = loaded.iter().map(|(l, c)| (l.clone(), c)).collect();
        eprintln!("evaluating {} checkpoint(s) on {} clip(s)", entries.len(), test.len());
        let e = evaluate(&entries, &test, &cfg.eval, &opts)?;
        all.report.rows.extend(e.report.rows);
        all.traces.extend(e.traces);
    }
    if !args.taus.is_empty() {
        let train_dir = args
            .train_data
            .clone()
            .or_else(|| cfg.data.clone())
            .context("--taus needs training data: pass --train-data")?;
        let train = TrainingSet::new(load_dataset(&train_dir)?)?;
        eprintln!("reference-interval sweep over {:?}", args.taus);
        let e = tau_sweep(&cfg, &train, &test, &args.taus)?;
        all.report.rows.extend(e.report.rows);
        all.traces.extend(e.traces);
    }
    create_dir(&args.out)?;
    write_evaluation(&all, &args.out, cfg.eval.plots && !args.no_plots)?;
    eprint!("{}", all.report.to_text());
    Ok(())
}

fn plot_cmd(args: PlotArgs) -> Result<()> {
    create_dir(&args.out)?;
    let mut written = Vec::new();
    if let Some(p) = &args.report {
        let report = MetricReport::read(p)?;
        written.extend(plot::write_report_charts(&report, &args.out)?);
    }
    if let Some(p) = &args.log {
        let records = read_log(p)?;
        let path = args.out.join("loss.svg");
        plot::write_text(&path, &plot::loss_chart(&records)?)?;
        written.push(path);
    }
    if let Some(p) = &args.clip {
        let clip = load_clip(p)?;
        let gt = lip_track(&clip.canonical_landmarks()?)?;
        let strip = args.out.join("frames.png");
        let picks: Vec<_> = (0..clip.len()).step_by((clip.len() / 8).max(1)).take(8).map(|i| clip.images[i].clone()).collect();
        plot::save_strip(&picks, &strip)?;
        written.push(strip);
        match &args.ckpt {
            None => {
                let path = args.out.join("lip_opening.svg");
                plot::write_text(&path, &plot::lip_opening_chart("source", &gt, &gt, clip.fps())?)?;
                written.push(path);
            }
            Some(c) => {
                let ckpt = Checkpoint::load(c)?;
                let mut opts = ckpt.config.infer.clone();
                opts.seed = sampling_seed(args.seed, &ckpt)?;
                let source = prepare_source(&clip, StatsSource::FromClip)?;
                let out = infer(&ckpt, &source, &clip.audio, &opts)?;
                let path = args.out.join("lip_opening.svg");
                let pred = lip_track(&out.canonical)?;
                plot::write_text(&path, &plot::lip_opening_chart("generated", &pred, &gt, clip.fps())?)?;
                written.push(path);
                let strip = args.out.join("generated.png");
                plot::save_strip(&out.frames[..out.frames.len().min(8)], &strip)?;
                written.push(strip);
                let steps = frame_progression(&ckpt, &source, &out.landmarks, args.frame, &opts, args.steps)?;
                let path = args.out.join(format!("denoising_{:06}.png", args.frame));
                plot::save_strip(&steps, &path)?;
                written.push(path);
            }
        }
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
