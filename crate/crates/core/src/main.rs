use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use flowprior::degrade::{compose, parse_chain};
use flowprior::io::{checkpoint, idx, load_images, pnm, psnr_capped};
use flowprior::par::Execution;
use flowprior::restoration::{
    model_to_pixels, pixels_to_model, restore, trace_csv, Init, RestorationProblem, Schedule, StepRecord,
};
use flowprior::rng::{purpose, stream};
use flowprior::tiler::{self, DEFAULT_MARGIN};
use flowprior::toydata::{digits, sprites, SpriteSpec};
use flowprior::training::{StepMetrics, TrainConfig, Trainer};
use flowprior::{sanity, Tensor};

#[derive(Parser)]
#[command(
    name = "flowprior",
    version,
    about = "Normalizing-flow image priors: training and MAP restoration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow on an IDX file or a directory of PGM/PPM images.
    Train(TrainArgs),
    /// Apply a degradation chain such as `gauss:30` or `mask:4x8+dct:20`.
    Degrade(DegradeArgs),
    /// MAP-restore a degraded image with a trained flow.
    Restore(RestoreArgs),
    /// PSNR in dB between two 8-bit images (identical images report 99.00).
    EvalPsnr { a: PathBuf, b: PathBuf },
    /// Draw samples from a trained flow.
    Sample(SampleArgs),
    /// Run the built-in invariant checks.
    Sanity,
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Start from a named preset (mnist, sprites, div2k) instead of a file.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config key, e.g. `--set total_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    degrade: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the validity mask (255 valid, 0 missing).
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Encode,
    BaseMean,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 99.0)]
    lambda: f64,
    /// Steps per level then final steps, e.g. `50,50,50+150`; defaults to 50 per level + 150.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    /// Tile size; must equal the model's input size. Implied when the image size differs.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MARGIN)]
    margin: usize,
    #[arg(long, value_enum, default_value = "encode")]
    init: InitArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples, laid out left to right.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Sprites,
    Digits,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataFormat {
    Idx,
    Pgm,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "idx")]
    format: DataFormat,
    /// Output directory; receives `train` and `test` splits.
    #[arg(long)]
    out: PathBuf,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn load_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("in config {}", path.display()))?
        }
        (None, Some(name)) => TrainConfig::preset(name)?,
        (None, None) => bail!("either --config or --preset is required"),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{kv}'"))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let ck = checkpoint::Checkpoint {
        config: trainer.config.clone(),
        step: trainer.step,
        model: trainer.model.clone(),
        adam: Some(trainer.adam.clone()),
    };
    checkpoint::save(path, &ck).with_context(|| format!("saving {}", path.display()))
}

fn train(args: TrainArgs) -> Result<()> {
    let config = load_config(&args)?;
    let flow = &config.flow;
    let data =
        load_images(&args.data, flow.height, flow.width).with_context(|| format!("loading {}", args.data.display()))?;
    if let Some(img) = data.iter().find(|img| img.shape()[1] != flow.channels) {
        bail!("config expects {} channels, data has {}", flow.channels, img.shape()[1]);
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            if ck.config.flow != config.flow {
                bail!("checkpoint architecture differs from the config");
            }
            Trainer::resume(config, ck.model, ck.adam, ck.step, exec(args.sequential))
        }
        None => Trainer::new(config, exec(args.sequential))?,
    };
    let mut metrics = match &args.metrics {
        Some(path) => {
            let append = args.resume.is_some() && path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(append)
                .write(true)
                .truncate(!append)
                .open(path)
                .with_context(|| format!("opening {}", path.display()))?;
            if !append {
                writeln!(f, "{}", StepMetrics::HEADER)?;
            }
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    eprintln!(
        "training {} parameters on {} images for {} steps",
        trainer.model.num_params(),
        data.len(),
        trainer.config.total_steps
    );
    let every = trainer.config.checkpoint_every;
    trainer.run(&data, |t, m| {
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", m.csv_line()).map_err(|e| flowprior::Error::Io {
                path: args.metrics.clone().unwrap_or_default(),
                source: e,
            })?;
        }
        if m.step % 100 == 0 || m.step == t.config.total_steps {
            eprintln!("step {} bits/dim {:.4} total {:.4}", m.step, m.bits_per_dim, m.total);
        }
        if every > 0 && m.step % every == 0 {
            save_checkpoint(&args.out, t).map_err(|e| flowprior::Error::State(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    save_checkpoint(&args.out, &trainer)
}

fn degrade(args: DegradeArgs) -> Result<()> {
    let chain = parse_chain(&args.degrade)?;
    let img = pnm::read_pnm(&args.input)?;
    let (out, mask) = compose(&chain, &img, &mut stream(args.seed, &[purpose::DEGRADE]))?;
    pnm::write_pnm(&args.out, &out)?;
    if let Some(path) = &args.mask {
        pnm::write_mask(path, &mask)?;
    }
    Ok(())
}

fn restore_cmd(args: RestoreArgs) -> Result<()> {
    let ck = checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let model = ck.model;
    let cfg = &model.config;
    let mut schedule = match &args.schedule {
        Some(s) => s.parse::<Schedule>()?,
        None => Schedule::per_level(cfg.levels),
    };
    schedule.eta = args.eta;
    let pixels = pnm::read_pnm(&args.input)?;
    let (_, c, h, w) = pixels.nchw()?;
    if c != cfg.channels {
        bail!("model expects {} channels, image has {c}", cfg.channels);
    }
    let mask = args.mask.as_deref().map(pnm::read_mask).transpose()?;
    let problem = RestorationProblem::new(pixels_to_model(&pixels), mask, args.lambda)?;
    let init = match args.init {
        InitArg::Encode => Init::Encode,
        InitArg::BaseMean => Init::BaseMean,
    };
    if cfg.height != cfg.width {
        bail!("tiling needs a square model input, got {}x{}", cfg.height, cfg.width);
    }
    let patch = args.patch.unwrap_or(cfg.height);
    if patch != cfg.height {
        bail!("--patch {patch} differs from the model input size {}", cfg.height);
    }
    let header = || format!("# schedule={schedule} lambda={} eta={}\n", args.lambda, schedule.eta);
    let (restored, trace) = if (h, w) == (cfg.height, cfg.width) {
        let r = restore(&model, &problem, &schedule, init)?;
        if r.aborted {
            eprintln!("warning: non-finite objective, kept the best iterate");
        }
        (r.restored, trace_csv(&schedule, args.lambda, &r.trace))
    } else {
        let grid = tiler::plan(h, w, patch, args.margin)?;
        let traces: Mutex<Vec<(usize, Vec<StepRecord>)>> = Mutex::new(Vec::new());
        let out = tiler::restore_tiled_with(
            &grid,
            &problem.degraded,
            &problem.mask,
            exec(args.sequential),
            |i, x, m| {
                let sub = RestorationProblem::new(x.clone(), Some(m.clone()), args.lambda)?;
                let r = restore(&model, &sub, &schedule, init)?;
                traces.lock().expect("trace lock").push((i, r.trace));
                Ok(r.restored)
            },
        )?;
        for (i, e) in &out.failures {
            eprintln!("warning: tile {i} kept the input: {e}");
        }
        let mut traces = traces.into_inner().expect("trace lock");
        traces.sort_by_key(|(i, _)| *i);
        let mut text = header();
        text.push_str(&format!("tile,{}\n", StepRecord::HEADER));
        for (i, trace) in traces {
            for r in trace {
                text.push_str(&format!("{i},{}\n", r.csv_line()));
            }
        }
        (out.image, text)
    };
    pnm::write_pnm(&args.out, &model_to_pixels(&restored))?;
    if let Some(path) = &args.trace {
        fs::write(path, trace).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn eval_psnr(a: &Path, b: &Path) -> Result<()> {
    let v = psnr_capped(&pnm::read_pnm(a)?, &pnm::read_pnm(b)?, 255.0)?;
    println!("{v:.2}");
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be positive");
    }
    let ck = checkpoint::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let model = ck.model;
    let x = model.sample(args.n, args.temperature, &mut stream(args.seed, &[purpose::SAMPLE]))?;
    let (n, c, h, w) = x.nchw()?;
    let mut strip = Tensor::zeros(vec![1, c, h, w * n]);
    for i in 0..n {
        strip.paste(&x.batch_item(i)?, 0, i * w)?;
    }
    pnm::write_pnm(&args.out, &model_to_pixels(&strip))?;
    Ok(())
}

fn run_sanity() -> Result<bool> {
    let mut ok = true;
    for c in sanity::run_all() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn write_split(dir: &Path, name: &str, images: &[Tensor], labels: Option<&[u8]>, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Idx => {
            let (_, _, h, w) = match images.first() {
                Some(img) => img.nchw()?,
                None => (1, 1, 32, 32),
            };
            let path = dir.join(format!("{name}-images.idx"));
            fs::write(&path, idx::encode_idx_images(images, h, w)?)
                .with_context(|| format!("writing {}", path.display()))?;
            if let Some(labels) = labels {
                let path = dir.join(format!("{name}-labels.idx"));
                fs::write(&path, idx::encode_idx_labels(labels))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        DataFormat::Pgm => {
            let sub = dir.join(name);
            fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
            for (i, img) in images.iter().enumerate() {
                pnm::write_pnm(&sub.join(format!("{i:05}.pgm")), img)?;
            }
        }
    }
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    match args.kind {
        DataKind::Sprites => {
            let d = sprites(&SpriteSpec::default(), args.n, args.seed);
            write_split(&args.out, "train", &d.train, None, args.format)?;
            write_split(&args.out, "test", &d.test, None, args.format)?;
        }
        DataKind::Digits => {
            let (images, labels) = digits(args.n, args.seed);
            let cut = args.n * 9 / 10;
            write_split(&args.out, "train", &images[..cut], Some(&labels[..cut]), args.format)?;
            write_split(&args.out, "test", &images[cut..], Some(&labels[cut..]), args.format)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Degrade(a) => degrade(a),
        Command::Restore(a) => restore_cmd(a),
        Command::EvalPsnr { a, b } => eval_psnr(&a, &b),
        Command::Sample(a) => sample(a),
        Command::Sanity => match run_sanity() {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
