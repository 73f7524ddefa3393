//! `rspu gen-data | train | derain | eval | gradcheck`.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 failed check. Every
//! failure prints one `error: ...` line to standard error.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rspu_core::data::{gen_scenes, RainParams, RainPreset};
use rspu_core::train::Trainer;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, Preset};
use crate::evaluation::{self, TABLE_HEADER};
use crate::{dataset, gradcheck, history, parallel, ppm, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rspu", version, about = "Rain-streak prototype de-raining toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic time-lapse scenes and a manifest
    GenData(GenDataArgs),
    /// Train a de-raining model on a scene directory
    Train(Box<TrainArgs>),
    /// De-rain one PPM image
    Derain(DerainArgs),
    /// Tabulate PSNR/SSIM against the scene backgrounds
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: usize,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub size: usize,
    #[arg(long)]
    pub seed: u64,
    /// light, medium or heavy
    #[arg(long, default_value = "medium")]
    pub rain_preset: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path, rewritten at every checkpoint interval and at the end
    #[arg(long)]
    pub out: PathBuf,
    /// desk or paper
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Flat `key = value` file applied over the preset
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint, keeping its configuration
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Loss log; defaults to `<out>.history.tsv`
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub rspu_channels: Option<usize>,
    #[arg(long)]
    pub prototype_count: Option<usize>,
    /// bottleneck or full_res
    #[arg(long)]
    pub placement: Option<String>,
    #[arg(long)]
    pub model_seed: Option<u64>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        fn opt<T: ToString>(key: &'static str, v: &Option<T>) -> Option<(&'static str, String)> {
            v.as_ref().map(|v| (key, v.to_string()))
        }
        [
            opt("steps", &self.steps),
            opt("seed", &self.seed),
            opt("learning_rate", &self.learning_rate),
            opt("batch_size", &self.batch_size),
            opt("checkpoint_every", &self.checkpoint_every),
            opt("log_every", &self.log_every),
            opt("lambda_a", &self.lambda_a),
            opt("delta", &self.delta),
            opt("lambda_c", &self.lambda_c),
            opt("lambda_s", &self.lambda_s),
            opt("lambda_f", &self.lambda_f),
            opt("base_channels", &self.base_channels),
            opt("depth", &self.depth),
            opt("rspu_channels", &self.rspu_channels),
            opt("prototype_count", &self.prototype_count),
            opt("placement", &self.placement),
            opt("model_seed", &self.model_seed),
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_clean: PathBuf,
    #[arg(long)]
    pub out_rain: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated even spatial extents for image-shaped inputs
    #[arg(long, default_value = "4,6")]
    pub sizes: String,
    /// Perturb the analytic gradient of the named check
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut impl Write) -> CliResult<()> {
    match command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train(&a, out),
        Command::Derain(a) => derain(&a, out),
        Command::Eval(a) => eval(&a, out),
        Command::Gradcheck(a) => run_gradcheck(&a, out),
    }
}

fn emit(out: &mut impl Write, line: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{line}").map_err(CliError::io("<stdout>"))
}

fn gen_data(a: &GenDataArgs, out: &mut impl Write) -> CliResult<()> {
    if a.frames < 2 {
        return Err(CliError::Usage(format!("--frames must be at least 2, got {}", a.frames)));
    }
    if a.scenes == 0 || a.size == 0 {
        return Err(CliError::Usage("--scenes and --size must be positive".into()));
    }
    let preset = RainPreset::parse(&a.rain_preset)
        .ok_or_else(|| CliError::Usage(format!("unknown rain preset {:?}", a.rain_preset)))?;
    let scenes = gen_scenes(a.seed, a.scenes, a.size, a.frames, &RainParams::preset(preset, a.size))?;
    dataset::write(&a.out, &scenes)?;
    emit(out, format_args!("wrote {} scenes to {}", scenes.len(), a.out.display()))
}

fn history_path(a: &TrainArgs) -> PathBuf {
    a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.tsv");
        PathBuf::from(p)
    })
}

/// Builds the trainer: preset, then config file, then flags; or the resumed
/// checkpoint with only `--steps` applied. Image size comes from the data.
fn prepare_trainer(a: &TrainArgs, height: usize, width: usize) -> CliResult<Trainer> {
    if let Some(path) = &a.resume {
        let ck = checkpoint::load(path)?;
        let mut cfg = ck.config;
        if let Some(s) = a.steps {
            cfg.steps = s;
        }
        if (cfg.model.height, cfg.model.width) != (height, width) {
            return Err(CliError::Data(format!(
                "checkpoint expects {}x{} images, data is {}x{}",
                cfg.model.height, cfg.model.width, height, width
            )));
        }
        return Ok(Trainer::resume(cfg, ck.model, ck.optimizer)?);
    }
    let preset = Preset::parse(&a.preset).ok_or_else(|| CliError::Usage(format!("unknown preset {:?}", a.preset)))?;
    let mut cfg = preset.config();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        config::apply_text(&mut cfg, &text)?;
    }
    for (k, v) in a.overrides() {
        config::set(&mut cfg, k, &v)?;
    }
    cfg.model.height = height;
    cfg.model.width = width;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Trainer::new(cfg)?)
}

fn save(trainer: &Trainer, path: &Path) -> CliResult<()> {
    checkpoint::save(
        path,
        &Checkpoint {
            config: trainer.config,
            model: trainer.model.clone(),
            optimizer: trainer.optimizer.clone(),
        },
    )
}

fn train(a: &TrainArgs, out: &mut impl Write) -> CliResult<()> {
    let threads = parallel::thread_count()?;
    let scenes = dataset::read(&a.data)?;
    let [height, width, _] = scenes[0].background.shape();
    let data = dataset::training_set(&scenes)?;
    let mut trainer = prepare_trainer(a, height, width)?;

    let log_path = history_path(a);
    let resuming = a.resume.is_some() && trainer.step_count() > 0;
    let mut log = if resuming {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(CliError::io(&log_path))?;
    if !resuming {
        writeln!(log, "{}", history::HEADER).map_err(CliError::io(&log_path))?;
    }

    let cfg = trainer.config;
    let mut last = None;
    while trainer.step_count() < cfg.steps {
        let report = trainer.step_with(&data, |model, pairs, loss| {
            parallel::evaluate_pairs(model, &data, pairs, loss, threads)
        })?;
        let step = trainer.step_count();
        if step % cfg.log_every == 0 || step == cfg.steps {
            writeln!(log, "{}", history::line(step, &report)).map_err(CliError::io(&log_path))?;
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(&trainer, &a.out)?;
        }
        last = Some(report);
    }
    save(&trainer, &a.out)?;
    match last {
        Some(r) => emit(out, format_args!("step {}\ttotal {}", trainer.step_count(), r.total)),
        None => emit(out, format_args!("step {}\tno steps run", trainer.step_count())),
    }
}

fn derain(a: &DerainArgs, out: &mut impl Write) -> CliResult<()> {
    let ck = checkpoint::load(&a.ckpt)?;
    let input = ppm::read(&a.input)?;
    let (clean, rain) = evaluation::derain_image(&ck.model, &input)?;
    let (vis, lo, hi) = evaluation::rain_visualization(&rain);
    ppm::write(&a.out_clean, &clean, None)?;
    let note = format!("rain estimate remapped affinely to [0,1]: v = (r - {lo:?}) / ({hi:?} - {lo:?})");
    ppm::write(&a.out_rain, &vis, Some(&note))?;
    emit(out, format_args!("wrote {} and {}", a.out_clean.display(), a.out_rain.display()))
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> CliResult<()> {
    let ck = checkpoint::load(&a.ckpt)?;
    let scenes = dataset::read(&a.data)?;
    let rows = evaluation::evaluate(&ck.model, &scenes)?;
    emit(out, TABLE_HEADER)?;
    for r in &rows {
        emit(out, evaluation::table_row(r))?;
    }
    Ok(())
}

fn parse_sizes(spec: &str) -> CliResult<Vec<usize>> {
    let sizes: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--sizes: expected comma-separated integers, got {spec:?}")))?;
    if sizes.is_empty() || sizes.iter().any(|&s| s < 2 || s % 2 != 0 || s > 16) {
        return Err(CliError::Usage("--sizes entries must be even and between 2 and 16".into()));
    }
    Ok(sizes)
}

fn run_gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> CliResult<()> {
    let opts = gradcheck::Options {
        seed: a.seed,
        sizes: parse_sizes(&a.sizes)?,
        corrupt: a.corrupt.clone(),
    };
    if let Some(name) = &opts.corrupt {
        if !gradcheck::check_names().contains(&name.as_str()) {
            return Err(CliError::Usage(format!("unknown check {name:?}")));
        }
    }
    let outcomes = gradcheck::run(&opts)?;
    emit(out, "check\tkind\tmax_rel_error\ttolerance\tresult")?;
    for o in &outcomes {
        let kind = match o.kind {
            gradcheck::Kind::Elementary => "elementary",
            gradcheck::Kind::Composite => "composite",
        };
        let verdict = if o.passed() { "PASS" } else { "FAIL" };
        emit(out, format_args!("{}\t{kind}\t{:.3e}\t{:.0e}\t{verdict}", o.name, o.max_error, o.kind.tolerance()))?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed: {}", failed.join(", "))))
    }
}
