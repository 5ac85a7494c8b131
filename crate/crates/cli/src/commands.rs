use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lka_core::analysis::{erf_area_ratio, erf_map, export_erf, param_report, ERF_THRESHOLDS};
use lka_core::backbone::{build_model, Model};
use lka_core::config::{load_run_data, run_experiment, split_run_data, RunConfig};
use lka_core::harness::{evaluate, gen_longrange, load_checkpoint, save_checkpoint, save_dataset};
use lka_core::Error;

/// Large-kernel adapter toolkit: training, evaluation and analysis of
/// adapter-tuned vision transformers on image classification data.
///
/// Output directories default to the value of LKA_OUT_DIR, or `lka-out`.
#[derive(Debug, Parser)]
#[command(name = "lka", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes model.lkck, metrics.csv and effective-config.txt.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Effective receptive field map and area ratios (erf.pgm, erf.csv).
    Erf(ErfArgs),
    /// Parameter report: enumeration against the closed form.
    Params(ParamsArgs),
    /// Train one model per (kernel, width, seed) cell; writes sweep.csv.
    Sweep(SweepArgs),
    /// Write a synthetic long-range dataset in LKDS format.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "LKA_OUT_DIR", default_value = "lka-out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// LKDS dataset to split 80/20 into train and test.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Use the generated long-range task.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// LKDS dataset scored in full; defaults to the test split of the
    /// checkpoint's own data configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ErfArgs {
    /// Trained checkpoint; without it a fresh model is built from --config.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Image side; must equal the model's input size.
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// LKDS file supplying the first N images; otherwise the synthetic task.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Kernel sizes; `none` is the vanilla adapter.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    kernel: Vec<String>,
    /// Bottleneck widths; defaults to the configured one.
    #[arg(long, value_delimiter = ',')]
    width: Vec<usize>,
    /// Number of seeds, counted up from the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Destination LKDS file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn resolve(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(io_error(dir, e)))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(io_error(path, e)))
}

fn echo_config(dir: &Path, text: &str) -> CliResult<()> {
    create_dir(dir)?;
    let path = dir.join("effective-config.txt");
    write_file(&path, text)?;
    eprintln!("effective config written to {}", path.display());
    Ok(())
}

fn model_from_checkpoint(path: &Path) -> CliResult<(RunConfig, Model)> {
    let ck = load_checkpoint(path)?;
    let cfg = RunConfig::from_text(&ck.config)?;
    let mut model = build_model(&cfg.model, cfg.train.seed)?;
    ck.restore(&mut model)?;
    Ok((cfg, model))
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Erf(a) => erf(a),
        Command::Params(a) => params(a),
        Command::Sweep(a) => sweep(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.config)?;
    if let Some(path) = a.data {
        cfg.data = Some(path);
    } else if a.synthetic {
        cfg.data = None;
    }
    let dir = a.out.out;
    echo_config(&dir, &cfg.to_text())?;
    let (train_ds, test_ds) = split_run_data(&cfg)?;
    let started = Instant::now();
    let outcome = run_experiment(&cfg, &train_ds, &test_ds)?;

    let mut csv = String::from("epoch,loss,train_top1\n");
    for e in &outcome.history.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
        eprintln!(
            "epoch {:>3}  loss {:.6}  train top-1 {:.4}",
            e.epoch, e.loss, e.accuracy
        );
    }
    write_file(&dir.join("metrics.csv"), &csv)?;
    let ckpt = dir.join("model.lkck");
    save_checkpoint(&outcome.model, &outcome.state, &cfg.to_text(), &ckpt)?;
    println!(
        "test top-1 = {} ({} train / {} test samples, {:.1}s)",
        outcome.test_top1,
        train_ds.len(),
        test_ds.len(),
        started.elapsed().as_secs_f64()
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult<()> {
    let (mut cfg, model) = model_from_checkpoint(&a.ckpt)?;
    let data = match &a.data {
        Some(path) => {
            cfg.data = Some(path.clone());
            load_run_data(&cfg)?
        }
        None => split_run_data(&cfg)?.1,
    };
    let mut echo = format!("# checkpoint = {}\n", a.ckpt.display());
    if a.data.is_none() {
        echo.push_str("# scored on the test split\n");
    }
    echo.push_str(&cfg.to_text());
    echo_config(&a.out.out, &echo)?;
    let acc = evaluate(&model, &data)?;
    println!("top-1 = {acc} on {} samples", data.len());
    let row = format!(
        "checkpoint,samples,top1\n{},{},{}\n",
        a.ckpt.display(),
        data.len(),
        acc
    );
    write_file(&a.out.out.join("eval.csv"), &row)?;
    print!("{row}");
    Ok(())
}

fn erf(a: ErfArgs) -> CliResult<()> {
    let (mut cfg, model) = match &a.ckpt {
        Some(path) => model_from_checkpoint(path)?,
        None => {
            let cfg = resolve(&a.config)?;
            let model = build_model(&cfg.model, cfg.train.seed)?;
            (cfg, model)
        }
    };
    if a.size != cfg.model.image_size {
        return Err(CliError::Usage(format!(
            "--size {} does not match the model input size {}",
            a.size, cfg.model.image_size
        )));
    }
    if a.images == 0 {
        return Err(CliError::Usage("--images must be positive".into()));
    }
    let data = match &a.data {
        Some(path) => {
            cfg.data = Some(path.clone());
            load_run_data(&cfg)?
        }
        None => {
            cfg.data = None;
            gen_longrange(cfg.data_seed, a.images, a.size, cfg.model.classes)?
        }
    };
    if data.len() < a.images {
        return Err(CliError::Usage(format!(
            "dataset holds {} images, {} requested",
            data.len(),
            a.images
        )));
    }
    let echo = format!(
        "# checkpoint = {}\n# size = {}\n# images = {}\n{}",
        a.ckpt
            .as_ref()
            .map_or("none".into(), |p| p.display().to_string()),
        a.size,
        a.images,
        cfg.to_text()
    );
    echo_config(&a.out.out, &echo)?;
    let idx: Vec<usize> = (0..a.images).collect();
    let map = erf_map(&model, &data.images(&idx))?;
    if map.degenerate {
        return Err(CliError::Runtime(Error::DegenerateErf));
    }
    let (pgm, csv) = export_erf(&map, &a.out.out)?;
    for t in ERF_THRESHOLDS {
        println!("area ratio at t={t}: {}", erf_area_ratio(&map, t)?);
    }
    println!("wrote {} and {}", pgm.display(), csv.display());
    Ok(())
}

fn params(a: ParamsArgs) -> CliResult<()> {
    let cfg = resolve(&a.config)?;
    echo_config(&a.out.out, &cfg.to_text())?;
    let model = build_model(&cfg.model, cfg.train.seed)?;
    println!("{}", param_report(&model));
    Ok(())
}

#[derive(Debug)]
struct Cell {
    kernel: Option<usize>,
    width: usize,
    seed: u64,
}

impl Cell {
    fn key(&self) -> String {
        let k = self.kernel.map_or("none".into(), |k| k.to_string());
        format!("k{k}_w{}_s{}", self.width, self.seed)
    }
}

const SWEEP_HEADER: &str =
    "kernel,width,seed,test_top1,final_train_top1,final_loss,trainable_params,total_params,runtime_s";

fn run_cell(
    base: &RunConfig,
    cell: &Cell,
    dir: &Path,
    data: &(lka_core::harness::Dataset, lka_core::harness::Dataset),
) -> CliResult<String> {
    let mut cfg = base.clone();
    cfg.model.kernel = cell.kernel;
    cfg.model.bottleneck = cell.width;
    cfg.train.seed = cell.seed;
    cfg.validate()?;
    let started = Instant::now();
    let out = run_experiment(&cfg, &data.0, &data.1)?;
    let runtime = started.elapsed().as_secs_f64();
    let report = param_report(&out.model);
    let last = out.history.epochs.last();
    let row = format!(
        "{},{},{},{},{},{},{},{},{}",
        cell.kernel.map_or("none".into(), |k| k.to_string()),
        cell.width,
        cell.seed,
        out.test_top1,
        last.map_or(f64::NAN, |e| e.accuracy),
        last.map_or(f64::NAN, |e| e.loss),
        report.trainable(),
        report.total(),
        runtime
    );
    write_file(
        &dir.join(format!("{}.csv", cell.key())),
        &format!("{SWEEP_HEADER}\n{row}\n"),
    )?;
    eprintln!(
        "{}: test top-1 {} ({runtime:.1}s)",
        cell.key(),
        out.test_top1
    );
    Ok(row)
}

fn sweep(a: SweepArgs) -> CliResult<()> {
    let base = resolve(&a.config)?;
    let kernels = a
        .kernel
        .iter()
        .map(|k| {
            if k.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                k.parse::<usize>()
                    .map(Some)
                    .map_err(|_| CliError::Usage(format!("bad kernel size {k:?}")))
            }
        })
        .collect::<CliResult<Vec<_>>>()?;
    let widths = if a.width.is_empty() {
        vec![base.model.bottleneck]
    } else {
        a.width.clone()
    };
    if a.seeds == 0 || a.jobs == 0 {
        return Err(CliError::Usage(
            "--seeds and --jobs must be positive".into(),
        ));
    }
    let mut cells = Vec::new();
    for &kernel in &kernels {
        for &width in &widths {
            for i in 0..a.seeds {
                cells.push(Cell {
                    kernel,
                    width,
                    seed: base.train.seed + i,
                });
            }
        }
    }
    for cell in &cells {
        let mut cfg = base.clone();
        cfg.model.kernel = cell.kernel;
        cfg.model.bottleneck = cell.width;
        cfg.validate()?;
    }

    let dir = a.out.out;
    let echo = format!(
        "# sweep kernels = {}\n# sweep widths = {}\n# sweep seeds = {}\n{}",
        a.kernel.join(","),
        widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(","),
        a.seeds,
        base.to_text()
    );
    echo_config(&dir, &echo)?;
    let cell_dir = dir.join("cells");
    create_dir(&cell_dir)?;
    let data = split_run_data(&base)?;

    let rows: Vec<String> = if a.jobs == 1 {
        cells
            .iter()
            .map(|c| run_cell(&base, c, &cell_dir, &data))
            .collect::<CliResult<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(a.jobs)
            .build()
            .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", a.jobs)))?;
        pool.install(|| {
            cells
                .par_iter()
                .map(|c| run_cell(&base, c, &cell_dir, &data))
                .collect::<CliResult<_>>()
        })?
    };

    let mut csv = format!("{SWEEP_HEADER}\n");
    for row in rows {
        csv.push_str(&row);
        csv.push('\n');
    }
    let path = dir.join("sweep.csv");
    write_file(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let ds = gen_longrange(a.seed, a.n, a.size, 4)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let echo = format!(
        "seed = {}\nn = {}\nsize = {}\nclasses = 4\n",
        a.seed, a.n, a.size
    );
    let mut echo_path = a.out.clone().into_os_string();
    echo_path.push(".effective-config.txt");
    write_file(Path::new(&echo_path), &echo)?;
    save_dataset(&ds, &a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}
