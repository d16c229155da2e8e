//! The `mambamir` command line: dataset generation, degradation, training,
//! reconstruction, uncertainty maps, evaluation and image export.
//!
//! Exit status is 0 on success, 1 on a usage problem (bad flags, missing
//! files) and 2 when the inputs are readable but wrong.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mambamir::imaging::ct::CtGeometry;
use mambamir::imaging::phantom::{make_phantom, PhantomKind};
use mambamir::imaging::{self, mri};
use mambamir::io::{checkpoint, pgm, tensor_file};
use mambamir::metrics::compute_metrics;
use mambamir::net::ModelParams;
use mambamir::train::{self, files, Dataset, Sample, TrainConfig};
use mambamir::uncertainty::{mc_uncertainty, DEFAULT_PASSES};
use mambamir::{rng, Tensor};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const EXT: &str = "mmir";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn data_err(context: impl Display, e: impl Display) -> CliError {
    CliError::Data(format!("{context}: {e}"))
}

/// Missing files are usage errors; anything else went wrong with the data.
fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let msg = format!("{}: {e}", path.display());
    if e.kind() == std::io::ErrorKind::NotFound {
        CliError::Usage(msg)
    } else {
        CliError::Data(msg)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mambamir", version, about = "Masked state-space reconstruction for MRI and sparse-view CT")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write ground-truth phantoms as `[size, size]` tensors.
    Phantom {
        #[arg(long, default_value = "random-ellipses")]
        kind: PhantomKind,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade phantoms into `x`, `xu` and `y` subdirectories.
    #[command(subcommand)]
    Simulate(Simulate),
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output of `simulate`; without it the data is generated from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Reconstruct a tensor file or a directory of them.
    Reconstruct {
        #[command(flatten)]
        io: ModelIo,
        /// Keep scan masking active at inference.
        #[arg(long)]
        eval_mask: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pixelwise mean and standard deviation over masked passes.
    Uncertainty {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long, default_value_t = DEFAULT_PASSES)]
        passes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PSNR and SSIM of predictions against references matched by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export a tensor as an 8-bit binary graymap.
    ExportPgm {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ModelIo {
    /// Checkpoint directory, or a training output directory (uses `best`).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Simulate {
    /// Cartesian undersampling of the image's k-space.
    Mri {
        #[arg(long, default_value_t = 8)]
        af: usize,
        #[arg(long, default_value_t = 0.04)]
        acs: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Sparse-view fan-beam projection and FBP.
    Ct {
        #[arg(long, default_value_t = 60)]
        views: usize,
        #[arg(long, default_value_t = 96)]
        detectors: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status. Messages go to standard error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Phantom { kind, count, size, seed, out } => phantom(kind, count, size, seed, &out),
        Cmd::Simulate(s) => simulate(s),
        Cmd::Train { config, out, data } => train_cmd(&config, &out, data.as_deref()),
        Cmd::Reconstruct { io, eval_mask, seed } => reconstruct(&io, eval_mask, seed),
        Cmd::Uncertainty { io, passes, seed } => uncertainty(&io, passes, seed),
        Cmd::Eval { pred, reference, report } => eval(&pred, &reference, &report),
        Cmd::ExportPgm { input, out } => {
            let t = read(&input)?;
            pgm::write_pgm(&out, &t).map_err(|e| io_err(&out, e))
        }
    }
}

fn read(path: &Path) -> Result<Tensor<f32>> {
    tensor_file::read_tensor(path).map_err(|e| match e {
        tensor_file::FormatError::Io(io) => io_err(path, io),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

fn write(path: &Path, t: &Tensor<f32>) -> Result<()> {
    tensor_file::write_tensor(path, t).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// `(stem, path)` of a single tensor file, or of every tensor file in a
/// directory sorted by name.
fn inputs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let meta = std::fs::metadata(path).map_err(|e| io_err(path, e))?;
    if meta.is_file() {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        return Ok(vec![(stem, path.to_path_buf())]);
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| io_err(path, e))? {
        let p = entry.map_err(|e| io_err(path, e))?.path();
        if p.extension().is_some_and(|x| x == EXT) {
            out.push((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("{}: no .{EXT} files", path.display())));
    }
    Ok(out)
}

fn file_name(stem: &str) -> String {
    format!("{stem}.{EXT}")
}

fn phantom(kind: PhantomKind, count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if size < 16 {
        return Err(CliError::Usage(format!("--size must be at least 16, got {size}")));
    }
    mkdir(out)?;
    for i in 0..count {
        let img = make_phantom::<f64>(kind, size, size, train::phantom_seed(seed, 0, i as u64)).image;
        write(&out.join(file_name(&format!("phantom_{i:04}"))), &imaging::normalize_max(&img).cast())?;
    }
    println!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

/// A real `[h, w]` (or `[h, w, 1]`) image.
fn real_image(path: &Path) -> Result<Tensor<f64>> {
    let t = read(path)?;
    let (h, w) = match t.shape() {
        [h, w] | [h, w, 1] => (*h, *w),
        s => return Err(CliError::Data(format!("{}: expected a real [h, w] image, got {s:?}", path.display()))),
    };
    t.cast::<f64>().reshape(&[h, w]).map_err(|e| data_err(path.display(), e))
}

fn simulate(cmd: Simulate) -> Result<()> {
    let common = match &cmd {
        Simulate::Mri { common, .. } | Simulate::Ct { common, .. } => common,
    };
    if !(common.sigma >= 0.0 && common.sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma must be a nonnegative number, got {}", common.sigma)));
    }
    let items = inputs(&common.input)?;
    let dirs = ["x", "xu", "y"].map(|d| common.out.join(d));
    for d in &dirs {
        mkdir(d)?;
    }
    let mut mask: Option<mri::MriSamplingSpec> = None;
    for (i, (stem, path)) in items.iter().enumerate() {
        let img = real_image(path)?;
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let noise_seed = rng::stream_id(&[common.seed, rng::domain::NOISE, i as u64]);
        let sim = match &cmd {
            Simulate::Mri { af, acs, .. } => {
                if mask.as_ref().is_none_or(|m| m.width() != w) {
                    let m = mri::make_cartesian_mask(w, *af, *acs, common.seed).map_err(|e| CliError::Usage(e.to_string()))?;
                    let flags = m.mask.iter().map(|&b| b as u8 as f32).collect();
                    write(&common.out.join(file_name("mask")), &Tensor::new(&[w], flags).expect("w flags"))?;
                    mask = Some(m);
                }
                imaging::simulate_mri(&img, mask.as_ref().expect("set above"), common.sigma, noise_seed)
            }
            Simulate::Ct { views, detectors, .. } => {
                if h != w {
                    return Err(CliError::Data(format!("{}: CT needs a square image, got {h}x{w}", path.display())));
                }
                let s = w as f64;
                let geom = CtGeometry::covering(w, *views, *detectors, 2.0 * s, 4.0 * s, 1.0);
                geom.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                imaging::simulate_ct(&img, &geom, common.sigma, noise_seed)
            }
        }
        .map_err(|e| data_err(path.display(), e))?;
        for (dir, t) in dirs.iter().zip([&sim.x, &sim.x_u, &sim.y]) {
            write(&dir.join(file_name(stem)), &t.cast())?;
        }
    }
    println!("simulated {} images into {}", items.len(), common.out.display());
    Ok(())
}

/// Pairs `x/NAME` with `xu/NAME`; the last eighth (at least one item) is
/// held out for validation unless there is only one item.
fn load_simulated(dir: &Path, cfg: &TrainConfig) -> Result<Dataset> {
    let c = cfg.modality.channels();
    let mut samples = Vec::new();
    for (stem, xu_path) in inputs(&dir.join("xu"))? {
        let input = read(&xu_path)?;
        let target = read(&dir.join("x").join(file_name(&stem)))?;
        match input.shape() {
            [h, w, ch] if h == w && *ch == c && target.shape() == input.shape() => {}
            s => {
                return Err(CliError::Data(format!(
                    "{stem}: expected matching square [n, n, {c}] pairs for {:?}, got {s:?} and {:?}",
                    cfg.modality,
                    target.shape()
                )))
            }
        }
        samples.push(Sample { target, input });
    }
    let size = samples[0].input.shape()[0];
    if samples.iter().any(|s| s.input.shape()[0] != size) {
        return Err(CliError::Data("all images must have the same size".into()));
    }
    if samples.len() == 1 {
        return Ok(Dataset {
            train: samples.clone(),
            val: samples,
        });
    }
    let n_val = (samples.len() / 8).max(1);
    let val = samples.split_off(samples.len() - n_val);
    Ok(Dataset { train: samples, val })
}

fn train_cmd(config: &Path, out: &Path, data: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config).map_err(|e| io_err(config, e))?;
    let mut cfg = TrainConfig::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", config.display())))?;
    let dataset = match data {
        Some(dir) => {
            let d = load_simulated(dir, &cfg)?;
            cfg.data.image_size = d.train[0].input.shape()[0];
            cfg.data.train_count = d.train.len();
            cfg.data.val_count = d.val.len();
            cfg.validate().map_err(CliError::Data)?;
            d
        }
        None => train::build_dataset(&cfg).map_err(|e| CliError::Data(e.to_string()))?,
    };
    mkdir(out)?;
    let outcome = train::train_on(&cfg, &dataset, Some(out)).map_err(|e| CliError::Data(e.to_string()))?;
    let last = outcome.rows.last().expect("step 0 is always logged");
    println!(
        "trained {} steps: loss {:.4}, validation psnr {:.2} dB (best {:.2}), checkpoints in {}",
        cfg.steps,
        last.loss,
        last.psnr,
        outcome.best_psnr,
        out.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<ModelParams<f32>> {
    let dir = if !ckpt.join(checkpoint::MANIFEST).exists() && ckpt.join(files::BEST).join(checkpoint::MANIFEST).exists() {
        ckpt.join(files::BEST)
    } else {
        ckpt.to_path_buf()
    };
    checkpoint::load_checkpoint(&dir).map_err(|e| match e {
        checkpoint::CheckpointError::Io(io) => io_err(&dir.join(checkpoint::MANIFEST), io),
        other => CliError::Data(format!("{}: {other}", dir.display())),
    })
}

/// Reads a network input as `[h, w, c]`.
fn model_input(path: &Path, model: &ModelParams<f32>) -> Result<Tensor<f32>> {
    let t = read(path)?;
    let c = model.cfg.in_channels;
    let shape = match t.shape() {
        [h, w] if c == 1 => [*h, *w, 1],
        [h, w, ch] if *ch == c => [*h, *w, c],
        s => return Err(CliError::Data(format!("{}: model takes [h, w, {c}], got {s:?}", path.display()))),
    };
    t.reshape(&shape).map_err(|e| data_err(path.display(), e))
}

/// Output path for `stem`: `out` itself when the input was one file.
fn output_for(io: &ModelIo, stem: &str, single: bool) -> Result<PathBuf> {
    if single && io.input.is_file() {
        if let Some(parent) = io.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            mkdir(parent)?;
        }
        Ok(io.out.clone())
    } else {
        mkdir(&io.out)?;
        Ok(io.out.join(file_name(stem)))
    }
}

fn reconstruct(io: &ModelIo, eval_mask: bool, seed: u64) -> Result<()> {
    let model = load_model(&io.ckpt)?;
    let items = inputs(&io.input)?;
    let xs = items.iter().map(|(_, p)| model_input(p, &model)).collect::<Result<Vec<_>>>()?;
    let ys = train::reconstruct_all(&model, &xs, eval_mask, seed).map_err(|e| CliError::Data(e.to_string()))?;
    for ((stem, _), y) in items.iter().zip(&ys) {
        write(&output_for(io, stem, items.len() == 1)?, y)?;
    }
    println!("reconstructed {} images", ys.len());
    Ok(())
}

fn uncertainty(io: &ModelIo, passes: usize, seed: u64) -> Result<()> {
    if passes == 0 {
        return Err(CliError::Usage("--passes must be at least 1".into()));
    }
    let model = load_model(&io.ckpt)?;
    let items = inputs(&io.input)?;
    mkdir(&io.out)?;
    for (stem, path) in &items {
        let x = model_input(path, &model)?;
        let map = mc_uncertainty(&x, &model, passes, seed, true).map_err(|e| data_err(path.display(), e))?;
        write(&io.out.join(file_name(&format!("{stem}_mean"))), &map.mean)?;
        write(&io.out.join(file_name(&format!("{stem}_std"))), &map.std)?;
    }
    println!("wrote mean and std maps for {} images ({passes} passes)", items.len());
    Ok(())
}

fn eval(pred: &Path, reference: &Path, report: &Path) -> Result<()> {
    let refs = inputs(reference)?;
    let single = refs.len() == 1 && reference.is_file();
    let mut rows = Vec::new();
    for (stem, rpath) in &refs {
        let ppath = if single && pred.is_file() { pred.to_path_buf() } else { pred.join(file_name(stem)) };
        let (p, r) = (read(&ppath)?, read(rpath)?);
        let m = compute_metrics(&p, &r).map_err(|e| data_err(stem, e))?;
        rows.push((stem.clone(), m.per_image[0]));
    }
    let summary = mambamir::metrics::MetricsReport::from_pairs(rows.iter().map(|r| r.1).collect());
    let mut csv = String::from("name,psnr,ssim\n");
    for (stem, (p, s)) in &rows {
        csv.push_str(&format!("{stem},{p},{s}\n"));
    }
    csv.push_str(&format!("mean,{},{}\n", summary.psnr_mean, summary.ssim_mean));
    csv.push_str(&format!("std,{},{}\n", summary.psnr_std, summary.ssim_std));
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    std::fs::write(report, csv).map_err(|e| io_err(report, e))?;
    println!(
        "{} images: psnr {:.2} +/- {:.2} dB, ssim {:.4} +/- {:.4}",
        rows.len(),
        summary.psnr_mean,
        summary.psnr_std,
        summary.ssim_mean,
        summary.ssim_std
    );
    Ok(())
}
