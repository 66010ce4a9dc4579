//! `relief`: train relief-shading networks and render elevation models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 numeric failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relief_core::baseline::{aerial_perspective, diffuse_shade, LightVector};
use relief_core::inference::{shade, shade_whole, ShadeOptions};
use relief_core::metrics::{mse, ssim, SsimParams};
use relief_core::raster_io::{
    read_ascii_grid, read_gray_image, write_ascii_grid, write_gray_image, DemGrid, GrayImage,
    ImageFormat,
};
use relief_core::rng::seeded;
use relief_core::terrain::{normalize, synth_terrain, SynthSpec};
use relief_core::training::{TrainHyper, TrainState, TrainingPair, VerticalShift};
use relief_core::unet::{UNetConfig, UNetModel};
use relief_core::ReliefError;

#[derive(Parser)]
#[command(
    name = "relief",
    version,
    about = "Neural relief shading for elevation models"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "RELIEF_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fractal DEM as an ASCII grid.
    Synth(SynthArgs),
    /// Train a network on DEM/shading pairs.
    Train(TrainArgs),
    /// Shade a DEM with a trained network.
    Shade(ShadeArgs),
    /// Lambertian diffuse shading.
    Diffuse(DiffuseArgs),
    /// Compare two grayscale images.
    Eval(EvalArgs),
    /// Print a model's configuration and provenance.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    rows: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    cols: u64,
    #[arg(long, default_value_t = 30.0)]
    cell_size: f64,
    #[arg(long, default_value_t = 0.5)]
    roughness: f64,
    #[arg(long, default_value_t = 0.0)]
    flat_fraction: f64,
    /// Lowest elevation, meters.
    #[arg(long, default_value_t = 200.0)]
    base: f64,
    /// Elevation range, meters.
    #[arg(long, default_value_t = 1000.0)]
    amplitude: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// DEM of a training pair; give one --shading per --dem, in order.
    #[arg(long, required = true)]
    dem: Vec<PathBuf>,
    #[arg(long, required = true)]
    shading: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    tile_size: usize,
    #[arg(long, default_value_t = 50)]
    crop: usize,
    #[arg(long, default_value_t = 5)]
    levels: usize,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    dropout: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    epochs: u64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 25)]
    shift_period: u64,
    /// Synthetic flat tiles added to every epoch.
    #[arg(long, default_value_t = 0)]
    flat_tiles: usize,
    /// Grey of flat tiles (default: mean shading over near-flat cells).
    #[arg(long)]
    flat_tone: Option<f64>,
    /// Share of near-flat tiles duplicated with a vertical offset.
    #[arg(long, default_value_t = 0.0)]
    vshift_frac: f64,
    /// Largest vertical offset, meters.
    #[arg(long, default_value_t = 100.0)]
    vshift_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `<out>.ckpt` every this many epochs (0: never).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from a checkpoint; architecture flags are then taken from it.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss log path (default `<out>.loss.tsv`).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShadeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dem: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rotation: f64,
    #[arg(long, default_value_t = 0.0)]
    kmin: f64,
    #[arg(long, default_value_t = 1.0)]
    kmax: f64,
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    #[arg(long, default_value_t = 20)]
    blend: usize,
    /// One network pass over the whole raster instead of tiles.
    #[arg(long)]
    whole: bool,
    /// Elevation range `MIN,MAX` in meters mapped onto [kmin, kmax].
    #[arg(
        long,
        value_delimiter = ',',
        num_args = 2,
        allow_negative_numbers = true
    )]
    norm_range: Option<Vec<f64>>,
    /// Memory ceiling for --whole, MiB.
    #[arg(long, default_value_t = 2048)]
    memory_mb: u64,
    #[arg(long)]
    out: PathBuf,
    /// pgm or png (default: from the output extension).
    #[arg(long)]
    format: Option<ImageFormat>,
}

#[derive(Args)]
struct DiffuseArgs {
    #[arg(long)]
    dem: PathBuf,
    #[arg(long, default_value_t = 315.0, allow_negative_numbers = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 45.0)]
    altitude: f64,
    #[arg(long, default_value_t = 1.0)]
    exaggeration: f64,
    #[arg(long, default_value_t = 0.0)]
    aerial_strength: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    format: Option<ImageFormat>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 8)]
    ssim_window: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<ReliefError> for Failure {
    fn from(e: ReliefError) -> Self {
        let code = match e {
            ReliefError::InvalidArgument(_) => 1,
            ReliefError::NonFinite(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn with_path(path: &Path) -> impl Fn(ReliefError) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

fn read_dem(path: &Path) -> Result<DemGrid, Failure> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_ascii_grid(BufReader::new(f)).map_err(with_path(path))
}

fn read_image(path: &Path) -> Result<GrayImage, Failure> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_gray_image(BufReader::new(f)).map_err(with_path(path))
}

fn read_model(path: &Path) -> Result<UNetModel, Failure> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    UNetModel::load(BufReader::new(f)).map_err(with_path(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn finish_file(path: &Path, mut w: BufWriter<File>) -> Result<(), Failure> {
    w.flush().map_err(|e| io_err(path, e))
}

fn image_format(explicit: Option<ImageFormat>, out: &Path) -> ImageFormat {
    explicit.unwrap_or_else(|| match out.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => ImageFormat::Png,
        _ => ImageFormat::Pgm,
    })
}

fn write_image(img: &GrayImage, out: &Path, format: Option<ImageFormat>) -> Result<(), Failure> {
    let mut w = create(out)?;
    write_gray_image(img, &mut w, image_format(format, out)).map_err(with_path(out))?;
    finish_file(out, w)
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        base_m: a.base,
        amplitude_m: a.amplitude,
        roughness: a.roughness,
        flat_fraction: a.flat_fraction,
        cell_size: a.cell_size,
    };
    let dem = synth_terrain(a.seed, a.rows as usize, a.cols as usize, &spec)?;
    let mut w = create(&a.out)?;
    write_ascii_grid(&dem, &mut w).map_err(with_path(&a.out))?;
    finish_file(&a.out, w)?;
    let (lo, hi) = dem.valid_range().unwrap_or((f64::NAN, f64::NAN));
    println!("rows={}", dem.rows);
    println!("cols={}", dem.cols);
    println!("min={lo}");
    println!("max={hi}");
    println!("cell_size={}", dem.cell_size);
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_loss_log(path: &Path, history: &[f64]) -> Result<(), Failure> {
    let mut w = create(path)?;
    for (i, l) in history.iter().enumerate() {
        writeln!(w, "{}\t{l}", i + 1).map_err(|e| io_err(path, e))?;
    }
    finish_file(path, w)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    if a.dem.len() != a.shading.len() {
        return Err(usage(format!(
            "{} --dem but {} --shading; give them in pairs",
            a.dem.len(),
            a.shading.len()
        )));
    }
    let mut pairs = Vec::with_capacity(a.dem.len());
    for (i, (d, s)) in a.dem.iter().zip(&a.shading).enumerate() {
        let dem = read_dem(d)?;
        let shading = read_image(s)?;
        let pair = TrainingPair::new(dem, shading).map_err(|e| Failure {
            code: 2,
            message: format!("pair {} ({} / {}): {e}", i + 1, d.display(), s.display()),
        })?;
        pairs.push(pair);
    }

    let mut state = match &a.resume {
        Some(p) => {
            let f = File::open(p).map_err(|e| io_err(p, e))?;
            TrainState::<f32>::resume(BufReader::new(f)).map_err(with_path(p))?
        }
        None => {
            let config = UNetConfig {
                levels: a.levels,
                base_channels: a.base_channels,
                dropout_rates: a.dropout.clone(),
                tile_size: a.tile_size,
                crop_border: a.crop,
            };
            TrainState::new(UNetModel::build(config, &mut seeded(a.seed))?)
        }
    };
    let hyper = TrainHyper {
        batch_size: a.batch,
        adam: relief_core::tensor::AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
        origin_shift_period: a.shift_period,
        flat_tiles: a.flat_tiles,
        flat_tone: a.flat_tone,
        vertical_shift: (a.vshift_frac > 0.0).then_some(VerticalShift {
            fraction: a.vshift_frac,
            max_offset_m: a.vshift_max,
            slope_threshold_deg: relief_core::terrain::DEFAULT_FLAT_SLOPE_DEG,
        }),
        seed: a.seed,
        ..Default::default()
    };
    hyper.validate()?;

    let c = state.model.config().clone();
    println!("batch={}", hyper.batch_size);
    println!("lr={}", hyper.adam.lr);
    println!("beta1={}", hyper.adam.beta1);
    println!("beta2={}", hyper.adam.beta2);
    println!("eps={:e}", hyper.adam.eps);
    println!("shift_period={}", hyper.origin_shift_period);
    println!("epochs={}", a.epochs);
    println!("start_epoch={}", state.epoch);
    println!("levels={}", c.levels);
    println!("base_channels={}", c.base_channels);
    println!("tile_size={}", c.tile_size);
    println!("crop={}", c.crop_border);
    println!("parameters={}", state.model.param_count());
    println!("seed={}", a.seed);

    let ckpt_path = sibling(&a.out, ".ckpt");
    let step = if a.checkpoint_every == 0 {
        a.epochs.max(1)
    } else {
        a.checkpoint_every
    };
    while state.epoch < a.epochs {
        let target = ((state.epoch / step) + 1) * step;
        let target = target.min(a.epochs);
        state.run_until(&pairs, &hyper, target, |r| {
            eprintln!(
                "epoch {} loss {:.6} tiles {} origin {:?}",
                r.epoch, r.loss, r.tiles, r.origin
            );
        })?;
        if a.checkpoint_every > 0 {
            let mut w = create(&ckpt_path)?;
            state.checkpoint(&mut w).map_err(with_path(&ckpt_path))?;
            finish_file(&ckpt_path, w)?;
        }
    }

    let mut w = create(&a.out)?;
    state.model.save(&mut w).map_err(with_path(&a.out))?;
    finish_file(&a.out, w)?;
    let log = a
        .loss_log
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".loss.tsv"));
    write_loss_log(&log, &state.history)?;
    if let Some(l) = state.history.last() {
        println!("final_loss={l}");
    }
    Ok(())
}

fn cmd_shade(a: ShadeArgs) -> Result<(), Failure> {
    let model = read_model(&a.model)?;
    let dem = read_dem(&a.dem)?;
    let norm_range = a.norm_range.as_ref().map(|v| (v[0], v[1]));
    let options = ShadeOptions {
        rotation_deg: a.rotation,
        k_min: a.kmin,
        k_max: a.kmax,
        downsample_factor: a.downsample,
        norm_range,
        blend_width: a.blend,
        memory_budget: a.memory_mb.saturating_mul(1 << 20),
    };
    let out = if a.whole {
        shade_whole(&model, &dem, &options)?
    } else {
        shade(&model, &dem, &options)?
    };
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    write_image(&out.image, &a.out, a.format)?;
    let secs = out.elapsed.as_secs_f64();
    println!("tiles={}", out.tiles);
    println!("rows={}", out.image.rows);
    println!("cols={}", out.image.cols);
    println!("elapsed_s={secs:.3}");
    Ok(())
}

fn cmd_diffuse(a: DiffuseArgs) -> Result<(), Failure> {
    let dem = read_dem(&a.dem)?;
    let light = LightVector::new(a.azimuth, a.altitude)?;
    if light.azimuth_deg != a.azimuth {
        eprintln!(
            "note: azimuth {} normalized to {}",
            a.azimuth, light.azimuth_deg
        );
    }
    let mut img = diffuse_shade(&dem, &light, a.exaggeration)?;
    if a.aerial_strength > 0.0 {
        let field = normalize(&dem, 0.0, 1.0, None)?;
        img = aerial_perspective(&img, &field, a.aerial_strength)?;
    }
    write_image(&img, &a.out, a.format)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let x = read_image(&a.a)?;
    let y = read_image(&a.b)?;
    let params = SsimParams {
        window: a.ssim_window,
        ..Default::default()
    };
    let m = mse(&x, &y)?;
    let s = ssim(&x, &y, params)?;
    println!("mse={m}");
    println!("ssim={s}");
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Failure> {
    let m = read_model(&a.model)?;
    let c = m.config();
    let rates: Vec<String> = c.dropout_rates.iter().map(|r| r.to_string()).collect();
    println!("levels={}", c.levels);
    println!("base_channels={}", c.base_channels);
    println!("dropout={}", rates.join(","));
    println!("tile_size={}", c.tile_size);
    println!("crop_border={}", c.crop_border);
    println!("out_side={}", c.out_side());
    println!("parameter_count={}", m.param_count());
    println!("norm_min={}", opt(m.meta.norm_min));
    println!("norm_max={}", opt(m.meta.norm_max));
    println!("cell_size={}", opt(m.meta.cell_size));
    println!("epochs={}", m.meta.epochs);
    println!("seed={}", m.meta.seed);
    Ok(())
}

fn set_threads(n: Option<usize>) -> Result<(), Failure> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("thread pool: {e}")))?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    set_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Shade(a) => cmd_shade(a),
        Command::Diffuse(a) => cmd_diffuse(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
