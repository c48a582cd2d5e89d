//! `thermal-nuc`: simulate microbolometer frame stacks, estimate their
//! non-uniformity and scene, and score the results.
//!
//! Every command that takes parameters accepts `--config <file>` (TOML, or
//! JSON when the extension is `.json`) whose keys are the snake_case names
//! echoed in the command's output. Flags override file values.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 solver failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use thermal_nuc::error::Error as CoreError;
use thermal_nuc::geometry::TransformKind;
use thermal_nuc::image::Image;
use thermal_nuc::io::{read_pfm, read_stack, write_json, write_pfm, write_pgm16, write_stack};
use thermal_nuc::sensor::{random_jitter, sample_nonuniformity, simulate_capture, FrameStack, NoiseConfig};
use thermal_nuc::solver::{estimate_jitter_stats, mse, psnr, psnr_value, solve, Method, SolveConfig};
use thermal_nuc::synth::{smooth_scene, textured_scene};

const THREADS_ENV: &str = "THERMAL_IR_THREADS";

#[derive(Parser)]
#[command(name = "thermal-nuc", version, about = "Thermal non-uniformity correction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a jittered, non-uniform, noisy frame stack from a scene.
    Simulate(SimulateArgs),
    /// Jointly estimate scene, gain, offset and transforms from a stack.
    Solve(SolveArgs),
    /// Like `solve`, reconstructing the scene at Q times the sensor resolution.
    Superres(SuperresArgs),
    /// Spatial and temporal fixed-pattern correlation of a flat-field stack.
    Stats(StatsArgs),
    /// PSNR and MSE of an estimate against a reference, as JSON on stdout.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene radiance map (PFM). Its size must be the sensor size times Q.
    #[arg(long, conflicts_with = "synthetic")]
    scene: Option<PathBuf>,
    /// Built-in scene instead of a file: `smooth` or `textured`.
    #[arg(long)]
    synthetic: Option<String>,
    /// Synthetic scene width in scene pixels.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Translation jitter bound in sensor pixels.
    #[arg(long)]
    jitter_px: Option<f64>,
    #[arg(long)]
    transform_kind: Option<String>,
    #[arg(long)]
    max_rotation_deg: Option<f64>,
    #[arg(long)]
    gain_col_sigma: Option<f64>,
    #[arg(long)]
    gain_row_sigma: Option<f64>,
    #[arg(long)]
    gain_pixel_sigma: Option<f64>,
    #[arg(long)]
    gain_corr_len: Option<f64>,
    #[arg(long)]
    offset_amp: Option<f64>,
    #[arg(long)]
    offset_smooth: Option<f64>,
    #[arg(long)]
    narcissus_amp: Option<f64>,
    #[arg(long)]
    poisson_scale: Option<f64>,
    /// `pre` or `post` gain.
    #[arg(long)]
    poisson_stage: Option<String>,
    #[arg(long)]
    read_sigma: Option<f64>,
    #[arg(long)]
    downsample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SolveFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stack: Option<PathBuf>,
    /// `average`, `physics-tv` or `deepir`.
    #[arg(long)]
    method: Option<String>,
    /// `pixel`, `deep-decoder` or `coord-mlp`.
    #[arg(long)]
    scene_model: Option<String>,
    #[arg(long)]
    transform_kind: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tv_image: Option<f64>,
    #[arg(long)]
    tv_offset: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Deep decoder width.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    no_opt_transforms: bool,
    #[arg(long)]
    no_gain_constraint: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write 16-bit PGM previews of the estimates.
    #[arg(long)]
    export_pgm: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    flags: SolveFlags,
}

#[derive(Args)]
struct SuperresArgs {
    /// Scene-to-sensor resolution factor, 2 or 4. Defaults to the stack's.
    #[arg(long)]
    factor: Option<usize>,
    #[command(flatten)]
    flags: SolveFlags,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    stack: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_lag: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: message.to_string(),
        }
    }

    fn solver(message: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: message.to_string(),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFiniteLoss { .. }
            | CoreError::Diverged { .. }
            | CoreError::NanGradient { .. }
            | CoreError::Underdetermined { .. }
            | CoreError::Registration { .. }
            | CoreError::DegenerateTransform { .. } => Failure::solver(e),
            other => Failure::input(other),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = configure_threads().and_then(|()| match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Solve(a) => solve_cmd(a.flags, None),
        Command::Superres(a) => solve_cmd(a.flags, Some(a.factor)),
        Command::Stats(a) => stats(a),
        Command::Metrics(a) => metrics(a),
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::input(format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::input(format!("cannot configure {n} worker threads: {e}")))?;
    }
    Ok(())
}

// ---- configuration ------------------------------------------------------

fn load_config(path: &Path) -> CliResult<Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
    } else {
        let t: toml::Value = toml::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        serde_json::to_value(t).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(Failure::input(format!("{}: expected a table of settings", path.display()))),
    }
}

/// Recursively overlays `over` onto `base`.
fn merge(base: &mut Map<String, Value>, over: Map<String, Value>) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Object(b)), Value::Object(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Builds the override map from `(dotted key, value)` pairs, skipping unset flags.
fn overrides(pairs: Vec<(&str, Option<Value>)>) -> Map<String, Value> {
    let mut out = Map::new();
    for (key, value) in pairs {
        let Some(value) = value else { continue };
        let mut nested = value;
        let parts: Vec<&str> = key.split('.').collect();
        for part in parts[1..].iter().rev() {
            nested = json!({ *part: nested });
        }
        merge(&mut out, Map::from_iter([(parts[0].to_string(), nested)]));
    }
    out
}

fn resolve(file: Option<&Path>, flags: Map<String, Value>) -> CliResult<Map<String, Value>> {
    let mut m = match file {
        Some(p) => load_config(p)?,
        None => Map::new(),
    };
    merge(&mut m, flags);
    if !m.get("seed").is_some_and(Value::is_u64) {
        return Err(Failure::input("a seed is required (--seed or `seed` in the config file)"));
    }
    Ok(m)
}

fn take<T: DeserializeOwned>(m: &mut Map<String, Value>, key: &str) -> CliResult<Option<T>> {
    m.remove(key)
        .map(|v| serde_json::from_value(v).map_err(|e| Failure::input(format!("{key}: {e}"))))
        .transpose()
}

fn parse<T: DeserializeOwned>(m: Map<String, Value>, what: &str) -> CliResult<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Failure::input(format!("{what}: {e}")))
}

fn v<T: Into<Value>>(x: Option<T>) -> Option<Value> {
    x.map(Into::into)
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn required_path(m: &mut Map<String, Value>, key: &str) -> CliResult<PathBuf> {
    take::<PathBuf>(m, key)?.ok_or_else(|| Failure::input(format!("--{} is required", key.replace('_', "-"))))
}

// ---- simulate -----------------------------------------------------------

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let flags = overrides(vec![
        ("scene", path_value(&a.scene)),
        ("synthetic", v(a.synthetic)),
        ("width", v(a.width)),
        ("height", v(a.height)),
        ("frames", v(a.frames)),
        ("jitter_px", v(a.jitter_px)),
        ("transform_kind", v(a.transform_kind)),
        ("max_rotation_deg", v(a.max_rotation_deg)),
        ("column_gain_sigma", v(a.gain_col_sigma)),
        ("row_gain_sigma", v(a.gain_row_sigma)),
        ("pixel_gain_sigma", v(a.gain_pixel_sigma)),
        ("gain_correlation_length", v(a.gain_corr_len)),
        ("offset_amplitude", v(a.offset_amp)),
        ("offset_smoothness", v(a.offset_smooth)),
        ("narcissus_amplitude", v(a.narcissus_amp)),
        ("poisson_scale", v(a.poisson_scale)),
        ("poisson_stage", v(a.poisson_stage)),
        ("read_sigma", v(a.read_sigma)),
        ("downsample", v(a.downsample)),
        ("seed", v(a.seed)),
        ("out", path_value(&a.out)),
    ]);
    let mut m = resolve(a.config.as_deref(), flags)?;
    let out = required_path(&mut m, "out")?;
    let scene_path: Option<PathBuf> = take(&mut m, "scene")?;
    let synthetic: Option<String> = take(&mut m, "synthetic")?;
    let width: usize = take(&mut m, "width")?.unwrap_or(128);
    let height: usize = take(&mut m, "height")?.unwrap_or(128);
    let frames: usize = take(&mut m, "frames")?.unwrap_or(3);
    let jitter: f64 = take(&mut m, "jitter_px")?.unwrap_or(4.0);
    let kind: TransformKind = take(&mut m, "transform_kind")?.unwrap_or(TransformKind::Rigid);
    let max_rot: f64 = take(&mut m, "max_rotation_deg")?.unwrap_or(2.0);
    let q: usize = take(&mut m, "downsample")?.unwrap_or(1);
    let noise: NoiseConfig = parse(m, "noise settings")?;
    noise.validate()?;
    if frames < 1 {
        return Err(Failure::input("--frames must be >= 1"));
    }
    if q < 1 {
        return Err(Failure::input("--downsample must be >= 1"));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) || !(max_rot >= 0.0 && max_rot.is_finite()) {
        return Err(Failure::input("jitter and rotation bounds must be finite and >= 0"));
    }

    let (scene, source) = match (&scene_path, synthetic.as_deref()) {
        (Some(p), _) => (read_pfm(p)?, json!(p.display().to_string())),
        (None, Some("smooth")) => (smooth_scene(width, height, noise.seed), json!("smooth")),
        (None, Some("textured")) => (textured_scene(width, height, noise.seed), json!("textured")),
        (None, Some(other)) => return Err(Failure::input(format!("unknown synthetic scene {other:?}"))),
        (None, None) => return Err(Failure::input("--scene or --synthetic is required")),
    };
    let (w, h) = scene.dims();
    if w % q != 0 || h % q != 0 {
        return Err(Failure::input(format!("scene {w}x{h} is not divisible by the downsample factor {q}")));
    }
    let rotation = if kind == TransformKind::Translation { 0.0 } else { max_rot };
    let transforms = random_jitter(frames, jitter * q as f64, kind, rotation, noise.seed);
    let nu = sample_nonuniformity(w / q, h / q, &noise)?;
    let stack = simulate_capture(&scene, &nu, &transforms, &noise, q)?;

    let mut config = serde_json::to_value(&noise).expect("noise config serialises");
    let obj = config.as_object_mut().expect("object");
    obj.insert("scene".into(), source);
    if scene_path.is_none() {
        obj.insert("width".into(), w.into());
        obj.insert("height".into(), h.into());
    }
    obj.insert("frames".into(), frames.into());
    obj.insert("jitter_px".into(), jitter.into());
    obj.insert("transform_kind".into(), kind.name().into());
    obj.insert("max_rotation_deg".into(), max_rot.into());
    obj.insert("downsample".into(), q.into());
    write_stack(&out, &stack, json!({ "config": config }))?;
    println!("wrote {} frames of {}x{} to {}", frames, w / q, h / q, out.display());
    Ok(())
}

// ---- solve / superres ---------------------------------------------------

fn solve_cmd(f: SolveFlags, superres: Option<Option<usize>>) -> CliResult<()> {
    let flags = overrides(vec![
        ("stack", path_value(&f.stack)),
        ("out", path_value(&f.out)),
        ("method", v(f.method)),
        ("scene_kind", v(f.scene_model)),
        ("transform_kind", v(f.transform_kind)),
        ("iters", v(f.iters)),
        ("lr", v(f.lr)),
        ("tv_image_weight", v(f.tv_image)),
        ("tv_offset_weight", v(f.tv_offset)),
        ("warmup_iters", v(f.warmup)),
        ("scene.deep_decoder.channels", v(f.channels)),
        ("optimize_transforms", f.no_opt_transforms.then_some(Value::Bool(false))),
        ("gain_mean_constraint", f.no_gain_constraint.then_some(Value::Bool(false))),
        ("export_pgm", f.export_pgm.then_some(Value::Bool(true))),
        ("downsample", superres.flatten().map(Value::from)),
        ("seed", v(f.seed)),
    ]);
    let mut m = resolve(f.config.as_deref(), flags)?;
    let stack_dir = required_path(&mut m, "stack")?;
    let out = required_path(&mut m, "out")?;
    let method: Method = take(&mut m, "method")?.unwrap_or(Method::Deepir);
    let export_pgm: bool = take(&mut m, "export_pgm")?.unwrap_or(false);
    let explicit_q = m.contains_key("downsample");

    let mut stack = read_stack(&stack_dir)?;
    let mut cfg: SolveConfig = parse(m, "solver settings")?;
    if superres.is_some() {
        if !explicit_q {
            cfg.downsample = stack.downsample;
        }
        if cfg.downsample != 2 && cfg.downsample != 4 {
            return Err(Failure::input(format!(
                "super-resolution factor must be 2 or 4, got {}",
                cfg.downsample
            )));
        }
    } else if !explicit_q {
        cfg.downsample = stack.downsample;
    }
    cfg.validate()?;
    if stack.downsample != cfg.downsample {
        if stack.truth.is_some() {
            return Err(Failure::input(format!(
                "stack was simulated with downsample {} but the solve asks for {}",
                stack.downsample, cfg.downsample
            )));
        }
        stack.downsample = cfg.downsample;
    }

    let mut echo = serde_json::to_value(&cfg).expect("solver config serialises");
    let obj = echo.as_object_mut().expect("object");
    obj.insert("method".into(), method.name().into());
    obj.insert("stack".into(), stack_dir.display().to_string().into());
    obj.insert("out".into(), out.display().to_string().into());
    obj.insert("export_pgm".into(), export_pgm.into());

    let report = match solve(&stack, method, &cfg) {
        Ok(r) => r,
        Err(e) => {
            let failure = Failure::from(e);
            if failure.code == 3 {
                let diag = out.join("diagnostics.json");
                let written = std::fs::create_dir_all(&out)
                    .map_err(CoreError::from)
                    .and_then(|()| write_json(&diag, &json!({ "error": failure.message, "config": echo })));
                if written.is_ok() {
                    return Err(Failure::solver(format!("{} (diagnostics: {})", failure.message, diag.display())));
                }
            }
            return Err(failure);
        }
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.write(&out, &echo)?;
    if export_pgm {
        write_pgm16(out.join("x0_hat.pgm"), &report.x0_hat)?;
        write_pgm16(out.join("gain_hat.pgm"), &report.nu_hat.gain)?;
        write_pgm16(out.join("offset_hat.pgm"), &report.nu_hat.offset)?;
        write_pgm16(out.join("baseline.pgm"), &report.baseline)?;
    }
    let (w, h) = report.x0_hat.dims();
    let mut line = format!("{} solve wrote {}x{} estimate to {}", method.name(), w, h, out.display());
    if let (Some(p), Some(b)) = (report.psnr, report.baseline_psnr) {
        line.push_str(&format!("; PSNR {p:.2} dB (baseline {b:.2} dB)"));
    }
    println!("{line}");
    Ok(())
}

// ---- stats / metrics ----------------------------------------------------

fn stats(a: StatsArgs) -> CliResult<()> {
    let stack: FrameStack = read_stack(&a.stack)?;
    let s = estimate_jitter_stats(&stack, a.max_lag)?;
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&a.out).map_err(CoreError::from)?;
    write_pfm(a.out.join("spatial_autocorr.pfm"), &s.spatial_autocorr)?;
    write_json(
        a.out.join("temporal_autocorr.json"),
        &json!({
            "lag": (0..s.temporal_autocorr.len()).collect::<Vec<_>>(),
            "autocorr": s.temporal_autocorr,
        }),
    )?;
    write_json(
        a.out.join("stats.json"),
        &json!({
            "stack": a.stack.display().to_string(),
            "requested_max_lag": a.max_lag,
            "max_lag": s.max_lag,
            "patch_size": s.patch_size,
            "patches": s.patches,
            "recommended_shift_px": s.recommended_shift_px,
            "recommended_max_frames": s.recommended_max_frames,
            "warnings": s.warnings,
        }),
    )?;
    match s.recommended_shift_px {
        Some(px) => println!("recommended shift {px} px, at most {} frames", s.recommended_max_frames),
        None => println!(
            "no shift within {} px decorrelates the pattern; at most {} frames",
            s.max_lag, s.recommended_max_frames
        ),
    }
    Ok(())
}

fn metrics(a: MetricsArgs) -> CliResult<()> {
    let estimate: Image = read_pfm(&a.estimate)?;
    let truth = read_pfm(&a.truth)?;
    let m = mse(&estimate, &truth)?;
    let p = psnr(&estimate, &truth)?;
    println!("{}", json!({ "psnr_db": psnr_value(Some(p)), "mse": m }));
    Ok(())
}
