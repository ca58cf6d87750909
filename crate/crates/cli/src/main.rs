//! `ptypnp` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use ptypnp::config::{JobConfig, Manifest, CROSSTALK_CONFIG, GRID_PATHOLOGY_CONFIG};
use ptypnp::editors::{EditorKind, EditorSpec, MaskFill};
use ptypnp::metrics::{evaluate, log_spectrum, MetricOptions, Roi};
use ptypnp::npy::{self, NpyArray};
use ptypnp::pipeline::{read_complex_stack, reconstruct_to_dir, rerun_manifest, simulate_to_dir};
use ptypnp::{Error, ObjectModel, PnpConfig, RealImage};

#[derive(Parser, Debug)]
#[command(
    name = "ptypnp",
    version,
    about = "Ptychographic reconstruction with plug-and-play artifact removal"
)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and its ground truth from a job config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a simulated or measured dataset.
    Reconstruct(ReconstructArgs),
    /// Repeat the run recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pass a single [0, 1] image through an editor.
    Edit(EditArgs),
    /// Compare a reconstruction against ground truth and print the report.
    Metrics(MetricsArgs),
    /// Write the log-magnitude spectrum of an image for grid diagnosis.
    Spectrum {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Slice of a 3D stack to use.
        #[arg(long, default_value_t = 0)]
        slice: usize,
    },
    /// Check a job config (schema, ranges, referenced files) without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a bundled example config.
    ExampleConfig {
        #[arg(value_enum)]
        which: Example,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Example {
    GridPathology,
    Crosstalk,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory holding dataset.npy, positions.npy and probe_init.npy.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the plug-and-play loop instead of the plain solver.
    #[arg(long)]
    pnp: bool,
    /// Editor kind for the plug-and-play loop, overriding the config.
    #[arg(long)]
    editor: Option<String>,
    #[command(flatten)]
    editor_opts: EditorOpts,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_inner: Option<usize>,
    #[arg(long)]
    n_outer: Option<usize>,
    #[arg(long)]
    edit_last_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    save_snapshots: bool,
}

#[derive(Args, Debug, Default)]
struct EditorOpts {
    /// Grid period in pixels for the spectral notch (both axes).
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    neighborhood: Option<usize>,
    /// Smoothing weight for smooth_denoise.
    #[arg(long)]
    strength: Option<f64>,
    /// Mask (.npy, nonzero = masked) for mask_oracle.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Constant fill instead of the local median for mask_oracle.
    #[arg(long)]
    fill_value: Option<f64>,
    /// External editor program and arguments; the working directory is appended.
    #[arg(long = "editor-command", num_args = 1.., allow_hyphen_values = true)]
    editor_command: Vec<String>,
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Editor spec as JSON file.
    #[arg(long, conflicts_with = "editor")]
    editor_config: Option<PathBuf>,
    #[arg(long)]
    editor: Option<String>,
    #[command(flatten)]
    editor_opts: EditorOpts,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    /// Reconstructed object (.npy) or a reconstruction directory.
    #[arg(long)]
    recon: PathBuf,
    /// Ground-truth object (.npy) or a simulation directory.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    grid_period: Option<f64>,
    /// Region as y,x,height,width.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<Roi>,
    #[arg(long)]
    remove_ramp: bool,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_roi(s: &str) -> Result<Roi, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [y, x, height, width] => Ok(Roi { y, x, height, width }),
        _ => Err("expected y,x,height,width".into()),
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::ZeroDenominator | Error::Editor(_) => 2,
        _ => 1,
    }
}

fn run(command: Command) -> ptypnp::Result<()> {
    match command {
        Command::Simulate { config, out } => {
            let job = JobConfig::load(&config)?;
            job.validate()?;
            let dir = out.unwrap_or_else(|| job.output_dir.clone());
            let manifest = simulate_to_dir(&job, &dir)?;
            println!("wrote {} files to {}", manifest.outputs.len(), dir.display());
            Ok(())
        }
        Command::Reconstruct(args) => reconstruct(args),
        Command::Rerun { manifest, out } => {
            let m = Manifest::load(&manifest)?;
            let done = rerun_manifest(&m, &out)?;
            println!("reran {} into {}", done.command, out.display());
            Ok(())
        }
        Command::Edit(args) => edit(args),
        Command::Metrics(args) => metrics(args),
        Command::Spectrum { input, output, slice } => {
            let image = read_real_image(&input, slice)?;
            let spec = log_spectrum(&image)?;
            npy::write_real2_f32(&output, &spec)?;
            Ok(())
        }
        Command::ValidateConfig { config } => {
            let job = JobConfig::load(&config)?;
            job.validate()?;
            println!("{}: ok", config.display());
            Ok(())
        }
        Command::ExampleConfig { which } => {
            let text = match which {
                Example::GridPathology => GRID_PATHOLOGY_CONFIG,
                Example::Crosstalk => CROSSTALK_CONFIG,
            };
            println!("{text}");
            Ok(())
        }
    }
}

fn editor_kind(name: &str) -> ptypnp::Result<EditorKind> {
    serde_json::from_value(serde_json::Value::String(name.to_string()))
        .map_err(|_| Error::Invalid(format!("unknown editor kind {name:?}")))
}

/// Applies flag overrides on top of `base` (or a fresh spec of `kind`).
fn editor_spec(kind: Option<&str>, base: Option<EditorSpec>, opts: &EditorOpts) -> ptypnp::Result<EditorSpec> {
    let mut spec = match (kind, base) {
        (Some(k), base) => {
            let kind = editor_kind(k)?;
            match base {
                Some(b) if b.kind == kind => b,
                _ => serde_json::from_value(serde_json::json!({ "kind": k }))?,
            }
        }
        (None, Some(b)) => b,
        (None, None) => {
            return Err(Error::Invalid(
                "no editor given (use --editor or --editor-config)".into(),
            ))
        }
    };
    if let Some(p) = opts.period {
        spec.period_y = Some(p);
        spec.period_x = Some(p);
    }
    if let Some(n) = opts.neighborhood {
        spec.neighborhood = n;
    }
    if let Some(s) = opts.strength {
        spec.strength = s;
    }
    if let Some(m) = &opts.mask {
        spec.mask_path = Some(m.clone());
    }
    if let Some(v) = opts.fill_value {
        spec.fill = MaskFill::Constant;
        spec.fill_value = v;
    }
    if !opts.editor_command.is_empty() {
        spec.command = opts.editor_command.clone();
    }
    if let Some(t) = opts.timeout {
        spec.timeout_secs = t;
    }
    if let Some(p) = &opts.prompt {
        spec.request.prompt = p.clone();
    }
    spec.validate()?;
    Ok(spec)
}

fn reconstruct(args: ReconstructArgs) -> ptypnp::Result<()> {
    let mut job = JobConfig::load(&args.config)?;
    if let Some(n) = args.iterations {
        job.solver.n_iterations = n;
    }
    if let Some(s) = args.seed {
        job.solver.rng_seed = s;
    }
    let editor_flags =
        args.editor.is_some() || args.editor_opts.period.is_some() || !args.editor_opts.editor_command.is_empty();
    if args.pnp {
        let mut pnp = match job.pnp.take() {
            Some(p) => p,
            None if args.editor.is_some() => {
                let n_inner = args.n_inner.unwrap_or(50);
                let n_outer = args.n_outer.unwrap_or((job.solver.n_iterations / n_inner).max(1));
                PnpConfig::new(1e-5, 0.8, n_inner, n_outer, EditorSpec::identity())
            }
            None => {
                return Err(Error::Invalid(
                    "--pnp needs a pnp section in the config or an --editor".into(),
                ))
            }
        };
        if editor_flags {
            pnp.editor = editor_spec(args.editor.as_deref(), Some(pnp.editor.clone()), &args.editor_opts)?;
        }
        if let Some(v) = args.tau {
            pnp.tau = v;
        }
        if let Some(v) = args.gamma {
            pnp.gamma = v;
        }
        let resized = args.n_inner.is_some() || args.n_outer.is_some();
        if let Some(v) = args.n_inner {
            pnp.n_inner = v;
        }
        if let Some(v) = args.n_outer {
            pnp.n_outer = v;
        }
        match args.edit_last_epoch {
            Some(v) => pnp.edit_last_epoch = v,
            None if resized => pnp.edit_last_epoch = pnp.edit_last_epoch.min(pnp.n_outer),
            None => {}
        }
        pnp.save_snapshots |= args.save_snapshots;
        job.pnp = Some(pnp);
    } else if editor_flags {
        return Err(Error::Invalid("editor flags need --pnp".into()));
    }
    job.validate()?;
    let out = args.out.unwrap_or_else(|| job.output_dir.clone());
    let manifest = reconstruct_to_dir(&job, &args.data, &out, args.pnp)?;
    println!("wrote {} files to {}", manifest.outputs.len(), out.display());
    Ok(())
}

fn edit(args: EditArgs) -> ptypnp::Result<()> {
    let base = match &args.editor_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            Some(serde_json::from_str::<EditorSpec>(&text)?)
        }
        None => None,
    };
    let spec = editor_spec(args.editor.as_deref(), base, &args.editor_opts)?;
    let image = read_real_image(&args.input, 0)?;
    let mut editor = spec.build()?;
    let out = editor.edit(&image, &spec.request)?;
    npy::write_real2_f32(&args.output, &out)?;
    Ok(())
}

/// `dir/name` when `path` is a directory, else `path`.
fn file_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn metrics(args: MetricsArgs) -> ptypnp::Result<()> {
    let load = |p: &Path| -> ptypnp::Result<ObjectModel> {
        let slices = read_complex_stack(p)?;
        let n = slices.len();
        ObjectModel::new(slices, 1.0, vec![1.0; n.saturating_sub(1)])
    };
    let recon = load(&file_in(&args.recon, "object.npy"))?;
    let truth = load(&file_in(&args.truth, ptypnp::pipeline::TRUTH_OBJECT_FILE))?;
    let options = MetricOptions {
        remove_ramp: args.remove_ramp,
        grid_period_y: args.grid_period,
        grid_period_x: args.grid_period,
        roi: args.roi,
    };
    let report = evaluate(&recon, &truth, &options, None)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &args.out {
        npy::atomic_write(out, json.as_bytes()).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
    }
    println!("{json}");
    Ok(())
}

/// Reads a real image; complex inputs contribute their phase and 3D stacks
/// their `slice`-th entry.
fn read_real_image(path: &Path, slice: usize) -> ptypnp::Result<RealImage> {
    let arr = npy::read_npy(path)?;
    let real: ndarray::ArrayD<f64> = match &arr {
        NpyArray::C64(_) | NpyArray::C128(_) => arr.to_complex().mapv(|v| v.arg()),
        _ => arr.to_real()?,
    };
    let image: Array2<f64> = match real.ndim() {
        2 => real.into_dimensionality().expect("2D"),
        3 => {
            let n = real.shape()[0];
            if slice >= n {
                return Err(Error::Invalid(format!("slice {slice} out of range for {n} slices")));
            }
            real.index_axis(ndarray::Axis(0), slice)
                .to_owned()
                .into_dimensionality()
                .expect("2D")
        }
        d => return Err(Error::Invalid(format!("{} must be 2D or 3D, got {d}D", path.display()))),
    };
    Ok(image)
}
