//! Command-line front end: MetaImage I/O, config loading and the `register`,
//! `eval`, `synth` and `dump-preset` verbs.
//!
//! Exit codes are stable: 0 success, 2 I/O or format error, 3 invalid
//! configuration, 4 numerical failure.

pub mod config;
pub mod error;
pub mod metaimage;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mcbo_core::evalkit::{
    jacobian_stats, landmarks_from_field, synth_deform, tre, LandmarkSet, Phantom,
};
use mcbo_core::fusion::{fuse, ModalityFieldSet};
use mcbo_core::instopt::loss;
use mcbo_core::mindssc::extract;
use mcbo_core::pyramid::{register_detailed, Registration};
use mcbo_core::volgrid::{warp, DisplacementField, Grid, Volume3};

use crate::config::{RunConfig, DEFAULT_PRESET};
use crate::error::{CliError, EXIT_OK};
use crate::report::Report;

// stdout may be a closed pipe (`mcbo eval ... | head`); that is not an error
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "mcbo",
    version,
    about = "Multilevel correlation balanced optimization for 3D deformable registration"
)]
pub struct Cli {
    /// Print a built-in preset as a config file and exit.
    #[arg(long, value_name = "NAME")]
    pub dump_preset: Option<String>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "MCBO_THREADS")]
    pub threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register one or two moving volumes onto a fixed volume.
    Register(RegisterArgs),
    /// Landmark TRE of a displacement field.
    Eval(EvalArgs),
    /// Write a synthetic fixed/moving pair with its ground-truth field and landmarks.
    Synth(SynthArgs),
    /// Print a built-in preset as a config file.
    DumpPreset {
        #[arg(default_value = DEFAULT_PRESET)]
        name: String,
    },
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Built-in preset (remind2reg, clem).
    #[arg(long)]
    pub preset: Option<String>,
    /// Key-value config file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Moving volume; give it twice to fuse two modalities.
    #[arg(long, required = true)]
    pub moving: Vec<PathBuf>,
    #[arg(long)]
    pub out_field: PathBuf,
    /// Warped moving volume, one per --moving. Defaults next to the field.
    #[arg(long)]
    pub out_warped: Vec<PathBuf>,
    /// Plain-text report. Defaults to `<field>.report.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub field: PathBuf,
    /// CSV with header `ph,pw,pd,qh,qw,qd`, voxel coordinates.
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Key-value report. Defaults to `<field>.tre.txt`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"], default_values_t = [64, 64, 64])]
    pub dims: Vec<usize>,
    /// Voxel size in mm along h, w, d.
    #[arg(long, num_args = 3, value_names = ["SH", "SW", "SD"], default_values_t = [1.0, 1.0, 1.0])]
    pub spacing: Vec<f64>,
    /// Largest displacement in voxels.
    #[arg(long, default_value_t = 4.0)]
    pub magnitude: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Box-filter width controlling smoothness of the deformation.
    #[arg(long, default_value_t = 31)]
    pub kernel: usize,
    #[arg(long, default_value_t = 100)]
    pub landmarks: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();

    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(name) = &cli.dump_preset {
        let _ = write!(
            std::io::stdout().lock(),
            "{}",
            config::dump(&RunConfig::preset(name)?)
        );
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Config("no command given; try --help".into()));
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => builder = builder.num_threads(n),
        None => {}
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::Register(a) => cmd_register(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::DumpPreset { name } => {
            let _ = write!(
                std::io::stdout().lock(),
                "{}",
                config::dump(&RunConfig::preset(&name)?)
            );
            Ok(())
        }
    })
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// `dir/stem<suffix>` for the file stem of `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn load_config(preset: Option<&str>, config: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match config {
        Some(path) => {
            let text = read_text(path)?;
            config::parse(&text, preset).map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?
        }
        None => RunConfig::preset(preset.unwrap_or(DEFAULT_PRESET))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn field_stats(r: &mut Report, prefix: &str, field: &DisplacementField) {
    let j = jacobian_stats(field);
    let m = field.mean_vector();
    r.push(
        format!("{prefix}.mean_norm"),
        format!("{:.6}", field.mean_norm()),
    );
    r.push(
        format!("{prefix}.max_norm"),
        format!("{:.6}", field.max_norm()),
    );
    r.push(
        format!("{prefix}.mean_vector"),
        format!("{:.6} {:.6} {:.6}", m[0], m[1], m[2]),
    );
    r.push(format!("{prefix}.jacobian_min"), format!("{:.6}", j.min));
    r.push(
        format!("{prefix}.jacobian_nonpositive_fraction"),
        format!("{:.6}", j.nonpositive_fraction),
    );
}

fn registration_report(r: &mut Report, prefix: &str, reg: &Registration) {
    r.push(
        format!("{prefix}.feature_seconds"),
        format!("{:.3}", reg.feature_time.as_secs_f64()),
    );
    for (i, l) in reg.levels.iter().enumerate() {
        let k = format!("{prefix}.level.{}", i + 1);
        r.push(format!("{k}.pool_factor"), l.pool_factor.to_string());
        r.push(
            format!("{k}.pooled_dims"),
            format!(
                "{} {} {}",
                l.pooled_dims[0], l.pooled_dims[1], l.pooled_dims[2]
            ),
        );
        r.push(format!("{k}.weight"), l.weight.to_string());
        r.push(format!("{k}.split"), l.split.to_string());
        r.push(
            format!("{k}.seconds"),
            format!("{:.3}", l.elapsed.as_secs_f64()),
        );
        r.push(format!("{k}.mean_norm"), format!("{:.6}", l.mean_norm));
        if let Some((a, b)) = l.instopt_loss {
            r.push(format!("{k}.instopt_loss"), format!("{a:.6e} {b:.6e}"));
        }
    }
    if let Some((a, b, t)) = reg.refine {
        r.push(format!("{prefix}.refine_loss"), format!("{a:.6e} {b:.6e}"));
        r.push(
            format!("{prefix}.refine_seconds"),
            format!("{:.3}", t.as_secs_f64()),
        );
    }
}

fn cmd_register(a: &RegisterArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = load_config(a.preset.as_deref(), a.config.as_deref())?;
    if a.moving.len() > 2 {
        return Err(CliError::Input(format!(
            "at most two moving volumes are supported, got {}",
            a.moving.len()
        )));
    }
    if !a.out_warped.is_empty() && a.out_warped.len() != a.moving.len() {
        return Err(CliError::Input(format!(
            "{} --out-warped paths for {} moving volumes",
            a.out_warped.len(),
            a.moving.len()
        )));
    }
    let fixed = metaimage::read_volume(&a.fixed)?;
    let moving = a
        .moving
        .iter()
        .map(|p| {
            let m = metaimage::read_volume(p)?;
            if m.dims() != fixed.dims() {
                return Err(CliError::Input(format!(
                    "{} has dims {:?} but fixed {} has {:?}; resample to a common grid first",
                    p.display(),
                    m.dims(),
                    a.fixed.display(),
                    fixed.dims()
                )));
            }
            if m.spacing() != fixed.spacing() {
                log::warn!(
                    "{} spacing {:?} differs from fixed {:?}",
                    p.display(),
                    m.spacing(),
                    fixed.spacing()
                );
            }
            Ok(m)
        })
        .collect::<Result<Vec<Volume3>, CliError>>()?;

    let mut report = Report::new();
    report.section("config", &config::dump(&cfg));
    report.push("input.fixed", a.fixed.display().to_string());
    for (i, p) in a.moving.iter().enumerate() {
        report.push(format!("input.moving.{}", i + 1), p.display().to_string());
    }
    let [h, w, d] = fixed.dims();
    report.push("input.dims", format!("{h} {w} {d}"));
    report.push("threads", rayon::current_num_threads().to_string());

    let mut fields = Vec::with_capacity(moving.len());
    for (i, m) in moving.iter().enumerate() {
        let context = a.moving[i].display().to_string();
        let reg = register_detailed(&fixed, m, &cfg.pipeline)
            .map_err(|e| CliError::from_core(e, &context))?;
        let prefix = format!("modality.{}", i + 1);
        registration_report(&mut report, &prefix, &reg);
        field_stats(&mut report, &format!("{prefix}.field"), &reg.field);
        fields.push(reg.field);
    }
    let labels = a.moving.iter().map(|p| p.display().to_string()).collect();
    let set =
        ModalityFieldSet::new(fields, labels).map_err(|e| CliError::from_core(e, "fusion"))?;
    let field = if set.fields().len() > 1 {
        report.push("fusion.strategy", cfg.fusion.name());
        fuse(&set, cfg.fusion)
    } else {
        set.fields()[0].clone()
    };
    field_stats(&mut report, "field", &field);

    // direction check: the field should lower the feature mismatch
    let ff = extract(&fixed, &cfg.pipeline.mind).map_err(|e| CliError::from_core(e, "features"))?;
    for (i, m) in moving.iter().enumerate() {
        let fm = extract(m, &cfg.pipeline.mind).map_err(|e| CliError::from_core(e, "features"))?;
        let zero = DisplacementField::zeros(*fixed.grid());
        let before =
            loss(&ff, &fm, &zero, 0.0).map_err(|e| CliError::from_core(e, "similarity"))?;
        let after =
            loss(&ff, &fm, &field, 0.0).map_err(|e| CliError::from_core(e, "similarity"))?;
        report.push(
            format!("similarity.{}.feature_ssd", i + 1),
            format!("{before:.6e} {after:.6e}"),
        );
        if after > before {
            log::warn!(
                "{}: registered feature SSD {after:.4e} exceeds identity {before:.4e}",
                a.moving[i].display()
            );
        }
    }

    metaimage::write_field(&a.out_field, &field)?;
    for (i, m) in moving.iter().enumerate() {
        let path = a
            .out_warped
            .get(i)
            .cloned()
            .unwrap_or_else(|| sibling(&a.out_field, &format!("_warped{}.mha", i + 1)));
        let warped = warp(m, &field).map_err(|e| CliError::from_core(e, "warp"))?;
        metaimage::write_volume(&path, &warped)?;
        report.push(
            format!("output.warped.{}", i + 1),
            path.display().to_string(),
        );
    }
    report.push("output.field", a.out_field.display().to_string());
    report.push(
        "total_seconds",
        format!("{:.3}", start.elapsed().as_secs_f64()),
    );
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out_field, ".report.txt"));
    write_text(&report_path, &report.render())?;
    say!(
        "wrote {} (mean |phi| {:.4} voxels, max {:.4})",
        a.out_field.display(),
        field.mean_norm(),
        field.max_norm()
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let field = metaimage::read_field(&a.field)?;
    let text = read_text(&a.landmarks)?;
    let lms = LandmarkSet::from_csv(&text, field.spacing()).map_err(|e| CliError::Format {
        path: a.landmarks.clone(),
        msg: e.to_string(),
    })?;
    let stats = tre(&lms, &field)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.landmarks.display())))?;
    say!(
        "TRE (mm): {:.3} ± {:.3} over {} pairs",
        stats.mean,
        stats.std,
        stats.per_pair.len()
    );
    let mut report = Report::new();
    report.push("field", a.field.display().to_string());
    report.push("landmarks", a.landmarks.display().to_string());
    report.push("pairs", stats.per_pair.len().to_string());
    report.push("tre_mean_mm", format!("{:.6}", stats.mean));
    report.push("tre_std_mm", format!("{:.6}", stats.std));
    for (i, e) in stats.per_pair.iter().enumerate() {
        say!("pair {}: {e:.3}", i + 1);
        report.push(format!("pair.{}", i + 1), format!("{e:.6}"));
    }
    let path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.field, ".tre.txt"));
    write_text(&path, &report.render())
}

fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let dims = [a.dims[0], a.dims[1], a.dims[2]];
    let spacing = [a.spacing[0], a.spacing[1], a.spacing[2]];
    let input = |e: mcbo_core::Error| CliError::Input(format!("synth: {e}"));
    let grid = Grid::new(dims, spacing).map_err(input)?;
    if a.kernel == 0 || a.kernel.is_multiple_of(2) {
        return Err(CliError::Config(format!(
            "--kernel must be odd, got {}",
            a.kernel
        )));
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;

    let phantom = Phantom::random(dims, a.seed);
    let fixed = phantom.render(grid).map_err(input)?;
    let field = synth_deform(grid, a.magnitude, a.kernel, a.seed).map_err(input)?;
    let moving = phantom.render_deformed(&field).map_err(input)?;
    let smallest = *dims.iter().min().unwrap_or(&1) as f64;
    let margin = 4.0f64.min((smallest - 1.0) / 4.0);
    let lms = landmarks_from_field(&field, a.landmarks, margin, a.seed).map_err(input)?;

    metaimage::write_volume(&a.out_dir.join("fixed.mha"), &fixed)?;
    metaimage::write_volume(&a.out_dir.join("moving.mha"), &moving)?;
    metaimage::write_field(&a.out_dir.join("field.mha"), &field)?;
    write_text(&a.out_dir.join("landmarks.csv"), &lms.to_csv())?;
    say!(
        "wrote synthetic pair to {} (mean |phi| {:.4}, max {:.4} voxels)",
        a.out_dir.display(),
        field.mean_norm(),
        field.max_norm()
    );
    Ok(())
}
