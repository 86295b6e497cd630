//! The `deftemplate` command line: estimate, synthesize, diagnose.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use crate::config::{ModeName, RunConfig, CONFIG_KEYS};
use crate::data_io::{
    bundled_dataset, export_outputs, load_from_section, load_model, load_trace, save_csv, save_model,
    write_images, ImageDataset, ModelArchive, ThetaRecord, FORMAT_VERSION, TRACE_JSON,
};
use crate::error::Error;
use crate::kernel::Geometry;
use crate::model::HyperParams;
use crate::saem::{run_estimation, Problem};
use crate::synthesis::{synthesize, SynthesisRequest};

pub const OUT_ENV: &str = "DEFTEMPLATE_OUT";
pub const MODEL_FILE: &str = "model.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "deftemplate", version, about = "Estimate and sample Bayesian deformable template models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a dataset and write the archive, trace and template images.
    #[command(after_help = format!("Config file keys (TOML):\n{CONFIG_KEYS}"))]
    Estimate(EstimateArgs),
    /// Draw images from a fitted model.
    Synthesize(SynthesizeArgs),
    /// Summarize a trace written by `estimate`.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// TOML run configuration; see the key list below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeName>,
    /// Iteration budget.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Worker threads for per-image work, 0 for all cores.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory (default: config, then $DEFTEMPLATE_OUT, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset path, overriding `data.path`. Without either, the bundled
    /// synthetic dataset is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Model archive written by `estimate`.
    #[arg(long)]
    pub model: PathBuf,
    /// Number of deformation draws.
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    /// Skip the mirrored image of each draw.
    #[arg(long)]
    pub no_symmetric: bool,
    /// Add Gaussian pixel noise with this variance.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: $DEFTEMPLATE_OUT, then ./out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// `trace.json` or the directory holding it.
    pub trace: PathBuf,
}

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: Error,
}

impl Failure {
    fn config(error: Error) -> Self {
        Self { code: 2, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Config(_) | Error::Schedule(_) => 2,
            _ => 1,
        };
        Self { code, error }
    }
}

fn output_dir(flag: Option<PathBuf>, configured: Option<PathBuf>) -> PathBuf {
    flag.or(configured)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Estimate(a) => estimate(a),
        Command::Synthesize(a) => synthesize_cmd(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

/// Config file plus flag overrides, validated.
pub fn resolve_config(args: &EstimateArgs) -> Result<(RunConfig, Geometry), Failure> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Failure::from(e),
            other => Failure::config(other),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.run.seed = s;
    }
    if let Some(m) = args.mode {
        cfg.run.mode = m;
    }
    if let Some(n) = args.iters {
        cfg.schedule.total_iters = n;
    }
    if let Some(w) = args.workers {
        cfg.run.workers = w;
    }
    if let Some(d) = &args.data {
        cfg.data.path = Some(d.clone());
    }
    let geometry = cfg.validate().map_err(Failure::config)?;
    Ok((cfg, geometry))
}

fn estimate(args: EstimateArgs) -> Result<(), Failure> {
    let (cfg, geometry) = resolve_config(&args)?;
    let dataset = match &cfg.data.path {
        Some(_) => load_from_section(&cfg.data)?,
        None => {
            log::info!("no dataset configured, using the bundled synthetic set");
            bundled_dataset()?
        }
    };
    let grid = geometry.grid();
    if (dataset.width, dataset.height) != (grid.width(), grid.height()) {
        return Err(Failure::config(Error::Config(format!(
            "dataset images are {}x{} but geometry.width/height are {}x{}",
            dataset.width,
            dataset.height,
            grid.width(),
            grid.height()
        ))));
    }
    let hyper = HyperParams::from_geometry(&geometry, &cfg.hyper.into())?;
    let engine = cfg.engine_config();
    let problem = Problem {
        images: &dataset.images,
        geometry: &geometry,
        hyper: &hyper,
    };
    let (theta, trace) = run_estimation(problem, engine, cfg.schedule.total_iters)?;

    let out = output_dir(args.out, cfg.output.dir.clone());
    create_dir(&out)?;
    let archive = ModelArchive {
        format_version: FORMAT_VERSION,
        geometry: cfg.geometry(),
        hyper: cfg.hyper.into(),
        schedule: engine.schedule,
        truncation: engine.truncation,
        mode: engine.mode,
        seed: engine.seed,
        iterations: cfg.schedule.total_iters,
        theta: ThetaRecord::from(&theta),
    };
    save_model(&archive, &out.join(MODEL_FILE))?;
    let cfg_path = out.join(CONFIG_FILE);
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    export_outputs(&trace, &geometry, &out)?;
    println!(
        "estimated from {} images in {} iterations: sigma^2 = {}, tr Gamma_g = {}, projections = {}",
        dataset.len(),
        trace.len(),
        theta.sigma_sq,
        theta.gamma_g.trace(),
        trace.projections.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn synthesize_cmd(args: SynthesizeArgs) -> Result<(), Failure> {
    let archive = load_model(&args.model)?;
    let geometry = archive.geometry.build()?;
    let theta = archive.theta.to_params()?;
    let req = SynthesisRequest {
        count: args.count,
        include_symmetric: !args.no_symmetric,
        noise: args.noise,
        seed: args.seed,
    };
    let draws = synthesize(&theta, &req, &geometry)?;
    let grid = geometry.grid();
    let out = output_dir(args.out, None);
    let images: Vec<DVector<f64>> = draws.iter().map(|d| d.image.clone()).collect();
    write_images(&images, grid.width(), grid.height(), &out, "synthetic")?;
    let labels = draws
        .iter()
        .map(|d| format!("draw{}{}", d.draw, if d.symmetric { "_sym" } else { "" }))
        .collect();
    let ds = ImageDataset::new(images, grid.width(), grid.height(), Some(labels))?;
    save_csv(&ds, &out.join("synthetic.csv"))?;
    println!("wrote {} images to {}", ds.len(), out.display());
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<(), Failure> {
    let path = if args.trace.is_dir() {
        args.trace.join(TRACE_JSON)
    } else {
        args.trace.clone()
    };
    let trace = load_trace(&path)?;
    let last = trace
        .records
        .last()
        .ok_or_else(|| Error::EmptyDataset(format!("trace {} has no iterations", path.display())))?;
    let n = trace.len() as f64;
    let acc_x = trace.records.iter().map(|r| r.acceptance_x).sum::<f64>() / n;
    let acc_y = trace.records.iter().map(|r| r.acceptance_y).sum::<f64>() / n;
    let s = trace.schedule;
    let adm = s.admissibility();
    println!("iterations: {}", trace.len());
    println!("final sigma^2: {}", last.sigma_sq);
    println!("final tr Gamma_g: {}", last.gamma_g_trace);
    println!("projections: {}", trace.projections.len());
    println!("final kappa: {}, zeta: {}, nu: {}", last.kappa, last.zeta, last.nu);
    println!("mean acceptance: x block {acc_x:.4}, y block {acc_y:.4}");
    let verdict = if adm.admissible {
        format!(
            "admissible (p = {}, a = {:.4})",
            adm.p.map_or("-".into(), |p| p.to_string()),
            adm.a.unwrap_or(f64::NAN)
        )
    } else {
        format!("not admissible: {}", adm.problems.join("; "))
    };
    println!(
        "schedule: heating {}, d = {}, c' = {}: {verdict}",
        s.heating, s.decay, s.eps_decay
    );
    Ok(())
}
