use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use super::pgm::{to_graymap, write_pgm};
use crate::error::{Error, Result};
use crate::kernel::Geometry;
use crate::saem::EstimationTrace;

pub const TRACE_CSV: &str = "trace.csv";
pub const TRACE_JSON: &str = "trace.json";
pub const TEMPLATE_DIR: &str = "templates";

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    sigma_sq: f64,
    mean_acceptance: f64,
    kappa: usize,
    zeta: usize,
    nu: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFiles {
    pub templates: Vec<PathBuf>,
    pub trace_csv: PathBuf,
    pub trace_json: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes one 8-bit template image per iteration under `templates/`, the
/// scalar series as `trace.csv` and the full trace as `trace.json`.
pub fn export_outputs(trace: &EstimationTrace, geometry: &Geometry, dir: &Path) -> Result<ExportedFiles> {
    let tdir = dir.join(TEMPLATE_DIR);
    create_dir(&tdir)?;
    let grid = geometry.grid();
    let zeros = vec![0.0; geometry.beta_len()];
    let mut templates = Vec::with_capacity(trace.len());
    for rec in &trace.records {
        let values = geometry.render(&rec.alpha, &zeros)?;
        let path = tdir.join(format!("template_{:05}.pgm", rec.iteration));
        write_pgm(&path, &to_graymap(values.as_slice(), grid.width(), grid.height()))?;
        templates.push(path);
    }

    let trace_csv = dir.join(TRACE_CSV);
    let to_err = |e: csv::Error| Error::malformed(&trace_csv, e.to_string());
    let mut w = csv::Writer::from_path(&trace_csv).map_err(to_err)?;
    for rec in &trace.records {
        w.serialize(TraceRow {
            iteration: rec.iteration,
            sigma_sq: rec.sigma_sq,
            mean_acceptance: rec.mean_acceptance,
            kappa: rec.kappa,
            zeta: rec.zeta,
            nu: rec.nu,
        })
        .map_err(to_err)?;
    }
    if trace.is_empty() {
        w.write_record(["iteration", "sigma_sq", "mean_acceptance", "kappa", "zeta", "nu"])
            .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(&trace_csv, e))?;

    let trace_json = dir.join(TRACE_JSON);
    save_trace(trace, &trace_json)?;
    Ok(ExportedFiles {
        templates,
        trace_csv,
        trace_json,
    })
}

pub fn save_trace(trace: &EstimationTrace, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(trace).expect("trace serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<EstimationTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

/// Writes each image as `{prefix}_{index:04}.pgm` in `dir`.
pub fn write_images(images: &[DVector<f64>], width: usize, height: usize, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            crate::error::check_len("image length", width * height, img.len())?;
            let path = dir.join(format!("{prefix}_{i:04}.pgm"));
            write_pgm(&path, &to_graymap(img.as_slice(), width, height))?;
            Ok(path)
        })
        .collect()
}
