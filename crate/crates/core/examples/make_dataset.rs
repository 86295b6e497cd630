//! Regenerates `data/synthetic.csv`, the dataset bundled with the crate:
//! 20 images of a blob template deformed with `Gamma_g = 0.01 I` plus
//! noise of variance 0.05, on the default 16x16 geometry.
//!
//! cargo run --release --example make_dataset -- crates/core/data/synthetic.csv

use std::path::PathBuf;

use deftemplate::config::GeometryConfig;
use deftemplate::data_io::{save_csv, ImageDataset};
use deftemplate::model::ModelParams;
use deftemplate::synthesis::{blob_coefficients, synthesize, SynthesisRequest};
use nalgebra::DMatrix;

fn main() -> deftemplate::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic.csv".into())
        .into();
    let geometry = GeometryConfig::default().build()?;
    let truth = ModelParams {
        alpha: blob_coefficients(&geometry, 0.6),
        sigma_sq: 0.05,
        gamma_g: DMatrix::identity(geometry.beta_len(), geometry.beta_len()) * 0.01,
    };
    let req = SynthesisRequest {
        count: 20,
        include_symmetric: false,
        noise: Some(truth.sigma_sq),
        seed: 42,
    };
    let images: Vec<_> = synthesize(&truth, &req, &geometry)?
        .into_iter()
        .map(|s| s.image.map(|v| (v * 1e6).round() / 1e6))
        .collect();
    let n = images.len();
    let grid = geometry.grid();
    let ds = ImageDataset::new(images, grid.width(), grid.height(), Some(vec!["blob".into(); n]))?;
    save_csv(&ds, &out)?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}
