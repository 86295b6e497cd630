//! Datasets, noise injection, model archives and exported run outputs.

mod archive;
mod dataset;
mod export;
pub mod pgm;

pub use archive::{load_model, save_model, ModelArchive, ThetaRecord, FORMAT_VERSION};
pub use dataset::{bundled_dataset, inject_noise, parse_csv, load_dataset, load_from_section, save_csv, ImageDataset, Normalization};
pub use export::{export_outputs, load_trace, save_trace, write_images, ExportedFiles, TEMPLATE_DIR, TRACE_CSV, TRACE_JSON};
