use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::pgm::read_pgm;
use crate::config::{DataFormat, DataSection, NormalizationName};
use crate::error::{Error, Result};
use crate::kernel::PixelGrid;
use crate::rng::{stream, Domain};

/// How stored samples become model intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// PGM: `[0, maxval]` maps to `[0, 2]`. CSV values are taken as they are.
    Source,
    Identity,
    /// `[lo, hi]` maps affinely to `[0, 2]`; values outside are not clamped.
    Range { lo: f64, hi: f64 },
}

impl Normalization {
    fn apply(&self, v: f64, maxval: Option<f64>) -> f64 {
        match (*self, maxval) {
            (Normalization::Source, Some(m)) => 2.0 * v / m,
            (Normalization::Source, None) | (Normalization::Identity, _) => v,
            (Normalization::Range { lo, hi }, _) => 2.0 * (v - lo) / (hi - lo),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Normalization::Range { lo, hi } = *self {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidParameter(format!(
                    "normalization range needs lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Images flattened row-major, `u = row * width + col`, row 0 first in the
/// file and at `y = -1` on the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub images: Vec<DVector<f64>>,
    pub width: usize,
    pub height: usize,
    pub labels: Option<Vec<String>>,
}

impl ImageDataset {
    pub fn new(images: Vec<DVector<f64>>, width: usize, height: usize, labels: Option<Vec<String>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset("no images".into()));
        }
        for img in &images {
            crate::error::check_len("image length", width * height, img.len())?;
        }
        if let Some(l) = &labels {
            crate::error::check_len("label count", images.len(), l.len())?;
        }
        Ok(Self {
            images,
            width,
            height,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn grid(&self) -> Result<PixelGrid> {
        PixelGrid::new(self.width, self.height)
    }
}

pub fn load_dataset(path: &Path, format: DataFormat, normalization: Normalization) -> Result<ImageDataset> {
    normalization.validate()?;
    match format {
        DataFormat::PgmDir => load_pgm_dir(path, normalization),
        DataFormat::CsvMatrix => load_csv(path, normalization),
    }
}

/// Loads the dataset named by a config `[data]` table.
pub fn load_from_section(data: &DataSection) -> Result<ImageDataset> {
    let path = data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("data.path is not set".into()))?;
    let normalization = match data.normalization {
        NormalizationName::Source => Normalization::Source,
        NormalizationName::Identity => Normalization::Identity,
        NormalizationName::Range => Normalization::Range {
            lo: data.range[0],
            hi: data.range[1],
        },
    };
    load_dataset(path, data.format, normalization)
}

fn load_pgm_dir(dir: &Path, normalization: Normalization) -> Result<ImageDataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) && p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyDataset(format!("no .pgm files in {}", dir.display())));
    }
    let maps = files.par_iter().map(|p| read_pgm(p)).collect::<Result<Vec<_>>>()?;
    let (width, height) = (maps[0].width, maps[0].height);
    let mut images = Vec::with_capacity(maps.len());
    for (map, path) in maps.iter().zip(&files) {
        if (map.width, map.height) != (width, height) {
            return Err(Error::malformed(
                path,
                format!("size {}x{} differs from {width}x{height}", map.width, map.height),
            ));
        }
        let m = map.maxval as f64;
        images.push(DVector::from_iterator(
            map.samples.len(),
            map.samples.iter().map(|&s| normalization.apply(s as f64, Some(m))),
        ));
    }
    ImageDataset::new(images, width, height, None)
}

fn parse_pixel_header(name: &str) -> Option<(usize, usize)> {
    let (r, c) = name.strip_prefix('p')?.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

fn load_csv(path: &Path, normalization: Normalization) -> Result<ImageDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file, path, normalization)
}

/// Reads the CSV layout from any reader; `path` only labels errors.
pub fn parse_csv<R: std::io::Read>(input: R, path: &Path, normalization: Normalization) -> Result<ImageDataset> {
    normalization.validate()?;
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| Error::malformed(path, e.to_string()))?.clone();
    let has_label = headers.get(0) == Some("label");
    let offset = has_label as usize;
    let mut cells = Vec::new();
    for name in headers.iter().skip(offset) {
        cells.push(
            parse_pixel_header(name)
                .ok_or_else(|| Error::malformed(path, format!("column `{name}` is not of the form p<row>_<col>")))?,
        );
    }
    let height = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let width = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if cells.is_empty() || cells.len() != width * height {
        return Err(Error::malformed(path, "pixel columns do not form a full grid"));
    }
    for (u, &(r, c)) in cells.iter().enumerate() {
        if r * width + c != u {
            return Err(Error::malformed(path, format!("column p{r}_{c} is out of row-major order")));
        }
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(Error::malformed(path, format!("row {} has {} fields", line + 1, record.len())));
        }
        if has_label {
            labels.push(record[0].to_string());
        }
        let mut img = DVector::zeros(cells.len());
        for (u, field) in record.iter().skip(offset).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::malformed(path, format!("row {}: `{field}` is not a number", line + 1)))?;
            img[u] = normalization.apply(v, None);
        }
        images.push(img);
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no rows", path.display())));
    }
    ImageDataset::new(images, width, height, has_label.then_some(labels))
}

const BUNDLED: &str = include_str!("../../data/synthetic.csv");

/// Twenty noisy 16x16 images of a deformed blob, shipped with the crate and
/// used when no dataset path is configured. See `examples/make_dataset.rs`.
pub fn bundled_dataset() -> Result<ImageDataset> {
    parse_csv(BUNDLED.as_bytes(), Path::new("<bundled synthetic.csv>"), Normalization::Source)
}

/// Writes the values exactly as stored, in the layout `load_dataset` reads.
pub fn save_csv(dataset: &ImageDataset, path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| Error::malformed(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    let mut header: Vec<String> = Vec::new();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    for r in 0..dataset.height {
        for c in 0..dataset.width {
            header.push(format!("p{r}_{c}"));
        }
    }
    w.write_record(&header).map_err(to_err)?;
    for (i, img) in dataset.images.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(l) = &dataset.labels {
            row.push(l[i].clone());
        }
        row.extend(img.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Adds i.i.d. `N(0, sigma_sq)` noise to every pixel without clamping.
/// Image `i` draws from its own stream, so results do not depend on `n`.
pub fn inject_noise(dataset: &ImageDataset, sigma_sq: f64, seed: u64) -> Result<ImageDataset> {
    if !(sigma_sq.is_finite() && sigma_sq >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise variance must be nonnegative, got {sigma_sq}")));
    }
    let mut out = dataset.clone();
    if sigma_sq == 0.0 {
        return Ok(out);
    }
    let sd = sigma_sq.sqrt();
    for (i, img) in out.images.iter_mut().enumerate() {
        let mut rng = stream(seed, Domain::Noise, 1, i as u64);
        for v in img.iter_mut() {
            *v += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}
