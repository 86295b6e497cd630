//! Run configuration: a TOML file with one table per concern. Every key is
//! optional and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ControlPointSet, Geometry, KernelSpec, PixelGrid};
use crate::model::{HyperConfig, UpdateMode};
use crate::saem::{EngineConfig, StepSchedule, TruncationConfig};

/// Every accepted key with its default, as printed by `--help`.
pub const CONFIG_KEYS: &str = "\
[geometry]
  width = 16                  pixel columns
  height = 16                 pixel rows
  phot_per_axis = 15          photometric control points per axis
  phot_half_extent = 1.5      photometric lattice spans [-e, e]^2
  phot_bandwidth = 0.12       photometric kernel width sigma_p
  geom_per_axis = 6           geometric control points per axis
  geom_half_extent = 1.0      geometric lattice spans [-e, e]^2
  geom_bandwidth = 0.3        geometric kernel width sigma_g
[hyper]
  a_p = 3.0                   noise prior weight
  a_g = 0.1                   deformation covariance prior weight
  sigma0_sq = 0.1             noise prior scale
  r_bound = 1e6               bound on |alpha|, warned about when exceeded
  strict_a_g = false          require a_g >= 4 k_g + 1
[schedule]
  heating = 150               iterations with step size 1
  decay = 0.6                 step size exponent d
  eps_decay = 0.55            distance bound exponent c', needs 1/2 < c' < d <= 1
  total_iters = 200           iteration budget
  sweeps = 1                  Gibbs sweeps per iteration
[truncation]
  base_radius                 radius of the first compact (default 10 max(|s0|, 1))
  growth = 2.0                radius factor per projection
  eps0                        initial distance bound (default 10 max(|s0|, 1))
  beta_radius = 10.0          radius of the initial deformation ball
  max_projections = 50        abort after this many projections
[run]
  mode = \"full\"               \"full\" or \"fixed_sigma\"
  fixed_sigma_sq = 0.1        noise variance used in fixed_sigma mode
  seed = 0
  workers = 0                 worker threads, 0 for all cores
[data]
  path                        dataset file or directory
  format = \"csv_matrix\"       \"csv_matrix\" or \"pgm_dir\"
  normalization = \"source\"    \"source\", \"identity\" or \"range\"
  range = [0.0, 255.0]        source interval mapped to [0, 2] when normalization = \"range\"
[output]
  dir                         output directory; --out wins, then this key, then
                              DEFTEMPLATE_OUT, then \"out\"
";

/// Lattices, grid and kernel widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub width: usize,
    pub height: usize,
    pub phot_per_axis: usize,
    pub phot_half_extent: f64,
    pub phot_bandwidth: f64,
    pub geom_per_axis: usize,
    pub geom_half_extent: f64,
    pub geom_bandwidth: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            width: 16,
            height: 16,
            phot_per_axis: 15,
            phot_half_extent: 1.5,
            phot_bandwidth: 0.12,
            geom_per_axis: 6,
            geom_half_extent: 1.0,
            geom_bandwidth: 0.3,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> Result<Geometry> {
        for (name, e) in [
            ("phot_half_extent", self.phot_half_extent),
            ("geom_half_extent", self.geom_half_extent),
        ] {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!("geometry.{name} must be positive, got {e}")));
            }
        }
        Geometry::new(
            PixelGrid::new(self.width, self.height)?,
            ControlPointSet::square_lattice(self.phot_per_axis, self.phot_half_extent)?,
            ControlPointSet::square_lattice(self.geom_per_axis, self.geom_half_extent)?,
            KernelSpec::gaussian(self.phot_bandwidth)?,
            KernelSpec::gaussian(self.geom_bandwidth)?,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperSection {
    pub a_p: f64,
    pub a_g: f64,
    pub sigma0_sq: f64,
    pub r_bound: f64,
    pub strict_a_g: bool,
}

impl Default for HyperSection {
    fn default() -> Self {
        let h = HyperConfig::default();
        Self {
            a_p: h.a_p,
            a_g: h.a_g,
            sigma0_sq: h.sigma0_sq,
            r_bound: h.r_bound,
            strict_a_g: h.strict_a_g,
        }
    }
}

impl From<HyperSection> for HyperConfig {
    fn from(h: HyperSection) -> Self {
        HyperConfig {
            sigma0_sq: h.sigma0_sq,
            a_p: h.a_p,
            a_g: h.a_g,
            r_bound: h.r_bound,
            strict_a_g: h.strict_a_g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub heating: usize,
    pub decay: f64,
    pub eps_decay: f64,
    pub total_iters: usize,
    pub sweeps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = StepSchedule::default();
        Self {
            heating: s.heating,
            decay: s.decay,
            eps_decay: s.eps_decay,
            total_iters: 200,
            sweeps: 1,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            heating: self.heating,
            decay: self.decay,
            eps_decay: self.eps_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationSection {
    pub base_radius: Option<f64>,
    pub growth: f64,
    pub eps0: Option<f64>,
    pub beta_radius: f64,
    pub max_projections: usize,
}

impl Default for TruncationSection {
    fn default() -> Self {
        let t = TruncationConfig::default();
        Self {
            base_radius: t.base_radius,
            growth: t.growth,
            eps0: t.eps0,
            beta_radius: t.beta_radius,
            max_projections: t.max_projections,
        }
    }
}

impl From<TruncationSection> for TruncationConfig {
    fn from(t: TruncationSection) -> Self {
        TruncationConfig {
            base_radius: t.base_radius,
            growth: t.growth,
            eps0: t.eps0,
            beta_radius: t.beta_radius,
            max_projections: t.max_projections,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeName {
    Full,
    FixedSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: ModeName,
    pub fixed_sigma_sq: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            mode: ModeName::Full,
            fixed_sigma_sq: 0.1,
            seed: 0,
            workers: 0,
        }
    }
}

impl RunSection {
    pub fn update_mode(&self) -> UpdateMode {
        match self.mode {
            ModeName::Full => UpdateMode::Full,
            ModeName::FixedSigma => UpdateMode::FixedSigma {
                sigma_sq: self.fixed_sigma_sq,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    PgmDir,
    CsvMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationName {
    Source,
    Identity,
    Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    pub normalization: NormalizationName,
    pub range: [f64; 2],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            format: DataFormat::CsvMatrix,
            normalization: NormalizationName::Source,
            range: [0.0, 255.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySection,
    pub hyper: HyperSection,
    pub schedule: ScheduleSection,
    pub truncation: TruncationSection,
    pub run: RunSection,
    pub data: DataSection,
    pub output: OutputSection,
}

/// `GeometryConfig` with per-key defaults for the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub width: usize,
    pub height: usize,
    pub phot_per_axis: usize,
    pub phot_half_extent: f64,
    pub phot_bandwidth: f64,
    pub geom_per_axis: usize,
    pub geom_half_extent: f64,
    pub geom_bandwidth: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        let g = GeometryConfig::default();
        Self {
            width: g.width,
            height: g.height,
            phot_per_axis: g.phot_per_axis,
            phot_half_extent: g.phot_half_extent,
            phot_bandwidth: g.phot_bandwidth,
            geom_per_axis: g.geom_per_axis,
            geom_half_extent: g.geom_half_extent,
            geom_bandwidth: g.geom_bandwidth,
        }
    }
}

impl From<GeometrySection> for GeometryConfig {
    fn from(g: GeometrySection) -> Self {
        GeometryConfig {
            width: g.width,
            height: g.height,
            phot_per_axis: g.phot_per_axis,
            phot_half_extent: g.phot_half_extent,
            phot_bandwidth: g.phot_bandwidth,
            geom_per_axis: g.geom_per_axis,
            geom_half_extent: g.geom_half_extent,
            geom_bandwidth: g.geom_bandwidth,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn geometry(&self) -> GeometryConfig {
        self.geometry.into()
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            schedule: self.schedule.schedule(),
            truncation: self.truncation.into(),
            mode: self.run.update_mode(),
            sweeps: self.schedule.sweeps,
            seed: self.run.seed,
            workers: self.run.workers,
        }
    }

    /// Checks every downstream precondition that does not need the data.
    /// Returns the geometry so callers need not rebuild it.
    pub fn validate(&self) -> Result<Geometry> {
        let as_config = |e: Error| match e {
            Error::Config(_) | Error::Schedule(_) => e,
            other => Error::Config(other.to_string()),
        };
        let geometry = self.geometry().build().map_err(as_config)?;
        crate::model::HyperParams::from_geometry(&geometry, &self.hyper.into()).map_err(as_config)?;
        self.schedule.schedule().validate()?;
        if self.schedule.sweeps == 0 {
            return Err(Error::Config("schedule.sweeps must be at least 1".into()));
        }
        TruncationConfig::from(self.truncation).validate().map_err(as_config)?;
        if self.run.mode == ModeName::FixedSigma
            && !(self.run.fixed_sigma_sq.is_finite() && self.run.fixed_sigma_sq > 0.0)
        {
            return Err(Error::Config(format!(
                "run.fixed_sigma_sq must be positive, got {}",
                self.run.fixed_sigma_sq
            )));
        }
        if self.data.normalization == NormalizationName::Range {
            let [lo, hi] = self.data.range;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!("data.range must satisfy lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(geometry)
    }
}
