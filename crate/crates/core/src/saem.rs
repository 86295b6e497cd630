//! Truncated SAEM-MCMC driver.
//!
//! Each iteration runs the Gibbs kernel with the current parameters, moves
//! the sufficient statistics towards the simulated ones with step `Delta`,
//! and re-estimates `theta` in closed form. Whenever the new statistics leave
//! the active compact set `K_kappa` or jump farther than `eps_zeta`, the
//! chain and statistics are restarted from their initial values and the
//! active compact grows.
//!
//! Compact sets are balls of radius `r0 * growth^q` in the flattened
//! statistic space, intersected with the statistic space itself.

use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::gibbs::{gibbs_scan_with, ChainState, ScanDiagnostics, ScanKey, ScanOptions};
use crate::kernel::Geometry;
use crate::model::{
    stats_in_space, update_parameters_from, DatasetSummary, HyperParams, ModelParams, SufficientStats,
    UpdateMode,
};

/// Step sizes `Delta_k` with a heating period and the truncation distances
/// `eps_k` that go with them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    /// Number of initial iterations with `Delta_k = 1`.
    pub heating: usize,
    /// `Delta_k = (k - heating)^(-decay)` after heating.
    pub decay: f64,
    /// `eps_k = eps0 * (k - heating)^(-eps_decay)` after heating.
    pub eps_decay: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            heating: 150,
            decay: 0.6,
            eps_decay: 0.55,
        }
    }
}

/// Summability analysis of a `(decay, eps_decay)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Admissibility {
    pub admissible: bool,
    /// Smallest integer `p >= 2` with `sum (Delta_k / eps_k)^p < inf`.
    pub p: Option<u32>,
    /// An exponent `a in (0, 1)` with `sum Delta_k eps_k^a < inf`.
    pub a: Option<f64>,
    pub problems: Vec<String>,
}

impl StepSchedule {
    pub fn step_size(&self, k: usize) -> f64 {
        step_size(k, self)
    }

    pub fn epsilon(&self, k: usize, eps0: f64) -> f64 {
        if k <= self.heating {
            eps0
        } else {
            eps0 * ((k - self.heating) as f64).powf(-self.eps_decay)
        }
    }

    /// Checks that `sum Delta = inf`, `eps -> 0`, and that
    /// `sum Delta^2 + Delta eps^a + (Delta / eps)^p` converges for some
    /// `a in (0, 1)` and `p >= 2`. With power-law tails this reduces to
    /// `1/2 < eps_decay < decay <= 1`.
    pub fn admissibility(&self) -> Admissibility {
        let (d, c) = (self.decay, self.eps_decay);
        let mut problems = Vec::new();
        if !(d.is_finite() && c.is_finite()) {
            problems.push("exponents must be finite".to_string());
            return Admissibility {
                admissible: false,
                p: None,
                a: None,
                problems,
            };
        }
        if d > 1.0 {
            problems.push(format!("decay d = {d} > 1 makes sum Delta_k finite"));
        }
        if d <= 0.5 {
            problems.push(format!("decay d = {d} <= 1/2 makes sum Delta_k^2 diverge"));
        }
        if c <= 0.5 {
            problems.push(format!("eps decay c' = {c} must exceed 1/2"));
        }
        if c >= d {
            problems.push(format!(
                "eps decay c' = {c} must be strictly below decay d = {d}, otherwise Delta_k / eps_k does not vanish"
            ));
        }
        // Delta eps^a ~ k^-(d + a c): summable once a > (1 - d) / c.
        let a = if c > 0.0 {
            let lo = ((1.0 - d) / c).max(0.0);
            (lo < 1.0).then(|| (lo + 1.0) / 2.0)
        } else {
            None
        };
        if a.is_none() {
            problems.push("no a in (0, 1) makes sum Delta_k eps_k^a finite".to_string());
        }
        let p = (d > c).then(|| {
            let gap = d - c;
            let mut p = 2u32;
            while f64::from(p) * gap <= 1.0 {
                p += 1;
            }
            p
        });
        Admissibility {
            admissible: problems.is_empty(),
            p,
            a,
            problems,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let adm = self.admissibility();
        if adm.admissible {
            Ok(())
        } else {
            Err(Error::Schedule(adm.problems.join("; ")))
        }
    }
}

/// `Delta_k = 1` during heating, `(k - k_h)^(-d)` afterwards. `k >= 1`.
pub fn step_size(k: usize, schedule: &StepSchedule) -> f64 {
    if k <= schedule.heating {
        1.0
    } else {
        ((k - schedule.heating) as f64).powf(-schedule.decay)
    }
}

/// `s + delta (s_new - s)`.
pub fn sa_update(s: &SufficientStats, s_new: &SufficientStats, delta: f64) -> SufficientStats {
    SufficientStats {
        s1: &s.s1 + (&s_new.s1 - &s.s1) * delta,
        s2: &s.s2 + (&s_new.s2 - &s.s2) * delta,
        s3: &s.s3 + (&s_new.s3 - &s.s3) * delta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationConfig {
    /// Radius of `K_0`; defaults to `10 |s_0|`.
    pub base_radius: Option<f64>,
    /// `K_q` has radius `base_radius * growth^q`.
    pub growth: f64,
    /// `eps_0`; defaults to `10 |s_0|`.
    pub eps0: Option<f64>,
    /// Radius of the ball `K` that must contain the initial deformations.
    pub beta_radius: f64,
    pub max_projections: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            base_radius: None,
            growth: 2.0,
            eps0: None,
            beta_radius: 10.0,
            max_projections: 50,
        }
    }
}

impl TruncationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth.is_finite() && self.growth > 1.0) {
            return Err(Error::InvalidParameter(format!(
                "truncation growth must exceed 1, got {}",
                self.growth
            )));
        }
        for (name, v) in [("base_radius", self.base_radius), ("eps0", self.eps0)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if !(self.beta_radius.is_finite() && self.beta_radius >= 0.0) {
            return Err(Error::InvalidParameter("beta_radius must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Truncation settings with the data-dependent defaults filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTruncation {
    pub base_radius: f64,
    pub growth: f64,
    pub eps0: f64,
    pub max_projections: usize,
}

impl ResolvedTruncation {
    pub fn resolve(cfg: &TruncationConfig, s0: &SufficientStats) -> Result<Self> {
        cfg.validate()?;
        let scale = 10.0 * s0.norm().max(1.0);
        Ok(Self {
            base_radius: cfg.base_radius.unwrap_or(scale),
            growth: cfg.growth,
            eps0: cfg.eps0.unwrap_or(scale),
            max_projections: cfg.max_projections,
        })
    }

    pub fn radius(&self, q: usize) -> f64 {
        self.base_radius * self.growth.powi(q as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionReason {
    NonFinite,
    OutsideCompact,
    OutsideSpace,
    TooFar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationDecision {
    Accept,
    Project(ProjectionReason),
}

/// Accept iff `s_bar` lies in `K_kappa` and `|s_bar - s_prev| <= eps_{zeta+1}`.
pub fn truncation_test(
    s_bar: &SufficientStats,
    s_prev: &SufficientStats,
    kappa: usize,
    zeta: usize,
    trunc: &ResolvedTruncation,
    schedule: &StepSchedule,
    hyper: &HyperParams,
) -> TruncationDecision {
    if !s_bar.is_finite() {
        return TruncationDecision::Project(ProjectionReason::NonFinite);
    }
    if s_bar.norm() > trunc.radius(kappa) {
        return TruncationDecision::Project(ProjectionReason::OutsideCompact);
    }
    if s_bar.distance(s_prev) > schedule.epsilon(zeta + 1, trunc.eps0) {
        return TruncationDecision::Project(ProjectionReason::TooFar);
    }
    if !stats_in_space(s_bar, hyper) {
        return TruncationDecision::Project(ProjectionReason::OutsideSpace);
    }
    TruncationDecision::Accept
}

/// Chain, statistics and truncation counters of the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub s: SufficientStats,
    pub chain: ChainState,
    /// Index of the active compact set.
    pub kappa: usize,
    /// Index into the step-size and `eps` sequences.
    pub zeta: usize,
    /// Iterations since the last projection.
    pub nu: usize,
    pub theta: ModelParams,
    pub iteration: usize,
}

/// Restart point used by every projection.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub s0: SufficientStats,
    pub chain0: ChainState,
}

/// Restores `(beta_0, s_0)`, enlarges the active compact and resets `nu`.
/// `zeta` is held, i.e. `phi = 0`.
pub fn project(state: &mut EngineState, initial: &InitialState, max_projections: usize) -> Result<()> {
    if state.kappa + 1 > max_projections {
        return Err(Error::TooManyProjections {
            projections: state.kappa + 1,
            max: max_projections,
        });
    }
    state.s = initial.s0.clone();
    state.chain = initial.chain0.clone();
    state.kappa += 1;
    state.nu = 0;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub alpha: Vec<f64>,
    pub sigma_sq: f64,
    pub gamma_g_diag: Vec<f64>,
    pub gamma_g_trace: f64,
    pub mean_acceptance: f64,
    pub acceptance_x: f64,
    pub acceptance_y: f64,
    /// Step size used for this iteration's update.
    pub step_size: f64,
    /// Distance bound the update was tested against.
    pub epsilon: f64,
    /// `|s_bar - s_{k-1}|`.
    pub stats_distance: f64,
    /// `|s_k|` after the truncation decision.
    pub stats_norm: f64,
    /// Norm of the `S1` block of `s_k`.
    pub s1_norm: f64,
    pub accepted: bool,
    pub kappa: usize,
    pub zeta: usize,
    pub nu: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEvent {
    pub iteration: usize,
    pub reason: ProjectionReason,
    pub kappa: usize,
    pub zeta: usize,
    pub nu_before: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationTrace {
    pub schedule: StepSchedule,
    pub truncation: Option<ResolvedTruncation>,
    pub records: Vec<IterationRecord>,
    pub projections: Vec<ProjectionEvent>,
}

impl EstimationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Observed data and the fixed model ingredients.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub images: &'a [DVector<f64>],
    pub geometry: &'a Geometry,
    pub hyper: &'a HyperParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub schedule: StepSchedule,
    pub truncation: TruncationConfig,
    pub mode: UpdateMode,
    /// Gibbs sweeps per iteration.
    pub sweeps: usize,
    pub seed: u64,
    /// Worker threads for per-image work; 0 uses the ambient rayon pool.
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::default(),
            truncation: TruncationConfig::default(),
            mode: UpdateMode::Full,
            sweeps: 1,
            seed: 0,
            workers: 0,
        }
    }
}

/// Outcome of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Projected(ProjectionReason),
}

pub struct SaemEngine<'a> {
    problem: Problem<'a>,
    config: EngineConfig,
    summary: DatasetSummary,
    truncation: ResolvedTruncation,
    initial: InitialState,
    state: EngineState,
    trace: EstimationTrace,
    pool: Option<Arc<rayon::ThreadPool>>,
}

/// Statistics of a chain state, reduced in image order.
pub fn chain_statistics(chain: &ChainState, images: &[DVector<f64>], geometry: &Geometry) -> Result<SufficientStats> {
    check_len("image count", chain.len(), images.len())?;
    let parts: Vec<SufficientStats> = chain
        .chains()
        .par_iter()
        .zip(images.par_iter())
        .map(|(c, y)| {
            let design = geometry.design_matrix_from_field(c.field());
            SufficientStats::from_image(c.beta(), &design, y)
        })
        .collect::<Result<_>>()?;
    let mut acc = SufficientStats::zeros(geometry.k_p(), geometry.beta_len());
    for p in &parts {
        acc.add_assign(p);
    }
    Ok(acc)
}

impl<'a> SaemEngine<'a> {
    /// Starts from `beta = 0` for every image.
    pub fn new(problem: Problem<'a>, config: EngineConfig) -> Result<Self> {
        let zeros = vec![DVector::zeros(problem.geometry.beta_len()); problem.images.len()];
        Self::with_initial_betas(problem, config, zeros)
    }

    pub fn with_initial_betas(problem: Problem<'a>, config: EngineConfig, betas0: Vec<DVector<f64>>) -> Result<Self> {
        let summary = DatasetSummary::from_images(problem.images)?;
        let geometry = problem.geometry;
        check_len("image length", geometry.pixel_count(), summary.pixel_count)?;
        check_len("template coefficients", geometry.k_p(), problem.hyper.k_p())?;
        check_len("deformation coefficients", geometry.beta_len(), problem.hyper.beta_len())?;
        config.schedule.validate()?;
        config.truncation.validate()?;
        if config.sweeps == 0 {
            return Err(Error::InvalidParameter("at least one Gibbs sweep per iteration".into()));
        }
        if let UpdateMode::FixedSigma { sigma_sq } = config.mode {
            if !(sigma_sq.is_finite() && sigma_sq > 0.0) {
                return Err(Error::InvalidParameter(format!("fixed sigma^2 must be positive, got {sigma_sq}")));
            }
        }
        for b in &betas0 {
            if b.norm() > config.truncation.beta_radius {
                return Err(Error::InvalidParameter(format!(
                    "initial deformation norm {} exceeds the initial ball radius {}",
                    b.norm(),
                    config.truncation.beta_radius
                )));
            }
        }
        let pool = match config.workers {
            0 => None,
            w => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build()
                    .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?,
            )),
        };
        let run = || -> Result<(InitialState, ModelParams, ResolvedTruncation)> {
            let provisional = DVector::zeros(geometry.k_p());
            let chain0 = ChainState::new(betas0, problem.images, &provisional, geometry)?;
            let s0 = chain_statistics(&chain0, problem.images, geometry)?;
            if !stats_in_space(&s0, problem.hyper) {
                return Err(Error::InvalidParameter("initial statistics are outside the statistic space".into()));
            }
            let truncation = ResolvedTruncation::resolve(&config.truncation, &s0)?;
            let theta0 = update_parameters_from(&s0, problem.hyper, &summary, config.mode, None)?;
            Ok((InitialState { s0, chain0 }, theta0, truncation))
        };
        let (initial, theta, truncation) = match &pool {
            Some(p) => p.install(run)?,
            None => run()?,
        };
        let state = EngineState {
            s: initial.s0.clone(),
            chain: initial.chain0.clone(),
            kappa: 0,
            zeta: 0,
            nu: 0,
            theta,
            iteration: 0,
        };
        Ok(Self {
            problem,
            config,
            summary,
            truncation,
            initial,
            state,
            trace: EstimationTrace {
                schedule: config.schedule,
                truncation: Some(truncation),
                records: Vec::new(),
                projections: Vec::new(),
            },
            pool,
        })
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn initial(&self) -> &InitialState {
        &self.initial
    }

    pub fn truncation(&self) -> &ResolvedTruncation {
        &self.truncation
    }

    pub fn trace(&self) -> &EstimationTrace {
        &self.trace
    }

    pub fn summary(&self) -> &DatasetSummary {
        &self.summary
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Simulation step: `m` Gibbs sweeps from the current chain with `theta_{k-1}`.
    pub fn simulate(&self) -> Result<(ChainState, ScanDiagnostics)> {
        let mut candidate = self.state.chain.clone();
        let key = ScanKey {
            seed: self.config.seed,
            epoch: self.state.iteration as u64 + 1,
        };
        let opts = ScanOptions {
            sweeps: self.config.sweeps,
            hook: None,
        };
        let p = self.problem;
        let theta = &self.state.theta;
        let diag = self.in_pool(|| gibbs_scan_with(&mut candidate, p.images, theta, p.geometry, key, opts))?;
        Ok((candidate, diag))
    }

    /// One full iteration: simulation, stochastic approximation, truncation
    /// and maximisation.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let (candidate, diag) = self.simulate()?;
        let p = self.problem;
        let stats = self.in_pool(|| chain_statistics(&candidate, p.images, p.geometry))?;
        self.advance(candidate, stats, &diag)
    }

    /// Steps 2 to 4 given a simulated chain state and its statistics. Exposed
    /// so that statistic streams can be injected directly.
    pub fn advance(&mut self, candidate: ChainState, stats: SufficientStats, diag: &ScanDiagnostics) -> Result<StepOutcome> {
        let k = self.state.iteration + 1;
        let schedule = self.config.schedule;
        let delta = schedule.step_size(self.state.zeta + 1);
        let epsilon = schedule.epsilon(self.state.zeta + 1, self.truncation.eps0);
        let s_bar = sa_update(&self.state.s, &stats, delta);
        let distance = s_bar.distance(&self.state.s);
        let decision = truncation_test(
            &s_bar,
            &self.state.s,
            self.state.kappa,
            self.state.zeta,
            &self.truncation,
            &schedule,
            self.problem.hyper,
        );
        let outcome = match decision {
            TruncationDecision::Accept => {
                self.state.s = s_bar;
                self.state.chain = candidate;
                self.state.nu += 1;
                self.state.zeta += 1;
                StepOutcome::Accepted
            }
            TruncationDecision::Project(reason) => {
                let nu_before = self.state.nu;
                project(&mut self.state, &self.initial, self.truncation.max_projections)?;
                self.trace.projections.push(ProjectionEvent {
                    iteration: k,
                    reason,
                    kappa: self.state.kappa,
                    zeta: self.state.zeta,
                    nu_before,
                });
                StepOutcome::Projected(reason)
            }
        };
        let warm = Some(self.state.theta.sigma_sq);
        self.state.theta = update_parameters_from(&self.state.s, self.problem.hyper, &self.summary, self.config.mode, warm)?;
        self.state.iteration = k;

        let (ax, ay) = diag.block_acceptance();
        let theta = &self.state.theta;
        self.trace.records.push(IterationRecord {
            iteration: k,
            alpha: theta.alpha.iter().copied().collect(),
            sigma_sq: theta.sigma_sq,
            gamma_g_diag: theta.gamma_g.diagonal().iter().copied().collect(),
            gamma_g_trace: theta.gamma_g.trace(),
            mean_acceptance: diag.mean_acceptance(),
            acceptance_x: ax,
            acceptance_y: ay,
            step_size: delta,
            epsilon,
            stats_distance: distance,
            stats_norm: self.state.s.norm(),
            s1_norm: self.state.s.s1.norm(),
            accepted: outcome == StepOutcome::Accepted,
            kappa: self.state.kappa,
            zeta: self.state.zeta,
            nu: self.state.nu,
        });
        Ok(outcome)
    }

    pub fn run(mut self, iterations: usize) -> Result<(ModelParams, EstimationTrace)> {
        for _ in 0..iterations {
            self.step()?;
        }
        Ok((self.state.theta, self.trace))
    }
}

/// Runs `total_iters` iterations from `beta = 0` and returns the final
/// parameters with the full trace.
pub fn run_estimation(problem: Problem<'_>, config: EngineConfig, total_iters: usize) -> Result<(ModelParams, EstimationTrace)> {
    SaemEngine::new(problem, config)?.run(total_iters)
}
