//! Desk-scale experiment harness: cycle sheaves, coverage regimes, metrics,
//! seed aggregation and table rendering for the three recovery studies
//! (formation transfer, bounded-confidence threshold, finite monomial basis).
//!
//! Everything here runs in `f64`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coboundary::CoboundaryOperator;
use crate::cochain::{Cochain0, Cochain1};
use crate::dynamics::{derive_seed, integrate, SimConfig, Trajectory};
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::potentials::{EdgePotential, NodeField, ParametricFamily};
use crate::sheaf::{EdgeStalk, Sheaf};
use crate::sysid::{
    fit_linear, fit_threshold, information_scalar, residuals_exact, residuals_fd, ResidualDataset, ResidualSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    FormationTransfer,
    BoundedConfidence,
    FiniteBasis,
}

/// Sheaf A has identity tail maps, Sheaf B rotated ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SheafVariant {
    Identity,
    Rotated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Broad,
    Localized,
    Limited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    Observed,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisVariant {
    Correct,
    Augmented,
}

impl ExperimentId {
    /// The snake_case name used in configs and output file names.
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FormationTransfer => "formation_transfer",
            Self::BoundedConfidence => "bounded_confidence",
            Self::FiniteBasis => "finite_basis",
        }
    }
}

impl fmt::Display for SheafVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Identity => "Sheaf A",
            Self::Rotated => "Sheaf B",
        })
    }
}

impl fmt::Display for Coverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Broad => "Broad",
            Self::Localized => "Localized",
            Self::Limited => "Limited",
        })
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Observed => "Obs.",
            Self::FiniteDifference => "FD",
        })
    }
}

impl fmt::Display for BasisVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Correct => "Correct",
            Self::Augmented => "Augmented",
        })
    }
}

/// Tail-map rotation used for Sheaf B. Any angle with `n·α ∉ 2πℤ` kills H¹.
pub const DEFAULT_ROTATION: f64 = PI / 4.0;

fn rotation(angle: f64) -> DMatrix<f64> {
    let (s, c) = angle.sin_cos();
    DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
}

/// Directed n-cycle with ℝ² stalks, identity Grams and head maps; tail maps
/// are the identity (Sheaf A) or a rotation by `angle` (Sheaf B). The
/// cohomology is checked (dim H¹ = 2 resp. 0) before returning.
pub fn make_cycle_sheaf(n: usize, variant: SheafVariant, angle: f64) -> Result<Sheaf<f64>> {
    if n < 3 {
        return Err(Error::Config(format!("cycle length must be at least 3, got {n}")));
    }
    let tail = match variant {
        SheafVariant::Identity => DMatrix::identity(2, 2),
        SheafVariant::Rotated => rotation(angle),
    };
    let stalks = (0..n)
        .map(|_| EdgeStalk::new(DMatrix::identity(2, 2), tail.clone()))
        .collect();
    let sheaf = Sheaf::new(DirectedGraph::cycle(n)?, vec![2; n], stalks)?;
    let op = CoboundaryOperator::build(&sheaf)?;
    let h1 = op.harmonic_basis(1e-10)?.dim();
    let expected = match variant {
        SheafVariant::Identity => 2,
        SheafVariant::Rotated => 0,
    };
    if h1 != expected {
        return Err(Error::Config(format!(
            "{variant} on the {n}-cycle has dim H1 = {h1}, expected {expected} (rotation angle {angle})"
        )));
    }
    Ok(sheaf)
}

/// The 1-cochain with the same 2-vector on every edge.
pub fn constant_edge_cochain(edges: usize, v: [f64; 2]) -> Cochain1<f64> {
    Cochain1::from_vec((0..edges).flat_map(|_| v).collect())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormationParams {
    pub horizon: f64,
    pub beta: f64,
    pub direction: [f64; 2],
}

impl Default for FormationParams {
    fn default() -> Self {
        Self {
            horizon: 4.0,
            beta: 0.6,
            direction: [1.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdParams {
    pub true_threshold: f64,
    /// Broad-coverage initial-condition scales (RMS edge radius).
    pub scales: Vec<f64>,
    /// Edge-radius interval for localized initial conditions.
    pub annulus: [f64; 2],
    pub noise_std: f64,
    pub bracket: [f64; 2],
    /// Keep only localized samples whose edge radii all stay in the annulus.
    pub localized_window: bool,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            true_threshold: 1.0,
            scales: vec![0.4, 0.8, 1.2],
            annulus: [0.95, 1.05],
            noise_std: 5e-3,
            bracket: [0.25, 4.0],
            localized_window: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisParams {
    pub theta: Vec<f64>,
    /// Coefficient of the harmonic constant force in the true law; invisible
    /// to the dynamics, it only enters the augmented-basis comparison.
    pub harmonic_coefficient: f64,
    pub harmonic_direction: [f64; 2],
    pub scales: Vec<f64>,
    /// RMS edge-radius interval along the fixed ray for limited coverage.
    pub limited_radius: [f64; 2],
    pub noise_std: f64,
    pub ridge: f64,
}

impl Default for BasisParams {
    fn default() -> Self {
        Self {
            theta: vec![1.0, 0.25, 0.03],
            harmonic_coefficient: 0.5,
            harmonic_direction: [1.0, 0.0],
            scales: vec![0.4, 0.8, 1.2],
            limited_radius: [0.01, 0.03],
            noise_std: 1e-4,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridParams {
    pub half_width: f64,
    pub points: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            points: 21,
        }
    }
}

/// One experiment run. Empty selection lists mean "every row of the table".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seeds: Vec<u64>,
    pub cycle_lengths: Vec<usize>,
    pub sheaf_variants: Vec<SheafVariant>,
    pub coverage: Vec<Coverage>,
    pub residual_modes: Vec<ResidualMode>,
    pub basis_variants: Vec<BasisVariant>,
    pub rotation_angle: f64,
    pub step: f64,
    /// Trajectory length for the threshold and basis studies.
    pub horizon: f64,
    /// Training trajectories per regime; broad coverage uses this many per scale.
    pub train_trajectories: usize,
    pub holdout_trajectories: usize,
    pub formation: FormationParams,
    pub bounded_confidence: ThresholdParams,
    pub finite_basis: BasisParams,
    pub grid: GridParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::FormationTransfer,
            seeds: (0..8).collect(),
            cycle_lengths: Vec::new(),
            sheaf_variants: Vec::new(),
            coverage: Vec::new(),
            residual_modes: Vec::new(),
            basis_variants: Vec::new(),
            rotation_angle: DEFAULT_ROTATION,
            step: 0.01,
            horizon: 10.0,
            train_trajectories: 8,
            holdout_trajectories: 4,
            formation: FormationParams::default(),
            bounded_confidence: ThresholdParams::default(),
            finite_basis: BasisParams::default(),
            grid: GridParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        Self {
            experiment,
            ..Self::default()
        }
    }

    pub fn cycle_lengths(&self) -> Vec<usize> {
        if !self.cycle_lengths.is_empty() {
            return self.cycle_lengths.clone();
        }
        match self.experiment {
            ExperimentId::FormationTransfer => vec![3, 5],
            _ => vec![3],
        }
    }

    fn or_all<X: Copy>(chosen: &[X], all: &[X]) -> Vec<X> {
        if chosen.is_empty() {
            all.to_vec()
        } else {
            chosen.to_vec()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.cycle_lengths().iter().any(|&n| n < 3) {
            return bad("cycle lengths must be at least 3".into());
        }
        if !(self.step > 0.0) || !(self.horizon >= self.step) || !(self.formation.horizon >= self.step) {
            return bad("step must be positive and horizons at least one step".into());
        }
        if self.grid.points < 1 || !(self.grid.half_width > 0.0) {
            return bad("reference grid needs at least one point and a positive half width".into());
        }
        match self.experiment {
            ExperimentId::FormationTransfer => {
                if !self.coverage.is_empty() || !self.residual_modes.is_empty() || !self.basis_variants.is_empty() {
                    return bad("formation_transfer takes no coverage, residual-mode or basis selection".into());
                }
            }
            ExperimentId::BoundedConfidence => {
                if !self.sheaf_variants.is_empty() && self.sheaf_variants != [SheafVariant::Rotated] {
                    return bad("bounded_confidence runs on the rotated sheaf only".into());
                }
                if self.coverage.contains(&Coverage::Limited) {
                    return bad("limited coverage applies to finite_basis only".into());
                }
                if !self.basis_variants.is_empty() {
                    return bad("basis variants apply to finite_basis only".into());
                }
                let p = &self.bounded_confidence;
                if !(p.true_threshold > 0.0) || !(p.bracket[0] > 0.0 && p.bracket[1] > p.bracket[0]) {
                    return bad("threshold and bracket must be positive with lo < hi".into());
                }
                if p.scales.is_empty() || !(p.annulus[0] > 0.0 && p.annulus[1] >= p.annulus[0]) {
                    return bad("need at least one scale and a valid annulus".into());
                }
            }
            ExperimentId::FiniteBasis => {
                if !self.sheaf_variants.is_empty() && self.sheaf_variants != [SheafVariant::Identity] {
                    return bad("finite_basis runs on the identity sheaf only".into());
                }
                if self.coverage.contains(&Coverage::Localized) {
                    return bad("localized coverage applies to bounded_confidence only".into());
                }
                let p = &self.finite_basis;
                if p.theta.is_empty() || p.scales.is_empty() {
                    return bad("need a nonempty true θ and at least one scale".into());
                }
                if !(p.limited_radius[0] > 0.0 && p.limited_radius[1] >= p.limited_radius[0]) {
                    return bad("invalid limited radius interval".into());
                }
            }
        }
        if self.experiment != ExperimentId::FormationTransfer
            && (self.train_trajectories == 0 || self.holdout_trajectories == 0)
        {
            return bad("need at least one training and one holdout trajectory".into());
        }
        Ok(())
    }

    fn sim(&self, horizon: f64) -> SimConfig<f64> {
        SimConfig {
            step: self.step,
            horizon,
            ..SimConfig::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

/// Seed streams, so every random quantity has its own generator.
mod stream {
    pub const TARGET: u64 = 1;
    pub const INITIAL: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const HOLDOUT: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const RAY: u64 = 6;
}

fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, stream), index))
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// `sqrt(mean_e ‖(δx)_e‖²)`.
pub fn rms_edge_radius(op: &CoboundaryOperator<f64>, x: &DVector<f64>) -> f64 {
    let mut y = DVector::zeros(op.d1());
    op.delta_into(x, &mut y);
    let m = op.edge_space().edge_count().max(1) as f64;
    (op.norm1_squared(&y) / m).sqrt()
}

fn in_annulus(op: &CoboundaryOperator<f64>, y: &Cochain1<f64>, annulus: [f64; 2]) -> bool {
    let space = op.edge_space();
    (0..space.edge_count()).all(|e| {
        let r = space.norm_squared(e, y.block(space.layout(), e)).sqrt();
        r >= annulus[0] && r <= annulus[1]
    })
}

/// Gaussian node noise added to recorded states.
pub fn add_observation_noise(traj: &Trajectory<f64>, std: f64, seed: u64) -> Trajectory<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = traj.clone();
    for s in &mut out.states {
        for v in s.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
    out
}

fn simulate_all(
    op: &CoboundaryOperator<f64>,
    model: &EdgePotential<f64>,
    ics: &[Cochain0<f64>],
    cfg: &SimConfig<f64>,
) -> Result<Vec<Trajectory<f64>>> {
    ics.par_iter()
        .map(|x0| integrate(op, model, &NodeField::Zero, x0, cfg))
        .collect()
}

/// Root mean square of the state difference over every sample, node and
/// coordinate of every paired trajectory.
pub fn rollout_rmse(a: &[Trajectory<f64>], b: &[Trajectory<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ta, tb) in a.iter().zip(b) {
        for (xa, xb) in ta.states.iter().zip(&tb.states) {
            sum += (&xa.0 - &xb.0).norm_squared();
            count += xa.len();
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

fn max_abs_difference(a: &Trajectory<f64>, b: &Trajectory<f64>) -> f64 {
    a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| (&x.0 - &y.0).amax())
        .fold(0.0, f64::max)
}

/// Edge states at which force laws are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSets {
    /// Edge states of held-out trajectories.
    pub holdout: Vec<Cochain1<f64>>,
    /// Every training edge state observed across the coverage regimes of a seed.
    pub pooled: Vec<Cochain1<f64>>,
    /// Seed-independent uniform grid, the same point placed on every edge.
    pub grid: Vec<Cochain1<f64>>,
}

/// `points × points` grid over `[−w, w]²`, replicated on all edges.
pub fn reference_grid(edges: usize, params: &GridParams) -> Vec<Cochain1<f64>> {
    let n = params.points;
    let w = params.half_width;
    let coord = |i: usize| {
        if n == 1 {
            0.0
        } else {
            -w + 2.0 * w * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(constant_edge_cochain(edges, [coord(i), coord(j)]));
        }
    }
    out
}

fn edge_states(op: &CoboundaryOperator<f64>, trajs: &[Trajectory<f64>]) -> Vec<Cochain1<f64>> {
    trajs
        .iter()
        .flat_map(|t| t.states.iter())
        .map(|x| {
            let mut y = DVector::zeros(op.d1());
            op.delta_into(&x.0, &mut y);
            Cochain1(y)
        })
        .collect()
}

/// Mean over evaluation states of `Σ_e ‖Φ̂_e(y_e) − Φ_e(y_e)‖²_e`.
pub fn force_mse_on(
    op: &CoboundaryOperator<f64>,
    truth: &EdgePotential<f64>,
    fitted: &EdgePotential<f64>,
    states: &[Cochain1<f64>],
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Usage("force MSE needs a nonempty evaluation set".into()));
    }
    let space = op.edge_space();
    truth.validate(space)?;
    fitted.validate(space)?;
    let layout = space.layout();
    let mut total = 0.0;
    let (mut a, mut b) = (DVector::zeros(op.d1()), DVector::zeros(op.d1()));
    for y in states {
        truth.force_into(space, &y.0, &mut a);
        fitted.force_into(space, &y.0, &mut b);
        let d = &b - &a;
        for e in 0..space.edge_count() {
            total += space.norm_squared(e, &d.as_slice()[layout.range(e)]);
        }
    }
    Ok(total / states.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceMse {
    pub holdout: f64,
    pub pooled: f64,
    pub grid: f64,
}

/// Force-law MSE on each evaluation set.
pub fn force_mse(
    op: &CoboundaryOperator<f64>,
    truth: &EdgePotential<f64>,
    fitted: &EdgePotential<f64>,
    sets: &EvaluationSets,
) -> Result<ForceMse> {
    Ok(ForceMse {
        holdout: force_mse_on(op, truth, fitted, &sets.holdout)?,
        pooled: force_mse_on(op, truth, fitted, &sets.pooled)?,
        grid: force_mse_on(op, truth, fitted, &sets.grid)?,
    })
}

fn residual_dataset(
    op: &CoboundaryOperator<f64>,
    trajs: &[Trajectory<f64>],
    mode: ResidualMode,
    noise_std: f64,
    seed: u64,
    salt: u64,
) -> Result<ResidualDataset<f64>> {
    let source = match mode {
        ResidualMode::Observed => ResidualSource::Exact,
        ResidualMode::FiniteDifference => ResidualSource::FiniteDifference,
    };
    let noise = if mode == ResidualMode::Observed { 0.0 } else { noise_std };
    let mut data = ResidualDataset::new(source, noise);
    for (i, t) in trajs.iter().enumerate() {
        let part = match mode {
            ResidualMode::Observed => residuals_exact(op, t, &NodeField::Zero)?,
            ResidualMode::FiniteDifference => {
                let noisy = add_observation_noise(
                    t,
                    noise_std,
                    derive_seed(derive_seed(seed, stream::NOISE), salt * 1_000 + i as u64),
                );
                residuals_fd(op, &noisy, &NodeField::Zero, noise_std)?
            }
        };
        data.extend(part);
    }
    Ok(data)
}

/// Mean, sample standard deviation and median.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                median: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            mean,
            std,
            median,
            count: n,
        }
    }
}

// ---------------------------------------------------------------------------
// Formation transfer

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationRow {
    pub cycle_length: usize,
    pub variant: SheafVariant,
    pub dim_h1: usize,
    pub max_rollout_diff: f64,
    pub force_mse: f64,
    /// Max-abs distance of each law's terminal state from the target formation.
    pub terminal_error_recovered: f64,
    pub terminal_error_perturbed: f64,
}

/// A row with its rollouts, for plotting.
#[derive(Debug, Clone)]
pub struct FormationRun {
    pub row: FormationRow,
    pub target: Cochain0<f64>,
    pub recovered: Trajectory<f64>,
    pub perturbed: Trajectory<f64>,
}

/// Simulates the shifted-quadratic law to get a target formation, then rolls
/// out the recovered law `y − b` and the perturbed law `y − b + βc` from the
/// same initial state. Uses the first configured seed.
pub fn run_formation_transfer(cfg: &ExperimentConfig) -> Result<Vec<FormationRun>> {
    cfg.validate()?;
    if cfg.experiment != ExperimentId::FormationTransfer {
        return Err(Error::Config("configuration is not for formation_transfer".into()));
    }
    let seed = cfg.seeds[0];
    let variants = ExperimentConfig::or_all(&cfg.sheaf_variants, &[SheafVariant::Identity, SheafVariant::Rotated]);
    let mut cases = Vec::new();
    for n in cfg.cycle_lengths() {
        for &v in &variants {
            cases.push((n, v));
        }
    }
    cases
        .par_iter()
        .map(|&(n, variant)| formation_case(cfg, seed, n, variant))
        .collect()
}

fn formation_case(cfg: &ExperimentConfig, seed: u64, n: usize, variant: SheafVariant) -> Result<FormationRun> {
    let sheaf = make_cycle_sheaf(n, variant, cfg.rotation_angle)?;
    let op = CoboundaryOperator::build(&sheaf)?;
    let dim_h1 = op.harmonic_basis(1e-10)?.dim();
    let tag = (n as u64) << 1 | u64::from(variant == SheafVariant::Rotated);

    // Targets in im δ, so the shifted-quadratic flow can reach y = b.
    let raw = Cochain1(normal_vec(&mut rng_for(seed, stream::TARGET, tag), op.d1()));
    let pre = op.delta_pseudoinverse_apply(&raw, 1e-10)?;
    let b = op.apply_delta(&pre)?;
    let x0 = Cochain0(normal_vec(&mut rng_for(seed, stream::INITIAL, tag), op.d0()));

    let p = &cfg.formation;
    let sim = cfg.sim(p.horizon);
    let truth = EdgePotential::ShiftedQuadratic { target: b.clone() };
    let target = integrate(&op, &truth, &NodeField::Zero, &x0, &sim)?
        .terminal_state()
        .clone();

    let c = constant_edge_cochain(n, p.direction);
    let perturbed_law = EdgePotential::ShiftedQuadratic {
        target: Cochain1(&b.0 - &c.0 * p.beta),
    };
    let recovered = integrate(&op, &truth, &NodeField::Zero, &x0, &sim)?;
    let perturbed = integrate(&op, &perturbed_law, &NodeField::Zero, &x0, &sim)?;

    let mut states = edge_states(&op, std::slice::from_ref(&recovered));
    states.extend(edge_states(&op, std::slice::from_ref(&perturbed)));
    let fmse = force_mse_on(&op, &truth, &perturbed_law, &states)?;

    let row = FormationRow {
        cycle_length: n,
        variant,
        dim_h1,
        max_rollout_diff: max_abs_difference(&recovered, &perturbed),
        force_mse: fmse,
        terminal_error_recovered: (&recovered.terminal_state().0 - &target.0).amax(),
        terminal_error_perturbed: (&perturbed.terminal_state().0 - &target.0).amax(),
    };
    Ok(FormationRun {
        row,
        target,
        recovered,
        perturbed,
    })
}

// ---------------------------------------------------------------------------
// Initial-condition designs

/// Broad design: trajectory `i` starts at scale `scales[i mod len]`, measured
/// as RMS edge radius of a Gaussian direction.
fn broad_ics(
    op: &CoboundaryOperator<f64>,
    scales: &[f64],
    count: usize,
    seed: u64,
    stream_id: u64,
) -> Vec<Cochain0<f64>> {
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, stream_id, i as u64);
            let z = loop {
                let z = normal_vec(&mut rng, op.d0());
                if rms_edge_radius(op, &z) > 1e-8 {
                    break z;
                }
            };
            let s = scales[i % scales.len()];
            Cochain0(&z * (s / rms_edge_radius(op, &z)))
        })
        .collect()
}

/// Localized design: every edge state starts with radius in the annulus and a
/// uniform angle; the node state is `δ⁺y`.
fn localized_ics(
    op: &CoboundaryOperator<f64>,
    annulus: [f64; 2],
    count: usize,
    seed: u64,
    stream_id: u64,
) -> Result<Vec<Cochain0<f64>>> {
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, stream_id, i as u64);
            let layout = op.edge_space().layout().clone();
            let mut y = Cochain1::zeros(op.d1());
            for e in 0..op.edge_space().edge_count() {
                let r = rng.random_range(annulus[0]..=annulus[1]);
                let phi = rng.random_range(0.0..2.0 * PI);
                let blk = y.block_mut(&layout, e);
                if blk.len() >= 2 {
                    blk[0] = r * phi.cos();
                    blk[1] = r * phi.sin();
                }
            }
            op.delta_pseudoinverse_apply(&y, 1e-10)
        })
        .collect()
}

/// Limited design: positive multiples of one random direction (fixed per
/// seed), with RMS edge radius drawn from `radius`.
fn limited_ics(
    op: &CoboundaryOperator<f64>,
    radius: [f64; 2],
    count: usize,
    seed: u64,
    stream_id: u64,
) -> Vec<Cochain0<f64>> {
    let mut dir_rng = rng_for(seed, stream::RAY, 0);
    let d = loop {
        let d = normal_vec(&mut dir_rng, op.d0());
        let r = rms_edge_radius(op, &d);
        if r > 1e-8 {
            break d / r;
        }
    };
    (0..count)
        .map(|i| {
            let mut rng = rng_for(seed, stream_id, i as u64);
            let s = rng.random_range(radius[0]..=radius[1]);
            Cochain0(&d * s)
        })
        .collect()
}

struct Ensemble {
    train: Vec<Trajectory<f64>>,
    holdout: Vec<Trajectory<f64>>,
}

// ---------------------------------------------------------------------------
// Bounded-confidence threshold

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRun {
    pub seed: u64,
    pub cycle_length: usize,
    pub coverage: Coverage,
    pub mode: ResidualMode,
    pub threshold_hat: f64,
    pub abs_error: f64,
    pub rollout_rmse: f64,
    /// Information number at the true threshold on the training data.
    pub information: f64,
    pub samples: usize,
    pub force_mse: ForceMse,
}

/// Threshold recovery on the rotated cycle for every (cycle length, seed,
/// coverage, residual mode).
pub fn run_bounded_confidence(cfg: &ExperimentConfig) -> Result<Vec<ThresholdRun>> {
    cfg.validate()?;
    if cfg.experiment != ExperimentId::BoundedConfidence {
        return Err(Error::Config("configuration is not for bounded_confidence".into()));
    }
    let mut jobs = Vec::new();
    for n in cfg.cycle_lengths() {
        for &s in &cfg.seeds {
            jobs.push((n, s));
        }
    }
    let per: Vec<Vec<ThresholdRun>> = jobs
        .par_iter()
        .map(|&(n, seed)| threshold_seed(cfg, n, seed))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn threshold_seed(cfg: &ExperimentConfig, n: usize, seed: u64) -> Result<Vec<ThresholdRun>> {
    let p = &cfg.bounded_confidence;
    let op = CoboundaryOperator::build(&make_cycle_sheaf(n, SheafVariant::Rotated, cfg.rotation_angle)?)?;
    let truth = EdgePotential::BoundedConfidence {
        threshold: p.true_threshold,
    };
    let sim = cfg.sim(cfg.horizon);
    let coverages = ExperimentConfig::or_all(&cfg.coverage, &[Coverage::Broad, Coverage::Localized]);
    let modes = ExperimentConfig::or_all(
        &cfg.residual_modes,
        &[ResidualMode::Observed, ResidualMode::FiniteDifference],
    );
    let stream_seed = derive_seed(seed, n as u64);

    let mut ensembles = Vec::new();
    for (ci, &cov) in coverages.iter().enumerate() {
        let (train_ics, hold_ics) = match cov {
            Coverage::Broad => (
                broad_ics(
                    &op,
                    &p.scales,
                    cfg.train_trajectories * p.scales.len(),
                    stream_seed,
                    stream::TRAIN * 16 + ci as u64,
                ),
                broad_ics(
                    &op,
                    &p.scales,
                    cfg.holdout_trajectories,
                    stream_seed,
                    stream::HOLDOUT * 16 + ci as u64,
                ),
            ),
            Coverage::Localized => (
                localized_ics(
                    &op,
                    p.annulus,
                    cfg.train_trajectories,
                    stream_seed,
                    stream::TRAIN * 16 + ci as u64,
                )?,
                localized_ics(
                    &op,
                    p.annulus,
                    cfg.holdout_trajectories,
                    stream_seed,
                    stream::HOLDOUT * 16 + ci as u64,
                )?,
            ),
            Coverage::Limited => unreachable!("rejected by validate"),
        };
        ensembles.push(Ensemble {
            train: simulate_all(&op, &truth, &train_ics, &sim)?,
            holdout: simulate_all(&op, &truth, &hold_ics, &sim)?,
        });
    }

    let grid = reference_grid(n, &cfg.grid);
    let mut runs = Vec::new();
    for (mi, &mode) in modes.iter().enumerate() {
        let datasets: Vec<ResidualDataset<f64>> = ensembles
            .iter()
            .enumerate()
            .map(|(ci, ens)| {
                let mut data = residual_dataset(&op, &ens.train, mode, p.noise_std, stream_seed, (mi * 8 + ci) as u64)?;
                if coverages[ci] == Coverage::Localized && p.localized_window {
                    data.samples.retain(|s| in_annulus(&op, &s.y, p.annulus));
                }
                Ok(data)
            })
            .collect::<Result<_>>()?;
        let pooled: Vec<Cochain1<f64>> = datasets.iter().flat_map(|d| d.edge_states().cloned()).collect();
        for ((&cov, ens), data) in coverages.iter().zip(&ensembles).zip(&datasets) {
            if data.is_empty() {
                return Err(Error::Config(format!("{cov} coverage left no samples for seed {seed}")));
            }
            let fit = fit_threshold(&op, data, (p.bracket[0], p.bracket[1]))?;
            let eps_hat = fit.theta[0];
            let fitted = EdgePotential::BoundedConfidence { threshold: eps_hat };
            let hold_ics: Vec<Cochain0<f64>> = ens.holdout.iter().map(|t| t.initial_state().clone()).collect();
            let rolled = simulate_all(&op, &fitted, &hold_ics, &sim)?;
            let mut holdout = edge_states(&op, &ens.holdout);
            if cov == Coverage::Localized && p.localized_window {
                holdout.retain(|y| in_annulus(&op, y, p.annulus));
            }
            let sets = EvaluationSets {
                holdout,
                pooled: pooled.clone(),
                grid: grid.clone(),
            };
            runs.push(ThresholdRun {
                seed,
                cycle_length: n,
                coverage: cov,
                mode,
                threshold_hat: eps_hat,
                abs_error: (eps_hat - p.true_threshold).abs(),
                rollout_rmse: rollout_rmse(&ens.holdout, &rolled),
                information: information_scalar(&op, p.true_threshold, data)?.lambda_min,
                samples: data.len(),
                force_mse: force_mse(&op, &truth, &fitted, &sets)?,
            });
        }
    }
    Ok(runs)
}

// ---------------------------------------------------------------------------
// Finite monomial basis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisRun {
    pub seed: u64,
    pub cycle_length: usize,
    pub basis: BasisVariant,
    pub coverage: Coverage,
    pub mode: ResidualMode,
    pub theta_hat: Vec<f64>,
    pub rel_error: f64,
    pub rollout_rmse: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub identifiable: bool,
    pub samples: usize,
    pub force_mse: ForceMse,
}

/// Finite-basis recovery on the identity cycle. The augmented-basis condition
/// runs once, on the first seed, with broad coverage.
pub fn run_finite_basis(cfg: &ExperimentConfig) -> Result<Vec<BasisRun>> {
    cfg.validate()?;
    if cfg.experiment != ExperimentId::FiniteBasis {
        return Err(Error::Config("configuration is not for finite_basis".into()));
    }
    let mut jobs = Vec::new();
    for n in cfg.cycle_lengths() {
        for (k, &s) in cfg.seeds.iter().enumerate() {
            jobs.push((n, s, k == 0));
        }
    }
    let per: Vec<Vec<BasisRun>> = jobs
        .par_iter()
        .map(|&(n, seed, first)| basis_seed(cfg, n, seed, first))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

fn basis_seed(cfg: &ExperimentConfig, n: usize, seed: u64, first: bool) -> Result<Vec<BasisRun>> {
    let p = &cfg.finite_basis;
    let op = CoboundaryOperator::build(&make_cycle_sheaf(n, SheafVariant::Identity, cfg.rotation_angle)?)?;
    let degree = p.theta.len();
    let c = constant_edge_cochain(n, p.harmonic_direction);
    let truth = EdgePotential::Monomial {
        coefficients: p.theta.clone(),
    };
    let truth_aug = EdgePotential::HarmonicAugmented {
        coefficients: p.theta.clone(),
        harmonic_coefficient: p.harmonic_coefficient,
        direction: c.clone(),
    };
    let sim = cfg.sim(cfg.horizon);
    let coverages = ExperimentConfig::or_all(&cfg.coverage, &[Coverage::Broad, Coverage::Limited]);
    let modes = ExperimentConfig::or_all(
        &cfg.residual_modes,
        &[ResidualMode::Observed, ResidualMode::FiniteDifference],
    );
    let bases = ExperimentConfig::or_all(&cfg.basis_variants, &[BasisVariant::Correct, BasisVariant::Augmented]);
    let stream_seed = derive_seed(seed, n as u64);

    let mut ensembles = Vec::new();
    for (ci, &cov) in coverages.iter().enumerate() {
        let (train_ics, hold_ics) = match cov {
            Coverage::Broad => (
                broad_ics(
                    &op,
                    &p.scales,
                    cfg.train_trajectories * p.scales.len(),
                    stream_seed,
                    stream::TRAIN * 16 + ci as u64,
                ),
                broad_ics(
                    &op,
                    &p.scales,
                    cfg.holdout_trajectories,
                    stream_seed,
                    stream::HOLDOUT * 16 + ci as u64,
                ),
            ),
            Coverage::Limited => (
                limited_ics(
                    &op,
                    p.limited_radius,
                    cfg.train_trajectories,
                    stream_seed,
                    stream::TRAIN * 16 + ci as u64,
                ),
                limited_ics(
                    &op,
                    p.limited_radius,
                    cfg.holdout_trajectories,
                    stream_seed,
                    stream::HOLDOUT * 16 + ci as u64,
                ),
            ),
            Coverage::Localized => unreachable!("rejected by validate"),
        };
        ensembles.push(Ensemble {
            train: simulate_all(&op, &truth, &train_ics, &sim)?,
            holdout: simulate_all(&op, &truth, &hold_ics, &sim)?,
        });
    }

    let grid = reference_grid(n, &cfg.grid);
    let correct = ParametricFamily::Monomial { degree };
    let augmented = ParametricFamily::MonomialWithHarmonic {
        degree,
        direction: c.clone(),
    };
    let mut theta_aug = p.theta.clone();
    theta_aug.push(p.harmonic_coefficient);

    let mut runs = Vec::new();
    for (mi, &mode) in modes.iter().enumerate() {
        let datasets: Vec<ResidualDataset<f64>> = ensembles
            .iter()
            .enumerate()
            .map(|(ci, ens)| residual_dataset(&op, &ens.train, mode, p.noise_std, stream_seed, (mi * 8 + ci) as u64))
            .collect::<Result<_>>()?;
        let pooled: Vec<Cochain1<f64>> = datasets.iter().flat_map(|d| d.edge_states().cloned()).collect();
        for ((&cov, ens), data) in coverages.iter().zip(&ensembles).zip(&datasets) {
            for &basis in &bases {
                // The augmented row is deterministic: first seed, broad data, observed residuals.
                if basis == BasisVariant::Augmented
                    && !(first && cov == Coverage::Broad && mode == ResidualMode::Observed)
                {
                    continue;
                }
                let (family, law, reference) = match basis {
                    BasisVariant::Correct => (&correct, &truth, &p.theta),
                    BasisVariant::Augmented => (&augmented, &truth_aug, &theta_aug),
                };
                let fit = fit_linear(&op, family, data, p.ridge)?;
                let fitted = family.at(&fit.theta)?;
                let hold_ics: Vec<Cochain0<f64>> = ens.holdout.iter().map(|t| t.initial_state().clone()).collect();
                let rmse = match simulate_all(&op, &fitted, &hold_ics, &sim) {
                    Ok(rolled) => rollout_rmse(&ens.holdout, &rolled),
                    Err(Error::Divergence { .. }) => f64::INFINITY,
                    Err(e) => return Err(e),
                };
                let sets = EvaluationSets {
                    holdout: edge_states(&op, &ens.holdout),
                    pooled: pooled.clone(),
                    grid: grid.clone(),
                };
                runs.push(BasisRun {
                    seed,
                    cycle_length: n,
                    basis,
                    coverage: cov,
                    mode,
                    rel_error: relative_error(&fit.theta, reference),
                    theta_hat: fit.theta,
                    rollout_rmse: rmse,
                    lambda_min: fit.report.lambda_min,
                    lambda_max: fit.report.lambda_max,
                    identifiable: fit.report.identifiable,
                    samples: data.len(),
                    force_mse: force_mse(&op, law, &fitted, &sets)?,
                });
            }
        }
    }
    Ok(runs)
}

// ---------------------------------------------------------------------------
// Tables

/// A rendered result table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = format!("{}\n", self.title);
        out.push_str(&line(&self.columns));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Scientific notation with three significant digits.
pub fn sci(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:.2e}")
    }
}

fn mean_std(s: &Summary) -> String {
    if s.count <= 1 {
        sci(s.mean)
    } else {
        format!("{} ± {}", sci(s.mean), sci(s.std))
    }
}

pub fn formation_table(rows: &[FormationRow]) -> Table {
    Table {
        title: "Nonparametric ambiguity on cycle sheaves".into(),
        columns: [
            "sheaf",
            "dim_h1",
            "max_rollout_diff",
            "force_mse",
            "terminal_err_recovered",
            "terminal_err_perturbed",
        ]
        .map(String::from)
        .to_vec(),
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    format!("{}-cycle {}", r.cycle_length, r.variant),
                    r.dim_h1.to_string(),
                    sci(r.max_rollout_diff),
                    format!("{:.6}", r.force_mse),
                    sci(r.terminal_error_recovered),
                    sci(r.terminal_error_perturbed),
                ]
            })
            .collect(),
    }
}

/// Grouped keys in first-appearance order.
fn groups<K: PartialEq + Copy, R>(items: &[R], key: impl Fn(&R) -> K) -> Vec<(K, Vec<&R>)> {
    let mut out: Vec<(K, Vec<&R>)> = Vec::new();
    for it in items {
        let k = key(it);
        match out.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(it),
            None => out.push((k, vec![it])),
        }
    }
    out
}

pub fn threshold_summaries(runs: &[ThresholdRun]) -> Vec<((usize, Coverage, ResidualMode), [Summary; 3])> {
    groups(runs, |r| (r.cycle_length, r.coverage, r.mode))
        .into_iter()
        .map(|(k, rs)| {
            let col = |f: fn(&ThresholdRun) -> f64| Summary::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            (
                k,
                [col(|r| r.abs_error), col(|r| r.rollout_rmse), col(|r| r.information)],
            )
        })
        .collect()
}

pub fn threshold_table(runs: &[ThresholdRun]) -> Table {
    Table {
        title: "Recovery of the bounded-confidence threshold (mean ± std over seeds)".into(),
        columns: ["setting", "abs_threshold_error", "rollout_rmse", "information"]
            .map(String::from)
            .to_vec(),
        rows: threshold_summaries(runs)
            .iter()
            .map(|((n, cov, mode), s)| {
                vec![
                    format!("{n}-cycle {cov} / {mode}"),
                    mean_std(&s[0]),
                    mean_std(&s[1]),
                    mean_std(&s[2]),
                ]
            })
            .collect(),
    }
}

type BasisKey = (usize, BasisVariant, Coverage, ResidualMode);

pub fn basis_summaries(runs: &[BasisRun]) -> Vec<(BasisKey, [Summary; 3])> {
    groups(runs, |r| (r.cycle_length, r.basis, r.coverage, r.mode))
        .into_iter()
        .map(|(k, rs)| {
            let col = |f: fn(&BasisRun) -> f64| Summary::of(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            (
                k,
                [col(|r| r.rel_error), col(|r| r.rollout_rmse), col(|r| r.lambda_min)],
            )
        })
        .collect()
}

fn basis_label((n, basis, cov, mode): BasisKey) -> String {
    match basis {
        BasisVariant::Augmented => format!("{n}-cycle {basis} / {mode}"),
        BasisVariant::Correct => format!("{n}-cycle {basis} / {cov} / {mode}"),
    }
}

pub fn basis_table(runs: &[BasisRun]) -> Table {
    Table {
        title: "Recovery in the finite basis class (mean ± std over seeds)".into(),
        columns: ["setting", "rel_param_error", "rollout_rmse", "lambda_min"]
            .map(String::from)
            .to_vec(),
        rows: basis_summaries(runs)
            .iter()
            .map(|(k, s)| vec![basis_label(*k), mean_std(&s[0]), mean_std(&s[1]), mean_std(&s[2])])
            .collect(),
    }
}

/// Median force-law MSE per evaluation set, one row per setting.
pub fn force_check_table(threshold: &[ThresholdRun], basis: &[BasisRun]) -> Table {
    let med = |v: Vec<ForceMse>| {
        [
            Summary::of(&v.iter().map(|f| f.holdout).collect::<Vec<_>>()).median,
            Summary::of(&v.iter().map(|f| f.pooled).collect::<Vec<_>>()).median,
            Summary::of(&v.iter().map(|f| f.grid).collect::<Vec<_>>()).median,
        ]
    };
    let mut rows = Vec::new();
    for ((n, cov, mode), rs) in groups(threshold, |r| (r.cycle_length, r.coverage, r.mode)) {
        let m = med(rs.iter().map(|r| r.force_mse).collect());
        rows.push(vec![
            format!("bounded confidence {n}-cycle {cov} / {mode}"),
            sci(m[0]),
            sci(m[1]),
            sci(m[2]),
        ]);
    }
    for (k, rs) in groups(basis, |r| (r.cycle_length, r.basis, r.coverage, r.mode)) {
        let m = med(rs.iter().map(|r| r.force_mse).collect());
        rows.push(vec![
            format!("finite basis {}", basis_label(k)),
            sci(m[0]),
            sci(m[1]),
            sci(m[2]),
        ]);
    }
    Table {
        title: "Median force-law MSE on three evaluation sets".into(),
        columns: ["setting", "holdout", "pooled", "grid"].map(String::from).to_vec(),
        rows,
    }
}
