//! Physics-regularized GP estimator: the data evidence and physics residual
//! objectives, finite-difference gradients, and the alternating stochastic
//! training loop.
//!
//! The trainable parameter vector θ packs, in log space, the GP noise
//! precisions and kernels of the three output dimensions (flow, speed,
//! density), the density prior level, the physical constants of the link
//! model, and the residual-GP kernels. Training ascends
//!
//! ```text
//! L(θ) = L_f(θ) + L_g(θ)
//! L_f  = Σ_l log N(Y_l | 0, K_l(X,X) + τ̄_l⁻¹ I)          (observed dims)
//! L_g  = Σ_w log N(G_w(f̂(Z)) | 0, K_{g_w}(Z,Z))           (encoded equations)
//! ```
//!
//! with the update θ ← θ + φ_f·∇L_f + φ_g·∇L_g per iteration (plain SGD
//! mode), or the same combined gradient routed through ADAM moments
//! (default). Each iteration samples a fresh pseudo-input batch Z; both
//! gradients are central finite differences with the batch held fixed
//! (common random numbers), and coordinates an objective cannot depend on
//! are exactly zero without evaluation.
//!
//! The density output is never observed: its posterior collapses to the
//! trainable prior level, so every gradient it receives flows through the
//! physics term. Flow and speed train on standardized data; residuals are
//! evaluated after de-standardizing to physical units, so the physical
//! parameters keep their dimensional meaning.

use crate::data::{DataError, Dataset, GridPoint, OutputDim, StandardStats};
use crate::gp::{kernel_matrix, DimFit, GpError, GpSpec, KernelParams};
use crate::linalg::CholeskyFactor;
use crate::metanet::{MetanetError, MetanetParams};
use crate::physics::{
    g1_expression, g2_expression, g3_expression, physics_log_density, residual_g1, residual_g2,
    residual_g3, sample_pseudo_inputs, validate_operator_set, PhysicsError, PointEstimates,
    PseudoBatch, ResidualGpSpec, N_EQUATIONS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrgpError {
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Metanet(#[from] MetanetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("residual expression outside admissible operator set: {0}")]
    InadmissibleResidual(String),
    #[error("objective not finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("training diverged at iteration {iteration} after {recoveries} consecutive recoveries")]
    Diverged { iteration: usize, recoveries: usize },
    #[error("gradient probe failed at coordinate {coordinate}: {message}")]
    Probe { coordinate: usize, message: String },
    #[error("checkpoint error at line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Index map of the flat parameter vector θ. All entries are logarithms of
/// the natural-unit values.
pub mod layout {
    pub const LOG_NOISE_PRECISION_FLOW: usize = 0;
    pub const LOG_NOISE_PRECISION_SPEED: usize = 1;
    /// Three coordinates per kernel: log signal variance, log spatial
    /// lengthscale, log temporal lengthscale.
    pub const FLOW_KERNEL: usize = 2;
    pub const SPEED_KERNEL: usize = 5;
    pub const DENSITY_KERNEL: usize = 8;
    pub const LOG_DENSITY_PRIOR_MEAN: usize = 11;
    pub const LOG_TAU: usize = 12;
    pub const LOG_NU: usize = 13;
    pub const LOG_DELTA_RAMP: usize = 14;
    pub const LOG_KAPPA: usize = 15;
    pub const LOG_FREE_SPEED: usize = 16;
    pub const LOG_RHO_CRIT: usize = 17;
    pub const LOG_ALPHA: usize = 18;
    /// Three residual-GP kernels of three coordinates each.
    pub const RESIDUAL_KERNELS: usize = 19;
    pub const LEN: usize = 28;

    pub fn names() -> [&'static str; LEN] {
        [
            "log_noise_precision_flow",
            "log_noise_precision_speed",
            "log_sv_flow",
            "log_ls_space_flow",
            "log_ls_time_flow",
            "log_sv_speed",
            "log_ls_space_speed",
            "log_ls_time_speed",
            "log_sv_density",
            "log_ls_space_density",
            "log_ls_time_density",
            "log_density_prior_mean",
            "log_tau",
            "log_nu",
            "log_delta_ramp",
            "log_kappa",
            "log_free_speed",
            "log_rho_crit",
            "log_alpha",
            "log_sv_g1",
            "log_ls_space_g1",
            "log_ls_time_g1",
            "log_sv_g2",
            "log_ls_space_g2",
            "log_ls_time_g2",
            "log_sv_g3",
            "log_ls_space_g3",
            "log_ls_time_g3",
        ]
    }
}

/// Complete parameter set of the estimator in natural units. The physical
/// member's time step must match the grid the training data lives on (the
/// detector aggregation step, not the simulator step).
#[derive(Debug, Clone, PartialEq)]
pub struct PrgpParams {
    pub gp: GpSpec,
    pub residual_gp: ResidualGpSpec,
    pub physical: MetanetParams,
}

impl PrgpParams {
    /// Library-default initialization: unit kernels on standardized flow and
    /// speed, a broad density kernel in physical units, moderate noise
    /// precisions, and the given physical parameters. The density prior
    /// level starts at a plausible mid-range value; data-driven callers
    /// overwrite it. Residual kernels start with short lengthscales so their
    /// covariance stays well conditioned at clustered pseudo inputs; the
    /// lengthscales are trainable and widen if the residual field is smooth.
    pub fn initial(physical: MetanetParams) -> Self {
        let smooth = KernelParams::new(1.0, 3.0, 12.0);
        let tight = KernelParams::new(1.0, 1.0, 2.0);
        PrgpParams {
            gp: GpSpec {
                kernels: [smooth, smooth, KernelParams::new(100.0, 3.0, 12.0)],
                noise_precision: [10.0, 10.0],
                prior_mean: [0.0, 0.0, 20.0],
            },
            residual_gp: ResidualGpSpec { kernels: [tight; N_EQUATIONS] },
            physical,
        }
    }

    /// Density prior level m_ρ in veh/km/lane.
    pub fn density_prior_mean(&self) -> f64 {
        self.gp.prior_mean[OutputDim::Density.index()]
    }

    pub fn set_density_prior_mean(&mut self, value: f64) {
        self.gp.prior_mean[OutputDim::Density.index()] = value;
    }
}

/// Packs natural-unit parameters into the flat log-space vector.
pub fn theta_from_params(params: &PrgpParams) -> Vec<f64> {
    let mut theta = vec![0.0; layout::LEN];
    theta[layout::LOG_NOISE_PRECISION_FLOW] = params.gp.noise_precision[0].ln();
    theta[layout::LOG_NOISE_PRECISION_SPEED] = params.gp.noise_precision[1].ln();
    for (base, kernel) in [
        (layout::FLOW_KERNEL, &params.gp.kernels[0]),
        (layout::SPEED_KERNEL, &params.gp.kernels[1]),
        (layout::DENSITY_KERNEL, &params.gp.kernels[2]),
    ] {
        let logs = kernel.to_log();
        theta[base..base + 3].copy_from_slice(&logs);
    }
    theta[layout::LOG_DENSITY_PRIOR_MEAN] = params.density_prior_mean().ln();
    theta[layout::LOG_TAU] = params.physical.tau.ln();
    theta[layout::LOG_NU] = params.physical.nu.ln();
    theta[layout::LOG_DELTA_RAMP] = params.physical.delta_ramp.ln();
    theta[layout::LOG_KAPPA] = params.physical.kappa.ln();
    theta[layout::LOG_FREE_SPEED] = params.physical.free_speed.ln();
    theta[layout::LOG_RHO_CRIT] = params.physical.rho_crit.ln();
    theta[layout::LOG_ALPHA] = params.physical.alpha.ln();
    for w in 0..N_EQUATIONS {
        let base = layout::RESIDUAL_KERNELS + 3 * w;
        let logs = params.residual_gp.kernels[w].to_log();
        theta[base..base + 3].copy_from_slice(&logs);
    }
    theta
}

/// Rebuilds natural-unit parameters from θ. Non-trainable fields (corridor
/// geometry, time step) come from the template.
pub fn params_from_theta(theta: &[f64], template: &PrgpParams) -> PrgpParams {
    assert_eq!(theta.len(), layout::LEN, "theta must have {} coordinates", layout::LEN);
    let mut params = template.clone();
    params.gp.noise_precision = [
        theta[layout::LOG_NOISE_PRECISION_FLOW].exp(),
        theta[layout::LOG_NOISE_PRECISION_SPEED].exp(),
    ];
    for (slot, base) in
        [layout::FLOW_KERNEL, layout::SPEED_KERNEL, layout::DENSITY_KERNEL].iter().enumerate()
    {
        params.gp.kernels[slot] =
            KernelParams::from_log(theta[*base], theta[base + 1], theta[base + 2]);
    }
    params.gp.prior_mean = [0.0, 0.0, theta[layout::LOG_DENSITY_PRIOR_MEAN].exp()];
    params.physical.tau = theta[layout::LOG_TAU].exp();
    params.physical.nu = theta[layout::LOG_NU].exp();
    params.physical.delta_ramp = theta[layout::LOG_DELTA_RAMP].exp();
    params.physical.kappa = theta[layout::LOG_KAPPA].exp();
    params.physical.free_speed = theta[layout::LOG_FREE_SPEED].exp();
    params.physical.rho_crit = theta[layout::LOG_RHO_CRIT].exp();
    params.physical.alpha = theta[layout::LOG_ALPHA].exp();
    for w in 0..N_EQUATIONS {
        let base = layout::RESIDUAL_KERNELS + 3 * w;
        params.residual_gp.kernels[w] =
            KernelParams::from_log(theta[base], theta[base + 1], theta[base + 2]);
    }
    params
}

/// Optimizer choice for the ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Moment-averaged adaptive step (decay 0.9/0.999, stabilizer 1e−8).
    Adam,
    /// Plain ascent θ += φ_f·∇L_f + φ_g·∇L_g.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Overall step size φ; ADAM scales its moment-normalized step by it.
    pub learning_rate: f64,
    /// Step size applied to the data-term gradient.
    pub phi_f: f64,
    /// Step size applied to the physics-term gradient; zero recovers a pure
    /// GP hyperparameter fit.
    pub phi_g: f64,
    /// Pseudo-input batch size per iteration.
    pub m: usize,
    pub seed: u64,
    /// Consecutive iterations of exactly zero data-term change that stop
    /// training early.
    pub plateau_patience: usize,
    pub optimizer: Optimizer,
    /// Draw posterior samples at the pseudo inputs instead of plugging in
    /// posterior means.
    pub sample_posterior: bool,
}

impl TrainConfig {
    pub fn defaults(seed: u64) -> Self {
        TrainConfig {
            iterations: 500,
            learning_rate: 0.01,
            phi_f: 0.01,
            phi_g: 0.01,
            m: 10,
            seed,
            plateau_patience: 20,
            optimizer: Optimizer::Adam,
            sample_posterior: false,
        }
    }

    pub fn validate(&self) -> Result<(), PrgpError> {
        if self.iterations == 0 {
            return Err(PrgpError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PrgpError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, v) in [("phi_f", self.phi_f), ("phi_g", self.phi_g)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PrgpError::InvalidConfig(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.m == 0 {
            return Err(PrgpError::InvalidConfig("pseudo batch size m must be at least 1".into()));
        }
        if self.plateau_patience == 0 {
            return Err(PrgpError::InvalidConfig("plateau patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// One completed training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub l_f: f64,
    pub l_g: f64,
    /// FNV-1a hash of the θ bits after this iteration's update.
    pub theta_hash: u64,
    /// Wall time of the iteration; excluded from determinism comparisons.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<TraceRecord>,
    pub recoveries: usize,
    /// Iteration at which the data-term plateau stopped training, if it did.
    pub stopped_early: Option<usize>,
}

/// Trained model: final θ, the template carrying non-trainable structure,
/// the standardization fitted on the training data, and the grid extent used
/// for pseudo-input sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct PrgpModel {
    pub theta: Vec<f64>,
    pub template: PrgpParams,
    pub stats: StandardStats,
    pub extent: (usize, usize),
}

impl PrgpModel {
    pub fn params(&self) -> PrgpParams {
        params_from_theta(&self.theta, &self.template)
    }
}

/// Grid extent implied by a parameter set and training data: corridor
/// segment count by one past the largest observed time index.
pub fn training_extent(params: &PrgpParams, data: &Dataset) -> (usize, usize) {
    let max_k = data.points().iter().map(|p| p.k).max().unwrap_or(0);
    (params.physical.n_segments, max_k + 1)
}

/// Pseudo-input batch used by iteration `t` of a run seeded with `seed`.
pub fn sample_batch_for_iteration(
    extent: (usize, usize),
    m: usize,
    seed: u64,
    iteration: usize,
) -> Result<PseudoBatch, PhysicsError> {
    sample_pseudo_inputs(extent, m, seed.wrapping_add(iteration as u64))
}

/// Data-term objective L_f: sum of per-dimension log marginal likelihoods
/// over the observed output dimensions of (standardized) `data`.
pub fn elbo_data_term(params: &PrgpParams, data: &Dataset) -> Result<f64, PrgpError> {
    let mut total = 0.0;
    let mut observed = 0;
    for dim in [OutputDim::Flow, OutputDim::Speed] {
        match DimFit::new(&params.gp, data, dim) {
            Ok(fit) => {
                total += fit.log_marginal_likelihood()?;
                observed += 1;
            }
            Err(GpError::UnobservedDimension) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if observed == 0 {
        return Err(PrgpError::Gp(GpError::UnobservedDimension));
    }
    Ok(total)
}

/// Physics-term objective L_g at a pseudo batch: estimate the outputs at the
/// four shifted input sets from the GP posteriors (posterior mean plug-in),
/// de-standardize, evaluate the encoded-equation residuals, and return their
/// joint log density under the residual GPs.
pub fn elbo_physics_term(
    params: &PrgpParams,
    data: &Dataset,
    batch: &PseudoBatch,
    stats: &StandardStats,
) -> Result<f64, PrgpError> {
    let flow_fit = DimFit::new(&params.gp, data, OutputDim::Flow)?;
    let speed_fit = DimFit::new(&params.gp, data, OutputDim::Speed)?;
    physics_term_value(params, &flow_fit, &speed_fit, batch, stats, None)
}

/// Fixed standard-normal draws reused by every probe of one iteration when
/// posterior sampling is enabled (common random numbers).
struct PosteriorDraws {
    flow: Vec<f64>,
    speed: Vec<f64>,
    rho: Vec<f64>,
}

impl PosteriorDraws {
    fn generate(rng: &mut ChaCha8Rng, len: usize) -> Self {
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        };
        PosteriorDraws { flow: draw(len), speed: draw(len), rho: draw(len) }
    }
}

fn physics_term_value(
    params: &PrgpParams,
    flow_fit: &DimFit,
    speed_fit: &DimFit,
    batch: &PseudoBatch,
    stats: &StandardStats,
    draws: Option<&PosteriorDraws>,
) -> Result<f64, PrgpError> {
    let m = batch.len();
    let union: Vec<GridPoint> = batch
        .base
        .iter()
        .chain(&batch.shift_time)
        .chain(&batch.shift_up)
        .chain(&batch.shift_down)
        .copied()
        .collect();

    let flow_std = estimate_dim(flow_fit, &union, draws.map(|d| d.flow.as_slice()))?;
    let speed_std = estimate_dim(speed_fit, &union, draws.map(|d| d.speed.as_slice()))?;
    let rho_phys = density_estimate(params, &union, draws.map(|d| d.rho.as_slice()))?;

    let mut sets: Vec<PointEstimates> = Vec::with_capacity(4);
    for s in 0..4 {
        let range = s * m..(s + 1) * m;
        sets.push(PointEstimates {
            flow: flow_std[range.clone()]
                .iter()
                .map(|v| stats.destandardize(OutputDim::Flow, *v))
                .collect(),
            vel: speed_std[range.clone()]
                .iter()
                .map(|v| stats.destandardize(OutputDim::Speed, *v))
                .collect(),
            rho: rho_phys[range].to_vec(),
        });
    }
    let g1 = residual_g1(&sets[0], &sets[1], &sets[2], batch, &params.physical);
    let g2 = residual_g2(&sets[0], &sets[1], &sets[2], &sets[3], batch, &params.physical);
    let g3 = residual_g3(&sets[0], batch, &params.physical);
    Ok(physics_log_density(&[g1, g2, g3], &params.residual_gp, &batch.base)?)
}

/// Posterior of one observed dimension at the union of shifted inputs:
/// plug-in mean, or a joint posterior draw when `noise` is given.
fn estimate_dim(
    fit: &DimFit,
    union: &[GridPoint],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>, PrgpError> {
    match noise {
        None => Ok(fit.posterior_mean(union)?),
        Some(xi) => {
            let (mean, cov) = fit.posterior_joint(union)?;
            let factor = CholeskyFactor::new(&cov).map_err(GpError::from)?;
            let correlated = factor.lower_mul(xi);
            Ok(mean.iter().zip(correlated).map(|(m, c)| m + c).collect())
        }
    }
}

/// Density estimate at the union of shifted inputs. With no observations the
/// posterior is the prior: the trainable constant level, plus a prior draw
/// when sampling is enabled.
fn density_estimate(
    params: &PrgpParams,
    union: &[GridPoint],
    noise: Option<&[f64]>,
) -> Result<Vec<f64>, PrgpError> {
    let level = params.density_prior_mean();
    match noise {
        None => Ok(vec![level; union.len()]),
        Some(xi) => {
            let kernel = &params.gp.kernels[OutputDim::Density.index()];
            let cov = kernel_matrix(kernel, union, union)?;
            let factor = CholeskyFactor::new(&cov).map_err(GpError::from)?;
            let correlated = factor.lower_mul(xi);
            Ok(correlated.iter().map(|c| level + c).collect())
        }
    }
}

/// Which θ coordinates the data term can depend on: the noise precisions and
/// the flow/speed kernels.
fn data_term_active(j: usize) -> bool {
    j < layout::DENSITY_KERNEL
}

/// Which θ coordinates the physics term can depend on. The density kernel
/// only matters when posterior sampling is enabled; with mean plug-in its
/// gradient is identically zero.
fn physics_term_active(j: usize, sampling: bool) -> bool {
    if j < layout::DENSITY_KERNEL {
        return true;
    }
    if (layout::DENSITY_KERNEL..layout::LOG_DENSITY_PRIOR_MEAN).contains(&j) {
        return sampling;
    }
    true
}

fn perturbs_flow_fit(j: usize) -> bool {
    j == layout::LOG_NOISE_PRECISION_FLOW
        || (layout::FLOW_KERNEL..layout::FLOW_KERNEL + 3).contains(&j)
}

fn perturbs_speed_fit(j: usize) -> bool {
    j == layout::LOG_NOISE_PRECISION_SPEED
        || (layout::SPEED_KERNEL..layout::SPEED_KERNEL + 3).contains(&j)
}

/// Central finite-difference gradient of an arbitrary objective over θ with
/// step h_j = 1e−5·max(|θ_j|, 1).
pub fn finite_difference_gradient<F>(theta: &[f64], mut objective: F) -> Result<Vec<f64>, PrgpError>
where
    F: FnMut(&[f64]) -> Result<f64, PrgpError>,
{
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for j in 0..theta.len() {
        let h = fd_step(theta[j]);
        probe[j] = theta[j] + h;
        let plus = objective(&probe).map_err(|e| probe_error(j, e))?;
        probe[j] = theta[j] - h;
        let minus = objective(&probe).map_err(|e| probe_error(j, e))?;
        probe[j] = theta[j];
        grad[j] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

fn fd_step(theta_j: f64) -> f64 {
    1e-5 * theta_j.abs().max(1.0)
}

fn probe_error(coordinate: usize, source: PrgpError) -> PrgpError {
    PrgpError::Probe { coordinate, message: source.to_string() }
}

/// Objective selector for [`gradient_fd`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    DataTerm,
    PhysicsTerm,
}

/// Finite-difference gradient of one objective at `params`, on standardized
/// `data`, with the pseudo batch held fixed. Coordinates the objective
/// cannot depend on are exactly zero.
pub fn gradient_fd(
    objective: Objective,
    params: &PrgpParams,
    data: &Dataset,
    batch: &PseudoBatch,
    stats: &StandardStats,
) -> Result<Vec<f64>, PrgpError> {
    let theta = theta_from_params(params);
    let ctx = EvalContext { data, stats, template: params, draws: None };
    let eval = evaluate_with_gradients(
        &theta,
        &ctx,
        batch,
        objective == Objective::DataTerm,
        objective == Objective::PhysicsTerm,
    )?;
    Ok(match objective {
        Objective::DataTerm => eval.grad_f,
        Objective::PhysicsTerm => eval.grad_g,
    })
}

struct EvalContext<'a> {
    data: &'a Dataset,
    stats: &'a StandardStats,
    template: &'a PrgpParams,
    draws: Option<&'a PosteriorDraws>,
}

struct IterEval {
    l_f: f64,
    l_g: f64,
    grad_f: Vec<f64>,
    grad_g: Vec<f64>,
}

/// Shared evaluation core: base objective values plus (optionally) both
/// finite-difference gradients, rebuilding a GP fit inside a probe only when
/// the probed coordinate touches it.
fn evaluate_with_gradients(
    theta: &[f64],
    ctx: &EvalContext,
    batch: &PseudoBatch,
    grad_data: bool,
    grad_physics: bool,
) -> Result<IterEval, PrgpError> {
    let params = params_from_theta(theta, ctx.template);
    let flow_fit = DimFit::new(&params.gp, ctx.data, OutputDim::Flow)?;
    let speed_fit = DimFit::new(&params.gp, ctx.data, OutputDim::Speed)?;
    let lml_flow = flow_fit.log_marginal_likelihood()?;
    let lml_speed = speed_fit.log_marginal_likelihood()?;
    let l_f = lml_flow + lml_speed;
    let l_g = physics_term_value(&params, &flow_fit, &speed_fit, batch, ctx.stats, ctx.draws)?;

    let mut grad_f = vec![0.0; layout::LEN];
    let mut grad_g = vec![0.0; layout::LEN];
    if !grad_data && !grad_physics {
        return Ok(IterEval { l_f, l_g, grad_f, grad_g });
    }

    let sampling = ctx.draws.is_some();
    let mut probe = theta.to_vec();
    for j in 0..layout::LEN {
        let want_f = grad_data && data_term_active(j);
        let want_g = grad_physics && physics_term_active(j, sampling);
        if !want_f && !want_g {
            continue;
        }
        let h = fd_step(theta[j]);
        let mut vals_f = [0.0; 2];
        let mut vals_g = [0.0; 2];
        for (side, sign) in [1.0f64, -1.0].into_iter().enumerate() {
            probe[j] = theta[j] + sign * h;
            let probe_params = params_from_theta(&probe, ctx.template);

            let flow_probe: Option<DimFit> = if perturbs_flow_fit(j) {
                Some(
                    DimFit::new(&probe_params.gp, ctx.data, OutputDim::Flow)
                        .map_err(|e| probe_error(j, e.into()))?,
                )
            } else {
                None
            };
            let speed_probe: Option<DimFit> = if perturbs_speed_fit(j) {
                Some(
                    DimFit::new(&probe_params.gp, ctx.data, OutputDim::Speed)
                        .map_err(|e| probe_error(j, e.into()))?,
                )
            } else {
                None
            };
            let flow_ref = flow_probe.as_ref().unwrap_or(&flow_fit);
            let speed_ref = speed_probe.as_ref().unwrap_or(&speed_fit);

            if want_f {
                let f_part = match &flow_probe {
                    Some(fit) => fit.log_marginal_likelihood().map_err(|e| probe_error(j, e.into()))?,
                    None => lml_flow,
                };
                let s_part = match &speed_probe {
                    Some(fit) => fit.log_marginal_likelihood().map_err(|e| probe_error(j, e.into()))?,
                    None => lml_speed,
                };
                vals_f[side] = f_part + s_part;
            }
            if want_g {
                vals_g[side] =
                    physics_term_value(&probe_params, flow_ref, speed_ref, batch, ctx.stats, ctx.draws)
                        .map_err(|e| probe_error(j, e))?;
            }
        }
        probe[j] = theta[j];
        if want_f {
            grad_f[j] = (vals_f[0] - vals_f[1]) / (2.0 * h);
        }
        if want_g {
            grad_g[j] = (vals_g[0] - vals_g[1]) / (2.0 * h);
        }
    }
    Ok(IterEval { l_f, l_g, grad_f, grad_g })
}

/// Rescales the residual-GP signal variances to the mean squared residual
/// observed at the iteration-0 pseudo batch (floored at 1e−4), so the
/// physics term starts on the data's own scale. Training applies this
/// automatically; callers reproducing a training step by hand apply it
/// first.
pub fn init_residual_scale(
    params: &PrgpParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<PrgpParams, PrgpError> {
    let stats = StandardStats::fit(data)?;
    let std_data = data.standardized(&stats);
    let extent = training_extent(params, data);
    let batch = sample_batch_for_iteration(extent, config.m, config.seed, 0)?;
    let flow_fit = DimFit::new(&params.gp, &std_data, OutputDim::Flow)?;
    let speed_fit = DimFit::new(&params.gp, &std_data, OutputDim::Speed)?;

    let m = batch.len();
    let union: Vec<GridPoint> = batch
        .base
        .iter()
        .chain(&batch.shift_time)
        .chain(&batch.shift_up)
        .chain(&batch.shift_down)
        .copied()
        .collect();
    let flow_std = flow_fit.posterior_mean(&union)?;
    let speed_std = speed_fit.posterior_mean(&union)?;
    let mut sets: Vec<PointEstimates> = Vec::with_capacity(4);
    for s in 0..4 {
        let range = s * m..(s + 1) * m;
        sets.push(PointEstimates {
            flow: flow_std[range.clone()]
                .iter()
                .map(|v| stats.destandardize(OutputDim::Flow, *v))
                .collect(),
            vel: speed_std[range.clone()]
                .iter()
                .map(|v| stats.destandardize(OutputDim::Speed, *v))
                .collect(),
            rho: vec![params.density_prior_mean(); m],
        });
    }
    let residuals = [
        residual_g1(&sets[0], &sets[1], &sets[2], &batch, &params.physical),
        residual_g2(&sets[0], &sets[1], &sets[2], &sets[3], &batch, &params.physical),
        residual_g3(&sets[0], &batch, &params.physical),
    ];
    let mut out = params.clone();
    for (w, g) in residuals.iter().enumerate() {
        let mean_sq = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
        out.residual_gp.kernels[w].signal_variance = mean_sq.max(1e-4);
    }
    Ok(out)
}

fn theta_hash(theta: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in theta {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

struct StepSnapshot {
    theta: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: i32,
    grad_f: Vec<f64>,
    grad_g: Vec<f64>,
}

struct OptimizerState {
    theta: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: i32,
}

fn apply_step(
    state: &mut OptimizerState,
    grad_f: &[f64],
    grad_g: &[f64],
    config: &TrainConfig,
    rate_scale: f64,
) {
    match config.optimizer {
        Optimizer::Sgd => {
            for j in 0..state.theta.len() {
                state.theta[j] +=
                    rate_scale * (config.phi_f * grad_f[j] + config.phi_g * grad_g[j]);
            }
        }
        Optimizer::Adam => {
            state.adam_t += 1;
            let phi = config.learning_rate;
            let bias_m = 1.0 - 0.9f64.powi(state.adam_t);
            let bias_v = 1.0 - 0.999f64.powi(state.adam_t);
            for j in 0..state.theta.len() {
                let g = (config.phi_f * grad_f[j] + config.phi_g * grad_g[j]) / phi;
                state.adam_m[j] = 0.9 * state.adam_m[j] + 0.1 * g;
                state.adam_v[j] = 0.999 * state.adam_v[j] + 0.001 * g * g;
                let m_hat = state.adam_m[j] / bias_m;
                let v_hat = state.adam_v[j] / bias_v;
                state.theta[j] += rate_scale * phi * m_hat / (v_hat.sqrt() + 1e-8);
            }
        }
    }
}

/// Runs the alternating stochastic ascent loop and returns the trained model
/// with its full per-iteration trace.
///
/// Each iteration: sample a pseudo batch, fit the observed-dimension GPs,
/// evaluate L_f and L_g, take both finite-difference gradients over the
/// fixed batch, and apply the combined update. A non-finite objective or a
/// failed factorization reverts the previous update, halves the effective
/// rate, and retries; more than 10 consecutive recoveries abort. Training
/// stops early when L_f is exactly unchanged for `plateau_patience`
/// consecutive iterations.
pub fn train(
    params0: &PrgpParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(PrgpModel, TrainTrace), PrgpError> {
    config.validate()?;
    if data.is_empty() {
        return Err(PrgpError::Data(DataError::Empty));
    }
    params0.gp.validate().map_err(PrgpError::Gp)?;
    params0.physical.validate()?;
    for expr in [g1_expression(), g2_expression(), g3_expression()] {
        let report = validate_operator_set(&expr);
        if !report.is_ok() {
            return Err(PrgpError::InadmissibleResidual(report.violations.join("; ")));
        }
    }

    let params_init = init_residual_scale(params0, data, config)?;
    let stats = StandardStats::fit(data)?;
    let std_data = data.standardized(&stats);
    let extent = training_extent(&params_init, data);

    let mut state = OptimizerState {
        theta: theta_from_params(&params_init),
        adam_m: vec![0.0; layout::LEN],
        adam_v: vec![0.0; layout::LEN],
        adam_t: 0,
    };
    let mut trace = TrainTrace::default();
    let mut rate_scale = 1.0;
    let mut consecutive_recoveries = 0usize;
    let mut last_step: Option<StepSnapshot> = None;
    let mut plateau_run = 0usize;
    let mut prev_l_f: Option<f64> = None;
    let grad_data = config.phi_f > 0.0;
    let grad_physics = config.phi_g > 0.0;

    let mut t = 0usize;
    while t < config.iterations {
        let started = Instant::now();
        let batch = sample_batch_for_iteration(extent, config.m, config.seed, t)?;
        let draws = if config.sample_posterior {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed.wrapping_add(t as u64) ^ 0x9e37_79b9_7f4a_7c15,
            );
            Some(PosteriorDraws::generate(&mut rng, 4 * batch.len()))
        } else {
            None
        };
        let ctx = EvalContext {
            data: &std_data,
            stats: &stats,
            template: &params_init,
            draws: draws.as_ref(),
        };

        let outcome = evaluate_with_gradients(&state.theta, &ctx, &batch, grad_data, grad_physics);
        let eval = match outcome {
            Ok(eval) if eval.l_f.is_finite() && eval.l_g.is_finite() => eval,
            outcome => {
                let Some(snap) = last_step.as_ref() else {
                    return match outcome {
                        Err(e) => Err(e),
                        Ok(_) => Err(PrgpError::NonFinite { iteration: t }),
                    };
                };
                state.theta = snap.theta.clone();
                state.adam_m = snap.adam_m.clone();
                state.adam_v = snap.adam_v.clone();
                state.adam_t = snap.adam_t;
                rate_scale *= 0.5;
                consecutive_recoveries += 1;
                trace.recoveries += 1;
                if consecutive_recoveries > 10 {
                    return Err(PrgpError::Diverged {
                        iteration: t,
                        recoveries: consecutive_recoveries,
                    });
                }
                let (gf, gg) = (snap.grad_f.clone(), snap.grad_g.clone());
                apply_step(&mut state, &gf, &gg, config, rate_scale);
                continue;
            }
        };
        consecutive_recoveries = 0;
        rate_scale = 1.0;

        if let Some(prev) = prev_l_f {
            if (eval.l_f - prev).abs() == 0.0 {
                plateau_run += 1;
            } else {
                plateau_run = 0;
            }
        }
        prev_l_f = Some(eval.l_f);

        last_step = Some(StepSnapshot {
            theta: state.theta.clone(),
            adam_m: state.adam_m.clone(),
            adam_v: state.adam_v.clone(),
            adam_t: state.adam_t,
            grad_f: eval.grad_f.clone(),
            grad_g: eval.grad_g.clone(),
        });
        apply_step(&mut state, &eval.grad_f, &eval.grad_g, config, rate_scale);

        trace.records.push(TraceRecord {
            iteration: t,
            l_f: eval.l_f,
            l_g: eval.l_g,
            theta_hash: theta_hash(&state.theta),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        if plateau_run >= config.plateau_patience {
            trace.stopped_early = Some(t);
            break;
        }
        t += 1;
    }

    let model = PrgpModel { theta: state.theta, template: params_init, stats, extent };
    Ok((model, trace))
}

/// Posterior predictions at new inputs, de-standardized to physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub flow: Vec<f64>,
    pub flow_var: Vec<f64>,
    pub vel: Vec<f64>,
    pub vel_var: Vec<f64>,
    pub rho: Vec<f64>,
    pub rho_var: Vec<f64>,
}

/// Predicts flow, speed and density at `xstar` by conditioning the trained
/// GPs on `data` (the training set, in internal units). The density output
/// has no observations: it reports its prior level and prior variance, both
/// of which trained through the physics term.
pub fn predict(
    model: &PrgpModel,
    data: &Dataset,
    xstar: &[GridPoint],
) -> Result<Prediction, PrgpError> {
    let params = model.params();
    let std_data = data.standardized(&model.stats);
    let flow_fit = DimFit::new(&params.gp, &std_data, OutputDim::Flow)?;
    let speed_fit = DimFit::new(&params.gp, &std_data, OutputDim::Speed)?;
    let (flow_mean_std, flow_var_std) = flow_fit.posterior(xstar)?;
    let (vel_mean_std, vel_var_std) = speed_fit.posterior(xstar)?;

    let destd = |dim: OutputDim, mean: &[f64], var: &[f64]| -> (Vec<f64>, Vec<f64>) {
        (
            mean.iter().map(|v| model.stats.destandardize(dim, *v)).collect(),
            var.iter().map(|v| model.stats.destandardize_var(dim, *v)).collect(),
        )
    };
    let (flow, flow_var) = destd(OutputDim::Flow, &flow_mean_std, &flow_var_std);
    let (vel, vel_var) = destd(OutputDim::Speed, &vel_mean_std, &vel_var_std);
    let rho = vec![params.density_prior_mean(); xstar.len()];
    let rho_var =
        vec![params.gp.kernels[OutputDim::Density.index()].signal_variance; xstar.len()];
    Ok(Prediction { flow, flow_var, vel, vel_var, rho, rho_var })
}

/// Writes a lossless plain-text checkpoint: θ with its layout manifest,
/// standardization statistics, grid extent, corridor geometry, and the
/// training config echo.
pub fn write_checkpoint<W: Write>(
    out: &mut W,
    model: &PrgpModel,
    config: &TrainConfig,
) -> Result<(), PrgpError> {
    let join = |values: &[f64]| -> String {
        values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    };
    writeln!(out, "format=prgp-checkpoint-v1")?;
    writeln!(out, "theta_names={}", layout::names().join(","))?;
    writeln!(out, "theta={}", join(&model.theta))?;
    writeln!(out, "stats_mean={}", join(&model.stats.mean))?;
    writeln!(out, "stats_std={}", join(&model.stats.std))?;
    writeln!(out, "extent_segments={}", model.extent.0)?;
    writeln!(out, "extent_steps={}", model.extent.1)?;
    let phys = &model.template.physical;
    writeln!(out, "n_segments={}", phys.n_segments)?;
    writeln!(out, "t_step={}", phys.t_step)?;
    writeln!(out, "seg_len={}", join(&phys.seg_len))?;
    writeln!(out, "lanes={}", join(&phys.lanes))?;
    writeln!(out, "config_iterations={}", config.iterations)?;
    writeln!(out, "config_learning_rate={}", config.learning_rate)?;
    writeln!(out, "config_phi_f={}", config.phi_f)?;
    writeln!(out, "config_phi_g={}", config.phi_g)?;
    writeln!(out, "config_m={}", config.m)?;
    writeln!(out, "config_seed={}", config.seed)?;
    writeln!(out, "config_plateau_patience={}", config.plateau_patience)?;
    let optimizer = match config.optimizer {
        Optimizer::Adam => "adam",
        Optimizer::Sgd => "sgd",
    };
    writeln!(out, "config_optimizer={optimizer}")?;
    writeln!(out, "config_sample_posterior={}", config.sample_posterior)?;
    Ok(())
}

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    model: &PrgpModel,
    config: &TrainConfig,
) -> Result<(), PrgpError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut file, model, config)
}

/// Reads a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(PrgpModel, TrainConfig), PrgpError> {
    let mut fields = std::collections::HashMap::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(PrgpError::Checkpoint {
            line: lineno,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        fields.insert(key.to_string(), (value.to_string(), lineno));
    }
    let get = |key: &str| -> Result<(String, usize), PrgpError> {
        fields
            .get(key)
            .cloned()
            .ok_or_else(|| PrgpError::Checkpoint { line: 0, msg: format!("missing key {key}") })
    };
    let parse_f64 = |key: &str| -> Result<f64, PrgpError> {
        let (v, line) = get(key)?;
        v.parse().map_err(|e| PrgpError::Checkpoint { line, msg: format!("bad {key}: {e}") })
    };
    let parse_usize = |key: &str| -> Result<usize, PrgpError> {
        let (v, line) = get(key)?;
        v.parse().map_err(|e| PrgpError::Checkpoint { line, msg: format!("bad {key}: {e}") })
    };
    let parse_list = |key: &str| -> Result<Vec<f64>, PrgpError> {
        let (v, line) = get(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| PrgpError::Checkpoint { line, msg: format!("bad {key}: {e}") })
            })
            .collect()
    };

    let (format, format_line) = get("format")?;
    if format != "prgp-checkpoint-v1" {
        return Err(PrgpError::Checkpoint {
            line: format_line,
            msg: format!("unsupported format {format}"),
        });
    }
    let theta = parse_list("theta")?;
    if theta.len() != layout::LEN {
        return Err(PrgpError::Checkpoint {
            line: 0,
            msg: format!("theta has {} coordinates, expected {}", theta.len(), layout::LEN),
        });
    }
    let stats_mean = parse_list("stats_mean")?;
    let stats_std = parse_list("stats_std")?;
    if stats_mean.len() != 3 || stats_std.len() != 3 {
        return Err(PrgpError::Checkpoint {
            line: 0,
            msg: "stats vectors must have 3 entries".into(),
        });
    }
    let mut physical = MetanetParams::with_uniform_geometry(parse_usize("n_segments")?, 1.0, 1.0);
    physical.t_step = parse_f64("t_step")?;
    physical.seg_len = parse_list("seg_len")?;
    physical.lanes = parse_list("lanes")?;
    let template_base = PrgpParams::initial(physical);
    let template = params_from_theta(&theta, &template_base);

    let (optimizer_str, optimizer_line) = get("config_optimizer")?;
    let optimizer = match optimizer_str.as_str() {
        "adam" => Optimizer::Adam,
        "sgd" => Optimizer::Sgd,
        other => {
            return Err(PrgpError::Checkpoint {
                line: optimizer_line,
                msg: format!("unknown optimizer {other}"),
            })
        }
    };
    let (sample_str, sample_line) = get("config_sample_posterior")?;
    let sample_posterior = match sample_str.as_str() {
        "true" => true,
        "false" => false,
        other => {
            return Err(PrgpError::Checkpoint {
                line: sample_line,
                msg: format!("bad sample_posterior {other}"),
            })
        }
    };
    let config = TrainConfig {
        iterations: parse_usize("config_iterations")?,
        learning_rate: parse_f64("config_learning_rate")?,
        phi_f: parse_f64("config_phi_f")?,
        phi_g: parse_f64("config_phi_g")?,
        m: parse_usize("config_m")?,
        seed: parse_usize("config_seed")? as u64,
        plateau_patience: parse_usize("config_plateau_patience")?,
        optimizer,
        sample_posterior,
    };
    let model = PrgpModel {
        theta,
        template,
        stats: StandardStats {
            mean: [stats_mean[0], stats_mean[1], stats_mean[2]],
            std: [stats_std[0], stats_std[1], stats_std[2]],
        },
        extent: (parse_usize("extent_segments")?, parse_usize("extent_steps")?),
    };
    Ok((model, config))
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(PrgpModel, TrainConfig), PrgpError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(file)
}
