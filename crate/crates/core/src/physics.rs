//! Discretized link-model equations as residual functions over estimated
//! traffic state, plus the pseudo-observation machinery that turns them into
//! a training signal.
//!
//! Each residual rearranges one model equation so that it vanishes on any
//! trajectory the model generates, with ramp terms dropped (ramp rates are
//! unobserved in detector data; they reappear as the residual itself):
//!
//! ```text
//! G₁ = ρ̂_{i,k+1} − ρ̂_{i,k} − T/(Δᵢλᵢ) · (q̂_{i−1,k} − q̂_{i,k})
//! G₂ = v̂_{i,k+1} − v̂_{i,k} − T/τ · (V(ρ̂_{i,k}) − v̂_{i,k})
//!      − T/Δᵢ · v̂_{i,k}(v̂_{i−1,k} − v̂_{i,k})
//!      + νT/(τΔᵢ) · (ρ̂_{i+1,k} − ρ̂_{i,k}) / (ρ̂_{i,k} + κ + ε_den)
//! G₃ = q̂_{i,k} − ρ̂_{i,k} · v̂_{i,k} · λᵢ
//! ```
//!
//! Residuals are evaluated at a batch of pseudo inputs Z drawn from the
//! interior of the grid, each carrying four index-shifted copies (base,
//! time+1, segment−1, segment+1) so every estimate a residual needs is
//! available. The dummy outputs ω attached to Z are identically zero: the
//! residuals are modeled by a zero-mean GP, and their joint log density under
//! that GP is the physics term of the training objective.
//!
//! A small validator checks that residual expressions stay inside the
//! operator family the training theory admits (arithmetic, exponential and
//! power nodes; comparisons only with declared slack; piecewise behavior only
//! as explicit disjunctions).

use crate::data::GridPoint;
use crate::gp::{kernel_matrix, GpError, KernelParams};
use crate::linalg::CholeskyFactor;
use crate::metanet::{MetanetParams, TrafficGrid};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Guard added to density denominators so residuals stay finite near zero
/// density.
pub const EPS_DEN: f64 = 1e-6;

/// Number of encoded equations.
pub const N_EQUATIONS: usize = 3;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("pseudo batch larger than interior grid")]
    BatchTooLarge,
    #[error("grid extent {n_segments}x{n_steps} has no interior to sample")]
    ExtentTooSmall { n_segments: usize, n_steps: usize },
    #[error("point ({0}, {1}) is not interior to the grid extent")]
    NotInterior(usize, usize),
    #[error("residual vector length {got} does not match batch size {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Batch of pseudo inputs: base points Z with their four index-shifted
/// copies and the zero dummy outputs ω.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    /// Base inputs (i, k).
    pub base: Vec<GridPoint>,
    /// Base shifted to (i, k+1).
    pub shift_time: Vec<GridPoint>,
    /// Base shifted to (i−1, k).
    pub shift_up: Vec<GridPoint>,
    /// Base shifted to (i+1, k).
    pub shift_down: Vec<GridPoint>,
    /// Dummy outputs, identically zero.
    pub omega: Vec<f64>,
}

impl PseudoBatch {
    /// Builds a batch from explicit base points, validating that every shift
    /// stays inside an `extent` = (segment count, step count) grid.
    pub fn from_base(
        base: Vec<GridPoint>,
        extent: (usize, usize),
    ) -> Result<Self, PhysicsError> {
        let (n_segments, n_steps) = extent;
        for p in &base {
            if p.i == 0 || p.i + 1 >= n_segments || p.k + 1 >= n_steps {
                return Err(PhysicsError::NotInterior(p.i, p.k));
            }
        }
        let shift_time = base.iter().map(|p| GridPoint::new(p.i, p.k + 1)).collect();
        let shift_up = base.iter().map(|p| GridPoint::new(p.i - 1, p.k)).collect();
        let shift_down = base.iter().map(|p| GridPoint::new(p.i + 1, p.k)).collect();
        let omega = vec![0.0; base.len()];
        Ok(PseudoBatch { base, shift_time, shift_up, shift_down, omega })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }
}

/// Draws `m` base inputs uniformly without replacement from the interior
/// lattice {1..I−2} × {0..K−2} of an (I, K) grid, reproducibly under `seed`.
pub fn sample_pseudo_inputs(
    extent: (usize, usize),
    m: usize,
    seed: u64,
) -> Result<PseudoBatch, PhysicsError> {
    let (n_segments, n_steps) = extent;
    if n_segments < 3 || n_steps < 2 {
        return Err(PhysicsError::ExtentTooSmall { n_segments, n_steps });
    }
    let rows = n_segments - 2;
    let cols = n_steps - 1;
    let lattice = rows * cols;
    if m == 0 || m > lattice {
        return Err(PhysicsError::BatchTooLarge);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, lattice, m);
    let base = picks
        .iter()
        .map(|idx| GridPoint::new(1 + idx % rows, idx / rows))
        .collect();
    PseudoBatch::from_base(base, extent)
}

/// Estimated outputs (physical units) at one shifted copy of a batch: flow in
/// veh/h, speed in km/h, density in veh/km/lane, one entry per base point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimates {
    pub flow: Vec<f64>,
    pub vel: Vec<f64>,
    pub rho: Vec<f64>,
}

impl PointEstimates {
    /// Reads true grid values at the given points; the exact-trajectory
    /// reference case for residual checks.
    pub fn from_grid(grid: &TrafficGrid, points: &[GridPoint]) -> Self {
        PointEstimates {
            flow: points.iter().map(|p| grid.flow(p.i, p.k)).collect(),
            vel: points.iter().map(|p| grid.vel(p.i, p.k)).collect(),
            rho: points.iter().map(|p| grid.rho(p.i, p.k)).collect(),
        }
    }

    fn assert_len(&self, m: usize) {
        assert!(
            self.flow.len() == m && self.vel.len() == m && self.rho.len() == m,
            "estimate vectors must match batch size {m}"
        );
    }
}

/// Density-conservation residual G₁ at every batch point.
pub fn residual_g1(
    at_base: &PointEstimates,
    at_time: &PointEstimates,
    at_up: &PointEstimates,
    batch: &PseudoBatch,
    params: &MetanetParams,
) -> Vec<f64> {
    let m = batch.len();
    at_base.assert_len(m);
    at_time.assert_len(m);
    at_up.assert_len(m);
    (0..m)
        .map(|j| {
            let i = batch.base[j].i;
            let coeff = params.t_step / (params.seg_len[i] * params.lanes[i]);
            at_time.rho[j] - at_base.rho[j] - coeff * (at_up.flow[j] - at_base.flow[j])
        })
        .collect()
}

/// Speed-dynamics residual G₂ at every batch point. The equilibrium speed is
/// evaluated at max(ρ̂, 0) so the residual stays finite for unphysical
/// estimates.
pub fn residual_g2(
    at_base: &PointEstimates,
    at_time: &PointEstimates,
    at_up: &PointEstimates,
    at_down: &PointEstimates,
    batch: &PseudoBatch,
    params: &MetanetParams,
) -> Vec<f64> {
    let m = batch.len();
    at_base.assert_len(m);
    at_time.assert_len(m);
    at_up.assert_len(m);
    at_down.assert_len(m);
    let t = params.t_step;
    (0..m)
        .map(|j| {
            let i = batch.base[j].i;
            let d = params.seg_len[i];
            let rho = at_base.rho[j];
            let vel = at_base.vel[j];
            let veq = params.free_speed
                * (-(1.0 / params.alpha) * (rho.max(0.0) / params.rho_crit).powf(params.alpha))
                    .exp();
            at_time.vel[j]
                - vel
                - t / params.tau * (veq - vel)
                - t / d * vel * (at_up.vel[j] - vel)
                + params.nu * t / (params.tau * d) * (at_down.rho[j] - rho)
                    / (rho + params.kappa + EPS_DEN)
        })
        .collect()
}

/// Flow-identity residual G₃ at every batch point.
pub fn residual_g3(
    at_base: &PointEstimates,
    batch: &PseudoBatch,
    params: &MetanetParams,
) -> Vec<f64> {
    let m = batch.len();
    at_base.assert_len(m);
    (0..m)
        .map(|j| {
            let i = batch.base[j].i;
            at_base.flow[j] - at_base.rho[j] * at_base.vel[j] * params.lanes[i]
        })
        .collect()
}

/// Residual-GP configuration: one kernel per encoded equation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGpSpec {
    pub kernels: [KernelParams; N_EQUATIONS],
}

impl ResidualGpSpec {
    pub fn validate(&self) -> Result<(), GpError> {
        for k in &self.kernels {
            k.validate()?;
        }
        Ok(())
    }
}

/// Joint log density of the residual vectors under independent zero-mean GPs
/// over the base inputs: Σ_w log N(G_w | 0, K_{g_w}(Z,Z)). Zero residuals
/// maximize it.
pub fn physics_log_density(
    residuals: &[Vec<f64>; N_EQUATIONS],
    spec: &ResidualGpSpec,
    z: &[GridPoint],
) -> Result<f64, PhysicsError> {
    spec.validate()?;
    let m = z.len();
    for g in residuals {
        if g.len() != m {
            return Err(PhysicsError::LengthMismatch { expected: m, got: g.len() });
        }
    }
    let mut total = 0.0;
    for (w, g) in residuals.iter().enumerate() {
        let cov = kernel_matrix(&spec.kernels[w], z, z)?;
        let factor = CholeskyFactor::new(&cov).map_err(GpError::from)?;
        let gv = nalgebra::DVector::from_column_slice(g);
        let quad = factor.quad_form(&gv).map_err(GpError::from)?;
        total += -0.5 * quad - 0.5 * factor.log_det() - 0.5 * m as f64 * LN_2PI;
    }
    Ok(total)
}

/// Expression node of a residual descriptor, used to check that an encoded
/// equation stays inside the admissible operator family.
#[derive(Debug, Clone)]
pub enum ResidualExpr {
    /// Named estimated quantity or model parameter.
    Input(&'static str),
    Const(f64),
    Neg(Box<ResidualExpr>),
    Exp(Box<ResidualExpr>),
    Add(Box<ResidualExpr>, Box<ResidualExpr>),
    Sub(Box<ResidualExpr>, Box<ResidualExpr>),
    Mul(Box<ResidualExpr>, Box<ResidualExpr>),
    Div(Box<ResidualExpr>, Box<ResidualExpr>),
    Pow(Box<ResidualExpr>, Box<ResidualExpr>),
    /// Comparison converted to an equation; admissible only with a declared
    /// slack variable.
    Compare { left: Box<ResidualExpr>, right: Box<ResidualExpr>, slack: Option<&'static str> },
    /// Piecewise behavior expressed as explicit branches, each an equation.
    Disjunction(Vec<ResidualExpr>),
    /// Absolute value; never admissible directly (rewrite as a disjunction
    /// over sign branches).
    Abs(Box<ResidualExpr>),
    /// Node whose gradient the optimizer must pass through unchanged.
    NonDifferentiable { name: &'static str, inner: Box<ResidualExpr> },
}

/// Outcome of operator validation: offending nodes, advisory notes, and
/// whether any node requires pass-through gradients.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
    pub pass_through_gradient: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Walks a residual expression and reports any node outside the admissible
/// operator family.
pub fn validate_operator_set(expr: &ResidualExpr) -> ValidationReport {
    let mut report = ValidationReport::default();
    walk(expr, &mut report);
    report
}

fn walk(expr: &ResidualExpr, report: &mut ValidationReport) {
    match expr {
        ResidualExpr::Input(_) | ResidualExpr::Const(_) => {}
        ResidualExpr::Neg(a) | ResidualExpr::Exp(a) => walk(a, report),
        ResidualExpr::Add(a, b)
        | ResidualExpr::Sub(a, b)
        | ResidualExpr::Mul(a, b)
        | ResidualExpr::Div(a, b)
        | ResidualExpr::Pow(a, b) => {
            walk(a, report);
            walk(b, report);
        }
        ResidualExpr::Compare { left, right, slack } => {
            match slack {
                Some(name) => report
                    .warnings
                    .push(format!("comparison rewritten as equation with slack variable {name}")),
                None => report
                    .violations
                    .push("comparison without a declared slack variable".to_string()),
            }
            walk(left, report);
            walk(right, report);
        }
        ResidualExpr::Disjunction(branches) => {
            for b in branches {
                walk(b, report);
            }
        }
        ResidualExpr::Abs(a) => {
            report.violations.push(
                "absolute value is not admissible; rewrite as a disjunction over sign branches"
                    .to_string(),
            );
            walk(a, report);
        }
        ResidualExpr::NonDifferentiable { name, inner } => {
            report.pass_through_gradient = true;
            report
                .warnings
                .push(format!("node {name} is non-differentiable; gradient passes through"));
            walk(inner, report);
        }
    }
}

fn input(name: &'static str) -> Box<ResidualExpr> {
    Box::new(ResidualExpr::Input(name))
}

fn sub(a: Box<ResidualExpr>, b: Box<ResidualExpr>) -> Box<ResidualExpr> {
    Box::new(ResidualExpr::Sub(a, b))
}

fn mul(a: Box<ResidualExpr>, b: Box<ResidualExpr>) -> Box<ResidualExpr> {
    Box::new(ResidualExpr::Mul(a, b))
}

fn div(a: Box<ResidualExpr>, b: Box<ResidualExpr>) -> Box<ResidualExpr> {
    Box::new(ResidualExpr::Div(a, b))
}

fn add(a: Box<ResidualExpr>, b: Box<ResidualExpr>) -> Box<ResidualExpr> {
    Box::new(ResidualExpr::Add(a, b))
}

/// Descriptor of the density-conservation residual.
pub fn g1_expression() -> ResidualExpr {
    *sub(
        sub(input("rho[i,k+1]"), input("rho[i,k]")),
        mul(
            div(input("T"), mul(input("delta_i"), input("lambda_i"))),
            sub(input("q[i-1,k]"), input("q[i,k]")),
        ),
    )
}

/// Descriptor of the speed-dynamics residual, including the exponential
/// fundamental diagram.
pub fn g2_expression() -> ResidualExpr {
    let veq = mul(
        input("v_f"),
        Box::new(ResidualExpr::Exp(Box::new(ResidualExpr::Neg(mul(
            div(Box::new(ResidualExpr::Const(1.0)), input("alpha")),
            Box::new(ResidualExpr::Pow(
                div(input("rho[i,k]"), input("rho_cr")),
                input("alpha"),
            )),
        ))))),
    );
    let relax = mul(div(input("T"), input("tau")), sub(veq, input("v[i,k]")));
    let convect = mul(
        mul(div(input("T"), input("delta_i")), input("v[i,k]")),
        sub(input("v[i-1,k]"), input("v[i,k]")),
    );
    let anticip = mul(
        div(mul(input("nu"), input("T")), mul(input("tau"), input("delta_i"))),
        div(
            sub(input("rho[i+1,k]"), input("rho[i,k]")),
            add(add(input("rho[i,k]"), input("kappa")), input("eps_den")),
        ),
    );
    *add(
        sub(sub(sub(input("v[i,k+1]"), input("v[i,k]")), relax), convect),
        anticip,
    )
}

/// Descriptor of the flow-identity residual.
pub fn g3_expression() -> ResidualExpr {
    *sub(input("q[i,k]"), mul(mul(input("rho[i,k]"), input("v[i,k]")), input("lambda_i")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metanet::{simulate, Boundary, InitialState, RampSpec};
    use approx::assert_abs_diff_eq;

    fn smooth_trajectory(n_segments: usize, horizon: usize) -> (MetanetParams, TrafficGrid) {
        let params = MetanetParams::with_uniform_geometry(n_segments, 0.5, 4.0);
        let rho0: Vec<f64> =
            (0..n_segments).map(|i| 24.0 + 3.0 * (i as f64 * 0.5).sin()).collect();
        let vel0: Vec<f64> = rho0
            .iter()
            .map(|r| crate::metanet::fundamental_diagram(&params, *r).unwrap())
            .collect();
        let initial = InitialState { rho: rho0.clone(), vel: vel0.clone() };
        let inflow: Vec<f64> = (0..horizon)
            .map(|k| rho0[0] * vel0[0] * 4.0 + 300.0 * (k as f64 / horizon as f64 * 3.0).sin())
            .collect();
        let boundary = Boundary::Series {
            upstream_flow: inflow,
            upstream_speed: vec![vel0[0]; horizon],
            downstream_rho: vec![rho0[n_segments - 1]; horizon],
        };
        let grid =
            simulate(&params, &initial, &boundary, &RampSpec::None, horizon, None).unwrap();
        (params, grid)
    }

    fn interior_batch(grid: &TrafficGrid) -> PseudoBatch {
        let mut base = Vec::new();
        for k in 0..grid.n_steps() - 1 {
            for i in 1..grid.n_segments() - 1 {
                base.push(GridPoint::new(i, k));
            }
        }
        PseudoBatch::from_base(base, (grid.n_segments(), grid.n_steps())).unwrap()
    }

    fn grid_estimates(
        grid: &TrafficGrid,
        batch: &PseudoBatch,
    ) -> (PointEstimates, PointEstimates, PointEstimates, PointEstimates) {
        (
            PointEstimates::from_grid(grid, &batch.base),
            PointEstimates::from_grid(grid, &batch.shift_time),
            PointEstimates::from_grid(grid, &batch.shift_up),
            PointEstimates::from_grid(grid, &batch.shift_down),
        )
    }

    #[test]
    fn singleton_lattice_sample() {
        let batch = sample_pseudo_inputs((3, 2), 1, 7).unwrap();
        assert_eq!(batch.base, vec![GridPoint::new(1, 0)]);
        assert_eq!(batch.shift_time, vec![GridPoint::new(1, 1)]);
        assert_eq!(batch.shift_up, vec![GridPoint::new(0, 0)]);
        assert_eq!(batch.shift_down, vec![GridPoint::new(2, 0)]);
        assert_eq!(batch.omega, vec![0.0]);
    }

    #[test]
    fn default_batch_is_interior_and_distinct() {
        let batch = sample_pseudo_inputs((20, 288), 10, 3).unwrap();
        assert_eq!(batch.len(), 10);
        let mut seen = std::collections::HashSet::new();
        for (j, p) in batch.base.iter().enumerate() {
            assert!(p.i >= 1 && p.i <= 18);
            assert!(p.k <= 286);
            assert!(seen.insert((p.i, p.k)));
            assert_eq!(batch.shift_time[j], GridPoint::new(p.i, p.k + 1));
            assert_eq!(batch.shift_up[j], GridPoint::new(p.i - 1, p.k));
            assert_eq!(batch.shift_down[j], GridPoint::new(p.i + 1, p.k));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_pseudo_inputs((20, 288), 10, 42).unwrap();
        let b = sample_pseudo_inputs((20, 288), 10, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_pseudo_inputs((20, 288), 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_batch_rejected() {
        let err = sample_pseudo_inputs((3, 3), 3, 0).unwrap_err();
        assert_eq!(err.to_string(), "pseudo batch larger than interior grid");
    }

    #[test]
    fn g1_vanishes_on_exact_trajectory() {
        let (params, grid) = smooth_trajectory(6, 50);
        let batch = interior_batch(&grid);
        let (base, time, up, _) = grid_estimates(&grid, &batch);
        for r in residual_g1(&base, &time, &up, &batch, &params) {
            assert_abs_diff_eq!(r, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn g1_zero_estimates() {
        let batch = PseudoBatch::from_base(vec![GridPoint::new(1, 0)], (3, 2)).unwrap();
        let zeros = PointEstimates { flow: vec![0.0], vel: vec![0.0], rho: vec![0.0] };
        let params = MetanetParams::with_uniform_geometry(3, 0.5, 4.0);
        assert_eq!(residual_g1(&zeros, &zeros, &zeros, &batch, &params), vec![0.0]);
    }

    #[test]
    fn g1_hand_case() {
        let params = MetanetParams {
            t_step: 1.0 / 12.0,
            ..MetanetParams::with_uniform_geometry(3, 0.5, 4.0)
        };
        let batch = PseudoBatch::from_base(vec![GridPoint::new(1, 0)], (3, 2)).unwrap();
        let base = PointEstimates { flow: vec![3000.0], vel: vec![0.0], rho: vec![40.0] };
        let time = PointEstimates { flow: vec![0.0], vel: vec![0.0], rho: vec![50.0] };
        let up = PointEstimates { flow: vec![4000.0], vel: vec![0.0], rho: vec![0.0] };
        let g1 = residual_g1(&base, &time, &up, &batch, &params);
        assert_abs_diff_eq!(g1[0], 10.0 - 125.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn g2_vanishes_on_exact_trajectory() {
        let (params, grid) = smooth_trajectory(6, 50);
        let batch = interior_batch(&grid);
        let (base, time, up, down) = grid_estimates(&grid, &batch);
        for r in residual_g2(&base, &time, &up, &down, &batch, &params) {
            assert_abs_diff_eq!(r, 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn g2_equilibrium_and_perturbation() {
        let params = MetanetParams::with_uniform_geometry(4, 0.5, 4.0);
        let rho = 28.0;
        let veq = crate::metanet::fundamental_diagram(&params, rho).unwrap();
        let batch = PseudoBatch::from_base(vec![GridPoint::new(1, 0)], (4, 2)).unwrap();
        let level = PointEstimates {
            flow: vec![rho * veq * 4.0],
            vel: vec![veq],
            rho: vec![rho],
        };
        let g2 = residual_g2(&level, &level, &level, &level, &batch, &params);
        assert_abs_diff_eq!(g2[0], 0.0, epsilon = 1e-12);

        let raised = PointEstimates { vel: vec![veq + 1.0], ..level.clone() };
        let g2 = residual_g2(&level, &raised, &level, &level, &batch, &params);
        assert_abs_diff_eq!(g2[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn g3_hand_cases() {
        let params = MetanetParams::with_uniform_geometry(3, 0.5, 4.0);
        let batch = PseudoBatch::from_base(vec![GridPoint::new(1, 0)], (3, 2)).unwrap();
        let exact = PointEstimates { flow: vec![4000.0], vel: vec![100.0], rho: vec![10.0] };
        assert_eq!(residual_g3(&exact, &batch, &params), vec![0.0]);
        let high = PointEstimates { flow: vec![4400.0], ..exact };
        assert_eq!(residual_g3(&high, &batch, &params), vec![400.0]);
    }

    #[test]
    fn ramp_terms_reappear_in_g1() {
        let params = MetanetParams::with_uniform_geometry(5, 0.5, 4.0);
        let initial = InitialState::uniform(5, 24.0, 90.0);
        let horizon = 30;
        let cells = 5 * horizon;
        let mut ramp_in = vec![0.0; cells];
        let mut ramp_out = vec![0.0; cells];
        for k in 0..horizon {
            ramp_in[k * 5 + 2] = 500.0 + 10.0 * k as f64;
            ramp_out[k * 5 + 3] = 240.0;
        }
        let boundary = Boundary::constant(24.0 * 90.0 * 4.0, 90.0, 24.0, horizon);
        let ramps = RampSpec::Direct { ramp_in, ramp_out };
        let grid = simulate(&params, &initial, &boundary, &ramps, horizon, None).unwrap();
        let batch = interior_batch(&grid);
        let (base, time, up, _) = grid_estimates(&grid, &batch);
        let g1 = residual_g1(&base, &time, &up, &batch, &params);
        for (j, p) in batch.base.iter().enumerate() {
            let coeff = params.t_step / (params.seg_len[p.i] * params.lanes[p.i]);
            let expected = coeff * (grid.ramp_in(p.i, p.k) - grid.ramp_out(p.i, p.k));
            assert_abs_diff_eq!(g1[j], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn g1_shift_access_matches_direct_indexing() {
        let (params, grid) = smooth_trajectory(6, 20);
        let batch = sample_pseudo_inputs((6, 20), 12, 5).unwrap();
        let (base, time, up, _) = grid_estimates(&grid, &batch);
        let via_shifts = residual_g1(&base, &time, &up, &batch, &params);
        for (j, p) in batch.base.iter().enumerate() {
            let coeff = params.t_step / (params.seg_len[p.i] * params.lanes[p.i]);
            let direct = grid.rho(p.i, p.k + 1)
                - grid.rho(p.i, p.k)
                - coeff * (grid.flow(p.i - 1, p.k) - grid.flow(p.i, p.k));
            assert_eq!(via_shifts[j].to_bits(), direct.to_bits());
        }
    }

    fn delta_kernel() -> KernelParams {
        KernelParams::new(1.0, 1e-3, 1e-3)
    }

    #[test]
    fn zero_residual_log_density_closed_form() {
        let m = 5;
        let z: Vec<GridPoint> = (0..m).map(|j| GridPoint::new(j + 1, j)).collect();
        let spec = ResidualGpSpec { kernels: [delta_kernel(), delta_kernel(), delta_kernel()] };
        let residuals = [vec![0.0; m], vec![0.0; m], vec![0.0; m]];
        let val = physics_log_density(&residuals, &spec, &z).unwrap();
        assert_eq!(val, 3.0 * (-0.5 * m as f64 * LN_2PI));
    }

    #[test]
    fn scaling_residuals_lowers_log_density() {
        let z: Vec<GridPoint> = (0..6).map(|j| GridPoint::new(1 + j % 3, j)).collect();
        let kernel = KernelParams::new(2.0, 2.0, 3.0);
        let spec = ResidualGpSpec { kernels: [kernel, kernel, kernel] };
        let g: Vec<f64> = (0..6).map(|j| 0.3 + 0.1 * j as f64).collect();
        let doubled: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let base = physics_log_density(&[g.clone(), g.clone(), g.clone()], &spec, &z).unwrap();
        let scaled =
            physics_log_density(&[doubled.clone(), doubled.clone(), doubled], &spec, &z).unwrap();
        assert!(scaled < base);
    }

    #[test]
    fn log_density_matches_dense_oracle() {
        use nalgebra::{DMatrix, DVector};
        let m = 5;
        let z: Vec<GridPoint> = vec![
            GridPoint::new(1, 0),
            GridPoint::new(2, 0),
            GridPoint::new(1, 3),
            GridPoint::new(3, 2),
            GridPoint::new(2, 5),
        ];
        let kernels = [
            KernelParams::new(1.5, 2.0, 4.0),
            KernelParams::new(0.7, 1.0, 2.0),
            KernelParams::new(2.2, 3.0, 6.0),
        ];
        let spec = ResidualGpSpec { kernels };
        let residuals = [
            vec![0.4, -0.2, 0.1, 0.3, -0.5],
            vec![1.0, 0.8, -0.3, 0.2, 0.6],
            vec![-0.1, 0.05, 0.3, -0.2, 0.15],
        ];
        let val = physics_log_density(&residuals, &spec, &z).unwrap();

        let mut expected = 0.0;
        for w in 0..3 {
            let mut k = DMatrix::zeros(m, m);
            for a in 0..m {
                for b in 0..m {
                    k[(a, b)] = crate::gp::kernel_eval(&spec.kernels[w], z[a], z[b]);
                }
            }
            let g = DVector::from_column_slice(&residuals[w]);
            let inv = k.clone().try_inverse().unwrap();
            let quad = (g.transpose() * &inv * &g)[(0, 0)];
            let det = k.determinant();
            expected += -0.5 * quad - 0.5 * det.ln() - 0.5 * m as f64 * LN_2PI;
        }
        assert_abs_diff_eq!(val, expected, epsilon = 1e-8);
    }

    #[test]
    fn encoded_equations_pass_operator_validation() {
        for expr in [g1_expression(), g2_expression(), g3_expression()] {
            let report = validate_operator_set(&expr);
            assert!(report.is_ok(), "violations: {:?}", report.violations);
            assert!(report.warnings.is_empty());
            assert!(!report.pass_through_gradient);
        }
    }

    #[test]
    fn absolute_value_is_a_violation() {
        let expr = ResidualExpr::Abs(Box::new(g3_expression()));
        let report = validate_operator_set(&expr);
        assert!(!report.is_ok());
        assert!(report.violations[0].contains("absolute value"));
    }

    #[test]
    fn comparison_requires_slack() {
        let bare = ResidualExpr::Compare {
            left: Box::new(ResidualExpr::Input("q[i,k]")),
            right: Box::new(ResidualExpr::Const(8000.0)),
            slack: None,
        };
        assert!(!validate_operator_set(&bare).is_ok());

        let with_slack = ResidualExpr::Compare {
            left: Box::new(ResidualExpr::Input("q[i,k]")),
            right: Box::new(ResidualExpr::Const(8000.0)),
            slack: Some("s_cap"),
        };
        let report = validate_operator_set(&with_slack);
        assert!(report.is_ok());
        assert!(report.warnings[0].contains("slack variable s_cap"));
    }

    #[test]
    fn non_differentiable_sets_pass_through() {
        let expr = ResidualExpr::NonDifferentiable {
            name: "lookup_table",
            inner: Box::new(g1_expression()),
        };
        let report = validate_operator_set(&expr);
        assert!(report.is_ok());
        assert!(report.pass_through_gradient);
        assert_eq!(report.warnings.len(), 1);
    }
}
