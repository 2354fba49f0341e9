//! Exact Gaussian-process regression over (segment, time) grid inputs.
//!
//! One independent GP per output dimension with an anisotropic squared
//! exponential kernel,
//!
//! ```text
//! K(x, x') = s² · exp(−(i−i')²/(2·ℓ_space²) − (k−k')²/(2·ℓ_time²))
//! ```
//!
//! Posterior mean and variance follow the standard conditioning identities
//! with observation noise variance 1/τ̄ on the diagonal; the log marginal
//! likelihood is the zero-mean Gaussian log density of an observed output
//! column under K + τ̄⁻¹I. All solves go through the jittered Cholesky in
//! [`crate::linalg`].

use crate::data::{Dataset, GridPoint, OutputDim};
use crate::linalg::{CholeskyFactor, LinalgError};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use crate::linalg::jittered_cholesky_solve;

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("empty input set")]
    EmptyInputSet,
    #[error("unobserved dimension has no posterior")]
    UnobservedDimension,
    #[error("invalid kernel parameter {name}: {value} (must be positive and finite)")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Squared-exponential kernel hyperparameters. Values are stored in natural
/// units; the optimizer works on their logarithms (see `prgp::ThetaLayout`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Signal variance s² in squared output units.
    pub signal_variance: f64,
    /// Lengthscale along the segment index, in segments.
    pub lengthscale_space: f64,
    /// Lengthscale along the time index, in timesteps.
    pub lengthscale_time: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscale_space: f64, lengthscale_time: f64) -> Self {
        KernelParams { signal_variance, lengthscale_space, lengthscale_time }
    }

    pub fn validate(&self) -> Result<(), GpError> {
        for (name, value) in [
            ("signal_variance", self.signal_variance),
            ("lengthscale_space", self.lengthscale_space),
            ("lengthscale_time", self.lengthscale_time),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(GpError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Parameters from their unconstrained log-space representation.
    pub fn from_log(log_sv: f64, log_ls: f64, log_lt: f64) -> Self {
        KernelParams {
            signal_variance: log_sv.exp(),
            lengthscale_space: log_ls.exp(),
            lengthscale_time: log_lt.exp(),
        }
    }

    pub fn to_log(&self) -> [f64; 3] {
        [self.signal_variance.ln(), self.lengthscale_space.ln(), self.lengthscale_time.ln()]
    }
}

/// Per-dimension GP configuration: kernels for flow, speed and density, noise
/// precisions τ̄ for the two observed dimensions, and prior means (zero after
/// standardization for the observed dimensions; the density prior mean is the
/// trainable level of the never-observed density output).
#[derive(Debug, Clone, PartialEq)]
pub struct GpSpec {
    /// Indexed by `OutputDim::index()`.
    pub kernels: [KernelParams; 3],
    /// Noise precision for flow and speed (density has no observations).
    pub noise_precision: [f64; 2],
    /// Prior mean per output dimension.
    pub prior_mean: [f64; 3],
}

impl GpSpec {
    pub fn validate(&self) -> Result<(), GpError> {
        for k in &self.kernels {
            k.validate()?;
        }
        for &p in &self.noise_precision {
            if !(p.is_finite() && p > 0.0) {
                return Err(GpError::InvalidParameter { name: "noise_precision", value: p });
            }
        }
        Ok(())
    }

    pub fn kernel(&self, dim: OutputDim) -> &KernelParams {
        &self.kernels[dim.index()]
    }

    /// Noise precision of an observed dimension.
    pub fn precision(&self, dim: OutputDim) -> Option<f64> {
        match dim {
            OutputDim::Flow => Some(self.noise_precision[0]),
            OutputDim::Speed => Some(self.noise_precision[1]),
            OutputDim::Density => None,
        }
    }
}

/// Kernel value between two grid inputs.
pub fn kernel_eval(params: &KernelParams, a: GridPoint, b: GridPoint) -> f64 {
    let di = a.i as f64 - b.i as f64;
    let dk = a.k as f64 - b.k as f64;
    let ls = params.lengthscale_space;
    let lt = params.lengthscale_time;
    params.signal_variance * (-di * di / (2.0 * ls * ls) - dk * dk / (2.0 * lt * lt)).exp()
}

/// Cross-kernel matrix |A| x |B|. When both arguments are the same slice the
/// upper triangle is mirrored so the result is exactly symmetric.
pub fn kernel_matrix(
    params: &KernelParams,
    a: &[GridPoint],
    b: &[GridPoint],
) -> Result<DMatrix<f64>, GpError> {
    if a.is_empty() || b.is_empty() {
        return Err(GpError::EmptyInputSet);
    }
    let same = std::ptr::eq(a.as_ptr(), b.as_ptr()) && a.len() == b.len();
    let mut m = DMatrix::zeros(a.len(), b.len());
    if same {
        for p in 0..a.len() {
            for q in p..a.len() {
                let v = kernel_eval(params, a[p], a[q]);
                m[(p, q)] = v;
                m[(q, p)] = v;
            }
        }
    } else {
        for p in 0..a.len() {
            for q in 0..b.len() {
                m[(p, q)] = kernel_eval(params, a[p], b[q]);
            }
        }
    }
    Ok(m)
}

/// Factored training covariance of one output dimension: the Cholesky of
/// K(X,X) + τ̄⁻¹I together with α = (K + τ̄⁻¹I)⁻¹ y. Built once and shared by
/// the marginal likelihood and any number of posterior evaluations.
#[derive(Debug, Clone)]
pub struct DimFit {
    pub inputs: Vec<GridPoint>,
    pub y: DVector<f64>,
    pub factor: CholeskyFactor,
    pub alpha: DVector<f64>,
    pub kernel: KernelParams,
    pub prior_mean: f64,
}

impl DimFit {
    pub fn new(spec: &GpSpec, data: &Dataset, dim: OutputDim) -> Result<Self, GpError> {
        spec.validate()?;
        let (inputs, values) = data.observed(dim);
        if inputs.is_empty() {
            return Err(GpError::UnobservedDimension);
        }
        let precision = spec.precision(dim).ok_or(GpError::UnobservedDimension)?;
        let kernel = *spec.kernel(dim);
        let prior_mean = spec.prior_mean[dim.index()];
        let mut cov = kernel_matrix(&kernel, &inputs, &inputs)?;
        let noise_var = 1.0 / precision;
        for d in 0..inputs.len() {
            cov[(d, d)] += noise_var;
        }
        let factor = CholeskyFactor::new(&cov)?;
        let centered = DVector::from_iterator(values.len(), values.iter().map(|v| v - prior_mean));
        let alpha = factor.solve_vector(&centered)?;
        let y = DVector::from_vec(values);
        Ok(DimFit { inputs, y, factor, alpha, kernel, prior_mean })
    }

    /// Posterior mean at the given inputs.
    pub fn posterior_mean(&self, xstar: &[GridPoint]) -> Result<Vec<f64>, GpError> {
        let kstar = kernel_matrix(&self.kernel, xstar, &self.inputs)?;
        let mean = &kstar * &self.alpha;
        Ok(mean.iter().map(|m| self.prior_mean + m).collect())
    }

    /// Posterior mean and noise-free variance at the given inputs.
    pub fn posterior(&self, xstar: &[GridPoint]) -> Result<(Vec<f64>, Vec<f64>), GpError> {
        let kstar = kernel_matrix(&self.kernel, xstar, &self.inputs)?;
        let mean: Vec<f64> =
            (&kstar * &self.alpha).iter().map(|m| self.prior_mean + m).collect();
        let solved = self.factor.solve_matrix(&kstar.transpose())?;
        let mut var = Vec::with_capacity(xstar.len());
        for (row, x) in xstar.iter().enumerate() {
            let prior = kernel_eval(&self.kernel, *x, *x);
            let reduction = kstar.row(row).transpose().dot(&solved.column(row).clone_owned());
            var.push((prior - reduction).max(0.0));
        }
        Ok((mean, var))
    }

    /// Joint posterior over all of `xstar` at once: mean vector and full
    /// covariance K(X*,X*) − K(X*,X) σ_f⁻¹ K(X,X*), for correlated sampling.
    pub fn posterior_joint(
        &self,
        xstar: &[GridPoint],
    ) -> Result<(DVector<f64>, DMatrix<f64>), GpError> {
        let kstar = kernel_matrix(&self.kernel, xstar, &self.inputs)?;
        let mean = (&kstar * &self.alpha).add_scalar(self.prior_mean);
        let solved = self.factor.solve_matrix(&kstar.transpose())?;
        let prior = kernel_matrix(&self.kernel, xstar, xstar)?;
        let cov = prior - &kstar * solved;
        Ok((mean, cov))
    }

    /// Zero-mean log marginal likelihood of the observed column:
    /// −½ yᵀσ_f⁻¹y − ½ log|σ_f| − n/2 log 2π.
    pub fn log_marginal_likelihood(&self) -> Result<f64, GpError> {
        let n = self.y.nrows() as f64;
        let quad = self.factor.quad_form(&self.y)?;
        Ok(-0.5 * quad - 0.5 * self.factor.log_det() - 0.5 * n * LN_2PI)
    }
}

/// Posterior mean and variance of one output dimension at new inputs.
pub fn gp_posterior(
    spec: &GpSpec,
    data: &Dataset,
    dim: OutputDim,
    xstar: &[GridPoint],
) -> Result<(Vec<f64>, Vec<f64>), GpError> {
    DimFit::new(spec, data, dim)?.posterior(xstar)
}

/// Log marginal likelihood of one observed output dimension.
pub fn log_marginal_likelihood(
    spec: &GpSpec,
    data: &Dataset,
    dim: OutputDim,
) -> Result<f64, GpError> {
    DimFit::new(spec, data, dim)?.log_marginal_likelihood()
}
