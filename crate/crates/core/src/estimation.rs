//! Discrepancy functions and their minimization.
//!
//! The ML discrepancy is the Wishart-likelihood function
//! log|Sigma| - log|S| + tr(S Sigma^-1) - p; the GLS function is
//! (1/2) tr{[(S - Sigma) V]^2}. Minimization is quasi-Newton (BFGS on the
//! inverse Hessian) with Armijo backtracking, a positive-definiteness
//! safeguard, and a floor on free unique variances.

use nalgebra::{DMatrix, DVector};

use crate::error::{MatrixRole, Result, SemError};
use crate::model::{CfaModel, ModelMatrices, ParameterVector, PatternMatrix};

/// Fitting method for `fit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    Ml,
    Gls,
}

/// Sample covariance matrix S with its observation count, optionally
/// carrying the raw data matrix (required by fourth-moment statistics).
#[derive(Debug, Clone)]
pub struct SampleMoments {
    s: DMatrix<f64>,
    n_obs: usize,
    data: Option<DMatrix<f64>>,
}

impl SampleMoments {
    /// Moments from an explicit covariance matrix (no raw data attached).
    pub fn from_covariance(s: DMatrix<f64>, n_obs: usize) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(SemError::DimensionMismatch(format!(
                "covariance matrix is {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        if n_obs < 2 {
            return Err(SemError::Domain(format!(
                "need at least 2 observations, got {n_obs}"
            )));
        }
        let scale = s.amax().max(1.0);
        let mut s = s;
        for i in 0..s.nrows() {
            for j in 0..i {
                if (s[(i, j)] - s[(j, i)]).abs() > 1e-10 * scale {
                    return Err(SemError::Domain(format!(
                        "covariance matrix is not symmetric at ({i}, {j})"
                    )));
                }
                let v = 0.5 * (s[(i, j)] + s[(j, i)]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        Ok(Self {
            s,
            n_obs,
            data: None,
        })
    }

    /// Moments carrying both S and the raw data it was computed from.
    /// The pair must agree within 1e-10.
    pub fn with_data(s: DMatrix<f64>, data: DMatrix<f64>) -> Result<Self> {
        let n_obs = data.nrows();
        let mut moments = Self::from_covariance(s, n_obs)?;
        if data.ncols() != moments.s.nrows() {
            return Err(SemError::DimensionMismatch(
                "data column count does not match covariance dimension".into(),
            ));
        }
        let recomputed = covariance_matrix(&data)?;
        if (&recomputed - &moments.s).amax() > 1e-10 * moments.s.amax().max(1.0) {
            return Err(SemError::Domain(
                "covariance matrix does not match the raw data".into(),
            ));
        }
        moments.data = Some(data);
        Ok(moments)
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    /// n = N - 1, the multiplier used by every statistic.
    pub fn n(&self) -> usize {
        self.n_obs - 1
    }

    pub fn p(&self) -> usize {
        self.s.nrows()
    }

    pub fn data(&self) -> Option<&DMatrix<f64>> {
        self.data.as_ref()
    }
}

/// Unbiased (divide by N-1) covariance matrix of an N x p data matrix,
/// exactly symmetric by construction.
pub(crate) fn covariance_matrix(data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = data.nrows();
    let p = data.ncols();
    if n < 2 {
        return Err(SemError::Domain(format!(
            "need at least 2 observations, got {n}"
        )));
    }
    let mut mean = vec![0.0; p];
    for r in 0..n {
        for c in 0..p {
            mean[c] += data[(r, c)];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut s = DMatrix::zeros(p, p);
    for r in 0..n {
        for i in 0..p {
            let di = data[(r, i)] - mean[i];
            for j in 0..=i {
                s[(i, j)] += di * (data[(r, j)] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..p {
        for j in 0..=i {
            let v = s[(i, j)] / denom;
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    Ok(s)
}

/// Result of a discrepancy minimization.
///
/// `gradient_norm` is the max-norm of the projected gradient: components
/// pressing a floored unique variance into its bound are excluded, so a
/// legitimate boundary solution reports a small value.
#[derive(Debug, Clone, PartialEq)]
pub struct FitSolution {
    pub theta_hat: ParameterVector,
    pub f_min: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub method: FitMethod,
}

struct CholContext {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl CholContext {
    fn new(m: &DMatrix<f64>, role: MatrixRole) -> Result<Self> {
        match m.clone().cholesky() {
            Some(chol) => Ok(Self { chol }),
            None => Err(SemError::NotPositiveDefinite { matrix: role }),
        }
    }

    fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let mut acc = 0.0;
        for i in 0..l.nrows() {
            acc += l[(i, i)].ln();
        }
        2.0 * acc
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// The ML (Wishart likelihood) discrepancy
/// log|Sigma| - log|S| + tr(S Sigma^-1) - p.
///
/// Computed through Cholesky factorizations; no explicit inverse is
/// formed. Returns exactly 0 when the two matrices are identical.
pub fn ml_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != sigma.shape() || s.nrows() != s.ncols() {
        return Err(SemError::DimensionMismatch(format!(
            "S is {}x{}, Sigma is {}x{}",
            s.nrows(),
            s.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let p = s.nrows();
    let chol_s = CholContext::new(s, MatrixRole::Sample)?;
    let chol_sigma = CholContext::new(sigma, MatrixRole::Implied)?;
    if s == sigma {
        return Ok(0.0);
    }
    let trace = chol_sigma.solve(s).trace();
    Ok(chol_sigma.ln_det() - chol_s.ln_det() + trace - p as f64)
}

/// The GLS discrepancy (1/2) tr{[(S - Sigma) V]^2}.
pub fn gls_discrepancy(s: &DMatrix<f64>, sigma: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != sigma.shape() || s.shape() != v.shape() || s.nrows() != s.ncols() {
        return Err(SemError::DimensionMismatch(
            "S, Sigma, and V must be square with equal dimensions".into(),
        ));
    }
    let m = (s - sigma) * v;
    Ok(0.5 * trace_of_square(&m))
}

/// tr(M^2) for a square matrix, without forming the product.
fn trace_of_square(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += m[(i, j)] * m[(j, i)];
        }
    }
    acc
}

/// Gradient of a pattern-structured discrepancy given the "center" matrix
/// A, where dF/dtheta_k = tr(A * dSigma/dtheta_k). Exploits the sparsity
/// of the pattern derivatives:
///   loading (i, a)      -> 2 (A Lambda Phi)[i, a]
///   factor cov (a, b)   -> (Lambda' A Lambda)[a, b] (x2 off-diagonal)
///   unique cov (i, j)   -> A[i, j] (x2 off-diagonal)
fn assemble_gradient(model: &CfaModel, mats: &ModelMatrices, a: &DMatrix<f64>) -> DVector<f64> {
    let b_load = a * &mats.loadings * &mats.factor_cov;
    let b_phi = mats.loadings.transpose() * a * &mats.loadings;
    let mut g = DVector::zeros(model.q());
    for (k, pos) in model.free_locations().iter().enumerate() {
        g[k] = match pos.matrix {
            PatternMatrix::Loadings => 2.0 * b_load[(pos.row, pos.col)],
            PatternMatrix::FactorCov => {
                if pos.row == pos.col {
                    b_phi[(pos.row, pos.col)]
                } else {
                    2.0 * b_phi[(pos.row, pos.col)]
                }
            }
            PatternMatrix::UniqueCov => {
                if pos.row == pos.col {
                    a[(pos.row, pos.col)]
                } else {
                    2.0 * a[(pos.row, pos.col)]
                }
            }
        };
    }
    g
}

/// Analytic gradient of the ML discrepancy with respect to theta.
///
/// Component k is tr[(Sigma^-1 - Sigma^-1 S Sigma^-1) dSigma/dtheta_k].
pub fn ml_gradient(
    model: &CfaModel,
    theta: &ParameterVector,
    s: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let mats = model.unpack(theta)?;
    let sigma = model.implied_covariance(theta)?;
    let chol = CholContext::new(&sigma, MatrixRole::Implied)?;
    let sigma_inv = chol.inverse();
    let mut a = &sigma_inv - &sigma_inv * s * &sigma_inv;
    symmetrize(&mut a);
    Ok(assemble_gradient(model, &mats, &a))
}

/// Analytic gradient of the GLS discrepancy, component k equal to
/// tr[V (Sigma - S) V dSigma/dtheta_k].
pub fn gls_gradient(
    model: &CfaModel,
    theta: &ParameterVector,
    s: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let mats = model.unpack(theta)?;
    let sigma = model.implied_covariance(theta)?;
    let mut a = v * (sigma - s) * v;
    symmetrize(&mut a);
    Ok(assemble_gradient(model, &mats, &a))
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Deterministic starting values: free loadings at their declared starts,
/// free factor covariances at 0 (variances at their declared starts),
/// free unique variances at 0.5 * S_jj, free unique covariances at 0.
pub fn starting_values(model: &CfaModel, s: &DMatrix<f64>) -> ParameterVector {
    let mut values = vec![0.0; model.q()];
    for (k, pos) in model.free_locations().iter().enumerate() {
        let declared = match model.entry(*pos) {
            crate::model::ParamEntry::Free { start, .. } => start,
            crate::model::ParamEntry::Fixed(v) => v,
        };
        values[k] = match pos.matrix {
            PatternMatrix::Loadings => declared,
            PatternMatrix::FactorCov => {
                if pos.row == pos.col {
                    declared
                } else {
                    0.0
                }
            }
            PatternMatrix::UniqueCov => {
                if pos.row == pos.col {
                    0.5 * s[(pos.row, pos.row)]
                } else {
                    0.0
                }
            }
        };
    }
    ParameterVector::new(values)
}

const GRAD_TOL: f64 = 1e-6;
const REL_F_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 500;
const ARMIJO_C1: f64 = 1e-4;
const STEP_CONTRACTION: f64 = 0.5;
const UNIQUE_VARIANCE_FLOOR: f64 = 1e-4;

/// Minimize the chosen discrepancy over theta, starting from
/// `starting_values`.
pub fn fit(model: &CfaModel, moments: &SampleMoments, method: FitMethod) -> Result<FitSolution> {
    let start = starting_values(model, moments.s());
    fit_with_start(model, moments, method, start)
}

/// Minimize from an explicit starting point (used for warm restarts).
///
/// Non-convergence (iteration cap or step underflow) is reported through
/// the `converged` flag, not as an error; the best point found is
/// returned. Hard errors are reserved for invalid inputs such as a
/// non-positive-definite S.
pub fn fit_with_start(
    model: &CfaModel,
    moments: &SampleMoments,
    method: FitMethod,
    start: ParameterVector,
) -> Result<FitSolution> {
    if start.len() != model.q() {
        return Err(SemError::DimensionMismatch(format!(
            "start vector has length {}, model has q = {}",
            start.len(),
            model.q()
        )));
    }
    if moments.p() != model.p() {
        return Err(SemError::DimensionMismatch(format!(
            "moments are for {} variables, model has {}",
            moments.p(),
            model.p()
        )));
    }
    let s = moments.s();
    let chol_s = CholContext::new(s, MatrixRole::Sample)?;
    let ln_det_s = chol_s.ln_det();
    let p = model.p();

    let v_gls = match method {
        FitMethod::Ml => None,
        // "In practice, V = S^-1".
        FitMethod::Gls => Some(chol_s.inverse()),
    };

    // Indices of free unique variances, floored during the search to keep
    // the Wishart function defined near Heywood cases.
    let floored: Vec<usize> = model
        .free_locations()
        .iter()
        .enumerate()
        .filter_map(|(k, pos)| {
            (pos.matrix == PatternMatrix::UniqueCov && pos.row == pos.col).then_some(k)
        })
        .collect();
    let project = |x: &mut DVector<f64>| {
        for &k in &floored {
            if x[k] < UNIQUE_VARIANCE_FLOOR {
                x[k] = UNIQUE_VARIANCE_FLOOR;
            }
        }
    };
    // Convergence is measured on the projected gradient: a component
    // pushing a floored variance below its bound cannot produce descent
    // and is excluded (the KKT measure for the bound).
    let projected_norm = |x: &DVector<f64>, g: &DVector<f64>| -> f64 {
        let mut norm: f64 = 0.0;
        for k in 0..g.len() {
            let blocked =
                floored.contains(&k) && x[k] <= UNIQUE_VARIANCE_FLOOR && g[k] > 0.0;
            if !blocked {
                norm = norm.max(g[k].abs());
            }
        }
        norm
    };

    // Objective: None signals a non-positive-definite Sigma(theta), which
    // the line search treats as an unacceptable step.
    let objective = |x: &DVector<f64>| -> Option<f64> {
        let theta = ParameterVector::from_dvector(x.clone());
        let sigma = model.implied_covariance(&theta).ok()?;
        let chol = sigma.clone().cholesky()?;
        match &v_gls {
            None => {
                let mut acc = 0.0;
                let l = chol.l_dirty();
                for i in 0..p {
                    acc += l[(i, i)].ln();
                }
                let trace = chol.solve(s).trace();
                Some(2.0 * acc - ln_det_s + trace - p as f64)
            }
            Some(v) => {
                let m = (s - sigma) * v;
                Some(0.5 * trace_of_square(&m))
            }
        }
    };
    let gradient = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let theta = ParameterVector::from_dvector(x.clone());
        match &v_gls {
            None => ml_gradient(model, &theta, s),
            Some(v) => gls_gradient(model, &theta, s, v),
        }
    };

    let mut x = start.as_dvector().clone();
    project(&mut x);
    let mut fx = objective(&x).ok_or(SemError::NotPositiveDefinite {
        matrix: MatrixRole::Implied,
    })?;
    let mut gx = gradient(&x)?;

    let q = model.q();
    let mut h = DMatrix::<f64>::identity(q, q);
    let mut converged = false;
    let mut iterations = 0;
    let mut first_update = true;

    loop {
        if projected_norm(&x, &gx) <= GRAD_TOL {
            converged = true;
            break;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        iterations += 1;

        let mut direction = -(&h * &gx);
        let mut slope = gx.dot(&direction);
        if !(slope < 0.0) {
            // Lost descent (bad curvature information); restart from steepest descent.
            h = DMatrix::identity(q, q);
            direction = -gx.clone();
            slope = gx.dot(&direction);
            if slope == 0.0 {
                converged = true;
                break;
            }
        }

        // Backtracking line search with the Armijo condition; a trial theta
        // with non-PD Sigma is rejected the same way as an insufficient
        // decrease, halving the step.
        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        while alpha > 1e-20 {
            let mut xt = &x + &direction * alpha;
            project(&mut xt);
            if let Some(ft) = objective(&xt) {
                if ft <= fx + ARMIJO_C1 * alpha * slope {
                    accepted = Some((xt, ft));
                    break;
                }
            }
            alpha *= STEP_CONTRACTION;
        }
        let Some((xt, ft)) = accepted else {
            // Step-size underflow: return the best point found so far.
            break;
        };

        let gt = gradient(&xt)?;
        let step = &xt - &x;
        let grad_diff = &gt - &gx;
        let rel_change = (fx - ft).abs() / fx.abs().max(1.0);

        x = xt;
        fx = ft;
        gx = gt;

        let sy = step.dot(&grad_diff);
        if sy > 1e-12 * step.norm() * grad_diff.norm() {
            if first_update {
                // Oren-Luenberger scaling of the initial inverse Hessian.
                let scale = sy / grad_diff.dot(&grad_diff);
                if scale.is_finite() && scale > 0.0 {
                    h = DMatrix::identity(q, q) * scale;
                }
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &grad_diff;
            let yhy = grad_diff.dot(&hy);
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            //    = H - rho (s (Hy)' + (Hy) s') + rho^2 yHy s s' + rho s s'
            let c = rho * rho * yhy + rho;
            for i in 0..q {
                for j in 0..q {
                    h[(i, j)] += c * step[i] * step[j] - rho * (step[i] * hy[j] + hy[i] * step[j]);
                }
            }
        }

        if rel_change <= REL_F_TOL {
            converged = true;
            break;
        }
    }

    let gradient_norm = projected_norm(&x, &gx);
    Ok(FitSolution {
        theta_hat: ParameterVector::from_dvector(x),
        f_min: fx,
        converged,
        iterations,
        gradient_norm,
        method,
    })
}

/// Closed-form ML fit of the independence (baseline) model: the unique
/// variances equal the sample variances and the minimized discrepancy is
/// log|diag(S)| - log|S|. No iteration is performed.
pub fn fit_independence(moments: &SampleMoments) -> Result<FitSolution> {
    let s = moments.s();
    let chol_s = CholContext::new(s, MatrixRole::Sample)?;
    let p = s.nrows();
    let mut theta = Vec::with_capacity(p);
    let mut ln_det_diag = 0.0;
    for j in 0..p {
        theta.push(s[(j, j)]);
        ln_det_diag += s[(j, j)].ln();
    }
    let f_min = (ln_det_diag - chol_s.ln_det()).max(0.0);
    Ok(FitSolution {
        theta_hat: ParameterVector::new(theta),
        f_min,
        converged: true,
        iterations: 0,
        gradient_norm: 0.0,
        method: FitMethod::Ml,
    })
}

/// Degrees of freedom of the independence model: p(p+1)/2 - p.
pub fn independence_df(p: usize) -> usize {
    p * (p + 1) / 2 - p
}
