//! Chi-square test statistics, robust scaling, Lagrange-multiplier
//! modification tests, and fit indices.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{MatrixRole, Result, SemError};
use crate::estimation::{FitSolution, SampleMoments};
use crate::model::{CfaModel, ParameterVector, PatternPosition};
use crate::vech;

/// Which statistic a `TestStatistic` carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StatKind {
    Ml,
    Rls,
    Sb,
}

impl std::fmt::Display for StatKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StatKind::Ml => "ML",
            StatKind::Rls => "RLS",
            StatKind::Sb => "SB",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for StatKind {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(StatKind::Ml),
            "rls" => Ok(StatKind::Rls),
            "sb" => Ok(StatKind::Sb),
            other => Err(SemError::Domain(format!("unknown estimator: {other}"))),
        }
    }
}

/// A chi-square-referred test statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct TestStatistic {
    pub value: f64,
    pub df: usize,
    pub p_value: f64,
    pub kind: StatKind,
}

/// Upper-tail probability P(chi-square_df > x), through the regularized
/// incomplete gamma function.
pub fn chi_square_sf(x: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(SemError::Domain("chi-square df must be >= 1".into()));
    }
    if !(x >= 0.0) {
        return Err(SemError::Domain(format!(
            "chi-square statistic must be nonnegative, got {x}"
        )));
    }
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| SemError::Domain(format!("chi-square({df}): {e}")))?;
    Ok(dist.sf(x).clamp(0.0, 1.0))
}

/// Lower-tail probability P(chi-square_df <= x).
pub fn chi_square_cdf(x: f64, df: usize) -> Result<f64> {
    if df < 1 {
        return Err(SemError::Domain("chi-square df must be >= 1".into()));
    }
    if !(x >= 0.0) {
        return Err(SemError::Domain(format!(
            "chi-square statistic must be nonnegative, got {x}"
        )));
    }
    let dist = ChiSquared::new(df as f64)
        .map_err(|e| SemError::Domain(format!("chi-square({df}): {e}")))?;
    Ok(dist.cdf(x).clamp(0.0, 1.0))
}

/// T_ML = (N - 1) * F_ML(theta-hat), referred to chi-square(df).
/// A saturated model (df = 0) reports p = 1.
pub fn t_ml(f_min: f64, n_obs: usize, df: usize) -> Result<TestStatistic> {
    if n_obs < 2 {
        return Err(SemError::Domain(format!(
            "need at least 2 observations, got {n_obs}"
        )));
    }
    if f_min < -1e-8 {
        return Err(SemError::Domain(format!(
            "discrepancy must be nonnegative, got {f_min}"
        )));
    }
    let value = ((n_obs - 1) as f64 * f_min).max(0.0);
    let p_value = if df == 0 { 1.0 } else { chi_square_sf(value, df)? };
    Ok(TestStatistic {
        value,
        df,
        p_value,
        kind: StatKind::Ml,
    })
}

/// T_RLS = (n/2) tr{[(S - Sigma_ML) Sigma_ML^-1]^2}: the GLS quadratic
/// form evaluated at the ML solution with weight Sigma_ML^-1.
pub fn t_rls(
    s: &DMatrix<f64>,
    sigma_ml: &DMatrix<f64>,
    n_obs: usize,
    df: usize,
) -> Result<TestStatistic> {
    if s.shape() != sigma_ml.shape() {
        return Err(SemError::DimensionMismatch(
            "S and Sigma_ML must have equal dimensions".into(),
        ));
    }
    let chol = sigma_ml
        .clone()
        .cholesky()
        .ok_or(SemError::NotPositiveDefinite {
            matrix: MatrixRole::Implied,
        })?;
    // Y = Sigma^-1 (S - Sigma); tr(Y^2) equals the trace of the squared
    // residual-weight product in either multiplication order.
    let y = chol.solve(&(s - sigma_ml));
    let p = y.nrows();
    let mut tr = 0.0;
    for i in 0..p {
        for j in 0..p {
            tr += y[(i, j)] * y[(j, i)];
        }
    }
    let n = (n_obs - 1) as f64;
    let value = (0.5 * n * tr).max(0.0);
    Ok(TestStatistic {
        value,
        df,
        p_value: chi_square_sf(value, df)?,
        kind: StatKind::Rls,
    })
}

/// The Satorra-Bentler scaling factor c-hat = tr(U Gamma) / df, with
/// U = W - W Delta (Delta' W Delta)^-1 Delta' W built from the
/// normal-theory weight matrix at the solution and Gamma the
/// distribution-free fourth-moment matrix of the data.
pub fn sb_scaling(
    model: &CfaModel,
    theta_hat: &ParameterVector,
    moments: &SampleMoments,
) -> Result<f64> {
    let data = moments.data().ok_or(SemError::MissingRawData)?;
    let df = model.degrees_of_freedom()?;
    if df == 0 {
        return Err(SemError::Domain(
            "scaling undefined for a saturated model (df = 0)".into(),
        ));
    }

    let sigma = model.implied_covariance(theta_hat)?;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or(SemError::NotPositiveDefinite {
            matrix: MatrixRole::Implied,
        })?;
    let sigma_inv = chol.inverse();

    let w = vech::normal_theory_weight(&sigma_inv);
    let delta = model.vech_jacobian(theta_hat)?;
    let gamma = vech::fourth_moment_cov(data);

    let wd = &w * &delta; // p* x q
    let info = delta.transpose() * &wd; // q x q
    let info_chol = info.cholesky().ok_or(SemError::SingularInformation)?;

    // tr(U Gamma) = tr(W Gamma) - tr[(D'WD)^-1 (WD)' Gamma (WD)].
    let mut tr_wg = 0.0;
    let ps = w.nrows();
    for i in 0..ps {
        for j in 0..ps {
            tr_wg += w[(i, j)] * gamma[(j, i)];
        }
    }
    let k = wd.transpose() * &gamma * &wd; // q x q
    let tr_correction = info_chol.solve(&k).trace();

    let c_hat = (tr_wg - tr_correction) / df as f64;
    if !c_hat.is_finite() || c_hat <= 1e-8 {
        return Err(SemError::Domain(format!(
            "degenerate scaling factor: {c_hat}"
        )));
    }
    Ok(c_hat)
}

/// Satorra-Bentler scaled statistic T_SB = T_ML / c-hat, referred to the
/// same degrees of freedom. Requires raw data in the moments.
pub fn satorra_bentler(
    t: &TestStatistic,
    model: &CfaModel,
    theta_hat: &ParameterVector,
    moments: &SampleMoments,
) -> Result<TestStatistic> {
    let c_hat = sb_scaling(model, theta_hat, moments)?;
    let value = t.value / c_hat;
    Ok(TestStatistic {
        value,
        df: t.df,
        p_value: chi_square_sf(value, t.df)?,
        kind: StatKind::Sb,
    })
}

/// One candidate from a Lagrange-multiplier scan: a currently fixed
/// pattern position, its 1-df score statistic, and the chi-square drop
/// predicted if it were freed.
#[derive(Debug, Clone, PartialEq)]
pub struct LmCandidate {
    pub target: PatternPosition,
    pub score: f64,
    pub p_value: f64,
    pub expected_drop: f64,
}

/// The default candidate universe: every currently fixed cross-loading
/// and every fixed off-diagonal unique covariance, capped at 200 entries.
pub fn default_lm_candidates(model: &CfaModel) -> Vec<PatternPosition> {
    let mut out = Vec::new();
    for var in 0..model.p() {
        for factor in 0..model.m() {
            let pos = PatternPosition::loading(var, factor);
            if !model.entry(pos).is_free() {
                out.push(pos);
            }
        }
    }
    for i in 0..model.p() {
        for j in 0..i {
            let pos = PatternPosition::unique_cov(i, j);
            if !model.entry(pos).is_free() {
                out.push(pos);
            }
        }
    }
    out.truncate(200);
    out
}

/// Univariate score (Lagrange multiplier) tests for freeing each fixed
/// candidate position, evaluated at the ML solution without refitting.
///
/// For each candidate c the statistic is g_c^2 / (I_cc - I_ct I_tt^-1 I_tc),
/// where g is the gradient of (N-1) F_ML extended with the candidate at
/// its fixed value, and I = 4 n Delta' W Delta is the normal-theory
/// covariance of that gradient. Candidates with a numerically singular
/// conditional information are omitted from the ranking; the result is
/// sorted by descending score.
pub fn lm_test(
    model: &CfaModel,
    theta_hat: &ParameterVector,
    moments: &SampleMoments,
    candidates: &[PatternPosition],
) -> Result<Vec<LmCandidate>> {
    let s = moments.s();
    if s.nrows() != model.p() {
        return Err(SemError::DimensionMismatch(
            "moments do not match the model dimension".into(),
        ));
    }
    let n = moments.n() as f64;
    let mats = model.unpack(theta_hat)?;
    let sigma = model.implied_covariance(theta_hat)?;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or(SemError::NotPositiveDefinite {
            matrix: MatrixRole::Implied,
        })?;
    let sigma_inv = chol.inverse();

    // Gradient center A = Sigma^-1 (Sigma - S) Sigma^-1 and the shared
    // information blocks of the base parameters.
    let mut a = &sigma_inv - &sigma_inv * s * &sigma_inv;
    for i in 0..a.nrows() {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }

    let w = vech::normal_theory_weight(&sigma_inv);
    let delta = model.vech_jacobian(theta_hat)?;
    let info_scale = 4.0 * n;
    let wd = &w * &delta;
    let info_base = delta.transpose() * &wd * info_scale;
    let info_chol = info_base
        .cholesky()
        .ok_or(SemError::SingularInformation)?;

    let pairs = vech::vech_pairs(model.p());
    let mut results = Vec::with_capacity(candidates.len());
    for &pos in candidates {
        if model.entry(pos).is_free() {
            return Err(SemError::Domain(format!(
                "LM candidate {}[{},{}] is already free",
                pos.matrix, pos.row, pos.col
            )));
        }
        let dsigma = model.sigma_derivative(&mats, pos);

        // Gradient of (N-1) F_ML with respect to the candidate.
        let mut g_c = 0.0;
        for i in 0..model.p() {
            for j in 0..model.p() {
                g_c += a[(i, j)] * dsigma[(j, i)];
            }
        }
        g_c *= n;

        let mut d_c = DVector::zeros(pairs.len());
        for (r, &(i, j)) in pairs.iter().enumerate() {
            d_c[r] = dsigma[(i, j)];
        }
        let w_dc = &w * &d_c;
        let i_cc = info_scale * d_c.dot(&w_dc);
        let i_tc = delta.transpose() * &w_dc * info_scale;
        let conditional = i_cc - i_tc.dot(&info_chol.solve(&i_tc));

        if !conditional.is_finite() || conditional <= 1e-10 * i_cc.abs().max(1e-300) {
            // Degenerate candidate (information singular after conditioning).
            continue;
        }
        let score = (g_c * g_c / conditional).max(0.0);
        results.push(LmCandidate {
            target: pos,
            score,
            p_value: chi_square_sf(score, 1)?,
            expected_drop: score,
        });
    }
    results.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    Ok(results)
}

/// Normed fit index (T_i - T_k) / T_i.
pub fn nfi(t_i: f64, t_k: f64) -> Result<f64> {
    if t_i <= 0.0 {
        return Err(SemError::UndefinedBaseline);
    }
    Ok((t_i - t_k) / t_i)
}

/// Comparative fit index 1 - lambda_k / lambda_i with noncentrality
/// estimates lambda = max(T - df, 0), lambda_i additionally floored at
/// lambda_k; 1 when lambda_i is zero. Always in [0, 1].
pub fn cfi(t_k: f64, df_k: usize, t_i: f64, df_i: usize) -> f64 {
    let lambda_k = (t_k - df_k as f64).max(0.0);
    let lambda_i = (t_i - df_i as f64).max(0.0).max(lambda_k);
    if lambda_i == 0.0 {
        return 1.0;
    }
    (1.0 - lambda_k / lambda_i).clamp(0.0, 1.0)
}

/// The ratio-form index 1 - (T_k/df_k) / (T_i/df_i), uncapped.
pub fn tli(t_k: f64, df_k: usize, t_i: f64, df_i: usize) -> Result<f64> {
    if df_k == 0 || df_i == 0 {
        return Err(SemError::Domain("TLI requires nonzero df".into()));
    }
    if t_i <= 0.0 {
        return Err(SemError::UndefinedBaseline);
    }
    Ok(1.0 - (t_k / df_k as f64) / (t_i / df_i as f64))
}

/// The conventional Tucker-Lewis form
/// (T_i/df_i - T_k/df_k) / (T_i/df_i - 1), provided as a clearly labeled
/// alternative to the ratio form above.
pub fn tli_conventional(t_k: f64, df_k: usize, t_i: f64, df_i: usize) -> Result<f64> {
    if df_k == 0 || df_i == 0 {
        return Err(SemError::Domain("TLI requires nonzero df".into()));
    }
    let ratio_i = t_i / df_i as f64;
    let denom = ratio_i - 1.0;
    if denom == 0.0 {
        return Err(SemError::UndefinedBaseline);
    }
    Ok((ratio_i - t_k / df_k as f64) / denom)
}

/// Root-mean-square error of approximation
/// sqrt(max((T_k - df_k) / (n * df_k), 0)) with n = N - 1.
pub fn rmsea(t_k: f64, df_k: usize, n: usize) -> f64 {
    debug_assert!(df_k >= 1 && n >= 1);
    ((t_k - df_k as f64) / (n as f64 * df_k as f64)).max(0.0).sqrt()
}

/// The four fit indices with their cutoff verdicts (CFI > 0.95,
/// TLI > 0.95, RMSEA < 0.06; strict inequalities).
#[derive(Debug, Clone, PartialEq)]
pub struct FitIndexSet {
    pub nfi: f64,
    pub cfi: f64,
    pub tli: f64,
    pub rmsea: f64,
    pub baseline_t: f64,
    pub baseline_df: usize,
    pub verdict_cfi: bool,
    pub verdict_tli: bool,
    pub verdict_rmsea: bool,
}

pub const CFI_CUTOFF: f64 = 0.95;
pub const TLI_CUTOFF: f64 = 0.95;
pub const RMSEA_CUTOFF: f64 = 0.06;

/// Indices from already-computed statistics of the target model (T_k,
/// df_k) and its baseline (T_i, df_i), with n = N - 1.
pub fn fit_indices(t_k: f64, df_k: usize, t_i: f64, df_i: usize, n: usize) -> Result<FitIndexSet> {
    let nfi_v = nfi(t_i, t_k)?;
    let cfi_v = cfi(t_k, df_k, t_i, df_i);
    let tli_v = tli(t_k, df_k, t_i, df_i)?;
    let rmsea_v = rmsea(t_k, df_k, n);
    Ok(FitIndexSet {
        nfi: nfi_v,
        cfi: cfi_v,
        tli: tli_v,
        rmsea: rmsea_v,
        baseline_t: t_i,
        baseline_df: df_i,
        verdict_cfi: cfi_v > CFI_CUTOFF,
        verdict_tli: tli_v > TLI_CUTOFF,
        verdict_rmsea: rmsea_v < RMSEA_CUTOFF,
    })
}

/// Fit indices for an ML solution against its independence baseline.
pub fn evaluate_fit(
    fit: &FitSolution,
    baseline: &FitSolution,
    moments: &SampleMoments,
    model_df: usize,
    baseline_df: usize,
) -> Result<FitIndexSet> {
    let t_k = t_ml(fit.f_min, moments.n_obs(), model_df)?;
    let t_i = t_ml(baseline.f_min, moments.n_obs(), baseline_df)?;
    fit_indices(t_k.value, model_df, t_i.value, baseline_df, moments.n())
}
