//! Patterned CFA model: free/fixed parameter maps over the loading,
//! factor-covariance, and unique-covariance matrices, and the mapping
//! between the free-parameter vector theta and those matrices.

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Result, SemError};
use crate::vech;

/// One cell of a patterned parameter matrix: either a fixed constant or a
/// free parameter identified by its position in theta.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamEntry {
    Fixed(f64),
    Free { index: usize, start: f64 },
}

impl ParamEntry {
    pub fn is_free(&self) -> bool {
        matches!(self, ParamEntry::Free { .. })
    }

    fn value(&self, theta: &ParameterVector) -> f64 {
        match *self {
            ParamEntry::Fixed(v) => v,
            ParamEntry::Free { index, .. } => theta.values[index],
        }
    }
}

/// The free-parameter vector theta, ordered by free index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: DVector<f64>,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values: DVector::from_vec(values),
        }
    }

    pub fn from_dvector(values: DVector<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn as_dvector(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }
}

/// Which patterned matrix a position refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PatternMatrix {
    Loadings,
    FactorCov,
    UniqueCov,
}

impl std::fmt::Display for PatternMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PatternMatrix::Loadings => "lambda",
            PatternMatrix::FactorCov => "phi",
            PatternMatrix::UniqueCov => "psi",
        };
        f.write_str(s)
    }
}

/// A cell position in one of the three patterned matrices. For the two
/// symmetric matrices the canonical form has `row >= col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PatternPosition {
    pub matrix: PatternMatrix,
    pub row: usize,
    pub col: usize,
}

impl PatternPosition {
    pub fn loading(var: usize, factor: usize) -> Self {
        Self {
            matrix: PatternMatrix::Loadings,
            row: var,
            col: factor,
        }
    }

    pub fn factor_cov(a: usize, b: usize) -> Self {
        Self {
            matrix: PatternMatrix::FactorCov,
            row: a.max(b),
            col: a.min(b),
        }
    }

    pub fn unique_cov(a: usize, b: usize) -> Self {
        Self {
            matrix: PatternMatrix::UniqueCov,
            row: a.max(b),
            col: a.min(b),
        }
    }
}

/// The matrices obtained by substituting theta into the patterns.
#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub loadings: DMatrix<f64>,
    pub factor_cov: DMatrix<f64>,
    pub unique_cov: DMatrix<f64>,
}

fn tri_index(i: usize, j: usize) -> usize {
    debug_assert!(i >= j);
    i * (i + 1) / 2 + j
}

/// A confirmatory factor model over p observed variables and m factors.
///
/// The loading pattern is p x m; the factor- and unique-covariance
/// patterns are symmetric, holding one entry per unordered pair so that a
/// free off-diagonal parameter is counted once. Free indices form a
/// contiguous 0..q-1 enumeration.
#[derive(Debug, Clone)]
pub struct CfaModel {
    p: usize,
    m: usize,
    observed_names: Vec<String>,
    factor_names: Vec<String>,
    loadings: Vec<ParamEntry>,   // p x m, row-major
    factor_cov: Vec<ParamEntry>, // packed lower triangle, m(m+1)/2
    unique_cov: Vec<ParamEntry>, // packed lower triangle, p(p+1)/2
    free_locations: Vec<PatternPosition>,
}

impl CfaModel {
    /// Build and validate a model from its three patterns.
    ///
    /// `loadings` is row-major p x m; `factor_cov` and `unique_cov` are
    /// packed lower triangles (index i*(i+1)/2 + j for i >= j).
    pub fn new(
        observed_names: Vec<String>,
        factor_names: Vec<String>,
        loadings: Vec<ParamEntry>,
        factor_cov: Vec<ParamEntry>,
        unique_cov: Vec<ParamEntry>,
    ) -> Result<Self> {
        let p = observed_names.len();
        let m = factor_names.len();
        if p == 0 {
            return Err(SemError::InvalidModel(
                "model needs at least one observed variable".into(),
            ));
        }
        if loadings.len() != p * m {
            return Err(SemError::DimensionMismatch(format!(
                "loading pattern has {} entries, expected {}x{} = {}",
                loadings.len(),
                p,
                m,
                p * m
            )));
        }
        if factor_cov.len() != vech::vech_len(m) {
            return Err(SemError::DimensionMismatch(format!(
                "factor covariance pattern has {} entries, expected {}",
                factor_cov.len(),
                vech::vech_len(m)
            )));
        }
        if unique_cov.len() != vech::vech_len(p) {
            return Err(SemError::DimensionMismatch(format!(
                "unique covariance pattern has {} entries, expected {}",
                unique_cov.len(),
                vech::vech_len(p)
            )));
        }

        let model = Self {
            p,
            m,
            observed_names,
            factor_names,
            loadings,
            factor_cov,
            unique_cov,
            free_locations: Vec::new(),
        };
        model.finish_validation()
    }

    fn finish_validation(mut self) -> Result<Self> {
        // Collect free entries and check the index enumeration.
        let mut found: Vec<Option<PatternPosition>> = Vec::new();
        let mut record = |index: usize, pos: PatternPosition| -> Result<()> {
            if found.len() <= index {
                found.resize(index + 1, None);
            }
            if found[index].is_some() {
                return Err(SemError::InvalidModel(format!(
                    "free index {index} assigned to more than one pattern position"
                )));
            }
            found[index] = Some(pos);
            Ok(())
        };

        for i in 0..self.p {
            for j in 0..self.m {
                if let ParamEntry::Free { index, .. } = self.loadings[i * self.m + j] {
                    record(index, PatternPosition::loading(i, j))?;
                }
            }
        }
        for i in 0..self.m {
            for j in 0..=i {
                if let ParamEntry::Free { index, .. } = self.factor_cov[tri_index(i, j)] {
                    record(index, PatternPosition::factor_cov(i, j))?;
                }
            }
        }
        for i in 0..self.p {
            for j in 0..=i {
                if let ParamEntry::Free { index, .. } = self.unique_cov[tri_index(i, j)] {
                    record(index, PatternPosition::unique_cov(i, j))?;
                }
            }
        }

        let mut free_locations = Vec::with_capacity(found.len());
        for (index, pos) in found.into_iter().enumerate() {
            match pos {
                Some(p) => free_locations.push(p),
                None => {
                    return Err(SemError::InvalidModel(format!(
                        "free indices are not contiguous: index {index} is missing"
                    )))
                }
            }
        }
        self.free_locations = free_locations;

        let q = self.free_locations.len();
        let pstar = vech::vech_len(self.p);
        if q > pstar {
            return Err(SemError::OverParameterized { free: q, pstar });
        }

        self.check_identification()?;
        Ok(self)
    }

    /// Identification convention: either every factor variance is fixed
    /// (unit-variance factors), or every factor carries at least one fixed
    /// nonzero loading. Mixing the two is rejected.
    fn check_identification(&self) -> Result<()> {
        if self.m == 0 {
            return Ok(());
        }
        let all_variances_fixed = (0..self.m)
            .all(|j| matches!(self.factor_cov[tri_index(j, j)], ParamEntry::Fixed(_)));
        if all_variances_fixed {
            return Ok(());
        }
        let any_variance_fixed = (0..self.m)
            .any(|j| matches!(self.factor_cov[tri_index(j, j)], ParamEntry::Fixed(_)));
        if any_variance_fixed {
            return Err(SemError::InvalidModel(
                "mixed identification: fix all factor variances or none".into(),
            ));
        }
        for factor in 0..self.m {
            let anchored = (0..self.p).any(|var| {
                matches!(self.loadings[var * self.m + factor],
                    ParamEntry::Fixed(v) if v != 0.0)
            });
            if !anchored {
                return Err(SemError::InvalidModel(format!(
                    "factor {} has a free variance and no fixed nonzero loading",
                    self.factor_names[factor]
                )));
            }
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of free parameters q.
    pub fn q(&self) -> usize {
        self.free_locations.len()
    }

    /// p* = p(p+1)/2, the number of non-redundant covariance elements.
    pub fn pstar(&self) -> usize {
        vech::vech_len(self.p)
    }

    pub fn observed_names(&self) -> &[String] {
        &self.observed_names
    }

    pub fn factor_names(&self) -> &[String] {
        &self.factor_names
    }

    /// Pattern position of each free parameter, in theta order.
    pub fn free_locations(&self) -> &[PatternPosition] {
        &self.free_locations
    }

    /// The entry at a pattern position (symmetric positions are canonicalized).
    pub fn entry(&self, pos: PatternPosition) -> ParamEntry {
        match pos.matrix {
            PatternMatrix::Loadings => self.loadings[pos.row * self.m + pos.col],
            PatternMatrix::FactorCov => self.factor_cov[tri_index(pos.row.max(pos.col), pos.row.min(pos.col))],
            PatternMatrix::UniqueCov => self.unique_cov[tri_index(pos.row.max(pos.col), pos.row.min(pos.col))],
        }
    }

    /// Model degrees of freedom, p* - q.
    pub fn degrees_of_freedom(&self) -> Result<usize> {
        let q = self.q();
        let pstar = self.pstar();
        if q > pstar {
            return Err(SemError::OverParameterized { free: q, pstar });
        }
        Ok(pstar - q)
    }

    fn check_theta(&self, theta: &ParameterVector) -> Result<()> {
        if theta.len() != self.q() {
            return Err(SemError::DimensionMismatch(format!(
                "theta has length {}, model has q = {}",
                theta.len(),
                self.q()
            )));
        }
        Ok(())
    }

    /// Substitute theta into the patterns. The symmetric outputs are exact:
    /// entry (i, j) and (j, i) are written from the same packed cell.
    pub fn unpack(&self, theta: &ParameterVector) -> Result<ModelMatrices> {
        self.check_theta(theta)?;
        let mut loadings = DMatrix::zeros(self.p, self.m);
        for i in 0..self.p {
            for j in 0..self.m {
                loadings[(i, j)] = self.loadings[i * self.m + j].value(theta);
            }
        }
        let mut factor_cov = DMatrix::zeros(self.m, self.m);
        for i in 0..self.m {
            for j in 0..=i {
                let v = self.factor_cov[tri_index(i, j)].value(theta);
                factor_cov[(i, j)] = v;
                factor_cov[(j, i)] = v;
            }
        }
        let mut unique_cov = DMatrix::zeros(self.p, self.p);
        for i in 0..self.p {
            for j in 0..=i {
                let v = self.unique_cov[tri_index(i, j)].value(theta);
                unique_cov[(i, j)] = v;
                unique_cov[(j, i)] = v;
            }
        }
        Ok(ModelMatrices {
            loadings,
            factor_cov,
            unique_cov,
        })
    }

    /// Read the free entries back out of explicit matrices; inverse of
    /// `unpack` on the free coordinates.
    pub fn pack(
        &self,
        loadings: &DMatrix<f64>,
        factor_cov: &DMatrix<f64>,
        unique_cov: &DMatrix<f64>,
    ) -> Result<ParameterVector> {
        if loadings.shape() != (self.p, self.m)
            || factor_cov.shape() != (self.m, self.m)
            || unique_cov.shape() != (self.p, self.p)
        {
            return Err(SemError::DimensionMismatch(
                "matrix shapes do not match the model patterns".into(),
            ));
        }
        let mut values = vec![0.0; self.q()];
        for (k, pos) in self.free_locations.iter().enumerate() {
            values[k] = match pos.matrix {
                PatternMatrix::Loadings => loadings[(pos.row, pos.col)],
                PatternMatrix::FactorCov => factor_cov[(pos.row, pos.col)],
                PatternMatrix::UniqueCov => unique_cov[(pos.row, pos.col)],
            };
        }
        Ok(ParameterVector::new(values))
    }

    /// Model-implied covariance Sigma(theta) = Lambda Phi Lambda' + Psi,
    /// symmetrized after the product to remove rounding asymmetry.
    pub fn implied_covariance(&self, theta: &ParameterVector) -> Result<DMatrix<f64>> {
        let mats = self.unpack(theta)?;
        let lp = &mats.loadings * &mats.factor_cov;
        let mut sigma = &lp * mats.loadings.transpose() + &mats.unique_cov;
        for i in 0..self.p {
            for j in 0..i {
                let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        Ok(sigma)
    }

    /// Derivative of Sigma with respect to the parameter at `pos`,
    /// evaluated at the given unpacked matrices.
    pub fn sigma_derivative(&self, mats: &ModelMatrices, pos: PatternPosition) -> DMatrix<f64> {
        let p = self.p;
        let mut d = DMatrix::zeros(p, p);
        match pos.matrix {
            PatternMatrix::Loadings => {
                // dSigma = E_ia Phi Lambda' + Lambda Phi E_ia'
                //        = e_i r' + r e_i', with r = (Lambda Phi) column a.
                let r = &mats.loadings * mats.factor_cov.column(pos.col);
                let i = pos.row;
                for u in 0..p {
                    d[(i, u)] += r[u];
                    d[(u, i)] += r[u];
                }
            }
            PatternMatrix::FactorCov => {
                // dSigma = Lambda (E_ab + E_ba) Lambda' (single E_aa on the diagonal).
                let la = mats.loadings.column(pos.row);
                let lb = mats.loadings.column(pos.col);
                if pos.row == pos.col {
                    for u in 0..p {
                        for v in 0..p {
                            d[(u, v)] = la[u] * la[v];
                        }
                    }
                } else {
                    for u in 0..p {
                        for v in 0..p {
                            d[(u, v)] = la[u] * lb[v] + lb[u] * la[v];
                        }
                    }
                }
            }
            PatternMatrix::UniqueCov => {
                if pos.row == pos.col {
                    d[(pos.row, pos.col)] = 1.0;
                } else {
                    d[(pos.row, pos.col)] = 1.0;
                    d[(pos.col, pos.row)] = 1.0;
                }
            }
        }
        d
    }

    /// Jacobian of vech Sigma(theta) with respect to theta', p* x q.
    pub fn vech_jacobian(&self, theta: &ParameterVector) -> Result<DMatrix<f64>> {
        let mats = self.unpack(theta)?;
        let pairs = vech::vech_pairs(self.p);
        let mut jac = DMatrix::zeros(pairs.len(), self.q());
        for (k, pos) in self.free_locations.iter().enumerate() {
            let d = self.sigma_derivative(&mats, *pos);
            for (r, &(i, j)) in pairs.iter().enumerate() {
                jac[(r, k)] = d[(i, j)];
            }
        }
        Ok(jac)
    }

    /// A copy of this model with the (currently fixed) entry at `pos` freed,
    /// assigned the next free index q with the given start value.
    pub fn with_freed(&self, pos: PatternPosition, start: f64) -> Result<CfaModel> {
        if self.entry(pos).is_free() {
            return Err(SemError::InvalidModel(format!(
                "position {}[{},{}] is already free",
                pos.matrix, pos.row, pos.col
            )));
        }
        let mut clone = self.clone();
        let new_entry = ParamEntry::Free {
            index: self.q(),
            start,
        };
        match pos.matrix {
            PatternMatrix::Loadings => clone.loadings[pos.row * self.m + pos.col] = new_entry,
            PatternMatrix::FactorCov => {
                clone.factor_cov[tri_index(pos.row.max(pos.col), pos.row.min(pos.col))] = new_entry
            }
            PatternMatrix::UniqueCov => {
                clone.unique_cov[tri_index(pos.row.max(pos.col), pos.row.min(pos.col))] = new_entry
            }
        }
        clone.free_locations = Vec::new();
        clone.finish_validation()
    }

    /// Human-readable label of the free parameter at theta index `k`.
    pub fn parameter_label(&self, k: usize) -> String {
        let pos = self.free_locations[k];
        self.position_label(pos)
    }

    /// Human-readable label of any pattern position.
    pub fn position_label(&self, pos: PatternPosition) -> String {
        match pos.matrix {
            PatternMatrix::Loadings => format!(
                "lambda[{},{}]",
                self.observed_names[pos.row], self.factor_names[pos.col]
            ),
            PatternMatrix::FactorCov => format!(
                "phi[{},{}]",
                self.factor_names[pos.row], self.factor_names[pos.col]
            ),
            PatternMatrix::UniqueCov => format!(
                "psi[{},{}]",
                self.observed_names[pos.row], self.observed_names[pos.col]
            ),
        }
    }
}

/// The three-factor, fifteen-indicator analysis model used by the
/// simulation scenarios, with its population parameter values.
///
/// Simple structure: indicators 1-5 load on factor 1, 6-10 on factor 2,
/// 11-15 on factor 3. All 15 loadings, the 3 factor correlations, and the
/// 15 unique variances are free (q = 33, df = 87); factor variances are
/// fixed at 1. Population values: loadings 0.7, factor correlations 0.3,
/// unique variances 0.51 so every observed variance is exactly 1.
pub fn population_model() -> (CfaModel, ParameterVector) {
    let p = 15;
    let m = 3;
    let observed: Vec<String> = (1..=p).map(|i| format!("x{i}")).collect();
    let factors: Vec<String> = (1..=m).map(|j| format!("F{j}")).collect();

    let mut loadings = vec![ParamEntry::Fixed(0.0); p * m];
    for var in 0..p {
        let factor = var / 5;
        loadings[var * m + factor] = ParamEntry::Free {
            index: var,
            start: 0.7,
        };
    }

    let mut factor_cov = vec![ParamEntry::Fixed(1.0); vech::vech_len(m)];
    let mut idx = p;
    for i in 0..m {
        for j in 0..i {
            factor_cov[tri_index(i, j)] = ParamEntry::Free {
                index: idx,
                start: 0.0,
            };
            idx += 1;
        }
    }

    let mut unique_cov = vec![ParamEntry::Fixed(0.0); vech::vech_len(p)];
    for i in 0..p {
        unique_cov[tri_index(i, i)] = ParamEntry::Free {
            index: idx,
            start: 0.5,
        };
        idx += 1;
    }

    let model = CfaModel::new(observed, factors, loadings, factor_cov, unique_cov)
        .expect("population model pattern is valid");

    let mut values = Vec::with_capacity(model.q());
    values.extend(std::iter::repeat(0.7).take(15));
    values.extend(std::iter::repeat(0.3).take(3));
    values.extend(std::iter::repeat(0.51).take(15));
    (model, ParameterVector::new(values))
}

/// The independence (baseline) model for p variables: no factors, free
/// unique variances, all covariances fixed at zero.
pub fn independence_model(observed_names: Vec<String>) -> CfaModel {
    let p = observed_names.len();
    let mut unique_cov = vec![ParamEntry::Fixed(0.0); vech::vech_len(p)];
    for i in 0..p {
        unique_cov[tri_index(i, i)] = ParamEntry::Free {
            index: i,
            start: 0.5,
        };
    }
    CfaModel::new(observed_names, Vec::new(), Vec::new(), Vec::new(), unique_cov)
        .expect("independence model pattern is valid")
}

// ---------------------------------------------------------------------------
// Model file format (JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    observed: Vec<String>,
    factors: Vec<String>,
    #[serde(default)]
    loadings: Vec<LoadingSpec>,
    #[serde(default)]
    factor_cov: Vec<PairSpec>,
    #[serde(default)]
    unique_cov: Vec<PairSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadingSpec {
    var: String,
    factor: String,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    start: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSpec {
    a: String,
    b: String,
    #[serde(default)]
    value: Option<f64>,
    #[serde(default)]
    start: Option<f64>,
}

fn name_index(names: &[String], name: &str, kind: &str) -> Result<usize> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| SemError::InvalidModel(format!("unknown {kind} name: {name}")))
}

/// Parse a model from its JSON file format.
///
/// Conventions: a listed entry with `value` is fixed at that value; a
/// listed entry without `value` is free (optional `start`). Unlisted
/// loadings are fixed at 0; unlisted factor variances are fixed at 1 and
/// unlisted factor covariances at 0; unlisted unique variances are free
/// with start 0.5 and unlisted unique covariances are fixed at 0. Free
/// indices are assigned in listing order (loadings, then factor_cov, then
/// unique_cov), followed by the defaulted free unique variances in
/// variable order.
pub fn model_from_json(text: &str) -> Result<CfaModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    let p = file.observed.len();
    let m = file.factors.len();

    let mut loadings = vec![ParamEntry::Fixed(0.0); p * m];
    let mut loadings_seen = vec![false; p * m];
    let mut factor_cov: Vec<Option<ParamEntry>> = vec![None; vech::vech_len(m)];
    let mut unique_cov: Vec<Option<ParamEntry>> = vec![None; vech::vech_len(p)];

    let mut next_index = 0usize;
    let mut entry = |value: Option<f64>, start: Option<f64>, default_start: f64| -> ParamEntry {
        match value {
            Some(v) => ParamEntry::Fixed(v),
            None => {
                let e = ParamEntry::Free {
                    index: next_index,
                    start: start.unwrap_or(default_start),
                };
                next_index += 1;
                e
            }
        }
    };

    for spec in &file.loadings {
        let var = name_index(&file.observed, &spec.var, "observed variable")?;
        let factor = name_index(&file.factors, &spec.factor, "factor")?;
        let cell = var * m + factor;
        if loadings_seen[cell] {
            return Err(SemError::InvalidModel(format!(
                "duplicate loading entry for ({}, {})",
                spec.var, spec.factor
            )));
        }
        loadings_seen[cell] = true;
        loadings[cell] = entry(spec.value, spec.start, 0.7);
    }

    for spec in &file.factor_cov {
        let a = name_index(&file.factors, &spec.a, "factor")?;
        let b = name_index(&file.factors, &spec.b, "factor")?;
        let cell = tri_index(a.max(b), a.min(b));
        if factor_cov[cell].is_some() {
            return Err(SemError::InvalidModel(format!(
                "duplicate factor_cov entry for ({}, {})",
                spec.a, spec.b
            )));
        }
        let default_start = if a == b { 1.0 } else { 0.0 };
        factor_cov[cell] = Some(entry(spec.value, spec.start, default_start));
    }

    for spec in &file.unique_cov {
        let a = name_index(&file.observed, &spec.a, "observed variable")?;
        let b = name_index(&file.observed, &spec.b, "observed variable")?;
        let cell = tri_index(a.max(b), a.min(b));
        if unique_cov[cell].is_some() {
            return Err(SemError::InvalidModel(format!(
                "duplicate unique_cov entry for ({}, {})",
                spec.a, spec.b
            )));
        }
        unique_cov[cell] = Some(entry(spec.value, spec.start, 0.5));
    }

    let factor_cov: Vec<ParamEntry> = {
        let mut out = Vec::with_capacity(vech::vech_len(m));
        for i in 0..m {
            for j in 0..=i {
                out.push(factor_cov[tri_index(i, j)].unwrap_or(if i == j {
                    ParamEntry::Fixed(1.0)
                } else {
                    ParamEntry::Fixed(0.0)
                }));
            }
        }
        out
    };
    let unique_cov: Vec<ParamEntry> = {
        let mut out = Vec::with_capacity(vech::vech_len(p));
        for i in 0..p {
            for j in 0..=i {
                out.push(match unique_cov[tri_index(i, j)] {
                    Some(e) => e,
                    None if i == j => {
                        let e = ParamEntry::Free {
                            index: next_index,
                            start: 0.5,
                        };
                        next_index += 1;
                        e
                    }
                    None => ParamEntry::Fixed(0.0),
                });
            }
        }
        out
    };

    CfaModel::new(file.observed, file.factors, loadings, factor_cov, unique_cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unpack_all_fixed_is_verbatim() {
        let model = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![ParamEntry::Fixed(0.8), ParamEntry::Fixed(0.6)],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(0.36),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.64),
            ],
        )
        .unwrap();
        assert_eq!(model.q(), 0);
        let mats = model.unpack(&ParameterVector::new(vec![])).unwrap();
        assert_eq!(mats.loadings[(0, 0)], 0.8);
        assert_eq!(mats.loadings[(1, 0)], 0.6);
        assert_eq!(mats.unique_cov[(0, 0)], 0.36);
        assert_eq!(mats.unique_cov[(1, 1)], 0.64);
    }

    #[test]
    fn unpack_two_indicator_free_loadings() {
        let model = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![
                ParamEntry::Free { index: 0, start: 0.7 },
                ParamEntry::Free { index: 1, start: 0.7 },
            ],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(0.51),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.51),
            ],
        )
        .unwrap();
        let mats = model.unpack(&ParameterVector::new(vec![0.7, 0.7])).unwrap();
        assert_eq!(mats.loadings[(0, 0)], 0.7);
        assert_eq!(mats.loadings[(1, 0)], 0.7);
    }

    #[test]
    fn theta_length_mismatch_is_error() {
        let (model, _) = population_model();
        let err = model.unpack(&ParameterVector::new(vec![0.0; 5])).unwrap_err();
        assert!(matches!(err, SemError::DimensionMismatch(_)));
    }

    #[test]
    fn implied_covariance_hand_example() {
        // One factor, loadings (0.7, 0.7), phi = 1, psi = diag(0.51):
        // Sigma = [[1.0, 0.49], [0.49, 1.0]].
        let model = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![
                ParamEntry::Free { index: 0, start: 0.7 },
                ParamEntry::Free { index: 1, start: 0.7 },
            ],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(0.51),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.51),
            ],
        )
        .unwrap();
        let sigma = model
            .implied_covariance(&ParameterVector::new(vec![0.7, 0.7]))
            .unwrap();
        assert!((sigma[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((sigma[(0, 1)] - 0.49).abs() < 1e-15);
        assert_eq!(sigma[(0, 1)], sigma[(1, 0)]);
    }

    #[test]
    fn zero_loadings_identity_psi_gives_identity() {
        let model = CfaModel::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["F".into()],
            vec![ParamEntry::Fixed(0.0); 3],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(1.0),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(1.0),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(1.0),
            ],
        )
        .unwrap();
        let sigma = model.implied_covariance(&ParameterVector::new(vec![])).unwrap();
        assert_eq!(sigma, DMatrix::identity(3, 3));
    }

    #[test]
    fn population_model_counts() {
        let (model, theta) = population_model();
        assert_eq!(model.p(), 15);
        assert_eq!(model.q(), 33);
        assert_eq!(model.pstar(), 120);
        assert_eq!(model.degrees_of_freedom().unwrap(), 87);
        assert_eq!(theta.len(), 33);
    }

    #[test]
    fn population_sigma_matches_independent_construction() {
        // Same-factor covariance 0.7 * 1.0 * 0.7 = 0.49, cross-factor
        // 0.7 * 0.3 * 0.7 = 0.147, unit diagonal by construction.
        let (model, theta) = population_model();
        let sigma = model.implied_covariance(&theta).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let expected = if i == j {
                    1.0
                } else if i / 5 == j / 5 {
                    0.49
                } else {
                    0.147
                };
                assert!(
                    (sigma[(i, j)] - expected).abs() < 1e-12,
                    "sigma[{i},{j}] = {}",
                    sigma[(i, j)]
                );
            }
        }
    }

    #[test]
    fn population_sigma_is_positive_definite() {
        let (model, theta) = population_model();
        let sigma = model.implied_covariance(&theta).unwrap();
        assert!(sigma.cholesky().is_some());
    }

    #[test]
    fn pack_unpack_round_trip() {
        let (model, _) = population_model();
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..100 {
            let values: Vec<f64> = (0..model.q())
                .map(|_| {
                    state = state
                        .wrapping_mul(6364136223846793005)
                        .wrapping_add(1442695040888963407);
                    ((state >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
                })
                .collect();
            let theta = ParameterVector::new(values);
            let mats = model.unpack(&theta).unwrap();
            let packed = model
                .pack(&mats.loadings, &mats.factor_cov, &mats.unique_cov)
                .unwrap();
            assert_eq!(packed, theta);
        }
    }

    #[test]
    fn independence_model_df() {
        let names: Vec<String> = (0..15).map(|i| format!("x{i}")).collect();
        let model = independence_model(names);
        assert_eq!(model.q(), 15);
        assert_eq!(model.degrees_of_freedom().unwrap(), 105);
    }

    #[test]
    fn saturated_model_df_zero() {
        // All p(p+1)/2 unique covariances free, no factors.
        let p = 4;
        let names: Vec<String> = (0..p).map(|i| format!("x{i}")).collect();
        let mut unique = Vec::new();
        let mut idx = 0;
        for i in 0..p {
            for j in 0..=i {
                let _ = j;
                unique.push(ParamEntry::Free {
                    index: idx,
                    start: 0.1,
                });
                idx += 1;
            }
        }
        let model = CfaModel::new(names, Vec::new(), Vec::new(), Vec::new(), unique).unwrap();
        assert_eq!(model.degrees_of_freedom().unwrap(), 0);
    }

    #[test]
    fn duplicate_free_index_rejected() {
        let err = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![
                ParamEntry::Free { index: 0, start: 0.7 },
                ParamEntry::Free { index: 0, start: 0.7 },
            ],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(0.51),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.51),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, SemError::InvalidModel(_)));
    }

    #[test]
    fn gapped_free_indices_rejected() {
        let err = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![
                ParamEntry::Free { index: 0, start: 0.7 },
                ParamEntry::Free { index: 2, start: 0.7 },
            ],
            vec![ParamEntry::Fixed(1.0)],
            vec![
                ParamEntry::Fixed(0.51),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.51),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, SemError::InvalidModel(_)));
    }

    #[test]
    fn unanchored_free_factor_variance_rejected() {
        let err = CfaModel::new(
            vec!["a".into(), "b".into()],
            vec!["F".into()],
            vec![
                ParamEntry::Free { index: 0, start: 0.7 },
                ParamEntry::Free { index: 1, start: 0.7 },
            ],
            vec![ParamEntry::Free { index: 2, start: 1.0 }],
            vec![
                ParamEntry::Fixed(0.51),
                ParamEntry::Fixed(0.0),
                ParamEntry::Fixed(0.51),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, SemError::InvalidModel(_)));
    }

    #[test]
    fn with_freed_appends_index() {
        let (model, _) = population_model();
        let freed = model
            .with_freed(PatternPosition::loading(5, 0), 0.0)
            .unwrap();
        assert_eq!(freed.q(), 34);
        assert_eq!(freed.degrees_of_freedom().unwrap(), 86);
        assert!(freed.entry(PatternPosition::loading(5, 0)).is_free());
        assert!(model
            .with_freed(PatternPosition::loading(0, 0), 0.0)
            .is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (model, theta) = population_model();
        let jac = model.vech_jacobian(&theta).unwrap();
        let h = 1e-6;
        let pairs = vech::vech_pairs(model.p());
        for k in [0usize, 7, 15, 17, 20, 32] {
            let mut up = theta.as_slice().to_vec();
            let mut dn = up.clone();
            up[k] += h;
            dn[k] -= h;
            let s_up = model.implied_covariance(&ParameterVector::new(up)).unwrap();
            let s_dn = model.implied_covariance(&ParameterVector::new(dn)).unwrap();
            for (r, &(i, j)) in pairs.iter().enumerate() {
                let fd = (s_up[(i, j)] - s_dn[(i, j)]) / (2.0 * h);
                assert!(
                    (jac[(r, k)] - fd).abs() < 1e-8,
                    "jacobian mismatch at row {r}, parameter {k}"
                );
            }
        }
    }

    #[test]
    fn model_json_defaults() {
        let text = r#"{
            "observed": ["y1", "y2", "y3"],
            "factors": ["G"],
            "loadings": [
                {"var": "y1", "factor": "G"},
                {"var": "y2", "factor": "G", "start": 0.5},
                {"var": "y3", "factor": "G", "value": 1.0}
            ]
        }"#;
        let model = model_from_json(text).unwrap();
        // Two free loadings + three defaulted free unique variances.
        assert_eq!(model.q(), 5);
        assert_eq!(
            model.entry(PatternPosition::loading(2, 0)),
            ParamEntry::Fixed(1.0)
        );
        assert_eq!(
            model.entry(PatternPosition::factor_cov(0, 0)),
            ParamEntry::Fixed(1.0)
        );
        assert_eq!(
            model.entry(PatternPosition::unique_cov(1, 0)),
            ParamEntry::Fixed(0.0)
        );
        assert!(model.entry(PatternPosition::unique_cov(1, 1)).is_free());
    }

    #[test]
    fn model_json_unknown_name_is_error() {
        let text = r#"{
            "observed": ["y1"],
            "factors": ["G"],
            "loadings": [{"var": "zz", "factor": "G"}]
        }"#;
        let err = model_from_json(text).unwrap_err();
        assert!(err.to_string().contains("zz"));
    }
}
