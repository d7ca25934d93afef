//! Sample generation from a population factor model, with bit-reproducible
//! seeded streams.
//!
//! Random draws come from ChaCha8 keyed by (master seed, scenario, sample
//! size index, replication), so any replication can be regenerated in
//! isolation and results do not depend on scheduling. Normal deviates use
//! the Box-Muller transform with `libm` routines, keeping output identical
//! across platforms.

use nalgebra::DMatrix;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MatrixRole, Result, SemError};
use crate::estimation::{covariance_matrix, SampleMoments};

/// Distribution of the generated observations. Both share the same
/// population covariance; the elliptical variant scales each observation's
/// factor and error vectors by a common random radius
/// r = sqrt(scale / chi-square(df)), which has E[r^2] = 1 at the default
/// (df = 5, scale = 3) and produces heavy tails.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PopulationDistribution {
    Normal,
    Elliptical { chisq_df: u32, scale: f64 },
}

impl PopulationDistribution {
    /// The elliptical condition used by the simulation scenarios:
    /// r ~ sqrt(3 / chi-square(5)).
    pub fn elliptical_default() -> Self {
        PopulationDistribution::Elliptical {
            chisq_df: 5,
            scale: 3.0,
        }
    }
}

/// A population factor model X = Lambda xi + epsilon with known matrices.
#[derive(Debug, Clone)]
pub struct PopulationSpec {
    loadings: DMatrix<f64>,
    factor_cov: DMatrix<f64>,
    unique_cov: DMatrix<f64>,
    distribution: PopulationDistribution,
    factor_chol: DMatrix<f64>,
    unique_chol: DMatrix<f64>,
}

impl PopulationSpec {
    pub fn new(
        loadings: DMatrix<f64>,
        factor_cov: DMatrix<f64>,
        unique_cov: DMatrix<f64>,
        distribution: PopulationDistribution,
    ) -> Result<Self> {
        let p = loadings.nrows();
        let m = loadings.ncols();
        if factor_cov.shape() != (m, m) || unique_cov.shape() != (p, p) {
            return Err(SemError::DimensionMismatch(
                "population matrices have inconsistent shapes".into(),
            ));
        }
        let factor_chol = matrix_sqrt_factor(&factor_cov)?;
        let unique_chol = matrix_sqrt_factor(&unique_cov)?;
        let spec = Self {
            loadings,
            factor_cov,
            unique_cov,
            distribution,
            factor_chol,
            unique_chol,
        };
        // The implied covariance itself must be usable downstream.
        matrix_sqrt_factor(&spec.implied_covariance())
            .map_err(|_| SemError::NotPositiveDefinite {
                matrix: MatrixRole::Population,
            })?;
        Ok(spec)
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn m(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn distribution(&self) -> PopulationDistribution {
        self.distribution
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn factor_cov(&self) -> &DMatrix<f64> {
        &self.factor_cov
    }

    pub fn unique_cov(&self) -> &DMatrix<f64> {
        &self.unique_cov
    }

    /// Population covariance Lambda Phi Lambda' + Psi.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let mut sigma =
            &self.loadings * &self.factor_cov * self.loadings.transpose() + &self.unique_cov;
        for i in 0..sigma.nrows() {
            for j in 0..i {
                let v = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
                sigma[(i, j)] = v;
                sigma[(j, i)] = v;
            }
        }
        sigma
    }

    /// Same population with a different distribution tag.
    pub fn with_distribution(mut self, distribution: PopulationDistribution) -> Self {
        self.distribution = distribution;
        self
    }
}

/// Coordinates of one reproducible random stream.
///
/// The 32-byte ChaCha8 key is the little-endian concatenation of
/// (master_seed, scenario_id, size_index, replication); equal coordinates
/// give bit-identical streams on every platform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub master_seed: u64,
    pub scenario_id: u64,
    pub size_index: u64,
    pub replication: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, scenario_id: u64, size_index: u64, replication: u64) -> Self {
        Self {
            master_seed,
            scenario_id,
            size_index,
            replication,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.master_seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.scenario_id.to_le_bytes());
        seed[16..24].copy_from_slice(&self.size_index.to_le_bytes());
        seed[24..32].copy_from_slice(&self.replication.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }
}

/// Standard-normal source: Box-Muller over ChaCha8 output, one deviate per
/// uniform pair (the sine branch is discarded to keep the draw count per
/// observation fixed). Uses `libm` so the bit stream is platform-invariant.
pub(crate) struct NormalSource {
    rng: ChaCha8Rng,
}

impl NormalSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    fn uniform_open(&mut self) -> f64 {
        // In (0, 1]: (x >> 11) + 1 over 2^53.
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
    }

    /// Chi-square draw as a sum of squared standard normals.
    pub fn next_chi_square(&mut self, df: u32) -> f64 {
        let mut acc = 0.0;
        for _ in 0..df {
            let z = self.next_normal();
            acc += z * z;
        }
        acc
    }
}

/// Lower-triangular factor L with L L' = A (Cholesky).
pub fn matrix_sqrt_factor(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(SemError::DimensionMismatch(format!(
            "matrix is {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    a.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(SemError::NotPositiveDefinite {
            matrix: MatrixRole::Population,
        })
}

/// Draw N observations from the population model.
///
/// Per observation, in fixed order: the elliptical radius (if any), the
/// factor normals, then the error normals; xi = r L_Phi z_xi and
/// eps = r L_Psi z_eps share the observation's radius. Rows of the output
/// are the observations.
pub fn generate_sample(spec: &PopulationSpec, n_obs: usize, stream: RngStream) -> DMatrix<f64> {
    let p = spec.p();
    let m = spec.m();
    let mut source = NormalSource::new(stream.rng());
    let mut data = DMatrix::zeros(n_obs, p);
    let mut z_xi = vec![0.0; m];
    let mut z_eps = vec![0.0; p];
    for row in 0..n_obs {
        let radius = match spec.distribution {
            PopulationDistribution::Normal => 1.0,
            PopulationDistribution::Elliptical { chisq_df, scale } => {
                libm::sqrt(scale / source.next_chi_square(chisq_df))
            }
        };
        for z in z_xi.iter_mut() {
            *z = source.next_normal();
        }
        for z in z_eps.iter_mut() {
            *z = source.next_normal();
        }
        // x = Lambda (r L_Phi z_xi) + r L_Psi z_eps, using the triangular
        // structure of the factors.
        for i in 0..p {
            let mut eps = 0.0;
            for j in 0..=i {
                eps += spec.unique_chol[(i, j)] * z_eps[j];
            }
            data[(row, i)] = radius * eps;
        }
        for a in 0..m {
            let mut xi = 0.0;
            for b in 0..=a {
                xi += spec.factor_chol[(a, b)] * z_xi[b];
            }
            let xi = radius * xi;
            for i in 0..p {
                data[(row, i)] += spec.loadings[(i, a)] * xi;
            }
        }
    }
    data
}

/// Unbiased sample covariance (divisor N - 1) of an N x p data matrix,
/// retaining the data in the returned moments.
pub fn sample_covariance(data: &DMatrix<f64>) -> Result<SampleMoments> {
    let s = covariance_matrix(data)?;
    SampleMoments::with_data(s, data.clone())
}

/// Write a data matrix as CSV: a header of variable names, one observation
/// per row, shortest round-trip decimal formatting.
pub fn write_data_csv<W: std::io::Write>(
    writer: W,
    names: &[String],
    data: &DMatrix<f64>,
) -> Result<()> {
    if names.len() != data.ncols() {
        return Err(SemError::DimensionMismatch(format!(
            "{} names for {} data columns",
            names.len(),
            data.ncols()
        )));
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(names)?;
    let mut record = Vec::with_capacity(names.len());
    for row in 0..data.nrows() {
        record.clear();
        for col in 0..data.ncols() {
            record.push(format!("{}", data[(row, col)]));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a CSV data file written in the layout above.
pub fn read_data_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_reader(reader);
    let names: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if names.is_empty() {
        return Err(SemError::Domain("data CSV has no header".into()));
    }
    let mut values: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for record in r.records() {
        let record = record?;
        if record.len() != names.len() {
            return Err(SemError::Domain(format!(
                "row {} has {} fields, expected {}",
                rows + 2,
                record.len(),
                names.len()
            )));
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                SemError::Domain(format!("cannot parse '{field}' as a number"))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(SemError::Domain("data CSV has no observations".into()));
    }
    Ok((names, DMatrix::from_row_slice(rows, values.len() / rows, &values)))
}
