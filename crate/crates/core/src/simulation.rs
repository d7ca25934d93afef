//! Monte Carlo orchestration: scenario definitions, the replication
//! runner, and aggregation of per-replication rows.
//!
//! Replications are independent tasks; each derives its random stream
//! purely from its grid coordinates and rows are sorted before emission,
//! so results are identical under any scheduling.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::Write;

use crate::datagen::{
    generate_sample, sample_covariance, PopulationDistribution, PopulationSpec, RngStream,
};
use crate::error::{Result, SemError};
use crate::estimation::{
    fit, fit_independence, fit_with_start, independence_df, FitMethod, FitSolution, SampleMoments,
};
use crate::inference::{
    default_lm_candidates, fit_indices, lm_test, satorra_bentler, t_ml, t_rls, FitIndexSet,
    StatKind, TestStatistic,
};
use crate::model::{population_model, CfaModel, ParameterVector, PatternPosition};

/// The simulation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scenario {
    /// Correct model, multivariate normal data.
    CorrectNormal,
    /// Population carries an extra cross-loading the analysis model omits.
    MisspecifiedNormal,
    /// Correct model, elliptical heavy-tailed data, normal-theory fitting.
    EllipticalNormalTheory,
    /// Correct model, normal data, small-N grid contrasting ML with RLS.
    SmallSampleRls,
}

impl Scenario {
    /// Stable identifier used in stream derivation.
    pub fn id(&self) -> u64 {
        match self {
            Scenario::CorrectNormal => 0,
            Scenario::MisspecifiedNormal => 1,
            Scenario::EllipticalNormalTheory => 2,
            Scenario::SmallSampleRls => 3,
        }
    }

    pub const ALL: [Scenario; 4] = [
        Scenario::CorrectNormal,
        Scenario::MisspecifiedNormal,
        Scenario::EllipticalNormalTheory,
        Scenario::SmallSampleRls,
    ];
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::CorrectNormal => "correct_normal",
            Scenario::MisspecifiedNormal => "misspecified_normal",
            Scenario::EllipticalNormalTheory => "elliptical_normal_theory",
            Scenario::SmallSampleRls => "small_sample_rls",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Scenario {
    type Err = SemError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct_normal" => Ok(Scenario::CorrectNormal),
            "misspecified_normal" => Ok(Scenario::MisspecifiedNormal),
            "elliptical_normal_theory" => Ok(Scenario::EllipticalNormalTheory),
            "small_sample_rls" => Ok(Scenario::SmallSampleRls),
            other => Err(SemError::InvalidPlan(format!("unknown scenario: {other}"))),
        }
    }
}

/// Whether a row comes from the as-specified model or the variant with the
/// top LM candidate freed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelVariant {
    Base,
    LmModified,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelVariant::Base => "base",
            ModelVariant::LmModified => "lm_modified",
        })
    }
}

/// A full simulation request.
#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub scenario: Scenario,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub master_seed: u64,
    pub estimators: Vec<StatKind>,
    pub lm_enabled: bool,
}

/// Default sample-size grid spanning small-N through large-N regimes.
pub const DEFAULT_SAMPLE_SIZES: [usize; 9] = [60, 100, 150, 200, 300, 500, 1000, 2500, 5000];

/// Default replication count.
pub const DEFAULT_REPLICATIONS: usize = 500;

impl SimulationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(SemError::InvalidPlan("replications must be >= 1".into()));
        }
        if self.sample_sizes.is_empty() {
            return Err(SemError::InvalidPlan("sample_sizes must be nonempty".into()));
        }
        if !self.sample_sizes.windows(2).all(|w| w[0] < w[1]) {
            return Err(SemError::InvalidPlan(
                "sample_sizes must be strictly increasing".into(),
            ));
        }
        let p = population_model().0.p();
        if let Some(&n) = self.sample_sizes.iter().find(|&&n| n <= p) {
            return Err(SemError::InvalidPlan(format!(
                "sample size {n} must exceed the number of variables ({p})"
            )));
        }
        if self.estimators.is_empty() {
            return Err(SemError::InvalidPlan("estimators must be nonempty".into()));
        }
        let mut seen = Vec::new();
        for e in &self.estimators {
            if seen.contains(e) {
                return Err(SemError::InvalidPlan(format!("duplicate estimator {e}")));
            }
            seen.push(*e);
        }
        Ok(())
    }

    /// Parse the JSON plan format: keys `scenario`, `sample_sizes`,
    /// `replications`, `seed`, `estimators`, `lm_enabled`.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct PlanFile {
            scenario: String,
            sample_sizes: Vec<usize>,
            replications: usize,
            seed: u64,
            estimators: Vec<String>,
            #[serde(default)]
            lm_enabled: bool,
        }
        let file: PlanFile = serde_json::from_str(text)?;
        let plan = SimulationPlan {
            scenario: file.scenario.parse()?,
            sample_sizes: file.sample_sizes,
            replications: file.replications,
            master_seed: file.seed,
            estimators: file
                .estimators
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<_>>>()?,
            lm_enabled: file.lm_enabled,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// One (replication x estimator x variant) record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResultRow {
    pub scenario: Scenario,
    pub n_obs: usize,
    pub replication: usize,
    pub estimator: StatKind,
    pub model_variant: ModelVariant,
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub converged: bool,
    pub nfi: f64,
    pub cfi: f64,
    pub tli: f64,
    pub rmsea: f64,
}

/// Group summary behind one plotted point.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub scenario: Scenario,
    pub n_obs: usize,
    pub estimator: StatKind,
    pub model_variant: ModelVariant,
    pub mean_t: Option<f64>,
    pub rejection_rate_05: Option<f64>,
    pub mean_nfi: Option<f64>,
    pub mean_cfi: Option<f64>,
    pub mean_tli: Option<f64>,
    pub mean_rmsea: Option<f64>,
    pub nonconvergence_rate: f64,
    pub converged_count: usize,
}

/// The misspecified-scenario triple: the data-generating population (with
/// the extra cross-loading lambda[x6, F1] = 0.35 and psi_66 re-solved so
/// variable 6 keeps unit variance), the 87-df simple-structure analysis
/// model that omits it, and the omitted position.
pub fn misspecified_pair() -> (PopulationSpec, CfaModel, PatternPosition) {
    let (analysis_model, theta) = population_model();
    let target = PatternPosition::loading(5, 0);
    let mats = analysis_model.unpack(&theta).unwrap();
    let mut loadings = mats.loadings;
    loadings[(5, 0)] = 0.35;
    let mut unique = mats.unique_cov;
    let core = &loadings * &mats.factor_cov * loadings.transpose();
    unique[(5, 5)] = 1.0 - core[(5, 5)];
    let population = PopulationSpec::new(
        loadings,
        mats.factor_cov,
        unique,
        PopulationDistribution::Normal,
    )
    .expect("misspecified population is positive definite");
    (population, analysis_model, target)
}

/// Data-generating population and analysis model for a scenario.
pub fn scenario_population(scenario: Scenario) -> (PopulationSpec, CfaModel) {
    match scenario {
        Scenario::CorrectNormal | Scenario::SmallSampleRls => {
            let (model, theta) = population_model();
            let mats = model.unpack(&theta).unwrap();
            let spec = PopulationSpec::new(
                mats.loadings,
                mats.factor_cov,
                mats.unique_cov,
                PopulationDistribution::Normal,
            )
            .expect("population is positive definite");
            (spec, model)
        }
        Scenario::EllipticalNormalTheory => {
            let (spec, model) = scenario_population(Scenario::CorrectNormal);
            (
                spec.with_distribution(PopulationDistribution::elliptical_default()),
                model,
            )
        }
        Scenario::MisspecifiedNormal => {
            let (spec, model, _) = misspecified_pair();
            (spec, model)
        }
    }
}

/// Statistic of `kind` for a fitted model, plus its estimator-matched
/// independence baseline statistic (the RLS baseline evaluates the
/// quadratic form at diag(S); the SB baseline scales the independence
/// statistic with its own correction).
pub fn statistic_pair(
    kind: StatKind,
    model: &CfaModel,
    solution: &FitSolution,
    baseline: &FitSolution,
    moments: &SampleMoments,
    df: usize,
) -> Result<(TestStatistic, TestStatistic)> {
    let p = model.p();
    let df_i = independence_df(p);
    let n_obs = moments.n_obs();
    match kind {
        StatKind::Ml => Ok((
            t_ml(solution.f_min, n_obs, df)?,
            t_ml(baseline.f_min, n_obs, df_i)?,
        )),
        StatKind::Rls => {
            let sigma = model.implied_covariance(&solution.theta_hat)?;
            let diag = DMatrix::from_fn(p, p, |i, j| {
                if i == j {
                    moments.s()[(i, i)]
                } else {
                    0.0
                }
            });
            Ok((
                t_rls(moments.s(), &sigma, n_obs, df)?,
                t_rls(moments.s(), &diag, n_obs, df_i)?,
            ))
        }
        StatKind::Sb => {
            let t_base = t_ml(solution.f_min, n_obs, df)?;
            let scaled = satorra_bentler(&t_base, model, &solution.theta_hat, moments)?;
            let indep = crate::model::independence_model(model.observed_names().to_vec());
            let t_i = t_ml(baseline.f_min, n_obs, df_i)?;
            let scaled_i = satorra_bentler(&t_i, &indep, &baseline.theta_hat, moments)?;
            Ok((scaled, scaled_i))
        }
    }
}

fn indices_or_nan(indices: Result<FitIndexSet>) -> (f64, f64, f64, f64) {
    match indices {
        Ok(set) => (set.nfi, set.cfi, set.tli, set.rmsea),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    }
}

fn failure_row(
    scenario: Scenario,
    n_obs: usize,
    replication: usize,
    estimator: StatKind,
    variant: ModelVariant,
    df: usize,
) -> ScenarioResultRow {
    ScenarioResultRow {
        scenario,
        n_obs,
        replication,
        estimator,
        model_variant: variant,
        t: f64::NAN,
        df,
        p_value: f64::NAN,
        converged: false,
        nfi: f64::NAN,
        cfi: f64::NAN,
        tli: f64::NAN,
        rmsea: f64::NAN,
    }
}

fn rows_for_variant(
    plan: &SimulationPlan,
    n_obs: usize,
    replication: usize,
    variant: ModelVariant,
    model: &CfaModel,
    solution: &FitSolution,
    baseline: &FitSolution,
    moments: &SampleMoments,
) -> Vec<ScenarioResultRow> {
    let df = model.degrees_of_freedom().unwrap_or(0);
    let mut rows = Vec::with_capacity(plan.estimators.len());
    for &estimator in &plan.estimators {
        let row = match statistic_pair(estimator, model, solution, baseline, moments, df) {
            Ok((stat, stat_i)) => {
                let (nfi, cfi, tli, rmsea) = indices_or_nan(fit_indices(
                    stat.value,
                    df,
                    stat_i.value,
                    stat_i.df,
                    moments.n(),
                ));
                ScenarioResultRow {
                    scenario: plan.scenario,
                    n_obs,
                    replication,
                    estimator,
                    model_variant: variant,
                    t: stat.value,
                    df,
                    p_value: stat.p_value,
                    converged: solution.converged,
                    nfi,
                    cfi,
                    tli,
                    rmsea,
                }
            }
            Err(_) => failure_row(plan.scenario, n_obs, replication, estimator, variant, df),
        };
        rows.push(row);
    }
    rows
}

fn run_replication(
    plan: &SimulationPlan,
    population: &PopulationSpec,
    analysis_model: &CfaModel,
    size_index: usize,
    n_obs: usize,
    replication: usize,
) -> Vec<ScenarioResultRow> {
    let df = analysis_model.degrees_of_freedom().unwrap_or(0);
    let variants: &[ModelVariant] = if plan.lm_enabled {
        &[ModelVariant::Base, ModelVariant::LmModified]
    } else {
        &[ModelVariant::Base]
    };
    let all_failures = || {
        variants
            .iter()
            .flat_map(|&variant| {
                plan.estimators.iter().map(move |&estimator| {
                    failure_row(plan.scenario, n_obs, replication, estimator, variant, df)
                })
            })
            .collect::<Vec<_>>()
    };

    let stream = RngStream::new(
        plan.master_seed,
        plan.scenario.id(),
        size_index as u64,
        replication as u64,
    );
    let data = generate_sample(population, n_obs, stream);
    let Ok(moments) = sample_covariance(&data) else {
        return all_failures();
    };
    let (Ok(base_fit), Ok(baseline)) = (
        fit(analysis_model, &moments, FitMethod::Ml),
        fit_independence(&moments),
    ) else {
        return all_failures();
    };

    let mut rows = rows_for_variant(
        plan,
        n_obs,
        replication,
        ModelVariant::Base,
        analysis_model,
        &base_fit,
        &baseline,
        &moments,
    );

    if plan.lm_enabled {
        // Free the top-ranked LM candidate and refit from the base solution
        // (warm start), so the modified fit can never be worse.
        let modified = lm_test(
            analysis_model,
            &base_fit.theta_hat,
            &moments,
            &default_lm_candidates(analysis_model),
        )
        .ok()
        .and_then(|ranked| ranked.into_iter().next())
        .and_then(|top| {
            let fixed_value = match analysis_model.entry(top.target) {
                crate::model::ParamEntry::Fixed(v) => v,
                crate::model::ParamEntry::Free { .. } => return None,
            };
            let freed = analysis_model.with_freed(top.target, fixed_value).ok()?;
            let mut start = base_fit.theta_hat.as_slice().to_vec();
            start.push(fixed_value);
            let refit =
                fit_with_start(&freed, &moments, FitMethod::Ml, ParameterVector::new(start))
                    .ok()?;
            Some((freed, refit))
        });
        match modified {
            Some((freed, refit)) => rows.extend(rows_for_variant(
                plan,
                n_obs,
                replication,
                ModelVariant::LmModified,
                &freed,
                &refit,
                &baseline,
                &moments,
            )),
            None => {
                for &estimator in &plan.estimators {
                    rows.push(failure_row(
                        plan.scenario,
                        n_obs,
                        replication,
                        estimator,
                        ModelVariant::LmModified,
                        df.saturating_sub(1),
                    ));
                }
            }
        }
    }
    rows
}

/// Run every (sample size x replication) cell of the plan and return the
/// rows sorted by (scenario, N, replication, estimator, variant).
pub fn run_plan(plan: &SimulationPlan) -> Result<Vec<ScenarioResultRow>> {
    plan.validate()?;
    let (population, analysis_model) = scenario_population(plan.scenario);

    let tasks: Vec<(usize, usize, usize)> = plan
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(size_index, &n_obs)| {
            (0..plan.replications).map(move |rep| (size_index, n_obs, rep))
        })
        .collect();

    let mut rows: Vec<ScenarioResultRow> = tasks
        .par_iter()
        .flat_map_iter(|&(size_index, n_obs, rep)| {
            run_replication(plan, &population, &analysis_model, size_index, n_obs, rep)
        })
        .collect();

    rows.sort_by(|a, b| {
        (a.scenario, a.n_obs, a.replication, a.estimator, a.model_variant).cmp(&(
            b.scenario,
            b.n_obs,
            b.replication,
            b.estimator,
            b.model_variant,
        ))
    });
    Ok(rows)
}

/// Group rows by (scenario, N, estimator, variant) and summarize. Means
/// and the rejection rate cover converged rows only; groups where nothing
/// converged report no means and a nonconvergence rate of 1.
pub fn aggregate(rows: &[ScenarioResultRow]) -> Result<Vec<AggregateRow>> {
    if rows.is_empty() {
        return Err(SemError::Domain("no rows to aggregate".into()));
    }

    #[derive(Default)]
    struct Acc {
        total: usize,
        converged: usize,
        rejected: usize,
        sum_t: f64,
        sum_nfi: f64,
        sum_cfi: f64,
        sum_tli: f64,
        sum_rmsea: f64,
    }

    let mut groups: BTreeMap<(Scenario, usize, StatKind, ModelVariant), Acc> = BTreeMap::new();
    for row in rows {
        let acc = groups
            .entry((row.scenario, row.n_obs, row.estimator, row.model_variant))
            .or_default();
        acc.total += 1;
        if row.converged {
            acc.converged += 1;
            if row.p_value < 0.05 {
                acc.rejected += 1;
            }
            acc.sum_t += row.t;
            acc.sum_nfi += row.nfi;
            acc.sum_cfi += row.cfi;
            acc.sum_tli += row.tli;
            acc.sum_rmsea += row.rmsea;
        }
    }

    Ok(groups
        .into_iter()
        .map(|((scenario, n_obs, estimator, variant), acc)| {
            let k = acc.converged as f64;
            let mean = |sum: f64| (acc.converged > 0).then(|| sum / k);
            AggregateRow {
                scenario,
                n_obs,
                estimator,
                model_variant: variant,
                mean_t: mean(acc.sum_t),
                rejection_rate_05: mean(acc.rejected as f64),
                mean_nfi: mean(acc.sum_nfi),
                mean_cfi: mean(acc.sum_cfi),
                mean_tli: mean(acc.sum_tli),
                mean_rmsea: mean(acc.sum_rmsea),
                nonconvergence_rate: (acc.total - acc.converged) as f64 / acc.total as f64,
                converged_count: acc.converged,
            }
        })
        .collect())
}

pub const ROWS_CSV_HEADER: &str =
    "scenario,N,replication,estimator,model_variant,T,df,p_value,converged,nfi,cfi,tli,rmsea";

pub const AGGREGATE_CSV_HEADER: &str = "scenario,N,estimator,model_variant,mean_T,\
rejection_rate_05,mean_nfi,mean_cfi,mean_tli,mean_rmsea,nonconvergence_rate,converged_count";

/// Write per-replication rows with the fixed header.
pub fn write_rows_csv<W: Write>(mut writer: W, rows: &[ScenarioResultRow]) -> Result<()> {
    writeln!(writer, "{ROWS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.n_obs,
            r.replication,
            r.estimator,
            r.model_variant,
            r.t,
            r.df,
            r.p_value,
            r.converged,
            r.nfi,
            r.cfi,
            r.tli,
            r.rmsea
        )?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write aggregate rows with the fixed header.
pub fn write_aggregate_csv<W: Write>(mut writer: W, rows: &[AggregateRow]) -> Result<()> {
    writeln!(writer, "{AGGREGATE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            writer,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.n_obs,
            r.estimator,
            r.model_variant,
            opt(r.mean_t),
            opt(r.rejection_rate_05),
            opt(r.mean_nfi),
            opt(r.mean_cfi),
            opt(r.mean_tli),
            opt(r.mean_rmsea),
            r.nonconvergence_rate,
            r.converged_count
        )?;
    }
    Ok(())
}

/// Read an aggregate CSV produced by `write_aggregate_csv`, validating the
/// schema.
pub fn read_aggregate_csv<R: std::io::Read>(reader: R) -> Result<Vec<AggregateRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    let expected: Vec<&str> = AGGREGATE_CSV_HEADER.split(',').collect();
    if header != expected {
        return Err(SemError::Domain(format!(
            "aggregate CSV header mismatch: got '{}'",
            header.join(",")
        )));
    }
    let parse_opt = |field: &str| -> Result<Option<f64>> {
        if field.is_empty() {
            return Ok(None);
        }
        field
            .parse::<f64>()
            .map(Some)
            .map_err(|_| SemError::Domain(format!("cannot parse '{field}' as a number")))
    };
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        if record.len() != expected.len() {
            return Err(SemError::Domain(format!(
                "aggregate CSV row has {} fields, expected {}",
                record.len(),
                expected.len()
            )));
        }
        rows.push(AggregateRow {
            scenario: record[0].parse()?,
            n_obs: record[1]
                .parse()
                .map_err(|_| SemError::Domain(format!("bad N: {}", &record[1])))?,
            estimator: record[2].parse()?,
            model_variant: match &record[3] {
                "base" => ModelVariant::Base,
                "lm_modified" => ModelVariant::LmModified,
                other => {
                    return Err(SemError::Domain(format!("unknown model_variant: {other}")))
                }
            },
            mean_t: parse_opt(&record[4])?,
            rejection_rate_05: parse_opt(&record[5])?,
            mean_nfi: parse_opt(&record[6])?,
            mean_cfi: parse_opt(&record[7])?,
            mean_tli: parse_opt(&record[8])?,
            mean_rmsea: parse_opt(&record[9])?,
            nonconvergence_rate: record[10]
                .parse()
                .map_err(|_| SemError::Domain("bad nonconvergence_rate".into()))?,
            converged_count: record[11]
                .parse()
                .map_err(|_| SemError::Domain("bad converged_count".into()))?,
        });
    }
    if rows.is_empty() {
        return Err(SemError::Domain("aggregate CSV has no rows".into()));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::fit;

    fn smoke_plan() -> SimulationPlan {
        SimulationPlan {
            scenario: Scenario::CorrectNormal,
            sample_sizes: vec![200],
            replications: 1,
            master_seed: 9,
            estimators: vec![StatKind::Ml],
            lm_enabled: false,
        }
    }

    #[test]
    fn plan_validation() {
        let mut plan = smoke_plan();
        assert!(plan.validate().is_ok());
        plan.sample_sizes = vec![200, 200];
        assert!(plan.validate().is_err());
        plan.sample_sizes = vec![10];
        assert!(plan.validate().is_err());
        plan.sample_sizes = vec![200];
        plan.replications = 0;
        assert!(plan.validate().is_err());
        plan.replications = 1;
        plan.estimators = vec![StatKind::Ml, StatKind::Ml];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let text = r#"{
            "scenario": "small_sample_rls",
            "sample_sizes": [60, 100, 150],
            "replications": 10,
            "seed": 123,
            "estimators": ["ml", "rls"],
            "lm_enabled": false
        }"#;
        let plan = SimulationPlan::from_json(text).unwrap();
        assert_eq!(plan.scenario, Scenario::SmallSampleRls);
        assert_eq!(plan.estimators, vec![StatKind::Ml, StatKind::Rls]);
        assert!(SimulationPlan::from_json("{\"scenario\": \"nope\"}").is_err());
    }

    #[test]
    fn single_replication_row_accounting() {
        let rows = run_plan(&smoke_plan()).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.df, 87);
        assert!(row.converged);
        assert!(row.t > 0.0);
    }

    #[test]
    fn run_plan_is_deterministic() {
        let mut plan = smoke_plan();
        plan.replications = 3;
        plan.estimators = vec![StatKind::Ml, StatKind::Rls];
        let a = run_plan(&plan).unwrap();
        let b = run_plan(&plan).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn lm_variant_doubles_rows() {
        let mut plan = smoke_plan();
        plan.scenario = Scenario::MisspecifiedNormal;
        plan.lm_enabled = true;
        plan.replications = 2;
        let rows = run_plan(&plan).unwrap();
        assert_eq!(rows.len(), 4);
        let modified: Vec<_> = rows
            .iter()
            .filter(|r| r.model_variant == ModelVariant::LmModified)
            .collect();
        assert_eq!(modified.len(), 2);
        assert!(modified.iter().all(|r| r.df == 86));
    }

    #[test]
    fn misspecified_pair_population_oracle() {
        let (population, analysis_model, target) = misspecified_pair();
        let sigma_pop = population.implied_covariance();
        for j in 0..15 {
            assert!((sigma_pop[(j, j)] - 1.0).abs() < 1e-12);
        }
        let moments = SampleMoments::from_covariance(sigma_pop, 100_000).unwrap();
        let base = fit(&analysis_model, &moments, FitMethod::Ml).unwrap();
        assert!(base.f_min > 1e-4, "population misfit exists");

        let freed = analysis_model.with_freed(target, 0.0).unwrap();
        let refit = fit(&freed, &moments, FitMethod::Ml).unwrap();
        assert!(refit.f_min <= 1e-10, "freed model is the generator");

        // Population-level CFI from the noncentrality limits.
        let baseline = fit_independence(&moments).unwrap();
        let cfi_pop = 1.0 - base.f_min / baseline.f_min;
        assert!(
            cfi_pop >= 0.95,
            "population CFI {cfi_pop} should clear the cutoff"
        );
    }

    #[test]
    fn aggregate_single_row() {
        let mut rows = run_plan(&smoke_plan()).unwrap();
        rows[0].p_value = 0.01;
        let agg = aggregate(&rows).unwrap();
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].rejection_rate_05, Some(1.0));
        assert_eq!(agg[0].nonconvergence_rate, 0.0);
        assert_eq!(agg[0].converged_count, 1);
    }

    #[test]
    fn aggregate_all_failed() {
        let mut rows = run_plan(&smoke_plan()).unwrap();
        rows[0].converged = false;
        let agg = aggregate(&rows).unwrap();
        assert_eq!(agg[0].mean_t, None);
        assert_eq!(agg[0].rejection_rate_05, None);
        assert_eq!(agg[0].nonconvergence_rate, 1.0);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_headers() {
        let mut plan = smoke_plan();
        plan.replications = 2;
        let rows = run_plan(&plan).unwrap();
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(ROWS_CSV_HEADER));
        assert_eq!(text.lines().count(), 1 + rows.len());

        let agg = aggregate(&rows).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &agg).unwrap();
        let parsed = read_aggregate_csv(buf.as_slice()).unwrap();
        assert_eq!(parsed, agg);

        let bad = "x,y\n1,2\n";
        assert!(read_aggregate_csv(bad.as_bytes()).is_err());
    }
}
