//! The `fit` subcommand: estimate a model from a data CSV and report
//! everything a fit section needs.

use anyhow::{anyhow, Context, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use std::path::Path;

use semfit::datagen::read_data_csv;
use semfit::estimation::{fit, fit_independence, FitMethod};
use semfit::inference::{
    default_lm_candidates, fit_indices, lm_test, tli_conventional, StatKind, CFI_CUTOFF,
    RMSEA_CUTOFF, TLI_CUTOFF,
};
use semfit::model::model_from_json;
use semfit::simulation::statistic_pair;

#[derive(Serialize)]
struct JsonReport {
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    f_min: f64,
    n_obs: usize,
    df: usize,
    parameters: Vec<JsonParameter>,
    statistics: Vec<JsonStatistic>,
    lm_candidates: Vec<JsonCandidate>,
}

#[derive(Serialize)]
struct JsonParameter {
    name: String,
    estimate: f64,
}

#[derive(Serialize)]
struct JsonStatistic {
    estimator: String,
    t: f64,
    df: usize,
    p_value: f64,
    baseline_t: f64,
    baseline_df: usize,
    nfi: f64,
    cfi: f64,
    tli: f64,
    rmsea: f64,
    verdict_cfi: bool,
    verdict_tli: bool,
    verdict_rmsea: bool,
}

#[derive(Serialize)]
struct JsonCandidate {
    target: String,
    score: f64,
    p_value: f64,
    expected_drop: f64,
}

pub fn run(
    model_path: &Path,
    data_path: &Path,
    estimator_flags: &[String],
    json_path: Option<&Path>,
    conventional_tli_flag: bool,
) -> Result<u8> {
    let model_text = std::fs::read_to_string(model_path)
        .with_context(|| format!("cannot read model file {}", model_path.display()))?;
    let model = model_from_json(&model_text)
        .with_context(|| format!("invalid model file {}", model_path.display()))?;

    let data_file = std::fs::File::open(data_path)
        .with_context(|| format!("cannot read data file {}", data_path.display()))?;
    let (names, raw) = read_data_csv(data_file)
        .with_context(|| format!("invalid data file {}", data_path.display()))?;

    // Align data columns with the model's variable order by name.
    let mut columns = Vec::with_capacity(model.p());
    for wanted in model.observed_names() {
        let idx = names.iter().position(|n| n == wanted).ok_or_else(|| {
            anyhow!(
                "data file {} is missing variable '{}'",
                data_path.display(),
                wanted
            )
        })?;
        columns.push(idx);
    }
    let data = DMatrix::from_fn(raw.nrows(), model.p(), |i, j| raw[(i, columns[j])]);

    let estimators: Vec<StatKind> = if estimator_flags.is_empty() {
        vec![StatKind::Ml]
    } else {
        estimator_flags
            .iter()
            .map(|s| s.parse().map_err(|e| anyhow!("{e}")))
            .collect::<Result<Vec<_>>>()?
    };

    let moments = semfit::datagen::sample_covariance(&data)?;
    let df = model.degrees_of_freedom()?;
    let solution = fit(&model, &moments, FitMethod::Ml)?;
    let baseline = fit_independence(&moments)?;

    println!(
        "Fit of {} ({} observations, {} variables, df = {df})",
        model_path.display(),
        moments.n_obs(),
        model.p()
    );
    println!(
        "Converged: {} ({} iterations, max |gradient| = {:.3e})",
        if solution.converged { "yes" } else { "NO" },
        solution.iterations,
        solution.gradient_norm
    );
    println!("\nParameter estimates:");
    let mut parameters = Vec::with_capacity(model.q());
    for k in 0..model.q() {
        let name = model.parameter_label(k);
        let estimate = solution.theta_hat.get(k);
        println!("  {name:<18} = {estimate:>9.4}");
        parameters.push(JsonParameter { name, estimate });
    }

    println!("\nTest statistics:");
    let mut statistics = Vec::new();
    for &kind in &estimators {
        let (stat, stat_i) = statistic_pair(kind, &model, &solution, &baseline, &moments, df)?;
        let idx = fit_indices(stat.value, df, stat_i.value, stat_i.df, moments.n())?;
        println!(
            "  {:<4} T = {:>10.4}  df = {:>3}  p = {:.6}",
            kind.to_string(),
            stat.value,
            stat.df,
            stat.p_value
        );
        println!(
            "       baseline T = {:.4} (df = {}), NFI = {:.5}, CFI = {:.5} [{}], TLI = {:.5} [{}], RMSEA = {:.5} [{}]",
            stat_i.value,
            stat_i.df,
            idx.nfi,
            idx.cfi,
            verdict(idx.verdict_cfi, format!("> {CFI_CUTOFF}")),
            idx.tli,
            verdict(idx.verdict_tli, format!("> {TLI_CUTOFF}")),
            idx.rmsea,
            verdict(idx.verdict_rmsea, format!("< {RMSEA_CUTOFF}")),
        );
        if conventional_tli_flag {
            let alt = tli_conventional(stat.value, df, stat_i.value, stat_i.df)?;
            println!("       TLI (conventional Tucker-Lewis form) = {alt:.5}");
        }
        statistics.push(JsonStatistic {
            estimator: kind.to_string(),
            t: stat.value,
            df: stat.df,
            p_value: stat.p_value,
            baseline_t: stat_i.value,
            baseline_df: stat_i.df,
            nfi: idx.nfi,
            cfi: idx.cfi,
            tli: idx.tli,
            rmsea: idx.rmsea,
            verdict_cfi: idx.verdict_cfi,
            verdict_tli: idx.verdict_tli,
            verdict_rmsea: idx.verdict_rmsea,
        });
    }

    let candidates = default_lm_candidates(&model);
    let mut lm_rows = Vec::new();
    if !candidates.is_empty() && df > 0 {
        let ranked = lm_test(&model, &solution.theta_hat, &moments, &candidates)?;
        println!("\nTop LM candidates (1-df score tests for freeing a fixed parameter):");
        for c in ranked.iter().take(10) {
            println!(
                "  {:<18} score = {:>9.4}  p = {:.6}  expected drop = {:.4}",
                model.position_label(c.target),
                c.score,
                c.p_value,
                c.expected_drop
            );
            lm_rows.push(JsonCandidate {
                target: model.position_label(c.target),
                score: c.score,
                p_value: c.p_value,
                expected_drop: c.expected_drop,
            });
        }
    }

    if let Some(path) = json_path {
        let report = JsonReport {
            converged: solution.converged,
            iterations: solution.iterations,
            gradient_norm: solution.gradient_norm,
            f_min: solution.f_min,
            n_obs: moments.n_obs(),
            df,
            parameters,
            statistics,
            lm_candidates: lm_rows,
        };
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        println!("\nWrote JSON report to {}", path.display());
    }

    Ok(if solution.converged { 0 } else { 2 })
}

fn verdict(pass: bool, rule: String) -> String {
    if pass {
        format!("pass: {rule}")
    } else {
        format!("fail: not {rule}")
    }
}
