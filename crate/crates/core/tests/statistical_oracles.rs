//! Statistical oracles: checks of the generator and the robust statistics
//! against analytic limits (law of large numbers, moment identities,
//! asymptotic equivalences).

use nalgebra::DMatrix;
use semfit::datagen::{
    generate_sample, sample_covariance, PopulationDistribution, PopulationSpec, RngStream,
};
use semfit::estimation::{fit, FitMethod, SampleMoments};
use semfit::inference::{sb_scaling, t_ml, t_rls};
use semfit::model::population_model;

fn population_spec(distribution: PopulationDistribution) -> (PopulationSpec, DMatrix<f64>) {
    let (model, theta) = population_model();
    let mats = model.unpack(&theta).unwrap();
    let spec = PopulationSpec::new(
        mats.loadings,
        mats.factor_cov,
        mats.unique_cov,
        distribution,
    )
    .unwrap();
    let sigma = spec.implied_covariance();
    (spec, sigma)
}

#[test]
fn normal_sample_covariance_converges_to_population() {
    let (spec, sigma_pop) = population_spec(PopulationDistribution::Normal);
    let data = generate_sample(&spec, 200_000, RngStream::new(11, 90, 0, 0));
    let moments = sample_covariance(&data).unwrap();
    let dev = (moments.s() - &sigma_pop).amax();
    assert!(dev <= 0.02, "max deviation {dev}");
}

#[test]
fn elliptical_sample_covariance_converges_to_population() {
    // E[r^2] = 3 * E[1/chi-square(5)] = 3/(5-2) = 1, so the radius leaves
    // the population covariance unchanged.
    let (spec, sigma_pop) = population_spec(PopulationDistribution::elliptical_default());
    let data = generate_sample(&spec, 200_000, RngStream::new(11, 91, 0, 0));
    let moments = sample_covariance(&data).unwrap();
    let dev = (moments.s() - &sigma_pop).amax();
    assert!(dev <= 0.03, "max deviation {dev}");
}

#[test]
fn elliptical_marginals_have_heavy_tails() {
    let (spec, _) = population_spec(PopulationDistribution::elliptical_default());
    let n = 200_000usize;
    let data = generate_sample(&spec, n, RngStream::new(11, 92, 0, 0));
    for var in 0..spec.p() {
        let mut mean = 0.0;
        for i in 0..n {
            mean += data[(i, var)];
        }
        mean /= n as f64;
        let (mut m2, mut m4) = (0.0, 0.0);
        for i in 0..n {
            let d = data[(i, var)] - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        m2 /= n as f64;
        m4 /= n as f64;
        let excess_kurtosis = m4 / (m2 * m2) - 3.0;
        assert!(
            excess_kurtosis > 0.5,
            "variable {var}: excess kurtosis {excess_kurtosis}"
        );
    }
}

#[test]
fn elliptical_and_normal_share_population_covariance() {
    let (model, _) = population_model();
    for dist in [
        PopulationDistribution::Normal,
        PopulationDistribution::elliptical_default(),
    ] {
        let (_, sigma_pop) = population_spec(dist);
        let moments = SampleMoments::from_covariance(sigma_pop, 1000).unwrap();
        let sol = fit(&model, &moments, FitMethod::Ml).unwrap();
        assert!(sol.f_min <= 1e-10);
    }
}

#[test]
fn estimator_recovers_population_values_without_bias() {
    // Mean absolute bias of theta-hat over 200 replications at N = 1000
    // stays within 0.02 per parameter.
    let (model, theta_pop) = population_model();
    let (spec, _) = population_spec(PopulationDistribution::Normal);
    let reps: u64 = 200;
    let mut bias = vec![0.0; model.q()];
    let mut converged = 0u64;
    for rep in 0..reps {
        let data = generate_sample(&spec, 1000, RngStream::new(21, 93, 0, rep));
        let moments = sample_covariance(&data).unwrap();
        let sol = fit(&model, &moments, FitMethod::Ml).unwrap();
        if !sol.converged {
            continue;
        }
        converged += 1;
        for k in 0..model.q() {
            bias[k] += sol.theta_hat.get(k) - theta_pop.get(k);
        }
    }
    assert!(converged >= reps * 9 / 10);
    for (k, b) in bias.iter().enumerate() {
        let mean_bias = (b / converged as f64).abs();
        assert!(mean_bias <= 0.02, "parameter {k}: mean bias {mean_bias}");
    }
}

#[test]
fn rls_and_ml_statistics_converge_at_large_n() {
    // Asymptotic equivalence on correct models: at N = 5000 the mean
    // absolute difference stays below 2% of df.
    let (model, _) = population_model();
    let (spec, _) = population_spec(PopulationDistribution::Normal);
    let df = model.degrees_of_freedom().unwrap();
    let reps = 20;
    let mut acc = 0.0;
    for rep in 0..reps {
        let data = generate_sample(&spec, 5000, RngStream::new(31, 94, 0, rep));
        let moments = sample_covariance(&data).unwrap();
        let sol = fit(&model, &moments, FitMethod::Ml).unwrap();
        assert!(sol.converged);
        let sigma = model.implied_covariance(&sol.theta_hat).unwrap();
        let ml = t_ml(sol.f_min, moments.n_obs(), df).unwrap();
        let rls = t_rls(moments.s(), &sigma, moments.n_obs(), df).unwrap();
        acc += (ml.value - rls.value).abs();
    }
    let mean_diff = acc / reps as f64;
    assert!(
        mean_diff < 0.02 * df as f64,
        "mean |T_RLS - T_ML| = {mean_diff}"
    );
}

#[test]
fn sb_scaling_approaches_one_under_normality() {
    // With multivariate normal data the fourth-moment correction is
    // asymptotically 1, so T_SBtracks T_ML: mean ratio in [0.95, 1.05]
    // at N = 5000.
    let (model, _) = population_model();
    let (spec, _) = population_spec(PopulationDistribution::Normal);
    let reps = 20;
    let mut acc = 0.0;
    for rep in 0..reps {
        let data = generate_sample(&spec, 5000, RngStream::new(41, 95, 0, rep));
        let moments = sample_covariance(&data).unwrap();
        let sol = fit(&model, &moments, FitMethod::Ml).unwrap();
        let c_hat = sb_scaling(&model, &sol.theta_hat, &moments).unwrap();
        // T_SB / T_ML = 1 / c-hat.
        acc += 1.0 / c_hat;
    }
    let mean_ratio = acc / reps as f64;
    assert!(
        (0.95..=1.05).contains(&mean_ratio),
        "mean T_SB/T_ML ratio {mean_ratio}"
    );
}
