//! Property-based invariants over random inputs.

use nalgebra::DMatrix;
use proptest::prelude::*;
use semfit::estimation::ml_discrepancy;
use semfit::inference::{cfi, nfi};
use semfit::model::{CfaModel, ParamEntry, ParameterVector};

fn spd_matrix(p: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-1.0f64..1.0, p * p).prop_map(move |values| {
        let b = DMatrix::from_vec(p, p, values);
        &b * b.transpose() + DMatrix::identity(p, p) * 0.5
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ml_discrepancy_nonnegative_zero_iff_equal(s in spd_matrix(4), sigma in spd_matrix(4)) {
        prop_assert_eq!(ml_discrepancy(&s, &s).unwrap(), 0.0);
        let f = ml_discrepancy(&s, &sigma).unwrap();
        // Strict positivity away from the minimum (the generators never
        // produce identical matrices).
        prop_assert!(f > 0.0);
    }

    #[test]
    fn ml_discrepancy_scale_equivariant(
        s in spd_matrix(4),
        sigma in spd_matrix(4),
        scales in prop::collection::vec(0.2f64..5.0, 4),
    ) {
        let d = DMatrix::from_fn(4, 4, |i, j| if i == j { scales[i] } else { 0.0 });
        let f = ml_discrepancy(&s, &sigma).unwrap();
        let f_scaled = ml_discrepancy(&(&d * &s * &d), &(&d * &sigma * &d)).unwrap();
        prop_assert!((f - f_scaled).abs() <= 1e-9 * (1.0 + f.abs()));
    }

    #[test]
    fn index_ranges(t_k in 0.0f64..5000.0, t_i in 1e-6f64..5000.0,
                    df_k in 1usize..200, df_i in 1usize..200) {
        let c = cfi(t_k, df_k, t_i, df_i);
        prop_assert!((0.0..=1.0).contains(&c));
        let n = nfi(t_i, t_k).unwrap();
        prop_assert!(n <= 1.0);
    }
}

/// Random one- or two-factor patterns with a random free-parameter order:
/// unpack then pack must reproduce theta exactly, and the implied
/// covariance must equal its transpose bit-for-bit.
fn random_pattern_model(seed: u64, p: usize, m: usize) -> (CfaModel, usize) {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    let mut next_bit = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 60) & 1 == 1
    };
    let mut free_cells: Vec<(usize, usize, usize)> = Vec::new(); // (matrix, i, j)
    let mut loadings = vec![ParamEntry::Fixed(0.0); p * m];
    for i in 0..p {
        for j in 0..m {
            if i % m == j || next_bit() {
                free_cells.push((0, i, j));
            }
        }
    }
    let mut factor_cov = Vec::new();
    for i in 0..m {
        for j in 0..=i {
            if i == j {
                factor_cov.push(ParamEntry::Fixed(1.0));
            } else if next_bit() {
                free_cells.push((1, i, j));
                factor_cov.push(ParamEntry::Fixed(0.0)); // placeholder
            } else {
                factor_cov.push(ParamEntry::Fixed(0.0));
            }
        }
    }
    let mut unique_cov = Vec::new();
    for i in 0..p {
        for j in 0..=i {
            if i == j {
                free_cells.push((2, i, j));
            }
            unique_cov.push(ParamEntry::Fixed(0.0));
        }
    }

    // Keep the model identified-countable: at most p* free parameters.
    free_cells.truncate(p * (p + 1) / 2);

    // Assign indices in a scrambled order.
    let q = free_cells.len();
    let mut order: Vec<usize> = (0..q).collect();
    for i in (1..q).rev() {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        let j = (state >> 33) as usize % (i + 1);
        order.swap(i, j);
    }
    for (index, &cell) in order.iter().enumerate() {
        let (matrix, i, j) = free_cells[cell];
        let entry = ParamEntry::Free { index, start: 0.5 };
        match matrix {
            0 => loadings[i * m + j] = entry,
            1 => factor_cov[i * (i + 1) / 2 + j] = entry,
            _ => unique_cov[i * (i + 1) / 2 + j] = entry,
        }
    }

    let observed = (0..p).map(|i| format!("v{i}")).collect();
    let factors = (0..m).map(|j| format!("f{j}")).collect();
    let model = CfaModel::new(observed, factors, loadings, factor_cov, unique_cov).unwrap();
    (model, q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_identity_on_random_patterns(
        seed in any::<u64>(),
        values in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let (model, q) = random_pattern_model(seed, 5, 2);
        prop_assume!(q <= values.len());
        let theta = ParameterVector::new(values[..q].to_vec());
        let mats = model.unpack(&theta).unwrap();
        let packed = model.pack(&mats.loadings, &mats.factor_cov, &mats.unique_cov).unwrap();
        prop_assert_eq!(packed, theta.clone());

        let sigma = model.implied_covariance(&theta).unwrap();
        prop_assert_eq!(sigma.clone(), sigma.transpose());
    }
}
