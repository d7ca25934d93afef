//! Half-vectorization (vech) utilities and moment-structure matrices.
//!
//! The vech operator stacks the lower triangle of a symmetric p x p matrix
//! column by column into a vector of length p(p+1)/2. The pair order fixed
//! here — (0,0), (1,0), ..., (p-1,0), (1,1), (2,1), ... — is shared by the
//! asymptotic weight matrix, the fourth-moment matrix, and the model
//! Jacobian, so all three stay index-compatible.

use nalgebra::DMatrix;

/// Length of vech(A) for a p x p symmetric matrix: p(p+1)/2.
pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// The (row, col) pairs of the lower triangle in vech order (row >= col).
pub fn vech_pairs(p: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(vech_len(p));
    for j in 0..p {
        for i in j..p {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Stack the lower triangle of a square matrix into a column vector.
pub fn vech(m: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    let p = m.nrows();
    debug_assert_eq!(p, m.ncols());
    let mut out = nalgebra::DVector::zeros(vech_len(p));
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

/// Normal-theory weight matrix on the vech scale.
///
/// Given the inverse of a covariance matrix, returns the p* x p* matrix
/// W with elements
///
///   W[(i,j),(k,l)] = (c_ij * c_kl / 4) * (s^ik s^jl + s^il s^jk),
///
/// where s^ab are elements of the inverse and c_ab = 2 for off-diagonal
/// pairs, 1 for diagonal ones. W is the inverse of the asymptotic
/// covariance of sqrt(n) * vech(S) under multivariate normality, i.e. of
/// Gamma_N[(i,j),(k,l)] = s_ik s_jl + s_il s_jk.
pub fn normal_theory_weight(sigma_inv: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma_inv.nrows();
    let pairs = vech_pairs(p);
    let ps = pairs.len();
    let mut w = DMatrix::zeros(ps, ps);
    for (a, &(i, j)) in pairs.iter().enumerate() {
        let cij = if i == j { 1.0 } else { 2.0 };
        for (b, &(k, l)) in pairs.iter().enumerate().skip(a) {
            let ckl = if k == l { 1.0 } else { 2.0 };
            let value = 0.25
                * cij
                * ckl
                * (sigma_inv[(i, k)] * sigma_inv[(j, l)] + sigma_inv[(i, l)] * sigma_inv[(j, k)]);
            w[(a, b)] = value;
            w[(b, a)] = value;
        }
    }
    w
}

/// Normal-theory asymptotic covariance of sqrt(n) * vech(S).
pub fn normal_theory_cov(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let p = sigma.nrows();
    let pairs = vech_pairs(p);
    let ps = pairs.len();
    let mut g = DMatrix::zeros(ps, ps);
    for (a, &(i, j)) in pairs.iter().enumerate() {
        for (b, &(k, l)) in pairs.iter().enumerate().skip(a) {
            let value = sigma[(i, k)] * sigma[(j, l)] + sigma[(i, l)] * sigma[(j, k)];
            g[(a, b)] = value;
            g[(b, a)] = value;
        }
    }
    g
}

/// Empirical fourth-moment covariance matrix of the vech second-moment
/// deviations (the distribution-free Gamma estimate).
///
/// For centered rows y_i, let d_i = vech(y_i y_i'). Returns the biased
/// (divide-by-N) covariance of the d_i, which estimates the asymptotic
/// covariance of sqrt(N) * vech(S) without any normality assumption.
pub fn fourth_moment_cov(data: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.nrows();
    let p = data.ncols();
    let pairs = vech_pairs(p);
    let ps = pairs.len();

    let mut mean = vec![0.0; p];
    for r in 0..n {
        for c in 0..p {
            mean[c] += data[(r, c)];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }

    // First pass: mean of d_i.
    let mut dbar = vec![0.0; ps];
    let mut d = vec![0.0; ps];
    let mut gamma = DMatrix::zeros(ps, ps);
    for r in 0..n {
        for (a, &(i, j)) in pairs.iter().enumerate() {
            d[a] = (data[(r, i)] - mean[i]) * (data[(r, j)] - mean[j]);
        }
        for (a, da) in d.iter().enumerate() {
            dbar[a] += da;
        }
        // Accumulate sum of d_i d_i' (lower triangle).
        for a in 0..ps {
            let da = d[a];
            for b in a..ps {
                gamma[(b, a)] += da * d[b];
            }
        }
    }
    for v in dbar.iter_mut() {
        *v /= n as f64;
    }

    // Gamma = (1/N) sum d_i d_i' - dbar dbar'.
    let nf = n as f64;
    for a in 0..ps {
        for b in a..ps {
            let value = gamma[(b, a)] / nf - dbar[a] * dbar[b];
            gamma[(b, a)] = value;
            gamma[(a, b)] = value;
        }
    }
    gamma
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn random_spd(p: usize, seed: u64) -> DMatrix<f64> {
        // Small deterministic SPD matrix built from a fixed linear congruence.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let b = DMatrix::from_fn(p, p, |_, _| next());
        &b * b.transpose() + DMatrix::identity(p, p) * 0.5
    }

    #[test]
    fn vech_order_and_length() {
        let m = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 2., 4., 5., 3., 5., 6.]);
        let v = vech(&m);
        assert_eq!(v.len(), vech_len(3));
        assert_eq!(v, DVector::from_vec(vec![1., 2., 3., 4., 5., 6.]));
    }

    #[test]
    fn weight_is_inverse_of_normal_theory_cov() {
        for seed in 0..4u64 {
            let sigma = random_spd(4, seed + 1);
            let sigma_inv = sigma.clone().try_inverse().unwrap();
            let w = normal_theory_weight(&sigma_inv);
            let g = normal_theory_cov(&sigma);
            let prod = &w * &g;
            let eye = DMatrix::identity(w.nrows(), w.ncols());
            assert!((prod - eye).amax() < 1e-9, "W * Gamma_N should be identity");
        }
    }

    #[test]
    fn fourth_moment_dimensions_and_symmetry() {
        let data = DMatrix::from_row_slice(5, 2, &[1., 2., 0., 1., 3., -1., 2., 2., -1., 0.]);
        let g = fourth_moment_cov(&data);
        assert_eq!(g.nrows(), 3);
        assert_eq!(g, g.transpose());
    }
}
