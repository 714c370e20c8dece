//! Frechet distance between Gaussian fits of feature sets.
//!
//! ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
//! square root taken through the eigendecomposition of the symmetrized
//! product B S_a B (B = S_b^{1/2}); negative eigenvalues clamp to zero.
//! Reported as "FD": the feature extractor here is the guidance net's
//! pooled penultimate layer, not an Inception network.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const COV_JITTER: f64 = 1e-6;

fn mean_and_cov(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = feats.len();
    if m < 2 {
        return Err(Error::Contract(format!(
            "frechet_distance: need at least 2 feature rows, got {m}"
        )));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Contract("frechet_distance: ragged feature rows".into()));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            msg: "frechet_distance: non-finite features".into(),
        });
    }
    let mut mean = DVector::zeros(d);
    for f in feats {
        for (i, &v) in f.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= m as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let centered = DVector::from_iterator(d, f.iter().enumerate().map(|(i, &v)| v - mean[i]));
        cov += &centered * centered.transpose();
    }
    cov /= (m - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += COV_JITTER;
    }
    Ok((mean, cov))
}

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn gaussian_frechet(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> f64 {
    let diff = mu_a - mu_b;
    let b_root = sqrtm_psd(cov_b);
    let product = &b_root * cov_a * &b_root;
    let sym = (&product + product.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let trace_root: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * trace_root;
    value.max(0.0)
}

/// Frechet distance between two feature sets (rows are samples).
pub fn frechet_distance(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = mean_and_cov(feats_a)?;
    let (mu_b, cov_b) = mean_and_cov(feats_b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape(
            "frechet_distance",
            &[mu_a.len()],
            &[mu_b.len()],
        ));
    }
    let ab = gaussian_frechet(&mu_a, &cov_a, &mu_b, &cov_b);
    let ba = gaussian_frechet(&mu_b, &cov_b, &mu_a, &cov_a);
    debug_assert!(
        (ab - ba).abs() <= 1e-6 * ab.abs().max(1.0),
        "frechet asymmetry: {ab} vs {ba}"
    );
    Ok(0.5 * (ab + ba))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_rows(n: usize, mu: f64, sigma: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, "fd-test", 0);
        (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                vec![mu + sigma * z]
            })
            .collect()
    }

    #[test]
    fn identical_sets_score_zero() {
        let a = gaussian_rows(500, 0.3, 1.1, 1);
        let fd = frechet_distance(&a, &a).unwrap();
        assert!(fd.abs() < 1e-6, "fd = {fd}");
    }

    #[test]
    fn one_dimensional_closed_form() {
        // N(0,1) vs N(1,1): (mu1-mu2)^2 + (s1-s2)^2 = 1.
        let a = gaussian_rows(100_000, 0.0, 1.0, 2);
        let b = gaussian_rows(100_000, 1.0, 1.0, 3);
        let fd = frechet_distance(&a, &b).unwrap();
        assert!((fd - 1.0).abs() < 0.05, "fd = {fd}");
    }

    #[test]
    fn symmetry() {
        let a = gaussian_rows(400, 0.0, 1.0, 4);
        let b = gaussian_rows(300, 0.7, 1.4, 5);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-6);
        assert!(ab >= 0.0);
    }

    #[test]
    fn multivariate_distance_grows_with_mean_shift() {
        let mut rng = crate::rng::stream(6, "fd-multi", 0);
        let base: Vec<Vec<f64>> = (0..400)
            .map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let shifted: Vec<Vec<f64>> = base
            .iter()
            .map(|row| row.iter().map(|v| v + 2.0).collect())
            .collect();
        let near = frechet_distance(&base, &base).unwrap();
        let far = frechet_distance(&base, &shifted).unwrap();
        assert!(far > near + 1.0, "near {near}, far {far}");
        // Mean shift of 2 in 4 dims: expected distance 16.
        assert!((far - 16.0).abs() < 1.0, "far {far}");
    }

    #[test]
    fn non_finite_features_error() {
        let a = vec![vec![0.0], vec![f64::NAN]];
        let b = vec![vec![0.0], vec![1.0]];
        assert!(frechet_distance(&a, &b).is_err());
    }
}
