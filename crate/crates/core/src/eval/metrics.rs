//! Image-quality and overlap metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};

/// PSNR of a perfect reconstruction as used in aggregates.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Eigenvalues above this (and below zero) are treated as rounding noise.
pub const EIGEN_TOLERANCE: f64 = -1e-6;
/// Diagonal loading used when a covariance product is not PSD.
pub const FID_REGULARIZER: f64 = 1e-6;

fn same_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("images {:?} and {:?} differ", a.dim(), b.dim())));
    }
    Ok(())
}

/// `10·log10(range² / MSE)` in dB; identical images give `+∞`.
pub fn psnr(reference: &Array2<f32>, test: &Array2<f32>, data_range: f64) -> Result<f64> {
    same_shape(reference, test)?;
    if reference.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    let mse = reference
        .iter()
        .zip(test)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    Ok(psnr_from_mse(mse, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filtering without padding: output is `(h-10) × (w-10)`.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let rows: Array2<f64> =
        Array2::from_shape_fn((h, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * img[[y, x + i]]).sum());
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(y, x)| (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Mean structural similarity with an 11-tap Gaussian window (σ = 1.5),
/// evaluated only where the window fits inside the image.
pub fn ssim(reference: &Array2<f32>, test: &Array2<f32>, data_range: f64) -> Result<f64> {
    same_shape(reference, test)?;
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter {
            name: "image",
            reason: format!("{h}x{w} is smaller than the {SSIM_WINDOW}-pixel window"),
        });
    }
    let k = gaussian_kernel();
    let x = reference.mapv(|v| v as f64);
    let y = test.mapv(|v| v as f64);
    let mx = filter_valid(&x, &k);
    let my = filter_valid(&y, &k);
    let sxx = filter_valid(&(&x * &x), &k);
    let syy = filter_valid(&(&y * &y), &k);
    let sxy = filter_valid(&(&x * &y), &k);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (mx, my) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = sxx.as_slice().unwrap()[i] - mx * mx;
        let vy = syy.as_slice().unwrap()[i] - my * my;
        let cxy = sxy.as_slice().unwrap()[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Mean and unbiased covariance of the rows of `features`.
pub fn feature_stats(features: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Parameter {
            name: "features",
            reason: format!("covariance needs at least 2 rows, got {n}"),
        });
    }
    let mean = features.mean_axis(Axis(0)).expect("nonempty");
    let centered = features - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    Ok((mean, cov))
}

/// Fréchet distance between two feature sets.
pub fn fid(real: &Array2<f64>, synth: &Array2<f64>) -> Result<f64> {
    Ok(fid_detailed(real, synth)?.0)
}

/// [`fid`] plus whether the covariances had to be regularised.
pub fn fid_detailed(real: &Array2<f64>, synth: &Array2<f64>) -> Result<(f64, bool)> {
    if real.ncols() != synth.ncols() {
        return Err(Error::Shape(format!(
            "feature widths differ: {} vs {}",
            real.ncols(),
            synth.ncols()
        )));
    }
    let (m1, s1) = feature_stats(real)?;
    let (m2, s2) = feature_stats(synth)?;
    fid_from_stats_detailed(&m1, &s1, &m2, &s2)
}

pub fn fid_from_stats(m1: &Array1<f64>, s1: &Array2<f64>, m2: &Array1<f64>, s2: &Array2<f64>) -> Result<f64> {
    Ok(fid_from_stats_detailed(m1, s1, m2, s2)?.0)
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[[r, c]])
}

/// `Tr((A B)^½)` through the symmetric form `(A^½ B A^½)^½`; `None` when an
/// eigenvalue falls below [`EIGEN_TOLERANCE`].
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ea = SymmetricEigen::new(a.clone());
    if ea.eigenvalues.iter().any(|&l| l < EIGEN_TOLERANCE || !l.is_finite()) {
        return None;
    }
    let roots = ea.eigenvalues.map(|l| l.max(0.0).sqrt());
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let m = &sqrt_a * b * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let em = SymmetricEigen::new(m);
    if em.eigenvalues.iter().any(|&l| l < EIGEN_TOLERANCE || !l.is_finite()) {
        return None;
    }
    Some(em.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

pub fn fid_from_stats_detailed(
    m1: &Array1<f64>,
    s1: &Array2<f64>,
    m2: &Array1<f64>,
    s2: &Array2<f64>,
) -> Result<(f64, bool)> {
    let d = m1.len();
    if m2.len() != d || s1.dim() != (d, d) || s2.dim() != (d, d) {
        return Err(Error::Shape(format!(
            "inconsistent statistics: means {} / {}, covariances {:?} / {:?}",
            d,
            m2.len(),
            s1.dim(),
            s2.dim()
        )));
    }
    let mean_term: f64 = m1.iter().zip(m2).map(|(a, b)| (a - b).powi(2)).sum();
    let (a, b) = (to_matrix(s1), to_matrix(s2));
    // Both orders agree in exact arithmetic; averaging them makes the result
    // symmetric in floating point too.
    let both = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        Some(0.5 * (trace_sqrt_product(a, b)? + trace_sqrt_product(b, a)?))
    };
    let (a, b, trace_root, regularized) = match both(&a, &b) {
        Some(t) => (a, b, t, false),
        None => {
            log::warn!("covariance product is not positive semi-definite; adding {FID_REGULARIZER}·I");
            let eye = DMatrix::<f64>::identity(d, d) * FID_REGULARIZER;
            let (a, b) = (a + &eye, b + &eye);
            let t = both(&a, &b)
                .ok_or_else(|| Error::Domain("covariances stay indefinite after regularisation".into()))?;
            (a, b, t, true)
        }
    };
    let value = mean_term + (a.trace() + b.trace()) - 2.0 * trace_root;
    Ok((value.max(0.0), regularized))
}

/// `(|P ∩ G|, |P|, |G|)` for one class.
pub fn dice_counts(pred: &Array2<u8>, truth: &Array2<u8>, class: u8) -> Result<(usize, usize, usize)> {
    if pred.dim() != truth.dim() {
        return Err(Error::Shape(format!("masks {:?} and {:?} differ", pred.dim(), truth.dim())));
    }
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(truth) {
        let (p, g) = (p == class, g == class);
        counts.0 += (p && g) as usize;
        counts.1 += p as usize;
        counts.2 += g as usize;
    }
    Ok(counts)
}

/// `2|P∩G| / (|P|+|G|)`, or `1.0` when the class is absent from both.
pub fn dice_from_counts(inter: usize, pred: usize, truth: usize) -> f64 {
    if pred + truth == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (pred + truth) as f64
    }
}

pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>, class: u8) -> Result<f64> {
    let (i, p, g) = dice_counts(pred, truth, class)?;
    Ok(dice_from_counts(i, p, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.random::<f32>())
    }

    #[test]
    fn psnr_cases() {
        let a = Array2::from_elem((4, 4), 0.3f32);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let zeros = Array2::zeros((3, 5));
        let ones = Array2::ones((3, 5));
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-9);
        // Every pixel off by 0.1 gives MSE 0.01 up to f32 rounding.
        let b = Array2::from_elem((4, 4), 0.5f32);
        let c = Array2::from_elem((4, 4), 0.4f32);
        assert!((psnr(&b, &c, 1.0).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&b, &Array2::zeros((4, 3)), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = noise(24, 20, 1);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let half = Array2::from_elem((16, 16), 0.5f32);
        assert!((ssim(&half, &half, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&noise(10, 30, 2), &noise(10, 30, 3), 1.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn ssim_matches_direct_window_sums() {
        // Brute-force weighted sums over every window position.
        let a = noise(13, 12, 4);
        let b = noise(13, 12, 5);
        let k = gaussian_kernel();
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=13 - 11 {
            for x in 0..=12 - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = k[i] * k[j];
                        let (p, q) = (a[[y + i, x + j]] as f64, b[[y + i, x + j]] as f64);
                        mx += wgt * p;
                        my += wgt * q;
                        xx += wgt * p * p;
                        yy += wgt * q * q;
                        xy += wgt * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += ((2.0 * mx * my + c1) * (2.0 * (xy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
                count += 1;
            }
        }
        let got = ssim(&a, &b, 1.0).unwrap();
        assert!((got - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_fixture() {
        // A smooth ramp plus a bright square; its negative is structurally
        // anticorrelated, so SSIM falls far below one half.
        let img = Array2::from_shape_fn((32, 32), |(y, x)| {
            let base = 0.3 + 0.4 * (x as f32 / 31.0);
            if (10..22).contains(&y) && (10..22).contains(&x) {
                base + 0.2
            } else {
                base
            }
        });
        let inv = img.mapv(|v| 1.0 - v);
        let got = ssim(&img, &inv, 1.0).unwrap();
        assert!(got < 0.5);
        // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
        // use_sample_covariance=False, data_range=1.0) on the same arrays.
        assert!((got - -0.41349663474937565).abs() < 1e-9, "{got}");
    }

    #[test]
    fn fid_closed_forms() {
        let m0 = array![0.0];
        let m1 = array![1.0];
        let one = array![[1.0]];
        assert!((fid_from_stats(&m0, &one, &m1, &one).unwrap() - 1.0).abs() < 1e-9);
        let eye = Array2::<f64>::eye(2);
        let four = &eye * 4.0;
        let z = Array1::zeros(2);
        assert!((fid_from_stats(&z, &eye, &z, &four).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn fid_identical_sets_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = Array2::from_shape_fn((50, 6), |_| rng.random::<f64>());
        assert!(fid(&f, &f).unwrap() <= 1e-6);
        assert!(fid(&f.slice(ndarray::s![..1, ..]).to_owned(), &f).is_err());
    }

    #[test]
    fn fid_rank_deficient_sets_stay_finite() {
        // Fewer rows than columns: singular covariances.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((5, 12), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((5, 12), |_| rng.random::<f64>());
        let v = fid(&a, &b).unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }

    #[test]
    fn dice_cases() {
        let g = Array2::from_shape_fn((4, 4), |(_, x)| (x < 2) as u8 * 3);
        assert_eq!(dice(&g, &g, 3).unwrap(), 1.0);
        let disjoint = Array2::from_shape_fn((4, 4), |(_, x)| (x >= 2) as u8 * 3);
        assert_eq!(dice(&disjoint, &g, 3).unwrap(), 0.0);
        let half = Array2::from_shape_fn((4, 4), |(_, x)| (x < 1) as u8 * 3);
        assert_eq!(dice(&half, &g, 3).unwrap(), 2.0 / 3.0);
        assert_eq!(dice(&g, &g, 9).unwrap(), 1.0);
        assert!(dice(&g, &Array2::zeros((4, 5)), 3).is_err());
    }

    proptest! {
        #[test]
        fn fid_is_symmetric_and_nonnegative(seed in 0u64..1000, n in 3usize..20, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
            let b = Array2::from_shape_fn((n + 2, d), |_| 2.0 * rng.random::<f64>());
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_bounded(seed in 0u64..1000) {
            let v = ssim(&noise(12, 14, seed), &noise(12, 14, seed + 1), 1.0).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn dice_invariant_under_label_permutation(seed in 0u64..1000, class in 0u8..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..4u8));
            let g = Array2::from_shape_fn((6, 6), |_| rng.random_range(0..4u8));
            let perm = [2u8, 0, 3, 1];
            let (pp, gp) = (p.mapv(|v| perm[v as usize]), g.mapv(|v| perm[v as usize]));
            prop_assert_eq!(dice(&p, &g, class).unwrap(), dice(&pp, &gp, perm[class as usize]).unwrap());
        }
    }
}
