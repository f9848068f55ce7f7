//! Evaluation metrics: rigid trajectory alignment, ATE, PSNR, SSIM, and
//! the flat key-value metrics report.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{EvsplatError, Result};
use crate::imaging::luma;
use crate::img::ColorImage;

/// PSNR is capped here for exact matches.
pub const PSNR_CAP: f64 = 99.0;

/// Rigid (no-scale) alignment minimizing `sum ||gt - (R est + t)||^2`.
/// Returns the rotation, translation, and per-point residual norms.
pub fn align_umeyama(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
) -> Result<(Matrix3<f64>, Vector3<f64>, Vec<f64>)> {
    if est.len() != gt.len() {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{} points", gt.len()),
            got: format!("{} points", est.len()),
        });
    }
    if est.len() < 3 {
        return Err(EvsplatError::InvalidArgument(format!(
            "alignment needs at least 3 points, got {}",
            est.len()
        )));
    }
    let n = est.len() as f64;
    let c_est = est.iter().sum::<Vector3<f64>>() / n;
    let c_gt = gt.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::<f64>::zeros();
    for (e, g) in est.iter().zip(gt.iter()) {
        h += (e - c_est) * (g - c_gt).transpose();
    }
    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-12) || sv[0] <= 1e-15 {
        return Err(EvsplatError::Degenerate(
            "rank-deficient point sets: alignment is not unique".into(),
        ));
    }
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    // R maps est into gt: R = V diag(1, 1, det(V U^T)) U^T.
    let d = (v_t.transpose() * u.transpose()).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    let r = v_t.transpose() * s * u.transpose();
    let t = c_gt - r * c_est;
    let residuals = est
        .iter()
        .zip(gt.iter())
        .map(|(e, g)| (g - (r * e + t)).norm())
        .collect();
    Ok((r, t, residuals))
}

/// RMSE of aligned positional residuals (absolute trajectory error).
pub fn compute_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let (_, _, residuals) = align_umeyama(est, gt)?;
    let mse = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
    Ok(mse.sqrt())
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at 99 dB.
pub fn compute_psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{}x{}", a.width, a.height),
            got: format!("{}x{}", b.width, b.height),
        });
    }
    let mut mse = 0.0;
    for (pa, pb) in a.data.iter().zip(b.data.iter()) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (a.len() * 3) as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as i64;
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[((dy + half) * SSIM_WINDOW as i64 + dx + half) as usize] = w;
            sum += w;
        }
    }
    for w in k.iter_mut() {
        *w /= sum;
    }
    k
}

/// Mean windowed SSIM on luma: 11x11 Gaussian window, sigma 1.5,
/// C1 = 0.01^2, C2 = 0.03^2 on unit range. Valid-window positions only.
pub fn compute_ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(EvsplatError::DimensionMismatch {
            expected: format!("{}x{}", a.width, a.height),
            got: format!("{}x{}", b.width, b.height),
        });
    }
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(EvsplatError::InvalidArgument(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window",
            a.width, a.height
        )));
    }
    let gray = |img: &ColorImage| -> Vec<f64> { img.data.iter().map(luma).collect() };
    let ga = gray(a);
    let gb = gray(b);
    let kernel = ssim_kernel();
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=(h - SSIM_WINDOW) {
        for x0 in 0..=(w - SSIM_WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kw = kernel[ky * SSIM_WINDOW + kx];
                    let px = (y0 + ky) * w + x0 + kx;
                    mu_a += kw * ga[px];
                    mu_b += kw * gb[px];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let kw = kernel[ky * SSIM_WINDOW + kx];
                    let px = (y0 + ky) * w + x0 + kx;
                    let da = ga[px] - mu_a;
                    let db = gb[px] - mu_b;
                    var_a += kw * da * da;
                    var_b += kw * db * db;
                    cov += kw * da * db;
                }
            }
            let val = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Flat key-value metrics report, written as `key = value` lines sorted
/// by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    entries: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.entries.insert(key.to_string(), format!("{value:.6}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvsplatError::io(path.display().to_string(), e))?;
        let mut report = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once(" = ") else {
                return Err(EvsplatError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected 'key = value', got {line:?}"),
                });
            };
            report.set(k.trim(), v.trim());
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 - 2.0,
                    rng.random::<f64>() * 4.0 - 2.0,
                )
            })
            .collect()
    }

    #[test]
    fn umeyama_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let pts = random_cloud(&mut rng, 10);
        let (_, _, res) = align_umeyama(&pts, &pts).unwrap();
        assert!(res.iter().all(|&r| r < 1e-12));
    }

    #[test]
    fn umeyama_rotated_cloud_aligns_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let gt = random_cloud(&mut rng, 12);
        let rot = nalgebra::Rotation3::from_axis_angle(
            &Vector3::z_axis(),
            std::f64::consts::FRAC_PI_2,
        )
        .into_inner();
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| rot * p).collect();
        let ate = compute_ate(&est, &gt).unwrap();
        assert!(ate < 1e-12);
    }

    #[test]
    fn umeyama_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let gt = random_cloud(&mut rng, 20);
        let axis = nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8));
        let r_true = nalgebra::Rotation3::from_axis_angle(&axis, 1.1).into_inner();
        let t_true = Vector3::new(0.4, -1.2, 2.0);
        // est transformed by the inverse so aligning est->gt recovers it.
        let est: Vec<Vector3<f64>> = gt.iter().map(|p| r_true.transpose() * (p - t_true)).collect();
        let (r, t, res) = align_umeyama(&est, &gt).unwrap();
        assert!((r - r_true).norm() < 1e-9);
        assert!((t - t_true).norm() < 1e-9);
        assert!(res.iter().all(|&x| x < 1e-9));
    }

    #[test]
    fn umeyama_rejects_degenerate() {
        // Collinear points: rotation about the line is unconstrained.
        let gt: Vec<Vector3<f64>> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(align_umeyama(&gt, &gt).is_err());
        // Too few points.
        let two = vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)];
        assert!(align_umeyama(&two, &two).is_err());
    }

    #[test]
    fn ate_surviving_residual_pattern() {
        // Square in the xy-plane; alternating +-0.1 offsets on z survive
        // the optimal rigid alignment (identity), leaving RMSE 0.1.
        let gt = vec![
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
            Vector3::new(-1.0, -1.0, 0.0),
        ];
        let est = vec![
            Vector3::new(1.0, 1.0, 0.1),
            Vector3::new(1.0, -1.0, -0.1),
            Vector3::new(-1.0, 1.0, -0.1),
            Vector3::new(-1.0, -1.0, 0.1),
        ];
        let ate = compute_ate(&est, &gt).unwrap();
        assert_relative_eq!(ate, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn ate_rejects_short_trajectories() {
        let one = vec![Vector3::zeros()];
        assert!(compute_ate(&one, &one).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = ColorImage::filled(8, 8, [0.5, 0.5, 0.5]);
        assert_eq!(compute_psnr(&a, &a).unwrap(), PSNR_CAP);

        // MSE 0.01 -> 20 dB.
        let mut b = a.clone();
        for px in b.data.iter_mut() {
            for c in 0..3 {
                px[c] += 0.1;
            }
        }
        assert_relative_eq!(compute_psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);

        // Black vs white: MSE 1 -> 0 dB.
        let black = ColorImage::filled(8, 8, [0.0; 3]);
        let white = ColorImage::filled(8, 8, [1.0; 3]);
        assert_relative_eq!(compute_psnr(&black, &white).unwrap(), 0.0, epsilon = 1e-12);

        assert!(compute_psnr(&a, &ColorImage::new(4, 4)).is_err());
    }

    #[test]
    fn ssim_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let mut a = ColorImage::new(16, 16);
        for px in a.data.iter_mut() {
            let v = rng.random::<f64>();
            *px = [v, v, v];
        }
        assert_relative_eq!(compute_ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ssim_negative_for_inverted_texture() {
        // Checkerboard 0.5 +- 0.25 against its negative: strong negative
        // covariance drives SSIM below zero.
        let (w, h) = (16, 16);
        let mut a = ColorImage::new(w, h);
        let mut b = ColorImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 0.25 } else { 0.75 };
                a.set(x, y, [v, v, v]);
                b.set(x, y, [1.0 - v, 1.0 - v, 1.0 - v]);
            }
        }
        let ssim = compute_ssim(&a, &b).unwrap();
        assert!(ssim < 0.0, "ssim = {ssim}");
    }

    #[test]
    fn ssim_luminance_shift_drops_below_point_nine() {
        let a = ColorImage::filled(16, 16, [0.2, 0.2, 0.2]);
        let b = ColorImage::filled(16, 16, [0.7, 0.7, 0.7]);
        let ssim = compute_ssim(&a, &b).unwrap();
        // Closed-form single-window value: constants only.
        let expect = (2.0 * 0.2 * 0.7 + SSIM_C1) / (0.2f64.powi(2) + 0.7f64.powi(2) + SSIM_C1);
        assert_relative_eq!(ssim, expect, epsilon = 1e-9);
        assert!(ssim < 0.9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ColorImage::new(8, 8);
        assert!(compute_ssim(&a, &a).is_err());
    }

    #[test]
    fn psnr_ssim_match_double_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..5 {
            let (w, h) = (16, 16);
            let mut a = ColorImage::new(w, h);
            let mut b = ColorImage::new(w, h);
            for px in 0..w * h {
                for c in 0..3 {
                    a.data[px][c] = rng.random::<f64>();
                    b.data[px][c] = rng.random::<f64>();
                }
            }
            // PSNR oracle.
            let mut mse = 0.0;
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let d = a.get(x, y)[c] - b.get(x, y)[c];
                        mse += d * d;
                    }
                }
            }
            mse /= (w * h * 3) as f64;
            let psnr_oracle = 10.0 * (1.0 / mse).log10();
            assert_relative_eq!(compute_psnr(&a, &b).unwrap(), psnr_oracle, epsilon = 1e-6);

            // SSIM oracle: plain double loop over window positions.
            let kernel = ssim_kernel();
            let ga: Vec<f64> = a.data.iter().map(luma).collect();
            let gb: Vec<f64> = b.data.iter().map(luma).collect();
            let mut total = 0.0;
            let mut cnt = 0;
            for y0 in 0..=(h - 11) {
                for x0 in 0..=(w - 11) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut ea = 0.0;
                    let mut eb = 0.0;
                    let mut eab = 0.0;
                    for ky in 0..11 {
                        for kx in 0..11 {
                            let kw = kernel[ky * 11 + kx];
                            let pa = ga[(y0 + ky) * w + x0 + kx];
                            let pb = gb[(y0 + ky) * w + x0 + kx];
                            mu_a += kw * pa;
                            mu_b += kw * pb;
                            ea += kw * pa * pa;
                            eb += kw * pb * pb;
                            eab += kw * pa * pb;
                        }
                    }
                    let va = ea - mu_a * mu_a;
                    let vb = eb - mu_b * mu_b;
                    let cab = eab - mu_a * mu_b;
                    total += ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cab + SSIM_C2))
                        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (va + vb + SSIM_C2));
                    cnt += 1;
                }
            }
            let ssim_oracle = total / cnt as f64;
            assert_relative_eq!(compute_ssim(&a, &b).unwrap(), ssim_oracle, epsilon = 1e-6);
        }
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.txt");
        let mut report = MetricsReport::new();
        report.set_f64("ate_rmse", 0.0123456);
        report.set("seed", 7u64);
        report.set("lpips", "unavailable");
        report.save(&path).unwrap();
        let loaded = MetricsReport::load(&path).unwrap();
        assert_eq!(loaded, report);
        assert_eq!(loaded.get("lpips"), Some("unavailable"));
        assert_relative_eq!(loaded.get_f64("ate_rmse").unwrap(), 0.012346, epsilon = 1e-9);
    }
}
