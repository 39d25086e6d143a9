//! PSNR, SSIM and SAM for `[H, W, B]` cubes.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape_mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn dims(op: &str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, b] => Ok((h, w, b)),
        ref s => Err(Error::Dimension(format!("{op} expects [H, W, B], got {s:?}"))),
    }
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// `10 log10(peak^2 / MSE)` with the MSE over all voxels.
pub fn psnr(estimate: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    same_shape("psnr", estimate, reference)?;
    let sse: f64 = estimate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(psnr_from_mse(sse / reference.numel() as f64, peak))
}

/// PSNR of every band separately.
pub fn band_psnr(estimate: &Tensor, reference: &Tensor, peak: f64) -> Result<Vec<f64>> {
    same_shape("band_psnr", estimate, reference)?;
    let (h, w, bands) = dims("band_psnr", reference)?;
    let mut sse = vec![0.0; bands];
    for (i, (a, b)) in estimate.data().iter().zip(reference.data()).enumerate() {
        sse[i % bands] += (a - b) * (a - b);
    }
    Ok(sse
        .into_iter()
        .map(|s| psnr_from_mse(s / (h * w) as f64, peak))
        .collect())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one band, Gaussian window, valid region only.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu1 = filter_valid(a, h, w, g);
    let mu2 = filter_valid(b, h, w, g);
    let e11 = filter_valid(&prod(a, a), h, w, g);
    let e22 = filter_valid(&prod(b, b), h, w, g);
    let e12 = filter_valid(&prod(a, b), h, w, g);
    let n = mu1.len();
    let mut total = 0.0;
    for i in 0..n {
        let (m1, m2) = (mu1[i], mu2[i]);
        let s11 = e11[i] - m1 * m1;
        let s22 = e22[i] - m2 * m2;
        let s12 = e12[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + c1) * (2.0 * s12 + c2)) / ((m1 * m1 + m2 * m2 + c1) * (s11 + s22 + c2));
    }
    total / n as f64
}

/// SSIM per band (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03,
/// dynamic range 1), averaged over bands.
pub fn ssim(estimate: &Tensor, reference: &Tensor) -> Result<f64> {
    same_shape("ssim", estimate, reference)?;
    let (h, w, bands) = dims("ssim", reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Parameter(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let plane = |t: &Tensor, b: usize| t.data().iter().skip(b).step_by(bands).copied().collect::<Vec<_>>();
    let total: f64 = (0..bands)
        .map(|b| ssim_plane(&plane(estimate, b), &plane(reference, b), h, w, &g))
        .sum();
    Ok(total / bands as f64)
}

/// Mean spectral angle in degrees and the number of pixels skipped because
/// either spectrum is all zero.
pub fn sam(estimate: &Tensor, reference: &Tensor) -> Result<(f64, usize)> {
    same_shape("sam", estimate, reference)?;
    let (_, _, bands) = dims("sam", reference)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (x, y) in estimate.data().chunks(bands).zip(reference.data().chunks(bands)) {
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            skipped += 1;
            continue;
        }
        // 2 atan2(|u - v|, |u + v|) for unit u, v: exact at 0 and 90 degrees
        let (mut d, mut s) = (0.0, 0.0);
        for (a, b) in x.iter().zip(y) {
            let (u, v) = (a / nx, b / ny);
            d += (u - v) * (u - v);
            s += (u + v) * (u + v);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::UndefinedMetric(
            "spectral angle is undefined: every pixel has a zero spectrum".into(),
        ));
    }
    Ok(((total / counted as f64).to_degrees(), skipped))
}

/// All metrics for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub sam_degrees: f64,
    pub band_psnr: Vec<f64>,
    pub sam_skipped: usize,
}

impl MetricReport {
    pub fn compute(label: impl Into<String>, estimate: &Tensor, reference: &Tensor) -> Result<Self> {
        let (sam_degrees, sam_skipped) = sam(estimate, reference)?;
        Ok(Self {
            label: label.into(),
            psnr_db: psnr(estimate, reference, 1.0)?,
            ssim: ssim(estimate, reference)?,
            sam_degrees,
            band_psnr: band_psnr(estimate, reference, 1.0)?,
            sam_skipped,
        })
    }

    /// Unweighted mean over reports; band lists are averaged element-wise
    /// when all have the same length and dropped otherwise.
    pub fn average(reports: &[MetricReport]) -> Option<Self> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let bands = reports[0].band_psnr.len();
        let band_psnr = if reports.iter().all(|r| r.band_psnr.len() == bands) {
            (0..bands)
                .map(|b| reports.iter().map(|r| r.band_psnr[b]).sum::<f64>() / n as f64)
                .collect()
        } else {
            Vec::new()
        };
        Some(Self {
            label: "average".into(),
            psnr_db: mean(|r| r.psnr_db),
            ssim: mean(|r| r.ssim),
            sam_degrees: mean(|r| r.sam_degrees),
            band_psnr,
            sam_skipped: reports.iter().map(|r| r.sam_skipped).sum(),
        })
    }

    /// `metric=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image={}", self.label);
        let _ = writeln!(s, "psnr_db={:.4}", self.psnr_db);
        let _ = writeln!(s, "ssim={:.6}", self.ssim);
        let _ = writeln!(s, "sam_degrees={:.4}", self.sam_degrees);
        let _ = writeln!(s, "sam_skipped={}", self.sam_skipped);
        let bands: Vec<String> = self.band_psnr.iter().map(|p| format!("{p:.4}")).collect();
        let _ = writeln!(s, "band_psnr_db={}", bands.join(","));
        s
    }
}

/// Aligned plain-text table, one row per report.
pub fn render_table(reports: &[MetricReport]) -> String {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  {:>10}  {:>8}  {:>9}\n", "image", "PSNR(dB)", "SSIM", "SAM(deg)");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<width$}  {:>10.4}  {:>8.4}  {:>9.4}",
            r.label, r.psnr_db, r.ssim, r.sam_degrees
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cube(seed: u64, shape: [usize; 3]) -> Tensor {
        rng::uniform_tensor(&mut rng::stream(seed, 0), &shape, 0.0, 1.0)
    }

    #[test]
    fn psnr_examples() {
        let x = cube(1, [4, 4, 2]);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), 100.0);
        let y = Tensor::new(x.shape(), x.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(matches!(psnr(&x, &cube(2, [4, 4, 3]), 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn psnr_is_symmetric_and_falls_with_noise() {
        let x = cube(3, [64, 64, 4]);
        let mut last = f64::INFINITY;
        for sigma in [5.0, 10.0, 20.0, 40.0, 80.0] {
            let y = crate::degradation::gaussian_iid(&x, sigma, 1).unwrap();
            let p = psnr(&y, &x, 1.0).unwrap();
            assert_eq!(p, psnr(&x, &y, 1.0).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let x = cube(4, [16, 20, 3]);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn constant_images_follow_closed_form() {
        let (m1, m2) = (0.3, 0.7);
        let a = Tensor::full([12, 12, 1], m1);
        let b = Tensor::full([12, 12, 1], m2);
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let expect = (2.0 * m1 * m2 + c1) * c2 / ((m1 * m1 + m2 * m2 + c1) * c2);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    /// Direct 2-D window sums at every valid position; shares nothing with
    /// the separable implementation but the window formula.
    fn reference_ssim(a: &Tensor, b: &Tensor) -> f64 {
        let [h, w, bands] = a.shape()[..] else { unreachable!() };
        let mut win = [[0.0f64; 11]; 11];
        let mut total = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                total += *v;
            }
        }
        let mut acc = 0.0;
        for band in 0..bands {
            let mut sum = 0.0;
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut m1, mut m2, mut e11, mut e22, mut e12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let g = win[i][j] / total;
                            let p = a.at(&[y + i, x + j, band]);
                            let q = b.at(&[y + i, x + j, band]);
                            m1 += g * p;
                            m2 += g * q;
                            e11 += g * p * p;
                            e22 += g * q * q;
                            e12 += g * p * q;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let num = (2.0 * m1 * m2 + c1) * (2.0 * (e12 - m1 * m2) + c2);
                    let den = (m1 * m1 + m2 * m2 + c1) * (e11 - m1 * m1 + e22 - m2 * m2 + c2);
                    sum += num / den;
                }
            }
            acc += sum / ((h - 10) * (w - 10)) as f64;
        }
        acc / bands as f64
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        let x = cube(5, [20, 17, 3]);
        let y = crate::degradation::gaussian_iid(&x, 30.0, 2).unwrap();
        let s = ssim(&y, &x).unwrap();
        assert!((s - reference_ssim(&y, &x)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn small_images_are_rejected_by_ssim() {
        let x = cube(6, [10, 30, 1]);
        assert!(matches!(ssim(&x, &x), Err(Error::Parameter(_))));
    }

    #[test]
    fn sam_examples() {
        let t = |d: &[f64]| Tensor::new([1, 1, d.len()], d.to_vec()).unwrap();
        assert_eq!(sam(&t(&[0.3, 0.5, 0.2]), &t(&[0.3, 0.5, 0.2])).unwrap().0, 0.0);
        assert!((sam(&t(&[1.0, 0.0]), &t(&[0.0, 1.0])).unwrap().0 - 90.0).abs() < 1e-12);
        assert!((sam(&t(&[1.0, 1.0]), &t(&[1.0, 0.0])).unwrap().0 - 45.0).abs() < 1e-12);
    }

    #[test]
    fn sam_skips_zero_spectra_and_rejects_all_zero() {
        let a = Tensor::new([1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new([1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let (deg, skipped) = sam(&a, &b).unwrap();
        assert_eq!(skipped, 1);
        assert!((deg - 45.0).abs() < 1e-12);
        let z = Tensor::zeros([2, 2, 3]);
        assert!(matches!(sam(&z, &z), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn sam_ignores_positive_pixel_scaling() {
        let x = cube(7, [8, 8, 5]);
        let y = cube(8, [8, 8, 5]);
        let scales = cube(9, [8, 8, 1]);
        let mut scaled = x.clone();
        for (p, px) in scaled.data_mut().chunks_mut(5).enumerate() {
            px.iter_mut().for_each(|v| *v *= 0.1 + 5.0 * scales.data()[p]);
        }
        let (a, _) = sam(&x, &y).unwrap();
        let (b, _) = sam(&scaled, &y).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn report_formats() {
        let x = cube(10, [12, 12, 2]);
        let y = crate::degradation::gaussian_iid(&x, 20.0, 3).unwrap();
        let r = MetricReport::compute("img0", &y, &x).unwrap();
        assert_eq!(r.band_psnr.len(), 2);
        let kv = r.to_kv();
        assert!(kv.contains("image=img0\n") && kv.contains("psnr_db="));
        let avg = MetricReport::average(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(avg.psnr_db, r.psnr_db);
        let table = render_table(&[r, avg]);
        assert_eq!(table.lines().count(), 3);
        assert!(MetricReport::average(&[]).is_none());
    }
}
