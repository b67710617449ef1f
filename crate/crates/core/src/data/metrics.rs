//! Benchmark metrics over corrupted pixels only, on the 0–255 scale.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) with K1 = 0.01, K2 = 0.03 and
//! L = 255. Near the border the window is truncated and each axis's weights
//! renormalised to sum to one. Windows centred on corrupted pixels may cover
//! valid neighbours.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{check_mask, is_corrupted, Clip};
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
const SCALE: f64 = 255.0;
const WINDOW_RADIUS: usize = 5;
const WINDOW_SIGMA: f64 = 1.5;

fn check(pred: &Clip, truth: &Clip, mask: &Clip) -> Result<usize> {
    if pred.channels != truth.channels || !pred.same_extent(truth) {
        return Err(Error::Contract("prediction and ground truth differ in shape".into()));
    }
    check_mask(pred, mask).map_err(|e| Error::Contract(alloc::format!("{e}")))?;
    let n = mask.data.iter().filter(|&&m| is_corrupted(m)).count();
    if n == 0 {
        return Err(Error::Contract("crop metrics need at least one corrupted pixel".into()));
    }
    Ok(n)
}

pub fn mse_crop(pred: &Clip, truth: &Clip, mask: &Clip) -> Result<f64> {
    let n = check(pred, truth, mask)?;
    let plane = pred.height * pred.width;
    let mut sum = 0.0;
    for t in 0..pred.frames {
        let m = mask.frame(t);
        for c in 0..pred.channels {
            let start = (t * pred.channels + c) * plane;
            let (p, g) = (&pred.data[start..start + plane], &truth.data[start..start + plane]);
            for i in (0..plane).filter(|&i| is_corrupted(m[i])) {
                let d = SCALE * (p[i] as f64 - g[i] as f64);
                sum += d * d;
            }
        }
    }
    Ok(sum / (n * pred.channels) as f64)
}

pub fn psnr_crop(pred: &Clip, truth: &Clip, mask: &Clip) -> Result<f64> {
    let mse = mse_crop(pred, truth, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (SCALE * SCALE / mse).log10()).min(PSNR_CAP))
}

/// Normalised window weights for offsets `-r..=r` around `centre` on an axis
/// of length `n`, as `(first index, weights)`.
fn axis_weights(centre: usize, n: usize, gauss: &[f64]) -> (usize, alloc::vec::Vec<f64>) {
    let lo = centre.saturating_sub(WINDOW_RADIUS);
    let hi = (centre + WINDOW_RADIUS).min(n - 1);
    let w: alloc::vec::Vec<f64> = (lo..=hi).map(|i| gauss[i + WINDOW_RADIUS - centre]).collect();
    let s: f64 = w.iter().sum();
    (lo, w.into_iter().map(|v| v / s).collect())
}

pub fn ssim_crop(pred: &Clip, truth: &Clip, mask: &Clip) -> Result<f64> {
    let n = check(pred, truth, mask)?;
    let gauss: alloc::vec::Vec<f64> = (0..=2 * WINDOW_RADIUS)
        .map(|i| {
            let d = i as f64 - WINDOW_RADIUS as f64;
            (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
        })
        .collect();
    let c1 = (0.01 * SCALE).powi(2);
    let c2 = (0.03 * SCALE).powi(2);
    let (h, w) = (pred.height, pred.width);
    let mut total = 0.0;
    for t in 0..pred.frames {
        let m = mask.frame(t);
        for y in 0..h {
            let (y0, wy) = axis_weights(y, h, &gauss);
            for x in (0..w).filter(|&x| is_corrupted(m[y * w + x])) {
                let (x0, wx) = axis_weights(x, w, &gauss);
                for c in 0..pred.channels {
                    let (mut mp, mut mg, mut pp, mut gg, mut pg) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, &ky) in wy.iter().enumerate() {
                        for (dx, &kx) in wx.iter().enumerate() {
                            let k = ky * kx;
                            let p = SCALE * pred.at(t, c, y0 + dy, x0 + dx) as f64;
                            let g = SCALE * truth.at(t, c, y0 + dy, x0 + dx) as f64;
                            mp += k * p;
                            mg += k * g;
                            pp += k * p * p;
                            gg += k * g * g;
                            pg += k * p * g;
                        }
                    }
                    let vp = pp - mp * mp;
                    let vg = gg - mg * mg;
                    let cov = pg - mp * mg;
                    total += ((2.0 * mp * mg + c1) * (2.0 * cov + c2)) / ((mp * mp + mg * mg + c1) * (vp + vg + c2));
                }
            }
        }
    }
    Ok(total / (n * pred.channels) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel_mask(h: usize, w: usize) -> Clip {
        let mut m = Clip::filled(1, 1, h, w, 1.0);
        m.data[0] = 0.0;
        m
    }

    #[test]
    fn identity() {
        let mut rng = crate::rng::SplitMix64::new(2);
        let a = Clip::new(1, 3, 8, 8, (0..192).map(|_| rng.next_f64() as f32).collect()).unwrap();
        let m = single_pixel_mask(8, 8);
        assert_eq!(mse_crop(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(psnr_crop(&a, &a, &m).unwrap(), PSNR_CAP);
        assert!((ssim_crop(&a, &a, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_level_error() {
        let a = Clip::filled(1, 1, 4, 4, 0.0);
        let mut b = a.clone();
        b.data[0] = 1.0 / 255.0;
        let mse = mse_crop(&b, &a, &single_pixel_mask(4, 4)).unwrap();
        // 1/255 is not representable in f32; the residual is storage rounding.
        assert!((mse - 1.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_closed_form() {
        // A uniform error of 25.5 levels gives MSE 650.25 and 20 dB.
        let a = Clip::filled(1, 1, 4, 4, 0.0);
        let b = Clip::filled(1, 1, 4, 4, 0.1);
        let m = single_pixel_mask(4, 4);
        assert!((mse_crop(&b, &a, &m).unwrap() - 650.25).abs() < 1e-3);
        assert!((psnr_crop(&b, &a, &m).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn constant_offsets_lower_ssim() {
        let a = Clip::filled(1, 1, 8, 8, 0.2);
        let b = Clip::filled(1, 1, 8, 8, 0.6);
        assert!(ssim_crop(&a, &b, &single_pixel_mask(8, 8)).unwrap() < 1.0);
    }

    #[test]
    fn no_corrupted_pixels_is_a_contract_error() {
        let a = Clip::filled(1, 1, 4, 4, 0.0);
        let m = Clip::filled(1, 1, 4, 4, 1.0);
        assert!(matches!(mse_crop(&a, &a, &m), Err(Error::Contract(_))));
        assert!(matches!(ssim_crop(&a, &a, &m), Err(Error::Contract(_))));
    }
}
