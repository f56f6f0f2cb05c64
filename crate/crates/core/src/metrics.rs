//! PSNR / SSIM on images in `[0, data_range]`.

use crate::error::{check_len, Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    pub data_range: f64,
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricConfig {
    /// Gaussian 7x7 window with sigma 1.5: the usual 11x11 window covers
    /// too much of a 28x28 image.
    fn default() -> Self {
        MetricConfig { data_range: 1.0, window_size: 7, window_sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_range > 0.0) {
            return Err(Error::Config("data_range must be positive".into()));
        }
        if self.window_size % 2 == 0 {
            return Err(Error::Config("SSIM window size must be odd".into()));
        }
        if !(self.window_sigma > 0.0) {
            return Err(Error::Config("SSIM window sigma must be positive".into()));
        }
        Ok(())
    }
}

pub fn clamp01(x: &Image) -> Image {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Peak signal-to-noise ratio in dB. Identical images give `+inf`.
pub fn psnr(x: &Image, reference: &Image, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(x, reference)?;
    let mse = x
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (cfg.data_range * cfg.data_range / mse).log10())
}

/// Mean structural similarity over all positions where the Gaussian window
/// fits entirely inside the image. Population (biased) local moments.
pub fn ssim(x: &Image, reference: &Image, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_shapes(x, reference)?;
    let k = cfg.window_size;
    let (h, w) = (x.height(), x.width());
    if h < k || w < k {
        return Err(Error::Config(format!("{h}x{w} image is smaller than the {k}x{k} SSIM window")));
    }
    let window = gaussian_window(k, cfg.window_sigma);
    let c1 = (cfg.k1 * cfg.data_range).powi(2);
    let c2 = (cfg.k2 * cfg.data_range).powi(2);

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - k) {
        for c0 in 0..=(w - k) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = window[i * k + j];
                    let a = x.get(r0 + i, c0 + j);
                    let b = reference.get(r0 + i, c0 + j);
                    mx += wt * a;
                    my += wt * b;
                    mxx += wt * (a * a);
                    myy += wt * (b * b);
                    mxy += wt * (a * b);
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * (mx * my) + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mut w: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    check_len(a.height(), b.height())?;
    check_len(a.width(), b.width())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(28, 28, |_, _| rng.random_range(0.0..1.0))
    }

    /// Blocky 0/1 "stroke" image.
    fn binary_digit() -> Image {
        Image::from_fn(28, 28, |r, c| {
            let (y, x) = (r as f64 - 13.5, c as f64 - 13.5);
            let rr = (x * x / 36.0 + y * y / 100.0).sqrt();
            if (0.7..1.0).contains(&rr) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn clamp_behaviour() {
        let x = Image::new(1, 4, vec![-0.5, 0.25, 1.0, 1.5]).unwrap();
        let c = clamp01(&x);
        assert_eq!(c.as_slice(), &[0.0, 0.25, 1.0, 1.0]);
        assert_eq!(clamp01(&c), c);
    }

    #[test]
    fn psnr_identities() {
        let cfg = MetricConfig::default();
        let x = Image::from_fn(28, 28, |_, _| 0.2);
        let r = Image::from_fn(28, 28, |_, _| 0.1);
        assert_eq!(psnr(&x, &x, &cfg).unwrap(), f64::INFINITY);
        assert!((psnr(&x, &r, &cfg).unwrap() - 20.0).abs() < 1e-12);
        let far = Image::from_fn(28, 28, |_, _| 0.75);
        let near = Image::from_fn(28, 28, |_, _| 0.25);
        assert!((psnr(&far, &near, &cfg).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let cfg = MetricConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_image(&mut rng);
        let noise: Vec<f64> = (0..784).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2, 0.4] {
            let noisy = base.with_data(base.as_slice().iter().zip(&noise).map(|(a, n)| a + amp * n).collect()).unwrap();
            let p = psnr(&noisy, &base, &cfg).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identities() {
        let cfg = MetricConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = random_image(&mut rng);
            let b = random_image(&mut rng);
            assert_eq!(ssim(&a, &a, &cfg).unwrap(), 1.0);
            let ab = ssim(&a, &b, &cfg).unwrap();
            let ba = ssim(&b, &a, &cfg).unwrap();
            assert_eq!(ab, ba);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_low() {
        let cfg = MetricConfig::default();
        let x = binary_digit();
        let inv = x.map(|v| 1.0 - v);
        let s = ssim(&x, &inv, &cfg).unwrap();
        assert!(s < 0.2, "{s}");
    }

    #[test]
    fn ssim_rejects_small_images_and_even_windows() {
        let cfg = MetricConfig::default();
        let tiny = Image::zeros(5, 5);
        assert!(ssim(&tiny, &tiny, &cfg).is_err());
        let even = MetricConfig { window_size: 6, ..cfg };
        let x = Image::zeros(28, 28);
        assert!(ssim(&x, &x, &even).is_err());
        assert!(psnr(&x, &Image::zeros(28, 27), &MetricConfig::default()).is_err());
    }
}
