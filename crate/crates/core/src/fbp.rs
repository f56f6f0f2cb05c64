//! Fan-beam filtered back-projection for a flat, equispaced detector.
//!
//! Each view is rescaled to a virtual detector through the rotation axis,
//! cosine-weighted, ramp-filtered by FFT convolution with the band-limited
//! Ram-Lak kernel, and back-projected with `1/U^2` distance weighting. The
//! sum over views is scaled by `pi / n_views`, i.e. the views are treated as
//! an even sampling of a full turn.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{check_len, Error, Result};
use crate::geometry::{AngleSet, ScanGeometry};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct FbpConfig {
    /// Fraction of the Nyquist band kept by the ramp filter, in `(0, 1]`.
    pub cutoff: f64,
    pub apply_fan_weighting: bool,
}

impl Default for FbpConfig {
    fn default() -> Self {
        FbpConfig { cutoff: 1.0, apply_fan_weighting: true }
    }
}

impl FbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff <= 1.0) {
            return Err(Error::Config(format!("ramp cutoff {} outside (0, 1]", self.cutoff)));
        }
        Ok(())
    }
}

/// Unclamped FBP reconstruction of a `views x bins` sinogram.
pub fn fbp_reconstruct(
    geometry: &ScanGeometry,
    angles: &AngleSet,
    y: &[f64],
    cfg: &FbpConfig,
) -> Result<Image> {
    cfg.validate()?;
    let bins = geometry.detector_bins();
    let views = angles.n_views();
    if views == 0 {
        return Err(Error::AngleSet("FBP needs at least one view".into()));
    }
    check_len(views * bins, y.len())?;

    let d = geometry.source_to_center();
    let mag = d / geometry.source_to_detector();
    let tau = geometry.detector_spacing() * mag;
    let virtual_offset = |b: usize| geometry.bin_offset(b) * mag;

    let filter = RampFilter::new(bins, tau, cfg.cutoff);
    let mut filtered = vec![0.0; y.len()];
    let mut weighted = vec![0.0; bins];
    for v in 0..views {
        for (b, w) in weighted.iter_mut().enumerate() {
            let p = virtual_offset(b);
            let cosine = if cfg.apply_fan_weighting { d / (d * d + p * p).sqrt() } else { 1.0 };
            *w = y[v * bins + b] * cosine;
        }
        filter.apply(&weighted, &mut filtered[v * bins..(v + 1) * bins]);
    }

    let side = geometry.image_side();
    let half = (side as f64 - 1.0) / 2.0;
    let centre_bin = (bins as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; side * side];
    for (v, &a) in angles.indices().iter().enumerate() {
        let (sin, cos) = geometry.angle(a).sin_cos();
        let q = &filtered[v * bins..(v + 1) * bins];
        for row in 0..side {
            let py = half - row as f64;
            for col in 0..side {
                let px = col as f64 - half;
                // depth along the central ray (towards the source) and lateral offset
                let s = px * cos + py * sin;
                let t = -px * sin + py * cos;
                let (u_sq, p) = if cfg.apply_fan_weighting {
                    let u = (d - s) / d;
                    (u * u, t / u)
                } else {
                    (1.0, t)
                };
                let pos = p / tau + centre_bin;
                out[row * side + col] += interp(q, pos) / u_sq;
            }
        }
    }
    let scale = PI / views as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    Image::square(side, out)
}

fn interp(q: &[f64], pos: f64) -> f64 {
    if pos < 0.0 || pos > (q.len() - 1) as f64 {
        return 0.0;
    }
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < q.len() {
        q[i] * (1.0 - f) + q[i + 1] * f
    } else {
        q[i]
    }
}

/// Linear convolution with the discrete Ram-Lak kernel, `tau * (p * h)`,
/// done in the frequency domain on a zero-padded buffer.
pub(crate) struct RampFilter {
    bins: usize,
    padded: usize,
    response: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RampFilter {
    pub(crate) fn new(bins: usize, tau: f64, cutoff: f64) -> Self {
        let padded = (2 * bins).next_power_of_two().max(2);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(padded);
        let ifft = planner.plan_fft_inverse(padded);

        let mut kernel = vec![Complex::new(0.0, 0.0); padded];
        for (i, k) in kernel.iter_mut().enumerate() {
            let n = if i <= padded / 2 { i as i64 } else { i as i64 - padded as i64 };
            *k = Complex::new(tau * ram_lak(n, tau), 0.0);
        }
        fft.process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let f = i.min(padded - i) as f64 / padded as f64;
                if f <= cutoff * 0.5 + 1e-12 {
                    k.re
                } else {
                    0.0
                }
            })
            .collect();
        RampFilter { bins, padded, response, fft, ifft }
    }

    pub(crate) fn apply(&self, input: &[f64], out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded];
        for (b, &v) in buf.iter_mut().zip(input) {
            b.re = v;
        }
        self.fft.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.ifft.process(&mut buf);
        let norm = 1.0 / self.padded as f64;
        for (o, b) in out.iter_mut().zip(&buf[..self.bins]) {
            *o = b.re * norm;
        }
    }
}

/// Band-limited ramp kernel sampled at spacing `tau`.
fn ram_lak(n: i64, tau: f64) -> f64 {
    if n == 0 {
        1.0 / (4.0 * tau * tau)
    } else if n % 2 == 0 {
        0.0
    } else {
        -1.0 / ((n * n) as f64 * PI * PI * tau * tau)
    }
}
