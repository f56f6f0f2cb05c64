//! Measurement-resampling uncertainty.
//!
//! For seed `s` the harness draws a random subset of view angles, simulates a
//! noisy sinogram, and reconstructs. The pixel-wise spread of the resulting
//! images is the uncertainty map; its mean over all pixels is the score.
//! Targets the prior was not trained on tend to produce reconstructions that
//! disagree more from one measurement subset to the next.
//!
//! Seed splitting: angles for seed `s` use `base * 10007 + s`, noise uses
//! `base * 10009 + s` (wrapping `u64` arithmetic). In fixed-pool mode the
//! shared pool uses stream index [`POOL_STREAM`].

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_len, Error, Result};
use crate::fbp::{fbp_reconstruct, FbpConfig};
use crate::geometry::{build_operator, AngleSet, ScanGeometry, SparseOperator};
use crate::image::Image;
use crate::metrics::{clamp01, psnr, ssim, MetricConfig};
use crate::solver::{reconstruct, Proximal, SolveConfig};

pub const POOL_STREAM: u64 = u32::MAX as u64;

pub fn angle_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(10007).wrapping_add(stream)
}

pub fn noise_seed(base: u64, stream: u64) -> u64 {
    base.wrapping_mul(10009).wrapping_add(stream)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleMode {
    /// Every seed is a new scan: new angles, new noise.
    FreshAcquisition,
    /// One scan of `pool_views` angles; every seed reconstructs from a random
    /// `n_views`-subset of its views.
    FixedPoolSubsets { pool_views: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct UqProtocol {
    pub n_views: usize,
    pub n_seeds: usize,
    pub noise_sigma: f64,
    pub base_seed: u64,
    pub solver: SolveConfig,
    pub resample: ResampleMode,
    pub metrics: MetricConfig,
}

impl UqProtocol {
    pub fn new(n_views: usize) -> Self {
        UqProtocol {
            n_views,
            n_seeds: 10,
            noise_sigma: 2.0,
            base_seed: 0,
            solver: SolveConfig::default(),
            resample: ResampleMode::FreshAcquisition,
            metrics: MetricConfig::default(),
        }
    }

    pub fn validate(&self, geometry: &ScanGeometry) -> Result<()> {
        if self.n_seeds < 2 {
            return Err(Error::Config("at least two seeds are needed for a spread".into()));
        }
        if self.n_views == 0 || self.n_views > geometry.candidate_angles() {
            return Err(Error::Config(format!(
                "n_views {} outside 1..={}",
                self.n_views,
                geometry.candidate_angles()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise sigma must be finite and non-negative".into()));
        }
        if let ResampleMode::FixedPoolSubsets { pool_views } = self.resample {
            if pool_views < self.n_views || pool_views > geometry.candidate_angles() {
                return Err(Error::Config(format!(
                    "pool of {pool_views} views cannot supply {}-view subsets",
                    self.n_views
                )));
            }
        }
        self.solver.validate()?;
        self.metrics.validate()
    }
}

/// Noisy measurements `y = A x + sigma * eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub values: Vec<f64>,
    pub sigma: f64,
    pub noise_seed: u64,
}

/// Uniform sample of `n_views` distinct candidate angles, in ascending order.
pub fn draw_angle_subset(geometry: &ScanGeometry, n_views: usize, seed: u64) -> Result<AngleSet> {
    let candidates = geometry.candidate_angles();
    if n_views == 0 || n_views > candidates {
        return Err(Error::AngleSet(format!("cannot draw {n_views} of {candidates} angles")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, candidates, n_views).into_vec();
    picked.sort_unstable();
    AngleSet::new(picked, geometry)
}

pub fn simulate_measurement(op: &SparseOperator, x_true: &Image, sigma: f64, seed: u64) -> Result<Sinogram> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    let mut values = op.forward(x_true)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut values {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * e;
        }
    }
    Ok(Sinogram { values, sigma, noise_seed: seed })
}

/// One simulated scan ready for reconstruction.
#[derive(Clone, Debug)]
pub struct Acquisition {
    pub angles: AngleSet,
    pub operator: SparseOperator,
    pub sinogram: Sinogram,
}

/// Builds seed `seed_index`'s scan under `protocol`.
pub fn acquire(geometry: &ScanGeometry, x_true: &Image, protocol: &UqProtocol, seed_index: usize) -> Result<Acquisition> {
    let s = seed_index as u64;
    let base = protocol.base_seed;
    match protocol.resample {
        ResampleMode::FreshAcquisition => {
            let angles = draw_angle_subset(geometry, protocol.n_views, angle_seed(base, s))?;
            let operator = build_operator(geometry, &angles)?;
            let sinogram = simulate_measurement(&operator, x_true, protocol.noise_sigma, noise_seed(base, s))?;
            Ok(Acquisition { angles, operator, sinogram })
        }
        ResampleMode::FixedPoolSubsets { pool_views } => {
            let pool = draw_angle_subset(geometry, pool_views, angle_seed(base, POOL_STREAM))?;
            let pool_op = build_operator(geometry, &pool)?;
            let pool_y =
                simulate_measurement(&pool_op, x_true, protocol.noise_sigma, noise_seed(base, POOL_STREAM))?;
            let mut rng = ChaCha8Rng::seed_from_u64(angle_seed(base, s));
            let mut views = index::sample(&mut rng, pool_views, protocol.n_views).into_vec();
            views.sort_unstable();
            let angles = AngleSet::new(views.iter().map(|&v| pool.indices()[v]).collect(), geometry)?;
            let bins = geometry.detector_bins();
            let values = views.iter().flat_map(|&v| pool_y.values[v * bins..(v + 1) * bins].iter().copied()).collect();
            let operator = build_operator(geometry, &angles)?;
            Ok(Acquisition {
                angles,
                operator,
                sinogram: Sinogram { values, sigma: pool_y.sigma, noise_seed: pool_y.noise_seed },
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: usize,
    pub angles: AngleSet,
    pub reconstruction: Image,
    pub iterations: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyReport {
    pub seeds: Vec<SeedResult>,
    pub mean: Image,
    /// Population standard deviation per pixel.
    pub std: Image,
    /// Mean of `std` over all pixels.
    pub score: f64,
}

/// Pixel-wise mean and population standard deviation, reduced in slice
/// order. Deviations are taken relative to the first image so that identical
/// inputs give exactly zero spread.
pub fn pixel_stats(images: &[Image]) -> Result<(Image, Image)> {
    let first = images.first().ok_or_else(|| Error::Config("no images to reduce".into()))?;
    let n = images.len() as f64;
    let len = first.len();
    for img in images {
        check_len(len, img.len())?;
    }
    let mut mean = vec![0.0; len];
    let mut std = vec![0.0; len];
    for p in 0..len {
        let x0 = first.as_slice()[p];
        let shift = images.iter().map(|im| im.as_slice()[p] - x0).sum::<f64>() / n;
        let var = images
            .iter()
            .map(|im| {
                let d = im.as_slice()[p] - x0 - shift;
                d * d
            })
            .sum::<f64>()
            / n;
        mean[p] = x0 + shift;
        std[p] = var.sqrt();
    }
    Ok((first.with_data(mean)?, first.with_data(std)?))
}

pub fn report_from_seeds(seeds: Vec<SeedResult>) -> Result<UncertaintyReport> {
    let recons: Vec<Image> = seeds.iter().map(|s| s.reconstruction.clone()).collect();
    let (mean, std) = pixel_stats(&recons)?;
    let score = std.mean();
    Ok(UncertaintyReport { seeds, mean, std, score })
}

/// Reconstructs seed `seed_index` with `prior` and scores it against `x_true`.
pub fn run_seed(
    x_true: &Image,
    geometry: &ScanGeometry,
    protocol: &UqProtocol,
    prior: &dyn Proximal,
    seed_index: usize,
) -> Result<SeedResult> {
    let acq = acquire(geometry, x_true, protocol, seed_index)?;
    let (reconstruction, trace) = reconstruct(&acq.operator, &acq.sinogram.values, prior, &protocol.solver)?;
    let clamped = clamp01(&reconstruction);
    Ok(SeedResult {
        seed: seed_index,
        angles: acq.angles,
        psnr: psnr(&clamped, x_true, &protocol.metrics)?,
        ssim: ssim(&clamped, x_true, &protocol.metrics)?,
        reconstruction,
        iterations: trace.iterations,
    })
}

/// The FBP baseline on the same acquisition as [`run_seed`]; the stored
/// reconstruction is clamped to `[0, 1]`.
pub fn run_fbp_seed(
    x_true: &Image,
    geometry: &ScanGeometry,
    protocol: &UqProtocol,
    fbp: &FbpConfig,
    seed_index: usize,
) -> Result<SeedResult> {
    let acq = acquire(geometry, x_true, protocol, seed_index)?;
    let reconstruction = clamp01(&fbp_reconstruct(geometry, &acq.angles, &acq.sinogram.values, fbp)?);
    Ok(SeedResult {
        seed: seed_index,
        angles: acq.angles,
        psnr: psnr(&reconstruction, x_true, &protocol.metrics)?,
        ssim: ssim(&reconstruction, x_true, &protocol.metrics)?,
        reconstruction,
        iterations: 0,
    })
}

pub fn run_uq(
    x_true: &Image,
    geometry: &ScanGeometry,
    protocol: &UqProtocol,
    prior: &dyn Proximal,
) -> Result<UncertaintyReport> {
    protocol.validate(geometry)?;
    check_len(geometry.n_pixels(), x_true.len())?;
    let seeds = (0..protocol.n_seeds)
        .map(|s| run_seed(x_true, geometry, protocol, prior, s).map_err(|e| Error::Seed { seed: s, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    report_from_seeds(seeds)
}

pub fn ood_flag(report: &UncertaintyReport, threshold: f64) -> bool {
    report.score > threshold
}
