//! Fan-beam acquisition geometry and the materialized projector.
//!
//! The image occupies a square of unit pixels centred on the rotation axis.
//! Pixel `(row, col)` has its centre at `x = col - (side-1)/2`,
//! `y = (side-1)/2 - row`. For candidate angle index `k` the source sits at
//! `source_to_center * (cos b, sin b)` with `b = 2 pi k / candidate_angles`, and
//! the flat detector is perpendicular to the central ray at distance
//! `center_to_detector` on the far side of the axis. Detector bin `j` is centred
//! at offset `(j - (bins-1)/2) * detector_spacing` along `(-sin b, cos b)`.
//!
//! Rays are discretized with Joseph's method: the ray is sampled once per
//! pixel column (or row, whichever axis it is more aligned with) and each
//! sample is split linearly between the two nearest pixels.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::image::{dot, norm, Image};

pub const DEFAULT_CANDIDATE_ANGLES: usize = 360;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanGeometry {
    image_side: usize,
    detector_bins: usize,
    source_to_center: f64,
    center_to_detector: f64,
    detector_spacing: f64,
    candidate_angles: usize,
}

impl ScanGeometry {
    pub fn new(
        image_side: usize,
        detector_bins: usize,
        source_to_center: f64,
        center_to_detector: f64,
        detector_spacing: f64,
        candidate_angles: usize,
    ) -> Result<Self> {
        if image_side == 0 || detector_bins == 0 || candidate_angles == 0 {
            return Err(Error::Geometry(
                "image_side, detector_bins and candidate_angles must be positive".into(),
            ));
        }
        for (name, v) in [
            ("source_to_center", source_to_center),
            ("center_to_detector", center_to_detector),
            ("detector_spacing", detector_spacing),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Geometry(format!("{name} must be finite and positive, got {v}")));
            }
        }
        let radius = half_diagonal(image_side);
        if source_to_center <= radius {
            return Err(Error::Geometry(format!(
                "source at distance {source_to_center} lies inside the image circle of radius {radius}"
            )));
        }
        let required = Self::min_covering_spacing(
            image_side,
            detector_bins,
            source_to_center,
            center_to_detector,
        );
        if detector_spacing < required * (1.0 - 1e-12) {
            return Err(Error::Geometry(format!(
                "detector ({detector_bins} bins x {detector_spacing}) does not cover the image \
                 diagonal; spacing must be at least {required}"
            )));
        }
        Ok(ScanGeometry {
            image_side,
            detector_bins,
            source_to_center,
            center_to_detector,
            detector_spacing,
            candidate_angles,
        })
    }

    /// Source and detector both `2 * image_side` from the axis, spacing just
    /// wide enough for the fan to contain the image's circumscribed circle.
    pub fn with_defaults(image_side: usize, detector_bins: usize) -> Result<Self> {
        let d = 2.0 * image_side as f64;
        let spacing = Self::min_covering_spacing(image_side, detector_bins, d, d);
        Self::new(image_side, detector_bins, d, d, spacing, DEFAULT_CANDIDATE_ANGLES)
    }

    /// 28x28 images, 22-bin detector.
    pub fn mnist() -> Self {
        Self::with_defaults(28, 22).expect("default geometry is valid")
    }

    /// Smallest bin pitch for which the fan subtends the circle through the
    /// image corners.
    pub fn min_covering_spacing(
        image_side: usize,
        detector_bins: usize,
        source_to_center: f64,
        center_to_detector: f64,
    ) -> f64 {
        let radius = half_diagonal(image_side);
        let half_fan = (radius / source_to_center).min(1.0).asin();
        let sdd = source_to_center + center_to_detector;
        2.0 * sdd * half_fan.tan() / detector_bins as f64
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn detector_bins(&self) -> usize {
        self.detector_bins
    }

    pub fn source_to_center(&self) -> f64 {
        self.source_to_center
    }

    pub fn center_to_detector(&self) -> f64 {
        self.center_to_detector
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn candidate_angles(&self) -> usize {
        self.candidate_angles
    }

    pub fn n_pixels(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_center + self.center_to_detector
    }

    /// Angle in radians of candidate `index`.
    pub fn angle(&self, index: usize) -> f64 {
        2.0 * PI * index as f64 / self.candidate_angles as f64
    }

    /// Offset of bin `bin` along the detector, measured from its centre.
    pub fn bin_offset(&self, bin: usize) -> f64 {
        (bin as f64 - (self.detector_bins as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Source position and detector point for one ray.
    fn ray(&self, angle_index: usize, bin: usize) -> ([f64; 2], [f64; 2]) {
        let b = self.angle(angle_index);
        let (sin, cos) = b.sin_cos();
        let src = [self.source_to_center * cos, self.source_to_center * sin];
        let u = self.bin_offset(bin);
        let det = [
            -self.center_to_detector * cos - u * sin,
            -self.center_to_detector * sin + u * cos,
        ];
        (src, det)
    }
}

fn half_diagonal(side: usize) -> f64 {
    side as f64 * std::f64::consts::SQRT_2 / 2.0
}

/// Ordered, distinct indices into the candidate angle grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AngleSet {
    indices: Vec<usize>,
}

impl AngleSet {
    pub fn new(indices: Vec<usize>, geometry: &ScanGeometry) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::AngleSet("at least one view is required".into()));
        }
        if indices.len() > geometry.candidate_angles {
            return Err(Error::AngleSet(format!(
                "{} views requested but only {} candidates exist",
                indices.len(),
                geometry.candidate_angles
            )));
        }
        let mut seen = vec![false; geometry.candidate_angles];
        for &i in &indices {
            if i >= geometry.candidate_angles {
                return Err(Error::AngleSet(format!(
                    "angle index {i} outside candidate grid of {}",
                    geometry.candidate_angles
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::AngleSet(format!("angle index {i} repeated")));
            }
        }
        Ok(AngleSet { indices })
    }

    /// Every candidate angle in grid order.
    pub fn full(geometry: &ScanGeometry) -> Self {
        AngleSet { indices: (0..geometry.candidate_angles).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn n_views(&self) -> usize {
        self.indices.len()
    }
}

/// Row-compressed projector `A` with `m = views * bins` rows and one column
/// per pixel. Weights are strictly positive.
#[derive(Debug)]
pub struct SparseOperator {
    rows: usize,
    image_shape: (usize, usize),
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    acquisition: Option<(ScanGeometry, AngleSet)>,
    norm_sq: OnceLock<f64>,
}

impl Clone for SparseOperator {
    fn clone(&self) -> Self {
        let norm_sq = OnceLock::new();
        if let Some(&v) = self.norm_sq.get() {
            let _ = norm_sq.set(v);
        }
        SparseOperator {
            rows: self.rows,
            image_shape: self.image_shape,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.clone(),
            acquisition: self.acquisition.clone(),
            norm_sq,
        }
    }
}

impl PartialEq for SparseOperator {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows
            && self.image_shape == other.image_shape
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
            && self.values.iter().map(|v| v.to_bits()).eq(other.values.iter().map(|v| v.to_bits()))
    }
}

/// Ray-traced fan-beam projector for the given views. Row `r` is view
/// `r / bins`, bin `r % bins`.
pub fn build_operator(geometry: &ScanGeometry, angles: &AngleSet) -> Result<SparseOperator> {
    // Re-validate: the pair may have been assembled from different geometries.
    let geometry = ScanGeometry::new(
        geometry.image_side,
        geometry.detector_bins,
        geometry.source_to_center,
        geometry.center_to_detector,
        geometry.detector_spacing,
        geometry.candidate_angles,
    )?;
    let angles = AngleSet::new(angles.indices.clone(), &geometry)?;

    let side = geometry.image_side;
    let bins = geometry.detector_bins;
    let rows = angles.n_views() * bins;
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);
    let mut scratch: Vec<(usize, f64)> = Vec::with_capacity(4 * side);
    for &a in angles.indices() {
        for bin in 0..bins {
            scratch.clear();
            let (src, det) = geometry.ray(a, bin);
            joseph_ray(side, src, det, &mut scratch);
            scratch.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, w) in &scratch {
                if last == Some(c) {
                    *values.last_mut().unwrap() += w;
                } else {
                    col_idx.push(c);
                    values.push(w);
                    last = Some(c);
                }
            }
            // drop entries that interpolation left at exactly zero
            let start = *row_ptr.last().unwrap();
            let mut keep = start;
            for k in start..values.len() {
                if values[k] > 0.0 {
                    values[keep] = values[k];
                    col_idx[keep] = col_idx[k];
                    keep += 1;
                }
            }
            values.truncate(keep);
            col_idx.truncate(keep);
            row_ptr.push(keep);
        }
    }
    Ok(SparseOperator {
        rows,
        image_shape: (side, side),
        row_ptr,
        col_idx,
        values,
        acquisition: Some((geometry, angles)),
        norm_sq: OnceLock::new(),
    })
}

/// Joseph interpolation of the line from `src` to `det` through a `side` x
/// `side` unit-pixel grid. Pushes `(pixel, weight)` pairs.
fn joseph_ray(side: usize, src: [f64; 2], det: [f64; 2], out: &mut Vec<(usize, f64)>) {
    let dx = det[0] - src[0];
    let dy = det[1] - src[1];
    let len = (dx * dx + dy * dy).sqrt();
    let (ux, uy) = (dx / len, dy / len);
    let half = (side as f64 - 1.0) / 2.0;
    let n = side as isize;

    if ux.abs() >= uy.abs() {
        let step = 1.0 / ux.abs();
        for col in 0..side {
            let x = col as f64 - half;
            let t = (x - src[0]) / ux;
            let y = src[1] + t * uy;
            let fr = half - y;
            let r0 = fr.floor();
            let frac = fr - r0;
            let r0 = r0 as isize;
            if (0..n).contains(&r0) {
                out.push((r0 as usize * side + col, (1.0 - frac) * step));
            }
            if (0..n).contains(&(r0 + 1)) {
                out.push(((r0 + 1) as usize * side + col, frac * step));
            }
        }
    } else {
        let step = 1.0 / uy.abs();
        for row in 0..side {
            let y = half - row as f64;
            let t = (y - src[1]) / uy;
            let x = src[0] + t * ux;
            let fc = x + half;
            let c0 = fc.floor();
            let frac = fc - c0;
            let c0 = c0 as isize;
            if (0..n).contains(&c0) {
                out.push((row * side + c0 as usize, (1.0 - frac) * step));
            }
            if (0..n).contains(&(c0 + 1)) {
                out.push((row * side + (c0 + 1) as usize, frac * step));
            }
        }
    }
}

impl SparseOperator {
    /// Operator from explicit `(row, pixel, weight)` triples, for tests and
    /// non-CT uses. Weights must be finite and positive; duplicates add.
    pub fn from_triplets(
        rows: usize,
        image_shape: (usize, usize),
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let cols = image_shape.0 * image_shape.1;
        let mut sorted = triplets.to_vec();
        for &(r, c, w) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::Config(format!(
                    "triplet ({r}, {c}) outside {rows}x{cols} operator"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config(format!("weight {w} at ({r}, {c}) is not positive")));
            }
        }
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, w) in &sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += w;
            } else {
                col_idx.push(c);
                values.push(w);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(SparseOperator {
            rows,
            image_shape,
            row_ptr,
            col_idx,
            values,
            acquisition: None,
            norm_sq: OnceLock::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Geometry and views this operator was traced for, if any.
    pub fn acquisition(&self) -> Option<(&ScanGeometry, &AngleSet)> {
        self.acquisition.as_ref().map(|(g, a)| (g, a))
    }

    /// Stored `(pixel, weight)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, w)| (r, c, w)))
    }

    /// `out = A x` on raw buffers.
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(self.cols(), x.len())?;
        check_len(self.rows, out.len())?;
        for (r, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.col_idx[span.clone()]
                .iter()
                .zip(&self.values[span])
                .map(|(&c, &w)| w * x[c])
                .sum();
        }
        Ok(())
    }

    /// `out = A^T u` on raw buffers.
    pub fn adjoint_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        check_len(self.rows, u.len())?;
        check_len(self.cols(), out.len())?;
        out.fill(0.0);
        for (r, &ur) in u.iter().enumerate() {
            if ur == 0.0 {
                continue;
            }
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &w) in self.col_idx[span.clone()].iter().zip(&self.values[span]) {
                out[c] += w * ur;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &Image) -> Result<Vec<f64>> {
        check_len(self.cols(), x.len())?;
        let mut out = vec![0.0; self.rows];
        self.apply_into(x.as_slice(), &mut out)?;
        Ok(out)
    }

    pub fn adjoint(&self, u: &[f64]) -> Result<Image> {
        let mut out = vec![0.0; self.cols()];
        self.adjoint_into(u, &mut out)?;
        Image::new(self.image_shape.0, self.image_shape.1, out)
    }

    /// `||A||^2`, computed once by [`Self::power_iteration`] and cached.
    pub fn operator_norm_sq(&self) -> Result<f64> {
        if let Some(&v) = self.norm_sq.get() {
            return Ok(v);
        }
        let v = self.power_iteration(1e-10, 20_000)?;
        Ok(*self.norm_sq.get_or_init(|| v))
    }

    /// Largest eigenvalue of `A^T A` by power iteration with a Rayleigh
    /// quotient estimate. Stops once successive estimates agree to `rel_tol`.
    pub fn power_iteration(&self, rel_tol: f64, max_iters: usize) -> Result<f64> {
        let n = self.cols();
        if n == 0 || self.nnz() == 0 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0fa7);
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut av = vec![0.0; self.rows];
        let mut w = vec![0.0; n];
        let mut estimate = 0.0;
        for it in 0..max_iters {
            self.apply_into(&v, &mut av)?;
            let lambda = dot(&av, &av);
            self.adjoint_into(&av, &mut w)?;
            let nw = norm(&w);
            if nw == 0.0 {
                return Ok(0.0);
            }
            if it > 0 && (lambda - estimate).abs() <= rel_tol * lambda {
                return Ok(lambda);
            }
            estimate = lambda;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
        }
        Err(Error::NoConvergence { iterations: max_iters, estimate })
    }
}
