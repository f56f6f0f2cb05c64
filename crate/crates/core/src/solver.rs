//! Proximal gradient reconstruction:
//!
//! ```text
//! v_k     = x_k - eta * A^T (A x_k - y)
//! x_{k+1} = prox(v_k)
//! ```
//!
//! with a fixed step `eta = step_scale / ||A||^2`.

use crate::error::{check_len, Error, Result};
use crate::fbp::{fbp_reconstruct, FbpConfig};
use crate::image::{norm, Image};

/// Image-to-image map applied after every gradient step.
pub trait Proximal: Send + Sync {
    fn apply(&self, v: &Image) -> Result<Image>;
}

/// `prox(v) = v`; turns the solver into Landweber iteration.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Proximal for Identity {
    fn apply(&self, v: &Image) -> Result<Image> {
        Ok(v.clone())
    }
}

/// Ignores its input.
#[derive(Clone, Debug)]
pub struct Constant(pub Image);

impl Proximal for Constant {
    fn apply(&self, v: &Image) -> Result<Image> {
        check_len(v.len(), self.0.len())?;
        Ok(self.0.clone())
    }
}

impl<P: Proximal + ?Sized> Proximal for &P {
    fn apply(&self, v: &Image) -> Result<Image> {
        (**self).apply(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Zeros,
    /// Clamped FBP of the measurements; needs an operator that knows its geometry.
    Fbp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveConfig {
    pub max_iters: usize,
    pub step_scale: f64,
    pub tol: f64,
    pub init: InitMode,
    pub clamp_iterates: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { max_iters: 200, step_scale: 1.0, tol: 1e-4, init: InitMode::Fbp, clamp_iterates: true }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.step_scale > 0.0 && self.step_scale < 2.0) {
            return Err(Error::Config(format!("step_scale {} outside (0, 2)", self.step_scale)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveTrace {
    /// `||A x_k - y||^2` for `k = 0..=iterations`.
    pub fidelity: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub step: f64,
}

pub fn reconstruct(
    op: &crate::geometry::SparseOperator,
    y: &[f64],
    prox: &dyn Proximal,
    cfg: &SolveConfig,
) -> Result<(Image, SolveTrace)> {
    cfg.validate()?;
    check_len(op.rows(), y.len())?;
    let (h, w) = op.image_shape();
    let norm_sq = op.operator_norm_sq()?;
    if norm_sq == 0.0 {
        return Err(Error::Config("operator is identically zero".into()));
    }
    let step = cfg.step_scale / norm_sq;

    let mut x = match cfg.init {
        InitMode::Zeros => Image::zeros(h, w),
        InitMode::Fbp => {
            let (geometry, angles) = op.acquisition().ok_or_else(|| {
                Error::Config("FBP initialization needs an operator built from a geometry".into())
            })?;
            crate::metrics::clamp01(&fbp_reconstruct(geometry, angles, y, &FbpConfig::default())?)
        }
    };

    let mut residual = vec![0.0; op.rows()];
    let mut grad = vec![0.0; op.cols()];
    let mut trace = SolveTrace { step, ..SolveTrace::default() };

    let fidelity = |x: &Image, residual: &mut [f64]| -> Result<f64> {
        op.apply_into(x.as_slice(), residual)?;
        let mut f = 0.0;
        for (r, &yi) in residual.iter_mut().zip(y) {
            *r -= yi;
            f += *r * *r;
        }
        Ok(f)
    };

    trace.fidelity.push(fidelity(&x, &mut residual)?);
    for k in 0..cfg.max_iters {
        op.adjoint_into(&residual, &mut grad)?;
        let mut v = x.clone();
        for (vi, gi) in v.as_mut_slice().iter_mut().zip(&grad) {
            *vi -= step * gi;
        }
        let mut next = prox.apply(&v)?;
        check_len(x.len(), next.len())?;
        if cfg.clamp_iterates {
            next.as_mut_slice().iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        }
        if !next.is_finite() {
            return Err(Error::NonFinite { iteration: k + 1, trace: trace.fidelity });
        }
        let change: Vec<f64> = next.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a - b).collect();
        let rel = norm(&change) / x.norm().max(1e-12);
        x = next;
        trace.fidelity.push(fidelity(&x, &mut residual)?);
        trace.iterations = k + 1;
        if rel < cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_operator, AngleSet, ScanGeometry};

    fn blob() -> Image {
        Image::from_fn(28, 28, |r, c| {
            let (y, x) = (r as f64 - 12.0, c as f64 - 15.0);
            (-(x * x + y * y) / 30.0).exp()
        })
    }

    #[test]
    fn landweber_converges_on_dense_noiseless_data() {
        let g = ScanGeometry::mnist();
        let op = build_operator(&g, &AngleSet::full(&g)).unwrap();
        let y = op.forward(&blob()).unwrap();
        let cfg = SolveConfig { init: InitMode::Zeros, clamp_iterates: false, tol: 0.0, ..SolveConfig::default() };
        let (_, trace) = reconstruct(&op, &y, &Identity, &cfg).unwrap();
        assert_eq!(trace.iterations, 200);
        for pair in trace.fidelity.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
        let first = trace.fidelity[0];
        let last = *trace.fidelity.last().unwrap();
        assert!(last <= 1e-3 * first, "{last} vs {first}");
    }

    #[test]
    fn constant_prox_dominates() {
        let g = ScanGeometry::mnist();
        let op = build_operator(&g, &AngleSet::new(vec![0, 100, 200], &g).unwrap()).unwrap();
        let c = Image::from_fn(28, 28, |r, _| r as f64 / 40.0);
        let y: Vec<f64> = (0..op.rows()).map(|i| i as f64).collect();
        let cfg = SolveConfig { max_iters: 1, ..SolveConfig::default() };
        let (x, trace) = reconstruct(&op, &y, &Constant(c.clone()), &cfg).unwrap();
        assert_eq!(x, c);
        assert_eq!(trace.iterations, 1);
    }

    #[test]
    fn stops_on_tolerance() {
        let g = ScanGeometry::mnist();
        let op = build_operator(&g, &AngleSet::new(vec![0, 100], &g).unwrap()).unwrap();
        let c = Image::from_fn(28, 28, |_, _| 0.5);
        let y = vec![0.0; op.rows()];
        let (_, trace) = reconstruct(&op, &y, &Constant(c), &SolveConfig::default()).unwrap();
        // x_1 = c, x_2 = c: no change on the second step
        assert!(trace.converged);
        assert_eq!(trace.iterations, 2);
    }

    struct Poison;
    impl Proximal for Poison {
        fn apply(&self, v: &Image) -> Result<Image> {
            Ok(v.map(|_| f64::NAN))
        }
    }

    #[test]
    fn nan_iterate_aborts_with_trace() {
        let g = ScanGeometry::mnist();
        let op = build_operator(&g, &AngleSet::new(vec![5], &g).unwrap()).unwrap();
        let y = vec![1.0; op.rows()];
        let cfg = SolveConfig { clamp_iterates: false, ..SolveConfig::default() };
        match reconstruct(&op, &y, &Poison, &cfg) {
            Err(Error::NonFinite { iteration, trace }) => {
                assert_eq!(iteration, 1);
                assert_eq!(trace.len(), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            SolveConfig { max_iters: 0, ..SolveConfig::default() },
            SolveConfig { step_scale: 2.0, ..SolveConfig::default() },
            SolveConfig { step_scale: 0.0, ..SolveConfig::default() },
            SolveConfig { tol: -1.0, ..SolveConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn fbp_init_requires_geometry() {
        let op = crate::geometry::SparseOperator::from_triplets(2, (1, 2), &[(0, 0, 1.0), (1, 1, 1.0)]).unwrap();
        assert!(reconstruct(&op, &[1.0, 1.0], &Identity, &SolveConfig::default()).is_err());
        let zeros = SolveConfig { init: InitMode::Zeros, ..SolveConfig::default() };
        assert!(reconstruct(&op, &[1.0, 1.0], &Identity, &zeros).is_ok());
    }
}
