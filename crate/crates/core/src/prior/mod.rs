//! Input-convex scalar potential `psi(z)` and its gradient map
//! `f(z) = grad psi(z)`, used as a learned proximal operator.
//!
//! Architecture with hidden layers `l = 0..L`:
//!
//! ```text
//! p_0 = Wx_0 z + b_0
//! p_l = Wz_l h_{l-1} + Wx_l z + b_l        (Wz_l >= 0)
//! h_l = softplus_beta(p_l)
//! psi = wz_out . h_{L-1} + wx_out . z + b_out + alpha/2 |z|^2   (wz_out >= 0)
//! ```
//!
//! Non-negative hidden-path weights and a convex non-decreasing activation
//! make `psi` convex in `z`, so `f` is monotone.
//!
//! Training differentiates through `f`. For a batch loss `L(f(z))` with
//! `g = dL/df`, the parameter gradient equals the gradient of the directional
//! derivative `psi'(z; g) = <grad psi(z), g>` with `g` held fixed. That
//! directional derivative is propagated forward as a tangent alongside the
//! primal pass and then differentiated in reverse.

mod checkpoint;
mod train;

pub use checkpoint::{load_model, model_from_bytes, model_to_bytes, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, train_with_progress, EpochLog, OptimizerKind, ProxMatchConfig, TrainLog};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{check_len, Error, Result};
use crate::image::Image;
use crate::solver::Proximal;

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Softplus sharpness.
    pub beta: f64,
    /// Weight of the `alpha/2 |z|^2` term.
    pub alpha: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { input_dim: 784, hidden: vec![128, 128], beta: 2.0, alpha: 1e-2 }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("input and hidden widths must be positive, with at least one hidden layer".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("softplus beta {} must be positive", self.beta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be non-negative", self.alpha)));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    wx: Vec<usize>,
    wz: Vec<Option<usize>>,
    b: Vec<usize>,
    out_wz: usize,
    out_wx: usize,
    out_b: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let n = arch.input_dim;
        let mut off = 0;
        let (mut wx, mut wz, mut b) = (Vec::new(), Vec::new(), Vec::new());
        for (l, &h) in arch.hidden.iter().enumerate() {
            wx.push(off);
            off += h * n;
            if l > 0 {
                wz.push(Some(off));
                off += h * arch.hidden[l - 1];
            } else {
                wz.push(None);
            }
            b.push(off);
            off += h;
        }
        let out_wz = off;
        off += *arch.hidden.last().unwrap();
        let out_wx = off;
        off += n;
        let out_b = off;
        off += 1;
        Layout { wx, wz, b, out_wz, out_wx, out_b, total: off }
    }

    /// Ranges that must stay non-negative.
    fn constrained(&self, arch: &Architecture) -> Vec<std::ops::Range<usize>> {
        let mut out: Vec<_> = self
            .wz
            .iter()
            .enumerate()
            .filter_map(|(l, o)| o.map(|o| o..o + arch.hidden[l] * arch.hidden[l - 1]))
            .collect();
        out.push(self.out_wz..self.out_wz + arch.hidden.last().unwrap());
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorModel {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
}

/// Per-sample activations kept for the backward passes.
struct Tape {
    pre: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl PriorModel {
    /// All parameters zero: `psi(z) = alpha/2 |z|^2 + const`.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let params = vec![0.0; layout.total];
        Ok(PriorModel { arch, layout, params })
    }

    /// Gaussian input weights, small non-negative hidden weights, zero biases.
    pub fn random(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = model.arch.input_dim;
        let input_std = Normal::new(0.0, 1.0 / (n as f64).sqrt()).unwrap();
        for l in 0..model.arch.hidden.len() {
            let h = model.arch.hidden[l];
            let o = model.layout.wx[l];
            for p in &mut model.params[o..o + h * n] {
                *p = input_std.sample(&mut rng);
            }
            if let Some(o) = model.layout.wz[l] {
                let prev = model.arch.hidden[l - 1];
                let u = Uniform::new(0.0, 1.0 / prev as f64).unwrap();
                for p in &mut model.params[o..o + h * prev] {
                    *p = u.sample(&mut rng);
                }
            }
        }
        let last = *model.arch.hidden.last().unwrap();
        let u = Uniform::new(0.0, 1.0 / last as f64).unwrap();
        let o = model.layout.out_wz;
        for p in &mut model.params[o..o + last] {
            *p = u.sample(&mut rng);
        }
        let o = model.layout.out_wx;
        for p in &mut model.params[o..o + n] {
            *p = input_std.sample(&mut rng);
        }
        Ok(model)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        check_len(layout.total, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        let model = PriorModel { arch, layout, params };
        if model.constrained_ranges().any(|r| model.params[r].iter().any(|&p| p < 0.0)) {
            return Err(Error::Config("hidden-path weights must be non-negative".into()));
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn constrained_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> {
        self.layout.constrained(&self.arch).into_iter()
    }

    /// Clips hidden-to-hidden and output hidden weights at zero.
    pub fn project(&mut self) {
        for r in self.layout.constrained(&self.arch) {
            for p in &mut self.params[r] {
                if *p < 0.0 {
                    *p = 0.0;
                }
            }
        }
    }

    /// Weight block for hidden-layer `l`'s input path, `h_l x n` row-major.
    fn wx(&self, l: usize) -> &[f64] {
        let o = self.layout.wx[l];
        &self.params[o..o + self.arch.hidden[l] * self.arch.input_dim]
    }

    fn wz(&self, l: usize) -> Option<&[f64]> {
        self.layout.wz[l].map(|o| &self.params[o..o + self.arch.hidden[l] * self.arch.hidden[l - 1]])
    }

    fn bias(&self, l: usize) -> &[f64] {
        let o = self.layout.b[l];
        &self.params[o..o + self.arch.hidden[l]]
    }

    fn out_wz(&self) -> &[f64] {
        let o = self.layout.out_wz;
        &self.params[o..o + self.arch.hidden.last().unwrap()]
    }

    fn out_wx(&self) -> &[f64] {
        let o = self.layout.out_wx;
        &self.params[o..o + self.arch.input_dim]
    }

    fn forward(&self, z: &[f64]) -> Tape {
        let depth = self.arch.hidden.len();
        let mut pre = Vec::with_capacity(depth);
        let mut act: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for l in 0..depth {
            let mut p = self.bias(l).to_vec();
            matvec_acc(self.wx(l), z, &mut p);
            if let Some(wz) = self.wz(l) {
                matvec_acc(wz, &act[l - 1], &mut p);
            }
            act.push(p.iter().map(|&t| softplus(t, self.arch.beta)).collect());
            pre.push(p);
        }
        Tape { pre, act }
    }

    fn potential_slice(&self, z: &[f64]) -> f64 {
        let tape = self.forward(z);
        let last = tape.act.last().unwrap();
        crate::image::dot(self.out_wz(), last)
            + crate::image::dot(self.out_wx(), z)
            + self.params[self.layout.out_b]
            + 0.5 * self.arch.alpha * crate::image::dot(z, z)
    }

    /// Gradient of the potential at `z`, reusing a forward tape.
    fn gradient_with_tape(&self, z: &[f64], tape: &Tape) -> Vec<f64> {
        let beta = self.arch.beta;
        let mut f: Vec<f64> = z.iter().zip(self.out_wx()).map(|(zi, w)| self.arch.alpha * zi + w).collect();
        let mut adj = self.out_wz().to_vec();
        for l in (0..self.arch.hidden.len()).rev() {
            let c: Vec<f64> = adj.iter().zip(&tape.pre[l]).map(|(a, &p)| a * sigmoid(beta * p)).collect();
            matvec_t_acc(self.wx(l), &c, &mut f);
            if let Some(wz) = self.wz(l) {
                adj = vec![0.0; self.arch.hidden[l - 1]];
                matvec_t_acc(wz, &c, &mut adj);
            }
        }
        f
    }

    pub fn potential(&self, z: &Image) -> Result<f64> {
        check_len(self.arch.input_dim, z.len())?;
        Ok(self.potential_slice(z.as_slice()))
    }

    /// `f(z) = grad psi(z)` by reverse-mode differentiation.
    pub fn prox_apply(&self, z: &Image) -> Result<Image> {
        check_len(self.arch.input_dim, z.len())?;
        let tape = self.forward(z.as_slice());
        z.with_data(self.gradient_with_tape(z.as_slice(), &tape))
    }

    /// Mean over the batch of `1 - exp(-|f(z) - x|^2 / gamma^2)` and its
    /// exact gradient with respect to every parameter.
    pub fn prox_match_loss(&self, batch: &[(Image, Image)], gamma: f64) -> Result<LossAndGradient> {
        let pairs: Vec<(&[f64], &[f64])> = batch.iter().map(|(x, z)| (x.as_slice(), z.as_slice())).collect();
        self.prox_match_loss_slices(&pairs, gamma)
    }

    pub(crate) fn prox_match_loss_slices(&self, batch: &[(&[f64], &[f64])], gamma: f64) -> Result<LossAndGradient> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
        }
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n = self.arch.input_dim;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for &(x, z) in batch {
            check_len(n, x.len())?;
            check_len(n, z.len())?;
            let tape = self.forward(z);
            let f = self.gradient_with_tape(z, &tape);
            let diff: Vec<f64> = f.iter().zip(x).map(|(a, b)| a - b).collect();
            let r2 = crate::image::dot(&diff, &diff);
            let e = (-r2 / (gamma * gamma)).exp();
            if !r2.is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    batch: 0,
                    detail: format!("non-finite prox residual (|f(z)-x|^2 = {r2})"),
                });
            }
            loss += (1.0 - e) * inv_b;
            let scale = 2.0 * e / (gamma * gamma) * inv_b;
            if scale == 0.0 {
                continue;
            }
            let g: Vec<f64> = diff.iter().map(|d| d * scale).collect();
            self.accumulate_directional_grad(z, &g, &tape, &mut grad);
        }
        Ok(LossAndGradient { loss, grad })
    }

    /// Adds `d/dtheta <grad_z psi(z), g>` into `grad`.
    fn accumulate_directional_grad(&self, z: &[f64], g: &[f64], tape: &Tape, grad: &mut [f64]) {
        let depth = self.arch.hidden.len();
        let beta = self.arch.beta;
        let n = self.arch.input_dim;

        // tangent pass: pdot_l = Wx_l g + Wz_l hdot_{l-1}, hdot_l = s'(p_l) pdot_l
        let mut pdot: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut hdot: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for l in 0..depth {
            let mut t = vec![0.0; self.arch.hidden[l]];
            matvec_acc(self.wx(l), g, &mut t);
            if let Some(wz) = self.wz(l) {
                matvec_acc(wz, &hdot[l - 1], &mut t);
            }
            hdot.push(t.iter().zip(&tape.pre[l]).map(|(td, &p)| sigmoid(beta * p) * td).collect());
            pdot.push(t);
        }

        // output: psi_dot = wz_out . hdot_last + wx_out . g + alpha z . g
        let last = depth - 1;
        add_into(&mut grad[self.layout.out_wz..], &hdot[last]);
        add_into(&mut grad[self.layout.out_wx..self.layout.out_wx + n], g);

        let mut bar_h = vec![0.0; self.arch.hidden[last]];
        let mut bar_hdot = self.out_wz().to_vec();
        for l in (0..depth).rev() {
            let h = self.arch.hidden[l];
            let mut bar_p = vec![0.0; h];
            let mut bar_pdot = vec![0.0; h];
            for k in 0..h {
                let s = sigmoid(beta * tape.pre[l][k]);
                let s2 = beta * s * (1.0 - s);
                bar_pdot[k] = s * bar_hdot[k];
                bar_p[k] = s2 * pdot[l][k] * bar_hdot[k] + s * bar_h[k];
            }
            let o = self.layout.wx[l];
            rank2_acc(&mut grad[o..o + h * n], &bar_p, z, &bar_pdot, g);
            add_into(&mut grad[self.layout.b[l]..self.layout.b[l] + h], &bar_p);
            if let (Some(o), Some(wz)) = (self.layout.wz[l], self.wz(l)) {
                let prev = self.arch.hidden[l - 1];
                rank2_acc(&mut grad[o..o + h * prev], &bar_p, &tape.act[l - 1], &bar_pdot, &hdot[l - 1]);
                bar_h = vec![0.0; prev];
                bar_hdot = vec![0.0; prev];
                matvec_t_acc(wz, &bar_p, &mut bar_h);
                matvec_t_acc(wz, &bar_pdot, &mut bar_hdot);
            }
        }
    }
}

impl Proximal for PriorModel {
    fn apply(&self, v: &Image) -> Result<Image> {
        self.prox_apply(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// The proximal-matching penalty with its normalizing constant dropped.
pub fn prox_match_penalty(r: f64, gamma: f64) -> f64 {
    1.0 - (-(r * r) / (gamma * gamma)).exp()
}

fn softplus(t: f64, beta: f64) -> f64 {
    let bt = beta * t;
    if bt > 0.0 {
        t + (-bt).exp().ln_1p() / beta
    } else {
        bt.exp().ln_1p() / beta
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `out += W x`, `W` row-major with `out.len()` rows.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += crate::image::dot(row, x);
    }
}

/// `out += W^T c`.
fn matvec_t_acc(w: &[f64], c: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&ck, row) in c.iter().zip(w.chunks_exact(cols)) {
        if ck == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += ck * wij;
        }
    }
}

/// `G += a u^T + b v^T`.
fn rank2_acc(g: &mut [f64], a: &[f64], u: &[f64], b: &[f64], v: &[f64]) {
    let cols = u.len();
    for ((row, &ai), &bi) in g.chunks_exact_mut(cols).zip(a).zip(b) {
        if ai == 0.0 && bi == 0.0 {
            continue;
        }
        for ((gij, &uj), &vj) in row.iter_mut().zip(u).zip(v) {
            *gij += ai * uj + bi * vj;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
