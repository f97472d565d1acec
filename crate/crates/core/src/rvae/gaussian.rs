//! Factorized diagonal Gaussians over the node, edge and global levels.

use rand::Rng;
use rand_distr::StandardNormal;
use rvae_autodiff::{Tape, Tensor, Var};

use crate::error::Result;

/// Floor added to softplus outputs that parameterize latent scales.
pub const LATENT_SIGMA_FLOOR: f64 = 1e-4;
/// Floor added to softplus outputs that parameterize observation noise.
pub const NOISE_SIGMA_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian rows recorded on a tape: `μ` and `σ`, both `[n × d]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gaussian {
    pub mu: Var,
    pub sigma: Var,
}

impl Gaussian {
    /// Splits a `[n × 2d]` head output into `μ` and `softplus(·) + floor`.
    pub fn from_head(tape: &mut Tape, head: Var, d: usize, floor: f64) -> Result<Self> {
        let mu = tape.columns(head, 0..d)?;
        let raw = tape.columns(head, d..2 * d)?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, floor)?;
        Ok(Self { mu, sigma })
    }

    /// `N(0, I)` with `rows × d` entries.
    pub fn standard(tape: &mut Tape, rows: usize, d: usize) -> Self {
        Self {
            mu: tape.constant(Tensor::zeros(&[rows, d])),
            sigma: tape.constant(Tensor::full(&[rows, d], 1.0)),
        }
    }

    pub fn rows(&self, tape: &Tape) -> usize {
        tape.value(self.mu).rows()
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        tape.value(self.mu).cols()
    }

    pub fn values(&self, tape: &Tape) -> GaussianValues {
        GaussianValues {
            mu: tape.value(self.mu).clone(),
            sigma: tape.value(self.sigma).clone(),
        }
    }
}

/// Per-level Gaussians; `None` marks a level without latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GaussianVars {
    pub node: Option<Gaussian>,
    pub edge: Option<Gaussian>,
    pub global: Option<Gaussian>,
}

impl GaussianVars {
    pub fn levels(&self) -> [Option<Gaussian>; 3] {
        [self.node, self.edge, self.global]
    }

    pub fn values(&self, tape: &Tape) -> GaussianGraph {
        GaussianGraph {
            node: self.node.map(|g| g.values(tape)),
            edge: self.edge.map(|g| g.values(tape)),
            global: self.global.map(|g| g.values(tape)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianValues {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Plain-value form of [`GaussianVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGraph {
    pub node: Option<GaussianValues>,
    pub edge: Option<GaussianValues>,
    pub global: Option<GaussianValues>,
}

/// Latent samples per level; `None` where the level has no latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatentVars {
    pub node: Option<Var>,
    pub edge: Option<Var>,
    pub global: Option<Var>,
}

/// `z = μ + σ ⊙ ε` for a given noise tensor.
pub fn reparameterize_with(tape: &mut Tape, g: Gaussian, eps: Tensor) -> Result<Var> {
    let e = tape.constant(eps);
    let scaled = tape.mul(g.sigma, e)?;
    Ok(tape.add(g.mu, scaled)?)
}

/// Standard-normal noise of the given shape, drawn row-major.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite normal draws")
}

/// Samples every present level, drawing noise node, edge, global in turn.
pub fn reparameterize<R: Rng + ?Sized>(tape: &mut Tape, q: &GaussianVars, rng: &mut R) -> Result<LatentVars> {
    let mut draw = |tape: &mut Tape, g: Option<Gaussian>| -> Result<Option<Var>> {
        g.map(|g| {
            let eps = standard_normal(rng, g.rows(tape), g.dim(tape));
            reparameterize_with(tape, g, eps)
        })
        .transpose()
    };
    Ok(LatentVars {
        node: draw(tape, q.node)?,
        edge: draw(tape, q.edge)?,
        global: draw(tape, q.global)?,
    })
}

/// The means of every present level, used as a deterministic latent.
pub fn means(q: &GaussianVars) -> LatentVars {
    LatentVars {
        node: q.node.map(|g| g.mu),
        edge: q.edge.map(|g| g.mu),
        global: q.global.map(|g| g.mu),
    }
}

/// Row-wise `KL(q ‖ p)` summed over columns, `[n × 1]`:
/// `Σ log(σp/σq) + (σq² + (μq − μp)²) / (2σp²) − ½`.
pub fn kl_rows(tape: &mut Tape, q: Gaussian, p: Gaussian) -> Result<Var> {
    let lp = tape.log(p.sigma)?;
    let lq = tape.log(q.sigma)?;
    let log_ratio = tape.sub(lp, lq)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let d2 = tape.square(diff)?;
    let vq = tape.square(q.sigma)?;
    let num = tape.add(vq, d2)?;
    let vp = tape.square(p.sigma)?;
    let den = tape.scale(vp, 2.0)?;
    let frac = tape.div(num, den)?;
    let s = tape.add(log_ratio, frac)?;
    let s = tape.add_scalar(s, -0.5)?;
    Ok(tape.row_sums(s)?)
}

/// Row-wise Gaussian log-density of `x` summed over columns, `[n × 1]`.
pub fn log_normal_rows(tape: &mut Tape, x: Var, mu: Var, sigma: Var) -> Result<Var> {
    let diff = tape.sub(x, mu)?;
    let d2 = tape.square(diff)?;
    let var = tape.square(sigma)?;
    let var2 = tape.scale(var, 2.0)?;
    let quad = tape.div(d2, var2)?;
    let ls = tape.log(sigma)?;
    let s = tape.add(quad, ls)?;
    let s = tape.neg(s)?;
    let s = tape.add_scalar(s, -HALF_LN_2PI)?;
    Ok(tape.row_sums(s)?)
}

/// Scalar Gaussian log-density, the reference for [`log_normal_rows`].
pub fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    -HALF_LN_2PI - sigma.ln() - (x - mu).powi(2) / (2.0 * sigma * sigma)
}

/// Closed-form KL between two diagonal Gaussians given as plain slices.
pub fn kl_diag(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    mu_q.iter()
        .zip(sigma_q)
        .zip(mu_p.iter().zip(sigma_p))
        .map(|((mq, sq), (mp, sp))| (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5)
        .sum()
}
