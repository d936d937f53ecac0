//! Factorized-Gaussian variational weight machinery: reparameterized
//! sampling, closed-form KL divergence, and empirical-Bayes (MOPED-style)
//! initialization from deterministic weights.
//!
//! Everything here is a pure function over explicit state; training composes
//! the same math on the autodiff tape, and these functions double as the
//! reference implementation in tests.

use crate::autodiff::{self, softplus, Elem, Tape};
use crate::{Error, Result};
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floor applied to MOPED sigmas so zero weights never produce a
/// zero-variance (degenerate) posterior.
pub const MOPED_SIGMA_FLOOR: f64 = 1e-5;

/// Inverse of the softplus transform: `softplus(softplus_inv(y)) = y`.
///
/// Only defined for `y > 0`; computed as `y + ln(1 - exp(-y))` which is
/// stable for both small and large `y`.
pub fn softplus_inv<E: Elem>(y: E) -> E {
    debug_assert!(y > E::zero(), "softplus_inv needs a positive argument");
    y + (-(-y).exp()).ln_1p()
}

/// Variational posterior `q(w) = N(mu, sigma)` with `sigma = softplus(raw_sigma)`.
#[derive(Debug, Clone)]
pub struct VariationalGaussian<E: Elem> {
    pub mu: ArrayD<E>,
    pub raw_sigma: ArrayD<E>,
}

impl<E: Elem> VariationalGaussian<E> {
    pub fn new(mu: ArrayD<E>, raw_sigma: ArrayD<E>) -> Result<Self> {
        if mu.shape() != raw_sigma.shape() {
            return Err(Error::shape(
                "variational_gaussian",
                format!("mu {:?} vs raw_sigma {:?}", mu.shape(), raw_sigma.shape()),
            ));
        }
        Ok(VariationalGaussian { mu, raw_sigma })
    }

    /// Elementwise standard deviation, strictly positive for finite raw values.
    pub fn sigma(&self) -> ArrayD<E> {
        self.raw_sigma.mapv(softplus)
    }
}

/// Fixed Gaussian prior `p(w) = N(mu0, sigma0)`; the fields may be full
/// arrays or 0-dimensional scalars that broadcast against the posterior.
#[derive(Debug, Clone)]
pub struct PriorGaussian<E: Elem> {
    pub mu: ArrayD<E>,
    pub sigma: ArrayD<E>,
}

/// Draw one weight tensor `w = mu + sigma ⊙ ε` with `ε ~ N(0, I)`.
///
/// Elements are consumed from `rng` in the array's logical (row-major)
/// order, so a given seeded stream always yields the same sample.
pub fn sample_weights<E: Elem, R: Rng>(q: &VariationalGaussian<E>, rng: &mut R) -> ArrayD<E>
where
    StandardNormal: Distribution<E>,
{
    let sigma = q.sigma();
    let mut w = q.mu.clone();
    ndarray::Zip::from(&mut w).and(&sigma).for_each(|w, &s| {
        let eps: E = rng.sample(StandardNormal);
        *w = *w + s * eps;
    });
    w
}

/// Closed-form KL divergence `KL(q || p)` summed over all weight elements:
/// `Σ log(σ0/σ) + (σ² + (μ−μ0)²)/(2σ0²) − 1/2`.
pub fn kl_gaussian<E: Elem>(q: &VariationalGaussian<E>, p: &PriorGaussian<E>) -> Result<E> {
    let dim = q.mu.raw_dim();
    let pm = p
        .mu
        .broadcast(dim.clone())
        .ok_or_else(|| Error::shape("kl_gaussian", format!("prior mu {:?}", p.mu.shape())))?;
    let ps = p
        .sigma
        .broadcast(dim)
        .ok_or_else(|| Error::shape("kl_gaussian", format!("prior sigma {:?}", p.sigma.shape())))?;
    if ps.iter().any(|&s| s <= E::zero()) {
        return Err(Error::InvalidArg(
            "kl_gaussian: prior sigma must be positive".into(),
        ));
    }
    let half = E::cast_f64(0.5);
    let mut total = E::zero();
    ndarray::Zip::from(&q.mu)
        .and(&q.raw_sigma)
        .and(&pm)
        .and(&ps)
        .for_each(|&m, &r, &m0, &s0| {
            let s = softplus(r);
            let d = m - m0;
            total = total + (s0 / s).ln() + (s * s + d * d) / (s0 * s0 + s0 * s0) - half;
        });
    Ok(total)
}

/// Empirical-Bayes initialization from pretrained deterministic weights:
/// posterior `N(w, delta·|w|)` (sigma floored at [`MOPED_SIGMA_FLOOR`]) and a
/// prior frozen to the same snapshot, so the KL term starts at zero.
pub fn moped_init<E: Elem>(
    deterministic_weights: &ArrayD<E>,
    delta: E,
) -> Result<(VariationalGaussian<E>, PriorGaussian<E>)> {
    if delta <= E::zero() {
        return Err(Error::InvalidArg(format!(
            "moped_init: delta must be positive, got {delta}"
        )));
    }
    let floor = E::cast_f64(MOPED_SIGMA_FLOOR);
    let sigma = deterministic_weights.mapv(|w| (delta * w.abs()).max(floor));
    let raw_sigma = sigma.mapv(softplus_inv);
    let q = VariationalGaussian {
        mu: deterministic_weights.clone(),
        raw_sigma,
    };
    let p = PriorGaussian {
        mu: deterministic_weights.clone(),
        sigma,
    };
    Ok((q, p))
}

/// One stochastic forward pass of a Bayesian conv layer: sample the kernel
/// and bias, then run a stride-1 convolution with size-preserving padding.
///
/// A fresh weight sample is drawn on every call.
pub fn bayesian_conv_forward<E: Elem, R: Rng>(
    x: &ArrayD<E>,
    kernel: &VariationalGaussian<E>,
    bias: &VariationalGaussian<E>,
    rng: &mut R,
) -> Result<ArrayD<E>>
where
    StandardNormal: Distribution<E>,
{
    if kernel.mu.ndim() != 4 {
        return Err(Error::shape(
            "bayesian_conv_forward",
            format!("kernel {:?}", kernel.mu.shape()),
        ));
    }
    let k = kernel.mu.shape()[2];
    let w = sample_weights(kernel, rng);
    let b = sample_weights(bias, rng);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (
        tape.constant(x.clone()),
        tape.constant(w),
        tape.constant(b),
    );
    let y = tape.conv2d(vx, vw, vb, 1, k / 2)?;
    Ok(tape.value(y).clone())
}

/// Tape-side reparameterized sample: `mu + softplus(raw_sigma) ⊙ ε` with a
/// fresh `ε` recorded as a constant, keeping gradients flowing to `mu` and
/// `raw_sigma` only.
pub fn sample_weights_on_tape<E: Elem, R: Rng>(
    tape: &mut Tape<E>,
    mu: autodiff::Var,
    raw_sigma: autodiff::Var,
    rng: &mut R,
) -> Result<autodiff::Var>
where
    StandardNormal: Distribution<E>,
{
    let shape = tape.value(mu).raw_dim();
    let eps = ArrayD::from_shape_fn(shape, |_| rng.sample(StandardNormal));
    let eps = tape.constant(eps);
    let sigma = tape.softplus_op(raw_sigma);
    let noise = tape.mul(sigma, eps)?;
    tape.add(mu, noise)
}
