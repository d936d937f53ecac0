//! Residual distribution alignment: treat the LDCT-minus-reconstruction
//! residual as a noise proxy and align its distribution across domains with
//! a least-squares patch discriminator.
//!
//! Target-domain residuals carry label 1 ("real" noise statistics), source
//! residuals label 0; the generator term pushes source residuals toward the
//! target distribution. Both objectives use the squared least-squares form.

use crate::autodiff::{Elem, Tape, Var};
use crate::model::{he_conv, DetConv};
use crate::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use rand_distr::{Distribution, StandardNormal};

/// Negative-side slope of the discriminator's leaky rectifier.
pub const DISC_LEAKY_SLOPE: f64 = 0.2;

/// Epsilon inside the instance-normalization square root.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Signed reconstruction residual `x − ŷ` of one patch, in display-window
/// units; the noise proxy the discriminator sees.
pub type ResidualMap<E> = ArrayD<E>;

/// Patch-level score map from the fully-convolutional discriminator.
pub type DiscriminatorScore<E> = ArrayD<E>;

/// Elementwise residual `x − y_hat`; shapes must match exactly.
pub fn residual<E: Elem>(x: &ArrayD<E>, y_hat: &ArrayD<E>) -> Result<ResidualMap<E>> {
    if x.shape() != y_hat.shape() {
        return Err(Error::shape(
            "residual",
            format!("{:?} vs {:?}", x.shape(), y_hat.shape()),
        ));
    }
    Ok(x - y_hat)
}

/// Tape handles for the discriminator parameters in flattening order.
#[derive(Debug, Clone)]
pub struct DiscVars {
    pub layers: Vec<(Var, Var)>,
}

impl DiscVars {
    pub fn flat(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Four-layer patch discriminator (CycleGAN-style): 4×4 kernels with strides
/// 2, 2, 1, 1, channels `base → 2·base → 4·base → 1`, leaky rectifier after
/// the first three layers, instance normalization on the two middle layers,
/// and a linear score map output.
#[derive(Debug, Clone)]
pub struct Discriminator<E: Elem> {
    pub base_channels: usize,
    pub layers: Vec<DetConv<E>>,
}

/// Per-layer stride plan; padding is 1 everywhere.
pub const DISC_STRIDES: [usize; 4] = [2, 2, 1, 1];

impl<E: Elem> Discriminator<E>
where
    StandardNormal: Distribution<E>,
{
    pub fn new(base_channels: usize, seed: u64) -> Result<Self> {
        if base_channels == 0 {
            return Err(Error::InvalidArg("base_channels must be positive".into()));
        }
        let b = base_channels;
        let plan = [(1, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 1)];
        let mut layers = Vec::new();
        for (i, (c_in, c_out)) in plan.into_iter().enumerate() {
            let mut rng = crate::rng::derive(seed, "disc-init", i as u64);
            layers.push(DetConv {
                w: he_conv([c_out, c_in, 4, 4], &mut rng),
                b: ArrayD::zeros(IxDyn(&[c_out])),
            });
        }
        Ok(Discriminator {
            base_channels,
            layers,
        })
    }

    pub fn flat_params(&self) -> Vec<&ArrayD<E>> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn flat_params_mut(&mut self) -> Vec<&mut ArrayD<E>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    /// Register discriminator parameters on a tape, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> DiscVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.w.clone()), tape.param(l.b.clone()))
                } else {
                    (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                }
            })
            .collect();
        DiscVars { layers }
    }

    /// Score a batched `[N, 1, H, W]` residual, yielding `[N, 1, H', W']`.
    pub fn forward_on_tape(&self, tape: &mut Tape<E>, vars: &DiscVars, x: Var) -> Result<Var> {
        let slope = E::cast_f64(DISC_LEAKY_SLOPE);
        let eps = E::cast_f64(INSTANCE_NORM_EPS);
        let mut cur = x;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            cur = tape.conv2d(cur, w, b, DISC_STRIDES[i], 1)?;
            let last = i + 1 == vars.layers.len();
            if !last {
                if i > 0 {
                    cur = tape.instance_norm(cur, eps)?;
                }
                cur = tape.leaky_relu(cur, slope);
            }
        }
        Ok(cur)
    }

    /// Pure scoring of one `[1, H, W]` residual map.
    pub fn discriminate(&self, n: &ResidualMap<E>) -> Result<DiscriminatorScore<E>> {
        if n.ndim() != 3 || n.shape()[0] != 1 {
            return Err(Error::shape(
                "discriminate",
                format!("expected 1xHxW, got {:?}", n.shape()),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let vx = tape.constant(n.clone().insert_axis(Axis(0)));
        let score = self.forward_on_tape(&mut tape, &vars, vx)?;
        Ok(tape.value(score).index_axis(Axis(0), 0).to_owned())
    }
}

/// Discriminator objective: `mean((D(n^T) − 1)²) + mean(D(n^S)²)`.
pub fn lsgan_discriminator_loss<E: Elem>(
    score_target: &DiscriminatorScore<E>,
    score_source: &DiscriminatorScore<E>,
) -> E {
    let t = score_target
        .iter()
        .map(|&v| (v - E::one()) * (v - E::one()))
        .fold(E::zero(), |a, b| a + b)
        / E::cast_usize(score_target.len());
    let s = score_source
        .iter()
        .map(|&v| v * v)
        .fold(E::zero(), |a, b| a + b)
        / E::cast_usize(score_source.len());
    t + s
}

/// Generator-side objective: `mean((D(n^S) − 1)²)`.
pub fn lsgan_generator_loss<E: Elem>(score_source: &DiscriminatorScore<E>) -> E {
    score_source
        .iter()
        .map(|&v| (v - E::one()) * (v - E::one()))
        .fold(E::zero(), |a, b| a + b)
        / E::cast_usize(score_source.len())
}

/// Tape-side discriminator loss from two score nodes.
pub fn lsgan_discriminator_loss_on_tape<E: Elem>(
    tape: &mut Tape<E>,
    score_target: Var,
    score_source: Var,
) -> Result<Var> {
    let tm1 = tape.add_scalar(score_target, -E::one());
    let tsq = tape.sqr(tm1);
    let t = tape.mean_all(tsq);
    let ssq = tape.sqr(score_source);
    let s = tape.mean_all(ssq);
    tape.add(t, s)
}

/// Tape-side generator loss from the source score node.
pub fn lsgan_generator_loss_on_tape<E: Elem>(tape: &mut Tape<E>, score_source: Var) -> Result<Var> {
    let sm1 = tape.add_scalar(score_source, -E::one());
    let sq = tape.sqr(sm1);
    Ok(tape.mean_all(sq))
}
