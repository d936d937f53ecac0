//! Frozen random-feature perceptual loss: a small seeded convolutional net
//! whose fixed filters define the feature space for an MSE comparison.

use crate::autodiff::{Elem, Tape, Var};
use crate::model::{he_conv, DetConv};
use crate::rng::derive;
use crate::Result;
use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};

/// Channel widths of the three feature layers.
pub const PERCEPTUAL_CHANNELS: [usize; 3] = [16, 32, 32];
/// Leaky-rectifier slope of the feature net.
pub const PERCEPTUAL_SLOPE: f64 = 0.2;

/// Fixed (never trained) feature extractor: three 3×3 stride-1 convolutions
/// with leaky rectifiers, seeded once and identical across runs for the same
/// seed.
#[derive(Debug, Clone)]
pub struct PerceptualNet<E: Elem> {
    pub layers: Vec<DetConv<E>>,
}

impl<E: Elem> PerceptualNet<E>
where
    StandardNormal: Distribution<E>,
{
    pub fn new(seed: u64) -> Self {
        let mut c_in = 1;
        let mut layers = Vec::new();
        for (i, &c_out) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            let mut rng = derive(seed, "perceptual-init", i as u64);
            layers.push(DetConv {
                w: he_conv([c_out, c_in, 3, 3], &mut rng),
                b: ArrayD::zeros(IxDyn(&[c_out])),
            });
            c_in = c_out;
        }
        PerceptualNet { layers }
    }
}

impl<E: Elem> PerceptualNet<E> {
    /// Feature map of a `[N, 1, H, W]` batch. Weights enter the tape as
    /// constants, so gradients flow to the input but never to the filters.
    pub fn features_on_tape(&self, tape: &mut Tape<E>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let w = tape.constant(layer.w.clone());
            let b = tape.constant(layer.b.clone());
            let c = tape.conv2d(h, w, b, 1, 1)?;
            h = tape.leaky_relu(c, E::cast_f64(PERCEPTUAL_SLOPE));
        }
        Ok(h)
    }

    /// Pure feature map of a `[N, 1, H, W]` batch.
    pub fn features(&self, x: &ArrayD<E>) -> Result<ArrayD<E>> {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let f = self.features_on_tape(&mut tape, vx)?;
        Ok(tape.value(f).clone())
    }
}

/// Mean squared distance between the perceptual features of two batches.
pub fn perceptual_loss_on_tape<E: Elem>(
    tape: &mut Tape<E>,
    net: &PerceptualNet<E>,
    a: Var,
    b: Var,
) -> Result<Var> {
    let fa = net.features_on_tape(tape, a)?;
    let fb = net.features_on_tape(tape, b)?;
    let d = tape.sub(fa, fb)?;
    let sq = tape.sqr(d);
    Ok(tape.mean_all(sq))
}
