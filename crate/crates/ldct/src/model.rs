//! The reconstruction network: a compact encoder/decoder with
//! channel-concatenation conveying paths whose last encoder layer and last
//! decoder layer are Bayesian (factorized-Gaussian weights).
//!
//! The encoder is four 3×3 stride-1 convolutions (leaky-rectifier
//! activations); the decoder mirrors it with transposed convolutions and
//! receives the first three encoder activations through conveying paths.
//! `mc_forward` draws M encoder weight samples, averages the resulting
//! embeddings, and decodes the mean with a single decoder sample.

use crate::autodiff::{Elem, Tape, Var};
use crate::variational::{
    kl_gaussian, moped_init, sample_weights, sample_weights_on_tape, PriorGaussian,
    VariationalGaussian,
};
use crate::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// Negative-side slope of the leaky rectifier used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.01;

/// A single 1×H×W image patch in display-window units.
///
/// Inputs are validated to be finite and within `[0, 1]`; network outputs are
/// plain arrays because they may transiently leave that range.
#[derive(Debug, Clone)]
pub struct ImagePatch<E: Elem>(ArrayD<E>);

impl<E: Elem> ImagePatch<E> {
    pub fn new(values: ArrayD<E>) -> Result<Self> {
        if values.ndim() != 3 || values.shape()[0] != 1 {
            return Err(Error::shape(
                "image_patch",
                format!("expected 1xHxW, got {:?}", values.shape()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image patch contains non-finite values".into()));
        }
        if values.iter().any(|&v| v < E::zero() || v > E::one()) {
            return Err(Error::Data(
                "image patch values must lie in [0, 1]".into(),
            ));
        }
        Ok(ImagePatch(values))
    }

    pub fn values(&self) -> &ArrayD<E> {
        &self.0
    }

    pub fn into_values(self) -> ArrayD<E> {
        self.0
    }

    /// Spatial size `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }
}

/// One stochastic embedding draw plus the conveying-path activations the
/// decoder needs. All arrays are `[C, H, W]`.
#[derive(Debug, Clone)]
pub struct Encoding<E: Elem> {
    /// The latent feature map z.
    pub z: ArrayD<E>,
    pub f1: ArrayD<E>,
    pub f2: ArrayD<E>,
    pub f3: ArrayD<E>,
}

/// M stochastic embeddings of one input, all sharing a shape.
#[derive(Debug, Clone)]
pub struct McEmbeddingStack<E: Elem> {
    samples: Vec<ArrayD<E>>,
}

impl<E: Elem> McEmbeddingStack<E> {
    pub fn new(samples: Vec<ArrayD<E>>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidArg(format!(
                "embedding stack needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        let shape = samples[0].shape().to_vec();
        if samples.iter().any(|s| s.shape() != shape.as_slice()) {
            return Err(Error::shape(
                "mc_embedding_stack",
                "inconsistent sample shapes",
            ));
        }
        Ok(McEmbeddingStack { samples })
    }

    pub fn samples(&self) -> &[ArrayD<E>] {
        &self.samples
    }

    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn into_samples(self) -> Vec<ArrayD<E>> {
        self.samples
    }
}

/// Deterministic convolution parameters (shared layout for transposed
/// convolutions, whose weights are `[C_in, C_out, k, k]`).
#[derive(Debug, Clone)]
pub struct DetConv<E: Elem> {
    pub w: ArrayD<E>,
    pub b: ArrayD<E>,
}

/// Variational convolution parameters with their frozen prior.
#[derive(Debug, Clone)]
pub struct BayesConv<E: Elem> {
    pub w: VariationalGaussian<E>,
    pub b: VariationalGaussian<E>,
    pub w_prior: PriorGaussian<E>,
    pub b_prior: PriorGaussian<E>,
}

impl<E: Elem> BayesConv<E> {
    fn from_deterministic(w: &ArrayD<E>, b: &ArrayD<E>, delta: E) -> Result<Self> {
        let (wq, wp) = moped_init(w, delta)?;
        let (bq, bp) = moped_init(b, delta)?;
        Ok(BayesConv {
            w: wq,
            b: bq,
            w_prior: wp,
            b_prior: bp,
        })
    }

    /// Total KL of both weight and bias posteriors against their priors.
    pub fn kl(&self) -> Result<E> {
        Ok(kl_gaussian(&self.w, &self.w_prior)? + kl_gaussian(&self.b, &self.b_prior)?)
    }
}

/// Tape handles for one bound Bayesian layer.
#[derive(Debug, Clone, Copy)]
pub struct BayesVars {
    pub mu_w: Var,
    pub raw_w: Var,
    pub mu_b: Var,
    pub raw_b: Var,
}

/// Tape handles for every model parameter, in the fixed flattening order
/// used by [`ReconModel::flat_params`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub enc: Vec<(Var, Var)>,
    pub enc_bayes: BayesVars,
    pub dec: Vec<(Var, Var)>,
    pub dec_bayes: BayesVars,
}

impl ModelVars {
    /// All parameter handles in flattening order.
    pub fn flat(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.enc {
            out.push(w);
            out.push(b);
        }
        for v in [
            self.enc_bayes.mu_w,
            self.enc_bayes.raw_w,
            self.enc_bayes.mu_b,
            self.enc_bayes.raw_b,
        ] {
            out.push(v);
        }
        for &(w, b) in &self.dec {
            out.push(w);
            out.push(b);
        }
        for v in [
            self.dec_bayes.mu_w,
            self.dec_bayes.raw_w,
            self.dec_bayes.mu_b,
            self.dec_bayes.raw_b,
        ] {
            out.push(v);
        }
        out
    }
}

/// Encoder trunk activations recorded on a tape: the three deterministic
/// feature maps plus the lowered column matrix feeding the Bayesian layer.
#[derive(Debug, Clone, Copy)]
pub struct TrunkVars {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
    pub col3: Var,
}

/// The encoder/decoder reconstruction network.
#[derive(Debug, Clone)]
pub struct ReconModel<E: Elem> {
    pub channels: usize,
    /// When set, Bayesian layers use their means directly (no weight noise)
    /// and contribute zero KL — the deterministic reduction of the model.
    pub freeze_sigma: bool,
    pub enc: Vec<DetConv<E>>,
    pub enc_bayes: BayesConv<E>,
    pub dec: Vec<DetConv<E>>,
    pub dec_bayes: BayesConv<E>,
}

pub(crate) fn he_conv<E: Elem, R: Rng>(shape: [usize; 4], rng: &mut R) -> ArrayD<E>
where
    StandardNormal: Distribution<E>,
{
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(E::zero(), E::cast_f64(std)).expect("positive std");
    ArrayD::from_shape_fn(IxDyn(&shape), |_| dist.sample(rng))
}

impl<E: Elem> ReconModel<E>
where
    StandardNormal: Distribution<E>,
{
    /// Build a freshly initialized model. Deterministic layers use scaled
    /// normal initialization with zero biases; Bayesian layers are given an
    /// empirical-Bayes posterior/prior around their initial means.
    pub fn new(channels: usize, delta: E, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArg("channels must be positive".into()));
        }
        let c = channels;
        let mut enc = Vec::new();
        for (i, c_in) in [1, c, c].into_iter().enumerate() {
            let mut rng = crate::rng::derive(seed, "model-init-enc", i as u64);
            enc.push(DetConv {
                w: he_conv([c, c_in, 3, 3], &mut rng),
                b: ArrayD::zeros(IxDyn(&[c])),
            });
        }
        let mut rng = crate::rng::derive(seed, "model-init-enc", 3);
        let enc_w = he_conv([c, c, 3, 3], &mut rng);
        let enc_bayes = BayesConv::from_deterministic(&enc_w, &ArrayD::zeros(IxDyn(&[c])), delta)?;

        // transposed-conv weights are [c_in, c_out, k, k]; layers after the
        // first take conveying-path concatenations of 2c channels
        let mut dec = Vec::new();
        for (i, c_in) in [c, 2 * c, 2 * c].into_iter().enumerate() {
            let mut rng = crate::rng::derive(seed, "model-init-dec", i as u64);
            dec.push(DetConv {
                w: he_conv([c_in, c, 3, 3], &mut rng),
                b: ArrayD::zeros(IxDyn(&[c])),
            });
        }
        let mut rng = crate::rng::derive(seed, "model-init-dec", 3);
        let dec_w = he_conv([2 * c, 1, 3, 3], &mut rng);
        let dec_bayes = BayesConv::from_deterministic(&dec_w, &ArrayD::zeros(IxDyn(&[1])), delta)?;

        Ok(ReconModel {
            channels,
            freeze_sigma: false,
            enc,
            enc_bayes,
            dec,
            dec_bayes,
        })
    }

    /// Re-anchor both Bayesian layers around their current means, resetting
    /// sigma to `delta·|mu|` and freezing the prior to the same snapshot.
    /// Called after deterministic pretraining.
    pub fn moped_reinit(&mut self, delta: E) -> Result<()> {
        self.enc_bayes =
            BayesConv::from_deterministic(&self.enc_bayes.w.mu.clone(), &self.enc_bayes.b.mu.clone(), delta)?;
        self.dec_bayes =
            BayesConv::from_deterministic(&self.dec_bayes.w.mu.clone(), &self.dec_bayes.b.mu.clone(), delta)?;
        Ok(())
    }

    /// Borrow every parameter tensor in the fixed flattening order.
    pub fn flat_params(&self) -> Vec<&ArrayD<E>> {
        let mut out: Vec<&ArrayD<E>> = Vec::new();
        for l in &self.enc {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.enc_bayes.w.mu);
        out.push(&self.enc_bayes.w.raw_sigma);
        out.push(&self.enc_bayes.b.mu);
        out.push(&self.enc_bayes.b.raw_sigma);
        for l in &self.dec {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.dec_bayes.w.mu);
        out.push(&self.dec_bayes.w.raw_sigma);
        out.push(&self.dec_bayes.b.mu);
        out.push(&self.dec_bayes.b.raw_sigma);
        out
    }

    /// Mutably borrow every parameter tensor, in the same order as
    /// [`Self::flat_params`].
    pub fn flat_params_mut(&mut self) -> Vec<&mut ArrayD<E>> {
        let mut out: Vec<&mut ArrayD<E>> = Vec::new();
        for l in &mut self.enc {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.enc_bayes.w.mu);
        out.push(&mut self.enc_bayes.w.raw_sigma);
        out.push(&mut self.enc_bayes.b.mu);
        out.push(&mut self.enc_bayes.b.raw_sigma);
        for l in &mut self.dec {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.dec_bayes.w.mu);
        out.push(&mut self.dec_bayes.w.raw_sigma);
        out.push(&mut self.dec_bayes.b.mu);
        out.push(&mut self.dec_bayes.b.raw_sigma);
        out
    }

    /// Register all parameters on a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> ModelVars {
        let mut reg = |arr: &ArrayD<E>| {
            if trainable {
                tape.param(arr.clone())
            } else {
                tape.constant(arr.clone())
            }
        };
        let enc = self
            .enc
            .iter()
            .map(|l| (reg(&l.w), reg(&l.b)))
            .collect::<Vec<_>>();
        let enc_bayes = BayesVars {
            mu_w: reg(&self.enc_bayes.w.mu),
            raw_w: reg(&self.enc_bayes.w.raw_sigma),
            mu_b: reg(&self.enc_bayes.b.mu),
            raw_b: reg(&self.enc_bayes.b.raw_sigma),
        };
        let dec = self
            .dec
            .iter()
            .map(|l| (reg(&l.w), reg(&l.b)))
            .collect::<Vec<_>>();
        let dec_bayes = BayesVars {
            mu_w: reg(&self.dec_bayes.w.mu),
            raw_w: reg(&self.dec_bayes.w.raw_sigma),
            mu_b: reg(&self.dec_bayes.b.mu),
            raw_b: reg(&self.dec_bayes.b.raw_sigma),
        };
        ModelVars {
            enc,
            enc_bayes,
            dec,
            dec_bayes,
        }
    }

    fn sample_bayes<R: Rng>(
        &self,
        tape: &mut Tape<E>,
        bv: &BayesVars,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        if self.freeze_sigma {
            Ok((bv.mu_w, bv.mu_b))
        } else {
            let w = sample_weights_on_tape(tape, bv.mu_w, bv.raw_w, rng)?;
            let b = sample_weights_on_tape(tape, bv.mu_b, bv.raw_b, rng)?;
            Ok((w, b))
        }
    }

    /// Deterministic encoder layers on a batched `[N, 1, H, W]` input,
    /// computed once per input regardless of how many embedding samples
    /// follow.
    pub fn encode_trunk_on_tape(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        x: Var,
    ) -> Result<TrunkVars> {
        let slope = E::cast_f64(LEAKY_SLOPE);
        let (w1, b1) = vars.enc[0];
        let c1 = tape.conv2d(x, w1, b1, 1, 1)?;
        let f1 = tape.leaky_relu(c1, slope);
        let (w2, b2) = vars.enc[1];
        let c2 = tape.conv2d(f1, w2, b2, 1, 1)?;
        let f2 = tape.leaky_relu(c2, slope);
        let (w3, b3) = vars.enc[2];
        let c3 = tape.conv2d(f2, w3, b3, 1, 1)?;
        let f3 = tape.leaky_relu(c3, slope);
        let col3 = tape.im2col_op(f3, 3, 1, 1)?;
        Ok(TrunkVars { f1, f2, f3, col3 })
    }

    /// One stochastic embedding draw from a prepared trunk.
    pub fn encode_sample_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        trunk: &TrunkVars,
        rng: &mut R,
    ) -> Result<Var> {
        let (w, b) = self.sample_bayes(tape, &vars.enc_bayes, rng)?;
        let c4 = tape.conv_gemm(w, b, trunk.col3)?;
        Ok(tape.leaky_relu(c4, E::cast_f64(LEAKY_SLOPE)))
    }

    /// Decode an embedding with one decoder weight sample, consuming the
    /// conveying-path activations from the matching trunk.
    pub fn decode_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        z: Var,
        trunk: &TrunkVars,
        rng: &mut R,
    ) -> Result<Var> {
        let slope = E::cast_f64(LEAKY_SLOPE);
        let (w1, b1) = vars.dec[0];
        let t1 = tape.conv_transpose2d(z, w1, b1, 1, 1)?;
        let d1 = tape.leaky_relu(t1, slope);
        let (w2, b2) = vars.dec[1];
        let in2 = tape.concat_channels(d1, trunk.f3)?;
        let t2 = tape.conv_transpose2d(in2, w2, b2, 1, 1)?;
        let d2 = tape.leaky_relu(t2, slope);
        let (w3, b3) = vars.dec[2];
        let in3 = tape.concat_channels(d2, trunk.f2)?;
        let t3 = tape.conv_transpose2d(in3, w3, b3, 1, 1)?;
        let d3 = tape.leaky_relu(t3, slope);
        let (w4, b4) = self.sample_bayes(tape, &vars.dec_bayes, rng)?;
        let in4 = tape.concat_channels(d3, trunk.f1)?;
        // final layer is linear: outputs may leave [0, 1] during training
        tape.conv_transpose2d(in4, w4, b4, 1, 1)
    }

    /// Monte-Carlo forward pass on a batched `[N, 1, H, W]` input: M encoder
    /// samples, mean embedding, one decoder sample. Returns the prediction
    /// and the M embedding draws.
    pub fn mc_forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<E>,
        vars: &ModelVars,
        x: Var,
        m: usize,
        rng: &mut R,
    ) -> Result<(Var, Vec<Var>)> {
        if m < 2 {
            return Err(Error::InvalidArg(format!(
                "mc_forward needs M >= 2, got {m}"
            )));
        }
        let trunk = self.encode_trunk_on_tape(tape, vars, x)?;
        let mut samples = Vec::with_capacity(m);
        for _ in 0..m {
            samples.push(self.encode_sample_on_tape(tape, vars, &trunk, rng)?);
        }
        let mut acc = samples[0];
        for &s in &samples[1..] {
            acc = tape.add(acc, s)?;
        }
        let z_bar = tape.mul_scalar(acc, E::one() / E::cast_usize(m));
        let y_hat = self.decode_on_tape(tape, vars, z_bar, &trunk, rng)?;
        Ok((y_hat, samples))
    }

    /// KL of the two Bayesian layers as tape nodes `(encoder, decoder)`.
    /// Zero constants when sigmas are frozen.
    pub fn kl_on_tape(&self, tape: &mut Tape<E>, vars: &ModelVars) -> Result<(Var, Var)> {
        if self.freeze_sigma {
            return Ok((tape.scalar(E::zero()), tape.scalar(E::zero())));
        }
        let ew = tape.kl_gaussian_node(
            vars.enc_bayes.mu_w,
            vars.enc_bayes.raw_w,
            &self.enc_bayes.w_prior.mu,
            &self.enc_bayes.w_prior.sigma,
        )?;
        let eb = tape.kl_gaussian_node(
            vars.enc_bayes.mu_b,
            vars.enc_bayes.raw_b,
            &self.enc_bayes.b_prior.mu,
            &self.enc_bayes.b_prior.sigma,
        )?;
        let enc_kl = tape.add(ew, eb)?;
        let dw = tape.kl_gaussian_node(
            vars.dec_bayes.mu_w,
            vars.dec_bayes.raw_w,
            &self.dec_bayes.w_prior.mu,
            &self.dec_bayes.w_prior.sigma,
        )?;
        let db = tape.kl_gaussian_node(
            vars.dec_bayes.mu_b,
            vars.dec_bayes.raw_b,
            &self.dec_bayes.b_prior.mu,
            &self.dec_bayes.b_prior.sigma,
        )?;
        let dec_kl = tape.add(dw, db)?;
        Ok((enc_kl, dec_kl))
    }

    /// Pure KL of both Bayesian layers (encoder, decoder), zero when frozen.
    pub fn kl(&self) -> Result<(E, E)> {
        if self.freeze_sigma {
            return Ok((E::zero(), E::zero()));
        }
        Ok((self.enc_bayes.kl()?, self.dec_bayes.kl()?))
    }

    fn check_patch(&self, x: &ArrayD<E>) -> Result<()> {
        if x.ndim() != 3 || x.shape()[0] != 1 {
            return Err(Error::shape(
                "encode",
                format!("expected 1xHxW input, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// One stochastic encoding of a single `[1, H, W]` patch, with the
    /// conveying-path activations the decoder needs.
    pub fn encode<R: Rng>(&self, x: &ArrayD<E>, rng: &mut R) -> Result<Encoding<E>> {
        self.check_patch(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let batched = x.clone().insert_axis(Axis(0));
        let vx = tape.constant(batched);
        let trunk = self.encode_trunk_on_tape(&mut tape, &vars, vx)?;
        let z = self.encode_sample_on_tape(&mut tape, &vars, &trunk, rng)?;
        let unbatch = |v: Var, t: &Tape<E>| t.value(v).index_axis(Axis(0), 0).to_owned();
        Ok(Encoding {
            z: unbatch(z, &tape),
            f1: unbatch(trunk.f1, &tape),
            f2: unbatch(trunk.f2, &tape),
            f3: unbatch(trunk.f3, &tape),
        })
    }

    /// Decode one encoding back to a `[1, H, W]` image patch.
    pub fn decode<R: Rng>(&self, enc: &Encoding<E>, rng: &mut R) -> Result<ArrayD<E>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let batch = |a: &ArrayD<E>, t: &mut Tape<E>| t.constant(a.clone().insert_axis(Axis(0)));
        let z = batch(&enc.z, &mut tape);
        let f1 = batch(&enc.f1, &mut tape);
        let f2 = batch(&enc.f2, &mut tape);
        let f3 = batch(&enc.f3, &mut tape);
        // reconstruct the column matrix handle only for type uniformity; the
        // decoder itself never reads col3
        let trunk = TrunkVars { f1, f2, f3, col3: f3 };
        let y = self.decode_on_tape(&mut tape, &vars, z, &trunk, rng)?;
        Ok(tape.value(y).index_axis(Axis(0), 0).to_owned())
    }

    /// Monte-Carlo forward pass on one `[1, H, W]` patch.
    pub fn mc_forward<R: Rng>(
        &self,
        x: &ArrayD<E>,
        m: usize,
        rng: &mut R,
    ) -> Result<(ArrayD<E>, McEmbeddingStack<E>)> {
        self.check_patch(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let vx = tape.constant(x.clone().insert_axis(Axis(0)));
        let (y_hat, zs) = self.mc_forward_on_tape(&mut tape, &vars, vx, m, rng)?;
        let samples = zs
            .into_iter()
            .map(|z| tape.value(z).index_axis(Axis(0), 0).to_owned())
            .collect();
        Ok((
            tape.value(y_hat).index_axis(Axis(0), 0).to_owned(),
            McEmbeddingStack::new(samples)?,
        ))
    }

    /// Force both Bayesian posteriors to exactly zero standard deviation by
    /// sending the unconstrained parameters to negative infinity.
    pub fn collapse_sigma(&mut self) {
        let ninf = -E::infinity();
        for vg in [
            &mut self.enc_bayes.w,
            &mut self.enc_bayes.b,
            &mut self.dec_bayes.w,
            &mut self.dec_bayes.b,
        ] {
            vg.raw_sigma.fill(ninf);
        }
    }
}

/// Convenience free function mirroring the layer-level stochastic forward:
/// draws fresh weights for a standalone variational conv layer.
pub fn stochastic_conv<E: Elem, R: Rng>(
    x: &ArrayD<E>,
    layer: &BayesConv<E>,
    rng: &mut R,
) -> Result<ArrayD<E>>
where
    StandardNormal: Distribution<E>,
{
    let w = sample_weights(&layer.w, rng);
    let b = sample_weights(&layer.b, rng);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (
        tape.constant(x.clone()),
        tape.constant(w),
        tape.constant(b),
    );
    let k = layer.w.mu.shape()[2];
    let y = tape.conv2d(vx, vw, vb, 1, k / 2)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    fn small_model(freeze: bool) -> ReconModel<f64> {
        let mut m = ReconModel::<f64>::new(8, 0.1, 42).unwrap();
        m.freeze_sigma = freeze;
        m
    }

    fn patch(h: usize, w: usize, tag: &str) -> ArrayD<f64> {
        let mut rng = derive(100, tag, 0);
        ArrayD::from_shape_fn(IxDyn(&[1, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn image_patch_validation() {
        assert!(ImagePatch::new(ArrayD::<f64>::zeros(IxDyn(&[1, 4, 4]))).is_ok());
        assert!(ImagePatch::new(ArrayD::<f64>::zeros(IxDyn(&[2, 4, 4]))).is_err());
        assert!(ImagePatch::new(ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.5f64)).is_err());
        assert!(ImagePatch::new(ArrayD::from_elem(IxDyn(&[1, 2, 2]), f64::NAN)).is_err());
        let p = ImagePatch::new(ArrayD::from_elem(IxDyn(&[1, 3, 5]), 0.5f64)).unwrap();
        assert_eq!(p.size(), (3, 5));
    }

    #[test]
    fn zero_input_zero_bias_frozen_model_encodes_to_zero() {
        let model = small_model(true);
        // biases are zero-initialized; frozen sigma means weights equal mu
        let x = ArrayD::<f64>::zeros(IxDyn(&[1, 8, 8]));
        let mut rng = derive(1, "zero-enc", 0);
        let enc = model.encode(&x, &mut rng).unwrap();
        assert!(enc.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic_per_seed_and_stochastic_across_seeds() {
        let model = small_model(false);
        let x = patch(8, 8, "det-x");
        let a = model.encode(&x, &mut derive(5, "enc", 1)).unwrap();
        let b = model.encode(&x, &mut derive(5, "enc", 1)).unwrap();
        assert_eq!(a.z, b.z);
        let c = model.encode(&x, &mut derive(5, "enc", 2)).unwrap();
        assert_ne!(a.z, c.z, "different seeds must give different embeddings");
    }

    #[test]
    fn decode_encode_shape_closure() {
        let model = small_model(false);
        let x = patch(64, 64, "closure-x");
        let mut rng = derive(6, "closure", 0);
        let enc = model.encode(&x, &mut rng).unwrap();
        assert_eq!(enc.z.shape(), &[8, 64, 64]);
        let y = model.decode(&enc, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn frozen_decode_is_repeatable() {
        let model = small_model(true);
        let x = patch(8, 8, "rep-x");
        let enc = model.encode(&x, &mut derive(7, "rep", 0)).unwrap();
        let a = model.decode(&enc, &mut derive(7, "rep", 1)).unwrap();
        let b = model.decode(&enc, &mut derive(7, "rep", 2)).unwrap();
        assert_eq!(a, b, "zero-noise decode must not depend on the stream");
    }

    #[test]
    fn mc_forward_validates_m_and_returns_m_samples() {
        let model = small_model(false);
        let x = patch(8, 8, "m-x");
        let mut rng = derive(8, "m", 0);
        assert!(matches!(
            model.mc_forward(&x, 1, &mut rng),
            Err(crate::Error::InvalidArg(_))
        ));
        let (_, stack) = model.mc_forward(&x, 10, &mut rng).unwrap();
        assert_eq!(stack.m(), 10);
    }

    #[test]
    fn frozen_mc_forward_collapses_to_identical_samples() {
        let model = small_model(true);
        let x = patch(8, 8, "collapse-x");
        let mut rng = derive(9, "collapse", 0);
        let (_, stack) = model.mc_forward(&x, 4, &mut rng).unwrap();
        let first = &stack.samples()[0];
        for s in stack.samples() {
            assert_eq!(s, first);
        }
        // and the shared sample equals the deterministic encoding
        let enc = model.encode(&x, &mut derive(9, "collapse", 1)).unwrap();
        assert_eq!(first, &enc.z);
    }

    #[test]
    fn collapsed_sigma_matches_frozen_model_bitwise() {
        // raw_sigma = -inf drives softplus to exactly zero, so the stochastic
        // path reproduces the deterministic forward bit for bit
        let mut collapsed = small_model(false);
        collapsed.collapse_sigma();
        let frozen = small_model(true);
        let x = patch(8, 8, "bitwise-x");
        let (ya, sa) = collapsed.mc_forward(&x, 3, &mut derive(10, "bit", 0)).unwrap();
        let (yb, sb) = frozen.mc_forward(&x, 3, &mut derive(10, "bit", 99)).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(sa.samples()[0], sb.samples()[0]);
    }

    #[test]
    fn unfrozen_stack_has_nonzero_variance_somewhere() {
        let model = small_model(false);
        let x = patch(8, 8, "var-x");
        let mut rng = derive(11, "var", 0);
        let (_, stack) = model.mc_forward(&x, 6, &mut rng).unwrap();
        let m = stack.m() as f64;
        let mut max_var: f64 = 0.0;
        let mean = stack
            .samples()
            .iter()
            .fold(ArrayD::<f64>::zeros(stack.samples()[0].raw_dim()), |a, s| a + s)
            / m;
        for s in stack.samples() {
            let d = s - &mean;
            max_var = max_var.max(d.iter().map(|v| v * v).fold(0.0, f64::max));
        }
        assert!(max_var > 0.0);
    }

    #[test]
    fn embedding_stack_rejects_small_or_ragged_input() {
        let a = ArrayD::<f64>::zeros(IxDyn(&[2, 3, 3]));
        let b = ArrayD::<f64>::zeros(IxDyn(&[2, 3, 4]));
        assert!(McEmbeddingStack::new(vec![a.clone()]).is_err());
        assert!(McEmbeddingStack::new(vec![a.clone(), b]).is_err());
        assert!(McEmbeddingStack::new(vec![a.clone(), a]).is_ok());
    }

    #[test]
    fn reconstruction_gradients_reach_all_variational_parameters() {
        let model = small_model(false);
        let x = patch(8, 8, "grad-x").insert_axis(Axis(0));
        let y = patch(8, 8, "grad-y").insert_axis(Axis(0));
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let (vx, vy) = (tape.constant(x), tape.constant(y));
        let mut rng = derive(12, "grad", 0);
        let (y_hat, _) = model
            .mc_forward_on_tape(&mut tape, &vars, vx, 2, &mut rng)
            .unwrap();
        let diff = tape.sub(y_hat, vy).unwrap();
        let l1 = tape.abs(diff);
        let root = tape.mean_all(l1);
        let grads = tape.backward(root).unwrap();
        for bv in [vars.enc_bayes, vars.dec_bayes] {
            for v in [bv.mu_w, bv.raw_w, bv.mu_b, bv.raw_b] {
                let g = grads.get(v).expect("variational parameter gradient");
                assert!(g.iter().all(|v| v.is_finite()));
                assert!(g.iter().any(|&v| v != 0.0), "gradient must be nonzero");
            }
        }
        // deterministic trunk layers learn too
        for (w, b) in vars.enc.iter().chain(vars.dec.iter()) {
            assert!(grads.get(*w).is_some());
            assert!(grads.get(*b).is_some());
        }
    }

    #[test]
    fn mean_embedding_variance_decays_as_one_over_m() {
        let model = small_model(false);
        let x = patch(6, 6, "slope-x");
        let runs = 48;
        let mut points = Vec::new();
        for (i, &m) in [2usize, 8, 32].iter().enumerate() {
            // variance of the mean embedding at a fixed element across runs
            let mut vals = Vec::with_capacity(runs);
            for r in 0..runs {
                let mut rng = derive(13, "slope", (i * runs + r) as u64);
                let (_, stack) = model.mc_forward(&x, m, &mut rng).unwrap();
                let mf = m as f64;
                let mean = stack
                    .samples()
                    .iter()
                    .fold(ArrayD::<f64>::zeros(stack.samples()[0].raw_dim()), |a, s| {
                        a + s
                    })
                    / mf;
                vals.push(mean[[0, 3, 3]]);
            }
            let mu = vals.iter().sum::<f64>() / runs as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / runs as f64;
            points.push(((m as f64).ln(), var.ln()));
        }
        let k = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
        assert!(
            (slope + 1.0).abs() < 0.15,
            "mean-embedding variance slope {slope}, expected -1 ± 0.15"
        );
    }

    #[test]
    fn flat_params_order_matches_bound_vars() {
        let model = small_model(false);
        let mut tape = Tape::<f64>::new();
        let vars = model.bind(&mut tape, true);
        let flat = vars.flat();
        let params = model.flat_params();
        assert_eq!(flat.len(), params.len());
        assert_eq!(flat.len(), 20);
        for (v, p) in flat.iter().zip(params.iter()) {
            assert_eq!(tape.value(*v).shape(), p.shape());
            assert_eq!(tape.value(*v), *p);
        }
    }
}
