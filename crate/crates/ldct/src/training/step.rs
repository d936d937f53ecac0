//! One adversarial training step: discriminator update on detached
//! residuals, then a reconstruction update against the frozen discriminator.

use super::loss::{total_loss_on_tape, LossRecord};
use super::opt::Adam;
use super::perceptual::PerceptualNet;
use crate::autodiff::{Elem, Tape};
use crate::model::{ImagePatch, ReconModel};
use crate::rda::{lsgan_discriminator_loss_on_tape, Discriminator};
use crate::{Error, Result};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Per-step hyperparameters, resolved to the element type.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig<E: Elem> {
    /// Monte-Carlo weight samples per forward pass.
    pub m: usize,
    pub kl_scale: E,
    pub beta1: E,
    pub beta2: E,
}

/// One training batch: aligned source patches and unpaired target patches,
/// each `[B, 1, h, w]`.
#[derive(Debug, Clone)]
pub struct Batch<E: Elem> {
    pub x_source: ArrayD<E>,
    pub y_source: ArrayD<E>,
    pub x_target: ArrayD<E>,
}

/// Stacks `[1, h, w]` patches into one `[B, 1, h, w]` batch tensor.
pub fn stack_patches<E: Elem>(patches: &[&ImagePatch<E>]) -> Result<ArrayD<E>> {
    if patches.is_empty() {
        return Err(Error::InvalidArg("cannot stack an empty batch".into()));
    }
    let (h, w) = patches[0].size();
    let mut out = ArrayD::zeros(IxDyn(&[patches.len(), 1, h, w]));
    for (i, p) in patches.iter().enumerate() {
        if p.size() != (h, w) {
            return Err(Error::shape(
                "stack_patches",
                format!("{:?} vs {:?}", p.size(), (h, w)),
            ));
        }
        out.index_axis_mut(Axis(0), i).assign(p.values());
    }
    Ok(out)
}

impl<E: Elem> Batch<E> {
    /// Builds a batch from co-located source pairs and unpaired target
    /// patches.
    pub fn from_patches(
        source: &[(ImagePatch<E>, ImagePatch<E>)],
        target: &[ImagePatch<E>],
    ) -> Result<Self> {
        let xs: Vec<&ImagePatch<E>> = source.iter().map(|(x, _)| x).collect();
        let ys: Vec<&ImagePatch<E>> = source.iter().map(|(_, y)| y).collect();
        let xt: Vec<&ImagePatch<E>> = target.iter().collect();
        Ok(Batch {
            x_source: stack_patches(&xs)?,
            y_source: stack_patches(&ys)?,
            x_target: stack_patches(&xt)?,
        })
    }

    fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("x_source", &self.x_source),
            ("y_source", &self.y_source),
            ("x_target", &self.x_target),
        ] {
            let s = a.shape();
            if s.len() != 4 || s[1] != 1 {
                return Err(Error::shape("batch", format!("{name} has shape {s:?}")));
            }
        }
        if self.x_source.shape() != self.y_source.shape() {
            return Err(Error::shape(
                "batch",
                format!(
                    "x_source {:?} vs y_source {:?}",
                    self.x_source.shape(),
                    self.y_source.shape()
                ),
            ));
        }
        if self.x_source.shape()[2..] != self.x_target.shape()[2..] {
            return Err(Error::shape(
                "batch",
                format!(
                    "source patches {:?} vs target patches {:?}",
                    self.x_source.shape(),
                    self.x_target.shape()
                ),
            ));
        }
        Ok(())
    }
}

/// Loss values produced by one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub losses: LossRecord,
    /// Discriminator objective, present only when the adversarial term is
    /// active.
    pub disc_loss: Option<f64>,
}

/// Runs one full training step.
///
/// Phase 1 (only when `beta2 > 0`): the reconstruction model runs detached
/// (bound as constants), residuals `x − ŷ` of both domains are scored, and
/// only the discriminator is updated on the least-squares real/fake loss.
///
/// Phase 2: the discriminator is frozen and the reconstruction parameters
/// take one Adam step on the composite objective.
#[allow(clippy::too_many_arguments)]
pub fn train_step<E: Elem, R: Rng>(
    model: &mut ReconModel<E>,
    disc: &mut Discriminator<E>,
    perceptual: &PerceptualNet<E>,
    batch: &Batch<E>,
    sc: &StepConfig<E>,
    opt_model: &mut Adam<E>,
    opt_disc: &mut Adam<E>,
    rng: &mut R,
) -> Result<StepOutput>
where
    StandardNormal: Distribution<E>,
{
    batch.validate()?;

    let disc_loss = if sc.beta2 > E::zero() {
        let mut tape = Tape::new();
        let mvars = model.bind(&mut tape, false);
        let dvars = disc.bind(&mut tape, true);
        let xs = tape.constant(batch.x_source.clone());
        let xt = tape.constant(batch.x_target.clone());
        let (y_hat_s, _) = model.mc_forward_on_tape(&mut tape, &mvars, xs, sc.m, rng)?;
        let (y_hat_t, _) = model.mc_forward_on_tape(&mut tape, &mvars, xt, sc.m, rng)?;
        let n_s = tape.sub(xs, y_hat_s)?;
        let n_t = tape.sub(xt, y_hat_t)?;
        let score_s = disc.forward_on_tape(&mut tape, &dvars, n_s)?;
        let score_t = disc.forward_on_tape(&mut tape, &dvars, n_t)?;
        let loss = lsgan_discriminator_loss_on_tape(&mut tape, score_t, score_s)?;
        let value =
            num_traits::ToPrimitive::to_f64(&tape.scalar_value(loss)).unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "discriminator loss diverged: {value}"
            )));
        }
        let mut grads = tape.backward(loss)?;
        let grad_list: Vec<Option<ArrayD<E>>> =
            dvars.flat().iter().map(|&v| grads.take(v)).collect();
        opt_disc.step(&mut disc.flat_params_mut(), &grad_list)?;
        Some(value)
    } else {
        None
    };

    let mut tape = Tape::new();
    let mvars = model.bind(&mut tape, true);
    let dvars = disc.bind(&mut tape, false);
    let xs = tape.constant(batch.x_source.clone());
    let ys = tape.constant(batch.y_source.clone());
    let xt = tape.constant(batch.x_target.clone());
    let terms = total_loss_on_tape(
        &mut tape, model, &mvars, disc, &dvars, perceptual, xs, ys, xt, sc.m, sc.kl_scale,
        sc.beta1, sc.beta2, rng,
    )?;
    let losses = LossRecord::from_terms(&tape, &terms)?;
    let mut grads = tape.backward(terms.total)?;
    let grad_list: Vec<Option<ArrayD<E>>> =
        mvars.flat().iter().map(|&v| grads.take(v)).collect();
    opt_model.step(&mut model.flat_params_mut(), &grad_list)?;

    Ok(StepOutput { losses, disc_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    fn setup(
        seed: u64,
    ) -> (
        ReconModel<f32>,
        Discriminator<f32>,
        PerceptualNet<f32>,
        Batch<f32>,
    ) {
        let model = ReconModel::<f32>::new(4, 0.1, seed).unwrap();
        let disc = Discriminator::new(4, seed + 1).unwrap();
        let perceptual = PerceptualNet::new(seed + 2);
        let mut rng = derive(seed, "step-batch", 0);
        let x_source = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |_| rng.gen_range(0.0f32..1.0));
        let noise = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |_| {
            rng.gen_range(-0.05f32..0.05)
        });
        let y_source = (&x_source - &noise).mapv(|v| v.clamp(0.0, 1.0));
        let x_target = ArrayD::from_shape_fn(IxDyn(&[2, 1, 16, 16]), |_| rng.gen_range(0.0f32..1.0));
        (
            model,
            disc,
            perceptual,
            Batch {
                x_source,
                y_source,
                x_target,
            },
        )
    }

    fn config() -> StepConfig<f32> {
        StepConfig {
            m: 2,
            kl_scale: 1e-3,
            beta1: 0.1,
            beta2: 0.01,
        }
    }

    fn opts() -> (Adam<f32>, Adam<f32>) {
        (
            Adam::new(1e-3, 0.9, 0.999, 1e-8),
            Adam::new(1e-3, 0.9, 0.999, 1e-8),
        )
    }

    #[test]
    fn step_is_deterministic() {
        let run = || {
            let (mut model, mut disc, perceptual, batch) = setup(11);
            let (mut om, mut od) = opts();
            let mut rng = derive(11, "step-det", 0);
            let out = train_step(
                &mut model, &mut disc, &perceptual, &batch, &config(), &mut om, &mut od,
                &mut rng,
            )
            .unwrap();
            (out, model, disc)
        };
        let (o1, m1, d1) = run();
        let (o2, m2, d2) = run();
        assert_eq!(o1, o2);
        for (a, b) in m1.flat_params().iter().zip(m2.flat_params().iter()) {
            assert_eq!(a, b, "model params must match bitwise");
        }
        for (a, b) in d1.flat_params().iter().zip(d2.flat_params().iter()) {
            assert_eq!(a, b, "disc params must match bitwise");
        }
    }

    #[test]
    fn discriminator_updates_only_with_active_rda() {
        let (mut model, mut disc, perceptual, batch) = setup(12);
        let before: Vec<ArrayD<f32>> = disc.flat_params().iter().map(|a| (*a).clone()).collect();
        let (mut om, mut od) = opts();
        let mut rng = derive(12, "step-rda", 0);

        let mut sc = config();
        sc.beta2 = 0.0;
        let out = train_step(
            &mut model, &mut disc, &perceptual, &batch, &sc, &mut om, &mut od, &mut rng,
        )
        .unwrap();
        assert!(out.disc_loss.is_none());
        for (a, b) in before.iter().zip(disc.flat_params().iter()) {
            assert_eq!(&a, b, "disc must stay untouched when beta2 = 0");
        }

        sc.beta2 = 0.01;
        let out = train_step(
            &mut model, &mut disc, &perceptual, &batch, &sc, &mut om, &mut od, &mut rng,
        )
        .unwrap();
        assert!(out.disc_loss.is_some());
        let changed = before
            .iter()
            .zip(disc.flat_params().iter())
            .any(|(a, b)| &a != b);
        assert!(changed, "disc must move when beta2 > 0");
    }

    #[test]
    fn model_parameters_move() {
        let (mut model, mut disc, perceptual, batch) = setup(13);
        let before: Vec<ArrayD<f32>> =
            model.flat_params().iter().map(|a| (*a).clone()).collect();
        let (mut om, mut od) = opts();
        let mut rng = derive(13, "step-move", 0);
        train_step(
            &mut model, &mut disc, &perceptual, &batch, &config(), &mut om, &mut od, &mut rng,
        )
        .unwrap();
        let changed = before
            .iter()
            .zip(model.flat_params().iter())
            .filter(|(a, b)| &a != *b)
            .count();
        assert!(changed >= 16, "most parameters should move, got {changed}");
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let (mut model, mut disc, perceptual, batch) = setup(14);
        let (mut om, mut od) = opts();
        let mut rng = derive(14, "step-toy", 0);
        let mut recon = Vec::new();
        for _ in 0..200 {
            let out = train_step(
                &mut model, &mut disc, &perceptual, &batch, &config(), &mut om, &mut od,
                &mut rng,
            )
            .unwrap();
            recon.push(out.losses.l1 + out.losses.pl);
        }
        let head: f64 = recon[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = recon[190..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < head * 0.8,
            "reconstruction loss should drop: first {head:.5}, last {tail:.5}"
        );
    }

    #[test]
    fn non_finite_weights_abort_with_dump() {
        let (mut model, mut disc, perceptual, batch) = setup(15);
        model.enc[1].w[[0, 0, 0, 0]] = f32::NAN;
        let (mut om, mut od) = opts();
        let mut rng = derive(15, "step-nan", 0);
        let err = train_step(
            &mut model, &mut disc, &perceptual, &batch, &config(), &mut om, &mut od, &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "got {err:?}");
    }

    #[test]
    fn batch_validation_errors() {
        let (mut model, mut disc, perceptual, batch) = setup(16);
        let (mut om, mut od) = opts();
        let mut rng = derive(16, "step-bad", 0);
        let mut bad = batch.clone();
        bad.y_source = ArrayD::zeros(IxDyn(&[2, 1, 8, 8]));
        assert!(train_step(
            &mut model, &mut disc, &perceptual, &bad, &config(), &mut om, &mut od, &mut rng
        )
        .is_err());
    }
}
