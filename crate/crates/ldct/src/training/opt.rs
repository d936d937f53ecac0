//! Adam optimizer over flat parameter lists.

use crate::autodiff::Elem;
use crate::{Error, Result};
use ndarray::ArrayD;

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and keyed by parameter position, so the same parameter order
/// must be used on every call.
#[derive(Debug, Clone)]
pub struct Adam<E: Elem> {
    pub lr: E,
    pub beta1: E,
    pub beta2: E,
    pub eps: E,
    pub step_count: u64,
    pub m: Vec<ArrayD<E>>,
    pub v: Vec<ArrayD<E>>,
}

impl<E: Elem> Adam<E> {
    pub fn new(lr: E, beta1: E, beta2: E, eps: E) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` of `None` (a parameter untouched by
    /// the current graph, e.g. a frozen posterior width) leaves both the
    /// parameter and its moments unchanged.
    pub fn step(
        &mut self,
        params: &mut [&mut ArrayD<E>],
        grads: &[Option<ArrayD<E>>],
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArg(format!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArg(format!(
                "adam: moment buffers hold {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = E::one() - self.beta1.powi(t);
        let bc2 = E::one() - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = grad else { continue };
            if g.shape() != param.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("grad {:?} vs param {:?}", g.shape(), param.shape()),
                ));
            }
            ndarray::Zip::from(&mut **param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (E::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (E::one() - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_param(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    #[test]
    fn first_step_size_is_learning_rate() {
        // With constant gradient g, bias-corrected Adam moves by
        // lr·g/(|g| + ~0) ≈ lr·sign(g) on the first step.
        let mut opt = Adam::new(0.01, 0.9, 0.999, 1e-12);
        let mut p = scalar_param(5.0);
        let g = scalar_param(3.0);
        opt.step(&mut [&mut p], &[Some(g)]).unwrap();
        assert!((p[[0]] - (5.0 - 0.01)).abs() < 1e-9, "got {}", p[[0]]);
    }

    #[test]
    fn minimizes_quadratic() {
        // f(x) = (x − 2)², gradient 2(x − 2).
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8);
        let mut p = scalar_param(-3.0);
        for _ in 0..500 {
            let g = scalar_param(2.0 * (p[[0]] - 2.0));
            opt.step(&mut [&mut p], &[Some(g)]).unwrap();
        }
        assert!((p[[0]] - 2.0).abs() < 0.05, "converged to {}", p[[0]]);
    }

    #[test]
    fn none_gradient_skips_parameter() {
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(2.0);
        opt.step(&mut [&mut a, &mut b], &[Some(scalar_param(1.0)), None])
            .unwrap();
        assert!(a[[0]] < 1.0);
        assert_eq!(b[[0]], 2.0);
        assert!(opt.v[1].iter().all(|&v| v == 0.0), "skipped moments stay zero");
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let mut opt = Adam::<f64>::new(0.1, 0.9, 0.999, 1e-8);
        let mut a = scalar_param(1.0);
        assert!(opt.step(&mut [&mut a], &[]).is_err());
        let bad_shape = ArrayD::zeros(IxDyn(&[2]));
        assert!(opt.step(&mut [&mut a], &[Some(bad_shape)]).is_err());
    }
}
