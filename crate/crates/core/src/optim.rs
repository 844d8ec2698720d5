//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::RealTensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<RealTensor>,
    v: Vec<RealTensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[RealTensor] {
        &self.m
    }

    /// One update of every parameter. `grads[i]` belongs to `params[i]`;
    /// `iteration` only labels the diagnostic on a non-finite gradient.
    pub fn step(&mut self, params: &mut [Param], grads: &[RealTensor], iteration: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {} has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: iteration,
                    what: format!("gradient of {}", p.name),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| RealTensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::Dimension("parameter set changed between steps".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Param> {
        vec![Param::new("w", RealTensor::scalar(v))]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &[RealTensor::scalar(1.0)], 0).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = 0.01 / (1 + 1e-8)
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!((p[0].value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar_param(2.5);
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &[RealTensor::scalar(1.0)], 0).unwrap();
        let after_first = p[0].value.data()[0];
        let m1 = opt.first_moments()[0].data()[0];
        opt.step(&mut p, &[RealTensor::scalar(0.0)], 1).unwrap();
        // momentum carries w further; moments decay
        assert!(opt.first_moments()[0].data()[0].abs() < m1.abs());
        assert!(p[0].value.data()[0] < after_first);

        // from rest a zero gradient is a fixed point
        let mut q = scalar_param(2.5);
        let mut fresh = Adam::new(0.01);
        for i in 0..10 {
            fresh.step(&mut q, &[RealTensor::scalar(0.0)], i).unwrap();
        }
        assert_eq!(q[0].value.data()[0], 2.5);
        assert_eq!(fresh.steps(), 10);
    }

    #[test]
    fn minimizes_shifted_quadratic() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(0.01);
        let mut reached = None;
        for i in 0..2000 {
            let w = p[0].value.data()[0];
            if (w - 3.0).abs() < 1e-3 {
                reached = Some(i);
                break;
            }
            opt.step(&mut p, &[RealTensor::scalar(2.0 * (w - 3.0))], i).unwrap();
        }
        assert!(reached.is_some(), "w = {}", p[0].value.data()[0]);
    }

    #[test]
    fn nan_gradient_reports_param_and_step() {
        let mut p = scalar_param(0.0);
        let mut opt = Adam::new(0.01);
        let err = opt.step(&mut p, &[RealTensor::scalar(f64::NAN)], 42).unwrap_err();
        match err {
            Error::NonFinite { step, what } => {
                assert_eq!(step, 42);
                assert!(what.contains('w'));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(p[0].value.data()[0], 0.0);
    }
}
