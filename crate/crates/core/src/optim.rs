//! Adam and dynamic loss scaling.

use uqgan_autograd::Array;

use crate::error::{Error, Result};

pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over one ordered group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    names: Vec<String>,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

impl Adam {
    /// Zero moments for every `(name, shape)` in `layout`.
    pub fn new(layout: &[(String, Vec<usize>)], beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: ADAM_EPS,
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            m: layout.iter().map(|(_, s)| Array::zeros(s)).collect(),
            v: layout.iter().map(|(_, s)| Array::zeros(s)).collect(),
            step: 0,
        }
    }

    /// Rebuilds a saved optimizer; moment shapes must match `layout`.
    pub fn from_state(
        layout: &[(String, Vec<usize>)],
        beta1: f64,
        beta2: f64,
        m: Vec<Array>,
        v: Vec<Array>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != layout.len() || v.len() != layout.len() {
            return Err(Error::Mismatch(format!(
                "optimizer holds {} / {} moment arrays, parameter group has {}",
                m.len(),
                v.len(),
                layout.len()
            )));
        }
        for ((name, shape), (a, b)) in layout.iter().zip(m.iter().zip(&v)) {
            if a.shape() != shape.as_slice() || b.shape() != shape.as_slice() {
                return Err(Error::Mismatch(format!(
                    "optimizer moments for `{name}` have shape {:?}, parameter has {shape:?}",
                    a.shape()
                )));
            }
        }
        let mut opt = Self::new(layout, beta1, beta2);
        opt.m = m;
        opt.v = v;
        opt.step = step;
        Ok(opt)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moments(&self) -> &[Array] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Array] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters whose gradient is `None` are left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Array>,
        grads: &[Option<Array>],
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let Some(g) = &grads[i] else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape for `{}`", self.names[i]);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        assert_eq!(count, self.names.len(), "parameter group size changed");
    }
}

/// Dynamic loss scaling: the loss is multiplied by `scale` before the
/// backward pass and gradients divided by it afterwards. Steps with
/// non-finite gradients are skipped and the scale backs off; after
/// `growth_interval` clean steps it grows.
#[derive(Clone, Debug, PartialEq)]
pub struct GradScaler {
    pub enabled: bool,
    pub scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u64,
    clean_steps: u64,
}

impl GradScaler {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            scale: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
            clean_steps: 0,
        }
    }

    pub fn with_state(enabled: bool, scale: f64, clean_steps: u64) -> Self {
        Self {
            scale,
            clean_steps,
            ..Self::new(enabled)
        }
    }

    pub fn clean_steps(&self) -> u64 {
        self.clean_steps
    }

    /// Factor to multiply the loss by.
    pub fn loss_factor(&self) -> f64 {
        if self.enabled { self.scale } else { 1.0 }
    }

    /// Divides gradients by the scale and reports whether the step may proceed.
    pub fn unscale(&mut self, grads: &mut [Option<Array>]) -> bool {
        if !self.enabled {
            return true;
        }
        let inv = 1.0 / self.scale;
        let mut finite = true;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
            finite &= g.all_finite();
        }
        if finite {
            self.clean_steps += 1;
            if self.clean_steps >= self.growth_interval {
                self.scale *= self.growth_factor;
                self.clean_steps = 0;
            }
        } else {
            self.scale *= self.backoff_factor;
            self.clean_steps = 0;
        }
        finite
    }
}
