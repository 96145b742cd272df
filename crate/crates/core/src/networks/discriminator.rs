//! Spectrally normalized patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqgan_autograd::{Array, Tensor};

use super::generator::check_layout;
use super::spectral::{power_step, SIGMA_EPS};
use super::{INIT_STD, LEAKY_SLOPE};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::params::{normal_array, unit_vector, BoundParams, NamedArrays};

const KERNEL: usize = 4;
/// Stride of each of the five convolutions.
const STRIDES: [usize; 5] = [2, 2, 2, 1, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Side length of the square inputs this discriminator accepts.
    pub input_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            input_size: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("discriminator base_channels must be at least 1".into()));
        }
        if !self.input_size.is_multiple_of(8) || self.input_size < 24 {
            return Err(Error::Config(format!(
                "discriminator input size must be a multiple of 8 and at least 24, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Side length of the score grid: s -> s/2 -> s/4 -> s/8 -> s/8-1 -> s/8-2.
    pub fn output_size(&self) -> usize {
        self.input_size / 8 - 2
    }

    fn channels(&self) -> [(usize, usize); 5] {
        let b = self.base_channels;
        [(1, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b), (8 * b, 1)]
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.channels()
            .iter()
            .enumerate()
            .flat_map(|(i, &(cin, cout))| {
                [
                    (format!("layer.{i}.weight"), vec![cout, cin, KERNEL, KERNEL]),
                    (format!("layer.{i}.bias"), vec![cout]),
                ]
            })
            .collect()
    }

    /// Power-iteration vectors, one per spectrally normalized layer (all but the first).
    pub fn u_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.channels()
            .iter()
            .enumerate()
            .skip(1)
            .map(|(i, &(_, cout))| (format!("layer.{i}.u"), vec![cout]))
            .collect()
    }
}

/// Weights and persistent power-iteration state of one discriminator (D_H or D_L).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    config: DiscriminatorConfig,
    arrays: NamedArrays,
    u: NamedArrays,
}

pub fn build_discriminator(config: DiscriminatorConfig, init_seed: u64) -> Result<DiscriminatorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut arrays = NamedArrays::new();
    for (name, shape) in config.layout() {
        let a = if name.ends_with(".bias") {
            Array::zeros(&shape)
        } else {
            normal_array(&shape, INIT_STD, &mut rng)
        };
        arrays.push(name, a);
    }
    let mut u = NamedArrays::new();
    for (name, shape) in config.u_layout() {
        u.push(name, Array::from_vec(&shape, unit_vector(shape[0], &mut rng)));
    }
    Ok(DiscriminatorParams { config, arrays, u })
}

impl DiscriminatorParams {
    pub fn from_arrays(config: DiscriminatorConfig, arrays: NamedArrays, u: NamedArrays) -> Result<Self> {
        config.validate()?;
        check_layout(&config.layout(), &arrays, "discriminator")?;
        check_layout(&config.u_layout(), &u, "discriminator power-iteration state")?;
        for (name, v) in u.iter() {
            if (v.sq_norm().sqrt() - 1.0).abs() > 1e-6 {
                return Err(Error::Mismatch(format!("`{name}` is not unit-norm")));
            }
        }
        if !arrays.all_finite() {
            return Err(Error::Mismatch("discriminator arrays contain non-finite values".into()));
        }
        Ok(Self { config, arrays, u })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn arrays(&self) -> &NamedArrays {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut NamedArrays {
        &mut self.arrays
    }

    pub fn u_vectors(&self) -> &NamedArrays {
        &self.u
    }

    pub fn bind(&self, trainable: bool) -> BoundParams {
        self.arrays.bind(trainable)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "discriminator expects (batch, 1, {s}, {s}) input, got {shape:?}"
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass. Each spectrally normalized layer runs one
    /// power-iteration step from its stored `u`; the refreshed vectors are
    /// returned, not stored (see [`DiscriminatorParams::commit_u`]).
    pub fn forward_graph(&self, p: &BoundParams, x: &Tensor) -> Result<(Tensor, Vec<Vec<f64>>)> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        let mut fresh_u = Vec::new();
        for (i, &stride) in STRIDES.iter().enumerate() {
            let w = p.get(&format!("layer.{i}.weight"));
            let b = p.get(&format!("layer.{i}.bias"));
            let w = if i == 0 {
                w.clone()
            } else {
                let rows = w.shape()[0];
                let cols = w.value().len() / rows;
                let u = self.u.get(&format!("layer.{i}.u")).expect("u per layer");
                let step = power_step(w.value().data(), rows, cols, u.data());
                let (wn, _sigma) = w.spectral_div(&step.u, &step.v, SIGMA_EPS);
                fresh_u.push(step.u);
                wn
            };
            h = h.conv2d(&w, Some(b), stride, 1);
            if i + 1 < STRIDES.len() {
                h = h.leaky_relu(LEAKY_SLOPE);
            }
        }
        Ok((h, fresh_u))
    }

    /// Stores power-iteration vectors produced by [`DiscriminatorParams::forward_graph`].
    pub fn commit_u(&mut self, fresh: Vec<Vec<f64>>) {
        let names: Vec<String> = self.u.names().map(str::to_string).collect();
        assert_eq!(names.len(), fresh.len());
        for (name, v) in names.iter().zip(fresh) {
            let slot = self.u.get_mut(name).expect("known name");
            *slot = Array::from_vec(&[v.len()], v);
        }
    }

    /// Raw score map `(batch, 1, g, g)` with weights held constant.
    pub fn score_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let bound = self.bind(false);
        Ok(self.forward_graph(&bound, x)?.0)
    }

    /// Inference forward pass; `update_u` persists the refreshed power-iteration vectors.
    pub fn forward(&mut self, x: &ImageTensor, update_u: bool) -> Result<Array> {
        let bound = self.bind(false);
        let (scores, fresh) = self.forward_graph(&bound, &x.to_tensor())?;
        if update_u {
            self.commit_u(fresh);
        }
        Ok(scores.value().clone())
    }
}
