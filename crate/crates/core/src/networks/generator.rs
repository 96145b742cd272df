//! Encoder / residual trunk / decoder generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqgan_autograd::{Array, Tensor};

use super::{INIT_STD, NORM_EPS};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::params::{normal_array, BoundParams, NamedArrays};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub n_downsamples: usize,
    pub first_kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_residual_blocks: 15,
            n_downsamples: 2,
            first_kernel: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if self.n_residual_blocks == 0 {
            return Err(Error::Config("n_residual_blocks must be at least 1".into()));
        }
        if self.first_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "first_kernel must be odd, got {}",
                self.first_kernel
            )));
        }
        Ok(())
    }

    /// Channel count of the residual trunk.
    pub fn trunk_channels(&self) -> usize {
        self.base_channels << self.n_downsamples
    }

    /// Parameter names and shapes, in construction order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.base_channels;
        let k = self.first_kernel;
        let t = self.trunk_channels();
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        conv("stem.conv".into(), b, 1, k);
        for i in 0..self.n_downsamples {
            conv(format!("down.{i}.conv"), b << (i + 1), b << i, 3);
        }
        for j in 0..self.n_residual_blocks {
            conv(format!("res.{j}.conv1"), t, t, 3);
            conv(format!("res.{j}.conv2"), t, t, 3);
        }
        for i in 0..self.n_downsamples {
            let c = b << (self.n_downsamples - i);
            conv(format!("up.{i}.conv"), c / 2, 2 * c, 3);
        }
        conv("head.conv".into(), 1, b, k);
        out
    }

    /// Recovers the configuration from a set of generator arrays.
    pub fn infer(arrays: &NamedArrays) -> Result<Self> {
        let stem = arrays
            .get("stem.conv.weight")
            .ok_or_else(|| Error::Mismatch("generator arrays lack `stem.conv.weight`".into()))?;
        if stem.ndim() != 4 {
            return Err(Error::Mismatch("`stem.conv.weight` must have 4 axes".into()));
        }
        let count = |prefix: &str, suffix: &str| {
            (0..)
                .take_while(|i| arrays.get(&format!("{prefix}.{i}.{suffix}")).is_some())
                .count()
        };
        let config = Self {
            base_channels: stem.shape()[0],
            first_kernel: stem.shape()[2],
            n_downsamples: count("down", "conv.weight"),
            n_residual_blocks: count("res", "conv1.weight"),
        };
        config
            .validate()
            .map_err(|e| Error::Mismatch(format!("inferred generator config is invalid: {e}")))?;
        Ok(config)
    }
}

/// Weights of one generator (G_H or G_L).
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    config: GeneratorConfig,
    arrays: NamedArrays,
}

/// Seeded construction: weights ~ N(0, 0.02), biases zero.
pub fn build_generator(config: GeneratorConfig, init_seed: u64) -> Result<GeneratorParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut arrays = NamedArrays::new();
    for (name, shape) in config.layout() {
        let array = if name.ends_with(".bias") {
            Array::zeros(&shape)
        } else {
            normal_array(&shape, INIT_STD, &mut rng)
        };
        arrays.push(name, array);
    }
    Ok(GeneratorParams { config, arrays })
}

/// Checks `arrays` against the layout of `config`, reporting the first offending entry.
pub(crate) fn check_layout(
    expected: &[(String, Vec<usize>)],
    arrays: &NamedArrays,
    what: &str,
) -> Result<()> {
    for (name, shape) in expected {
        match arrays.get(name) {
            None => {
                return Err(Error::Mismatch(format!(
                    "{what}: array `{name}` (shape {shape:?}) is missing"
                )))
            }
            Some(a) if a.shape() != shape.as_slice() => {
                return Err(Error::Mismatch(format!(
                    "{what}: array `{name}` has shape {:?}, expected {shape:?}",
                    a.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if arrays.len() != expected.len() {
        let extra = arrays
            .names()
            .find(|n| !expected.iter().any(|(e, _)| e == n))
            .unwrap_or("?");
        return Err(Error::Mismatch(format!("{what}: unexpected array `{extra}`")));
    }
    Ok(())
}

impl GeneratorParams {
    pub fn from_arrays(config: GeneratorConfig, arrays: NamedArrays) -> Result<Self> {
        config.validate()?;
        check_layout(&config.layout(), &arrays, "generator")?;
        if !arrays.all_finite() {
            return Err(Error::Mismatch("generator arrays contain non-finite values".into()));
        }
        Ok(Self { config, arrays })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn arrays(&self) -> &NamedArrays {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut NamedArrays {
        &mut self.arrays
    }

    pub fn bind(&self, trainable: bool) -> BoundParams {
        self.arrays.bind(trainable)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "generator expects (batch, 1, H, W) input, got {shape:?}"
            )));
        }
        let factor = 1usize << self.config.n_downsamples;
        let (h, w) = (shape[2], shape[3]);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} is not divisible by {factor} (2^{} downsamples)",
                self.config.n_downsamples
            )));
        }
        let pad = self.config.first_kernel / 2;
        if h <= pad || w <= pad {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} too small for a {}x{} reflection-padded kernel",
                self.config.first_kernel, self.config.first_kernel
            )));
        }
        Ok(())
    }

    /// Differentiable forward pass using leaves from [`GeneratorParams::bind`].
    pub fn forward_graph(&self, p: &BoundParams, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let cfg = &self.config;
        let pad = cfg.first_kernel / 2;
        let conv = |h: &Tensor, name: &str, stride: usize, pad: usize| {
            h.conv2d(
                p.get(&format!("{name}.weight")),
                Some(p.get(&format!("{name}.bias"))),
                stride,
                pad,
            )
        };

        let mut h = conv(&x.reflect_pad(pad), "stem.conv", 1, 0)
            .instance_norm(NORM_EPS)
            .relu();
        let mut skips = vec![h.clone()];
        for i in 0..cfg.n_downsamples {
            h = conv(&h, &format!("down.{i}.conv"), 2, 1)
                .instance_norm(NORM_EPS)
                .relu();
            skips.push(h.clone());
        }
        for j in 0..cfg.n_residual_blocks {
            let r = conv(&h, &format!("res.{j}.conv1"), 1, 1)
                .instance_norm(NORM_EPS)
                .relu();
            let r = conv(&r, &format!("res.{j}.conv2"), 1, 1).instance_norm(NORM_EPS);
            h = h.add(&r);
        }
        for i in 0..cfg.n_downsamples {
            let skip = &skips[cfg.n_downsamples - i];
            h = Tensor::concat_channels(&[&h, skip]).upsample_nearest(2);
            h = conv(&h, &format!("up.{i}.conv"), 1, 1)
                .instance_norm(NORM_EPS)
                .relu();
        }
        Ok(conv(&h.reflect_pad(pad), "head.conv", 1, 0).tanh())
    }

    /// Inference pass; no graph is retained.
    pub fn forward(&self, x: &ImageTensor) -> Result<ImageTensor> {
        let bound = self.bind(false);
        let y = self.forward_graph(&bound, &x.to_tensor())?;
        ImageTensor::new(y.value().clone())
    }

    pub fn residual_block_count(&self) -> usize {
        self.arrays
            .names()
            .filter(|n| n.starts_with("res.") && n.ends_with(".conv1.weight"))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 4,
            n_residual_blocks: 2,
            n_downsamples: 2,
            first_kernel: 7,
        }
    }

    #[test]
    fn default_trunk_is_256_channels_with_15_blocks() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.trunk_channels(), 256);
        let layout = cfg.layout();
        let res_weight = layout.iter().find(|(n, _)| n == "res.0.conv1.weight").unwrap();
        assert_eq!(res_weight.1, vec![256, 256, 3, 3]);
        let blocks = layout
            .iter()
            .filter(|(n, _)| n.ends_with(".conv1.weight"))
            .count();
        assert_eq!(blocks, 15);
    }

    #[test]
    fn seeded_builds_are_identical() {
        let a = build_generator(tiny(), 5).unwrap();
        let b = build_generator(tiny(), 5).unwrap();
        let c = build_generator(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.residual_block_count(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.first_kernel = 6;
        assert!(build_generator(c, 0).is_err());
        let mut c = tiny();
        c.n_residual_blocks = 0;
        assert!(build_generator(c, 0).is_err());
    }

    #[test]
    fn shape_is_preserved() {
        let g = build_generator(tiny(), 1).unwrap();
        let x = ImageTensor::new(Array::full(&[2, 1, 16, 16], 0.3)).unwrap();
        let y = g.forward(&x).unwrap();
        assert_eq!(y.array().shape(), &[2, 1, 16, 16]);
        assert!(y.array().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let g = build_generator(tiny(), 1).unwrap();
        let x = ImageTensor::new(Array::zeros(&[1, 1, 18, 18])).unwrap();
        assert!(matches!(g.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut g = build_generator(tiny(), 1).unwrap();
        for name in ["head.conv.weight", "head.conv.bias"] {
            let a = g.arrays_mut().get_mut(name).unwrap();
            a.data_mut().fill(0.0);
        }
        let x = ImageTensor::new(Array::full(&[1, 1, 16, 16], -0.7)).unwrap();
        assert!(g.forward(&x).unwrap().array().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_round_trips_through_inference() {
        let g = build_generator(tiny(), 2).unwrap();
        assert_eq!(GeneratorConfig::infer(g.arrays()).unwrap(), tiny());
    }

    #[test]
    fn from_arrays_names_first_mismatch() {
        let small = build_generator(GeneratorConfig { n_residual_blocks: 1, ..tiny() }, 0).unwrap();
        let err = GeneratorParams::from_arrays(tiny(), small.arrays().clone()).unwrap_err();
        assert!(err.to_string().contains("res.1.conv1.weight"), "{err}");
    }
}
