//! Generator and discriminator networks.

mod discriminator;
mod generator;
pub mod spectral;

pub use discriminator::{build_discriminator, DiscriminatorConfig, DiscriminatorParams};
pub use generator::{build_generator, GeneratorConfig, GeneratorParams};
pub use spectral::{spectral_normalize, SpectralNorm};

use crate::data::ImageTensor;
use crate::error::Result;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Instance-normalization variance stabilizer.
pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Anything that maps a batch of low-quality images to enhanced ones.
pub trait Enhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor>;
}

impl Enhancer for GeneratorParams {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.forward(x)
    }
}

/// Returns its input unchanged; the reference point for degenerate evaluations.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEnhancer;

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(x.clone())
    }
}
