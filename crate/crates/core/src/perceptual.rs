//! Deep-feature perceptual distance and the paired perceptual loss.
//!
//! Features come from a frozen 16-layer VGG hierarchy (pretrained weights
//! loaded from an archive, or a seeded random stand-in). At each tap, the
//! channel vectors are unit-normalized per position; the distance for a tap is
//! the spatial mean of the per-position L2 norm of the feature difference, and
//! taps are combined with non-negative per-layer weights.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uqgan_autograd::{Array, Tensor};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::params::{normal_array, NamedArrays};

/// Input conditioning expected by the pretrained feature network, per RGB channel.
const INPUT_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const INPUT_SCALE: [f64; 3] = [0.458, 0.448, 0.450];
const FEATURE_EPS: f64 = 1e-10;

/// VGG16 feature stack: channel counts, `None` = 2x2 max pool.
const VGG16: [Option<usize>; 17] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
];

pub const DEFAULT_TAPS: [&str; 5] = ["relu1_2", "relu2_2", "relu3_3", "relu4_3", "relu5_3"];
/// Tap name of the [`ExtractorKind::PixelIdentity`] extractor.
pub const PIXEL_TAP: &str = "pixels";

#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorKind {
    /// Weights read from an archive using torchvision `features.<index>` names.
    PretrainedVgg16,
    /// Seeded He-initialized weights in the same topology, with channel counts divided by `width_divisor`.
    RandomFixed { seed: u64, width_divisor: usize },
    /// The conditioned input itself as the only tap.
    PixelIdentity,
}

#[derive(Clone, Debug)]
struct ConvSpec {
    /// torchvision `features` index of the convolution.
    index: usize,
    /// `relu{stage}_{n}` name of the activation following it.
    tap: String,
    pool_before: bool,
}

/// Frozen feature network. Never updated; safe to share across threads.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: ExtractorKind,
    taps: Vec<String>,
    convs: Vec<ConvSpec>,
    weights: NamedArrays,
}

fn vgg_plan(width_divisor: usize) -> Vec<(ConvSpec, usize, usize)> {
    let mut plan = Vec::new();
    let (mut index, mut stage, mut within) = (0, 1, 0);
    let mut cin = 3;
    let mut pool_pending = false;
    for layer in VGG16 {
        match layer {
            None => {
                index += 1;
                stage += 1;
                within = 0;
                pool_pending = true;
            }
            Some(c) => {
                let cout = (c / width_divisor).max(1);
                within += 1;
                plan.push((
                    ConvSpec {
                        index,
                        tap: format!("relu{stage}_{within}"),
                        pool_before: pool_pending,
                    },
                    cin,
                    cout,
                ));
                pool_pending = false;
                cin = cout;
                index += 2;
            }
        }
    }
    plan
}

impl FeatureExtractor {
    fn with_plan(
        kind: ExtractorKind,
        taps: &[&str],
        width_divisor: usize,
        mut weight_for: impl FnMut(&str, &[usize]) -> Result<Array>,
    ) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Config("feature extractor needs at least one tap".into()));
        }
        let plan = vgg_plan(width_divisor);
        let mut positions = Vec::new();
        for tap in taps {
            let pos = plan
                .iter()
                .position(|(c, _, _)| c.tap == *tap)
                .ok_or_else(|| Error::Config(format!("unknown feature tap `{tap}`")))?;
            if positions.last().is_some_and(|&p| p >= pos) {
                return Err(Error::Config("feature taps must be listed in network order".into()));
            }
            positions.push(pos);
        }
        let last = *positions.last().expect("non-empty");
        let mut weights = NamedArrays::new();
        let mut convs = Vec::new();
        for (spec, cin, cout) in plan.into_iter().take(last + 1) {
            let w_name = format!("features.{}.weight", spec.index);
            let b_name = format!("features.{}.bias", spec.index);
            let w = weight_for(&w_name, &[cout, cin, 3, 3])?;
            let b = weight_for(&b_name, &[cout])?;
            weights.push(w_name, w);
            weights.push(b_name, b);
            convs.push(spec);
        }
        Ok(Self {
            kind,
            taps: taps.iter().map(|s| s.to_string()).collect(),
            convs,
            weights,
        })
    }

    /// Seeded, frozen stand-in for the pretrained network.
    pub fn random_fixed(seed: u64, width_divisor: usize, taps: &[&str]) -> Result<Self> {
        if width_divisor == 0 {
            return Err(Error::Config("width_divisor must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_plan(
            ExtractorKind::RandomFixed {
                seed,
                width_divisor,
            },
            taps,
            width_divisor,
            |name, shape| {
                Ok(if name.ends_with(".bias") {
                    Array::zeros(shape)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    normal_array(shape, (2.0 / fan_in).sqrt(), &mut rng)
                })
            },
        )
    }

    /// Pretrained VGG16 weights from a named-array archive.
    pub fn pretrained_vgg16(path: &Path, taps: &[&str]) -> Result<Self> {
        let archive = Archive::read(path)?;
        Self::with_plan(ExtractorKind::PretrainedVgg16, taps, 1, |name, shape| {
            let a = archive.f64_array(name).ok_or_else(|| {
                Error::Mismatch(format!("{}: missing `{name}`", path.display()))
            })?;
            if a.shape() != shape {
                return Err(Error::Mismatch(format!(
                    "{}: `{name}` has shape {:?}, expected {shape:?}",
                    path.display(),
                    a.shape()
                )));
            }
            Ok(a.clone())
        })
    }

    pub fn pixel_identity() -> Self {
        Self {
            kind: ExtractorKind::PixelIdentity,
            taps: vec![PIXEL_TAP.to_string()],
            convs: Vec::new(),
            weights: NamedArrays::new(),
        }
    }

    pub fn kind(&self) -> &ExtractorKind {
        &self.kind
    }

    pub fn taps(&self) -> &[String] {
        &self.taps
    }

    pub fn weights(&self) -> &NamedArrays {
        &self.weights
    }

    /// Replicates the gray channel to RGB and applies the network's input conditioning.
    pub fn condition_input(x: &Tensor) -> Tensor {
        let scale: Vec<f64> = INPUT_SCALE.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = INPUT_SHIFT
            .iter()
            .zip(INPUT_SCALE)
            .map(|(m, s)| -m / s)
            .collect();
        x.repeat_channels(3).channel_affine(&scale, &shift)
    }

    /// Unit-normalized activations at every tap, in tap order.
    pub fn extract(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "feature extractor expects (batch, 1, H, W), got {shape:?}"
            )));
        }
        let mut h = Self::condition_input(x);
        if self.kind == ExtractorKind::PixelIdentity {
            return Ok(vec![h.channel_normalize(FEATURE_EPS)]);
        }
        let mut out = Vec::with_capacity(self.taps.len());
        for spec in &self.convs {
            if spec.pool_before {
                let (_, _, hh, ww) = h.value().dims4();
                if hh < 2 || ww < 2 {
                    return Err(Error::Shape(format!(
                        "input too small to reach feature tap `{}`",
                        spec.tap
                    )));
                }
                h = h.max_pool2();
            }
            let w = Tensor::constant(self.weights.get(&format!("features.{}.weight", spec.index)).expect("weight").clone());
            let b = Tensor::constant(self.weights.get(&format!("features.{}.bias", spec.index)).expect("bias").clone());
            h = h.conv2d(&w, Some(&b), 1, 1).relu();
            if self.taps.contains(&spec.tap) {
                out.push(h.channel_normalize(FEATURE_EPS));
            }
        }
        Ok(out)
    }
}

/// Non-negative per-tap weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights(Vec<f64>);

impl LayerWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Config("layer weights cannot be empty".into()));
        }
        if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::Config(format!(
                "layer weights must be finite and non-negative, got {bad}"
            )));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    /// One non-negative real per line; blank lines and `#` comments are ignored.
    pub fn load(path: &Path, expected: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut w = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            w.push(line.parse::<f64>().map_err(|e| {
                Error::Config(format!("{}:{}: {e}", path.display(), i + 1))
            })?);
        }
        if w.len() != expected {
            return Err(Error::Config(format!(
                "{}: {} layer weights for {expected} taps",
                path.display(),
                w.len()
            )));
        }
        Self::new(w)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Per-item perceptual distance `(B)`, differentiable in both arguments.
pub fn lpips_distance(
    extractor: &FeatureExtractor,
    weights: &LayerWeights,
    x: &Tensor,
    y: &Tensor,
) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "perceptual distance operands differ: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if weights.values().len() != extractor.taps().len() {
        return Err(Error::Config(format!(
            "{} layer weights for {} taps",
            weights.values().len(),
            extractor.taps().len()
        )));
    }
    let n = x.shape()[0];
    let feats = extractor.extract(&Tensor::concat_batch(&[x, y]))?;
    let mut total: Option<Tensor> = None;
    for (f, &w) in feats.iter().zip(weights.values()) {
        let d = f
            .slice_batch(0, n)
            .sub(&f.slice_batch(n, 2 * n))
            .channel_norm()
            .mean_per_item()
            .scale(w);
        total = Some(match total {
            None => d,
            Some(t) => t.add(&d),
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Which image pairs the perceptual loss compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerceptualMode {
    /// No perceptual term.
    None,
    /// Φ(H, H̄) + Φ(L, L̄) on cycle reconstructions.
    CycleRecon,
    /// Φ(H, H′) only.
    HighOnly,
    /// Φ(H, H′) + Φ(L, L′) on paired translations.
    Both,
}

impl std::str::FromStr for PerceptualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cycle_recon" => Ok(Self::CycleRecon),
            "high_only" => Ok(Self::HighOnly),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown perceptual mode `{other}` (expected none|cycle_recon|high_only|both)"
            ))),
        }
    }
}

impl std::fmt::Display for PerceptualMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::CycleRecon => "cycle_recon",
            Self::HighOnly => "high_only",
            Self::Both => "both",
        })
    }
}

/// Translations already computed by a training step.
pub struct Translations<'a> {
    /// G_H(L)
    pub h_prime: &'a Tensor,
    /// G_L(H)
    pub l_prime: &'a Tensor,
    /// G_H(G_L(H))
    pub h_bar: &'a Tensor,
    /// G_L(G_H(L))
    pub l_bar: &'a Tensor,
}

fn batch_mean_phi(
    extractor: &FeatureExtractor,
    weights: &LayerWeights,
    a: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    Ok(lpips_distance(extractor, weights, a, b)?.mean())
}

/// Perceptual loss from precomputed translations.
pub fn perceptual_terms(
    mode: PerceptualMode,
    low: &Tensor,
    high: &Tensor,
    t: &Translations<'_>,
    extractor: &FeatureExtractor,
    weights: &LayerWeights,
) -> Result<Tensor> {
    let phi = |a: &Tensor, b: &Tensor| batch_mean_phi(extractor, weights, a, b);
    match mode {
        PerceptualMode::None => Ok(Tensor::constant(Array::scalar(0.0))),
        PerceptualMode::HighOnly => phi(high, t.h_prime),
        PerceptualMode::CycleRecon => Ok(phi(high, t.h_bar)?.add(&phi(low, t.l_bar)?)),
        PerceptualMode::Both => Ok(phi(high, t.h_prime)?.add(&phi(low, t.l_prime)?)),
    }
}

/// Paired perceptual loss, running only the translations `mode` needs.
pub fn perceptual_loss(
    g_h: &dyn Fn(&Tensor) -> Result<Tensor>,
    g_l: &dyn Fn(&Tensor) -> Result<Tensor>,
    low: &Tensor,
    high: &Tensor,
    mode: PerceptualMode,
    extractor: &FeatureExtractor,
    weights: &LayerWeights,
) -> Result<Tensor> {
    if low.shape() != high.shape() {
        return Err(Error::Shape(format!(
            "low and high batches differ: {:?} vs {:?}",
            low.shape(),
            high.shape()
        )));
    }
    let phi = |a: &Tensor, b: &Tensor| batch_mean_phi(extractor, weights, a, b);
    match mode {
        PerceptualMode::None => Ok(Tensor::constant(Array::scalar(0.0))),
        PerceptualMode::HighOnly => phi(high, &g_h(low)?),
        PerceptualMode::Both => Ok(phi(high, &g_h(low)?)?.add(&phi(low, &g_l(high)?)?)),
        PerceptualMode::CycleRecon => {
            let h_bar = g_h(&g_l(high)?)?;
            let l_bar = g_l(&g_h(low)?)?;
            Ok(phi(high, &h_bar)?.add(&phi(low, &l_bar)?))
        }
    }
}
