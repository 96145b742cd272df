//! Fixture builders shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uqgan_autograd::Array;
use uqgan_core::data::ImageTensor;
use uqgan_core::networks::{DiscriminatorConfig, GeneratorConfig};
use uqgan_core::perceptual::{FeatureExtractor, DEFAULT_TAPS};
use uqgan_core::trainer::{PerceptualSetup, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise in `[lo, hi)`.
pub fn uniform_plane(rng: &mut impl Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Smooth random field: bilinear upsampling of a coarse random grid.
fn value_noise(rng: &mut impl Rng, size: usize, cells: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let y = r as f64 / size as f64 * cells as f64;
            let x = c as f64 / size as f64 * cells as f64;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let at = |i: usize, j: usize| g[i * (cells + 1) + j];
            out[r * size + c] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

/// Natural-looking texture in `[-0.9, 0.9]`: oriented gratings over multi-octave noise.
pub fn texture(seed: u64, size: usize) -> Vec<f64> {
    let mut rng = rng(seed);
    let mut img = vec![0.0; size * size];
    for _ in 0..4 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let freq: f64 = rng.gen_range(0.05..0.35);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.2..0.6);
        for r in 0..size {
            for c in 0..size {
                let t = (c as f64 * theta.cos() + r as f64 * theta.sin()) * freq + phase;
                img[r * size + c] += amp * t.sin();
            }
        }
    }
    for (cells, amp) in [(4, 0.8), (8, 0.4), (16, 0.2)] {
        let n = value_noise(&mut rng, size, cells);
        img.iter_mut().zip(n).for_each(|(v, m)| *v += amp * m);
    }
    let (lo, hi) = img.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    img.iter().map(|v| (v - lo) / (hi - lo) * 1.8 - 0.9).collect()
}

/// Low-quality counterpart: 3x3 box blur, reduced contrast and multiplicative speckle.
pub fn degrade(plane: &[f64], size: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let speckle = Normal::new(1.0, 0.15).unwrap();
    let mut out = vec![0.0; plane.len()];
    for r in 0..size {
        for c in 0..size {
            let mut acc = 0.0;
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < size && (cc as usize) < size {
                        acc += plane[rr as usize * size + cc as usize];
                        n += 1.0;
                    }
                }
            }
            let v = (acc / n * 0.7 + 0.1) * speckle.sample(&mut rng);
            out[r * size + c] = v.clamp(-1.0, 1.0);
        }
    }
    out
}

/// Translation by `(dy, dx)` pixels with edge replication.
pub fn shift(plane: &[f64], size: usize, dy: i64, dx: i64) -> Vec<f64> {
    let clamp = |v: i64| v.clamp(0, size as i64 - 1) as usize;
    let mut out = vec![0.0; plane.len()];
    for r in 0..size {
        for c in 0..size {
            out[r * size + c] = plane[clamp(r as i64 - dy) * size + clamp(c as i64 - dx)];
        }
    }
    out
}

pub fn add_gaussian_noise(plane: &[f64], sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    plane.iter().map(|v| v + n.sample(&mut rng)).collect()
}

pub fn batch(planes: &[Vec<f64>], size: usize) -> ImageTensor {
    ImageTensor::from_planes(planes, size, size).unwrap()
}

pub fn array(planes: &[Vec<f64>], size: usize) -> Array {
    batch(planes, size).into_array()
}

/// Paired (low, high) batch of `n` textures.
pub fn pair_batch(n: usize, size: usize, seed: u64) -> (ImageTensor, ImageTensor) {
    let highs: Vec<Vec<f64>> = (0..n).map(|i| texture(seed + i as u64, size)).collect();
    let lows: Vec<Vec<f64>> = highs
        .iter()
        .enumerate()
        .map(|(i, h)| degrade(h, size, seed + 100 + i as u64))
        .collect();
    (batch(&lows, size), batch(&highs, size))
}

/// Small networks that train quickly on one core.
pub fn small_config(size: usize, base: usize, blocks: usize) -> TrainConfig {
    TrainConfig {
        image_size: size,
        batch_size: 2,
        generator: GeneratorConfig {
            base_channels: base,
            n_residual_blocks: blocks,
            ..Default::default()
        },
        discriminator: DiscriminatorConfig {
            base_channels: 8,
            input_size: size,
        },
        seed: 17,
        ..Default::default()
    }
}

pub fn small_perceptual() -> PerceptualSetup {
    PerceptualSetup::uniform(FeatureExtractor::random_fixed(7, 8, &DEFAULT_TAPS).unwrap())
}

fn to_u8(plane: &[f64]) -> Vec<u8> {
    plane.iter().map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn write_png(path: &Path, plane: &[f64], size: usize) {
    image::GrayImage::from_raw(size as u32, size as u32, to_u8(plane))
        .unwrap()
        .save(path)
        .unwrap();
}

/// Writes `low/` and `high/` PNG folders with `n` pairs named `p000`, `p001`, ...
/// With `identical`, each low image equals its high image.
pub fn write_pair_fixture(root: &Path, n: usize, size: usize, identical: bool) {
    std::fs::create_dir_all(root.join("low")).unwrap();
    std::fs::create_dir_all(root.join("high")).unwrap();
    for i in 0..n {
        let high = texture(1000 + i as u64, size);
        let low = if identical { high.clone() } else { degrade(&high, size, 2000 + i as u64) };
        write_png(&root.join("high").join(format!("p{i:03}.png")), &high, size);
        write_png(&root.join("low").join(format!("p{i:03}.png")), &low, size);
    }
}
