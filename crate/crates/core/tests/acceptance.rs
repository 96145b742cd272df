//! Acceptance suite: one PASS/FAIL line per criterion.

// `ensure!(a <= b)` negates comparisons on purpose so NaN counts as failure.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use uqgan_autograd::{check, Array, Tensor};
use uqgan_core::data::ImageTensor;
use uqgan_core::losses::{
    adversarial_loss, cycle_loss, discriminator_loss, identity_loss, total_generator_loss, LossParts,
    LossWeights, SmoothingPolicy,
};
use uqgan_core::metrics::{lncc, psnr, ssi, to_unit_range, MetricConfig, Plane};
use uqgan_core::networks::{
    build_discriminator, build_generator, spectral_normalize, DiscriminatorConfig, GeneratorConfig,
};
use uqgan_core::params::NamedArrays;
use uqgan_core::perceptual::{
    lpips_distance, FeatureExtractor, LayerWeights, PerceptualMode, DEFAULT_TAPS,
};
use uqgan_core::trainer::{scheduled_lr, train_step, StepRates, TrainState};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---- oracles ---------------------------------------------------------------

fn gaussian_2d(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (size / 2) as f64;
    let mut w = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (a, row) in w.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let d2 = (a as f64 - c).powi(2) + (b as f64 - c).powi(2);
            *v = (-d2 / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

/// Literal per-window structural similarity.
fn ssi_oracle(x: &[f64], y: &[f64], n: usize, cfg: &MetricConfig) -> f64 {
    let k = cfg.ssi_window;
    let w = gaussian_2d(k, cfg.ssi_sigma);
    let c1 = (cfg.ssi_k1 * cfg.data_range).powi(2);
    let c2 = (cfg.ssi_k2 * cfg.data_range).powi(2);
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=n - k {
        for j in 0..=n - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    mx += w[a][b] * x[(i + a) * n + j + b];
                    my += w[a][b] * y[(i + a) * n + j + b];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let dx = x[(i + a) * n + j + b] - mx;
                    let dy = y[(i + a) * n + j + b] - my;
                    vx += w[a][b] * dx * dx;
                    vy += w[a][b] * dy * dy;
                    cxy += w[a][b] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Literal per-window Pearson correlation with ε on each variance.
fn lncc_oracle(x: &[f64], y: &[f64], n: usize, cfg: &MetricConfig) -> f64 {
    let k = cfg.lncc_window;
    let area = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..=n - k {
        for j in 0..=n - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    mx += x[(i + a) * n + j + b];
                    my += y[(i + a) * n + j + b];
                }
            }
            mx /= area;
            my /= area;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let dx = x[(i + a) * n + j + b] - mx;
                    let dy = y[(i + a) * n + j + b] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            }
            let (vx, vy, cxy) = (vx / area, vy / area, cxy / area);
            total += cxy / ((vx + cfg.lncc_eps) * (vy + cfg.lncc_eps)).sqrt();
            count += 1;
        }
    }
    (total / count as f64).clamp(-1.0, 1.0)
}

fn psnr_oracle(x: &[f64], y: &[f64], range: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let d = x[i] - y[i];
        acc += d * d;
    }
    10.0 * (range * range / (acc / x.len() as f64)).log10()
}

fn plane(v: &[f64], n: usize) -> Plane<'_> {
    Plane::new(v, n, n).unwrap()
}

// ---- criteria --------------------------------------------------------------

fn metric_oracles() -> Check {
    let cfg = MetricConfig::default();
    let n = 32;
    let mut rng = common::rng(1);
    let (mut worst_ssi, mut worst_lncc) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = common::uniform_plane(&mut rng, n * n, 0.0, 1.0);
        // Correlated partner so both metrics take non-trivial values.
        let y: Vec<f64> = x.iter().map(|v| (0.6 * v + 0.4 * rng.gen::<f64>()).clamp(0.0, 1.0)).collect();
        let (px, py) = (plane(&x, n), plane(&y, n));
        worst_ssi = worst_ssi.max((ssi(&px, &py, &cfg).unwrap() - ssi_oracle(&x, &y, n, &cfg)).abs());
        worst_lncc = worst_lncc.max((lncc(&px, &py, &cfg).unwrap() - lncc_oracle(&x, &y, n, &cfg)).abs());
        let p = psnr(&px, &py, 1.0).unwrap();
        ensure!(p == psnr_oracle(&x, &y, 1.0), "psnr {p} differs from closed form");
    }
    ensure!(worst_ssi <= 1e-6, "SSI deviates from oracle by {worst_ssi:e}");
    ensure!(worst_lncc <= 1e-6, "LNCC deviates from oracle by {worst_lncc:e}");
    Ok(format!("max |ssi - oracle| = {worst_ssi:.1e}, max |lncc - oracle| = {worst_lncc:.1e}, psnr exact"))
}

fn metric_analytic() -> Check {
    let cfg = MetricConfig::default();
    let n = 32;
    let mut rng = common::rng(2);
    let x = common::uniform_plane(&mut rng, n * n, 0.0, 0.9);
    let c = 0.1;
    let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
    let p = psnr(&plane(&x, n), &plane(&shifted, n), 1.0).unwrap();
    let expected = 10.0 * (1.0 / (c * c)).log10();
    ensure!((p - expected).abs() <= 1e-9, "psnr(X, X+c) = {p}, closed form {expected}");
    let s = ssi(&plane(&x, n), &plane(&x, n), &cfg).unwrap();
    ensure!((s - 1.0).abs() <= 1e-12, "ssi(X, X) = {s}");
    let affine: Vec<f64> = x.iter().map(|v| 0.5 * v + 0.2).collect();
    let l_pos = lncc(&plane(&x, n), &plane(&affine, n), &cfg).unwrap();
    ensure!((l_pos - 1.0).abs() <= 1e-3, "lncc(X, aX+b) = {l_pos}");
    let inverted: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
    let l_neg = lncc(&plane(&x, n), &plane(&inverted, n), &cfg).unwrap();
    ensure!((l_neg + 1.0).abs() <= 1e-3, "lncc(X, 1-X) = {l_neg}");
    Ok(format!("psnr err {:.1e}, ssi(X,X) = {s}, lncc +{l_pos:.5} / {l_neg:.5}", (p - expected).abs()))
}

fn perceptual_properties() -> Check {
    let ext = FeatureExtractor::random_fixed(11, 4, &DEFAULT_TAPS).map_err(|e| e.to_string())?;
    let w = LayerWeights::uniform(ext.taps().len());
    let phi = |a: &Array, b: &Array| -> Vec<f64> {
        lpips_distance(&ext, &w, &Tensor::constant(a.clone()), &Tensor::constant(b.clone()))
            .unwrap()
            .value()
            .data()
            .to_vec()
    };
    // Random pairs, ten at a time.
    let n = 32;
    let mut rng = common::rng(3);
    let mut min_d = f64::MAX;
    let mut worst_sym = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..10 {
        let xs: Vec<Vec<f64>> = (0..10).map(|_| common::uniform_plane(&mut rng, n * n, -1.0, 1.0)).collect();
        let ys: Vec<Vec<f64>> = (0..10).map(|_| common::uniform_plane(&mut rng, n * n, -1.0, 1.0)).collect();
        let (x, y) = (common::array(&xs, n), common::array(&ys, n));
        let xy = phi(&x, &y);
        let yx = phi(&y, &x);
        let xx = phi(&x, &x);
        for i in 0..10 {
            min_d = min_d.min(xy[i]);
            worst_sym = worst_sym.max((xy[i] - yx[i]).abs());
            worst_self = worst_self.max(xx[i].abs());
        }
    }
    ensure!(worst_self == 0.0, "Φ(X, X) reaches {worst_self:e}");
    ensure!(worst_sym <= 1e-9, "asymmetry {worst_sym:e}");
    ensure!(min_d >= 0.0, "negative distance {min_d}");

    let size = 64;
    let mut wins = 0;
    for i in 0..10 {
        let x = common::texture(500 + i, size);
        let shifted = common::shift(&x, size, 2, 2);
        let noisy = common::add_gaussian_noise(&x, 0.3, 900 + i);
        let base = common::array(&[x.clone(), x], size);
        let other = common::array(&[shifted, noisy], size);
        let d = phi(&base, &other);
        if d[0] < d[1] {
            wins += 1;
        }
    }
    ensure!(wins >= 9, "shift ranked closer than noise on only {wins}/10 textures");
    Ok(format!("Φ(X,X)=0, asymmetry {worst_sym:.1e}, min Φ {min_d:.3}, shift<noise on {wins}/10"))
}

fn shape_contracts() -> Check {
    let g = build_generator(
        GeneratorConfig {
            base_channels: 8,
            n_residual_blocks: 2,
            ..Default::default()
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let mut rng = common::rng(4);
    let planes: Vec<Vec<f64>> = (0..2).map(|_| common::uniform_plane(&mut rng, 256 * 256, -1.0, 1.0)).collect();
    let x = common::batch(&planes, 256);
    let y = g.forward(&x).map_err(|e| e.to_string())?;
    ensure!(y.array().shape() == [2, 1, 256, 256], "generator output shape {:?}", y.array().shape());
    let (lo, hi) = y.array().data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    ensure!(lo > -1.0 && hi < 1.0, "generator output range [{lo}, {hi}]");
    let default_layout = GeneratorConfig::default().layout();
    ensure!(
        default_layout.iter().any(|(n, s)| n == "res.14.conv2.weight" && s == &vec![256, 256, 3, 3]),
        "default generator lacks a 15th 256-channel residual block"
    );

    let mut d = build_discriminator(DiscriminatorConfig::default(), 6).map_err(|e| e.to_string())?;
    let one = ImageTensor::new(x.array().slice_outer(0, 1)).unwrap();
    let scores = d.forward(&one, false).map_err(|e| e.to_string())?;
    ensure!(scores.shape() == [1, 1, 30, 30], "discriminator grid {:?}", scores.shape());
    Ok(format!("G: (2,1,256,256) in [{lo:.3}, {hi:.3}]; D(256x256) -> 30x30x1"))
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    DMatrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

fn random_unit(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

/// σ_max of `w / σ̂` by SVD, where σ̂ comes from 20 power iterations.
fn normalized_sigma(rng: &mut impl Rng, w: &DMatrix<f64>) -> Result<f64, String> {
    let (rows, cols) = w.shape();
    let row_major: Vec<f64> = (0..rows).flat_map(|r| (0..cols).map(move |c| w[(r, c)])).collect();
    let u0 = random_unit(rng, rows);
    let sn = spectral_normalize(&Array::from_vec(&[rows, cols], row_major), &u0, 20).map_err(|e| e.to_string())?;
    Ok(DMatrix::from_row_slice(rows, cols, sn.weight.data()).singular_values().max())
}

fn spectral_norm() -> Check {
    let mut rng = common::rng(5);
    // Power iteration converges at rate σ2/σ1, so the test weights have random
    // orthogonal factors and a spectrum whose top value leads by at least 1.25x.
    let mut worst = 0.0f64;
    for t in 0..20 {
        let rows = 4 + t % 13;
        let cols = rows + 8 * (t % 5);
        let u = gaussian_matrix(&mut rng, rows, rows).qr().q();
        let v = gaussian_matrix(&mut rng, cols, rows).qr().q();
        let scale: f64 = rng.gen_range(0.5..5.0);
        let mut s: Vec<f64> = (1..rows).map(|_| rng.gen_range(0.05..0.8)).collect();
        s.insert(0, 1.0);
        let w = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s)) * v.transpose() * scale;
        ensure!(w.rank(1e-10) == rows, "weight {t} is not full rank");
        let sigma = normalized_sigma(&mut rng, &w)?;
        worst = worst.max((sigma - 1.0).abs());
        ensure!((0.99..=1.01).contains(&sigma), "weight {t} ({rows}x{cols}): σ_max after normalization = {sigma}");
    }
    // Reported only: i.i.d. Gaussian weights often have near-tied top singular values.
    let iid_ok = (0..20)
        .filter(|_| {
            let w = gaussian_matrix(&mut rng, 16, 128);
            normalized_sigma(&mut rng, &w).is_ok_and(|s| (0.99..=1.01).contains(&s))
        })
        .count();
    let diag = Array::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]);
    let sn = spectral_normalize(&diag, &[0.6, 0.8], 20).map_err(|e| e.to_string())?;
    let expected = [1.0, 0.0, 0.0, 0.5];
    let err = sn.weight.data().iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(err <= 1e-9, "diag(2,1) normalized to {:?}", sn.weight.data());
    Ok(format!(
        "max |σ_max - 1| = {worst:.1e} over 20 weights; diag(2,1) error {err:.1e}; (info: {iid_ok}/20 i.i.d. 16x128 within 1%)"
    ))
}

fn loss_identities() -> Check {
    let (low, high) = common::pair_batch(2, 16, 6);
    let (l, h) = (low.to_tensor(), high.to_tensor());
    let c = cycle_loss(&h, &h, &l, &l).map_err(|e| e.to_string())?.value().item();
    let ident = |x: &Tensor| Ok(x.clone());
    let i = identity_loss(&ident, &ident, &h, &l).map_err(|e| e.to_string())?.value().item();
    ensure!(c == 0.0 && i == 0.0, "identity generators give cycle {c}, id {i}");
    let ones = LossParts { adv: 1.0, cycle: 1.0, id: 1.0, per: 1.0 };
    let total = total_generator_loss(&ones, &LossWeights::default()).map_err(|e| e.to_string())?;
    ensure!(total == 15.0, "unit parts give {total}");
    let p = SmoothingPolicy::default();
    let grid = [0.0, 0.5, 0.8999999, 0.9, 0.9000001, 0.95, 1.0];
    for &mh in &grid {
        for &ml in &grid {
            let expected = if mh < 0.9 && ml < 0.9 { 1.0 } else { 0.9 };
            ensure!(p.target(mh, ml) == expected, "target({mh}, {ml}) = {}", p.target(mh, ml));
        }
    }
    ensure!(p.target(0.9, 0.9) == 0.9, "boundary 0.9 must select the soft target");
    Ok("cycle = id = 0 under identity, total = 15, soft target at 0.9".into())
}

fn gradient_check() -> Check {
    let cfg = GeneratorConfig {
        base_channels: 4,
        n_residual_blocks: 1,
        ..Default::default()
    };
    let mut g = build_generator(cfg, 8).map_err(|e| e.to_string())?;
    // Checked at He-scaled weights: at the N(0, 0.02) init, a step of 1e-3 is a
    // 5% relative perturbation of a typical weight feeding instance norm.
    let mut rng = common::rng(10);
    for a in g.arrays_mut().arrays_mut().filter(|a| a.ndim() == 4) {
        let fan_in: usize = a.shape()[1..].iter().product();
        let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        a.data_mut().iter_mut().for_each(|v| *v = n.sample(&mut rng));
    }
    let (low, high) = common::pair_batch(1, 16, 9);
    let x = low.to_tensor();
    let target = high.to_tensor();
    let loss_of = |arrays: &NamedArrays| -> f64 {
        let p = arrays.bind(false);
        g.forward_graph(&p, &x).unwrap().sub(&target).square().mean().value().item()
    };
    let bound = g.bind(true);
    let loss = g.forward_graph(&bound, &x).unwrap().sub(&target).square().mean();
    let grads = loss.backward();
    let names: Vec<String> = g.arrays().names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    let (mut checked, mut kinked) = (0, 0);
    let h = 1e-3;
    while checked < 50 {
        let k = rng.gen_range(0..names.len());
        let name = &names[k];
        // Biases ahead of instance norm have identically zero gradient; sample weights and the head bias.
        if name.ends_with(".bias") && name != "head.conv.bias" {
            continue;
        }
        let arr = g.arrays().get(name).unwrap();
        let idx = rng.gen_range(0..arr.len());
        let diff = |step: f64| {
            check::central_difference(
                |a| {
                    let mut arrays = g.arrays().clone();
                    *arrays.get_mut(name).unwrap() = a.clone();
                    loss_of(&arrays)
                },
                arr,
                idx,
                step,
            )
        };
        let numeric = diff(h);
        // A ReLU switching state inside the stencil makes the difference quotient
        // depend on the step; such coordinates are skipped, independently of autodiff.
        if check::relative_error(numeric, diff(h / 2.0), 1e-7) > 1e-3 {
            kinked += 1;
            continue;
        }
        let analytic = grads.get(&bound.tensors()[k]).map_or(0.0, |a| a.data()[idx]);
        let err = check::relative_error(analytic, numeric, 1e-7);
        ensure!(err <= 1e-2, "{name}[{idx}]: autodiff {analytic:e} vs finite difference {numeric:e}");
        worst = worst.max(err);
        checked += 1;
    }
    Ok(format!("50 parameters at h=1e-3, max relative error {worst:.2e} ({kinked} kink-crossing coordinates skipped)"))
}

fn gradient_isolation() -> Check {
    let size = 32;
    let cfg = common::small_config(size, 4, 1);
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let (low, high) = common::pair_batch(2, size, 11);
    let (l, h) = (low.to_tensor(), high.to_tensor());

    let bgh = state.g_h.bind(true);
    let bgl = state.g_l.bind(true);
    let fake_h = state.g_h.forward_graph(&bgh, &l).unwrap();
    let fake_l = state.g_l.forward_graph(&bgl, &h).unwrap();
    let bdh = state.d_h.bind(true);
    let bdl = state.d_l.bind(true);
    let (d_loss, _) = discriminator_loss(
        &mut state.d_h, &bdh, &mut state.d_l, &bdl, &h, &l, &fake_h, &fake_l, &cfg.smoothing,
    )
    .map_err(|e| e.to_string())?;
    let grads = d_loss.backward();
    let g_norm = bgh.gradient_norm(&grads) + bgl.gradient_norm(&grads);
    let d_norm = bdh.gradient_norm(&grads) + bdl.gradient_norm(&grads);
    ensure!(g_norm < 1e-12, "discriminator loss reaches the generators (norm {g_norm:e})");
    ensure!(d_norm > 0.0, "discriminator loss has no discriminator gradient");

    let bgh = state.g_h.bind(true);
    let bgl = state.g_l.bind(true);
    let h_bar = state.g_h.forward_graph(&bgh, &state.g_l.forward_graph(&bgl, &h).unwrap()).unwrap();
    let l_bar = state.g_l.forward_graph(&bgl, &state.g_h.forward_graph(&bgh, &l).unwrap()).unwrap();
    let adv = adversarial_loss(&state.d_h, &state.d_l, &h_bar, &l_bar).map_err(|e| e.to_string())?;
    let grads = adv.backward();
    let g_norm = bgh.gradient_norm(&grads) + bgl.gradient_norm(&grads);
    let generator_leaves = bgh.tensors().len() + bgl.tensors().len();
    // Every leaf holding a gradient must be a generator parameter.
    let stray = grads.len() - bgh.gradients(&grads).iter().chain(bgl.gradients(&grads).iter()).filter(|g| g.is_some()).count();
    ensure!(g_norm > 0.0, "adversarial loss has no generator gradient");
    ensure!(stray == 0, "adversarial loss reaches {stray} non-generator leaves");
    ensure!(grads.len() <= generator_leaves, "unexpected gradient leaves");
    Ok(format!("|∇G L_D| = 0 (|∇D L_D| = {d_norm:.2e}); L_adv reaches {} leaves, all generator", grads.len()))
}

fn scheduler() -> Check {
    let a = scheduled_lr(3e-4, 100, 100, 0.5);
    let b = scheduled_lr(3e-3, 250, 100, 0.5);
    ensure!(a == 1.5e-4, "lr(3e-4, 100) = {a}");
    ensure!(b == 7.5e-4, "lr(3e-3, 250) = {b}");
    ensure!(scheduled_lr(3e-4, 0, 100, 0.5) == 3e-4, "lr(3e-4, 0) changed");
    Ok(format!("lr(3e-4,100) = {a}, lr(3e-3,250) = {b}"))
}

fn fixture_ssi(state: &TrainState, low: &ImageTensor, high: &ImageTensor, size: usize) -> f64 {
    let out = state.g_h.forward(low).unwrap();
    let cfg = MetricConfig::default();
    (0..low.batch())
        .map(|i| {
            let a = to_unit_range(out.plane(i));
            let b = to_unit_range(high.plane(i));
            ssi(&plane(&a, size), &plane(&b, size), &cfg).unwrap()
        })
        .sum::<f64>()
        / low.batch() as f64
}

fn overfit() -> Check {
    let size = 64;
    let cfg = common::small_config(size, 16, 2);
    let perceptual = common::small_perceptual();
    let (low, high) = common::pair_batch(2, size, 12);
    let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let ssi0 = fixture_ssi(&state, &low, &high, size);
    let rates = StepRates::for_epoch(&cfg, 0);
    let mut totals = Vec::with_capacity(200);
    for _ in 0..200 {
        let ledger = train_step(&mut state, &low, &high, &cfg, &perceptual, rates).map_err(|e| e.to_string())?;
        totals.push(ledger.total_gen);
    }
    let ma = |end: usize| totals[end - 10..end].iter().sum::<f64>() / 10.0;
    let (early, late) = (ma(10), ma(200));
    let ssi200 = fixture_ssi(&state, &low, &high, size);
    ensure!(late <= 0.5 * early, "moving average fell only from {early:.4} to {late:.4}");
    ensure!(ssi200 > ssi0, "SSI did not improve: {ssi0:.4} -> {ssi200:.4}");
    Ok(format!("total_gen MA {early:.3} -> {late:.3} ({:.0}% drop), SSI {ssi0:.3} -> {ssi200:.3}", 100.0 * (1.0 - late / early)))
}

fn determinism() -> Check {
    let size = 32;
    let cfg = common::small_config(size, 4, 1);
    let perceptual = common::small_perceptual();
    let batches: Vec<(ImageTensor, ImageTensor)> = (0..10).map(|i| common::pair_batch(2, size, 40 + 3 * i)).collect();
    let rates = StepRates::for_epoch(&cfg, 0);
    let run = |state: &mut TrainState, range: std::ops::Range<usize>| -> Vec<[u64; 9]> {
        range
            .map(|i| {
                let l = train_step(state, &batches[i].0, &batches[i].1, &cfg, &perceptual, rates).unwrap();
                [l.adv, l.cycle, l.id, l.per, l.total_gen, l.d_high, l.d_low, l.d_total, l.smoothing_target_used]
                    .map(f64::to_bits)
            })
            .collect()
    };
    let mut a = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let mut b = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    ensure!(run(&mut a, 0..5) == run(&mut b, 0..5), "two seeded runs diverge within 5 steps");

    let mut straight = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let reference = run(&mut straight, 0..10);
    let mut first = TrainState::new(&cfg).map_err(|e| e.to_string())?;
    let mut resumed = run(&mut first, 0..5);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("mid.ckpt");
    first.save(&path).map_err(|e| e.to_string())?;
    let mut second = TrainState::load(&path, &cfg).map_err(|e| e.to_string())?;
    ensure!(second == first, "loaded state differs from saved state");
    resumed.extend(run(&mut second, 5..10));
    ensure!(resumed == reference, "train-5/save/load/train-5 differs from train-10");
    ensure!(second == straight, "final states differ after resume");
    Ok("5-step ledgers bitwise equal; resumed 10-step run bitwise equal".into())
}

fn ablation() -> Check {
    let size = 32;
    let perceptual = common::small_perceptual();
    let (low, high) = common::pair_batch(2, size, 13);
    let mut per = Vec::new();
    for mode in [PerceptualMode::None, PerceptualMode::CycleRecon, PerceptualMode::HighOnly, PerceptualMode::Both] {
        let cfg = uqgan_core::trainer::TrainConfig {
            perceptual_mode: mode,
            ..common::small_config(size, 4, 1)
        };
        let mut state = TrainState::new(&cfg).map_err(|e| e.to_string())?;
        let rates = StepRates::for_epoch(&cfg, 0);
        let ledgers: Vec<f64> = (0..3)
            .map(|_| train_step(&mut state, &low, &high, &cfg, &perceptual, rates).unwrap().per)
            .collect();
        if mode == PerceptualMode::None {
            ensure!(ledgers.iter().all(|&p| p == 0.0), "mode none logged per = {ledgers:?}");
        }
        per.push((mode, ledgers[0]));
    }
    for i in 0..per.len() {
        for j in i + 1..per.len() {
            ensure!(per[i].1 != per[j].1, "{} and {} give the same per {}", per[i].0, per[j].0, per[i].1);
        }
    }
    Ok(per.iter().map(|(m, p)| format!("{m}={p:.4}")).collect::<Vec<_>>().join(", "))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("metric oracle equivalence", metric_oracles),
        ("metric analytic cases", metric_analytic),
        ("perceptual distance properties", perceptual_properties),
        ("shape and range contracts", shape_contracts),
        ("spectral normalization", spectral_norm),
        ("loss identities", loss_identities),
        ("generator gradient check", gradient_check),
        ("gradient isolation", gradient_isolation),
        ("learning-rate schedule", scheduler),
        ("overfit smoke test", overfit),
        ("determinism and checkpoint resume", determinism),
        ("perceptual ablation plumbing", ablation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let started = Instant::now();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {failed} failed, total {:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
