//! Two-time-scale training loop, checkpoints and logs.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uqgan_autograd::{Array, Tensor};

use crate::checkpoint::Archive;
use crate::data::{
    load_pair_manifest, make_batches_prefetched, split_train_val, ImageTensor, PairManifest,
    SplitSpec, DEFAULT_IMAGE_SIZE,
};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, cycle_loss, discriminator_loss, identity_loss, weighted_generator_loss,
    AdvTarget, LossLedger, LossWeights, SmoothingPolicy,
};
use crate::metrics::{evaluate_set, MetricConfig};
use crate::networks::{
    build_discriminator, build_generator, DiscriminatorConfig, DiscriminatorParams,
    GeneratorConfig, GeneratorParams,
};
use crate::optim::{Adam, GradScaler};
use crate::params::NamedArrays;
use crate::perceptual::{perceptual_terms, FeatureExtractor, LayerWeights, PerceptualMode, Translations};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub sched_step: usize,
    pub sched_gamma: f64,
    pub loss_weights: LossWeights,
    pub smoothing: SmoothingPolicy,
    pub perceptual_mode: PerceptualMode,
    pub adv_on: AdvTarget,
    pub grad_scaling: bool,
    pub seed: u64,
    pub val_every: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub train_fraction: f64,
    pub image_size: usize,
    pub prefetch: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub metrics: MetricConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 24,
            lr_gen: 3e-4,
            lr_disc: 3e-3,
            beta1: 0.9,
            beta2: 0.9,
            sched_step: 100,
            sched_gamma: 0.5,
            loss_weights: LossWeights::default(),
            smoothing: SmoothingPolicy::default(),
            perceptual_mode: PerceptualMode::Both,
            adv_on: AdvTarget::Cycled,
            grad_scaling: false,
            seed: 0,
            val_every: 1,
            checkpoint_every: 10,
            train_fraction: 0.9,
            image_size: DEFAULT_IMAGE_SIZE,
            prefetch: 2,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            metrics: MetricConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        // Zero rates are allowed so that a step can be run without moving parameters.
        for (name, v) in [("lr_gen", self.lr_gen), ("lr_disc", self.lr_disc)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.sched_step == 0 || !(self.sched_gamma > 0.0 && self.sched_gamma.is_finite()) {
            return bad("sched_step must be positive and sched_gamma finite and positive".into());
        }
        if self.val_every == 0 {
            return bad("val_every must be at least 1".into());
        }
        let s = &self.smoothing;
        if !(0.0 < s.soft_target && s.soft_target <= s.hard_target && s.hard_target <= 1.0) {
            return bad(format!(
                "smoothing targets must satisfy 0 < soft <= hard <= 1, got {} / {}",
                s.soft_target, s.hard_target
            ));
        }
        if self.discriminator.input_size != self.image_size {
            return bad(format!(
                "discriminator input size {} differs from image_size {}",
                self.discriminator.input_size, self.image_size
            ));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.metrics.validate()
    }
}

/// `base_lr · gamma^⌊epoch / step_epochs⌋`.
pub fn scheduled_lr(base_lr: f64, epoch: usize, step_epochs: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step_epochs) as i32)
}

/// Feature extractor and per-tap weights used by the perceptual term.
pub struct PerceptualSetup {
    pub extractor: FeatureExtractor,
    pub weights: LayerWeights,
}

impl PerceptualSetup {
    pub fn new(extractor: FeatureExtractor, weights: LayerWeights) -> Result<Self> {
        if weights.values().len() != extractor.taps().len() {
            return Err(Error::Config(format!(
                "{} layer weights for {} feature taps",
                weights.values().len(),
                extractor.taps().len()
            )));
        }
        Ok(Self { extractor, weights })
    }

    /// Extractor with equal weights on each tap.
    pub fn uniform(extractor: FeatureExtractor) -> Self {
        let weights = LayerWeights::uniform(extractor.taps().len());
        Self { extractor, weights }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g_h: GeneratorParams,
    pub g_l: GeneratorParams,
    pub d_h: DiscriminatorParams,
    pub d_l: DiscriminatorParams,
    /// Shared by both generators.
    pub opt_g: Adam,
    /// Shared by both discriminators.
    pub opt_d: Adam,
    pub scaler: GradScaler,
    /// Epochs completed.
    pub epoch: usize,
    /// Batches completed within the current epoch.
    pub batch_cursor: usize,
    pub global_step: u64,
    /// Shuffle seed of the current epoch.
    pub epoch_seed: u64,
    pub rng: ChaCha8Rng,
}

type Layout = Vec<(String, Vec<usize>)>;

fn prefixed_layout(groups: &[(&str, Layout)]) -> Layout {
    groups
        .iter()
        .flat_map(|(p, layout)| layout.iter().map(move |(n, s)| (format!("{p}/{n}"), s.clone())))
        .collect()
}

fn gen_layout(cfg: &TrainConfig) -> Vec<(String, Vec<usize>)> {
    let l = cfg.generator.layout();
    prefixed_layout(&[("g_h", l.clone()), ("g_l", l)])
}

fn disc_layout(cfg: &TrainConfig) -> Vec<(String, Vec<usize>)> {
    let l = cfg.discriminator.layout();
    prefixed_layout(&[("d_h", l.clone()), ("d_l", l)])
}

impl TrainState {
    /// Fresh, seeded networks and optimizers.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let epoch_seed = rng.gen();
        Ok(Self {
            g_h: build_generator(cfg.generator, s.wrapping_add(1))?,
            g_l: build_generator(cfg.generator, s.wrapping_add(2))?,
            d_h: build_discriminator(cfg.discriminator, s.wrapping_add(3))?,
            d_l: build_discriminator(cfg.discriminator, s.wrapping_add(4))?,
            opt_g: Adam::new(&gen_layout(cfg), cfg.beta1, cfg.beta2),
            opt_d: Adam::new(&disc_layout(cfg), cfg.beta1, cfg.beta2),
            scaler: GradScaler::new(cfg.grad_scaling),
            epoch: 0,
            batch_cursor: 0,
            global_step: 0,
            epoch_seed,
            rng,
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let g = self.g_h.config();
        let d = self.d_h.config();
        a.insert_i64(
            "config/generator",
            [g.base_channels, g.n_residual_blocks, g.n_downsamples, g.first_kernel]
                .map(|v| v as i64)
                .to_vec(),
        );
        a.insert_i64("config/discriminator", vec![d.base_channels as i64, d.input_size as i64]);
        for (prefix, arrays) in [
            ("g_h", self.g_h.arrays()),
            ("g_l", self.g_l.arrays()),
            ("d_h", self.d_h.arrays()),
            ("d_l", self.d_l.arrays()),
            ("d_h", self.d_h.u_vectors()),
            ("d_l", self.d_l.u_vectors()),
        ] {
            for (name, arr) in arrays.iter() {
                a.insert_f64(format!("{prefix}/{name}"), arr.clone());
            }
        }
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (name, m) in opt.names().iter().zip(opt.first_moments()) {
                a.insert_f64(format!("{prefix}/m/{name}"), m.clone());
            }
            for (name, v) in opt.names().iter().zip(opt.second_moments()) {
                a.insert_f64(format!("{prefix}/v/{name}"), v.clone());
            }
            a.insert_i64(format!("{prefix}/step"), vec![opt.step_count() as i64]);
        }
        a.insert_f64("scaler/scale", Array::from_vec(&[1], vec![self.scaler.scale]));
        a.insert_i64(
            "scaler/state",
            vec![self.scaler.enabled as i64, self.scaler.clean_steps() as i64],
        );
        a.insert_i64(
            "state/counters",
            vec![
                self.epoch as i64,
                self.batch_cursor as i64,
                self.global_step as i64,
                self.epoch_seed as i64,
            ],
        );
        let seed = self.rng.get_seed();
        a.insert_i64(
            "rng/seed",
            seed.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
        let pos = self.rng.get_word_pos();
        a.insert_i64(
            "rng/position",
            vec![self.rng.get_stream() as i64, pos as u64 as i64, (pos >> 64) as u64 as i64],
        );
        a
    }

    /// Atomically writes the full state.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    /// Loads a checkpoint that must match the network layout of `cfg`.
    pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, cfg)
    }

    pub fn from_archive(a: &Archive, cfg: &TrainConfig) -> Result<Self> {
        let g_h = GeneratorParams::from_arrays(cfg.generator, take_group(a, "g_h", &cfg.generator.layout())?)?;
        let g_l = GeneratorParams::from_arrays(cfg.generator, take_group(a, "g_l", &cfg.generator.layout())?)?;
        let dl = cfg.discriminator.layout();
        let ul = cfg.discriminator.u_layout();
        let d_h = DiscriminatorParams::from_arrays(cfg.discriminator, take_group(a, "d_h", &dl)?, take_group(a, "d_h", &ul)?)?;
        let d_l = DiscriminatorParams::from_arrays(cfg.discriminator, take_group(a, "d_l", &dl)?, take_group(a, "d_l", &ul)?)?;
        let expected_names: usize = 4 + 2 * (cfg.generator.layout().len() + dl.len() + ul.len());
        let known = |n: &str| ["g_h/", "g_l/", "d_h/", "d_l/"].iter().any(|p| n.starts_with(p));
        let present = a.names().filter(|n| known(n)).count();
        if present + 4 != expected_names {
            let extra = a
                .names()
                .filter(|n| known(n))
                .find(|n| !is_expected(n, cfg))
                .unwrap_or("?");
            return Err(Error::Mismatch(format!(
                "checkpoint holds array `{extra}` that the configured networks do not have"
            )));
        }
        let opt_g = take_adam(a, "opt_g", &gen_layout(cfg), cfg)?;
        let opt_d = take_adam(a, "opt_d", &disc_layout(cfg), cfg)?;
        let scale = a
            .f64_array("scaler/scale")
            .ok_or_else(|| missing("scaler/scale"))?
            .data()[0];
        let sstate = ints(a, "scaler/state", 2)?;
        let counters = ints(a, "state/counters", 4)?;
        let seed_words = ints(a, "rng/seed", 4)?;
        let pos = ints(a, "rng/position", 3)?;
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(seed_words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(pos[0] as u64);
        rng.set_word_pos((pos[1] as u64 as u128) | ((pos[2] as u64 as u128) << 64));
        Ok(Self {
            g_h,
            g_l,
            d_h,
            d_l,
            opt_g,
            opt_d,
            scaler: GradScaler::with_state(sstate[0] != 0, scale, sstate[1] as u64),
            epoch: counters[0] as usize,
            batch_cursor: counters[1] as usize,
            global_step: counters[2] as u64,
            epoch_seed: counters[3] as u64,
            rng,
        })
    }
}

fn is_expected(name: &str, cfg: &TrainConfig) -> bool {
    let (prefix, rest) = name.split_once('/').unwrap_or(("", name));
    let layout = match prefix {
        "g_h" | "g_l" => cfg.generator.layout(),
        _ => {
            let mut l = cfg.discriminator.layout();
            l.extend(cfg.discriminator.u_layout());
            l
        }
    };
    layout.iter().any(|(n, _)| n == rest)
}

fn missing(name: &str) -> Error {
    Error::Mismatch(format!("checkpoint lacks `{name}`"))
}

fn ints<'a>(a: &'a Archive, name: &str, n: usize) -> Result<&'a [i64]> {
    let v = a.i64_values(name).ok_or_else(|| missing(name))?;
    if v.len() != n {
        return Err(Error::Mismatch(format!("`{name}` holds {} values, expected {n}", v.len())));
    }
    Ok(v)
}

fn take_array(a: &Archive, name: &str, shape: &[usize]) -> Result<Array> {
    let arr = a.f64_array(name).ok_or_else(|| missing(name))?;
    if arr.shape() != shape {
        return Err(Error::Mismatch(format!(
            "`{name}` has shape {:?} in the checkpoint, expected {shape:?}",
            arr.shape()
        )));
    }
    Ok(arr.clone())
}

fn take_group(a: &Archive, prefix: &str, layout: &[(String, Vec<usize>)]) -> Result<NamedArrays> {
    let mut out = NamedArrays::new();
    for (name, shape) in layout {
        out.push(name.clone(), take_array(a, &format!("{prefix}/{name}"), shape)?);
    }
    Ok(out)
}

fn take_adam(a: &Archive, prefix: &str, layout: &[(String, Vec<usize>)], cfg: &TrainConfig) -> Result<Adam> {
    let mut m = Vec::with_capacity(layout.len());
    let mut v = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        m.push(take_array(a, &format!("{prefix}/m/{name}"), shape)?);
        v.push(take_array(a, &format!("{prefix}/v/{name}"), shape)?);
    }
    let step = ints(a, &format!("{prefix}/step"), 1)?[0] as u64;
    Adam::from_state(layout, cfg.beta1, cfg.beta2, m, v, step)
}

/// Loads only G_H from a training checkpoint (or any archive with `g_h/` arrays).
pub fn load_enhancer(path: &Path) -> Result<GeneratorParams> {
    let a = Archive::read(path)?;
    let mut arrays = NamedArrays::new();
    for name in a.names() {
        if let Some(rest) = name.strip_prefix("g_h/") {
            let arr = a.f64_array(name).ok_or_else(|| {
                Error::Mismatch(format!("`{name}` is not a float64 array"))
            })?;
            arrays.push(rest, arr.clone());
        }
    }
    if arrays.is_empty() {
        return Err(Error::Mismatch(format!("{} holds no `g_h/` arrays", path.display())));
    }
    let config = GeneratorConfig::infer(&arrays)?;
    let ordered = config
        .layout()
        .iter()
        .map(|(n, s)| {
            let arr = arrays.get(n).ok_or_else(|| missing(&format!("g_h/{n}")))?;
            if arr.shape() != s.as_slice() {
                return Err(Error::Mismatch(format!("`g_h/{n}` has shape {:?}, expected {s:?}", arr.shape())));
            }
            Ok((n.clone(), arr.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut named = NamedArrays::new();
    for (n, arr) in ordered {
        named.push(n, arr);
    }
    GeneratorParams::from_arrays(config, named)
}

/// Learning rates in force for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRates {
    pub lr_gen: f64,
    pub lr_disc: f64,
}

impl StepRates {
    pub fn for_epoch(cfg: &TrainConfig, epoch: usize) -> Self {
        Self {
            lr_gen: scheduled_lr(cfg.lr_gen, epoch, cfg.sched_step, cfg.sched_gamma),
            lr_disc: scheduled_lr(cfg.lr_disc, epoch, cfg.sched_step, cfg.sched_gamma),
        }
    }
}

/// One generator update followed by one discriminator update.
pub fn train_step(
    state: &mut TrainState,
    low: &ImageTensor,
    high: &ImageTensor,
    cfg: &TrainConfig,
    perceptual: &PerceptualSetup,
    rates: StepRates,
) -> Result<LossLedger> {
    if low.array().shape() != high.array().shape() {
        return Err(Error::Shape(format!(
            "low and high batches differ: {:?} vs {:?}",
            low.array().shape(),
            high.array().shape()
        )));
    }
    let l = low.to_tensor();
    let h = high.to_tensor();

    // Generators.
    let bound_gh = state.g_h.bind(true);
    let bound_gl = state.g_l.bind(true);
    let g_h = |x: &Tensor| state.g_h.forward_graph(&bound_gh, x);
    let g_l = |x: &Tensor| state.g_l.forward_graph(&bound_gl, x);
    let h_prime = g_h(&l)?;
    let l_prime = g_l(&h)?;
    let h_bar = g_h(&l_prime)?;
    let l_bar = g_l(&h_prime)?;
    let adv = match cfg.adv_on {
        AdvTarget::Cycled => adversarial_loss(&state.d_h, &state.d_l, &h_bar, &l_bar)?,
        AdvTarget::Translated => adversarial_loss(&state.d_h, &state.d_l, &h_prime, &l_prime)?,
    };
    let cycle = cycle_loss(&h, &h_bar, &l, &l_bar)?;
    let id = identity_loss(&g_h, &g_l, &h, &l)?;
    let translations = Translations {
        h_prime: &h_prime,
        l_prime: &l_prime,
        h_bar: &h_bar,
        l_bar: &l_bar,
    };
    let per = perceptual_terms(
        cfg.perceptual_mode,
        &l,
        &h,
        &translations,
        &perceptual.extractor,
        &perceptual.weights,
    )?;
    let (total, parts, total_gen) = weighted_generator_loss(&adv, &cycle, &id, &per, &cfg.loss_weights)?;
    let grads = total.scale(state.scaler.loss_factor()).backward();
    let mut g_grads = bound_gh.gradients(&grads);
    g_grads.extend(bound_gl.gradients(&grads));
    drop(grads);
    let gen_ok = state.scaler.unscale(&mut g_grads);
    if gen_ok {
        let params = state
            .g_h
            .arrays_mut()
            .arrays_mut()
            .chain(state.g_l.arrays_mut().arrays_mut());
        state.opt_g.step(params, &g_grads, rates.lr_gen);
    }

    // Discriminators, against fakes from the updated generators.
    let fake_h = state.g_h.forward(low)?.to_tensor();
    let fake_l = state.g_l.forward(high)?.to_tensor();
    let bound_dh = state.d_h.bind(true);
    let bound_dl = state.d_l.bind(true);
    let (d_total, terms) = discriminator_loss(
        &mut state.d_h,
        &bound_dh,
        &mut state.d_l,
        &bound_dl,
        &h,
        &l,
        &fake_h,
        &fake_l,
        &cfg.smoothing,
    )?;
    let grads = d_total.scale(state.scaler.loss_factor()).backward();
    let mut d_grads = bound_dh.gradients(&grads);
    d_grads.extend(bound_dl.gradients(&grads));
    let disc_ok = state.scaler.unscale(&mut d_grads);
    if disc_ok {
        let params = state
            .d_h
            .arrays_mut()
            .arrays_mut()
            .chain(state.d_l.arrays_mut().arrays_mut());
        state.opt_d.step(params, &d_grads, rates.lr_disc);
    }
    if !gen_ok || !disc_ok {
        log::warn!(
            "step {}: non-finite scaled gradients, update skipped; loss scale now {}",
            state.global_step,
            state.scaler.scale
        );
    }
    state.global_step += 1;

    Ok(LossLedger {
        adv: parts.adv,
        cycle: parts.cycle,
        id: parts.id,
        per: parts.per,
        total_gen,
        d_high: terms.d_high,
        d_low: terms.d_low,
        d_total: terms.d_total,
        smoothing_target_used: terms.target,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScores {
    pub ssi: f64,
    pub lncc: f64,
    /// `None` when every pair reached infinite PSNR.
    pub psnr: Option<f64>,
}

/// Scores the current G_H on `val`; never touches the state.
pub fn validate(state: &TrainState, val: &PairManifest, cfg: &TrainConfig) -> Result<ValidationScores> {
    let report = evaluate_set(&state.g_h, val, cfg.image_size, &cfg.metrics)?;
    Ok(ValidationScores {
        ssi: report.aggregate.ssi,
        lncc: report.aggregate.lncc,
        psnr: report.aggregate.psnr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub ledger: LossLedger,
    pub lr_gen: f64,
    pub lr_disc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRow {
    pub epoch: usize,
    pub scores: ValidationScores,
}

pub const TRAIN_LOG_HEADER: [&str; 11] = [
    "epoch", "step", "adv", "cycle", "id", "per", "total_gen", "d_total", "smooth_target", "lr_gen", "lr_disc",
];
pub const VAL_LOG_HEADER: [&str; 4] = ["epoch", "val_ssi", "val_lncc", "val_psnr"];
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const VAL_LOG_FILE: &str = "val_log.csv";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub val_rows: Vec<ValRow>,
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Data(format!("{}: {e}", path.display()))
}

impl TrainLog {
    pub fn write_train_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
        w.write_record(TRAIN_LOG_HEADER).map_err(csv_error(path))?;
        for r in &self.rows {
            let l = &r.ledger;
            let rec = [
                r.epoch.to_string(),
                r.step.to_string(),
                l.adv.to_string(),
                l.cycle.to_string(),
                l.id.to_string(),
                l.per.to_string(),
                l.total_gen.to_string(),
                l.d_total.to_string(),
                l.smoothing_target_used.to_string(),
                r.lr_gen.to_string(),
                r.lr_disc.to_string(),
            ];
            w.write_record(&rec).map_err(csv_error(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_val_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
        w.write_record(VAL_LOG_HEADER).map_err(csv_error(path))?;
        for r in &self.val_rows {
            let psnr = r.scores.psnr.map_or("inf".to_string(), |p| p.to_string());
            w.write_record([r.epoch.to_string(), r.scores.ssi.to_string(), r.scores.lncc.to_string(), psnr])
                .map_err(csv_error(path))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes both CSV files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_train_csv(&dir.join(TRAIN_LOG_FILE))?;
        self.write_val_csv(&dir.join(VAL_LOG_FILE))
    }

    /// Reads validation rows back from a `val_log.csv`.
    pub fn read_val_csv(path: &Path) -> Result<Vec<ValRow>> {
        let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
        let headers = r.headers().map_err(csv_error(path))?.clone();
        if headers.iter().collect::<Vec<_>>() != VAL_LOG_HEADER {
            return Err(Error::Data(format!("{}: unexpected header {headers:?}", path.display())));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_error(path))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("{}: bad number `{}`", path.display(), &rec[i]))
                })
            };
            let psnr = num(3)?;
            rows.push(ValRow {
                epoch: num(0)? as usize,
                scores: ValidationScores {
                    ssi: num(1)?,
                    lncc: num(2)?,
                    psnr: psnr.is_finite().then_some(psnr),
                },
            });
        }
        Ok(rows)
    }
}

/// Checkpoint file name for a completed epoch.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

/// How many ledger rows are dumped when training diverges.
const DIVERGENCE_DUMP: usize = 10;

/// Drives epochs over a fixed train/validation split.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: TrainState,
    pub perceptual: PerceptualSetup,
    pub log: TrainLog,
    recent: VecDeque<LogRow>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, state: TrainState, perceptual: PerceptualSetup) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state,
            perceptual,
            log: TrainLog::default(),
            recent: VecDeque::with_capacity(DIVERGENCE_DUMP),
        })
    }

    /// One step at the current epoch's learning rates, recorded in the log.
    pub fn step(&mut self, low: &ImageTensor, high: &ImageTensor) -> Result<LossLedger> {
        let rates = StepRates::for_epoch(&self.cfg, self.state.epoch);
        let step = self.state.global_step;
        match train_step(&mut self.state, low, high, &self.cfg, &self.perceptual, rates) {
            Ok(ledger) => {
                let row = LogRow {
                    epoch: self.state.epoch,
                    step,
                    ledger,
                    lr_gen: rates.lr_gen,
                    lr_disc: rates.lr_disc,
                };
                self.log.rows.push(row);
                if self.recent.len() == DIVERGENCE_DUMP {
                    self.recent.pop_front();
                }
                self.recent.push_back(row);
                Ok(ledger)
            }
            Err(e @ Error::NonFinite { .. }) => {
                log::error!("training diverged at step {step}: {e}; last {} ledger rows:", self.recent.len());
                for r in &self.recent {
                    log::error!("  {r:?}");
                }
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    /// Runs the remaining epochs. With `out_dir`, logs and checkpoints are written there.
    pub fn run(&mut self, train: &PairManifest, val: &PairManifest, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut checkpoints = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let skip = self.state.batch_cursor;
            let stream = make_batches_prefetched(
                train,
                self.cfg.batch_size,
                self.state.epoch_seed,
                self.cfg.image_size,
                self.cfg.prefetch,
            );
            for batch in stream.skip(skip) {
                let batch = batch?;
                let result = self.step(&batch.low, &batch.high);
                if let (Err(_), Some(dir)) = (&result, out_dir) {
                    self.log.write(dir)?;
                }
                let ledger = result?;
                self.state.batch_cursor += 1;
                log::debug!(
                    "epoch {} step {}: total_gen {:.5} d_total {:.5}",
                    self.state.epoch,
                    self.state.global_step,
                    ledger.total_gen,
                    ledger.d_total
                );
            }
            self.state.epoch += 1;
            self.state.batch_cursor = 0;
            self.state.epoch_seed = self.state.rng.gen();

            let epoch = self.state.epoch;
            if epoch.is_multiple_of(self.cfg.val_every) {
                let scores = validate(&self.state, val, &self.cfg)?;
                log::info!(
                    "epoch {epoch}: val ssi {:.4} lncc {:.4} psnr {}",
                    scores.ssi,
                    scores.lncc,
                    scores.psnr.map_or("inf".into(), |p| format!("{p:.3}"))
                );
                self.log.val_rows.push(ValRow { epoch, scores });
            }
            if let Some(dir) = out_dir {
                self.log.write(dir)?;
                let periodic = self.cfg.checkpoint_every > 0 && epoch.is_multiple_of(self.cfg.checkpoint_every);
                if periodic || epoch == self.cfg.epochs {
                    let path = dir.join(checkpoint_name(epoch));
                    self.state.save(&path)?;
                    log::info!("wrote {}", path.display());
                    checkpoints.push(path);
                }
            }
        }
        Ok(TrainOutcome {
            final_checkpoint: checkpoints.last().cloned(),
            checkpoints,
        })
    }
}

/// Full pipeline: scan `data_root`, split, train from scratch (or from `resume`).
pub fn train(
    cfg: TrainConfig,
    data_root: &Path,
    out_dir: Option<&Path>,
    perceptual: PerceptualSetup,
    resume: Option<TrainState>,
) -> Result<(TrainOutcome, TrainLog)> {
    cfg.validate()?;
    let scan = load_pair_manifest(data_root)?;
    let (train_set, val_set) = split_train_val(
        &scan.manifest,
        SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.seed,
        },
    )?;
    log::info!("{} training pairs, {} validation pairs", train_set.len(), val_set.len());
    let state = match resume {
        Some(s) => s,
        None => TrainState::new(&cfg)?,
    };
    let mut trainer = Trainer::new(cfg, state, perceptual)?;
    let outcome = trainer.run(&train_set, &val_set, out_dir)?;
    Ok((outcome, trainer.log))
}
