//! Flat `key = value` run configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use uqgan_core::perceptual::{FeatureExtractor, LayerWeights, DEFAULT_TAPS};
use uqgan_core::trainer::{PerceptualSetup, TrainConfig};
use uqgan_core::{Error, Result};

/// Environment variable that overrides `extractor_weights`.
pub const EXTRACTOR_WEIGHTS_ENV: &str = "UQGAN_EXTRACTOR_WEIGHTS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorChoice {
    /// Pretrained weights when a path is available, otherwise the random stand-in.
    Auto,
    Vgg16,
    RandomFixed,
}

impl FromStr for ExtractorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "vgg16" => Ok(Self::Vgg16),
            "random-fixed" => Ok(Self::RandomFixed),
            other => Err(Error::Config(format!(
                "unknown extractor `{other}` (expected auto|vgg16|random-fixed)"
            ))),
        }
    }
}

impl Display for ExtractorChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Auto => "auto",
            Self::Vgg16 => "vgg16",
            Self::RandomFixed => "random-fixed",
        })
    }
}

/// Everything a subcommand can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub extractor: ExtractorChoice,
    pub extractor_weights: Option<PathBuf>,
    pub extractor_seed: u64,
    pub extractor_width_divisor: usize,
    pub taps: Vec<String>,
    pub layer_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data_root: None,
            out_dir: PathBuf::from("runs"),
            extractor: ExtractorChoice::Auto,
            extractor_weights: None,
            extractor_seed: 0,
            extractor_width_divisor: 1,
            taps: DEFAULT_TAPS.iter().map(|s| s.to_string()).collect(),
            layer_weights: None,
        }
    }
}

/// Every accepted key, in the order [`RunConfig::render`] writes them.
pub const KEYS: &[&str] = &[
    "data_root",
    "out_dir",
    "epochs",
    "batch_size",
    "lr_gen",
    "lr_disc",
    "beta1",
    "beta2",
    "sched_step",
    "sched_gamma",
    "lambda_adv",
    "lambda_cycle",
    "lambda_id",
    "lambda_per",
    "smoothing_threshold",
    "smoothing_soft_target",
    "smoothing_hard_target",
    "perceptual_mode",
    "adv_on",
    "grad_scaling",
    "seed",
    "val_every",
    "checkpoint_every",
    "train_fraction",
    "image_size",
    "prefetch",
    "gen_base_channels",
    "gen_residual_blocks",
    "gen_downsamples",
    "gen_first_kernel",
    "disc_base_channels",
    "ssi_window",
    "ssi_sigma",
    "ssi_k1",
    "ssi_k2",
    "lncc_window",
    "lncc_eps",
    "data_range",
    "extractor",
    "extractor_weights",
    "extractor_seed",
    "extractor_width_divisor",
    "taps",
    "layer_weights",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}` (expected true|false)"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "data_root" => self.data_root = optional_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr_gen" => t.lr_gen = parse(key, value)?,
            "lr_disc" => t.lr_disc = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "sched_step" => t.sched_step = parse(key, value)?,
            "sched_gamma" => t.sched_gamma = parse(key, value)?,
            "lambda_adv" => t.loss_weights.lambda_adv = parse(key, value)?,
            "lambda_cycle" => t.loss_weights.lambda_cycle = parse(key, value)?,
            "lambda_id" => t.loss_weights.lambda_id = parse(key, value)?,
            "lambda_per" => t.loss_weights.lambda_per = parse(key, value)?,
            "smoothing_threshold" => t.smoothing.threshold = parse(key, value)?,
            "smoothing_soft_target" => t.smoothing.soft_target = parse(key, value)?,
            "smoothing_hard_target" => t.smoothing.hard_target = parse(key, value)?,
            "perceptual_mode" => t.perceptual_mode = value.parse()?,
            "adv_on" => t.adv_on = value.parse()?,
            "grad_scaling" => t.grad_scaling = parse_bool(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "val_every" => t.val_every = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train_fraction" => t.train_fraction = parse(key, value)?,
            "image_size" => {
                t.image_size = parse(key, value)?;
                t.discriminator.input_size = t.image_size;
            }
            "prefetch" => t.prefetch = parse(key, value)?,
            "gen_base_channels" => t.generator.base_channels = parse(key, value)?,
            "gen_residual_blocks" => t.generator.n_residual_blocks = parse(key, value)?,
            "gen_downsamples" => t.generator.n_downsamples = parse(key, value)?,
            "gen_first_kernel" => t.generator.first_kernel = parse(key, value)?,
            "disc_base_channels" => t.discriminator.base_channels = parse(key, value)?,
            "ssi_window" => t.metrics.ssi_window = parse(key, value)?,
            "ssi_sigma" => t.metrics.ssi_sigma = parse(key, value)?,
            "ssi_k1" => t.metrics.ssi_k1 = parse(key, value)?,
            "ssi_k2" => t.metrics.ssi_k2 = parse(key, value)?,
            "lncc_window" => t.metrics.lncc_window = parse(key, value)?,
            "lncc_eps" => t.metrics.lncc_eps = parse(key, value)?,
            "data_range" => t.metrics.data_range = parse(key, value)?,
            "extractor" => self.extractor = value.parse()?,
            "extractor_weights" => self.extractor_weights = optional_path(value),
            "extractor_seed" => self.extractor_seed = parse(key, value)?,
            "extractor_width_divisor" => self.extractor_width_divisor = parse(key, value)?,
            "taps" => {
                self.taps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "layer_weights" => self.layer_weights = optional_path(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "data_root" => path_text(&self.data_root),
            "out_dir" => self.out_dir.display().to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_gen" => t.lr_gen.to_string(),
            "lr_disc" => t.lr_disc.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "sched_step" => t.sched_step.to_string(),
            "sched_gamma" => t.sched_gamma.to_string(),
            "lambda_adv" => t.loss_weights.lambda_adv.to_string(),
            "lambda_cycle" => t.loss_weights.lambda_cycle.to_string(),
            "lambda_id" => t.loss_weights.lambda_id.to_string(),
            "lambda_per" => t.loss_weights.lambda_per.to_string(),
            "smoothing_threshold" => t.smoothing.threshold.to_string(),
            "smoothing_soft_target" => t.smoothing.soft_target.to_string(),
            "smoothing_hard_target" => t.smoothing.hard_target.to_string(),
            "perceptual_mode" => t.perceptual_mode.to_string(),
            "adv_on" => t.adv_on.to_string(),
            "grad_scaling" => t.grad_scaling.to_string(),
            "seed" => t.seed.to_string(),
            "val_every" => t.val_every.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "train_fraction" => t.train_fraction.to_string(),
            "image_size" => t.image_size.to_string(),
            "prefetch" => t.prefetch.to_string(),
            "gen_base_channels" => t.generator.base_channels.to_string(),
            "gen_residual_blocks" => t.generator.n_residual_blocks.to_string(),
            "gen_downsamples" => t.generator.n_downsamples.to_string(),
            "gen_first_kernel" => t.generator.first_kernel.to_string(),
            "disc_base_channels" => t.discriminator.base_channels.to_string(),
            "ssi_window" => t.metrics.ssi_window.to_string(),
            "ssi_sigma" => t.metrics.ssi_sigma.to_string(),
            "ssi_k1" => t.metrics.ssi_k1.to_string(),
            "ssi_k2" => t.metrics.ssi_k2.to_string(),
            "lncc_window" => t.metrics.lncc_window.to_string(),
            "lncc_eps" => t.metrics.lncc_eps.to_string(),
            "data_range" => t.metrics.data_range.to_string(),
            "extractor" => self.extractor.to_string(),
            "extractor_weights" => path_text(&self.extractor_weights),
            "extractor_seed" => self.extractor_seed.to_string(),
            "extractor_width_divisor" => self.extractor_width_divisor.to_string(),
            "taps" => self.taps.join(","),
            "layer_weights" => path_text(&self.layer_weights),
            _ => return None,
        })
    }

    /// Applies a config file's `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", i + 1))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{origin}:{}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `KEY=VALUE` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{spec}`")))?;
        self.set(key.trim(), value.trim())
    }

    /// The effective configuration as a config file that parses back to `self`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("every listed key is readable");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.taps.is_empty() {
            return Err(Error::Config("`taps` cannot be empty".into()));
        }
        Ok(())
    }

    /// Builds the perceptual extractor. `env_weights` is the value of
    /// [`EXTRACTOR_WEIGHTS_ENV`], which takes precedence over the config.
    pub fn perceptual_setup(&self, env_weights: Option<PathBuf>) -> Result<PerceptualSetup> {
        let taps: Vec<&str> = self.taps.iter().map(String::as_str).collect();
        let weights_path = env_weights.or_else(|| self.extractor_weights.clone());
        let extractor = match (self.extractor, weights_path) {
            (ExtractorChoice::Vgg16 | ExtractorChoice::Auto, Some(path)) => {
                log::info!("loading pretrained feature extractor from {}", path.display());
                FeatureExtractor::pretrained_vgg16(&path, &taps)?
            }
            (ExtractorChoice::Vgg16, None) => {
                return Err(Error::Config(format!(
                    "extractor = vgg16 needs `extractor_weights` or {EXTRACTOR_WEIGHTS_ENV}"
                )))
            }
            (ExtractorChoice::Auto, None) => {
                log::warn!(
                    "no pretrained extractor weights configured; using the random-fixed extractor (seed {})",
                    self.extractor_seed
                );
                FeatureExtractor::random_fixed(self.extractor_seed, self.extractor_width_divisor, &taps)?
            }
            (ExtractorChoice::RandomFixed, _) => {
                FeatureExtractor::random_fixed(self.extractor_seed, self.extractor_width_divisor, &taps)?
            }
        };
        match &self.layer_weights {
            Some(path) => PerceptualSetup::new(extractor, LayerWeights::load(path, taps.len())?),
            None => Ok(PerceptualSetup::uniform(extractor)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("epochs = 3\nimage_size = 64 # small\ntaps = relu1_2, relu2_2\nlayer_weights = w.txt\n", "t")
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), "rendered").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.discriminator.input_size, 64);
    }

    #[test]
    fn every_key_is_readable_and_writable() {
        let mut cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            cfg.set(key, &v).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("# typo\nlambda_cyc = 12\n", "run.cfg").unwrap_err();
        assert_eq!(err.to_string(), "invalid configuration: run.cfg:2: unknown key `lambda_cyc`");
        assert!(cfg.apply_text("epochs = many", "x").is_err());
        assert!(cfg.apply_text("no equals sign", "x").is_err());
        assert!(cfg.apply_override("adv_on=sideways").is_err());
    }

    #[test]
    fn later_sources_win() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 4\nepochs = 2", "file").unwrap();
        cfg.apply_override("seed=9").unwrap();
        assert_eq!((cfg.train.seed, cfg.train.epochs), (9, 2));
    }

    #[test]
    fn explicit_vgg_without_weights_is_rejected() {
        let cfg = RunConfig { extractor: ExtractorChoice::Vgg16, ..Default::default() };
        assert!(matches!(cfg.perceptual_setup(None), Err(Error::Config(_))));
    }
}
