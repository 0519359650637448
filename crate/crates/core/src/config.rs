//! Run configuration and its flat `key = value` file format.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Registered method name, see [`crate::model::MethodRegistry`].
    pub method: String,
    /// Registered encoder name, see [`crate::encoder::EncoderRegistry`].
    pub encoder: String,
    /// Encoder output channels `C`; split into two halves of `C / 2`.
    pub channels: usize,
    /// Segmentation categories `K`.
    pub categories: usize,
    /// Codebook size `N`, partitioned into `K` equal groups.
    pub codes: usize,
    pub lambda_mse: f64,
    pub lambda_corr_pre: f64,
    pub lambda_corr_post: f64,
    pub lambda_domain: f64,
    pub lambda_code: f64,
    pub encoder_depth: usize,
    pub encoder_width: usize,
    pub decoder_width: usize,
    /// Guard added inside every log of the reconstruction and code losses.
    pub eps_log: f64,
    /// Floor added to each standard deviation of the correlation estimator.
    pub eps_var: f64,
    pub init_var_gamma: f64,
    pub init_tau: f64,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub image_size: usize,
    /// Per-domain size cap applied by seeded subsampling.
    pub cap: Option<usize>,
    /// Global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            method: "dgquant".into(),
            encoder: "unet".into(),
            channels: 64,
            categories: 2,
            codes: 512,
            lambda_mse: 1.0,
            lambda_corr_pre: 1.0,
            lambda_corr_post: 1.0,
            lambda_domain: 1.0,
            lambda_code: 1.0,
            encoder_depth: 3,
            encoder_width: 16,
            decoder_width: 16,
            eps_log: 1e-6,
            eps_var: 1e-8,
            init_var_gamma: 1.0,
            init_tau: 1.0,
            seed: 0,
            lr: 1e-3,
            batch_size: 2,
            epochs: 200,
            folds: 5,
            image_size: 256,
            cap: None,
            grad_clip: None,
        }
    }
}

pub fn validate_config(cfg: ModelConfig) -> Result<ModelConfig> {
    cfg.validate()
}

/// The skip-free reconstruction decoder always downsamples three times.
pub const DECODER_STAGES: usize = 3;

impl ModelConfig {
    pub fn half_channels(&self) -> usize {
        self.channels / 2
    }

    pub fn codes_per_group(&self) -> usize {
        self.codes / self.categories
    }

    /// Check every invariant; returns the config unchanged on success.
    pub fn validate(self) -> Result<Self> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.categories < 2 {
            return fail(format!(
                "categories must be at least 2, got {}",
                self.categories
            ));
        }
        if self.codes == 0 || self.codes % self.categories != 0 {
            return fail(format!(
                "codes ({}) must be a positive multiple of categories ({})",
                self.codes, self.categories
            ));
        }
        if self.channels == 0 || self.channels % 2 != 0 {
            return fail(format!(
                "channels must be even and positive, got {}",
                self.channels
            ));
        }
        if !(self.eps_log > 0.0) {
            return fail(format!("eps_log must be positive, got {}", self.eps_log));
        }
        if !(self.eps_var >= 0.0) {
            return fail(format!("eps_var must be nonnegative, got {}", self.eps_var));
        }
        for (name, v) in self.lambdas() {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!(
                    "{name} must be a finite nonnegative weight, got {v}"
                ));
            }
        }
        if !(self.init_var_gamma > 0.0) || !(self.init_tau > 0.0) {
            return fail("init_var_gamma and init_tau must be positive".into());
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0
            || self.encoder_depth == 0
            || self.encoder_width == 0
            || self.decoder_width == 0
        {
            return fail(
                "batch_size, encoder_depth, encoder_width and decoder_width must be positive"
                    .into(),
            );
        }
        if self.folds < 2 {
            return fail(format!("folds must be at least 2, got {}", self.folds));
        }
        let stride = 1usize << self.encoder_depth.max(DECODER_STAGES);
        if self.image_size < 8 || self.image_size % stride != 0 {
            return fail(format!(
                "image_size {} must be at least 8 and divisible by {stride}",
                self.image_size
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.cap == Some(0) {
            return fail("cap must be positive".into());
        }
        Ok(self)
    }

    pub fn lambdas(&self) -> [(&'static str, f64); 5] {
        [
            ("lambda_mse", self.lambda_mse),
            ("lambda_corr_pre", self.lambda_corr_pre),
            ("lambda_corr_post", self.lambda_corr_post),
            ("lambda_domain", self.lambda_domain),
            ("lambda_code", self.lambda_code),
        ]
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
        }
        fn opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
            if value == "none" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        match key {
            "method" => self.method = value.to_string(),
            "encoder" => self.encoder = value.to_string(),
            "channels" => self.channels = num(key, value)?,
            "categories" => self.categories = num(key, value)?,
            "codes" => self.codes = num(key, value)?,
            "lambda_mse" => self.lambda_mse = num(key, value)?,
            "lambda_corr_pre" => self.lambda_corr_pre = num(key, value)?,
            "lambda_corr_post" => self.lambda_corr_post = num(key, value)?,
            "lambda_domain" => self.lambda_domain = num(key, value)?,
            "lambda_code" => self.lambda_code = num(key, value)?,
            "encoder_depth" => self.encoder_depth = num(key, value)?,
            "encoder_width" => self.encoder_width = num(key, value)?,
            "decoder_width" => self.decoder_width = num(key, value)?,
            "eps_log" => self.eps_log = num(key, value)?,
            "eps_var" => self.eps_var = num(key, value)?,
            "init_var_gamma" => self.init_var_gamma = num(key, value)?,
            "init_tau" => self.init_tau = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "cap" => self.cap = opt(key, value)?,
            "grad_clip" => self.grad_clip = opt(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse the flat text format on top of the defaults. Does not validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key, one per line; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
            v.as_ref()
                .map_or_else(|| "none".to_string(), |v| v.to_string())
        }
        let mut s = String::new();
        let pairs: Vec<(&str, String)> = vec![
            ("method", self.method.clone()),
            ("encoder", self.encoder.clone()),
            ("channels", self.channels.to_string()),
            ("categories", self.categories.to_string()),
            ("codes", self.codes.to_string()),
            ("lambda_mse", self.lambda_mse.to_string()),
            ("lambda_corr_pre", self.lambda_corr_pre.to_string()),
            ("lambda_corr_post", self.lambda_corr_post.to_string()),
            ("lambda_domain", self.lambda_domain.to_string()),
            ("lambda_code", self.lambda_code.to_string()),
            ("encoder_depth", self.encoder_depth.to_string()),
            ("encoder_width", self.encoder_width.to_string()),
            ("decoder_width", self.decoder_width.to_string()),
            ("eps_log", self.eps_log.to_string()),
            ("eps_var", self.eps_var.to_string()),
            ("init_var_gamma", self.init_var_gamma.to_string()),
            ("init_tau", self.init_tau.to_string()),
            ("seed", self.seed.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("folds", self.folds.to_string()),
            ("image_size", self.image_size.to_string()),
            ("cap", opt(&self.cap)),
            ("grad_clip", opt(&self.grad_clip)),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
