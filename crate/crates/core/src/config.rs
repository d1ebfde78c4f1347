//! Run configuration: `key = value` lines with `#` comments.

use std::fmt::Write;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::ModelDims;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub c: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub s: usize,
    pub max_len: usize,
    pub k: usize,
    pub gamma: f64,
    pub m_idx: usize,
    pub mlm_p: f64,
    pub image_h: usize,
    pub image_w: usize,

    pub lr_encoder: f64,
    pub wd_encoder: f64,
    pub momentum: f64,
    pub lr_transformer: f64,
    pub wd_transformer: f64,

    /// Images per step; each yields two matched and two unmatched pairs.
    pub batch_images: usize,
    pub epochs: usize,
    /// Both learning rates are divided by 10 from each of these (0-based) epochs on.
    pub decay_epochs: Vec<usize>,
    /// Conv blocks stay frozen for epochs `0..freeze_epochs`.
    pub freeze_epochs: usize,
    pub use_vd: bool,
    pub seed: u64,
    pub keep_epoch_checkpoints: bool,

    /// Aligned pairs per retrieval fine-tuning step.
    pub ft_batch: usize,
    pub ft_epochs: usize,
    /// The fine-tuning learning rate halves from each of these epochs on.
    pub ft_decay_epochs: Vec<usize>,
    pub ft_lr: f64,
    pub ft_wd: f64,
    pub ft_use_vd: bool,
    /// Number of training images used for fine-tuning.
    pub ft_train_images: usize,

    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        TrainConfig {
            c: 64,
            layers: 3,
            heads: 4,
            mlp_ratio: 4,
            s: 16,
            max_len: 16,
            k: 128,
            gamma: 0.99,
            m_idx: 1,
            mlm_p: 0.15,
            image_h: 64,
            image_w: 64,
            lr_encoder: 1e-2,
            wd_encoder: 5e-4,
            momentum: 0.9,
            lr_transformer: 1e-4,
            wd_transformer: 1e-2,
            batch_images: 8,
            epochs: 30,
            decay_epochs: vec![20, 26],
            freeze_epochs: 2,
            use_vd: true,
            seed: 0,
            keep_epoch_checkpoints: false,
            ft_batch: 4,
            ft_epochs: 10,
            ft_decay_epochs: vec![2, 4, 6],
            ft_lr: 1e-4,
            ft_wd: 1e-2,
            ft_use_vd: false,
            ft_train_images: 900,
            data_dir: None,
            out_dir: None,
        }
    }

    /// Full-size reference schedule.
    pub fn full() -> Self {
        TrainConfig {
            c: 768,
            layers: 12,
            heads: 12,
            s: 64,
            k: 2048,
            image_h: 600,
            image_w: 1000,
            batch_images: 1024,
            epochs: 40,
            decay_epochs: vec![25, 35],
            freeze_epochs: 10,
            ft_batch: 24,
            ft_epochs: 20,
            ft_decay_epochs: vec![3, 5, 9, 13],
            ..TrainConfig::toy()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            c: self.c,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            s: self.s,
            max_len: self.max_len,
            k: self.k,
            image_h: self.image_h,
            image_w: self.image_w,
        }
    }

    /// Pairs per pre-training step.
    pub fn pairs_per_step(&self) -> usize {
        4 * self.batch_images
    }

    /// Learning-rate multiplier for `epoch`.
    pub fn decay_factor(&self, epoch: usize) -> f64 {
        let n = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        0.1f64.powi(n as i32)
    }

    pub fn ft_decay_factor(&self, epoch: usize) -> f64 {
        let n = self.ft_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        0.5f64.powi(n as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c", self.c),
            ("layers", self.layers),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("batch_images", self.batch_images),
            ("epochs", self.epochs),
            ("m_idx", self.m_idx),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("ft_epochs", self.ft_epochs),
            ("ft_train_images", self.ft_train_images),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.c % self.heads != 0 {
            return Err(Error::config(format!("c={} is not divisible by heads={}", self.c, self.heads)));
        }
        if self.c % 4 != 0 {
            return Err(Error::config(format!("c={} must be a multiple of 4", self.c)));
        }
        if self.s < 4 || !self.s.is_power_of_two() {
            return Err(Error::config(format!("s={} must be a power of two >= 4", self.s)));
        }
        if self.max_len < 3 {
            return Err(Error::config("max_len must be at least 3"));
        }
        if self.k < 2 {
            return Err(Error::config("k must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mlm_p) {
            return Err(Error::config("mlm_p must lie in [0, 1]"));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_transformer", self.lr_transformer),
            ("ft_lr", self.ft_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("wd_encoder", self.wd_encoder),
            ("wd_transformer", self.wd_transformer),
            ("ft_wd", self.ft_wd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        check_schedule("decay_epochs", &self.decay_epochs, self.epochs)?;
        check_schedule("ft_decay_epochs", &self.ft_decay_epochs, self.ft_epochs)?;
        if self.freeze_epochs >= self.epochs {
            return Err(Error::config("freeze_epochs must be smaller than epochs"));
        }
        if self.ft_batch < 2 {
            return Err(Error::config("ft_batch must be at least 2"));
        }
        Ok(())
    }

    /// Parses a config file. A leading `preset = toy|full` selects the base.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::toy();
        let mut seen_key = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if seen_key {
                    return Err(Error::config(format!("line {}: preset must come first", n + 1)));
                }
                cfg = match value {
                    "toy" => TrainConfig::toy(),
                    "full" => TrainConfig::full(),
                    other => return Err(Error::config(format!("line {}: unknown preset {other}", n + 1))),
                };
            } else {
                cfg.set(key, value)
                    .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
            }
            seen_key = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        fn path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        match key {
            "c" => self.c = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "s" => self.s = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "m_idx" => self.m_idx = num(key, value)?,
            "mlm_p" => self.mlm_p = num(key, value)?,
            "image_h" => self.image_h = num(key, value)?,
            "image_w" => self.image_w = num(key, value)?,
            "lr_encoder" => self.lr_encoder = num(key, value)?,
            "wd_encoder" => self.wd_encoder = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "lr_transformer" => self.lr_transformer = num(key, value)?,
            "wd_transformer" => self.wd_transformer = num(key, value)?,
            "batch_images" => self.batch_images = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "decay_epochs" => self.decay_epochs = list(key, value)?,
            "freeze_epochs" => self.freeze_epochs = num(key, value)?,
            "use_vd" => self.use_vd = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "keep_epoch_checkpoints" => self.keep_epoch_checkpoints = num(key, value)?,
            "ft_batch" => self.ft_batch = num(key, value)?,
            "ft_epochs" => self.ft_epochs = num(key, value)?,
            "ft_decay_epochs" => self.ft_decay_epochs = list(key, value)?,
            "ft_lr" => self.ft_lr = num(key, value)?,
            "ft_wd" => self.ft_wd = num(key, value)?,
            "ft_use_vd" => self.ft_use_vd = num(key, value)?,
            "ft_train_images" => self.ft_train_images = num(key, value)?,
            "data_dir" => self.data_dir = path(value),
            "out_dir" => self.out_dir = path(value),
            other => return Err(Error::config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Complete textual form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let fields: Vec<(&str, String)> = vec![
            ("c", self.c.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("s", self.s.to_string()),
            ("max_len", self.max_len.to_string()),
            ("k", self.k.to_string()),
            ("gamma", self.gamma.to_string()),
            ("m_idx", self.m_idx.to_string()),
            ("mlm_p", self.mlm_p.to_string()),
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("lr_encoder", self.lr_encoder.to_string()),
            ("wd_encoder", self.wd_encoder.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lr_transformer", self.lr_transformer.to_string()),
            ("wd_transformer", self.wd_transformer.to_string()),
            ("batch_images", self.batch_images.to_string()),
            ("epochs", self.epochs.to_string()),
            ("decay_epochs", join(&self.decay_epochs)),
            ("freeze_epochs", self.freeze_epochs.to_string()),
            ("use_vd", self.use_vd.to_string()),
            ("seed", self.seed.to_string()),
            ("keep_epoch_checkpoints", self.keep_epoch_checkpoints.to_string()),
            ("ft_batch", self.ft_batch.to_string()),
            ("ft_epochs", self.ft_epochs.to_string()),
            ("ft_decay_epochs", join(&self.ft_decay_epochs)),
            ("ft_lr", self.ft_lr.to_string()),
            ("ft_wd", self.ft_wd.to_string()),
            ("ft_use_vd", self.ft_use_vd.to_string()),
            ("ft_train_images", self.ft_train_images.to_string()),
            ("data_dir", p(&self.data_dir)),
            ("out_dir", p(&self.out_dir)),
        ];
        for (k, v) in fields {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }
}

fn check_schedule(name: &str, epochs: &[usize], total: usize) -> Result<()> {
    if epochs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("{name} must be strictly increasing")));
    }
    if epochs.last().is_some_and(|&e| e >= total) {
        return Err(Error::config(format!("{name} must lie below the epoch count {total}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_validate_and_round_trip() {
        let cfg = TrainConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.pairs_per_step(), 32);
    }

    #[test]
    fn full_schedule_fields() {
        let p = TrainConfig::full();
        p.validate().unwrap();
        assert_eq!((p.epochs, p.decay_epochs.clone(), p.pairs_per_step()), (40, vec![25, 35], 4096));
        assert_eq!(p.ft_batch, 24);
        assert_eq!(p.k, 2048);
        assert_eq!(TrainConfig::parse("preset = full\n").unwrap(), p);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = TrainConfig::parse("# toy run\nk = 64 # smaller book\n\nepochs=5\ndecay_epochs = 3\nfreeze_epochs = 1\n").unwrap();
        assert_eq!((cfg.k, cfg.epochs, cfg.decay_epochs.clone()), (64, 5, vec![3]));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_schedules() {
        assert!(matches!(TrainConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("decay_epochs = 5,3").is_err());
        assert!(TrainConfig::parse("epochs = 10\ndecay_epochs = 10").is_err());
        assert!(TrainConfig::parse("freeze_epochs = 30").is_err());
        assert!(TrainConfig::parse("lr_encoder = 0").is_err());
        assert!(TrainConfig::parse("k = 64\npreset = toy").is_err());
    }

    #[test]
    fn decay_factor_is_monotone() {
        let cfg = TrainConfig::toy();
        let f: Vec<f64> = (0..cfg.epochs).map(|e| cfg.decay_factor(e)).collect();
        assert!(f.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(f[19], 1.0);
        assert_eq!(f[20], 0.1);
        assert_eq!(f[26], 0.1f64.powi(2));
        assert_eq!(cfg.ft_decay_factor(4), 0.25);
    }
}
