//! Run configuration: typed sections plus an INI-style file format.
//!
//! The file format is `key = value` lines under `[section]` headers.
//! Unknown sections or keys are rejected so a typo cannot silently fall
//! back to a default.

use crate::{Error, Result};

/// Which floating-point width the pipelines run in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Ablation variant of the SDIC networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Two-branch spatial-contextual module + attention fusion everywhere.
    Full,
    /// Latent-map compensation replaced by an affine (scale/shift) transform.
    NoAtt,
    /// Spatial-contextual branches removed; images feed the discrepancy
    /// hourglass directly, with no attention fusion stages.
    NoSc,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAtt => "no-att",
            Variant::NoSc => "no-sc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-att" => Ok(Variant::NoAtt),
            "no-sc" => Ok(Variant::NoSc),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// Which forward pass the edit-time latent maps are tapped from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditBase {
    /// Tap F^R / F^E from forwards of the enhanced (compensated) code.
    Enhanced,
    /// Tap them from forwards of the raw encoder code.
    Initial,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Image side length H = W; power of two, >= 16.
    pub image_size: usize,
    /// Latent dimensionality d.
    pub latent_dim: usize,
    /// Number of style rows K in a latent code.
    pub num_rows: usize,
    /// Branch output channels C of the spatial-contextual module.
    pub branch_channels: usize,
    /// 1-based generator block whose output is compensated/injected.
    pub injection_layer: usize,
    /// Seed for deterministic parameter initialization.
    pub seed: u64,
    pub precision: Precision,
    pub edit_base: EditBase,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub variant: Variant,
    pub log_every: usize,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    pub lambda_edit: f64,
    /// Seed of the frozen random feature network standing in for the
    /// perceptual and identity extractors.
    pub feature_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                image_size: 64,
                latent_dim: 64,
                num_rows: 6,
                branch_channels: 16,
                injection_layer: 2,
                seed: 1,
                precision: Precision::F32,
                edit_base: EditBase::Enhanced,
            },
            train: TrainConfig {
                seed: 2,
                steps: 3000,
                batch_size: 8,
                learning_rate: 1e-3,
                weight_decay: 0.0,
                variant: Variant::Full,
                log_every: 50,
                pretrain_steps: 3000,
                pretrain_lr: 1e-3,
            },
            data: DataConfig {
                seed: 3,
                train_count: 2048,
                eval_count: 256,
            },
            loss: LossConfig {
                lambda_lpips: 0.8,
                lambda_id: 0.2,
                lambda_edit: 0.5,
                feature_seed: 7,
            },
        }
    }
}

impl RunConfig {
    /// The reduced configuration used for 64-bit gradient verification.
    pub fn reduced() -> Self {
        let mut c = RunConfig::default();
        c.model.image_size = 16;
        c.model.latent_dim = 8;
        c.model.num_rows = 2;
        c.model.branch_channels = 4;
        c.model.precision = Precision::F64;
        c.data.train_count = 8;
        c.data.eval_count = 4;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.image_size < 16 || !m.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                m.image_size
            )));
        }
        if m.latent_dim == 0 || m.num_rows == 0 || m.branch_channels == 0 {
            return Err(Error::Config("zero model dimension".into()));
        }
        if m.injection_layer == 0 || m.injection_layer > generator_block_count(m.image_size) {
            return Err(Error::Config(format!(
                "injection_layer {} outside 1..={}",
                m.injection_layer,
                generator_block_count(m.image_size)
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.learning_rate <= 0.0 || t.pretrain_lr <= 0.0 {
            return Err(Error::Config("non-positive training numerics".into()));
        }
        let l = &self.loss;
        if l.lambda_lpips < 0.0 || l.lambda_id < 0.0 || l.lambda_edit < 0.0 {
            return Err(Error::Config("negative loss weight".into()));
        }
        Ok(())
    }

    pub fn parse_ini(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_ini(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply `key = value` overrides from INI text onto `self`.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {}: bad section", lineno + 1)))?;
                section = name.trim().to_string();
                if !["model", "train", "data", "loss"].contains(&section.as_str()) {
                    return Err(Error::Config(format!("unknown section [{section}]")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(&section, key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn us(v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer '{v}'")))
        }
        fn u64v(v: &str) -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer '{v}'")))
        }
        fn fl(v: &str) -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad number '{v}'")))
        }
        match (section, key) {
            ("model", "image_size") => self.model.image_size = us(value)?,
            ("model", "latent_dim") => self.model.latent_dim = us(value)?,
            ("model", "num_rows") => self.model.num_rows = us(value)?,
            ("model", "branch_channels") => self.model.branch_channels = us(value)?,
            ("model", "injection_layer") => self.model.injection_layer = us(value)?,
            ("model", "seed") => self.model.seed = u64v(value)?,
            ("model", "precision") => {
                self.model.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    other => return Err(Error::Config(format!("bad precision '{other}'"))),
                }
            }
            ("model", "edit_base") => {
                self.model.edit_base = match value {
                    "enhanced" => EditBase::Enhanced,
                    "initial" => EditBase::Initial,
                    other => return Err(Error::Config(format!("bad edit_base '{other}'"))),
                }
            }
            ("train", "seed") => self.train.seed = u64v(value)?,
            ("train", "steps") => self.train.steps = us(value)?,
            ("train", "batch_size") => self.train.batch_size = us(value)?,
            ("train", "learning_rate") => self.train.learning_rate = fl(value)?,
            ("train", "weight_decay") => self.train.weight_decay = fl(value)?,
            ("train", "variant") => self.train.variant = Variant::parse(value)?,
            ("train", "log_every") => self.train.log_every = us(value)?,
            ("train", "pretrain_steps") => self.train.pretrain_steps = us(value)?,
            ("train", "pretrain_lr") => self.train.pretrain_lr = fl(value)?,
            ("data", "seed") => self.data.seed = u64v(value)?,
            ("data", "train_count") => self.data.train_count = us(value)?,
            ("data", "eval_count") => self.data.eval_count = us(value)?,
            ("loss", "lambda_lpips") => self.loss.lambda_lpips = fl(value)?,
            ("loss", "lambda_id") => self.loss.lambda_id = fl(value)?,
            ("loss", "lambda_edit") => self.loss.lambda_edit = fl(value)?,
            ("loss", "feature_seed") => self.loss.feature_seed = u64v(value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key '{key}' in section [{section}]"
                )))
            }
        }
        Ok(())
    }

    /// Serialize back to INI text (all keys, current values).
    pub fn to_ini(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let l = &self.loss;
        format!(
            "[model]\n\
             image_size = {}\nlatent_dim = {}\nnum_rows = {}\nbranch_channels = {}\n\
             injection_layer = {}\nseed = {}\nprecision = {}\nedit_base = {}\n\
             \n[train]\n\
             seed = {}\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\nweight_decay = {}\n\
             variant = {}\nlog_every = {}\npretrain_steps = {}\npretrain_lr = {}\n\
             \n[data]\nseed = {}\ntrain_count = {}\neval_count = {}\n\
             \n[loss]\nlambda_lpips = {}\nlambda_id = {}\nlambda_edit = {}\nfeature_seed = {}\n",
            m.image_size,
            m.latent_dim,
            m.num_rows,
            m.branch_channels,
            m.injection_layer,
            m.seed,
            match m.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            },
            match m.edit_base {
                EditBase::Enhanced => "enhanced",
                EditBase::Initial => "initial",
            },
            t.seed,
            t.steps,
            t.batch_size,
            t.learning_rate,
            t.weight_decay,
            t.variant.as_str(),
            t.log_every,
            t.pretrain_steps,
            t.pretrain_lr,
            d.seed,
            d.train_count,
            d.eval_count,
            l.lambda_lpips,
            l.lambda_id,
            l.lambda_edit,
            l.feature_seed,
        )
    }
}

/// Number of synthesis blocks for a given image size: one per doubling from
/// the 4x4 constant, plus a final full-resolution block.
pub fn generator_block_count(image_size: usize) -> usize {
    (image_size / 4).trailing_zeros() as usize + 1
}

/// Channels of the feature map at a given spatial size inside the generator.
pub fn generator_channels_at(size: usize) -> usize {
    match size {
        0..=4 => 128,
        8 => 96,
        16 => 64,
        32 => 48,
        _ => 32,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::reduced().validate().unwrap();
    }

    #[test]
    fn roundtrip_ini() {
        let mut c = RunConfig::default();
        c.model.image_size = 32;
        c.train.variant = Variant::NoAtt;
        c.loss.lambda_edit = 0.25;
        let text = c.to_ini();
        let back = RunConfig::parse_ini(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::parse_ini("[model]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse_ini("[nope]\n").is_err());
    }

    #[test]
    fn order_independent_parse() {
        let a = RunConfig::parse_ini("[train]\nsteps = 5\n[model]\nimage_size = 32\n").unwrap();
        let b = RunConfig::parse_ini("[model]\nimage_size = 32\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_counts() {
        assert_eq!(generator_block_count(64), 5);
        assert_eq!(generator_block_count(16), 3);
        assert_eq!(generator_block_count(128), 6);
    }
}
