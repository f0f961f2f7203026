//! Configuration: model architecture, training, and synthetic-data settings,
//! plus the plain-text `key = value` config file format used by the CLI.
//!
//! Unknown keys are hard errors so a typo in a config file never silently
//! falls back to a default.

use crate::error::{Error, Result};

/// Which cross-attention the decoder layers run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltingMode {
    /// Full softmax attention over the whole utterance (non-streaming baseline).
    Offline,
    /// Per-head accumulation halting with an independent threshold.
    Dacs,
    /// Head-synchronous halting with a joint threshold shared by all heads.
    HsDacs,
}

impl HaltingMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(HaltingMode::Offline),
            "dacs" => Ok(HaltingMode::Dacs),
            "hsdacs" => Ok(HaltingMode::HsDacs),
            other => Err(Error::Config(format!(
                "halting_mode must be one of offline|dacs|hsdacs, got '{other}'"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            HaltingMode::Offline => "offline",
            HaltingMode::Dacs => "dacs",
            HaltingMode::HsDacs => "hsdacs",
        }
    }
}

/// Every architectural and halting hyperparameter.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ffn: usize,
    /// Output vocabulary width including the reserved ids 0 (sos) and 1 (eos).
    pub vocab_size: usize,
    /// Maximum look-ahead step M: hard cap on frames examined beyond the
    /// previous boundary during inference. Not applied during training.
    pub max_lookahead: usize,
    pub halting_mode: HaltingMode,
    /// Per-head halting threshold for dacs mode.
    pub dacs_threshold: f64,
    /// Joint threshold for hsdacs mode; defaults to the head count.
    pub joint_threshold: f64,
    pub chunk_central: usize,
    pub chunk_left: usize,
    pub chunk_right: usize,
    pub subsample_factor: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    /// Input feature width consumed by the subsampling front-end.
    pub d_feat: usize,
    /// Parameter initialisation seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            heads: 4,
            enc_layers: 6,
            dec_layers: 12,
            d_ffn: 2048,
            vocab_size: 32,
            max_lookahead: 16,
            halting_mode: HaltingMode::HsDacs,
            dacs_threshold: 1.0,
            joint_threshold: 4.0,
            chunk_central: 64,
            chunk_left: 64,
            chunk_right: 64,
            subsample_factor: 4,
            label_smoothing: 0.1,
            dropout: 0.0,
            d_feat: 16,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Per-head key/query/value width.
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be an exact multiple of heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.max_lookahead < 1 {
            return Err(Error::Config("max_lookahead must be >= 1".into()));
        }
        if self.dacs_threshold <= 0.0 || self.joint_threshold <= 0.0 {
            return Err(Error::Config("halting thresholds must be > 0".into()));
        }
        if self.subsample_factor < 1 {
            return Err(Error::Config("subsample_factor must be >= 1".into()));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocab_size must be >= 3 (two reserved ids plus data tokens)".into(),
            ));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config(
                "enc_layers and dec_layers must be >= 1".into(),
            ));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub checkpoint_path: String,
    pub train_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            base_lr: 1.0,
            warmup_steps: 400,
            grad_clip_norm: 5.0,
            checkpoint_path: "model.ckpt".into(),
            train_samples: 2000,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_samples == 0 {
            return Err(Error::Config("train_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Synthetic-task settings. The dataset has no files: a sample is a pure
/// function of (codebook seed, sample seed, index).
#[derive(Debug, Clone)]
pub struct DataConfig {
    /// Number of data tokens; reserved ids are excluded and sit below them.
    pub vocab: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub dur_min: usize,
    pub dur_max: usize,
    pub d_feat: usize,
    pub noise_sigma: f64,
    pub codebook_seed: u64,
    pub sample_seed: u64,
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab: 30,
            len_min: 5,
            len_max: 20,
            dur_min: 2,
            dur_max: 5,
            d_feat: 16,
            noise_sigma: 0.3,
            codebook_seed: 7,
            sample_seed: 1234,
            eval_samples: 200,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::Config("data_vocab must be >= 2".into()));
        }
        if !(2 <= self.len_min && self.len_min <= self.len_max) {
            return Err(Error::Config("need 2 <= len_min <= len_max".into()));
        }
        if !(1 <= self.dur_min && self.dur_min <= self.dur_max) {
            return Err(Error::Config("need 1 <= dur_min <= dur_max".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if self.d_feat == 0 {
            return Err(Error::Config("d_feat must be >= 1".into()));
        }
        Ok(())
    }
}

/// Merged model + train + data configuration, one flat key namespace.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    joint_threshold_set: bool,
}

impl RunConfig {
    /// Parse a config file body: `key = value` lines, `#` comments, blank
    /// lines ignored. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.finish();
        Ok(cfg)
    }

    /// Apply defaults that depend on other keys. Idempotent.
    pub fn finish(&mut self) {
        if !self.joint_threshold_set {
            self.model.joint_threshold = self.model.heads as f64;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.vocab_size < self.data.vocab + 2 {
            return Err(Error::Config(format!(
                "vocab_size ({}) must cover the {} data tokens plus 2 reserved ids",
                self.model.vocab_size, self.data.vocab
            )));
        }
        if self.model.d_feat != self.data.d_feat {
            return Err(Error::Config(format!(
                "model d_feat ({}) does not match data d_feat ({})",
                self.model.d_feat, self.data.d_feat
            )));
        }
        Ok(())
    }

    /// Set one key. Used by both file parsing and CLI flag overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse value '{value}'")))
        }
        match key {
            "d_model" => self.model.d_model = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "enc_layers" => self.model.enc_layers = num(key, value)?,
            "dec_layers" => self.model.dec_layers = num(key, value)?,
            "d_ffn" => self.model.d_ffn = num(key, value)?,
            "vocab_size" => self.model.vocab_size = num(key, value)?,
            "max_lookahead" => self.model.max_lookahead = num(key, value)?,
            "halting_mode" => self.model.halting_mode = HaltingMode::parse(value)?,
            "dacs_threshold" => self.model.dacs_threshold = num(key, value)?,
            "joint_threshold" => {
                self.model.joint_threshold = num(key, value)?;
                self.joint_threshold_set = true;
            }
            "chunk_central" => self.model.chunk_central = num(key, value)?,
            "chunk_left" => self.model.chunk_left = num(key, value)?,
            "chunk_right" => self.model.chunk_right = num(key, value)?,
            "subsample_factor" => self.model.subsample_factor = num(key, value)?,
            "label_smoothing" => self.model.label_smoothing = num(key, value)?,
            "dropout" => self.model.dropout = num(key, value)?,
            "model_seed" => self.model.seed = num(key, value)?,
            "epochs" => self.train.epochs = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "base_lr" => self.train.base_lr = num(key, value)?,
            "warmup_steps" => self.train.warmup_steps = num(key, value)?,
            "grad_clip_norm" => self.train.grad_clip_norm = num(key, value)?,
            "checkpoint_path" => self.train.checkpoint_path = value.to_string(),
            "train_samples" => self.train.train_samples = num(key, value)?,
            "train_seed" => self.train.seed = num(key, value)?,
            "data_vocab" => self.data.vocab = num(key, value)?,
            "len_min" => self.data.len_min = num(key, value)?,
            "len_max" => self.data.len_max = num(key, value)?,
            "dur_min" => self.data.dur_min = num(key, value)?,
            "dur_max" => self.data.dur_max = num(key, value)?,
            "d_feat" => {
                self.model.d_feat = num(key, value)?;
                self.data.d_feat = self.model.d_feat;
            }
            "noise_sigma" => self.data.noise_sigma = num(key, value)?,
            "codebook_seed" => self.data.codebook_seed = num(key, value)?,
            "sample_seed" => self.data.sample_seed = num(key, value)?,
            "eval_samples" => self.data.eval_samples = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Serialise every key. `parse(to_text(c))` reproduces `c`; this is the
    /// config echo embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("d_model", m.d_model.to_string());
        kv("heads", m.heads.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("d_ffn", m.d_ffn.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("max_lookahead", m.max_lookahead.to_string());
        kv("halting_mode", m.halting_mode.as_str().to_string());
        kv("dacs_threshold", format!("{:?}", m.dacs_threshold));
        kv("joint_threshold", format!("{:?}", m.joint_threshold));
        kv("chunk_central", m.chunk_central.to_string());
        kv("chunk_left", m.chunk_left.to_string());
        kv("chunk_right", m.chunk_right.to_string());
        kv("subsample_factor", m.subsample_factor.to_string());
        kv("label_smoothing", format!("{:?}", m.label_smoothing));
        kv("dropout", format!("{:?}", m.dropout));
        kv("model_seed", m.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("base_lr", format!("{:?}", t.base_lr));
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("grad_clip_norm", format!("{:?}", t.grad_clip_norm));
        kv("checkpoint_path", t.checkpoint_path.clone());
        kv("train_samples", t.train_samples.to_string());
        kv("train_seed", t.seed.to_string());
        kv("data_vocab", d.vocab.to_string());
        kv("len_min", d.len_min.to_string());
        kv("len_max", d.len_max.to_string());
        kv("dur_min", d.dur_min.to_string());
        kv("dur_max", d.dur_max.to_string());
        kv("d_feat", d.d_feat.to_string());
        kv("noise_sigma", format!("{:?}", d.noise_sigma));
        kv("codebook_seed", d.codebook_seed.to_string());
        kv("sample_seed", d.sample_seed.to_string());
        kv("eval_samples", d.eval_samples.to_string());
        s
    }

    /// The halting threshold the current mode uses.
    pub fn effective_threshold(&self) -> f64 {
        match self.model.halting_mode {
            HaltingMode::Dacs => self.model.dacs_threshold,
            _ => self.model.joint_threshold,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("d_model", "64").unwrap();
        cfg.set("heads", "4").unwrap();
        cfg.set("joint_threshold", "2.5").unwrap();
        cfg.finish();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.model.d_model, 64);
        assert_eq!(back.model.joint_threshold, 2.5);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = RunConfig::parse("d_modle = 64\n").unwrap_err();
        assert!(err.to_string().contains("d_modle"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nd_model = 128 # trailing\n").unwrap();
        assert_eq!(cfg.model.d_model, 128);
    }

    #[test]
    fn joint_threshold_defaults_to_head_count() {
        let cfg = RunConfig::parse("heads = 8\nd_model = 64\n").unwrap();
        assert_eq!(cfg.model.joint_threshold, 8.0);
        let cfg = RunConfig::parse("heads = 8\njoint_threshold = 3.0\n").unwrap();
        assert_eq!(cfg.model.joint_threshold, 3.0);
    }

    #[test]
    fn d_model_head_divisibility_enforced() {
        let mut cfg = RunConfig::default();
        cfg.set("d_model", "66").unwrap();
        cfg.set("heads", "4").unwrap();
        assert!(cfg.model.validate().is_err());
    }

    #[test]
    fn halting_mode_values() {
        assert_eq!(HaltingMode::parse("dacs").unwrap(), HaltingMode::Dacs);
        assert_eq!(HaltingMode::parse("hsdacs").unwrap(), HaltingMode::HsDacs);
        assert_eq!(HaltingMode::parse("offline").unwrap(), HaltingMode::Offline);
        assert!(HaltingMode::parse("online").is_err());
    }
}
