//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. Every command writes the fully resolved configuration next to its
//! outputs so a run can be repeated from that file alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use adcrowd::{CorpusConfig, PipelineVariant, TrainConfig, VariantKind};

use crate::CliError;

/// Test split scored by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Test,
    TestNoisy,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::TestNoisy => "test_noisy",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "test" => Some(Split::Test),
            "test_noisy" => Some(Split::TestNoisy),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub variant: PipelineVariant,
    /// Also write a distractor-heavy copy of the test split (`test_noisy/`).
    pub noisy_test: bool,
    pub split: Split,
    pub corpus_dir: Option<PathBuf>,
    pub amg_checkpoint: Option<PathBuf>,
    pub dme_checkpoint: Option<PathBuf>,
    pub write_predictions: bool,
    pub write_attention: bool,
    /// Score the ground truth against itself instead of running a model.
    pub oracle: bool,
    /// Evaluate the binarized-attention variant at every sweep threshold.
    pub sweep: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: CorpusConfig::default(),
            train: TrainConfig::default(),
            variant: PipelineVariant::of(VariantKind::AmgDme),
            noisy_test: false,
            split: Split::Test,
            corpus_dir: None,
            amg_checkpoint: None,
            dme_checkpoint: None,
            write_predictions: false,
            write_attention: false,
            oracle: false,
            sweep: false,
        }
    }
}

pub const KEYS: [&str; 27] = [
    "image_size",
    "train_crowd",
    "train_background",
    "test_crowd",
    "heads_min",
    "heads_max",
    "head_radius_min",
    "head_radius_max",
    "distractors_min",
    "distractors_max",
    "noise_amplitude",
    "sigma",
    "rng_seed",
    "noisy_test",
    "learning_rate",
    "batch_size",
    "epochs",
    "variant",
    "threshold",
    "split",
    "corpus_dir",
    "amg_checkpoint",
    "dme_checkpoint",
    "write_predictions",
    "write_attention",
    "oracle",
    "sweep",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn flag(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid boolean {value:?} for {key}")),
    }
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Applies one `key=value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let c = &mut self.corpus;
        let t = &mut self.train;
        match key {
            "image_size" => c.image_size = num(key, value)?,
            "train_crowd" => c.train_crowd = num(key, value)?,
            "train_background" => c.train_background = num(key, value)?,
            "test_crowd" => c.test_crowd = num(key, value)?,
            "heads_min" => c.heads_min = num(key, value)?,
            "heads_max" => c.heads_max = num(key, value)?,
            "head_radius_min" => c.head_radius_min = num(key, value)?,
            "head_radius_max" => c.head_radius_max = num(key, value)?,
            "distractors_min" => c.distractors_min = num(key, value)?,
            "distractors_max" => c.distractors_max = num(key, value)?,
            "noise_amplitude" => c.noise_amplitude = num(key, value)?,
            "sigma" => c.sigma = num(key, value)?,
            "rng_seed" => {
                let seed = num(key, value)?;
                c.rng_seed = seed;
                t.rng_seed = seed;
            }
            "noisy_test" => self.noisy_test = flag(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "variant" => self.variant.kind = value.parse().map_err(|e: adcrowd::Error| e.to_string())?,
            "threshold" => self.variant.threshold = num(key, value)?,
            "split" => {
                self.split = Split::parse(value)
                    .ok_or_else(|| format!("invalid split {value:?} (expected test or test_noisy)"))?
            }
            "corpus_dir" => self.corpus_dir = path_value(value),
            "amg_checkpoint" => self.amg_checkpoint = path_value(value),
            "dme_checkpoint" => self.dme_checkpoint = path_value(value),
            "write_predictions" => self.write_predictions = flag(key, value)?,
            "write_attention" => self.write_attention = flag(key, value)?,
            "oracle" => self.oracle = flag(key, value)?,
            "sweep" => self.sweep = flag(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies a whole config file.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Format(format!("{origin}:{}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| CliError::Format(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.train.validate()?;
        PipelineVariant::new(self.variant.kind, self.variant.threshold)?;
        Ok(())
    }

    pub fn corpus_dir(&self, out: &Path) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| out.join("corpus"))
    }

    pub fn amg_checkpoint(&self, out: &Path) -> PathBuf {
        self.amg_checkpoint.clone().unwrap_or_else(|| out.join("amg.ckpt"))
    }

    pub fn dme_checkpoint(&self, out: &Path) -> PathBuf {
        self.dme_checkpoint.clone().unwrap_or_else(|| out.join("dme.ckpt"))
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn to_text(&self, out: &Path) -> String {
        let c = &self.corpus;
        let t = &self.train;
        let values = [
            c.image_size.to_string(),
            c.train_crowd.to_string(),
            c.train_background.to_string(),
            c.test_crowd.to_string(),
            c.heads_min.to_string(),
            c.heads_max.to_string(),
            c.head_radius_min.to_string(),
            c.head_radius_max.to_string(),
            c.distractors_min.to_string(),
            c.distractors_max.to_string(),
            c.noise_amplitude.to_string(),
            c.sigma.to_string(),
            c.rng_seed.to_string(),
            self.noisy_test.to_string(),
            t.learning_rate.to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            self.variant.kind.to_string(),
            self.variant.threshold.to_string(),
            self.split.dir().to_string(),
            self.corpus_dir(out).display().to_string(),
            self.amg_checkpoint(out).display().to_string(),
            self.dme_checkpoint(out).display().to_string(),
            self.write_predictions.to_string(),
            self.write_attention.to_string(),
            self.oracle.to_string(),
            self.sweep.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nepochs = 3\nvariant=AMG-bAttn-DME\nthreshold=0.2\nrng_seed=7\n", "t")
            .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.corpus.rng_seed, 7);
        assert_eq!(cfg.train.rng_seed, 7);
        let out = Path::new("run");
        let text = cfg.to_text(out);
        let mut again = RunConfig::default();
        again.apply_text(&text, "resolved").unwrap();
        assert_eq!(again.to_text(out), text);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_entries_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_text("epoch=3\n", "t").is_err());
        assert!(cfg.apply_text("epochs\n", "t").is_err());
        assert!(cfg.apply_text("epochs=many\n", "t").is_err());
        assert!(cfg.apply_text("split=validation\n", "t").is_err());
        assert!(cfg.apply_text("variant=UNet\n", "t").is_err());
    }
}
