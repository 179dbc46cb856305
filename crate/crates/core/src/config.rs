//! Run configuration files.
//!
//! UTF-8 `key = value` lines; `#` starts a comment. Every key must be known.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::regions::GridGeometry;
use crate::error::{Error, Result};
use crate::features::DEFAULT_FEATURE_DIM;
use crate::train::TrainConfig;

pub const KEYS: [&str; 26] = [
    "seed",
    "epochs",
    "batch_size",
    "augment",
    "balance",
    "mode",
    "k",
    "l2",
    "dropout_rate",
    "hidden_dim",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "eval_every",
    "val_fraction",
    "max_shift",
    "window",
    "stride",
    "coverage",
    "folds",
    "feature_dim",
    "feature_seed",
    "data",
    "features",
    "run",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub geometry: GridGeometry,
    pub folds: usize,
    pub feature_dim: usize,
    pub feature_seed: u64,
    pub data: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub run: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            geometry: GridGeometry::default(),
            folds: 5,
            feature_dim: DEFAULT_FEATURE_DIM,
            feature_seed: 0,
            data: None,
            features: None,
            run: None,
        }
    }
}

fn value<T: FromStr>(key: &str, text: &str) -> Result<T> {
    text.parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value `{text}` for `{key}`")))
}

fn flag(key: &str, text: &str) -> Result<bool> {
    match text {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad boolean `{text}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, text: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => t.seed = value(key, text)?,
            "epochs" => t.epochs = value(key, text)?,
            "batch_size" => t.batch_size = value(key, text)?,
            "augment" => t.augment = flag(key, text)?,
            "balance" => t.balance = flag(key, text)?,
            "mode" => t.hyper.mode = text.parse()?,
            "k" => t.hyper.k = value(key, text)?,
            "l2" => t.hyper.l2 = value(key, text)?,
            "dropout_rate" => t.hyper.dropout_rate = value(key, text)?,
            "hidden_dim" => t.hidden_dim = value(key, text)?,
            "lr" => t.lr = value(key, text)?,
            "beta1" => t.beta1 = value(key, text)?,
            "beta2" => t.beta2 = value(key, text)?,
            "adam_eps" => t.adam_eps = value(key, text)?,
            "eval_every" => t.eval_every = value(key, text)?,
            "val_fraction" => t.val_fraction = value(key, text)?,
            "max_shift" => t.max_shift = value(key, text)?,
            "window" => self.geometry.window = value(key, text)?,
            "stride" => self.geometry.stride = value(key, text)?,
            "coverage" => self.geometry.coverage = value(key, text)?,
            "folds" => self.folds = value(key, text)?,
            "feature_dim" => self.feature_dim = value(key, text)?,
            "feature_seed" => self.feature_seed = value(key, text)?,
            "data" => self.data = Some(PathBuf::from(text)),
            "features" => self.features = Some(PathBuf::from(text)),
            "run" => self.run = Some(PathBuf::from(text)),
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Current value of `key` in file syntax; `None` for unset paths.
    pub fn get(&self, key: &str) -> Result<Option<String>> {
        fn s(v: impl Display) -> Option<String> {
            Some(v.to_string())
        }
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Ok(match key {
            "seed" => s(t.seed),
            "epochs" => s(t.epochs),
            "batch_size" => s(t.batch_size),
            "augment" => s(t.augment),
            "balance" => s(t.balance),
            "mode" => s(t.hyper.mode),
            "k" => s(t.hyper.k),
            "l2" => s(t.hyper.l2),
            "dropout_rate" => s(t.hyper.dropout_rate),
            "hidden_dim" => s(t.hidden_dim),
            "lr" => s(t.lr),
            "beta1" => s(t.beta1),
            "beta2" => s(t.beta2),
            "adam_eps" => s(t.adam_eps),
            "eval_every" => s(t.eval_every),
            "val_fraction" => s(t.val_fraction),
            "max_shift" => s(t.max_shift),
            "window" => s(self.geometry.window),
            "stride" => s(self.geometry.stride),
            "coverage" => s(self.geometry.coverage),
            "folds" => s(self.folds),
            "feature_dim" => s(self.feature_dim),
            "feature_seed" => s(self.feature_seed),
            "data" => path(&self.data),
            "features" => path(&self.features),
            "run" => path(&self.run),
            _ => return Err(Error::UnknownKey(key.to_string())),
        })
    }

    /// Applies every line of `text` on top of `self`. `source` names the text
    /// in error messages.
    pub fn apply_text(&mut self, text: &str, source: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::InvalidArgument(m) => {
                    Error::InvalidArgument(format!("{}:{}: {m}", source.display(), n + 1))
                }
                other => other,
            };
            let (key, val) = line.split_once('=').ok_or_else(|| {
                at(Error::InvalidArgument(format!("expected key = value, got `{line}`")))
            })?;
            self.set(key.trim(), val.trim()).map_err(at)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, source)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every set key, one per line, in `KEYS` order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.get(key).expect("known key") {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.geometry.validate()?;
        if self.folds < 2 {
            return Err(Error::InvalidArgument("folds must be at least 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let text = "# run\nepochs = 3\n\nmode=max-region # ablation\nlr = 0.001\n";
        let cfg = RunConfig::parse(text, Path::new("c.txt")).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.hyper.mode, Mode::MaxRegion);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, RunConfig::default().train.batch_size);
    }

    #[test]
    fn unknown_key_is_usage_error() {
        let e = RunConfig::parse("epoch = 3\n", Path::new("c.txt")).unwrap_err();
        assert!(matches!(e, Error::UnknownKey(ref k) if k == "epoch"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn bad_value_names_line() {
        let e = RunConfig::parse("\nk = three\n", Path::new("c.txt")).unwrap_err();
        assert!(e.to_string().contains("c.txt:2"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("coverage", "0.3").unwrap();
        cfg.set("l2", "0.00012345678901234").unwrap();
        cfg.set("run", "/tmp/r").unwrap();
        let back = RunConfig::parse(&cfg.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }
}
