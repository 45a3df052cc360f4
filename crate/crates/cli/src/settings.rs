//! `key = value` configuration files merged under command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key a configuration file may set. Flags use the same names with
/// dashes instead of underscores.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    // model
    "hidden_dim",
    "encoder_layers",
    "decoder_layers",
    "heads",
    "ffn_dim",
    "max_positions",
    "dropout",
    "alpha",
    "max_vocab",
    // training
    "epochs",
    "max_steps",
    "batch_size",
    "lr",
    "weight_decay",
    "clip_norm",
    "no_di",
    "global_negatives",
    // generation
    "k",
    "gamma",
    "max_sentence_tokens",
    "max_utilized",
    "max_iterations",
    "beam",
    "no_ds",
    "no_pg",
    "no_rp",
    // latency
    "runs",
    "passages",
    "tokens",
];

#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!("{origin}:{}: expected key = value", i + 1)));
            };
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("{origin}:{}: unknown key `{key}`", i + 1)));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("{origin}:{}: key `{key}` set more than once", i + 1)));
            }
        }
        Ok(Self { values })
    }

    /// Flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        debug_assert!(KNOWN_KEYS.contains(&key), "{key}");
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{s}`"))),
            None => Ok(default),
        }
    }

    /// Boolean switches: a set flag wins; otherwise the file decides.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        self.pick(key, flag.then_some(true), false)
    }

    pub fn optional<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("config key `{key}`: cannot parse `{s}`"))),
            None => Ok(None),
        }
    }
}
