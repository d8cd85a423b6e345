//! Flat `key = value` configuration files and the fusion model configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mdim::KvMode;

/// One `key = value` entry with its 1-based line number.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries. Blank lines and `#` comments (whole-line or trailing) are skipped.
pub fn parse_entries(text: &str, path: &Path) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            });
        };
        out.push(Entry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Parses `value` as `V`, reporting `key` and the line on failure.
pub fn parse_value<V: FromStr>(entry: &Entry, path: &Path) -> Result<V> {
    entry.value.parse().map_err(|_| Error::Config {
        path: path.to_path_buf(),
        line: entry.line,
        msg: format!("cannot parse value `{}` for key `{}`", entry.value, entry.key),
    })
}

/// Model variants used for ablation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// Motion mask forced to 1 everywhere in the interaction module.
    FullDb,
    /// Dynamic branch removed; output is the static branch alone.
    FullSb,
    /// Interaction module sees `1 − M` instead of `M`.
    InvertedMask,
    /// Every patch is a query; no Top-K selection.
    DenseAttention,
    /// Alignment replaced by the plain mean of the three unaligned frames.
    NoMafm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::FullDb,
        Variant::FullSb,
        Variant::InvertedMask,
        Variant::DenseAttention,
        Variant::NoMafm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::FullDb => "full_db",
            Variant::FullSb => "full_sb",
            Variant::InvertedMask => "inverted_mask",
            Variant::DenseAttention => "dense_attention",
            Variant::NoMafm => "no_mafm",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Top-K retention ratio.
    pub tau: f64,
    /// Patch side length.
    pub patch: usize,
    pub k_max: usize,
    pub channels: usize,
    /// Temporal loss weight.
    pub gamma: f64,
    /// Threshold turning the motion mask into the alignment gate.
    pub gate_theta: f64,
    pub kv_mode: KvMode,
    pub variant: Variant,
    pub seed: u64,
    pub lr: f64,
    pub iters: usize,
    /// Training crop side length.
    pub crop: usize,
    /// Windows per optimizer step.
    pub batch: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tau: 0.25,
            patch: 8,
            k_max: 256,
            channels: 16,
            gamma: 1.0,
            gate_theta: 0.5,
            kv_mode: KvMode::AllPatches,
            variant: Variant::Full,
            seed: 0,
            lr: 1e-4,
            iters: 300,
            crop: 64,
            batch: 4,
        }
    }
}

impl FusionConfig {
    pub const KEYS: [&'static str; 13] = [
        "tau",
        "patch",
        "k_max",
        "channels",
        "gamma",
        "variant",
        "kv_mode",
        "gate_theta",
        "seed",
        "lr",
        "iters",
        "crop",
        "batch",
    ];

    /// Sets one key from its textual value. Unknown keys and unparsable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("cannot parse value `{value}` for key `{key}`")))
        }
        match key {
            "tau" => self.tau = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "k_max" => self.k_max = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "kv_mode" => {
                self.kv_mode = KvMode::parse(value).ok_or_else(|| Error::invalid(format!("unknown kv_mode `{value}`")))?
            }
            "gate_theta" => self.gate_theta = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "iters" => self.iters = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.patch < 2 {
            return bad(format!("patch must be >= 2, got {}", self.patch));
        }
        if self.k_max < 1 {
            return bad("k_max must be >= 1".into());
        }
        if self.channels < 1 {
            return bad("channels must be >= 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gate_theta) {
            return bad(format!("gate_theta must be in [0, 1], got {}", self.gate_theta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch < 1 {
            return bad("batch must be >= 1".into());
        }
        Ok(())
    }

    /// Parses a config file body; `path` is only used for error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for e in parse_entries(text, path)? {
            cfg.set(&e.key, &e.value).map_err(|err| Error::Config {
                path: path.to_path_buf(),
                line: e.line,
                msg: match err {
                    Error::InvalidArgument(m) => m,
                    other => other.to_string(),
                },
            })?;
        }
        cfg.validate().map_err(|err| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            msg: err.to_string(),
        })?;
        Ok(cfg)
    }

    /// Normalized text form: every key, fixed order, shortest round-trip number formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in Self::KEYS {
            writeln!(s, "{key} = {}", self.get(key)).unwrap();
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "tau" => self.tau.to_string(),
            "patch" => self.patch.to_string(),
            "k_max" => self.k_max.to_string(),
            "channels" => self.channels.to_string(),
            "gamma" => self.gamma.to_string(),
            "variant" => self.variant.to_string(),
            "kv_mode" => self.kv_mode.name().to_string(),
            "gate_theta" => self.gate_theta.to_string(),
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "iters" => self.iters.to_string(),
            "crop" => self.crop.to_string(),
            "batch" => self.batch.to_string(),
            _ => unreachable!(),
        }
    }
}
