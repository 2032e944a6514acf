//! Run configuration: one TOML document with a section per pipeline stage.
//!
//! Every key has an embedded default, so an empty file is a valid config.
//! Environment variables named `FACEPREF_<SECTION>_<KEY>` override file
//! values (`FACEPREF_SEED` sets the top-level seed). Stage seeds are derived
//! from the top-level seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::coeffs::ActionVocabulary;
use crate::discriminator::DiscriminatorConfig;
use crate::dpo::DpoConfig;
use crate::error::{Error, Result};
use crate::facerender::RenderSpec;
use crate::policy::SftHyper;
use crate::prefdata::OracleConfig;
use crate::synthworld::{SplitCounts, WorldConfig};

pub const ENV_PREFIX: &str = "FACEPREF_";
pub const DEFAULT_SEED: u64 = 20260514;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// Vocabulary file relative to the workspace; empty selects the built-in 61-action layout.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    /// Region tasks labeled by the simulated panel for training.
    pub label_budget: usize,
    /// Fraction of held-out pairs, by descending pair MSE, forming the easy split.
    pub easy_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        let t = DiscriminatorConfig::default();
        Self {
            label_budget: 1000,
            easy_fraction: 0.10,
            steps: t.steps,
            lr: t.lr,
            weight_decay: t.weight_decay,
        }
    }
}

impl DiscriminatorSection {
    pub fn train_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            steps: self.steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    pub port: u16,
    pub lease_secs: u64,
    pub annotators_per_task: usize,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            lease_secs: 600,
            annotators_per_task: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub vocab: VocabSection,
    pub world: WorldConfig,
    pub splits: SplitCounts,
    pub sft: SftHyper,
    pub oracle: OracleConfig,
    pub discriminator: DiscriminatorSection,
    pub dpo: DpoConfig,
    pub render: RenderSpec,
    pub server: ServerSection,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Self {
            seed: DEFAULT_SEED,
            vocab: VocabSection::default(),
            world: WorldConfig::default(),
            splits: SplitCounts::default(),
            sft: SftHyper::default(),
            oracle: OracleConfig::default(),
            discriminator: DiscriminatorSection::default(),
            dpo: DpoConfig::default(),
            render: RenderSpec::default(),
            server: ServerSection::default(),
        };
        c.derive_seeds();
        c
    }
}

fn toml_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl Config {
    /// Parses a config document and applies environment overrides.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(toml_err)?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, value) in overrides {
            apply_env_override(&mut table, &key[ENV_PREFIX.len()..], &value)?;
        }
        let mut cfg: Config = table.try_into().map_err(toml_err)?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Reads `path` (or starts from defaults) and applies the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.derive_seeds();
    }

    fn derive_seeds(&mut self) {
        self.world.seed = self.seed;
        self.sft.seed = self.seed.wrapping_add(1);
        self.oracle.seed = self.seed.wrapping_add(2);
        self.dpo.seed = self.seed.wrapping_add(3);
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.world.pseudo_noise.validate()?;
        self.dpo.validate()?;
        if self.oracle.annotators == 0 {
            return Err(Error::Config("oracle.annotators must be positive".into()));
        }
        if self.server.annotators_per_task == 0 {
            return Err(Error::Config("server.annotators_per_task must be positive".into()));
        }
        if !(self.discriminator.easy_fraction > 0.0 && self.discriminator.easy_fraction < 1.0) {
            return Err(Error::Config("discriminator.easy_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Hash of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())[..16].to_string()
    }

    pub fn vocab_path(&self, workspace: &Path) -> Option<PathBuf> {
        (!self.vocab.path.is_empty()).then(|| workspace.join(&self.vocab.path))
    }

    pub fn load_vocab(&self, workspace: &Path) -> Result<ActionVocabulary> {
        match self.vocab_path(workspace) {
            Some(p) => ActionVocabulary::load(&p),
            None => Ok(ActionVocabulary::default()),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets the key named by `SECTION_KEY` (case-insensitive). Underscores
/// separate path segments but may also occur inside key names, so the
/// segments are matched greedily against the known layout.
fn apply_env_override(table: &mut toml::Table, name: &str, raw: &str) -> Result<()> {
    let lower = name.to_ascii_lowercase();
    let parts: Vec<&str> = lower.split('_').collect();
    let defaults = toml::Table::try_from(Config::default()).map_err(toml_err)?;
    let path = resolve_path(&defaults, &parts)
        .ok_or_else(|| Error::Config(format!("unknown config key in {ENV_PREFIX}{name}")))?;
    let mut node = table;
    for seg in &path[..path.len() - 1] {
        node = node
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{seg} is not a section")))?;
    }
    node.insert(path[path.len() - 1].clone(), parse_value(raw));
    Ok(())
}

fn resolve_path(layout: &toml::Table, parts: &[&str]) -> Option<Vec<String>> {
    for take in (1..=parts.len()).rev() {
        let key = parts[..take].join("_");
        match layout.get(&key) {
            Some(toml::Value::Table(inner)) if take < parts.len() => {
                if let Some(mut rest) = resolve_path(inner, &parts[take..]) {
                    rest.insert(0, key);
                    return Some(rest);
                }
            }
            Some(v) if take == parts.len() && !v.is_table() => return Some(vec![key]),
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn printed_config_round_trips() {
        let c = Config::default();
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_toml("seed = 5\n[dpo]\nbeta = 0.25\n").unwrap();
        assert_eq!(c.dpo.beta, 0.25);
        assert_eq!(c.dpo.epochs, DpoConfig::default().epochs);
        assert_eq!(c.world.seed, 5);
        assert_eq!(c.dpo.seed, 8);
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn env_overrides_reach_nested_keys() {
        let env = vec![
            ("FACEPREF_DPO_WIN_THRESHOLD".to_string(), "0.7".to_string()),
            ("FACEPREF_WORLD_PSEUDO_NOISE_DROP_PROB".to_string(), "0.5".to_string()),
            ("FACEPREF_SEED".to_string(), "9".to_string()),
            ("FACEPREF_DPO_MODE".to_string(), "oracle".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let c = Config::from_toml_with_env("[dpo]\nwin_threshold = 0.2\n", env).unwrap();
        assert_eq!(c.dpo.win_threshold, 0.7);
        assert_eq!(c.world.pseudo_noise.drop_prob, 0.5);
        assert_eq!(c.seed, 9);
        assert_eq!(c.dpo.mode, crate::dpo::AnnotatorMode::Oracle);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let err = Config::from_toml("[dpo]\nbogus = 1\n").unwrap_err();
        assert_eq!(err.kind(), "config");
        let err = Config::from_toml("mystery = 1\n").unwrap_err();
        assert_eq!(err.kind(), "config");
        let env = vec![("FACEPREF_DPO_NOPE".to_string(), "1".to_string())];
        assert_eq!(Config::from_toml_with_env("", env).unwrap_err().kind(), "config");
        assert_eq!(Config::from_toml("[dpo]\nbeta = -1.0\n").unwrap_err().kind(), "config");
    }
}
