//! Facial action coefficients: the vocabulary, value sets, region algebra,
//! and quantization used to tokenize activations for the policy.
//!
//! A [`CoefficientSet`] holds one activation in `[0, 1]` per vocabulary action.
//! The vocabulary partitions actions into an upper-face and a lower-face
//! region; [`split`], [`merge`] and [`mix`] move values between the two halves
//! without ever touching the other region.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Number of actions in the default vocabulary.
pub const DEFAULT_ACTIONS: usize = 61;
/// Number of leading default actions assigned to the upper face.
pub const DEFAULT_UPPER: usize = 26;
/// Default quantization bin count (step 0.05).
pub const DEFAULT_BINS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Upper,
    Lower,
}

impl Region {
    pub const BOTH: [Region; 2] = [Region::Upper, Region::Lower];

    pub fn other(self) -> Region {
        match self {
            Region::Upper => Region::Lower,
            Region::Lower => Region::Upper,
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Upper => f.write_str("upper"),
            Region::Lower => f.write_str("lower"),
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "upper" => Ok(Region::Upper),
            "lower" => Ok(Region::Lower),
            other => Err(Error::Config(format!("unknown region `{other}`"))),
        }
    }
}

/// Ordered action names, their region partition, and the quantization bin count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionVocabulary {
    actions: Vec<String>,
    regions: Vec<Region>,
    bins: usize,
    upper: Vec<usize>,
    lower: Vec<usize>,
}

impl ActionVocabulary {
    pub fn new(actions: Vec<String>, regions: Vec<Region>, bins: usize) -> Result<Self> {
        if actions.len() < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs at least 2 actions, got {}",
                actions.len()
            )));
        }
        if actions.len() != regions.len() {
            return Err(Error::Config(format!(
                "{} actions but {} region assignments",
                actions.len(),
                regions.len()
            )));
        }
        if bins < 2 {
            return Err(Error::Config(format!("bin count must be >= 2, got {bins}")));
        }
        let mut seen = HashSet::new();
        for name in &actions {
            if name.is_empty() || name.contains(char::is_whitespace) || name.contains('=') {
                return Err(Error::Config(format!("invalid action name `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate action name `{name}`")));
            }
        }
        let upper: Vec<usize> = (0..regions.len())
            .filter(|&i| regions[i] == Region::Upper)
            .collect();
        let lower: Vec<usize> = (0..regions.len())
            .filter(|&i| regions[i] == Region::Lower)
            .collect();
        if upper.is_empty() || lower.is_empty() {
            return Err(Error::Config("both regions must be non-empty".into()));
        }
        Ok(Self {
            actions,
            regions,
            bins,
            upper,
            lower,
        })
    }

    /// Generic `action_00..action_60` names, first 26 upper, 21 bins.
    pub fn default_arkit61() -> Self {
        Self::generic(DEFAULT_ACTIONS, DEFAULT_UPPER, DEFAULT_BINS)
            .expect("default vocabulary is valid")
    }

    /// `k` generic names with the first `upper` indices in the upper region.
    pub fn generic(k: usize, upper: usize, bins: usize) -> Result<Self> {
        let width = if k > 100 { 3 } else { 2 };
        let actions = (0..k).map(|i| format!("action_{i:0width$}")).collect();
        let regions = (0..k)
            .map(|i| if i < upper { Region::Upper } else { Region::Lower })
            .collect();
        Self::new(actions, regions, bins)
    }

    /// Parses the key-value vocabulary format: a `bins = N` header followed
    /// by one `name = upper|lower` line per action. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bins = None;
        let mut actions = Vec::new();
        let mut regions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key == "bins" {
                if !actions.is_empty() {
                    return Err(Error::Config("`bins` must precede action lines".into()));
                }
                let n = value
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: bad bin count", lineno + 1)))?;
                bins = Some(n);
            } else {
                actions.push(key.to_string());
                regions.push(value.parse()?);
            }
        }
        let bins = bins.ok_or_else(|| Error::Config("missing `bins` header".into()))?;
        Self::new(actions, regions, bins)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_config_text())` is the identity.
    pub fn to_config_text(&self) -> String {
        let mut out = format!("bins = {}\n", self.bins);
        for (name, region) in self.actions.iter().zip(&self.regions) {
            out.push_str(&format!("{name} = {region}\n"));
        }
        out
    }

    /// Short content hash embedded in every model file.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn name(&self, index: usize) -> &str {
        &self.actions[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.actions.iter().position(|a| a == name)
    }

    pub fn region_of(&self, index: usize) -> Region {
        self.regions[index]
    }

    /// Vocabulary indices of a region, in vocabulary order.
    pub fn indices(&self, region: Region) -> &[usize] {
        match region {
            Region::Upper => &self.upper,
            Region::Lower => &self.lower,
        }
    }

    /// `true` at every index belonging to `region`.
    pub fn mask(&self, region: Region) -> Vec<bool> {
        self.regions.iter().map(|&r| r == region).collect()
    }

    fn check(&self, s: &CoefficientSet) -> Result<()> {
        if s.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: s.len(),
            });
        }
        Ok(())
    }
}

impl Default for ActionVocabulary {
    fn default() -> Self {
        Self::default_arkit61()
    }
}

/// One activation level in `[0, 1]` per vocabulary action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefficientSet {
    values: Vec<f64>,
}

impl CoefficientSet {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!("coefficient {i} = {v}")));
            }
        }
        Ok(Self { values })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            values: vec![0.0; k],
        }
    }

    pub fn filled(k: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Name-keyed map for dataset records.
    pub fn to_named(&self, vocab: &ActionVocabulary) -> Result<BTreeMap<String, f64>> {
        vocab.check(self)?;
        Ok(vocab
            .actions()
            .iter()
            .cloned()
            .zip(self.values.iter().copied())
            .collect())
    }

    pub fn from_named(map: &BTreeMap<String, f64>, vocab: &ActionVocabulary) -> Result<Self> {
        if map.len() != vocab.len() {
            return Err(Error::Dimension {
                expected: vocab.len(),
                got: map.len(),
            });
        }
        let values = vocab
            .actions()
            .iter()
            .map(|name| {
                map.get(name)
                    .copied()
                    .ok_or_else(|| Error::Unknown(format!("missing action `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

impl TryFrom<Vec<f64>> for CoefficientSet {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<CoefficientSet> for Vec<f64> {
    fn from(s: CoefficientSet) -> Self {
        s.values
    }
}

/// The activations of one region, in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionalSubset {
    pub region: Region,
    pub values: Vec<f64>,
}

pub fn split(s: &CoefficientSet, vocab: &ActionVocabulary) -> Result<(RegionalSubset, RegionalSubset)> {
    vocab.check(s)?;
    let take = |region| RegionalSubset {
        region,
        values: vocab.indices(region).iter().map(|&i| s.values[i]).collect(),
    };
    Ok((take(Region::Upper), take(Region::Lower)))
}

pub fn merge(
    upper: &RegionalSubset,
    lower: &RegionalSubset,
    vocab: &ActionVocabulary,
) -> Result<CoefficientSet> {
    if upper.region != Region::Upper || lower.region != Region::Lower {
        return Err(Error::Config("merge expects (upper, lower) subsets".into()));
    }
    let mut values = vec![0.0; vocab.len()];
    for subset in [upper, lower] {
        let idx = vocab.indices(subset.region);
        if subset.values.len() != idx.len() {
            return Err(Error::Dimension {
                expected: idx.len(),
                got: subset.values.len(),
            });
        }
        for (&i, &v) in idx.iter().zip(&subset.values) {
            values[i] = v;
        }
    }
    CoefficientSet::new(values)
}

/// Exchanges halves: returns `(upper of a + lower of b, upper of b + lower of a)`.
pub fn mix(
    a: &CoefficientSet,
    b: &CoefficientSet,
    vocab: &ActionVocabulary,
) -> Result<(CoefficientSet, CoefficientSet)> {
    let (a_u, a_l) = split(a, vocab)?;
    let (b_u, b_l) = split(b, vocab)?;
    Ok((merge(&a_u, &b_l, vocab)?, merge(&b_u, &a_l, vocab)?))
}

/// Bin index `round(v * (bins - 1))`, halves rounded away from zero.
pub fn quantize(v: f64, bins: usize) -> Result<usize> {
    if bins < 2 {
        return Err(Error::OutOfRange(format!("bin count {bins}")));
    }
    if !v.is_finite() || !(0.0..=1.0).contains(&v) {
        return Err(Error::OutOfRange(format!("activation {v}")));
    }
    Ok((v * (bins - 1) as f64).round() as usize)
}

pub fn dequantize(index: usize, bins: usize) -> Result<f64> {
    if bins < 2 || index >= bins {
        return Err(Error::OutOfRange(format!("bin {index} of {bins}")));
    }
    Ok(index as f64 / (bins - 1) as f64)
}

/// Snaps every value to its bin center.
pub fn snap(s: &CoefficientSet, bins: usize) -> Result<CoefficientSet> {
    let values = s
        .values()
        .iter()
        .map(|&v| dequantize(quantize(v, bins)?, bins))
        .collect::<Result<Vec<_>>>()?;
    CoefficientSet::new(values)
}

/// Squared L2 distance (a sum, not a mean).
pub fn mse(a: &CoefficientSet, b: &CoefficientSet) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Squared L2 distance restricted to one region.
pub fn region_mse(
    a: &CoefficientSet,
    b: &CoefficientSet,
    vocab: &ActionVocabulary,
    region: Region,
) -> Result<f64> {
    vocab.check(a)?;
    vocab.check(b)?;
    Ok(vocab
        .indices(region)
        .iter()
        .map(|&i| (a.values[i] - b.values[i]).powi(2))
        .sum())
}
