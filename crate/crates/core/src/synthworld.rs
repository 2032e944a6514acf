//! Synthetic subjects standing in for camera frames and capture-software labels.
//!
//! Each sample has a hidden ground-truth coefficient set, a noisy observation
//! of it (the policy's conditioning input), and a pseudo label produced by a
//! corruption model with per-subject magnitude bias, per-frame jitter,
//! dropped actions and spurious activations.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coeffs::{ActionVocabulary, CoefficientSet};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

/// Distribution of an active action's value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActiveDist {
    Beta { alpha: f64, beta: f64 },
    Fixed { value: f64 },
}

impl ActiveDist {
    fn validate(&self) -> Result<()> {
        match *self {
            ActiveDist::Beta { alpha, beta } if alpha > 0.0 && beta > 0.0 => Ok(()),
            ActiveDist::Fixed { value } if value > 0.0 && value <= 1.0 => Ok(()),
            other => Err(Error::Config(format!("invalid active distribution {other:?}"))),
        }
    }

    fn draw(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            ActiveDist::Beta { alpha, beta } => {
                let dist = Beta::new(alpha, beta).expect("validated beta parameters");
                // Active values live in (0, 1].
                dist.sample(rng).max(f64::MIN_POSITIVE)
            }
            ActiveDist::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoNoiseConfig {
    /// Per-subject multiplicative bias is drawn uniformly from `[bias_min, bias_max]`.
    pub bias_min: f64,
    pub bias_max: f64,
    /// Probability an active action is zeroed.
    pub drop_prob: f64,
    /// Probability an inactive action gains a value in `(0, spurious_max]`.
    pub spurious_prob: f64,
    pub spurious_max: f64,
    /// Additive Gaussian jitter std.
    pub add_sigma: f64,
}

impl Default for PseudoNoiseConfig {
    fn default() -> Self {
        Self {
            bias_min: 0.4,
            bias_max: 0.9,
            drop_prob: 0.05,
            spurious_prob: 0.1,
            spurious_max: 0.2,
            add_sigma: 0.03,
        }
    }
}

impl PseudoNoiseConfig {
    /// No corruption at all: pseudo label equals ground truth.
    pub fn identity() -> Self {
        Self {
            bias_min: 1.0,
            bias_max: 1.0,
            drop_prob: 0.0,
            spurious_prob: 0.0,
            spurious_max: 0.2,
            add_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1], got {p}")))
            }
        };
        prob("drop_prob", self.drop_prob)?;
        prob("spurious_prob", self.spurious_prob)?;
        if !(self.bias_min > 0.0 && self.bias_min <= self.bias_max) {
            return Err(Error::Config(format!(
                "bias range [{}, {}] must be positive and ordered",
                self.bias_min, self.bias_max
            )));
        }
        if !(self.spurious_max > 0.0 && self.spurious_max <= 1.0) {
            return Err(Error::Config("spurious_max must be in (0,1]".into()));
        }
        if !(self.add_sigma >= 0.0) {
            return Err(Error::Config("add_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Probability an action is active in ground truth.
    pub sparsity: f64,
    pub active_dist: ActiveDist,
    pub obs_noise_sigma: f64,
    pub pseudo_noise: PseudoNoiseConfig,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            sparsity: 0.3,
            active_dist: ActiveDist::Beta {
                alpha: 2.0,
                beta: 2.0,
            },
            obs_noise_sigma: 0.05,
            pseudo_noise: PseudoNoiseConfig::default(),
            seed: 20260514,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} not in [0,1]", self.sparsity)));
        }
        if !(self.obs_noise_sigma >= 0.0) {
            return Err(Error::Config("obs_noise_sigma must be >= 0".into()));
        }
        self.active_dist.validate()?;
        self.pseudo_noise.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub sft: usize,
    pub rollout: usize,
    pub eval: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            sft: 300,
            rollout: 3000,
            eval: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sft,
    Rollout,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Sft, Split::Rollout, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Sft => "sft",
            Split::Rollout => "rollout",
            Split::Eval => "eval",
        }
    }

    /// Subject ids owned by the split: one for SFT, seven for rollout, two held out.
    pub fn subjects(self) -> std::ops::Range<u32> {
        match self {
            Split::Sft => 0..1,
            Split::Rollout => 1..8,
            Split::Eval => 8..10,
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub subject_id: u32,
    pub ground_truth: CoefficientSet,
    pub pseudo_label: CoefficientSet,
    pub observation: Vec<f64>,
}

pub const SAMPLES_SCHEMA: &str = "facepref.samples";

/// On-disk form of a sample, with coefficients keyed by action name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject_id: u32,
    pub ground_truth: BTreeMap<String, f64>,
    pub pseudo_label: BTreeMap<String, f64>,
    pub observation: Vec<f64>,
}

impl Sample {
    pub fn to_record(&self, vocab: &ActionVocabulary) -> Result<SampleRecord> {
        Ok(SampleRecord {
            id: self.id.clone(),
            subject_id: self.subject_id,
            ground_truth: self.ground_truth.to_named(vocab)?,
            pseudo_label: self.pseudo_label.to_named(vocab)?,
            observation: self.observation.clone(),
        })
    }

    pub fn from_record(record: SampleRecord, vocab: &ActionVocabulary) -> Result<Self> {
        if record.observation.len() != vocab.len() {
            return Err(Error::Dimension {
                expected: vocab.len(),
                got: record.observation.len(),
            });
        }
        Ok(Self {
            ground_truth: CoefficientSet::from_named(&record.ground_truth, vocab)?,
            pseudo_label: CoefficientSet::from_named(&record.pseudo_label, vocab)?,
            id: record.id,
            subject_id: record.subject_id,
            observation: record.observation,
        })
    }
}

pub fn sample_ground_truth(
    cfg: &WorldConfig,
    k: usize,
    rng: &mut StreamRng,
) -> CoefficientSet {
    let values = (0..k)
        .map(|_| {
            if rng.random::<f64>() < cfg.sparsity {
                cfg.active_dist.draw(rng)
            } else {
                0.0
            }
        })
        .collect();
    CoefficientSet::new(values).expect("ground truth values lie in [0,1]")
}

/// Per-action magnitude bias of one synthetic subject.
pub fn subject_bias(noise: &PseudoNoiseConfig, k: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..k)
        .map(|_| {
            if noise.bias_max > noise.bias_min {
                rng.random_range(noise.bias_min..=noise.bias_max)
            } else {
                noise.bias_min
            }
        })
        .collect()
}

pub fn corrupt_to_pseudo_label(
    gt: &CoefficientSet,
    noise: &PseudoNoiseConfig,
    bias: &[f64],
    rng: &mut StreamRng,
) -> Result<CoefficientSet> {
    if bias.len() != gt.len() {
        return Err(Error::Dimension {
            expected: gt.len(),
            got: bias.len(),
        });
    }
    let jitter = Normal::new(0.0, noise.add_sigma)
        .map_err(|e| Error::Config(format!("add_sigma: {e}")))?;
    let values = gt
        .values()
        .iter()
        .zip(bias)
        .map(|(&v, &b)| {
            let mut out = (b * v + jitter.sample(rng)).clamp(0.0, 1.0);
            let active = v > 0.0;
            if active {
                if rng.random::<f64>() < noise.drop_prob {
                    out = 0.0;
                }
            } else if rng.random::<f64>() < noise.spurious_prob {
                // Uniform on (0, spurious_max].
                out = noise.spurious_max * (1.0 - rng.random::<f64>());
            }
            out
        })
        .collect();
    CoefficientSet::new(values)
}

pub fn observe(gt: &CoefficientSet, sigma: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let noise =
        Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("obs sigma: {e}")))?;
    Ok(gt
        .values()
        .iter()
        .map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub sft: Vec<Sample>,
    pub rollout: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[Sample] {
        match split {
            Split::Sft => &self.sft,
            Split::Rollout => &self.rollout,
            Split::Eval => &self.eval,
        }
    }
}

/// Generates one split. Each sample draws from its own stream keyed by
/// `(seed, split, index)`; subject biases are keyed by `(seed, subject)`.
pub fn generate_split(
    cfg: &WorldConfig,
    vocab: &ActionVocabulary,
    split: Split,
    count: usize,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::Config(format!("{} split count must be positive", split.name())));
    }
    let k = vocab.len();
    let subjects: Vec<u32> = split.subjects().collect();
    let biases: Vec<Vec<f64>> = subjects
        .iter()
        .map(|&s| {
            let mut r = rng::stream(cfg.seed, "subject-bias", &[s as u64]);
            subject_bias(&cfg.pseudo_noise, k, &mut r)
        })
        .collect();
    (0..count)
        .map(|i| {
            let slot = i % subjects.len();
            let ids = [split.code(), i as u64];
            let gt = sample_ground_truth(cfg, k, &mut rng::stream(cfg.seed, "gt", &ids));
            let pseudo = corrupt_to_pseudo_label(
                &gt,
                &cfg.pseudo_noise,
                &biases[slot],
                &mut rng::stream(cfg.seed, "pseudo", &ids),
            )?;
            let observation =
                observe(&gt, cfg.obs_noise_sigma, &mut rng::stream(cfg.seed, "observe", &ids))?;
            Ok(Sample {
                id: format!("{}-{i:06}", split.name()),
                subject_id: subjects[slot],
                ground_truth: gt,
                pseudo_label: pseudo,
                observation,
            })
        })
        .collect()
}

pub fn generate_splits(
    cfg: &WorldConfig,
    vocab: &ActionVocabulary,
    counts: SplitCounts,
) -> Result<Splits> {
    Ok(Splits {
        sft: generate_split(cfg, vocab, Split::Sft, counts.sft)?,
        rollout: generate_split(cfg, vocab, Split::Rollout, counts.rollout)?,
        eval: generate_split(cfg, vocab, Split::Eval, counts.eval)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::mse;

    fn r(tag: u64) -> StreamRng {
        rng::stream(42, "test", &[tag])
    }

    #[test]
    fn sparsity_extremes() {
        let mut cfg = WorldConfig {
            sparsity: 0.0,
            ..Default::default()
        };
        assert!(sample_ground_truth(&cfg, 61, &mut r(0))
            .values()
            .iter()
            .all(|&v| v == 0.0));
        cfg.sparsity = 1.0;
        cfg.active_dist = ActiveDist::Fixed { value: 1.0 };
        assert!(sample_ground_truth(&cfg, 61, &mut r(1))
            .values()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn active_fraction_matches_sparsity() {
        let cfg = WorldConfig::default();
        let mut rng = r(2);
        let (mut active, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let s = sample_ground_truth(&cfg, 61, &mut rng);
            active += s.values().iter().filter(|&&v| v > 0.0).count();
            total += 61;
        }
        let frac = active as f64 / total as f64;
        assert!((frac - cfg.sparsity).abs() <= 0.02, "fraction {frac}");
    }

    #[test]
    fn identity_corruption() {
        let cfg = WorldConfig::default();
        let gt = sample_ground_truth(&cfg, 61, &mut r(3));
        let out =
            corrupt_to_pseudo_label(&gt, &PseudoNoiseConfig::identity(), &[1.0; 61], &mut r(4))
                .unwrap();
        assert_eq!(out, gt);
    }

    #[test]
    fn full_drop_zeroes_everything() {
        let noise = PseudoNoiseConfig {
            drop_prob: 1.0,
            spurious_prob: 0.0,
            add_sigma: 0.0,
            ..PseudoNoiseConfig::identity()
        };
        let cfg = WorldConfig {
            sparsity: 0.7,
            ..Default::default()
        };
        let mut rng = r(5);
        for _ in 0..50 {
            let gt = sample_ground_truth(&cfg, 61, &mut rng);
            let out = corrupt_to_pseudo_label(&gt, &noise, &[0.9; 61], &mut rng).unwrap();
            assert!(out.values().iter().all(|&v| v == 0.0));
        }
    }

    /// E|clip(b v + e, 0, 1) - v| for e ~ N(0, s), by midpoint quadrature over e.
    fn expected_abs_jitter(v: f64, b: f64, s: f64) -> f64 {
        if s == 0.0 {
            return ((b * v).clamp(0.0, 1.0) - v).abs();
        }
        let n = 20_000;
        let lo = -8.0 * s;
        let h = 16.0 * s / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let e = lo + (i as f64 + 0.5) * h;
            let pdf = (-(e * e) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
            acc += ((b * v + e).clamp(0.0, 1.0) - v).abs() * pdf * h;
        }
        acc
    }

    #[test]
    fn corruption_mean_error_matches_closed_form() {
        let noise = PseudoNoiseConfig::default();
        let gt_vals: Vec<f64> = (0..61)
            .map(|i| if i % 3 == 0 { 0.05 + 0.9 * (i as f64 / 60.0) } else { 0.0 })
            .collect();
        let gt = CoefficientSet::new(gt_vals.clone()).unwrap();
        let bias: Vec<f64> = (0..61).map(|i| 0.6 + 0.5 * ((i * 7) % 61) as f64 / 60.0).collect();

        let expected: f64 = gt_vals
            .iter()
            .zip(&bias)
            .map(|(&v, &b)| {
                if v > 0.0 {
                    noise.drop_prob * v
                        + (1.0 - noise.drop_prob) * expected_abs_jitter(v, b, noise.add_sigma)
                } else {
                    noise.spurious_prob * noise.spurious_max / 2.0
                        + (1.0 - noise.spurious_prob) * expected_abs_jitter(0.0, b, noise.add_sigma)
                }
            })
            .sum::<f64>()
            / 61.0;

        let mut rng = r(6);
        let draws = 5_000;
        let mut total = 0.0;
        for _ in 0..draws {
            let out = corrupt_to_pseudo_label(&gt, &noise, &bias, &mut rng).unwrap();
            total += out
                .values()
                .iter()
                .zip(&gt_vals)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 61.0;
        }
        let empirical = total / draws as f64;
        let rel = (empirical - expected).abs() / expected;
        assert!(rel < 0.05, "empirical {empirical} expected {expected}");
    }

    #[test]
    fn observation_noise() {
        let cfg = WorldConfig::default();
        let gt = sample_ground_truth(&cfg, 61, &mut r(7));
        assert_eq!(observe(&gt, 0.0, &mut r(8)).unwrap(), gt.values());

        let zeros = CoefficientSet::zeros(61);
        let mut rng = r(9);
        for _ in 0..200 {
            let obs = observe(&zeros, 0.05, &mut rng).unwrap();
            assert!(obs.iter().all(|&x| (0.0..=0.3).contains(&x)));
            assert!(obs.iter().any(|&x| x == 0.0));
        }

        let mid = CoefficientSet::filled(61, 0.5).unwrap();
        let mut sq = 0.0;
        let mut n = 0usize;
        for _ in 0..10_000 {
            for x in observe(&mid, 0.05, &mut rng).unwrap() {
                sq += (x - 0.5) * (x - 0.5);
                n += 1;
            }
        }
        let rms = (sq / n as f64).sqrt();
        assert!((rms - 0.05).abs() < 0.0015, "rms {rms}");
    }

    #[test]
    fn generation_is_deterministic_and_subject_disjoint() {
        let vocab = ActionVocabulary::default();
        let cfg = WorldConfig::default();
        let counts = SplitCounts {
            sft: 20,
            rollout: 30,
            eval: 10,
        };
        let a = generate_splits(&cfg, &vocab, counts).unwrap();
        let b = generate_splits(&cfg, &vocab, counts).unwrap();
        assert_eq!(a, b);
        use std::collections::HashSet;
        let subj = |s: &[Sample]| s.iter().map(|x| x.subject_id).collect::<HashSet<_>>();
        assert!(subj(&a.sft).is_disjoint(&subj(&a.rollout)));
        assert!(subj(&a.sft).is_disjoint(&subj(&a.eval)));
        assert!(subj(&a.rollout).is_disjoint(&subj(&a.eval)));
        assert_eq!(subj(&a.rollout).len(), 7);
        assert!(generate_split(&cfg, &vocab, Split::Eval, 0).is_err());
    }

    #[test]
    fn pseudo_labels_are_worse_than_observations() {
        let vocab = ActionVocabulary::default();
        let cfg = WorldConfig::default();
        let samples = generate_split(&cfg, &vocab, Split::Rollout, 1000).unwrap();
        let (mut pseudo, mut obs) = (0.0, 0.0);
        for s in &samples {
            pseudo += mse(&s.pseudo_label, &s.ground_truth).unwrap();
            let o = CoefficientSet::new(s.observation.clone()).unwrap();
            obs += mse(&o, &s.ground_truth).unwrap();
        }
        assert!(pseudo > obs, "pseudo {pseudo} obs {obs}");
    }

    #[test]
    fn records_round_trip_exactly() {
        let vocab = ActionVocabulary::default();
        let samples = generate_split(&WorldConfig::default(), &vocab, Split::Eval, 5).unwrap();
        for s in &samples {
            let line = serde_json::to_string(&s.to_record(&vocab).unwrap()).unwrap();
            let back = Sample::from_record(serde_json::from_str(&line).unwrap(), &vocab).unwrap();
            assert_eq!(&back, s);
        }
        let small = ActionVocabulary::generic(4, 2, 21).unwrap();
        let err = Sample::from_record(samples[0].to_record(&vocab).unwrap(), &small).unwrap_err();
        assert_eq!(err.kind(), "dimension");
    }
}
