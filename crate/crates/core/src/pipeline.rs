//! Stage functions shared by the command-line driver and the end-to-end tests.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::coeffs::{ActionVocabulary, CoefficientSet};
use crate::config::Config;
use crate::discriminator::{
    embed_baseline, predict_passes, predict_symmetric, train, DiscriminatorParams, LabeledTask,
    TrainOutcome,
};
use crate::dpo::{build_round_tasks, collect_triplets, Judge, RoundItem};
use crate::error::{Error, Result};
use crate::facerender::RenderSpec;
use crate::metrics::{self, ConfusionMatrix, MacroF1};
use crate::policy::{examples_from, sft_train, PolicyParams, SftOutcome};
use crate::prefdata::{
    decide_all, easy_hard_split, oracle_votes, ComparisonTask, Decision, Preference, PreferenceTriplet, Vote,
};
use crate::synthworld::{generate_splits, Sample, Splits};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance record written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    /// Stage arguments that are not part of the config.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    /// Input artifact name to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output artifact name to sha256, filled in after the outputs are written.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, cfg: &Config, inputs: BTreeMap<String, String>) -> Self {
        Self {
            stage: stage.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: VERSION.to_string(),
            params: BTreeMap::new(),
            inputs,
            outputs: BTreeMap::new(),
        }
    }

    /// Identity of the run: everything except the outputs it produced.
    pub fn hash(&self) -> String {
        let identity = serde_json::json!({
            "stage": self.stage,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "version": self.version,
            "params": self.params,
            "inputs": self.inputs,
        });
        sha256_hex(identity.to_string().as_bytes())[..16].to_string()
    }
}

pub fn generate_world(cfg: &Config, vocab: &ActionVocabulary) -> Result<Splits> {
    generate_splits(&cfg.world, vocab, cfg.splits)
}

/// Supervised training on (observation, pseudo label) pairs.
pub fn run_sft(cfg: &Config, vocab: &ActionVocabulary, samples: &[Sample]) -> Result<SftOutcome> {
    let data = examples_from(
        samples.iter().map(|s| (s.observation.clone(), s.pseudo_label.clone())),
        vocab.bins(),
    )?;
    sft_train(PolicyParams::for_vocab(vocab), &data, &cfg.sft)
}

/// Region tasks, panel votes and filtered decisions for one batch of samples.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub items: Vec<RoundItem>,
    pub votes: Vec<Vote>,
    pub decisions: HashMap<String, Decision>,
}

impl LabeledBatch {
    pub fn tasks(&self) -> impl Iterator<Item = &ComparisonTask> {
        self.items.iter().flat_map(|i| i.tasks.iter())
    }

    /// Tasks with a non-Inconsistent decision, as discriminator records.
    pub fn records(&self, samples: &[Sample]) -> Vec<LabeledTask> {
        let mut out = Vec::new();
        for item in &self.items {
            for task in &item.tasks {
                if let Some(p) = self.decisions.get(&task.task_id).and_then(|d| d.preference()) {
                    out.push(LabeledTask {
                        task: task.clone(),
                        observation: samples[item.sample_index].observation.clone(),
                        label: p,
                    });
                }
            }
        }
        out
    }

    /// Triplets assembled straight from the panel's decisions.
    pub fn triplets(&self, samples: &[Sample], vocab: &ActionVocabulary) -> Result<Vec<PreferenceTriplet>> {
        let (pairs, _) = collect_triplets(&self.items, samples, Judge::Recorded(&self.decisions), vocab)?;
        Ok(pairs.into_iter().map(|(_, t)| t).collect())
    }
}

/// Pairs each sample's pseudo label (A) with a policy sample (B) and builds
/// the region tasks. `task_budget` caps the number of tasks; samples are
/// taken in order.
pub fn labeling_items(
    cfg: &Config,
    vocab: &ActionVocabulary,
    policy: &PolicyParams,
    samples: &[Sample],
    round: u32,
    task_budget: Option<usize>,
) -> Result<Vec<RoundItem>> {
    let per_sample = 2;
    let n = task_budget.map_or(samples.len(), |b| (b / per_sample).min(samples.len()));
    let used = &samples[..n];
    let chosen: Vec<CoefficientSet> = used.iter().map(|s| s.pseudo_label.clone()).collect();
    let mut dpo = cfg.dpo.clone();
    dpo.region_mode = crate::dpo::RegionMode::RegionAware;
    build_round_tasks(policy, used, &chosen, &dpo, round, vocab)
}

/// Both display-order votes of every simulated annotator on every task.
pub fn oracle_label(cfg: &Config, vocab: &ActionVocabulary, items: Vec<RoundItem>, samples: &[Sample]) -> Result<LabeledBatch> {
    let mut votes = Vec::new();
    for item in &items {
        let s = &samples[item.sample_index];
        for task in &item.tasks {
            votes.extend(oracle_votes(task, Some(&s.ground_truth), vocab, &cfg.oracle)?);
        }
    }
    let tasks: Vec<ComparisonTask> = items.iter().flat_map(|i| i.tasks.iter().cloned()).collect();
    let decisions = decide_all(&tasks, &votes, cfg.oracle.annotators)?;
    Ok(LabeledBatch {
        items,
        votes,
        decisions,
    })
}

/// [`labeling_items`] followed by [`oracle_label`].
pub fn oracle_labeled_batch(
    cfg: &Config,
    vocab: &ActionVocabulary,
    policy: &PolicyParams,
    samples: &[Sample],
    round: u32,
    task_budget: Option<usize>,
) -> Result<LabeledBatch> {
    let items = labeling_items(cfg, vocab, policy, samples, round, task_budget)?;
    oracle_label(cfg, vocab, items, samples)
}

/// Discriminator trained on the oracle-labeled budget tasks.
pub fn train_discriminator(
    cfg: &Config,
    vocab: &ActionVocabulary,
    batch: &LabeledBatch,
    samples: &[Sample],
) -> Result<TrainOutcome> {
    train(&batch.records(samples), vocab, &cfg.discriminator.train_config())
}

/// Mapped AB and BA choices of every annotator on every task.
pub fn oracle_pass_pairs(tasks: &[&ComparisonTask], votes: &[Vote]) -> Vec<(Preference, Preference)> {
    let by_id: HashMap<&str, &ComparisonTask> = tasks.iter().map(|t| (t.task_id.as_str(), *t)).collect();
    let mut passes: BTreeMap<(&str, &str), [Option<Preference>; 2]> = BTreeMap::new();
    for v in votes {
        if let Some(task) = by_id.get(v.task_id.as_str()) {
            let slot = passes.entry((v.task_id.as_str(), v.annotator_id.as_str())).or_default();
            slot[v.display_order as usize] = Some(task.map_choice(v.display_order, v.choice));
        }
    }
    passes
        .into_values()
        .filter_map(|[ab, ba]| Some((ab?, ba?)))
        .collect()
}

/// Scores of one judge on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub macro_f1: MacroF1,
    pub accuracy_2class: Option<f64>,
    pub accuracy_3class: f64,
    pub self_consistency: f64,
    pub confusion: ConfusionMatrix,
}

fn score(preds: &[Option<Preference>], labels: &[Preference], passes: &[(Preference, Preference)]) -> Result<JudgeScores> {
    let confusion = ConfusionMatrix::from_predictions(preds, labels)?;
    Ok(JudgeScores {
        macro_f1: confusion.macro_f1(),
        accuracy_2class: confusion.accuracy_2class().ok(),
        accuracy_3class: confusion.accuracy_3class()?,
        self_consistency: metrics::self_consistency(passes)?,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub pairs: usize,
    pub discriminator: JudgeScores,
    pub embed: JudgeScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorBenchmark {
    pub easy: SplitScores,
    pub hard: SplitScores,
}

fn score_split(
    params: &DiscriminatorParams,
    records: &[LabeledTask],
    vocab: &ActionVocabulary,
    render: &RenderSpec,
) -> Result<SplitScores> {
    let labels: Vec<Preference> = records.iter().map(|r| r.label).collect();
    let mut disc = Vec::with_capacity(records.len());
    let mut disc_passes = Vec::with_capacity(records.len());
    let mut embed = Vec::with_capacity(records.len());
    let mut embed_passes = Vec::with_capacity(records.len());
    for r in records {
        disc.push(predict_symmetric(params, &r.task, &r.observation, vocab)?);
        disc_passes.push(predict_passes(params, &r.task, &r.observation, vocab)?);
        let first = embed_baseline(&r.task, &r.observation, vocab, render)?;
        let second = embed_baseline(&r.task.swapped(), &r.observation, vocab, render)?.swap();
        embed.push(Some(first));
        embed_passes.push((first, second));
    }
    Ok(SplitScores {
        pairs: records.len(),
        discriminator: score(&disc, &labels, &disc_passes)?,
        embed: score(&embed, &labels, &embed_passes)?,
    })
}

/// Scores the discriminator and the embed baseline on the easy and hard
/// parts of a held-out labeled set.
pub fn benchmark_discriminator(
    params: &DiscriminatorParams,
    held_out: Vec<LabeledTask>,
    vocab: &ActionVocabulary,
    render: &RenderSpec,
    easy_fraction: f64,
) -> Result<DiscriminatorBenchmark> {
    if held_out.is_empty() {
        return Err(Error::EmptyData("held-out discriminator set".into()));
    }
    let (easy, hard) = easy_hard_split(held_out, easy_fraction, |r| r.task.pair_mse(), |r| r.task.task_id.clone());
    Ok(DiscriminatorBenchmark {
        easy: score_split(params, &easy, vocab, render)?,
        hard: score_split(params, &hard, vocab, render)?,
    })
}

/// Self-consistency of the simulated panel on the hard part of a batch.
pub fn oracle_hard_self_consistency(batch: &LabeledBatch, easy_fraction: f64) -> Result<(f64, usize)> {
    let tasks: Vec<&ComparisonTask> = batch.tasks().collect();
    let (_, hard) = easy_hard_split(tasks, easy_fraction, |t| t.pair_mse(), |t| t.task_id.clone());
    let pairs = oracle_pass_pairs(&hard, &batch.votes);
    Ok((metrics::self_consistency(&pairs)?, hard.len()))
}

/// Vote shares over every vote of a batch, mapped to candidate identity.
pub fn batch_vote_ratio(batch: &LabeledBatch) -> Result<metrics::VoteRatio> {
    let by_id: HashMap<&str, &ComparisonTask> = batch.tasks().map(|t| (t.task_id.as_str(), t)).collect();
    let mapped: Vec<Preference> = batch
        .votes
        .iter()
        .filter_map(|v| by_id.get(v.task_id.as_str()).map(|t| t.map_choice(v.display_order, v.choice)))
        .collect();
    metrics::vote_ratio(&mapped)
}
