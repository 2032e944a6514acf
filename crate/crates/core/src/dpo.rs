//! DPO objective, the sample/annotate/optimize round driver, and win-rate
//! evaluation against pseudo labels.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::coeffs::{ActionVocabulary, CoefficientSet};
use crate::discriminator::{predict_symmetric, DiscriminatorParams};
use crate::error::{Error, Result};
use crate::metrics::Outcome;
use crate::optim::{Adam, AdamConfig};
use crate::policy::{greedy_decode, sample, PolicyParams, ReferenceParams};
use crate::prefdata::{
    assemble_fullface, assemble_triplet, build_fullface_task, build_region_tasks, decide_task,
    oracle_votes, ComparisonTask, Decision, OracleConfig, PreferenceTriplet,
};
use crate::rng;
use crate::synthworld::Sample;

/// Display-side seed for evaluation tasks, shared by every evaluated policy.
pub const EVAL_DISPLAY_SEED: u64 = 0xE7A1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorMode {
    Oracle,
    Discriminator,
    Human,
}

impl std::str::FromStr for AnnotatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "discriminator" => Ok(Self::Discriminator),
            "human" => Ok(Self::Human),
            other => Err(Error::Config(format!(
                "unknown annotator mode {other:?} (expected oracle, discriminator or human)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionMode {
    RegionAware,
    FullFace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub max_rounds: usize,
    pub win_threshold: f64,
    pub mode: AnnotatorMode,
    pub region_mode: RegionMode,
    pub temperature: f64,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 0.01,
            epochs: 5,
            batch: 64,
            max_rounds: 2,
            win_threshold: 0.60,
            mode: AnnotatorMode::Discriminator,
            region_mode: RegionMode::RegionAware,
            temperature: 1.0,
            seed: 11,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("dpo beta {} must be positive", self.beta)));
        }
        if !(self.win_threshold > 0.0 && self.win_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "win_threshold {} must lie in (0, 1]",
                self.win_threshold
            )));
        }
        if !(self.temperature > 0.0) || !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config(
                "temperature and lr must be positive and batch nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// `-log sigmoid(x)` without overflow.
pub fn softplus_neg(x: f64) -> f64 {
    let y = -x;
    y.max(0.0) + (-y.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A triplet in token form.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTriplet {
    pub observation: Vec<f64>,
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
}

impl TokenTriplet {
    pub fn from_sets(policy: &PolicyParams, observation: &[f64], s_plus: &CoefficientSet, s_minus: &CoefficientSet) -> Result<Self> {
        Ok(Self {
            observation: observation.to_vec(),
            plus: policy.tokens(s_plus)?,
            minus: policy.tokens(s_minus)?,
        })
    }
}

fn check_triplet(policy: &PolicyParams, reference: &PolicyParams, t: &TokenTriplet) -> Result<()> {
    if reference.actions() != policy.actions()
        || reference.bins() != policy.bins()
        || reference.feature_dim() != policy.feature_dim()
    {
        return Err(Error::Dimension {
            expected: policy.theta().len(),
            got: reference.theta().len(),
        });
    }
    for tokens in [&t.plus, &t.minus] {
        if tokens.len() != policy.actions() {
            return Err(Error::Dimension {
                expected: policy.actions(),
                got: tokens.len(),
            });
        }
    }
    if t.observation.len() != policy.feature_dim() {
        return Err(Error::Dimension {
            expected: policy.feature_dim(),
            got: t.observation.len(),
        });
    }
    Ok(())
}

/// The policy-vs-reference log-ratio margin of chosen over rejected.
///
/// Heads whose chosen and rejected tokens agree are skipped: their terms
/// cancel exactly. For a differing head the log-softmax normalizers cancel
/// too, leaving a difference of two logits.
pub fn dpo_margin(policy: &PolicyParams, reference: &ReferenceParams, t: &TokenTriplet) -> Result<f64> {
    let r = reference.params();
    check_triplet(policy, r, t)?;
    let mut delta = 0.0;
    for k in 0..policy.actions() {
        let (bp, bm) = (t.plus[k], t.minus[k]);
        if bp == bm {
            continue;
        }
        let lp = policy.logit(k, bp, &t.observation) - policy.logit(k, bm, &t.observation);
        let lr = r.logit(k, bp, &t.observation) - r.logit(k, bm, &t.observation);
        delta += lp - lr;
    }
    if !delta.is_finite() {
        return Err(Error::NonFinite("DPO log-ratio".into()));
    }
    Ok(delta)
}

pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    observation: &[f64],
    s_plus: &CoefficientSet,
    s_minus: &CoefficientSet,
    beta: f64,
) -> Result<f64> {
    let t = TokenTriplet::from_sets(policy, observation, s_plus, s_minus)?;
    Ok(softplus_neg(beta * dpo_margin(policy, reference, &t)?))
}

/// Mean loss and its analytic gradient over a batch.
pub fn dpo_loss_and_grad(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    batch: &[&TokenTriplet],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyData("DPO batch".into()));
    }
    let n = batch.len() as f64;
    let d = policy.feature_dim();
    let mut grad = vec![0.0; policy.theta().len()];
    let mut loss = 0.0;
    for t in batch {
        let delta = dpo_margin(policy, reference, t)?;
        loss += softplus_neg(beta * delta);
        let coef = -beta * sigmoid(-beta * delta) / n;
        if coef == 0.0 {
            continue;
        }
        for k in 0..policy.actions() {
            let (bp, bm) = (t.plus[k], t.minus[k]);
            if bp == bm {
                continue;
            }
            for (bin, sign) in [(bp, coef), (bm, -coef)] {
                let off = policy.row_offset(k, bin);
                for (g, x) in grad[off..off + d].iter_mut().zip(&t.observation) {
                    *g += sign * x;
                }
                grad[off + d] += sign;
            }
        }
    }
    Ok((loss / n, grad))
}

pub fn dpo_grad(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    batch: &[&TokenTriplet],
    beta: f64,
) -> Result<Vec<f64>> {
    Ok(dpo_loss_and_grad(policy, reference, batch, beta)?.1)
}

/// Who decides comparison tasks.
#[derive(Debug, Clone, Copy)]
pub enum Judge<'a> {
    /// Simulated annotator panel with access to ground truth.
    Oracle(&'a OracleConfig),
    /// Learned judge; an abstention counts as Inconsistent.
    Discriminator(&'a DiscriminatorParams),
    /// Decisions already filtered from a vote log, keyed by task id.
    Recorded(&'a HashMap<String, Decision>),
}

impl Judge<'_> {
    /// `None` when no decision is available (only for recorded votes).
    pub fn decide(&self, task: &ComparisonTask, sample: &Sample, vocab: &ActionVocabulary) -> Result<Option<Decision>> {
        match self {
            Judge::Oracle(cfg) => {
                let votes = oracle_votes(task, Some(&sample.ground_truth), vocab, cfg)?;
                let refs: Vec<_> = votes.iter().collect();
                Ok(Some(decide_task(task, &refs, cfg.annotators)?))
            }
            Judge::Discriminator(params) => Ok(Some(
                predict_symmetric(params, task, &sample.observation, vocab)?
                    .map_or(Decision::Inconsistent, Decision::from),
            )),
            Judge::Recorded(map) => Ok(map.get(&task.task_id).copied()),
        }
    }
}

/// Per-sample outcome for the policy as candidate B: a win needs at least
/// one region won and none lost, any lost region is a loss, otherwise the
/// sample is excluded.
pub fn sample_outcome(decisions: &[Decision]) -> Outcome {
    let wins = decisions.iter().filter(|&&d| d == Decision::B).count();
    let losses = decisions.iter().filter(|&&d| d == Decision::A).count();
    if losses > 0 {
        Outcome::Lose
    } else if wins > 0 {
        Outcome::Win
    } else if decisions.contains(&Decision::Inconsistent) {
        Outcome::Inconsistent
    } else {
        Outcome::Similar
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub win_rate: f64,
    pub wins: usize,
    pub losses: usize,
    pub excluded: usize,
}

impl EvalSummary {
    pub fn from_outcomes(outcomes: &[Outcome]) -> Self {
        let wins = outcomes.iter().filter(|&&o| o == Outcome::Win).count();
        let losses = outcomes.iter().filter(|&&o| o == Outcome::Lose).count();
        let win_rate = crate::metrics::win_rate(outcomes).unwrap_or(0.5);
        Self {
            win_rate,
            wins,
            losses,
            excluded: outcomes.len() - wins - losses,
        }
    }
}

/// The two region tasks comparing a sample's pseudo label (A) with `candidate` (B).
pub fn eval_tasks(sample: &Sample, candidate: &CoefficientSet, vocab: &ActionVocabulary) -> Result<[ComparisonTask; 2]> {
    let (u, l) = build_region_tasks(&sample.id, &sample.pseudo_label, candidate, vocab, 0, EVAL_DISPLAY_SEED)?;
    Ok([u, l])
}

/// Greedy decodes every sample and judges it against its pseudo label.
/// The win rate is 0.5 when no sample has a decided region.
pub fn eval_win_rate(
    policy: &PolicyParams,
    samples: &[Sample],
    judge: Judge<'_>,
    vocab: &ActionVocabulary,
) -> Result<EvalSummary> {
    let mut outcomes = Vec::with_capacity(samples.len());
    for s in samples {
        let decoded = greedy_decode(policy, &s.observation)?;
        outcomes.push(judge_candidate(s, &decoded, judge, vocab)?);
    }
    Ok(EvalSummary::from_outcomes(&outcomes))
}

/// Outcome of one candidate against the sample's pseudo label.
pub fn judge_candidate(
    sample: &Sample,
    candidate: &CoefficientSet,
    judge: Judge<'_>,
    vocab: &ActionVocabulary,
) -> Result<Outcome> {
    let mut decisions = Vec::with_capacity(2);
    for task in eval_tasks(sample, candidate, vocab)? {
        decisions.push(judge.decide(&task, sample, vocab)?.unwrap_or(Decision::Inconsistent));
    }
    Ok(sample_outcome(&decisions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub mean_loss: f64,
    pub oracle_win_rate: f64,
    pub disc_win_rate: Option<f64>,
    pub triplets_used: usize,
    pub similar_regions: usize,
    pub inconsistent_regions: usize,
    /// Samples that produced no triplet or had no recorded decision.
    pub skipped_samples: usize,
    /// Discriminator minus oracle win rate; growth signals judge exploitation.
    pub divergence: Option<f64>,
    /// Kept out of persisted logs so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// One rollout sample's candidate, the chosen set it was paired with, and its tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundItem {
    pub sample_index: usize,
    pub chosen: CoefficientSet,
    pub candidate: CoefficientSet,
    pub tasks: Vec<ComparisonTask>,
}

/// Draws one candidate per sample at the configured temperature and pairs
/// it (as B) with the sample's current chosen set (as A).
pub fn build_round_tasks(
    policy: &PolicyParams,
    samples: &[Sample],
    chosen: &[CoefficientSet],
    cfg: &DpoConfig,
    round: u32,
    vocab: &ActionVocabulary,
) -> Result<Vec<RoundItem>> {
    if chosen.len() != samples.len() {
        return Err(Error::Dimension {
            expected: samples.len(),
            got: chosen.len(),
        });
    }
    samples
        .iter()
        .zip(chosen)
        .enumerate()
        .map(|(i, (s, c))| {
            let mut r = rng::stream(cfg.seed, "rollout", &[round as u64, rng::key_id(&s.id)]);
            let candidate = sample(policy, &s.observation, cfg.temperature, &mut r)?;
            let tasks = match cfg.region_mode {
                RegionMode::RegionAware => {
                    let (u, l) = build_region_tasks(&s.id, c, &candidate, vocab, round, cfg.seed)?;
                    vec![u, l]
                }
                RegionMode::FullFace => vec![build_fullface_task(&s.id, c, &candidate, round, cfg.seed)?],
            };
            Ok(RoundItem {
                sample_index: i,
                chosen: c.clone(),
                candidate,
                tasks,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletCounts {
    pub used: usize,
    pub similar_regions: usize,
    pub inconsistent_regions: usize,
    pub skipped: usize,
}

/// Judges every item and assembles triplets from the decisions.
pub fn collect_triplets(
    items: &[RoundItem],
    samples: &[Sample],
    judge: Judge<'_>,
    vocab: &ActionVocabulary,
) -> Result<(Vec<(usize, PreferenceTriplet)>, TripletCounts)> {
    let mut out = Vec::new();
    let mut counts = TripletCounts::default();
    for item in items {
        let s = &samples[item.sample_index];
        let mut decisions = Vec::with_capacity(item.tasks.len());
        for task in &item.tasks {
            match judge.decide(task, s, vocab)? {
                Some(d) => decisions.push(d),
                None => break,
            }
        }
        if decisions.len() != item.tasks.len() {
            counts.skipped += 1;
            continue;
        }
        counts.similar_regions += decisions.iter().filter(|&&d| d == Decision::Similar).count();
        counts.inconsistent_regions += decisions.iter().filter(|&&d| d == Decision::Inconsistent).count();
        let triplet = match decisions[..] {
            [u, l] => assemble_triplet(&s.id, &s.observation, u, l, &item.chosen, &item.candidate, vocab)?,
            [f] => assemble_fullface(&s.id, &s.observation, f, &item.chosen, &item.candidate),
            _ => None,
        };
        match triplet {
            Some(t) => {
                counts.used += 1;
                out.push((item.sample_index, t));
            }
            None => counts.skipped += 1,
        }
    }
    Ok((out, counts))
}

/// `epochs` passes of minibatch Adam over the triplets with a fresh optimizer.
/// Returns the updated policy and the mean minibatch loss.
pub fn optimize(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    triplets: &[PreferenceTriplet],
    cfg: &DpoConfig,
    round: u32,
) -> Result<(PolicyParams, f64)> {
    let tokens: Vec<TokenTriplet> = triplets
        .iter()
        .map(|t| TokenTriplet::from_sets(policy, &t.observation, &t.chosen, &t.rejected))
        .collect::<Result<_>>()?;
    let mut params = policy.clone();
    if tokens.is_empty() {
        return Ok((params, f64::NAN));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params.theta().len());
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    let (mut total, mut steps) = (0.0, 0usize);
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, "dpo-shuffle", &[round as u64, epoch as u64]);
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&TokenTriplet> = chunk.iter().map(|&i| &tokens[i]).collect();
            let (loss, grad) = dpo_loss_and_grad(&params, reference, &batch, cfg.beta)?;
            total += loss;
            steps += 1;
            adam.step(params.theta_mut(), &grad);
        }
    }
    let mean = if steps == 0 {
        let all: Vec<&TokenTriplet> = tokens.iter().collect();
        dpo_loss_and_grad(&params, reference, &all, cfg.beta)?.0
    } else {
        total / steps as f64
    };
    Ok((params, mean))
}

/// Samples and judges used for evaluation after each round.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub samples: &'a [Sample],
    pub oracle: &'a OracleConfig,
    pub discriminator: Option<&'a DiscriminatorParams>,
}

impl EvalContext<'_> {
    /// Oracle and (if present) discriminator win rates.
    pub fn evaluate(&self, policy: &PolicyParams, vocab: &ActionVocabulary) -> Result<(f64, Option<f64>)> {
        let oracle = eval_win_rate(policy, self.samples, Judge::Oracle(self.oracle), vocab)?.win_rate;
        let disc = match self.discriminator {
            Some(d) => Some(eval_win_rate(policy, self.samples, Judge::Discriminator(d), vocab)?.win_rate),
            None => None,
        };
        Ok((oracle, disc))
    }
}

/// One sample, annotate, optimize round. Updates `chosen` with each used sample's S+.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    samples: &[Sample],
    chosen: &mut [CoefficientSet],
    judge: Judge<'_>,
    cfg: &DpoConfig,
    round: u32,
    vocab: &ActionVocabulary,
    eval: &EvalContext<'_>,
) -> Result<(PolicyParams, RoundReport)> {
    let start = Instant::now();
    let items = build_round_tasks(policy, samples, chosen, cfg, round, vocab)?;
    let (triplets, counts) = collect_triplets(&items, samples, judge, vocab)?;
    for (i, t) in &triplets {
        chosen[*i] = t.chosen.clone();
    }
    let plain: Vec<PreferenceTriplet> = triplets.into_iter().map(|(_, t)| t).collect();
    let (updated, mean_loss) = optimize(policy, reference, &plain, cfg, round)?;
    let (oracle_win_rate, disc_win_rate) = eval.evaluate(&updated, vocab)?;
    Ok((
        updated,
        RoundReport {
            round,
            mean_loss,
            oracle_win_rate,
            disc_win_rate,
            triplets_used: counts.used,
            similar_regions: counts.similar_regions,
            inconsistent_regions: counts.inconsistent_regions,
            skipped_samples: counts.skipped,
            divergence: disc_win_rate.map(|d| d - oracle_win_rate),
            wall_time: start.elapsed(),
        },
    ))
}

#[derive(Debug, Clone)]
pub struct History {
    pub reports: Vec<RoundReport>,
    pub policy: PolicyParams,
    /// Each rollout sample's chosen set after the last round.
    pub chosen: Vec<CoefficientSet>,
}

/// Rounds until the stopping judge's win rate reaches the threshold or
/// `max_rounds` is exhausted. The stopping judge is the discriminator in
/// discriminator mode and the oracle otherwise. The first round pairs
/// candidates with pseudo labels.
pub fn iterate(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    samples: &[Sample],
    judge: Judge<'_>,
    cfg: &DpoConfig,
    vocab: &ActionVocabulary,
    eval: &EvalContext<'_>,
) -> Result<History> {
    iterate_observed(policy, reference, samples, judge, cfg, vocab, eval, |_, _| Ok(()))
}

/// [`iterate`] with a callback after every round, given the round's report
/// and updated policy.
#[allow(clippy::too_many_arguments)]
pub fn iterate_observed<F>(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    samples: &[Sample],
    judge: Judge<'_>,
    cfg: &DpoConfig,
    vocab: &ActionVocabulary,
    eval: &EvalContext<'_>,
    mut on_round: F,
) -> Result<History>
where
    F: FnMut(&RoundReport, &PolicyParams) -> Result<()>,
{
    let mut chosen: Vec<CoefficientSet> = samples.iter().map(|s| s.pseudo_label.clone()).collect();
    let mut current = policy.clone();
    let mut reports = Vec::new();
    for round in 1..=cfg.max_rounds as u32 {
        let (next, report) = run_round(&current, reference, samples, &mut chosen, judge, cfg, round, vocab, eval)?;
        current = next;
        on_round(&report, &current)?;
        let stop_rate = match (cfg.mode, report.disc_win_rate) {
            (AnnotatorMode::Discriminator, Some(d)) => d,
            _ => report.oracle_win_rate,
        };
        reports.push(report);
        if stop_rate >= cfg.win_threshold {
            break;
        }
    }
    Ok(History {
        reports,
        policy: current,
        chosen,
    })
}

/// DPO on a fixed triplet set for `rounds` rounds, with the same per-round
/// optimizer schedule and evaluation as `iterate`.
pub fn train_on_fixed_triplets(
    policy: &PolicyParams,
    reference: &ReferenceParams,
    triplets: &[PreferenceTriplet],
    cfg: &DpoConfig,
    rounds: usize,
    vocab: &ActionVocabulary,
    eval: &EvalContext<'_>,
) -> Result<History> {
    let mut current = policy.clone();
    let mut reports = Vec::new();
    for round in 1..=rounds as u32 {
        let start = Instant::now();
        let (next, mean_loss) = optimize(&current, reference, triplets, cfg, round)?;
        current = next;
        let (oracle_win_rate, disc_win_rate) = eval.evaluate(&current, vocab)?;
        reports.push(RoundReport {
            round,
            mean_loss,
            oracle_win_rate,
            disc_win_rate,
            triplets_used: triplets.len(),
            similar_regions: 0,
            inconsistent_regions: 0,
            skipped_samples: 0,
            divergence: disc_win_rate.map(|d| d - oracle_win_rate),
            wall_time: start.elapsed(),
        });
    }
    Ok(History {
        reports,
        policy: current,
        chosen: triplets.iter().map(|t| t.chosen.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::region_mse;
    use crate::policy::{log_prob, nll_loss_and_grad, TokenExample};
    use crate::synthworld::{generate_split, Split, WorldConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(k: usize, b: usize, f: usize, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = k * b * (f + 1);
        PolicyParams::from_theta(k, b, f, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, k: usize, bins: usize) -> CoefficientSet {
        CoefficientSet::new(
            (0..k)
                .map(|_| rng.random_range(0..bins) as f64 / (bins - 1) as f64)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn degenerate_losses_are_ln2() {
        let ln2 = std::f64::consts::LN_2;
        let p = random_policy(3, 4, 3, 1);
        let r = ReferenceParams::snapshot(&random_policy(3, 4, 3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs = [0.2, -0.4, 0.9];
        let a = random_set(&mut rng, 3, 4);
        let b = random_set(&mut rng, 3, 4);
        assert!((dpo_loss(&p, &r, &obs, &a, &a, 0.1).unwrap() - ln2).abs() < 1e-12);
        assert!((dpo_loss(&p, &r, &obs, &a, &b, 0.0).unwrap() - ln2).abs() < 1e-12);
        let same = ReferenceParams::snapshot(&p);
        assert!((dpo_loss(&p, &same, &obs, &a, &b, 0.5).unwrap() - ln2).abs() < 1e-12);
        let t = TokenTriplet::from_sets(&p, &obs, &a, &a).unwrap();
        let g = dpo_grad(&p, &r, &[&t], 0.1).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_matches_brute_force_log_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..20 {
            let p = random_policy(2, 3, 2, 10 + seed);
            let r = ReferenceParams::snapshot(&random_policy(2, 3, 2, 100 + seed));
            let obs = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let a = random_set(&mut rng, 2, 3);
            let b = random_set(&mut rng, 2, 3);
            let beta = 0.7;
            // Direct formula with full log-softmax probabilities.
            let inner = (log_prob(&p, &obs, &a).unwrap() - log_prob(r.params(), &obs, &a).unwrap())
                - (log_prob(&p, &obs, &b).unwrap() - log_prob(r.params(), &obs, &b).unwrap());
            let want = -(1.0 / (1.0 + (-beta * inner).exp())).ln();
            let got = dpo_loss(&p, &r, &obs, &a, &b, beta).unwrap();
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let p = random_policy(3, 4, 3, 200 + seed);
            let r = ReferenceParams::snapshot(&random_policy(3, 4, 3, 300 + seed));
            let batch: Vec<TokenTriplet> = (0..3)
                .map(|_| TokenTriplet {
                    observation: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    plus: (0..3).map(|_| rng.random_range(0..4)).collect(),
                    minus: (0..3).map(|_| rng.random_range(0..4)).collect(),
                })
                .collect();
            let refs: Vec<&TokenTriplet> = batch.iter().collect();
            let (_, g) = dpo_loss_and_grad(&p, &r, &refs, 2.0).unwrap();
            let h = 1e-4;
            for i in 0..p.theta().len() {
                let mut up = p.clone();
                up.theta_mut()[i] += h;
                let mut dn = p.clone();
                dn.theta_mut()[i] -= h;
                let fd = (dpo_loss_and_grad(&up, &r, &refs, 2.0).unwrap().0
                    - dpo_loss_and_grad(&dn, &r, &refs, 2.0).unwrap().0)
                    / (2.0 * h);
                if fd.abs() > 1e-7 || g[i].abs() > 1e-7 {
                    assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: {fd} vs {}", g[i]);
                }
            }
            // The supervised objective on the same shapes.
            let ex: Vec<TokenExample> = batch
                .iter()
                .map(|t| TokenExample {
                    observation: t.observation.clone(),
                    tokens: t.plus.clone(),
                })
                .collect();
            let exr: Vec<&TokenExample> = ex.iter().collect();
            let (_, gs) = nll_loss_and_grad(&p, &exr).unwrap();
            for i in 0..p.theta().len() {
                let mut up = p.clone();
                up.theta_mut()[i] += h;
                let mut dn = p.clone();
                dn.theta_mut()[i] -= h;
                let fd = (nll_loss_and_grad(&up, &exr).unwrap().0 - nll_loss_and_grad(&dn, &exr).unwrap().0) / (2.0 * h);
                if fd.abs() > 1e-7 || gs[i].abs() > 1e-7 {
                    assert!(rel_err(fd, gs[i]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn small_descent_step_widens_the_margin() {
        let p = random_policy(3, 4, 3, 7);
        let r = ReferenceParams::snapshot(&p);
        let t = TokenTriplet {
            observation: vec![0.3, -0.2, 0.8],
            plus: vec![0, 1, 2],
            minus: vec![3, 1, 0],
        };
        let g = dpo_grad(&p, &r, &[&t], 0.1).unwrap();
        let mut q = p.clone();
        for (w, gi) in q.theta_mut().iter_mut().zip(&g) {
            *w -= 0.1 * gi;
        }
        let margin = |pp: &PolicyParams| {
            crate::policy::log_prob_tokens(pp, &t.observation, &t.plus).unwrap()
                - crate::policy::log_prob_tokens(pp, &t.observation, &t.minus).unwrap()
        };
        assert!(margin(&q) > margin(&p));
    }

    #[test]
    fn identical_heads_carry_no_gradient() {
        let p = random_policy(3, 4, 3, 8);
        let r = ReferenceParams::snapshot(&random_policy(3, 4, 3, 9));
        let t = TokenTriplet {
            observation: vec![0.1, 0.5, -0.3],
            plus: vec![2, 1, 3],
            minus: vec![0, 1, 3],
        };
        let g = dpo_grad(&p, &r, &[&t], 0.3).unwrap();
        let head = p.head_len();
        assert!(g[..head].iter().any(|&x| x != 0.0));
        assert!(g[head..].iter().all(|&x| x == 0.0));

        // Changing the shared heads' weights leaves the loss untouched.
        let mut q = p.clone();
        for w in q.theta_mut()[head..].iter_mut() {
            *w += 0.37;
        }
        let lp = dpo_loss_and_grad(&p, &r, &[&t], 0.3).unwrap().0;
        let lq = dpo_loss_and_grad(&q, &r, &[&t], 0.3).unwrap().0;
        assert_eq!(lp, lq);
    }

    #[test]
    fn loss_is_positive_and_finite_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..50 {
            let p = random_policy(3, 4, 3, 400 + seed);
            let r = ReferenceParams::snapshot(&random_policy(3, 4, 3, 500 + seed));
            let obs: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = random_set(&mut rng, 3, 4);
            let b = random_set(&mut rng, 3, 4);
            let l = dpo_loss(&p, &r, &obs, &a, &b, 5.0).unwrap();
            assert!(l > 0.0 && l.is_finite());
        }
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus_neg(1e6), 0.0);
        assert_eq!(softplus_neg(-1e6), 1e6);
        assert_eq!(softplus_neg(0.0), std::f64::consts::LN_2);
    }

    #[test]
    fn sample_outcome_rule() {
        use Decision::*;
        assert_eq!(sample_outcome(&[B, Similar]), Outcome::Win);
        assert_eq!(sample_outcome(&[B, A]), Outcome::Lose);
        assert_eq!(sample_outcome(&[A, Inconsistent]), Outcome::Lose);
        assert_eq!(sample_outcome(&[Similar, Similar]), Outcome::Similar);
        assert_eq!(sample_outcome(&[Similar, Inconsistent]), Outcome::Inconsistent);
        let xs = [Outcome::Win, Outcome::Win, Outcome::Win, Outcome::Lose];
        assert_eq!(EvalSummary::from_outcomes(&xs).win_rate, 0.75);
    }

    fn small_world(count: usize) -> (ActionVocabulary, Vec<Sample>) {
        let vocab = ActionVocabulary::default();
        let samples = generate_split(&WorldConfig::default(), &vocab, Split::Eval, count).unwrap();
        (vocab, samples)
    }

    #[test]
    fn policy_decoding_pseudo_labels_scores_half() {
        let (vocab, samples) = small_world(20);
        let oracle = OracleConfig::default();
        let outcomes: Vec<Outcome> = samples
            .iter()
            .map(|s| judge_candidate(s, &s.pseudo_label, Judge::Oracle(&oracle), &vocab).unwrap())
            .collect();
        assert!(outcomes.iter().all(|&o| o == Outcome::Similar));
        assert_eq!(EvalSummary::from_outcomes(&outcomes).win_rate, 0.5);
    }

    #[test]
    fn noise_free_oracle_matches_distance_comparison() {
        let (vocab, samples) = small_world(60);
        let oracle = OracleConfig {
            beta_sharpness: f64::INFINITY,
            similar_margin: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for s in &samples {
            let cand = random_set(&mut rng, 61, 21);
            let got = judge_candidate(s, &cand, Judge::Oracle(&oracle), &vocab).unwrap();
            let mut decisions = Vec::new();
            for r in crate::Region::BOTH {
                let dp = region_mse(&s.pseudo_label, &s.ground_truth, &vocab, r).unwrap();
                let dc = region_mse(&cand, &s.ground_truth, &vocab, r).unwrap();
                decisions.push(if dc < dp {
                    Decision::B
                } else if dp < dc {
                    Decision::A
                } else {
                    Decision::Similar
                });
            }
            assert_eq!(got, sample_outcome(&decisions));
        }
    }

    fn setup_round() -> (ActionVocabulary, Vec<Sample>, Vec<Sample>, PolicyParams, ReferenceParams) {
        let vocab = ActionVocabulary::default();
        let world = WorldConfig::default();
        let rollout = generate_split(&world, &vocab, Split::Rollout, 40).unwrap();
        let eval = generate_split(&world, &vocab, Split::Eval, 20).unwrap();
        let policy = PolicyParams::for_vocab(&vocab);
        let reference = ReferenceParams::snapshot(&policy);
        (vocab, rollout, eval, policy, reference)
    }

    #[test]
    fn zero_epochs_leave_policy_and_still_report() {
        let (vocab, rollout, eval, policy, reference) = setup_round();
        let oracle = OracleConfig::default();
        let ctx = EvalContext {
            samples: &eval,
            oracle: &oracle,
            discriminator: None,
        };
        let cfg = DpoConfig {
            epochs: 0,
            ..Default::default()
        };
        let mut chosen: Vec<_> = rollout.iter().map(|s| s.pseudo_label.clone()).collect();
        let (p, report) =
            run_round(&policy, &reference, &rollout, &mut chosen, Judge::Oracle(&oracle), &cfg, 1, &vocab, &ctx).unwrap();
        assert_eq!(p, policy);
        assert_eq!(report.round, 1);
        assert!(report.triplets_used > 0);
    }

    #[test]
    fn rounds_are_deterministic_and_reference_is_untouched() {
        let (vocab, rollout, eval, policy, reference) = setup_round();
        let before = serde_json::to_vec(reference.params().theta()).unwrap();
        let oracle = OracleConfig::default();
        let ctx = EvalContext {
            samples: &eval,
            oracle: &oracle,
            discriminator: None,
        };
        let cfg = DpoConfig {
            max_rounds: 2,
            win_threshold: 1.0,
            ..Default::default()
        };
        let a = iterate(&policy, &reference, &rollout, Judge::Oracle(&oracle), &cfg, &vocab, &ctx).unwrap();
        let b = iterate(&policy, &reference, &rollout, Judge::Oracle(&oracle), &cfg, &vocab, &ctx).unwrap();
        // Wall time is the only field allowed to differ, and it is not serialized.
        assert_eq!(
            serde_json::to_string(&a.reports).unwrap(),
            serde_json::to_string(&b.reports).unwrap()
        );
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.reports.len(), 2);
        assert_eq!(serde_json::to_vec(reference.params().theta()).unwrap(), before);
    }

    #[test]
    fn iterate_edge_cases() {
        let (vocab, rollout, eval, policy, reference) = setup_round();
        let oracle = OracleConfig::default();
        let ctx = EvalContext {
            samples: &eval,
            oracle: &oracle,
            discriminator: None,
        };
        let none = DpoConfig {
            max_rounds: 0,
            ..Default::default()
        };
        let h = iterate(&policy, &reference, &rollout, Judge::Oracle(&oracle), &none, &vocab, &ctx).unwrap();
        assert!(h.reports.is_empty());
        assert_eq!(h.policy, policy);
        let zero = DpoConfig {
            max_rounds: 3,
            win_threshold: 0.0,
            epochs: 1,
            ..Default::default()
        };
        let h = iterate(&policy, &reference, &rollout, Judge::Oracle(&oracle), &zero, &vocab, &ctx).unwrap();
        assert_eq!(h.reports.len(), 1);
        assert!(zero.validate().is_err());
    }

    #[test]
    fn recorded_judge_skips_undecided_samples() {
        let (vocab, rollout, _, policy, _) = setup_round();
        let cfg = DpoConfig::default();
        let chosen: Vec<_> = rollout.iter().map(|s| s.pseudo_label.clone()).collect();
        let items = build_round_tasks(&policy, &rollout, &chosen, &cfg, 1, &vocab).unwrap();
        let mut map = HashMap::new();
        for t in &items[0].tasks {
            map.insert(t.task_id.clone(), Decision::A);
        }
        let (triplets, counts) = collect_triplets(&items, &rollout, Judge::Recorded(&map), &vocab).unwrap();
        assert_eq!(counts.used, 1);
        assert_eq!(counts.skipped, rollout.len() - 1);
        // Candidate A is the pseudo label here, so S+ is exactly the pseudo label.
        assert_eq!(triplets[0].1.chosen, rollout[0].pseudo_label);
    }

    #[test]
    fn always_preferring_pseudo_label_does_not_raise_win_rate() {
        let (vocab, rollout, eval, policy, reference) = setup_round();
        let oracle = OracleConfig::default();
        let cfg = DpoConfig {
            epochs: 3,
            ..Default::default()
        };
        let chosen: Vec<_> = rollout.iter().map(|s| s.pseudo_label.clone()).collect();
        let items = build_round_tasks(&policy, &rollout, &chosen, &cfg, 1, &vocab).unwrap();
        let mut map = HashMap::new();
        for item in &items {
            for t in &item.tasks {
                map.insert(t.task_id.clone(), Decision::A);
            }
        }
        let (triplets, _) = collect_triplets(&items, &rollout, Judge::Recorded(&map), &vocab).unwrap();
        for (i, t) in &triplets {
            assert_eq!(t.chosen, rollout[*i].pseudo_label);
        }
        let plain: Vec<_> = triplets.into_iter().map(|(_, t)| t).collect();
        let (updated, _) = optimize(&policy, &reference, &plain, &cfg, 1).unwrap();
        let before = eval_win_rate(&policy, &eval, Judge::Oracle(&oracle), &vocab).unwrap().win_rate;
        let after = eval_win_rate(&updated, &eval, Judge::Oracle(&oracle), &vocab).unwrap().win_rate;
        assert!(after <= before, "{before} -> {after}");
    }
}
