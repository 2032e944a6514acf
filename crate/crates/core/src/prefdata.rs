//! Region-aware comparison tasks, annotator votes, consistency filtering and
//! preference-triplet assembly.
//!
//! A task always holds two candidates, `A` and `B`. They are stored in a
//! randomized base display (`cand_left`, `cand_right`) and `truth_mapping`
//! records which stored side holds `A`. Display order `AB` shows the base
//! display, `BA` shows it mirrored.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coeffs::{self, merge, mix, region_mse, split, ActionVocabulary, CoefficientSet, Region};
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskRegion {
    Upper,
    Lower,
    #[serde(rename = "fullface")]
    FullFace,
}

impl TaskRegion {
    pub fn face_region(self) -> Option<Region> {
        match self {
            TaskRegion::Upper => Some(Region::Upper),
            TaskRegion::Lower => Some(Region::Lower),
            TaskRegion::FullFace => None,
        }
    }
}

impl From<Region> for TaskRegion {
    fn from(r: Region) -> Self {
        match r {
            Region::Upper => TaskRegion::Upper,
            Region::Lower => TaskRegion::Lower,
        }
    }
}

impl fmt::Display for TaskRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskRegion::Upper => "upper",
            TaskRegion::Lower => "lower",
            TaskRegion::FullFace => "fullface",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flip(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DisplayOrder {
    AB,
    BA,
}

impl DisplayOrder {
    pub const BOTH: [DisplayOrder; 2] = [DisplayOrder::AB, DisplayOrder::BA];

    fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for DisplayOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisplayOrder::AB => "AB",
            DisplayOrder::BA => "BA",
        })
    }
}

/// What an annotator clicked, in display terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Similar,
}

impl Choice {
    pub const ALL: [Choice; 3] = [Choice::Left, Choice::Right, Choice::Similar];

    pub fn flip(self) -> Choice {
        match self {
            Choice::Left => Choice::Right,
            Choice::Right => Choice::Left,
            Choice::Similar => Choice::Similar,
        }
    }
}

/// A choice mapped back to candidate identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preference {
    A,
    B,
    Similar,
}

impl Preference {
    pub const ALL: [Preference; 3] = [Preference::A, Preference::B, Preference::Similar];

    pub fn swap(self) -> Preference {
        match self {
            Preference::A => Preference::B,
            Preference::B => Preference::A,
            Preference::Similar => Preference::Similar,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Outcome of filtering all votes of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    A,
    B,
    Similar,
    Inconsistent,
}

impl Decision {
    pub fn preference(self) -> Option<Preference> {
        match self {
            Decision::A => Some(Preference::A),
            Decision::B => Some(Preference::B),
            Decision::Similar => Some(Preference::Similar),
            Decision::Inconsistent => None,
        }
    }

    /// `true` for A or B.
    pub fn is_preferential(self) -> bool {
        matches!(self, Decision::A | Decision::B)
    }
}

impl From<Preference> for Decision {
    fn from(p: Preference) -> Self {
        match p {
            Preference::A => Decision::A,
            Preference::B => Decision::B,
            Preference::Similar => Decision::Similar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTask {
    pub task_id: String,
    pub sample_id: String,
    pub region: TaskRegion,
    pub cand_left: CoefficientSet,
    pub cand_right: CoefficientSet,
    /// Stored side holding candidate A. Never shown to annotators.
    pub truth_mapping: Side,
    pub round_index: u32,
}

impl ComparisonTask {
    fn new(
        task_id: String,
        sample_id: &str,
        region: TaskRegion,
        a: CoefficientSet,
        b: CoefficientSet,
        round_index: u32,
        rng: &mut StreamRng,
    ) -> Self {
        let a_left = rng.random::<bool>();
        let (cand_left, cand_right, truth_mapping) = if a_left {
            (a, b, Side::Left)
        } else {
            (b, a, Side::Right)
        };
        Self {
            task_id,
            sample_id: sample_id.to_string(),
            region,
            cand_left,
            cand_right,
            truth_mapping,
            round_index,
        }
    }

    pub fn candidate(&self, p: Preference) -> Option<&CoefficientSet> {
        let a_stored_left = self.truth_mapping == Side::Left;
        match (p, a_stored_left) {
            (Preference::A, true) | (Preference::B, false) => Some(&self.cand_left),
            (Preference::A, false) | (Preference::B, true) => Some(&self.cand_right),
            (Preference::Similar, _) => None,
        }
    }

    pub fn candidate_a(&self) -> &CoefficientSet {
        self.candidate(Preference::A).expect("A is a candidate")
    }

    pub fn candidate_b(&self) -> &CoefficientSet {
        self.candidate(Preference::B).expect("B is a candidate")
    }

    /// `(left, right)` as shown under a display order.
    pub fn displayed(&self, order: DisplayOrder) -> (&CoefficientSet, &CoefficientSet) {
        match order {
            DisplayOrder::AB => (&self.cand_left, &self.cand_right),
            DisplayOrder::BA => (&self.cand_right, &self.cand_left),
        }
    }

    /// Maps a displayed choice back to candidate identity.
    pub fn map_choice(&self, order: DisplayOrder, choice: Choice) -> Preference {
        let stored = match (order, choice) {
            (_, Choice::Similar) => return Preference::Similar,
            (DisplayOrder::AB, Choice::Left) | (DisplayOrder::BA, Choice::Right) => Side::Left,
            (DisplayOrder::AB, Choice::Right) | (DisplayOrder::BA, Choice::Left) => Side::Right,
        };
        if stored == self.truth_mapping {
            Preference::A
        } else {
            Preference::B
        }
    }

    /// The displayed choice that names a preference under an order.
    pub fn choice_for(&self, order: DisplayOrder, p: Preference) -> Choice {
        Choice::ALL
            .into_iter()
            .find(|&c| self.map_choice(order, c) == p)
            .expect("every preference has a choice")
    }

    /// The same comparison with candidates A and B exchanged.
    pub fn swapped(&self) -> ComparisonTask {
        ComparisonTask {
            truth_mapping: self.truth_mapping.flip(),
            ..self.clone()
        }
    }

    /// Squared distance between the two candidates.
    pub fn pair_mse(&self) -> f64 {
        coeffs::mse(&self.cand_left, &self.cand_right).expect("candidates share a vocabulary")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub task_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    pub display_order: DisplayOrder,
    /// Milliseconds since the Unix epoch; 0 for simulated annotators.
    pub timestamp: u64,
}

pub const TASKS_SCHEMA: &str = "facepref.tasks";
pub const VOTES_SCHEMA: &str = "facepref.votes";

fn task_rng(sample_id: &str, round: u32, salt: u64) -> StreamRng {
    rng::stream(salt, "task-display", &[rng::key_id(sample_id), round as u64])
}

/// Builds the upper- and lower-face tasks comparing `s_a` with hybrids that
/// take one region from `s_b`. The display side of A is drawn from a stream
/// keyed by `(display_seed, sample, round)`.
pub fn build_region_tasks(
    sample_id: &str,
    s_a: &CoefficientSet,
    s_b: &CoefficientSet,
    vocab: &ActionVocabulary,
    round_index: u32,
    display_seed: u64,
) -> Result<(ComparisonTask, ComparisonTask)> {
    let (ab, ba) = mix(s_a, s_b, vocab)?;
    let mut rng = task_rng(sample_id, round_index, display_seed);
    let task_u = ComparisonTask::new(
        format!("{sample_id}-r{round_index}-u"),
        sample_id,
        TaskRegion::Upper,
        s_a.clone(),
        ba,
        round_index,
        &mut rng,
    );
    let task_l = ComparisonTask::new(
        format!("{sample_id}-r{round_index}-l"),
        sample_id,
        TaskRegion::Lower,
        s_a.clone(),
        ab,
        round_index,
        &mut rng,
    );
    Ok((task_u, task_l))
}

pub fn build_fullface_task(
    sample_id: &str,
    s_a: &CoefficientSet,
    s_b: &CoefficientSet,
    round_index: u32,
    display_seed: u64,
) -> Result<ComparisonTask> {
    if s_a.len() != s_b.len() {
        return Err(Error::Dimension {
            expected: s_a.len(),
            got: s_b.len(),
        });
    }
    let mut rng = task_rng(sample_id, round_index, display_seed ^ 0x5f5f);
    Ok(ComparisonTask::new(
        format!("{sample_id}-r{round_index}-f"),
        sample_id,
        TaskRegion::FullFace,
        s_a.clone(),
        s_b.clone(),
        round_index,
        &mut rng,
    ))
}

/// Simulated annotator: a noisy Bradley-Terry judge on region distance to ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Logistic sharpness applied to the distance gap.
    pub beta_sharpness: f64,
    /// Distance gaps below this are judged Similar.
    pub similar_margin: f64,
    /// Annotators per task; each votes once per display order.
    pub annotators: usize,
    /// Derived from the run seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            beta_sharpness: 4.5,
            similar_margin: 0.01,
            annotators: 2,
            seed: 7,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distance of a candidate to ground truth over the compared region.
pub fn task_distance(
    task: &ComparisonTask,
    candidate: &CoefficientSet,
    ground_truth: &CoefficientSet,
    vocab: &ActionVocabulary,
) -> Result<f64> {
    match task.region.face_region() {
        Some(r) => region_mse(candidate, ground_truth, vocab, r),
        None => coeffs::mse(candidate, ground_truth),
    }
}

/// Left/right click probabilities for displayed distances, `None` when the
/// gap is inside the Similar margin.
pub fn oracle_probabilities(d_left: f64, d_right: f64, cfg: &OracleConfig) -> Option<(f64, f64)> {
    let gap = d_right - d_left;
    if gap.abs() < cfg.similar_margin {
        return None;
    }
    if gap == 0.0 {
        return Some((0.5, 0.5));
    }
    Some((
        sigmoid(cfg.beta_sharpness * gap),
        sigmoid(cfg.beta_sharpness * -gap),
    ))
}

/// One simulated vote for one display order.
pub fn oracle_annotate(
    task: &ComparisonTask,
    ground_truth: Option<&CoefficientSet>,
    vocab: &ActionVocabulary,
    cfg: &OracleConfig,
    annotator: usize,
    order: DisplayOrder,
    rng: &mut StreamRng,
) -> Result<Vote> {
    let gt = ground_truth.ok_or_else(|| Error::MissingGroundTruth(task.sample_id.clone()))?;
    let (left, right) = task.displayed(order);
    let d_left = task_distance(task, left, gt, vocab)?;
    let d_right = task_distance(task, right, gt, vocab)?;
    let choice = match oracle_probabilities(d_left, d_right, cfg) {
        None => Choice::Similar,
        Some((p_left, _)) => {
            if rng.random::<f64>() < p_left {
                Choice::Left
            } else {
                Choice::Right
            }
        }
    };
    Ok(Vote {
        task_id: task.task_id.clone(),
        annotator_id: format!("oracle-{annotator}"),
        choice,
        display_order: order,
        timestamp: 0,
    })
}

/// Independent stream for one `(task, annotator, order)` vote.
pub fn oracle_stream(cfg: &OracleConfig, task_id: &str, annotator: usize, order: DisplayOrder) -> StreamRng {
    rng::stream(
        cfg.seed,
        "oracle-vote",
        &[rng::key_id(task_id), annotator as u64, order.code()],
    )
}

/// All votes of the configured annotator panel, both display orders each.
pub fn oracle_votes(
    task: &ComparisonTask,
    ground_truth: Option<&CoefficientSet>,
    vocab: &ActionVocabulary,
    cfg: &OracleConfig,
) -> Result<Vec<Vote>> {
    let mut votes = Vec::with_capacity(cfg.annotators * 2);
    for annotator in 0..cfg.annotators {
        for order in DisplayOrder::BOTH {
            let mut r = oracle_stream(cfg, &task.task_id, annotator, order);
            votes.push(oracle_annotate(task, ground_truth, vocab, cfg, annotator, order, &mut r)?);
        }
    }
    Ok(votes)
}

/// A decision iff every mapped vote names the same candidate; all-Similar
/// yields Similar; anything mixed is Inconsistent.
pub fn filter_consistent(task_id: &str, mapped: &[Preference], expected: usize) -> Result<Decision> {
    if mapped.len() != expected || expected == 0 {
        return Err(Error::VoteCount {
            task: task_id.to_string(),
            got: mapped.len(),
            expected,
        });
    }
    let first = mapped[0];
    if mapped.iter().all(|&p| p == first) {
        Ok(first.into())
    } else {
        Ok(Decision::Inconsistent)
    }
}

/// Maps a task's votes and filters them.
pub fn decide_task(task: &ComparisonTask, votes: &[&Vote], annotators: usize) -> Result<Decision> {
    let mapped: Vec<Preference> = votes
        .iter()
        .map(|v| task.map_choice(v.display_order, v.choice))
        .collect();
    filter_consistent(&task.task_id, &mapped, annotators * 2)
}

/// Decisions for every task whose vote set is complete; incomplete tasks are skipped.
pub fn decide_all(
    tasks: &[ComparisonTask],
    votes: &[Vote],
    annotators: usize,
) -> Result<HashMap<String, Decision>> {
    let mut by_task: HashMap<&str, Vec<&Vote>> = HashMap::new();
    for v in votes {
        by_task.entry(v.task_id.as_str()).or_default().push(v);
    }
    let mut out = HashMap::new();
    for task in tasks {
        if let Some(vs) = by_task.get(task.task_id.as_str()) {
            if vs.len() == annotators * 2 {
                out.insert(task.task_id.clone(), decide_task(task, vs, annotators)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriplet {
    pub sample_id: String,
    pub observation: Vec<f64>,
    pub chosen: CoefficientSet,
    pub rejected: CoefficientSet,
    /// Decisions that produced the upper and lower halves.
    pub provenance: [Decision; 2],
}

fn regional_pair(
    decision: Decision,
    a: &coeffs::RegionalSubset,
    b: &coeffs::RegionalSubset,
) -> (coeffs::RegionalSubset, coeffs::RegionalSubset) {
    match decision {
        Decision::A => (a.clone(), b.clone()),
        Decision::B => (b.clone(), a.clone()),
        // Identical halves cancel inside the DPO log-ratio difference.
        Decision::Similar | Decision::Inconsistent => (a.clone(), a.clone()),
    }
}

/// Merges per-region decisions into `(S+, S-)`; `None` when neither region
/// expresses a preference.
pub fn assemble_triplet(
    sample_id: &str,
    observation: &[f64],
    decision_u: Decision,
    decision_l: Decision,
    s_a: &CoefficientSet,
    s_b: &CoefficientSet,
    vocab: &ActionVocabulary,
) -> Result<Option<PreferenceTriplet>> {
    if !decision_u.is_preferential() && !decision_l.is_preferential() {
        return Ok(None);
    }
    let (a_u, a_l) = split(s_a, vocab)?;
    let (b_u, b_l) = split(s_b, vocab)?;
    let (plus_u, minus_u) = regional_pair(decision_u, &a_u, &b_u);
    let (plus_l, minus_l) = regional_pair(decision_l, &a_l, &b_l);
    Ok(Some(PreferenceTriplet {
        sample_id: sample_id.to_string(),
        observation: observation.to_vec(),
        chosen: merge(&plus_u, &plus_l, vocab)?,
        rejected: merge(&minus_u, &minus_l, vocab)?,
        provenance: [decision_u, decision_l],
    }))
}

/// Full-face variant: the whole preferred set is chosen.
pub fn assemble_fullface(
    sample_id: &str,
    observation: &[f64],
    decision: Decision,
    s_a: &CoefficientSet,
    s_b: &CoefficientSet,
) -> Option<PreferenceTriplet> {
    let (chosen, rejected) = match decision {
        Decision::A => (s_a.clone(), s_b.clone()),
        Decision::B => (s_b.clone(), s_a.clone()),
        _ => return None,
    };
    Some(PreferenceTriplet {
        sample_id: sample_id.to_string(),
        observation: observation.to_vec(),
        chosen,
        rejected,
        provenance: [decision, decision],
    })
}

/// Sorts by pair MSE (descending, ties by id) and returns the top
/// `ceil(fraction * n)` as the easy set and the rest as the hard set.
pub fn easy_hard_split<T>(
    items: Vec<T>,
    fraction: f64,
    mse: impl Fn(&T) -> f64,
    id: impl Fn(&T) -> String,
) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let mut keyed: Vec<(f64, String, T)> = items.into_iter().map(|t| (mse(&t), id(&t), t)).collect();
    keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
    let easy_n = ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut easy = Vec::with_capacity(easy_n);
    let mut hard = Vec::with_capacity(n - easy_n);
    for (i, (_, _, t)) in keyed.into_iter().enumerate() {
        if i < easy_n {
            easy.push(t);
        } else {
            hard.push(t);
        }
    }
    (easy, hard)
}
