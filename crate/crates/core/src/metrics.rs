//! Evaluation metrics: win rate, vote ratios, self-consistency, accuracies
//! and macro-F1 over the three preference classes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefdata::Preference;

/// Per-comparison outcome from the evaluated policy's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Win,
    Lose,
    Similar,
    Inconsistent,
}

/// `N_win / (N_win + N_lose)`; Similar and Inconsistent are excluded.
pub fn win_rate(outcomes: &[Outcome]) -> Result<f64> {
    let wins = outcomes.iter().filter(|&&o| o == Outcome::Win).count();
    let losses = outcomes.iter().filter(|&&o| o == Outcome::Lose).count();
    if wins + losses == 0 {
        return Err(Error::NoComparisons);
    }
    Ok(wins as f64 / (wins + losses) as f64)
}

/// Raw vote shares in percent, before any filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteRatio {
    pub a: f64,
    pub b: f64,
    pub similar: f64,
    pub total: usize,
}

impl VoteRatio {
    pub fn from_counts(a: usize, b: usize, similar: usize) -> Result<Self> {
        let total = a + b + similar;
        if total == 0 {
            return Err(Error::EmptyData("no votes".into()));
        }
        let pct = |n: usize| 100.0 * n as f64 / total as f64;
        Ok(Self {
            a: pct(a),
            b: pct(b),
            similar: pct(similar),
            total,
        })
    }
}

/// `A:B:Similar` as two-decimal percentages, e.g. `47.90%/39.80%/12.30%`.
impl fmt::Display for VoteRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}%/{:.2}%/{:.2}%", self.a, self.b, self.similar)
    }
}

pub fn vote_ratio(votes: &[Preference]) -> Result<VoteRatio> {
    let count = |p: Preference| votes.iter().filter(|&&v| v == p).count();
    VoteRatio::from_counts(
        count(Preference::A),
        count(Preference::B),
        count(Preference::Similar),
    )
}

/// Fraction of pass pairs whose mapped choices agree, Similar-Similar included.
pub fn self_consistency(pairs: &[(Preference, Preference)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("no pass pairs".into()));
    }
    let agree = pairs.iter().filter(|(x, y)| x == y).count();
    Ok(agree as f64 / pairs.len() as f64)
}

fn check_lengths<T>(preds: &[T], labels: &[Preference]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Dimension {
            expected: labels.len(),
            got: preds.len(),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("no predictions".into()));
    }
    Ok(())
}

/// Rows are labels `A, B, Similar`; columns are predictions `A, B, Similar, abstain`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 3],
}

impl ConfusionMatrix {
    /// `None` predictions are abstentions.
    pub fn from_predictions(preds: &[Option<Preference>], labels: &[Preference]) -> Result<Self> {
        check_lengths(preds, labels)?;
        let mut m = Self::default();
        for (p, l) in preds.iter().zip(labels) {
            let col = p.map_or(3, Preference::index);
            m.counts[l.index()][col] += 1;
        }
        Ok(m)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy_2class(&self) -> Result<f64> {
        let c = &self.counts;
        let valid = c[0][0] + c[0][1] + c[1][0] + c[1][1];
        if valid == 0 {
            return Err(Error::NoTwoClassSamples);
        }
        Ok((c[0][0] + c[1][1]) as f64 / valid as f64)
    }

    pub fn accuracy_3class(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyData("no predictions".into()));
        }
        let hits: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        Ok(hits as f64 / total as f64)
    }

    pub fn f1(&self, class: Preference) -> f64 {
        let i = class.index();
        let tp = self.counts[i][i] as f64;
        let predicted: u64 = (0..3).map(|r| self.counts[r][i]).sum();
        let actual: u64 = self.counts[i].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn macro_f1(&self) -> MacroF1 {
        MacroF1::from_per_class(Preference::ALL.map(|p| self.f1(p)))
    }
}

/// Accuracy over samples where both prediction and label are A or B.
pub fn accuracy_2class(preds: &[Option<Preference>], labels: &[Preference]) -> Result<f64> {
    ConfusionMatrix::from_predictions(preds, labels)?.accuracy_2class()
}

/// Exact-match accuracy; abstentions count as wrong.
pub fn accuracy_3class(preds: &[Option<Preference>], labels: &[Preference]) -> Result<f64> {
    ConfusionMatrix::from_predictions(preds, labels)?.accuracy_3class()
}

pub fn macro_f1(preds: &[Option<Preference>], labels: &[Preference]) -> Result<MacroF1> {
    Ok(ConfusionMatrix::from_predictions(preds, labels)?.macro_f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroF1 {
    /// F1 of A, B and Similar in that order.
    pub per_class: [f64; 3],
    pub macro_avg: f64,
}

impl MacroF1 {
    pub fn from_per_class(per_class: [f64; 3]) -> Self {
        Self {
            per_class,
            macro_avg: per_class.iter().sum::<f64>() / 3.0,
        }
    }
}

/// Truncates toward zero at two decimals. The epsilon absorbs binary
/// representation error, so 0.47000000000000003 and 0.46999999999999997 both give 0.47.
pub fn truncate2(x: f64) -> f64 {
    (x * 100.0 + 1e-9).floor() / 100.0
}

/// `0.41/0.46/0.54 -- 0.47`, each figure truncated to two decimals.
impl fmt::Display for MacroF1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, s] = self.per_class.map(truncate2);
        write!(f, "{a:.2}/{b:.2}/{s:.2} -- {:.2}", truncate2(self.macro_avg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use Preference::*;

    fn pref(i: u8) -> Preference {
        Preference::ALL[(i % 3) as usize]
    }

    #[test]
    fn win_rate_examples() {
        use Outcome::*;
        assert_eq!(win_rate(&[Win, Win, Win, Lose]).unwrap(), 0.75);
        assert!(matches!(win_rate(&[Similar, Similar]), Err(Error::NoComparisons)));
        assert_eq!(
            win_rate(&[Similar]).unwrap_err().to_string(),
            "no high-confidence comparisons"
        );
        assert_eq!(win_rate(&[Win, Inconsistent, Lose, Similar]).unwrap(), 0.5);
    }

    #[test]
    fn win_rate_matches_brute_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = [Outcome::Win, Outcome::Lose, Outcome::Similar, Outcome::Inconsistent];
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let xs: Vec<Outcome> = (0..n).map(|_| all[rng.random_range(0..4)]).collect();
            let (mut w, mut l) = (0.0, 0.0);
            for x in &xs {
                match x {
                    Outcome::Win => w += 1.0,
                    Outcome::Lose => l += 1.0,
                    _ => {}
                }
            }
            match win_rate(&xs) {
                Ok(r) => assert_eq!(r, w / (w + l)),
                Err(_) => assert_eq!(w + l, 0.0),
            }
        }
    }

    #[test]
    fn vote_ratio_examples() {
        let r = vote_ratio(&[A, B, Similar]).unwrap();
        assert_eq!(format!("{:.1}/{:.1}/{:.1}", r.a, r.b, r.similar), "33.3/33.3/33.3");
        assert!((r.a + r.b + r.similar - 100.0).abs() < 0.1);
        let r = VoteRatio::from_counts(479, 398, 123).unwrap();
        assert_eq!(r.to_string(), "47.90%/39.80%/12.30%");
        assert!(vote_ratio(&[]).is_err());
    }

    #[test]
    fn self_consistency_examples() {
        assert_eq!(self_consistency(&[(A, A), (Similar, Similar)]).unwrap(), 1.0);
        assert_eq!(self_consistency(&[(A, A), (B, B), (A, B), (Similar, A)]).unwrap(), 0.5);
    }

    #[test]
    fn accuracy_examples() {
        let labels = [A, B, A, B];
        let perfect: Vec<_> = labels.iter().map(|&l| Some(l)).collect();
        assert_eq!(accuracy_2class(&perfect, &labels).unwrap(), 1.0);
        assert_eq!(accuracy_3class(&perfect, &labels).unwrap(), 1.0);
        let similar = vec![Some(Similar); 4];
        assert_eq!(
            accuracy_2class(&similar, &labels).unwrap_err().to_string(),
            "no valid 2-class samples"
        );
        let wrong = [Some(B), Some(Similar), None, Some(A)];
        assert_eq!(accuracy_3class(&wrong, &labels).unwrap(), 0.0);
    }

    #[test]
    fn macro_f1_reference_figures() {
        let m = MacroF1::from_per_class([0.41, 0.46, 0.54]);
        assert_eq!(truncate2(m.macro_avg), 0.47);
        assert_eq!(m.to_string(), "0.41/0.46/0.54 -- 0.47");
        let m = MacroF1::from_per_class([0.30, 0.24, 0.00]);
        assert_eq!(truncate2(m.macro_avg), 0.18);
        let m = MacroF1::from_per_class([0.17, 0.13, 0.74]);
        assert!((m.macro_avg - 0.346_666_666_666_666_7).abs() < 1e-12);
        assert_eq!(m.to_string(), "0.17/0.13/0.74 -- 0.34");
    }

    // Direct re-derivation from the prediction list, independent of the matrix.
    fn brute_f1(preds: &[Option<Preference>], labels: &[Preference], c: Preference) -> f64 {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == Some(c) && **l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(p, l)| **p == Some(c) && **l != c).count() as f64;
        let fneg = preds.iter().zip(labels).filter(|(p, l)| **p != Some(c) && **l == c).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        }
    }

    proptest! {
        #[test]
        fn metrics_match_brute_force_and_are_order_free(
            raw in proptest::collection::vec((0u8..4, 0u8..3), 1..60),
            rot in 0usize..60,
        ) {
            let preds: Vec<Option<Preference>> =
                raw.iter().map(|&(p, _)| if p == 3 { None } else { Some(pref(p)) }).collect();
            let labels: Vec<Preference> = raw.iter().map(|&(_, l)| pref(l)).collect();
            let m = macro_f1(&preds, &labels).unwrap();
            for (i, c) in Preference::ALL.into_iter().enumerate() {
                prop_assert!((m.per_class[i] - brute_f1(&preds, &labels, c)).abs() < 1e-12);
            }
            prop_assert!((m.macro_avg - m.per_class.iter().sum::<f64>() / 3.0).abs() < 1e-15);

            let hits = preds.iter().zip(&labels).filter(|(p, l)| **p == Some(**l)).count();
            let acc3 = accuracy_3class(&preds, &labels).unwrap();
            prop_assert_eq!(acc3, hits as f64 / labels.len() as f64);
            prop_assert!((0.0..=1.0).contains(&acc3));

            let two: Vec<_> = preds.iter().zip(&labels)
                .filter(|(p, l)| matches!(p, Some(A) | Some(B)) && matches!(l, A | B))
                .collect();
            match accuracy_2class(&preds, &labels) {
                Ok(a) => {
                    let hit2 = two.iter().filter(|(p, l)| **p == Some(**l)).count();
                    prop_assert_eq!(a, hit2 as f64 / two.len() as f64);
                }
                Err(_) => prop_assert!(two.is_empty()),
            }

            let mut rp = preds.clone();
            let mut rl = labels.clone();
            let r = rot % preds.len();
            rp.rotate_left(r);
            rl.rotate_left(r);
            prop_assert_eq!(ConfusionMatrix::from_predictions(&rp, &rl).unwrap(),
                ConfusionMatrix::from_predictions(&preds, &labels).unwrap());
        }

        #[test]
        fn accuracies_agree_without_similar(raw in proptest::collection::vec((0u8..2, 0u8..2), 1..40)) {
            let preds: Vec<_> = raw.iter().map(|&(p, _)| Some(pref(p))).collect();
            let labels: Vec<_> = raw.iter().map(|&(_, l)| pref(l)).collect();
            prop_assert_eq!(accuracy_2class(&preds, &labels).unwrap(), accuracy_3class(&preds, &labels).unwrap());
        }

        #[test]
        fn self_consistency_matches_pair_scan(raw in proptest::collection::vec((0u8..3, 0u8..3), 1..50)) {
            let pairs: Vec<_> = raw.iter().map(|&(x, y)| (pref(x), pref(y))).collect();
            let mut agree = 0;
            for (x, y) in &pairs {
                if x == y {
                    agree += 1;
                }
            }
            prop_assert_eq!(self_consistency(&pairs).unwrap(), agree as f64 / pairs.len() as f64);
        }
    }
}
