//! Three-way preference judge over engineered pair features, and the
//! raster-distance baseline it is compared against.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{self, Header};
use crate::coeffs::{snap, ActionVocabulary, CoefficientSet};
use crate::error::{Error, Result};
use crate::facerender::{render_raster, RenderSpec};
use crate::optim::{Adam, AdamConfig};
use crate::prefdata::{ComparisonTask, Preference};

/// Bumped whenever the feature layout changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;
pub const DISCRIMINATOR_SCHEMA: &str = "facepref.discriminator";
/// Raster size used by the embed baseline.
pub const EMBED_RASTER_SIZE: usize = 64;

/// Feature count for `k` actions: six masked blocks plus two distances.
pub fn feature_len(k: usize) -> usize {
    6 * k + 2
}

/// Pair features for candidates `a` and `b` over the compared region.
///
/// Layout: `m(a-o)`, `m(b-o)`, `m(a-b)`, then their absolute values, then
/// the masked squared distances of `a` and `b` to the observation.
pub fn featurize(
    observation: &[f64],
    cand_a: &CoefficientSet,
    cand_b: &CoefficientSet,
    task: &ComparisonTask,
    vocab: &ActionVocabulary,
) -> Result<Vec<f64>> {
    let k = vocab.len();
    for len in [observation.len(), cand_a.len(), cand_b.len()] {
        if len != k {
            return Err(Error::Dimension { expected: k, got: len });
        }
    }
    let mask: Vec<bool> = match task.region.face_region() {
        Some(r) => vocab.mask(r),
        None => vec![true; k],
    };
    let mut f = vec![0.0; feature_len(k)];
    let (mut da, mut db) = (0.0, 0.0);
    for i in 0..k {
        if !mask[i] {
            continue;
        }
        let ao = cand_a.get(i) - observation[i];
        let bo = cand_b.get(i) - observation[i];
        let ab = cand_a.get(i) - cand_b.get(i);
        f[i] = ao;
        f[k + i] = bo;
        f[2 * k + i] = ab;
        f[3 * k + i] = ao.abs();
        f[4 * k + i] = bo.abs();
        f[5 * k + i] = ab.abs();
        da += ao * ao;
        db += bo * bo;
    }
    f[6 * k] = da;
    f[6 * k + 1] = db;
    Ok(f)
}

/// Features of the same pair with A and B exchanged, derived by permutation.
pub fn swap_features(f: &[f64], k: usize) -> Vec<f64> {
    let mut s = vec![0.0; f.len()];
    for i in 0..k {
        s[i] = f[k + i];
        s[k + i] = f[i];
        s[2 * k + i] = -f[2 * k + i];
        s[3 * k + i] = f[4 * k + i];
        s[4 * k + i] = f[3 * k + i];
        s[5 * k + i] = f[5 * k + i];
    }
    s[6 * k] = f[6 * k + 1];
    s[6 * k + 1] = f[6 * k];
    s
}

/// Index and sign of each feature under the A/B swap.
fn swap_permutation(k: usize) -> (Vec<usize>, Vec<f64>) {
    let d = feature_len(k);
    let mut perm = vec![0; d];
    let mut sign = vec![1.0; d];
    for i in 0..k {
        perm[i] = k + i;
        perm[k + i] = i;
        perm[2 * k + i] = 2 * k + i;
        sign[2 * k + i] = -1.0;
        perm[3 * k + i] = 4 * k + i;
        perm[4 * k + i] = 3 * k + i;
        perm[5 * k + i] = 5 * k + i;
    }
    perm[6 * k] = 6 * k + 1;
    perm[6 * k + 1] = 6 * k;
    (perm, sign)
}

/// Projects a weight-shaped vector onto the swap-symmetric subspace: the B
/// row is the A row seen through the swap, and the Similar row is its own
/// image. The augmented loss has an exactly symmetric gradient, but Adam's
/// per-coordinate scaling magnifies rounding-level asymmetry from step to
/// step, so the projection keeps the fit exact in floating point.
fn symmetrize(w: &mut [f64], perm: &[usize], sign: &[f64], row: usize) {
    let d = perm.len();
    for j in 0..d {
        let pj = perm[j];
        let ab = 0.5 * (w[j] + sign[j] * w[row + pj]);
        w[j] = ab;
        w[row + pj] = sign[j] * ab;
    }
    let bias = 0.5 * (w[d] + w[row + d]);
    w[d] = bias;
    w[row + d] = bias;
    let s = 2 * row;
    for j in 0..d {
        let pj = perm[j];
        if pj < j || (pj == j && sign[j] > 0.0) {
            continue;
        }
        let v = 0.5 * (w[s + j] + sign[j] * w[s + pj]);
        w[s + j] = v;
        w[s + pj] = sign[j] * v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub layout_version: u32,
    pub actions: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Three rows (A, B, Similar) of `feature_len + 1` weights, bias last.
    pub weights: Vec<f64>,
}

impl DiscriminatorParams {
    pub fn zeros(actions: usize) -> Self {
        let d = feature_len(actions);
        Self {
            layout_version: FEATURE_LAYOUT_VERSION,
            actions,
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            weights: vec![0.0; 3 * (d + 1)],
        }
    }

    pub fn feature_len(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    fn logits_standardized(&self, z: &[f64]) -> [f64; 3] {
        let row = z.len() + 1;
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weights[c * row..(c + 1) * row];
            *o = w[..z.len()].iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + w[z.len()];
        }
        out
    }

    pub fn logits(&self, features: &[f64]) -> Result<[f64; 3]> {
        if features.len() != self.feature_len() {
            return Err(Error::Dimension {
                expected: self.feature_len(),
                got: features.len(),
            });
        }
        Ok(self.logits_standardized(&self.standardize(features)))
    }
}

fn softmax3(l: [f64; 3]) -> [f64; 3] {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|x| (x - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// One training record: a task, its sample's observation, and the filtered label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTask {
    pub task: ComparisonTask,
    pub observation: Vec<f64>,
    pub label: Preference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub steps: usize,
    pub lr: f64,
    /// L2 penalty on the per-action weights. The two distance scalars and
    /// the biases are left free.
    pub weight_decay: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 0.05,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DiscriminatorParams,
    pub final_loss: f64,
    pub train_accuracy: f64,
    /// Set when all labels fall in one class; the fit still runs.
    pub single_class: bool,
}

/// Full-batch Adam on mean cross-entropy over every record and its swapped copy.
pub fn train(
    records: &[LabeledTask],
    vocab: &ActionVocabulary,
    cfg: &DiscriminatorConfig,
) -> Result<TrainOutcome> {
    if records.len() < 3 {
        return Err(Error::EmptyData(format!(
            "discriminator needs at least 3 records, got {}",
            records.len()
        )));
    }
    let k = vocab.len();
    let d = feature_len(k);
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(2 * records.len());
    let mut ys: Vec<usize> = Vec::with_capacity(2 * records.len());
    for r in records {
        let f = featurize(&r.observation, r.task.candidate_a(), r.task.candidate_b(), &r.task, vocab)?;
        xs.push(swap_features(&f, k));
        ys.push(r.label.swap().index());
        xs.push(f);
        ys.push(r.label.index());
    }
    let single_class = records.iter().all(|r| r.label == records[0].label);

    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in &xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for x in &xs {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let (perm, sign) = swap_permutation(k);
    for j in 0..d {
        let pj = perm[j];
        if pj < j {
            continue;
        }
        let m = if sign[j] < 0.0 { 0.0 } else { 0.5 * (mean[j] + mean[pj]) };
        mean[j] = m;
        mean[pj] = m;
        let sc = 0.5 * (scale[j] + scale[pj]);
        scale[j] = sc;
        scale[pj] = sc;
    }
    let mut params = DiscriminatorParams {
        layout_version: FEATURE_LAYOUT_VERSION,
        actions: k,
        mean,
        scale,
        weights: vec![0.0; 3 * (d + 1)],
    };
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| params.standardize(x)).collect();
    let row = d + 1;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), params.weights.len());
    let mut final_loss = (3.0f64).ln();
    for _ in 0..cfg.steps {
        let mut grad = vec![0.0; params.weights.len()];
        let mut loss = 0.0;
        for (z, &y) in zs.iter().zip(&ys) {
            let p = softmax3(params.logits_standardized(z));
            loss -= p[y].max(1e-300).ln();
            for c in 0..3 {
                let g = p[c] - if c == y { 1.0 } else { 0.0 };
                let w = &mut grad[c * row..(c + 1) * row];
                for (gw, zi) in w.iter_mut().zip(z) {
                    *gw += g * zi;
                }
                w[d] += g;
            }
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g /= n;
            // Per-action weights are penalized; the distance scalars and bias are not.
            if i % row < 6 * k {
                *g += cfg.weight_decay * params.weights[i];
            }
        }
        final_loss = loss / n;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite("discriminator loss".into()));
        }
        symmetrize(&mut grad, &perm, &sign, row);
        adam.step(&mut params.weights, &grad);
    }
    let hits = zs
        .iter()
        .zip(&ys)
        .filter(|(z, &y)| argmax3(params.logits_standardized(z)) == y)
        .count();
    Ok(TrainOutcome {
        params,
        final_loss,
        train_accuracy: hits as f64 / n,
        single_class,
    })
}

/// Argmax with ties broken A, then B, then Similar.
fn argmax3(l: [f64; 3]) -> usize {
    let mut best = 0;
    for c in 1..3 {
        if l[c] > l[best] {
            best = c;
        }
    }
    best
}

/// Judged choice for candidate A vs B of a task, and the class probabilities.
pub fn predict(
    params: &DiscriminatorParams,
    task: &ComparisonTask,
    observation: &[f64],
    vocab: &ActionVocabulary,
) -> Result<(Preference, [f64; 3])> {
    let f = featurize(observation, task.candidate_a(), task.candidate_b(), task, vocab)?;
    let logits = params.logits(&f)?;
    Ok((Preference::ALL[argmax3(logits)], softmax3(logits)))
}

/// Predicts on the task and on its candidate-swapped copy; `None` (abstain)
/// unless both passes map to the same choice.
pub fn predict_symmetric(
    params: &DiscriminatorParams,
    task: &ComparisonTask,
    observation: &[f64],
    vocab: &ActionVocabulary,
) -> Result<Option<Preference>> {
    let (first, _) = predict(params, task, observation, vocab)?;
    let (second, _) = predict(params, &task.swapped(), observation, vocab)?;
    Ok((first == second.swap()).then_some(first))
}

/// The two mapped passes of `predict_symmetric`, for self-consistency reporting.
pub fn predict_passes(
    params: &DiscriminatorParams,
    task: &ComparisonTask,
    observation: &[f64],
    vocab: &ActionVocabulary,
) -> Result<(Preference, Preference)> {
    let (first, _) = predict(params, task, observation, vocab)?;
    let (second, _) = predict(params, &task.swapped(), observation, vocab)?;
    Ok((first, second.swap()))
}

/// The observation clipped to `[0, 1]` and snapped to the bin grid, the
/// stand-in for a rendered reference photo.
pub fn reference_coefficients(observation: &[f64], bins: usize) -> Result<CoefficientSet> {
    let clipped = CoefficientSet::new(observation.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    snap(&clipped, bins)
}

/// Raster-distance judge: the candidate whose render is closer to the
/// reference render wins; ties go to A. Never answers Similar.
pub fn embed_baseline(
    task: &ComparisonTask,
    observation: &[f64],
    vocab: &ActionVocabulary,
    spec: &RenderSpec,
) -> Result<Preference> {
    let reference = render_raster(&reference_coefficients(observation, vocab.bins())?, spec, EMBED_RASTER_SIZE)?;
    let ra = render_raster(task.candidate_a(), spec, EMBED_RASTER_SIZE)?;
    let rb = render_raster(task.candidate_b(), spec, EMBED_RASTER_SIZE)?;
    let da = ra.mean_sq_distance(&reference)?;
    let db = rb.mean_sq_distance(&reference)?;
    Ok(if db < da { Preference::B } else { Preference::A })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorFile {
    pub header: Header,
    pub vocab_hash: String,
    pub params: DiscriminatorParams,
}

pub fn save_discriminator(
    path: &Path,
    params: &DiscriminatorParams,
    vocab: &ActionVocabulary,
    header: Header,
) -> Result<()> {
    artifact::write_json(
        path,
        &DiscriminatorFile {
            header,
            vocab_hash: vocab.hash(),
            params: params.clone(),
        },
    )
}

pub fn load_discriminator(path: &Path, vocab: &ActionVocabulary) -> Result<(Header, DiscriminatorParams)> {
    let file: DiscriminatorFile = artifact::read_json(path)?;
    file.header.expect_schema(DISCRIMINATOR_SCHEMA, path)?;
    if file.vocab_hash != vocab.hash() {
        return Err(Error::VocabMismatch {
            expected: vocab.hash(),
            found: file.vocab_hash,
        });
    }
    if file.params.layout_version != FEATURE_LAYOUT_VERSION {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            reason: format!(
                "feature layout v{} but this build uses v{FEATURE_LAYOUT_VERSION}",
                file.params.layout_version
            ),
        });
    }
    if file.params.feature_len() != feature_len(vocab.len())
        || file.params.weights.len() != 3 * (feature_len(vocab.len()) + 1)
    {
        return Err(Error::Dimension {
            expected: feature_len(vocab.len()),
            got: file.params.feature_len(),
        });
    }
    Ok((file.header, file.params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefdata::{build_fullface_task, build_region_tasks};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, k: usize) -> CoefficientSet {
        CoefficientSet::new((0..k).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn feature_length_and_blocks() {
        let v = ActionVocabulary::default();
        // Count oracle: three signed blocks, three absolute blocks, two distances.
        let blocks = [61usize; 6];
        assert_eq!(feature_len(61), blocks.iter().sum::<usize>() + 2);
        assert_eq!(feature_len(61), 368);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_set(&mut rng, 61);
        let t = build_fullface_task("s", &a, &a, 0, 1).unwrap();
        let f = featurize(&[0.5; 61], &a, &a, &t, &v).unwrap();
        assert_eq!(f.len(), 368);
        assert!(f[122..183].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn swap_permutation_matches_recomputation() {
        let v = ActionVocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 0..50 {
            let a = random_set(&mut rng, 61);
            let b = random_set(&mut rng, 61);
            let obs: Vec<f64> = (0..61).map(|_| rng.random()).collect();
            let (u, _) = build_region_tasks(&format!("s{n}"), &a, &b, &v, 0, 1).unwrap();
            let f = featurize(&obs, u.candidate_a(), u.candidate_b(), &u, &v).unwrap();
            let g = featurize(&obs, u.candidate_b(), u.candidate_a(), &u, &v).unwrap();
            assert_eq!(swap_features(&f, 61), g);
            // Region mask: lower-face actions contribute nothing to an upper task.
            for &i in v.indices(crate::Region::Lower) {
                assert_eq!(f[i], 0.0);
            }
        }
    }

    fn toy_records(n: usize, seed: u64) -> (ActionVocabulary, Vec<LabeledTask>) {
        let v = ActionVocabulary::generic(4, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for i in 0..n {
            let obs: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let gt = CoefficientSet::new(obs.clone()).unwrap();
            let far = CoefficientSet::new(obs.iter().map(|x| if *x > 0.5 { 0.0 } else { 1.0 }).collect()).unwrap();
            let (a, b, label) = match i % 3 {
                0 => (gt.clone(), far, Preference::A),
                1 => (far, gt.clone(), Preference::B),
                _ => (gt.clone(), gt.clone(), Preference::Similar),
            };
            let task = build_fullface_task(&format!("t{i}"), &a, &b, 0, 1).unwrap();
            out.push(LabeledTask {
                task,
                observation: obs,
                label,
            });
        }
        (v, out)
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (v, recs) = toy_records(60, 3);
        let out = train(&recs, &v, &DiscriminatorConfig::default()).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
        assert!(!out.single_class);
        for r in &recs {
            assert_eq!(predict(&out.params, &r.task, &r.observation, &v).unwrap().0, r.label);
        }
    }

    #[test]
    fn augmentation_makes_predictions_symmetric() {
        let (v, recs) = toy_records(30, 4);
        let out = train(&recs, &v, &DiscriminatorConfig { steps: 100, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 0..100 {
            let a = random_set(&mut rng, 4);
            let b = random_set(&mut rng, 4);
            let obs: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let t = build_fullface_task(&format!("q{n}"), &a, &b, 0, 1).unwrap();
            let (_, p) = predict(&out.params, &t, &obs, &v).unwrap();
            let (_, q) = predict(&out.params, &t.swapped(), &obs, &v).unwrap();
            assert!((p[0] - q[1]).abs() < 1e-6, "{p:?} {q:?}");
            assert!((p[1] - q[0]).abs() < 1e-6);
            assert!((p[2] - q[2]).abs() < 1e-6);
            assert!(predict_symmetric(&out.params, &t, &obs, &v).unwrap().is_some());
        }
    }

    #[test]
    fn zero_steps_give_uniform_predictions() {
        let (v, recs) = toy_records(9, 6);
        let out = train(&recs, &v, &DiscriminatorConfig { steps: 0, ..Default::default() }).unwrap();
        let (choice, p) = predict(&out.params, &recs[1].task, &recs[1].observation, &v).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(choice, Preference::A);
    }

    #[test]
    fn too_few_records_is_an_error_and_single_class_is_flagged() {
        let (v, recs) = toy_records(9, 7);
        assert!(train(&recs[..2], &v, &DiscriminatorConfig::default()).is_err());
        let same: Vec<_> = recs.iter().filter(|r| r.label == Preference::A).cloned().collect();
        let out = train(&same, &v, &DiscriminatorConfig { steps: 5, ..Default::default() }).unwrap();
        assert!(out.single_class);
    }

    #[test]
    fn predict_argmax_and_distribution() {
        let v = ActionVocabulary::generic(4, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = DiscriminatorParams::zeros(4);
        for w in params.weights.iter_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for n in 0..200 {
            let a = random_set(&mut rng, 4);
            let b = random_set(&mut rng, 4);
            let obs: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let t = build_fullface_task(&format!("p{n}"), &a, &b, 0, 1).unwrap();
            let (choice, p) = predict(&params, &t, &obs, &v).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let l = params.logits(&featurize(&obs, &a, &b, &t, &v).unwrap()).unwrap();
            let best = (0..3).max_by(|&i, &j| l[i].total_cmp(&l[j]).then(j.cmp(&i))).unwrap();
            assert_eq!(choice, Preference::ALL[best]);
        }
    }

    #[test]
    fn symmetric_prediction_cases() {
        let v = ActionVocabulary::generic(4, 2, 5).unwrap();
        let a = CoefficientSet::filled(4, 0.2).unwrap();
        let b = CoefficientSet::filled(4, 0.7).unwrap();
        let t = build_fullface_task("h", &a, &b, 0, 1).unwrap();
        let obs = [0.3; 4];
        // Bias-only params: always A, which maps to B on the swapped pass.
        let mut always_a = DiscriminatorParams::zeros(4);
        let row = feature_len(4) + 1;
        always_a.weights[row - 1] = 5.0;
        assert_eq!(predict_symmetric(&always_a, &t, &obs, &v).unwrap(), None);
        let mut always_similar = DiscriminatorParams::zeros(4);
        always_similar.weights[3 * row - 1] = 5.0;
        assert_eq!(
            predict_symmetric(&always_similar, &t, &obs, &v).unwrap(),
            Some(Preference::Similar)
        );
    }

    #[test]
    fn embed_baseline_cases() {
        let v = ActionVocabulary::default();
        let spec = RenderSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_set(&mut rng, 61);
        let t = build_fullface_task("e", &a, &a, 0, 1).unwrap();
        assert_eq!(embed_baseline(&t, a.values(), &v, &spec).unwrap(), Preference::A);

        for n in 0..20 {
            let obs: Vec<f64> = (0..61).map(|_| rng.random()).collect();
            let reference = reference_coefficients(&obs, v.bins()).unwrap();
            let other = random_set(&mut rng, 61);
            let t = build_fullface_task(&format!("e{n}"), &other, &reference, 0, 1).unwrap();
            let got = embed_baseline(&t, &obs, &v, &spec).unwrap();
            let r = render_raster(&reference, &spec, 64).unwrap();
            let ro = render_raster(&other, &spec, 64).unwrap();
            // Direct brute-force pixel comparison.
            let sq = |x: &crate::facerender::Raster| -> f64 {
                (0..64)
                    .flat_map(|y| (0..64).map(move |xx| (xx, y)))
                    .map(|(xx, y)| (x.get(xx, y) as f64 - r.get(xx, y) as f64).powi(2))
                    .sum()
            };
            let want = if sq(&r) < sq(&ro) { Preference::B } else { Preference::A };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let v = ActionVocabulary::generic(4, 2, 5).unwrap();
        let (_, recs) = toy_records(9, 10);
        let out = train(&recs, &v, &DiscriminatorConfig { steps: 10, ..Default::default() }).unwrap();
        save_discriminator(&path, &out.params, &v, Header::untracked(DISCRIMINATOR_SCHEMA)).unwrap();
        assert_eq!(load_discriminator(&path, &v).unwrap().1, out.params);
        let other = ActionVocabulary::generic(4, 1, 5).unwrap();
        assert!(matches!(load_discriminator(&path, &other), Err(Error::VocabMismatch { .. })));
    }
}
