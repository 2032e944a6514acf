//! One function per subcommand.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use facepref::artifact::{read_json, write_jsonl, write_text};
use facepref::coeffs::{ActionVocabulary, Region};
use facepref::config::Config;
use facepref::discriminator::{
    load_discriminator, predict_passes, predict_symmetric, reference_coefficients, save_discriminator,
    DiscriminatorParams, DISCRIMINATOR_SCHEMA,
};
use facepref::dpo::{
    collect_triplets, eval_win_rate, iterate_observed, optimize, AnnotatorMode, EvalContext, History, Judge,
    RoundReport,
};
use facepref::facerender::{render_raster, render_raster_highlight, render_region_highlight, render_svg};
use facepref::metrics::{self, ConfusionMatrix};
use facepref::pipeline::{self, LabeledBatch, Manifest};
use facepref::policy::{greedy_decode, load_policy, save_policy, PolicyParams, ReferenceParams, POLICY_SCHEMA};
use facepref::prefdata::{decide_all, ComparisonTask, Decision, Preference, VOTES_SCHEMA};
use facepref::synthworld::{Sample, Split, SAMPLES_SCHEMA};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::store::{
    load_split, read_items, read_votes, require, write_items, write_report, write_split, Layout, Run,
    JUDGEMENTS_SCHEMA, ROUNDS_SCHEMA,
};

pub struct Ctx {
    pub cfg: Config,
    pub vocab: ActionVocabulary,
    pub layout: Layout,
}

/// Prints the one-line summary every successful stage ends with.
fn emit(manifest: &Manifest, summary: Value) {
    let line = json!({
        "stage": manifest.stage,
        "manifest": manifest.hash(),
        "summary": summary,
    });
    println!("{line}");
}

fn manifest_in(layout: &Layout, stage: &str) -> PathBuf {
    layout.stage_dir(stage).join("manifest.json")
}

fn or_default(layout: &Layout, given: Option<&Path>, default: PathBuf) -> PathBuf {
    given.map_or(default, |p| layout.resolve(p))
}

fn flat_tasks(batch_items: &[facepref::dpo::RoundItem]) -> Vec<ComparisonTask> {
    batch_items.iter().flat_map(|i| i.tasks.iter().cloned()).collect()
}

fn decision_counts(decisions: &HashMap<String, Decision>) -> Value {
    let count = |d: Decision| decisions.values().filter(|&&x| x == d).count();
    json!({
        "a": count(Decision::A),
        "b": count(Decision::B),
        "similar": count(Decision::Similar),
        "inconsistent": count(Decision::Inconsistent),
    })
}

pub fn gen_data(ctx: &Ctx) -> CliResult<()> {
    let l = &ctx.layout;
    let mut run = Run::begin(l, "gen-data", &ctx.cfg, &ctx.vocab, &[], l.world_manifest())?;
    let world = pipeline::generate_world(&ctx.cfg, &ctx.vocab)?;
    let mut counts = BTreeMap::new();
    for split in Split::ALL {
        let path = run.output(&l.world(split));
        write_split(&path, &run.header(SAMPLES_SCHEMA), world.get(split), &ctx.vocab)?;
        counts.insert(split.name(), world.get(split).len());
    }
    let m = run.finish(l)?;
    emit(&m, json!(counts));
    Ok(())
}

pub fn sft(ctx: &Ctx) -> CliResult<()> {
    let l = &ctx.layout;
    let input = l.world(Split::Sft);
    let mut run = Run::begin(l, "sft", &ctx.cfg, &ctx.vocab, &[&input], manifest_in(l, "sft"))?;
    let samples = load_split(l, Split::Sft, &ctx.vocab)?;
    let out = pipeline::run_sft(&ctx.cfg, &ctx.vocab, &samples)?;
    save_policy(&run.output(&l.sft_policy()), &out.params, &ctx.vocab, run.header(POLICY_SCHEMA))?;
    let summary = json!({
        "samples": samples.len(),
        "steps": out.loss_curve.len(),
        "initial_loss": out.initial_loss,
        "final_loss": out.final_loss,
    });
    write_report(&run.output(&l.stage_dir("sft").join("report.json")), &run, &summary)?;
    let m = run.finish(l)?;
    emit(&m, summary);
    Ok(())
}

pub struct RolloutArgs<'a> {
    pub policy: Option<&'a Path>,
    pub round: u32,
    pub limit: Option<usize>,
    pub all: bool,
}

pub fn rollout(ctx: &Ctx, args: RolloutArgs<'_>) -> CliResult<()> {
    let l = &ctx.layout;
    let policy_path = or_default(l, args.policy, l.sft_policy());
    let split_path = l.world(Split::Rollout);
    let mut run = Run::begin(
        l,
        "rollout",
        &ctx.cfg,
        &ctx.vocab,
        &[&policy_path, &split_path],
        manifest_in(l, "rollout"),
    )?;
    let budget = (!args.all).then(|| args.limit.unwrap_or(ctx.cfg.discriminator.label_budget));
    run.param("round", args.round)
        .param("limit", budget.map_or_else(|| "all".to_string(), |b| b.to_string()));
    let samples = load_split(l, Split::Rollout, &ctx.vocab)?;
    let (_, params) = load_policy(&policy_path, &ctx.vocab)?;
    let items = pipeline::labeling_items(&ctx.cfg, &ctx.vocab, &params, &samples, args.round, budget)?;
    let items_path = run.output(&l.rollout_items());
    let tasks_path = run.output(&l.rollout_tasks());
    write_items(&items_path, &tasks_path, &run, &items, &samples, &ctx.vocab)?;
    let m = run.finish(l)?;
    emit(&m, json!({ "samples": items.len(), "tasks": flat_tasks(&items).len(), "round": args.round }));
    Ok(())
}

pub fn annotate(ctx: &Ctx) -> CliResult<()> {
    let l = &ctx.layout;
    let (items_path, tasks_path, split_path) = (l.rollout_items(), l.rollout_tasks(), l.world(Split::Rollout));
    let mut run = Run::begin(
        l,
        "annotate",
        &ctx.cfg,
        &ctx.vocab,
        &[&items_path, &tasks_path, &split_path],
        manifest_in(l, "annotate"),
    )?;
    let samples = load_split(l, Split::Rollout, &ctx.vocab)?;
    let items = read_items(&items_path, &tasks_path, &samples, &ctx.vocab)?;
    let batch = pipeline::oracle_label(&ctx.cfg, &ctx.vocab, items, &samples)?;
    write_jsonl(&run.output(&l.oracle_votes()), &run.header(VOTES_SCHEMA), &batch.votes)?;
    let ratio = pipeline::batch_vote_ratio(&batch)?;
    let (hard_consistency, hard_tasks) =
        pipeline::oracle_hard_self_consistency(&batch, ctx.cfg.discriminator.easy_fraction)?;
    let summary = json!({
        "tasks": batch.decisions.len(),
        "votes": batch.votes.len(),
        "vote_ratio": ratio,
        "vote_ratio_display": ratio.to_string(),
        "decisions": decision_counts(&batch.decisions),
        "hard_self_consistency": hard_consistency,
        "hard_tasks": hard_tasks,
    });
    write_report(&run.output(&l.stage_dir("annotate").join("report.json")), &run, &summary)?;
    let m = run.finish(l)?;
    emit(&m, summary);
    Ok(())
}

pub fn train_disc(ctx: &Ctx, votes: Option<&Path>, annotators: Option<usize>) -> CliResult<()> {
    let l = &ctx.layout;
    let votes_path = or_default(l, votes, l.oracle_votes());
    let annotators = annotators.unwrap_or(ctx.cfg.oracle.annotators);
    let (items_path, tasks_path, split_path) = (l.rollout_items(), l.rollout_tasks(), l.world(Split::Rollout));
    let mut run = Run::begin(
        l,
        "train-disc",
        &ctx.cfg,
        &ctx.vocab,
        &[&items_path, &tasks_path, &votes_path, &split_path],
        manifest_in(l, "discriminator"),
    )?;
    run.param("annotators", annotators);
    let samples = load_split(l, Split::Rollout, &ctx.vocab)?;
    let items = read_items(&items_path, &tasks_path, &samples, &ctx.vocab)?;
    let votes = read_votes(&votes_path)?;
    let decisions = decide_all(&flat_tasks(&items), &votes, annotators)?;
    let batch = LabeledBatch { items, votes, decisions };
    let out = pipeline::train_discriminator(&ctx.cfg, &ctx.vocab, &batch, &samples)?;
    save_discriminator(
        &run.output(&l.discriminator()),
        &out.params,
        &ctx.vocab,
        run.header(DISCRIMINATOR_SCHEMA),
    )?;
    let summary = json!({
        "records": batch.records(&samples).len(),
        "decisions": decision_counts(&batch.decisions),
        "final_loss": out.final_loss,
        "train_accuracy": out.train_accuracy,
        "single_class": out.single_class,
    });
    write_report(&run.output(&l.stage_dir("discriminator").join("report.json")), &run, &summary)?;
    let m = run.finish(l)?;
    emit(&m, summary);
    Ok(())
}

pub struct DpoArgs<'a> {
    pub mode: Option<AnnotatorMode>,
    pub rounds: Option<usize>,
    pub threshold: Option<f64>,
    pub policy: Option<&'a Path>,
    pub votes: Option<&'a Path>,
    pub annotators: Option<usize>,
}

pub fn mode_name(mode: AnnotatorMode) -> &'static str {
    match mode {
        AnnotatorMode::Oracle => "oracle",
        AnnotatorMode::Discriminator => "discriminator",
        AnnotatorMode::Human => "human",
    }
}

fn load_optional_disc(path: &Path, vocab: &ActionVocabulary) -> CliResult<Option<DiscriminatorParams>> {
    if path.exists() {
        Ok(Some(load_discriminator(path, vocab)?.1))
    } else {
        Ok(None)
    }
}

pub fn dpo(ctx: &Ctx, args: DpoArgs<'_>) -> CliResult<()> {
    let l = &ctx.layout;
    let mut dcfg = ctx.cfg.dpo.clone();
    dcfg.mode = args.mode.unwrap_or(dcfg.mode);
    if let Some(r) = args.rounds {
        dcfg.max_rounds = r;
        // An explicit round count runs that many rounds unless a threshold is also given.
        dcfg.win_threshold = 1.0;
    }
    if let Some(t) = args.threshold {
        dcfg.win_threshold = t;
    }
    dcfg.validate()?;
    let mode = mode_name(dcfg.mode);
    let dir = l.stage_dir("dpo").join(mode);

    let start_path = or_default(l, args.policy, l.sft_policy());
    let reference_path = l.sft_policy();
    let disc_path = l.discriminator();
    let (rollout_path, eval_path) = (l.world(Split::Rollout), l.world(Split::Eval));
    let human_votes = or_default(l, args.votes, l.human_votes());
    let (items_path, tasks_path) = (l.rollout_items(), l.rollout_tasks());

    let mut inputs: Vec<&Path> = vec![&start_path, &rollout_path, &eval_path];
    if reference_path != start_path {
        inputs.push(&reference_path);
    }
    match dcfg.mode {
        AnnotatorMode::Discriminator => require(&disc_path)?,
        AnnotatorMode::Human => inputs.extend([items_path.as_path(), tasks_path.as_path(), human_votes.as_path()]),
        AnnotatorMode::Oracle => {}
    }
    if disc_path.exists() {
        inputs.push(&disc_path);
    }
    let mut run = Run::begin(l, "dpo", &ctx.cfg, &ctx.vocab, &inputs, dir.join("manifest.json"))?;
    run.param("mode", mode)
        .param("max_rounds", dcfg.max_rounds)
        .param("win_threshold", dcfg.win_threshold);
    if dcfg.mode == AnnotatorMode::Human {
        run.param("annotators", args.annotators.unwrap_or(ctx.cfg.server.annotators_per_task));
    }

    let rollout = load_split(l, Split::Rollout, &ctx.vocab)?;
    let eval = load_split(l, Split::Eval, &ctx.vocab)?;
    let (_, start) = load_policy(&start_path, &ctx.vocab)?;
    let (_, reference) = load_policy(&reference_path, &ctx.vocab)?;
    let reference = ReferenceParams::snapshot(&reference);
    let disc = load_optional_disc(&disc_path, &ctx.vocab)?;
    let eval_ctx = EvalContext {
        samples: &eval,
        oracle: &ctx.cfg.oracle,
        discriminator: disc.as_ref(),
    };
    let (base_oracle, base_disc) = eval_ctx.evaluate(&start, &ctx.vocab)?;

    let history = match dcfg.mode {
        AnnotatorMode::Human => {
            let annotators = args.annotators.unwrap_or(ctx.cfg.server.annotators_per_task);
            let (policy, report) = human_round(
                ctx,
                &start,
                &reference,
                &rollout,
                (&items_path, &tasks_path, &human_votes),
                annotators,
                &dcfg,
                &eval_ctx,
            )?;
            let path = run.output(&dir.join(format!("policy_round{}.json", report.round)));
            save_policy(&path, &policy, &ctx.vocab, run.header(POLICY_SCHEMA))?;
            History {
                reports: vec![report],
                policy,
                chosen: Vec::new(),
            }
        }
        other => {
            let judge = match other {
                AnnotatorMode::Oracle => Judge::Oracle(&ctx.cfg.oracle),
                _ => Judge::Discriminator(disc.as_ref().expect("checked above")),
            };
            let mut checkpoints = Vec::new();
            let header = run.header(POLICY_SCHEMA);
            let history = iterate_observed(
                &start,
                &reference,
                &rollout,
                judge,
                &dcfg,
                &ctx.vocab,
                &eval_ctx,
                |report, policy| {
                    let path = dir.join(format!("policy_round{}.json", report.round));
                    save_policy(&path, policy, &ctx.vocab, header.clone())?;
                    checkpoints.push(path);
                    Ok(())
                },
            )?;
            for p in &checkpoints {
                run.output(p);
            }
            history
        }
    };

    save_policy(&run.output(&dir.join("policy.json")), &history.policy, &ctx.vocab, run.header(POLICY_SCHEMA))?;
    write_jsonl(&run.output(&dir.join("rounds.jsonl")), &run.header(ROUNDS_SCHEMA), &history.reports)?;
    let summary = json!({
        "mode": mode,
        "max_rounds": dcfg.max_rounds,
        "win_threshold": dcfg.win_threshold,
        "baseline": { "oracle_win_rate": base_oracle, "disc_win_rate": base_disc },
        "rounds": history.reports,
        "stopped_early": history.reports.len() < dcfg.max_rounds && dcfg.mode != AnnotatorMode::Human,
    });
    write_report(&run.output(&dir.join("summary.json")), &run, &summary)?;
    let m = run.finish(l)?;
    let curve: Vec<f64> = std::iter::once(base_oracle)
        .chain(history.reports.iter().map(|r| r.oracle_win_rate))
        .collect();
    emit(&m, json!({ "mode": mode, "oracle_win_rate_by_round": curve }));
    Ok(())
}

/// One DPO round on decisions filtered from a recorded vote log.
#[allow(clippy::too_many_arguments)]
fn human_round(
    ctx: &Ctx,
    start: &PolicyParams,
    reference: &ReferenceParams,
    rollout: &[Sample],
    (items_path, tasks_path, votes_path): (&Path, &Path, &Path),
    annotators: usize,
    dcfg: &facepref::dpo::DpoConfig,
    eval_ctx: &EvalContext<'_>,
) -> CliResult<(PolicyParams, RoundReport)> {
    let clock = Instant::now();
    let items = read_items(items_path, tasks_path, rollout, &ctx.vocab)?;
    let votes = read_votes(votes_path)?;
    let decisions = decide_all(&flat_tasks(&items), &votes, annotators)?;
    if decisions.is_empty() {
        return Err(facepref::Error::EmptyData(format!("no task in {} has a complete vote set", votes_path.display())).into());
    }
    let round = items
        .iter()
        .flat_map(|i| i.tasks.first())
        .map(|t| t.round_index)
        .next()
        .unwrap_or(1)
        .max(1);
    let (triplets, counts) = collect_triplets(&items, rollout, Judge::Recorded(&decisions), &ctx.vocab)?;
    let plain: Vec<_> = triplets.into_iter().map(|(_, t)| t).collect();
    let (policy, mean_loss) = optimize(start, reference, &plain, dcfg, round)?;
    let (oracle_win_rate, disc_win_rate) = eval_ctx.evaluate(&policy, &ctx.vocab)?;
    let report = RoundReport {
        round,
        mean_loss,
        oracle_win_rate,
        disc_win_rate,
        triplets_used: counts.used,
        similar_regions: counts.similar_regions,
        inconsistent_regions: counts.inconsistent_regions,
        skipped_samples: counts.skipped,
        divergence: disc_win_rate.map(|d| d - oracle_win_rate),
        wall_time: clock.elapsed(),
    };
    Ok((policy, report))
}

/// Default report name for a policy file: its directory, plus the file stem
/// unless it is the stage's final `policy.json`.
fn policy_tag(path: &Path) -> String {
    let dir = path
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "policy".to_string(), |n| n.to_string_lossy().into_owned());
    match path.file_stem().map(|s| s.to_string_lossy()) {
        Some(stem) if stem != "policy" => format!("{dir}-{stem}"),
        _ => dir,
    }
}

#[derive(Serialize)]
struct JudgeSummary {
    macro_f1: metrics::MacroF1,
    macro_f1_display: String,
    accuracy_2class: Option<f64>,
    accuracy_3class: f64,
    self_consistency: f64,
    confusion: ConfusionMatrix,
}

impl From<&pipeline::JudgeScores> for JudgeSummary {
    fn from(s: &pipeline::JudgeScores) -> Self {
        Self {
            macro_f1: s.macro_f1,
            macro_f1_display: s.macro_f1.to_string(),
            accuracy_2class: s.accuracy_2class,
            accuracy_3class: s.accuracy_3class,
            self_consistency: s.self_consistency,
            confusion: s.confusion,
        }
    }
}

fn split_summary(s: &pipeline::SplitScores) -> Value {
    json!({
        "pairs": s.pairs,
        "discriminator": JudgeSummary::from(&s.discriminator),
        "embed": JudgeSummary::from(&s.embed),
    })
}

pub fn evaluate(ctx: &Ctx, policy: Option<&Path>, tag: Option<&str>, discriminator: Option<&Path>) -> CliResult<()> {
    let l = &ctx.layout;
    let policy_path = or_default(l, policy, l.sft_policy());
    let tag = tag.map_or_else(|| policy_tag(&policy_path), str::to_string);
    let disc_path = or_default(l, discriminator, l.discriminator());
    if discriminator.is_some() {
        require(&disc_path)?;
    }
    let eval_path = l.world(Split::Eval);
    let mut inputs: Vec<&Path> = vec![&policy_path, &eval_path];
    if disc_path.exists() {
        inputs.push(&disc_path);
    }
    let dir = l.stage_dir("evaluate").join(&tag);
    let mut run = Run::begin(l, "evaluate", &ctx.cfg, &ctx.vocab, &inputs, dir.join("manifest.json"))?;
    run.param("against", "pseudo").param("tag", &tag);
    let eval = load_split(l, Split::Eval, &ctx.vocab)?;
    let (_, params) = load_policy(&policy_path, &ctx.vocab)?;
    let disc = load_optional_disc(&disc_path, &ctx.vocab)?;

    let oracle = eval_win_rate(&params, &eval, Judge::Oracle(&ctx.cfg.oracle), &ctx.vocab)?;
    let by_disc = match &disc {
        Some(d) => Some(eval_win_rate(&params, &eval, Judge::Discriminator(d), &ctx.vocab)?),
        None => None,
    };
    let held = pipeline::oracle_labeled_batch(&ctx.cfg, &ctx.vocab, &params, &eval, 0, None)?;
    let ratio = pipeline::batch_vote_ratio(&held)?;
    let (hard_consistency, hard_tasks) =
        pipeline::oracle_hard_self_consistency(&held, ctx.cfg.discriminator.easy_fraction)?;
    let benchmark = match &disc {
        Some(d) => {
            let b = pipeline::benchmark_discriminator(
                d,
                held.records(&eval),
                &ctx.vocab,
                &ctx.cfg.render,
                ctx.cfg.discriminator.easy_fraction,
            )?;
            Some(json!({ "easy": split_summary(&b.easy), "hard": split_summary(&b.hard) }))
        }
        None => None,
    };
    let summary = json!({
        "policy": l.rel(&policy_path),
        "against": "pseudo",
        "samples": eval.len(),
        "oracle": oracle,
        "discriminator": by_disc,
        "panel": {
            "vote_ratio": ratio,
            "vote_ratio_display": ratio.to_string(),
            "decisions": decision_counts(&held.decisions),
            "hard_self_consistency": hard_consistency,
            "hard_tasks": hard_tasks,
        },
        "discriminator_benchmark": benchmark,
    });
    write_report(&run.output(&dir.join("report.json")), &run, &summary)?;
    let m = run.finish(l)?;
    emit(
        &m,
        json!({ "tag": tag, "oracle_win_rate": oracle.win_rate, "disc_win_rate": by_disc.map(|d| d.win_rate) }),
    );
    Ok(())
}

fn all_samples(l: &Layout, vocab: &ActionVocabulary) -> CliResult<Vec<Sample>> {
    let mut out = Vec::new();
    for split in Split::ALL {
        out.extend(load_split(l, split, vocab)?);
    }
    Ok(out)
}

fn world_inputs(l: &Layout) -> Vec<PathBuf> {
    Split::ALL.into_iter().map(|s| l.world(s)).collect()
}

#[derive(Serialize)]
struct Judgement {
    task_id: String,
    prediction: Option<Preference>,
    passes: (Preference, Preference),
}

pub fn judge(ctx: &Ctx, tasks: Option<&Path>, votes: Option<&Path>, annotators: Option<usize>) -> CliResult<()> {
    let l = &ctx.layout;
    let tasks_path = or_default(l, tasks, l.rollout_tasks());
    let votes_path = or_default(l, votes, l.oracle_votes());
    if votes.is_some() {
        require(&votes_path)?;
    }
    let disc_path = l.discriminator();
    let world = world_inputs(l);
    let mut inputs: Vec<&Path> = vec![&disc_path, &tasks_path];
    inputs.extend(world.iter().map(PathBuf::as_path));
    if votes_path.exists() {
        inputs.push(&votes_path);
    }
    let dir = l.stage_dir("judge");
    let mut run = Run::begin(l, "judge", &ctx.cfg, &ctx.vocab, &inputs, dir.join("manifest.json"))?;
    let annotators = annotators.unwrap_or(ctx.cfg.oracle.annotators);
    run.param("annotators", annotators);
    let (_, disc) = load_discriminator(&disc_path, &ctx.vocab)?;
    let (_, task_list): (_, Vec<ComparisonTask>) =
        facepref::artifact::read_jsonl(&tasks_path, facepref::prefdata::TASKS_SCHEMA)?;
    let samples = all_samples(l, &ctx.vocab)?;
    let obs: HashMap<&str, &[f64]> = samples.iter().map(|s| (s.id.as_str(), s.observation.as_slice())).collect();
    let mut judgements = Vec::with_capacity(task_list.len());
    for t in &task_list {
        let o = obs
            .get(t.sample_id.as_str())
            .ok_or_else(|| facepref::Error::Unknown(format!("sample {}", t.sample_id)))?;
        judgements.push(Judgement {
            task_id: t.task_id.clone(),
            prediction: predict_symmetric(&disc, t, o, &ctx.vocab)?,
            passes: predict_passes(&disc, t, o, &ctx.vocab)?,
        });
    }
    write_jsonl(&run.output(&dir.join("predictions.jsonl")), &run.header(JUDGEMENTS_SCHEMA), &judgements)?;
    let abstained = judgements.iter().filter(|j| j.prediction.is_none()).count();
    let mut summary = json!({ "tasks": judgements.len(), "abstained": abstained });
    if votes_path.exists() {
        let votes = read_votes(&votes_path)?;
        let decisions = decide_all(&task_list, &votes, annotators)?;
        let (mut preds, mut labels, mut passes) = (Vec::new(), Vec::new(), Vec::new());
        for j in &judgements {
            if let Some(label) = decisions.get(&j.task_id).and_then(|d| d.preference()) {
                preds.push(j.prediction);
                labels.push(label);
                passes.push(j.passes);
            }
        }
        if !labels.is_empty() {
            let confusion = ConfusionMatrix::from_predictions(&preds, &labels)?;
            let f1 = confusion.macro_f1();
            summary["against_votes"] = json!({
                "labeled": labels.len(),
                "macro_f1": f1,
                "macro_f1_display": f1.to_string(),
                "accuracy_2class": confusion.accuracy_2class().ok(),
                "accuracy_3class": confusion.accuracy_3class()?,
                "self_consistency": metrics::self_consistency(&passes)?,
                "confusion": confusion,
            });
        }
    }
    write_report(&run.output(&dir.join("report.json")), &run, &summary)?;
    let m = run.finish(l)?;
    emit(&m, summary);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Which {
    Gt,
    Pseudo,
    Policy,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Svg,
    Pgm,
}

pub struct RenderArgs<'a> {
    pub sample: &'a str,
    pub which: Which,
    pub region: Option<Region>,
    pub format: Format,
    pub policy: Option<&'a Path>,
    pub size: usize,
}

pub fn render(ctx: &Ctx, args: RenderArgs<'_>) -> CliResult<()> {
    let l = &ctx.layout;
    let policy_path = or_default(l, args.policy, l.sft_policy());
    let world = world_inputs(l);
    let mut inputs: Vec<&Path> = world.iter().map(PathBuf::as_path).collect();
    if args.which == Which::Policy {
        inputs.push(&policy_path);
    }
    let which = format!("{:?}", args.which).to_lowercase();
    let ext = match args.format {
        Format::Svg => "svg",
        Format::Pgm => "pgm",
    };
    let stem = match args.region {
        Some(r) => format!("{}-{which}-{r}", args.sample),
        None => format!("{}-{which}", args.sample),
    };
    let dir = l.stage_dir("render");
    let mut run = Run::begin(l, "render", &ctx.cfg, &ctx.vocab, &inputs, dir.join(format!("{stem}.manifest.json")))?;
    run.param("sample", args.sample).param("which", &which).param("format", ext);
    if let Some(r) = args.region {
        run.param("region", r);
    }
    if args.format == Format::Pgm {
        run.param("size", args.size);
    }
    let samples = all_samples(l, &ctx.vocab)?;
    let sample = samples
        .iter()
        .find(|s| s.id == args.sample)
        .ok_or_else(|| facepref::Error::Unknown(format!("sample {}", args.sample)))?;
    let coeffs = match args.which {
        Which::Gt => sample.ground_truth.clone(),
        Which::Pseudo => sample.pseudo_label.clone(),
        Which::Reference => reference_coefficients(&sample.observation, ctx.vocab.bins())?,
        Which::Policy => greedy_decode(&load_policy(&policy_path, &ctx.vocab)?.1, &sample.observation)?,
    };
    let spec = &ctx.cfg.render;
    let bytes = match (args.format, args.region) {
        (Format::Svg, Some(r)) => render_region_highlight(&coeffs, spec, r)?.into_bytes(),
        (Format::Svg, None) => render_svg(&coeffs, spec)?.into_bytes(),
        (Format::Pgm, Some(r)) => render_raster_highlight(&coeffs, spec, args.size, r)?.to_pgm(),
        (Format::Pgm, None) => render_raster(&coeffs, spec, args.size)?.to_pgm(),
    };
    let path = run.output(&dir.join(format!("{stem}.{ext}")));
    write_text(&path, &bytes)?;
    let m = run.finish(l)?;
    emit(&m, json!({ "file": l.rel(&path) }));
    Ok(())
}

pub struct ServeArgs<'a> {
    pub tasks: Option<&'a Path>,
    pub votes: Option<&'a Path>,
    pub bind: Option<&'a str>,
    pub port: Option<u16>,
    pub static_dir: Option<&'a Path>,
}

pub fn serve(ctx: &Ctx, args: ServeArgs<'_>) -> CliResult<()> {
    let l = &ctx.layout;
    let tasks_path = or_default(l, args.tasks, l.rollout_tasks());
    let votes_path = or_default(l, args.votes, l.human_votes());
    let static_dir = or_default(l, args.static_dir, l.workspace.join("ui"));
    let world = world_inputs(l);
    let mut inputs: Vec<&Path> = vec![&tasks_path];
    inputs.extend(world.iter().map(PathBuf::as_path));
    let mut run = Run::begin(l, "serve", &ctx.cfg, &ctx.vocab, &inputs, l.stage_dir("serve").join("manifest.json"))?;
    run.param("votes", l.rel(&votes_path));
    let (_, tasks): (_, Vec<ComparisonTask>) =
        facepref::artifact::read_jsonl(&tasks_path, facepref::prefdata::TASKS_SCHEMA)?;
    let samples = all_samples(l, &ctx.vocab)?;
    let catalog = facepref_server::Catalog {
        vocab: ctx.vocab.clone(),
        observations: samples.into_iter().map(|s| (s.id, s.observation)).collect(),
    };
    let options = facepref_server::ServerOptions {
        lease: Duration::from_secs(ctx.cfg.server.lease_secs),
        annotators_per_task: ctx.cfg.server.annotators_per_task,
        render: ctx.cfg.render.clone(),
    };
    let state = facepref_server::AppState::open(tasks, catalog, options, &votes_path, &run.header(VOTES_SCHEMA))?;
    let m = run.finish(l)?;
    let app = facepref_server::router(Arc::new(state), &static_dir);
    let bind = args.bind.unwrap_or(&ctx.cfg.server.bind).to_string();
    let port = args.port.unwrap_or(ctx.cfg.server.port);
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::Serve)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((bind.as_str(), port))
            .await
            .map_err(CliError::Serve)?;
        let addr = listener.local_addr().map_err(CliError::Serve)?;
        emit(&m, json!({ "listening": addr.to_string(), "votes": l.rel(&votes_path) }));
        facepref_server::serve(listener, app).await.map_err(CliError::Serve)
    })
}

/// Report files written by the other stages, found under the output directory.
fn discover_reports(dir: &Path, skip: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    let Ok(entries) = std::fs::read_dir(dir) else {
        return Ok(());
    };
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            if p != skip {
                discover_reports(&p, skip, found)?;
            }
        } else if matches!(p.file_name().and_then(|n| n.to_str()), Some("report.json" | "summary.json")) {
            found.push(p);
        }
    }
    Ok(())
}

fn fmt_rate(v: &Value) -> String {
    v.as_f64().map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn markdown(sections: &BTreeMap<String, Value>, configs: &BTreeSet<String>) -> String {
    let mut md = String::from("# Run report\n\n");
    md.push_str(&format!(
        "Configurations: {}\n\n",
        configs.iter().cloned().collect::<Vec<_>>().join(", ")
    ));
    for (name, v) in sections {
        if let Some(rounds) = v.get("rounds").and_then(Value::as_array) {
            md.push_str(&format!("## {name}\n\n| round | oracle win rate | disc win rate | triplets |\n|---|---|---|---|\n"));
            let base = &v["baseline"];
            md.push_str(&format!(
                "| 0 | {} | {} | - |\n",
                fmt_rate(&base["oracle_win_rate"]),
                fmt_rate(&base["disc_win_rate"])
            ));
            for r in rounds {
                md.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    r["round"],
                    fmt_rate(&r["oracle_win_rate"]),
                    fmt_rate(&r["disc_win_rate"]),
                    r["triplets_used"]
                ));
            }
            md.push('\n');
        } else if let Some(oracle) = v.get("oracle") {
            md.push_str(&format!(
                "## {name}\n\nOracle win rate vs pseudo labels: {}\n",
                fmt_rate(&oracle["win_rate"])
            ));
            if let Some(d) = v.get("discriminator").filter(|d| !d.is_null()) {
                md.push_str(&format!("Discriminator win rate: {}\n", fmt_rate(&d["win_rate"])));
            }
            if let Some(b) = v.get("discriminator_benchmark").filter(|b| !b.is_null()) {
                for split in ["easy", "hard"] {
                    let s = &b[split];
                    md.push_str(&format!(
                        "{split} split ({} pairs): discriminator {}, embed {}\n",
                        s["pairs"],
                        s["discriminator"]["macro_f1_display"].as_str().unwrap_or("-"),
                        s["embed"]["macro_f1_display"].as_str().unwrap_or("-"),
                    ));
                }
            }
            md.push('\n');
        }
    }
    md
}

pub fn report(ctx: &Ctx, inputs: &[PathBuf], force: bool) -> CliResult<()> {
    let l = &ctx.layout;
    let dir = l.stage_dir("report");
    let mut files: Vec<PathBuf> = inputs.iter().map(|p| l.resolve(p)).collect();
    if files.is_empty() {
        discover_reports(&l.out, &dir, &mut files)?;
    }
    if files.is_empty() {
        return Err(CliError::MissingInput(l.out.join("*/report.json")));
    }
    let refs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    let mut run = Run::begin(l, "report", &ctx.cfg, &ctx.vocab, &refs, dir.join("manifest.json"))?;
    run.param("force", force);
    let mut sections = BTreeMap::new();
    let mut configs = BTreeSet::new();
    let mut by_input = BTreeMap::new();
    for f in &files {
        let v: Value = read_json(f)?;
        let config = v["header"]["config"].as_str().ok_or_else(|| facepref::Error::Schema {
            path: f.clone(),
            reason: "no header".into(),
        })?;
        configs.insert(config.to_string());
        by_input.insert(l.rel(f), config.to_string());
        sections.insert(l.rel(f), v);
    }
    if configs.len() > 1 && !force {
        let detail = by_input
            .iter()
            .map(|(f, c)| format!("{f}={c}"))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(CliError::MixedManifests(detail));
    }
    write_text(&run.output(&dir.join("summary.md")), markdown(&sections, &configs).as_bytes())?;
    let summary = json!({ "inputs": by_input, "mixed": configs.len() > 1 });
    write_report(
        &run.output(&dir.join("summary.json")),
        &run,
        json!({ "inputs": by_input, "mixed": configs.len() > 1, "sections": sections }),
    )?;
    let m = run.finish(l)?;
    emit(&m, summary);
    Ok(())
}
