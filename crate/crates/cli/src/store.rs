//! Artifact locations under the output directory and the manifest written by every stage.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use facepref::artifact::{read_json, read_jsonl, sha256_file, write_json, write_jsonl, Header};
use facepref::coeffs::ActionVocabulary;
use facepref::config::Config;
use facepref::dpo::RoundItem;
use facepref::pipeline::Manifest;
use facepref::prefdata::{ComparisonTask, Vote, TASKS_SCHEMA, VOTES_SCHEMA};
use facepref::synthworld::{Sample, SampleRecord, Split, SAMPLES_SCHEMA};
use facepref::CoefficientSet;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const ITEMS_SCHEMA: &str = "facepref.rollout-items";
pub const ROUNDS_SCHEMA: &str = "facepref.rounds";
pub const JUDGEMENTS_SCHEMA: &str = "facepref.judgements";
pub const REPORT_SCHEMA: &str = "facepref.report";

/// Resolved workspace and output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub workspace: PathBuf,
    pub out: PathBuf,
}

impl Layout {
    pub fn new(workspace: &Path, out: &Path) -> Self {
        Self {
            workspace: workspace.to_path_buf(),
            out: workspace.join(out),
        }
    }

    /// A user-supplied path, taken relative to the workspace.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.workspace.join(p)
    }

    pub fn world(&self, split: Split) -> PathBuf {
        self.out.join("world").join(format!("{}.jsonl", split.name()))
    }

    pub fn world_manifest(&self) -> PathBuf {
        self.out.join("world/manifest.json")
    }

    pub fn sft_policy(&self) -> PathBuf {
        self.out.join("sft/policy.json")
    }

    pub fn rollout_tasks(&self) -> PathBuf {
        self.out.join("rollout/tasks.jsonl")
    }

    pub fn rollout_items(&self) -> PathBuf {
        self.out.join("rollout/items.jsonl")
    }

    pub fn oracle_votes(&self) -> PathBuf {
        self.out.join("annotate/votes.jsonl")
    }

    pub fn human_votes(&self) -> PathBuf {
        self.out.join("serve/votes.jsonl")
    }

    pub fn discriminator(&self) -> PathBuf {
        self.out.join("discriminator/discriminator.json")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Path relative to the output directory, for manifests and reports.
    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.out)
            .or_else(|_| p.strip_prefix(&self.workspace))
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

pub fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// One stage execution: hashes its inputs up front, stamps its outputs
/// with the manifest hash, and writes `manifest.json` when finished.
pub struct Run {
    pub manifest: Manifest,
    config_hash: String,
    manifest_path: PathBuf,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn begin(
        layout: &Layout,
        stage: &str,
        cfg: &Config,
        vocab: &ActionVocabulary,
        inputs: &[&Path],
        manifest_path: PathBuf,
    ) -> CliResult<Self> {
        let mut hashes = BTreeMap::new();
        hashes.insert("vocab".to_string(), vocab.hash());
        for p in inputs {
            require(p)?;
            hashes.insert(layout.rel(p), sha256_file(p)?);
        }
        Ok(Self {
            manifest: Manifest::new(stage, cfg, hashes),
            config_hash: cfg.hash(),
            manifest_path,
            outputs: Vec::new(),
        })
    }

    /// Records a stage argument; call before any output is written.
    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.manifest.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn header(&self, schema: &str) -> Header {
        Header::new(schema, &self.manifest.hash(), &self.config_hash)
    }

    /// Registers a file written by this run.
    pub fn output(&mut self, path: &Path) -> PathBuf {
        self.outputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    pub fn finish(mut self, layout: &Layout) -> CliResult<Manifest> {
        for p in &self.outputs {
            self.manifest.outputs.insert(layout.rel(p), sha256_file(p)?);
        }
        write_json(&self.manifest_path, &self.manifest)?;
        Ok(self.manifest)
    }
}

/// Loads one world split, checking it was generated for `vocab`.
pub fn load_split(layout: &Layout, split: Split, vocab: &ActionVocabulary) -> CliResult<Vec<Sample>> {
    let manifest_path = layout.world_manifest();
    require(&manifest_path)?;
    let manifest: Manifest = read_json(&manifest_path)?;
    if let Some(found) = manifest.inputs.get("vocab") {
        if *found != vocab.hash() {
            return Err(facepref::Error::VocabMismatch {
                expected: vocab.hash(),
                found: found.clone(),
            }
            .into());
        }
    }
    let path = layout.world(split);
    require(&path)?;
    let (_, records): (_, Vec<SampleRecord>) = read_jsonl(&path, SAMPLES_SCHEMA)?;
    Ok(records
        .into_iter()
        .map(|r| Sample::from_record(r, vocab))
        .collect::<facepref::Result<_>>()?)
}

pub fn write_split(path: &Path, header: &Header, samples: &[Sample], vocab: &ActionVocabulary) -> CliResult<()> {
    let records: Vec<SampleRecord> = samples
        .iter()
        .map(|s| s.to_record(vocab))
        .collect::<facepref::Result<_>>()?;
    Ok(write_jsonl(path, header, &records)?)
}

/// A rollout sample's chosen set and policy candidate, by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub sample_id: String,
    pub chosen: BTreeMap<String, f64>,
    pub candidate: BTreeMap<String, f64>,
    pub task_ids: Vec<String>,
}

pub fn write_items(
    items_path: &Path,
    tasks_path: &Path,
    run: &Run,
    items: &[RoundItem],
    samples: &[Sample],
    vocab: &ActionVocabulary,
) -> CliResult<()> {
    let records: Vec<ItemRecord> = items
        .iter()
        .map(|i| {
            Ok(ItemRecord {
                sample_id: samples[i.sample_index].id.clone(),
                chosen: i.chosen.to_named(vocab)?,
                candidate: i.candidate.to_named(vocab)?,
                task_ids: i.tasks.iter().map(|t| t.task_id.clone()).collect(),
            })
        })
        .collect::<facepref::Result<_>>()?;
    let tasks: Vec<&ComparisonTask> = items.iter().flat_map(|i| i.tasks.iter()).collect();
    write_jsonl(items_path, &run.header(ITEMS_SCHEMA), &records)?;
    write_jsonl(tasks_path, &run.header(TASKS_SCHEMA), &tasks)?;
    Ok(())
}

/// Rebuilds round items from the rollout files; sample indices refer to `samples`.
pub fn read_items(
    items_path: &Path,
    tasks_path: &Path,
    samples: &[Sample],
    vocab: &ActionVocabulary,
) -> CliResult<Vec<RoundItem>> {
    require(items_path)?;
    require(tasks_path)?;
    let (_, records): (_, Vec<ItemRecord>) = read_jsonl(items_path, ITEMS_SCHEMA)?;
    let (_, tasks): (_, Vec<ComparisonTask>) = read_jsonl(tasks_path, TASKS_SCHEMA)?;
    let mut by_id: HashMap<String, ComparisonTask> = tasks.into_iter().map(|t| (t.task_id.clone(), t)).collect();
    let index: HashMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    records
        .into_iter()
        .map(|r| {
            let sample_index = *index
                .get(r.sample_id.as_str())
                .ok_or_else(|| facepref::Error::Unknown(format!("sample {}", r.sample_id)))?;
            let tasks = r
                .task_ids
                .iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| facepref::Error::Unknown(format!("task {id}")))
                })
                .collect::<facepref::Result<Vec<_>>>()?;
            Ok(RoundItem {
                sample_index,
                chosen: CoefficientSet::from_named(&r.chosen, vocab)?,
                candidate: CoefficientSet::from_named(&r.candidate, vocab)?,
                tasks,
            })
        })
        .collect()
}

pub fn read_votes(path: &Path) -> CliResult<Vec<Vote>> {
    require(path)?;
    Ok(read_jsonl(path, VOTES_SCHEMA)?.1)
}

/// A JSON report: the standard header plus a free-form body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report<T> {
    pub header: Header,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_report<T: Serialize>(path: &Path, run: &Run, body: T) -> CliResult<()> {
    Ok(write_json(
        path,
        &Report {
            header: run.header(REPORT_SCHEMA),
            body,
        },
    )?)
}
