//! Staged pipeline orchestration over a run directory.
//!
//! Each stage reads the previous stage's JSONL file, computes only the
//! records that are not already present (resume is keyed on content ids),
//! and rewrites its output atomically (temp file + rename). Stage outputs
//! are ordered by input order, never by completion order, so a rerun with
//! the same seed produces byte-identical files at any worker count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ClientError, LiveConfig, MockScript, ModelClient};
use crate::critique::{build_critique_request, process_critique_response, CritiqueError};
use crate::eval::{build_perturbation_request, build_report, build_solve_request, EvalError, EvalReport};
use crate::pairing::{build_pairs, stratify, PairingConfig, PairingError};
use crate::record::{
    content_id, parse_line, serialize_line, ContrastPair, CritiqueRecord, NegativeKind,
    EvalRecord, EvalVariant, Problem, RecordError, RejectedCritique, SynthRecord, Trajectory,
    TreeRecord, Validate,
};
use crate::search::{run_search, extract_trajectories, Explorer, MathVerifier, SearchError};
use crate::segment::SegmentationConfig;
use crate::synthesis::{
    assemble_dataset, build_synthesis_request, path_from_raw, verify, SynthesisError,
};
use crate::search::SearchConfig;
use crate::template::TemplateSet;

pub mod files {
    pub const PROBLEMS: &str = "problems.jsonl";
    pub const TREES: &str = "trees.jsonl";
    pub const TRAJECTORIES: &str = "trajectories.jsonl";
    pub const PAIRS: &str = "pairs.jsonl";
    pub const CRITIQUES: &str = "critiques.jsonl";
    pub const CRITIQUES_REJECTED: &str = "critiques_rejected.jsonl";
    pub const SYNTH: &str = "synth.jsonl";
    pub const DATASET: &str = "dataset.jsonl";
    pub const EVAL: &str = "eval.jsonl";
    pub const REPORT: &str = "report.json";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing stage input {0}")]
    MissingStageInput(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {source}")]
    Record {
        file: String,
        line: usize,
        source: RecordError,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Critique(#[from] CritiqueError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("mock script: {0}")]
    Script(String),
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

/// One model role (config keys `explorer.model`, `analyst.model`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub backend: BackendKind,
    /// Script file for the mock backend.
    pub mock_script: Option<PathBuf>,
    pub explorer: ModelSection,
    pub analyst: ModelSection,
    /// Model used by the eval stage; defaults to the explorer.
    pub eval_model: Option<String>,
    pub critique_temperature: f64,
    pub synthesis_temperature: f64,
    pub max_output_tokens: u32,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub search: SearchConfig,
    pub segmentation: SegmentationConfig,
    pub pairing: PairingConfig,
    pub target_size: usize,
    pub balance_per_problem: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            backend: BackendKind::Mock,
            mock_script: None,
            explorer: ModelSection {
                model: "qwen2.5-math-7b-instruct".into(),
            },
            analyst: ModelSection {
                model: "gpt-5-mini".into(),
            },
            eval_model: None,
            critique_temperature: 0.2,
            synthesis_temperature: 0.7,
            max_output_tokens: 2048,
            max_in_flight: 8,
            cache_dir: None,
            templates_dir: None,
            search: SearchConfig::default(),
            segmentation: SegmentationConfig::default(),
            pairing: PairingConfig::default(),
            target_size: 30_000,
            balance_per_problem: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |msg: String| Err(PipelineError::ConfigInvalid(msg));
        if self.workers == 0 {
            return fail("workers must be >= 1".into());
        }
        if self.max_in_flight == 0 {
            return fail("max_in_flight must be >= 1".into());
        }
        if self.target_size == 0 {
            return fail("target_size must be >= 1".into());
        }
        if self.critique_temperature < 0.0 || self.synthesis_temperature < 0.0 {
            return fail("temperatures must be >= 0".into());
        }
        if let Err(e) = self.search.validate() {
            return fail(e);
        }
        if let Err(e) = self.segmentation.validate() {
            return fail(e);
        }
        if let Err(e) = self.pairing.validate() {
            return fail(e);
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn eval_model_name(&self) -> &str {
        self.eval_model.as_deref().unwrap_or(&self.explorer.model)
    }

    /// Stamp the global seed into the per-module seed fields so the values
    /// echoed by the manifest are the ones actually in effect.
    pub fn propagate_seed(&mut self) {
        self.search.rng_seed = self.seed;
        self.pairing.rng_seed = self.seed;
    }

    pub fn templates(&self) -> Result<TemplateSet, PipelineError> {
        match &self.templates_dir {
            Some(dir) => TemplateSet::from_dir(dir).map_err(CritiqueError::Template).map_err(Into::into),
            None => Ok(TemplateSet::builtin()),
        }
    }
}

/// Build the model client selected by the config.
pub fn build_client(cfg: &RunConfig) -> Result<ModelClient, PipelineError> {
    match cfg.backend {
        BackendKind::Mock => {
            let path = cfg.mock_script.as_ref().ok_or_else(|| {
                PipelineError::ConfigInvalid("mock backend requires mock_script".into())
            })?;
            let script = MockScript::load(path).map_err(PipelineError::Script)?;
            let client = ModelClient::mock(script);
            match &cfg.cache_dir {
                Some(dir) => Ok(client.with_cache(dir.clone())?),
                None => Ok(client),
            }
        }
        BackendKind::Live => {
            let live = LiveConfig::from_env()?;
            Ok(ModelClient::live(
                live,
                cfg.max_in_flight,
                cfg.cache_dir.clone(),
            )?)
        }
    }
}

/// Derive an independent sub-seed for a labeled purpose.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

// --- JSONL plumbing ---

pub fn read_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = parse_line::<T>(line).map_err(|source| PipelineError::Record {
            file: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

fn read_jsonl_if_present<T: DeserializeOwned + Validate>(
    path: &Path,
) -> Result<Vec<T>, PipelineError> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn write_jsonl_atomic<T: Serialize>(path: &Path, records: &[T]) -> Result<(), PipelineError> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serialize_line(r));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

fn require_input(run_dir: &Path, name: &str) -> Result<PathBuf, PipelineError> {
    let path = run_dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingStageInput(name.to_string()));
    }
    Ok(path)
}

// --- Manifest ---

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExploreStats {
    pub problems: usize,
    pub trees: usize,
    pub trajectories: usize,
    pub aborted_rollouts: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub problems_in: usize,
    pub problems_paired: usize,
    pub pairs: usize,
    pub dropped_no_positive: usize,
    pub dropped_no_negative: usize,
    pub problems_with_repeats: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CritiqueStats {
    pub attempted: usize,
    pub validated: usize,
    pub rejected: usize,
    pub failure_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub candidates: usize,
    pub verified: usize,
    pub dropped_by_filter: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmitStats {
    pub pool: usize,
    pub emitted: usize,
    pub target: usize,
    pub shortfall: usize,
    /// Emitted record count per problem.
    pub per_problem: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explore: Option<ExploreStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<PairStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<CritiqueStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthesize: Option<SynthStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<EmitStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

/// Effective run settings plus per-stage counters; rewritten by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub backend: BackendKind,
    pub workers: usize,
    pub explorer_model: String,
    pub analyst_model: String,
    pub eval_model: String,
    pub critique_temperature: f64,
    pub synthesis_temperature: f64,
    pub search: SearchConfig,
    pub segmentation: SegmentationConfig,
    pub pairing: PairingConfig,
    pub target_size: usize,
    pub balance_per_problem: bool,
    #[serde(default)]
    pub stages: StageStats,
}

impl Manifest {
    fn from_config(cfg: &RunConfig) -> Self {
        Manifest {
            seed: cfg.seed,
            backend: cfg.backend,
            workers: cfg.workers,
            explorer_model: cfg.explorer.model.clone(),
            analyst_model: cfg.analyst.model.clone(),
            eval_model: cfg.eval_model_name().to_string(),
            critique_temperature: cfg.critique_temperature,
            synthesis_temperature: cfg.synthesis_temperature,
            search: cfg.search.clone(),
            segmentation: cfg.segmentation.clone(),
            pairing: cfg.pairing.clone(),
            target_size: cfg.target_size,
            balance_per_problem: cfg.balance_per_problem,
            stages: StageStats::default(),
        }
    }
}

pub fn load_manifest(run_dir: &Path, cfg: &RunConfig) -> Manifest {
    let path = run_dir.join(files::MANIFEST);
    let stages = fs::read_to_string(&path)
        .ok()
        .and_then(|text| serde_json::from_str::<Manifest>(&text).ok())
        .map(|m| m.stages)
        .unwrap_or_default();
    let mut manifest = Manifest::from_config(cfg);
    manifest.stages = stages;
    manifest
}

fn store_manifest(run_dir: &Path, manifest: &Manifest) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(&run_dir.join(files::MANIFEST), text.as_bytes())
}

// --- Parallel execution ---

/// Map over items with a bounded worker pool; results keep input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("worker filled slot"))
        .collect()
}

// --- Stages ---

fn problems_by_id(problems: &[Problem]) -> Result<BTreeMap<String, Problem>, PipelineError> {
    let mut map = BTreeMap::new();
    for p in problems {
        if map.insert(p.id.clone(), p.clone()).is_some() {
            return Err(PipelineError::ConfigInvalid(format!(
                "duplicate problem id {}",
                p.id
            )));
        }
    }
    Ok(map)
}

/// Explore: run MCTS per problem, writing trees.jsonl and trajectories.jsonl.
pub fn stage_explore(
    run_dir: &Path,
    cfg: &RunConfig,
    client: &ModelClient,
) -> Result<ExploreStats, PipelineError> {
    let problems: Vec<Problem> = read_jsonl(&require_input(run_dir, files::PROBLEMS)?)?;
    problems_by_id(&problems)?;
    let templates = cfg.templates()?;
    let existing: Vec<TreeRecord> = read_jsonl_if_present(&run_dir.join(files::TREES))?;
    let mut trees: BTreeMap<String, TreeRecord> = existing
        .into_iter()
        .map(|t| (t.problem_id.clone(), t))
        .collect();

    let todo: Vec<&Problem> = problems.iter().filter(|p| !trees.contains_key(&p.id)).collect();
    let explorer = Explorer {
        client,
        model: cfg.explorer.model.clone(),
        max_output_tokens: cfg.max_output_tokens,
        templates: &templates,
    };
    let computed = parallel_map(&todo, cfg.workers, |p| {
        run_search(p, &explorer, &cfg.search, &cfg.segmentation, &MathVerifier)
            .map(|t| t.into_record())
    });
    for result in computed {
        let record = result?;
        trees.insert(record.problem_id.clone(), record);
    }

    let ordered_trees: Vec<&TreeRecord> = problems
        .iter()
        .filter_map(|p| trees.get(&p.id))
        .collect();
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for tree in &ordered_trees {
        trajectories.extend(extract_trajectories(tree));
    }

    write_jsonl_atomic(&run_dir.join(files::TREES), &ordered_trees)?;
    write_jsonl_atomic(&run_dir.join(files::TRAJECTORIES), &trajectories)?;

    let stats = ExploreStats {
        problems: problems.len(),
        trees: ordered_trees.len(),
        trajectories: trajectories.len(),
        aborted_rollouts: ordered_trees.iter().map(|t| t.aborted_rollouts).sum(),
    };
    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.explore = Some(stats.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(stats)
}

/// Pair: stratify trajectories per problem and draw contrastive pairs.
pub fn stage_pair(run_dir: &Path, cfg: &RunConfig) -> Result<PairStats, PipelineError> {
    let trajectories: Vec<Trajectory> =
        read_jsonl(&require_input(run_dir, files::TRAJECTORIES)?)?;
    let existing: Vec<ContrastPair> = read_jsonl_if_present(&run_dir.join(files::PAIRS))?;
    let done: BTreeSet<String> = existing.iter().map(|p| p.problem_id.clone()).collect();

    // Group by problem, first-occurrence order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories {
        if !groups.contains_key(&t.problem_id) {
            order.push(t.problem_id.clone());
        }
        groups.entry(t.problem_id.clone()).or_default().push(t);
    }

    let mut stats = PairStats {
        problems_in: order.len(),
        ..PairStats::default()
    };
    let mut pairs: Vec<ContrastPair> = Vec::new();
    for pid in &order {
        let group = &groups[pid];
        let problem_pairs: Vec<ContrastPair> = if done.contains(pid) {
            existing
                .iter()
                .filter(|p| &p.problem_id == pid)
                .cloned()
                .collect()
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("pair:{pid}")));
            match build_pairs(group, &cfg.pairing, &mut rng) {
                Ok(outcome) => outcome.pairs,
                Err(PairingError::NoPairs) | Err(PairingError::NoPositive) => {
                    let (correct, _) = stratify(group);
                    if correct.is_empty() {
                        stats.dropped_no_positive += 1;
                    } else {
                        stats.dropped_no_negative += 1;
                    }
                    continue;
                }
                Err(e) => {
                    return Err(PipelineError::ConfigInvalid(format!(
                        "unexpected pairing failure for {pid}: {e}"
                    )))
                }
            }
        };
        stats.problems_paired += 1;
        stats.pairs += problem_pairs.len();
        // A repeat exists exactly when some (negative, kind) occurs twice,
        // so the stat stays a pure function of the emitted pairs.
        let mut seen: Vec<(&str, NegativeKind)> = Vec::new();
        let mut repeated = false;
        for p in &problem_pairs {
            let key = (p.negative.id.as_str(), p.negative_kind);
            if seen.contains(&key) {
                repeated = true;
            } else {
                seen.push(key);
            }
        }
        if repeated {
            stats.problems_with_repeats += 1;
        }
        pairs.extend(problem_pairs);
    }

    write_jsonl_atomic(&run_dir.join(files::PAIRS), &pairs)?;
    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.pair = Some(stats.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(stats)
}

/// Critique: fan analyst requests out over pairs; parse, repair, validate.
pub fn stage_critique(
    run_dir: &Path,
    cfg: &RunConfig,
    client: &ModelClient,
) -> Result<CritiqueStats, PipelineError> {
    let pairs: Vec<ContrastPair> = read_jsonl(&require_input(run_dir, files::PAIRS)?)?;
    let problems: Vec<Problem> = read_jsonl(&require_input(run_dir, files::PROBLEMS)?)?;
    let problem_map = problems_by_id(&problems)?;
    let templates = cfg.templates()?;

    let existing_ok: Vec<CritiqueRecord> =
        read_jsonl_if_present(&run_dir.join(files::CRITIQUES))?;
    let existing_rej: Vec<RejectedCritique> =
        read_jsonl_if_present(&run_dir.join(files::CRITIQUES_REJECTED))?;
    let mut ok_by_pair: BTreeMap<String, CritiqueRecord> = existing_ok
        .into_iter()
        .map(|c| (c.pair_id.clone(), c))
        .collect();
    let mut rej_by_pair: BTreeMap<String, RejectedCritique> = existing_rej
        .into_iter()
        .map(|c| (c.pair_id.clone(), c))
        .collect();

    let todo: Vec<&ContrastPair> = pairs
        .iter()
        .filter(|p| !ok_by_pair.contains_key(&p.id) && !rej_by_pair.contains_key(&p.id))
        .collect();

    let results = parallel_map(&todo, cfg.workers, |pair| {
        let problem = match problem_map.get(&pair.problem_id) {
            Some(p) => p,
            None => {
                return Err(PipelineError::MissingStageInput(format!(
                    "problem {} referenced by pair {}",
                    pair.problem_id, pair.id
                )))
            }
        };
        let req = build_critique_request(
            problem,
            pair,
            &templates,
            &cfg.analyst.model,
            cfg.critique_temperature,
            cfg.max_output_tokens,
        )?;
        let raw = client.complete(&req)?;
        Ok((pair.id.clone(), pair.problem_id.clone(), raw))
    });

    for result in results {
        let (pair_id, problem_id, raw) = result?;
        let pair = pairs.iter().find(|p| p.id == pair_id).expect("pair exists");
        match process_critique_response(&raw, pair) {
            Ok(validated) => {
                ok_by_pair.insert(
                    pair_id.clone(),
                    CritiqueRecord {
                        id: content_id(format!("critique:{pair_id}")),
                        problem_id,
                        pair_id,
                        critique: validated.critique,
                        warnings: validated.warnings,
                    },
                );
            }
            Err(e) => {
                rej_by_pair.insert(
                    pair_id.clone(),
                    RejectedCritique {
                        pair_id,
                        problem_id,
                        raw,
                        reason: e.to_string(),
                    },
                );
            }
        }
    }

    let ordered_ok: Vec<&CritiqueRecord> =
        pairs.iter().filter_map(|p| ok_by_pair.get(&p.id)).collect();
    let ordered_rej: Vec<&RejectedCritique> =
        pairs.iter().filter_map(|p| rej_by_pair.get(&p.id)).collect();
    write_jsonl_atomic(&run_dir.join(files::CRITIQUES), &ordered_ok)?;
    write_jsonl_atomic(&run_dir.join(files::CRITIQUES_REJECTED), &ordered_rej)?;

    let attempted = ordered_ok.len() + ordered_rej.len();
    let stats = CritiqueStats {
        attempted,
        validated: ordered_ok.len(),
        rejected: ordered_rej.len(),
        failure_rate: if attempted > 0 {
            ordered_rej.len() as f64 / attempted as f64
        } else {
            0.0
        },
    };
    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.critique = Some(stats.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(stats)
}

/// Synthesize: one synthesis attempt per validated critique, verified
/// against gold.
pub fn stage_synthesize(
    run_dir: &Path,
    cfg: &RunConfig,
    client: &ModelClient,
) -> Result<SynthStats, PipelineError> {
    let critiques: Vec<CritiqueRecord> = read_jsonl(&require_input(run_dir, files::CRITIQUES)?)?;
    let pairs: Vec<ContrastPair> = read_jsonl(&require_input(run_dir, files::PAIRS)?)?;
    let problems: Vec<Problem> = read_jsonl(&require_input(run_dir, files::PROBLEMS)?)?;
    let problem_map = problems_by_id(&problems)?;
    let pair_map: BTreeMap<String, &ContrastPair> =
        pairs.iter().map(|p| (p.id.clone(), p)).collect();
    let templates = cfg.templates()?;

    let existing: Vec<SynthRecord> = read_jsonl_if_present(&run_dir.join(files::SYNTH))?;
    let mut by_critique: BTreeMap<String, SynthRecord> = existing
        .into_iter()
        .map(|s| (s.critique_id.clone(), s))
        .collect();

    let todo: Vec<&CritiqueRecord> = critiques
        .iter()
        .filter(|c| !by_critique.contains_key(&c.id))
        .collect();

    let results = parallel_map(&todo, cfg.workers, |record| {
        let problem = problem_map.get(&record.problem_id).ok_or_else(|| {
            PipelineError::MissingStageInput(format!(
                "problem {} referenced by critique {}",
                record.problem_id, record.id
            ))
        })?;
        let pair = pair_map.get(&record.pair_id).ok_or_else(|| {
            PipelineError::MissingStageInput(format!(
                "pair {} referenced by critique {}",
                record.pair_id, record.id
            ))
        })?;
        let style_example = pair.positive.text();
        let (req, _warnings) = build_synthesis_request(
            problem,
            &record.critique,
            &style_example,
            &templates,
            &cfg.analyst.model,
            cfg.synthesis_temperature,
            cfg.max_output_tokens,
        )?;
        let raw = client.complete(&req)?;
        let path = path_from_raw(&raw, &cfg.segmentation);
        let verified = verify(&path, problem, &MathVerifier);
        Ok::<SynthRecord, PipelineError>(SynthRecord {
            id: content_id(format!("synth:{}", record.id)),
            problem_id: record.problem_id.clone(),
            pair_id: record.pair_id.clone(),
            critique_id: record.id.clone(),
            path,
            verified,
        })
    });
    for result in results {
        let record = result?;
        by_critique.insert(record.critique_id.clone(), record);
    }

    let ordered: Vec<&SynthRecord> = critiques
        .iter()
        .filter_map(|c| by_critique.get(&c.id))
        .collect();
    write_jsonl_atomic(&run_dir.join(files::SYNTH), &ordered)?;

    let verified = ordered.iter().filter(|s| s.verified).count();
    let stats = SynthStats {
        candidates: ordered.len(),
        verified,
        dropped_by_filter: ordered.len() - verified,
    };
    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.synthesize = Some(stats.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(stats)
}

/// Emit: sample the verified pool into dataset.jsonl.
pub fn stage_emit(run_dir: &Path, cfg: &RunConfig) -> Result<EmitStats, PipelineError> {
    let synth: Vec<SynthRecord> = read_jsonl(&require_input(run_dir, files::SYNTH)?)?;
    let problems: Vec<Problem> = read_jsonl(&require_input(run_dir, files::PROBLEMS)?)?;
    let problem_map = problems_by_id(&problems)?;

    let pool: Vec<(&SynthRecord, &Problem)> = synth
        .iter()
        .filter(|s| s.verified)
        .filter_map(|s| problem_map.get(&s.problem_id).map(|p| (s, p)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "emit"));
    let outcome = assemble_dataset(&pool, cfg.target_size, cfg.balance_per_problem, &mut rng)?;
    debug_assert!(outcome.records.iter().all(|r| r.verified));
    write_jsonl_atomic(&run_dir.join(files::DATASET), &outcome.records)?;

    let mut per_problem: BTreeMap<String, usize> = BTreeMap::new();
    for r in &outcome.records {
        *per_problem.entry(r.problem_id.clone()).or_insert(0) += 1;
    }
    let stats = EmitStats {
        pool: pool.len(),
        emitted: outcome.records.len(),
        target: cfg.target_size,
        shortfall: outcome.shortfall,
        per_problem,
    };
    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.emit = Some(stats.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(stats)
}

/// Eval: perturb each problem, solve both variants greedily, score, report.
pub fn stage_eval(
    run_dir: &Path,
    cfg: &RunConfig,
    client: &ModelClient,
) -> Result<EvalReport, PipelineError> {
    let problems: Vec<Problem> = read_jsonl(&require_input(run_dir, files::PROBLEMS)?)?;
    let templates = cfg.templates()?;

    let existing: Vec<EvalRecord> = read_jsonl_if_present(&run_dir.join(files::EVAL))?;
    let mut done: BTreeMap<(String, EvalVariant), EvalRecord> = existing
        .into_iter()
        .map(|r| ((r.problem_id.clone(), r.variant), r))
        .collect();

    let todo: Vec<&Problem> = problems
        .iter()
        .filter(|p| {
            !(done.contains_key(&(p.id.clone(), EvalVariant::Original))
                && done.contains_key(&(p.id.clone(), EvalVariant::Perturbed)))
        })
        .collect();

    let model = cfg.eval_model_name().to_string();
    let results = parallel_map(&todo, cfg.workers, |p| {
        let perturb = build_perturbation_request(p, &templates, &model, cfg.max_output_tokens)?;
        let perturbed_statement = client.complete(&perturb)?;
        let solve_orig =
            build_solve_request(&p.statement, &templates, &model, cfg.max_output_tokens)?;
        let orig_text = client.complete(&solve_orig)?;
        let solve_pert = build_solve_request(
            perturbed_statement.trim(),
            &templates,
            &model,
            cfg.max_output_tokens,
        )?;
        let pert_text = client.complete(&solve_pert)?;
        Ok::<(String, String, String), PipelineError>((p.id.clone(), orig_text, pert_text))
    });
    for (problem, result) in todo.iter().zip(results) {
        let (pid, orig_text, pert_text) = result?;
        let orig_correct = crate::eval::score_response(&orig_text, problem, &MathVerifier);
        // The perturbed variant inherits the original gold answer.
        let pert_correct = crate::eval::score_response(&pert_text, problem, &MathVerifier);
        done.insert(
            (pid.clone(), EvalVariant::Original),
            EvalRecord {
                problem_id: pid.clone(),
                variant: EvalVariant::Original,
                model_answer: orig_text,
                correct: orig_correct,
            },
        );
        done.insert(
            (pid.clone(), EvalVariant::Perturbed),
            EvalRecord {
                problem_id: pid,
                variant: EvalVariant::Perturbed,
                model_answer: pert_text,
                correct: pert_correct,
            },
        );
    }

    let mut ordered: Vec<&EvalRecord> = Vec::new();
    for p in &problems {
        for variant in [EvalVariant::Original, EvalVariant::Perturbed] {
            if let Some(r) = done.get(&(p.id.clone(), variant)) {
                ordered.push(r);
            }
        }
    }
    let owned: Vec<EvalRecord> = ordered.into_iter().cloned().collect();
    write_jsonl_atomic(&run_dir.join(files::EVAL), &owned)?;

    let report = build_report(&owned)?;
    let mut report_text = serde_json::to_string_pretty(&report).expect("report serializes");
    report_text.push('\n');
    write_atomic(&run_dir.join(files::REPORT), report_text.as_bytes())?;

    let mut manifest = load_manifest(run_dir, cfg);
    manifest.stages.eval = Some(report.clone());
    store_manifest(run_dir, &manifest)?;
    Ok(report)
}

/// Per-stage record counts plus health metrics surfaced by `stats`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub stage_counts: BTreeMap<String, usize>,
    pub critique_failure_rate: Option<f64>,
    pub drop_reasons: BTreeMap<String, usize>,
    pub seed: Option<u64>,
    pub explorer_model: Option<String>,
    pub analyst_model: Option<String>,
    pub eval: Option<EvalReport>,
}

fn count_lines(path: &Path) -> Result<Option<usize>, PipelineError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(Some(text.lines().filter(|l| !l.trim().is_empty()).count()))
}

/// Summarize whatever stage files exist in the run directory.
pub fn stage_stats(run_dir: &Path) -> Result<StatsReport, PipelineError> {
    let mut report = StatsReport::default();
    for name in [
        files::PROBLEMS,
        files::TREES,
        files::TRAJECTORIES,
        files::PAIRS,
        files::CRITIQUES,
        files::CRITIQUES_REJECTED,
        files::SYNTH,
        files::DATASET,
        files::EVAL,
    ] {
        if let Some(n) = count_lines(&run_dir.join(name))? {
            report.stage_counts.insert(name.to_string(), n);
        }
    }
    let manifest_path = run_dir.join(files::MANIFEST);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        if let Ok(manifest) = serde_json::from_str::<Manifest>(&text) {
            report.seed = Some(manifest.seed);
            report.explorer_model = Some(manifest.explorer_model);
            report.analyst_model = Some(manifest.analyst_model);
            if let Some(c) = manifest.stages.critique {
                report.critique_failure_rate = Some(c.failure_rate);
            }
            if let Some(p) = manifest.stages.pair {
                report
                    .drop_reasons
                    .insert("no_positive".into(), p.dropped_no_positive);
                report
                    .drop_reasons
                    .insert("no_negative".into(), p.dropped_no_negative);
            }
            report.eval = manifest.stages.eval;
        }
    }
    Ok(report)
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("stage counts:\n");
        for (name, n) in &self.stage_counts {
            out.push_str(&format!("  {name:24} {n}\n"));
        }
        if let Some(rate) = self.critique_failure_rate {
            out.push_str(&format!("critique parse-failure rate: {rate:.4}\n"));
        }
        if !self.drop_reasons.is_empty() {
            out.push_str("pairing drops:\n");
            for (reason, n) in &self.drop_reasons {
                out.push_str(&format!("  {reason:24} {n}\n"));
            }
        }
        if let Some(seed) = self.seed {
            out.push_str(&format!("seed: {seed}\n"));
        }
        if let (Some(e), Some(a)) = (&self.explorer_model, &self.analyst_model) {
            out.push_str(&format!("explorer: {e}\nanalyst: {a}\n"));
        }
        if let Some(eval) = &self.eval {
            out.push_str(&format!(
                "eval: n={} acc_orig={:.4} acc_pert={:.4} strict_consistency={:.4}\n",
                eval.n, eval.accuracy_orig, eval.accuracy_pert, eval.strict_consistency
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, n) in &self.stage_counts {
            out.push_str(&format!("count_{name},{n}\n"));
        }
        if let Some(rate) = self.critique_failure_rate {
            out.push_str(&format!("critique_failure_rate,{rate}\n"));
        }
        for (reason, n) in &self.drop_reasons {
            out.push_str(&format!("dropped_{reason},{n}\n"));
        }
        if let Some(eval) = &self.eval {
            out.push_str(&format!("eval_n,{}\n", eval.n));
            out.push_str(&format!("accuracy_orig,{}\n", eval.accuracy_orig));
            out.push_str(&format!("accuracy_pert,{}\n", eval.accuracy_pert));
            out.push_str(&format!("strict_consistency,{}\n", eval.strict_consistency));
        }
        out
    }
}
