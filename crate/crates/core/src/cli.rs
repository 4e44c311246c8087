//! The `rgvlm` command line. Each pipeline stage is also exposed as a plain
//! function so it can be driven from tests.
//!
//! Output layout under the output directory:
//!
//! ```text
//! dataset/manifest.json, dataset/trajectories.jsonl, dataset/labels/<source>.jsonl
//! policies/<source>-seed<seed>.bin, policies/<source>-seed<seed>.metrics.csv
//! reports/<method>-seed<seed>-<init_mode>.csv
//! comparison.json, comparison.csv
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotator::{
    annotate_trajectory, combine_with_sparse, AnnotatorBackend, AnnotatorConfig, CacheReplayBackend, HttpBackend,
    OracleBackend, ResponseCache,
};
use crate::baselines::{frame_similarity_labels, sequence_similarity_labels, sparse_labels, StubEmbedder};
use crate::dataset::{
    append_labels, attach_labels, labels_path, read_dataset, read_labels, write_dataset, Dataset, LabelSource,
    RewardLabelSet, Trajectory, TrajectoryMeta,
};
use crate::env::{generate_task, sample_task, scripted_rollout, EnvConfig, InitMode, TaskSplit, TaskSpec, MAX_SUBTASKS};
use crate::eval::{compare, evaluate, export_csv, ComparisonTable, EvalConfig, EvalReport};
use crate::iql::{train_with, Hyper, IqlError, MetricsRow, PolicyArtifact};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub task_lengths: Vec<usize>,
    pub trajectories_per_length: usize,
    /// Probability of a random detour before each planner action.
    pub suboptimality: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { task_lengths: (1..=MAX_SUBTASKS).collect(), trajectories_per_length: 10, suboptimality: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Http,
    Oracle,
    CacheReplay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Backend behind `--source lvlm`. `--source oracle` always uses the oracle.
    pub kind: BackendKind,
    pub base_url: Option<String>,
    /// Gaussian noise, in score units, added by the oracle.
    pub noise_std: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { kind: BackendKind::Http, base_url: None, noise_std: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub generator: GeneratorConfig,
    pub annotator: AnnotatorConfig,
    pub backend: BackendConfig,
    /// Sources produced by `label` when no `--source` is given, in order.
    pub labelers: Vec<LabelSource>,
    pub embedding_dim: usize,
    /// `iql.seed` is replaced by the run seed when training.
    pub iql: Hyper,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
    /// Run seed: training initialization and batches, oracle noise.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::default(),
            generator: GeneratorConfig::default(),
            annotator: AnnotatorConfig::default(),
            backend: BackendConfig::default(),
            labelers: vec![LabelSource::Sparse],
            embedding_dim: 64,
            iql: Hyper::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let v = |field: &str, e: &dyn std::fmt::Display| Error::Validation(format!("{field}: {e}"));
        self.env.validate().map_err(|e| v("env", &e))?;
        self.annotator.validate().map_err(|e| v("annotator", &e))?;
        self.iql.validate().map_err(|e| v("iql", &e))?;
        self.eval.validate().map_err(|e| v("eval", &e))?;
        let g = &self.generator;
        if g.task_lengths.is_empty() || g.task_lengths.iter().any(|l| !(1..=MAX_SUBTASKS).contains(l)) {
            return Err(v("generator.task_lengths", &format!("must be a non-empty subset of 1..={MAX_SUBTASKS}")));
        }
        if g.trajectories_per_length == 0 {
            return Err(v("generator.trajectories_per_length", &"must be >= 1"));
        }
        if !(0.0..1.0).contains(&g.suboptimality) {
            return Err(v("generator.suboptimality", &format!("must be in [0, 1), got {}", g.suboptimality)));
        }
        if self.embedding_dim < 24 {
            return Err(v("embedding_dim", &format!("must be >= 24, got {}", self.embedding_dim)));
        }
        if !(self.backend.noise_std >= 0.0 && self.backend.noise_std.is_finite()) {
            return Err(v("backend.noise_std", &format!("must be >= 0, got {}", self.backend.noise_std)));
        }
        Ok(())
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }

    pub fn artifact_path(&self, source: LabelSource) -> PathBuf {
        self.output_dir.join("policies").join(format!("{source}-seed{}.bin", self.seed))
    }

    pub fn hyper(&self) -> Hyper {
        Hyper { seed: self.seed, ..self.iql.clone() }
    }
}

/// Sets `path` (dot-separated) inside `root`, creating objects on the way.
pub fn apply_override(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Validation(format!("malformed override path {path:?}")));
    }
    let mut cur = root;
    for (i, key) in keys.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::Validation(format!(
                "override {path:?}: {} is not an object",
                keys[..i].join(".")
            )));
        };
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        cur = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Override values are JSON when they parse as JSON, strings otherwise.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads the config file (or defaults), applies overrides in order and
/// validates. Errors name the offending field path.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Validation(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for (k, v) in overrides {
        apply_override(&mut value, k, override_value(v))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| Error::Validation(format!("config field `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `--a.b=value` / `--a.b value` overrides out of the arguments.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| Error::Validation(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Writes the training dataset and returns its directory.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, BTreeMap<usize, usize>)> {
    let out = &cfg.output_dir;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::Validation(format!("output directory parent {} does not exist", parent.display())));
        }
    }
    let g = &cfg.generator;
    let mut trajectories = Vec::new();
    let mut counts = BTreeMap::new();
    for &length in &g.task_lengths {
        for index in 0..g.trajectories_per_length {
            let (ts, task, instruction) = sample_task(&cfg.env, TaskSplit::Train, length, index)?;
            let mut rng = seed::rng(seed::derive(ts, &[0x726f_6c6c]));
            let ep = scripted_rollout(&task, g.suboptimality, &mut rng)?;
            trajectories.push(Trajectory {
                id: format!("L{length}-{index:05}"),
                instruction,
                states: ep.states,
                actions: ep.actions,
                meta: TrajectoryMeta { seed: ts, num_subtasks: length, suboptimality: g.suboptimality },
            });
            *counts.entry(length).or_insert(0) += 1;
        }
    }
    let dir = cfg.dataset_dir();
    write_dataset(&trajectories, &dir, &cfg.env, cfg.env.seed)?;
    Ok((dir, counts))
}

/// Regenerates every trajectory's task from the manifest and checks that
/// it matches the recorded start state.
pub fn tasks_for(dataset: &Dataset) -> Result<HashMap<String, TaskSpec>> {
    let env = &dataset.manifest.env_config;
    let mut tasks = HashMap::new();
    for t in &dataset.trajectories {
        let task = generate_task(env, t.meta.seed, t.meta.num_subtasks)?;
        if task.init_state != t.states[0] {
            return Err(Error::Validation(format!(
                "trajectory {}: regenerated task does not match its first state",
                t.id
            )));
        }
        tasks.insert(t.id.clone(), task);
    }
    Ok(tasks)
}

pub fn oracle_for(dataset: &Dataset, noise_std: f64, seed: u64) -> Result<OracleBackend> {
    OracleBackend::new(tasks_for(dataset)?, noise_std, seed).map_err(|e| Error::Validation(e.to_string()))
}

/// Ids already present in a labels file. A torn final line (from an
/// interrupted append) is cut off first.
fn labeled_ids(dataset_dir: &Path, source: LabelSource) -> Result<HashSet<String>> {
    let path = labels_path(dataset_dir, source);
    let Ok(bytes) = fs::read(&path) else {
        return Ok(HashSet::new());
    };
    if !bytes.is_empty() && bytes.last() != Some(&b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping incomplete last record", path.display());
        let f = fs::OpenOptions::new().write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        f.set_len(keep as u64).map_err(|e| Error::io(&path, e))?;
    }
    Ok(read_labels(dataset_dir, source)?.into_iter().map(|l| l.trajectory_id).collect())
}

/// Dense labels behind `combined`: the requested source, else `lvlm`, else
/// `oracle`, whichever covers every trajectory.
fn dense_for_combined(
    dataset_dir: &Path,
    dataset: &Dataset,
    requested: Option<LabelSource>,
) -> Result<HashMap<String, RewardLabelSet>> {
    let candidates = match requested {
        Some(s @ (LabelSource::Lvlm | LabelSource::Oracle)) => vec![s],
        Some(s) => return Err(Error::Validation(format!("combined needs dense lvlm or oracle labels, not {s}"))),
        None => vec![LabelSource::Lvlm, LabelSource::Oracle],
    };
    for source in candidates {
        if !labels_path(dataset_dir, source).exists() {
            continue;
        }
        let labels: HashMap<String, RewardLabelSet> =
            read_labels(dataset_dir, source)?.into_iter().map(|l| (l.trajectory_id.clone(), l)).collect();
        if dataset.trajectories.iter().all(|t| labels.contains_key(&t.id)) {
            return Ok(labels);
        }
    }
    Err(Error::Validation(
        "combined labels need complete lvlm or oracle labels; run `rgvlm label --source lvlm` (or oracle) first"
            .into(),
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSummary {
    pub labeled: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Labels every not-yet-labeled trajectory with `source`, appending one
/// record per trajectory. `backend` is used for `lvlm` and `oracle`.
pub fn label_with(
    cfg: &RunConfig,
    dataset_dir: &Path,
    source: LabelSource,
    backend: Option<&dyn AnnotatorBackend>,
    dense: Option<LabelSource>,
) -> Result<LabelSummary> {
    let dataset = read_dataset(dataset_dir)?;
    let done = labeled_ids(dataset_dir, source)?;
    let cache = match &cfg.annotator.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(|e| Error::io(dir, e))?),
        None => None,
    };
    let combined_dense = match source {
        LabelSource::Combined => Some(dense_for_combined(dataset_dir, &dataset, dense)?),
        _ => None,
    };
    let embedder = StubEmbedder::new(cfg.embedding_dim)?;

    let mut summary = LabelSummary::default();
    let mut backend_failure = false;
    for t in &dataset.trajectories {
        if done.contains(&t.id) {
            summary.skipped += 1;
            continue;
        }
        let result: Result<RewardLabelSet> = match source {
            LabelSource::Sparse => sparse_labels(t).map_err(Error::from),
            LabelSource::FrameSim => frame_similarity_labels(&embedder, t, &t.instruction).map_err(Error::from),
            LabelSource::SeqSim => sequence_similarity_labels(&embedder, t, &t.instruction).map_err(Error::from),
            LabelSource::Lvlm | LabelSource::Oracle => {
                let backend = backend.ok_or_else(|| Error::Validation(format!("no backend for {source}")))?;
                annotate_trajectory(backend, t, &t.instruction, &cfg.annotator, cache.as_ref()).map_err(Error::from)
            }
            LabelSource::Combined => {
                let dense = &combined_dense.as_ref().expect("loaded above")[&t.id];
                combine_with_sparse(dense, t, cfg.annotator.sparse_bonus).map_err(Error::from)
            }
        };
        match result {
            Ok(mut labels) => {
                // the record is filed under the requested source
                labels.source = source;
                append_labels(dataset_dir, &labels)?;
                summary.labeled += 1;
            }
            Err(e) => {
                log::error!("trajectory {}: {e}", t.id);
                backend_failure |= e.exit_code() == 2;
                summary.failed += 1;
            }
        }
    }
    if summary.failed > 0 {
        return Err(Error::LabelingFailed {
            failed: summary.failed,
            total: dataset.trajectories.len(),
            backend: backend_failure,
        });
    }
    Ok(summary)
}

/// Builds the backend `source` needs from the config and labels.
pub fn label(cfg: &RunConfig, dataset_dir: &Path, source: LabelSource, dense: Option<LabelSource>) -> Result<LabelSummary> {
    let a = &cfg.annotator;
    let backend: Option<Box<dyn AnnotatorBackend>> = match source {
        LabelSource::Oracle => {
            let dataset = read_dataset(dataset_dir)?;
            Some(Box::new(oracle_for(&dataset, cfg.backend.noise_std, cfg.seed)?))
        }
        LabelSource::Lvlm => match cfg.backend.kind {
            BackendKind::Http => {
                let url = cfg.backend.base_url.as_deref().ok_or_else(|| {
                    Error::Validation("backend.base_url (or --base-url) is required for the http backend".into())
                })?;
                Some(Box::new(HttpBackend::new(url, Duration::from_secs(a.timeout_secs))))
            }
            BackendKind::CacheReplay => {
                if a.cache_dir.is_none() {
                    return Err(Error::Validation("the cache-replay backend needs annotator.cache_dir".into()));
                }
                Some(Box::new(CacheReplayBackend))
            }
            BackendKind::Oracle => {
                return Err(Error::Validation(
                    "oracle scores are stored as their own source; use --source oracle".into(),
                ))
            }
        },
        _ => None,
    };
    label_with(cfg, dataset_dir, source, backend.as_deref(), dense)
}

fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("update,v_loss,q_loss,policy_loss,mean_advantage\n");
    for r in rows {
        let m = &r.metrics;
        out.push_str(&format!("{},{},{},{},{}\n", r.update, m.v_loss, m.q_loss, m.policy_loss, m.mean_advantage));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains on `source` labels; writes the artifact and its metrics CSV next
/// to it. Returns the artifact path.
pub fn train_cmd(cfg: &RunConfig, dataset_dir: &Path, source: LabelSource, artifact: Option<&Path>) -> Result<PathBuf> {
    let dataset = read_dataset(dataset_dir)?;
    if !labels_path(dataset_dir, source).exists() {
        return Err(Error::Validation(format!(
            "no {source} labels in {}; run `rgvlm label --source {source}` first",
            dataset_dir.display()
        )));
    }
    let labels = read_labels(dataset_dir, source)?;
    let labeled = attach_labels(&dataset.trajectories, &labels)?;
    let path = artifact.map(Path::to_path_buf).unwrap_or_else(|| cfg.artifact_path(source));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let metrics_path = path.with_extension("metrics.csv");
    let hyper = cfg.hyper();
    let mut rows = Vec::new();
    let outcome = train_with(&labeled, &hyper, |r| {
        log::info!(
            "update {}: v {:.4} q {:.4} pi {:.4} adv {:.4}",
            r.update,
            r.metrics.v_loss,
            r.metrics.q_loss,
            r.metrics.policy_loss,
            r.metrics.mean_advantage
        );
        rows.push(r.clone());
    });
    match outcome {
        Ok(o) => {
            write_metrics_csv(&metrics_path, &o.metrics)?;
            o.artifact.save(&path)?;
            Ok(path)
        }
        Err(e @ IqlError::Divergence { .. }) => {
            write_metrics_csv(&metrics_path, &rows)?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Evaluates an artifact under `mode` and writes the report CSV. The method
/// name defaults to the artifact's label source.
pub fn eval_cmd(
    cfg: &RunConfig,
    artifact: &Path,
    mode: InitMode,
    method: Option<&str>,
    report: Option<&Path>,
) -> Result<(PathBuf, EvalReport)> {
    let policy = PolicyArtifact::load(artifact)?;
    let method = method
        .map(str::to_string)
        .or_else(|| policy.header.label_source.map(|s| s.name().to_string()))
        .unwrap_or_else(|| "policy".into());
    let seed = policy.header.seed;
    let eval_cfg = EvalConfig { init_mode: mode, ..cfg.eval.clone() };
    let rep = evaluate(&policy, &method, seed, &cfg.env, &eval_cfg)?;
    let path = report.map(Path::to_path_buf).unwrap_or_else(|| {
        cfg.output_dir.join("reports").join(format!("{method}-seed{seed}-{}.csv", mode.name()))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    export_csv(&rep, &path)?;
    Ok((path, rep))
}

/// Compares report CSVs; writes `comparison.json` and `comparison.csv`.
pub fn report_cmd(cfg: &RunConfig, reports: &[PathBuf], baseline: &str) -> Result<ComparisonTable> {
    let loaded = reports.iter().map(|p| EvalReport::read_csv(p)).collect::<Result<Vec<_>, _>>()?;
    let table = compare(&loaded, baseline)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("comparison.json");
    fs::write(&json, table.to_json()).map_err(|e| Error::io(&json, e))?;
    table.write_csv(&out.join("comparison.csv"))?;
    Ok(table)
}

#[derive(Debug, Parser)]
#[command(name = "rgvlm", version, about = "Dense reward labeling and offline RL on a language gridworld")]
#[command(after_help = "Any config field can be overridden with a dotted flag, e.g. --iql.gamma=0.95")]
pub struct Cli {
    /// JSON run config; defaults apply to missing fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scripted demonstrations.
    GenData,
    /// Attach reward labels to the dataset (resumable).
    Label {
        /// Defaults to every source in `labelers`.
        #[arg(long)]
        source: Option<LabelSource>,
        #[arg(long, value_enum)]
        backend: Option<BackendKind>,
        #[arg(long)]
        base_url: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
        /// Dense labels to combine with the sparse bonus (lvlm or oracle).
        #[arg(long)]
        dense: Option<LabelSource>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a policy with IQL on one label source.
    Train {
        #[arg(long)]
        source: LabelSource,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Roll out a trained policy on held-out tasks.
    Eval {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        init_mode: Option<InitMode>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare evaluation reports against a baseline method.
    Report {
        #[arg(long)]
        baseline: String,
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn execute(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut overrides = overrides;
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.out {
        overrides.push(("output_dir".into(), Value::String(o.display().to_string()).to_string()));
    }
    if let Command::Label { backend, base_url, model, concurrency, .. } = &cli.command {
        let s = |v: &str| Value::String(v.to_string()).to_string();
        if let Some(b) = backend {
            overrides.push(("backend.kind".into(), serde_json::to_string(b).expect("serializes")));
        }
        if let Some(u) = base_url {
            overrides.push(("backend.base_url".into(), s(u)));
        }
        if let Some(m) = model {
            overrides.push(("annotator.model".into(), s(m)));
        }
        if let Some(c) = concurrency {
            overrides.push(("annotator.concurrency_limit".into(), c.to_string()));
        }
    }
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let say = |out: &mut std::io::StdoutLock, line: String| {
        let _ = writeln!(out, "{line}");
    };

    match cli.command {
        Command::GenData => {
            let (dir, counts) = gen_data(&cfg)?;
            let total: usize = counts.values().sum();
            say(&mut out, format!("wrote {total} trajectories to {}", dir.display()));
            for (l, n) in counts {
                say(&mut out, format!("  length {l}: {n}"));
            }
        }
        Command::Label { source, dense, dataset, .. } => {
            let dir = dataset.unwrap_or_else(|| cfg.dataset_dir());
            let sources = source.map(|s| vec![s]).unwrap_or_else(|| cfg.labelers.clone());
            for s in sources {
                let summary = label(&cfg, &dir, s, dense)?;
                say(
                    &mut out,
                    format!("{s}: labeled {} trajectories, {} already present", summary.labeled, summary.skipped),
                );
            }
        }
        Command::Train { source, dataset, artifact } => {
            let dir = dataset.unwrap_or_else(|| cfg.dataset_dir());
            let path = train_cmd(&cfg, &dir, source, artifact.as_deref())?;
            say(&mut out, format!("wrote {}", path.display()));
        }
        Command::Eval { artifact, init_mode, method, report } => {
            let mode = init_mode.unwrap_or(cfg.eval.init_mode);
            let (path, rep) = eval_cmd(&cfg, &artifact, mode, method.as_deref(), report.as_deref())?;
            for r in &rep.rows {
                say(&mut out, format!("length {}: {:.4} over {} episodes", r.task_length, r.mean_completion, r.episodes));
            }
            say(&mut out, format!("wrote {}", path.display()));
        }
        Command::Report { baseline, reports } => {
            let table = report_cmd(&cfg, &reports, &baseline)?;
            say(&mut out, table.summary());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let (rest, overrides) = match extract_overrides(args) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli, overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}
