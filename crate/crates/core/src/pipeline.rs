//! Stage orchestration driven by a single TOML configuration file.
//!
//! Every stage reads plain files from the output directory (or from the
//! configured inputs) and writes its artifact atomically next to them:
//!
//! | stage      | reads                                   | writes                                        |
//! |------------|-----------------------------------------|-----------------------------------------------|
//! | `index`    | corpus                                  | `index.json`                                  |
//! | `generate` | corpus, prompt examples, mock script    | `generation.jsonl`, `generation_failures.jsonl` |
//! | `curate`   | `generation.jsonl`, `index.json`        | `triples.tsv`, `overlap.json` (optional)      |
//! | `retrieve` | `index.json`, queries                   | `run.bm25.trec`                               |
//! | `rerank`   | `run.bm25.trec`, corpus, queries        | `run.rerank.trec`                             |
//! | `evaluate` | run files, qrels                        | `metrics.json`                                |
//!
//! Each completed stage appends a record to `summary.jsonl`. A stage whose
//! configuration hash and input files are unchanged since its last completed
//! run is skipped unless forced.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, CorpusError, CorpusFormat, CorpusHandle};
use crate::curation::{self, CurationConfig, CurationError};
use crate::generator::{
    self, CompletionBackend, GenerationError, GenerationSet, GenerationSettings, MockBackend,
    RemoteBackend,
};
use crate::lexindex::{Bm25Params, IndexError, InvertedIndex, Ranking};
use crate::promptkit::{self, PromptCues, PromptError, PromptMode, PromptTemplate};
use crate::rerankeval::{
    self, EvalConfig, Gain, LexicalScorer, MaxpConfig, Qrels, RemoteScorer, RerankError,
    RerankScorer, Reranker,
};

pub const INDEX_FILE: &str = "index.json";
pub const GENERATION_FILE: &str = "generation.jsonl";
pub const FAILURES_FILE: &str = "generation_failures.jsonl";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const OVERLAP_FILE: &str = "overlap.json";
pub const BM25_RUN_FILE: &str = "run.bm25.trec";
pub const RERANK_RUN_FILE: &str = "run.rerank.trec";
pub const METRICS_FILE: &str = "metrics.json";
pub const SUMMARY_FILE: &str = "summary.jsonl";
const LOCK_FILE: &str = ".inpars.lock";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("missing artifact from upstream stage {0}")]
    MissingUpstreamArtifact(Stage),
    #[error("invalid config field {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("output directory is locked by another run ({0})")]
    Locked(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

impl PipelineError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingUpstreamArtifact(_) => "missing_upstream_artifact",
            Self::ConfigInvalid { .. } => "config_invalid",
            Self::Locked(_) => "locked",
            Self::Corpus(_) => "corpus",
            Self::Index(_) => "index",
            Self::Prompt(_) => "prompt",
            Self::Generation(_) => "generation",
            Self::Curation(_) => "curation",
            Self::Rerank(_) => "rerank",
            Self::Io(_) => "io",
        }
    }

    fn config(field: &str, reason: impl Into<String>) -> Self {
        Self::ConfigInvalid {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Index,
    Generate,
    Curate,
    Retrieve,
    Rerank,
    Evaluate,
    All,
}

impl Stage {
    /// Stages run by `all`, in order.
    pub const ORDER: [Stage; 6] = [
        Stage::Index,
        Stage::Generate,
        Stage::Curate,
        Stage::Retrieve,
        Stage::Rerank,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Index => "index",
            Stage::Generate => "generate",
            Stage::Curate => "curate",
            Stage::Retrieve => "retrieve",
            Stage::Rerank => "rerank",
            Stage::Evaluate => "evaluate",
            Stage::All => "all",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::config("stage", format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: CorpusFormat,
}

fn default_format() -> CorpusFormat {
    CorpusFormat::Jsonl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub mode: PromptMode,
    pub examples: Option<PathBuf>,
    pub header: Option<String>,
    pub cues: PromptCues,
}

impl Default for PromptSection {
    fn default() -> Self {
        Self {
            mode: PromptMode::Vanilla,
            examples: None,
            header: None,
            cues: PromptCues::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub script: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            script: None,
            url: None,
            model: None,
            timeout_secs: 60,
            retries: 3,
            backoff_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub n: usize,
    pub min_chars: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: Option<f64>,
    pub seed: Option<u64>,
    pub in_flight: usize,
    pub failure_ceiling: f64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            n: generator::DEFAULT_NUM_DOCUMENTS,
            min_chars: corpus::DEFAULT_MIN_CHARS,
            max_tokens: generator::DEFAULT_MAX_TOKENS,
            temperature: generator::DEFAULT_TEMPERATURE,
            top_p: None,
            seed: None,
            in_flight: 8,
            failure_ceiling: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationSection {
    pub top_k: usize,
    pub negative_pool_size: usize,
    pub seed: Option<u64>,
    pub reference_queries: Option<PathBuf>,
}

impl Default for CurationSection {
    fn default() -> Self {
        Self {
            top_k: curation::DEFAULT_TOP_K,
            negative_pool_size: curation::DEFAULT_NEGATIVE_POOL,
            seed: None,
            reference_queries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub queries: Option<PathBuf>,
    pub candidates_k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            queries: None,
            candidates_k: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Lexical,
    Remote,
    /// Keeps the first-stage order and scores.
    Firststage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    pub scorer: ScorerKind,
    pub window: usize,
    pub stride: usize,
    pub url: Option<String>,
    pub timeout_secs: u64,
    pub in_flight: usize,
}

impl Default for RerankSection {
    fn default() -> Self {
        let maxp = MaxpConfig::default();
        Self {
            scorer: ScorerKind::Lexical,
            window: maxp.window,
            stride: maxp.stride,
            url: None,
            timeout_secs: 60,
            in_flight: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub qrels: Option<PathBuf>,
    pub metrics: Vec<String>,
    pub rel_threshold: u32,
    pub gain: Gain,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            qrels: None,
            metrics: d.metrics,
            rel_threshold: d.rel_threshold,
            gain: d.gain,
        }
    }
}

/// The whole pipeline configuration. Relative paths are resolved against the
/// directory containing the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub index: Bm25Params,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub curation: CurationSection,
    #[serde(default)]
    pub retrieval: RetrievalSection,
    #[serde(default)]
    pub rerank: RerankSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::config("config", e.message().to_string()))
    }

    /// Hex SHA-256 of the canonical serialization of every field (defaults
    /// filled in), so formatting and comments in the file do not matter.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Replaces every stochastic stage's seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.generation.seed = Some(seed);
        self.curation.seed = Some(seed);
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.index.k1 < 0.0 || !(0.0..=1.0).contains(&self.index.b) {
            return Err(PipelineError::config(
                "index",
                "need k1 >= 0 and 0 <= b <= 1",
            ));
        }
        if self.generation.max_tokens == 0 {
            return Err(PipelineError::config(
                "generation.max_tokens",
                "must be at least 1",
            ));
        }
        if self.generation.temperature.is_nan() || self.generation.temperature < 0.0 {
            return Err(PipelineError::config(
                "generation.temperature",
                "must be non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.generation.failure_ceiling) {
            return Err(PipelineError::config(
                "generation.failure_ceiling",
                "must lie in [0, 1]",
            ));
        }
        if self.retrieval.candidates_k == 0 {
            return Err(PipelineError::config(
                "retrieval.candidates_k",
                "must be at least 1",
            ));
        }
        MaxpConfig {
            window: self.rerank.window,
            stride: self.rerank.stride,
        }
        .validate()
        .map_err(|e| PipelineError::config("rerank.window", e.to_string()))?;
        self.eval_config()
            .parsed_metrics()
            .map_err(|e| PipelineError::config("eval.metrics", e.to_string()))?;
        Ok(())
    }

    fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            metrics: self.eval.metrics.clone(),
            rel_threshold: self.eval.rel_threshold,
            gain: self.eval.gain,
        }
    }
}

/// A parsed configuration plus the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config: PipelineConfig::from_toml_str(&text)?,
            base_dir,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    /// `completed` or `skipped`.
    pub status: String,
    pub config_hash: String,
    pub fingerprint: String,
    pub counts: BTreeMap<String, f64>,
    pub elapsed_ms: u64,
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Writes via a temporary file and a rename.
fn write_atomic<F>(path: &Path, fill: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), PipelineError>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut out = BufWriter::new(File::create(&tmp)?);
        fill(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Runner<'a> {
    loaded: &'a LoadedConfig,
    config: PipelineConfig,
    out: PathBuf,
    config_hash: String,
    force: bool,
}

/// Runs one stage (or all of them, in order) and returns the summary records
/// it appended.
pub fn run_stage(
    loaded: &LoadedConfig,
    stage: Stage,
    options: &RunOptions,
) -> Result<Vec<StageSummary>, PipelineError> {
    let mut config = loaded.config.clone();
    if let Some(seed) = options.seed {
        config.override_seed(seed);
    }
    if let Some(dir) = &options.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    let out = loaded.resolve(&config.output_dir);
    fs::create_dir_all(&out)?;
    let _lock = LockGuard::acquire(&out)?;
    let runner = Runner {
        loaded,
        config_hash: config.config_hash(),
        config,
        out,
        force: options.force,
    };
    let stages: Vec<Stage> = if stage == Stage::All {
        Stage::ORDER.to_vec()
    } else {
        vec![stage]
    };
    stages.into_iter().map(|s| runner.run(s)).collect()
}

impl Runner<'_> {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn upstream(&self, name: &str, producer: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.artifact(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::MissingUpstreamArtifact(producer))
        }
    }

    fn input(&self, field: &str, path: Option<&PathBuf>) -> Result<PathBuf, PipelineError> {
        let path = path.ok_or_else(|| PipelineError::config(field, "required for this stage"))?;
        let resolved = self.loaded.resolve(path);
        if !resolved.is_file() {
            return Err(PipelineError::config(
                field,
                format!("{} does not exist", resolved.display()),
            ));
        }
        Ok(resolved)
    }

    fn corpus_path(&self) -> Result<PathBuf, PipelineError> {
        self.input("corpus.path", Some(&self.config.corpus.path))
    }

    fn inputs(&self, stage: Stage) -> Result<Vec<PathBuf>, PipelineError> {
        let c = &self.config;
        Ok(match stage {
            Stage::Index => vec![self.corpus_path()?],
            Stage::Generate => {
                let mut v = vec![
                    self.corpus_path()?,
                    self.input("prompt.examples", c.prompt.examples.as_ref())?,
                ];
                if c.backend.kind == BackendKind::Mock {
                    v.push(self.input("backend.script", c.backend.script.as_ref())?);
                }
                v
            }
            Stage::Curate => {
                let mut v = vec![
                    self.upstream(GENERATION_FILE, Stage::Generate)?,
                    self.upstream(INDEX_FILE, Stage::Index)?,
                ];
                if let Some(r) = &c.curation.reference_queries {
                    v.push(self.input("curation.reference_queries", Some(r))?);
                }
                v
            }
            Stage::Retrieve => vec![
                self.upstream(INDEX_FILE, Stage::Index)?,
                self.input("retrieval.queries", c.retrieval.queries.as_ref())?,
            ],
            Stage::Rerank => vec![
                self.upstream(BM25_RUN_FILE, Stage::Retrieve)?,
                self.corpus_path()?,
                self.input("retrieval.queries", c.retrieval.queries.as_ref())?,
            ],
            Stage::Evaluate => {
                let mut v = vec![self.upstream(BM25_RUN_FILE, Stage::Retrieve)?];
                let rerank = self.artifact(RERANK_RUN_FILE);
                if rerank.is_file() {
                    v.push(rerank);
                }
                v.push(self.input("eval.qrels", c.eval.qrels.as_ref())?);
                v
            }
            Stage::All => unreachable!("expanded by run_stage"),
        })
    }

    fn outputs(&self, stage: Stage) -> Vec<PathBuf> {
        let names: &[&str] = match stage {
            Stage::Index => &[INDEX_FILE],
            Stage::Generate => &[GENERATION_FILE, FAILURES_FILE],
            Stage::Curate => &[TRIPLES_FILE],
            Stage::Retrieve => &[BM25_RUN_FILE],
            Stage::Rerank => &[RERANK_RUN_FILE],
            Stage::Evaluate => &[METRICS_FILE],
            Stage::All => &[],
        };
        names.iter().map(|n| self.artifact(n)).collect()
    }

    fn fingerprint(&self, stage: Stage, inputs: &[PathBuf]) -> Result<String, PipelineError> {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update(stage.name().as_bytes());
        for p in inputs {
            h.update(file_digest(p)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn last_completed(&self, stage: Stage) -> Option<StageSummary> {
        let text = fs::read_to_string(self.artifact(SUMMARY_FILE)).ok()?;
        text.lines()
            .rev()
            .filter_map(|l| serde_json::from_str::<StageSummary>(l).ok())
            .find(|s| s.stage == stage && s.status == "completed")
    }

    fn append_summary(&self, summary: &StageSummary) -> Result<(), PipelineError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.artifact(SUMMARY_FILE))?;
        serde_json::to_writer(&mut f, summary).map_err(io::Error::from)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    fn run(&self, stage: Stage) -> Result<StageSummary, PipelineError> {
        let inputs = self.inputs(stage)?;
        let fingerprint = self.fingerprint(stage, &inputs)?;
        let up_to_date = self
            .last_completed(stage)
            .is_some_and(|s| s.fingerprint == fingerprint)
            && self.outputs(stage).iter().all(|p| p.is_file());
        let started = Instant::now();
        let (status, counts) = if up_to_date && !self.force {
            log::info!("{stage}: up to date, skipping");
            ("skipped", BTreeMap::new())
        } else {
            log::info!("{stage}: running");
            let counts = match stage {
                Stage::Index => self.index()?,
                Stage::Generate => self.generate()?,
                Stage::Curate => self.curate()?,
                Stage::Retrieve => self.retrieve()?,
                Stage::Rerank => self.rerank()?,
                Stage::Evaluate => self.evaluate()?,
                Stage::All => unreachable!("expanded by run_stage"),
            };
            ("completed", counts)
        };
        let summary = StageSummary {
            stage,
            status: status.into(),
            config_hash: self.config_hash.clone(),
            fingerprint,
            counts,
            elapsed_ms: started.elapsed().as_millis() as u64,
        };
        self.append_summary(&summary)?;
        Ok(summary)
    }

    fn load_corpus(&self) -> Result<CorpusHandle, PipelineError> {
        Ok(corpus::ingest(
            self.corpus_path()?,
            self.config.corpus.format,
        )?)
    }

    fn load_queries(&self) -> Result<Vec<(String, String)>, PipelineError> {
        let path = self.input("retrieval.queries", self.config.retrieval.queries.as_ref())?;
        Ok(rerankeval::read_queries(BufReader::new(File::open(path)?))?)
    }

    fn index(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let corpus = self.load_corpus()?;
        let index = InvertedIndex::build(&corpus, self.config.index)?;
        write_atomic(&self.artifact(INDEX_FILE), |w| Ok(index.write_snapshot(w)?))?;
        Ok(counts([
            ("documents", index.doc_count() as f64),
            ("terms", index.vocabulary().count() as f64),
            ("avg_doc_length", index.avg_doc_length()),
        ]))
    }

    fn generate(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let c = &self.config;
        let seed = c
            .generation
            .seed
            .ok_or_else(|| PipelineError::config("generation.seed", "required for generation"))?;
        let corpus = self.load_corpus()?;
        let examples =
            promptkit::load_examples(self.input("prompt.examples", c.prompt.examples.as_ref())?)?;
        let mut template =
            PromptTemplate::new(c.prompt.mode, examples)?.with_cues(c.prompt.cues.clone());
        if let Some(h) = &c.prompt.header {
            template = template.with_header(h.clone());
        }
        let backend: Box<dyn CompletionBackend> = match c.backend.kind {
            BackendKind::Mock => Box::new(MockBackend::from_script(
                self.input("backend.script", c.backend.script.as_ref())?,
            )?),
            BackendKind::Remote => {
                let url = c.backend.url.clone().ok_or_else(|| {
                    PipelineError::config("backend.url", "required for the remote backend")
                })?;
                Box::new(RemoteBackend::new(
                    url,
                    c.backend.model.clone(),
                    Duration::from_secs(c.backend.timeout_secs),
                ))
            }
        };
        let settings = GenerationSettings {
            max_tokens: c.generation.max_tokens,
            temperature: c.generation.temperature,
            top_p: c.generation.top_p,
            retries: c.backend.retries,
            backoff: Duration::from_millis(c.backend.backoff_ms),
            in_flight: c.generation.in_flight,
            failure_ceiling: c.generation.failure_ceiling,
        };
        let set = generator::run_generation(
            &corpus,
            backend.as_ref(),
            &template,
            c.generation.n,
            c.generation.min_chars,
            seed,
            &settings,
        )?;
        write_atomic(&self.artifact(GENERATION_FILE), |w| Ok(set.write_jsonl(w)?))?;
        write_atomic(&self.artifact(FAILURES_FILE), |w| {
            Ok(set.write_failures_jsonl(w)?)
        })?;
        Ok(counts([
            ("n_requested", set.n_requested as f64),
            ("n_succeeded", set.n_succeeded() as f64),
            ("n_failed", set.n_failed() as f64),
        ]))
    }

    fn curate(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let c = &self.config;
        let seed = c.curation.seed.ok_or_else(|| {
            PipelineError::config("curation.seed", "required for negative mining")
        })?;
        let set = GenerationSet::load(self.upstream(GENERATION_FILE, Stage::Generate)?)?;
        let index = InvertedIndex::load(self.upstream(INDEX_FILE, Stage::Index)?)?;
        let config = CurationConfig {
            top_k: c.curation.top_k,
            negative_pool_size: c.curation.negative_pool_size,
            seed,
        };
        let triples = curation::build_triples(&set.queries, &index, &config)?;
        write_atomic(&self.artifact(TRIPLES_FILE), |w| {
            Ok(curation::write_triples_tsv(&triples, w)?)
        })?;
        let fallbacks = triples.iter().filter(|t| t.negative_from_fallback).count();
        let mut out = counts([
            ("generated", set.len() as f64),
            ("triples", triples.len() as f64),
            ("fallback_negatives", fallbacks as f64),
        ]);
        if let Some(r) = &c.curation.reference_queries {
            let refs: Vec<String> =
                fs::read_to_string(self.input("curation.reference_queries", Some(r))?)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(String::from)
                    .collect();
            let questions: Vec<&str> = set.queries.iter().map(|q| q.question.as_str()).collect();
            let stats = curation::overlap_report(&questions, &refs);
            write_atomic(&self.artifact(OVERLAP_FILE), |w| {
                serde_json::to_writer_pretty(&mut *w, &stats).map_err(io::Error::from)?;
                Ok(w.write_all(b"\n")?)
            })?;
            out.insert("overlap_matched".into(), stats.matched as f64);
            out.insert("overlap_rate".into(), stats.match_rate);
        }
        Ok(out)
    }

    fn retrieve(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let index = InvertedIndex::load(self.upstream(INDEX_FILE, Stage::Index)?)?;
        let queries = self.load_queries()?;
        let k = self.config.retrieval.candidates_k;
        let run: Vec<Ranking> = queries
            .iter()
            .map(|(qid, q)| index.search(qid, q, k))
            .collect();
        write_atomic(&self.artifact(BM25_RUN_FILE), |w| {
            Ok(rerankeval::write_run(&run, "bm25", w)?)
        })?;
        Ok(counts([
            ("queries", run.len() as f64),
            ("rows", run.iter().map(Ranking::len).sum::<usize>() as f64),
        ]))
    }

    fn rerank(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let c = &self.config.rerank;
        let file = File::open(self.upstream(BM25_RUN_FILE, Stage::Retrieve)?)?;
        let candidates = rerankeval::read_run(BufReader::new(file))?;
        let tag = match c.scorer {
            ScorerKind::Lexical => "rerank-lexical",
            ScorerKind::Remote => "rerank-remote",
            ScorerKind::Firststage => "firststage",
        };
        let reranked: Vec<Ranking> = if c.scorer == ScorerKind::Firststage {
            candidates.into_values().collect()
        } else {
            let corpus = self.load_corpus()?;
            let queries: BTreeMap<String, String> = self.load_queries()?.into_iter().collect();
            let scorer: Box<dyn RerankScorer> = match c.scorer {
                ScorerKind::Remote => {
                    let url = c.url.clone().ok_or_else(|| {
                        PipelineError::config("rerank.url", "required for the remote scorer")
                    })?;
                    Box::new(RemoteScorer::new(url, Duration::from_secs(c.timeout_secs)))
                }
                _ => Box::new(LexicalScorer),
            };
            let reranker = Reranker {
                scorer: scorer.as_ref(),
                maxp: MaxpConfig {
                    window: c.window,
                    stride: c.stride,
                },
                workers: c.in_flight,
            };
            candidates
                .iter()
                .map(|(qid, cands)| {
                    let query = queries.get(qid).ok_or_else(|| {
                        PipelineError::config(
                            "retrieval.queries",
                            format!("run query {qid:?} not in queries file"),
                        )
                    })?;
                    Ok(reranker.rerank(qid, query, cands, &corpus)?)
                })
                .collect::<Result<_, PipelineError>>()?
        };
        write_atomic(&self.artifact(RERANK_RUN_FILE), |w| {
            Ok(rerankeval::write_run(&reranked, tag, w)?)
        })?;
        Ok(counts([("queries", reranked.len() as f64)]))
    }

    fn evaluate(&self) -> Result<BTreeMap<String, f64>, PipelineError> {
        let qrels = Qrels::load(self.input("eval.qrels", self.config.eval.qrels.as_ref())?)?;
        let config = self.config.eval_config();
        let mut runs = vec![("bm25", self.upstream(BM25_RUN_FILE, Stage::Retrieve)?)];
        let rerank = self.artifact(RERANK_RUN_FILE);
        if rerank.is_file() {
            runs.push(("rerank", rerank));
        }
        let mut reports = BTreeMap::new();
        let mut out = BTreeMap::new();
        for (name, path) in runs {
            let run = rerankeval::read_run(BufReader::new(File::open(path)?))?;
            let report = rerankeval::evaluate(&run, &qrels, &config)?;
            for (metric, v) in &report.metrics {
                out.insert(format!("{name}.{metric}"), *v);
            }
            reports.insert(name, report);
        }
        write_atomic(&self.artifact(METRICS_FILE), |w| {
            serde_json::to_writer_pretty(&mut *w, &reports).map_err(io::Error::from)?;
            Ok(w.write_all(b"\n")?)
        })?;
        Ok(out)
    }
}

fn counts<const N: usize>(items: [(&str, f64); N]) -> BTreeMap<String, f64> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
output_dir = "out"
[corpus]
path = "corpus.jsonl"
"#;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.generation.n, 100_000);
        assert_eq!(c.generation.min_chars, 300);
        assert_eq!(c.generation.max_tokens, 64);
        assert_eq!(c.generation.temperature, 0.0);
        assert_eq!(c.curation.top_k, 10_000);
        assert_eq!(c.curation.negative_pool_size, 1000);
        assert_eq!(c.retrieval.candidates_k, 1000);
        assert_eq!((c.rerank.window, c.rerank.stride), (10, 5));
        assert_eq!(c.index, Bm25Params { k1: 0.9, b: 0.4 });
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = PipelineConfig::from_toml_str(&format!("{MINIMAL}\n[generation]\nnn = 3\n"))
            .unwrap_err();
        assert!(matches!(err, PipelineError::ConfigInvalid { .. }));
        assert!(PipelineConfig::from_toml_str(&format!("bogus = 1\n{MINIMAL}")).is_err());
    }

    #[test]
    fn config_hash_ignores_formatting() {
        let a = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        let b = PipelineConfig::from_toml_str(
            "# a comment\noutput_dir   =   \"out\"\n\n[corpus]\n  path = \"corpus.jsonl\"   # trailing\nformat = \"jsonl\"\n",
        )
        .unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.generation.n = 5;
        assert_ne!(a.config_hash(), c.config_hash());
        let mut d = a.clone();
        d.override_seed(9);
        assert_ne!(a.config_hash(), d.config_hash());
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ORDER.into_iter().chain([Stage::All]) {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        c.eval.metrics = vec!["p@5".into()];
        assert!(
            matches!(c.validate(), Err(PipelineError::ConfigInvalid { field, .. }) if field == "eval.metrics")
        );
        let mut c = PipelineConfig::from_toml_str(MINIMAL).unwrap();
        c.rerank.stride = 20;
        assert!(c.validate().is_err());
    }
}
