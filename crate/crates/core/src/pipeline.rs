//! Stage orchestration: run configuration, artifacts and the manifest.
//!
//! Every stage reads its inputs from the output directory, writes its outputs
//! there and records them with their sha256 in `manifest.json`. A stage whose
//! inputs hash to the value recorded last time, and whose outputs are intact,
//! is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::{self, CompareOptions, ComparisonReport, LaborTable, MatchTable, MseMode, WomenShareOverrides};
use crate::demography::{build_specs, plan_calls, Gender, GenerationPlan, NameTable, PromptSpec, SchemeKind};
use crate::error::{Error, Result};
use crate::extract::{self, apply_threshold, FrequencyMatrix, Lexicon, MatrixBuilder, ThresholdReport};
use crate::genclient::{
    self, corpus, Backend, BiasSpec, GenParams, GenerateOptions, MockBackend, RetryPolicy, Timestamps,
};
use crate::inequality::{self, RankDistribution};
use crate::regress::{self, AggregateReport, JobFit, Observations};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;
pub const OUT_ENV: &str = "OCCUPROBE_OUT";

const PLAN_FILE: &str = "plan.json";
const CORPUS_FILE: &str = "corpus.jsonl";
const MATRIX_RAW: &str = "extract/matrix_raw.csv";
const MATRIX: &str = "extract/matrix.csv";
const EXTRACT_SUMMARY: &str = "extract/summary.json";
const ANALYZE_SUMMARY: &str = "analyze/summary.json";
const REGRESS_SUMMARY: &str = "regress/summary.json";
const COMPARE_SUMMARY: &str = "compare/summary.json";
const REPORT_FILE: &str = "report.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Plan,
    Generate,
    Extract,
    Analyze,
    Regress,
    Compare,
    Report,
    Sweep,
}

impl Stage {
    /// The main pipeline in execution order; `sweep` runs only on request.
    pub const PIPELINE: [Stage; 7] = [
        Stage::Plan,
        Stage::Generate,
        Stage::Extract,
        Stage::Analyze,
        Stage::Regress,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Plan => "plan",
            Stage::Generate => "generate",
            Stage::Extract => "extract",
            Stage::Analyze => "analyze",
            Stage::Regress => "regress",
            Stage::Compare => "compare",
            Stage::Report => "report",
            Stage::Sweep => "sweep",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::PIPELINE
            .into_iter()
            .chain([Stage::Sweep])
            .find(|st| st.as_str() == s.trim())
            .ok_or_else(|| Error::validation(format!("unknown stage {s:?}")))
    }
}

/// Where completions come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Http(String),
    /// Mock backend with a bias spec file, or the shipped spec.
    Mock(Option<PathBuf>),
    /// A recorded corpus entering at the generate stage unchanged.
    Replay(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mock" {
            Ok(BackendSpec::Mock(None))
        } else if let Some(p) = s.strip_prefix("mock:") {
            Ok(BackendSpec::Mock(Some(PathBuf::from(p))))
        } else if let Some(p) = s.strip_prefix("replay:") {
            Ok(BackendSpec::Replay(PathBuf::from(p)))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(BackendSpec::Http(s.trim_end_matches('/').to_string()))
        } else {
            Err(Error::validation(format!(
                "backend {s:?} is not a URL, mock, mock:PATH or replay:PATH"
            )))
        }
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Http(u) => f.write_str(u),
            BackendSpec::Mock(None) => f.write_str("mock"),
            BackendSpec::Mock(Some(p)) => write!(f, "mock:{}", p.display()),
            BackendSpec::Replay(p) => write!(f, "replay:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GiniMode {
    /// All variants of a gender within a scheme form one distribution.
    #[default]
    Pooled,
    PerVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepGrid {
    TopK,
    Temperature,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub top_k: u32,
    pub temperature: f64,
    pub max_words: u32,
    pub max_in_flight: usize,
    pub batch_size: u32,
    pub max_new_tokens: u32,
    pub checkpoint_every: u64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub resume: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let p = GenParams::default();
        let o = GenerateOptions::default();
        GenerationConfig {
            top_k: p.top_k,
            temperature: p.temperature,
            max_words: p.max_words,
            max_in_flight: o.max_in_flight,
            batch_size: o.batch_size,
            max_new_tokens: o.max_new_tokens,
            checkpoint_every: o.checkpoint_every,
            timeout_secs: 60,
            max_retries: o.retry.max_retries,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub threshold: f64,
    pub gini_mode: GiniMode,
    /// Compute Gini and Lorenz data on the unthresholded matrix.
    pub gini_on_raw: bool,
    pub observations: Observations,
    pub mse_mode: MseMode,
    /// CSV `truth,ethnicity,women_pct` replacing the equal-share assumption.
    pub women_overrides: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            threshold: extract::DEFAULT_THRESHOLD,
            gini_mode: GiniMode::Pooled,
            gini_on_raw: false,
            observations: Observations::AllCalls,
            mse_mode: MseMode::Adjusted,
            women_overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub schemes: Vec<SchemeKind>,
    pub calls_per_variant: u64,
    pub grid: SweepGrid,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            schemes: vec![SchemeKind::Base],
            calls_per_variant: 1000,
            grid: SweepGrid::Both,
        }
    }
}

/// Everything a run needs. Loaded from TOML; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schemes: Vec<SchemeKind>,
    /// Overrides the default 7,000 calls per identity variant.
    pub calls_per_variant: Option<u64>,
    /// Overrides the default 1,000 calls per name.
    pub calls_per_name: Option<u64>,
    pub capitalize_religion: bool,
    pub backend: String,
    pub seed: u64,
    pub out: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub names: Option<PathBuf>,
    pub labor: Option<PathBuf>,
    pub match_table: Option<PathBuf>,
    /// Subject names whose records are dropped; defaults to the lexicon's list.
    pub excluded_names: Option<Vec<String>>,
    pub generation: GenerationConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schemes: SchemeKind::ALL.to_vec(),
            calls_per_variant: None,
            calls_per_name: None,
            capitalize_religion: true,
            backend: "mock".into(),
            seed: 0,
            out: PathBuf::from("occuprobe-out"),
            lexicon: None,
            names: None,
            labor: None,
            match_table: None,
            excluded_names: None,
            generation: GenerationConfig::default(),
            analysis: AnalysisConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        for p in [
            &mut cfg.lexicon,
            &mut cfg.names,
            &mut cfg.labor,
            &mut cfg.match_table,
            &mut cfg.analysis.women_overrides,
        ]
        .into_iter()
        .flatten()
        {
            rebase(base_dir, p);
        }
        rebase(base_dir, &mut cfg.out);
        if let Some(rest) = cfg.backend.strip_prefix("mock:") {
            let mut p = PathBuf::from(rest);
            rebase(base_dir, &mut p);
            cfg.backend = format!("mock:{}", p.display());
        } else if let Some(rest) = cfg.backend.strip_prefix("replay:") {
            let mut p = PathBuf::from(rest);
            rebase(base_dir, &mut p);
            cfg.backend = format!("replay:{}", p.display());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        self.backend.parse()
    }

    pub fn params(&self) -> GenParams {
        GenParams {
            top_k: self.generation.top_k,
            temperature: self.generation.temperature,
            max_words: self.generation.max_words,
            seed: Some(self.seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::validation("config selects no schemes"));
        }
        let unique: BTreeSet<_> = self.schemes.iter().collect();
        if unique.len() != self.schemes.len() {
            return Err(Error::validation("config lists a scheme twice"));
        }
        if self.sweep.schemes.is_empty() {
            return Err(Error::validation("sweep selects no schemes"));
        }
        let t = self.analysis.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::validation(format!("threshold {t} outside (0, 1)")));
        }
        self.params().validate()?;
        let g = &self.generation;
        if g.max_in_flight == 0 || g.batch_size == 0 || g.max_new_tokens == 0 || g.checkpoint_every == 0 {
            return Err(Error::validation(
                "max_in_flight, batch_size, max_new_tokens and checkpoint_every must be positive",
            ));
        }
        let mut files: Vec<(&str, &Path)> = Vec::new();
        for (key, p) in [
            ("lexicon", &self.lexicon),
            ("names", &self.names),
            ("labor", &self.labor),
            ("match_table", &self.match_table),
            ("analysis.women_overrides", &self.analysis.women_overrides),
        ] {
            if let Some(p) = p {
                files.push((key, p));
            }
        }
        let backend = self.backend_spec()?;
        match &backend {
            BackendSpec::Mock(Some(p)) | BackendSpec::Replay(p) => files.push(("backend", p)),
            _ => {}
        }
        for (key, p) in files {
            if !p.is_file() {
                return Err(Error::validation(format!("{key}: file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Output directory precedence: explicit flag, then `OCCUPROBE_OUT`, then the config.
pub fn resolve_out(cfg: &mut RunConfig, flag: Option<PathBuf>) {
    if let Some(p) = flag {
        cfg.out = p;
    } else if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        cfg.out = PathBuf::from(p);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs_hash: String,
    /// Output path relative to the run directory, and its sha256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub toolkit_version: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            format: MANIFEST_FORMAT,
            toolkit_version: corpus::TOOLKIT_VERSION.to_string(),
            stages: BTreeMap::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Integrity(format!(
                "{}: manifest format {} is not supported",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn files(&self) -> impl Iterator<Item = (&String, &String)> {
        self.stages.values().flat_map(|r| r.outputs.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// False when the stage was skipped because nothing changed.
    pub ran: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn put(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes.as_ref()).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), sha256_hex(bytes.as_ref()));
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.put(rel, s)
    }

    /// Records a file some other writer produced.
    fn record(&mut self, rel: &str) -> Result<()> {
        let h = sha256_file(&self.root.join(rel))?;
        self.files.insert(rel.to_string(), h);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub records: u64,
    pub calls: u64,
    pub misses: u64,
    pub loss_rate: f64,
    pub excluded_records: u64,
    pub threshold: ThresholdReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GiniRow {
    pub scheme: SchemeKind,
    pub gender: Gender,
    /// Category value, or "all" for pooled rows.
    pub value: String,
    pub jobs: usize,
    pub gini: Option<f64>,
    /// Percent of the base-man Gini.
    pub relative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopRow {
    pub scheme: SchemeKind,
    pub gender: Gender,
    pub value: String,
    pub top: inequality::TopJobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub gini: Vec<GiniRow>,
    pub top_jobs: Vec<TopRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressSummary {
    pub aggregate: Option<AggregateReport>,
    pub skipped_schemes: Vec<(SchemeKind, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: usize,
    pub top_k: u32,
    pub temperature: f64,
    pub records: u64,
    pub loss_rate: f64,
    pub unique_jobs: usize,
    pub gini_man: Option<f64>,
    pub gini_woman: Option<f64>,
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map(f6).unwrap_or_default()
}

/// Per (gender, value) summed counts for a scheme; base rows get value "all".
fn cell_counts(m: &FrequencyMatrix, scheme: SchemeKind) -> BTreeMap<(Gender, String), BTreeMap<String, u64>> {
    let mut out: BTreeMap<(Gender, String), BTreeMap<String, u64>> = BTreeMap::new();
    for r in m.rows_in(scheme) {
        let key = (r.subject.gender, r.subject.value.clone().unwrap_or_else(|| "all".into()));
        let e = out.entry(key).or_default();
        for (j, c) in &r.counts {
            *e.entry(j.clone()).or_insert(0) += c;
        }
    }
    out
}

fn gini_groups(m: &FrequencyMatrix, scheme: SchemeKind, mode: GiniMode) -> BTreeMap<(Gender, String), BTreeMap<String, u64>> {
    match mode {
        GiniMode::PerVariant => cell_counts(m, scheme),
        GiniMode::Pooled => Gender::BOTH
            .into_iter()
            .filter(|&g| m.rows_in(scheme).any(|r| r.subject.gender == g))
            .map(|g| ((g, "all".to_string()), m.pooled_counts(scheme, g)))
            .collect(),
    }
}

fn distribution(counts: &BTreeMap<String, u64>) -> Option<RankDistribution> {
    RankDistribution::from_counts(counts.iter().filter(|(_, &c)| c > 0)).ok()
}

/// One run directory plus its configuration.
pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Pipeline {
    pub fn open(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mpath = out.join(MANIFEST);
        let manifest = if mpath.exists() {
            Manifest::load(&mpath)?
        } else {
            Manifest::default()
        };
        Ok(Pipeline { cfg, out, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Runs the requested stages in pipeline order.
    pub fn run(&mut self, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
        let wanted: BTreeSet<Stage> = stages.iter().copied().collect();
        let mut outcomes = Vec::new();
        for stage in Stage::PIPELINE.into_iter().chain([Stage::Sweep]) {
            if !wanted.contains(&stage) {
                continue;
            }
            let ran = match stage {
                Stage::Plan => self.stage_plan()?,
                Stage::Generate => self.stage_generate()?,
                Stage::Extract => self.stage_extract()?,
                Stage::Analyze => self.stage_analyze()?,
                Stage::Regress => self.stage_regress()?,
                Stage::Compare => self.stage_compare()?,
                Stage::Report => self.stage_report()?,
                Stage::Sweep => self.stage_sweep()?,
            };
            outcomes.push(StageOutcome { stage, ran });
        }
        Ok(outcomes)
    }

    fn outputs(&self) -> Outputs {
        Outputs {
            root: self.out.clone(),
            files: BTreeMap::new(),
        }
    }

    fn fresh(&self, stage: Stage, inputs_hash: &str) -> bool {
        let Some(rec) = self.manifest.stages.get(&stage) else {
            return false;
        };
        rec.inputs_hash == inputs_hash
            && rec
                .outputs
                .iter()
                .all(|(rel, h)| sha256_file(&self.out.join(rel)).is_ok_and(|x| &x == h))
    }

    fn commit(&mut self, stage: Stage, inputs_hash: String, outputs: Outputs) -> Result<()> {
        if let Some(old) = self.manifest.stages.get(&stage) {
            for rel in old.outputs.keys().filter(|r| !outputs.files.contains_key(*r)) {
                let p = self.out.join(rel);
                if p.exists() {
                    std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        self.manifest.stages.insert(
            stage,
            StageRecord {
                inputs_hash,
                outputs: outputs.files,
            },
        );
        let path = self.out.join(MANIFEST);
        let tmp = self.out.join(format!("{MANIFEST}.tmp"));
        std::fs::write(&tmp, self.manifest.to_json()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Path and hash of an artifact that `stage` must have produced.
    fn require(&self, stage: Stage, rel: &str) -> Result<(PathBuf, String)> {
        let missing = || Error::MissingPrerequisite {
            stage: stage.to_string(),
            artifact: rel.to_string(),
        };
        let rec = self.manifest.stages.get(&stage).ok_or_else(missing)?;
        let want = rec.outputs.get(rel).ok_or_else(missing)?;
        let path = self.out.join(rel);
        if !path.exists() {
            return Err(missing());
        }
        let got = sha256_file(&path)?;
        if &got != want {
            return Err(Error::Integrity(format!(
                "{} changed since `{stage}` wrote it; rerun `{stage}`",
                path.display()
            )));
        }
        Ok((path, got))
    }

    fn read_required(&self, stage: Stage, rel: &str) -> Result<(String, String)> {
        let (p, h) = self.require(stage, rel)?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok((text, h))
    }

    fn load_text(path: &Option<PathBuf>, shipped: &str) -> Result<(String, String)> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => shipped.to_string(),
        };
        let h = sha256_hex(text.as_bytes());
        Ok((text, h))
    }

    fn names(&self) -> Result<NameTable> {
        match &self.cfg.names {
            Some(p) => NameTable::load(p),
            None => Ok(NameTable::shipped()),
        }
    }

    fn lexicon(&self) -> Result<(Lexicon, String)> {
        let (text, h) = Self::load_text(&self.cfg.lexicon, extract::DEFAULT_LEXICON_CSV)?;
        let source = self
            .cfg
            .lexicon
            .as_ref()
            .map_or("lexicon.csv".to_string(), |p| p.display().to_string());
        let mut lex = Lexicon::from_csv_str(&text, &source)?;
        if let Some(names) = &self.cfg.excluded_names {
            lex = lex.with_excluded(names);
        }
        let excluded: Vec<&String> = lex.excluded().iter().collect();
        let h = hash_json(&serde_json::json!({ "lexicon": h, "excluded": excluded }));
        Ok((lex, h))
    }

    fn with_calls(&self, mut specs: Vec<PromptSpec>, per_variant: Option<u64>, per_name: Option<u64>) -> Vec<PromptSpec> {
        for s in &mut specs {
            let c = if s.subject.name.is_some() { per_name } else { per_variant };
            if let Some(c) = c {
                s.calls = c;
            }
        }
        specs
    }

    fn build_plan(&self) -> Result<GenerationPlan> {
        match self.cfg.backend_spec()? {
            BackendSpec::Replay(p) => corpus::derive_plan(&p),
            _ => {
                let specs = build_specs(&self.cfg.schemes, &self.names()?, self.cfg.capitalize_religion)?;
                plan_calls(self.with_calls(specs, self.cfg.calls_per_variant, self.cfg.calls_per_name))
            }
        }
    }

    fn stage_plan(&mut self) -> Result<bool> {
        let plan = self.build_plan()?;
        let json = plan.to_json();
        let inputs = sha256_hex(json.as_bytes());
        if self.fresh(Stage::Plan, &inputs) {
            return Ok(false);
        }
        let mut o = self.outputs();
        o.put(PLAN_FILE, json)?;
        self.commit(Stage::Plan, inputs, o)?;
        Ok(true)
    }

    fn options(&self, timestamps: Timestamps) -> GenerateOptions {
        let g = &self.cfg.generation;
        GenerateOptions {
            max_in_flight: g.max_in_flight,
            batch_size: g.batch_size,
            checkpoint_every: g.checkpoint_every,
            max_new_tokens: g.max_new_tokens,
            retry: RetryPolicy {
                max_retries: g.max_retries,
                ..RetryPolicy::default()
            },
            timestamps,
            resume: g.resume,
        }
    }

    /// A live backend, an identity for input hashing, and its timestamp policy.
    fn backend(&self) -> Result<(Box<dyn Backend>, serde_json::Value, Timestamps)> {
        match self.cfg.backend_spec()? {
            BackendSpec::Mock(path) => {
                let spec = match &path {
                    Some(p) => BiasSpec::load(p)?,
                    None => BiasSpec::shipped(),
                };
                let id = serde_json::json!({ "mock": spec.content_hash(), "seed": self.cfg.seed });
                let b = MockBackend::new(spec, self.cfg.seed)?;
                Ok((Box::new(b), id, Timestamps::Fixed(chrono::DateTime::UNIX_EPOCH)))
            }
            #[cfg(feature = "http")]
            BackendSpec::Http(url) => {
                let b = genclient::http::HttpBackend::new(
                    &url,
                    std::time::Duration::from_secs(self.cfg.generation.timeout_secs),
                );
                Ok((Box::new(b), serde_json::json!({ "http": url }), Timestamps::Wall))
            }
            #[cfg(not(feature = "http"))]
            BackendSpec::Http(_) => Err(Error::validation("this build has no HTTP backend support")),
            BackendSpec::Replay(_) => Err(Error::validation(
                "replay corpora cannot generate new completions",
            )),
        }
    }

    fn stage_generate(&mut self) -> Result<bool> {
        let (plan_text, plan_hash) = self.read_required(Stage::Plan, PLAN_FILE)?;
        let plan = GenerationPlan::from_json(&plan_text)?;
        let spec = self.cfg.backend_spec()?;
        let corpus_path = self.out.join(CORPUS_FILE);
        let errors_rel = format!("{CORPUS_FILE}.errors.jsonl");
        if let BackendSpec::Replay(src) = &spec {
            let src_hash = sha256_file(src)?;
            let inputs = hash_json(&serde_json::json!({ "plan": plan_hash, "replay": src_hash }));
            if self.fresh(Stage::Generate, &inputs) {
                return Ok(false);
            }
            let mut rdr = corpus::CorpusReader::open(src)?;
            let mut n = 0u64;
            for r in rdr.by_ref() {
                r?;
                n += 1;
            }
            if n != plan.total_calls {
                return Err(Error::Integrity(format!(
                    "{} holds {n} records but its plan has {}",
                    src.display(),
                    plan.total_calls
                )));
            }
            std::fs::copy(src, &corpus_path).map_err(|e| Error::io(&corpus_path, e))?;
            let mut o = self.outputs();
            o.record(CORPUS_FILE)?;
            self.commit(Stage::Generate, inputs, o)?;
            return Ok(true);
        }
        let (backend, id, ts) = self.backend()?;
        let params = self.cfg.params();
        let inputs = hash_json(&serde_json::json!({
            "plan": plan_hash,
            "backend": id,
            "params": params,
            "max_new_tokens": self.cfg.generation.max_new_tokens,
            "batch_size": self.cfg.generation.batch_size,
        }));
        if self.fresh(Stage::Generate, &inputs) {
            return Ok(false);
        }
        let errors_path = self.out.join(&errors_rel);
        let opts = self.options(ts);
        if errors_path.exists() && !opts.resume {
            std::fs::remove_file(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
        }
        genclient::generate_corpus(&plan, backend.as_ref(), &params, &corpus_path, &opts)?;
        let mut o = self.outputs();
        o.record(CORPUS_FILE)?;
        if errors_path.exists() {
            o.record(&errors_rel)?;
        }
        self.commit(Stage::Generate, inputs, o)?;
        Ok(true)
    }

    fn stage_extract(&mut self) -> Result<bool> {
        let (plan_text, plan_hash) = self.read_required(Stage::Plan, PLAN_FILE)?;
        let (corpus_path, corpus_hash) = self.require(Stage::Generate, CORPUS_FILE)?;
        let (lex, lex_hash) = self.lexicon()?;
        let frac = self.cfg.analysis.threshold;
        let inputs = hash_json(&serde_json::json!({
            "plan": plan_hash, "corpus": corpus_hash, "lexicon": lex_hash, "threshold": frac,
        }));
        if self.fresh(Stage::Extract, &inputs) {
            return Ok(false);
        }
        let plan = GenerationPlan::from_json(&plan_text)?;
        let mut rdr = corpus::CorpusReader::open(&corpus_path)?;
        if let Some(h) = &rdr.header().plan_hash {
            if h != &plan.hash {
                return Err(Error::Integrity(format!(
                    "corpus plan hash {h} does not match {PLAN_FILE} ({})",
                    plan.hash
                )));
            }
        }
        let mut b = MatrixBuilder::new(&lex, lex.excluded()).for_plan(&plan);
        let mut records = 0u64;
        for r in rdr.by_ref() {
            b.add(&r?)?;
            records += 1;
        }
        let raw = b.finish();
        let (kept, report) = apply_threshold(&raw, frac)?;

        let mut o = self.outputs();
        o.put(MATRIX_RAW, raw.to_wide_csv())?;
        o.put(MATRIX, kept.to_wide_csv())?;
        let shares = raw.rows.iter().zip(&report.rows).map(|(r, s)| {
            vec![
                r.subject.scheme.to_string(),
                r.subject.gender.to_string(),
                r.subject.value.clone().unwrap_or_default(),
                r.subject.name.clone().unwrap_or_default(),
                r.calls.to_string(),
                r.misses.to_string(),
                s.mentions.to_string(),
                s.kept_mentions.to_string(),
                f6(s.preserved_share),
            ]
        });
        o.put(
            "extract/rows.csv",
            csv_string(
                &["scheme", "gender", "value", "name", "calls", "misses", "mentions", "kept_mentions", "preserved_share"],
                shares,
            ),
        )?;
        o.put(
            "extract/pools.csv",
            csv_string(
                &["scheme", "pool_calls", "cutoff", "kept_jobs", "dropped_jobs"],
                report.pools.iter().map(|p| {
                    vec![
                        p.scheme.to_string(),
                        p.pool_calls.to_string(),
                        p.cutoff.to_string(),
                        p.kept_jobs.len().to_string(),
                        p.dropped_jobs.to_string(),
                    ]
                }),
            ),
        )?;
        o.put_json(
            EXTRACT_SUMMARY,
            &ExtractSummary {
                records,
                calls: raw.calls(),
                misses: raw.misses(),
                loss_rate: raw.loss_rate(),
                excluded_records: raw.excluded_records,
                threshold: report,
            },
        )?;
        self.commit(Stage::Extract, inputs, o)?;
        Ok(true)
    }

    fn load_matrix(&self, rel: &str) -> Result<(FrequencyMatrix, String)> {
        let (text, h) = self.read_required(Stage::Extract, rel)?;
        Ok((FrequencyMatrix::from_wide_csv(&text, rel)?, h))
    }

    fn stage_analyze(&mut self) -> Result<bool> {
        let (kept, kept_hash) = self.load_matrix(MATRIX)?;
        let (raw, raw_hash) = self.load_matrix(MATRIX_RAW)?;
        let a = &self.cfg.analysis;
        let inputs = hash_json(&serde_json::json!({
            "matrix": kept_hash, "raw": raw_hash, "mode": a.gini_mode, "on_raw": a.gini_on_raw,
        }));
        if self.fresh(Stage::Analyze, &inputs) {
            return Ok(false);
        }
        let gm = if a.gini_on_raw { &raw } else { &kept };

        let base_man = distribution(&gm.pooled_counts(SchemeKind::Base, Gender::Man))
            .and_then(|d| d.gini().ok());
        let mut gini_rows = Vec::new();
        let mut lorenz_rows = Vec::new();
        let mut div_rows = Vec::new();
        for scheme in SchemeKind::ALL {
            for ((g, v), counts) in gini_groups(gm, scheme, a.gini_mode) {
                let dist = distribution(&counts);
                let gini = dist.as_ref().and_then(|d| d.gini().ok());
                let relative = match (gini, base_man) {
                    (Some(x), Some(b)) => inequality::relative_gini(x, b).ok(),
                    _ => None,
                };
                if let Some(d) = &dist {
                    for (px, py) in d.lorenz()? {
                        lorenz_rows.push(vec![scheme.to_string(), g.to_string(), v.clone(), f6(px), f6(py)]);
                    }
                    let q = |s| inequality::cumulative_quantile(d, s).map(|n| n.to_string());
                    div_rows.push(vec![
                        scheme.to_string(),
                        g.to_string(),
                        v.clone(),
                        d.n().to_string(),
                        f6(d.cumulative[d.n().min(5) - 1]),
                        q(0.5)?,
                        q(0.9)?,
                        q(0.95)?,
                    ]);
                }
                gini_rows.push(GiniRow {
                    scheme,
                    gender: g,
                    value: v,
                    jobs: dist.as_ref().map_or(0, |d| d.n()),
                    gini,
                    relative,
                });
            }
        }

        let mut top_rows = Vec::new();
        let mut rank_rows = Vec::new();
        for scheme in SchemeKind::ALL {
            for ((g, v), counts) in cell_counts(&kept, scheme) {
                top_rows.push(TopRow {
                    scheme,
                    gender: g,
                    value: v.clone(),
                    top: inequality::top_jobs(&counts, 5)?,
                });
                if let Some(d) = distribution(&counts) {
                    for (i, (job, c)) in d.jobs.iter().zip(&d.counts).enumerate() {
                        rank_rows.push(vec![
                            scheme.to_string(),
                            g.to_string(),
                            v.clone(),
                            (i + 1).to_string(),
                            job.clone(),
                            c.to_string(),
                            f6(c / d.total()),
                        ]);
                    }
                }
            }
        }

        let mut over_rows = Vec::new();
        let mut range_rows = Vec::new();
        for scheme in SchemeKind::INTERSECTIONS.into_iter().chain([SchemeKind::Continent]) {
            let values = regress::scheme_values(&kept, scheme);
            if values.len() < 2 {
                continue;
            }
            let pts = inequality::overrep_factors(&kept, scheme, &values)?;
            for p in &pts {
                let flag = match (p.man_factor, p.woman_factor) {
                    (None, _) => "no_man_mentions",
                    (_, None) => "no_woman_mentions",
                    _ => "",
                };
                over_rows.push(vec![
                    scheme.to_string(),
                    p.job.clone(),
                    p.value.clone(),
                    opt6(p.man_factor),
                    opt6(p.woman_factor),
                    f6(p.x),
                    f6(p.y),
                    f6(p.distance),
                    flag.to_string(),
                ]);
            }
            for (job, r) in inequality::factor_ranges(&pts) {
                range_rows.push(vec![scheme.to_string(), job, f6(r)]);
            }
        }

        let mut o = self.outputs();
        o.put(
            "analyze/gini.csv",
            csv_string(
                &["scheme", "gender", "value", "jobs", "gini", "relative_pct"],
                gini_rows.iter().map(|r| {
                    vec![
                        r.scheme.to_string(),
                        r.gender.to_string(),
                        r.value.clone(),
                        r.jobs.to_string(),
                        opt6(r.gini),
                        r.relative.map(|x| format!("{x:.2}")).unwrap_or_default(),
                    ]
                }),
            ),
        )?;
        o.put(
            "analyze/diversity.csv",
            csv_string(
                &["scheme", "gender", "value", "unique_jobs", "top5_share", "jobs_for_50", "jobs_for_90", "jobs_for_95"],
                div_rows,
            ),
        )?;
        o.put(
            "analyze/top_jobs.csv",
            csv_string(
                &["scheme", "gender", "value", "rank", "job", "share"],
                top_rows.iter().flat_map(|t| {
                    let head = vec![t.scheme.to_string(), t.gender.to_string(), t.value.clone()];
                    let mut rows: Vec<Vec<String>> = t
                        .top
                        .jobs
                        .iter()
                        .enumerate()
                        .map(|(i, (j, s))| {
                            let mut r = head.clone();
                            r.extend([(i + 1).to_string(), j.clone(), format!("{s:.4}")]);
                            r
                        })
                        .collect();
                    let mut sum = head.clone();
                    sum.extend(["sum".to_string(), String::new(), format!("{:.4}", t.top.cumulative)]);
                    rows.push(sum);
                    rows
                }),
            ),
        )?;
        o.put(
            "plots/lorenz.csv",
            csv_string(&["scheme", "gender", "value", "population_share", "count_share"], lorenz_rows),
        )?;
        o.put(
            "plots/rank_frequency.csv",
            csv_string(&["scheme", "gender", "value", "rank", "job", "count", "share"], rank_rows),
        )?;
        o.put(
            "plots/overrep.csv",
            csv_string(
                &["scheme", "job", "value", "man_factor", "woman_factor", "x", "y", "distance", "flag"],
                over_rows,
            ),
        )?;
        o.put("plots/overrep_ranges.csv", csv_string(&["scheme", "job", "range"], range_rows))?;
        o.put_json(
            ANALYZE_SUMMARY,
            &AnalyzeSummary {
                gini: gini_rows,
                top_jobs: top_rows,
            },
        )?;
        self.commit(Stage::Analyze, inputs, o)?;
        Ok(true)
    }

    fn stage_regress(&mut self) -> Result<bool> {
        let (raw, raw_hash) = self.load_matrix(MATRIX_RAW)?;
        let (summary_text, summary_hash) = self.read_required(Stage::Extract, EXTRACT_SUMMARY)?;
        let obs = self.cfg.analysis.observations;
        let inputs = hash_json(&serde_json::json!({
            "raw": raw_hash, "summary": summary_hash, "observations": obs,
        }));
        if self.fresh(Stage::Regress, &inputs) {
            return Ok(false);
        }
        let summary: ExtractSummary = serde_json::from_str(&summary_text)?;
        let has_base = raw.rows_in(SchemeKind::Base).next().is_some();
        let mut fits: Vec<JobFit> = Vec::new();
        let mut skipped = Vec::new();
        for scheme in SchemeKind::INTERSECTIONS {
            let Some(pool) = summary.threshold.pool(scheme) else {
                continue;
            };
            if !has_base {
                skipped.push((scheme, "no base rows to serve as reference group".to_string()));
                continue;
            }
            for job in &pool.kept_jobs {
                fits.push(regress::fit_job(&raw, scheme, job, obs)?);
            }
        }
        let aggregate = if fits.is_empty() {
            None
        } else {
            Some(regress::aggregate(&fits)?)
        };
        let mut o = self.outputs();
        o.put("regress/fits.csv", regress::fits_csv(&fits))?;
        o.put("plots/pvalue_grid.csv", regress::pvalue_grid_csv(&fits))?;
        o.put(
            "regress/r2.csv",
            csv_string(
                &["scheme", "job", "r2_main", "r2_plus_woman", "r2_full", "converged", "separation", "error"],
                fits.iter().map(|f| {
                    let s = f.staged.as_ref();
                    vec![
                        f.scheme.to_string(),
                        f.job.clone(),
                        opt6(s.map(|s| s.main_without_woman)),
                        opt6(s.map(|s| s.plus_woman)),
                        opt6(s.map(|s| s.full)),
                        f.fit.as_ref().map_or(String::new(), |x| x.converged.to_string()),
                        f.fit.as_ref().map_or(String::new(), |x| x.separation_detected.to_string()),
                        f.error.clone().unwrap_or_default(),
                    ]
                }),
            ),
        )?;
        if let Some(a) = &aggregate {
            o.put("regress/aggregate.csv", regress::aggregate_csv(a))?;
        }
        o.put_json(
            REGRESS_SUMMARY,
            &RegressSummary {
                aggregate,
                skipped_schemes: skipped,
            },
        )?;
        self.commit(Stage::Regress, inputs, o)?;
        Ok(true)
    }

    fn women_overrides(&self) -> Result<(WomenShareOverrides, String)> {
        let Some(p) = &self.cfg.analysis.women_overrides else {
            return Ok((WomenShareOverrides::new(), String::new()));
        };
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut out = WomenShareOverrides::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |x| x.line() as usize);
            let fail = |reason: String| Error::Load {
                path: p.display().to_string(),
                line,
                reason,
            };
            if rec.len() != 3 {
                return Err(fail("expected truth,ethnicity,women_pct".into()));
            }
            let pct: f64 = rec[2].trim().parse().map_err(|_| fail(format!("bad percentage {:?}", &rec[2])))?;
            if !(0.0..=100.0).contains(&pct) {
                return Err(fail(format!("percentage {pct} outside [0, 100]")));
            }
            out.insert((rec[0].trim().to_string(), rec[1].trim().to_string()), pct / 100.0);
        }
        Ok((out, sha256_hex(text.as_bytes())))
    }

    fn stage_compare(&mut self) -> Result<bool> {
        let (kept, kept_hash) = self.load_matrix(MATRIX)?;
        let (summary_text, summary_hash) = self.read_required(Stage::Extract, EXTRACT_SUMMARY)?;
        let (labor_text, labor_hash) = Self::load_text(&self.cfg.labor, benchmark::DEFAULT_LABOR_CSV)?;
        let (match_text, match_hash) = Self::load_text(&self.cfg.match_table, benchmark::DEFAULT_MATCH_TABLE)?;
        let (overrides, over_hash) = self.women_overrides()?;
        let mode = self.cfg.analysis.mse_mode;
        let inputs = hash_json(&serde_json::json!({
            "matrix": kept_hash, "summary": summary_hash, "labor": labor_hash,
            "match": match_hash, "overrides": over_hash, "mode": mode,
        }));
        if self.fresh(Stage::Compare, &inputs) {
            return Ok(false);
        }
        let summary: ExtractSummary = serde_json::from_str(&summary_text)?;
        let labor = LaborTable::from_csv_str(&labor_text, "labor table")?;
        let table = MatchTable::from_str(&match_text, "match table")?;
        let opts = CompareOptions {
            mode,
            women_overrides: overrides,
        };
        let mut reports: Vec<ComparisonReport> = Vec::new();
        let mut o = self.outputs();
        for scheme in [SchemeKind::Base, SchemeKind::Ethnicity] {
            let Some(pool) = summary.threshold.pool(scheme) else {
                continue;
            };
            let r = benchmark::compare(&kept, scheme, &pool.kept_jobs, &table, &labor, &opts)?;
            let name = scheme.as_str();
            o.put(&format!("compare/{name}_stats.csv"), r.stats_csv())?;
            o.put(&format!("compare/{name}_top5.csv"), r.top5_csv())?;
            o.put(&format!("plots/heat_{name}.csv"), r.heat_csv())?;
            o.put(&format!("plots/barbell_{name}.csv"), r.barbell_csv())?;
            let mut matching: Vec<Vec<String>> = r
                .units
                .iter()
                .map(|u| vec![u.unit.clone(), "matched".into(), u.truth.clone()])
                .collect();
            matching.extend(
                r.unpredicted_units
                    .iter()
                    .map(|u| vec![u.clone(), "matched".into(), "no predicted mentions in any cell".into()]),
            );
            matching.extend(r.excluded.iter().map(|(t, why)| vec![t.clone(), "excluded".into(), why.clone()]));
            o.put(
                &format!("compare/{name}_matching.csv"),
                csv_string(&["unit", "status", "detail"], matching),
            )?;
            reports.push(r);
        }
        o.put_json(COMPARE_SUMMARY, &reports)?;
        self.commit(Stage::Compare, inputs, o)?;
        Ok(true)
    }

    fn optional<T: for<'de> Deserialize<'de>>(&self, stage: Stage, rel: &str) -> Result<Option<T>> {
        match self.read_required(stage, rel) {
            Ok((text, _)) => Ok(Some(serde_json::from_str(&text)?)),
            Err(Error::MissingPrerequisite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn stage_report(&mut self) -> Result<bool> {
        let upstream: BTreeMap<&Stage, &StageRecord> = self
            .manifest
            .stages
            .iter()
            .filter(|(s, _)| !matches!(s, Stage::Report | Stage::Sweep))
            .collect();
        if upstream.is_empty() {
            return Err(Error::validation(
                "manifest lists no stage outputs; run `plan` or a later stage first",
            ));
        }
        let inputs = hash_json(&serde_json::to_value(&upstream)?);
        if self.fresh(Stage::Report, &inputs) {
            return Ok(false);
        }
        let text = render_report(
            self.optional(Stage::Plan, PLAN_FILE)?,
            self.optional(Stage::Extract, EXTRACT_SUMMARY)?,
            self.optional(Stage::Analyze, ANALYZE_SUMMARY)?,
            self.optional(Stage::Regress, REGRESS_SUMMARY)?,
            self.optional(Stage::Compare, COMPARE_SUMMARY)?,
        );
        let mut o = self.outputs();
        o.put(REPORT_FILE, text)?;
        self.commit(Stage::Report, inputs, o)?;
        Ok(true)
    }

    fn stage_sweep(&mut self) -> Result<bool> {
        let (backend, id, ts) = self.backend()?;
        let sw = &self.cfg.sweep;
        let specs = build_specs(&sw.schemes, &self.names()?, self.cfg.capitalize_religion)?;
        let specs = self.with_calls(specs, Some(sw.calls_per_variant), Some(sw.calls_per_variant));
        let seed = Some(self.cfg.seed);
        let grid: Vec<GenParams> = match sw.grid {
            SweepGrid::TopK => genclient::top_k_grid(seed),
            SweepGrid::Temperature => genclient::temperature_grid(seed),
            SweepGrid::Both => genclient::top_k_grid(seed)
                .into_iter()
                .chain(genclient::temperature_grid(seed))
                .collect(),
        };
        let grid: Vec<GenParams> = grid
            .into_iter()
            .map(|p| GenParams {
                max_words: self.cfg.generation.max_words,
                ..p
            })
            .collect();
        let (lex, lex_hash) = self.lexicon()?;
        let inputs = hash_json(&serde_json::json!({
            "specs": sha256_hex(serde_json::to_string(&specs)?.as_bytes()),
            "grid": grid, "backend": id, "lexicon": lex_hash,
        }));
        if self.fresh(Stage::Sweep, &inputs) {
            return Ok(false);
        }
        let dir = self.out.join("sweep");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..grid.len() {
            let p = corpus::errors_path(&dir.join(format!("sweep_{i:02}.jsonl")));
            if p.exists() {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let opts = GenerateOptions {
            resume: false,
            ..self.options(ts)
        };
        let points = genclient::sweep(&specs, &grid, backend.as_ref(), &dir, &opts)?;
        let mut o = self.outputs();
        let mut rows = Vec::new();
        for (i, pt) in points.iter().enumerate() {
            let rel = format!("sweep/sweep_{i:02}.jsonl");
            o.record(&rel)?;
            let err_rel = format!("sweep/sweep_{i:02}.jsonl.errors.jsonl");
            if self.out.join(&err_rel).exists() {
                o.record(&err_rel)?;
            }
            let (_, records) = corpus::read_corpus(&pt.corpus.path)?;
            let m = extract::build_matrix(&records, &lex, None)?;
            let pooled = |g: Gender| -> BTreeMap<String, u64> {
                let mut acc = BTreeMap::new();
                for r in m.rows.iter().filter(|r| r.subject.gender == g) {
                    for (j, c) in &r.counts {
                        *acc.entry(j.clone()).or_insert(0) += c;
                    }
                }
                acc
            };
            let gm = distribution(&pooled(Gender::Man)).and_then(|d| d.gini().ok());
            let gw = distribution(&pooled(Gender::Woman)).and_then(|d| d.gini().ok());
            rows.push(SweepRow {
                point: i,
                top_k: pt.params.top_k,
                temperature: pt.params.temperature,
                records: pt.corpus.records,
                loss_rate: m.loss_rate(),
                unique_jobs: m.columns().len(),
                gini_man: gm,
                gini_woman: gw,
            });
        }
        o.put(
            "sweep/summary.csv",
            csv_string(
                &["point", "top_k", "temperature", "records", "loss_rate", "unique_jobs", "gini_man", "gini_woman"],
                rows.iter().map(|r| {
                    vec![
                        r.point.to_string(),
                        r.top_k.to_string(),
                        r.temperature.to_string(),
                        r.records.to_string(),
                        f6(r.loss_rate),
                        r.unique_jobs.to_string(),
                        opt6(r.gini_man),
                        opt6(r.gini_woman),
                    ]
                }),
            ),
        )?;
        self.commit(Stage::Sweep, inputs, o)?;
        Ok(true)
    }
}

/// Opens the run directory and runs `stages`.
pub fn run_pipeline(cfg: RunConfig, stages: &[Stage]) -> Result<(Manifest, Vec<StageOutcome>)> {
    let mut p = Pipeline::open(cfg)?;
    let outcomes = p.run(stages)?;
    Ok((p.manifest, outcomes))
}

fn omitted(out: &mut String, stage: Stage) {
    let _ = writeln!(out, "_Omitted: no `{stage}` outputs in the manifest. Run `occuprobe {stage}` to add this section._\n");
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

/// Markdown summary of whatever stages have run.
pub fn render_report(
    plan: Option<GenerationPlan>,
    extract: Option<ExtractSummary>,
    analyze: Option<AnalyzeSummary>,
    regress: Option<RegressSummary>,
    compare: Option<Vec<ComparisonReport>>,
) -> String {
    let mut s = String::from("# Occupational association audit\n\n");

    s.push_str("## Call plan and extraction\n\n");
    match &plan {
        Some(p) => {
            s.push_str("| Scheme | Variants | Calls | Cutoff | Mean preserved share |\n|---|---:|---:|---:|---:|\n");
            for t in &p.schemes {
                let pool = extract.as_ref().and_then(|e| e.threshold.pool(t.scheme));
                let share = extract.as_ref().map(|e| {
                    let v: Vec<f64> = e
                        .threshold
                        .rows
                        .iter()
                        .filter(|r| r.subject.scheme == t.scheme)
                        .map(|r| r.preserved_share)
                        .collect();
                    if v.is_empty() {
                        0.0
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                });
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} |",
                    t.scheme,
                    t.variants,
                    t.total_calls,
                    pool.map_or("-".into(), |p| p.cutoff.to_string()),
                    share.map_or("-".into(), pct),
                );
            }
            let _ = writeln!(s, "\nTotal planned calls: {}\n", p.total_calls);
        }
        None => omitted(&mut s, Stage::Plan),
    }
    match &extract {
        Some(e) => {
            let _ = writeln!(
                s,
                "Records: {}. Calls counted: {}. Calls without a title: {} ({}). Records dropped for excluded names: {}.\n",
                e.records,
                e.calls,
                e.misses,
                pct(e.loss_rate),
                e.excluded_records
            );
        }
        None => omitted(&mut s, Stage::Extract),
    }

    s.push_str("## Inequality of job distributions\n\n");
    match &analyze {
        Some(a) => {
            s.push_str("| Scheme | Gender | Value | Jobs | Gini | Relative to base man |\n|---|---|---|---:|---:|---:|\n");
            for r in &a.gini {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} |",
                    r.scheme,
                    r.gender,
                    r.value,
                    r.jobs,
                    r.gini.map_or("-".into(), |g| format!("{g:.3}")),
                    r.relative.map_or("-".into(), |x| format!("{x:.2}%")),
                );
            }
            s.push('\n');
        }
        None => omitted(&mut s, Stage::Analyze),
    }

    s.push_str("## Logistic regressions\n\n");
    match regress.as_ref().and_then(|r| r.aggregate.as_ref()) {
        Some(a) => {
            s.push_str("| Scheme | Jobs | Converged | Term | Share p<0.05 |\n|---|---:|---:|---|---:|\n");
            for g in &a.schemes {
                for t in &g.terms {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {} | {:.2} |",
                        g.scheme, g.jobs, g.converged, t.term, t.fraction
                    );
                }
            }
            s.push_str("\n| Scheme | Mean R² (full) | Mean ΔR² woman | Mean ΔR² interactions |\n|---|---:|---:|---:|\n");
            for g in &a.schemes {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} | {:.4} | {:.4} |",
                    g.scheme, g.mean_r2_full, g.mean_delta_woman, g.mean_delta_interactions
                );
            }
            let _ = writeln!(s, "\nTotal fits: {}\n", a.total_fits);
        }
        None => match &regress {
            Some(r) => {
                s.push_str("No regressions were fitted.\n");
                for (scheme, why) in &r.skipped_schemes {
                    let _ = writeln!(s, "- {scheme}: {why}");
                }
                s.push('\n');
            }
            None => omitted(&mut s, Stage::Regress),
        },
    }

    s.push_str("## Top jobs per category\n\n");
    match &analyze {
        Some(a) => {
            s.push_str("| Scheme | Gender | Value | Top five | Sum |\n|---|---|---|---|---:|\n");
            for t in &a.top_jobs {
                let jobs: Vec<String> = t.top.jobs.iter().map(|(j, x)| format!("{j} {x:.2}")).collect();
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {:.2} |",
                    t.scheme,
                    t.gender,
                    t.value,
                    jobs.join(", "),
                    t.top.cumulative
                );
            }
            s.push('\n');
        }
        None => omitted(&mut s, Stage::Analyze),
    }

    s.push_str("## Comparison with labor data\n\n");
    match &compare {
        Some(reports) if !reports.is_empty() => {
            for r in reports {
                let _ = writeln!(
                    s,
                    "### {} ({} predictions)\n\nMatched tokens: {}. Excluded tokens: {}.\n",
                    r.scheme,
                    match r.mode {
                        MseMode::Adjusted => "adjusted",
                        MseMode::Raw => "raw",
                    },
                    r.matched_tokens,
                    r.excluded.len()
                );
                s.push_str("| Cell | Jobs | MSE |\n|---|---:|---:|\n");
                for c in &r.cell_stats {
                    let _ = writeln!(s, "| {} | {} | {:.4} |", c.cell, c.jobs, c.mse);
                }
                s.push_str("\n| Group | n | Kendall τ | p |\n|---|---:|---:|---:|\n");
                for t in &r.taus {
                    match &t.tau {
                        Some(k) => {
                            let _ = writeln!(s, "| {} | {} | {:.3} | {:.3} |", t.group, k.n, k.tau, k.p);
                        }
                        None => {
                            let _ = writeln!(s, "| {} | - | - | - |", t.group);
                        }
                    }
                }
                s.push('\n');
                for (label, bin) in [("under 25% women", &r.skew.low), ("over 75% women", &r.skew.high)] {
                    match bin.mean_deviation {
                        Some(m) => {
                            let _ = writeln!(
                                s,
                                "- Jobs {label}: {} jobs, mean predicted minus true women share {:+.3}; exceptions: {}",
                                bin.jobs,
                                m,
                                if bin.exceptions.is_empty() {
                                    "none".to_string()
                                } else {
                                    bin.exceptions.join(", ")
                                }
                            );
                        }
                        None => {
                            let _ = writeln!(s, "- Jobs {label}: no matched jobs in this bin");
                        }
                    }
                }
                s.push_str("\n| Cell | Predicted top five | Sum | True top five | Sum |\n|---|---|---:|---|---:|\n");
                for t in &r.top5 {
                    let fmt_top = |x: &inequality::TopJobs| {
                        x.jobs
                            .iter()
                            .map(|(j, v)| format!("{j} {v:.2}"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    };
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.2} | {} | {:.2} |",
                        t.cell,
                        fmt_top(&t.predicted),
                        t.predicted.cumulative,
                        fmt_top(&t.actual),
                        t.actual.cumulative
                    );
                }
                s.push('\n');
            }
        }
        Some(_) => s.push_str("The corpus has no base or ethnicity rows to compare.\n\n"),
        None => omitted(&mut s, Stage::Compare),
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> RunConfig {
        RunConfig {
            schemes: vec![SchemeKind::Base, SchemeKind::Ethnicity],
            calls_per_variant: Some(40),
            seed: 7,
            out: dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn backend_specs_parse() {
        assert_eq!("mock".parse::<BackendSpec>().unwrap(), BackendSpec::Mock(None));
        assert_eq!(
            "replay:/x/c.jsonl".parse::<BackendSpec>().unwrap(),
            BackendSpec::Replay("/x/c.jsonl".into())
        );
        assert_eq!(
            "http://localhost:8000/".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://localhost:8000".into())
        );
        assert!("ftp://x".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn config_parses_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_toml_str(
            "schemes = [\"base\"]\ncalls_per_variant = 10\nout = \"run\"\n[analysis]\nthreshold = 0.01\n",
            dir.path(),
        )
        .unwrap();
        assert_eq!(cfg.out, dir.path().join("run"));
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml_str("bogus = 1\n", dir.path()).is_err());
        assert!(RunConfig::from_toml_str("calls_per_variant = -1\n", dir.path()).is_err());
        let missing = RunConfig::from_toml_str("lexicon = \"nope.csv\"\n", dir.path()).unwrap();
        assert!(matches!(missing.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn default_plan_stage_totals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        run_pipeline(cfg, &[Stage::Plan]).unwrap();
        let plan = GenerationPlan::from_json(&std::fs::read_to_string(dir.path().join(PLAN_FILE)).unwrap()).unwrap();
        assert_eq!(plan.total_calls, 396_000);
    }

    #[test]
    fn missing_prerequisites_name_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(small(dir.path()), &[Stage::Regress]).unwrap_err();
        match err {
            Error::MissingPrerequisite { stage, artifact } => {
                assert_eq!(stage, "extract");
                assert_eq!(artifact, MATRIX_RAW);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            run_pipeline(small(dir.path()), &[Stage::Report]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn rerun_is_noop_and_report_notes_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let stages = [Stage::Plan, Stage::Generate, Stage::Extract, Stage::Analyze, Stage::Report];
        let (m, first) = run_pipeline(small(dir.path()), &stages).unwrap();
        assert!(first.iter().all(|o| o.ran));
        let (_, second) = run_pipeline(small(dir.path()), &stages).unwrap();
        assert!(second.iter().all(|o| !o.ran));
        let report = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(report.contains("Omitted: no `compare` outputs"));
        assert!(report.contains("| base | man | all |"));
        for (rel, h) in m.files() {
            assert_eq!(&sha256_file(&dir.path().join(rel)).unwrap(), h);
        }

        // A changed threshold reruns extract but not generate.
        let mut cfg = small(dir.path());
        cfg.analysis.threshold = 0.01;
        let (_, third) = run_pipeline(cfg, &[Stage::Generate, Stage::Extract]).unwrap();
        assert_eq!(
            third.iter().map(|o| o.ran).collect::<Vec<_>>(),
            [false, true]
        );
    }

    #[test]
    fn tampered_artifact_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(small(dir.path()), &[Stage::Plan, Stage::Generate]).unwrap();
        std::fs::write(dir.path().join(CORPUS_FILE), "junk\n").unwrap();
        let err = run_pipeline(small(dir.path()), &[Stage::Extract]).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
