//! Drives a generation backend over a plan and persists every completion.

pub mod corpus;
#[cfg(feature = "http")]
pub mod http;
pub mod mock;
pub mod protocol;

use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use corpus::{
    derive_plan, read_corpus, CompletionRecord, CorpusHeader, CorpusReader, CorpusWriter,
};
#[cfg(feature = "http")]
pub use http::HttpBackend;
pub use mock::{BiasSpec, JobPattern, MockBackend, SubjectPattern};
pub use protocol::GenerateRequest;

use crate::demography::{GenerationPlan, PromptSpec, SubjectProfile};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenParams {
    #[serde(default = "default_top_k")]
    pub top_k: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_words")]
    pub max_words: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_top_k() -> u32 {
    50
}
fn default_temperature() -> f64 {
    1.0
}
fn default_max_words() -> u32 {
    10
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            top_k: 50,
            temperature: 1.0,
            max_words: 10,
            seed: None,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::validation("top_k must be positive"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_words == 0 {
            return Err(Error::validation("max_words must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Transport failure; retried with backoff.
    Unavailable(String),
    /// Contract violation; aborts the run.
    Protocol(String),
    /// Unparseable response; recorded per record and the run continues.
    Malformed(String),
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Unavailable(s) => write!(f, "unavailable: {s}"),
            BackendError::Protocol(s) => write!(f, "protocol: {s}"),
            BackendError::Malformed(s) => write!(f, "malformed: {s}"),
        }
    }
}

/// A completion source. Must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn backend_id(&self) -> String;
    fn health(&self) -> std::result::Result<String, BackendError>;
    /// `subject` is context for in-process backends; remote ones see only `req`.
    fn generate(
        &self,
        subject: &SubjectProfile,
        req: &GenerateRequest,
    ) -> std::result::Result<Vec<String>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay)
    }

    fn run<T>(
        &self,
        mut f: impl FnMut() -> std::result::Result<T, BackendError>,
    ) -> std::result::Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(BackendError::Unavailable(_)) if attempt < self.max_retries => {
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timestamps {
    Wall,
    /// Every record carries this instant; used for reproducible mock and replay runs.
    Fixed(DateTime<Utc>),
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub max_in_flight: usize,
    pub batch_size: u32,
    pub checkpoint_every: u64,
    pub max_new_tokens: u32,
    pub retry: RetryPolicy,
    pub timestamps: Timestamps,
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            max_in_flight: 8,
            batch_size: 50,
            checkpoint_every: 1000,
            max_new_tokens: 30,
            retry: RetryPolicy::default(),
            timestamps: Timestamps::Wall,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub path: PathBuf,
    pub records: u64,
    pub error_records: u64,
    pub backend_id: String,
    pub sha256: String,
}

/// Keeps at most `max_words` whitespace-separated tokens, joined by single spaces.
pub fn truncate_words(text: &str, max_words: u32) -> String {
    text.split_whitespace()
        .take(max_words as usize)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Seed sent with the request covering `first_seq..`; stays within 53 bits for JSON consumers.
pub fn request_seed(base: u64, first_seq: u64) -> u64 {
    mock::mix_seed(base, first_seq) & ((1 << 53) - 1)
}

struct Chunk<'a> {
    spec: &'a PromptSpec,
    first_seq: u64,
    n: u32,
}

fn chunks(plan: &GenerationPlan, batch: u32) -> Vec<Chunk<'_>> {
    let mut out = Vec::new();
    let mut seq = 0u64;
    for spec in &plan.specs {
        let mut left = spec.calls;
        while left > 0 {
            let n = left.min(batch as u64) as u32;
            out.push(Chunk {
                spec,
                first_seq: seq,
                n,
            });
            seq += n as u64;
            left -= n as u64;
        }
    }
    out
}

fn append_error(path: &Path, first: u64, n: u32, reason: &str) -> Result<()> {
    use std::io::Write;
    let p = corpus::errors_path(path);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&p)
        .map_err(|e| Error::io(&p, e))?;
    let line = serde_json::json!({
        "first_seq": first,
        "last_seq": first + n as u64 - 1,
        "reason": reason,
    });
    writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
}

/// Generates every planned completion into `out` (JSON lines, seq-ordered).
pub fn generate_corpus(
    plan: &GenerationPlan,
    backend: &dyn Backend,
    params: &GenParams,
    out: &Path,
    opts: &GenerateOptions,
) -> Result<CorpusSummary> {
    params.validate()?;
    if opts.batch_size == 0 || opts.max_in_flight == 0 {
        return Err(Error::validation("batch_size and max_in_flight must be positive"));
    }
    let header = CorpusHeader::new(Some(plan.hash.clone()));
    let mut writer = if opts.resume && corpus::checkpoint_path(out).exists() {
        CorpusWriter::resume(out, &header, opts.checkpoint_every)?
    } else {
        CorpusWriter::create(out, &header, opts.checkpoint_every)?
    };

    if plan.total_calls > writer.records() {
        opts.retry
            .run(|| backend.health())
            .map_err(|e| Error::BackendUnavailable {
                completed: writer.records(),
                reason: format!("health check failed: {e}"),
            })?;
    }
    let backend_id = backend.backend_id();

    let pending: Vec<Chunk> = chunks(plan, opts.batch_size)
        .into_iter()
        .filter(|c| c.first_seq + c.n as u64 > writer.records())
        .collect();
    let mut error_records = 0u64;

    for wave in pending.chunks(opts.max_in_flight) {
        let results: Vec<std::result::Result<Vec<String>, BackendError>> =
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|c| {
                        let req = GenerateRequest {
                            prompt: c.spec.text.clone(),
                            n: c.n,
                            top_k: params.top_k,
                            temperature: params.temperature,
                            max_new_tokens: opts.max_new_tokens,
                            seed: params.seed.map(|b| request_seed(b, c.first_seq)),
                        };
                        let subject = &c.spec.subject;
                        s.spawn(move || opts.retry.run(|| backend.generate(subject, &req)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join().unwrap_or_else(|_| {
                            Err(BackendError::Protocol("backend worker panicked".into()))
                        })
                    })
                    .collect()
            });

        for (c, res) in wave.iter().zip(results) {
            let last = c.first_seq + c.n as u64 - 1;
            let completions = match res {
                Ok(v) if v.len() == c.n as usize => v,
                Ok(v) => {
                    writer.checkpoint()?;
                    return Err(Error::Protocol {
                        first: c.first_seq,
                        last,
                        reason: format!("requested {} completions, received {}", c.n, v.len()),
                    });
                }
                Err(BackendError::Protocol(reason)) => {
                    writer.checkpoint()?;
                    return Err(Error::Protocol {
                        first: c.first_seq,
                        last,
                        reason,
                    });
                }
                Err(BackendError::Unavailable(reason)) => {
                    writer.checkpoint()?;
                    return Err(Error::BackendUnavailable {
                        completed: writer.records(),
                        reason,
                    });
                }
                Err(BackendError::Malformed(reason)) => {
                    append_error(out, c.first_seq, c.n, &reason)?;
                    error_records += c.n as u64;
                    vec![String::new(); c.n as usize]
                }
            };
            let ts = match opts.timestamps {
                Timestamps::Wall => Utc::now(),
                Timestamps::Fixed(t) => t,
            };
            for (i, text) in completions.iter().enumerate() {
                let seq = c.first_seq + i as u64;
                if seq < writer.records() {
                    continue;
                }
                writer.append(&CompletionRecord {
                    seq,
                    subject: c.spec.subject.clone(),
                    prompt: c.spec.text.clone(),
                    completion: truncate_words(text, params.max_words),
                    params: *params,
                    backend_id: backend_id.clone(),
                    timestamp: ts,
                })?;
            }
        }
    }
    let records = writer.records();
    let sha256 = writer.finish()?;
    Ok(CorpusSummary {
        path: out.to_path_buf(),
        records,
        error_records,
        backend_id,
        sha256,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub params: GenParams,
    pub corpus: CorpusSummary,
}

/// One corpus per grid point, written as `sweep_NN.jsonl` under `dir`.
pub fn sweep(
    specs: &[PromptSpec],
    grid: &[GenParams],
    backend: &dyn Backend,
    dir: &Path,
    opts: &GenerateOptions,
) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::validation("sweep grid is empty"));
    }
    let plan = crate::demography::plan_calls(specs.to_vec())?;
    grid.iter()
        .enumerate()
        .map(|(i, params)| {
            let path = dir.join(format!("sweep_{i:02}.jsonl"));
            let corpus = generate_corpus(&plan, backend, params, &path, opts)?;
            Ok(SweepPoint {
                params: *params,
                corpus,
            })
        })
        .collect()
}

/// The top-k ablation grid: k in {1, 10, 50, 100, 500} at temperature 1.
pub fn top_k_grid(seed: Option<u64>) -> Vec<GenParams> {
    [1, 10, 50, 100, 500]
        .into_iter()
        .map(|top_k| GenParams {
            top_k,
            seed,
            ..GenParams::default()
        })
        .collect()
}

/// The temperature ablation grid: T in {0.1, 1, 10, 50, 100} at top_k 50.
pub fn temperature_grid(seed: Option<u64>) -> Vec<GenParams> {
    [0.1, 1.0, 10.0, 50.0, 100.0]
        .into_iter()
        .map(|temperature| GenParams {
            temperature,
            seed,
            ..GenParams::default()
        })
        .collect()
}
