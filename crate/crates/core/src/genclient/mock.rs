//! Deterministic in-process backend driven by a planted job distribution.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, GenerateRequest};
use crate::demography::{Gender, SchemeKind, SubjectProfile};
use crate::error::{Error, Result};

pub const DEFAULT_MOCK_SPEC: &str = include_str!("../../data/mock_default.json");

const HIT_TAILS: [&str; 6] = [
    "at a local hospital",
    "in the city",
    "for a small company",
    "and likes it",
    "for many years",
    "in a small town",
];

const MISS_COMPLETIONS: [&str; 5] = [
    "volunteer at the local church",
    "part of a small team",
    "way to pay the bills",
    "favor to a friend",
    "volunteer on weekends",
];

/// Subject filter; absent fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectPattern {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SchemeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl SubjectPattern {
    pub fn matches(&self, s: &SubjectProfile) -> bool {
        self.gender.is_none_or(|g| g == s.gender)
            && self.scheme.is_none_or(|k| k == s.scheme)
            && self.value.as_ref().is_none_or(|v| s.value.as_ref() == Some(v))
            && self.name.as_ref().is_none_or(|n| s.name.as_ref() == Some(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobPattern {
    #[serde(rename = "match")]
    pub pattern: SubjectPattern,
    pub jobs: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSpec {
    pub miss_rate: f64,
    /// Apply request top_k and temperature to the planted distribution.
    #[serde(default)]
    pub respond_to_params: bool,
    /// Used for subjects matching no pattern; `None` makes that an error.
    #[serde(default)]
    pub fallback: Option<Vec<(String, f64)>>,
    pub patterns: Vec<JobPattern>,
}

fn check_distribution(what: &str, jobs: &[(String, f64)]) -> Result<()> {
    if jobs.is_empty() {
        return Err(Error::validation(format!("{what}: empty job distribution")));
    }
    let mut total = 0.0;
    for (job, p) in jobs {
        if job.trim().is_empty() {
            return Err(Error::validation(format!("{what}: empty job phrase")));
        }
        if !(p.is_finite() && *p >= 0.0) {
            return Err(Error::validation(format!("{what}: bad probability {p} for {job:?}")));
        }
        total += p;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "{what}: probabilities sum to {total}, not 1"
        )));
    }
    Ok(())
}

impl BiasSpec {
    pub fn single(pattern: SubjectPattern, jobs: Vec<(String, f64)>) -> Self {
        BiasSpec {
            miss_rate: 0.0,
            respond_to_params: false,
            fallback: None,
            patterns: vec![JobPattern { pattern, jobs }],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: BiasSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn shipped() -> Self {
        Self::from_json(DEFAULT_MOCK_SPEC).expect("shipped mock spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::validation(format!(
                "miss_rate {} outside [0, 1]",
                self.miss_rate
            )));
        }
        for (i, p) in self.patterns.iter().enumerate() {
            check_distribution(&format!("pattern {i}"), &p.jobs)?;
        }
        if let Some(f) = &self.fallback {
            check_distribution("fallback", f)?;
        }
        Ok(())
    }

    /// First matching pattern wins.
    pub fn distribution_for(&self, s: &SubjectProfile) -> Option<&[(String, f64)]> {
        self.patterns
            .iter()
            .find(|p| p.pattern.matches(s))
            .map(|p| p.jobs.as_slice())
            .or(self.fallback.as_deref())
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serializes")))
    }
}

/// Applies top-k truncation and `p^(1/T)` tempering, renormalized.
pub fn shape_distribution(jobs: &[(String, f64)], top_k: u32, temperature: f64) -> Vec<(String, f64)> {
    let mut idx: Vec<usize> = (0..jobs.len()).collect();
    idx.sort_by(|&a, &b| jobs[b].1.total_cmp(&jobs[a].1).then(a.cmp(&b)));
    idx.truncate((top_k as usize).max(1));
    idx.sort_unstable();
    let weights: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let p = jobs[i].1;
            if p > 0.0 {
                (p.ln() / temperature).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    idx.iter()
        .zip(weights)
        .map(|(&i, w)| (jobs[i].0.clone(), w / total))
        .collect()
}

fn sample(jobs: &[(String, f64)], u: f64) -> &str {
    let mut acc = 0.0;
    for (job, p) in jobs {
        acc += p;
        if u < acc {
            return job;
        }
    }
    jobs.iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(j, _)| j.as_str())
        .unwrap_or(&jobs[jobs.len() - 1].0)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

pub struct MockBackend {
    spec: BiasSpec,
    seed: u64,
    id: String,
}

impl MockBackend {
    pub fn new(spec: BiasSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let id = format!("mock:{}", &spec.content_hash()[..12]);
        Ok(MockBackend { spec, seed, id })
    }

    pub fn spec(&self) -> &BiasSpec {
        &self.spec
    }

    /// Completion `index` of a request; a pure function of (spec, seed, request seed, index).
    pub fn completion(
        &self,
        subject: &SubjectProfile,
        req: &GenerateRequest,
        index: u64,
    ) -> std::result::Result<String, BackendError> {
        let jobs = self.spec.distribution_for(subject).ok_or_else(|| {
            BackendError::Protocol(format!("mock spec has no pattern for subject {subject}"))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, req.seed.unwrap_or(0)));
        rng.set_stream(index);
        let u_miss: f64 = rng.gen();
        let u_job: f64 = rng.gen();
        let u_tail: f64 = rng.gen();
        if u_miss < self.spec.miss_rate {
            let i = (u_tail * MISS_COMPLETIONS.len() as f64) as usize;
            return Ok(MISS_COMPLETIONS[i.min(MISS_COMPLETIONS.len() - 1)].to_string());
        }
        let job = if self.spec.respond_to_params {
            let shaped = shape_distribution(jobs, req.top_k, req.temperature);
            sample(&shaped, u_job).to_string()
        } else {
            sample(jobs, u_job).to_string()
        };
        let i = (u_tail * HIT_TAILS.len() as f64) as usize;
        Ok(format!("{job} {}", HIT_TAILS[i.min(HIT_TAILS.len() - 1)]))
    }
}

impl Backend for MockBackend {
    fn backend_id(&self) -> String {
        self.id.clone()
    }

    fn health(&self) -> std::result::Result<String, BackendError> {
        Ok(self.id.clone())
    }

    fn generate(
        &self,
        subject: &SubjectProfile,
        req: &GenerateRequest,
    ) -> std::result::Result<Vec<String>, BackendError> {
        (0..req.n as u64)
            .map(|i| self.completion(subject, req, i))
            .collect()
    }
}
