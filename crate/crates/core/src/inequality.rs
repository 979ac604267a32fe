//! Rank-frequency, Gini/Lorenz, top-k and over-representation measures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::demography::{Gender, SchemeKind};
use crate::error::{Error, Result};
use crate::extract::FrequencyMatrix;

/// Jobs by descending count; ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDistribution {
    pub jobs: Vec<String>,
    pub counts: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl RankDistribution {
    pub fn from_counts<'a, I>(counts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a String, &'a u64)>,
    {
        Self::from_weighted(counts.into_iter().map(|(j, &c)| (j.clone(), c as f64)))
    }

    pub fn from_weighted(items: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut items: Vec<(String, f64)> = items.into_iter().collect();
        if items.iter().any(|(_, c)| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::validation("counts must be finite and non-negative"));
        }
        let total: f64 = items.iter().map(|(_, c)| c).sum();
        if total <= 0.0 {
            return Err(Error::UndefinedDistribution("no positive counts".into()));
        }
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut acc = 0.0;
        let cumulative = items
            .iter()
            .map(|(_, c)| {
                acc += c;
                acc / total
            })
            .collect();
        let (jobs, counts) = items.into_iter().unzip();
        Ok(RankDistribution {
            jobs,
            counts,
            cumulative,
        })
    }

    pub fn n(&self) -> usize {
        self.jobs.len()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn gini(&self) -> Result<f64> {
        gini(&self.counts)
    }

    pub fn lorenz(&self) -> Result<Vec<(f64, f64)>> {
        lorenz(&self.counts)
    }
}

fn ascending(counts: &[f64]) -> Result<Vec<f64>> {
    if counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::validation("counts must be finite and non-negative"));
    }
    let mut x = counts.to_vec();
    x.sort_by(f64::total_cmp);
    if x.last().is_none_or(|&m| m <= 0.0) {
        return Err(Error::UndefinedDistribution(
            "Gini needs at least one positive count".into(),
        ));
    }
    Ok(x)
}

/// `G = sum_i (2i - n - 1) x_i / (n sum_i x_i)` over ascending `x`, ranks from 1.
pub fn gini(counts: &[f64]) -> Result<f64> {
    let x = ascending(counts)?;
    let n = x.len() as f64;
    let (num, sum) = x
        .iter()
        .enumerate()
        .fold((0.0, 0.0), |(num, sum), (i, &xi)| {
            (num + (2.0 * (i as f64 + 1.0) - n - 1.0) * xi, sum + xi)
        });
    Ok(num / (n * sum))
}

pub fn gini_u64(counts: &[u64]) -> Result<f64> {
    gini(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>())
}

/// Gini as a percentage of a reference value.
pub fn relative_gini(g: f64, base: f64) -> Result<f64> {
    if base.is_nan() || base <= 0.0 {
        return Err(Error::validation(format!("reference Gini must be positive, got {base}")));
    }
    Ok(100.0 * g / base)
}

/// Lorenz points from (0,0) to (1,1) over ascending counts.
pub fn lorenz(counts: &[f64]) -> Result<Vec<(f64, f64)>> {
    let x = ascending(counts)?;
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    let mut acc = 0.0;
    let mut pts = Vec::with_capacity(x.len() + 1);
    pts.push((0.0, 0.0));
    for (i, xi) in x.iter().enumerate() {
        acc += xi;
        pts.push(((i as f64 + 1.0) / n, acc / total));
    }
    if let Some(last) = pts.last_mut() {
        *last = (1.0, 1.0);
    }
    Ok(pts)
}

/// Fewest top-ranked jobs whose combined share reaches `share`.
pub fn cumulative_quantile(dist: &RankDistribution, share: f64) -> Result<usize> {
    if !(share > 0.0 && share <= 1.0) {
        return Err(Error::validation(format!("share {share} outside (0, 1]")));
    }
    Ok(dist
        .cumulative
        .iter()
        .position(|&c| c >= share - 1e-12)
        .map_or(dist.n(), |i| i + 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopJobs {
    pub jobs: Vec<(String, f64)>,
    pub cumulative: f64,
}

/// Top `k` jobs with their share of the row total.
pub fn top_jobs(row: &BTreeMap<String, u64>, k: usize) -> Result<TopJobs> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    let total: u64 = row.values().sum();
    if total == 0 {
        return Ok(TopJobs {
            jobs: vec![],
            cumulative: 0.0,
        });
    }
    let mut items: Vec<(&String, &u64)> = row.iter().filter(|(_, &c)| c > 0).collect();
    items.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    let jobs: Vec<(String, f64)> = items
        .into_iter()
        .take(k)
        .map(|(j, &c)| (j.clone(), c as f64 / total as f64))
        .collect();
    let cumulative = jobs.iter().map(|(_, s)| s).sum();
    Ok(TopJobs { jobs, cumulative })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityMetrics {
    pub unique_jobs: usize,
    pub top5_share: f64,
    pub jobs_for_95: usize,
}

pub fn diversity(counts: &BTreeMap<String, u64>) -> Result<DiversityMetrics> {
    let dist = RankDistribution::from_counts(counts.iter().filter(|(_, &c)| c > 0))?;
    Ok(DiversityMetrics {
        unique_jobs: dist.n(),
        top5_share: dist.cumulative[dist.n().min(5) - 1],
        jobs_for_95: cumulative_quantile(&dist, 0.95)?,
    })
}

/// One (job, category value) point against the equi-proportion baseline.
///
/// Factors are in multiples of `1/|c|` within each gender's mentions of the job;
/// `None` marks a gender with no mentions of the job. `x`/`y` are the man/woman
/// shares of all mentions in the same units, so a job spread evenly over every
/// cell sits on the segment from (1,0) to (0,1); `distance` is measured to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverRepPoint {
    pub job: String,
    pub value: String,
    pub man_factor: Option<f64>,
    pub woman_factor: Option<f64>,
    pub x: f64,
    pub y: f64,
    pub distance: f64,
}

fn distance_to_baseline(x: f64, y: f64) -> f64 {
    // Segment from (1,0) to (0,1), parameterized as (1-t, t).
    let t = ((y - x + 1.0) / 2.0).clamp(0.0, 1.0);
    ((x - (1.0 - t)).powi(2) + (y - t).powi(2)).sqrt()
}

/// Over-representation points for every job in the scheme's rows.
pub fn overrep_factors(
    matrix: &FrequencyMatrix,
    scheme: SchemeKind,
    values: &[String],
) -> Result<Vec<OverRepPoint>> {
    let c = values.len();
    if c < 2 {
        return Err(Error::validation("over-representation needs at least 2 category values"));
    }
    // mentions[job][gender][value index]
    let mut mentions: BTreeMap<&str, [Vec<f64>; 2]> = BTreeMap::new();
    for row in matrix.rows_in(scheme) {
        let Some(vi) = row
            .subject
            .value
            .as_ref()
            .and_then(|v| values.iter().position(|x| x == v))
        else {
            continue;
        };
        let g = (row.subject.gender == Gender::Woman) as usize;
        for (job, &n) in &row.counts {
            let e = mentions
                .entry(job)
                .or_insert_with(|| [vec![0.0; c], vec![0.0; c]]);
            e[g][vi] += n as f64;
        }
    }
    let cf = c as f64;
    let mut out = Vec::new();
    for (job, [man, woman]) in mentions {
        let (sm, sw): (f64, f64) = (man.iter().sum(), woman.iter().sum());
        let total = sm + sw;
        if total == 0.0 {
            continue;
        }
        for (vi, v) in values.iter().enumerate() {
            let x = cf * man[vi] / total;
            let y = cf * woman[vi] / total;
            out.push(OverRepPoint {
                job: job.to_string(),
                value: v.clone(),
                man_factor: (sm > 0.0).then(|| cf * man[vi] / sm),
                woman_factor: (sw > 0.0).then(|| cf * woman[vi] / sw),
                x,
                y,
                distance: distance_to_baseline(x, y),
            });
        }
    }
    Ok(out)
}

/// Per job, the widest gap between woman and man factors over category values,
/// descending. Jobs lacking a gender's mentions are skipped.
pub fn factor_ranges(points: &[OverRepPoint]) -> Vec<(String, f64)> {
    let mut by_job: BTreeMap<&str, f64> = BTreeMap::new();
    for p in points {
        if let (Some(m), Some(w)) = (p.man_factor, p.woman_factor) {
            let e = by_job.entry(&p.job).or_insert(0.0);
            *e = e.max((w - m).abs());
        }
    }
    let mut v: Vec<(String, f64)> = by_job.into_iter().map(|(j, r)| (j.to_string(), r)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}
