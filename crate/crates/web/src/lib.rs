//! Browser bindings for three small analyses: inequality of a job list,
//! a saturated gender x category logistic fit, and the labor-share adjustment.

use std::collections::BTreeMap;

use occuprobe::benchmark::{adjustment_factor, proportional, AdjustmentInputs};
use occuprobe::demography::Gender;
use occuprobe::inequality::{cumulative_quantile, RankDistribution};
use occuprobe::regress::{fit_logistic, staged_r2, DesignMatrix};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct InequalityOut {
    jobs: usize,
    total: f64,
    gini: f64,
    jobs_for_50: usize,
    jobs_for_90: usize,
    top: Vec<(String, f64)>,
    lorenz: Vec<(f64, f64)>,
}

/// Parses `job,count` lines (blank lines and `#` comments skipped).
fn parse_counts(text: &str) -> Result<Vec<(String, f64)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (job, n) = line
            .rsplit_once(',')
            .ok_or_else(|| format!("line {}: expected job,count", i + 1))?;
        let n: f64 = n
            .trim()
            .parse()
            .map_err(|_| format!("line {}: bad count {:?}", i + 1, n.trim()))?;
        if !(n.is_finite() && n >= 0.0) {
            return Err(format!("line {}: count must be non-negative", i + 1));
        }
        out.push((job.trim().to_string(), n));
    }
    Ok(out)
}

pub fn inequality_json(text: &str) -> Result<String, String> {
    let items = parse_counts(text)?;
    let dist = RankDistribution::from_weighted(items.into_iter().filter(|(_, n)| *n > 0.0))
        .map_err(|e| e.to_string())?;
    let out = InequalityOut {
        jobs: dist.n(),
        total: dist.total(),
        gini: dist.gini().map_err(|e| e.to_string())?,
        jobs_for_50: cumulative_quantile(&dist, 0.5).map_err(|e| e.to_string())?,
        jobs_for_90: cumulative_quantile(&dist, 0.9).map_err(|e| e.to_string())?,
        top: dist
            .jobs
            .iter()
            .zip(&dist.counts)
            .take(5)
            .map(|(j, c)| (j.clone(), c / dist.total()))
            .collect(),
        lorenz: dist.lorenz().map_err(|e| e.to_string())?,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct CellIn {
    gender: Gender,
    /// Absent for the base (man/woman) cells.
    value: Option<String>,
    trials: f64,
    successes: f64,
}

#[derive(Serialize)]
struct Term {
    term: String,
    coef: f64,
    se: f64,
    p: f64,
}

#[derive(Serialize)]
struct FitOut {
    terms: Vec<Term>,
    mcfadden_r2: f64,
    r2_main: f64,
    r2_plus_woman: f64,
    converged: bool,
    separation: bool,
}

pub fn fit_json(cells: &str) -> Result<String, String> {
    let cells: Vec<CellIn> = serde_json::from_str(cells).map_err(|e| e.to_string())?;
    let mut values: Vec<String> = Vec::new();
    let mut map = BTreeMap::new();
    for c in cells {
        if let Some(v) = &c.value {
            if !values.contains(v) {
                values.push(v.clone());
            }
        }
        if map.insert((c.gender, c.value.clone()), (c.trials, c.successes)).is_some() {
            return Err(format!("cell ({}, {}) given twice", c.gender, c.value.as_deref().unwrap_or("base")));
        }
    }
    let d = DesignMatrix::from_cells(&values, &map).map_err(|e| e.to_string())?;
    let fit = fit_logistic(&d).map_err(|e| e.to_string())?;
    let (staged, _) = staged_r2(&d).map_err(|e| e.to_string())?;
    let out = FitOut {
        terms: (0..fit.terms.len())
            .map(|i| Term {
                term: fit.terms[i].clone(),
                coef: fit.coef[i],
                se: fit.se[i],
                p: fit.p[i],
            })
            .collect(),
        mcfadden_r2: fit.mcfadden_r2,
        r2_main: staged.main_without_woman,
        r2_plus_woman: staged.plus_woman,
        converged: fit.converged,
        separation: fit.separation_detected,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct AdjustCell {
    label: String,
    g: f64,
    e: f64,
    d_hat: f64,
    /// Raw predicted share of the job in this cell.
    share: f64,
}

#[derive(Serialize)]
struct AdjustRow {
    label: String,
    gamma: f64,
    adjusted: f64,
    raw_pr: f64,
    adjusted_pr: f64,
}

pub fn adjust_json(cells: &str) -> Result<String, String> {
    let cells: Vec<AdjustCell> = serde_json::from_str(cells).map_err(|e| e.to_string())?;
    let mut gammas = Vec::new();
    for c in &cells {
        gammas.push(
            adjustment_factor(AdjustmentInputs {
                g: c.g,
                e: c.e,
                d_hat: c.d_hat,
            })
            .map_err(|e| e.to_string())?,
        );
    }
    let raw: Vec<f64> = cells.iter().map(|c| c.share).collect();
    let adj: Vec<f64> = raw.iter().zip(&gammas).map(|(s, g)| s * g).collect();
    let zero = || "every share is zero".to_string();
    let raw_pr = proportional(&raw).ok_or_else(zero)?;
    let adj_pr = proportional(&adj).ok_or_else(zero)?;
    let rows: Vec<AdjustRow> = cells
        .into_iter()
        .enumerate()
        .map(|(i, c)| AdjustRow {
            label: c.label,
            gamma: gammas[i],
            adjusted: adj[i],
            raw_pr: raw_pr[i],
            adjusted_pr: adj_pr[i],
        })
        .collect();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn inequality(text: &str) -> Result<String, JsValue> {
    inequality_json(text).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn fit(cells: &str) -> Result<String, JsValue> {
    fit_json(cells).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn adjust(cells: &str) -> Result<String, JsValue> {
    adjust_json(cells).map_err(|e| JsValue::from_str(&e))
}
