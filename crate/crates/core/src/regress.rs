//! Per-job logistic regressions with gender x category interactions.
//!
//! For job `i` and category value `c`:
//! `logit p = b0 + b1*woman + g_c*[c] + d_c*woman*[c]`, with base man as the
//! reference cell. Fits run on weighted binomial cells, which gives the same
//! estimates as one Bernoulli row per call.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::demography::{Gender, SchemeKind};
use crate::error::{Error, Result};
use crate::extract::FrequencyMatrix;

pub const MAX_ITERATIONS: usize = 100;
pub const SCORE_TOLERANCE: f64 = 1e-8;
pub const LL_TOLERANCE: f64 = 1e-10;
pub const SEPARATION_BOUND: f64 = 15.0;
pub const SIGNIFICANCE: f64 = 0.05;

/// One covariate pattern with its trial and success counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub x: Vec<f64>,
    pub trials: f64,
    pub successes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub terms: Vec<String>,
    pub rows: Vec<DesignRow>,
}

/// Which calls count as observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Observations {
    /// Every call; calls without any title are zeros.
    #[default]
    AllCalls,
    /// Only calls that yielded at least one title.
    ExcludeMisses,
}

impl DesignMatrix {
    pub fn ncols(&self) -> usize {
        self.terms.len()
    }

    pub fn observations(&self) -> f64 {
        self.rows.iter().map(|r| r.trials).sum()
    }

    /// Builds the saturated gender x category design from per-cell counts.
    ///
    /// `cells` maps (gender, value or `None` for base) to (trials, successes).
    pub fn from_cells(values: &[String], cells: &BTreeMap<(Gender, Option<String>), (f64, f64)>) -> Result<Self> {
        let c = values.len();
        let mut terms = vec!["intercept".to_string(), "woman".to_string()];
        terms.extend(values.iter().cloned());
        terms.extend(values.iter().map(|v| format!("woman:{v}")));
        let mut rows = Vec::with_capacity(2 + 2 * c);
        let keys = [None]
            .into_iter()
            .chain(values.iter().cloned().map(Some))
            .flat_map(|v| Gender::BOTH.into_iter().map(move |g| (g, v.clone())));
        for (g, v) in keys {
            let &(trials, successes) = cells.get(&(g, v.clone())).ok_or_else(|| {
                Error::validation(format!(
                    "design cell ({g}, {}) is missing",
                    v.as_deref().unwrap_or("base")
                ))
            })?;
            if trials.is_nan() || trials <= 0.0 || successes < 0.0 || successes > trials {
                return Err(Error::DegenerateFit(format!(
                    "cell ({g}, {}) has {successes} successes in {trials} trials",
                    v.as_deref().unwrap_or("base")
                )));
            }
            let mut x = vec![0.0; 2 + 2 * c];
            x[0] = 1.0;
            let w = g == Gender::Woman;
            if w {
                x[1] = 1.0;
            }
            if let Some(v) = &v {
                let vi = values.iter().position(|x| x == v).expect("value from list");
                x[2 + vi] = 1.0;
                if w {
                    x[2 + c + vi] = 1.0;
                }
            }
            rows.push(DesignRow { x, trials, successes });
        }
        Ok(DesignMatrix { terms, rows })
    }

    /// Keeps the named columns, in the given order.
    pub fn select(&self, terms: &[&str]) -> Result<DesignMatrix> {
        let idx: Vec<usize> = terms
            .iter()
            .map(|t| {
                self.terms
                    .iter()
                    .position(|x| x == t)
                    .ok_or_else(|| Error::validation(format!("unknown term {t:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(DesignMatrix {
            terms: terms.iter().map(|t| t.to_string()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| DesignRow {
                    x: idx.iter().map(|&i| r.x[i]).collect(),
                    trials: r.trials,
                    successes: r.successes,
                })
                .collect(),
        })
    }

    /// One unit-weight row per observation.
    pub fn expand(&self) -> DesignMatrix {
        let mut rows = Vec::new();
        for r in &self.rows {
            let ones = r.successes.round() as usize;
            let zeros = (r.trials - r.successes).round() as usize;
            for (k, y) in [(ones, 1.0), (zeros, 0.0)] {
                for _ in 0..k {
                    rows.push(DesignRow {
                        x: r.x.clone(),
                        trials: 1.0,
                        successes: y,
                    });
                }
            }
        }
        DesignMatrix {
            terms: self.terms.clone(),
            rows,
        }
    }
}

/// Category values of `scheme` in row order.
pub fn scheme_values(matrix: &FrequencyMatrix, scheme: SchemeKind) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in matrix.rows_in(scheme) {
        if let Some(v) = &r.subject.value {
            if !out.contains(v) {
                out.push(v.clone());
            }
        }
    }
    out
}

/// Binary design for `job`: base rows pooled with every variant of `scheme`.
pub fn build_design(
    matrix: &FrequencyMatrix,
    scheme: SchemeKind,
    job: &str,
    obs: Observations,
) -> Result<DesignMatrix> {
    if matches!(scheme, SchemeKind::Base | SchemeKind::Continent) {
        return Err(Error::validation(format!(
            "regressions need an identity intersection scheme, got {scheme}"
        )));
    }
    if !matrix.rows.iter().any(|r| r.counts.contains_key(job)) {
        return Err(Error::validation(format!("job {job:?} is absent from the matrix")));
    }
    let values = scheme_values(matrix, scheme);
    if values.is_empty() {
        return Err(Error::validation(format!("matrix has no {scheme} rows")));
    }
    let mut cells: BTreeMap<(Gender, Option<String>), (f64, f64)> = BTreeMap::new();
    for r in matrix
        .rows
        .iter()
        .filter(|r| r.subject.scheme == SchemeKind::Base || r.subject.scheme == scheme)
    {
        let trials = match obs {
            Observations::AllCalls => r.calls,
            Observations::ExcludeMisses => r.calls - r.misses,
        };
        let e = cells
            .entry((r.subject.gender, r.subject.value.clone()))
            .or_insert((0.0, 0.0));
        e.0 += trials as f64;
        e.1 += r.count(job) as f64;
    }
    DesignMatrix::from_cells(&values, &cells)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn eta(row: &DesignRow, beta: &[f64]) -> f64 {
    row.x.iter().zip(beta).map(|(x, b)| x * b).sum()
}

pub fn log_likelihood(d: &DesignMatrix, beta: &[f64]) -> f64 {
    d.rows
        .iter()
        .map(|r| {
            let z = eta(r, beta);
            r.successes * z - r.trials * softplus(z)
        })
        .sum()
}

/// Gradient of the log-likelihood.
pub fn score(d: &DesignMatrix, beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; d.ncols()];
    for r in &d.rows {
        let resid = r.successes - r.trials * sigmoid(eta(r, beta));
        for (gj, xj) in g.iter_mut().zip(&r.x) {
            *gj += xj * resid;
        }
    }
    g
}

fn information(d: &DesignMatrix, beta: &[f64]) -> DMatrix<f64> {
    let k = d.ncols();
    let mut h = DMatrix::zeros(k, k);
    for r in &d.rows {
        let p = sigmoid(eta(r, beta));
        let w = r.trials * p * (1.0 - p);
        for a in 0..k {
            if r.x[a] == 0.0 {
                continue;
            }
            for b in 0..k {
                h[(a, b)] += w * r.x[a] * r.x[b];
            }
        }
    }
    h
}

fn solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    match h.clone().cholesky() {
        Some(c) => Some(c.solve(g)),
        None => h.clone().lu().solve(g),
    }
}

fn invert(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    match h.clone().cholesky() {
        Some(c) => Some(c.inverse()),
        None => h.clone().try_inverse(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub mcfadden_r2: f64,
    pub converged: bool,
    pub separation_detected: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn coef_of(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.coef[i])
    }

    pub fn p_of(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.p[i])
    }
}

pub fn null_log_likelihood(d: &DesignMatrix) -> f64 {
    let n: f64 = d.rows.iter().map(|r| r.trials).sum();
    let y: f64 = d.rows.iter().map(|r| r.successes).sum();
    let p = y / n;
    let term = |k: f64, q: f64| if k > 0.0 { k * q.ln() } else { 0.0 };
    term(y, p) + term(n - y, 1.0 - p)
}

/// Two-sided normal p-value.
pub fn wald_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Maximum-likelihood fit by Newton-Raphson (IRLS) with step halving.
pub fn fit_logistic(d: &DesignMatrix) -> Result<FitResult> {
    let k = d.ncols();
    if k == 0 || d.rows.is_empty() {
        return Err(Error::DegenerateFit("empty design".into()));
    }
    let n: f64 = d.rows.iter().map(|r| r.trials).sum();
    let y: f64 = d.rows.iter().map(|r| r.successes).sum();
    if y <= 0.0 || y >= n {
        return Err(Error::DegenerateFit(format!(
            "outcome is constant ({y} successes in {n} observations)"
        )));
    }
    let ll0 = null_log_likelihood(d);
    let intercept_only = k == 1 && d.rows.iter().all(|r| r.x[0] == 1.0);

    let mut beta = vec![0.0; k];
    if let Some(i) = d.terms.iter().position(|t| t == "intercept") {
        beta[i] = (y / (n - y)).ln();
    }
    let mut ll = log_likelihood(d, &beta);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let g = score(d, &beta);
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < SCORE_TOLERANCE {
            converged = true;
            break;
        }
        iterations += 1;
        let h = information(d, &beta);
        let step = solve(&h, &DVector::from_vec(g))
            .ok_or_else(|| Error::DegenerateFit("information matrix is singular".into()))?;
        let mut t = 1.0;
        let mut next: Vec<f64>;
        let mut next_ll;
        loop {
            next = beta.iter().zip(step.iter()).map(|(b, s)| b + t * s).collect();
            next_ll = log_likelihood(d, &next);
            if next_ll >= ll - 1e-12 * ll.abs() || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let rel = (next_ll - ll).abs() / ll.abs().max(1e-300);
        beta = next;
        ll = next_ll;
        if rel < LL_TOLERANCE {
            converged = true;
            break;
        }
    }
    let separation = beta.iter().any(|b| b.abs() > SEPARATION_BOUND);
    let cov = invert(&information(d, &beta));
    let se: Vec<f64> = (0..k)
        .map(|i| cov.as_ref().map_or(f64::INFINITY, |c| c[(i, i)].max(0.0).sqrt()))
        .collect();
    let z: Vec<f64> = beta.iter().zip(&se).map(|(b, s)| b / s).collect();
    let p = z.iter().map(|&z| wald_p(z)).collect();
    let (ll, r2) = if intercept_only {
        (ll0, 0.0)
    } else {
        (ll, (1.0 - ll / ll0).max(0.0))
    };
    Ok(FitResult {
        terms: d.terms.clone(),
        coef: beta,
        se,
        z,
        p,
        log_likelihood: ll,
        null_log_likelihood: ll0,
        mcfadden_r2: r2,
        converged: converged && !separation,
        separation_detected: separation,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagedR2 {
    pub main_without_woman: f64,
    pub plus_woman: f64,
    pub full: f64,
}

impl StagedR2 {
    pub fn delta_woman(&self) -> f64 {
        self.plus_woman - self.main_without_woman
    }

    pub fn delta_interactions(&self) -> f64 {
        self.full - self.plus_woman
    }
}

/// McFadden R^2 of the nested models: categories only, plus woman, plus interactions.
pub fn staged_r2(full: &DesignMatrix) -> Result<(StagedR2, FitResult)> {
    let cats: Vec<&str> = full
        .terms
        .iter()
        .filter(|t| *t != "intercept" && *t != "woman" && !t.starts_with("woman:"))
        .map(String::as_str)
        .collect();
    let mut s1 = vec!["intercept"];
    s1.extend(&cats);
    let mut s2 = vec!["intercept", "woman"];
    s2.extend(&cats);
    let f1 = fit_logistic(&full.select(&s1)?)?;
    let f2 = fit_logistic(&full.select(&s2)?)?;
    let f3 = fit_logistic(full)?;
    Ok((
        StagedR2 {
            main_without_woman: f1.mcfadden_r2,
            plus_woman: f2.mcfadden_r2,
            full: f3.mcfadden_r2,
        },
        f3,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFit {
    pub scheme: SchemeKind,
    pub job: String,
    pub fit: Option<FitResult>,
    pub staged: Option<StagedR2>,
    /// Why no fit exists, for degenerate designs.
    pub error: Option<String>,
}

/// Full-model fit and staged R^2 for one (scheme, job).
pub fn fit_job(matrix: &FrequencyMatrix, scheme: SchemeKind, job: &str, obs: Observations) -> Result<JobFit> {
    let d = build_design(matrix, scheme, job, obs)?;
    Ok(match staged_r2(&d) {
        Ok((staged, fit)) => JobFit {
            scheme,
            job: job.to_string(),
            fit: Some(fit),
            staged: Some(staged),
            error: None,
        },
        Err(e @ Error::DegenerateFit(_)) => JobFit {
            scheme,
            job: job.to_string(),
            fit: None,
            staged: None,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSignificance {
    pub term: String,
    /// Fraction of converged fits with p below 0.05.
    pub fraction: f64,
    pub fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeAggregate {
    pub scheme: SchemeKind,
    pub jobs: usize,
    pub fitted: usize,
    pub converged: usize,
    pub terms: Vec<TermSignificance>,
    pub mean_r2_full: f64,
    pub mean_delta_woman: f64,
    pub mean_delta_interactions: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schemes: Vec<SchemeAggregate>,
    pub total_fits: usize,
}

/// Per-term significance fractions over converged fits of one group; intercept excluded.
pub fn aggregate_group(scheme: SchemeKind, fits: &[JobFit]) -> Result<SchemeAggregate> {
    if fits.is_empty() {
        return Err(Error::validation(format!("no fits for scheme {scheme}")));
    }
    let ok: Vec<(&FitResult, Option<&StagedR2>)> = fits
        .iter()
        .filter_map(|f| f.fit.as_ref().filter(|r| r.converged).map(|r| (r, f.staged.as_ref())))
        .collect();
    let mut order: Vec<String> = Vec::new();
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (r, _) in &ok {
        for (t, p) in r.terms.iter().zip(&r.p) {
            if t == "intercept" {
                continue;
            }
            if !order.contains(t) {
                order.push(t.clone());
            }
            let e = hits.entry(t.clone()).or_insert((0, 0));
            e.1 += 1;
            if *p < SIGNIFICANCE {
                e.0 += 1;
            }
        }
    }
    let mean = |f: &dyn Fn(&StagedR2) -> f64| {
        let v: Vec<f64> = ok.iter().filter_map(|(_, s)| s.map(f)).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(SchemeAggregate {
        scheme,
        jobs: fits.len(),
        fitted: fits.iter().filter(|f| f.fit.is_some()).count(),
        converged: ok.len(),
        terms: order
            .into_iter()
            .map(|t| {
                let (s, n) = hits[&t];
                TermSignificance {
                    term: t,
                    fraction: s as f64 / n as f64,
                    fits: n,
                }
            })
            .collect(),
        mean_r2_full: mean(&|s| s.full),
        mean_delta_woman: mean(&|s| s.delta_woman()),
        mean_delta_interactions: mean(&|s| s.delta_interactions()),
    })
}

/// Groups fits by scheme (scheme order) and aggregates each group.
pub fn aggregate(fits: &[JobFit]) -> Result<AggregateReport> {
    if fits.is_empty() {
        return Err(Error::validation("no fits to aggregate"));
    }
    let mut schemes = Vec::new();
    for s in SchemeKind::ALL {
        let group: Vec<JobFit> = fits.iter().filter(|f| f.scheme == s).cloned().collect();
        if !group.is_empty() {
            schemes.push(aggregate_group(s, &group)?);
        }
    }
    Ok(AggregateReport {
        schemes,
        total_fits: fits.len(),
    })
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.10}")
    } else {
        x.to_string()
    }
}

/// Long table `scheme,job,term,coef,se,p,converged`.
pub fn fits_csv(fits: &[JobFit]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "job", "term", "coef", "se", "p", "converged"])
        .expect("in-memory write");
    for f in fits {
        if let Some(r) = &f.fit {
            for i in 0..r.terms.len() {
                w.write_record([
                    f.scheme.as_str(),
                    &f.job,
                    &r.terms[i],
                    &fmt(r.coef[i]),
                    &fmt(r.se[i]),
                    &fmt(r.p[i]),
                    if r.converged { "true" } else { "false" },
                ])
                .expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Heat-grid data: `scheme,job,term,status` with status sig, nonsig or nofit.
pub fn pvalue_grid_csv(fits: &[JobFit]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "job", "term", "status"]).expect("in-memory write");
    for f in fits {
        let terms: Vec<String> = match &f.fit {
            Some(r) => r.terms.clone(),
            None => vec!["*".into()],
        };
        for (i, t) in terms.iter().enumerate() {
            if t == "intercept" {
                continue;
            }
            let status = match &f.fit {
                Some(r) if r.converged => {
                    if r.p[i] < SIGNIFICANCE {
                        "sig"
                    } else {
                        "nonsig"
                    }
                }
                _ => "nofit",
            };
            w.write_record([f.scheme.as_str(), &f.job, t, status])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Aggregate table: one row per (scheme, term) plus R^2 summary rows.
pub fn aggregate_csv(report: &AggregateReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "jobs", "fitted", "converged", "term", "value"])
        .expect("in-memory write");
    for s in &report.schemes {
        let head = [
            s.scheme.to_string(),
            s.jobs.to_string(),
            s.fitted.to_string(),
            s.converged.to_string(),
        ];
        let mut row = |term: &str, value: f64| {
            let mut r = head.to_vec();
            r.push(term.to_string());
            r.push(format!("{value:.4}"));
            w.write_record(&r).expect("in-memory write");
        };
        for t in &s.terms {
            row(&format!("sig:{}", t.term), t.fraction);
        }
        row("r2_full", s.mean_r2_full);
        row("delta_r2_woman", s.mean_delta_woman);
        row("delta_r2_interactions", s.mean_delta_interactions);
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demography::SubjectProfile;

    fn two_cell(pm: f64, pw: f64, n: f64) -> DesignMatrix {
        DesignMatrix {
            terms: vec!["intercept".into(), "woman".into()],
            rows: vec![
                DesignRow { x: vec![1.0, 0.0], trials: n, successes: pm * n },
                DesignRow { x: vec![1.0, 1.0], trials: n, successes: pw * n },
            ],
        }
    }

    #[test]
    fn saturated_two_cell() {
        let f = fit_logistic(&two_cell(0.25, 0.5, 400.0)).unwrap();
        assert!((f.coef[0] - (1.0f64 / 3.0).ln()).abs() < 1e-6);
        assert!((f.coef[1] - 3.0f64.ln()).abs() < 1e-6);
        assert!(f.converged && !f.separation_detected);
        assert!(f.p.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn weighted_equals_expanded() {
        let d = two_cell(0.25, 0.5, 400.0);
        let a = fit_logistic(&d).unwrap();
        let b = fit_logistic(&d.expand()).unwrap();
        for (x, y) in a.coef.iter().zip(&b.coef) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.log_likelihood - b.log_likelihood).abs() < 1e-6);
    }

    #[test]
    fn degenerate_and_separation() {
        assert!(matches!(
            fit_logistic(&two_cell(0.0, 0.0, 100.0)),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            fit_logistic(&two_cell(1.0, 1.0, 100.0)),
            Err(Error::DegenerateFit(_))
        ));
        let f = fit_logistic(&two_cell(0.2, 0.0, 100.0)).unwrap();
        assert!(f.separation_detected);
        assert!(!f.converged);
    }

    #[test]
    fn null_effect_and_intercept_only() {
        let f = fit_logistic(&two_cell(0.3, 0.3, 1000.0)).unwrap();
        assert!(f.coef[1].abs() < 1e-6);
        assert!(f.mcfadden_r2 < 1e-12);
        let d = two_cell(0.2, 0.4, 100.0).select(&["intercept"]).unwrap();
        assert_eq!(fit_logistic(&d).unwrap().mcfadden_r2, 0.0);
    }

    fn planted_matrix(hits: &[(Gender, Option<&str>, u64)]) -> FrequencyMatrix {
        let mut m = FrequencyMatrix::default();
        for (g, v, k) in hits {
            let s = match v {
                None => SubjectProfile::base(*g),
                Some(v) => SubjectProfile::identity(*g, SchemeKind::Political, *v),
            };
            let r = m.row_mut_or_insert(&s);
            r.calls = 1000;
            r.counts.insert("cook".into(), *k);
        }
        m
    }

    #[test]
    fn design_shape() {
        let m = planted_matrix(&[
            (Gender::Man, None, 250),
            (Gender::Woman, None, 100),
            (Gender::Man, Some("liberal"), 50),
            (Gender::Woman, Some("liberal"), 60),
            (Gender::Man, Some("conservative"), 70),
            (Gender::Woman, Some("conservative"), 80),
        ]);
        let d = build_design(&m, SchemeKind::Political, "cook", Observations::AllCalls).unwrap();
        assert_eq!(d.ncols(), 6);
        assert_eq!(
            d.terms,
            ["intercept", "woman", "liberal", "conservative", "woman:liberal", "woman:conservative"]
        );
        assert_eq!(d.rows[0].x, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!((d.rows[0].trials, d.rows[0].successes), (1000.0, 250.0));
        assert_eq!(d.expand().rows.len(), 6000);
        assert!(build_design(&m, SchemeKind::Political, "nurse", Observations::AllCalls).is_err());
        assert!(build_design(&m, SchemeKind::Base, "cook", Observations::AllCalls).is_err());

        let (st, full) = staged_r2(&d).unwrap();
        assert!(st.delta_woman() >= -1e-10 && st.delta_interactions() >= -1e-10);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let b0 = logit(0.25);
        assert!((full.coef_of("woman:liberal").unwrap()
            - (logit(0.06) - logit(0.05) - logit(0.10) + b0))
            .abs()
            < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = two_cell(0.25, 0.5, 400.0);
        let beta = [-0.3, 0.7];
        let g = score(&d, &beta);
        for j in 0..2 {
            let h = 1e-5;
            let mut up = beta;
            up[j] += h;
            let mut dn = beta;
            dn[j] -= h;
            let fd = (log_likelihood(&d, &up) - log_likelihood(&d, &dn)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-4);
        }
    }

    fn job_fit(p: f64) -> JobFit {
        JobFit {
            scheme: SchemeKind::Ethnicity,
            job: "cook".into(),
            fit: Some(FitResult {
                terms: vec!["intercept".into(), "woman".into()],
                coef: vec![0.0, 1.0],
                se: vec![1.0, 1.0],
                z: vec![0.0, 1.0],
                p: vec![p, p],
                log_likelihood: -1.0,
                null_log_likelihood: -2.0,
                mcfadden_r2: 0.5,
                converged: true,
                separation_detected: false,
                iterations: 3,
            }),
            staged: None,
            error: None,
        }
    }

    #[test]
    fn aggregate_fractions() {
        let r = aggregate(&[job_fit(0.01)]).unwrap();
        assert_eq!(r.schemes[0].terms[0].fraction, 1.0);
        assert!(aggregate(&[]).is_err());
        let mut nf = job_fit(0.01);
        nf.fit.as_mut().unwrap().converged = false;
        let r = aggregate(&[job_fit(0.5), nf]).unwrap();
        assert_eq!(r.schemes[0].converged, 1);
        assert_eq!(r.schemes[0].terms[0].fraction, 0.0);
        assert!(fits_csv(&[job_fit(0.5)]).contains("ethnicity,cook,woman,"));
        assert!(pvalue_grid_csv(&[job_fit(0.01)]).contains("ethnicity,cook,woman,sig"));
    }

    #[test]
    fn wald_p_bounds() {
        assert_eq!(wald_p(0.0), 1.0);
        assert!((wald_p(1.959963984540054) - 0.05).abs() < 1e-9);
        assert_eq!(wald_p(f64::NAN), 1.0);
    }
}
