//! Comparison of predicted occupational shares against labor-survey data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demography::{Gender, SchemeKind};
use crate::error::{Error, Result};
use crate::extract::FrequencyMatrix;
use crate::inequality::TopJobs;
use crate::regress::wald_p;

pub const DEFAULT_LABOR_CSV: &str = include_str!("../data/labor_2019.csv");
pub const DEFAULT_MATCH_TABLE: &str = include_str!("../data/match_table.psv");
pub const LABOR_HEADER: [&str; 7] = [
    "occupation",
    "total_employed_thousands",
    "women_pct",
    "white_pct",
    "black_pct",
    "asian_pct",
    "hispanic_pct",
];
pub const ETHNICITIES: [&str; 4] = ["Asian", "Black", "Hispanic", "White"];
const MEN_SUFFIX: &str = " (men count)";
const WOMEN_SUFFIX: &str = " (women count)";

/// Shares as proportions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaborRow {
    pub occupation: String,
    pub total_thousands: f64,
    pub women: f64,
    pub white: f64,
    pub black: f64,
    pub asian: f64,
    pub hispanic: f64,
}

impl LaborRow {
    pub fn ethnicity(&self, value: &str) -> Option<f64> {
        match value.to_ascii_lowercase().as_str() {
            "white" => Some(self.white),
            "black" => Some(self.black),
            "asian" => Some(self.asian),
            "hispanic" => Some(self.hispanic),
            _ => None,
        }
    }

    pub fn gender(&self, g: Gender) -> f64 {
        match g {
            Gender::Woman => self.women,
            Gender::Man => 1.0 - self.women,
        }
    }
}

/// Occupation rows plus economy-wide shares from the `#meta` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaborTable {
    pub economy: LaborRow,
    pub rows: Vec<LaborRow>,
}

fn parse_pct(s: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("{what}: not a number: {s:?}"))?;
    if !(0.0..=100.0).contains(&v) {
        return Err(format!("{what}: percentage {v} outside [0, 100]"));
    }
    Ok(v / 100.0)
}

fn parse_row(fields: &[&str]) -> std::result::Result<LaborRow, String> {
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, got {}", fields.len()));
    }
    let total: f64 = fields[1]
        .trim()
        .parse()
        .map_err(|_| format!("total_employed_thousands: not a number: {:?}", fields[1]))?;
    if !(total.is_finite() && total >= 0.0) {
        return Err(format!("total_employed_thousands must be non-negative, got {total}"));
    }
    Ok(LaborRow {
        occupation: fields[0].trim().to_string(),
        total_thousands: total,
        women: parse_pct(fields[2], "women_pct")?,
        white: parse_pct(fields[3], "white_pct")?,
        black: parse_pct(fields[4], "black_pct")?,
        asian: parse_pct(fields[5], "asian_pct")?,
        hispanic: parse_pct(fields[6], "hispanic_pct")?,
    })
}

impl LaborTable {
    pub fn from_csv_str(text: &str, source: &str) -> Result<Self> {
        let text = text.trim_start_matches('\u{feff}');
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut economy = None;
        let mut header = false;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let err = |reason: String| Error::Load {
                path: source.to_string(),
                line,
                reason,
            };
            let fields: Vec<&str> = rec.iter().collect();
            let first = fields.first().map(|f| f.trim()).unwrap_or("");
            if first == "#meta" {
                let mut f = fields.clone();
                f[0] = "economy";
                economy = Some(parse_row(&f).map_err(err)?);
                continue;
            }
            if first.starts_with('#') || (fields.len() == 1 && first.is_empty()) {
                continue;
            }
            if !header {
                if fields.iter().map(|f| f.trim()).ne(LABOR_HEADER.iter().copied()) {
                    return Err(err(format!("expected header {}", LABOR_HEADER.join(","))));
                }
                header = true;
                continue;
            }
            let row = parse_row(&fields).map_err(err)?;
            if row.occupation.is_empty() {
                return Err(err("empty occupation".into()));
            }
            rows.push(row);
        }
        let economy = economy.ok_or_else(|| Error::Load {
            path: source.to_string(),
            line: 1,
            reason: "missing #meta row with economy-wide shares".into(),
        })?;
        if rows.is_empty() {
            return Err(Error::Load {
                path: source.to_string(),
                line: 1,
                reason: "no occupation rows".into(),
            });
        }
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.occupation.as_str()) {
                return Err(Error::validation(format!(
                    "{source}: duplicate occupation {:?}",
                    r.occupation
                )));
            }
        }
        Ok(LaborTable { economy, rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn shipped() -> Self {
        Self::from_csv_str(DEFAULT_LABOR_CSV, "labor_2019.csv").expect("shipped labor table is valid")
    }

    pub fn row(&self, occupation: &str) -> Option<&LaborRow> {
        self.rows.iter().find(|r| r.occupation == occupation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Direct,
    AveragePredictions,
    SumTruthSubcategories,
    GenderedSplit,
    Excluded,
}

impl std::str::FromStr for MatchRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s.trim() {
            "direct" => MatchRule::Direct,
            "average_predictions" => MatchRule::AveragePredictions,
            "sum_truth_subcategories" => MatchRule::SumTruthSubcategories,
            "gendered_split" => MatchRule::GenderedSplit,
            "excluded" => MatchRule::Excluded,
            other => return Err(format!("unknown rule {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchEntry {
    pub tokens: Vec<String>,
    /// Truth occupations; for excluded entries, the reason.
    pub truth: Vec<String>,
    pub rule: MatchRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub entries: Vec<MatchEntry>,
}

impl MatchTable {
    pub fn from_str(text: &str, source: &str) -> Result<Self> {
        let mut entries: Vec<MatchEntry> = Vec::new();
        let mut header = false;
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Load {
                path: source.to_string(),
                line: i + 1,
                reason,
            };
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            if !header {
                if fields != ["predicted_tokens", "truth_occupations", "rule"] {
                    return Err(err("expected header predicted_tokens|truth_occupations|rule".into()));
                }
                header = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            }
            let split = |s: &str| -> Vec<String> {
                s.split(';')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(str::to_string)
                    .collect()
            };
            let tokens: Vec<String> = split(fields[0]).iter().map(|t| t.to_lowercase()).collect();
            let truth = split(fields[1]);
            let rule: MatchRule = fields[2].parse().map_err(err)?;
            if tokens.is_empty() {
                return Err(err("no predicted tokens".into()));
            }
            if truth.is_empty() {
                return Err(err(if rule == MatchRule::Excluded {
                    "excluded entry needs a reason".into()
                } else {
                    "no truth occupations".into()
                }));
            }
            match rule {
                MatchRule::Direct | MatchRule::GenderedSplit if tokens.len() != 1 || truth.len() != 1 => {
                    return Err(err(format!("{rule:?} entries map one token to one occupation")))
                }
                MatchRule::GenderedSplit
                    if !truth[0].ends_with(MEN_SUFFIX) && !truth[0].ends_with(WOMEN_SUFFIX) =>
                {
                    return Err(err("gendered_split occupation needs a (men count) or (women count) suffix".into()))
                }
                MatchRule::AveragePredictions if truth.len() != 1 => {
                    return Err(err("average_predictions maps to one occupation".into()))
                }
                MatchRule::SumTruthSubcategories if tokens.len() != 1 => {
                    return Err(err("sum_truth_subcategories takes one token".into()))
                }
                _ => {}
            }
            for t in &tokens {
                if !seen.insert(t.clone()) {
                    return Err(err(format!("token {t:?} appears in more than one entry")));
                }
            }
            entries.push(MatchEntry { tokens, truth, rule });
        }
        if !header {
            return Err(Error::Load {
                path: source.to_string(),
                line: 1,
                reason: "missing header".into(),
            });
        }
        Ok(MatchTable { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str(&text, &path.display().to_string())
    }

    pub fn shipped() -> Self {
        Self::from_str(DEFAULT_MATCH_TABLE, "match_table.psv").expect("shipped match table is valid")
    }

    pub fn entry_for(&self, token: &str) -> Option<&MatchEntry> {
        self.entries.iter().find(|e| e.tokens.iter().any(|t| t == token))
    }

    /// Every token named by the table, in entry order.
    pub fn tokens(&self) -> Vec<String> {
        self.entries.iter().flat_map(|e| e.tokens.clone()).collect()
    }
}

/// Ground truth for one matched unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthProfile {
    pub label: String,
    pub employed_thousands: f64,
    pub women: f64,
    /// Keyed by ethnicity label.
    pub ethnicity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedUnit {
    pub label: String,
    pub tokens: Vec<String>,
    pub rule: MatchRule,
    pub truth: TruthProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSet {
    pub units: Vec<MatchedUnit>,
    /// (token, reason) for tokens without a truth counterpart.
    pub excluded: Vec<(String, String)>,
}

impl MatchedSet {
    pub fn matched_tokens(&self) -> usize {
        self.units.iter().map(|u| u.tokens.len()).sum()
    }
}

fn truth_for(entry: &MatchEntry, labor: &LaborTable) -> Result<TruthProfile> {
    let lookup = |name: &str| {
        labor.row(name).ok_or_else(|| {
            Error::validation(format!("match table references unknown labor occupation {name:?}"))
        })
    };
    let eth = |f: &dyn Fn(&str) -> f64| -> BTreeMap<String, f64> {
        ETHNICITIES.iter().map(|e| (e.to_string(), f(e))).collect()
    };
    match entry.rule {
        MatchRule::GenderedSplit => {
            let t = &entry.truth[0];
            let (name, women) = match t.strip_suffix(WOMEN_SUFFIX) {
                Some(n) => (n, true),
                None => (t.strip_suffix(MEN_SUFFIX).expect("validated suffix"), false),
            };
            let r = lookup(name)?;
            let share = if women { r.women } else { 1.0 - r.women };
            Ok(TruthProfile {
                label: t.clone(),
                employed_thousands: r.total_thousands * share,
                women: if women { 1.0 } else { 0.0 },
                ethnicity: eth(&|e| r.ethnicity(e).unwrap_or(0.0)),
            })
        }
        _ => {
            let rows: Vec<&LaborRow> = entry.truth.iter().map(|n| lookup(n)).collect::<Result<_>>()?;
            let total: f64 = rows.iter().map(|r| r.total_thousands).sum();
            let weighted = |f: &dyn Fn(&LaborRow) -> f64| {
                if total > 0.0 {
                    rows.iter().map(|r| r.total_thousands * f(r)).sum::<f64>() / total
                } else {
                    rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64
                }
            };
            Ok(TruthProfile {
                label: entry.truth.join("; "),
                employed_thousands: total,
                women: weighted(&|r| r.women),
                ethnicity: eth(&|e| weighted(&|r| r.ethnicity(e).unwrap_or(0.0))),
            })
        }
    }
}

/// Resolves predicted tokens to truth units; every token ends matched or excluded.
pub fn match_jobs(predicted: &[String], table: &MatchTable, labor: &LaborTable) -> Result<MatchedSet> {
    let wanted: BTreeSet<&str> = predicted.iter().map(String::as_str).collect();
    let mut units = Vec::new();
    let mut excluded = Vec::new();
    for entry in &table.entries {
        let present: Vec<String> = entry
            .tokens
            .iter()
            .filter(|t| wanted.contains(t.as_str()))
            .cloned()
            .collect();
        if present.is_empty() {
            continue;
        }
        if entry.rule == MatchRule::Excluded {
            for t in present {
                excluded.push((t, entry.truth.join("; ")));
            }
            continue;
        }
        units.push(MatchedUnit {
            label: present.join("/"),
            truth: truth_for(entry, labor)?,
            tokens: present,
            rule: entry.rule,
        });
    }
    for t in predicted {
        if table.entry_for(t).is_none() {
            excluded.push((t.clone(), "no match-table entry".into()));
        }
    }
    Ok(MatchedSet { units, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentInputs {
    pub g: f64,
    pub e: f64,
    pub d_hat: f64,
}

/// `gamma(c) = G(c) E(c) / D_hat(c)`.
pub fn adjustment_factor(a: AdjustmentInputs) -> Result<f64> {
    if !(a.g > 0.0 && a.e > 0.0 && a.d_hat > 0.0) {
        return Err(Error::validation(format!(
            "adjustment inputs must be positive: G={}, E={}, D={}",
            a.g, a.e, a.d_hat
        )));
    }
    Ok(a.g * a.e / a.d_hat)
}

/// A comparison cell: gender and optional ethnicity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub gender: Gender,
    pub value: Option<String>,
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.value {
            Some(v) => write!(f, "{v} {}", self.gender),
            None => write!(f, "{}", self.gender),
        }
    }
}

/// Adjustment inputs for the base cells or the gender x ethnicity cells.
pub fn adjustment_inputs(labor: &LaborTable, scheme: SchemeKind) -> Result<Vec<(Cell, AdjustmentInputs)>> {
    let econ = &labor.economy;
    match scheme {
        SchemeKind::Base => Ok(Gender::BOTH
            .into_iter()
            .map(|g| {
                (
                    Cell { gender: g, value: None },
                    AdjustmentInputs { g: econ.gender(g), e: 1.0, d_hat: 0.5 },
                )
            })
            .collect()),
        SchemeKind::Ethnicity => {
            let d_hat = 1.0 / (2.0 * ETHNICITIES.len() as f64);
            let mut out = Vec::new();
            for v in ETHNICITIES {
                for g in Gender::BOTH {
                    out.push((
                        Cell { gender: g, value: Some(v.to_string()) },
                        AdjustmentInputs {
                            g: econ.gender(g),
                            e: econ.ethnicity(v).expect("known ethnicity"),
                            d_hat,
                        },
                    ));
                }
            }
            Ok(out)
        }
        other => Err(Error::validation(format!(
            "no labor ground truth exists for the {other} scheme"
        ))),
    }
}

/// Pred(i, c): share of job i among all job mentions of cell c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionTable {
    pub cells: Vec<Cell>,
    pub shares: BTreeMap<Cell, BTreeMap<String, f64>>,
}

impl PredictionTable {
    pub fn from_matrix(matrix: &FrequencyMatrix, scheme: SchemeKind) -> Result<Self> {
        let mut counts: BTreeMap<Cell, BTreeMap<String, u64>> = BTreeMap::new();
        let mut cells = Vec::new();
        for r in matrix.rows_in(scheme) {
            let cell = Cell {
                gender: r.subject.gender,
                value: r.subject.value.clone(),
            };
            if !cells.contains(&cell) {
                cells.push(cell.clone());
            }
            let e = counts.entry(cell).or_default();
            for (j, c) in &r.counts {
                *e.entry(j.clone()).or_insert(0) += c;
            }
        }
        if cells.is_empty() {
            return Err(Error::validation(format!("matrix has no {scheme} rows")));
        }
        let shares = counts
            .into_iter()
            .map(|(cell, row)| {
                let total: u64 = row.values().sum();
                let s = row
                    .into_iter()
                    .map(|(j, c)| (j, if total == 0 { 0.0 } else { c as f64 / total as f64 }))
                    .collect();
                (cell, s)
            })
            .collect();
        Ok(PredictionTable { cells, shares })
    }

    pub fn share(&self, cell: &Cell, job: &str) -> f64 {
        self.shares
            .get(cell)
            .and_then(|m| m.get(job))
            .copied()
            .unwrap_or(0.0)
    }

    /// Unit share: mean over the unit's tokens.
    pub fn unit_share(&self, cell: &Cell, unit: &MatchedUnit) -> f64 {
        unit.tokens.iter().map(|t| self.share(cell, t)).sum::<f64>() / unit.tokens.len() as f64
    }
}

/// `adj.Pred(i, c) = gamma(c) Pred(i, c)`.
pub fn adjust_predictions(pred: &PredictionTable, gamma: &BTreeMap<Cell, f64>) -> Result<PredictionTable> {
    let mut shares = BTreeMap::new();
    for cell in &pred.cells {
        let g = gamma
            .get(cell)
            .ok_or_else(|| Error::validation(format!("no adjustment factor for cell {cell}")))?;
        let row = pred.shares.get(cell).cloned().unwrap_or_default();
        shares.insert(cell.clone(), row.into_iter().map(|(j, s)| (j, s * g)).collect());
    }
    Ok(PredictionTable {
        cells: pred.cells.clone(),
        shares,
    })
}

/// Renormalizes a job's values across cells so they sum to 1; `None` when all are zero.
pub fn proportional(values: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = values.iter().sum();
    (total > 0.0).then(|| values.iter().map(|v| v / total).collect())
}

/// Women share per (truth label, ethnicity), replacing the equal-share assumption.
pub type WomenShareOverrides = BTreeMap<(String, String), f64>;

/// Truth employment of a unit in a cell. Women share is taken as equal across
/// ethnicities unless an override exists for the unit's truth label.
pub fn truth_employment(unit: &MatchedUnit, cell: &Cell, overrides: &WomenShareOverrides) -> f64 {
    let women = cell
        .value
        .as_ref()
        .and_then(|v| overrides.get(&(unit.truth.label.clone(), v.clone())))
        .copied()
        .unwrap_or(unit.truth.women);
    let g = match cell.gender {
        Gender::Woman => women,
        Gender::Man => 1.0 - women,
    };
    let e = match &cell.value {
        Some(v) => unit.truth.ethnicity.get(v).copied().unwrap_or(0.0),
        None => 1.0,
    };
    unit.truth.employed_thousands * g * e
}

/// Mean squared difference between paired shares.
pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::validation("mse inputs differ in length"));
    }
    if pred.is_empty() {
        return Err(Error::validation("mse needs at least one matched job"));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallTau {
    pub tau: f64,
    pub p: f64,
    pub n: usize,
}

/// Pair counts behind tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCounts {
    pub n: u64,
    /// Concordant minus discordant pairs.
    pub s: i64,
    pub ties_a: u64,
    pub ties_b: u64,
}

impl PairCounts {
    pub fn tau_b(&self) -> Option<f64> {
        let n0 = self.n * (self.n - 1) / 2;
        let da = (n0 - self.ties_a) as f64;
        let db = (n0 - self.ties_b) as f64;
        (da > 0.0 && db > 0.0).then(|| self.s as f64 / (da * db).sqrt())
    }
}

fn ties_of_sorted(v: &[f64]) -> u64 {
    let mut ties = 0u64;
    let mut run = 1u64;
    for i in 1..=v.len() {
        if i < v.len() && v[i] == v[i - 1] {
            run += 1;
        } else {
            ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties
}

fn merge_count(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], buf) + merge_count(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Knight's O(n log n) pair counting.
pub fn pair_counts(a: &[f64], b: &[f64]) -> PairCounts {
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));
    let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let mut sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let ties_a = ties_of_sorted(&sa);
    let mut joint = 0u64;
    let mut run = 1u64;
    for i in 1..=n {
        if i < n && sa[i] == sa[i - 1] && sb[i] == sb[i - 1] {
            run += 1;
        } else {
            joint += run * (run - 1) / 2;
            run = 1;
        }
    }
    let swaps = merge_count(&mut sb, &mut Vec::with_capacity(n));
    let ties_b = ties_of_sorted(&sb);
    let n0 = (n as u64) * (n as u64).saturating_sub(1) / 2;
    let s = n0 as i64 - ties_a as i64 - ties_b as i64 + joint as i64 - 2 * swaps as i64;
    PairCounts {
        n: n as u64,
        s,
        ties_a,
        ties_b,
    }
}

fn tie_sums(v: &[f64]) -> (f64, f64, f64) {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
    let mut run = 1.0;
    for i in 1..=s.len() {
        if i < s.len() && s[i] == s[i - 1] {
            run += 1.0;
        } else {
            if run > 1.0 {
                t0 += run * (run - 1.0) / 2.0;
                t1 += run * (run - 1.0) * (run - 2.0);
                t2 += run * (run - 1.0) * (2.0 * run + 5.0);
            }
            run = 1.0;
        }
    }
    (t0, t1, t2)
}

/// Kendall tau-b with a tie-corrected normal approximation for the p-value.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<KendallTau> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "kendall_tau inputs differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::validation("kendall_tau needs at least 2 observations"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::validation("kendall_tau inputs contain NaN"));
    }
    let pc = pair_counts(a, b);
    let tau = pc
        .tau_b()
        .ok_or_else(|| Error::UndefinedDistribution("one ranking is entirely tied".into()))?;
    let n = a.len() as f64;
    let (xt, x0, x1) = tie_sums(a);
    let (yt, y0, y1) = tie_sums(b);
    let m = n * (n - 1.0);
    let mut var = (m * (2.0 * n + 5.0) - x1 - y1) / 18.0 + 2.0 * xt * yt / m;
    if n > 2.0 {
        var += x0 * y0 / (9.0 * m * (n - 2.0));
    }
    let p = if var > 0.0 {
        wald_p(pc.s as f64 / var.sqrt())
    } else {
        1.0
    };
    Ok(KendallTau {
        tau,
        p,
        n: a.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewBin {
    pub jobs: usize,
    /// Mean of predicted minus true women share; `None` for an empty bin.
    pub mean_deviation: Option<f64>,
    pub exceptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewSummary {
    pub low: SkewBin,
    pub high: SkewBin,
}

pub const LOW_WOMEN_SHARE: f64 = 0.25;
pub const HIGH_WOMEN_SHARE: f64 = 0.75;

/// Mean women-share deviation in male-dominated (<25%) and female-dominated (>75%) jobs.
pub fn skew_summary(items: &[(String, f64, f64)]) -> SkewSummary {
    let bin = |keep: &dyn Fn(f64) -> bool| {
        let sel: Vec<&(String, f64, f64)> = items.iter().filter(|(_, _, t)| keep(*t)).collect();
        if sel.is_empty() {
            return SkewBin {
                jobs: 0,
                mean_deviation: None,
                exceptions: vec![],
            };
        }
        let mean = sel.iter().map(|(_, p, t)| p - t).sum::<f64>() / sel.len() as f64;
        let exceptions = sel
            .iter()
            .filter(|(_, p, t)| {
                let d = p - t;
                (mean > 0.0 && d < 0.0) || (mean < 0.0 && d > 0.0)
            })
            .map(|(j, _, _)| j.clone())
            .collect();
        SkewBin {
            jobs: sel.len(),
            mean_deviation: Some(mean),
            exceptions,
        }
    };
    SkewSummary {
        low: bin(&|t| t < LOW_WOMEN_SHARE),
        high: bin(&|t| t > HIGH_WOMEN_SHARE),
    }
}

/// Whether comparisons use adjusted or raw predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseMode {
    #[default]
    Adjusted,
    Raw,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub mode: MseMode,
    pub women_overrides: WomenShareOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitComparison {
    pub unit: String,
    pub truth: String,
    /// Proportional representation per cell, in the report's cell order.
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub cell: String,
    pub jobs: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTau {
    /// "base" or an ethnicity label.
    pub group: String,
    pub tau: Option<KendallTau>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarbellRow {
    pub unit: String,
    pub predicted_women: f64,
    pub actual_women: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopComparison {
    pub cell: String,
    pub predicted: TopJobs,
    pub actual: TopJobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub scheme: SchemeKind,
    pub mode: MseMode,
    pub cells: Vec<String>,
    pub gamma: Vec<(String, f64)>,
    pub matched_tokens: usize,
    pub excluded: Vec<(String, String)>,
    pub units: Vec<UnitComparison>,
    /// Units dropped because no cell predicted them.
    pub unpredicted_units: Vec<String>,
    pub cell_stats: Vec<CellStats>,
    pub taus: Vec<GroupTau>,
    pub skew: SkewSummary,
    pub barbell: Vec<BarbellRow>,
    pub top5: Vec<TopComparison>,
}

fn women_share(values: &[(Gender, f64)]) -> Option<f64> {
    let total: f64 = values.iter().map(|(_, v)| v).sum();
    (total > 0.0).then(|| {
        values
            .iter()
            .filter(|(g, _)| *g == Gender::Woman)
            .map(|(_, v)| v)
            .sum::<f64>()
            / total
    })
}

fn top_k(items: impl IntoIterator<Item = (String, f64)>, k: usize) -> TopJobs {
    let mut v: Vec<(String, f64)> = items.into_iter().filter(|(_, s)| *s > 0.0).collect();
    let total: f64 = v.iter().map(|(_, s)| s).sum();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(k);
    let jobs: Vec<(String, f64)> = v
        .into_iter()
        .map(|(j, s)| (j, if total > 0.0 { s / total } else { 0.0 }))
        .collect();
    let cumulative = jobs.iter().map(|(_, s)| s).sum();
    TopJobs { jobs, cumulative }
}

/// Truth top-k per cell over every labor row; predicted top-k over all predicted tokens.
fn top_tables(
    pred: &PredictionTable,
    labor: &LaborTable,
    matched: &MatchedSet,
    k: usize,
) -> Vec<TopComparison> {
    pred.cells
        .iter()
        .map(|cell| {
            let predicted = top_k(
                pred.shares.get(cell).cloned().unwrap_or_default(),
                k,
            );
            let actual = top_k(
                labor.rows.iter().map(|r| {
                    let e = match &cell.value {
                        Some(v) => r.ethnicity(v).unwrap_or(0.0),
                        None => 1.0,
                    };
                    (r.occupation.clone(), r.total_thousands * r.gender(cell.gender) * e)
                }),
                k,
            );
            // Truth-side jobs absent from the predictions are listed with share 0.
            let mut predicted = predicted;
            for (occ, _) in &actual.jobs {
                let covered = matched.units.iter().any(|u| u.truth.label.contains(occ.as_str()));
                if !covered && !predicted.jobs.iter().any(|(j, _)| j == occ) {
                    predicted.jobs.push((occ.clone(), 0.0));
                }
            }
            TopComparison {
                cell: cell.to_string(),
                predicted,
                actual,
            }
        })
        .collect()
}

/// Full comparison of one scheme (base or ethnicity) against the labor table.
pub fn compare(
    matrix: &FrequencyMatrix,
    scheme: SchemeKind,
    predicted_tokens: &[String],
    table: &MatchTable,
    labor: &LaborTable,
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    let mode = opts.mode;
    let raw = PredictionTable::from_matrix(matrix, scheme)?;
    let inputs = adjustment_inputs(labor, scheme)?;
    let mut gamma = BTreeMap::new();
    for (cell, a) in &inputs {
        gamma.insert(cell.clone(), adjustment_factor(*a)?);
    }
    let adjusted = adjust_predictions(&raw, &gamma)?;
    let used = match mode {
        MseMode::Adjusted => &adjusted,
        MseMode::Raw => &raw,
    };
    let matched = match_jobs(predicted_tokens, table, labor)?;
    let cells = raw.cells.clone();

    let mut units = Vec::new();
    let mut unpredicted = Vec::new();
    for u in &matched.units {
        let pv: Vec<f64> = cells.iter().map(|c| used.unit_share(c, u)).collect();
        let tv: Vec<f64> = cells.iter().map(|c| truth_employment(u, c, &opts.women_overrides)).collect();
        match (proportional(&pv), proportional(&tv)) {
            (Some(p), Some(t)) => units.push(UnitComparison {
                unit: u.label.clone(),
                truth: u.truth.label.clone(),
                predicted: p,
                actual: t,
            }),
            _ => unpredicted.push(u.label.clone()),
        }
    }

    let mut cell_stats = Vec::new();
    for (ci, c) in cells.iter().enumerate() {
        let p: Vec<f64> = units.iter().map(|u| u.predicted[ci]).collect();
        let t: Vec<f64> = units.iter().map(|u| u.actual[ci]).collect();
        if !p.is_empty() {
            cell_stats.push(CellStats {
                cell: c.to_string(),
                jobs: p.len(),
                mse: mse(&p, &t)?,
            });
        }
    }

    // Women share per group: base, or within each ethnicity.
    let groups: Vec<Option<String>> = {
        let mut g: Vec<Option<String>> = Vec::new();
        for c in &cells {
            if !g.contains(&c.value) {
                g.push(c.value.clone());
            }
        }
        g
    };
    let mut taus = Vec::new();
    let mut barbell = Vec::new();
    for group in &groups {
        let members: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].value == *group).collect();
        let mut pw = Vec::new();
        let mut tw = Vec::new();
        let mut names = Vec::new();
        for u in &units {
            let p = women_share(&members.iter().map(|&i| (cells[i].gender, u.predicted[i])).collect::<Vec<_>>());
            let t = women_share(&members.iter().map(|&i| (cells[i].gender, u.actual[i])).collect::<Vec<_>>());
            if let (Some(p), Some(t)) = (p, t) {
                pw.push(p);
                tw.push(t);
                names.push(u.unit.clone());
            }
        }
        let label = group.clone().unwrap_or_else(|| "base".into());
        let (tau, note) = match kendall_tau(&pw, &tw) {
            Ok(k) => (Some(k), None),
            Err(e) => (None, Some(e.to_string())),
        };
        taus.push(GroupTau { group: label, tau, note });
        if group.is_none() || groups.len() == 1 {
            for ((n, p), t) in names.into_iter().zip(pw).zip(tw) {
                barbell.push(BarbellRow {
                    unit: n,
                    predicted_women: p,
                    actual_women: t,
                    difference: p - t,
                });
            }
        }
    }
    if barbell.is_empty() {
        // Ethnicity reports pool both genders across ethnicities for the barbell.
        for u in &units {
            let pairs = |v: &Vec<f64>| cells.iter().zip(v).map(|(c, x)| (c.gender, *x)).collect::<Vec<_>>();
            if let (Some(p), Some(t)) = (women_share(&pairs(&u.predicted)), women_share(&pairs(&u.actual))) {
                barbell.push(BarbellRow {
                    unit: u.unit.clone(),
                    predicted_women: p,
                    actual_women: t,
                    difference: p - t,
                });
            }
        }
    }
    let skew = skew_summary(
        &barbell
            .iter()
            .map(|b| (b.unit.clone(), b.predicted_women, b.actual_women))
            .collect::<Vec<_>>(),
    );
    let top5 = top_tables(&raw, labor, &matched, 5);
    Ok(ComparisonReport {
        scheme,
        mode,
        cells: cells.iter().map(|c| c.to_string()).collect(),
        gamma: inputs
            .iter()
            .map(|(c, _)| (c.to_string(), gamma[c]))
            .collect(),
        matched_tokens: matched.matched_tokens(),
        excluded: matched.excluded.clone(),
        units,
        unpredicted_units: unpredicted,
        cell_stats,
        taus,
        skew,
        barbell,
        top5,
    })
}

impl ComparisonReport {
    /// Heat-grid data: `cell,unit,predicted,actual,deviation`.
    pub fn heat_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "unit", "predicted", "actual", "deviation"])
            .expect("in-memory write");
        for u in &self.units {
            for (ci, c) in self.cells.iter().enumerate() {
                w.write_record([
                    c.as_str(),
                    &u.unit,
                    &format!("{:.6}", u.predicted[ci]),
                    &format!("{:.6}", u.actual[ci]),
                    &format!("{:.6}", u.predicted[ci] - u.actual[ci]),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn barbell_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["unit", "predicted_women", "actual_women", "difference"])
            .expect("in-memory write");
        for b in &self.barbell {
            w.write_record([
                b.unit.as_str(),
                &format!("{:.6}", b.predicted_women),
                &format!("{:.6}", b.actual_women),
                &format!("{:.6}", b.difference),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn top5_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cell", "side", "rank", "job", "share"]).expect("in-memory write");
        for t in &self.top5 {
            for (side, top) in [("predicted", &t.predicted), ("actual", &t.actual)] {
                for (i, (j, s)) in top.jobs.iter().enumerate() {
                    w.write_record([
                        t.cell.as_str(),
                        side,
                        &(i + 1).to_string(),
                        j,
                        &format!("{s:.4}"),
                    ])
                    .expect("in-memory write");
                }
                w.write_record([t.cell.as_str(), side, "sum", "", &format!("{:.4}", top.cumulative)])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn stats_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "group", "n", "value", "p"]).expect("in-memory write");
        for c in &self.cell_stats {
            w.write_record(["mse", c.cell.as_str(), &c.jobs.to_string(), &format!("{:.6}", c.mse), ""])
                .expect("in-memory write");
        }
        for t in &self.taus {
            match &t.tau {
                Some(k) => w.write_record([
                    "kendall_tau",
                    t.group.as_str(),
                    &k.n.to_string(),
                    &format!("{:.4}", k.tau),
                    &format!("{:.4}", k.p),
                ]),
                None => w.write_record(["kendall_tau", t.group.as_str(), "0", "", ""]),
            }
            .expect("in-memory write");
        }
        for (name, bin) in [("skew_low", &self.skew.low), ("skew_high", &self.skew.high)] {
            w.write_record([
                name,
                &bin.exceptions.join("; "),
                &bin.jobs.to_string(),
                &bin.mean_deviation.map_or(String::new(), |m| format!("{m:.4}")),
                "",
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shipped_tables_load() {
        let l = LaborTable::shipped();
        assert!((l.economy.women - 0.47).abs() < 1e-12);
        assert!(l.rows.len() >= 50);
        let m = MatchTable::shipped();
        let all = m.tokens();
        let set = match_jobs(&all, &m, &l).unwrap();
        assert_eq!(set.matched_tokens(), 44);
        assert_eq!(set.excluded.len(), 6);
    }

    #[test]
    fn labor_errors_carry_line_numbers() {
        let head = "#meta,1000,47,77.7,12.3,6.5,17.6\noccupation,total_employed_thousands,women_pct,white_pct,black_pct,asian_pct,hispanic_pct\n";
        let ok = format!("{head}Cooks,10,40,50,20,10,30\n");
        assert_eq!(LaborTable::from_csv_str(&ok, "t").unwrap().rows.len(), 1);
        let bad = format!("{head}Cooks,10,40,50,20,10,30\nNurses,10,120,50,20,10,30\n");
        match LaborTable::from_csv_str(&bad, "t") {
            Err(Error::Load { line, reason, .. }) => {
                assert_eq!(line, 4);
                assert!(reason.contains("women_pct"));
            }
            other => panic!("{other:?}"),
        }
        assert!(LaborTable::from_csv_str("", "t").is_err());
        assert!(LaborTable::from_csv_str(head, "t").is_err());
    }

    #[test]
    fn match_rules() {
        let l = LaborTable::shipped();
        let m = MatchTable::shipped();
        let set = match_jobs(&["waitress".into(), "teacher".into(), "volunteer".into()], &m, &l).unwrap();
        let w = set.units.iter().find(|u| u.label == "waitress").unwrap();
        assert_eq!(w.truth.label, "Waiters and waitresses (women count)");
        assert_eq!(w.truth.women, 1.0);
        let t = set.units.iter().find(|u| u.label == "teacher").unwrap();
        assert_eq!(t.rule, MatchRule::SumTruthSubcategories);
        let subs = [
            "Postsecondary teachers",
            "Preschool and kindergarten teachers",
            "Elementary and middle school teachers",
            "Special education teachers",
        ];
        let total: f64 = subs.iter().map(|s| l.row(s).unwrap().total_thousands).sum();
        assert!((t.truth.employed_thousands - total).abs() < 1e-9);
        assert_eq!(set.excluded, [("volunteer".to_string(), "no match-table entry".to_string())]);

        let bad = MatchTable::from_str("predicted_tokens|truth_occupations|rule\nfoo|Nowhere|direct\n", "x").unwrap();
        assert!(match_jobs(&["foo".into()], &bad, &l).is_err());
        assert!(MatchTable::from_str("predicted_tokens|truth_occupations|rule\nfoo||excluded\n", "x").is_err());
        assert!(MatchTable::from_str(
            "predicted_tokens|truth_occupations|rule\nfoo|A|direct\nfoo|B|direct\n",
            "x"
        )
        .is_err());
    }

    #[test]
    fn adjustment_examples() {
        let g = |g, e, d| adjustment_factor(AdjustmentInputs { g, e, d_hat: d }).unwrap();
        assert!((g(0.530, 0.065, 0.125) - 0.276).abs() < 0.001);
        assert!((g(0.470, 0.777, 0.125) - 2.922).abs() < 0.001);
        assert!((g(0.5, 0.25, 0.125) - 1.0).abs() < 1e-12);
        assert!(adjustment_factor(AdjustmentInputs { g: 0.5, e: 1.0, d_hat: 0.0 }).is_err());
        let base = adjustment_inputs(&LaborTable::shipped(), SchemeKind::Base).unwrap();
        let gam: Vec<f64> = base.iter().map(|(_, a)| adjustment_factor(*a).unwrap()).collect();
        assert!((gam[0] - 1.060).abs() < 1e-9 && (gam[1] - 0.940).abs() < 1e-9);
    }

    #[test]
    fn proportional_representation() {
        let m = Cell { gender: Gender::Man, value: None };
        let w = Cell { gender: Gender::Woman, value: None };
        let pred = PredictionTable {
            cells: vec![m.clone(), w.clone()],
            shares: BTreeMap::from([
                (m.clone(), BTreeMap::from([("cook".to_string(), 0.1)])),
                (w.clone(), BTreeMap::from([("cook".to_string(), 0.1)])),
            ]),
        };
        let adj = adjust_predictions(&pred, &BTreeMap::from([(m.clone(), 1.0), (w.clone(), 3.0)])).unwrap();
        let pr = proportional(&[adj.share(&m, "cook"), adj.share(&w, "cook")]).unwrap();
        assert!((pr[0] - 0.25).abs() < 1e-12 && (pr[1] - 0.75).abs() < 1e-12);
        let same = adjust_predictions(&pred, &BTreeMap::from([(m.clone(), 1.0), (w.clone(), 1.0)])).unwrap();
        assert_eq!(same, pred);
        assert!(adjust_predictions(&pred, &BTreeMap::from([(m, 1.0)])).is_err());
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, 0.5], &[0.3, 0.5]).unwrap(), 0.0);
        assert!((mse(&[0.2, 0.4], &[0.4, 0.8]).unwrap() - 0.10).abs() < 1e-12);
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn skew_examples() {
        let s = skew_summary(&[("a".into(), 0.3, 0.3), ("b".into(), 0.9, 0.9)]);
        assert_eq!(s.low.mean_deviation, None);
        assert_eq!(s.high.mean_deviation, Some(0.0));
        let s = skew_summary(&[("cook".into(), 0.30, 0.10)]);
        assert!((s.low.mean_deviation.unwrap() - 0.20).abs() < 1e-12);
        let s = skew_summary(&[
            ("a".into(), 0.30, 0.10),
            ("b".into(), 0.25, 0.15),
            ("c".into(), 0.05, 0.10),
        ]);
        assert_eq!(s.low.exceptions, ["c"]);
    }

    fn brute(a: &[f64], b: &[f64]) -> PairCounts {
        let n = a.len();
        let (mut s, mut ta, mut tb) = (0i64, 0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                let da = a[i].partial_cmp(&a[j]).unwrap();
                let db = b[i].partial_cmp(&b[j]).unwrap();
                use std::cmp::Ordering::Equal;
                if da == Equal {
                    ta += 1;
                }
                if db == Equal {
                    tb += 1;
                }
                if da != Equal && db != Equal {
                    s += if da == db { 1 } else { -1 };
                }
            }
        }
        PairCounts { n: n as u64, s, ties_a: ta, ties_b: tb }
    }

    #[test]
    fn kendall_examples() {
        let a: Vec<f64> = (0..20).map(f64::from).collect();
        let r: Vec<f64> = a.iter().rev().copied().collect();
        assert_eq!(kendall_tau(&a, &a).unwrap().tau, 1.0);
        assert_eq!(kendall_tau(&a, &r).unwrap().tau, -1.0);
        assert!(kendall_tau(&a, &a).unwrap().p < 1e-6);
        assert!(kendall_tau(&a[..3], &a[..2]).is_err());
        assert!(matches!(
            kendall_tau(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedDistribution(_))
        ));
        // Reference values computed with scipy.stats.kendalltau.
        let x = [1.0, 2.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 3.0, 3.0, 5.0, 4.0];
        let k = kendall_tau(&x, &y).unwrap();
        assert!((k.tau - 0.6428571428571429).abs() < 1e-12, "{}", k.tau);
        assert!((k.p - 0.07983871964585261).abs() < 1e-9, "{}", k.p);
    }

    proptest! {
        #[test]
        fn knight_matches_brute_force(pairs in prop::collection::vec((0u8..8, 0u8..8), 2..120)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            prop_assert_eq!(pair_counts(&a, &b), brute(&a, &b));
        }

        #[test]
        fn mse_symmetric_under_permutation(v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..30)) {
            let p: Vec<f64> = v.iter().map(|x| x.0).collect();
            let t: Vec<f64> = v.iter().map(|x| x.1).collect();
            let m = mse(&p, &t).unwrap();
            prop_assert!(m >= 0.0);
            let pr: Vec<f64> = p.iter().rev().copied().collect();
            let tr: Vec<f64> = t.iter().rev().copied().collect();
            prop_assert!((mse(&pr, &tr).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn gamma_is_linear(g in 0.01f64..1.0, e in 0.01f64..1.0, d in 0.01f64..1.0) {
            let a = adjustment_factor(AdjustmentInputs { g, e, d_hat: d }).unwrap();
            let b = adjustment_factor(AdjustmentInputs { g: 2.0 * g, e, d_hat: d }).unwrap();
            prop_assert!((b - 2.0 * a).abs() < 1e-12 * b.max(1.0));
        }
    }
}
