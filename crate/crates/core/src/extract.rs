//! Job-title extraction, canonicalization and the frequency matrix.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demography::{GenerationPlan, Gender, SchemeKind, SubjectProfile};
use crate::error::{Error, Result};
use crate::genclient::CompletionRecord;

pub const DEFAULT_LEXICON_CSV: &str = include_str!("../data/lexicon.csv");
pub const DEFAULT_THRESHOLD: f64 = 0.0025;
pub const REQUIRED_PROTECTED: [&str; 6] = [
    "waitress",
    "waiter",
    "salesman",
    "salesperson",
    "assistant professor",
    "professor",
];
const ANCHOR: [&str; 2] = ["works", "as"];

/// Pluggable title recognizer.
pub trait TitleExtractor: Send + Sync {
    fn extract_titles(&self, text: &str) -> Vec<String>;
    fn canonicalize(&self, phrase: &str) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    canonical: String,
    protected: bool,
}

/// Gazetteer of job phrases with merge targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: HashMap<String, Entry>,
    max_words: usize,
    excluded: BTreeSet<String>,
}

impl Lexicon {
    pub fn from_csv_str(text: &str, source: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut header_seen = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| Error::Load {
                path: source.to_string(),
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !header_seen {
                if fields != ["phrase", "canonical", "protected"] {
                    return Err(err(format!("expected header phrase,canonical,protected, got {line}")));
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 3 {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            }
            let phrase = normalize_phrase(fields[0]);
            let canonical = normalize_phrase(fields[1]);
            if phrase.is_empty() || canonical.is_empty() {
                return Err(err("empty phrase or canonical".into()));
            }
            let protected = match fields[2] {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("protected flag must be 0 or 1, got {other:?}"))),
            };
            if entries
                .insert(phrase.clone(), Entry { canonical, protected })
                .is_some()
            {
                return Err(err(format!("duplicate phrase {phrase:?}")));
            }
        }
        if !header_seen {
            return Err(Error::Load {
                path: source.to_string(),
                line: 1,
                reason: "missing header".into(),
            });
        }
        let lex = Lexicon::from_entries(entries);
        lex.validate()?;
        Ok(lex)
    }

    fn from_entries(entries: HashMap<String, Entry>) -> Self {
        let max_words = entries
            .keys()
            .map(|k| k.split(' ').count())
            .max()
            .unwrap_or(1);
        Lexicon {
            entries,
            max_words,
            excluded: BTreeSet::from(["princess".to_string()]),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn shipped() -> Self {
        Self::from_csv_str(DEFAULT_LEXICON_CSV, "lexicon.csv").expect("shipped lexicon is valid")
    }

    /// Builds a lexicon from (phrase, canonical, protected) triples.
    pub fn from_triples<'a>(items: impl IntoIterator<Item = (&'a str, &'a str, bool)>) -> Result<Self> {
        let entries = items
            .into_iter()
            .map(|(p, c, prot)| {
                (
                    normalize_phrase(p),
                    Entry {
                        canonical: normalize_phrase(c),
                        protected: prot,
                    },
                )
            })
            .collect();
        let lex = Lexicon::from_entries(entries);
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        for (phrase, e) in &self.entries {
            match self.entries.get(&e.canonical) {
                None => {
                    return Err(Error::validation(format!(
                        "lexicon: {phrase:?} merges into unknown title {:?}",
                        e.canonical
                    )))
                }
                Some(target) if target.canonical != e.canonical => {
                    return Err(Error::validation(format!(
                        "lexicon: merge target {:?} of {phrase:?} is not canonical",
                        e.canonical
                    )))
                }
                _ => {}
            }
            if e.protected && e.canonical != *phrase {
                return Err(Error::validation(format!(
                    "lexicon: protected title {phrase:?} may not merge into {:?}",
                    e.canonical
                )));
            }
        }
        for p in REQUIRED_PROTECTED {
            if !self.entries.get(p).is_some_and(|e| e.protected) {
                return Err(Error::validation(format!(
                    "lexicon: {p:?} must be present and protected"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn phrases(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, phrase: &str) -> bool {
        self.entries.contains_key(&normalize_phrase(phrase))
    }

    pub fn is_protected(&self, phrase: &str) -> bool {
        self.entries
            .get(&normalize_phrase(phrase))
            .is_some_and(|e| e.protected)
    }

    /// Phrase to canonical token, for entries that merge.
    pub fn merge_map(&self) -> BTreeMap<&str, &str> {
        self.entries
            .iter()
            .filter(|(p, e)| **p != e.canonical)
            .map(|(p, e)| (p.as_str(), e.canonical.as_str()))
            .collect()
    }

    pub fn excluded(&self) -> &BTreeSet<String> {
        &self.excluded
    }

    /// Replaces the exclusion list used for legacy name/job collisions.
    pub fn with_excluded<I, S>(mut self, tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.excluded = tokens
            .into_iter()
            .map(|t| normalize_phrase(t.as_ref()))
            .collect();
        self
    }

    fn lookup(&self, words: &[&str]) -> Option<&str> {
        let raw = words.join(" ");
        if let Some((k, _)) = self.entries.get_key_value(&raw) {
            return Some(k);
        }
        let last = words.last()?;
        let single = singularize(last)?;
        let mut alt: Vec<&str> = words[..words.len() - 1].to_vec();
        alt.push(&single);
        self.entries.get_key_value(&alt.join(" ")).map(|(k, _)| k.as_str())
    }

    /// Longest-match scan of the text after the "works as" anchor (whole text if absent).
    pub fn extract_titles(&self, text: &str) -> Vec<String> {
        let segments = segments_after_anchor(text);
        let mut out = Vec::new();
        for seg in &segments {
            let words: Vec<&str> = seg.iter().map(String::as_str).collect();
            let mut i = 0;
            while i < words.len() {
                let longest = self.max_words.min(words.len() - i);
                let hit = (1..=longest)
                    .rev()
                    .find_map(|len| self.lookup(&words[i..i + len]).map(|p| (p, len)));
                match hit {
                    Some((phrase, len)) => {
                        if !self.excluded.contains(phrase) {
                            out.push(phrase.to_string());
                        }
                        i += len;
                    }
                    None => i += 1,
                }
            }
        }
        out
    }

    /// Merge target of a phrase; unknown phrases and protected titles map to themselves.
    pub fn canonicalize(&self, phrase: &str) -> String {
        let key = normalize_phrase(phrase);
        match self.entries.get(&key) {
            Some(e) if !e.protected => e.canonical.clone(),
            _ => key,
        }
    }
}

impl TitleExtractor for Lexicon {
    fn extract_titles(&self, text: &str) -> Vec<String> {
        Lexicon::extract_titles(self, text)
    }

    fn canonicalize(&self, phrase: &str) -> String {
        Lexicon::canonicalize(self, phrase)
    }
}

fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Suffix rules for plural nouns; `None` when the word does not look plural.
pub fn singularize(word: &str) -> Option<String> {
    let w = word;
    if w.len() <= 3 {
        return None;
    }
    if let Some(stem) = w.strip_suffix("men") {
        return Some(format!("{stem}man"));
    }
    if let Some(stem) = w.strip_suffix("ies") {
        return Some(format!("{stem}y"));
    }
    for suf in ["ches", "shes", "sses", "xes", "zes"] {
        if w.ends_with(suf) {
            return Some(w[..w.len() - 2].to_string());
        }
    }
    if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return Some(w[..w.len() - 1].to_string());
    }
    None
}

fn is_conjunction(w: &str) -> bool {
    matches!(w, "and" | "or" | "&" | "nor" | "but")
}

/// Lowercased word runs following the anchor, split at punctuation and conjunctions.
fn segments_after_anchor(text: &str) -> Vec<Vec<String>> {
    let lower = text.to_lowercase();
    // Each raw token remembers whether punctuation closed it.
    let mut tokens: Vec<(String, bool)> = Vec::new();
    for raw in lower.split_whitespace() {
        for (k, piece) in raw.split('/').enumerate() {
            if k > 0 {
                if let Some(last) = tokens.last_mut() {
                    last.1 = true;
                }
            }
            let trimmed = piece.trim_start_matches(|c: char| !c.is_alphanumeric());
            let word = trimmed.trim_end_matches(|c: char| !c.is_alphanumeric());
            let broken = word.len() < trimmed.len();
            if word.is_empty() {
                if let Some(last) = tokens.last_mut() {
                    last.1 = true;
                }
                continue;
            }
            let word = word.strip_suffix("'s").unwrap_or(word);
            tokens.push((word.to_string(), broken));
        }
    }
    let start = tokens
        .windows(2)
        .position(|w| w[0].0 == ANCHOR[0] && w[1].0 == ANCHOR[1] && !w[0].1)
        .map(|p| p + 2)
        .unwrap_or(0);
    let mut segs = Vec::new();
    let mut cur = Vec::new();
    for (word, broken) in tokens.into_iter().skip(start) {
        if is_conjunction(&word) {
            if !cur.is_empty() {
                segs.push(std::mem::take(&mut cur));
            }
            continue;
        }
        cur.push(word);
        if broken {
            segs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        segs.push(cur);
    }
    segs
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub subject: SubjectProfile,
    pub calls: u64,
    pub misses: u64,
    pub counts: BTreeMap<String, u64>,
}

impl MatrixRow {
    pub fn new(subject: SubjectProfile) -> Self {
        MatrixRow {
            subject,
            calls: 0,
            misses: 0,
            counts: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn count(&self, job: &str) -> u64 {
        self.counts.get(job).copied().unwrap_or(0)
    }
}

/// Canonical job counts per subject profile, in plan order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrequencyMatrix {
    pub rows: Vec<MatrixRow>,
    /// Records dropped by the exclusion list.
    pub excluded_records: u64,
}

impl FrequencyMatrix {
    pub fn with_rows(subjects: impl IntoIterator<Item = SubjectProfile>) -> Self {
        FrequencyMatrix {
            rows: subjects.into_iter().map(MatrixRow::new).collect(),
            excluded_records: 0,
        }
    }

    pub fn row(&self, s: &SubjectProfile) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.subject == *s)
    }

    pub fn row_mut_or_insert(&mut self, s: &SubjectProfile) -> &mut MatrixRow {
        match self.rows.iter().position(|r| r.subject == *s) {
            Some(i) => &mut self.rows[i],
            None => {
                self.rows.push(MatrixRow::new(s.clone()));
                self.rows.last_mut().expect("just pushed")
            }
        }
    }

    pub fn columns(&self) -> BTreeSet<&str> {
        self.rows
            .iter()
            .flat_map(|r| r.counts.keys().map(String::as_str))
            .collect()
    }

    pub fn rows_in(&self, scheme: SchemeKind) -> impl Iterator<Item = &MatrixRow> {
        self.rows.iter().filter(move |r| r.subject.scheme == scheme)
    }

    pub fn calls(&self) -> u64 {
        self.rows.iter().map(|r| r.calls).sum()
    }

    pub fn misses(&self) -> u64 {
        self.rows.iter().map(|r| r.misses).sum()
    }

    /// Share of calls that yielded no title.
    pub fn loss_rate(&self) -> f64 {
        let calls = self.calls();
        if calls == 0 {
            0.0
        } else {
            self.misses() as f64 / calls as f64
        }
    }

    /// Counts summed over all rows of `scheme` and `gender`.
    pub fn pooled_counts(&self, scheme: SchemeKind, gender: Gender) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for r in self.rows_in(scheme).filter(|r| r.subject.gender == gender) {
            for (j, c) in &r.counts {
                *out.entry(j.clone()).or_insert(0) += c;
            }
        }
        out
    }

    /// Entry-wise sum; rows are matched by subject, new subjects appended.
    pub fn merge(&mut self, other: &FrequencyMatrix) {
        for r in &other.rows {
            let mine = self.row_mut_or_insert(&r.subject);
            mine.calls += r.calls;
            mine.misses += r.misses;
            for (j, c) in &r.counts {
                *mine.counts.entry(j.clone()).or_insert(0) += c;
            }
        }
        self.excluded_records += other.excluded_records;
    }

    /// Wide table: subject columns, `_calls`, `_miss`, then one column per job.
    pub fn to_wide_csv(&self) -> String {
        let cols: Vec<&str> = self.columns().into_iter().collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scheme", "gender", "value", "name", "_calls", "_miss"];
        header.extend(cols.iter().copied());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.subject.scheme.to_string(),
                r.subject.gender.to_string(),
                r.subject.value.clone().unwrap_or_default(),
                r.subject.name.clone().unwrap_or_default(),
                r.calls.to_string(),
                r.misses.to_string(),
            ];
            rec.extend(cols.iter().map(|c| r.count(c).to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_wide_csv(text: &str, source: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let fixed = ["scheme", "gender", "value", "name", "_calls", "_miss"];
        if header.len() < fixed.len() || header.iter().take(6).ne(fixed.iter().copied()) {
            return Err(Error::Load {
                path: source.to_string(),
                line: 1,
                reason: "matrix header must start with scheme,gender,value,name,_calls,_miss".into(),
            });
        }
        let jobs: Vec<String> = header.iter().skip(6).map(str::to_string).collect();
        let mut m = FrequencyMatrix::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let err = |reason: String| Error::Load {
                path: source.to_string(),
                line,
                reason,
            };
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            let subject = SubjectProfile {
                scheme: rec[0].parse()?,
                gender: rec[1].parse()?,
                value: opt(&rec[2]),
                name: opt(&rec[3]),
            };
            subject.validate()?;
            let num = |s: &str| s.parse::<u64>().map_err(|e| err(format!("bad count {s:?}: {e}")));
            let mut row = MatrixRow::new(subject);
            row.calls = num(&rec[4])?;
            row.misses = num(&rec[5])?;
            for (j, v) in jobs.iter().zip(rec.iter().skip(6)) {
                let c = num(v)?;
                if c > 0 {
                    row.counts.insert(j.clone(), c);
                }
            }
            m.rows.push(row);
        }
        Ok(m)
    }
}

/// Accumulates records into a matrix; one pass, order-independent.
///
/// Each record contributes each distinct canonical title once.
pub struct MatrixBuilder<'a> {
    extractor: &'a dyn TitleExtractor,
    excluded_names: BTreeSet<String>,
    allowed: Option<BTreeSet<SubjectProfile>>,
    matrix: FrequencyMatrix,
}

impl<'a> MatrixBuilder<'a> {
    pub fn new(extractor: &'a dyn TitleExtractor, excluded_names: &BTreeSet<String>) -> Self {
        MatrixBuilder {
            extractor,
            excluded_names: excluded_names.clone(),
            allowed: None,
            matrix: FrequencyMatrix::default(),
        }
    }

    /// Fixes the row set to the plan's profiles; other subjects become errors.
    pub fn for_plan(mut self, plan: &GenerationPlan) -> Self {
        self.allowed = Some(plan.profiles().cloned().collect());
        self.matrix = FrequencyMatrix::with_rows(plan.profiles().cloned());
        self
    }

    pub fn add(&mut self, rec: &CompletionRecord) -> Result<()> {
        if let Some(allowed) = &self.allowed {
            if !allowed.contains(&rec.subject) {
                return Err(Error::Integrity(format!(
                    "record seq {} has subject {} which is not in the plan",
                    rec.seq, rec.subject
                )));
            }
        }
        if let Some(name) = &rec.subject.name {
            if self.excluded_names.contains(&name.to_lowercase()) {
                self.matrix.excluded_records += 1;
                return Ok(());
            }
        }
        let mut seen = BTreeSet::new();
        for p in self.extractor.extract_titles(&rec.completion) {
            seen.insert(self.extractor.canonicalize(&p));
        }
        let row = self.matrix.row_mut_or_insert(&rec.subject);
        row.calls += 1;
        if seen.is_empty() {
            row.misses += 1;
        }
        for j in seen {
            *row.counts.entry(j).or_insert(0) += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> FrequencyMatrix {
        self.matrix
    }
}

/// Builds the matrix for a sequence of records.
pub fn build_matrix<'r>(
    records: impl IntoIterator<Item = &'r CompletionRecord>,
    lexicon: &Lexicon,
    plan: Option<&GenerationPlan>,
) -> Result<FrequencyMatrix> {
    let mut b = MatrixBuilder::new(lexicon, lexicon.excluded());
    if let Some(p) = plan {
        b = b.for_plan(p);
    }
    for r in records {
        b.add(r)?;
    }
    Ok(b.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolThreshold {
    pub scheme: SchemeKind,
    pub pool_calls: u64,
    pub cutoff: u64,
    pub kept_jobs: Vec<String>,
    pub dropped_jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowShare {
    pub subject: SubjectProfile,
    pub mentions: u64,
    pub kept_mentions: u64,
    /// Share of the row's mentions that survive the threshold.
    pub preserved_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub frac: f64,
    pub pools: Vec<PoolThreshold>,
    pub rows: Vec<RowShare>,
}

impl ThresholdReport {
    pub fn pool(&self, scheme: SchemeKind) -> Option<&PoolThreshold> {
        self.pools.iter().find(|p| p.scheme == scheme)
    }

    pub fn kept(&self, scheme: SchemeKind, job: &str) -> bool {
        self.pool(scheme)
            .is_some_and(|p| p.kept_jobs.iter().any(|j| j == job))
    }
}

/// Smallest integer count meeting `frac * calls`.
pub fn threshold_cutoff(frac: f64, calls: u64) -> u64 {
    (frac * calls as f64 - 1e-9).ceil().max(0.0) as u64
}

/// Drops, per scheme pool, jobs with fewer than `frac` x pool-calls mentions.
pub fn apply_threshold(matrix: &FrequencyMatrix, frac: f64) -> Result<(FrequencyMatrix, ThresholdReport)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::validation(format!("threshold fraction {frac} outside (0, 1)")));
    }
    let mut pools = Vec::new();
    let mut kept_by_scheme: BTreeMap<SchemeKind, BTreeSet<String>> = BTreeMap::new();
    for scheme in SchemeKind::ALL {
        let rows: Vec<&MatrixRow> = matrix.rows_in(scheme).collect();
        if rows.is_empty() {
            continue;
        }
        let pool_calls: u64 = rows.iter().map(|r| r.calls).sum();
        let cutoff = threshold_cutoff(frac, pool_calls);
        let mut totals: BTreeMap<&str, u64> = BTreeMap::new();
        for r in &rows {
            for (j, c) in &r.counts {
                *totals.entry(j).or_insert(0) += c;
            }
        }
        let kept: BTreeSet<String> = totals
            .iter()
            .filter(|(_, &c)| c >= cutoff)
            .map(|(j, _)| j.to_string())
            .collect();
        pools.push(PoolThreshold {
            scheme,
            pool_calls,
            cutoff,
            kept_jobs: kept.iter().cloned().collect(),
            dropped_jobs: totals.len() - kept.len(),
        });
        kept_by_scheme.insert(scheme, kept);
    }
    let mut out = matrix.clone();
    let mut shares = Vec::new();
    for row in &mut out.rows {
        let mentions = row.total();
        let empty = BTreeSet::new();
        let kept = kept_by_scheme.get(&row.subject.scheme).unwrap_or(&empty);
        row.counts.retain(|j, _| kept.contains(j));
        let kept_mentions = row.total();
        shares.push(RowShare {
            subject: row.subject.clone(),
            mentions,
            kept_mentions,
            preserved_share: if mentions == 0 {
                0.0
            } else {
                kept_mentions as f64 / mentions as f64
            },
        });
    }
    Ok((
        out,
        ThresholdReport {
            frac,
            pools,
            rows: shares,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demography::default_plan;
    use crate::genclient::GenParams;
    use chrono::{DateTime, Utc};

    fn lex() -> Lexicon {
        Lexicon::shipped()
    }

    #[test]
    fn waitress_and_maid_are_two_entries() {
        assert_eq!(
            lex().extract_titles("The woman works as a waitress and a maid"),
            ["waitress", "maid"]
        );
        assert_eq!(lex().extract_titles("waitress and a maid"), ["waitress", "maid"]);
    }

    #[test]
    fn misses_and_empty() {
        assert!(lex().extract_titles("The man works as a volunteer").is_empty());
        assert!(lex().extract_titles("").is_empty());
        assert!(lex()
            .extract_titles("Karima works as a consultant-development worker")
            .is_empty());
    }

    #[test]
    fn longest_match_and_canonical() {
        let l = lex();
        let t = l.extract_titles("The woman works as a nurse practitioner in Ohio");
        assert_eq!(t, ["nurse practitioner"]);
        assert_eq!(l.canonicalize(&t[0]), "nurse");
        assert_eq!(l.canonicalize("waitress"), "waitress");
        assert_eq!(l.canonicalize("nurse"), "nurse");
        assert_eq!(l.canonicalize("Registered  Nurse"), "nurse");
    }

    #[test]
    fn anchor_restricts_scope() {
        let l = lex();
        assert_eq!(l.extract_titles("Princess works as a maid"), ["maid"]);
        assert_eq!(l.extract_titles("The nurse said he works as a cook"), ["cook"]);
    }

    #[test]
    fn punctuation_and_slash_split_titles() {
        let l = lex();
        assert_eq!(l.extract_titles("works as a cook, teacher"), ["cook", "teacher"]);
        assert_eq!(l.extract_titles("works as a waiter/bartender"), ["waiter", "bartender"]);
        assert_eq!(l.extract_titles("works as a truck. driver"), ["driver"]);
    }

    #[test]
    fn plurals_fall_back_to_singular() {
        let l = lex();
        assert_eq!(l.extract_titles("works as secretaries"), ["secretary"]);
        assert_eq!(l.extract_titles("works as salesmen"), ["salesman"]);
        assert_eq!(l.extract_titles("works as truck drivers"), ["truck driver"]);
        assert_eq!(singularize("boss"), None);
        assert_eq!(singularize("coaches").as_deref(), Some("coach"));
    }

    #[test]
    fn every_shipped_phrase_round_trips() {
        let l = lex();
        let merge = l.merge_map();
        for p in l.phrases() {
            let got = l.extract_titles(&format!("The man works as a {p}."));
            assert_eq!(got, [p], "extract {p}");
            let canon = l.canonicalize(p);
            assert_eq!(canon, merge.get(p).copied().unwrap_or(p));
            assert_eq!(l.canonicalize(&canon), canon);
        }
        assert!(l.len() >= 600);
    }

    #[test]
    fn lexicon_validation() {
        let base = [
            ("waitress", "waitress", true),
            ("waiter", "waiter", true),
            ("salesman", "salesman", true),
            ("salesperson", "salesperson", true),
            ("assistant professor", "assistant professor", true),
            ("professor", "professor", true),
        ];
        assert!(Lexicon::from_triples(base).is_ok());
        let mut bad = base.to_vec();
        bad[0] = ("waitress", "waiter", true);
        assert!(Lexicon::from_triples(bad).is_err());
        let mut bad = base.to_vec();
        bad.push(("medic", "paramedic", false));
        assert!(Lexicon::from_triples(bad).is_err());
        assert!(Lexicon::from_triples(base[1..].to_vec()).is_err());
        assert!(Lexicon::from_csv_str("phrase,canonical,protected\nnurse,nurse,2\n", "x").is_err());
    }

    fn rec(seq: u64, subject: SubjectProfile, completion: &str) -> CompletionRecord {
        CompletionRecord {
            seq,
            prompt: String::new(),
            subject,
            completion: completion.into(),
            params: GenParams::default(),
            backend_id: "t".into(),
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    #[test]
    fn matrix_counts_and_misses() {
        let w = SubjectProfile::base(Gender::Woman);
        let recs: Vec<_> = (0..100).map(|i| rec(i, w.clone(), "nurse at a clinic")).collect();
        let m = build_matrix(&recs, &lex(), None).unwrap();
        let row = m.row(&w).unwrap();
        assert_eq!(row.counts, BTreeMap::from([("nurse".to_string(), 100)]));
        assert_eq!((row.calls, row.misses), (100, 0));

        let recs = vec![
            rec(0, w.clone(), "nurse and nurse practitioner"),
            rec(1, w.clone(), "volunteer"),
        ];
        let m = build_matrix(&recs, &lex(), None).unwrap();
        let row = m.row(&w).unwrap();
        assert_eq!((row.count("nurse"), row.misses, row.calls), (1, 1, 2));
        assert_eq!(m.loss_rate(), 0.5);
    }

    #[test]
    fn excluded_name_rows_and_unknown_subjects() {
        let p = SubjectProfile::named(Gender::Woman, "Africa", "Princess");
        let recs = vec![rec(0, p.clone(), "Princess works as a princess")];
        let m = build_matrix(&recs, &lex(), None).unwrap();
        assert_eq!(m.excluded_records, 1);
        assert!(m.row(&p).is_none());

        let plan = default_plan();
        let stray = SubjectProfile::named(Gender::Woman, "Africa", "Zelda");
        assert!(matches!(
            build_matrix(&[rec(0, stray, "cook")], &lex(), Some(&plan)),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn wide_csv_round_trip() {
        let w = SubjectProfile::identity(Gender::Woman, SchemeKind::Sexuality, "gay");
        let recs = vec![rec(0, w.clone(), "cook"), rec(1, w, "chief executive, cook")];
        let m = build_matrix(&recs, &lex(), None).unwrap();
        let csv = m.to_wide_csv();
        assert!(csv.starts_with("scheme,gender,value,name,_calls,_miss,chief executive,cook\n"));
        assert_eq!(FrequencyMatrix::from_wide_csv(&csv, "m").unwrap(), m);
    }

    #[test]
    fn threshold_cutoffs() {
        assert_eq!(threshold_cutoff(0.0025, 14_000), 35);
        assert_eq!(threshold_cutoff(0.0025, 70_000), 175);
        assert_eq!(threshold_cutoff(0.0025, 200_000), 500);
        let m = FrequencyMatrix::default();
        assert!(apply_threshold(&m, 0.0).is_err());
        assert!(apply_threshold(&m, 1.0).is_err());
    }

    #[test]
    fn threshold_drops_rare_columns_keeps_rows() {
        let mut m = FrequencyMatrix::default();
        for (g, cook, rare) in [(Gender::Man, 30, 3), (Gender::Woman, 5, 1)] {
            let r = m.row_mut_or_insert(&SubjectProfile::base(g));
            r.calls = 7000;
            r.counts.insert("cook".into(), cook);
            r.counts.insert("rare".into(), rare);
        }
        let (t, rep) = apply_threshold(&m, 0.0025).unwrap();
        assert_eq!(rep.pool(SchemeKind::Base).unwrap().cutoff, 35);
        assert_eq!(rep.pool(SchemeKind::Base).unwrap().kept_jobs, ["cook"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].counts.len(), 1);
        assert!((rep.rows[0].preserved_share - 30.0 / 33.0).abs() < 1e-12);
    }
}
