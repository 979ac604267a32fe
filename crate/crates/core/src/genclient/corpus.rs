//! JSON-lines corpus files: header line, flat records, checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GenParams;
use crate::demography::{plan_calls, GenerationPlan, Gender, PromptSpec, SchemeKind, SubjectProfile};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub corpus_format: u32,
    pub plan_hash: Option<String>,
    pub toolkit_version: String,
}

impl CorpusHeader {
    pub fn new(plan_hash: Option<String>) -> Self {
        CorpusHeader {
            corpus_format: CORPUS_FORMAT,
            plan_hash,
            toolkit_version: TOOLKIT_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRecord {
    pub seq: u64,
    pub subject: SubjectProfile,
    pub prompt: String,
    pub completion: String,
    pub params: GenParams,
    pub backend_id: String,
    pub timestamp: DateTime<Utc>,
}

/// On-disk shape of one record; field order is the file's column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordLine {
    pub seq: u64,
    pub scheme: SchemeKind,
    pub gender: Gender,
    pub value: Option<String>,
    pub name: Option<String>,
    pub prompt: String,
    pub completion: String,
    pub top_k: u32,
    pub temperature: f64,
    pub max_words: u32,
    pub seed: Option<u64>,
    pub backend_id: String,
    pub ts: String,
}

impl From<&CompletionRecord> for RecordLine {
    fn from(r: &CompletionRecord) -> Self {
        RecordLine {
            seq: r.seq,
            scheme: r.subject.scheme,
            gender: r.subject.gender,
            value: r.subject.value.clone(),
            name: r.subject.name.clone(),
            prompt: r.prompt.clone(),
            completion: r.completion.clone(),
            top_k: r.params.top_k,
            temperature: r.params.temperature,
            max_words: r.params.max_words,
            seed: r.params.seed,
            backend_id: r.backend_id.clone(),
            ts: r.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
        }
    }
}

impl TryFrom<RecordLine> for CompletionRecord {
    type Error = String;

    fn try_from(l: RecordLine) -> std::result::Result<Self, String> {
        let subject = SubjectProfile {
            gender: l.gender,
            scheme: l.scheme,
            value: l.value,
            name: l.name,
        };
        subject.validate().map_err(|e| e.to_string())?;
        let timestamp = DateTime::parse_from_rfc3339(&l.ts)
            .map_err(|e| format!("bad timestamp {:?}: {e}", l.ts))?
            .with_timezone(&Utc);
        Ok(CompletionRecord {
            seq: l.seq,
            subject,
            prompt: l.prompt,
            completion: l.completion,
            params: GenParams {
                top_k: l.top_k,
                temperature: l.temperature,
                max_words: l.max_words,
                seed: l.seed,
            },
            backend_id: l.backend_id,
            timestamp,
        })
    }
}

pub fn record_to_line(r: &CompletionRecord) -> String {
    serde_json::to_string(&RecordLine::from(r)).expect("record serializes")
}

/// Streaming reader that verifies header shape, record schema and seq contiguity.
pub struct CorpusReader {
    path: String,
    lines: std::io::Lines<BufReader<File>>,
    header: CorpusHeader,
    line_no: usize,
    next_seq: u64,
}

impl CorpusReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let display = path.display().to_string();
        let first = match lines.next() {
            Some(l) => l.map_err(|e| Error::io(path, e))?,
            None => {
                return Err(Error::Load {
                    path: display,
                    line: 1,
                    reason: "empty corpus file (missing header)".into(),
                })
            }
        };
        let header: CorpusHeader = serde_json::from_str(&first).map_err(|e| Error::Load {
            path: display.clone(),
            line: 1,
            reason: format!("bad corpus header: {e}"),
        })?;
        if header.corpus_format != CORPUS_FORMAT {
            return Err(Error::Load {
                path: display,
                line: 1,
                reason: format!("unsupported corpus format {}", header.corpus_format),
            });
        }
        Ok(CorpusReader {
            path: display,
            lines,
            header,
            line_no: 1,
            next_seq: 0,
        })
    }

    pub fn header(&self) -> &CorpusHeader {
        &self.header
    }

    fn fail(&self, reason: String) -> Error {
        Error::Load {
            path: self.path.clone(),
            line: self.line_no,
            reason,
        }
    }
}

impl Iterator for CorpusReader {
    type Item = Result<CompletionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        let line = match self.lines.next()? {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::io(&self.path, e))),
        };
        self.line_no += 1;
        let parsed: RecordLine = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => return Some(Err(self.fail(format!("bad record: {e}")))),
        };
        if parsed.seq != self.next_seq {
            return Some(Err(Error::Integrity(format!(
                "{}:{}: expected seq {}, found {}",
                self.path, self.line_no, self.next_seq, parsed.seq
            ))));
        }
        self.next_seq += 1;
        Some(CompletionRecord::try_from(parsed).map_err(|r| self.fail(r)))
    }
}

pub fn read_corpus(path: &Path) -> Result<(CorpusHeader, Vec<CompletionRecord>)> {
    let mut rdr = CorpusReader::open(path)?;
    let header = rdr.header().clone();
    let records = rdr.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Rebuilds the generation plan implied by a corpus, in order of first appearance.
///
/// When the header carries a plan hash, the derived plan must hash to it.
pub fn derive_plan(path: &Path) -> Result<GenerationPlan> {
    let mut rdr = CorpusReader::open(path)?;
    let header = rdr.header().clone();
    let mut order: Vec<PromptSpec> = Vec::new();
    let mut index: BTreeMap<SubjectProfile, usize> = BTreeMap::new();
    for rec in rdr.by_ref() {
        let rec = rec?;
        match index.get(&rec.subject) {
            Some(&i) => {
                if order[i].text != rec.prompt {
                    return Err(Error::Integrity(format!(
                        "seq {}: subject {} seen with two prompts",
                        rec.seq, rec.subject
                    )));
                }
                order[i].calls += 1;
            }
            None => {
                index.insert(rec.subject.clone(), order.len());
                order.push(PromptSpec {
                    subject: rec.subject,
                    text: rec.prompt,
                    calls: 1,
                });
            }
        }
    }
    if order.is_empty() {
        return Err(Error::Integrity(format!(
            "{}: corpus has no records to derive a plan from",
            path.display()
        )));
    }
    let plan = plan_calls(order)?;
    if let Some(h) = &header.plan_hash {
        if *h != plan.hash {
            return Err(Error::Integrity(format!(
                "{}: header plan hash {h} does not match the records (derived {})",
                path.display(),
                plan.hash
            )));
        }
    }
    Ok(plan)
}

/// Progress marker written next to a corpus every `checkpoint_every` records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub plan_hash: Option<String>,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

pub fn checkpoint_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".ckpt");
    PathBuf::from(s)
}

pub fn errors_path(corpus: &Path) -> PathBuf {
    let mut s = corpus.as_os_str().to_owned();
    s.push(".errors.jsonl");
    PathBuf::from(s)
}

fn hash_prefix(path: &Path, bytes: u64) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut left = bytes;
    while left > 0 {
        let want = buf.len().min(left as usize);
        let got = f.read(&mut buf[..want]).map_err(|e| Error::io(path, e))?;
        if got == 0 {
            return Err(Error::Integrity(format!(
                "{}: shorter than its checkpoint ({bytes} bytes)",
                path.display()
            )));
        }
        h.update(&buf[..got]);
        left -= got as u64;
    }
    Ok(hex::encode(h.finalize()))
}

/// Append-only, seq-ordered writer with periodic checkpoints.
pub struct CorpusWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Sha256,
    bytes: u64,
    records: u64,
    plan_hash: Option<String>,
    checkpoint_every: u64,
}

impl CorpusWriter {
    pub fn create(path: &Path, header: &CorpusHeader, checkpoint_every: u64) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let _ = std::fs::remove_file(checkpoint_path(path));
        let _ = std::fs::remove_file(errors_path(path));
        let mut w = CorpusWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            hasher: Sha256::new(),
            bytes: 0,
            records: 0,
            plan_hash: header.plan_hash.clone(),
            checkpoint_every: checkpoint_every.max(1),
        };
        let line = serde_json::to_string(header)?;
        w.write_line(&line)?;
        w.checkpoint()?;
        Ok(w)
    }

    /// Reopens a corpus at its last checkpoint, discarding any bytes written after it.
    pub fn resume(path: &Path, header: &CorpusHeader, checkpoint_every: u64) -> Result<Self> {
        let ckpt_file = checkpoint_path(path);
        let text = std::fs::read_to_string(&ckpt_file).map_err(|e| Error::io(&ckpt_file, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            Error::Integrity(format!("{}: unreadable checkpoint: {e}", ckpt_file.display()))
        })?;
        if ckpt.plan_hash != header.plan_hash {
            return Err(Error::Integrity(format!(
                "{}: checkpoint belongs to a different plan",
                ckpt_file.display()
            )));
        }
        let actual = hash_prefix(path, ckpt.bytes)?;
        if actual != ckpt.sha256 {
            return Err(Error::Integrity(format!(
                "{}: content does not match checkpoint hash",
                path.display()
            )));
        }
        // Replay the verified prefix into the running hash and check its header.
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut prefix = vec![0u8; ckpt.bytes as usize];
        f.read_exact(&mut prefix).map_err(|e| Error::io(path, e))?;
        let first = prefix.split(|&b| b == b'\n').next().unwrap_or_default();
        let on_disk: CorpusHeader = serde_json::from_slice(first)
            .map_err(|e| Error::Integrity(format!("{}: bad header: {e}", path.display())))?;
        if on_disk.plan_hash != header.plan_hash {
            return Err(Error::Integrity(format!(
                "{}: header plan hash differs from the plan being resumed",
                path.display()
            )));
        }
        let mut hasher = Sha256::new();
        hasher.update(&prefix);
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(ckpt.bytes).map_err(|e| Error::io(path, e))?;
        let mut file = file;
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        Ok(CorpusWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            hasher,
            bytes: ckpt.bytes,
            records: ckpt.records,
            plan_hash: ckpt.plan_hash,
            checkpoint_every: checkpoint_every.max(1),
        })
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        let path = &self.path;
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
        self.hasher.update(line.as_bytes());
        self.hasher.update(b"\n");
        self.bytes += line.len() as u64 + 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn append(&mut self, rec: &CompletionRecord) -> Result<()> {
        if rec.seq != self.records {
            return Err(Error::Integrity(format!(
                "out-of-order append: expected seq {}, got {}",
                self.records, rec.seq
            )));
        }
        self.write_line(&record_to_line(rec))?;
        self.records += 1;
        if self.records.is_multiple_of(self.checkpoint_every) {
            self.checkpoint()?;
        }
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let ckpt = Checkpoint {
            plan_hash: self.plan_hash.clone(),
            records: self.records,
            bytes: self.bytes,
            sha256: hex::encode(self.hasher.clone().finalize()),
        };
        let p = checkpoint_path(&self.path);
        std::fs::write(&p, serde_json::to_string(&ckpt)? + "\n").map_err(|e| Error::io(&p, e))
    }

    /// Flushes, removes the checkpoint and returns the file's sha256.
    pub fn finish(mut self) -> Result<String> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let _ = std::fs::remove_file(checkpoint_path(&self.path));
        Ok(hex::encode(self.hasher.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64) -> CompletionRecord {
        CompletionRecord {
            seq,
            subject: SubjectProfile::named(Gender::Woman, "Africa", "Karima"),
            prompt: "Karima works as a".into(),
            completion: "nurse at a clinic".into(),
            params: GenParams::default(),
            backend_id: "test".into(),
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    #[test]
    fn record_line_has_exact_field_order() {
        let line = record_to_line(&rec(3));
        assert_eq!(
            line,
            r#"{"seq":3,"scheme":"continent","gender":"woman","value":"Africa","name":"Karima","prompt":"Karima works as a","completion":"nurse at a clinic","top_k":50,"temperature":1.0,"max_words":10,"seed":null,"backend_id":"test","ts":"1970-01-01T00:00:00.000Z"}"#
        );
        let back: RecordLine = serde_json::from_str(&line).unwrap();
        assert_eq!(CompletionRecord::try_from(back).unwrap(), rec(3));
    }

    #[test]
    fn extra_field_is_rejected() {
        let line = record_to_line(&rec(0)).replace("\"ts\"", "\"extra\":1,\"ts\"");
        assert!(serde_json::from_str::<RecordLine>(&line).is_err());
    }

    #[test]
    fn write_read_and_gap_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut w = CorpusWriter::create(&p, &CorpusHeader::new(None), 2).unwrap();
        for s in 0..5 {
            w.append(&rec(s)).unwrap();
        }
        assert!(w.append(&rec(9)).is_err());
        w.finish().unwrap();
        let (h, recs) = read_corpus(&p).unwrap();
        assert_eq!(h.plan_hash, None);
        assert_eq!(recs.len(), 5);

        let text = std::fs::read_to_string(&p).unwrap();
        let gap: Vec<&str> = text.lines().filter(|l| !l.contains("\"seq\":2,")).collect();
        std::fs::write(&p, gap.join("\n") + "\n").unwrap();
        assert!(matches!(read_corpus(&p), Err(Error::Integrity(_))));
    }

    #[test]
    fn resume_truncates_to_checkpoint_and_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let header = CorpusHeader::new(Some("abc".into()));
        let mut w = CorpusWriter::create(&p, &header, 2).unwrap();
        for s in 0..3 {
            w.append(&rec(s)).unwrap();
        }
        drop(w);
        let mut w = CorpusWriter::resume(&p, &header, 2).unwrap();
        assert_eq!(w.records(), 2);
        w.append(&rec(2)).unwrap();
        w.checkpoint().unwrap();
        drop(w);

        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("clinic", "clinix")).unwrap();
        assert!(matches!(
            CorpusWriter::resume(&p, &header, 2),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn derived_plan_counts_calls() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut w = CorpusWriter::create(&p, &CorpusHeader::new(None), 10).unwrap();
        for s in 0..4 {
            w.append(&rec(s)).unwrap();
        }
        w.finish().unwrap();
        let plan = derive_plan(&p).unwrap();
        assert_eq!(plan.total_calls, 4);
        assert_eq!(plan.specs.len(), 1);
    }
}
