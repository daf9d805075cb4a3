//! Subset selection over caption streams: score thresholds, uid keep-sets,
//! and union with uid-exact deduplication. Every selector is a streaming
//! iterator adapter that counts what it dropped; none of them touch payloads.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use thiserror::Error;

use crate::ingest::{scores_from_object, CaptionSample, Shard};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("{metric} score {value} outside [0, 100]")]
    OutOfRange { metric: String, value: f64 },
    #[error("{metric} score is not finite")]
    NotFinite { metric: String },
}

/// Quality metrics produced by external filter models.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Metric {
    /// Image-text matching.
    Itm,
    /// Object detail fulfillment.
    Odf,
    /// Caption text quality.
    Ctq,
    /// Semantic understanding.
    Su,
    Clip,
    Other(String),
}

impl Metric {
    pub fn from_name(name: &str) -> Self {
        match name.to_ascii_lowercase().as_str() {
            "itm" => Metric::Itm,
            "odf" => Metric::Odf,
            "ctq" => Metric::Ctq,
            "su" => Metric::Su,
            "clip" => Metric::Clip,
            _ => Metric::Other(name.to_owned()),
        }
    }

    /// Lowercase field stem; `<name>_score` is the metadata key.
    pub fn name(&self) -> &str {
        match self {
            Metric::Itm => "itm",
            Metric::Odf => "odf",
            Metric::Ctq => "ctq",
            Metric::Su => "su",
            Metric::Clip => "clip",
            Metric::Other(name) => name,
        }
    }

    /// The four MLM-Filter metrics live on a 0-100 scale.
    pub fn is_percent_scale(&self) -> bool {
        matches!(self, Metric::Itm | Metric::Odf | Metric::Ctq | Metric::Su)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScore {
    pub metric: Metric,
    pub value: f64,
}

impl QualityScore {
    pub fn new(metric: Metric, value: f64) -> Result<Self, ScoreError> {
        if !value.is_finite() {
            return Err(ScoreError::NotFinite {
                metric: metric.name().to_owned(),
            });
        }
        if metric.is_percent_scale() && !(0.0..=100.0).contains(&value) {
            return Err(ScoreError::OutOfRange {
                metric: metric.name().to_owned(),
                value,
            });
        }
        Ok(QualityScore { metric, value })
    }
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Counters shared by the selectors below.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub kept: usize,
    /// Scored below the threshold.
    pub dropped: usize,
    /// Never scored for the requested metric.
    pub missing: usize,
}

/// Keeps samples whose `metric` score is at least `threshold`. Samples that
/// lack the metric are dropped and counted separately.
pub struct ThresholdFilter<I> {
    inner: I,
    metric: Metric,
    threshold: f64,
    stats: FilterStats,
}

pub fn filter_by_threshold<I>(
    samples: I,
    metric: Metric,
    threshold: f64,
) -> ThresholdFilter<I::IntoIter>
where
    I: IntoIterator<Item = CaptionSample>,
{
    ThresholdFilter {
        inner: samples.into_iter(),
        metric,
        threshold,
        stats: FilterStats::default(),
    }
}

impl<I> ThresholdFilter<I> {
    pub fn stats(&self) -> FilterStats {
        self.stats
    }
}

impl<I: Iterator<Item = CaptionSample>> Iterator for ThresholdFilter<I> {
    type Item = CaptionSample;

    fn next(&mut self) -> Option<CaptionSample> {
        for sample in self.inner.by_ref() {
            match sample.score(&self.metric) {
                None => self.stats.missing += 1,
                Some(v) if v >= self.threshold => {
                    self.stats.kept += 1;
                    return Some(sample);
                }
                Some(_) => self.stats.dropped += 1,
            }
        }
        None
    }
}

/// A set of sample uids, e.g. a released keep-list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UidSet {
    ids: HashSet<String>,
}

const UID_SET_MAGIC: &[u8; 4] = b"MUID";
const UID_SET_VERSION: u16 = 1;

impl UidSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, uid: &str) -> bool {
        self.ids.contains(uid)
    }

    pub fn insert(&mut self, uid: impl Into<String>) -> bool {
        self.ids.insert(uid.into())
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(String::as_str)
    }

    /// Sorted copy, for reports and deterministic output.
    pub fn sorted(&self) -> Vec<&str> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_unstable();
        v
    }

    /// Loads either format, sniffing the binary magic.
    pub fn read(path: &Path) -> Result<Self, CurationError> {
        let io = |source| CurationError::Io {
            path: path.to_owned(),
            source,
        };
        let mut reader = BufReader::new(File::open(path).map_err(io)?);
        let head = reader.fill_buf().map_err(io)?;
        if head.starts_with(UID_SET_MAGIC) {
            Self::read_binary(reader, path)
        } else {
            Self::read_text(reader, path)
        }
    }

    /// One uid per line; blank lines are ignored.
    pub fn read_text<R: BufRead>(reader: R, path: &Path) -> Result<Self, CurationError> {
        let mut set = UidSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| CurationError::Parse {
                path: path.to_owned(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            let uid = line.trim();
            if !uid.is_empty() {
                set.insert(uid);
            }
        }
        Ok(set)
    }

    /// `MUID`, u16 version, u64 count, then count x (u32 length, UTF-8 bytes),
    /// all little-endian.
    pub fn read_binary<R: Read>(mut reader: R, path: &Path) -> Result<Self, CurationError> {
        let bad = |reason: String| CurationError::Parse {
            path: path.to_owned(),
            line: 0,
            reason,
        };
        let mut head = [0u8; 14];
        reader
            .read_exact(&mut head)
            .map_err(|e| bad(format!("short header: {e}")))?;
        if &head[..4] != UID_SET_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u16::from_le_bytes([head[4], head[5]]);
        if version != UID_SET_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(head[6..14].try_into().unwrap());
        let mut set = UidSet::new();
        let mut len_buf = [0u8; 4];
        for i in 0..count {
            reader
                .read_exact(&mut len_buf)
                .map_err(|e| bad(format!("uid {i}: {e}")))?;
            let len = u32::from_le_bytes(len_buf) as u64;
            let mut raw = Vec::new();
            (&mut reader)
                .take(len)
                .read_to_end(&mut raw)
                .map_err(|e| bad(format!("uid {i}: {e}")))?;
            if raw.len() as u64 != len {
                return Err(bad(format!("uid {i}: truncated")));
            }
            let uid = String::from_utf8(raw).map_err(|_| bad(format!("uid {i}: not UTF-8")))?;
            set.insert(uid);
        }
        Ok(set)
    }

    /// Writes the binary form with uids in sorted order.
    pub fn write_binary<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        sink.write_all(UID_SET_MAGIC)?;
        sink.write_all(&UID_SET_VERSION.to_le_bytes())?;
        sink.write_all(&(self.len() as u64).to_le_bytes())?;
        for uid in self.sorted() {
            sink.write_all(&(uid.len() as u32).to_le_bytes())?;
            sink.write_all(uid.as_bytes())?;
        }
        Ok(())
    }

    pub fn write_binary_file(&self, path: &Path) -> Result<(), CurationError> {
        let io = |source| CurationError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        self.write_binary(&mut out).map_err(io)?;
        out.flush().map_err(io)
    }
}

impl<S: Into<String>> FromIterator<S> for UidSet {
    fn from_iter<T: IntoIterator<Item = S>>(iter: T) -> Self {
        UidSet {
            ids: iter.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub requested: usize,
    pub matched: usize,
    pub unmatched: usize,
}

/// Streams the samples of `shards` whose uid is in the keep-set.
pub struct UidSelector<'a, I: Iterator<Item = Shard>> {
    shards: I,
    current: std::vec::IntoIter<CaptionSample>,
    keep: &'a UidSet,
    matched: HashSet<String>,
    seen: usize,
}

pub fn select_by_uid_set<I>(shards: I, keep: &UidSet) -> UidSelector<'_, I::IntoIter>
where
    I: IntoIterator<Item = Shard>,
{
    UidSelector {
        shards: shards.into_iter(),
        current: Vec::new().into_iter(),
        keep,
        matched: HashSet::new(),
        seen: 0,
    }
}

impl<I: Iterator<Item = Shard>> UidSelector<'_, I> {
    pub fn coverage(&self) -> Coverage {
        Coverage {
            requested: self.keep.len(),
            matched: self.matched.len(),
            unmatched: self.keep.len() - self.matched.len(),
        }
    }

    /// Number of samples scanned so far.
    pub fn scanned(&self) -> usize {
        self.seen
    }

    /// Keep-set uids not (yet) found, sorted.
    pub fn unmatched(&self) -> Vec<&str> {
        let mut v: Vec<_> = self
            .keep
            .iter()
            .filter(|uid| !self.matched.contains(*uid))
            .collect();
        v.sort_unstable();
        v
    }
}

impl<I: Iterator<Item = Shard>> Iterator for UidSelector<'_, I> {
    type Item = CaptionSample;

    fn next(&mut self) -> Option<CaptionSample> {
        loop {
            for sample in self.current.by_ref() {
                self.seen += 1;
                if self.keep.contains(&sample.uid) {
                    self.matched.insert(sample.uid.clone());
                    return Some(sample);
                }
            }
            self.current = self.shards.next()?.samples.into_iter();
        }
    }
}

/// Everything from `a`, then whatever in `b` is new. Only uids are retained
/// in memory, never payloads. The first copy of a uid wins.
pub struct UnionDedup<A, B> {
    a: A,
    b: B,
    in_b: bool,
    seen: HashSet<String>,
    duplicates: usize,
}

pub fn union_dedup<A, B>(a: A, b: B) -> UnionDedup<A::IntoIter, B::IntoIter>
where
    A: IntoIterator<Item = CaptionSample>,
    B: IntoIterator<Item = CaptionSample>,
{
    UnionDedup {
        a: a.into_iter(),
        b: b.into_iter(),
        in_b: false,
        seen: HashSet::new(),
        duplicates: 0,
    }
}

impl<A, B> UnionDedup<A, B> {
    pub fn duplicates_dropped(&self) -> usize {
        self.duplicates
    }

    pub fn emitted(&self) -> usize {
        self.seen.len()
    }
}

impl<A, B> Iterator for UnionDedup<A, B>
where
    A: Iterator<Item = CaptionSample>,
    B: Iterator<Item = CaptionSample>,
{
    type Item = CaptionSample;

    fn next(&mut self) -> Option<CaptionSample> {
        loop {
            let next = if self.in_b {
                self.b.next()?
            } else {
                match self.a.next() {
                    Some(s) => s,
                    None => {
                        self.in_b = true;
                        continue;
                    }
                }
            };
            if self.seen.contains(&next.uid) {
                self.duplicates += 1;
                continue;
            }
            self.seen.insert(next.uid.clone());
            return Some(next);
        }
    }
}

/// uid -> scores produced by an external filter model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    rows: HashMap<String, Vec<QualityScore>>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Adds scores for `uid`; later rows override earlier ones per metric.
    pub fn insert(&mut self, uid: impl Into<String>, scores: Vec<QualityScore>) {
        let row = self.rows.entry(uid.into()).or_default();
        for s in scores {
            match row.iter_mut().find(|r| r.metric == s.metric) {
                Some(existing) => *existing = s,
                None => row.push(s),
            }
        }
    }

    pub fn get(&self, uid: &str) -> Option<&[QualityScore]> {
        self.rows.get(uid).map(Vec::as_slice)
    }

    pub fn uids(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn read(path: &Path) -> Result<Self, CurationError> {
        let file = File::open(path).map_err(|source| CurationError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(BufReader::new(file), path)
    }

    /// Newline-delimited JSON objects, each with a string `uid` and one or
    /// more numeric `<metric>_score` fields.
    pub fn parse<R: BufRead>(reader: R, path: &Path) -> Result<Self, CurationError> {
        let mut table = ScoreTable::new();
        for (i, line) in reader.lines().enumerate() {
            let bad = |reason: String| CurationError::Parse {
                path: path.to_owned(),
                line: i + 1,
                reason,
            };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let Value::Object(map) = value else {
                return Err(bad("row is not an object".into()));
            };
            let uid = map
                .get("uid")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("row has no string uid".into()))?
                .to_owned();
            let scores = scores_from_object(&map).map_err(|e| bad(e.to_string()))?;
            if scores.is_empty() {
                return Err(bad(format!("row for {uid} has no <metric>_score field")));
            }
            table.insert(uid, scores);
        }
        Ok(table)
    }
}

/// Attaches table scores to matching samples, overwriting same-metric values.
pub struct ScoreAttacher<'a, I> {
    inner: I,
    table: &'a ScoreTable,
    used: HashSet<&'a str>,
}

pub fn attach_scores<I>(samples: I, table: &ScoreTable) -> ScoreAttacher<'_, I::IntoIter>
where
    I: IntoIterator<Item = CaptionSample>,
{
    ScoreAttacher {
        inner: samples.into_iter(),
        table,
        used: HashSet::new(),
    }
}

impl<I> ScoreAttacher<'_, I> {
    /// Table rows that matched at least one sample so far.
    pub fn matched_rows(&self) -> usize {
        self.used.len()
    }

    /// Table rows that have not matched any sample so far.
    pub fn unmatched_rows(&self) -> usize {
        self.table.len() - self.used.len()
    }
}

impl<'a, I: Iterator<Item = CaptionSample>> Iterator for ScoreAttacher<'a, I> {
    type Item = CaptionSample;

    fn next(&mut self) -> Option<CaptionSample> {
        let mut sample = self.inner.next()?;
        if let Some((uid, scores)) = self.table.rows.get_key_value(sample.uid.as_str()) {
            self.used.insert(uid.as_str());
            for s in scores {
                sample.set_score(s.clone());
            }
        }
        Some(sample)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEntry {
    pub source: String,
    pub filter: String,
    pub count: f64,
    pub fraction: f64,
}

/// Per-source counts of a training mixture and their shares of the total.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.count).sum()
    }
}

impl fmt::Display for MixtureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .entries
            .iter()
            .map(|e| e.source.len())
            .max()
            .unwrap_or(0)
            .max("source".len());
        writeln!(
            f,
            "{:<width$}  {:>14}  {:>8}  filter",
            "source", "count", "fraction"
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<width$}  {:>14}  {:>8.4}  {}",
                e.source, e.count, e.fraction, e.filter
            )?;
        }
        write!(f, "{:<width$}  {:>14}  {:>8.4}", "total", self.total(), 1.0)
    }
}

/// Builds a mixture table. Counts are plain reals so callers can pass
/// millions as config metadata. An all-zero mixture reports zero fractions.
pub fn mixture_report<S: AsRef<str>>(corpora: &[(S, f64)]) -> MixtureSpec {
    mixture_report_with_filters(
        &corpora
            .iter()
            .map(|(name, count)| (name.as_ref(), "", *count))
            .collect::<Vec<_>>(),
    )
}

pub fn mixture_report_with_filters(corpora: &[(&str, &str, f64)]) -> MixtureSpec {
    let total: f64 = corpora.iter().map(|(_, _, c)| c.max(0.0)).sum();
    let entries = corpora
        .iter()
        .map(|(source, filter, count)| {
            let count = count.max(0.0);
            MixtureEntry {
                source: (*source).to_owned(),
                filter: (*filter).to_owned(),
                count,
                fraction: if total > 0.0 { count / total } else { 0.0 },
            }
        })
        .collect();
    MixtureSpec { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Codec, EncodedImage};

    fn sample(uid: &str) -> CaptionSample {
        CaptionSample::new(
            uid,
            EncodedImage {
                codec: Codec::Png,
                width: 2,
                height: 2,
                bytes: uid.as_bytes().to_vec(),
            },
            format!("caption {uid}"),
        )
    }

    fn scored(uid: &str, su: f64) -> CaptionSample {
        sample(uid).with_score(QualityScore::new(Metric::Su, su).unwrap())
    }

    fn uids(samples: &[CaptionSample]) -> Vec<&str> {
        samples.iter().map(|s| s.uid.as_str()).collect()
    }

    #[test]
    fn threshold_is_inclusive() {
        let input = vec![scored("1", 85.0), scored("2", 84.0), scored("3", 100.0)];
        let out: Vec<_> = filter_by_threshold(input, Metric::Su, 85.0).collect();
        assert_eq!(uids(&out), ["1", "3"]);
    }

    #[test]
    fn threshold_zero_is_identity_and_missing_is_counted() {
        let input = vec![scored("a", 0.0), sample("b"), scored("c", 3.0)];
        let mut filter = filter_by_threshold(input, Metric::Su, 0.0);
        let out: Vec<_> = filter.by_ref().collect();
        assert_eq!(uids(&out), ["a", "c"]);
        assert_eq!(
            filter.stats(),
            FilterStats {
                kept: 2,
                dropped: 0,
                missing: 1
            }
        );
    }

    #[test]
    fn score_validation() {
        assert!(QualityScore::new(Metric::Su, 100.5).is_err());
        assert!(QualityScore::new(Metric::Itm, -1.0).is_err());
        assert!(QualityScore::new(Metric::Clip, f64::NAN).is_err());
        assert!(QualityScore::new(Metric::Clip, 0.27).is_ok());
        assert!(QualityScore::new(Metric::Other("aesthetic".into()), 6.5).is_ok());
        assert_eq!(Metric::from_name("SU"), Metric::Su);
        assert_eq!(Metric::from_name("dfn"), Metric::Other("dfn".into()));
    }

    #[test]
    fn uid_selection_reports_coverage() {
        let shards = vec![
            Shard::new(0, "abcde".chars().map(|c| sample(&c.to_string())).collect()).unwrap(),
            Shard::new(1, "fghij".chars().map(|c| sample(&c.to_string())).collect()).unwrap(),
        ];
        let keep: UidSet = ["c", "f", "q"].into_iter().collect();
        let mut sel = select_by_uid_set(shards, &keep);
        let out: Vec<_> = sel.by_ref().collect();
        assert_eq!(uids(&out), ["c", "f"]);
        assert_eq!(
            sel.coverage(),
            Coverage {
                requested: 3,
                matched: 2,
                unmatched: 1
            }
        );
        assert_eq!(sel.unmatched(), ["q"]);
        assert_eq!(sel.scanned(), 10);
    }

    #[test]
    fn uid_selection_edge_cases() {
        let shard = Shard::new(0, vec![sample("a"), sample("b")]).unwrap();
        let empty = UidSet::new();
        let mut sel = select_by_uid_set(vec![shard.clone()], &empty);
        assert_eq!(sel.by_ref().count(), 0);
        assert_eq!(sel.coverage().matched, 0);

        let all: UidSet = ["a", "b"].into_iter().collect();
        let out: Vec<_> = select_by_uid_set(vec![shard.clone()], &all).collect();
        assert_eq!(out, shard.samples);
    }

    #[test]
    fn union_keeps_first_copy() {
        let mut a_copy = sample("x");
        a_copy.caption = "from a".into();
        let mut b_copy = sample("x");
        b_copy.caption = "from b".into();
        let out: Vec<_> =
            union_dedup(vec![a_copy, sample("y")], vec![b_copy, sample("z")]).collect();
        assert_eq!(uids(&out), ["x", "y", "z"]);
        assert_eq!(out[0].caption, "from a");
    }

    #[test]
    fn union_edge_cases() {
        let b = vec![sample("p"), sample("p"), sample("q")];
        let mut u = union_dedup(Vec::new(), b);
        let out: Vec<_> = u.by_ref().collect();
        assert_eq!(uids(&out), ["p", "q"]);
        assert_eq!(u.duplicates_dropped(), 1);

        let a: Vec<_> = (0..3).map(|i| sample(&format!("a{i}"))).collect();
        let b: Vec<_> = (0..4).map(|i| sample(&format!("b{i}"))).collect();
        assert_eq!(union_dedup(a, b).count(), 7);
    }

    #[test]
    fn attach_overwrites_same_metric() {
        let mut table = ScoreTable::new();
        table.insert("u1", vec![QualityScore::new(Metric::Su, 90.0).unwrap()]);
        table.insert("ghost", vec![QualityScore::new(Metric::Su, 10.0).unwrap()]);
        let input = vec![scored("u1", 10.0), sample("u2")];
        let mut attach = attach_scores(input, &table);
        let out: Vec<_> = attach.by_ref().collect();
        assert_eq!(out[0].score(&Metric::Su), Some(90.0));
        assert_eq!(out[0].scores.len(), 1);
        assert_eq!(out[1].score(&Metric::Su), None);
        assert_eq!(attach.unmatched_rows(), 1);
    }

    #[test]
    fn attach_with_empty_table_is_identity() {
        let input = vec![scored("a", 50.0), sample("b")];
        let out: Vec<_> = attach_scores(input.clone(), &ScoreTable::new()).collect();
        assert_eq!(out, input);
    }

    #[test]
    fn score_table_parsing() {
        let text = "{\"uid\":\"a\",\"su_score\":91.5,\"itm_score\":70}\n\n{\"uid\":\"b\",\"clip_score\":0.3,\"note\":\"x\"}\n";
        let table = ScoreTable::parse(text.as_bytes(), Path::new("t.jsonl")).unwrap();
        assert_eq!(table.len(), 2);
        let a = table.get("a").unwrap();
        assert!(a.contains(&QualityScore::new(Metric::Su, 91.5).unwrap()));

        let err =
            ScoreTable::parse("{\"su_score\":1}\n".as_bytes(), Path::new("t.jsonl")).unwrap_err();
        assert!(matches!(err, CurationError::Parse { line: 1, .. }));
        let err =
            ScoreTable::parse("{\"uid\":\"a\"}\n".as_bytes(), Path::new("t.jsonl")).unwrap_err();
        assert!(matches!(err, CurationError::Parse { .. }));
        let err = ScoreTable::parse(
            "{\"uid\":\"a\",\"su_score\":101}\n".as_bytes(),
            Path::new("t"),
        )
        .unwrap_err();
        assert!(matches!(err, CurationError::Parse { .. }));
    }

    #[test]
    fn uid_set_formats() {
        let dir = tempfile::tempdir().unwrap();
        let text = dir.path().join("keep.txt");
        std::fs::write(&text, "b\na\n\n  c  \na\n").unwrap();
        let set = UidSet::read(&text).unwrap();
        assert_eq!(set.sorted(), ["a", "b", "c"]);

        let bin = dir.path().join("keep.muid");
        set.write_binary_file(&bin).unwrap();
        let raw = std::fs::read(&bin).unwrap();
        assert_eq!(&raw[..4], b"MUID");
        assert_eq!(raw.len(), 4 + 2 + 8 + 3 * (4 + 1));
        assert_eq!(UidSet::read(&bin).unwrap(), set);

        std::fs::write(&bin, &raw[..raw.len() - 1]).unwrap();
        assert!(UidSet::read(&bin).is_err());
    }

    #[test]
    fn mixture_fractions() {
        let one = mixture_report(&[("ccs", 100.0)]);
        assert_eq!(one.entries[0].fraction, 1.0);

        let mixture = mixture_report(&[("ccs-clip", 8.5), ("datacomp-mlmfilter-dfn", 19.9)]);
        assert!((mixture.total() - 28.4).abs() < 1e-12);
        assert!((mixture.entries[0].fraction - 0.2993).abs() < 5e-5);
        assert!((mixture.entries[1].fraction - 0.7007).abs() < 5e-5);

        let thirds = mixture_report(&[("a", 5.0), ("b", 5.0), ("c", 5.0)]);
        let sum: f64 = thirds.entries.iter().map(|e| e.fraction).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(thirds
            .entries
            .iter()
            .all(|e| (e.fraction - 1.0 / 3.0).abs() < 1e-12));

        let empty = mixture_report(&[("a", 0.0)]);
        assert_eq!(empty.entries[0].fraction, 0.0);
        assert!(mixture.to_string().contains("0.7007"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn corpus() -> impl Strategy<Value = Vec<(u16, f64)>> {
            prop::collection::vec((0u16..400, 0.0f64..=100.0), 0..60)
        }

        fn build(rows: &[(u16, f64)]) -> Vec<CaptionSample> {
            rows.iter()
                .enumerate()
                .map(|(i, (_, s))| scored(&format!("s{i}"), *s))
                .collect()
        }

        proptest! {
            #[test]
            fn threshold_filter_is_monotone_and_idempotent(rows in corpus(), t1 in 0.0f64..=100.0, t2 in 0.0f64..=100.0) {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let samples = build(&rows);
                let low: HashSet<_> = filter_by_threshold(samples.clone(), Metric::Su, lo).map(|s| s.uid).collect();
                let high: Vec<_> = filter_by_threshold(samples, Metric::Su, hi).collect();
                prop_assert!(high.iter().all(|s| low.contains(&s.uid)));
                let again: Vec<_> = filter_by_threshold(high.clone(), Metric::Su, hi).collect();
                prop_assert_eq!(again, high);
            }

            #[test]
            fn union_is_set_union_and_payload_preserving(a in prop::collection::hash_set(0u16..300, 0..80), b in prop::collection::hash_set(0u16..300, 0..80)) {
                let sa: Vec<_> = a.iter().map(|i| sample(&i.to_string())).collect();
                let sb: Vec<_> = b.iter().map(|i| sample(&i.to_string())).collect();
                let out: Vec<_> = union_dedup(sa, sb).collect();
                prop_assert_eq!(out.len(), a.len() + b.len() - a.intersection(&b).count());
                let got: HashSet<u16> = out.iter().map(|s| s.uid.parse().unwrap()).collect();
                let want: HashSet<u16> = a.union(&b).copied().collect();
                prop_assert_eq!(got, want);
                prop_assert!(out.iter().all(|s| s.image.bytes == s.uid.as_bytes()));
            }

            #[test]
            fn uid_selection_is_intersection(ids in prop::collection::hash_set(0u16..200, 0..50), keep in prop::collection::hash_set(0u16..200, 0..50)) {
                let shard = Shard::new(0, ids.iter().map(|i| sample(&i.to_string())).collect()).unwrap();
                let keep_set: UidSet = keep.iter().map(|i| i.to_string()).collect();
                let mut sel = select_by_uid_set(vec![shard], &keep_set);
                let got: HashSet<u16> = sel.by_ref().map(|s| s.uid.parse().unwrap()).collect();
                let want: HashSet<u16> = ids.intersection(&keep).copied().collect();
                prop_assert_eq!(sel.coverage().matched, want.len());
                prop_assert_eq!(got, want);
            }
        }
    }
}
