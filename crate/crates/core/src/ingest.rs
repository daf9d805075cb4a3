//! Shard archives of image-text caption samples.
//!
//! A shard is a tar archive in the webdataset layout: every sample contributes
//! `<uid>.<img_ext>`, `<uid>.txt` and optionally `<uid>.json`, all sharing the
//! uid as basename. Sample order follows the first appearance of each uid.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::curation::{Metric, QualityScore, ScoreError};

/// Nominal number of samples per shard.
pub const SHARD_CAPACITY: usize = 10_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed archive {path} at entry {entry:?}: {reason}")]
    Malformed {
        path: PathBuf,
        entry: String,
        reason: String,
    },
    #[error("invalid shard: {0}")]
    Invalid(String),
}

/// Image codecs a sample may carry. The discriminant doubles as the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Codec {
    Jpeg = 1,
    Png = 2,
    Webp = 3,
}

impl Codec {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "jpg" | "jpeg" => Some(Codec::Jpeg),
            "png" => Some(Codec::Png),
            "webp" => Some(Codec::Webp),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Codec::Jpeg => "jpg",
            Codec::Png => "png",
            Codec::Webp => "webp",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Codec::Jpeg),
            2 => Some(Codec::Png),
            3 => Some(Codec::Webp),
            _ => None,
        }
    }
}

/// An encoded image payload. Pixels are never decoded here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub codec: Codec,
    pub width: u32,
    pub height: u32,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionSample {
    pub uid: String,
    pub image: EncodedImage,
    pub caption: String,
    /// Kept sorted by metric name, at most one entry per metric.
    pub scores: Vec<QualityScore>,
}

impl CaptionSample {
    pub fn new(uid: impl Into<String>, image: EncodedImage, caption: impl Into<String>) -> Self {
        CaptionSample {
            uid: uid.into(),
            image,
            caption: caption.into(),
            scores: Vec::new(),
        }
    }

    pub fn score(&self, metric: &Metric) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| &s.metric == metric)
            .map(|s| s.value)
    }

    /// Sets a score, replacing any existing value for the same metric.
    pub fn set_score(&mut self, score: QualityScore) {
        match self
            .scores
            .binary_search_by(|s| s.metric.name().cmp(score.metric.name()))
        {
            Ok(i) => self.scores[i] = score,
            Err(i) => self.scores.insert(i, score),
        }
    }

    pub fn with_score(mut self, score: QualityScore) -> Self {
        self.set_score(score);
        self
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.uid.is_empty() {
            return Err(IngestError::Invalid("sample uid is empty".into()));
        }
        if self.uid.contains(['.', '/']) {
            return Err(IngestError::Invalid(format!(
                "sample uid {:?} contains '.' or '/'",
                self.uid
            )));
        }
        if self.image.width == 0 || self.image.height == 0 {
            return Err(IngestError::Invalid(format!(
                "sample {} has zero image dimension {}x{}",
                self.uid, self.image.width, self.image.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Shard {
    pub shard_id: u64,
    pub samples: Vec<CaptionSample>,
}

impl Shard {
    pub fn new(shard_id: u64, samples: Vec<CaptionSample>) -> Result<Self, IngestError> {
        let shard = Shard { shard_id, samples };
        shard.validate()?;
        Ok(shard)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            s.validate()?;
            if !seen.insert(s.uid.as_str()) {
                return Err(IngestError::Invalid(format!(
                    "duplicate uid {} in shard {}",
                    s.uid, self.shard_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SkipReason {
    MissingImage,
    MissingCaption,
    CaptionNotUtf8,
    BadMetadata(String),
    UnknownDimensions,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedSample {
    pub uid: String,
    pub reason: SkipReason,
}

/// Result of reading one archive: the accepted samples plus what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardRead {
    pub shard: Shard,
    pub skipped: Vec<SkippedSample>,
}

impl ShardRead {
    /// Number of distinct basenames in the archive.
    pub fn basename_count(&self) -> usize {
        self.shard.len() + self.skipped.len()
    }
}

/// Shard id implied by a file name: the trailing run of digits in the stem,
/// e.g. `00000123.tar` -> 123. Falls back to 0.
pub fn shard_id_from_path(path: &Path) -> u64 {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(0)
}

#[derive(Default)]
struct PartialSample {
    uid: String,
    image: Option<(Codec, Vec<u8>)>,
    caption: Option<Vec<u8>>,
    meta: Option<Vec<u8>>,
}

pub fn read_shard(path: &Path) -> Result<ShardRead, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })?;
    read_shard_from(BufReader::new(file), path, shard_id_from_path(path))
}

/// Reads an archive from any byte source. `origin` is used only in errors.
pub fn read_shard_from<R: Read>(
    reader: R,
    origin: &Path,
    shard_id: u64,
) -> Result<ShardRead, IngestError> {
    let malformed = |entry: &str, reason: String| IngestError::Malformed {
        path: origin.to_owned(),
        entry: entry.to_owned(),
        reason,
    };

    let mut archive = tar::Archive::new(reader);
    let entries = archive
        .entries()
        .map_err(|e| malformed("<archive>", e.to_string()))?;

    let mut order: Vec<PartialSample> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();

    for entry in entries {
        let mut entry = entry.map_err(|e| malformed("<archive>", e.to_string()))?;
        let name = entry
            .path()
            .map_err(|e| malformed("<archive>", e.to_string()))?
            .to_string_lossy()
            .into_owned();
        if !entry.header().entry_type().is_file() {
            continue;
        }
        let file_name = name.rsplit('/').next().unwrap_or(&name).to_owned();
        let Some((uid, ext)) = file_name.split_once('.') else {
            return Err(malformed(&name, "entry has no extension".into()));
        };
        if uid.is_empty() {
            return Err(malformed(&name, "entry has an empty basename".into()));
        }
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut data)
            .map_err(|e| malformed(&name, e.to_string()))?;

        let slot = *index.entry(uid.to_owned()).or_insert_with(|| {
            order.push(PartialSample {
                uid: uid.to_owned(),
                ..Default::default()
            });
            order.len() - 1
        });
        let partial = &mut order[slot];
        let duplicate = || malformed(&name, format!("second {ext} entry for uid {uid}"));
        let clash = if let Some(codec) = Codec::from_extension(ext) {
            partial.image.replace((codec, data)).is_some()
        } else if ext == "txt" {
            partial.caption.replace(data).is_some()
        } else if ext == "json" {
            partial.meta.replace(data).is_some()
        } else {
            false
        };
        if clash {
            return Err(duplicate());
        }
        // Other extensions (.cls, .npy, ...) are carried by some corpora and ignored.
    }

    let mut samples = Vec::with_capacity(order.len());
    let mut skipped = Vec::new();
    for partial in order {
        let uid = partial.uid.clone();
        match finish_sample(partial) {
            Ok(sample) => samples.push(sample),
            Err(reason) => skipped.push(SkippedSample { uid, reason }),
        }
    }
    Ok(ShardRead {
        shard: Shard { shard_id, samples },
        skipped,
    })
}

fn finish_sample(partial: PartialSample) -> Result<CaptionSample, SkipReason> {
    let (codec, bytes) = partial.image.ok_or(SkipReason::MissingImage)?;
    let caption = partial.caption.ok_or(SkipReason::MissingCaption)?;
    let caption = String::from_utf8(caption).map_err(|_| SkipReason::CaptionNotUtf8)?;

    let mut dims = None;
    let mut scores = Vec::new();
    if let Some(meta) = partial.meta {
        let meta = parse_metadata(&meta).map_err(SkipReason::BadMetadata)?;
        dims = meta.dims;
        scores = meta.scores;
    }
    let (width, height) = match dims {
        Some(d) => d,
        None => {
            let size = imagesize::blob_size(&bytes).map_err(|_| SkipReason::UnknownDimensions)?;
            (size.width as u32, size.height as u32)
        }
    };
    if width == 0 || height == 0 {
        return Err(SkipReason::UnknownDimensions);
    }

    let mut sample = CaptionSample::new(
        partial.uid,
        EncodedImage {
            codec,
            width,
            height,
            bytes,
        },
        caption,
    );
    for s in scores {
        sample.set_score(s);
    }
    Ok(sample)
}

struct Metadata {
    dims: Option<(u32, u32)>,
    scores: Vec<QualityScore>,
}

fn parse_metadata(raw: &[u8]) -> Result<Metadata, String> {
    let value: Value = serde_json::from_slice(raw).map_err(|e| e.to_string())?;
    let Value::Object(map) = value else {
        return Err("metadata is not an object".into());
    };
    let dim = |key: &str| -> Result<Option<u32>, String> {
        match map.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .map(Some)
                .ok_or_else(|| format!("{key} is not a pixel count")),
        }
    };
    let dims = match (dim("width")?, dim("height")?) {
        (Some(w), Some(h)) => Some((w, h)),
        _ => None,
    };
    let scores = scores_from_object(&map).map_err(|e| e.to_string())?;
    Ok(Metadata { dims, scores })
}

/// Collects every numeric `<metric>_score` field of a flat object.
pub(crate) fn scores_from_object(
    map: &Map<String, Value>,
) -> Result<Vec<QualityScore>, ScoreError> {
    let mut scores = Vec::new();
    for (key, value) in map {
        let Some(metric) = key.strip_suffix("_score") else {
            continue;
        };
        if metric.is_empty() {
            continue;
        }
        let Some(v) = value.as_f64() else {
            continue;
        };
        scores.push(QualityScore::new(Metric::from_name(metric), v)?);
    }
    Ok(scores)
}

pub fn write_shard(shard: &Shard, path: &Path) -> Result<(), IngestError> {
    let io = |source| IngestError::Io {
        path: path.to_owned(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut out = BufWriter::new(file);
    write_shard_to(shard, &mut out).map_err(|e| match e {
        IngestError::Io { source, .. } => io(source),
        other => other,
    })?;
    out.flush().map_err(io)?;
    Ok(())
}

/// Writes the archive to any sink. Headers carry fixed mtime/mode/owner so
/// equal shards produce identical bytes.
pub fn write_shard_to<W: Write>(shard: &Shard, sink: W) -> Result<(), IngestError> {
    shard.validate()?;
    let io = |source| IngestError::Io {
        path: PathBuf::from("<sink>"),
        source,
    };
    let mut builder = tar::Builder::new(sink);
    for sample in &shard.samples {
        let image_name = format!("{}.{}", sample.uid, sample.image.codec.extension());
        append(&mut builder, &image_name, &sample.image.bytes).map_err(io)?;
        append(
            &mut builder,
            &format!("{}.txt", sample.uid),
            sample.caption.as_bytes(),
        )
        .map_err(io)?;
        let meta = metadata_json(sample);
        append(
            &mut builder,
            &format!("{}.json", sample.uid),
            meta.as_bytes(),
        )
        .map_err(io)?;
    }
    builder.into_inner().map_err(io)?;
    Ok(())
}

fn metadata_json(sample: &CaptionSample) -> String {
    let mut map = Map::new();
    map.insert("uid".into(), Value::from(sample.uid.clone()));
    map.insert("width".into(), Value::from(sample.image.width));
    map.insert("height".into(), Value::from(sample.image.height));
    for s in &sample.scores {
        map.insert(format!("{}_score", s.metric.name()), Value::from(s.value));
    }
    Value::Object(map).to_string()
}

fn append<W: Write>(builder: &mut tar::Builder<W>, name: &str, data: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_uid(0);
    header.set_gid(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, name, data)
}

/// Ingestion-time resize rule: shrink so the smaller side hits the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePolicy {
    pub target_smaller_side: u32,
    pub upscale: bool,
}

impl Default for ResizePolicy {
    fn default() -> Self {
        ResizePolicy {
            target_smaller_side: 512,
            upscale: false,
        }
    }
}

impl ResizePolicy {
    pub fn new(target_smaller_side: u32, upscale: bool) -> Result<Self, IngestError> {
        if target_smaller_side == 0 {
            return Err(IngestError::Invalid(
                "resize target must be at least 1".into(),
            ));
        }
        Ok(ResizePolicy {
            target_smaller_side,
            upscale,
        })
    }
}

/// Output dimensions under `policy`. The longer side is rounded half away
/// from zero and never drops below 1. Inputs must be at least 1x1.
pub fn resize_dims(width: u32, height: u32, policy: ResizePolicy) -> (u32, u32) {
    debug_assert!(width >= 1 && height >= 1);
    let target = policy.target_smaller_side;
    let shorter = width.min(height);
    if shorter == target || (shorter < target && !policy.upscale) {
        return (width, height);
    }
    let longer = width.max(height);
    let scaled = (f64::from(longer) * f64::from(target) / f64::from(shorter)).round();
    let scaled = (scaled as u32).max(1);
    if width <= height {
        (target, scaled)
    } else {
        (scaled, target)
    }
}
