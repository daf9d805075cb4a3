//! `.mmpk`: a flat binary container of packed sequences.
//!
//! ```text
//! header (16 bytes)
//!   magic            4  "MMPK"
//!   version          u16  = 1
//!   record_count     u32
//!   context_length   u32
//!   visual_tokens    u16  tokens per image
//! record (repeated record_count times)
//!   n_samples        u32
//!   n_images         u32
//!   lengths          n_samples x u32
//!   token_count      u32
//!   token ids        token_count x u32
//!   images           n_images x (codec u8, byte_len u32, bytes)
//!   crc32            u32  CRC-32 (IEEE) of every preceding byte of the record
//! ```
//!
//! All integers are little-endian. See `FORMAT.md` at the repository root for
//! a worked hex example.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::ingest::Codec;
use crate::packer::{ImagePayload, PackedSequence};

pub const MAGIC: &[u8; 4] = b"MMPK";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 16;
pub const EXTENSION: &str = "mmpk";

#[derive(Debug, Error)]
pub enum PackstoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not an mmpk container: {0}")]
    Format(String),
    #[error("record {index} is corrupt: {reason}")]
    Corrupt { index: u32, reason: String },
    #[error("record {index} violates sequence invariants: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("write failed: {0}")]
    Sink(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ContainerHeader {
    pub version: u16,
    pub record_count: u32,
    pub context_length: u32,
    pub visual_tokens_per_image: u16,
}

impl ContainerHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..10].copy_from_slice(&self.record_count.to_le_bytes());
        out[10..14].copy_from_slice(&self.context_length.to_le_bytes());
        out[14..16].copy_from_slice(&self.visual_tokens_per_image.to_le_bytes());
        out
    }

    pub fn decode(raw: &[u8; HEADER_LEN]) -> Result<Self, PackstoreError> {
        if &raw[..4] != MAGIC {
            return Err(PackstoreError::Format(format!(
                "bad magic {:02x?}",
                &raw[..4]
            )));
        }
        let header = ContainerHeader {
            version: u16::from_le_bytes([raw[4], raw[5]]),
            record_count: u32::from_le_bytes(raw[6..10].try_into().unwrap()),
            context_length: u32::from_le_bytes(raw[10..14].try_into().unwrap()),
            visual_tokens_per_image: u16::from_le_bytes([raw[14], raw[15]]),
        };
        if header.version != VERSION {
            return Err(PackstoreError::Format(format!(
                "unsupported version {}",
                header.version
            )));
        }
        if header.context_length == 0 {
            return Err(PackstoreError::Format("context length is 0".into()));
        }
        Ok(header)
    }
}

/// Header fields chosen by the writer; the record count comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContainerParams {
    pub context_length: u32,
    pub visual_tokens_per_image: u16,
}

impl ContainerParams {
    pub fn new(
        context_length: usize,
        visual_tokens_per_image: usize,
    ) -> Result<Self, PackstoreError> {
        let context_length = u32::try_from(context_length)
            .ok()
            .filter(|&l| l > 0)
            .ok_or_else(|| {
                PackstoreError::Format(format!(
                    "context length {context_length} not in 1..=u32::MAX"
                ))
            })?;
        let visual_tokens_per_image = u16::try_from(visual_tokens_per_image).map_err(|_| {
            PackstoreError::Format(format!(
                "{visual_tokens_per_image} visual tokens exceed u16"
            ))
        })?;
        Ok(ContainerParams {
            context_length,
            visual_tokens_per_image,
        })
    }
}

fn check_record(seq: &PackedSequence, params: &ContainerParams) -> Result<(), String> {
    let context = params.context_length as usize;
    let content = seq.content_tokens();
    if content > context {
        return Err(format!(
            "lengths sum to {content} > context length {context}"
        ));
    }
    let expansion = seq.images.len() * (params.visual_tokens_per_image as usize).saturating_sub(1);
    if seq.input_ids.len() + expansion != context {
        return Err(format!(
            "{} token ids with {} images do not expand to context length {context}",
            seq.input_ids.len(),
            seq.images.len()
        ));
    }
    if seq
        .images
        .iter()
        .any(|i| u32::try_from(i.bytes.len()).is_err())
    {
        return Err("image payload exceeds 4 GiB".into());
    }
    Ok(())
}

/// Serialized bytes of one record, CRC included.
pub fn encode_record(seq: &PackedSequence) -> Vec<u8> {
    let image_bytes: usize = seq.images.iter().map(|i| 5 + i.bytes.len()).sum();
    let mut out =
        Vec::with_capacity(16 + 4 * (seq.lengths.len() + seq.input_ids.len()) + image_bytes);
    out.extend_from_slice(&(seq.lengths.len() as u32).to_le_bytes());
    out.extend_from_slice(&(seq.images.len() as u32).to_le_bytes());
    for l in &seq.lengths {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&(seq.input_ids.len() as u32).to_le_bytes());
    for t in &seq.input_ids {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for image in &seq.images {
        out.push(image.codec.tag());
        out.extend_from_slice(&(image.bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&image.bytes);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Writes a whole container to `sink`. Nothing is written if any record
/// fails validation.
pub fn write_container_to<W: Write>(
    seqs: &[PackedSequence],
    params: ContainerParams,
    mut sink: W,
) -> Result<(), PackstoreError> {
    let record_count = u32::try_from(seqs.len())
        .map_err(|_| PackstoreError::Format(format!("{} records exceed u32", seqs.len())))?;
    for (index, seq) in seqs.iter().enumerate() {
        check_record(seq, &params).map_err(|reason| PackstoreError::Invalid { index, reason })?;
    }
    let header = ContainerHeader {
        version: VERSION,
        record_count,
        context_length: params.context_length,
        visual_tokens_per_image: params.visual_tokens_per_image,
    };
    sink.write_all(&header.encode())?;
    for seq in seqs {
        sink.write_all(&encode_record(seq))?;
    }
    sink.flush()?;
    Ok(())
}

pub fn write_container(
    seqs: &[PackedSequence],
    params: ContainerParams,
    path: &Path,
) -> Result<(), PackstoreError> {
    // validate before creating the file so a refused write leaves nothing behind
    for (index, seq) in seqs.iter().enumerate() {
        check_record(seq, &params).map_err(|reason| PackstoreError::Invalid { index, reason })?;
    }
    let io = |source| PackstoreError::Io {
        path: path.to_owned(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    write_container_to(seqs, params, BufWriter::new(file)).map_err(|e| match e {
        PackstoreError::Sink(source) => io(source),
        other => other,
    })
}

/// Sequential record reader. Memory is bounded by the current record.
///
/// A CRC mismatch is reported for that record and iteration may continue with
/// the next one; a structural failure (truncation, implausible counts) ends
/// iteration.
pub struct ContainerReader<R> {
    reader: R,
    header: ContainerHeader,
    next_index: u32,
    done: bool,
}

impl<R: Read> ContainerReader<R> {
    pub fn new(mut reader: R) -> Result<Self, PackstoreError> {
        let mut raw = [0u8; HEADER_LEN];
        read_full(&mut reader, &mut raw)
            .map_err(|e| PackstoreError::Format(format!("short header: {e}")))?;
        let header = ContainerHeader::decode(&raw)?;
        Ok(ContainerReader {
            reader,
            header,
            next_index: 0,
            done: false,
        })
    }

    pub fn header(&self) -> &ContainerHeader {
        &self.header
    }

    /// `Err((error, framing_intact))`.
    fn read_record(&mut self, index: u32) -> Result<PackedSequence, (PackstoreError, bool)> {
        let corrupt = |reason: String| (PackstoreError::Corrupt { index, reason }, false);
        let limit = self.header.context_length;
        let mut rec = RecordReader {
            inner: &mut self.reader,
            hasher: crc32fast::Hasher::new(),
        };
        let n_samples = rec.u32().map_err(|e| corrupt(e.to_string()))?;
        let n_images = rec.u32().map_err(|e| corrupt(e.to_string()))?;
        if n_samples > limit || n_images > limit {
            return Err(corrupt(format!(
                "{n_samples} samples / {n_images} images cannot fit context length {limit}"
            )));
        }
        let lengths = rec.u32s(n_samples).map_err(|e| corrupt(e.to_string()))?;
        let token_count = rec.u32().map_err(|e| corrupt(e.to_string()))?;
        if token_count > limit {
            return Err(corrupt(format!(
                "{token_count} tokens exceed context length {limit}"
            )));
        }
        let input_ids = rec.u32s(token_count).map_err(|e| corrupt(e.to_string()))?;
        let mut images = Vec::with_capacity(n_images as usize);
        let mut bad_codec = None;
        for i in 0..n_images {
            let tag = rec.u8().map_err(|e| corrupt(e.to_string()))?;
            let len = rec.u32().map_err(|e| corrupt(e.to_string()))?;
            let bytes = rec.bytes(len).map_err(|e| corrupt(e.to_string()))?;
            match Codec::from_tag(tag) {
                Some(codec) => images.push(ImagePayload { codec, bytes }),
                None => {
                    bad_codec.get_or_insert((i, tag));
                }
            }
        }
        let computed = rec.hasher.clone().finalize();
        let mut stored = [0u8; 4];
        read_full(rec.inner, &mut stored).map_err(|e| corrupt(e.to_string()))?;
        let stored = u32::from_le_bytes(stored);
        if stored != computed {
            let reason = format!("crc mismatch: stored {stored:08x}, computed {computed:08x}");
            return Err((PackstoreError::Corrupt { index, reason }, true));
        }
        if let Some((i, tag)) = bad_codec {
            let reason = format!("image {i} has unknown codec tag {tag}");
            return Err((PackstoreError::Corrupt { index, reason }, true));
        }
        Ok(PackedSequence {
            images,
            input_ids,
            lengths,
        })
    }
}

impl<R: Read> Iterator for ContainerReader<R> {
    type Item = Result<PackedSequence, PackstoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.next_index == self.header.record_count {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.reader.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(PackstoreError::Format(format!(
                    "trailing bytes after {} records",
                    self.header.record_count
                )))),
                Err(e) => Some(Err(PackstoreError::Format(e.to_string()))),
            };
        }
        let index = self.next_index;
        self.next_index += 1;
        Some(self.read_record(index).map_err(|(err, framing_intact)| {
            self.done = !framing_intact;
            err
        }))
    }
}

struct RecordReader<'a, R> {
    inner: &'a mut R,
    hasher: crc32fast::Hasher,
}

impl<R: Read> RecordReader<'_, R> {
    fn exact<const N: usize>(&mut self) -> io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        read_full(self.inner, &mut buf)?;
        self.hasher.update(&buf);
        Ok(buf)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.exact::<1>()?[0])
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.exact::<4>()?))
    }

    fn bytes(&mut self, len: u32) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        (&mut *self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len as usize {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                format!("truncated: wanted {len} bytes, got {}", buf.len()),
            ));
        }
        self.hasher.update(&buf);
        Ok(buf)
    }

    fn u32s(&mut self, n: u32) -> io::Result<Vec<u32>> {
        let raw = self.bytes(
            n.checked_mul(4)
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "count overflows"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_full<R: Read + ?Sized>(reader: &mut R, buf: &mut [u8]) -> io::Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            io::Error::new(io::ErrorKind::UnexpectedEof, "truncated")
        } else {
            e
        }
    })
}

pub fn read_container(path: &Path) -> Result<ContainerReader<BufReader<File>>, PackstoreError> {
    let file = File::open(path).map_err(|source| PackstoreError::Io {
        path: path.to_owned(),
        source,
    })?;
    ContainerReader::new(BufReader::new(file))
}

/// Reads every record, failing on the first error.
pub fn read_all(path: &Path) -> Result<(ContainerHeader, Vec<PackedSequence>), PackstoreError> {
    let reader = read_container(path)?;
    let header = *reader.header();
    let seqs = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, seqs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptRecord {
    pub index: u32,
    pub reason: String,
}

/// Result of a full scan. Problems are recorded, never raised.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct VerifyReport {
    pub path: PathBuf,
    pub header: Option<ContainerHeader>,
    pub records_ok: u32,
    pub corrupt: Vec<CorruptRecord>,
    /// Records after a structural failure that could not be reached.
    pub unreadable: u32,
    /// Header or trailing-data problem.
    pub format_error: Option<String>,
    pub token_total: u64,
    pub image_total: u64,
    pub content_tokens: u64,
    pub sample_total: u64,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.format_error.is_none() && self.corrupt.is_empty() && self.unreadable == 0
    }

    /// First problem, for one-line error messages.
    pub fn first_failure(&self) -> Option<String> {
        if let Some(e) = &self.format_error {
            return Some(format!("{}: {e}", self.path.display()));
        }
        self.corrupt
            .first()
            .map(|c| format!("{}: record {}: {}", self.path.display(), c.index, c.reason))
    }
}

pub fn verify_container(path: &Path) -> VerifyReport {
    let mut report = VerifyReport {
        path: path.to_owned(),
        ..Default::default()
    };
    let mut reader = match read_container(path) {
        Ok(r) => r,
        Err(e) => {
            report.format_error = Some(e.to_string());
            return report;
        }
    };
    let header = *reader.header();
    report.header = Some(header);
    for item in reader.by_ref() {
        match item {
            Ok(seq) => {
                report.records_ok += 1;
                report.token_total += seq.input_ids.len() as u64;
                report.image_total += seq.images.len() as u64;
                report.sample_total += seq.lengths.len() as u64;
                report.content_tokens += seq.content_tokens() as u64;
            }
            Err(PackstoreError::Corrupt { index, reason }) => {
                report.corrupt.push(CorruptRecord { index, reason })
            }
            Err(e) => report.format_error = Some(e.to_string()),
        }
    }
    let reached = report.records_ok + report.corrupt.len() as u32;
    report.unreadable = header.record_count.saturating_sub(reached);
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tag: u32, images: usize, context: usize, visual: usize) -> PackedSequence {
        let mut input_ids = Vec::new();
        let mut lengths = Vec::new();
        let mut imgs = Vec::new();
        for i in 0..images {
            input_ids.extend([256, tag, i as u32, 257]);
            lengths.push((3 + visual) as u32);
            imgs.push(ImagePayload {
                codec: if i % 2 == 0 { Codec::Jpeg } else { Codec::Png },
                bytes: vec![tag as u8; 3 + i],
            });
        }
        input_ids.resize(context - images * (visual - 1), 258);
        PackedSequence {
            images: imgs,
            input_ids,
            lengths,
        }
    }

    fn params() -> ContainerParams {
        ContainerParams::new(64, 8).unwrap()
    }

    fn to_bytes(seqs: &[PackedSequence]) -> Vec<u8> {
        let mut out = Vec::new();
        write_container_to(seqs, params(), &mut out).unwrap();
        out
    }

    fn read_bytes(raw: &[u8]) -> Result<Vec<PackedSequence>, PackstoreError> {
        ContainerReader::new(raw)?.collect()
    }

    #[test]
    fn header_only_container() {
        let raw = to_bytes(&[]);
        assert_eq!(raw.len(), HEADER_LEN);
        assert_eq!(&raw[..4], b"MMPK");
        let reader = ContainerReader::new(&raw[..]).unwrap();
        assert_eq!(reader.header().record_count, 0);
        assert_eq!(reader.count(), 0);
    }

    #[test]
    fn minimal_record_layout() {
        let s = PackedSequence {
            images: vec![ImagePayload {
                codec: Codec::Png,
                bytes: vec![0xab],
            }],
            input_ids: vec![256, 257],
            lengths: vec![3],
        };
        let p = ContainerParams::new(3, 2).unwrap();
        let mut raw = Vec::new();
        write_container_to(std::slice::from_ref(&s), p, &mut raw).unwrap();
        let record = &raw[HEADER_LEN..];
        let expected_body: Vec<u8> = [
            &1u32.to_le_bytes()[..],
            &1u32.to_le_bytes(),
            &3u32.to_le_bytes(),
            &2u32.to_le_bytes(),
            &256u32.to_le_bytes(),
            &257u32.to_le_bytes(),
            &[2u8],
            &1u32.to_le_bytes(),
            &[0xab],
        ]
        .concat();
        assert_eq!(&record[..record.len() - 4], &expected_body[..]);
        assert_eq!(
            &record[record.len() - 4..],
            &crc32fast::hash(&expected_body).to_le_bytes()
        );
        assert_eq!(read_bytes(&raw).unwrap(), vec![s]);
    }

    #[test]
    fn round_trip_and_determinism() {
        let seqs: Vec<_> = (0..5).map(|i| seq(i, (i % 4) as usize, 64, 8)).collect();
        let a = to_bytes(&seqs);
        assert_eq!(a, to_bytes(&seqs));
        assert_eq!(read_bytes(&a).unwrap(), seqs);
    }

    #[test]
    fn refuses_invalid_records() {
        let mut bad = seq(1, 1, 64, 8);
        bad.lengths = vec![70];
        let err = write_container_to(&[seq(0, 1, 64, 8), bad], params(), Vec::new()).unwrap_err();
        assert!(matches!(err, PackstoreError::Invalid { index: 1, .. }));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mmpk");
        let mut short = seq(1, 1, 64, 8);
        short.input_ids.pop();
        let err = write_container(&[short], params(), &path).unwrap_err();
        assert!(matches!(err, PackstoreError::Invalid { index: 0, .. }));
        assert!(!path.exists());
    }

    #[test]
    fn bad_magic_version_and_short_header() {
        let mut raw = to_bytes(&[]);
        raw[0] = b'X';
        assert!(matches!(
            ContainerReader::new(&raw[..]),
            Err(PackstoreError::Format(_))
        ));
        let mut raw = to_bytes(&[]);
        raw[4] = 2;
        assert!(matches!(
            ContainerReader::new(&raw[..]),
            Err(PackstoreError::Format(_))
        ));
        assert!(matches!(
            ContainerReader::new(&raw[..10]),
            Err(PackstoreError::Format(_))
        ));
    }

    #[test]
    fn payload_flip_is_reported_at_its_record() {
        let seqs: Vec<_> = (0..5).map(|i| seq(i, 2, 64, 8)).collect();
        let mut raw = to_bytes(&seqs);
        let record_len = encode_record(&seqs[0]).len();
        // last image byte of record 2
        let at = HEADER_LEN + 3 * record_len - 5;
        raw[at] ^= 0x10;
        let results: Vec<_> = ContainerReader::new(&raw[..]).unwrap().collect();
        assert_eq!(results.len(), 5);
        assert!(matches!(
            results[2],
            Err(PackstoreError::Corrupt { index: 2, .. })
        ));
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 4);
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let seqs = vec![seq(0, 1, 64, 8), seq(1, 1, 64, 8)];
        let raw = to_bytes(&seqs);
        let err = read_bytes(&raw[..raw.len() - 3]).unwrap_err();
        assert!(matches!(err, PackstoreError::Corrupt { index: 1, .. }));
        let mut long = raw.clone();
        long.push(0);
        assert!(matches!(read_bytes(&long), Err(PackstoreError::Format(_))));
    }

    #[test]
    fn verify_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mmpk");
        let seqs: Vec<_> = (0..5).map(|i| seq(i, 1, 64, 8)).collect();
        write_container(&seqs, params(), &path).unwrap();
        let clean = verify_container(&path);
        assert!(clean.is_clean());
        assert_eq!(clean.records_ok, 5);
        assert_eq!(clean.image_total, 5);
        assert_eq!(clean.token_total, 5 * (64 - 7));

        let mut raw = std::fs::read(&path).unwrap();
        let record_len = encode_record(&seqs[0]).len();
        raw[HEADER_LEN + record_len + 20] ^= 1;
        std::fs::write(&path, &raw).unwrap();
        let dirty = verify_container(&path);
        assert_eq!((dirty.records_ok, dirty.corrupt.len()), (4, 1));
        assert_eq!(dirty.corrupt[0].index, 1);
        assert!(dirty.first_failure().unwrap().contains("record 1"));

        let empty = dir.path().join("e.mmpk");
        write_container(&[], params(), &empty).unwrap();
        let r = verify_container(&empty);
        assert!(r.is_clean());
        assert_eq!((r.records_ok, r.token_total, r.image_total), (0, 0, 0));

        let missing = verify_container(&dir.path().join("nope.mmpk"));
        assert!(!missing.is_clean());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_seq() -> impl Strategy<Value = PackedSequence> {
            (
                0usize..4,
                prop::collection::vec(any::<u32>(), 0..8),
                prop::collection::vec(prop::collection::vec(any::<u8>(), 0..40), 4),
            )
                .prop_map(|(n_images, text, payloads)| {
                    let visual = 8usize;
                    let mut input_ids = Vec::new();
                    let mut lengths = Vec::new();
                    for _ in 0..n_images {
                        input_ids.push(256);
                        input_ids.extend(text.iter().map(|t| t % 256));
                        input_ids.push(257);
                        lengths.push((text.len() + 1 + visual) as u32);
                    }
                    input_ids.resize(64 - n_images * (visual - 1), 258);
                    let images = payloads
                        .into_iter()
                        .take(n_images)
                        .map(|bytes| ImagePayload {
                            codec: Codec::Webp,
                            bytes,
                        })
                        .collect();
                    PackedSequence {
                        images,
                        input_ids,
                        lengths,
                    }
                })
                .prop_filter("fits", |s| s.content_tokens() <= 64)
        }

        proptest! {
            #[test]
            fn round_trip(seqs in prop::collection::vec(arb_seq(), 0..6)) {
                let raw = to_bytes(&seqs);
                prop_assert_eq!(read_bytes(&raw).unwrap(), seqs);
            }
        }
    }
}
