//! First-Fit-Decreasing packing of measured samples into fixed-context
//! sequences, and assembly of the padded token streams.
//!
//! Capacity is counted in expanded token space: each image placeholder
//! occupies `visual_tokens_per_image` slots. A packed sequence therefore holds
//! `L - images * (visual_tokens_per_image - 1)` raw token ids, which expand to
//! exactly `L` at training time.

use serde::Serialize;
use thiserror::Error;

use crate::ingest::{Codec, Shard};
use crate::lengths::{measure_shard, LengthError, MeasuredSample, PackerConfig, TokenizerPort};

#[derive(Debug, Error)]
pub enum PackError {
    #[error("sample {uid} has multimodal length {len} > context length {capacity}")]
    Oversize {
        uid: String,
        len: usize,
        capacity: usize,
    },
    #[error(transparent)]
    Config(#[from] LengthError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub members: Vec<MeasuredSample>,
    pub used: usize,
}

impl Bin {
    pub fn image_count(&self) -> usize {
        self.members.iter().map(|m| m.image_count).sum()
    }
}

/// An image as stored inside a packed sequence: codec tag and encoded bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub codec: Codec,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    /// One entry per placeholder, in placeholder order.
    pub images: Vec<ImagePayload>,
    /// Member token streams back to back, then pad.
    pub input_ids: Vec<u32>,
    /// Multimodal length of each member, in member order.
    pub lengths: Vec<u32>,
}

impl PackedSequence {
    /// Sum of member lengths in expanded space.
    pub fn content_tokens(&self) -> usize {
        self.lengths.iter().map(|&l| l as usize).sum()
    }

    /// Checks the structural invariants of a sequence packed at
    /// `context_length` with `visual` tokens per image. When `pad_id` is
    /// `None` the tail only has to be uniform.
    pub fn check(
        &self,
        context_length: usize,
        visual: usize,
        placeholder_id: u32,
        pad_id: Option<u32>,
    ) -> Result<(), String> {
        let content = self.content_tokens();
        if content > context_length {
            return Err(format!(
                "lengths sum to {content} > context length {context_length}"
            ));
        }
        let expansion = self.images.len() * visual.saturating_sub(1);
        if self.input_ids.len() + expansion != context_length {
            return Err(format!(
                "{} token ids with {} images expand to {}, expected {context_length}",
                self.input_ids.len(),
                self.images.len(),
                self.input_ids.len() + expansion
            ));
        }
        let placeholders = self
            .input_ids
            .iter()
            .filter(|&&t| t == placeholder_id)
            .count();
        if placeholders != self.images.len() {
            return Err(format!(
                "{placeholders} placeholders but {} images",
                self.images.len()
            ));
        }
        let raw_content = content.checked_sub(expansion).ok_or_else(|| {
            format!("lengths sum {content} smaller than image expansion {expansion}")
        })?;
        let tail = &self.input_ids[raw_content..];
        let pad = pad_id.or_else(|| tail.first().copied());
        if let Some(pad) = pad {
            if let Some(pos) = tail.iter().position(|&t| t != pad) {
                return Err(format!("non-pad token at position {}", raw_content + pos));
            }
        }
        Ok(())
    }
}

/// FFD over plain lengths. Returns, per bin in creation order, the input
/// indices placed there in placement order.
///
/// Items are visited by length descending with ties in index order, and each
/// goes to the first bin (in creation order) with room, else a new bin.
pub fn ffd_assign(lens: &[usize], capacity: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]));

    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut used: Vec<usize> = Vec::new();
    for idx in order {
        let len = lens[idx];
        match used.iter().position(|&u| u + len <= capacity) {
            Some(b) => {
                bins[b].push(idx);
                used[b] += len;
            }
            None => {
                bins.push(vec![idx]);
                used.push(len);
            }
        }
    }
    bins
}

pub fn ffd_pack(items: Vec<MeasuredSample>, cfg: &PackerConfig) -> Result<Vec<Bin>, PackError> {
    let capacity = cfg.context_length;
    if let Some(big) = items.iter().find(|m| m.len > capacity) {
        return Err(PackError::Oversize {
            uid: big.uid().to_owned(),
            len: big.len,
            capacity,
        });
    }
    let lens: Vec<usize> = items.iter().map(|m| m.len).collect();
    let assignment = ffd_assign(&lens, capacity);

    let mut slots: Vec<Option<MeasuredSample>> = items.into_iter().map(Some).collect();
    let bins = assignment
        .into_iter()
        .map(|indices| {
            let members: Vec<MeasuredSample> = indices
                .into_iter()
                .map(|i| slots[i].take().expect("each item is assigned once"))
                .collect();
            let used = members.iter().map(|m| m.len).sum();
            Bin { members, used }
        })
        .collect();
    Ok(bins)
}

pub fn assemble(bins: Vec<Bin>, cfg: &PackerConfig) -> Vec<PackedSequence> {
    bins.into_iter()
        .map(|bin| {
            debug_assert!(bin.used <= cfg.context_length);
            let raw_len =
                cfg.context_length - bin.image_count() * (cfg.visual_tokens_per_image - 1);
            let mut input_ids = Vec::with_capacity(raw_len);
            let mut images = Vec::with_capacity(bin.members.len());
            let mut lengths = Vec::with_capacity(bin.members.len());
            for m in bin.members {
                input_ids.extend_from_slice(&m.text_tokens);
                lengths.push(m.len as u32);
                images.push(ImagePayload {
                    codec: m.sample.image.codec,
                    bytes: m.sample.image.bytes,
                });
            }
            input_ids.resize(raw_len, cfg.pad_id);
            PackedSequence {
                images,
                input_ids,
                lengths,
            }
        })
        .collect()
}

/// Efficiency summary of one or more packed shards.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PackReport {
    pub context_length: usize,
    pub sample_count: usize,
    pub truncated_samples: usize,
    pub bin_count: usize,
    pub total_content_tokens: usize,
    pub total_pad_tokens: usize,
    pub padding_ratio: f64,
    pub samples_per_bin_mean: f64,
    /// `ceil(total_content_tokens / context_length)`.
    pub lower_bound: usize,
    /// Padding ratio if every sample got its own sequence.
    pub naive_padding_ratio: f64,
}

impl PackReport {
    pub fn from_counts(
        context_length: usize,
        sample_count: usize,
        truncated_samples: usize,
        bin_count: usize,
        total_content_tokens: usize,
    ) -> Self {
        let slots = bin_count * context_length;
        let total_pad_tokens = slots.saturating_sub(total_content_tokens);
        let ratio = |pad: usize, all: usize| {
            if all == 0 {
                0.0
            } else {
                pad as f64 / all as f64
            }
        };
        let naive_slots = sample_count * context_length;
        PackReport {
            context_length,
            sample_count,
            truncated_samples,
            bin_count,
            total_content_tokens,
            total_pad_tokens,
            padding_ratio: ratio(total_pad_tokens, total_pad_tokens + total_content_tokens),
            samples_per_bin_mean: ratio(sample_count, bin_count),
            lower_bound: if context_length == 0 {
                0
            } else {
                total_content_tokens.div_ceil(context_length)
            },
            naive_padding_ratio: ratio(
                naive_slots.saturating_sub(total_content_tokens),
                naive_slots,
            ),
        }
    }

    pub fn from_bins(bins: &[Bin], cfg: &PackerConfig) -> Self {
        let samples = bins.iter().map(|b| b.members.len()).sum();
        let truncated = bins
            .iter()
            .flat_map(|b| &b.members)
            .filter(|m| m.truncated)
            .count();
        let content = bins.iter().map(|b| b.used).sum();
        Self::from_counts(cfg.context_length, samples, truncated, bins.len(), content)
    }

    /// Recomputes a report from finished sequences.
    pub fn from_sequences(seqs: &[PackedSequence], context_length: usize) -> Self {
        let samples = seqs.iter().map(|s| s.lengths.len()).sum();
        let content = seqs.iter().map(PackedSequence::content_tokens).sum();
        Self::from_counts(context_length, samples, 0, seqs.len(), content)
    }

    /// Combines per-shard reports; ratios and the bound are recomputed from totals.
    pub fn merge(&self, other: &PackReport) -> PackReport {
        let context_length = if self.bin_count == 0 && self.sample_count == 0 {
            other.context_length
        } else {
            self.context_length
        };
        Self::from_counts(
            context_length,
            self.sample_count + other.sample_count,
            self.truncated_samples + other.truncated_samples,
            self.bin_count + other.bin_count,
            self.total_content_tokens + other.total_content_tokens,
        )
    }
}

/// measure -> FFD -> assemble for one shard.
pub fn pack_shard(
    shard: Shard,
    tok: &dyn TokenizerPort,
    cfg: &PackerConfig,
) -> Result<(Vec<PackedSequence>, PackReport), PackError> {
    cfg.validate()?;
    let measured = measure_shard(shard, tok, cfg);
    let bins = ffd_pack(measured, cfg)?;
    let report = PackReport::from_bins(&bins, cfg);
    Ok((assemble(bins, cfg), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{CaptionSample, EncodedImage};
    use crate::lengths::{measure, ByteTokenizer};

    fn measured(uid: &str, caption_len: usize, cfg: &PackerConfig) -> MeasuredSample {
        let sample = CaptionSample::new(
            uid,
            EncodedImage {
                codec: Codec::Png,
                width: 8,
                height: 8,
                bytes: uid.as_bytes().to_vec(),
            },
            "c".repeat(caption_len),
        );
        measure(sample, &ByteTokenizer, cfg)
    }

    /// A sample whose multimodal length is exactly `len`.
    fn with_len(uid: &str, len: usize, cfg: &PackerConfig) -> MeasuredSample {
        let m = measured(uid, len - 1 - cfg.visual_tokens_per_image, cfg);
        assert_eq!(m.len, len);
        m
    }

    fn bin_lens(bins: &[Bin]) -> Vec<Vec<usize>> {
        bins.iter()
            .map(|b| b.members.iter().map(|m| m.len).collect())
            .collect()
    }

    #[test]
    fn worked_example_packs_into_three_bins() {
        let cfg = PackerConfig::default();
        let items = [3000, 2500, 2000, 1500, 1000]
            .iter()
            .enumerate()
            .map(|(i, &l)| with_len(&format!("s{i}"), l, &cfg))
            .collect();
        let bins = ffd_pack(items, &cfg).unwrap();
        assert_eq!(
            bin_lens(&bins),
            vec![vec![3000, 1000], vec![2500, 1500], vec![2000]]
        );
        assert_eq!(
            bins.iter().map(|b| b.used).collect::<Vec<_>>(),
            [4000, 4000, 2000]
        );
    }

    #[test]
    fn single_and_full_items() {
        let cfg = PackerConfig::default();
        let bins = ffd_pack(vec![with_len("a", 300, &cfg)], &cfg).unwrap();
        assert_eq!(bins.len(), 1);

        let items = (0..4)
            .map(|i| with_len(&format!("f{i}"), 4096, &cfg))
            .collect();
        let bins = ffd_pack(items, &cfg).unwrap();
        assert_eq!(bins.len(), 4);
        assert!(bins.iter().all(|b| b.members.len() == 1 && b.used == 4096));
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(
            ffd_assign(&[5, 7, 5, 7], 10),
            vec![vec![1], vec![3], vec![0, 2]]
        );
        assert_eq!(ffd_assign(&[], 10), Vec::<Vec<usize>>::new());
    }

    #[test]
    fn oversize_item_is_a_contract_violation() {
        let cfg = PackerConfig::default();
        let mut m = with_len("big", 4000, &cfg);
        m.len = 5000;
        match ffd_pack(vec![m], &cfg) {
            Err(PackError::Oversize { uid, len, .. }) => {
                assert_eq!((uid.as_str(), len), ("big", 5000))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_empty_caption_bin_pads_to_context() {
        let cfg = PackerConfig::default();
        let bins = ffd_pack(vec![measured("e", 0, &cfg)], &cfg).unwrap();
        let seqs = assemble(bins, &cfg);
        let seq = &seqs[0];
        assert_eq!(seq.lengths, [145]);
        // 2 raw content tokens then 4096 - 145 pads
        assert_eq!(seq.input_ids.len(), 2 + 3951);
        assert_eq!(
            seq.input_ids
                .iter()
                .filter(|&&t| t == ByteTokenizer::PAD)
                .count(),
            3951
        );
        seq.check(
            4096,
            144,
            ByteTokenizer::PLACEHOLDER,
            Some(ByteTokenizer::PAD),
        )
        .unwrap();
        assert!(assemble(Vec::new(), &cfg).is_empty());
    }

    #[test]
    fn placeholders_align_with_images() {
        let cfg = PackerConfig::default();
        let bin = Bin {
            used: 0,
            members: vec![measured("first", 10, &cfg), measured("second", 20, &cfg)],
        };
        let bin = Bin {
            used: bin.members.iter().map(|m| m.len).sum(),
            ..bin
        };
        let seq = assemble(vec![bin], &cfg).remove(0);
        let positions: Vec<_> = seq
            .input_ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == ByteTokenizer::PLACEHOLDER)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(positions, [0, 12]);
        assert_eq!(seq.images[0].bytes, b"first");
        assert_eq!(seq.images[1].bytes, b"second");
        assert_eq!(seq.lengths, [155, 165]);
        seq.check(
            4096,
            144,
            ByteTokenizer::PLACEHOLDER,
            Some(ByteTokenizer::PAD),
        )
        .unwrap();
    }

    #[test]
    fn check_rejects_broken_sequences() {
        let cfg = PackerConfig::default();
        let good = assemble(ffd_pack(vec![measured("a", 3, &cfg)], &cfg).unwrap(), &cfg).remove(0);
        let ok = |s: &PackedSequence| s.check(4096, 144, ByteTokenizer::PLACEHOLDER, None);
        assert!(ok(&good).is_ok());

        let mut short = good.clone();
        short.input_ids.pop();
        assert!(ok(&short).is_err());

        let mut extra_image = good.clone();
        extra_image.images.push(extra_image.images[0].clone());
        assert!(ok(&extra_image).is_err());

        let mut dirty_tail = good.clone();
        *dirty_tail.input_ids.last_mut().unwrap() = 7;
        assert!(ok(&dirty_tail).is_err());

        let mut overfull = good;
        overfull.lengths.push(4000);
        assert!(ok(&overfull).is_err());
    }

    #[test]
    fn empty_shard_reports_zeros() {
        let (seqs, report) =
            pack_shard(Shard::default(), &ByteTokenizer, &PackerConfig::default()).unwrap();
        assert!(seqs.is_empty());
        assert_eq!(report.bin_count, 0);
        assert_eq!(report.total_pad_tokens, 0);
        assert_eq!(report.padding_ratio, 0.0);
        assert_eq!(report.lower_bound, 0);
    }

    #[test]
    fn report_arithmetic() {
        let r = PackReport::from_counts(100, 5, 1, 3, 250);
        assert_eq!(r.total_pad_tokens, 50);
        assert!((r.padding_ratio - 50.0 / 300.0).abs() < 1e-12);
        assert_eq!(r.lower_bound, 3);
        assert!((r.naive_padding_ratio - 0.5).abs() < 1e-12);
        let merged = r.merge(&PackReport::from_counts(100, 1, 0, 1, 100));
        assert_eq!(
            (
                merged.bin_count,
                merged.total_pad_tokens,
                merged.lower_bound
            ),
            (4, 50, 4)
        );
        assert_eq!(PackReport::default().merge(&r), r);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ffd_conserves_items_and_respects_capacity(lens in prop::collection::vec(1usize..=64, 0..40), extra in 0usize..32) {
                let capacity = 64 + extra;
                let bins = ffd_assign(&lens, capacity);
                let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
                for b in &bins {
                    prop_assert!(!b.is_empty());
                    prop_assert!(b.iter().map(|&i| lens[i]).sum::<usize>() <= capacity);
                }
                let total: usize = lens.iter().sum();
                prop_assert!(bins.len() >= total.div_ceil(capacity));
            }

            #[test]
            fn packed_shard_sequences_hold_invariants(captions in prop::collection::vec(0usize..1500, 0..30)) {
                let cfg = PackerConfig::default();
                let samples = captions.iter().enumerate().map(|(i, &n)| CaptionSample::new(
                    format!("u{i}"),
                    EncodedImage { codec: Codec::Jpeg, width: 1, height: 1, bytes: vec![i as u8] },
                    "w".repeat(n),
                )).collect();
                let shard = Shard::new(0, samples).unwrap();
                let (seqs, report) = pack_shard(shard, &ByteTokenizer, &cfg).unwrap();
                prop_assert_eq!(report.sample_count, captions.len());
                prop_assert!(report.bin_count >= report.lower_bound);
                for s in &seqs {
                    prop_assert!(s.check(4096, 144, ByteTokenizer::PLACEHOLDER, Some(ByteTokenizer::PAD)).is_ok());
                }
                prop_assert_eq!(PackReport::from_sequences(&seqs, 4096).total_pad_tokens, report.total_pad_tokens);
            }
        }
    }
}
