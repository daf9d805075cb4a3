//! Seeded synthetic shards.

use mmpack::{CaptionSample, Codec, EncodedImage, Shard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Multimodal cost of one image plus its separator with the byte tokenizer
/// at 144 visual tokens.
pub const FIXED_COST: usize = 145;

/// A shard whose samples have expanded lengths drawn uniformly from
/// `min_len..=max_len` (byte tokenizer, 144 visual tokens).
pub fn uniform_shard(seed: u64, n: usize, min_len: usize, max_len: usize, shard_id: u64) -> Shard {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let len = rng.gen_range(min_len..=max_len);
            let caption: String = (0..len - FIXED_COST)
                .map(|_| char::from(b'a' + rng.gen_range(0..26u8)))
                .collect();
            let payload_len = rng.gen_range(16..64);
            let bytes: Vec<u8> = (0..payload_len).map(|_| rng.gen()).collect();
            let codec = if rng.gen_bool(0.5) {
                Codec::Jpeg
            } else {
                Codec::Png
            };
            CaptionSample::new(
                format!("{shard_id:04}{i:06}"),
                EncodedImage {
                    codec,
                    width: rng.gen_range(1..2000),
                    height: rng.gen_range(1..2000),
                    bytes,
                },
                caption,
            )
        })
        .collect();
    Shard::new(shard_id, samples).expect("synthetic shard is valid")
}

/// Expanded lengths of a shard as measured by the byte-tokenizer rule.
pub fn expected_lens(shard: &Shard) -> Vec<usize> {
    shard
        .samples
        .iter()
        .map(|s| s.caption.len() + FIXED_COST)
        .collect()
}
