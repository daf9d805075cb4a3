//! Curation and multimodal sequence packing for image-text caption shards.
//!
//! The pipeline reads webdataset-style shards ([`ingest`]), selects samples by
//! quality score or uid list ([`curation`]), measures each sample's
//! multimodal length ([`lengths`]), packs samples into fixed-context
//! sequences with First-Fit-Decreasing ([`packer`]) and stores them in `.mmpk`
//! containers ([`packstore`]). [`projector`] holds the pooling-grid math that
//! fixes the per-image visual token cost.

pub mod curation;
pub mod ingest;
pub mod lengths;
pub mod packer;
pub mod packstore;
pub mod projector;

pub use curation::{
    attach_scores, filter_by_threshold, mixture_report, select_by_uid_set, union_dedup, Coverage,
    FilterStats, Metric, MixtureSpec, QualityScore, ScoreTable, UidSet,
};
pub use ingest::{
    read_shard, resize_dims, write_shard, CaptionSample, Codec, EncodedImage, ResizePolicy, Shard,
    ShardRead, SHARD_CAPACITY,
};
pub use lengths::{
    measure, measure_shard, ByteTokenizer, MeasuredSample, PackerConfig, TokenizerPort,
    TokenizerSpec,
};
pub use packer::{
    assemble, ffd_assign, ffd_pack, pack_shard, Bin, ImagePayload, PackReport, PackedSequence,
};
pub use packstore::{
    read_container, verify_container, write_container, ContainerHeader, ContainerParams,
    VerifyReport,
};
pub use projector::{
    adaptive_avg_pool, pool_windows, token_budget, PatchGrid, PoolSpec, TokenMode,
};
