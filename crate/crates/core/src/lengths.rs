//! Multimodal length accounting.
//!
//! A sample's token stream is `[<image>] ++ encode(caption) ++ [<|im_end|>]`.
//! The single placeholder expands to `visual_tokens_per_image` embeddings at
//! training time, so the multimodal length is
//! `caption_tokens + 1 (separator) + visual_tokens_per_image`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ingest::{CaptionSample, Shard};

pub const DEFAULT_CONTEXT_LENGTH: usize = 4096;
pub const PRETRAIN_TOKENS_PER_IMAGE: usize = 144;
pub const SFT_TOKENS_PER_IMAGE: usize = 729;

pub const IMAGE_TOKEN: &str = "<image>";
pub const SEPARATOR_TOKEN: &str = "<|im_end|>";
pub const PAD_TOKEN: &str = "<|pad|>";

#[derive(Debug, Error)]
pub enum LengthError {
    #[error("context length {context} cannot hold one image ({visual} visual tokens) plus placeholder and separator")]
    ContextTooSmall { context: usize, visual: usize },
    #[error("visual tokens per image must be at least 1")]
    NoVisualTokens,
    #[error("special token ids must be distinct and below vocab size {vocab}: image={image} sep={sep} pad={pad}")]
    BadSpecialIds {
        image: u32,
        sep: u32,
        pad: u32,
        vocab: u32,
    },
    #[error("vocabulary {path}: {reason}")]
    Vocab { path: PathBuf, reason: String },
}

/// What the packer needs from a tokenizer.
pub trait TokenizerPort {
    /// Must be deterministic and must never emit one of the special ids.
    fn encode(&self, text: &str) -> Vec<u32>;
    fn placeholder_id(&self) -> u32;
    fn separator_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn vocab_size(&self) -> u32;
}

impl<T: TokenizerPort + ?Sized> TokenizerPort for &T {
    fn encode(&self, text: &str) -> Vec<u32> {
        (**self).encode(text)
    }
    fn placeholder_id(&self) -> u32 {
        (**self).placeholder_id()
    }
    fn separator_id(&self) -> u32 {
        (**self).separator_id()
    }
    fn pad_id(&self) -> u32 {
        (**self).pad_id()
    }
    fn vocab_size(&self) -> u32 {
        (**self).vocab_size()
    }
}

impl<T: TokenizerPort + ?Sized> TokenizerPort for Box<T> {
    fn encode(&self, text: &str) -> Vec<u32> {
        (**self).encode(text)
    }
    fn placeholder_id(&self) -> u32 {
        (**self).placeholder_id()
    }
    fn separator_id(&self) -> u32 {
        (**self).separator_id()
    }
    fn pad_id(&self) -> u32 {
        (**self).pad_id()
    }
    fn vocab_size(&self) -> u32 {
        (**self).vocab_size()
    }
}

pub fn check_special_ids(tok: &dyn TokenizerPort) -> Result<(), LengthError> {
    let (image, sep, pad, vocab) = (
        tok.placeholder_id(),
        tok.separator_id(),
        tok.pad_id(),
        tok.vocab_size(),
    );
    let distinct = image != sep && image != pad && sep != pad;
    if !distinct || image >= vocab || sep >= vocab || pad >= vocab {
        return Err(LengthError::BadSpecialIds {
            image,
            sep,
            pad,
            vocab,
        });
    }
    Ok(())
}

/// One token per UTF-8 byte; the specials sit just above the byte range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const PLACEHOLDER: u32 = 256;
    pub const SEPARATOR: u32 = 257;
    pub const PAD: u32 = 258;
}

impl TokenizerPort for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
    fn placeholder_id(&self) -> u32 {
        Self::PLACEHOLDER
    }
    fn separator_id(&self) -> u32 {
        Self::SEPARATOR
    }
    fn pad_id(&self) -> u32 {
        Self::PAD
    }
    fn vocab_size(&self) -> u32 {
        259
    }
}

/// Greedy longest-match tokenizer over a plain vocabulary file (one token per
/// line, id = line number from 0). Text that matches nothing maps to the unk
/// token. Special tokens are resolved by string and never matched in text.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    pieces: HashMap<String, u32>,
    longest: usize,
    vocab_size: u32,
    placeholder: u32,
    separator: u32,
    pad: u32,
    unk: u32,
}

impl VocabTokenizer {
    pub fn load(path: &Path, specials: &SpecialTokens) -> Result<Self, LengthError> {
        let text = std::fs::read_to_string(path).map_err(|e| LengthError::Vocab {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::from_lines(text.lines(), specials).map_err(|reason| LengthError::Vocab {
            path: path.to_owned(),
            reason,
        })
    }

    pub fn from_lines<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        specials: &SpecialTokens,
    ) -> Result<Self, String> {
        let mut pieces = HashMap::new();
        let mut count = 0u32;
        for line in lines {
            // first occurrence of a piece keeps its id
            pieces.entry(line.to_owned()).or_insert(count);
            count += 1;
        }
        let resolve = |s: &str| {
            pieces
                .get(s)
                .copied()
                .ok_or_else(|| format!("special token {s:?} not in vocabulary"))
        };
        let placeholder = resolve(&specials.image)?;
        let separator = resolve(&specials.separator)?;
        let pad = resolve(&specials.pad)?;
        let unk = resolve(&specials.unk)?;
        for s in [
            &specials.image,
            &specials.separator,
            &specials.pad,
            &specials.unk,
        ] {
            pieces.remove(s.as_str());
        }
        pieces.remove("");
        let longest = pieces.keys().map(String::len).max().unwrap_or(0);
        let tok = VocabTokenizer {
            pieces,
            longest,
            vocab_size: count,
            placeholder,
            separator,
            pad,
            unk,
        };
        check_special_ids(&tok).map_err(|e| e.to_string())?;
        Ok(tok)
    }
}

impl TokenizerPort for VocabTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let mut end = self.longest.min(rest.len());
            let hit = loop {
                if end == 0 {
                    break None;
                }
                if rest.is_char_boundary(end) {
                    if let Some(&id) = self.pieces.get(&rest[..end]) {
                        break Some((id, end));
                    }
                }
                end -= 1;
            };
            match hit {
                Some((id, n)) => {
                    ids.push(id);
                    rest = &rest[n..];
                }
                None => {
                    let n = rest.chars().next().map_or(1, char::len_utf8);
                    if ids.last() != Some(&self.unk) {
                        ids.push(self.unk);
                    }
                    rest = &rest[n..];
                }
            }
        }
        ids
    }
    fn placeholder_id(&self) -> u32 {
        self.placeholder
    }
    fn separator_id(&self) -> u32 {
        self.separator
    }
    fn pad_id(&self) -> u32 {
        self.pad
    }
    fn vocab_size(&self) -> u32 {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokens {
    pub image: String,
    pub separator: String,
    pub pad: String,
    pub unk: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            image: IMAGE_TOKEN.into(),
            separator: SEPARATOR_TOKEN.into(),
            pad: PAD_TOKEN.into(),
            unk: "<unk>".into(),
        }
    }
}

/// Names a tokenizer: the built-in byte tokenizer or a vocabulary file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TokenizerSpec {
    #[default]
    Byte,
    Vocab {
        path: PathBuf,
        specials: SpecialTokens,
    },
}

impl TokenizerSpec {
    pub fn load(&self) -> Result<Box<dyn TokenizerPort + Send + Sync>, LengthError> {
        match self {
            TokenizerSpec::Byte => Ok(Box::new(ByteTokenizer)),
            TokenizerSpec::Vocab { path, specials } => {
                Ok(Box::new(VocabTokenizer::load(path, specials)?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackerConfig {
    pub context_length: usize,
    pub visual_tokens_per_image: usize,
    pub pad_id: u32,
}

impl Default for PackerConfig {
    fn default() -> Self {
        PackerConfig {
            context_length: DEFAULT_CONTEXT_LENGTH,
            visual_tokens_per_image: PRETRAIN_TOKENS_PER_IMAGE,
            pad_id: ByteTokenizer::PAD,
        }
    }
}

impl PackerConfig {
    pub fn new(
        context_length: usize,
        visual_tokens_per_image: usize,
        pad_id: u32,
    ) -> Result<Self, LengthError> {
        let cfg = PackerConfig {
            context_length,
            visual_tokens_per_image,
            pad_id,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default lengths with the tokenizer's pad id.
    pub fn for_tokenizer(tok: &dyn TokenizerPort) -> Self {
        PackerConfig {
            pad_id: tok.pad_id(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), LengthError> {
        if self.visual_tokens_per_image == 0 {
            return Err(LengthError::NoVisualTokens);
        }
        if self.context_length < self.visual_tokens_per_image + 2 {
            return Err(LengthError::ContextTooSmall {
                context: self.context_length,
                visual: self.visual_tokens_per_image,
            });
        }
        Ok(())
    }

    /// Caption tokens that fit alongside one image and the separator.
    pub fn max_caption_tokens(&self) -> usize {
        self.context_length - self.visual_tokens_per_image - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredSample {
    pub sample: CaptionSample,
    /// Placeholder, caption tokens, separator.
    pub text_tokens: Vec<u32>,
    pub visual_token_count: usize,
    pub image_count: usize,
    /// Multimodal length with each placeholder counted at its expanded size.
    pub len: usize,
    /// Caption tokens were cut from the right to fit the context.
    pub truncated: bool,
}

impl MeasuredSample {
    pub fn uid(&self) -> &str {
        &self.sample.uid
    }
}

pub fn measure(
    sample: CaptionSample,
    tok: &dyn TokenizerPort,
    cfg: &PackerConfig,
) -> MeasuredSample {
    let mut caption = tok.encode(&sample.caption);
    let max = cfg.max_caption_tokens();
    let truncated = caption.len() > max;
    caption.truncate(max);

    let mut text_tokens = Vec::with_capacity(caption.len() + 2);
    text_tokens.push(tok.placeholder_id());
    text_tokens.extend_from_slice(&caption);
    text_tokens.push(tok.separator_id());

    let image_count = 1;
    let len = text_tokens.len() - image_count + image_count * cfg.visual_tokens_per_image;
    MeasuredSample {
        sample,
        text_tokens,
        visual_token_count: cfg.visual_tokens_per_image,
        image_count,
        len,
        truncated,
    }
}

pub fn measure_shard(
    shard: Shard,
    tok: &dyn TokenizerPort,
    cfg: &PackerConfig,
) -> Vec<MeasuredSample> {
    shard
        .samples
        .into_iter()
        .map(|s| measure(s, tok, cfg))
        .collect()
}
