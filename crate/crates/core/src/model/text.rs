//! Tokenisation and the shared text encoder.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::nn::{Ctx, Encoder};
use super::params::{Init, Scope};
use crate::error::{Error, Result};
use crate::synth::tokenize_words;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Word-level vocabulary. Ids 0 and 1 are reserved for padding and
/// unknown words; the rest are ranked by corpus frequency, ties by spelling.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Config(format!(
                "vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        words.extend(ranked.into_iter().map(|(w, _)| w));
        Self::from_words(words).expect("fresh vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Token ids truncated to `max_len`, plus whether truncation happened.
    pub fn encode(&self, text: &str, max_len: usize) -> (Vec<u32>, bool) {
        let mut ids: Vec<u32> = tokenize_words(text).iter().map(|w| self.id(w)).collect();
        let truncated = ids.len() > max_len;
        ids.truncate(max_len);
        (ids, truncated)
    }

    /// Pads a batch to its longest member. Texts that tokenise to nothing
    /// are rejected.
    pub fn batch(&self, texts: &[&str], max_len: usize, device: &Device) -> Result<TextBatch> {
        if texts.is_empty() {
            return Err(Error::EmptyInput("empty text batch".into()));
        }
        let encoded: Vec<(Vec<u32>, bool)> = texts.iter().map(|t| self.encode(t, max_len)).collect();
        if let Some(i) = encoded.iter().position(|(ids, _)| ids.is_empty()) {
            return Err(Error::EmptyInput(format!(
                "text {:?} has no tokens",
                texts[i]
            )));
        }
        let n = encoded.iter().map(|(ids, _)| ids.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(texts.len() * n);
        let mut pad = Vec::with_capacity(texts.len() * n);
        for (row, _) in &encoded {
            ids.extend_from_slice(row);
            pad.extend(std::iter::repeat_n(0f32, row.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, n - row.len()));
            pad.extend(std::iter::repeat_n(1f32, n - row.len()));
        }
        let b = texts.len();
        Ok(TextBatch {
            ids: Tensor::from_vec(ids, (b, n), device)?,
            pad_mask: Tensor::from_vec(pad, (b, n), device)?,
            lengths: encoded.iter().map(|(ids, _)| ids.len()).collect(),
            truncated: encoded.iter().map(|(_, t)| *t).collect(),
        })
    }
}

impl Vocab {
    /// Rebuilds the lookup index after deserialisation.
    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            words: Vec<String>,
        }
        let raw: Raw = serde_json::from_str(s)?;
        Self::from_words(raw.words)
    }
}

/// Token ids `[b, n]` (u32) and padding mask `[b, n]` (1 = padded).
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Tensor,
    pub pad_mask: Tensor,
    pub lengths: Vec<usize>,
    pub truncated: Vec<bool>,
}

impl TextBatch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.dims()[1]
    }
}

/// Token embeddings plus learned positions, then a transformer encoder.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    tokens: Tensor,
    positions: Tensor,
    encoder: Encoder,
    dim: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        s: &Scope,
        vocab_size: usize,
        max_tokens: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            tokens: s.get("tokens", &[vocab_size, dim], Init::Normal(0.02))?,
            positions: s.get("positions", &[max_tokens, dim], Init::Normal(0.02))?,
            encoder: Encoder::new(&s.pp("encoder"), layers, dim, heads, ffn_dim, dropout)?,
            dim,
        })
    }

    /// `[b, n, dim]` token features.
    pub fn forward(&self, batch: &TextBatch, ctx: &mut Ctx) -> Result<Tensor> {
        let (b, n) = batch.ids.dims2()?;
        let emb = self
            .tokens
            .index_select(&batch.ids.flatten_all()?, 0)?
            .reshape((b, n, self.dim))?;
        let x = emb.broadcast_add(&self.positions.narrow(0, 0, n)?.unsqueeze(0)?)?;
        self.encoder.forward(&x, Some(&batch.pad_mask.to_dtype(DType::F32)?), ctx)
    }
}
