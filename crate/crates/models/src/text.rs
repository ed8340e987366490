//! Recurrent caption encoder producing the text embedding `s`.

use candle_core::{DType, Tensor};
use hiergen_core::text::{Vocabulary, PAD};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{masked_update, Linear, LstmCell};
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Dimension of the output embedding.
    pub dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            vocab_size: 64,
            embed_dim: 64,
            hidden: 128,
            dim: 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    embedding: Tensor,
    cell: LstmCell,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, config: TextEncoderConfig) -> Result<Self> {
        let embedding = ps.get(
            &format!("{prefix}.embedding"),
            &[config.vocab_size, config.embed_dim],
            Init::Normal(0.1),
        )?;
        let cell = LstmCell::new(ps, &format!("{prefix}.lstm"), config.embed_dim, config.hidden)?;
        let proj = Linear::new(ps, &format!("{prefix}.proj"), config.hidden, config.dim)?;
        Ok(TextEncoder {
            config,
            embedding,
            cell,
            proj,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Encodes a batch of token id sequences into `(N, dim)` embeddings.
    /// Sequences are right-padded internally; padded steps leave the state
    /// untouched, so the result for a sequence does not depend on the batch.
    pub fn encode_ids(&self, batch: &[Vec<usize>]) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(ModelError::input("empty batch"));
        }
        if let Some(i) = batch.iter().position(|s| s.is_empty()) {
            return Err(ModelError::input(format!("sequence {i} is empty")));
        }
        if let Some(&bad) = batch
            .iter()
            .flatten()
            .find(|&&id| id >= self.config.vocab_size)
        {
            return Err(ModelError::input(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let n = batch.len();
        let steps = batch.iter().map(Vec::len).max().unwrap_or(0);
        let dev = self.embedding.device();
        let dtype = self.embedding.dtype();
        let mut ids = vec![PAD as u32; n * steps];
        let mut live = vec![0f64; n * steps];
        for (i, seq) in batch.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                ids[t * n + i] = id as u32;
                live[t * n + i] = 1.0;
            }
        }
        let ids = Tensor::from_vec(ids, n * steps, dev)?;
        let live = Tensor::from_vec(live, (steps, n, 1), dev)?.to_dtype(dtype)?;
        let emb = self
            .embedding
            .index_select(&ids, 0)?
            .reshape((steps, n, self.config.embed_dim))?;
        let mut h = Tensor::zeros((n, self.config.hidden), dtype, dev)?;
        let mut c = h.clone();
        for t in 0..steps {
            let (h2, c2) = self.cell.step(&emb.get(t)?, &h, &c)?;
            let m = live.get(t)?;
            h = masked_update(&m, &h2, &h)?;
            c = masked_update(&m, &c2, &c)?;
        }
        self.proj.forward(&h)
    }

    /// Tokenizes and encodes captions with `vocab`.
    pub fn encode_texts(&self, vocab: &Vocabulary, texts: &[&str]) -> Result<Tensor> {
        let ids = texts
            .iter()
            .map(|t| vocab.encode(t))
            .collect::<hiergen_core::Result<Vec<_>>>()?;
        self.encode_ids(&ids)
    }

    pub fn dtype(&self) -> DType {
        self.embedding.dtype()
    }
}
