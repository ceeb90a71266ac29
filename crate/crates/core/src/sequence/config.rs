use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the query tokens encode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Candidate ad and request context (online ranker).
    CandidateAware,
    /// User-level features only (upstream user model).
    UserOnly,
}

/// Architecture of the sequence module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Latent width of the query and key/value compressions; also the head width.
    pub latent_dim: usize,
    /// Feed-forward width; `4 * d_model` when unset.
    pub d_ff: Option<usize>,
    pub query_tokens: usize,
    /// Rows surviving out of each layer (pyramid); full self-attention when unset.
    pub schedule: Option<Vec<usize>>,
    pub mode: QueryMode,
    /// Summary width; `d_model` when unset.
    pub d_seq: Option<usize>,
    pub summaries: usize,
    pub lora_rank: usize,
    /// Token dimensions receiving timestamp encodings; the first `min(16, d_model)` when unset.
    pub time_dims: Option<Vec<usize>>,
    /// Width of each categorical embedding feeding the action MLP.
    pub emb_dim: usize,
    /// When false, content vectors are masked at tokenization (ID-only model).
    pub use_content: bool,
    pub rms_eps: f64,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 2,
            latent_dim: 16,
            d_ff: None,
            query_tokens: 4,
            schedule: None,
            mode: QueryMode::CandidateAware,
            d_seq: None,
            summaries: 2,
            lora_rank: 4,
            time_dims: None,
            emb_dim: 8,
            use_content: true,
            rms_eps: 1e-6,
        }
    }
}

impl SeqConfig {
    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn d_seq(&self) -> usize {
        self.d_seq.unwrap_or(self.d_model)
    }

    pub fn time_dims(&self) -> Vec<usize> {
        self.time_dims
            .clone()
            .unwrap_or_else(|| (0..self.d_model.min(16)).collect())
    }

    /// Width of the hidden layer of each readout MLP.
    pub fn readout_hidden(&self) -> usize {
        self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.latent_dim == 0 || self.emb_dim == 0 {
            return err("seq dimensions must be positive".into());
        }
        if self.latent_dim > self.d_model {
            return err(format!(
                "seq.latent_dim {} exceeds d_model {}",
                self.latent_dim, self.d_model
            ));
        }
        if self.query_tokens == 0 {
            return err("seq.query_tokens must be at least 1".into());
        }
        if self.summaries == 0 || self.d_seq() == 0 || self.d_ff() == 0 {
            return err("seq readout and feed-forward widths must be positive".into());
        }
        let min_dim = (self.query_tokens * self.d_model)
            .min(self.readout_hidden())
            .min(self.d_seq());
        if self.lora_rank > min_dim {
            return err(format!("seq.lora_rank {} exceeds readout dims ({min_dim})", self.lora_rank));
        }
        if let Some(dims) = &self.time_dims {
            if dims.len() > 16 || dims.iter().any(|&i| i >= self.d_model) {
                return err("seq.time_dims must be at most 16 indices below d_model".into());
            }
        }
        if let Some(s) = &self.schedule {
            if s.len() != self.layers {
                return err(format!("seq.schedule has {} entries for {} layers", s.len(), self.layers));
            }
            if s.windows(2).any(|w| w[1] > w[0]) {
                return err("seq.schedule must be nonincreasing".into());
            }
            if s.iter().any(|&t| t < self.query_tokens) {
                return err("seq.schedule entries must keep every query token".into());
            }
        }
        Ok(())
    }

    /// `(rows in, rows out)` for each layer on a sequence of `t` events.
    /// Schedule entries larger than the available rows are clamped.
    pub fn layer_rows(&self, t: usize) -> Vec<(usize, usize)> {
        let mut rows = t + self.query_tokens;
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let next = match &self.schedule {
                Some(s) => rows.min(s[l]),
                None => rows,
            };
            out.push((rows, next));
            rows = next;
        }
        out
    }

    /// Full self-attention everywhere except the last layer, whose only
    /// surviving rows are the query tokens.
    pub fn cross_attention_schedule(&self, t: usize) -> Vec<usize> {
        let mut s = vec![t + self.query_tokens; self.layers];
        if let Some(last) = s.last_mut() {
            *last = self.query_tokens;
        }
        s
    }
}
