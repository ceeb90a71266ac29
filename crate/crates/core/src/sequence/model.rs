use crate::error::Result;
use crate::events::{ActionEvent, Vocab};
use crate::numerics::{ParamStore, Tape, Var};

use super::config::SeqConfig;
use super::layer::{readout_lora, transformer_layer};
use super::probe::{AttnProbe, LayerProbe};
use super::tokenize::{fuse_query_tokens, query_tokens, tokenize, QueryInput};
use super::weights::SeqWeights;

/// Sequence module bound to its parameters in a shared store.
#[derive(Clone, Debug)]
pub struct SeqModule {
    pub cfg: SeqConfig,
    pub vocab: Vocab,
    pub weights: SeqWeights,
}

pub struct SeqOutput {
    /// `m_seq` summaries, each `1 x d_seq`.
    pub summaries: Vec<Var>,
    pub probe: Option<AttnProbe>,
}

impl SeqModule {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: SeqConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let weights = SeqWeights::register(store, prefix, &cfg, &vocab);
        Ok(Self { cfg, vocab, weights })
    }

    /// Tokenize, fuse query tokens, run the layer stack with schedule-driven
    /// trimming, flatten the query rows and read out the summaries.
    pub fn forward(
        &self,
        tape: &mut Tape,
        events: &[ActionEvent],
        query: &QueryInput,
        capture: bool,
    ) -> Result<SeqOutput> {
        let cfg = &self.cfg;
        let reference = query.reference_time();
        let x_seq = tokenize(tape, events, &self.weights.tokenizer, cfg, &self.vocab, reference)?;
        let item_table = tape.param(self.weights.tokenizer.e_item);
        let q = query_tokens(tape, events, query, item_table, &self.weights.query, cfg, &self.vocab)?;
        let mut x = fuse_query_tokens(tape, x_seq, q)?;
        let total = events.len() + cfg.query_tokens;
        let mut probe = capture.then(|| AttnProbe {
            request_time_s: reference,
            event_times: events.iter().map(|e| e.timestamp_s).collect(),
            layers: Vec::new(),
        });
        for (lw, (rows_in, rows_out)) in self.weights.layers.iter().zip(cfg.layer_rows(events.len())) {
            let mut heads = Vec::new();
            let sink = probe.as_ref().map(|_| &mut heads);
            x = transformer_layer(tape, x, lw, rows_out, cfg.rms_eps, sink)?;
            if let Some(p) = probe.as_mut() {
                p.layers.push(LayerProbe {
                    col_offset: total - rows_in,
                    row_offset: total - rows_out,
                    heads,
                });
            }
        }
        let rows = tape.value(x).rows();
        let nq = cfg.query_tokens;
        let qrows = if rows == nq { x } else { tape.slice_rows(x, rows - nq, rows)? };
        let flat = tape.reshape(qrows, vec![1, nq * cfg.d_model])?;
        let summaries = self
            .weights
            .readout
            .iter()
            .map(|mlp| readout_lora(tape, flat, mlp))
            .collect::<Result<_>>()?;
        Ok(SeqOutput { summaries, probe })
    }
}
