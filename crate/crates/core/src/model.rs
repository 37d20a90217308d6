//! The hybrid CTC/attention model: Conformer encoder, CTC projection and
//! Transformer decoder sharing one parameter store.

use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{ConformerConfig, Encoder};
use crate::error::{Error, Result};
use crate::metrics::ctc_greedy_decode;
use crate::nn::{Ctx, Init, Linear, Mode, ParamStore, RunningStats};
use crate::tensor::{Graph, RngState, Tensor, Var};
use crate::vocab::{Vocabulary, BLANK_ID};

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub running: Vec<RunningStats>,
    pub encoder: Encoder,
    pub ctc_head: Linear,
    pub decoder: Decoder,
    pub vocab: Vocabulary,
}

/// Outputs of one forward pass over one utterance.
#[derive(Clone, Copy, Debug)]
pub struct BranchOut {
    pub ctc_logits: Var,
    pub aed_logits: Var,
    pub frames: usize,
}

impl Model {
    pub fn new(
        feat_dims: usize,
        enc: &ConformerConfig,
        dec: &DecoderConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        enc.validate()?;
        dec.validate()?;
        if enc.d_model != dec.d_model {
            return Err(Error::config(
                "decoder.d_model",
                format!("{} differs from encoder.d_model {}", dec.d_model, enc.d_model),
            ));
        }
        let mut store = ParamStore::new();
        let mut running = Vec::new();
        let mut init = Init::new(seed);
        let encoder = Encoder::new(&mut store, &mut running, &mut init, feat_dims, enc);
        let v = vocab.size();
        let ctc_head = Linear::new(&mut store, &mut init, "ctc.out", enc.d_model, v, true);
        let decoder = Decoder::new(&mut store, &mut init, v, dec);
        Ok(Model {
            store,
            running,
            encoder,
            ctc_head,
            decoder,
            vocab,
        })
    }

    /// Encoder, CTC head and teacher-forced decoder for `target` (character ids).
    pub fn forward(&self, g: &mut Graph, cx: &mut Ctx, feats: Var, target: &[usize]) -> Result<BranchOut> {
        let (enc, frames) = self.encoder.forward(g, cx, feats)?;
        let ctc_logits = self.ctc_head.forward(g, cx, enc)?;
        let mut dec_in = Vec::with_capacity(target.len() + 1);
        dec_in.push(self.vocab.sos_eos_id());
        dec_in.extend_from_slice(target);
        let aed_logits = self.decoder.forward(g, cx, &dec_in, enc)?;
        Ok(BranchOut {
            ctc_logits,
            aed_logits,
            frames,
        })
    }

    /// Eval-mode encoder output and CTC logits.
    pub fn encode(&self, feats: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&self.store, &self.running, Mode::Eval, RngState::new(0)).frozen();
        let x = g.constant(feats.clone());
        let (enc, _) = self.encoder.forward(&mut g, &mut cx, x)?;
        let logits = self.ctc_head.forward(&mut g, &mut cx, enc)?;
        Ok((g.value(enc).clone(), g.value(logits).clone()))
    }

    /// CTC best-path and greedy attention transcripts.
    pub fn transcribe(&self, feats: &Tensor, max_len: usize) -> Result<(String, String)> {
        let (enc, logits) = self.encode(feats)?;
        let ctc = ctc_greedy_decode(&logits, BLANK_ID);
        let aed = self
            .decoder
            .greedy_decode(&self.store, &self.running, &enc, self.vocab.sos_eos_id(), max_len)?;
        Ok((self.vocab.decode(&ctc), self.vocab.decode(&aed)))
    }
}
