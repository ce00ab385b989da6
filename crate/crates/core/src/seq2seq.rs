//! Attentional encoder-decoder translation model.
//!
//! The encoder is a two-layer bidirectional LSTM over fixed source word
//! vectors; it is the part transferred downstream as a context-vector
//! extractor. The decoder is a two-layer unidirectional LSTM whose input at
//! each step is the previous target embedding concatenated with the
//! previous context-adjusted state, followed by dot attention over the
//! stacked encoder states and a tanh projection.

use crate::embed::{EmbeddingTable, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    affine_apply, bilstm_forward, lstm_cell_step, AffineLayer, AffineNodes, BiLstmNodes,
    BiLstmStack, LstmCellNodes, LstmCellParams,
};
use crate::params::{join, Binder, ParamGroup};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Real, Tensor};
use rand::Rng;

/// Encoder states stacked along time plus source validity.
pub struct AttentionMemory {
    pub h: NodeId,
    pub mask: Vec<bool>,
}

/// Per-layer decoder LSTM state plus the context-adjusted vector fed back
/// into the next step. Everything starts at zero.
pub struct DecoderState {
    pub layers: Vec<(NodeId, NodeId)>,
    pub h_tilde: NodeId,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderDecoderModel<F: Real> {
    pub src_table: EmbeddingTable<F>,
    pub tgt_table: EmbeddingTable<F>,
    pub encoder: BiLstmStack<F>,
    pub decoder: Vec<LstmCellParams<F>>,
    pub attn_in: AffineLayer<F>,
    pub attn_out: AffineLayer<F>,
    pub out_proj: AffineLayer<F>,
    pub hidden: usize,
}

pub struct Seq2SeqNodes {
    pub src_table: NodeId,
    pub tgt_table: NodeId,
    pub encoder: BiLstmNodes,
    pub decoder: Vec<LstmCellNodes>,
    pub attn_in: AffineNodes,
    pub attn_out: AffineNodes,
    pub out_proj: AffineNodes,
}

impl<F: Real> EncoderDecoderModel<F> {
    /// Decoder hidden size is fixed at `2H` so the attention concatenation
    /// `[Hᵀα; h_dec]` has width `4H`.
    pub fn new<R: Rng>(
        src_table: EmbeddingTable<F>,
        tgt_vocab: usize,
        tgt_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let h_dec = 2 * hidden;
        let encoder = BiLstmStack::new(src_table.dim, hidden, 2, rng);
        let decoder = vec![
            LstmCellParams::new(tgt_dim + h_dec, h_dec, rng),
            LstmCellParams::new(h_dec, h_dec, rng),
        ];
        EncoderDecoderModel {
            src_table,
            tgt_table: EmbeddingTable::new_trainable(tgt_vocab, tgt_dim, rng),
            encoder,
            decoder,
            attn_in: AffineLayer::new(h_dec, 2 * hidden, rng),
            attn_out: AffineLayer::new(2 * hidden + h_dec, h_dec, rng),
            out_proj: AffineLayer::new(h_dec, tgt_vocab, rng),
            hidden,
        }
    }

    pub fn decoder_hidden(&self) -> usize {
        2 * self.hidden
    }

    pub fn tgt_vocab(&self) -> usize {
        self.tgt_table.vocab_size()
    }

    /// Trainable leaves for everything except the fixed source table,
    /// which is bound as a constant.
    pub fn bind(&self, tape: &mut Tape<F>, binder: &mut Binder) -> Seq2SeqNodes {
        Seq2SeqNodes {
            src_table: binder.frozen(tape, &self.src_table.matrix),
            tgt_table: binder.leaf(tape, "tgt_table.matrix", &self.tgt_table.matrix),
            encoder: self.encoder.bind(tape, binder, "encoder"),
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, d)| d.bind(tape, binder, &format!("decoder.layer{i}")))
                .collect(),
            attn_in: self.attn_in.bind(tape, binder, "attn_in"),
            attn_out: self.attn_out.bind(tape, binder, "attn_out"),
            out_proj: self.out_proj.bind(tape, binder, "out_proj"),
        }
    }

    /// Whole model as constants: inference without gradient bookkeeping.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Seq2SeqNodes {
        Seq2SeqNodes {
            src_table: tape.constant(self.src_table.matrix.clone()),
            tgt_table: tape.constant(self.tgt_table.matrix.clone()),
            encoder: self.encoder.bind_frozen(tape),
            decoder: self.decoder.iter().map(|d| d.bind_frozen(tape)).collect(),
            attn_in: self.attn_in.bind_frozen(tape),
            attn_out: self.attn_out.bind_frozen(tape),
            out_proj: self.out_proj.bind_frozen(tape),
        }
    }
}

impl<F: Real> ParamGroup<F> for EncoderDecoderModel<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool)) {
        f(&join(prefix, "src_table.matrix"), &self.src_table.matrix, false);
        f(&join(prefix, "tgt_table.matrix"), &self.tgt_table.matrix, true);
        self.encoder.visit(&join(prefix, "encoder"), f);
        for (i, d) in self.decoder.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoder.layer{i}")), f);
        }
        self.attn_in.visit(&join(prefix, "attn_in"), f);
        self.attn_out.visit(&join(prefix, "attn_out"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool)) {
        f(
            &join(prefix, "src_table.matrix"),
            &mut self.src_table.matrix,
            false,
        );
        f(
            &join(prefix, "tgt_table.matrix"),
            &mut self.tgt_table.matrix,
            true,
        );
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoder.layer{i}")), f);
        }
        self.attn_in.visit_mut(&join(prefix, "attn_in"), f);
        self.attn_out.visit_mut(&join(prefix, "attn_out"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

/// Run the encoder over one source sequence: embed, stack, remember.
pub fn encode<F: Real>(
    tape: &mut Tape<F>,
    nodes: &Seq2SeqNodes,
    src_ids: &[usize],
) -> Result<AttentionMemory> {
    if src_ids.is_empty() {
        return Err(Error::Contract("encode: empty source sequence".into()));
    }
    let embedded = tape.gather_rows(nodes.src_table, src_ids, PAD)?;
    let h = bilstm_forward(tape, &nodes.encoder, embedded)?;
    Ok(AttentionMemory {
        h,
        mask: src_ids.iter().map(|&id| id != PAD).collect(),
    })
}

/// `α = softmax(H(W₁·h_dec + b₁))` over valid source positions; masked
/// positions get exactly 0.
pub fn attention_weights<F: Real>(
    tape: &mut Tape<F>,
    mem: &AttentionMemory,
    h_dec: NodeId,
    attn_in: &AffineNodes,
) -> Result<NodeId> {
    if !mem.mask.iter().any(|&m| m) {
        return Err(Error::Contract(
            "attention_weights: all source positions masked".into(),
        ));
    }
    let q = affine_apply(tape, attn_in, h_dec)?;
    let scores = tape.matvec(mem.h, q)?;
    tape.masked_softmax_rows(scores, &mem.mask)
}

pub fn initial_state<F: Real>(tape: &mut Tape<F>, nodes: &Seq2SeqNodes) -> DecoderState {
    let h_dec = nodes.decoder[0].hidden;
    let layers = nodes
        .decoder
        .iter()
        .map(|_| {
            (
                tape.zeros_const(vec![h_dec]),
                tape.zeros_const(vec![h_dec]),
            )
        })
        .collect();
    DecoderState {
        layers,
        h_tilde: tape.zeros_const(vec![h_dec]),
        step: 0,
    }
}

/// One decoder step: LSTM stack over `[z_prev; h̃]`, attention from the top
/// layer, then the tanh projection and vocabulary logits.
pub fn decoder_step<F: Real>(
    tape: &mut Tape<F>,
    nodes: &Seq2SeqNodes,
    state: &DecoderState,
    z_prev: NodeId,
    mem: &AttentionMemory,
) -> Result<(DecoderState, NodeId)> {
    let input = tape.concat(&[z_prev, state.h_tilde], 0)?;
    let mut layers = Vec::with_capacity(nodes.decoder.len());
    let mut x = input;
    for (cell, (h_prev, c_prev)) in nodes.decoder.iter().zip(&state.layers) {
        let (h, c) = lstm_cell_step(tape, cell, x, *h_prev, *c_prev)?;
        layers.push((h, c));
        x = h;
    }
    let h_top = x;

    let alpha = attention_weights(tape, mem, h_top, &nodes.attn_in)?;
    let ht = tape.transpose(mem.h)?;
    let ctx = tape.matvec(ht, alpha)?;
    let cat = tape.concat(&[ctx, h_top], 0)?;
    let pre = affine_apply(tape, &nodes.attn_out, cat)?;
    let h_tilde = tape.tanh(pre)?;
    let logits = affine_apply(tape, &nodes.out_proj, h_tilde)?;

    Ok((
        DecoderState {
            layers,
            h_tilde,
            step: state.step + 1,
        },
        logits,
    ))
}

/// Teacher-forced cross-entropy over one pair, returned as (sum, count) so
/// callers can form token-level means across a batch.
pub fn teacher_forced_sum<F: Real>(
    tape: &mut Tape<F>,
    nodes: &Seq2SeqNodes,
    src_ids: &[usize],
    tgt_ids: &[usize],
) -> Result<(NodeId, usize)> {
    if tgt_ids.len() < 2 || tgt_ids[0] != BOS || *tgt_ids.last().unwrap() != EOS {
        return Err(Error::Contract(
            "teacher_forced_sum: target must be <bos> ... <eos>".into(),
        ));
    }
    let mem = encode(tape, nodes, src_ids)?;
    let mut state = initial_state(tape, nodes);
    let mut logit_rows = Vec::new();
    let mut targets = Vec::new();
    for t in 1..tgt_ids.len() {
        let prev = tgt_ids[t - 1];
        let z_row = tape.gather_rows(nodes.tgt_table, &[prev], PAD)?;
        let z = tape.row(z_row, 0)?;
        let (next, logits) = decoder_step(tape, nodes, &state, z, &mem)?;
        state = next;
        logit_rows.push(logits);
        targets.push(tgt_ids[t]);
    }
    let stacked = tape.stack_rows(&logit_rows)?;
    let valid = vec![true; targets.len()];
    let sum = tape.cross_entropy_sum(stacked, &targets, &valid)?;
    Ok((sum, targets.len()))
}

/// Mean cross entropy per valid target token over a batch of pairs.
pub fn teacher_forced_loss<F: Real>(
    tape: &mut Tape<F>,
    nodes: &Seq2SeqNodes,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::Contract("teacher_forced_loss: empty batch".into()));
    }
    let mut total: Option<NodeId> = None;
    let mut count = 0usize;
    for (src, tgt) in pairs {
        let (sum, n) = teacher_forced_sum(tape, nodes, src, tgt)?;
        count += n;
        total = Some(match total {
            Some(acc) => tape.add(acc, sum)?,
            None => sum,
        });
    }
    tape.scale(total.unwrap(), F::from_f64(1.0 / count as f64))
}

/// Greedy argmax decoding; ties break toward the lowest token id. Returns
/// content tokens only (no `<bos>`, stop token excluded).
pub fn greedy_decode<F: Real>(
    model: &EncoderDecoderModel<F>,
    src_ids: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let nodes = model.bind_frozen(&mut tape);
    let mem = encode(&mut tape, &nodes, src_ids)?;
    let mut state = initial_state(&mut tape, &nodes);
    let mut out = Vec::new();
    let mut prev = BOS;
    for _ in 0..max_len {
        let z_row = tape.gather_rows(nodes.tgt_table, &[prev], PAD)?;
        let z = tape.row(z_row, 0)?;
        let (next, logits) = decoder_step(&mut tape, &nodes, &state, z, &mem)?;
        state = next;
        let lv = tape.value(logits);
        let mut best = 0usize;
        for i in 1..lv.numel() {
            if lv.at1(i) > lv.at1(best) {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
        prev = best;
    }
    Ok(out)
}
