//! The unified generator: GCN passage feature, feature-enriched BiLSTM
//! encoder with gated self-attention, answer encoder and fusion, and an
//! answer-initialized attention decoder with a maxout pointer.

use std::borrow::Borrow;
use std::collections::HashMap;

use eqg_numcore::{
    bilstm, dropout, lstm_cell, Adam, Gradients, Linear, LstmState, LstmWeights, NumError, ParamId, ParamStore,
    Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EqgTriple, Vocabulary, EOS, PAD, SOS, UNK};
use crate::depgraph::{normalized_adjacency, PassageGraph};
use crate::tagging::Tag;

pub type ModelRng = ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("empty answer")]
    EmptyAnswer,
    #[error("empty passage")]
    EmptyPassage,
    #[error("empty batch")]
    EmptyBatch,
    #[error("beam size must be at least 1")]
    ZeroBeam,
    #[error("pretrained vectors: {0}")]
    Pretrained(String),
    #[error("instance: {0}")]
    Instance(String),
    #[error("parameters do not match the configuration: {0}")]
    ParamMismatch(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// How copy scores become `p_copy`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CopyNorm {
    /// Divide the per-word maxima by their sum.
    #[default]
    Normalized,
    /// Use the per-word maxima as they are.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub tag_dim: usize,
    pub gcn_layers: usize,
    pub dropout: f64,
    /// Width of injected per-token pretrained vectors, 0 when unused.
    pub pretrained_dim: usize,
    pub copy_norm: CopyNorm,
    /// Global gradient-norm cap applied before each update; 0 disables it.
    #[serde(default)]
    pub clip_norm: f64,
}

impl ModelConfig {
    pub fn encoder_input_dim(&self) -> usize {
        2 * self.hidden + self.tag_dim + self.pretrained_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Weights {
    embedding: ParamId,
    tag_embedding: ParamId,
    gcn: Vec<ParamId>,
    gcn_ff: Linear,
    enc: Vec<(LstmWeights, LstmWeights)>,
    enc_proj: Linear,
    att_s: ParamId,
    att_f: Linear,
    att_g: Linear,
    ans_fwd: LstmWeights,
    ans_bwd: LstmWeights,
    ans_proj: Linear,
    fuse: Linear,
    init: Vec<(Linear, Linear)>,
    dec: Vec<LstmWeights>,
    dec_att: ParamId,
    dec_combine: Linear,
    out: Linear,
    copy_gate: ParamId,
}

pub const DECODER_LAYERS: usize = 2;
pub const ENCODER_LAYERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    w: Weights,
}

/// A triple prepared for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub passage_id: String,
    pub passage_ids: Vec<usize>,
    /// Ids in the extended space: vocabulary ids, or `V + k` for the k-th
    /// out-of-vocabulary passage word.
    pub passage_ext: Vec<usize>,
    pub oov_words: Vec<String>,
    pub tags: Vec<usize>,
    pub adjacency: Tensor,
    pub retained: Vec<bool>,
    pub answer_ids: Vec<usize>,
    /// Question ids in the extended space followed by EOS.
    pub target: Vec<usize>,
    pub pretrained: Option<Tensor>,
}

impl Instance {
    pub fn new(
        triple: &EqgTriple,
        tags: &[Tag],
        graph: &PassageGraph,
        vocab: &Vocabulary,
        pretrained: Option<Tensor>,
    ) -> Result<Self> {
        let n = triple.passage_tokens.len();
        if n == 0 {
            return Err(ModelError::EmptyPassage);
        }
        if triple.answer_tokens.is_empty() {
            return Err(ModelError::EmptyAnswer);
        }
        if tags.len() != n || graph.num_nodes != n {
            return Err(ModelError::Instance(format!(
                "{}: {} tokens, {} tags, {} graph nodes",
                triple.passage_id,
                n,
                tags.len(),
                graph.num_nodes
            )));
        }
        let v = vocab.len();
        let mut oov_words: Vec<String> = Vec::new();
        let mut oov_index: HashMap<&str, usize> = HashMap::new();
        let mut passage_ids = Vec::with_capacity(n);
        let mut passage_ext = Vec::with_capacity(n);
        for tok in &triple.passage_tokens {
            match vocab.get(tok) {
                Some(id) => {
                    passage_ids.push(id);
                    passage_ext.push(id);
                }
                None => {
                    let k = *oov_index.entry(tok.as_str()).or_insert_with(|| {
                        oov_words.push(tok.clone());
                        oov_words.len() - 1
                    });
                    passage_ids.push(UNK);
                    passage_ext.push(v + k);
                }
            }
        }
        let mut target: Vec<usize> = triple
            .question_tokens
            .iter()
            .map(|t| vocab.get(t).or_else(|| oov_index.get(t.as_str()).map(|k| v + k)).unwrap_or(UNK))
            .collect();
        target.push(EOS);
        Ok(Instance {
            passage_id: triple.passage_id.clone(),
            passage_ids,
            passage_ext,
            oov_words,
            tags: tags.iter().map(|t| t.index()).collect(),
            adjacency: normalized_adjacency(graph),
            retained: graph.retained.clone(),
            answer_ids: triple.answer_tokens.iter().map(|t| vocab.id(t)).collect(),
            target,
            pretrained,
        })
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    /// Number of loss terms: question tokens plus EOS.
    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn ext_size(&self, vocab_size: usize) -> usize {
        vocab_size + self.oov_words.len()
    }

    /// Surface words for extended ids, stopping at EOS.
    pub fn words(&self, ids: &[usize], vocab: &Vocabulary) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .map(|&i| {
                if i < vocab.len() {
                    vocab.token(i).to_string()
                } else {
                    self.oov_words[i - vocab.len()].clone()
                }
            })
            .collect()
    }
}

/// Encoder outputs kept for decoding.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub states: Var,
    pub states_t: Var,
    pub self_attended: Var,
    pub answer: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    /// Attentional vector from the previous step, fed with the next input.
    pub feed: Var,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: DecoderState,
    pub alpha: Var,
    pub p_vocab: Var,
    pub p_copy: Var,
    pub gate: Var,
    /// Mixture over `V + |oov|` extended ids.
    pub dist: Var,
}

fn dropout_opt(tape: &mut Tape<'_>, x: Var, rate: f64, rng: &mut Option<&mut ModelRng>) -> Result<Var> {
    Ok(dropout(tape, x, rate, rng.as_deref_mut())?)
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ModelRng) -> Result<Self> {
        let h = config.hidden;
        let range = eqg_numcore::layers::INIT_RANGE;
        let mut p = ParamStore::new();
        let u = |shape: &[usize], rng: &mut ModelRng| eqg_numcore::params::uniform(shape, range, rng);
        let embedding = p.add("embedding", u(&[config.vocab_size, h], rng))?;
        let tag_embedding = p.add("tag_embedding", u(&[3, config.tag_dim], rng))?;
        let mut gcn = Vec::new();
        for l in 0..config.gcn_layers {
            gcn.push(p.add(format!("gcn.{l}"), u(&[h, h], rng))?);
        }
        let gcn_ff = Linear::new(&mut p, "gcn.ff", h, h, true, rng)?;
        let mut enc = Vec::new();
        for l in 0..ENCODER_LAYERS {
            let d = if l == 0 { config.encoder_input_dim() } else { 2 * h };
            let f = LstmWeights::new(&mut p, &format!("enc.{l}.fwd"), d, h, rng)?;
            let b = LstmWeights::new(&mut p, &format!("enc.{l}.bwd"), d, h, rng)?;
            enc.push((f, b));
        }
        let enc_proj = Linear::new(&mut p, "enc.proj", 2 * h, h, true, rng)?;
        let att_s = p.add("att.s", u(&[h, h], rng))?;
        let att_f = Linear::new(&mut p, "att.f", 2 * h, h, true, rng)?;
        let att_g = Linear::new(&mut p, "att.g", 2 * h, h, true, rng)?;
        let ans_fwd = LstmWeights::new(&mut p, "ans.fwd", h, h, rng)?;
        let ans_bwd = LstmWeights::new(&mut p, "ans.bwd", h, h, rng)?;
        let ans_proj = Linear::new(&mut p, "ans.proj", 2 * h, h, true, rng)?;
        let fuse = Linear::new(&mut p, "fuse", 4 * h, h, true, rng)?;
        let mut init = Vec::new();
        for l in 0..DECODER_LAYERS {
            let ih = Linear::new(&mut p, &format!("dec.init.{l}.h"), h, h, true, rng)?;
            let ic = Linear::new(&mut p, &format!("dec.init.{l}.c"), h, h, true, rng)?;
            init.push((ih, ic));
        }
        let mut dec = Vec::new();
        for l in 0..DECODER_LAYERS {
            let d = if l == 0 { 2 * h } else { h };
            dec.push(LstmWeights::new(&mut p, &format!("dec.{l}"), d, h, rng)?);
        }
        let dec_att = p.add("dec.att", u(&[h, h], rng))?;
        let dec_combine = Linear::new(&mut p, "dec.combine", 2 * h, h, true, rng)?;
        let out = Linear::new(&mut p, "dec.out", h, config.vocab_size, true, rng)?;
        let copy_gate = p.add("copy_gate", Tensor::scalar(0.0))?;
        Ok(Model {
            config,
            params: p,
            w: Weights {
                embedding,
                tag_embedding,
                gcn,
                gcn_ff,
                enc,
                enc_proj,
                att_s,
                att_f,
                att_g,
                ans_fwd,
                ans_bwd,
                ans_proj,
                fuse,
                init,
                dec,
                dec_att,
                dec_combine,
                out,
                copy_gate,
            },
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut rng = ModelRng::seed_from_u64(0);
        let mut model = Model::new(config, &mut rng)?;
        if model.params.len() != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, en, et), (_, fname, ft)) in model.params.iter().zip(params.iter()) {
            if en != fname || et.shape() != ft.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "expected {en} {:?}, found {fname} {:?}",
                    et.shape(),
                    ft.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn embedding_id(&self) -> ParamId {
        self.w.embedding
    }

    pub fn copy_gate_id(&self) -> ParamId {
        self.w.copy_gate
    }

    pub fn output_ids(&self) -> (ParamId, Option<ParamId>) {
        (self.w.out.weight, self.w.out.bias)
    }

    /// Sets the logit behind the copy gate `g_p = sigmoid(logit)`.
    pub fn set_copy_gate_logit(&mut self, logit: f64) {
        *self.params.get_mut(self.w.copy_gate) = Tensor::scalar(logit);
    }

    pub fn copy_gate(&self) -> f64 {
        eqg_numcore::sigmoid(self.params.get(self.w.copy_gate).data()[0])
    }

    /// Two-layer graph convolution over word embeddings followed by a
    /// feed-forward layer; pruned rows are zero.
    pub fn gcn_forward(
        &self,
        tape: &mut Tape<'_>,
        embeddings: Var,
        adjacency: &Tensor,
        retained: &[bool],
        rng: &mut Option<&mut ModelRng>,
    ) -> Result<Var> {
        let a = tape.constant(adjacency.clone());
        let mut x = embeddings;
        for &w in &self.w.gcn {
            x = dropout_opt(tape, x, self.config.dropout, rng)?;
            let ax = tape.matmul(a, x)?;
            let w = tape.param(w);
            let axw = tape.matmul(ax, w)?;
            x = tape.relu(axw);
        }
        let g = self.w.gcn_ff.forward(tape, x)?;
        let h = self.config.hidden;
        let mask: Vec<bool> = retained.iter().flat_map(|&r| std::iter::repeat(!r).take(h)).collect();
        Ok(tape.mask_fill(g, &mask, 0.0)?)
    }

    /// `H` from the two-layer BiLSTM, projected back to the hidden size.
    pub fn encode_passage(
        &self,
        tape: &mut Tape<'_>,
        inst: &Instance,
        gcn: Var,
        rng: &mut Option<&mut ModelRng>,
    ) -> Result<Var> {
        let table = tape.param(self.w.embedding);
        let e = tape.embedding(table, &inst.passage_ids)?;
        let tags = tape.param(self.w.tag_embedding);
        let k = tape.embedding(tags, &inst.tags)?;
        let mut parts = vec![e, k, gcn];
        match (&inst.pretrained, self.config.pretrained_dim) {
            (None, 0) => {}
            (Some(p), d) if d > 0 && p.shape() == [inst.len(), d] => parts.push(tape.constant(p.clone())),
            (p, d) => {
                return Err(ModelError::Pretrained(format!(
                    "{}: expected [{}, {d}], got {:?}",
                    inst.passage_id,
                    inst.len(),
                    p.as_ref().map(|t| t.shape().to_vec())
                )))
            }
        }
        let mut x = tape.concat(&parts, 1)?;
        for (f, b) in &self.w.enc {
            x = dropout_opt(tape, x, self.config.dropout, rng)?;
            x = bilstm(tape, x, f, b)?.0;
        }
        Ok(self.w.enc_proj.forward(tape, x)?)
    }

    pub fn gated_self_attention(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let ws = tape.param(self.w.att_s);
        let hw = tape.matmul(h, ws)?;
        let ht = tape.transpose(h)?;
        let scores = tape.matmul(hw, ht)?;
        let weights = tape.softmax(scores, 1)?;
        let s = tape.matmul(weights, h)?;
        let hs = tape.concat(&[h, s], 1)?;
        let f = self.w.att_f.forward(tape, hs)?;
        let f = tape.tanh(f);
        let g = self.w.att_g.forward(tape, hs)?;
        let g = tape.sigmoid(g);
        let gf = tape.mul(g, f)?;
        let keep = tape.one_minus(g);
        let kh = tape.mul(keep, h)?;
        Ok(tape.add(gf, kh)?)
    }

    pub fn encode_answer(&self, tape: &mut Tape<'_>, answer_ids: &[usize]) -> Result<Var> {
        if answer_ids.is_empty() {
            return Err(ModelError::EmptyAnswer);
        }
        let table = tape.param(self.w.embedding);
        let e = tape.embedding(table, answer_ids)?;
        let (_, fwd, bwd) = bilstm(tape, e, &self.w.ans_fwd, &self.w.ans_bwd)?;
        let both = tape.concat(&[fwd.h, bwd.h], 1)?;
        Ok(self.w.ans_proj.forward(tape, both)?)
    }

    pub fn fuse(&self, tape: &mut Tape<'_>, self_attended: Var, answer: Var) -> Result<Var> {
        let n = tape.value(self_attended).rows();
        let rep = tape.repeat_rows(answer, n)?;
        let prod = tape.mul(self_attended, rep)?;
        let sum = tape.add(self_attended, rep)?;
        let cat = tape.concat(&[self_attended, rep, prod, sum], 1)?;
        let u = self.w.fuse.forward(tape, cat)?;
        Ok(tape.tanh(u))
    }

    pub fn encode(&self, tape: &mut Tape<'_>, inst: &Instance, rng: &mut Option<&mut ModelRng>) -> Result<Encoded> {
        if inst.is_empty() {
            return Err(ModelError::EmptyPassage);
        }
        let table = tape.param(self.w.embedding);
        let e = tape.embedding(table, &inst.passage_ids)?;
        let g = self.gcn_forward(tape, e, &inst.adjacency, &inst.retained, rng)?;
        let h = self.encode_passage(tape, inst, g, rng)?;
        let self_attended = self.gated_self_attention(tape, h)?;
        let answer = self.encode_answer(tape, &inst.answer_ids)?;
        let states = self.fuse(tape, self_attended, answer)?;
        let states_t = tape.transpose(states)?;
        Ok(Encoded {
            states,
            states_t,
            self_attended,
            answer,
        })
    }

    pub fn initial_state(&self, tape: &mut Tape<'_>, answer: Var) -> Result<DecoderState> {
        let mut layers = Vec::with_capacity(DECODER_LAYERS);
        for (ih, ic) in &self.w.init {
            let h = ih.forward(tape, answer)?;
            let c = ic.forward(tape, answer)?;
            layers.push(LstmState {
                h: tape.tanh(h),
                c: tape.tanh(c),
            });
        }
        let feed = tape.constant(Tensor::zeros(&[1, self.config.hidden]));
        Ok(DecoderState { layers, feed })
    }

    /// One decoder step consuming `prev` (an extended id; ids outside the
    /// vocabulary are fed as UNK).
    pub fn decoder_step(
        &self,
        tape: &mut Tape<'_>,
        enc: &Encoded,
        passage_ext: &[usize],
        ext_size: usize,
        state: &DecoderState,
        prev: usize,
    ) -> Result<StepOutput> {
        let v = self.config.vocab_size;
        let input = if prev < v { prev } else { UNK };
        let table = tape.param(self.w.embedding);
        let emb = tape.embedding(table, &[input])?;
        let mut x = tape.concat(&[emb, state.feed], 1)?;
        let mut layers = Vec::with_capacity(DECODER_LAYERS);
        for (w, prev_state) in self.w.dec.iter().zip(&state.layers) {
            let s = lstm_cell(tape, x, *prev_state, w)?;
            x = s.h;
            layers.push(s);
        }
        let d = x;
        let wa = tape.param(self.w.dec_att);
        let q = tape.matmul(d, wa)?;
        let scores = tape.matmul(q, enc.states_t)?;
        let alpha = tape.softmax(scores, 1)?;
        let context = tape.matmul(alpha, enc.states)?;
        let cd = tape.concat(&[context, d], 1)?;
        let feed = self.w.dec_combine.forward(tape, cd)?;
        let feed = tape.tanh(feed);
        let logits = self.w.out.forward(tape, feed)?;
        let p_vocab = tape.softmax(logits, 1)?;

        let raw = tape.scatter_max(alpha, passage_ext, ext_size)?;
        let p_copy = match self.config.copy_norm {
            CopyNorm::Raw => raw,
            CopyNorm::Normalized => {
                let total = tape.sum(raw);
                if tape.value(total).data()[0] > 0.0 {
                    tape.div_scalar(raw, total)?
                } else {
                    raw
                }
            }
        };
        let logit = tape.param(self.w.copy_gate);
        let gate = tape.sigmoid(logit);
        let padded = tape.pad_cols(p_vocab, ext_size)?;
        let gen = tape.mul_scalar(padded, gate)?;
        let keep = tape.one_minus(gate);
        let copy = tape.mul_scalar(p_copy, keep)?;
        let dist = tape.add(gen, copy)?;
        Ok(StepOutput {
            state: DecoderState { layers, feed },
            alpha,
            p_vocab,
            p_copy,
            gate,
            dist,
        })
    }

    /// Summed teacher-forced negative log-likelihood of the target.
    pub fn nll(&self, tape: &mut Tape<'_>, inst: &Instance, rng: &mut Option<&mut ModelRng>) -> Result<Var> {
        let enc = self.encode(tape, inst, rng)?;
        let ext = inst.ext_size(self.config.vocab_size);
        let mut state = self.initial_state(tape, enc.answer)?;
        let mut prev = SOS;
        let mut picked = Vec::with_capacity(inst.target.len());
        for &y in &inst.target {
            let out = self.decoder_step(tape, &enc, &inst.passage_ext, ext, &state, prev)?;
            picked.push(tape.gather(out.dist, &[y])?);
            state = out.state;
            prev = y;
        }
        let probs = tape.concat(&picked, 0)?;
        let logs = tape.log(probs);
        let total = tape.sum(logs);
        Ok(tape.scale(total, -1.0))
    }

    /// Gradients of the per-token mean NLL over `batch`, plus that mean.
    pub fn batch_gradients<I: Borrow<Instance>>(
        &self,
        batch: &[I],
        mut rng: Option<&mut ModelRng>,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let tokens: usize = batch.iter().map(|i| i.borrow().target_len()).sum();
        let scale = 1.0 / tokens as f64;
        let mut grads = Gradients::new(&self.params);
        let mut total = 0.0;
        for inst in batch {
            let mut tape = Tape::with_params(&self.params);
            let loss = self.nll(&mut tape, inst.borrow(), &mut rng)?;
            total += tape.value(loss).data()[0];
            tape.backward_into(loss, scale, &mut grads)?;
        }
        Ok((total * scale, grads))
    }

    /// One optimizer step; returns the batch's per-token mean NLL.
    pub fn train_step<I: Borrow<Instance>>(&mut self, adam: &mut Adam, batch: &[I], rng: &mut ModelRng) -> Result<f64> {
        let rng = if self.config.dropout > 0.0 { Some(rng) } else { None };
        let (loss, mut grads) = self.batch_gradients(batch, rng)?;
        if self.config.clip_norm > 0.0 {
            grads.clip_norm(self.config.clip_norm);
        }
        adam.step(&mut self.params, &grads)?;
        Ok(loss)
    }

    /// Per-token mean NLL with dropout off.
    pub fn eval_loss(&self, instances: &[Instance]) -> Result<f64> {
        if instances.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for inst in instances {
            let mut tape = Tape::with_params(&self.params);
            let loss = self.nll(&mut tape, inst, &mut None)?;
            total += tape.value(loss).data()[0];
            tokens += inst.target_len();
        }
        Ok(total / tokens as f64)
    }

    /// Log-probabilities of admissible next tokens. PAD and SOS are never
    /// proposed; UNK is withheld whenever copying has positive mass.
    fn candidates(&self, tape: &Tape<'_>, out: &StepOutput) -> Vec<(usize, f64)> {
        let dist = tape.value(out.dist).data();
        let copy_mass = (1.0 - tape.value(out.gate).data()[0]) * tape.value(out.p_copy).sum();
        dist.iter()
            .enumerate()
            .filter(|&(i, &p)| i != PAD && i != SOS && !(i == UNK && copy_mass > 0.0) && p > 0.0)
            .map(|(i, &p)| (i, p.ln()))
            .collect()
    }

    /// Argmax decoding under the same candidate rules as beam search.
    pub fn greedy_decode(&self, inst: &Instance, max_len: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, inst, &mut None)?;
        let ext = inst.ext_size(self.config.vocab_size);
        let mut state = self.initial_state(&mut tape, enc.answer)?;
        let mut prev = SOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let step = self.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &state, prev)?;
            let best = self
                .candidates(&tape, &step)
                .into_iter()
                .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                    Some(a) if a.1 >= c.1 => Some(a),
                    _ => Some(c),
                });
            let Some((tok, _)) = best else { break };
            out.push(tok);
            state = step.state;
            prev = tok;
            if tok == EOS {
                break;
            }
        }
        Ok(out)
    }

    /// Length-normalized beam search. Returns extended ids of the best
    /// hypothesis, EOS included when it was produced.
    pub fn beam_search(&self, inst: &Instance, beam: usize, max_len: usize) -> Result<Vec<usize>> {
        if beam == 0 {
            return Err(ModelError::ZeroBeam);
        }
        let mut tape = Tape::with_params(&self.params);
        let enc = self.encode(&mut tape, inst, &mut None)?;
        let ext = inst.ext_size(self.config.vocab_size);
        let init = self.initial_state(&mut tape, enc.answer)?;

        struct Hyp {
            tokens: Vec<usize>,
            logp: f64,
            state: DecoderState,
            finished: bool,
        }
        let score = |h: &Hyp| if h.tokens.is_empty() { 0.0 } else { h.logp / h.tokens.len() as f64 };
        let mut hyps = vec![Hyp {
            tokens: Vec::new(),
            logp: 0.0,
            state: init,
            finished: false,
        }];
        for step in 0..max_len {
            if hyps.iter().all(|h| h.finished) {
                break;
            }
            let mut next: Vec<Hyp> = Vec::new();
            for h in hyps {
                if h.finished {
                    next.push(h);
                    continue;
                }
                let prev = h.tokens.last().copied().unwrap_or(SOS);
                let out = self.decoder_step(&mut tape, &enc, &inst.passage_ext, ext, &h.state, prev)?;
                let mut cands = self.candidates(&tape, &out);
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                for (tok, lp) in cands.into_iter().take(beam) {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    next.push(Hyp {
                        finished: tok == EOS || step + 1 == max_len,
                        tokens,
                        logp: h.logp + lp,
                        state: out.state.clone(),
                    });
                }
            }
            next.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| a.tokens.cmp(&b.tokens)));
            next.truncate(beam);
            hyps = next;
        }
        let best = hyps
            .into_iter()
            .reduce(|a, b| {
                let better = match (a.finished, b.finished) {
                    (true, false) => false,
                    (false, true) => true,
                    _ => score(&b) > score(&a),
                };
                if better {
                    b
                } else {
                    a
                }
            })
            .map(|h| h.tokens)
            .unwrap_or_default();
        Ok(best)
    }
}

/// Draws a fresh random generator state for dropout and shuffling.
pub fn seeded_rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

/// Fisher-Yates shuffle of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ModelRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Copies vectors from a `word v1 ... vD` text file into the embedding
/// rows of known words. Returns how many rows were set.
pub fn load_word_vectors(model: &mut Model, vocab: &Vocabulary, text: &str) -> Result<usize> {
    let h = model.config.hidden;
    let id = model.embedding_id();
    let mut set = 0;
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ModelError::Pretrained(format!("line {}: {e}", lineno + 1)))?;
        // A leading "count dim" line is common in this format.
        if lineno == 0 && values.len() == 1 {
            continue;
        }
        if values.len() != h {
            return Err(ModelError::Pretrained(format!(
                "line {}: {} values for hidden size {h}",
                lineno + 1,
                values.len()
            )));
        }
        if let Some(row) = vocab.get(word) {
            let table = model.params.get_mut(id);
            table.data_mut()[row * h..(row + 1) * h].copy_from_slice(&values);
            set += 1;
        }
    }
    Ok(set)
}

#[derive(Deserialize)]
struct VectorHeader {
    dim: usize,
}

#[derive(Deserialize)]
struct VectorRecord {
    passage_id: String,
    vectors: Vec<Vec<f64>>,
}

/// Reads per-passage token vectors: a `{"dim": D}` header line followed by
/// `{"passage_id": ..., "vectors": [[...], ...]}` lines.
pub fn read_token_vectors(text: &str) -> Result<(usize, HashMap<String, Tensor>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| ModelError::Pretrained("missing header line".into()))?;
    let VectorHeader { dim } =
        serde_json::from_str(header).map_err(|e| ModelError::Pretrained(format!("header: {e}")))?;
    let mut out = HashMap::new();
    for line in lines {
        let rec: VectorRecord = serde_json::from_str(line).map_err(|e| ModelError::Pretrained(e.to_string()))?;
        if let Some(bad) = rec.vectors.iter().find(|v| v.len() != dim) {
            return Err(ModelError::Pretrained(format!(
                "{}: vector of length {} for dim {dim}",
                rec.passage_id,
                bad.len()
            )));
        }
        let t = Tensor::from_rows(&rec.vectors)?;
        out.insert(rec.passage_id, t);
    }
    Ok((dim, out))
}
