//! Decoder-only causal transformer over [BEV | prompt | answer | queries].
//!
//! World queries sit strictly last, so causal attention lets them read the
//! whole sequence while text logits stay bitwise independent of them.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::nn::{Init, Linear, Norm};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

use super::vocab::{Vocabulary, BOS, EOS, SEP};

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("sequence of {0} positions exceeds the configured maximum {1}")]
    Overlength(usize, usize),
}

/// Segment spans of one assembled sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub l_bev: usize,
    pub prompt_len: usize,
    pub answer_len: usize,
    pub n_queries: usize,
}

impl SequenceLayout {
    pub fn total(&self) -> usize {
        self.l_bev + self.prompt_len + self.answer_len + self.n_queries
    }

    pub fn text_len(&self) -> usize {
        self.prompt_len + self.answer_len
    }

    pub fn text_start(&self) -> usize {
        self.l_bev
    }

    pub fn query_start(&self) -> usize {
        self.l_bev + self.text_len()
    }
}

/// Token ids for the text segments: prompt = [BOS, words..., SEP],
/// answer = [words..., EOS].
pub fn text_tokens(vocab: &Vocabulary, prompt: &str, answer: &str) -> Result<(Vec<usize>, Vec<usize>), super::vocab::VocabError> {
    let mut p = vec![BOS];
    p.extend(vocab.encode(prompt)?);
    p.push(SEP);
    let mut a = vocab.encode(answer)?;
    a.push(EOS);
    Ok((p, a))
}

struct Block {
    ln1: Norm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

pub struct Transformer {
    pub vocab_size: usize,
    pub width: usize,
    pub heads: usize,
    pub max_seq: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: Norm,
    lm_head: Linear,
}

pub struct ForwardOut {
    /// Logits at text positions only: [prompt_len + answer_len, vocab].
    pub text_logits: Var,
    /// Final hidden states for every position: [total, width].
    pub hidden: Var,
}

impl Transformer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        cfg: &ModelConfig,
        vocab_size: usize,
    ) -> Self {
        let c = cfg.width;
        let tok_emb = store.randn("seq.tok_emb", &[vocab_size, c], 0.02, rng);
        let pos_emb = store.randn("seq.pos_emb", &[cfg.max_seq, c], 0.02, rng);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("seq.block{l}");
                Block {
                    ln1: Norm::new(store, &format!("{p}.ln1"), c),
                    wq: Linear::new(store, rng, &format!("{p}.attn.q"), c, c, Init::Small),
                    wk: Linear::new(store, rng, &format!("{p}.attn.k"), c, c, Init::Small),
                    wv: Linear::new(store, rng, &format!("{p}.attn.v"), c, c, Init::Small),
                    wo: Linear::new(store, rng, &format!("{p}.attn.o"), c, c, Init::Small),
                    ln2: Norm::new(store, &format!("{p}.ln2"), c),
                    fc1: Linear::new(store, rng, &format!("{p}.ffn.fc1"), c, 4 * c, Init::Small),
                    fc2: Linear::new(store, rng, &format!("{p}.ffn.fc2"), 4 * c, c, Init::Small),
                }
            })
            .collect();
        let ln_f = Norm::new(store, "seq.ln_f", c);
        let lm_head = Linear::new(store, rng, "seq.lm_head", c, vocab_size, Init::Small);
        Transformer {
            vocab_size,
            width: c,
            heads: cfg.heads,
            max_seq: cfg.max_seq,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            lm_head,
        }
    }

    /// Token embeddings for a list of vocabulary indices: [n, width].
    pub fn embed_tokens<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, tokens: &[usize]) -> Var {
        let table = store.var(g, self.tok_emb);
        g.gather_rows(table, tokens)
    }

    fn attention<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, block: &Block, x: Var) -> Var {
        let dh = self.width / self.heads;
        let q = block.wq.forward(g, store, x);
        let k = block.wk.forward(g, store, x);
        let v = block.wv.forward(g, store, x);
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for hidx in 0..self.heads {
            let qh = g.slice_cols(q, hidx * dh, dh);
            let kh = g.slice_cols(k, hidx * dh, dh);
            let vh = g.slice_cols(v, hidx * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let probs = g.causal_softmax(scores);
            head_outs.push(g.matmul(probs, vh));
        }
        let cat = g.concat_cols(&head_outs);
        block.wo.forward(g, store, cat)
    }

    /// Run the stack over an embedded sequence. `embedded` must already hold
    /// the concatenated [BEV | prompt | answer | queries] inputs.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        embedded: Var,
        layout: &SequenceLayout,
    ) -> Result<ForwardOut, SeqError> {
        let total = layout.total();
        assert_eq!(g.value(embedded).shape(), &[total, self.width], "embedded sequence shape");
        if total > self.max_seq {
            return Err(SeqError::Overlength(total, self.max_seq));
        }
        let pos_table = store.var(g, self.pos_emb);
        let positions: Vec<usize> = (0..total).collect();
        let pos = g.gather_rows(pos_table, &positions);
        let mut x = g.add(embedded, pos);
        for block in &self.blocks {
            let normed = block.ln1.forward(g, store, x);
            let attn = self.attention(g, store, block, normed);
            x = g.add(x, attn);
            let normed = block.ln2.forward(g, store, x);
            let h = block.fc1.forward(g, store, normed);
            let h = g.gelu(h);
            let h = block.fc2.forward(g, store, h);
            x = g.add(x, h);
        }
        let hidden = self.ln_f.forward(g, store, x);
        let text = g.slice_rows(hidden, layout.text_start(), layout.text_len());
        let text_logits = self.lm_head.forward(g, store, text);
        Ok(ForwardOut { text_logits, hidden })
    }
}

/// Mean next-token NLL over masked positions; `true` in the returned flag
/// warns that the mask was empty (loss defined as zero).
pub fn ntp_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> (Var, bool) {
    if mask.iter().all(|&b| !b) {
        return (g.constant(Tensor::scalar(S::zero())), true);
    }
    (g.cross_entropy(logits, targets, mask), false)
}

/// Next-token targets/mask for the text span: position i predicts text token
/// i+1, supervised where that target lies in the answer segment.
pub fn ntp_targets(prompt: &[usize], answer: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let text: Vec<usize> = prompt.iter().chain(answer.iter()).copied().collect();
    let n = text.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        targets[i] = text[i + 1];
        mask[i] = i + 1 >= prompt.len();
    }
    (targets, mask)
}

/// Deterministic argmax decoding until EOS or `max_new` tokens.
///
/// The BEV token values are fixed inputs here; each step rebuilds a no-grad
/// graph over [BEV | prompt | generated-so-far] with no query segment.
pub fn greedy_decode<S: Scalar>(
    model: &Transformer,
    store: &ParamStore<S>,
    bev_tokens: &Tensor<S>,
    vocab: &Vocabulary,
    prompt: &str,
    max_new: usize,
) -> Result<String, super::vocab::VocabError> {
    let mut prompt_tokens = vec![BOS];
    prompt_tokens.extend(vocab.encode(prompt)?);
    prompt_tokens.push(SEP);
    let l_bev = bev_tokens.shape()[0];
    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..max_new {
        let mut g = Graph::no_grad();
        let bev = g.constant(bev_tokens.clone());
        let mut tokens = prompt_tokens.clone();
        tokens.extend(&generated);
        let text = model.embed_tokens(&mut g, store, &tokens);
        let embedded = g.concat_rows(&[bev, text]);
        let layout = SequenceLayout {
            l_bev,
            prompt_len: prompt_tokens.len(),
            answer_len: generated.len(),
            n_queries: 0,
        };
        let out = model.forward(&mut g, store, embedded, &layout).expect("decode within max_seq");
        let logits = g.value(out.text_logits);
        let vlen = model.vocab_size;
        let last = &logits.data()[(layout.text_len() - 1) * vlen..layout.text_len() * vlen];
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        if best == EOS {
            break;
        }
        generated.push(best);
    }
    vocab.decode(&generated)
}
