//! Deterministic text-encoder stub: whitespace/punctuation tokenization into
//! a hash vocabulary, learned-but-frozen token embeddings, and a small
//! bidirectional self-attention encoder. Stands in for a pretrained language
//! encoder at desk scale; its parameters are never trained.

use ndarray::{Array2, ArrayD, IxDyn};
use terradiff_autograd::{Builder, Element, Init, ParamId, ParamStore, Tape};

use super::blocks::{attention_mask, LayerNormLayer, LinearLayer, MultiHeadAttention, TextContext};
use super::Fwd;
use crate::config::DenoiserConfig;

const PAD_ID: usize = 0;
const BOS_ID: usize = 1;
const RESERVED: usize = 2;

/// Lowercased alphanumeric runs; punctuation and whitespace separate tokens.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .split(|ch: char| !ch.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable vocabulary hashing with collision acceptance.
pub fn token_id(token: &str, vocab: usize) -> usize {
    RESERVED + (fnv1a(token) as usize) % (vocab - RESERVED)
}

/// Encoded captions: `[b, l, d_txt]` token features and the keep mask.
#[derive(Clone, Debug)]
pub struct TextEmbedding<E: Element> {
    pub tokens: ArrayD<E>,
    pub mask: Vec<Vec<bool>>,
}

impl<E: Element> TextEmbedding<E> {
    /// Enters the embedding into a graph as constants (the encoder is
    /// frozen, so no gradient path is needed).
    pub fn context(&self, tape: &Tape<E>, heads: usize) -> TextContext<E> {
        TextContext {
            tokens: tape.leaf(self.tokens.clone()),
            mask: attention_mask(&self.mask, heads),
        }
    }

    /// Tiles the batch axis by `t` (per-frame text for sequence inputs).
    pub fn repeat_per_frame(&self, t: usize) -> TextEmbedding<E> {
        let (b, l, d) = (
            self.tokens.shape()[0],
            self.tokens.shape()[1],
            self.tokens.shape()[2],
        );
        let mut tokens = ArrayD::<E>::zeros(IxDyn(&[b * t, l, d]));
        let mut mask = Vec::with_capacity(b * t);
        for bi in 0..b {
            for ti in 0..t {
                for li in 0..l {
                    for di in 0..d {
                        tokens[[bi * t + ti, li, di]] = self.tokens[[bi, li, di]];
                    }
                }
                mask.push(self.mask[bi].clone());
            }
        }
        TextEmbedding { tokens, mask }
    }
}

struct EncoderBlock {
    ln1: LayerNormLayer,
    attn: MultiHeadAttention,
    ln2: LayerNormLayer,
    ff1: LinearLayer,
    ff2: LinearLayer,
}

pub struct TextEncoder {
    token_table: ParamId,
    pos_table: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNormLayer,
    pub vocab: usize,
    pub max_len: usize,
    pub dim: usize,
    heads: usize,
}

impl TextEncoder {
    pub fn build<E: Element>(b: &mut Builder<'_, E>, cfg: &DenoiserConfig) -> Self {
        let mut s = b.scope("text");
        let token_table = s.param("token_emb", &[cfg.vocab_size, cfg.txt_dim], Init::Normal(0.02));
        let pos_table = s.param("pos_emb", &[cfg.txt_len, cfg.txt_dim], Init::Normal(0.02));
        let mut blocks = Vec::new();
        for i in 0..cfg.txt_layers {
            let mut bs = s.scope(&format!("block{i}"));
            blocks.push(EncoderBlock {
                ln1: LayerNormLayer::new(&mut bs, "ln1", cfg.txt_dim),
                attn: MultiHeadAttention::new(&mut bs, "attn", cfg.txt_dim, cfg.txt_dim, 4),
                ln2: LayerNormLayer::new(&mut bs, "ln2", cfg.txt_dim),
                ff1: LinearLayer::new(&mut bs, "ff1", cfg.txt_dim, cfg.txt_dim * 4),
                ff2: LinearLayer::new(&mut bs, "ff2", cfg.txt_dim * 4, cfg.txt_dim),
            });
        }
        let final_ln = LayerNormLayer::new(&mut s, "final_ln", cfg.txt_dim);
        TextEncoder {
            token_table,
            pos_table,
            blocks,
            final_ln,
            vocab: cfg.vocab_size,
            max_len: cfg.txt_len,
            dim: cfg.txt_dim,
            heads: 4,
        }
    }

    /// Token ids with a leading BOS, truncated/padded to `max_len`.
    pub fn ids(&self, caption: &str) -> (Vec<usize>, Vec<bool>) {
        let mut ids = vec![BOS_ID];
        for tok in tokenize(caption) {
            if ids.len() >= self.max_len {
                break;
            }
            ids.push(token_id(&tok, self.vocab));
        }
        let mut mask = vec![true; ids.len()];
        while ids.len() < self.max_len {
            ids.push(PAD_ID);
            mask.push(false);
        }
        (ids, mask)
    }

    /// Deterministic encoding; the empty caption yields the null embedding
    /// used by the guidance null branch.
    pub fn encode<E: Element>(&self, store: &ParamStore<E>, captions: &[String]) -> TextEmbedding<E> {
        let b = captions.len();
        let mut id_arr = Array2::<usize>::zeros((b, self.max_len));
        let mut mask = Vec::with_capacity(b);
        for (bi, cap) in captions.iter().enumerate() {
            let (ids, m) = self.ids(cap);
            for (li, id) in ids.into_iter().enumerate() {
                id_arr[[bi, li]] = id;
            }
            mask.push(m);
        }

        let tape = Tape::<E>::new();
        let fw = Fwd::new(&tape, store);
        let mut h = tape.embedding(fw.p(self.token_table), &id_arr);
        let pos = store.value(self.pos_table).clone();
        h = tape.add_const(h, &pos);
        let attn_mask = attention_mask::<E>(&mask, self.heads);
        for blk in &self.blocks {
            let n1 = blk.ln1.forward(&fw, h);
            let sa = blk.attn.forward(&fw, n1, n1, attn_mask.as_ref());
            h = tape.add(h, sa);
            let n2 = blk.ln2.forward(&fw, h);
            let ff = blk.ff2.forward(&fw, tape.silu(blk.ff1.forward(&fw, n2)));
            h = tape.add(h, ff);
        }
        h = self.final_ln.forward(&fw, h);
        TextEmbedding {
            tokens: tape.value(h),
            mask,
        }
    }
}
