//! Flat parameter layout.
//!
//! Tensors are stored back to back in this order:
//!
//! | name                         | shape              |
//! |------------------------------|--------------------|
//! | `tok_emb`                    | vocab × d_model    |
//! | `pos_emb`                    | max_len × d_model  |
//! | `layers.{l}.ln1.gamma/beta`  | d_model            |
//! | `layers.{l}.attn.{q,k,v,o}.weight` | d_model × d_model |
//! | `layers.{l}.attn.{q,v,o}.bias`     | d_model     |
//! | `layers.{l}.ln2.gamma/beta`  | d_model            |
//! | `layers.{l}.ff1.weight/bias` | d_model × d_ff, d_ff |
//! | `layers.{l}.ff2.weight/bias` | d_ff × d_model, d_model |
//! | `head.weight/bias`           | d_model × d_model, d_model |
//!
//! Weight matrices are `in × out`, row-major, so `y = x W + b`. Keys carry no
//! bias: it shifts every score of a query row equally and cancels in the softmax.

use serde::{Deserialize, Serialize};

use super::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one transformer block's tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockOffsets {
    pub ln1_gamma: usize,
    pub ln1_beta: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gamma: usize,
    pub ln2_beta: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| -> usize {
            let spec = TensorSpec { name, shape, offset };
            let at = offset;
            offset += spec.len();
            tensors.push(spec);
            at
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_len, d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            blocks.push(BlockOffsets {
                ln1_gamma: push(p("ln1.gamma"), vec![d]),
                ln1_beta: push(p("ln1.beta"), vec![d]),
                wq: push(p("attn.q.weight"), vec![d, d]),
                bq: push(p("attn.q.bias"), vec![d]),
                wk: push(p("attn.k.weight"), vec![d, d]),
                wv: push(p("attn.v.weight"), vec![d, d]),
                bv: push(p("attn.v.bias"), vec![d]),
                wo: push(p("attn.o.weight"), vec![d, d]),
                bo: push(p("attn.o.bias"), vec![d]),
                ln2_gamma: push(p("ln2.gamma"), vec![d]),
                ln2_beta: push(p("ln2.beta"), vec![d]),
                w1: push(p("ff1.weight"), vec![d, cfg.d_ff]),
                b1: push(p("ff1.bias"), vec![cfg.d_ff]),
                w2: push(p("ff2.weight"), vec![cfg.d_ff, d]),
                b2: push(p("ff2.bias"), vec![d]),
            });
        }
        let head_w = push("head.weight".into(), vec![d, d]);
        let head_b = push("head.bias".into(), vec![d]);
        Self {
            tensors,
            tok_emb,
            pos_emb,
            blocks,
            head_w,
            head_b,
            total: offset,
        }
    }

    pub fn num_params(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_count_tiny_model() {
        let cfg = EncoderConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 4,
            ..EncoderConfig::default()
        };
        let layout = Layout::new(&cfg);
        // embeddings 11*8 + 4*8 = 120
        // block: 2 LN (2*8 each) = 32, q/k/v/o 4*64 + 3*8 = 280, ff1 8*16+16 = 144, ff2 16*8+8 = 136
        // head: 64 + 8 = 72
        assert_eq!(layout.num_params(), 120 + 32 + 280 + 144 + 136 + 72);
        let last = layout.tensors.last().unwrap();
        assert_eq!(last.offset + last.len(), layout.num_params());
        for pair in layout.tensors.windows(2) {
            assert_eq!(pair[0].offset + pair[0].len(), pair[1].offset);
        }
        assert_eq!(layout.get("layers.0.ff1.weight").unwrap().shape, vec![8, 16]);
    }
}
