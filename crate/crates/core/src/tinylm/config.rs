use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{config, Result};

/// Shape of a decoder-only transformer over byte tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub context_length: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            layers: 2,
            heads: 2,
            embed_dim: 64,
            context_length: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=256).contains(&self.vocab) {
            return config(format!("vocab must be in 2..=256 (byte tokens), got {}", self.vocab));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.context_length < 2 {
            return config("context_length must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }

    /// Digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("plain struct").as_bytes())
    }
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub d: usize,
    pub vocab: usize,
    pub context: usize,
    pub wte: usize,
    pub wpe: usize,
    pub bos: usize,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> usize {
        let at = self.0;
        self.0 += n;
        at
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.embed_dim;
        let v = cfg.vocab;
        let mut c = Cursor(0);
        let wte = c.take(v * d);
        let wpe = c.take(cfg.context_length * d);
        let bos = c.take(d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockLayout {
                ln1_g: c.take(d),
                ln1_b: c.take(d),
                qkv_w: c.take(d * 3 * d),
                qkv_b: c.take(3 * d),
                proj_w: c.take(d * d),
                proj_b: c.take(d),
                ln2_g: c.take(d),
                ln2_b: c.take(d),
                fc_w: c.take(d * 4 * d),
                fc_b: c.take(4 * d),
                out_w: c.take(4 * d * d),
                out_b: c.take(d),
            })
            .collect();
        let lnf_g = c.take(d);
        let lnf_b = c.take(d);
        let head_w = c.take(d * v);
        let head_b = c.take(v);
        Self {
            d,
            vocab: v,
            context: cfg.context_length,
            wte,
            wpe,
            bos,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total: c.0,
        }
    }

    /// Ranges holding matrices and embeddings, the tensors that receive
    /// decoupled weight decay. Biases and norm gains do not.
    pub fn decayed_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let d = self.d;
        let mut out = vec![
            self.wte..self.wte + self.vocab * d,
            self.wpe..self.wpe + self.context * d,
        ];
        for b in &self.blocks {
            out.push(b.qkv_w..b.qkv_w + 3 * d * d);
            out.push(b.proj_w..b.proj_w + d * d);
            out.push(b.fc_w..b.fc_w + 4 * d * d);
            out.push(b.out_w..b.out_w + 4 * d * d);
        }
        out.push(self.head_w..self.head_w + d * self.vocab);
        out
    }
}
