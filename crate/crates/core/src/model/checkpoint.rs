//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "OSDCKPT\0"
//! version      u32 LE
//! meta_len     u32 LE
//! meta         meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! block_count  u32 LE
//! block*       u64 LE element count, then that many f64 LE values
//! ```
//!
//! Neural checkpoints carry five blocks (embedding, hidden weights, hidden
//! bias, output weights, output bias); grammar checkpoints carry one block
//! holding the row-major conditional table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GrammarOracle, ModelShape, NeuralDraftModel, Vocabulary};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OSDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CheckpointMeta {
    Neural {
        vocab_size: u32,
        window: usize,
        embed_dim: usize,
        hidden_dim: usize,
        seed: u64,
        creation_step: u64,
    },
    Grammar {
        vocab_size: u32,
        order: usize,
        seed: u64,
        creation_step: u64,
    },
}

impl CheckpointMeta {
    pub fn vocab_size(&self) -> u32 {
        match self {
            CheckpointMeta::Neural { vocab_size, .. } | CheckpointMeta::Grammar { vocab_size, .. } => *vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Neural { model: NeuralDraftModel, seed: u64, creation_step: u64 },
    Grammar { oracle: GrammarOracle, creation_step: u64 },
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        match self {
            Checkpoint::Neural { model, seed, creation_step } => {
                let s = model.shape();
                CheckpointMeta::Neural {
                    vocab_size: model_vocab(model).size() as u32,
                    window: s.window,
                    embed_dim: s.embed_dim,
                    hidden_dim: s.hidden_dim,
                    seed: *seed,
                    creation_step: *creation_step,
                }
            }
            Checkpoint::Grammar { oracle, creation_step } => CheckpointMeta::Grammar {
                vocab_size: crate::model::ConditionalModel::vocab(oracle).size() as u32,
                order: oracle.order(),
                seed: oracle.seed(),
                creation_step: *creation_step,
            },
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta()).expect("metadata serializes");
        let blocks: Vec<&[f64]> = match self {
            Checkpoint::Neural { model, .. } => {
                let mut rest = model.params();
                let mut out = Vec::with_capacity(5);
                for n in model.shape().block_sizes() {
                    let (head, tail) = rest.split_at(n);
                    out.push(head);
                    rest = tail;
                }
                out
            }
            Checkpoint::Grammar { oracle, .. } => vec![oracle.table()],
        };
        let payload: usize = blocks.iter().map(|b| 8 + 8 * b.len()).sum();
        let mut buf = Vec::with_capacity(20 + meta.len() + payload);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for b in blocks {
            buf.extend_from_slice(&(b.len() as u64).to_le_bytes());
            for v in b {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse { offset: 0, msg: "bad magic".into() });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse { offset: version_at, msg: format!("unsupported version {version}") });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
            .map_err(|e| Error::Parse { offset: meta_at, msg: format!("metadata: {e}") })?;
        let count_at = r.pos;
        let count = r.u32("block count")? as usize;
        let expected = match meta {
            CheckpointMeta::Neural { .. } => 5,
            CheckpointMeta::Grammar { .. } => 1,
        };
        if count != expected {
            return Err(Error::Parse { offset: count_at, msg: format!("{count} blocks, expected {expected}") });
        }
        let mut blocks = Vec::with_capacity(count);
        for i in 0..count {
            let len_at = r.pos;
            let len = r.u64("block length")?;
            let remaining = (bytes.len() - r.pos) / 8;
            if len > remaining as u64 {
                return Err(Error::Parse {
                    offset: len_at,
                    msg: format!("block {i} declares {len} values but only {remaining} remain"),
                });
            }
            let raw = r.take(len as usize * 8, "block data")?;
            blocks.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect::<Vec<_>>(),
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, msg: "trailing bytes".into() });
        }
        let body_err = |e: Error| Error::Parse { offset: count_at, msg: e.to_string() };
        match meta {
            CheckpointMeta::Neural { vocab_size, window, embed_dim, hidden_dim, seed, creation_step } => {
                let vocab = Vocabulary::new(vocab_size).map_err(body_err)?;
                let shape = ModelShape::new(&vocab, window, embed_dim, hidden_dim).map_err(body_err)?;
                let sizes = shape.block_sizes();
                for (i, (b, n)) in blocks.iter().zip(sizes).enumerate() {
                    if b.len() != n {
                        return Err(Error::Parse {
                            offset: count_at,
                            msg: format!("block {i} has {} values, shape needs {n}", b.len()),
                        });
                    }
                }
                let params = blocks.concat();
                let model = NeuralDraftModel::from_params(vocab, shape, params).map_err(body_err)?;
                Ok(Checkpoint::Neural { model, seed, creation_step })
            }
            CheckpointMeta::Grammar { vocab_size, order, seed, creation_step } => {
                let vocab = Vocabulary::new(vocab_size).map_err(body_err)?;
                let table = blocks.pop().expect("one block");
                let oracle = GrammarOracle::from_table(vocab, order, seed, table).map_err(body_err)?;
                Ok(Checkpoint::Grammar { oracle, creation_step })
            }
        }
    }

    /// The neural model, checked against the caller's vocabulary.
    pub fn into_neural(self, vocab: &Vocabulary) -> Result<NeuralDraftModel> {
        check_vocab(&self.meta(), vocab)?;
        match self {
            Checkpoint::Neural { model, .. } => Ok(model),
            Checkpoint::Grammar { .. } => Err(Error::Incompatible("expected a neural checkpoint, found a grammar".into())),
        }
    }

    /// The grammar oracle, checked against the caller's vocabulary.
    pub fn into_grammar(self, vocab: &Vocabulary) -> Result<GrammarOracle> {
        check_vocab(&self.meta(), vocab)?;
        match self {
            Checkpoint::Grammar { oracle, .. } => Ok(oracle),
            Checkpoint::Neural { .. } => Err(Error::Incompatible("expected a grammar checkpoint, found a neural model".into())),
        }
    }
}

fn model_vocab(m: &NeuralDraftModel) -> &Vocabulary {
    crate::model::ConditionalModel::vocab(m)
}

fn check_vocab(meta: &CheckpointMeta, vocab: &Vocabulary) -> Result<()> {
    if meta.vocab_size() as usize != vocab.size() {
        return Err(Error::Incompatible(format!(
            "checkpoint vocabulary has {} tokens, expected {}",
            meta.vocab_size(),
            vocab.size()
        )));
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Parse {
            offset: self.pos,
            msg: format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
