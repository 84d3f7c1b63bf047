//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `PRQACKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter tensor in header order followed by the embedding matrix, all as
//! little-endian `f64`. Values round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, PairModel};
use crate::text::{EmbeddingTable, Vocabulary};

pub const MAGIC: &[u8; 8] = b"PRQACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    /// Tokens from index 2 on; PAD and UNK are implied.
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
    embedding_rows: usize,
    embedding_dim: usize,
    pretrained: Vec<bool>,
    #[serde(default)]
    meta: serde_json::Value,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `model` with free-form `meta` (training provenance, epoch).
pub fn to_bytes(model: &PairModel, meta: serde_json::Value) -> Result<Vec<u8>> {
    let store = &model.params.store;
    let header = Header {
        config: model.config.clone(),
        vocab: model.vocab.learned_tokens().to_vec(),
        params: store
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        embedding_rows: model.embeddings.rows(),
        embedding_dim: model.embeddings.dim(),
        pretrained: model.embeddings.pretrained_flags().to_vec(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * (store.numel() + model.embeddings.values().len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        put_f64s(&mut out, t.values());
    }
    put_f64s(&mut out, model.embeddings.values());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Data(format!("checkpoint truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

/// Returns the model and the `meta` value stored with it.
pub fn from_bytes(bytes: &[u8]) -> Result<(PairModel, serde_json::Value)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| Error::Data("checkpoint header too large".into()))?;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;

    let mut store = ParamStore::new();
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let tensor = Tensor::new(p.shape.clone(), cur.f64s(n)?)?;
        store.insert(p.name.clone(), tensor)?;
    }
    let emb_values = cur.f64s(header.embedding_rows * header.embedding_dim)?;
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - cur.pos)));
    }
    if header.pretrained.len() != header.embedding_rows {
        return Err(Error::Data("checkpoint embedding flags do not match row count".into()));
    }
    let embeddings = EmbeddingTable::new(header.embedding_dim, emb_values, header.pretrained)?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let params = ModelParams::from_store(&header.config, store)?;
    let model = PairModel::from_parts(header.config, vocab, embeddings, params)?;
    Ok((model, header.meta))
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save(path: &Path, model: &PairModel, meta: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(PairModel, serde_json::Value)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PairModel {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden: 3,
            head_layers: [5, 4],
            max_question_len: 6,
            max_candidate_len: 6,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::from_tokens(["fits", "my", "car", "."]).unwrap();
        let mut flags = vec![false; vocab.len()];
        flags[2] = true;
        let emb = EmbeddingTable::new(4, EmbeddingTable::random(vocab.len(), 4, 9).values().to_vec(), flags).unwrap();
        PairModel::new(cfg, vocab, emb, 17).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let meta = serde_json::json!({"epoch": 3});
        let bytes = to_bytes(&m, meta.clone()).unwrap();
        let (back, back_meta) = from_bytes(&bytes).unwrap();
        assert_eq!(back_meta, meta);
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab, m.vocab);
        let bits = |t: &[f64]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.embeddings.values()), bits(m.embeddings.values()));
        assert_eq!(back.embeddings.pretrained_flags(), m.embeddings.pretrained_flags());
        for ((_, na, a), (_, nb, b)) in m.params.store.iter().zip(back.params.store.iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(a.values()), bits(b.values()));
        }
        assert_eq!(to_bytes(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = to_bytes(&model(), serde_json::Value::Null).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(from_bytes(&bad_magic).is_err());
        assert!(from_bytes(&[]).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save(&path, &m, serde_json::Value::Null).unwrap();
        let (back, _) = load(&path).unwrap();
        assert_eq!(back, m);
        assert!(!dir.path().join("model.tmp").exists());
    }
}
