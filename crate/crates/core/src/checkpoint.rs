//! `.srnn` checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "SRNN" | version | src vocab sha256 (32 bytes) | tgt vocab sha256 (32 bytes)
//! | record length | record ("key=value\n" lines, UTF-8)
//! | parameter count | per parameter: name length, name, rank, dims…, f32 values
//! ```
//!
//! Values are stored at 32-bit precision and widened back to `f64` on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{ModelDims, Seq2Seq};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRNN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub src_vocab_hash: [u8; 32],
    pub tgt_vocab_hash: [u8; 32],
    pub step: u64,
    /// Dev BLEU at the time of saving, if an evaluation had happened.
    pub dev_bleu: Option<f64>,
}

impl CheckpointMeta {
    pub fn for_vocabs(src: &Vocabulary, tgt: &Vocabulary) -> Self {
        CheckpointMeta {
            src_vocab_hash: src.content_hash(),
            tgt_vocab_hash: tgt.content_hash(),
            step: 0,
            dev_bleu: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    /// Refuses vocabularies whose content differs from the ones trained with.
    pub fn check_vocabs(&self, path: &Path, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
        for (side, want, got) in [
            ("source", self.meta.src_vocab_hash, src.content_hash()),
            ("target", self.meta.tgt_vocab_hash, tgt.content_hash()),
        ] {
            if want != got {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    message: format!(
                        "{side} vocabulary mismatch: checkpoint expects sha256 {}, got {}",
                        hex(&want),
                        hex(&got)
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<Seq2Seq> {
        Seq2Seq::from_store(self.dims, self.store)
    }
}

pub fn save_checkpoint(path: &Path, model: &Seq2Seq, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, meta)?;
    // write-then-rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("srnn.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode(model: &Seq2Seq, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let dims = model.dims();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&meta.src_vocab_hash);
    out.extend_from_slice(&meta.tgt_vocab_hash);
    let mut record = format!(
        "src_vocab={}\ntgt_vocab={}\nembed_dim={}\nhidden_dim={}\nstep={}\n",
        dims.src_vocab, dims.tgt_vocab, dims.embed_dim, dims.hidden_dim, meta.step
    );
    if let Some(b) = meta.dev_bleu {
        record.push_str(&format!("dev_bleu={b}\n"));
    }
    push_u32(&mut out, record.len())?;
    out.extend_from_slice(record.as_bytes());
    let store = model.store();
    push_u32(&mut out, store.len())?;
    for (_, p) in store.iter() {
        push_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        push_u32(&mut out, 2)?;
        push_u32(&mut out, p.value.rows())?;
        push_u32(&mut out, p.value.cols())?;
        for &v in p.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated while reading {what} at byte {}", self.pos)),
        }
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

/// Loads and additionally checks the parameter shapes against `dims`.
pub fn load_checkpoint_for(path: &Path, dims: ModelDims) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.dims != dims {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("checkpoint dims {:?} do not match configured {:?}", ck.dims, dims),
        });
    }
    Ok(ck)
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
    }
    let src_vocab_hash: [u8; 32] = r.take(32, "source vocab hash")?.try_into().unwrap();
    let tgt_vocab_hash: [u8; 32] = r.take(32, "target vocab hash")?.try_into().unwrap();
    let rec_len = r.u32("record length")?;
    let record = std::str::from_utf8(r.take(rec_len, "hyperparameter record")?)
        .map_err(|_| "hyperparameter record is not UTF-8".to_string())?;
    let mut fields = BTreeMap::new();
    for line in record.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed record line `{line}`"))?;
        fields.insert(k, v);
    }
    let num = |k: &str| -> std::result::Result<usize, String> {
        fields
            .get(k)
            .ok_or_else(|| format!("record lacks `{k}`"))?
            .parse()
            .map_err(|_| format!("record field `{k}` is not an integer"))
    };
    let dims = ModelDims {
        src_vocab: num("src_vocab")?,
        tgt_vocab: num("tgt_vocab")?,
        embed_dim: num("embed_dim")?,
        hidden_dim: num("hidden_dim")?,
    };
    let step = num("step")? as u64;
    let dev_bleu = match fields.get("dev_bleu") {
        Some(v) => Some(v.parse().map_err(|_| "record field `dev_bleu` is not a number".to_string())?),
        None => None,
    };
    let expected = Seq2Seq::expected_shapes(dims);
    let count = r.u32("parameter count")?;
    if count != expected.len() {
        return Err(format!("{count} parameters, expected {}", expected.len()));
    }
    let mut store = ParamStore::new();
    for (name, shape) in &expected {
        let len = r.u32("name length")?;
        let got = std::str::from_utf8(r.take(len, "parameter name")?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?;
        if got != name {
            return Err(format!("expected parameter `{name}`, found `{got}`"));
        }
        let rank = r.u32("rank")?;
        if rank != 2 {
            return Err(format!("parameter `{name}` has rank {rank}, expected 2"));
        }
        let rows = r.u32("dims")?;
        let cols = r.u32("dims")?;
        if [rows, cols] != *shape {
            return Err(format!(
                "parameter `{name}` has shape {rows}×{cols}, expected {}×{}",
                shape[0], shape[1]
            ));
        }
        let raw = r.take(rows * cols * 4, "parameter values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format!("parameter `{name}` contains non-finite values"));
        }
        let t = Tensor::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
        store.insert(name.clone(), t).map_err(|e| e.to_string())?;
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    store.set_step_count(step);
    Ok(Checkpoint {
        dims,
        meta: CheckpointMeta {
            src_vocab_hash,
            tgt_vocab_hash,
            step,
            dev_bleu,
        },
        store,
    })
}
