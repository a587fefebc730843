//! Portable checkpoint format. All integers are `u32` and all reals `f64`,
//! little-endian; strings are a `u32` byte length followed by UTF-8.
//!
//! ```text
//! magic        8 bytes  "SIMTCKPT"
//! version      u32      1
//! src_vocab    u32
//! tgt_vocab    u32
//! enc_layers   u32
//! dec_layers   u32
//! width        u32
//! heads        u32
//! ffn          u32
//! max_len      u32
//! encoder_mode u32      0 = prefix-bidirectional, 1 = unidirectional
//! policy       string   training schedule label ("inf", "3", "3+c1/4", ...)
//! n_tensors    u32
//!   name       string
//!   rows, cols u32, u32
//!   values     rows*cols f64, row-major
//! src tokens   u32 count, then one string per id
//! tgt tokens   u32 count, then one string per id
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EncoderMode, ModelConfig, ModelParams, Tensor};
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::policy::PolicySchedule;

const MAGIC: &[u8; 8] = b"SIMTCKPT";
pub const SCHEMA_VERSION: u32 = 1;

/// Parameters plus everything needed to translate with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub train_policy: PolicySchedule,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_str(r: &mut impl Read) -> Result<String> {
    let len = get_u32(r)?;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string length {len} is implausible")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}

pub fn write_checkpoint(w: &mut impl Write, ckpt: &Checkpoint) -> Result<()> {
    let cfg = ckpt.params.config();
    w.write_all(MAGIC)?;
    put_u32(w, SCHEMA_VERSION as usize)?;
    for v in [
        cfg.src_vocab,
        cfg.tgt_vocab,
        cfg.enc_layers,
        cfg.dec_layers,
        cfg.width,
        cfg.heads,
        cfg.ffn,
        cfg.max_len,
    ] {
        put_u32(w, v)?;
    }
    put_u32(
        w,
        match cfg.encoder_mode {
            EncoderMode::PrefixBidirectional => 0,
            EncoderMode::Unidirectional => 1,
        },
    )?;
    put_str(w, &ckpt.train_policy.to_string())?;
    put_u32(w, ckpt.params.tensors().len())?;
    for t in ckpt.params.tensors() {
        put_str(w, &t.name)?;
        put_u32(w, t.value.rows())?;
        put_u32(w, t.value.cols())?;
        for v in t.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for vocab in [&ckpt.src_vocab, &ckpt.tgt_vocab] {
        put_u32(w, vocab.len())?;
        for tok in vocab.tokens() {
            put_str(w, tok)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("missing header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != SCHEMA_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported schema version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = get_u32(r)?;
    }
    let encoder_mode = match get_u32(r)? {
        0 => EncoderMode::PrefixBidirectional,
        1 => EncoderMode::Unidirectional,
        m => return Err(Error::Checkpoint(format!("unknown encoder mode {m}"))),
    };
    let config = ModelConfig {
        src_vocab: dims[0],
        tgt_vocab: dims[1],
        enc_layers: dims[2],
        dec_layers: dims[3],
        width: dims[4],
        heads: dims[5],
        ffn: dims[6],
        max_len: dims[7],
        encoder_mode,
    };
    let train_policy: PolicySchedule = get_str(r)?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{e}")))?;
    let n = get_u32(r)?;
    let mut tensors = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let name = get_str(r)?;
        let rows = get_u32(r)?;
        let cols = get_u32(r)?;
        let count = rows
            .checked_mul(cols)
            .filter(|&c| c <= 1 << 28)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is implausibly large")))?;
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated tensor `{name}`: {e}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor {
            name,
            value: Matrix::from_vec(rows, cols, data)?,
        });
    }
    let mut vocabs = Vec::with_capacity(2);
    for _ in 0..2 {
        let count = get_u32(r)?;
        let tokens = (0..count).map(|_| get_str(r)).collect::<Result<Vec<_>>>()?;
        vocabs.push(Vocab::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    let tgt_vocab = vocabs.pop().expect("two vocabularies");
    let src_vocab = vocabs.pop().expect("two vocabularies");
    if src_vocab.len() != config.src_vocab || tgt_vocab.len() != config.tgt_vocab {
        return Err(Error::Checkpoint("vocabulary sizes disagree with header".into()));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        params: ModelParams::from_tensors(config, tensors)?,
        train_policy,
        src_vocab,
        tgt_vocab,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
