//! Binary cache of tokenized history/response pairs.
//!
//! Little-endian layout: 8-byte magic, `u32` version, `u64` pair count, then
//! per pair: dialogue id, `u32` turn index, `u32` history length, each
//! history utterance, the response. Strings and token lists are `u32`
//! length-prefixed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{HistoryResponsePair, Utterance};
use crate::error::{Error, Result};

pub const PAIR_CACHE_MAGIC: &[u8; 8] = b"REDPAIRS";
pub const PAIR_CACHE_VERSION: u32 = 1;

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_utt(w: &mut impl Write, u: &Utterance) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(u.tokens.len() as u32)?;
    for &t in &u.tokens {
        w.write_u32::<LittleEndian>(t)?;
    }
    write_str(w, &u.raw)
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn read_utt(r: &mut impl Read) -> std::io::Result<Utterance> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let tokens = (0..n)
        .map(|_| r.read_u32::<LittleEndian>())
        .collect::<std::io::Result<_>>()?;
    Ok(Utterance {
        tokens,
        raw: read_str(r)?,
    })
}

pub fn write_pair_cache(path: &Path, pairs: &[HistoryResponsePair]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    (|| -> std::io::Result<()> {
        w.write_all(PAIR_CACHE_MAGIC)?;
        w.write_u32::<LittleEndian>(PAIR_CACHE_VERSION)?;
        w.write_u64::<LittleEndian>(pairs.len() as u64)?;
        for p in pairs {
            write_str(&mut w, &p.dialogue_id)?;
            w.write_u32::<LittleEndian>(p.turn_index as u32)?;
            w.write_u32::<LittleEndian>(p.history.len() as u32)?;
            for u in &p.history {
                write_utt(&mut w, u)?;
            }
            write_utt(&mut w, &p.response)?;
        }
        w.flush()
    })()
    .map_err(io)
}

pub fn read_pair_cache(path: &Path) -> Result<Vec<HistoryResponsePair>> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != PAIR_CACHE_MAGIC {
        return Err(Error::Data(format!("{}: not a pair cache", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != PAIR_CACHE_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported cache version {version}",
            path.display()
        )));
    }
    let n = r.read_u64::<LittleEndian>().map_err(io)?;
    (0..n)
        .map(|_| -> std::io::Result<HistoryResponsePair> {
            let dialogue_id = read_str(&mut r)?;
            let turn_index = r.read_u32::<LittleEndian>()? as usize;
            let m = r.read_u32::<LittleEndian>()? as usize;
            let history = (0..m)
                .map(|_| read_utt(&mut r))
                .collect::<std::io::Result<_>>()?;
            let response = read_utt(&mut r)?;
            Ok(HistoryResponsePair {
                history,
                response,
                dialogue_id,
                turn_index,
            })
        })
        .collect::<std::io::Result<_>>()
        .map_err(io)
}
