//! Binary shard layout, all integers little-endian:
//!
//! ```text
//! header : "VLMSHARD" | u32 version | [u8; 32] vocab hash | [u8; 32] geometry hash
//! record : u32 payload length | payload
//! payload: u32 len | len x u32 tokens | len x u8 modality | len x u8 loss
//!          | u32 slots | slots x (u32 start, u32 length, u32 id bytes, id)
//!          | u8 stage
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{ImageSlot, Modality, PackedSample, SlotGeometry, StageTag, Tokenizer};
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 8] = b"VLMSHARD";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8 + 4 + 32 + 32;

pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    buf: Vec<u8>,
    records: usize,
}

impl ShardWriter {
    pub fn create(path: &Path, tok: &Tokenizer, geometry: &SlotGeometry) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut header = Vec::with_capacity(HEADER_LEN as usize);
        header.extend_from_slice(SHARD_MAGIC);
        header.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        header.extend_from_slice(&tok.vocab_hash());
        header.extend_from_slice(&geometry.hash());
        out.write_all(&header).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
            buf: Vec::new(),
            records: 0,
        })
    }

    pub fn write(&mut self, s: &PackedSample) -> Result<()> {
        let b = &mut self.buf;
        b.clear();
        put_u32(b, s.len())?;
        for &t in &s.tokens {
            b.extend_from_slice(&t.to_le_bytes());
        }
        b.extend(s.modality.iter().map(|&m| m as u8));
        b.extend(s.loss_mask.iter().map(|&m| u8::from(m)));
        put_u32(b, s.image_slots.len())?;
        for slot in &s.image_slots {
            put_u32(b, slot.start)?;
            put_u32(b, slot.length)?;
            put_u32(b, slot.image_id.len())?;
            b.extend_from_slice(slot.image_id.as_bytes());
        }
        b.push(s.stage as u8);
        let len = u32::try_from(b.len()).map_err(|_| Error::Overflow("record exceeds 4 GiB".into()))?;
        self.out
            .write_all(&len.to_le_bytes())
            .and_then(|_| self.out.write_all(b))
            .map_err(|e| Error::io(&self.path, e))?;
        self.records += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.records)
    }
}

fn put_u32(b: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Overflow(format!("{v} does not fit in u32")))?;
    b.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Streaming shard reader. Construction verifies the header against the
/// expected tokenizer and geometry and refuses mismatches.
pub struct ShardReader {
    input: BufReader<File>,
    offset: u64,
    failed: bool,
}

impl ShardReader {
    pub fn open(path: &Path, tok: &Tokenizer, geometry: &SlotGeometry) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut header = [0u8; HEADER_LEN as usize];
        read_full(&mut input, &mut header, 0, "shard header")?;
        if &header[..8] != SHARD_MAGIC {
            return Err(Error::Incompatible(format!("{} is not a shard", path.display())));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes"));
        if version != SHARD_VERSION {
            return Err(Error::Incompatible(format!("shard version {version}, expected {SHARD_VERSION}")));
        }
        if header[12..44] != tok.vocab_hash() {
            return Err(Error::Incompatible("shard vocabulary hash does not match the tokenizer".into()));
        }
        if header[44..76] != geometry.hash() {
            return Err(Error::Incompatible("shard slot geometry does not match the config".into()));
        }
        Ok(Self {
            input,
            offset: HEADER_LEN,
            failed: false,
        })
    }

    fn read_record(&mut self) -> Result<Option<PackedSample>> {
        let mut len = [0u8; 4];
        let got = read_some(&mut self.input, &mut len).map_err(|e| Error::Corrupt {
            offset: self.offset,
            message: e.to_string(),
        })?;
        if got == 0 {
            return Ok(None);
        }
        if got < 4 {
            return Err(Error::Corrupt {
                offset: self.offset + got as u64,
                message: "truncated record length".into(),
            });
        }
        let start = self.offset + 4;
        let mut payload = vec![0u8; u32::from_le_bytes(len) as usize];
        read_full(&mut self.input, &mut payload, start, "truncated record")?;
        let sample = decode_payload(&payload, start)?;
        self.offset = start + payload.len() as u64;
        Ok(Some(sample))
    }
}

impl Iterator for ShardReader {
    type Item = Result<PackedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let r = self.read_record().transpose();
        if matches!(r, Some(Err(_))) {
            self.failed = true;
        }
        r
    }
}

fn read_some(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

fn read_full(r: &mut impl Read, buf: &mut [u8], offset: u64, what: &str) -> Result<()> {
    let got = read_some(r, buf).map_err(|e| Error::Corrupt {
        offset,
        message: e.to_string(),
    })?;
    if got < buf.len() {
        return Err(Error::Corrupt {
            offset: offset + got as u64,
            message: format!("{what}: expected {} bytes, found {got}", buf.len()),
        });
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt {
                offset: self.base + self.pos as u64,
                message: format!("record payload ends early (needed {n} more bytes)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::Corrupt {
            offset: self.base + self.pos as u64,
            message: message.into(),
        }
    }
}

fn decode_payload(buf: &[u8], base: u64) -> Result<PackedSample> {
    let mut c = Cursor { buf, pos: 0, base };
    let n = c.u32()? as usize;
    let mut tokens = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(c.u32()?);
    }
    let modality = c
        .take(n)?
        .iter()
        .map(|&b| match b {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Image),
            other => Err(other),
        })
        .collect::<std::result::Result<Vec<_>, u8>>()
        .map_err(|b| c.corrupt(format!("bad modality byte {b}")))?;
    let loss_mask = c.take(n)?.iter().map(|&b| b != 0).collect();
    let slots = c.u32()? as usize;
    let mut image_slots = Vec::with_capacity(slots.min(n));
    for _ in 0..slots {
        let start = c.u32()? as usize;
        let length = c.u32()? as usize;
        let id_len = c.u32()? as usize;
        let id = c.take(id_len)?;
        let image_id = String::from_utf8(id.to_vec()).map_err(|_| c.corrupt("image id is not UTF-8"))?;
        image_slots.push(ImageSlot {
            start,
            length,
            image_id,
        });
    }
    let stage = match c.u8()? {
        0 => StageTag::Pretrain,
        1 => StageTag::Sft,
        other => return Err(c.corrupt(format!("bad stage tag {other}"))),
    };
    if c.pos != buf.len() {
        return Err(c.corrupt("trailing bytes in record"));
    }
    Ok(PackedSample {
        tokens,
        modality,
        loss_mask,
        image_slots,
        stage,
    })
}

pub fn write_shard<'a>(
    samples: impl IntoIterator<Item = &'a PackedSample>,
    path: &Path,
    tok: &Tokenizer,
    geometry: &SlotGeometry,
) -> Result<usize> {
    let mut w = ShardWriter::create(path, tok, geometry)?;
    for s in samples {
        w.write(s)?;
    }
    w.finish()
}

pub fn read_shard(path: &Path, tok: &Tokenizer, geometry: &SlotGeometry) -> Result<Vec<PackedSample>> {
    ShardReader::open(path, tok, geometry)?.collect()
}
