use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ActivationRecord, ActivationSet};
use crate::corpus::{Polarity, TraitId};
use crate::{Error, Result};

pub const ACTV_MAGIC: [u8; 4] = *b"ACTV";
pub const ACTV_VERSION: u32 = 1;

const FIXED_HEADER: usize = 4 + 4 + 4 + 4 + 8 + 2;
const RECORD_PREFIX: usize = 8 + 1 + 1 + 2 + 4;

/// Header size for a trait label of `label_len` bytes, padded to 32.
pub fn header_len(label_len: usize) -> usize {
    (FIXED_HEADER + label_len).div_ceil(32) * 32
}

/// Exact container size for a set.
pub fn file_size(label_len: usize, records: usize, d: usize) -> u64 {
    header_len(label_len) as u64 + records as u64 * (RECORD_PREFIX + 4 * d) as u64
}

pub fn encode_set<W: Write>(set: &ActivationSet, mut w: W) -> Result<u64> {
    let label = set.trait_id().label().as_bytes();
    if label.len() > u16::MAX as usize {
        return Err(Error::InvalidSet("trait label too long".into()));
    }
    for (i, r) in set.records().iter().enumerate() {
        if r.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { record: i });
        }
    }
    let io = |e| Error::io("<actv stream>", e);
    let hlen = header_len(label.len());
    let mut header = Vec::with_capacity(hlen);
    header.extend_from_slice(&ACTV_MAGIC);
    header.extend_from_slice(&ACTV_VERSION.to_le_bytes());
    header.extend_from_slice(&(set.d() as u32).to_le_bytes());
    header.extend_from_slice(&(set.n_layers() as u32).to_le_bytes());
    header.extend_from_slice(&(set.records().len() as u64).to_le_bytes());
    header.extend_from_slice(&(label.len() as u16).to_le_bytes());
    header.extend_from_slice(label);
    header.resize(hlen, 0);
    w.write_all(&header).map_err(io)?;

    let mut buf = Vec::with_capacity(RECORD_PREFIX + 4 * set.d());
    for r in set.records() {
        buf.clear();
        buf.extend_from_slice(&r.pair_id.to_le_bytes());
        buf.push(r.polarity.as_i8() as u8);
        buf.push(0);
        buf.extend_from_slice(&r.layer.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for x in &r.vector {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(file_size(label.len(), set.records().len(), set.d()))
}

/// Read as many bytes as possible; returns the count actually read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

pub fn decode_set<R: Read>(mut r: R) -> Result<ActivationSet> {
    let io = |e| Error::io("<actv stream>", e);
    let mut fixed = [0u8; FIXED_HEADER];
    let got = read_full(&mut r, &mut fixed).map_err(io)?;
    let mut magic = [0u8; 4];
    magic[..got.min(4)].copy_from_slice(&fixed[..got.min(4)]);
    if got < 4 || magic != ACTV_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: ACTV_MAGIC,
        });
    }
    if got < 8 {
        return Err(Error::TruncatedHeader);
    }
    let version = le_u32(&fixed[4..8]);
    if version != ACTV_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    if got < FIXED_HEADER {
        return Err(Error::TruncatedHeader);
    }
    let d = le_u32(&fixed[8..12]) as usize;
    let n_layers = le_u32(&fixed[12..16]) as usize;
    let count = u64::from_le_bytes(fixed[16..24].try_into().expect("8 bytes"));
    let label_len = u16::from_le_bytes([fixed[24], fixed[25]]) as usize;

    let mut rest = vec![0u8; header_len(label_len) - FIXED_HEADER];
    if read_full(&mut r, &mut rest).map_err(io)? < rest.len() {
        return Err(Error::TruncatedHeader);
    }
    let label = std::str::from_utf8(&rest[..label_len])
        .map_err(|_| Error::Malformed("trait label is not UTF-8".into()))?;
    if rest[label_len..].iter().any(|&b| b != 0) {
        return Err(Error::Malformed("non-zero header padding".into()));
    }
    let trait_id: TraitId = label.parse()?;
    if d == 0 {
        return Err(Error::Malformed("d = 0".into()));
    }

    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut buf = vec![0u8; RECORD_PREFIX + 4 * d];
    for index in 0..count {
        if read_full(&mut r, &mut buf).map_err(io)? < buf.len() {
            return Err(Error::Truncated { record: index });
        }
        let pair_id = u64::from_le_bytes(buf[0..8].try_into().expect("8 bytes"));
        let polarity = Polarity::from_i8(buf[8] as i8).ok_or_else(|| {
            Error::Malformed(format!("record {index}: polarity byte {}", buf[8] as i8))
        })?;
        if buf[9] != 0 || le_u32(&buf[12..16]) != 0 {
            return Err(Error::Malformed(format!("record {index}: reserved bytes set")));
        }
        let layer = u16::from_le_bytes([buf[10], buf[11]]);
        let vector = buf[RECORD_PREFIX..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(ActivationRecord {
            pair_id,
            polarity,
            layer,
            vector,
        });
    }
    let mut probe = [0u8; 1];
    if read_full(&mut r, &mut probe).map_err(io)? != 0 {
        return Err(Error::Malformed("trailing bytes after last record".into()));
    }
    ActivationSet::new(trait_id, d, n_layers, records, String::new())
}

pub fn write_set(set: &ActivationSet, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    super::ensure_parent(path)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    encode_set(set, BufWriter::new(f)).map_err(|e| relabel(e, path))
}

pub fn read_set(path: impl AsRef<Path>) -> Result<ActivationSet> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut set = decode_set(BufReader::new(f)).map_err(|e| relabel(e, path))?;
    set.source = format!("file:{}", path.display());
    Ok(set)
}

/// Like [`read_set`], but fails with [`Error::DimensionMismatch`] unless the
/// container's `d` equals `expected_d`.
pub fn read_set_with_dim(path: impl AsRef<Path>, expected_d: usize) -> Result<ActivationSet> {
    let set = read_set(path)?;
    if set.d() != expected_d {
        return Err(Error::DimensionMismatch {
            expected: expected_d,
            found: set.d(),
        });
    }
    Ok(set)
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
