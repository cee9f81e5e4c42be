//! Checkpoint container: `SPCK`, version (u32), JSON header length (u64),
//! the JSON header, then the flat parameter payload as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header<M> {
    kind: String,
    payload_len: usize,
    metadata: M,
}

pub fn write<M: Serialize>(mut w: impl Write, kind: &str, metadata: &M, payload: &[f64]) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        kind: kind.to_owned(),
        payload_len: payload.len(),
        metadata,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(mut r: impl Read, kind: &str) -> Result<(M, Vec<f64>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version} is not supported")));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l)?;
    let mut header = vec![0u8; u64::from_le_bytes(l) as usize];
    r.read_exact(&mut header)?;
    let header: Header<M> = serde_json::from_slice(&header)?;
    if header.kind != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let mut bytes = vec![0u8; header.payload_len * 8];
    r.read_exact(&mut bytes)?;
    let payload = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((header.metadata, payload))
}

pub fn save<M: Serialize>(path: impl AsRef<Path>, kind: &str, metadata: &M, payload: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write(&mut w, kind, metadata, payload)?;
    w.flush()?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(M, Vec<f64>)> {
    let f = std::fs::File::open(path)?;
    read(std::io::BufReader::new(f), kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let payload = vec![1.0, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0];
        let mut buf = Vec::new();
        write(&mut buf, "toy", &vec![3u32, 4], &payload).unwrap();
        let (meta, back): (Vec<u32>, _) = read(&buf[..], "toy").unwrap();
        assert_eq!(meta, vec![3, 4]);
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(read::<Vec<u32>>(&buf[..], "other").is_err());
    }
}
