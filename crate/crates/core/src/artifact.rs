//! Binary artifact container: one JSON header line, then raw little-endian
//! f64 arrays. The header carries a SHA-256 digest over the header body and
//! the payload, so any single-bit corruption is rejected on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    format: String,
    version: u32,
    digest: String,
    lengths: Vec<usize>,
    header: H,
}

#[derive(Serialize)]
struct DigestBody<'a, H> {
    format: &'a str,
    version: u32,
    lengths: &'a [usize],
    header: &'a H,
}

fn digest_of<H: Serialize>(
    format: &str,
    version: u32,
    lengths: &[usize],
    header: &H,
    payload: &[u8],
) -> Result<String> {
    let body = serde_json::to_vec(&DigestBody {
        format,
        version,
        lengths,
        header,
    })?;
    let mut h = Sha256::new();
    h.update(&body);
    h.update(payload);
    Ok(hex::encode(h.finalize()))
}

pub fn encode_f64s(arrays: &[&[f64]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(arrays.iter().map(|a| a.len() * 8).sum());
    for a in arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write<H: Serialize>(
    path: &Path,
    format: &str,
    version: u32,
    header: &H,
    arrays: &[&[f64]],
) -> Result<()> {
    let payload = encode_f64s(arrays);
    let lengths: Vec<usize> = arrays.iter().map(|a| a.len()).collect();
    let digest = digest_of(format, version, &lengths, header, &payload)?;
    let env = Envelope {
        format: format.to_string(),
        version,
        digest,
        lengths,
        header,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer(&mut f, &env)?;
    f.write_all(b"\n")?;
    f.write_all(&payload)?;
    Ok(())
}

pub fn read<H: DeserializeOwned + Serialize>(
    path: &Path,
    format: &str,
    version: u32,
) -> Result<(H, Vec<Vec<f64>>)> {
    let bytes = fs::read(path)?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header line".into()))?;
    let env: Envelope<H> = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if env.format != format {
        return Err(corrupt(format!(
            "expected format {format}, found {}",
            env.format
        )));
    }
    if env.version != version {
        return Err(corrupt(format!(
            "unsupported version {} (expected {version})",
            env.version
        )));
    }
    let payload = &bytes[nl + 1..];
    let expected: usize = env.lengths.iter().sum::<usize>() * 8;
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {expected}",
            payload.len()
        )));
    }
    let digest = digest_of(format, version, &env.lengths, &env.header, payload)?;
    if digest != env.digest {
        return Err(corrupt("digest mismatch".into()));
    }
    let mut arrays = Vec::with_capacity(env.lengths.len());
    let mut off = 0;
    for &n in &env.lengths {
        let a = payload[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(a);
        off += n * 8;
    }
    Ok((env.header, arrays))
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
