//! Shared pieces of the on-disk formats: an ASCII header of `key value`
//! lines closed by `end`, followed by a little-endian `f64` payload.

use std::io::{BufRead, Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f64s(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::MalformedHeader(format!("missing `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::MalformedHeader(format!("cannot parse `{key}` from `{raw}`")))
    }

    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::MalformedHeader(format!("cannot parse `{key}` item `{t}`")))
            })
            .collect()
    }

    pub fn write<W: Write>(&self, w: &mut W, magic: &str, version: &str) -> std::io::Result<()> {
        writeln!(w, "{magic} {version}")?;
        for (k, v) in &self.entries {
            writeln!(w, "{k} {v}")?;
        }
        writeln!(w, "end")
    }

    pub fn read<R: BufRead>(r: &mut R, magic: &str, version: &str) -> Result<Self> {
        let first = read_line(r)?.ok_or_else(|| Error::MalformedHeader("empty file".into()))?;
        let mut parts = first.split_whitespace();
        if parts.next() != Some(magic) {
            return Err(Error::MalformedHeader(format!("expected `{magic}` magic line")));
        }
        let found = parts.next().unwrap_or("");
        if found != version {
            return Err(Error::VersionMismatch {
                found: found.to_string(),
                expected: version.to_string(),
            });
        }
        let mut header = Header::default();
        loop {
            let line = read_line(r)?
                .ok_or_else(|| Error::MalformedHeader("header not terminated by `end`".into()))?;
            if line == "end" {
                return Ok(header);
            }
            let (k, v) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            if k.is_empty() {
                return Err(Error::MalformedHeader(format!("bad header line `{line}`")));
            }
            header.push(k, v);
        }
    }
}

fn read_line<R: BufRead>(r: &mut R) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let n = r
        .read_until(b'\n', &mut buf)
        .map_err(|e| Error::io("<stream>", e))?;
    if n == 0 {
        return Ok(None);
    }
    if buf.last() == Some(&b'\n') {
        buf.pop();
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))
}

/// Reads up to `len` bytes; a short read is not an error here so callers can
/// report truncation through the checksum.
pub fn read_payload<R: Read>(r: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<stream>", e))?;
    Ok(buf)
}
