use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::format::{decode_f64s, encode_f64s, read_payload, sha256_hex, Header};

use super::Mlp;

const MAGIC: &str = "epiflow-mlp";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCheckpoint {
    pub net: Mlp,
    pub seed: u64,
    pub steps: u64,
}

/// Writes one self-delimiting network block: header, parameters, checksum.
pub fn write_mlp<W: Write>(w: &mut W, net: &Mlp, seed: u64, steps: u64) -> std::io::Result<()> {
    let payload = encode_f64s(net.params());
    let mut h = Header::default();
    h.push(
        "sizes",
        net.sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" "),
    );
    h.push("seed", seed);
    h.push("steps", steps);
    h.push("params", net.num_params());
    h.push("checksum", sha256_hex(&payload));
    h.write(w, MAGIC, VERSION)?;
    w.write_all(&payload)
}

pub fn read_mlp<R: BufRead>(r: &mut R) -> Result<MlpCheckpoint> {
    let h = Header::read(r, MAGIC, VERSION)?;
    let sizes: Vec<usize> = h.parse_list("sizes")?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::MalformedHeader(format!("bad layer sizes {sizes:?}")));
    }
    let count: usize = h.parse("params")?;
    let expected = h.get("checksum")?.to_string();
    let payload = read_payload(r, count * 8)?;
    let actual = sha256_hex(&payload);
    if actual != expected {
        return Err(Error::ChecksumMismatch { expected, actual });
    }
    let net = Mlp::from_params(&sizes, decode_f64s(&payload))
        .map_err(|_| Error::MalformedHeader("parameter count does not match sizes".into()))?;
    Ok(MlpCheckpoint {
        net,
        seed: h.parse("seed")?,
        steps: h.parse("steps")?,
    })
}
