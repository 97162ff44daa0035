//! CATL latent streams.
//!
//! ```text
//! header   "CATL" | u16 version = 1 | u16 latent_channels | u32 record_count
//! record   u16 id_len | id (UTF-8) | u16 ratio | u16 side | u8 kind | f32[...]
//! ```
//!
//! All integers and floats are little-endian, with no padding. Kind 1 stores
//! `mu` then `logvar` (`2 * c * side^2` floats); kind 2 stores one sample
//! (`c * side^2` floats).

use std::path::Path;

use crate::backend::Tensor;
use crate::bytes::{put_f32s, Reader};
use crate::error::{contract, Error, Result};
use crate::nestedvae::{LatentDistribution, LatentSample};

pub const LATENT_MAGIC: &[u8; 4] = b"CATL";
pub const LATENT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub enum LatentPayload {
    Distribution { mu: Tensor<f32>, logvar: Tensor<f32> },
    Sample(Tensor<f32>),
}

impl LatentPayload {
    pub fn kind(&self) -> u8 {
        match self {
            LatentPayload::Distribution { .. } => 1,
            LatentPayload::Sample(_) => 2,
        }
    }

    fn lead(&self) -> &Tensor<f32> {
        match self {
            LatentPayload::Distribution { mu, .. } => mu,
            LatentPayload::Sample(z) => z,
        }
    }

    /// The sample, or the posterior mean.
    pub fn z(&self) -> &Tensor<f32> {
        self.lead()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub id: String,
    pub ratio: u32,
    pub payload: LatentPayload,
}

impl LatentRecord {
    pub fn from_distribution(id: impl Into<String>, d: LatentDistribution<f32>) -> Self {
        LatentRecord {
            id: id.into(),
            ratio: d.ratio,
            payload: LatentPayload::Distribution { mu: d.mu, logvar: d.logvar },
        }
    }

    pub fn from_sample(id: impl Into<String>, s: LatentSample<f32>) -> Self {
        LatentRecord {
            id: id.into(),
            ratio: s.ratio,
            payload: LatentPayload::Sample(s.z),
        }
    }

    /// The latent to decode: the sample, or the posterior mean.
    pub fn sample(&self) -> LatentSample<f32> {
        LatentSample {
            z: self.payload.z().clone(),
            ratio: self.ratio,
        }
    }

    /// `(channels, side)` after checking the payload tensors.
    fn geometry(&self) -> Result<(usize, usize)> {
        let s = self.payload.lead().shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(contract!("record {}: latent must be [c, s, s], got {s:?}", self.id));
        }
        if let LatentPayload::Distribution { mu, logvar } = &self.payload {
            if mu.shape() != logvar.shape() {
                return Err(contract!("record {}: mu {:?} and logvar {:?} differ", self.id, mu.shape(), logvar.shape()));
            }
        }
        Ok((s[0], s[1]))
    }
}

/// Serializes records; every record must have the same channel count.
pub fn encode_latents(records: &[LatentRecord]) -> Result<Vec<u8>> {
    let channels = match records.first() {
        Some(r) => r.geometry()?.0,
        None => 0,
    };
    let u16_of = |v: usize, what: &str, id: &str| {
        u16::try_from(v).map_err(|_| contract!("record {id}: {what} {v} does not fit in 16 bits"))
    };
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&u16_of(channels, "latent_channels", "-")?.to_le_bytes());
    let count = u32::try_from(records.len()).map_err(|_| contract!("too many records: {}", records.len()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for rec in records {
        let (c, side) = rec.geometry()?;
        if c != channels {
            return Err(contract!("record {}: {c} latent channels, file has {channels}", rec.id));
        }
        out.extend_from_slice(&u16_of(rec.id.len(), "id length", &rec.id)?.to_le_bytes());
        out.extend_from_slice(rec.id.as_bytes());
        out.extend_from_slice(&u16_of(rec.ratio as usize, "ratio", &rec.id)?.to_le_bytes());
        out.extend_from_slice(&u16_of(side, "side", &rec.id)?.to_le_bytes());
        out.push(rec.payload.kind());
        match &rec.payload {
            LatentPayload::Distribution { mu, logvar } => {
                put_f32s(&mut out, mu.data());
                put_f32s(&mut out, logvar.data());
            }
            LatentPayload::Sample(z) => put_f32s(&mut out, z.data()),
        }
    }
    Ok(out)
}

/// Inverse of [`encode_latents`].
pub fn decode_latents(bytes: &[u8]) -> Result<Vec<LatentRecord>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != LATENT_MAGIC {
        return Err(Error::Parse(format!("bad magic {magic:?} at byte offset 0, expected \"CATL\"")));
    }
    let version = r.u16("version")?;
    if version != LATENT_VERSION {
        return Err(Error::Parse(format!("unsupported latent version {version} at byte offset 4")));
    }
    let channels = r.u16("latent_channels")? as usize;
    let count = r.u32("record_count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = r.pos();
        let rec = read_record(&mut r, channels).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("record {i} (starting at byte offset {at}): {m}")),
            other => other,
        })?;
        records.push(rec);
    }
    if r.remaining() != 0 {
        return Err(Error::Parse(format!(
            "{} trailing bytes at byte offset {} after {count} declared records",
            r.remaining(),
            r.pos()
        )));
    }
    Ok(records)
}

fn read_record(r: &mut Reader<'_>, channels: usize) -> Result<LatentRecord> {
    let id_len = r.u16("id length")? as usize;
    let id = r.utf8(id_len, "id")?;
    let ratio = r.u16("ratio")? as u32;
    let side = r.u16("side")? as usize;
    let kind_at = r.pos();
    let kind = r.u8("payload kind")?;
    let shape = [channels, side, side];
    let n = channels * side * side;
    let tensor = |v: Vec<f32>| Tensor::new(&shape, v).expect("length matches shape");
    let payload = match kind {
        1 => {
            let mu = r.f32s(n, "mu payload")?;
            let logvar = r.f32s(n, "logvar payload")?;
            LatentPayload::Distribution {
                mu: tensor(mu),
                logvar: tensor(logvar),
            }
        }
        2 => LatentPayload::Sample(tensor(r.f32s(n, "sample payload")?)),
        k => return Err(Error::Parse(format!("unknown payload kind {k} at byte offset {kind_at}"))),
    };
    Ok(LatentRecord { id, ratio, payload })
}

/// Writes records to `path`; returns the number of bytes written.
pub fn write_latents(records: &[LatentRecord], path: &Path) -> Result<u64> {
    let bytes = encode_latents(records)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_latents(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, c: usize, side: usize) -> LatentRecord {
        LatentRecord {
            id: id.into(),
            ratio: 16,
            payload: LatentPayload::Sample(Tensor::from_fn(&[c, side, side], |i| i as f32 * 0.5 - 3.0)),
        }
    }

    #[test]
    fn sizes() {
        assert_eq!(encode_latents(&[]).unwrap().len(), 12);
        // id "a": 2 + 1 + 2 + 2 + 1 bytes of overhead.
        assert_eq!(encode_latents(&[sample("a", 4, 4)]).unwrap().len(), 12 + 8 + 256);
    }

    #[test]
    fn mixed_channels_rejected() {
        let e = encode_latents(&[sample("a", 4, 4), sample("b", 2, 4)]).unwrap_err();
        assert!(matches!(e, Error::Contract(_)), "{e}");
    }

    #[test]
    fn parse_errors() {
        let mut d = LatentRecord::from_distribution(
            "x",
            LatentDistribution {
                mu: Tensor::full(&[2, 2, 2], 1.0),
                logvar: Tensor::full(&[2, 2, 2], -1.0),
                ratio: 8,
            },
        );
        let bytes = encode_latents(&[sample("a", 2, 2), d.clone()]).unwrap();
        assert_eq!(decode_latents(&bytes).unwrap()[1], d);

        let e = decode_latents(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(e.contains("record 1") && e.contains("byte offset"), "{e}");

        let mut short_count = bytes.clone();
        short_count[8] = 1;
        assert!(decode_latents(&short_count).unwrap_err().to_string().contains("trailing"));
        let mut long_count = bytes.clone();
        long_count[8] = 3;
        assert!(decode_latents(&long_count).unwrap_err().to_string().contains("record 2"));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_latents(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_latents(&bad).unwrap_err().to_string().contains("version"));

        d.payload = LatentPayload::Distribution {
            mu: Tensor::full(&[2, 2, 2], 1.0),
            logvar: Tensor::full(&[2, 1, 1], 1.0),
        };
        assert!(encode_latents(&[d]).is_err());
    }
}
