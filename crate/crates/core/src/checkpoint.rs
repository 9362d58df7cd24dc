//! Binary checkpoint of a simulation's mutable state.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FSC1"                      format tag
//! [u8; 32]                    SHA-256 of the resolved configuration
//! u64                         completed rounds
//! ParamVector                 global model
//! u64 K, then K x (f64 p, u64 selected, u64 labeled, u64 excluded)
//! ParamVector                 γ̂ per node
//! u8 flag, [ParamVector]      synchronized full-participation model
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{read_u64, ParamVector};
use crate::selection::NodeStats;

pub const FORMAT_TAG: [u8; 4] = *b"FSC1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_digest: [u8; 32],
    pub round: u64,
    pub model: ParamVector,
    pub stats: NodeStats,
    pub gamma_hat: Vec<f64>,
    pub synced: Option<ParamVector>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::SizeOverflow("checkpoint"))?;
        let out = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            needed: end,
            available: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        let v = read_u64(self.bytes, self.pos)?;
        self.pos += 8;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        self.u64().map(f64::from_bits)
    }

    fn params(&mut self) -> Result<ParamVector> {
        let (v, used) = ParamVector::decode_prefix(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(v)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&FORMAT_TAG);
        out.extend_from_slice(&self.config_digest);
        out.extend_from_slice(&self.round.to_le_bytes());
        self.model.encode_into(&mut out);
        let s = &self.stats;
        out.extend_from_slice(&(s.num_nodes() as u64).to_le_bytes());
        for i in 0..s.num_nodes() {
            out.extend_from_slice(&s.probabilities[i].to_le_bytes());
            out.extend_from_slice(&s.times_selected[i].to_le_bytes());
            out.extend_from_slice(&s.times_labeled[i].to_le_bytes());
            out.extend_from_slice(&s.times_excluded[i].to_le_bytes());
        }
        ParamVector::from_vec(self.gamma_hat.clone()).encode_into(&mut out);
        match &self.synced {
            Some(v) => {
                out.push(1);
                v.encode_into(&mut out);
            }
            None => out.push(0),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != FORMAT_TAG {
            return Err(Error::Checkpoint("unknown format tag".into()));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let round = r.u64()?;
        let model = r.params()?;
        let k = usize::try_from(r.u64()?).map_err(|_| Error::SizeOverflow("node count"))?;
        // Each node record is 32 bytes; reject counts the input cannot hold
        // before allocating.
        let remaining = bytes.len() - r.pos;
        if k.checked_mul(32).is_none_or(|need| need > remaining) {
            return Err(Error::Truncated {
                needed: r.pos.saturating_add(k.saturating_mul(32)),
                available: bytes.len(),
            });
        }
        let mut stats = NodeStats::uniform(k);
        for i in 0..k {
            let p = r.f64()?;
            if !(p.is_finite() && p >= 0.0) {
                return Err(Error::Checkpoint(format!("invalid probability for node {i}")));
            }
            stats.probabilities[i] = p;
            stats.times_selected[i] = r.u64()?;
            stats.times_labeled[i] = r.u64()?;
            stats.times_excluded[i] = r.u64()?;
        }
        let gamma_hat = r.params()?.into_vec();
        if gamma_hat.len() != k {
            return Err(Error::Checkpoint("gradient bound count differs from node count".into()));
        }
        let synced = match r.take(1)?[0] {
            0 => None,
            1 => Some(r.params()?),
            other => return Err(Error::Checkpoint(format!("invalid flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint {
            config_digest,
            round,
            model,
            stats,
            gamma_hat,
            synced,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes)
    }
}
