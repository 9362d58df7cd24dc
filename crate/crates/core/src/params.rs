//! Flat parameter vectors shared by models, gradients and updates.

use crate::error::{Error, Result};

/// All model parameters (or a same-shaped gradient / update) as one flat
/// `f64` vector. The layout is owned by [`crate::models::ModelSpec`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.len() == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected,
                actual: self.len(),
            })
        }
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * alpha).collect())
    }

    /// Element-wise mean of `vectors`.
    ///
    /// Computed as `first + Σ(v - first) / n`, which returns `first` bit-exactly
    /// when all inputs are equal.
    pub fn mean<'a, I>(vectors: I) -> Result<ParamVector>
    where
        I: IntoIterator<Item = &'a ParamVector>,
    {
        let mut iter = vectors.into_iter();
        let first = iter.next().ok_or(Error::Empty("vector set"))?;
        let mut acc = ParamVector::zeros(first.len());
        let mut count = 1usize;
        for v in iter {
            v.check_len(first.len())?;
            for ((s, x), f) in acc.0.iter_mut().zip(&v.0).zip(&first.0) {
                *s += x - f;
            }
            count += 1;
        }
        let n = count as f64;
        Ok(ParamVector(
            first.0.iter().zip(&acc.0).map(|(f, s)| f + s / n).collect(),
        ))
    }

    /// Length-prefixed little-endian encoding: `u64` count, then `count` `f64`s.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.len());
        self.encode_into(&mut out);
        out
    }

    /// Decodes one vector from the front of `bytes`, returning it with the
    /// number of bytes consumed. Non-finite entries are rejected.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(ParamVector, usize)> {
        let len = read_u64(bytes, 0)?;
        let len = usize::try_from(len).map_err(|_| Error::SizeOverflow("parameter count"))?;
        let payload = len
            .checked_mul(8)
            .and_then(|b| b.checked_add(8))
            .ok_or(Error::SizeOverflow("parameter count"))?;
        if bytes.len() < payload {
            return Err(Error::Truncated {
                needed: payload,
                available: bytes.len(),
            });
        }
        let values: Vec<f64> = bytes[8..payload]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let vector = ParamVector(values);
        if !vector.is_finite() {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok((vector, payload))
    }

    /// Decodes a buffer holding exactly one vector.
    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        let (v, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::TrailingBytes(bytes.len() - used));
        }
        Ok(v)
    }
}

pub(crate) fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let end = at.checked_add(8).ok_or(Error::SizeOverflow("offset"))?;
    let slice = bytes.get(at..end).ok_or(Error::Truncated {
        needed: end,
        available: bytes.len(),
    })?;
    Ok(u64::from_le_bytes(slice.try_into().expect("slice of 8")))
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}
