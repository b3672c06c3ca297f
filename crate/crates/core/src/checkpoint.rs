//! Binary checkpoint format.
//!
//! ```text
//! "ADCN" | version u32 = 1 | count u32
//! per tensor: name_len u32 | name (UTF-8) | rank u32 | dims u32 * rank | values f32 * prod(dims)
//! ```
//! All integers and floats little-endian, values row-major. Adam moments are
//! not stored.

use crate::error::{Error, Result};
use crate::params::NetworkParams;
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(params: &NetworkParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in e.tensor.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::parse(self.pos, format!("{what} size overflows")))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(0, format!("bad magic {magic:?}, expected \"ADCN\"")));
    }
    let version_at = r.pos();
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(version_at, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_at = r.pos();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::parse(name_at + 4, "tensor name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos();
        let rank = r.u32("rank")? as usize;
        if !(1..=4).contains(&rank) {
            return Err(Error::parse(rank_at, format!("rank {rank} outside 1..=4")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dimension")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::parse(rank_at, "tensor size overflows"))?;
        let values = r.f32s(n, "tensor values")?;
        out.push((name, Tensor::new(&dims, values)?));
    }
    if !r.at_end() {
        return Err(Error::parse(r.pos(), "trailing bytes after last tensor"));
    }
    Ok(out)
}

impl<T: Real> NetworkParams<T> {
    /// Replaces parameter values from checkpoint bytes. Every stored tensor
    /// must name an existing parameter with the same shape and every
    /// parameter must be present; Adam state is reset.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let tensors = read_checkpoint(bytes)?;
        let mut fresh = NetworkParams::new();
        for (name, t) in &tensors {
            let Some(existing) = self.get(name) else {
                return Err(Error::Checkpoint(format!("unknown tensor `{name}`")));
            };
            if existing.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    existing.shape()
                )));
            }
            fresh
                .insert(name, t.cast())
                .map_err(|_| Error::Checkpoint(format!("tensor `{name}` stored twice")))?;
        }
        if let Some(missing) = self.names().find(|n| fresh.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor `{missing}`")));
        }
        let mut ordered = NetworkParams::new();
        for name in self.names() {
            ordered.insert(name, fresh.get(name).unwrap().clone())?;
        }
        *self = ordered;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NetworkParams<f32> {
        let mut p = NetworkParams::new();
        p.insert("amg.conv.weight", Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5 - 2.0))
            .unwrap();
        p.insert("amg.conv.bias", Tensor::from_fn(&[2], |i| i as f32)).unwrap();
        p
    }

    #[test]
    fn header_layout() {
        let bytes = write_checkpoint(&sample());
        assert_eq!(&bytes[..4], b"ADCN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &15u32.to_le_bytes());
        assert_eq!(&bytes[16..31], b"amg.conv.weight");
        assert_eq!(&bytes[31..35], &4u32.to_le_bytes());
    }

    #[test]
    fn round_trip_restores_values() {
        let p = sample();
        let mut q = sample();
        q.get_mut("amg.conv.bias").unwrap().data_mut()[0] = 99.0;
        q.load_checkpoint(&write_checkpoint(&p)).unwrap();
        assert!(q.same_values(&p));
    }

    #[test]
    fn mismatches_are_reported() {
        let bytes = write_checkpoint(&sample());
        let mut other = NetworkParams::<f32>::new();
        other.insert("amg.conv.weight", Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        assert!(matches!(other.load_checkpoint(&bytes), Err(Error::Checkpoint(_))));

        let mut wrong_shape = sample();
        *wrong_shape.get_mut("amg.conv.bias").unwrap() = Tensor::zeros(&[3]);
        assert!(matches!(wrong_shape.load_checkpoint(&bytes), Err(Error::Checkpoint(_))));

        let mut missing = sample();
        missing.insert("amg.extra", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(missing.load_checkpoint(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_and_bad_magic_are_parse_errors() {
        let bytes = write_checkpoint(&sample());
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(read_checkpoint(&bytes[..cut]), Err(Error::Parse { .. })));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Parse { offset: 0, .. })));
    }
}
