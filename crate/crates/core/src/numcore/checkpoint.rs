//! Flat binary checkpoint layout.
//!
//! ```text
//! "STFL" | version: u32
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 bytes | rank: u32 | dims: u64 * rank | payload: f64 * prod(dims)
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::mlp::VelocityScoreModel;
use super::tensor::Tensor2;
use super::NumError;

pub const MAGIC: &[u8; 4] = b"STFL";
pub const VERSION: u32 = 1;

pub fn encode(model: &VelocityScoreModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in model.named_tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(tensor.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(tensor.cols() as u64).to_le_bytes());
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NumError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NumError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NumError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NumError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<VelocityScoreModel, NumError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NumError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumError::Format(format!("unsupported version {version}")));
    }
    let mut tensors = Vec::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NumError::Format("parameter name is not utf-8".into()))?
            .to_owned();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n as usize),
            [m, n] => (*m as usize, *n as usize),
            _ => return Err(NumError::Format(format!("`{name}` has rank {rank}"))),
        };
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| NumError::Format(format!("`{name}` dims overflow")))?;
        let payload = r.take(len.checked_mul(8).ok_or_else(|| NumError::Format("payload overflow".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    VelocityScoreModel::from_named_tensors(tensors)
}

pub fn save(model: &VelocityScoreModel, path: &Path) -> Result<(), NumError> {
    fs::write(path, encode(model)).map_err(|e| NumError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<VelocityScoreModel, NumError> {
    let bytes = fs::read(path).map_err(|e| NumError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&VelocityScoreModel::zeros(2, 3));
        assert_eq!(&bytes[..4], b"STFL");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let name_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"trunk.0.weight");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode(&VelocityScoreModel::zeros(2, 3));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..8]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), dim in 1usize..6, hidden in 1usize..9) {
            let model = VelocityScoreModel::new(dim, hidden, &mut ChaCha8Rng::seed_from_u64(seed));
            let bytes = encode(&model);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &model);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
