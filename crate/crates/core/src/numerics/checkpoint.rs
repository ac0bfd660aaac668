//! Versioned parameter container.
//!
//! Layout: the ASCII header line `HIERNMT-CKPT v1\n`, then little-endian
//! `u32` counts and lengths: metadata entry count, each entry as
//! (key length, key bytes, value length, value bytes); parameter count, each
//! parameter as (name length, name bytes, rank, extents as `u32`, values as
//! `f64` bit patterns). Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

pub const CHECKPOINT_HEADER: &[u8] = b"HIERNMT-CKPT v1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NumericsError> {
        if self.pos + n > self.buf.len() {
            return Err(NumericsError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NumericsError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn string(&mut self) -> Result<String, NumericsError> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NumericsError::Checkpoint("non-UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Checkpoint {
            metadata: BTreeMap::new(),
            params,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_HEADER.to_vec();
        put_u32(&mut out, self.metadata.len());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, NumericsError> {
        if !buf.starts_with(CHECKPOINT_HEADER) {
            return Err(NumericsError::Checkpoint("missing checkpoint header".into()));
        }
        let mut r = Reader {
            buf,
            pos: CHECKPOINT_HEADER.len(),
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            params.insert(name, Tensor::new(&shape, data)?)?;
        }
        if r.pos != buf.len() {
            return Err(NumericsError::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips_bit_exactly(
            vals in prop::collection::vec(any::<f64>(), 1..40),
            key in "[a-z/]{1,12}",
            value in "\\PC{0,20}",
        ) {
            let mut params = ParamStore::new();
            let n = vals.len();
            params.insert("enc/az/layer0/wq", Tensor::new(&[n], vals.clone()).unwrap()).unwrap();
            params.insert("out/b", Tensor::new(&[1, 2], vec![-0.0, f64::MIN_POSITIVE]).unwrap()).unwrap();
            let mut ck = Checkpoint::new(params);
            ck.metadata.insert(key, value);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back.metadata, &ck.metadata);
            for ((na, ta), (nb, tb)) in back.params.iter().zip(ck.params.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut params = ParamStore::new();
        params.insert("w", Tensor::zeros(&[3])).unwrap();
        let bytes = Checkpoint::new(params).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
