//! `LSFC` checkpoint files.
//!
//! Layout: `LSFC`, version u32, count u32, then per tensor in name order:
//! name length u32, UTF-8 name, rank u32, dims u32[rank], f32 data. All
//! integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::tensor::Tensor;
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LSFC";

pub fn encode(tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Vec<u8>> {
    let mut w = Writer::with_header(MAGIC);
    w.usize(tensors.len())?;
    for (name, t) in tensors {
        w.usize(name.len())?;
        w.bytes(name.as_bytes());
        w.usize(t.dims().len())?;
        for &d in t.dims() {
            w.usize(d)?;
        }
        w.f32s(t.data().iter().copied());
    }
    Ok(w.finish())
}

pub fn decode(buf: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut r = Reader::open(buf, MAGIC, "checkpoint")?;
    let count = r.usize()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Format("checkpoint: tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().product();
        let data = r.f32s(n)?;
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("checkpoint: duplicate tensor '{name}'")));
        }
    }
    r.finish()?;
    Ok(out)
}

pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor<f32>>> {
    decode(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(any::<f32>(), r * c)
                        .prop_map(move |d| (r, c, d))
                }),
                0..6,
            )
        ) {
            let tensors: BTreeMap<String, Tensor<f32>> = entries
                .into_iter()
                .map(|(k, (r, c, d))| (k, Tensor::matrix(r, c, d).unwrap()))
                .collect();
            let bytes = encode(&tensors).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for (k, t) in &tensors {
                let b = &back[k];
                prop_assert_eq!(b.dims(), t.dims());
                let same = b.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = encode(&BTreeMap::new()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::matrix(2, 2, vec![1.0f32; 4]).unwrap());
        let bytes = encode(&m).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
