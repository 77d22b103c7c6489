//! Checkpoint container: `TRB-CKPT-1` magic, little-endian `u32` array
//! count, then per array a `u32` name length, UTF-8 name, `u32` rows,
//! `u32` cols and `rows * cols` row-major `f64` values.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{DiffError, ParameterStore};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"TRB-CKPT-1";

pub fn write_checkpoint<S: Scalar, W: Write>(
    store: &ParameterStore<S>,
    mut out: W,
) -> Result<(), DiffError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_u32::<LittleEndian>(store.len() as u32)?;
    for (_, name, v) in store.iter() {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name.as_bytes())?;
        out.write_u32::<LittleEndian>(v.nrows() as u32)?;
        out.write_u32::<LittleEndian>(v.ncols() as u32)?;
        for x in v.iter() {
            out.write_f64::<LittleEndian>(x.to_f64_lossy())?;
        }
    }
    Ok(())
}

/// Read a checkpoint into a fresh store (optimizer state zeroed).
pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<ParameterStore<S>, DiffError> {
    let mut magic = [0u8; 10];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let count = input.read_u32::<LittleEndian>()?;
    let mut store = ParameterStore::new(0);
    for _ in 0..count {
        let len = input.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rows = input.read_u32::<LittleEndian>()? as usize;
        let cols = input.read_u32::<LittleEndian>()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(S::lit(input.read_f64::<LittleEndian>()?));
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        store.insert(&name, arr)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_and_values() {
        let mut store = ParameterStore::<f64>::new(3);
        store.insert_weight("enc.w", 3, 2).unwrap();
        store.insert_bias("enc.b", 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&store, &mut buf).unwrap();
        assert_eq!(&buf[..10], b"TRB-CKPT-1");
        let back: ParameterStore<f64> = read_checkpoint(buf.as_slice()).unwrap();
        for ((_, n1, v1), (_, n2, v2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_checkpoint::<f64, _>(&b"NOPE-CKPT-1\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, DiffError::Checkpoint(_)));
    }
}
