//! Raw float32 tensor files with a JSON header.
//!
//! Layout: magic `EXTF`, little-endian `u32` format version, `u32` header
//! length, the header as UTF-8 JSON (`{"shape": [...], "dtype": "f32",
//! "meta": ...}`), then the row-major little-endian `f32` payload. Used for
//! cached image tokens, inversion results and spilled capture stores.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"EXTF";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header<M> {
    shape: Vec<usize>,
    dtype: String,
    meta: M,
}

pub fn write_tensor_file<M: Serialize>(
    path: impl AsRef<Path>,
    shape: &[usize],
    meta: &M,
    data: &[f32],
) -> Result<()> {
    let path = path.as_ref();
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Contract(format!(
            "tensor shape {shape:?} holds {expected} values but {} were given",
            data.len()
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let header = serde_json::to_vec(&Header {
        shape: shape.to_vec(),
        dtype: "f32".into(),
        meta,
    })?;
    // write to a sibling temp file first so concurrent readers never see a
    // partial entry
    let tmp = path.with_extension("partial");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(&tmp, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_tensor_file<M: DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<(Vec<usize>, M, Vec<f32>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Contract(format!(
            "{} is not a tensor file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Contract(format!(
            "{}: unsupported tensor file version {version}",
            path.display()
        )));
    }
    r.read_exact(&mut word).map_err(io)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header<M> = serde_json::from_slice(&header)?;
    if header.dtype != "f32" {
        return Err(Error::Contract(format!(
            "{}: unsupported dtype {}",
            path.display(),
            header.dtype
        )));
    }

    let count: usize = header.shape.iter().product();
    let mut raw = Vec::with_capacity(count * 4);
    r.read_to_end(&mut raw).map_err(io)?;
    if raw.len() != count * 4 {
        return Err(Error::Contract(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            count * 4,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header.shape, header.meta, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.extf");
        let data = vec![1.5f32, -0.0, f32::MIN_POSITIVE, 3.25e-7, 42.0, -7.0];
        write_tensor_file(&path, &[2, 3], &"meta-string", &data).unwrap();
        let (shape, meta, back): (_, String, _) = read_tensor_file(&path).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(meta, "meta-string");
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&data));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_tensor_file(dir.path().join("x"), &[2, 2], &(), &[0.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.extf");
        write_tensor_file(&path, &[4], &(), &[1.0; 4]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_tensor_file::<()>(&path).is_err());
    }
}
