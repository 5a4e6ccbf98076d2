//! Checkpoint format: a human-readable manifest plus a flat binary blob.
//!
//! `manifest.txt` starts with a version line and then one line per tensor:
//!
//! ```text
//! finppo-checkpoint 1
//! tensor <name> <d0>x<d1>x... <byte_offset> <element_count>
//! ```
//!
//! `params.bin` holds the concatenated tensor data as little-endian 64-bit
//! reals, in manifest order. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";
const VERSION_LINE: &str = "finppo-checkpoint 1";

/// Write named tensors to `dir` (created if needed).
pub fn save(dir: &Path, entries: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut manifest = String::from(VERSION_LINE);
    manifest.push('\n');
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in entries {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "tensor name {name:?} must be non-empty and whitespace-free"
            )));
        }
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        manifest.push_str(&format!(
            "tensor {} {} {} {}\n",
            name,
            shape,
            blob.len(),
            tensor.len()
        ));
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let mut mf =
        fs::File::create(&manifest_path).map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    mf.write_all(manifest.as_bytes())
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut bf =
        fs::File::create(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    bf.write_all(&blob)
        .map_err(|e| Error::io(blob_path.display().to_string(), e))?;
    Ok(())
}

/// Read every tensor from a checkpoint directory, in manifest order.
pub fn load(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let blob = fs::read(&blob_path).map_err(|e| Error::io(blob_path.display().to_string(), e))?;

    let mut lines = manifest.lines();
    match lines.next() {
        Some(v) if v == VERSION_LINE => {}
        other => {
            return Err(Error::Checkpoint(format!(
                "unsupported manifest header {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| {
            Error::Checkpoint(format!("manifest line {}: {why}: {line:?}", lineno + 2))
        };
        if fields.len() != 5 || fields[0] != "tensor" {
            return Err(bad("expected `tensor <name> <shape> <offset> <len>`"));
        }
        let name = fields[1].to_string();
        let shape: Vec<usize> = fields[2]
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = fields[3].parse().map_err(|_| bad("bad offset"))?;
        let len: usize = fields[4].parse().map_err(|_| bad("bad length"))?;
        let numel: usize = shape.iter().product();
        if numel != len {
            return Err(bad("shape does not match element count"));
        }
        let end = offset + len * 8;
        if end > blob.len() {
            return Err(bad("blob too short"));
        }
        let data: Vec<f64> = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = crate::rng::Rng::new(42);
        let a = Tensor::from_fn(&[3, 4], |_| rng.normal() * 1e-30);
        let b = Tensor::from_fn(&[7], |_| rng.normal() * 1e12);
        let c = Tensor::new(vec![2], vec![0.1, -0.3]).unwrap();
        save(
            dir.path(),
            &[
                ("trunk.w".to_string(), &a),
                ("trunk.b".to_string(), &b),
                ("head.w".to_string(), &c),
            ],
        )
        .unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for ((name, t), (orig_name, orig)) in loaded.iter().zip([
            ("trunk.w", &a),
            ("trunk.b", &b),
            ("head.w", &c),
        ]) {
            assert_eq!(name, orig_name);
            assert_eq!(t.shape(), orig.shape());
            for (x, y) in t.data().iter().zip(orig.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_whitespace_names() {
        let dir = tempdir().unwrap();
        let t = Tensor::zeros(&[1]);
        assert!(save(dir.path(), &[("bad name".to_string(), &t)]).is_err());
    }

    #[test]
    fn rejects_truncated_blob() {
        let dir = tempdir().unwrap();
        let t = Tensor::zeros(&[4]);
        save(dir.path(), &[("t".to_string(), &t)]).unwrap();
        std::fs::write(dir.path().join(BLOB_FILE), [0u8; 8]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
