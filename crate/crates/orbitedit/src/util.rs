//! Small shared utilities: seed derivation, atomic writes, digests, and a
//! minimal reader/writer for the common binary array container format.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Derives a child seed from a parent seed and a stream label, so every
/// consumer of randomness gets its own deterministic stream.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut z = parent ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        z = z.wrapping_add(b as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^= z >> 27;
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and an index.
pub fn derive_seed_index(parent: u64, label: &str, index: u64) -> u64 {
    derive_seed(derive_seed(parent, label), &index.to_string())
}

/// Writes bytes to `path` atomically: write to a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::Data(format!("path {} has no parent directory", path.display())))?;
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Advisory lock on an output directory. Created on acquire, removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Minimal .npy container support (version 1.0, C order, little endian).
// Only the two element types the pipeline stores: u8 frames and f64 tensors.

fn npy_header(descr: &str, shape: &[usize]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_str = match dims.len() {
        1 => format!("({},)", dims[0]),
        _ => format!("({})", dims.join(", ")),
    };
    let mut dict = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_str}, }}");
    let unpadded = 6 + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(b"\x93NUMPY");
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

pub fn write_npy_u8(path: &Path, data: ArrayViewD<'_, u8>) -> Result<()> {
    let mut bytes = npy_header("|u1", data.shape());
    let contiguous = data.as_standard_layout();
    bytes.extend_from_slice(contiguous.as_slice().expect("standard layout"));
    atomic_write(path, &bytes)
}

pub fn write_npy_f64(path: &Path, data: ArrayViewD<'_, f64>) -> Result<()> {
    let mut bytes = npy_header("<f8", data.shape());
    let contiguous = data.as_standard_layout();
    for v in contiguous.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

fn parse_npy_header(bytes: &[u8], path: &Path) -> Result<(String, Vec<usize>, usize)> {
    let err = |detail: &str| Error::Format(format!("{}: {detail}", path.display()));
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(err("missing array container magic"));
    }
    if bytes[6] != 1 {
        return Err(err("unsupported container version"));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(err("truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| err("header is not valid UTF-8"))?;

    let descr = header
        .split("'descr':")
        .nth(1)
        .and_then(|s| s.split('\'').nth(1))
        .ok_or_else(|| err("missing descr"))?
        .to_string();
    if header.contains("'fortran_order': True") {
        return Err(err("fortran order not supported"));
    }
    let shape_str = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| err("missing shape"))?;
    let mut shape = Vec::new();
    for part in shape_str.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        shape.push(
            part.parse::<usize>()
                .map_err(|_| err("bad shape entry"))?,
        );
    }
    Ok((descr, shape, data_start))
}

pub fn read_npy_u8(path: &Path) -> Result<ArrayD<u8>> {
    let bytes = fs::read(path)?;
    let (descr, shape, start) = parse_npy_header(&bytes, path)?;
    if descr != "|u1" {
        return Err(Error::Format(format!(
            "{}: expected |u1 elements, found {descr}",
            path.display()
        )));
    }
    let n: usize = shape.iter().product();
    if bytes.len() != start + n {
        return Err(Error::Format(format!("{}: payload size mismatch", path.display())));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), bytes[start..].to_vec())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_npy_f64(path: &Path) -> Result<ArrayD<f64>> {
    let bytes = fs::read(path)?;
    let (descr, shape, start) = parse_npy_header(&bytes, path)?;
    if descr != "<f8" {
        return Err(Error::Format(format!(
            "{}: expected <f8 elements, found {descr}",
            path.display()
        )));
    }
    let n: usize = shape.iter().product();
    if bytes.len() != start + n * 8 {
        return Err(Error::Format(format!("{}: payload size mismatch", path.display())));
    }
    let mut data = Vec::with_capacity(n);
    for chunk in bytes[start..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
