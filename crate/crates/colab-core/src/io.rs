//! On-disk formats: `.ten` tensors, 8-bit PGM masks, CSV float formatting.
//!
//! A `.ten` file is one UTF-8 JSON header line
//! `{"shape":[...],"dtype":"f64","order":"row-major"}` followed by a newline
//! and the raw little-endian f64 payload. Writes are byte-deterministic.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

#[derive(Deserialize)]
struct TenHeader {
    shape: Vec<usize>,
    dtype: String,
    order: String,
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let shape = t
        .shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let header = format!("{{\"shape\":[{shape}],\"dtype\":\"f64\",\"order\":\"row-major\"}}\n");
    let mut res = w.write_all(header.as_bytes());
    if res.is_ok() {
        for v in t.data() {
            res = w.write_all(&v.to_le_bytes());
            if res.is_err() {
                break;
            }
        }
    }
    res.and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let mut header = String::new();
    r.read_line(&mut header)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let h: TenHeader = serde_json::from_str(header.trim_end())
        .map_err(|e| Error::format(path.display().to_string(), format!("bad header: {e}")))?;
    if h.dtype != "f64" || h.order != "row-major" {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported dtype {:?} / order {:?}", h.dtype, h.order),
        ));
    }
    let numel: usize = h.shape.iter().product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if payload.len() != numel * 8 {
        return Err(Error::format(
            path.display().to_string(),
            format!("payload is {} bytes, shape wants {}", payload.len(), numel * 8),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(h.shape, data)
}

/// Binary PGM (P5), maxval 255.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::invalid(format!(
            "pgm payload {} pixels for {w}x{h}",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |d: &str| Error::format(path.display().to_string(), d.to_string());
    if !bytes.starts_with(b"P5") {
        return Err(bad("not a P5 pgm"));
    }
    // Header: magic, width, height, maxval, separated by whitespace,
    // '#' comments allowed, then exactly one whitespace byte before payload.
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let field = std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?;
        fields.push(
            field
                .parse::<usize>()
                .map_err(|_| bad("non-numeric header field"))?,
        );
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1;
    if bytes.len() != pos + w * h {
        return Err(bad(&format!(
            "payload is {} bytes, header wants {}",
            bytes.len().saturating_sub(pos),
            w * h
        )));
    }
    Ok((w, h, bytes[pos..].to_vec()))
}

/// Float formatting used in every CSV this crate writes: 9 significant
/// digits, scientific notation, deterministic.
pub fn fmt_sig(x: f64) -> String {
    format!("{x:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn tensor_roundtrip_is_bitwise() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.ten");
        let t = Tensor::new(vec![2, 3], vec![1.5, -0.0, f64::MIN_POSITIVE, 3.25e300, -7.0, 0.1]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Writing twice yields identical bytes.
        let first = std::fs::read(&path).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn tensor_read_rejects_short_payload() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ten");
        std::fs::write(
            &path,
            b"{\"shape\":[4],\"dtype\":\"f64\",\"order\":\"row-major\"}\n\x00\x00",
        )
        .unwrap();
        assert!(read_tensor(&path).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let pixels: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let (w, h, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn pgm_with_comment_parses() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 10, 20]);
        std::fs::write(&path, bytes).unwrap();
        let (w, h, px) = read_pgm(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 255, 10, 20]);
    }

    #[test]
    fn fmt_sig_has_nine_significant_digits() {
        assert_eq!(fmt_sig(0.5), "5.00000000e-1");
        assert_eq!(fmt_sig(1.0 / 3.0), "3.33333333e-1");
        assert_eq!(fmt_sig(12345.6789), "1.23456789e4");
    }
}
