//! Binary PGM (P5, maxval 255) and the `DLF1` raw-float tensor format.
//!
//! `DLF1` layout: magic `b"DLF1"`, little-endian `u32` rank, `rank` little-endian
//! `u32` dims, then row-major little-endian `f32` values. `DLD1` is the same
//! layout with `f64` payload, used where bit-exact state must survive a
//! round trip (training resume files).

use std::fs;
use std::path::Path;

use super::DataError;
use crate::numkit::Tensor;

/// 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if data.len() != height * width {
            return Err(DataError::ShapeMismatch(format!("{height}x{width} raster with {} bytes", data.len())));
        }
        Ok(Self { height, width, data })
    }

    /// Quantizes values in `[0, 1]` as `round(v · 255)`.
    pub fn from_unit(height: usize, width: usize, values: &[f64]) -> Result<Self, DataError> {
        let data = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(height, width, data)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as f64 / 255.0).collect()
    }
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(DataError::BadMagic { expected: "P5" });
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // whitespace and comment lines between header tokens
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(DataError::TruncatedFile("PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::TruncatedFile("PGM header: expected a number".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| DataError::TruncatedFile(format!("PGM header value {text:?}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(DataError::TruncatedFile("PGM header terminator".into())),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(DataError::BadMaxval(maxval));
    }
    let (width, height) = (width as usize, height as usize);
    let need = width * height;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(DataError::TruncatedFile(format!("PGM raster has {} of {need} bytes", payload.len())));
    }
    GrayImage::new(height, width, payload[..need].to_vec())
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), DataError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, DataError> {
    decode_pgm(&fs::read(path)?)
}

fn encode_header(magic: &[u8; 4], t: &Tensor, elem: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + elem * t.numel());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn decode_header<'a>(bytes: &'a [u8], magic: &'static str, elem: usize) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    if bytes.len() < 4 || &bytes[..4] != magic.as_bytes() {
        return Err(DataError::BadMagic { expected: magic });
    }
    let word = |at: usize| -> Result<u32, DataError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| DataError::ShapeMismatch("header shorter than declared rank".into()))
    };
    let rank = word(4)? as usize;
    if rank == 0 {
        return Err(DataError::ShapeMismatch("rank-0 tensors are not representable".into()));
    }
    let shape = (0..rank)
        .map(|i| word(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let payload = &bytes[8 + 4 * rank..];
    let numel: usize = shape.iter().product();
    if payload.len() != numel * elem {
        return Err(DataError::ShapeMismatch(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            numel * elem,
            payload.len()
        )));
    }
    Ok((shape, payload))
}

pub fn encode_f32(t: &Tensor) -> Vec<u8> {
    let mut out = encode_header(b"DLF1", t, 4);
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (shape, payload) = decode_header(bytes, "DLF1", 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn encode_f64(t: &Tensor) -> Vec<u8> {
    let mut out = encode_header(b"DLD1", t, 8);
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f64(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (shape, payload) = decode_header(bytes, "DLD1", 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_f32(path: impl AsRef<Path>, t: &Tensor) -> Result<(), DataError> {
    fs::write(path, encode_f32(t))?;
    Ok(())
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<Tensor, DataError> {
    decode_f32(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    #[test]
    fn parses_minimal_pgm() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 255]);
        let img = decode_pgm(&bytes).unwrap();
        assert_eq!((img.height, img.width), (2, 2));
        assert_eq!(img.data, vec![0, 1, 2, 255]);
        assert_eq!(encode_pgm(&img), bytes);
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5 # made by hand\n3 # width\n1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(decode_pgm(&bytes).unwrap().data, vec![9, 8, 7]);
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n\0"), Err(DataError::BadMagic { .. })));
        assert!(matches!(decode_pgm(b"P5\n1 1\n65535\n\0\0"), Err(DataError::BadMaxval(65535))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\0"), Err(DataError::TruncatedFile(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2"), Err(DataError::TruncatedFile(_))));
    }

    #[test]
    fn dlf1_size_arithmetic() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_f32(&t);
        assert_eq!(bytes.len(), 4 + 4 + 8 + 24);
        assert_eq!(&bytes[..4], b"DLF1");
        assert_eq!(decode_f32(&bytes).unwrap(), t);
    }

    #[test]
    fn dlf1_errors() {
        assert!(matches!(decode_f32(b"XLF1\x01\0\0\0"), Err(DataError::BadMagic { .. })));
        // rank 0
        assert!(matches!(decode_f32(b"DLF1\0\0\0\0"), Err(DataError::ShapeMismatch(_))));
        // declared 2 values, one present
        let mut b = b"DLF1\x01\0\0\0\x02\0\0\0".to_vec();
        b.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(decode_f32(&b), Err(DataError::ShapeMismatch(_))));
    }

    #[test]
    fn dlf1_single_precision_bound() {
        let mut rng = Rng::new(21);
        let t = Tensor::new(vec![7, 5, 3], (0..105).map(|_| rng.uniform(-1e3, 1e3).unwrap()).collect()).unwrap();
        let back = decode_f32(&encode_f32(&t)).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= a.abs() * 2f64.powi(-20));
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_pgm(dir.path().join("a.pgm"), &img).unwrap();
        assert_eq!(read_pgm(dir.path().join("a.pgm")).unwrap(), img);
        let t = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        write_f32(dir.path().join("t.dlf1"), &t).unwrap();
        assert_eq!(read_f32(dir.path().join("t.dlf1")).unwrap(), t);
    }

    proptest! {
        #[test]
        fn pgm_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let data: Vec<u8> = (0..h * w).map(|_| rng.below(256) as u8).collect();
            let img = GrayImage::new(h, w, data).unwrap();
            prop_assert_eq!(decode_pgm(&encode_pgm(&img)).unwrap(), img);
        }

        #[test]
        fn dld1_is_exact(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let n = dims.iter().product();
            let t = Tensor::new(dims, (0..n).map(|_| rng.normal() * 1e5).collect()).unwrap();
            prop_assert_eq!(decode_f64(&encode_f64(&t)).unwrap(), t);
        }
    }
}
