//! Core raster types and bit-exact file I/O.
//!
//! Images travel as binary netpbm (PGM `P5` for grayscale and label masks,
//! PPM `P6` for color) and tensors as the `S3DT` format: magic `S3DT`,
//! version byte 1, rank as u32 LE, each dim as u32 LE, payload as f32 LE.
//! All writers are byte-deterministic.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Grayscale line drawing with values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sketch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Sketch {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Value(format!(
                "sketch data length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Value(format!(
                "sketch value {} at pixel {} outside [0,1]",
                data[i], i
            )));
        }
        Ok(Sketch {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Sketch {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }
}

/// Integer label map; every label lies in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl SegMask {
    pub fn new(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Value(format!("num_classes {num_classes} < 2")));
        }
        if labels.len() != width * height {
            return Err(Error::Value(format!(
                "mask label length {} != {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Value(format!(
                "label {} at pixel {} >= num_classes {}",
                labels[i], i, num_classes
            )));
        }
        Ok(SegMask {
            width,
            height,
            num_classes,
            labels,
        })
    }
}

/// One-hot lift of a [`SegMask`], indexed `(pixel, class)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotMask {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

/// Per-pixel class probabilities, indexed `(pixel, class)`; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, num_classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * num_classes {
            return Err(Error::Value("probmap length mismatch".into()));
        }
        for (i, chunk) in data.chunks(num_classes).enumerate() {
            let s: f64 = chunk.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Value(format!("pixel {i} probabilities sum to {s}")));
            }
        }
        Ok(ProbMap {
            width,
            height,
            num_classes,
            data,
        })
    }
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Value("tensor shape entries must be >= 1".into()));
        }
        if data.len() != n {
            return Err(Error::Value(format!(
                "tensor data length {} != shape product {}",
                data.len(),
                n
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// RGB image with values in [0, 1], indexed `(pixel, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

// ---------------------------------------------------------------------------
// netpbm
// ---------------------------------------------------------------------------

struct HeaderParse {
    width: usize,
    height: usize,
    maxval: usize,
    payload_at: usize,
}

/// Parses "P5"/"P6" headers: magic, whitespace/comment separated width,
/// height, maxval, then a single whitespace byte before the payload.
fn parse_netpbm_header(bytes: &[u8], magic: &[u8; 2], path: &str) -> Result<HeaderParse> {
    let fmt = |offset: usize, msg: String| Error::Format {
        offset,
        msg: format!("{msg} in {path}"),
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(fmt(
            0,
            format!(
                "expected magic {:?}",
                std::str::from_utf8(magic).unwrap_or("?")
            ),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(fmt(pos, "truncated header".into())),
            }
        }
        let start = pos;
        let mut value: usize = 0;
        while let Some(&b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                value = value * 10 + (b - b'0') as usize;
                pos += 1;
            } else {
                break;
            }
        }
        if pos == start {
            return Err(fmt(pos, "expected ASCII integer".into()));
        }
        *field = value;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt(pos, "expected single whitespace before payload".into())),
    }
    Ok(HeaderParse {
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        payload_at: pos,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn pgm_payload(path: &Path) -> Result<(HeaderParse, Vec<u8>)> {
    let bytes = read_file(path)?;
    let h = parse_netpbm_header(&bytes, b"P5", &path.display().to_string())?;
    if h.maxval != 255 {
        return Err(Error::Format {
            offset: h.payload_at,
            msg: format!("unsupported maxval {} (only 255)", h.maxval),
        });
    }
    let n = h.width * h.height;
    let payload = &bytes[h.payload_at.min(bytes.len())..];
    if payload.len() < n {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: got {} of {} bytes", payload.len(), n),
        });
    }
    Ok((HeaderParse { payload_at: 0, ..h }, payload[..n].to_vec()))
}

/// Loads a binary PGM (`P5`, maxval 255) as a sketch with values v/255.
pub fn load_pgm(path: &Path) -> Result<Sketch> {
    let (h, payload) = pgm_payload(path)?;
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Sketch::new(h.width, h.height, data)
}

/// Writes a sketch as binary PGM; value v stored as round-half-up of 255·v.
pub fn save_pgm(sketch: &Sketch, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", sketch.width, sketch.height).into_bytes();
    out.extend(sketch.data.iter().map(|&v| round_half_up_255(v)));
    write_file(path, &out)
}

/// Writes a mask as binary PGM whose payload bytes are the raw label indices.
pub fn save_mask_pgm(mask: &SegMask, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.labels);
    write_file(path, &out)
}

/// Loads a raw-label PGM; every payload byte must be < `num_classes`.
pub fn load_mask_pgm(path: &Path, num_classes: usize) -> Result<SegMask> {
    let (h, payload) = pgm_payload(path)?;
    if let Some(i) = payload.iter().position(|&b| b as usize >= num_classes) {
        return Err(Error::Value(format!(
            "label {} at pixel {} >= num_classes {} in {}",
            payload[i],
            i,
            num_classes,
            path.display()
        )));
    }
    SegMask::new(h.width, h.height, num_classes, payload)
}

fn round_half_up_255(v: f64) -> u8 {
    // round-half-up, clamped to the byte range
    let x = (255.0 * v + 0.5).floor();
    x.clamp(0.0, 255.0) as u8
}

/// Writes an RGB image as binary PPM (`P6`, maxval 255).
pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(i) = img.data.iter().position(|v| v.is_nan()) {
        return Err(Error::Value(format!("NaN at component {i}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| round_half_up_255(v)));
    write_file(path, &out)
}

/// Loads a binary PPM (`P6`, maxval 255).
pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = read_file(path)?;
    let h = parse_netpbm_header(&bytes, b"P6", &path.display().to_string())?;
    if h.maxval != 255 {
        return Err(Error::Format {
            offset: h.payload_at,
            msg: format!("unsupported maxval {}", h.maxval),
        });
    }
    let n = h.width * h.height * 3;
    let payload = &bytes[h.payload_at.min(bytes.len())..];
    if payload.len() < n {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: "truncated payload".into(),
        });
    }
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        data: payload[..n].iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

// ---------------------------------------------------------------------------
// one-hot / palette
// ---------------------------------------------------------------------------

/// Lifts a label map to its exactly-one-hot encoding.
pub fn one_hot(mask: &SegMask) -> OneHotMask {
    let c = mask.num_classes;
    let mut data = vec![0.0; mask.labels.len() * c];
    for (i, &l) in mask.labels.iter().enumerate() {
        data[i * c + l as usize] = 1.0;
    }
    OneHotMask {
        width: mask.width,
        height: mask.height,
        num_classes: c,
        data,
    }
}

/// Per-pixel argmax; inverse of [`one_hot`]. Ties break toward the lower class.
pub fn argmax_mask(probs: &ProbMap) -> SegMask {
    let c = probs.num_classes;
    let labels = probs
        .data
        .chunks(c)
        .map(|row| {
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    SegMask {
        width: probs.width,
        height: probs.height,
        num_classes: c,
        labels,
    }
}

/// Fixed class palette: class i maps to hue i·360/C at full saturation/value.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = class as f64 * 360.0 / num_classes as f64;
    hsv_to_rgb(h, 1.0, 1.0)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Colorizes a label map with the fixed palette for human viewing.
pub fn colorize_mask(mask: &SegMask) -> RgbImage {
    let mut data = Vec::with_capacity(mask.labels.len() * 3);
    for &l in &mask.labels {
        data.extend(class_color(l as usize, mask.num_classes));
    }
    RgbImage {
        width: mask.width,
        height: mask.height,
        data,
    }
}

// ---------------------------------------------------------------------------
// S3DT tensor format
// ---------------------------------------------------------------------------

/// Writes a tensor: magic `S3DT`, version 1, rank u32 LE, dims u32 LE, f32 LE payload.
pub fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(9 + 4 * t.shape.len() + 4 * t.data.len());
    out.extend_from_slice(b"S3DT");
    out.push(1);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &out)
}

/// Reads an `S3DT` tensor, widening the f32 payload to f64.
pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let fmt = |offset: usize, msg: &str| Error::Format {
        offset,
        msg: format!("{} in {}", msg, path.display()),
    };
    if bytes.len() < 4 || &bytes[..4] != b"S3DT" {
        return Err(fmt(0, "bad magic"));
    }
    if bytes.get(4) != Some(&1) {
        return Err(fmt(4, "unsupported version"));
    }
    let take_u32 = |at: usize| -> Result<u32> {
        let sl = bytes
            .get(at..at + 4)
            .ok_or_else(|| fmt(bytes.len(), "truncated header"))?;
        Ok(u32::from_le_bytes(sl.try_into().unwrap()))
    };
    let rank = take_u32(5)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(take_u32(9 + 4 * i)? as usize);
    }
    let payload_at = 9 + 4 * rank;
    let n: usize = shape.iter().product();
    let payload = bytes
        .get(payload_at..payload_at + 4 * n)
        .ok_or_else(|| fmt(bytes.len(), "truncated payload"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use tempfile::tempdir;

    #[test]
    fn pgm_endpoint_mapping() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_file(&p, b"P5\n2 1\n255\n\x00\xff").unwrap();
        let s = load_pgm(&p).unwrap();
        assert_eq!(s.data, vec![0.0, 1.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rt.pgm");
        let mut r = SplitMix64::new(3);
        let data: Vec<f64> = (0..64).map(|_| r.below(256) as f64 / 255.0).collect();
        let s = Sketch::new(8, 8, data).unwrap();
        save_pgm(&s, &p).unwrap();
        assert_eq!(load_pgm(&p).unwrap(), s);
    }

    #[test]
    fn pgm_rejects_ascii_variant() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_file(&p, b"P2\n1 1\n255\n0").unwrap();
        match load_pgm(&p) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn mask_pgm_raw_labels_and_bound_check() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = SegMask::new(3, 1, 3, vec![0, 1, 2]).unwrap();
        save_mask_pgm(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 1, 2]);
        assert_eq!(load_mask_pgm(&p, 3).unwrap(), m);
        match load_mask_pgm(&p, 2) {
            Err(Error::Value(msg)) => assert!(msg.contains("pixel 2"), "{msg}"),
            other => panic!("expected value error, got {other:?}"),
        }
    }

    #[test]
    fn ppm_rounding_rule() {
        assert_eq!(round_half_up_255(0.0), 0);
        assert_eq!(round_half_up_255(1.0), 255);
        // 255 * 0.5 = 127.5 rounds half-up to 128
        assert_eq!(round_half_up_255(0.5), 128);
    }

    #[test]
    fn ppm_all_zero_all_one() {
        let dir = tempdir().unwrap();
        for (v, byte) in [(0.0, 0u8), (1.0, 0xff)] {
            let p = dir.path().join(format!("{byte}.ppm"));
            let img = RgbImage {
                width: 2,
                height: 2,
                data: vec![v; 12],
            };
            save_ppm(&img, &p).unwrap();
            let bytes = fs::read(&p).unwrap();
            assert!(bytes[bytes.len() - 12..].iter().all(|&b| b == byte));
        }
    }

    #[test]
    fn ppm_rejects_nan() {
        let dir = tempdir().unwrap();
        let img = RgbImage {
            width: 1,
            height: 1,
            data: vec![0.0, f64::NAN, 0.0],
        };
        assert!(matches!(
            save_ppm(&img, &dir.path().join("n.ppm")),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn one_hot_basic_and_inverse() {
        let m = SegMask::new(2, 1, 2, vec![0, 1]).unwrap();
        let oh = one_hot(&m);
        assert_eq!(oh.data, vec![1.0, 0.0, 0.0, 1.0]);
        let probs = ProbMap::new(2, 1, 2, oh.data.clone()).unwrap();
        assert_eq!(argmax_mask(&probs).labels, m.labels);

        let m3 = SegMask::new(1, 1, 3, vec![2]).unwrap();
        assert_eq!(one_hot(&m3).data, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn one_hot_exactly_one_per_pixel_sweep() {
        let mut r = SplitMix64::new(11);
        for _ in 0..50 {
            let c = 2 + r.below(6);
            let labels: Vec<u8> = (0..32).map(|_| r.below(c) as u8).collect();
            let m = SegMask::new(8, 4, c, labels).unwrap();
            let oh = one_hot(&m);
            for px in oh.data.chunks(c) {
                assert_eq!(px.iter().filter(|&&v| v == 1.0).count(), 1);
                assert_eq!(px.iter().filter(|&&v| v == 0.0).count(), c - 1);
            }
        }
    }

    #[test]
    fn tensor_known_bytes() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.s3dt");
        let t = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        save_tensor(&t, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let mut expect = b"S3DT\x01".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x80, 0xBF]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn tensor_round_trip_f32_precision() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("t.s3dt");
        let mut r = SplitMix64::new(5);
        let data: Vec<f64> = (0..24).map(|_| r.range(-10.0, 10.0)).collect();
        let t = Tensor::new(vec![2, 3, 4], data).unwrap();
        save_tensor(&t, &p).unwrap();
        let back = load_tensor(&p).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in t.data.iter().zip(&back.data) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn tensor_empty_file_is_format_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("e.s3dt");
        write_file(&p, b"").unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn byte_deterministic_outputs() {
        let dir = tempdir().unwrap();
        let s = Sketch::new(2, 2, vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let (p1, p2) = (dir.path().join("1.pgm"), dir.path().join("2.pgm"));
        save_pgm(&s, &p1).unwrap();
        save_pgm(&s, &p2).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }
}
