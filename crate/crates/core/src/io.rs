//! PNG input/output and atomic file writes.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{check_dims, Image, Phase, RawMosaic, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            b => Err(Error::UnsupportedFormat(format!("bit depth {b} (expected 8 or 16)"))),
        }
    }

    pub fn max_value(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Quantizes a `[0, 1]` intensity: clamp, scale, round half away from zero.
pub fn quantize(v: f64, depth: BitDepth) -> u16 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * depth.max_value()).round() as u16
}

struct Decoded {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f64>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: color type {other:?} (expected RGB or grayscale)",
                path.display()
            )))
        }
    };
    let depth = match info.bit_depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: bit depth {other:?} (expected 8 or 16)",
                path.display()
            )))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let scale = depth.max_value();
    let samples: Vec<f64> = match depth {
        BitDepth::Eight => bytes.iter().map(|&b| b as f64 / scale).collect(),
        BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
            .collect(),
    };
    Ok(Decoded {
        height,
        width,
        channels,
        samples,
    })
}

/// Loads an 8- or 16-bit RGB or grayscale PNG into `[0, 1]`.
/// Grayscale is replicated to all three channels.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let d = decode(path)?;
    check_dims(d.height, d.width)?;
    let n = d.height * d.width;
    let mut data = vec![0.0; CHANNELS * n];
    for i in 0..n {
        for c in 0..CHANNELS {
            let src = if d.channels == 1 { i } else { i * 3 + c };
            data[c * n + i] = d.samples[src];
        }
    }
    Image::new(d.height, d.width, data)
}

/// Loads a grayscale PNG as Bayer readings with the given phase.
pub fn load_raw_png(path: impl AsRef<Path>, phase: Phase) -> Result<RawMosaic> {
    let path = path.as_ref();
    let d = decode(path)?;
    if d.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: raw mosaic must be a grayscale PNG",
            path.display()
        )));
    }
    RawMosaic::new(d.height, d.width, d.samples, phase)
}

fn encode(width: usize, height: usize, color: png::ColorType, depth: BitDepth, samples: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(match depth {
            BitDepth::Eight => png::BitDepth::Eight,
            BitDepth::Sixteen => png::BitDepth::Sixteen,
        });
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
        let bytes: Vec<u8> = match depth {
            BitDepth::Eight => samples.iter().map(|&s| s as u8).collect(),
            BitDepth::Sixteen => samples.iter().flat_map(|s| s.to_be_bytes()).collect(),
        };
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    }
    Ok(out)
}

/// Encodes an image as PNG bytes (RGB, clamped and rounded).
pub fn encode_png(image: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let n = image.pixels();
    let mut samples = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..CHANNELS {
            samples.push(quantize(image.data()[c * n + i], depth));
        }
    }
    encode(image.width(), image.height(), png::ColorType::Rgb, depth, &samples)
}

pub fn save_png(image: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let bytes = encode_png(image, depth)?;
    atomic_write(path.as_ref(), &bytes)
}

/// Encodes a single-channel field as a grayscale PNG.
pub fn encode_gray_png(height: usize, width: usize, values: &[f64], depth: BitDepth) -> Result<Vec<u8>> {
    let samples: Vec<u16> = values.iter().map(|&v| quantize(v, depth)).collect();
    encode(width, height, png::ColorType::Grayscale, depth, &samples)
}

pub fn save_raw_png(raw: &RawMosaic, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_gray_png(raw.height(), raw.width(), raw.data(), BitDepth::Sixteen)?;
    atomic_write(path.as_ref(), &bytes)
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = stage(path, bytes)?;
    commit(&tmp, path)
}

/// First half of [`atomic_write`]: writes the temporary file and returns its path.
pub fn stage(path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    let tmp = temp_path(path);
    let res = (|| {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
        Ok(())
    })();
    res.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })?;
    Ok(tmp)
}

pub fn commit(tmp: &Path, path: &Path) -> Result<()> {
    fs::rename(tmp, path).map_err(|e| {
        let _ = fs::remove_file(tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rules() {
        assert_eq!(quantize(0.5, BitDepth::Eight), 128);
        assert_eq!(quantize(1.2, BitDepth::Eight), 255);
        assert_eq!(quantize(-0.1, BitDepth::Eight), 0);
        assert_eq!(quantize(1.0, BitDepth::Sixteen), 65535);
    }

    #[test]
    fn sixteen_bit_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        let bytes = encode(2, 2, png::ColorType::Grayscale, BitDepth::Sixteen, &[32768, 0, 65535, 1]).unwrap();
        std::fs::write(&p, bytes).unwrap();
        let img = load_png(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 32768.0 / 65535.0);
        assert!((img.get(2, 0, 0) - 0.50000763).abs() < 1e-8);
        assert_eq!(img.get(1, 1, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 0.0);
    }

    #[test]
    fn eight_bit_extremes_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let img = Image::from_fn(4, 6, |c, y, x| ((c * 31 + y * 7 + x * 13) % 17) as f64 / 16.0);
        save_png(&img, &p, BitDepth::Eight).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let white = Image::filled(2, 2, 1.0);
        save_png(&white, &p, BitDepth::Eight).unwrap();
        assert!(load_png(&p).unwrap().data().iter().all(|&v| v == 1.0));
        let black = Image::filled(2, 2, 0.0);
        save_png(&black, &p, BitDepth::Eight).unwrap();
        assert!(load_png(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_odd_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(Error::Io { .. })));
        let p = dir.path().join("odd.png");
        let bytes = encode(3, 2, png::ColorType::Grayscale, BitDepth::Eight, &[0; 6]).unwrap();
        std::fs::write(&p, bytes).unwrap();
        let err = load_png(&p).unwrap_err();
        assert!(err.to_string().contains("even"), "{err}");
    }

    #[test]
    fn raw_png_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("raw.png");
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 15.0 * 0.9).collect();
        let raw = RawMosaic::new(4, 4, data, Phase::Rggb).unwrap();
        save_raw_png(&raw, &p).unwrap();
        let back = load_raw_png(&p, Phase::Rggb).unwrap();
        for (a, b) in raw.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0);
        }
    }
}
