//! Single-channel images, binary masks, and bit-exact PGM file I/O.
//!
//! An [`Image`] stores row-major intensities as `f64`. Files are read and
//! written in the Netpbm PGM formats: ASCII `P2` and binary `P5` on input,
//! always `P5` on output. Intensities on disk are integer samples in
//! `0..=maxval`; in memory they are scaled to `[0, 1]` by dividing by the
//! file's maxval. Masks are stored on disk as PGM with values `{0, maxval}`
//! and mapped to `{0, 1}` in memory.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel intensity grid with row-major `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Build an image from row-major data. All values must be finite and
    /// `data.len()` must equal `width * height`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage {
                reason: format!("dimensions {width}x{height} must be >= 1"),
            });
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage {
                reason: format!(
                    "data length {} does not equal {}x{}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidImage {
                reason: format!("non-finite intensity {v}"),
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Image of the given size filled with a single value.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = value;
    }

    /// Row `y` as a slice.
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }
}

/// Per-pixel binary target labels. Values are strictly `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage {
                reason: format!("dimensions {width}x{height} must be >= 1"),
            });
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage {
                reason: format!(
                    "mask length {} does not equal {}x{}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::MaskNotBinary { value: v as f64 });
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    /// All-background mask.
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Mask::new(width, height, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        debug_assert!(x < self.width && y < self.height && value <= 1);
        self.data[y * self.width + x] = value;
    }

    /// Number of target (1) pixels.
    pub fn target_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

// ---------------------------------------------------------------------------
// PGM reading
// ---------------------------------------------------------------------------

/// Read a PGM file (`P2` ASCII or `P5` binary, maxval <= 65535) into an
/// [`Image`] with intensities scaled to `[0, 1]`.
///
/// `#` comments in the header (and between `P2` samples) are skipped. `P5`
/// samples are one byte for maxval < 256 and two bytes big-endian otherwise.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Decode PGM bytes. Split out from [`read_pgm`] so in-memory fixtures can be
/// tested without touching the filesystem.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut cursor = 0usize;

    let magic = next_header_token(bytes, &mut cursor)?;
    if magic != "P2" && magic != "P5" {
        return Err(Error::PgmMagic { found: magic });
    }

    let width = parse_header_number(bytes, &mut cursor, "width")?;
    let height = parse_header_number(bytes, &mut cursor, "height")?;
    let maxval = parse_header_number(bytes, &mut cursor, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::PgmHeader {
            reason: format!("zero dimension {width}x{height}"),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::PgmMaxval { maxval });
    }

    let expected = (width * height) as usize;
    let max = maxval as f64;
    let mut data = Vec::with_capacity(expected);

    if magic == "P2" {
        while data.len() < expected {
            let tok = match next_header_token(bytes, &mut cursor) {
                Ok(t) => t,
                Err(_) => {
                    return Err(Error::PgmTruncated {
                        expected,
                        found: data.len(),
                    })
                }
            };
            let v: u64 = tok.parse().map_err(|_| Error::PgmHeader {
                reason: format!("non-numeric sample {tok:?}"),
            })?;
            if v > maxval {
                return Err(Error::PgmHeader {
                    reason: format!("sample {v} exceeds maxval {maxval}"),
                });
            }
            data.push(v as f64 / max);
        }
    } else {
        // P5: exactly one whitespace byte after maxval, then raw samples.
        if cursor >= bytes.len() || !bytes[cursor].is_ascii_whitespace() {
            return Err(Error::PgmHeader {
                reason: "missing whitespace after maxval".into(),
            });
        }
        cursor += 1;
        let wide = maxval > 255;
        let sample_bytes = if wide { 2 } else { 1 };
        let available = (bytes.len() - cursor) / sample_bytes;
        if available < expected {
            return Err(Error::PgmTruncated {
                expected,
                found: available,
            });
        }
        for i in 0..expected {
            let off = cursor + i * sample_bytes;
            let v = if wide {
                u16::from_be_bytes([bytes[off], bytes[off + 1]]) as u64
            } else {
                bytes[off] as u64
            };
            if v > maxval {
                return Err(Error::PgmHeader {
                    reason: format!("sample {v} exceeds maxval {maxval}"),
                });
            }
            data.push(v as f64 / max);
        }
    }

    Image::new(width as usize, height as usize, data)
}

fn skip_whitespace_and_comments(bytes: &[u8], cursor: &mut usize) {
    loop {
        while *cursor < bytes.len() && bytes[*cursor].is_ascii_whitespace() {
            *cursor += 1;
        }
        if *cursor < bytes.len() && bytes[*cursor] == b'#' {
            while *cursor < bytes.len() && bytes[*cursor] != b'\n' {
                *cursor += 1;
            }
        } else {
            return;
        }
    }
}

fn next_header_token(bytes: &[u8], cursor: &mut usize) -> Result<String> {
    skip_whitespace_and_comments(bytes, cursor);
    let start = *cursor;
    while *cursor < bytes.len()
        && !bytes[*cursor].is_ascii_whitespace()
        && bytes[*cursor] != b'#'
    {
        *cursor += 1;
    }
    if start == *cursor {
        return Err(Error::PgmHeader {
            reason: "unexpected end of header".into(),
        });
    }
    String::from_utf8(bytes[start..*cursor].to_vec()).map_err(|_| Error::PgmHeader {
        reason: "non-ASCII header token".into(),
    })
}

fn parse_header_number(bytes: &[u8], cursor: &mut usize, field: &str) -> Result<u64> {
    let tok = next_header_token(bytes, cursor)?;
    tok.parse().map_err(|_| Error::PgmHeader {
        reason: format!("invalid {field} {tok:?}"),
    })
}

// ---------------------------------------------------------------------------
// PGM writing
// ---------------------------------------------------------------------------

/// Write an image as binary `P5` PGM. `maxval` must be 255 or 65535.
///
/// Samples are `round(intensity * maxval)` with ties rounded up (half-up),
/// clamped to `0..=maxval`, so golden files are reproducible.
pub fn write_pgm(image: &Image, path: impl AsRef<Path>, maxval: u32) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(image, maxval)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Encode an image as `P5` bytes. See [`write_pgm`].
pub fn encode_pgm(image: &Image, maxval: u32) -> Result<Vec<u8>> {
    if maxval != 255 && maxval != 65535 {
        return Err(Error::PgmMaxval {
            maxval: maxval as u64,
        });
    }
    let mut out = Vec::with_capacity(32 + image.data.len() * if maxval > 255 { 2 } else { 1 });
    out.extend_from_slice(format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).as_bytes());
    let max = maxval as f64;
    for &v in &image.data {
        let q = (v * max + 0.5).floor().clamp(0.0, max) as u32;
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

/// Read a mask stored as PGM: samples above half of maxval map to 1.
pub fn read_mask_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let image = read_pgm(path)?;
    let data = image.data.iter().map(|&v| (v > 0.5) as u8).collect();
    Mask::new(image.width, image.height, data)
}

/// Write a mask as PGM with on-disk values `{0, 255}`.
pub fn write_mask_pgm(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let data = mask.data.iter().map(|&v| v as f64).collect();
    let image = Image::new(mask.width, mask.height, data)?;
    write_pgm(&image, path, 255)
}

// ---------------------------------------------------------------------------
// Normalization and padding
// ---------------------------------------------------------------------------

/// Min-max scale intensities to `[0, 1]`. A constant image maps to all
/// zeros: a constant carries no contrast information and this avoids a
/// division by zero.
pub fn normalize(image: &Image) -> Image {
    let min = image.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = image.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let data = if range == 0.0 {
        vec![0.0; image.data.len()]
    } else {
        image.data.iter().map(|&v| (v - min) / range).collect()
    };
    Image {
        width: image.width,
        height: image.height,
        data,
    }
}

/// Pad an image by replicating the nearest edge pixel into the margins.
pub fn replicate_pad(image: &Image, top: usize, bottom: usize, left: usize, right: usize) -> Image {
    let new_w = image.width + left + right;
    let new_h = image.height + top + bottom;
    let mut data = vec![0.0; new_w * new_h];
    for y in 0..new_h {
        let src_y = y.saturating_sub(top).min(image.height - 1);
        for x in 0..new_w {
            let src_x = x.saturating_sub(left).min(image.width - 1);
            data[y * new_w + x] = image.get(src_x, src_y);
        }
    }
    Image {
        width: new_w,
        height: new_h,
        data,
    }
}

/// Crop a `width` x `height` window whose top-left corner is `(left, top)`.
pub fn crop(image: &Image, left: usize, top: usize, width: usize, height: usize) -> Result<Image> {
    if left + width > image.width || top + height > image.height {
        return Err(Error::DimensionMismatch(format!(
            "crop {width}x{height}+{left}+{top} exceeds {}x{}",
            image.width, image.height
        )));
    }
    let mut data = Vec::with_capacity(width * height);
    for y in top..top + height {
        data.extend_from_slice(&image.data[y * image.width + left..y * image.width + left + width]);
    }
    Image::new(width, height, data)
}
