//! Portable float map (PFM) and binary PPM (P6) files.
//!
//! In memory, images are stored top row first. PFM stores the bottom row
//! first, so rows are flipped on read and write. Data is written
//! little-endian (negative scale in the header).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major float image with 1 or 3 channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FloatImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, value: f32) {
        self.data[(row * self.width + col) * self.channels + ch] = value;
    }
}

pub fn write_pfm(image: &FloatImage, path: impl AsRef<Path>) -> Result<()> {
    let magic = match image.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Validation(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "{magic}\n{} {}\n-1.0\n", image.width, image.height)?;
    let row_len = image.width * image.channels;
    for row in (0..image.height).rev() {
        for v in &image.data[row * row_len..(row + 1) * row_len] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatImage> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    // Three whitespace-terminated header tokens after the magic.
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, 1, "truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    pos += 1;
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, 1, format!("bad PFM magic `{other}`"))),
    };
    let width: usize = tokens[1].parse().map_err(|_| Error::parse(path, 2, "bad PFM width"))?;
    let height: usize = tokens[2].parse().map_err(|_| Error::parse(path, 2, "bad PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| Error::parse(path, 3, "bad PFM scale"))?;
    if scale == 0.0 {
        return Err(Error::parse(path, 3, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let count = width * height * channels;
    if bytes.len() < pos + 4 * count {
        return Err(Error::parse(path, 4, format!("PFM data truncated: need {count} floats")));
    }
    let mut image = FloatImage::new(width, height, channels);
    let row_len = width * channels;
    for (k, chunk) in bytes[pos..pos + 4 * count].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let file_row = k / row_len;
        let row = height - 1 - file_row;
        image.data[row * row_len + k % row_len] = v;
    }
    Ok(image)
}

/// Writes an 8-bit binary PPM. `rgb` is row-major `[r, g, b]` in `[0, 1]`.
pub fn write_ppm(width: usize, height: usize, rgb: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    if rgb.len() != width * height {
        return Err(Error::dim("ppm pixels", width * height, rgb.len()));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{width} {height}\n255\n")?;
    for px in rgb {
        let bytes = px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}
