//! Binary PGM (P5) and PPM (P6) images with 8-bit samples.

use std::fs;
use std::path::Path;

use lsattn_core::data::Image;

use crate::error::CliError;

pub fn encode(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

/// Skips whitespace and `#` comments, then reads one unsigned header field.
fn header_field(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    loop {
        match bytes.get(*pos)? {
            b'#' => {
                while *bytes.get(*pos)? != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

pub fn decode(bytes: &[u8]) -> Result<Image, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("not a binary PGM/PPM file".into()),
    };
    let mut pos = 2;
    let mut field = |name: &str| header_field(bytes, &mut pos).ok_or_else(|| format!("bad {name} in header"));
    let width = field("width")?;
    let height = field("height")?;
    let maxval = field("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    let need = width * height * channels;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("expected {need} sample bytes, found {}", bytes.len().saturating_sub(pos)))?;
    Image::new(width, height, channels, data.to_vec()).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<Image, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::usage(format!("cannot read image {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, image: &Image) -> Result<(), CliError> {
    fs::write(path, encode(image)).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}
