//! Binary PPM (`P6`) and PGM (`P5`) with 8-bit samples.

use std::path::Path;

use rspu_core::data::Image;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("ppm: {message} at byte {position}")]
pub struct PpmError {
    pub position: usize,
    pub message: String,
}

fn fail<T>(position: usize, message: impl Into<String>) -> Result<T, PpmError> {
    Err(PpmError {
        position,
        message: message.into(),
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 3-channel image as `P6` or a 1-channel image as `P5`. Samples
/// are clamped to `[0, 1]` and rounded to the nearest of 256 levels. Each
/// line of `comment` becomes a `#` line after the magic.
pub fn encode(img: &Image, comment: Option<&str>) -> Result<Vec<u8>, PpmError> {
    let magic = match img.channels() {
        3 => "P6",
        1 => "P5",
        c => return fail(0, format!("cannot encode {c}-channel image")),
    };
    let mut out = format!("{magic}\n").into_bytes();
    for line in comment.into_iter().flat_map(str::lines) {
        out.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n255\n", img.width(), img.height()).as_bytes());
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return match self.bytes.get(self.pos) {
                None => fail(self.pos, format!("truncated header, expected {what}")),
                Some(_) => fail(self.pos, format!("expected {what}")),
            };
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image, PpmError> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        Some(m) => return fail(0, format!("unsupported magic {:?}", String::from_utf8_lossy(m))),
        None => return fail(0, "truncated header, expected magic"),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) && bytes.get(2) != Some(&b'#') {
        return fail(2, "expected whitespace after magic");
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    cur.skip_space_and_comments();
    let maxval_pos = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return fail(maxval_pos, format!("maxval must be 255, got {maxval}"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return fail(cur.pos, "expected single whitespace before raster"),
        None => return fail(cur.pos, "truncated before raster"),
    }
    if width == 0 || height == 0 {
        return fail(cur.pos, "zero image dimension");
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .map_or_else(|| fail(cur.pos, "image dimensions overflow"), Ok)?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return fail(bytes.len(), format!("truncated raster, {} of {} bytes", raster.len(), need));
    }
    if raster.len() > need {
        return fail(cur.pos + need, "trailing bytes after raster");
    }
    let data = raster.iter().map(|&b| f64::from(b) / 255.0).collect();
    Image::new(width, height, channels, data).map_or_else(|e| fail(cur.pos, e.to_string()), Ok)
}

pub fn read(path: &Path) -> crate::CliResult<Image> {
    let bytes = std::fs::read(path).map_err(crate::CliError::io(path))?;
    decode(&bytes).map_err(|e| crate::CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, img: &Image, comment: Option<&str>) -> crate::CliResult<()> {
    let bytes = encode(img, comment)?;
    std::fs::write(path, bytes).map_err(crate::CliError::io(path))
}
