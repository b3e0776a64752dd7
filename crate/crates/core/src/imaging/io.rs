//! File formats: binary PGM mosaics with a JSON sidecar, and PNG output.

use std::fs;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::path::{Path, PathBuf};

use super::types::{BayerImage, CameraMeta, EncodedImage};
use crate::error::{Error, Result};

/// Raw mosaic exactly as stored in a P5 PGM.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub samples: Vec<u16>,
}

impl RawFrame {
    pub fn to_bayer(&self, meta: &CameraMeta) -> Result<BayerImage> {
        BayerImage::from_raw(self.width, self.height, &self.samples, meta.clone())
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PGM header: missing or invalid {what}")))
    }
}

/// Parses a binary (P5) PGM. 16-bit samples are big-endian.
pub fn parse_pgm(bytes: &[u8]) -> Result<RawFrame> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format("PGM header not terminated".into()));
    }
    let raster = &bytes[cur.pos + 1..];
    let n = width * height;
    let samples: Vec<u16> = if maxval < 256 {
        if raster.len() < n {
            return Err(Error::Format(format!("PGM raster truncated: {} of {n} bytes", raster.len())));
        }
        raster[..n].iter().map(|&b| b as u16).collect()
    } else {
        if raster.len() < 2 * n {
            return Err(Error::Format(format!(
                "PGM raster truncated: {} of {} bytes",
                raster.len(),
                2 * n
            )));
        }
        raster[..2 * n]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if let Some(v) = samples.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Format(format!("PGM sample {v} exceeds maxval {maxval}")));
    }
    Ok(RawFrame {
        width,
        height,
        maxval: maxval as u16,
        samples,
    })
}

pub fn encode_pgm(frame: &RawFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", frame.width, frame.height, frame.maxval).into_bytes();
    if frame.maxval < 256 {
        out.extend(frame.samples.iter().map(|&v| v as u8));
    } else {
        for v in &frame.samples {
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
    out
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    static SEQ: AtomicU64 = AtomicU64::new(0);
    tmp_name.push(format!(".{}.{}.tmp", std::process::id(), SEQ.fetch_add(1, Ordering::Relaxed)));
    let tmp = dir.join(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<RawFrame> {
    parse_pgm(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_pgm(path: &Path, frame: &RawFrame) -> Result<()> {
    write_file_atomic(path, &encode_pgm(frame))
}

/// `foo.pgm` -> `foo.meta.json`.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    let stem = pgm.file_stem().map(|s| s.to_os_string()).unwrap_or_default();
    let mut name = stem;
    name.push(".meta.json");
    pgm.with_file_name(name)
}

pub fn parse_meta(bytes: &[u8]) -> Result<CameraMeta> {
    let meta: CameraMeta = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("camera sidecar: {e}")))?;
    meta.validate()?;
    Ok(meta)
}

pub fn encode_meta(meta: &CameraMeta) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(meta).expect("camera meta serializes");
    out.push(b'\n');
    out
}

pub fn read_meta(path: &Path) -> Result<CameraMeta> {
    parse_meta(&read_file(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_meta(path: &Path, meta: &CameraMeta) -> Result<()> {
    write_file_atomic(path, &encode_meta(meta))
}

/// Loads a mosaic and its sidecar (defaulting to `<stem>.meta.json`).
pub fn load_raw(pgm: &Path, meta: Option<&Path>) -> Result<BayerImage> {
    let meta_path = meta.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(pgm));
    let frame = read_pgm(pgm)?;
    let meta = read_meta(&meta_path)?;
    frame.to_bayer(&meta)
}

fn png_err(e: png::EncodingError) -> Error {
    Error::Format(format!("PNG encode: {e}"))
}

/// 8-bit RGB PNG with optional tEXt chunks.
pub fn encode_png8(img: &EncodedImage, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string()).map_err(png_err)?;
        }
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&img.interleaved()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(buf)
}

/// 16-bit RGB PNG from interleaved samples.
pub fn encode_png16(width: usize, height: usize, rgb: &[u16]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Dimension(format!(
            "expected {} samples, got {}",
            width * height * 3,
            rgb.len()
        )));
    }
    let bytes: Vec<u8> = rgb.iter().flat_map(|v| v.to_be_bytes()).collect();
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(buf)
}

/// Decoded PNG plus its tEXt chunks.
pub struct DecodedPng {
    pub image: EncodedImage,
    pub text: Vec<(String, String)>,
}

/// Decodes RGB/RGBA/gray PNGs to 8-bit RGB (16-bit input is rounded down to 8).
pub fn decode_png(bytes: &[u8]) -> Result<DecodedPng> {
    let derr = |e: png::DecodingError| Error::Format(format!("PNG decode: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(derr)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(derr)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&v| [v, v, v]).collect(),
        png::ColorType::GrayscaleAlpha => {
            buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect()
        }
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok(DecodedPng {
        image: EncodedImage::from_interleaved(w, h, &rgb)?,
        text,
    })
}

pub fn read_png(path: &Path) -> Result<EncodedImage> {
    decode_png(&read_file(path)?)
        .map(|d| d.image)
        .map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{CfaPattern, ColorMatrix};

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# sensor dump\n2 1\n1023\n".to_vec();
        bytes.extend_from_slice(&[0x03, 0xff, 0x00, 0x10]);
        let f = parse_pgm(&bytes).unwrap();
        assert_eq!(f.samples, vec![1023, 16]);
        assert_eq!((f.width, f.height, f.maxval), (2, 1, 1023));
    }

    #[test]
    fn pgm_rejects_bad_input() {
        assert!(matches!(parse_pgm(b"P6\n1 1\n255\n\0\0\0"), Err(Error::Format(_))));
        assert!(matches!(parse_pgm(b"P5\n2 2\n65535\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(parse_pgm(b"P5\n1 1\n100\n\xff"), Err(Error::Format(_))));
    }

    #[test]
    fn eight_bit_pgm() {
        let f = RawFrame { width: 2, height: 2, maxval: 255, samples: vec![0, 1, 254, 255] };
        let bytes = encode_pgm(&f);
        assert_eq!(bytes.len(), "P5\n2 2\n255\n".len() + 4);
        assert_eq!(parse_pgm(&bytes).unwrap(), f);
    }

    #[test]
    fn meta_roundtrip_is_byte_stable() {
        let meta = CameraMeta {
            cfa: CfaPattern::Grbg,
            black_level: 512,
            white_level: 16383,
            ccm: ColorMatrix::SRGB_TO_XYZ,
        };
        let bytes = encode_meta(&meta);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"cfa\": \"GRBG\""));
        let back = parse_meta(&bytes).unwrap();
        assert_eq!(back, meta);
        assert_eq!(encode_meta(&back), bytes);
    }

    #[test]
    fn meta_validation() {
        let bad = br#"{"cfa":"RGGB","black_level":10,"white_level":5,"ccm":[[1,0,0],[0,1,0],[0,0,1]]}"#;
        assert!(parse_meta(bad).is_err());
        let singular = br#"{"cfa":"RGGB","black_level":0,"white_level":5,"ccm":[[1,0,0],[1,0,0],[0,0,1]]}"#;
        assert!(parse_meta(singular).is_err());
    }

    #[test]
    fn png8_roundtrip_with_text() {
        let img = EncodedImage::from_interleaved(2, 1, &[1, 2, 3, 250, 251, 252]).unwrap();
        let bytes = encode_png8(&img, &[("pipeline", "preview-v1")]).unwrap();
        let dec = decode_png(&bytes).unwrap();
        assert_eq!(dec.image, img);
        assert_eq!(dec.text, vec![("pipeline".to_string(), "preview-v1".to_string())]);
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("raw/a01.pgm")), Path::new("raw/a01.meta.json"));
    }
}
