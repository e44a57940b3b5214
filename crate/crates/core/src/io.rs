//! PFM, PGM/PPM, Middlebury `.flo` and JSON helpers.
//!
//! Float maps are stored as 32-bit PFM (little-endian, rows bottom to top) and
//! flows as `.flo`. Both are exact for values representable in `f32`. 8-bit
//! images map `k` to `k / 255` and back by rounding, so 8-bit data round
//! trips exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::features::FeaturePyramid;
use crate::geometry::{DepthMap, FlowField};
use crate::imaging::{ImagePlane, Mask};
use crate::losses::SegmentMap;
use crate::{Error, Result};

/// Magic number at the start of a Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated header reader for the netpbm family.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space(&mut self, comments: bool) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if comments && b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str, comments: bool) -> Result<&'a str> {
        self.skip_space(comments);
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::parse(start, format!("non-ASCII {what}")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str, comments: bool) -> Result<T> {
        let start = self.pos;
        let tok = self.token(what, comments)?;
        tok.parse()
            .map_err(|_| Error::parse(start, format!("invalid {what} {tok:?}")))
    }

    fn dimension(&mut self, what: &str, comments: bool) -> Result<usize> {
        let start = self.pos;
        let v: usize = self.number(what, comments)?;
        if v == 0 {
            return Err(Error::parse(start, format!("{what} must be positive")));
        }
        Ok(v)
    }

    /// Consumes the single whitespace byte that ends a header and returns the
    /// payload offset.
    fn end(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::parse(self.pos, "header must end with one whitespace byte")),
        }
    }
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(start..start + len)
        .ok_or_else(|| Error::parse(bytes.len(), format!("truncated data: expected {len} bytes from offset {start}")))
}

/// Encodes a 1- or 3-channel image as little-endian PFM.
pub fn encode_pfm(img: &ImagePlane) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Config(format!("PFM stores 1 or 3 channels, not {c}"))),
    };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImagePlane> {
    let mut hdr = Header::new(bytes);
    let channels = match hdr.token("magic", false)? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::parse(0, format!("bad PFM magic {other:?}"))),
    };
    let width = hdr.dimension("width", false)?;
    let height = hdr.dimension("height", false)?;
    let scale_at = hdr.pos;
    let scale: f64 = hdr.number("scale", false)?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::parse(scale_at, "PFM scale must be non-zero"));
    }
    let little = scale < 0.0;
    let start = hdr.end()?;
    let row = width * channels;
    let data = payload(bytes, start, row * height * 4)?;
    let mut values = vec![0.0; row * height];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunk of four");
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / row, k % row);
        values[(height - 1 - file_row) * row + col] = v as f64;
    }
    ImagePlane::new(width, height, channels, values).map_err(|e| Error::parse(start, e.to_string()))
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(img)?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

/// Depth as a single-channel float map; invalid pixels are written as 0.
pub fn depth_to_plane(depth: &DepthMap) -> ImagePlane {
    ImagePlane {
        width: depth.width,
        height: depth.height,
        channels: 1,
        data: depth
            .values
            .iter()
            .zip(&depth.valid)
            .map(|(&d, &ok)| if ok { d } else { 0.0 })
            .collect(),
    }
}

pub fn write_depth_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_pfm(path, &depth_to_plane(depth))
}

/// Reads a depth PFM; non-positive values are marked invalid.
pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let img = read_pfm(path)?;
    if img.channels != 1 {
        return Err(Error::Config("depth PFM must have one channel".into()));
    }
    let valid = img.data.iter().map(|&d| d > 0.0).collect();
    let values = img.data.iter().map(|&d| d.max(0.0)).collect();
    DepthMap::with_mask(img.width, img.height, values, valid)
}

fn quantize(v: f64, maxval: u32) -> u32 {
    (v.clamp(0.0, 1.0) * maxval as f64).round() as u32
}

/// Raw netpbm samples: `(width, height, channels, maxval, samples)`.
fn decode_pnm_raw(bytes: &[u8]) -> Result<(usize, usize, usize, u32, Vec<u32>)> {
    let mut hdr = Header::new(bytes);
    let channels = match hdr.token("magic", false)? {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::parse(0, format!("unsupported netpbm magic {other:?}"))),
    };
    let width = hdr.dimension("width", true)?;
    let height = hdr.dimension("height", true)?;
    let max_at = hdr.pos;
    let maxval: u32 = hdr.number("maxval", true)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::parse(max_at, format!("maxval {maxval} outside 1..=65535")));
    }
    let start = hdr.end()?;
    let n = width * height * channels;
    let wide = maxval > 255;
    let data = payload(bytes, start, if wide { 2 * n } else { n })?;
    let samples: Vec<u32> = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    } else {
        data.iter().map(|&b| b as u32).collect()
    };
    if let Some(k) = samples.iter().position(|&s| s > maxval) {
        let width_bytes = if wide { 2 } else { 1 };
        return Err(Error::parse(start + k * width_bytes, "sample exceeds maxval"));
    }
    Ok((width, height, channels, maxval, samples))
}

fn encode_pnm_raw(width: usize, height: usize, channels: usize, maxval: u32, samples: &[u32]) -> Vec<u8> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval > 255 {
        for s in samples {
            out.extend_from_slice(&(*s as u16).to_be_bytes());
        }
    } else {
        out.extend(samples.iter().map(|&s| s as u8));
    }
    out
}

/// 8-bit PGM (one channel) or PPM (three channels); values are clamped to
/// `[0, 1]` and rounded to the nearest level.
pub fn encode_pnm(img: &ImagePlane) -> Result<Vec<u8>> {
    if img.channels != 1 && img.channels != 3 {
        return Err(Error::Config(format!("PGM/PPM store 1 or 3 channels, not {}", img.channels)));
    }
    let samples: Vec<u32> = img.data.iter().map(|&v| quantize(v, 255)).collect();
    Ok(encode_pnm_raw(img.width, img.height, img.channels, 255, &samples))
}

/// Reads a binary PGM/PPM into intensities in `[0, 1]`.
pub fn decode_pnm(bytes: &[u8]) -> Result<ImagePlane> {
    let (w, h, c, maxval, samples) = decode_pnm_raw(bytes)?;
    let data = samples.iter().map(|&s| s as f64 / maxval as f64).collect();
    ImagePlane::new(w, h, c, data)
}

pub fn write_pnm(path: impl AsRef<Path>, img: &ImagePlane) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pnm(img)?)
}

pub fn read_pnm(path: impl AsRef<Path>) -> Result<ImagePlane> {
    decode_pnm(&read_bytes(path.as_ref())?)
}

/// Mask as a PGM with 0 and 255.
pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let samples: Vec<u32> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_bytes(path.as_ref(), &encode_pnm_raw(mask.width, mask.height, 1, 255, &samples))
}

/// Reads a single-channel PGM; non-zero samples are `true`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let (w, h, c, _, samples) = decode_pnm_raw(&read_bytes(path.as_ref())?)?;
    if c != 1 {
        return Err(Error::Config("mask must be a single-channel PGM".into()));
    }
    Ok(Mask::from_vec(w, h, samples.iter().map(|&s| s != 0).collect()))
}

/// Segment labels as a PGM whose samples are the labels themselves (16-bit
/// when any label exceeds 255).
pub fn write_segments(path: impl AsRef<Path>, seg: &SegmentMap) -> Result<()> {
    let max = seg.labels.iter().copied().max().unwrap_or(0);
    if max > 65535 {
        return Err(Error::Config(format!("segment label {max} does not fit in 16 bits")));
    }
    let maxval = if max > 255 { 65535 } else { 255 };
    write_bytes(
        path.as_ref(),
        &encode_pnm_raw(seg.width, seg.height, 1, maxval, &seg.labels),
    )
}

pub fn read_segments(path: impl AsRef<Path>) -> Result<SegmentMap> {
    let (w, h, c, _, samples) = decode_pnm_raw(&read_bytes(path.as_ref())?)?;
    if c != 1 {
        return Err(Error::Config("segment map must be a single-channel PGM".into()));
    }
    SegmentMap::new(w, h, samples)
}

pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * flow.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&(*u as f32).to_le_bytes());
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    let word = |at: usize| -> Result<[u8; 4]> {
        Ok(payload(bytes, at, 4)?.try_into().expect("four bytes"))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::parse(0, format!("bad .flo magic {magic}, expected {FLO_MAGIC}")));
    }
    let width = i32::from_le_bytes(word(4)?);
    let height = i32::from_le_bytes(word(8)?);
    if width <= 0 {
        return Err(Error::parse(4, format!("invalid width {width}")));
    }
    if height <= 0 {
        return Err(Error::parse(8, format!("invalid height {height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let data = payload(bytes, 12, 8 * w * h)?;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for pair in data.chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[0..4].try_into().expect("four bytes")) as f64);
        v.push(f32::from_le_bytes(pair[4..8].try_into().expect("four bytes")) as f64);
    }
    FlowField::new(w, h, u, v)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flo(flow))
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_bytes(path.as_ref())?)
}

/// Writes every channel of every pyramid level as its own single-channel PFM
/// named `level{L}_ch{C}.pfm` in `dir` (created if missing), `L` counting
/// from the pyramid's first level. Returns the written paths in order.
pub fn write_pyramid(dir: impl AsRef<Path>, pyramid: &FeaturePyramid) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (k, level) in pyramid.levels.iter().enumerate() {
        for c in 0..level.channels {
            let path = dir.join(format!("level{}_ch{c:03}.pfm", pyramid.first_level + k));
            write_pfm(&path, &level.channel(c))?;
            paths.push(path);
        }
    }
    Ok(paths)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, c: usize, seed: u64) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random_range(-50.0f32..50.0) as f64).collect();
        ImagePlane::new(w, h, c, data).unwrap()
    }

    #[test]
    fn pfm_round_trip_is_bit_identical() {
        for (c, seed) in [(1, 1), (3, 2)] {
            let img = random_plane(7, 5, c, seed);
            let bytes = encode_pfm(&img).unwrap();
            assert!(bytes.starts_with(if c == 1 { b"Pf\n7 5\n-1.0\n" } else { b"PF\n7 5\n-1.0\n" }));
            let back = decode_pfm(&bytes).unwrap();
            assert_eq!(back, img);
            assert_eq!(encode_pfm(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn pfm_rows_are_stored_bottom_up() {
        let img = ImagePlane::from_fn(2, 2, |x, y| (10 * y + x) as f64);
        let bytes = encode_pfm(&img).unwrap();
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 10.0);
    }

    #[test]
    fn pfm_reads_big_endian() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data, vec![1.5, -2.0]);
    }

    #[test]
    fn pfm_errors_carry_offsets() {
        assert!(matches!(decode_pfm(b"P7\n1 1\n-1\n"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_pfm(b"Pf\n0 1\n-1\n"), Err(Error::Parse { offset: 2, .. })));
        match decode_pfm(b"Pf\n2 2\n-1.0\n\0\0\0\0") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flo_round_trip_and_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = FlowField::from_fn(6, 4, |_, _| {
            (rng.random_range(-9.0f32..9.0) as f64, rng.random_range(-9.0f32..9.0) as f64)
        });
        let bytes = encode_flo(&flow);
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(decode_flo(&bytes).unwrap(), flow);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_flo(&bad), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(decode_flo(&bytes[..20]), Err(Error::Parse { .. })));
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<u32> = (0..5 * 3 * 3).map(|_| rng.random_range(0..=255)).collect();
        let bytes = encode_pnm_raw(5, 3, 3, 255, &samples);
        let img = decode_pnm(&bytes).unwrap();
        for (v, s) in img.data.iter().zip(&samples) {
            assert_eq!(*v, *s as f64 / 255.0);
        }
        assert_eq!(encode_pnm(&img).unwrap(), bytes);
    }

    #[test]
    fn pgm_header_comments_and_sixteen_bit() {
        let mut bytes = b"P5\n# made by hand\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00]);
        assert_eq!(decode_pnm(&bytes).unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let depth = DepthMap::with_mask(3, 2, vec![1.5, 2.0, 0.0, 4.25, 3.0, 1.0], vec![true, true, false, true, true, true])
            .unwrap();
        write_depth_pfm(dir.path().join("d.pfm"), &depth).unwrap();
        assert_eq!(read_depth_pfm(dir.path().join("d.pfm")).unwrap(), depth);

        let mask = Mask::from_vec(3, 2, vec![true, false, true, true, false, false]);
        write_mask(dir.path().join("m.pgm"), &mask).unwrap();
        assert_eq!(read_mask(dir.path().join("m.pgm")).unwrap(), mask);

        for labels in [vec![0, 1, 2, 2, 1, 0], vec![0, 300, 2, 2, 1, 0]] {
            let seg = SegmentMap::new(3, 2, labels).unwrap();
            write_segments(dir.path().join("nested/s.pgm"), &seg).unwrap();
            assert_eq!(read_segments(dir.path().join("nested/s.pgm")).unwrap(), seg);
        }

        write_json(dir.path().join("v.json"), &vec![1.0, 0.1]).unwrap();
        assert_eq!(read_json::<Vec<f64>>(dir.path().join("v.json")).unwrap(), vec![1.0, 0.1]);
        assert!(matches!(read_pfm(dir.path().join("missing.pfm")), Err(Error::Io { .. })));
    }

    #[test]
    fn pyramid_dump_writes_one_map_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_plane(16, 12, 1, 3);
        let cfg = crate::features::PyramidConfig {
            channels: vec![4, 6],
            first_level: 1,
        };
        let pyr = crate::features::build_feature_pyramid(&img, &cfg).unwrap();
        let paths = write_pyramid(dir.path().join("pyr"), &pyr).unwrap();
        assert_eq!(paths.len(), 10);
        assert!(paths[0].ends_with("level1_ch000.pfm"));
        let back = read_pfm(&paths[9]).unwrap();
        assert_eq!(back.dims(), pyr.levels[1].dims());
        let expected = pyr.levels[1].channel(5).map(|v| v as f32 as f64);
        assert_eq!(back, expected);
    }

    proptest! {
        #[test]
        fn pfm_round_trip_any_f32(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let img = random_plane(w, h, 1, seed);
            prop_assert_eq!(decode_pfm(&encode_pfm(&img).unwrap()).unwrap(), img);
        }

        #[test]
        fn pgm_quantisation_is_idempotent(v in proptest::collection::vec(0.0f64..1.0, 12)) {
            let img = ImagePlane::new(4, 3, 1, v).unwrap();
            let once = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
            let twice = decode_pnm(&encode_pnm(&once).unwrap()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
