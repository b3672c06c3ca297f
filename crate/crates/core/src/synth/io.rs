//! PGM (P5) images, DMAP density files and the corpus manifest.
//!
//! DMAP layout: `"DMAP" | height u32 | width u32 | scale u32 | f32 * h * w`,
//! little-endian, row-major.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Reader;
use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Label;

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";

/// Binary PGM, maxval 255, values in `[0, 1]` rounded to the nearest level.
pub fn write_pgm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::shape(format!("PGM needs a [1,1,H,W] image, got {:?}", image.shape())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<(usize, String)> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(start, format!("missing {what}")));
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..pos]).into_owned()))
    };
    let (at, magic) = token("magic")?;
    if magic != "P5" {
        return Err(Error::parse(at, format!("expected P5 magic, found {magic:?}")));
    }
    let mut number = |what: &str| -> Result<(usize, usize)> {
        let (at, t) = token(what)?;
        t.parse::<usize>()
            .map(|v| (at, v))
            .map_err(|_| Error::parse(at, format!("invalid {what} {t:?}")))
    };
    let (wat, width) = number("width")?;
    let (_, height) = number("height")?;
    let (mat, maxval) = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::parse(wat, "image dimensions must be positive"));
    }
    if maxval != 255 {
        return Err(Error::parse(mat, format!("maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let need = width * height;
    if bytes.len() < data_start || bytes.len() - data_start < need {
        return Err(Error::parse(
            bytes.len().min(data_start),
            format!("truncated raster: need {need} bytes"),
        ));
    }
    let values = bytes[data_start..data_start + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    Tensor::new(&[1, 1, height, width], values)
}

pub fn write_dmap(map: &DensityMap<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values().len());
    out.extend_from_slice(DMAP_MAGIC);
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.scale as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_dmap(bytes: &[u8]) -> Result<DensityMap<f32>> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != DMAP_MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"DMAP\""));
    }
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let scale_at = r.pos();
    let scale = r.u32("scale")? as usize;
    if h == 0 || w == 0 || scale == 0 {
        return Err(Error::parse(4, "height, width and scale must be positive"));
    }
    let values = r.f32s(h * w, "density values")?;
    if !r.at_end() {
        return Err(Error::parse(r.pos(), "trailing bytes after density values"));
    }
    DensityMap::new(Tensor::new(&[1, 1, h, w], values)?, scale)
        .map_err(|e| Error::parse(scale_at, e.to_string()))
}

/// One manifest line: `index,label,path_image,path_dmap`, paths relative to
/// the corpus root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub label: Label,
    pub image: PathBuf,
    pub dmap: PathBuf,
}

impl ManifestEntry {
    /// Split name, taken from the first path component (`train` or `test`).
    pub fn split(&self) -> &str {
        self.image
            .components()
            .next()
            .and_then(|c| c.as_os_str().to_str())
            .unwrap_or("")
    }
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            e.index,
            e.label.as_str(),
            e.image.display(),
            e.dmap.display()
        );
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end();
        if !trimmed.is_empty() {
            let fields: Vec<&str> = trimmed.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::parse(offset, format!("expected 4 fields, got {}", fields.len())));
            }
            let index = fields[0]
                .parse()
                .map_err(|_| Error::parse(offset, format!("bad index {:?}", fields[0])))?;
            let label = Label::parse(fields[1])
                .ok_or_else(|| Error::parse(offset, format!("bad label {:?}", fields[1])))?;
            out.push(ManifestEntry {
                index,
                label,
                image: PathBuf::from(fields[2]),
                dmap: PathBuf::from(fields[3]),
            });
        }
        offset += line.len();
    }
    Ok(out)
}

/// Reads a PGM from disk.
pub fn load_pgm(path: &Path) -> Result<Tensor<f32>> {
    read_pgm(&std::fs::read(path)?)
}

pub fn load_dmap(path: &Path) -> Result<DensityMap<f32>> {
    read_dmap(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dmap_round_trip_is_exact(h in 1usize..9, w in 1usize..9, scale in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let grid = Tensor::from_fn(&[1, 1, h, w], |_| rng.range(-3.0, 3.0) as f32);
            let map = DensityMap::new(grid, scale).unwrap();
            prop_assert_eq!(read_dmap(&write_dmap(&map)).unwrap(), map);
        }

        #[test]
        fn pgm_round_trip_within_one_level(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let img = Tensor::from_fn(&[1, 1, h, w], |_| rng.uniform() as f32);
            let back = read_pgm(&write_pgm(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn truncated_dmap_is_a_parse_error() {
        let map = DensityMap::new(Tensor::ones(&[1, 1, 2, 2]), 1).unwrap();
        let bytes = write_dmap(&map);
        for cut in [2, 6, 15, bytes.len() - 1] {
            assert!(matches!(read_dmap(&bytes[..cut]), Err(Error::Parse { .. })));
        }
        let err = read_dmap(b"XMAP").unwrap_err();
        assert!(err.to_string().contains("byte 0"));
    }

    #[test]
    fn pgm_header_errors_name_offsets() {
        assert!(matches!(read_pgm(b"P2\n1 1\n255\n\0"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(read_pgm(b"P5\n2 2\n255\n\0\0"), Err(Error::Parse { .. })));
        assert!(matches!(read_pgm(b"P5\n2 2\n65535\n"), Err(Error::Parse { offset: 7, .. })));
        let ok = read_pgm(b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(ok.data(), &[0.0, 1.0]);
    }

    #[test]
    fn manifest_round_trip_and_split() {
        let entries = vec![
            ManifestEntry {
                index: 0,
                label: Label::Crowd,
                image: "train/crowd_0000.pgm".into(),
                dmap: "train/crowd_0000.dmap".into(),
            },
            ManifestEntry {
                index: 7,
                label: Label::Background,
                image: "test/background_0007.pgm".into(),
                dmap: "test/background_0007.dmap".into(),
            },
        ];
        let text = format_manifest(&entries);
        assert_eq!(text.lines().count(), 2);
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed, entries);
        assert_eq!(parsed[0].split(), "train");
        assert!(parse_manifest("1,crowd,a.pgm\n").is_err());
        assert!(parse_manifest("x,crowd,a.pgm,a.dmap\n").is_err());
    }
}
