use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

use super::SceneSample;

/// Nine crops (four quarters, five random) and their horizontal mirrors.
pub const PATCHES_PER_IMAGE: usize = 18;

/// Quarter-size crop window; `mirrored` flips it left to right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub mirrored: bool,
}

/// The 18 windows for an `height x width` image: quarters at `(0,0)`,
/// `(0,W/2)`, `(H/2,0)`, `(H/2,W/2)`, five offsets drawn from `seed`, then
/// the same nine mirrored.
pub fn patch_windows(height: usize, width: usize, seed: u64) -> Result<Vec<PatchWindow>> {
    if !height.is_multiple_of(2) || !width.is_multiple_of(2) || height == 0 || width == 0 {
        return Err(Error::shape(format!(
            "patch cropping needs even dimensions, got {height}x{width}"
        )));
    }
    let (ph, pw) = (height / 2, width / 2);
    let mut rng = SplitMix64::derive(seed, &[0x9A7C]);
    let mut windows: Vec<PatchWindow> = [(0, 0), (0, pw), (ph, 0), (ph, pw)]
        .into_iter()
        .map(|(top, left)| PatchWindow {
            top,
            left,
            height: ph,
            width: pw,
            mirrored: false,
        })
        .collect();
    for _ in 0..5 {
        let top = rng.int_inclusive(0, (height - ph) as u64) as usize;
        let left = rng.int_inclusive(0, (width - pw) as u64) as usize;
        windows.push(PatchWindow {
            top,
            left,
            height: ph,
            width: pw,
            mirrored: false,
        });
    }
    let mirrored: Vec<PatchWindow> = windows
        .iter()
        .map(|w| PatchWindow {
            mirrored: true,
            ..*w
        })
        .collect();
    windows.extend(mirrored);
    Ok(windows)
}

/// Crops a `[1, C, H, W]` tensor to `window`.
pub fn crop_plane<T: Real>(t: &Tensor<T>, window: &PatchWindow) -> Result<Tensor<T>> {
    let [n, c, h, w] = t.dims4()?;
    if window.top + window.height > h || window.left + window.width > w {
        return Err(Error::shape(format!("{window:?} exceeds {h}x{w} input")));
    }
    let mut out = Vec::with_capacity(n * c * window.height * window.width);
    for plane in t.data().chunks(h * w) {
        for y in window.top..window.top + window.height {
            let row = &plane[y * w + window.left..y * w + window.left + window.width];
            if window.mirrored {
                out.extend(row.iter().rev());
            } else {
                out.extend_from_slice(row);
            }
        }
    }
    Tensor::new(&[n, c, window.height, window.width], out)
}

/// The augmented training patches of one scene. Each patch's ground truth is
/// the same crop of the parent map, so mass from heads near a border is split
/// between patches rather than regenerated. Heads are kept when their centre
/// lies inside the window.
pub fn crop_patches(sample: &SceneSample, seed: u64) -> Result<Vec<SceneSample>> {
    let windows = patch_windows(sample.height(), sample.width(), seed)?;
    windows
        .iter()
        .map(|win| {
            let heads = sample
                .heads
                .iter()
                .filter_map(|&(y, x)| {
                    let (ly, lx) = (y - win.top as f64, x - win.left as f64);
                    let inside = ly >= 0.0
                        && lx >= 0.0
                        && ly < win.height as f64
                        && lx < win.width as f64;
                    inside.then(|| {
                        let lx = if win.mirrored {
                            (win.width - 1) as f64 - lx
                        } else {
                            lx
                        };
                        (ly, lx)
                    })
                })
                .collect();
            Ok(SceneSample {
                image: crop_plane(&sample.image, win)?,
                heads,
                gt_density: DensityMap::new(
                    crop_plane(&sample.gt_density.grid, win)?,
                    sample.gt_density.scale,
                )?,
                label: sample.label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_scene, CorpusConfig, Label};

    #[test]
    fn eighteen_quarter_size_patches() {
        let s = synth_scene(&CorpusConfig::default(), 0, Label::Crowd).unwrap();
        let p = crop_patches(&s, 1).unwrap();
        assert_eq!(p.len(), PATCHES_PER_IMAGE);
        for patch in &p {
            assert_eq!(patch.image.shape(), &[1, 1, 32, 32]);
            assert_eq!(patch.gt_density.grid.shape(), &[1, 1, 32, 32]);
        }
    }

    #[test]
    fn quarters_partition_the_mass() {
        let s = synth_scene(&CorpusConfig::default(), 5, Label::Crowd).unwrap();
        let p = crop_patches(&s, 9).unwrap();
        let total: f64 = s.gt_density.values().iter().map(|&v| v as f64).sum();
        let quarters: f64 = p[..4]
            .iter()
            .flat_map(|q| q.gt_density.values().iter().map(|&v| v as f64))
            .sum();
        assert!((total - quarters).abs() < 1e-6);
    }

    #[test]
    fn mirror_reverses_columns() {
        let s = synth_scene(&CorpusConfig::default(), 2, Label::Crowd).unwrap();
        let p = crop_patches(&s, 4).unwrap();
        for i in 0..9 {
            let (a, b) = (&p[i].image, &p[i + 9].image);
            for r in 0..32 {
                for c in 0..32 {
                    assert_eq!(b.data()[r * 32 + c], a.data()[r * 32 + 31 - c]);
                }
            }
        }
    }

    #[test]
    fn odd_dimensions_rejected() {
        assert!(patch_windows(63, 64, 0).is_err());
    }

    #[test]
    fn windows_depend_only_on_seed() {
        assert_eq!(patch_windows(64, 64, 3).unwrap(), patch_windows(64, 64, 3).unwrap());
        let w = patch_windows(64, 64, 3).unwrap();
        assert!(w.iter().all(|w| w.top <= 32 && w.left <= 32));
    }
}
