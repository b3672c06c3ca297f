//! Density maps: ground-truth construction, block downsampling and counting.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Single-channel density grid. `scale` is the downsampling factor relative
/// to the source image (1 for full resolution).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap<T = f32> {
    pub grid: Tensor<T>,
    pub scale: usize,
}

impl<T: Real> DensityMap<T> {
    pub fn new(grid: Tensor<T>, scale: usize) -> Result<Self> {
        let [n, c, _, _] = grid.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::shape(format!(
                "density map must be [1,1,h,w], got {:?}",
                grid.shape()
            )));
        }
        if scale == 0 {
            return Err(Error::invalid("density map scale must be positive"));
        }
        Ok(DensityMap { grid, scale })
    }

    pub fn zeros(height: usize, width: usize, scale: usize) -> Self {
        DensityMap {
            grid: Tensor::zeros(&[1, 1, height, width]),
            scale,
        }
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[3]
    }

    pub fn values(&self) -> &[T] {
        self.grid.data()
    }

    /// Copy with negative entries set to zero.
    pub fn clamped(&self) -> Self {
        DensityMap {
            grid: self.grid.map(|v| v.max(T::zero())),
            scale: self.scale,
        }
    }
}

/// Sum of the map with negative entries clamped to zero, accumulated in f64.
pub fn count_from_density<T: Real>(map: &DensityMap<T>) -> f64 {
    map.values()
        .iter()
        .map(|v| v.to_f64_lossy().max(0.0))
        .sum()
}

/// Sum of a fixed-sigma Gaussian per head. Each kernel is evaluated on pixel
/// centres within `ceil(4 sigma)` of the head, clipped to the image and
/// renormalized so that every head contributes exactly one unit of mass.
pub fn gt_density(heads: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Result<DensityMap<f32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut acc = vec![0.0f64; height * width];
    let radius = (4.0 * sigma).ceil() as isize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut kernel = Vec::new();
    for &(hy, hx) in heads {
        let cy = hy.round() as isize;
        let cx = hx.round() as isize;
        let y0 = (cy - radius).max(0);
        let y1 = (cy + radius).min(height as isize - 1);
        let x0 = (cx - radius).max(0);
        let x1 = (cx + radius).min(width as isize - 1);
        if y0 > y1 || x0 > x1 {
            continue;
        }
        kernel.clear();
        let mut total = 0.0;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (y as f64 - hy).powi(2) + (x as f64 - hx).powi(2);
                let v = (-d2 * inv).exp();
                total += v;
                kernel.push(v);
            }
        }
        let mut k = kernel.iter();
        for y in y0..=y1 {
            for x in x0..=x1 {
                acc[y as usize * width + x as usize] += k.next().unwrap() / total;
            }
        }
    }
    let grid = Tensor::new(&[1, 1, height, width], acc.into_iter().map(|v| v as f32).collect())?;
    DensityMap::new(grid, 1)
}

/// Sums `factor x factor` blocks, multiplying the map's scale by `factor`.
pub fn downsample_density<T: Real>(map: &DensityMap<T>, factor: usize) -> Result<DensityMap<T>> {
    let (h, w) = (map.height(), map.width());
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "density map {h}x{w} is not divisible into {factor}x{factor} blocks"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let src = map.values();
    let mut out = vec![T::zero(); oh * ow];
    for y in 0..h {
        for x in 0..w {
            out[(y / factor) * ow + x / factor] += src[y * w + x];
        }
    }
    DensityMap::new(Tensor::new(&[1, 1, oh, ow], out)?, map.scale * factor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum64(m: &DensityMap<f32>) -> f64 {
        m.values().iter().map(|&v| v as f64).sum()
    }

    #[test]
    fn single_centred_head_has_unit_mass() {
        let m = gt_density(&[(31.5, 31.5)], 64, 64, 2.0).unwrap();
        assert!((sum64(&m) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn corner_head_is_renormalized() {
        for head in [(0.0, 0.0), (63.0, 0.0), (0.2, 63.9), (63.9, 63.9)] {
            let m = gt_density(&[head], 64, 64, 2.0).unwrap();
            assert!((sum64(&m) - 1.0).abs() < 1e-6, "{head:?}");
        }
    }

    #[test]
    fn no_heads_gives_zero_map() {
        let m = gt_density(&[], 16, 8, 2.0).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
        assert_eq!((m.height(), m.width(), m.scale), (16, 8, 1));
        assert!(gt_density(&[], 16, 8, 0.0).is_err());
    }

    #[test]
    fn uniform_map_downsamples_to_sixteen_fold_blocks() {
        let m = DensityMap::new(Tensor::full(&[1, 1, 8, 12], 0.25f32), 1).unwrap();
        let d = downsample_density(&m, 4).unwrap();
        assert_eq!((d.height(), d.width(), d.scale), (2, 3, 4));
        assert!(d.values().iter().all(|&v| v == 4.0));
        assert!(downsample_density(&DensityMap::<f32>::zeros(6, 8, 1), 4).is_err());
    }

    #[test]
    fn counting_clamps_negative_entries() {
        let m = DensityMap::new(Tensor::new(&[1, 1, 1, 3], vec![1.0f32, -2.0, 0.5]).unwrap(), 4).unwrap();
        assert_eq!(count_from_density(&m), 1.5);
        assert_eq!(count_from_density(&DensityMap::<f32>::zeros(4, 4, 1)), 0.0);
    }
}
