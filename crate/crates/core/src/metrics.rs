//! Count and density-map quality metrics: MAE, MSE (root mean square count
//! error), PSNR, SSIM and GAME.
//!
//! Predictions are scored at the input resolution: [`prepare_record`] clamps
//! the 1/4-scale prediction, resizes it bilinearly and rescales it so the
//! count survives the resize.

use std::fmt::Write as _;

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::ops::resize::bilinear_resize;
use crate::tensor::{Real, Tensor};

/// PSNR reported for identical maps.
pub const PSNR_CAP: f64 = 100.0;
/// Floor for the PSNR peak and the SSIM dynamic range.
pub const RANGE_EPSILON: f64 = 1e-8;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MAX_GAME_LEVEL: usize = 3;

/// One scored image, both maps at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub predicted_count: f64,
    pub gt_count: f64,
    pub pred_map_fullres: DensityMap<f64>,
    pub gt_map_fullres: DensityMap<f64>,
}

impl EvalRecord {
    /// Builds a record from two full-resolution maps; counts are their sums.
    pub fn from_fullres(pred: DensityMap<f64>, gt: DensityMap<f64>) -> Result<Self> {
        if pred.grid.shape() != gt.grid.shape() {
            return Err(Error::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.grid.shape(),
                gt.grid.shape()
            )));
        }
        let pred = pred.clamped();
        Ok(EvalRecord {
            predicted_count: pred.values().iter().sum(),
            gt_count: gt.values().iter().sum(),
            pred_map_fullres: pred,
            gt_map_fullres: gt,
        })
    }

    /// Scores the ground truth against itself.
    pub fn oracle<T: Real>(gt: &DensityMap<T>) -> Result<Self> {
        let gt = DensityMap::new(gt.grid.cast::<f64>(), 1)?;
        Self::from_fullres(gt.clone(), gt)
    }

    pub fn abs_error(&self) -> f64 {
        (self.predicted_count - self.gt_count).abs()
    }
}

/// Clamps `pred`, resizes it to the ground truth's resolution and rescales it
/// so its sum matches the clamped pre-resize sum.
pub fn prepare_record<T: Real>(pred: &DensityMap<T>, gt_fullres: &DensityMap<T>) -> Result<EvalRecord> {
    let (h, w) = (gt_fullres.height(), gt_fullres.width());
    if pred.height() * pred.scale != h || pred.width() * pred.scale != w || gt_fullres.scale != 1 {
        return Err(Error::shape(format!(
            "prediction {}x{} at scale {} does not cover ground truth {}x{} at scale {}",
            pred.height(),
            pred.width(),
            pred.scale,
            h,
            w,
            gt_fullres.scale
        )));
    }
    let clamped = pred.grid.cast::<f64>().map(|v| v.max(0.0));
    let before: f64 = clamped.data().iter().sum();
    let mut full = bilinear_resize(&clamped, h, w)?;
    let after: f64 = full.data().iter().sum();
    if after > 0.0 {
        let k = before / after;
        full.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    EvalRecord::from_fullres(
        DensityMap::new(full, 1)?,
        DensityMap::new(gt_fullres.grid.cast::<f64>(), 1)?,
    )
}

fn non_empty(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::invalid("metrics need at least one record"))
    } else {
        Ok(())
    }
}

/// Mean absolute count error.
pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    Ok(records.iter().map(EvalRecord::abs_error).sum::<f64>() / records.len() as f64)
}

/// Root mean square count error.
pub fn mse(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let sq: f64 = records
        .iter()
        .map(|r| (r.predicted_count - r.gt_count).powi(2))
        .sum();
    Ok((sq / records.len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB after scaling both maps by the ground
/// truth's maximum. Identical maps score [`PSNR_CAP`].
pub fn psnr(record: &EvalRecord) -> f64 {
    let gt = record.gt_map_fullres.values();
    let pred = record.pred_map_fullres.values();
    let peak = gt.iter().fold(0.0f64, |m, &v| m.max(v)).max(RANGE_EPSILON);
    let err: f64 = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| ((p - g) / peak).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    if err == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / err).log10()).min(PSNR_CAP)
    }
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let dy = (i / SSIM_WINDOW) as f64 - r;
            let dx = (i % SSIM_WINDOW) as f64 - r;
            (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean structural similarity over all fully contained 11x11 windows.
pub fn ssim(record: &EvalRecord) -> Result<f64> {
    let (h, w) = (record.gt_map_fullres.height(), record.gt_map_fullres.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let gt = record.gt_map_fullres.values();
    let pred = record.pred_map_fullres.values();
    let (lo, hi) = gt
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = (hi - lo).max(RANGE_EPSILON);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let kernel = gaussian_window();

    let mut total = 0.0;
    let mut windows = 0usize;
    for top in 0..=h - SSIM_WINDOW {
        for left in 0..=w - SSIM_WINDOW {
            let at = |i: usize| (top + i / SSIM_WINDOW) * w + left + i % SSIM_WINDOW;
            let (mut mx, mut my) = (0.0, 0.0);
            for (i, k) in kernel.iter().enumerate() {
                mx += k * pred[at(i)];
                my += k * gt[at(i)];
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for (i, k) in kernel.iter().enumerate() {
                let dx = pred[at(i)] - mx;
                let dy = gt[at(i)] - my;
                vx += k * dx * dx;
                vy += k * dy * dy;
                cov += k * dx * dy;
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

fn grid_cells(map: &DensityMap<f64>, level: usize) -> Vec<f64> {
    let n = 1usize << level;
    let (h, w) = (map.height(), map.width());
    let (ch, cw) = ((h / n).max(1), (w / n).max(1));
    let mut cells = vec![0.0; n * n];
    for (i, &v) in map.values().iter().enumerate() {
        let r = (i / w / ch).min(n - 1);
        let c = (i % w / cw).min(n - 1);
        cells[r * n + c] += v;
    }
    cells
}

/// Grid average mean absolute error: per record, the absolute count error
/// summed over a `2^level x 2^level` grid (remainder rows and columns go to
/// the last cells), averaged over records.
pub fn game(records: &[EvalRecord], level: usize) -> Result<f64> {
    non_empty(records)?;
    if level > MAX_GAME_LEVEL {
        return Err(Error::invalid(format!(
            "GAME level {level} outside 0..={MAX_GAME_LEVEL}"
        )));
    }
    let total: f64 = records
        .iter()
        .map(|r| {
            if level == 0 {
                return r.abs_error();
            }
            grid_cells(&r.pred_map_fullres, level)
                .iter()
                .zip(grid_cells(&r.gt_map_fullres, level))
                .map(|(p, g)| (p - g).abs())
                .sum::<f64>()
        })
        .sum();
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub mse: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub game: [f64; MAX_GAME_LEVEL + 1],
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn from_records(records: &[EvalRecord]) -> Result<Self> {
        non_empty(records)?;
        let n = records.len() as f64;
        let mut ssim_total = 0.0;
        for r in records {
            ssim_total += ssim(r)?;
        }
        let mut levels = [0.0; MAX_GAME_LEVEL + 1];
        for (l, slot) in levels.iter_mut().enumerate() {
            *slot = game(records, l)?;
        }
        Ok(MetricsReport {
            mae: mae(records)?,
            mse: mse(records)?,
            mean_psnr: records.iter().map(psnr).sum::<f64>() / n,
            mean_ssim: ssim_total / n,
            game: levels,
            n_samples: records.len(),
        })
    }

    pub fn all_finite(&self) -> bool {
        [self.mae, self.mse, self.mean_psnr, self.mean_ssim]
            .iter()
            .chain(&self.game)
            .all(|v| v.is_finite())
    }

    /// One `metric=value` line per field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "mae={}", self.mae);
        let _ = writeln!(s, "mse={}", self.mse);
        let _ = writeln!(s, "psnr={}", self.mean_psnr);
        let _ = writeln!(s, "ssim={}", self.mean_ssim);
        for (l, v) in self.game.iter().enumerate() {
            let _ = writeln!(s, "game{l}={v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: [Option<f64>; 9] = [None; 9];
        const KEYS: [&str; 9] = [
            "n_samples", "mae", "mse", "psnr", "ssim", "game0", "game1", "game2", "game3",
        ];
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() {
                let (k, v) = body
                    .split_once('=')
                    .ok_or_else(|| Error::parse(offset, format!("expected metric=value, got {body:?}")))?;
                let slot = KEYS
                    .iter()
                    .position(|&key| key == k)
                    .ok_or_else(|| Error::parse(offset, format!("unknown metric {k:?}")))?;
                fields[slot] = Some(
                    v.parse()
                        .map_err(|_| Error::parse(offset, format!("bad value {v:?} for {k}")))?,
                );
            }
            offset += line.len();
        }
        let get = |i: usize| fields[i].ok_or_else(|| Error::parse(text.len(), format!("missing {}", KEYS[i])));
        Ok(MetricsReport {
            n_samples: get(0)? as usize,
            mae: get(1)?,
            mse: get(2)?,
            mean_psnr: get(3)?,
            mean_ssim: get(4)?,
            game: [get(5)?, get(6)?, get(7)?, get(8)?],
        })
    }
}

/// Wraps a `[H, W]` row-major slice as a full-resolution map (test helper).
pub fn fullres_map(height: usize, width: usize, values: Vec<f64>) -> Result<DensityMap<f64>> {
    DensityMap::new(Tensor::new(&[1, 1, height, width], values)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn record(pred: Vec<f64>, gt: Vec<f64>, h: usize, w: usize) -> EvalRecord {
        EvalRecord::from_fullres(fullres_map(h, w, pred).unwrap(), fullres_map(h, w, gt).unwrap()).unwrap()
    }

    fn counts(p: f64, g: f64) -> EvalRecord {
        record(vec![p, 0.0, 0.0, 0.0], vec![g, 0.0, 0.0, 0.0], 2, 2)
    }

    #[test]
    fn count_errors() {
        let rs = [counts(10.0, 12.0), counts(20.0, 16.0)];
        assert_eq!(mae(&rs).unwrap(), 3.0);
        assert!((mse(&rs).unwrap() - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(game(&rs, 0).unwrap(), 3.0);
        let perfect = [counts(5.0, 5.0)];
        assert_eq!(mae(&perfect).unwrap(), 0.0);
        assert_eq!(mse(&perfect).unwrap(), 0.0);
        assert!(mae(&[]).is_err());
        assert!(mse(&[]).is_err());
        assert!(game(&rs, 4).is_err());
    }

    #[test]
    fn game_sees_misplaced_mass() {
        let mut p = vec![0.0; 16];
        let mut g = vec![0.0; 16];
        g[0] = 3.0; // top-left quadrant
        p[15] = 3.0; // bottom-right quadrant
        let r = [record(p, g, 4, 4)];
        assert_eq!(game(&r, 0).unwrap(), 0.0);
        assert_eq!(game(&r, 1).unwrap(), 6.0);
    }

    #[test]
    fn game_remainders_go_to_last_cells() {
        // 5 wide at level 1: columns 0..2 | 2..5
        let m = fullres_map(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(grid_cells(&m, 1), vec![3.0, 12.0, 0.0, 0.0]);
    }

    #[test]
    fn psnr_identity_and_doubling() {
        let gt: Vec<f64> = (0..16).map(|i| i as f64 / 4.0).collect();
        assert_eq!(psnr(&record(gt.clone(), gt.clone(), 4, 4)), PSNR_CAP);
        let p1: Vec<f64> = gt.iter().map(|v| v + 0.3).collect();
        let p2: Vec<f64> = gt.iter().map(|v| v + 0.6).collect();
        let d = psnr(&record(p1, gt.clone(), 4, 4)) - psnr(&record(p2, gt, 4, 4));
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_sign() {
        let mut rng = SplitMix64::new(4);
        let gt: Vec<f64> = (0..256).map(|_| rng.uniform() - 0.5).collect();
        let pos: Vec<f64> = gt.iter().map(|v| v + 0.5).collect();
        assert_eq!(ssim(&record(pos.clone(), pos, 16, 16)).unwrap(), 1.0);
        // checkerboard: Gaussian-weighted window means are ~0, so only the
        // covariance sign matters; predictions are clamped, so build directly
        let gt: Vec<f64> = (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let neg = EvalRecord {
            predicted_count: 0.0,
            gt_count: 0.0,
            pred_map_fullres: fullres_map(16, 16, gt.iter().map(|v| -v).collect()).unwrap(),
            gt_map_fullres: fullres_map(16, 16, gt).unwrap(),
        };
        assert!(ssim(&neg).unwrap() < 0.0);
        assert!(ssim(&record(vec![0.0; 100], vec![0.0; 100], 10, 10)).is_err());
    }

    #[test]
    fn prepare_preserves_counts() {
        let pred = DensityMap::new(Tensor::full(&[1, 1, 4, 4], 0.25f32), 4).unwrap();
        let gt = DensityMap::new(Tensor::zeros(&[1, 1, 16, 16]), 1).unwrap();
        let r = prepare_record(&pred, &gt).unwrap();
        assert!((r.predicted_count - 4.0).abs() < 1e-4);
        let first = r.pred_map_fullres.values()[0];
        assert!(r.pred_map_fullres.values().iter().all(|v| (v - first).abs() < 1e-12));
        let zero = DensityMap::new(Tensor::zeros(&[1, 1, 4, 4]), 4).unwrap();
        let r = prepare_record(&zero, &gt).unwrap();
        assert_eq!(r.predicted_count, 0.0);
        let bad = DensityMap::new(Tensor::zeros(&[1, 1, 16, 8]), 1).unwrap();
        assert!(prepare_record(&zero, &bad).is_err());
    }

    #[test]
    fn report_text_round_trips() {
        let rs = [counts(10.0, 12.0), counts(20.0, 16.0)];
        let recs: Vec<EvalRecord> = (0..2)
            .map(|i| {
                let v: Vec<f64> = (0..144).map(|j| ((i + j) % 5) as f64).collect();
                record(v.clone(), v, 12, 12)
            })
            .collect();
        assert!(MetricsReport::from_records(&rs).is_err()); // 2x2 maps are too small for SSIM
        let rep = MetricsReport::from_records(&recs).unwrap();
        assert_eq!(rep.mean_ssim, 1.0);
        assert_eq!(rep.game[0], rep.mae);
        let text = rep.to_text();
        assert!(text.contains("game0=") && text.contains("game3="));
        assert_eq!(MetricsReport::parse(&text).unwrap(), rep);
        assert!(MetricsReport::parse("mae=1\nbogus=2\n").is_err());
    }
}
