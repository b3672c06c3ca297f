//! Deterministic synthetic crowd scenes.
//!
//! Every scene is a pure function of `(rng_seed, index, label)`: a smooth
//! background with per-pixel noise, textured "tree-like" clutter blobs, and,
//! for crowd scenes, dark soft-edged discs (heads) whose radius grows from the
//! top of the frame to the bottom. Background scenes are drawn the same way
//! with no heads.

pub mod io;
mod patches;

pub use patches::{crop_patches, crop_plane, patch_windows, PatchWindow, PATCHES_PER_IMAGE};

use crate::density::{gt_density, DensityMap};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Background,
    Crowd,
}

impl Label {
    /// Class index used by the classifier: 1 for crowd, 0 for background.
    pub fn class_index(self) -> u8 {
        match self {
            Label::Background => 0,
            Label::Crowd => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Crowd => "crowd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "crowd" => Some(Label::Crowd),
            "background" => Some(Label::Background),
            _ => None,
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Label::Background => 0xB6,
            Label::Crowd => 0xC7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[1, 1, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Head centres as `(y, x)` pixel coordinates.
    pub heads: Vec<(f64, f64)>,
    pub gt_density: DensityMap<f32>,
    pub label: Label,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Height and width of every scene.
    pub image_size: usize,
    pub train_crowd: usize,
    pub train_background: usize,
    pub test_crowd: usize,
    pub heads_min: usize,
    pub heads_max: usize,
    /// Head radius at the top row (far) and bottom row (near).
    pub head_radius_min: f64,
    pub head_radius_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    pub noise_amplitude: f64,
    pub sigma: f64,
    pub rng_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            image_size: 64,
            train_crowd: 200,
            train_background: 80,
            test_crowd: 50,
            heads_min: 5,
            heads_max: 60,
            head_radius_min: 2.0,
            head_radius_max: 3.5,
            distractors_min: 2,
            distractors_max: 5,
            noise_amplitude: 0.04,
            sigma: 2.0,
            rng_seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image_size must be a multiple of 8 and at least 16, got {}",
                self.image_size
            )));
        }
        if self.train_crowd == 0 || self.train_background == 0 || self.test_crowd == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        if self.heads_min == 0 || self.heads_min > self.heads_max {
            return Err(Error::invalid(format!(
                "head count range {}..={} is empty or allows zero heads",
                self.heads_min, self.heads_max
            )));
        }
        if !(self.head_radius_min > 0.0 && self.head_radius_min <= self.head_radius_max) {
            return Err(Error::invalid("head radius range must be positive and ordered"));
        }
        if self.distractors_min > self.distractors_max {
            return Err(Error::invalid("distractor range is empty"));
        }
        if !(self.noise_amplitude >= 0.0) {
            return Err(Error::invalid("noise amplitude must be non-negative"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::invalid("sigma must be positive"));
        }
        Ok(())
    }

    /// Same scenes family with three times the clutter and stronger noise,
    /// used for the noisy-scene evaluation split.
    pub fn distractor_heavy(&self) -> Self {
        CorpusConfig {
            distractors_min: self.distractors_min * 3 + 2,
            distractors_max: self.distractors_max * 3 + 2,
            noise_amplitude: self.noise_amplitude * 1.5,
            ..self.clone()
        }
    }

    /// Scene indices of the test split; disjoint from `0..train_crowd`.
    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.train_crowd..self.train_crowd + self.test_crowd
    }
}

fn smoothstep_weight(edge_distance: f64) -> f64 {
    (edge_distance + 0.5).clamp(0.0, 1.0)
}

/// Renders scene `index` of class `label`.
pub fn synth_scene(config: &CorpusConfig, index: usize, label: Label) -> Result<SceneSample> {
    config.validate()?;
    let size = config.image_size;
    let sf = size as f64;
    let mut rng = SplitMix64::derive(config.rng_seed, &[label.stream_tag(), index as u64]);
    let mut px = vec![0.0f64; size * size];

    let base = rng.range(0.45, 0.7);
    let gy = rng.range(-0.15, 0.15);
    let gx = rng.range(-0.15, 0.15);
    for y in 0..size {
        for x in 0..size {
            px[y * size + x] = base + gy * (y as f64 / sf - 0.5) + gx * (x as f64 / sf - 0.5);
        }
    }

    // Clutter: elliptical blobs filled with oriented stripes.
    let n_clutter = rng.int_inclusive(config.distractors_min as u64, config.distractors_max as u64);
    for _ in 0..n_clutter {
        let cy = rng.range(0.0, sf);
        let cx = rng.range(0.0, sf);
        let ry = rng.range(3.0, 7.0);
        let rx = rng.range(2.0, 5.0);
        let theta = rng.range(0.0, std::f64::consts::PI);
        let period = rng.range(2.5, 4.0);
        let level = rng.range(0.35, 0.55);
        let (st, ct) = theta.sin_cos();
        let reach = ry.max(rx) + 1.0;
        let (y0, y1) = ((cy - reach).floor().max(0.0) as usize, ((cy + reach).ceil() as usize).min(size - 1));
        let (x0, x1) = ((cx - reach).floor().max(0.0) as usize, ((cx + reach).ceil() as usize).min(size - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let r = (dy * dy + dx * dx).sqrt();
                let w = smoothstep_weight((1.0 - r) * ry.min(rx));
                if w <= 0.0 {
                    continue;
                }
                let phase = (x as f64 * ct + y as f64 * st) / period;
                let v = level + 0.15 * (2.0 * std::f64::consts::PI * phase).sin();
                let p = &mut px[y * size + x];
                *p = *p * (1.0 - w) + v * w;
            }
        }
    }

    let mut heads = Vec::new();
    if label == Label::Crowd {
        let n = rng.int_inclusive(config.heads_min as u64, config.heads_max as u64) as usize;
        let top = sf - 1.0;
        for _ in 0..n {
            let hy = rng.range(0.0, top);
            let hx = rng.range(0.0, top);
            let radius = config.head_radius_min
                + (config.head_radius_max - config.head_radius_min) * (hy / top);
            let tone = rng.range(0.05, 0.18);
            let reach = radius + 1.0;
            let (y0, y1) = ((hy - reach).floor().max(0.0) as usize, ((hy + reach).ceil() as usize).min(size - 1));
            let (x0, x1) = ((hx - reach).floor().max(0.0) as usize, ((hx + reach).ceil() as usize).min(size - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d = ((y as f64 - hy).powi(2) + (x as f64 - hx).powi(2)).sqrt();
                    let w = smoothstep_weight(radius - d);
                    let p = &mut px[y * size + x];
                    *p = *p * (1.0 - w) + tone * w;
                }
            }
            heads.push((hy, hx));
        }
    }

    let amp = config.noise_amplitude;
    let image: Vec<f32> = px
        .iter()
        .map(|&v| (v + rng.range(-amp, amp)).clamp(0.0, 1.0) as f32)
        .collect();
    let image = Tensor::new(&[1, 1, size, size], image)?;
    let gt_density = gt_density(&heads, size, size, config.sigma)?;
    Ok(SceneSample {
        image,
        heads,
        gt_density,
        label,
    })
}

/// All three splits of a corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train_crowd: Vec<SceneSample>,
    pub train_background: Vec<SceneSample>,
    pub test_crowd: Vec<SceneSample>,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let gen = |range: std::ops::Range<usize>, label| {
            range
                .map(|i| synth_scene(config, i, label))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Corpus {
            train_crowd: gen(0..config.train_crowd, Label::Crowd)?,
            train_background: gen(0..config.train_background, Label::Background)?,
            test_crowd: gen(config.test_indices(), Label::Crowd)?,
        })
    }

    pub fn len(&self) -> usize {
        self.train_crowd.len() + self.train_background.len() + self.test_crowd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Background scenes with indices after the training range, for held-out
/// classification checks.
pub fn holdout_background(config: &CorpusConfig, count: usize) -> Result<Vec<SceneSample>> {
    (config.train_background..config.train_background + count)
        .map(|i| synth_scene(config, i, Label::Background))
        .collect()
}
