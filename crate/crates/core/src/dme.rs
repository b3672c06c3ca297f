//! Density map estimator and the four ways of feeding it attention.
//!
//! Back end (on the 1/4-scale front-end features), two blocks of parallel
//! branches, each block concatenated to 24 channels and followed by ReLU:
//!
//! | block | branches                                   | in  |
//! |-------|--------------------------------------------|-----|
//! | 1     | Dconv3-8-1, Dconv5-8-1, Conv1-8-1          | 32  |
//! | 2     | Dconv3-8-1, Dconv5-8-1, Conv1-8-1          | 24  |
//! | head  | Conv1-1-1, no activation                   | 24  |

use std::fmt;
use std::str::FromStr;

use crate::amg::{binarize_attention, AmgNetwork};
use crate::autograd::{Tape, Var};
use crate::deform::{bind_layer, DeformConvLayer};
use crate::density::{downsample_density, DensityMap};
use crate::error::{Error, Result};
use crate::network::{front_end, front_end_forward, ConvLayer, DOWNSAMPLE, FRONT_CHANNELS};
use crate::params::{adam_step, BoundParams, NetworkParams, TrainConfig};
use crate::rng::SplitMix64;
use crate::synth::{crop_plane, patch_windows, SceneSample};
use crate::tensor::{Real, Tensor};

const SHUFFLE_TAG: u64 = 0xD3E0;
const PATCH_TAG: u64 = 0xD3E1;
const BLOCK_CHANNELS: usize = 24;
/// Std of the output layer's initial weights; small so an untrained
/// estimator starts near an empty density map.
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Raw image in.
    Dme,
    /// Image multiplied by the attention map.
    AmgDme,
    /// Image multiplied by the thresholded (0/1) attention map.
    AmgBAttnDme,
    /// Raw image in; attention multiplies the front-end features.
    AmgAttnDme,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Dme,
        VariantKind::AmgDme,
        VariantKind::AmgBAttnDme,
        VariantKind::AmgAttnDme,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Dme => "DME",
            VariantKind::AmgDme => "AMG-DME",
            VariantKind::AmgBAttnDme => "AMG-bAttn-DME",
            VariantKind::AmgAttnDme => "AMG-attn-DME",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != VariantKind::Dme
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown variant {s:?} (expected DME, AMG-DME, AMG-bAttn-DME or AMG-attn-DME)"
                ))
            })
    }
}

/// Variant plus the binarization threshold used by `AMG-bAttn-DME`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineVariant {
    pub kind: VariantKind,
    pub threshold: f64,
}

impl PipelineVariant {
    pub const DEFAULT_THRESHOLD: f64 = 0.1;

    pub fn new(kind: VariantKind, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(PipelineVariant { kind, threshold })
    }

    pub fn of(kind: VariantKind) -> Self {
        PipelineVariant {
            kind,
            threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmeNetwork<T = f32> {
    pub params: NetworkParams<T>,
}

/// Branch layers of one back-end block.
pub struct DmeBlock {
    pub dconv3: DeformConvLayer,
    pub dconv5: DeformConvLayer,
    pub conv1: ConvLayer,
}

impl DmeBlock {
    fn new(index: usize, in_channels: usize) -> Self {
        let p = format!("dme.block{index}");
        DmeBlock {
            dconv3: DeformConvLayer::same(format!("{p}.dconv3"), in_channels, 8, 3),
            dconv5: DeformConvLayer::same(format!("{p}.dconv5"), in_channels, 8, 5),
            conv1: ConvLayer::new(format!("{p}.conv1"), in_channels, 8, 1, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        self.dconv3.param_count() + self.dconv5.param_count() + self.conv1.param_count()
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &BoundParams, x: Var) -> Result<Var> {
        let a = self.dconv3.forward(tape, x, &bind_layer(&self.dconv3, bound)?)?;
        let b = self.dconv5.forward(tape, x, &bind_layer(&self.dconv5, bound)?)?;
        let c = self.conv1.forward(tape, bound, x)?;
        let merged = tape.concat_channels(&[a, b, c])?;
        Ok(tape.relu(merged))
    }
}

impl DmeNetwork<f32> {
    pub fn build(seed: u64) -> Self {
        Self::build_in(seed)
    }
}

impl<T: Real> DmeNetwork<T> {
    pub fn front_end_layers() -> [ConvLayer; 4] {
        front_end("dme")
    }

    pub fn blocks() -> [DmeBlock; 2] {
        [DmeBlock::new(1, FRONT_CHANNELS), DmeBlock::new(2, BLOCK_CHANNELS)]
    }

    pub fn head_layer() -> ConvLayer {
        ConvLayer::new("dme.head", BLOCK_CHANNELS, 1, 1, 1)
    }

    pub fn build_in(seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[0xD3E]);
        let mut params = NetworkParams::new();
        for layer in Self::front_end_layers() {
            layer.init(&mut params, &mut rng).expect("unique names");
        }
        for block in Self::blocks() {
            block.dconv3.init(&mut params, &mut rng).expect("unique names");
            block.dconv5.init(&mut params, &mut rng).expect("unique names");
            block.conv1.init(&mut params, &mut rng).expect("unique names");
        }
        let head = Self::head_layer();
        head.init(&mut params, &mut rng).expect("unique names");
        let w = params.get_mut(&head.weight_name()).expect("just inserted");
        let fresh = Tensor::from_fn(w.shape(), |_| T::from_f64_lossy(rng.normal() * HEAD_INIT_STD));
        *w = fresh;
        DmeNetwork { params }
    }

    pub fn cast<U: Real>(&self) -> DmeNetwork<U> {
        DmeNetwork {
            params: self.params.cast(),
        }
    }

    /// Records the estimator on `tape`. When `attention` is given (AMG-attn-DME)
    /// it is resized to the front-end resolution and multiplies every
    /// front-end channel.
    pub fn trace(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        images: Var,
        attention: Option<Var>,
    ) -> Result<Var> {
        let [_, c, h, w] = tape.value(images).dims4()?;
        if c != 1 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 || h < DOWNSAMPLE * 2 || w < DOWNSAMPLE * 2 {
            return Err(Error::shape(format!(
                "DME input must be grayscale with sides a multiple of {DOWNSAMPLE}, got {:?}",
                tape.value(images).shape()
            )));
        }
        let mut x = front_end_forward(&Self::front_end_layers(), tape, bound, images)?;
        if let Some(att) = attention {
            x = inject_attention_features(tape, x, att)?;
        }
        for block in Self::blocks() {
            x = block.forward(tape, bound, x)?;
        }
        Self::head_layer().forward(tape, bound, x)
    }

    /// Runs a prepared `[1, 1, H, W]` input (see [`variant_inputs`]).
    pub fn predict(&self, input: &Tensor<T>, feature_attention: Option<&Tensor<T>>) -> Result<DensityMap<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let att = feature_attention.map(|a| tape.constant(a.clone()));
        let out = self.trace(&mut tape, &bound, x, att)?;
        let grid = tape.value(out).clone();
        if grid.shape()[0] != 1 {
            return Err(Error::shape("predict takes a single image"));
        }
        DensityMap::new(grid, DOWNSAMPLE)
    }
}

/// Pixel-wise product of an image and its attention map.
pub fn apply_attention<T: Real>(image: &Tensor<T>, attention: &Tensor<T>) -> Result<Tensor<T>> {
    if image.shape() != attention.shape() {
        return Err(Error::shape(format!(
            "attention {:?} does not match image {:?}",
            attention.shape(),
            image.shape()
        )));
    }
    let data = image
        .data()
        .iter()
        .zip(attention.data())
        .map(|(a, b)| *a * *b)
        .collect();
    Tensor::new(image.shape(), data)
}

/// Resizes `attention: [N, 1, H, W]` to the resolution of
/// `features: [N, C, h, w]` and multiplies it into every channel.
pub fn inject_attention_features<T: Real>(tape: &mut Tape<T>, features: Var, attention: Var) -> Result<Var> {
    let [_, _, h, w] = tape.value(features).dims4()?;
    let resized = tape.bilinear_resize(attention, h, w)?;
    tape.channel_mask(features, resized)
}

/// DME input image and optional feature-level attention for `variant`, given
/// the image's attention map (required unless the variant is plain DME).
pub fn variant_inputs<T: Real>(
    variant: &PipelineVariant,
    image: &Tensor<T>,
    attention: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let need = || {
        attention.ok_or_else(|| {
            Error::invalid(format!("variant {} requires an attention map", variant.kind))
        })
    };
    Ok(match variant.kind {
        VariantKind::Dme => (image.clone(), None),
        VariantKind::AmgDme => (apply_attention(image, need()?)?, None),
        VariantKind::AmgBAttnDme => (
            apply_attention(image, &binarize_attention(need()?, variant.threshold)?)?,
            None,
        ),
        VariantKind::AmgAttnDme => (image.clone(), Some(need()?.clone())),
    })
}

/// Full pipeline on one `[1, 1, H, W]` image. The AMG is only consulted by
/// attention variants and never modified.
pub fn dme_forward<T: Real>(
    net: &DmeNetwork<T>,
    image: &Tensor<T>,
    variant: &PipelineVariant,
    amg: Option<&AmgNetwork<T>>,
) -> Result<DensityMap<T>> {
    let attention = if variant.kind.uses_attention() {
        let amg = amg.ok_or_else(|| {
            Error::invalid(format!("variant {} requires an AMG network", variant.kind))
        })?;
        Some(amg.forward(image)?.attention)
    } else {
        None
    };
    let (input, feat) = variant_inputs(variant, image, attention.as_ref())?;
    net.predict(&input, feat.as_ref())
}

/// `(1 / 2N) * sum_i ||pred_i - gt_i||^2` over a batch of `N` maps.
pub fn density_loss<T: Real>(preds: &[DensityMap<T>], gts: &[DensityMap<T>]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "density_loss needs equally sized non-empty batches, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        if p.grid.shape() != g.grid.shape() || p.scale != g.scale {
            return Err(Error::shape(format!(
                "prediction {:?} (scale {}) vs ground truth {:?} (scale {})",
                p.grid.shape(),
                p.scale,
                g.grid.shape(),
                g.scale
            )));
        }
        total += p
            .values()
            .iter()
            .zip(g.values())
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum::<f64>();
    }
    Ok(total / (2.0 * preds.len() as f64))
}

struct TrainPatch {
    input: Tensor<f32>,
    attention: Option<Tensor<f32>>,
    target: Tensor<f32>,
}

/// Trains the estimator on the augmented patches of `dataset` (18 per scene)
/// against ground truth block-summed to the output scale. Attention variants
/// use `amg` frozen. Returns the mean per-sample loss of each epoch.
pub fn train_dme(
    net: &mut DmeNetwork<f32>,
    dataset: &[SceneSample],
    variant: &PipelineVariant,
    amg: Option<&AmgNetwork<f32>>,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("DME training needs at least one scene"));
    }
    if variant.kind.uses_attention() && amg.is_none() {
        return Err(Error::invalid(format!(
            "variant {} requires a trained AMG",
            variant.kind
        )));
    }
    let mut patches = Vec::with_capacity(dataset.len() * crate::synth::PATCHES_PER_IMAGE);
    for (i, sample) in dataset.iter().enumerate() {
        let attention = match amg {
            Some(amg) if variant.kind.uses_attention() => Some(amg.forward(&sample.image)?.attention),
            _ => None,
        };
        let (input, feat) = variant_inputs(variant, &sample.image, attention.as_ref())?;
        let seed = SplitMix64::derive(config.rng_seed, &[PATCH_TAG, i as u64]).next_u64();
        for win in patch_windows(sample.height(), sample.width(), seed)? {
            let gt = DensityMap::new(crop_plane(&sample.gt_density.grid, &win)?, 1)?;
            patches.push(TrainPatch {
                input: crop_plane(&input, &win)?,
                attention: feat.as_ref().map(|a| crop_plane(a, &win)).transpose()?,
                target: downsample_density(&gt, DOWNSAMPLE)?.grid,
            });
        }
    }

    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        SplitMix64::derive(config.rng_seed, &[SHUFFLE_TAG, epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let pick = |f: fn(&TrainPatch) -> &Tensor<f32>| -> Result<Tensor<f32>> {
                Tensor::stack(&chunk.iter().map(|&i| f(&patches[i])).collect::<Vec<_>>())
            };
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape, true);
            let x = tape.constant(pick(|p| &p.input)?);
            let att = match patches[chunk[0]].attention {
                Some(_) => Some(tape.constant(pick(|p| p.attention.as_ref().expect("uniform variant"))?)),
                None => None,
            };
            let target = tape.constant(pick(|p| &p.target)?);
            let pred = net.trace(&mut tape, &bound, x, att)?;
            let loss = tape.squared_error(pred, target, chunk.len())?;
            total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            net.params.zero_grads();
            net.params.accumulate_grads(&bound, &grads);
            adam_step(&mut net.params, config)?;
        }
        history.push(total / patches.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f32>) -> DensityMap<f32> {
        let n = values.len();
        DensityMap::new(Tensor::new(&[1, 1, 1, n], values).unwrap(), 4).unwrap()
    }

    #[test]
    fn loss_values_follow_the_half_mean_squared_norm() {
        let a = map(vec![1.0, 2.0, 3.0]);
        assert_eq!(density_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        let b = map(vec![1.0, 4.0, 3.0]);
        assert_eq!(density_loss(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap(), 2.0);
        // per-sample squared norms 4 and 9 -> (4 + 9) / 4
        let c = map(vec![1.0, 2.0, 6.0]);
        assert_eq!(density_loss(&[b, c], &[a.clone(), a]).unwrap(), 13.0 / 4.0);
    }

    #[test]
    fn loss_rejects_mismatched_maps() {
        let a = map(vec![1.0, 2.0]);
        let b = map(vec![1.0, 2.0, 3.0]);
        assert!(density_loss(std::slice::from_ref(&a), &[b]).is_err());
        let mut s1 = a.clone();
        s1.scale = 1;
        assert!(density_loss(&[a], &[s1]).is_err());
    }

    #[test]
    fn output_is_quarter_size_single_channel() {
        let net = DmeNetwork::build(0);
        let img = Tensor::from_fn(&[1, 1, 64, 64], |i| (i % 7) as f32 / 7.0);
        let out = net.predict(&img, None).unwrap();
        assert_eq!(out.grid.shape(), &[1, 1, 16, 16]);
        assert_eq!(out.scale, 4);
    }

    #[test]
    fn build_is_deterministic() {
        assert!(DmeNetwork::build(8).params.same_values(&DmeNetwork::build(8).params));
    }

    #[test]
    fn apply_attention_identities() {
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f32 / 16.0);
        assert_eq!(apply_attention(&img, &Tensor::ones(&[1, 1, 4, 4])).unwrap(), img);
        let z = apply_attention(&img, &Tensor::zeros(&[1, 1, 4, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(apply_attention(&img, &Tensor::ones(&[1, 1, 2, 8])).is_err());
    }

    #[test]
    fn attention_variants_need_an_amg() {
        let net = DmeNetwork::build(0);
        let img = Tensor::zeros(&[1, 1, 16, 16]);
        for kind in [VariantKind::AmgDme, VariantKind::AmgBAttnDme, VariantKind::AmgAttnDme] {
            assert!(dme_forward(&net, &img, &PipelineVariant::of(kind), None).is_err());
        }
        assert!(dme_forward(&net, &img, &PipelineVariant::of(VariantKind::Dme), None).is_ok());
    }

    #[test]
    fn variant_names_round_trip() {
        for k in VariantKind::ALL {
            assert_eq!(k.as_str().parse::<VariantKind>().unwrap(), k);
        }
        assert!("UNet".parse::<VariantKind>().is_err());
        assert!(PipelineVariant::new(VariantKind::AmgBAttnDme, 1.2).is_err());
    }
}
