//! Attention map generator: a fully convolutional crowd/background classifier
//! whose two class maps, weighted by the class probabilities, form the
//! attention map.
//!
//! Back end (on the 1/4-scale front-end features):
//!
//! | layer          | kernel | filters | dilation |
//! |----------------|--------|---------|----------|
//! | amg.back.b1    | 1      | 8       | 1        |
//! | amg.back.b3d1  | 3      | 8       | 1        |
//! | amg.back.b3d2  | 3      | 8       | 2        |
//! | amg.back.b3d3  | 3      | 8       | 3        |
//! | (concat, ReLU) |        | 32      |          |
//! | amg.head       | 1      | 2       | 1        |
//!
//! Head channel 0 is the background map `Fb`, channel 1 the crowd map `Fc`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{front_end, front_end_forward, ConvLayer, DOWNSAMPLE, FRONT_CHANNELS};
use crate::params::{adam_step, BoundParams, NetworkParams, TrainConfig};
use crate::rng::SplitMix64;
use crate::synth::{Label, SceneSample};
use crate::tensor::{Real, Tensor};

pub const BACKGROUND_CHANNEL: usize = 0;
pub const CROWD_CHANNEL: usize = 1;

const SHUFFLE_TAG: u64 = 0xA3C0;

#[derive(Clone, Debug, PartialEq)]
pub struct AmgNetwork<T = f32> {
    pub params: NetworkParams<T>,
}

/// Intermediate values of one attention computation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBundle<T = f32> {
    pub fc: Tensor<T>,
    pub fb: Tensor<T>,
    pub wc: T,
    pub wb: T,
    pub pc: T,
    pub pb: T,
    /// Image-sized, min-max normalized to `[0, 1]`.
    pub attention: Tensor<T>,
}

/// Tape handles of one AMG forward pass.
pub struct AmgTrace {
    /// `[N, 2, h, w]` class maps.
    pub class_maps: Var,
    /// `[N, 2]` spatial means of the class maps.
    pub logits: Var,
    /// `[N, 2]` softmax of the logits.
    pub probs: Var,
}

impl AmgNetwork<f32> {
    pub fn build(seed: u64) -> Self {
        Self::build_in(seed)
    }
}

impl<T: Real> AmgNetwork<T> {
    pub fn front_end_layers() -> [ConvLayer; 4] {
        front_end("amg")
    }

    pub fn branch_layers() -> [ConvLayer; 4] {
        let c = FRONT_CHANNELS;
        [
            ConvLayer::new("amg.back.b1", c, 8, 1, 1),
            ConvLayer::new("amg.back.b3d1", c, 8, 3, 1),
            ConvLayer::new("amg.back.b3d2", c, 8, 3, 2),
            ConvLayer::new("amg.back.b3d3", c, 8, 3, 3),
        ]
    }

    pub fn head_layer() -> ConvLayer {
        ConvLayer::new("amg.head", 32, 2, 1, 1)
    }

    pub fn layers() -> Vec<ConvLayer> {
        let mut v: Vec<ConvLayer> = Self::front_end_layers().into();
        v.extend(Self::branch_layers());
        v.push(Self::head_layer());
        v
    }

    /// Deterministic He-initialized network in any precision.
    pub fn build_in(seed: u64) -> Self {
        let mut rng = SplitMix64::derive(seed, &[0xA36]);
        let mut params = NetworkParams::new();
        for layer in Self::layers() {
            layer.init(&mut params, &mut rng).expect("layer names are unique");
        }
        AmgNetwork { params }
    }

    pub fn cast<U: Real>(&self) -> AmgNetwork<U> {
        AmgNetwork {
            params: self.params.cast(),
        }
    }

    /// Records the classifier on `tape` for a `[N, 1, H, W]` batch.
    pub fn trace(&self, tape: &mut Tape<T>, bound: &BoundParams, images: Var) -> Result<AmgTrace> {
        check_input(tape.value(images))?;
        let features = front_end_forward(&Self::front_end_layers(), tape, bound, images)?;
        let mut branches = Vec::with_capacity(4);
        for layer in Self::branch_layers() {
            branches.push(layer.forward(tape, bound, features)?);
        }
        let merged = tape.concat_channels(&branches)?;
        let merged = tape.relu(merged);
        let class_maps = Self::head_layer().forward(tape, bound, merged)?;
        let logits = tape.global_avg_pool(class_maps)?;
        let probs = tape.softmax(logits)?;
        Ok(AmgTrace {
            class_maps,
            logits,
            probs,
        })
    }

    /// Computes the attention map of a single `[1, 1, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>) -> Result<AttentionBundle<T>> {
        let [n, _, h, w] = image.dims4()?;
        if n != 1 {
            return Err(Error::shape("amg_forward takes a single image"));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let trace = self.trace(&mut tape, &bound, x)?;
        let fused = tape.weighted_channel_sum(trace.class_maps, trace.probs)?;
        let up = tape.bilinear_resize(fused, h, w)?;
        let maps = tape.value(trace.class_maps);
        let [_, _, fh, fw] = maps.dims4()?;
        let plane = |c: usize| Tensor::new(&[1, 1, fh, fw], maps.plane(0, c).to_vec());
        let logits = tape.value(trace.logits).data();
        let probs = tape.value(trace.probs).data();
        Ok(AttentionBundle {
            fc: plane(CROWD_CHANNEL)?,
            fb: plane(BACKGROUND_CHANNEL)?,
            wc: logits[CROWD_CHANNEL],
            wb: logits[BACKGROUND_CHANNEL],
            pc: probs[CROWD_CHANNEL],
            pb: probs[BACKGROUND_CHANNEL],
            attention: normalize_min_max(tape.value(up)),
        })
    }

    /// Crowd when `Pc >= Pb`; the confidence is the winning probability.
    pub fn classify(&self, image: &Tensor<T>) -> Result<(Label, f64)> {
        let b = self.forward(image)?;
        Ok(if b.pc >= b.pb {
            (Label::Crowd, b.pc.to_f64_lossy())
        } else {
            (Label::Background, b.pb.to_f64_lossy())
        })
    }
}

fn check_input<T: Real>(image: &Tensor<T>) -> Result<()> {
    let [_, c, h, w] = image.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!("expected grayscale input, got {c} channels")));
    }
    if h < 16 || w < 16 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} must be at least 16x16 with sides a multiple of {DOWNSAMPLE}"
        )));
    }
    Ok(())
}

/// Per-image min-max scaling to `[0, 1]`; a constant map becomes all ones.
pub fn normalize_min_max<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (t.min_value(), t.max_value());
    if !(hi > lo) {
        return t.map(|_| T::one());
    }
    let span = hi - lo;
    t.map(|v| ((v - lo) / span).max(T::zero()).min(T::one()))
}

/// Values below `t` become 0, the rest 1.
pub fn binarize_attention<T: Real>(attention: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("threshold {t} outside [0, 1]")));
    }
    let t = T::from_f64_lossy(t);
    Ok(attention.map(|v| if v < t { T::zero() } else { T::one() }))
}

/// Trains the classifier with two-class cross-entropy and Adam. Returns the
/// mean loss of each epoch.
pub fn train_amg(
    net: &mut AmgNetwork<f32>,
    positives: &[SceneSample],
    negatives: &[SceneSample],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid("AMG training needs both crowd and background samples"));
    }
    // Each epoch pairs every positive with one negative (cycling through
    // the negatives), so both classes are seen equally often.
    let n_each = positives.len().max(negatives.len());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = SplitMix64::derive(config.rng_seed, &[SHUFFLE_TAG, epoch as u64]);
        let mut samples: Vec<(&Tensor<f32>, u8)> = Vec::with_capacity(2 * n_each);
        for set in [positives, negatives] {
            let mut idx: Vec<usize> = (0..set.len()).collect();
            rng.shuffle(&mut idx);
            samples.extend(
                idx.iter()
                    .cycle()
                    .take(n_each)
                    .map(|&i| (&set[i].image, set[i].label.class_index())),
            );
        }
        rng.shuffle(&mut samples);
        let mut total = 0.0;
        for chunk in samples.chunks(config.batch_size) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| s.0).collect();
            let labels: Vec<u8> = chunk.iter().map(|s| s.1).collect();
            let mut tape = Tape::new();
            let bound = net.params.bind(&mut tape, true);
            let x = tape.constant(Tensor::stack(&images)?);
            let trace = net.trace(&mut tape, &bound, x)?;
            let loss = tape.cross_entropy_2class(trace.logits, &labels)?;
            total += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            net.params.zero_grads();
            net.params.accumulate_grads(&bound, &grads);
            adam_step(&mut net.params, config)?;
        }
        history.push(total / samples.len() as f64);
    }
    Ok(history)
}

/// Fraction of samples whose predicted label matches their own.
pub fn classification_accuracy(net: &AmgNetwork<f32>, samples: &[SceneSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut hits = 0;
    for s in samples {
        if net.classify(&s.image)?.0 == s.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
