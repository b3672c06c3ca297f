//! Deformable 2-D convolution.
//!
//! Every kernel tap of every output location samples the input at its regular
//! grid position plus a learned `(dy, dx)` displacement. The displacements are
//! predicted by a companion standard convolution over the same input (the
//! "offset branch"), so the layer carries five parameter groups: `weight`,
//! `bias`, `offset_weight`, `offset_bias` and nothing else.
//!
//! Offset channel layout: `2 * k * k` channels, tap-major in row-major kernel
//! order, `dy` before `dx` for each tap. Samples that fall outside the input
//! read zero, matching the zero padding of the regular convolution.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Conv2dParams;
use crate::params::{he_normal, NetworkParams};
use crate::rng::SplitMix64;
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Bilinear interpolation of `plane` (`height x width`, row-major) at the
/// fractional location `(y, x)`. Neighbours outside the plane read zero.
pub fn bilinear_sample<T: Real>(plane: &[T], height: usize, width: usize, y: T, x: T) -> T {
    sample_with_grad(plane, height, width, y, x).value
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Sample<T> {
    pub value: T,
    pub d_y: T,
    pub d_x: T,
    /// Flat indices and interpolation weights of the (up to) four neighbours.
    pub taps: [(usize, T); 4],
    pub n_taps: usize,
}

#[inline]
pub(crate) fn sample_with_grad<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> Sample<T> {
    let zero = T::zero();
    let mut s = Sample {
        value: zero,
        d_y: zero,
        d_x: zero,
        taps: [(0, zero); 4],
        n_taps: 0,
    };
    let (hf, wf) = (T::from_usize(h).unwrap(), T::from_usize(w).unwrap());
    let neg1 = -T::one();
    if !(y >= neg1 && y <= hf && x >= neg1 && x <= wf) {
        return s;
    }
    let y0f = y.floor();
    let x0f = x.floor();
    let ly = y - y0f;
    let lx = x - x0f;
    let y0 = y0f.to_isize().unwrap_or(-2);
    let x0 = x0f.to_isize().unwrap_or(-2);
    let at = |yy: isize, xx: isize| -> Option<usize> {
        (yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize)
            .then(|| yy as usize * w + xx as usize)
    };
    let one = T::one();
    let corners = [
        (y0, x0, (one - ly) * (one - lx)),
        (y0, x0 + 1, (one - ly) * lx),
        (y0 + 1, x0, ly * (one - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ];
    let mut f = [zero; 4];
    for (i, &(yy, xx, wt)) in corners.iter().enumerate() {
        if let Some(idx) = at(yy, xx) {
            f[i] = plane[idx];
            s.taps[s.n_taps] = (idx, wt);
            s.n_taps += 1;
        }
    }
    s.value = corners[0].2 * f[0] + corners[1].2 * f[1] + corners[2].2 * f[2] + corners[3].2 * f[3];
    s.d_y = (one - lx) * (f[2] - f[0]) + lx * (f[3] - f[1]);
    s.d_x = (one - ly) * (f[1] - f[0]) + ly * (f[3] - f[2]);
    s
}

/// Bilinear neighbourhood of one sampling location, shared by all channels.
#[derive(Clone, Copy, Debug)]
struct Footprint<T> {
    idx: [usize; 4],
    wt: [T; 4],
    valid: [bool; 4],
    ly: T,
    lx: T,
}

impl<T: Real> Footprint<T> {
    #[inline]
    fn new(h: usize, w: usize, y: T, x: T) -> Option<Self> {
        let neg1 = -T::one();
        if !(y >= neg1 && y <= T::from_usize(h).unwrap() && x >= neg1 && x <= T::from_usize(w).unwrap()) {
            return None;
        }
        let (y0f, x0f) = (y.floor(), x.floor());
        let (ly, lx) = (y - y0f, x - x0f);
        let y0 = y0f.to_isize().unwrap_or(-2);
        let x0 = x0f.to_isize().unwrap_or(-2);
        let one = T::one();
        let mut fp = Footprint {
            idx: [0; 4],
            wt: [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx],
            valid: [false; 4],
            ly,
            lx,
        };
        for (i, (yy, xx)) in [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)].into_iter().enumerate() {
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                fp.idx[i] = yy as usize * w + xx as usize;
                fp.valid[i] = true;
            }
        }
        Some(fp)
    }

    #[inline]
    fn corners(&self, plane: &[T]) -> [T; 4] {
        let mut f = [T::zero(); 4];
        for i in 0..4 {
            if self.valid[i] {
                f[i] = plane[self.idx[i]];
            }
        }
        f
    }

    #[inline]
    fn value(&self, plane: &[T]) -> T {
        let f = self.corners(plane);
        self.wt[0] * f[0] + self.wt[1] * f[1] + self.wt[2] * f[2] + self.wt[3] * f[3]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl DeformGeometry {
    pub fn check<T: Real>(
        input: &Tensor<T>,
        offsets: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [n, c, h, w] = input.dims4()?;
        let [o, wc, kh, kw] = weight.dims4()?;
        if wc != c || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "deform_conv2d: weight {:?} incompatible with {c} input channels (square odd kernel required)",
                weight.shape()
            )));
        }
        if bias.shape() != [o] {
            return Err(Error::shape(format!(
                "deform_conv2d: bias {:?} does not match {o} filters",
                bias.shape()
            )));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "deform_conv2d: {h}x{w} input too small for kernel {kh} with padding {padding}"
            )));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let want = [n, 2 * kh * kw, out_h, out_w];
        if offsets.shape() != want {
            return Err(Error::shape(format!(
                "deform_conv2d: offsets {:?}, expected {want:?}",
                offsets.shape()
            )));
        }
        Ok(DeformGeometry {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Sampling location of tap `(ki, kj)` at output `(oy, ox)` before offsets.
    #[inline]
    fn base(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> (isize, isize) {
        let p = self.padding as isize;
        (
            (oy * self.stride + ki) as isize - p,
            (ox * self.stride + kj) as isize - p,
        )
    }
}

/// Visits every (channel, tap, output position) sample of one batch item.
#[inline]
fn for_each_sample<T: Real>(
    g: &DeformGeometry,
    offsets: &[T],
    mut f: impl FnMut(usize, usize, T, T),
) {
    let ncol = g.cols();
    for tap in 0..g.taps() {
        let (ki, kj) = (tap / g.kernel, tap % g.kernel);
        let dy = &offsets[2 * tap * ncol..(2 * tap + 1) * ncol];
        let dx = &offsets[(2 * tap + 1) * ncol..(2 * tap + 2) * ncol];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let (by, bx) = g.base(oy, ox, ki, kj);
                let y = T::from_isize(by).unwrap() + dy[p];
                let x = T::from_isize(bx).unwrap() + dx[p];
                f(tap, p, y, x);
            }
        }
    }
}

fn deform_im2col<T: Real>(input: &[T], offsets: &[T], g: &DeformGeometry, cols: &mut [T]) {
    let plane = g.height * g.width;
    let ncol = g.cols();
    let taps = g.taps();
    for_each_sample(g, offsets, |tap, p, y, x| {
        let fp = Footprint::new(g.height, g.width, y, x);
        for c in 0..g.channels {
            cols[(c * taps + tap) * ncol + p] = match &fp {
                Some(fp) => fp.value(&input[c * plane..(c + 1) * plane]),
                None => T::zero(),
            };
        }
    });
}

pub(crate) fn deform_forward<T: Real>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &DeformGeometry,
) -> Tensor<T> {
    let n = input.shape()[0];
    let o = weight.shape()[0];
    let rows = g.channels * g.taps();
    let ncol = g.cols();
    let in_sz = g.channels * g.height * g.width;
    let off_sz = 2 * g.taps() * ncol;
    let mut cols = vec![T::zero(); rows * ncol];
    let mut out = vec![T::zero(); n * o * ncol];
    for b in 0..n {
        deform_im2col(
            &input.data()[b * in_sz..(b + 1) * in_sz],
            &offsets.data()[b * off_sz..(b + 1) * off_sz],
            g,
            &mut cols,
        );
        let dst = &mut out[b * o * ncol..(b + 1) * o * ncol];
        for (oc, row) in dst.chunks_mut(ncol).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        gemm(Mat::new(weight.data(), o, rows), Mat::new(&cols, rows, ncol), dst, true);
    }
    Tensor::new(&[n, o, g.out_h, g.out_w], out).expect("shape arithmetic")
}

pub(crate) struct DeformGrads<T> {
    pub input: Option<Vec<T>>,
    pub offsets: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn deform_backward<T: Real>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    g: &DeformGeometry,
    out_grad: &[T],
    want: [bool; 4],
) -> DeformGrads<T> {
    let n = input.shape()[0];
    let o = weight.shape()[0];
    let taps = g.taps();
    let rows = g.channels * taps;
    let ncol = g.cols();
    let plane = g.height * g.width;
    let in_sz = g.channels * plane;
    let off_sz = 2 * taps * ncol;
    let mut gi = want[0].then(|| vec![T::zero(); input.len()]);
    let mut go = want[1].then(|| vec![T::zero(); offsets.len()]);
    let mut gw = want[2].then(|| vec![T::zero(); weight.len()]);
    let mut gb = want[3].then(|| vec![T::zero(); o]);
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dcols = vec![T::zero(); rows * ncol];
    for b in 0..n {
        let x = &input.data()[b * in_sz..(b + 1) * in_sz];
        let off = &offsets.data()[b * off_sz..(b + 1) * off_sz];
        let dout = &out_grad[b * o * ncol..(b + 1) * o * ncol];
        if let Some(gb) = gb.as_mut() {
            for (oc, row) in dout.chunks(ncol).enumerate() {
                gb[oc] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            deform_im2col(x, off, g, &mut cols);
            gemm(Mat::new(dout, o, ncol), Mat::new(&cols, rows, ncol).t(), gw, true);
        }
        if gi.is_none() && go.is_none() {
            continue;
        }
        gemm(
            Mat::new(weight.data(), o, rows).t(),
            Mat::new(dout, o, ncol),
            &mut dcols,
            false,
        );
        let mut gi_b = gi.as_mut().map(|v| &mut v[b * in_sz..(b + 1) * in_sz]);
        let mut go_b = go.as_mut().map(|v| &mut v[b * off_sz..(b + 1) * off_sz]);
        for_each_sample(g, off, |tap, p, y, xx| {
            let Some(fp) = Footprint::new(g.height, g.width, y, xx) else {
                return;
            };
            let one = T::one();
            let mut d_dy = T::zero();
            let mut d_dx = T::zero();
            for c in 0..g.channels {
                let gval = dcols[(c * taps + tap) * ncol + p];
                if gval == T::zero() {
                    continue;
                }
                if go_b.is_some() {
                    let f = fp.corners(&x[c * plane..(c + 1) * plane]);
                    d_dy += gval * ((one - fp.lx) * (f[2] - f[0]) + fp.lx * (f[3] - f[1]));
                    d_dx += gval * ((one - fp.ly) * (f[1] - f[0]) + fp.ly * (f[3] - f[2]));
                }
                if let Some(gi) = gi_b.as_deref_mut() {
                    for i in 0..4 {
                        if fp.valid[i] {
                            gi[c * plane + fp.idx[i]] += gval * fp.wt[i];
                        }
                    }
                }
            }
            if let Some(go) = go_b.as_deref_mut() {
                go[2 * tap * ncol + p] += d_dy;
                go[(2 * tap + 1) * ncol + p] += d_dx;
            }
        });
    }
    DeformGrads {
        input: gi,
        offsets: go,
        weight: gw,
        bias: gb,
    }
}

/// Names and shapes of one deformable layer; its tensors live in a
/// [`NetworkParams`] under `<name>.weight`, `<name>.bias`,
/// `<name>.offset_weight` and `<name>.offset_bias`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl DeformConvLayer {
    /// A stride-1 layer whose padding keeps the spatial size.
    pub fn same(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        DeformConvLayer {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn offset_channels(&self) -> usize {
        2 * self.kernel * self.kernel
    }

    pub fn param_names(&self) -> [String; 4] {
        [
            format!("{}.weight", self.name),
            format!("{}.bias", self.name),
            format!("{}.offset_weight", self.name),
            format!("{}.offset_bias", self.name),
        ]
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        self.out_channels * self.in_channels * k2
            + self.out_channels
            + self.offset_channels() * self.in_channels * k2
            + self.offset_channels()
    }

    /// Registers the layer's tensors: He-initialized weight, zero bias and an
    /// all-zero offset branch.
    pub fn init<T: Real>(&self, params: &mut NetworkParams<T>, rng: &mut SplitMix64) -> Result<()> {
        let k = self.kernel;
        let [w, b, ow, ob] = self.param_names();
        params.insert(
            &w,
            he_normal(&[self.out_channels, self.in_channels, k, k], rng),
        )?;
        params.insert(&b, Tensor::zeros(&[self.out_channels]))?;
        params.insert(&ow, Tensor::zeros(&[self.offset_channels(), self.in_channels, k, k]))?;
        params.insert(&ob, Tensor::zeros(&[self.offset_channels()]))?;
        Ok(())
    }

    /// Records the offset branch and the deformable convolution on `tape`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, input: Var, params: &[Var; 4]) -> Result<Var> {
        let [w, b, ow, ob] = *params;
        let offsets = tape.conv2d(input, ow, ob, Conv2dParams::new(self.stride, self.padding, 1))?;
        tape.deform_conv2d(input, offsets, w, b, self.stride, self.padding)
    }
}

/// Binds a layer's four parameters from `params` onto `tape`.
pub(crate) fn bind_layer(
    layer: &DeformConvLayer,
    bound: &crate::params::BoundParams,
) -> Result<[Var; 4]> {
    let [w, b, ow, ob] = layer.param_names();
    Ok([bound.get(&w)?, bound.get(&b)?, bound.get(&ow)?, bound.get(&ob)?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_location_reads_exact_value() {
        let plane = [0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0];
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(
                    bilinear_sample(&plane, 2, 3, i as f64, j as f64),
                    plane[i * 3 + j]
                );
            }
        }
    }

    #[test]
    fn midpoint_averages_four_neighbours() {
        let plane = [0.0f64, 1.0, 2.0, 3.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.5, 0.5), 1.5);
    }

    #[test]
    fn far_outside_reads_zero_and_border_blends_with_zero() {
        let plane = [1.0f64; 4];
        assert_eq!(bilinear_sample(&plane, 2, 2, -1.5, 0.0), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 2.0), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 3.7), 0.0);
        assert!((bilinear_sample(&plane, 2, 2, -0.25, 0.0) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn offset_channels_are_two_per_tap() {
        for k in [1, 3, 5] {
            assert_eq!(DeformConvLayer::same("l", 4, 2, k).offset_channels(), 2 * k * k);
        }
    }

    #[test]
    fn init_zeroes_offset_branch() {
        let layer = DeformConvLayer::same("d", 3, 2, 3);
        let mut params = NetworkParams::<f32>::new();
        layer.init(&mut params, &mut SplitMix64::new(7)).unwrap();
        let [_, b, ow, ob] = layer.param_names();
        for name in [b, ow, ob] {
            assert!(params.get(&name).unwrap().data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(params.param_count(), layer.param_count());
    }
}
