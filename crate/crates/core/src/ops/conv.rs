use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dParams {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with padding chosen to keep the spatial size.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        Conv2dParams {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams::new(1, 0, 1)
    }
}

/// Geometry of one convolution, shared by im2col and col2im.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub params: Conv2dParams,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        params: Conv2dParams,
    ) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::shape(format!("kernel {kh}x{kw} must be odd")));
        }
        if params.stride == 0 || params.dilation == 0 {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        let out = |size: usize, k: usize| -> Result<usize> {
            let span = params.dilation * (k - 1) + 1;
            let padded = size + 2 * params.padding;
            if padded < span {
                return Err(Error::shape(format!(
                    "input extent {size} (padding {}) is smaller than kernel span {span}",
                    params.padding
                )));
            }
            Ok((padded - span) / params.stride + 1)
        };
        Ok(Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            params,
            out_h: out(height, kh)?,
            out_w: out(width, kw)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate sampled by output index `o` and kernel tap `k`.
    #[inline]
    fn source(&self, o: usize, k: usize) -> isize {
        (o * self.params.stride + k * self.params.dilation) as isize - self.params.padding as isize
    }

    /// Output columns `lo..hi` whose tap `kj` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let s = self.params.stride as isize;
        let shift = (kj * self.params.dilation) as isize - self.params.padding as isize;
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        let hi = (self.width as isize - shift + s - 1).div_euclid(s).max(0);
        let hi = (hi as usize).min(self.out_w);
        (lo as usize, hi.max(lo as usize))
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, out_h*out_w]` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.height * g.width;
    let ncol = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = g.source(oy, ki);
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = g.valid_cols(kj);
                    line[..lo].iter_mut().for_each(|v| *v = T::zero());
                    line[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if lo < hi {
                        let first = g.source(lo, kj) as usize;
                        if g.params.stride == 1 {
                            line[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                        } else {
                            for (i, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = srow[first + i * g.params.stride];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &Geometry, input_grad: &mut [T]) {
    let plane = g.height * g.width;
    let ncol = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut input_grad[c * plane..(c + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..g.out_h {
                    let iy = g.source(oy, ki);
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let (lo, hi) = g.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let base = iy as usize * g.width + g.source(lo, kj) as usize;
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (i, v) in line.iter().enumerate() {
                        dst[base + i * g.params.stride] += *v;
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn check_conv_shapes<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    params: Conv2dParams,
) -> Result<Geometry> {
    let [_, c, h, w] = input.dims4()?;
    let [o, wc, kh, kw] = weight.dims4()?;
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d: input has {c} channels but weight {:?} expects {wc}",
            weight.shape()
        )));
    }
    if bias.shape() != [o] {
        return Err(Error::shape(format!(
            "conv2d: bias shape {:?} does not match {o} output channels",
            bias.shape()
        )));
    }
    Geometry::new(c, h, w, kh, kw, params)
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &Geometry,
) -> Tensor<T> {
    let [n, c, h, w] = input.dims4().expect("checked");
    let o = weight.shape()[0];
    let ncol = g.col_cols();
    let mut out = vec![T::zero(); n * o * ncol];
    let mut cols = vec![T::zero(); g.col_rows() * ncol];
    let wmat = Mat::new(weight.data(), o, g.col_rows());
    for b in 0..n {
        im2col(&input.data()[b * c * h * w..(b + 1) * c * h * w], g, &mut cols);
        let dst = &mut out[b * o * ncol..(b + 1) * o * ncol];
        for (oc, row) in dst.chunks_mut(ncol).enumerate() {
            row.iter_mut().for_each(|v| *v = bias.data()[oc]);
        }
        gemm(wmat, Mat::new(&cols, g.col_rows(), ncol), dst, true);
    }
    Tensor::new(&[n, o, g.out_h, g.out_w], out).expect("shape arithmetic")
}

/// Gradients of a convolution. Any of the requested outputs may be skipped.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    g: &Geometry,
    out_grad: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let [n, c, h, w] = input.dims4().expect("checked");
    let o = weight.shape()[0];
    let ncol = g.col_cols();
    let rows = g.col_rows();
    let mut gin = want[0].then(|| vec![T::zero(); input.len()]);
    let mut gw = want[1].then(|| vec![T::zero(); weight.len()]);
    let mut gb = want[2].then(|| vec![T::zero(); o]);
    let mut cols = vec![T::zero(); rows * ncol];
    let mut dcols = vec![T::zero(); rows * ncol];
    for b in 0..n {
        let dout = &out_grad[b * o * ncol..(b + 1) * o * ncol];
        if let Some(gb) = gb.as_mut() {
            for (oc, row) in dout.chunks(ncol).enumerate() {
                gb[oc] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&input.data()[b * c * h * w..(b + 1) * c * h * w], g, &mut cols);
            gemm(
                Mat::new(dout, o, ncol),
                Mat::new(&cols, rows, ncol).t(),
                gw,
                true,
            );
        }
        if let Some(gin) = gin.as_mut() {
            gemm(
                Mat::new(weight.data(), o, rows).t(),
                Mat::new(dout, o, ncol),
                &mut dcols,
                false,
            );
            col2im(&dcols, g, &mut gin[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_follows_dilated_kernel_span() {
        let g = Geometry::new(1, 8, 8, 3, 3, Conv2dParams::new(1, 2, 2)).unwrap();
        assert_eq!((g.out_h, g.out_w), (8, 8));
        let g = Geometry::new(1, 7, 9, 3, 3, Conv2dParams::new(2, 1, 1)).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 5));
        assert!(Geometry::new(1, 8, 8, 2, 2, Conv2dParams::default()).is_err());
        assert!(Geometry::new(1, 2, 2, 5, 5, Conv2dParams::default()).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Geometry::new(2, 5, 6, 3, 3, Conv2dParams::new(2, 1, 2)).unwrap();
        let x: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 13) % 7) as f64 - 3.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    fn naive_conv(x: &[f64], w: &[f64], c: usize, h: usize, wd: usize, o: usize, k: usize, p: Conv2dParams) -> Vec<f64> {
        let g = Geometry::new(c, h, wd, k, k, p).unwrap();
        let mut out = vec![0.0; o * g.out_h * g.out_w];
        for oc in 0..o {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                                let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w[((oc * c + ic) * k + ki) * k + kj] * x[(ic * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        for (k, stride, pad, dil) in [(3, 1, 1, 1), (3, 2, 1, 1), (3, 1, 3, 3), (5, 3, 0, 1), (1, 2, 0, 1), (3, 2, 4, 2)] {
            let (c, h, wd, o) = (2, 7, 9, 3);
            let p = Conv2dParams::new(stride, pad, dil);
            let x: Vec<f64> = (0..c * h * wd).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..o * c * k * k).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let xt = Tensor::new(&[1, c, h, wd], x.clone()).unwrap();
            let wt = Tensor::new(&[o, c, k, k], w.clone()).unwrap();
            let g = check_conv_shapes(&xt, &wt, &Tensor::zeros(&[o]), p).unwrap();
            let got = conv2d_forward(&xt, &wt, &Tensor::zeros(&[o]), &g);
            assert_eq!(got.data(), naive_conv(&x, &w, c, h, wd, o, k, p).as_slice(), "k={k} s={stride} p={pad} d={dil}");
        }
    }
}
