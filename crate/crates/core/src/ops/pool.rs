use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output cell, the flat input index that won (first in scan order on ties).
pub(crate) fn max_pool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "max_pool2 needs even height and width, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub(crate) fn max_pool2_backward<T: Real>(argmax: &[usize], out_grad: &[T], input_grad: &mut [T]) {
    for (&src, &g) in argmax.iter().zip(out_grad) {
        input_grad[src] += g;
    }
}

pub(crate) fn global_avg_pool_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("global_avg_pool needs a non-empty plane"));
    }
    let inv = T::one() / T::from_usize(h * w).unwrap();
    let out = input
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], out)
}

pub(crate) fn global_avg_pool_backward<T: Real>(plane: usize, out_grad: &[T], input_grad: &mut [T]) {
    let inv = T::one() / T::from_usize(plane).unwrap();
    for (g, dst) in out_grad.iter().zip(input_grad.chunks_mut(plane)) {
        let v = *g * inv;
        dst.iter_mut().for_each(|d| *d += v);
    }
}
