use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Align-corners interpolation table for one axis: for each output index,
/// the two source indices and the weight of the second one.
#[derive(Clone, Debug)]
pub(crate) struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTable {
    pub fn new(src: usize, dst: usize) -> Self {
        let mut t = AxisTable {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for d in 0..dst {
            let s = if dst > 1 {
                (d * (src - 1)) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (s.floor() as usize).min(src - 1);
            t.lo.push(lo);
            t.hi.push((lo + 1).min(src - 1));
            t.frac.push(s - lo as f64);
        }
        t
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResizeTable {
    rows: AxisTable,
    cols: AxisTable,
    src_h: usize,
    src_w: usize,
}

impl ResizeTable {
    pub fn new(src_h: usize, src_w: usize, dst_h: usize, dst_w: usize) -> Result<Self> {
        if dst_h == 0 || dst_w == 0 || src_h == 0 || src_w == 0 {
            return Err(Error::shape(format!(
                "bilinear resize {src_h}x{src_w} -> {dst_h}x{dst_w}: extents must be >= 1"
            )));
        }
        Ok(ResizeTable {
            rows: AxisTable::new(src_h, dst_h),
            cols: AxisTable::new(src_w, dst_w),
            src_h,
            src_w,
        })
    }

    fn dst(&self) -> (usize, usize) {
        (self.rows.lo.len(), self.cols.lo.len())
    }
}

pub(crate) fn resize_forward<T: Real>(input: &Tensor<T>, table: &ResizeTable) -> Tensor<T> {
    let [n, c, h, w] = input.dims4().expect("checked");
    debug_assert_eq!((h, w), (table.src_h, table.src_w));
    let (oh, ow) = table.dst();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for src in input.data().chunks(h * w) {
        for y in 0..oh {
            let (y0, y1) = (table.rows.lo[y], table.rows.hi[y]);
            let ly = T::from_f64_lossy(table.rows.frac[y]);
            for x in 0..ow {
                let (x0, x1) = (table.cols.lo[x], table.cols.hi[x]);
                let lx = T::from_f64_lossy(table.cols.frac[x]);
                let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).expect("shape arithmetic")
}

pub(crate) fn resize_backward<T: Real>(table: &ResizeTable, out_grad: &[T], input_grad: &mut [T]) {
    let (h, w) = (table.src_h, table.src_w);
    let (oh, ow) = table.dst();
    for (g, dst) in out_grad.chunks(oh * ow).zip(input_grad.chunks_mut(h * w)) {
        for y in 0..oh {
            let (y0, y1) = (table.rows.lo[y], table.rows.hi[y]);
            let ly = T::from_f64_lossy(table.rows.frac[y]);
            for x in 0..ow {
                let (x0, x1) = (table.cols.lo[x], table.cols.hi[x]);
                let lx = T::from_f64_lossy(table.cols.frac[x]);
                let v = g[y * ow + x];
                let top = v * (T::one() - ly);
                let bot = v * ly;
                dst[y0 * w + x0] += top * (T::one() - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (T::one() - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
}

/// Plain (non-recorded) bilinear resize of a rank-4 tensor.
pub fn bilinear_resize<T: Real>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4()?;
    let table = ResizeTable::new(h, w, out_h, out_w)?;
    Ok(resize_forward(input, &table))
}
