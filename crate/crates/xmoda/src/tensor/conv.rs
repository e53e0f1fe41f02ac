//! im2col-based 2D convolution kernels with deterministic multithreading.
//!
//! Work is split across threads by contiguous output-row blocks. Threads only
//! ever write disjoint output regions or private scratch buffers; partial
//! results that require summation (weight gradients, input gradients from
//! overlapping patches) are reduced sequentially in block order, so results
//! do not depend on scheduling.

use super::Scalar;
use ndarray::{Array2, ArrayD, IxDyn};
use rayon::prelude::*;

/// Minimum MACs before a convolution is worth splitting across threads.
const PAR_THRESHOLD: usize = 250_000;

fn out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        inp + 2 * pad >= k,
        "conv2d: kernel larger than padded input"
    );
    (inp + 2 * pad - k) / stride + 1
}

/// Fill `cols` (CKK x rows*wo) with the patches feeding output rows
/// [row0, row0+rows).
#[allow(clippy::too_many_arguments)]
fn im2col_rows<F: Scalar>(
    x: &[F],
    cols: &mut Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    row0: usize,
    rows: usize,
) {
    let csl = cols.as_slice_mut().unwrap();
    let l = rows * wo;
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let dst = &mut csl[r * l..(r + 1) * l];
                for oi in 0..rows {
                    let iy = (row0 + oi) * stride + ki;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if iy < pad || iy >= h + pad {
                        for d in drow.iter_mut() {
                            *d = F::zero();
                        }
                        continue;
                    }
                    let sy = iy - pad;
                    let src = &x[ci * h * w + sy * w..ci * h * w + (sy + 1) * w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let ix = oj * stride + kj;
                        *d = if ix < pad || ix >= w + pad {
                            F::zero()
                        } else {
                            src[ix - pad]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-accumulate `cols` (CKK x rows*wo) back into `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im_rows<F: Scalar>(
    cols: &Array2<F>,
    dx: &mut [F],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    row0: usize,
    rows: usize,
) {
    let csl = cols.as_slice().unwrap();
    let l = rows * wo;
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let src = &csl[r * l..(r + 1) * l];
                for oi in 0..rows {
                    let iy = (row0 + oi) * stride + ki;
                    if iy < pad || iy >= h + pad {
                        continue;
                    }
                    let sy = iy - pad;
                    let dst = &mut dx[ci * h * w + sy * w..ci * h * w + (sy + 1) * w];
                    let srow = &src[oi * wo..(oi + 1) * wo];
                    for (oj, &v) in srow.iter().enumerate() {
                        let ix = oj * stride + kj;
                        if ix >= pad && ix < w + pad {
                            dst[ix - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

fn row_blocks(ho: usize, macs: usize) -> Vec<(usize, usize)> {
    let threads = rayon::current_num_threads().max(1);
    let nblk = if macs < PAR_THRESHOLD {
        1
    } else {
        threads.min(ho).max(1)
    };
    let base = ho / nblk;
    let rem = ho % nblk;
    let mut blocks = Vec::with_capacity(nblk);
    let mut at = 0;
    for i in 0..nblk {
        let take = base + usize::from(i < rem);
        if take > 0 {
            blocks.push((at, take));
            at += take;
        }
    }
    blocks
}

/// Order-preserving map over row blocks; parallel only when there are
/// multiple blocks.
fn map_blocks<T, G>(blocks: &[(usize, usize)], f: G) -> Vec<T>
where
    T: Send,
    G: Fn(usize, usize) -> T + Sync,
{
    if blocks.len() <= 1 {
        blocks.iter().map(|&(r0, rs)| f(r0, rs)).collect()
    } else {
        blocks.par_iter().map(|&(r0, rs)| f(r0, rs)).collect()
    }
}

pub(super) fn conv2d<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    b: &ArrayD<F>,
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(wid, kw, stride, pad);
    let ckk = cin * kh * kw;
    let xs = x.as_slice().unwrap();
    let bs = b.as_slice().unwrap();
    let wmat = w.view().into_shape_with_order((cout, ckk)).unwrap();

    let mut out = ArrayD::zeros(IxDyn(&[cout, ho, wo]));
    let blocks = row_blocks(ho, cout * ckk * ho * wo);
    let parts = map_blocks(&blocks, |row0, rows| {
        let mut cols = Array2::<F>::zeros((ckk, rows * wo));
        im2col_rows(xs, &mut cols, cin, h, wid, kh, kw, stride, pad, wo, row0, rows);
        let mut y = Array2::<F>::zeros((cout, rows * wo));
        ndarray::linalg::general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut y);
        y
    });

    let osl = out.as_slice_mut().unwrap();
    for (part, &(row0, rows)) in parts.iter().zip(&blocks) {
        let y = part.as_slice().unwrap();
        let l = rows * wo;
        for co in 0..cout {
            let dst = &mut osl[co * ho * wo + row0 * wo..co * ho * wo + (row0 + rows) * wo];
            let src = &y[co * l..(co + 1) * l];
            let bias = bs[co];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias;
            }
        }
    }
    out
}

pub(super) fn conv2d_backward<F: Scalar>(
    x: &ArrayD<F>,
    w: &ArrayD<F>,
    dy: &ArrayD<F>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (dy.shape()[1], dy.shape()[2]);
    let ckk = cin * kh * kw;
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let wmat = w.view().into_shape_with_order((cout, ckk)).unwrap();
    let blocks = row_blocks(ho, cout * ckk * ho * wo);

    let parts = map_blocks(&blocks, |row0, rows| {
        let l = rows * wo;
        let mut cols = Array2::<F>::zeros((ckk, l));
        im2col_rows(xs, &mut cols, cin, h, wid, kh, kw, stride, pad, wo, row0, rows);
        let mut dyb = Array2::<F>::zeros((cout, l));
        {
            let dsl = dyb.as_slice_mut().unwrap();
            for co in 0..cout {
                dsl[co * l..(co + 1) * l].copy_from_slice(
                    &dys[co * ho * wo + row0 * wo..co * ho * wo + (row0 + rows) * wo],
                );
            }
        }
        let dw = need_dw.then(|| {
            let mut dwp = Array2::<F>::zeros((cout, ckk));
            ndarray::linalg::general_mat_mul(F::one(), &dyb, &cols.t(), F::zero(), &mut dwp);
            dwp
        });
        let dx = need_dx.then(|| {
            let mut dcols = Array2::<F>::zeros((ckk, l));
            ndarray::linalg::general_mat_mul(F::one(), &wmat.t(), &dyb, F::zero(), &mut dcols);
            let mut dxp = vec![F::zero(); cin * h * wid];
            col2im_rows(
                &dcols, &mut dxp, cin, h, wid, kh, kw, stride, pad, wo, row0, rows,
            );
            dxp
        });
        (dw, dx)
    });

    // Sequential reductions in fixed block order.
    let dw = need_dw.then(|| {
        let mut acc = Array2::<F>::zeros((cout, ckk));
        for (dwp, _) in &parts {
            acc += dwp.as_ref().unwrap();
        }
        acc.into_shape_with_order(IxDyn(&[cout, cin, kh, kw]))
            .unwrap()
    });
    let dx = need_dx.then(|| {
        let mut acc = vec![F::zero(); cin * h * wid];
        for (_, dxp) in &parts {
            for (a, &v) in acc.iter_mut().zip(dxp.as_ref().unwrap()) {
                *a += v;
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[cin, h, wid]), acc).unwrap()
    });
    let db = need_dw.then(|| {
        let mut acc = ndarray::Array1::<F>::zeros(cout);
        for co in 0..cout {
            let mut s = F::zero();
            for &v in &dys[co * ho * wo..(co + 1) * ho * wo] {
                s += v;
            }
            acc[co] = s;
        }
        acc.into_dyn()
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_ref(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let mut out = ArrayD::zeros(IxDyn(&[cout, ho, wo]));
        for co in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[[co]];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = i * stride + ki;
                                let ix = j * stride + kj;
                                if iy >= pad && ix >= pad && iy - pad < h && ix - pad < wid {
                                    acc += x[[ci, iy - pad, ix - pad]] * w[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    out[[co, i, j]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        let mut rng = crate::rngutil::rng_from(7, "conv-test");
        for &(cin, cout, h, w, k, s, p) in
            &[(1, 2, 5, 6, 3, 1, 1), (3, 4, 8, 8, 4, 2, 1), (2, 3, 7, 5, 1, 1, 0)]
        {
            let x = crate::rngutil::normal_array::<f64>(&mut rng, &[cin, h, w], 1.0);
            let wt = crate::rngutil::normal_array::<f64>(&mut rng, &[cout, cin, k, k], 1.0);
            let b = crate::rngutil::normal_array::<f64>(&mut rng, &[cout], 1.0);
            let got = conv2d(&x, &wt, &b, s, p);
            let want = conv_ref(&x, &wt, &b, s, p);
            let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10, "conv mismatch {err}");
        }
    }
}
