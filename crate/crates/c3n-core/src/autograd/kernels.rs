//! Dense kernels shared by the tape ops and the plain inference paths.
//!
//! Parallelism is over batch items only; per-item work is sequential, so
//! accumulation order (and therefore the result) does not depend on the
//! thread count.

use crate::util::par_map_collect;
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};

/// Hyperparameters of a 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec {
            stride: (1, 1),
            padding: (0, 0),
            dilation: (1, 1),
        }
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eff_kh = self.dilation.0 * (kh - 1) + 1;
        let eff_kw = self.dilation.1 * (kw - 1) + 1;
        let oh = (h + 2 * self.padding.0 - eff_kh) / self.stride.0 + 1;
        let ow = (w + 2 * self.padding.1 - eff_kw) / self.stride.1 + 1;
        (oh, ow)
    }
}

/// Unfold one input item into a `[oh*ow, cin*kh*kw]` patch matrix.
fn im2col(x: &ArrayView3<f32>, kh: usize, kw: usize, spec: &Conv2dSpec) -> Array2<f32> {
    let (cin, h, w) = x.dim();
    let (oh, ow) = spec.out_size(h, w, kh, kw);
    let mut cols = Array2::<f32>::zeros((oh * ow, cin * kh * kw));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0usize;
            for c in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                        - spec.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        col += kw;
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                            - spec.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            cols[[row, col]] = x[[c, iy as usize, ix as usize]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input (transpose of `im2col`).
fn col2im(
    cols: &Array2<f32>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    spec: &Conv2dSpec,
) -> Array3<f32> {
    let (oh, ow) = spec.out_size(h, w, kh, kw);
    let mut x = Array3::<f32>::zeros((cin, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut col = 0usize;
            for c in 0..cin {
                for ky in 0..kh {
                    let iy = (oy * spec.stride.0 + ky * spec.dilation.0) as isize
                        - spec.padding.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        col += kw;
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * spec.stride.1 + kx * spec.dilation.1) as isize
                            - spec.padding.1 as isize;
                        if ix >= 0 && ix < w as isize {
                            x[[c, iy as usize, ix as usize]] += cols[[row, col]];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward over a `[b, cin, h, w]` batch.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    bias: &[f32],
    spec: &Conv2dSpec,
) -> Array4<f32> {
    let (b, cin, h, w) = x.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    assert_eq!(cin, wcin, "conv2d channel mismatch");
    assert_eq!(bias.len(), cout);
    let (oh, ow) = spec.out_size(h, w, kh, kw);
    let wmat = weight
        .to_shape((cout, cin * kh * kw))
        .expect("conv weight reshape")
        .to_owned();

    let items = par_map_collect(b, |bi| {
        let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, spec);
        let mut out = cols.dot(&wmat.t()); // [oh*ow, cout]
        for mut row in out.rows_mut() {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += *bv;
            }
        }
        out
    });

    let mut y = Array4::<f32>::zeros((b, cout, oh, ow));
    for (bi, mat) in items.into_iter().enumerate() {
        for c in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    y[[bi, c, oy, ox]] = mat[[oy * ow + ox, c]];
                }
            }
        }
    }
    y
}

pub struct Conv2dGrads {
    pub gx: Array4<f32>,
    pub gw: Array4<f32>,
    pub gb: Vec<f32>,
}

/// Full convolution backward. `im2col` is recomputed rather than cached so
/// the tape does not hold the unfolded activations alive.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    weight: &ArrayView4<f32>,
    gout: &ArrayView4<f32>,
    spec: &Conv2dSpec,
    need_gx: bool,
    need_gw: bool,
) -> Conv2dGrads {
    let (b, cin, h, w) = x.dim();
    let (cout, _, kh, kw) = weight.dim();
    let (_, _, oh, ow) = gout.dim();
    let ck = cin * kh * kw;
    let wmat = weight
        .to_shape((cout, ck))
        .expect("conv weight reshape")
        .to_owned();

    struct ItemGrads {
        gx: Option<Array3<f32>>,
        gw: Option<Array2<f32>>,
        gb: Vec<f32>,
    }

    let items = par_map_collect(b, |bi| {
        // [oh*ow, cout] layout of this item's output gradient
        let g = gout.index_axis(Axis(0), bi);
        let mut gmat = Array2::<f32>::zeros((oh * ow, cout));
        for c in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    gmat[[oy * ow + ox, c]] = g[[c, oy, ox]];
                }
            }
        }
        let gb: Vec<f32> = gmat.sum_axis(Axis(0)).to_vec();
        let gw = if need_gw {
            let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, spec);
            Some(gmat.t().dot(&cols))
        } else {
            None
        };
        let gx = if need_gx {
            let colgrad = gmat.dot(&wmat);
            Some(col2im(&colgrad, cin, h, w, kh, kw, spec))
        } else {
            None
        };
        ItemGrads { gx, gw, gb }
    });

    let mut gx = Array4::<f32>::zeros(if need_gx { (b, cin, h, w) } else { (0, 0, 0, 0) });
    let mut gw2 = Array2::<f32>::zeros((cout, ck));
    let mut gb = vec![0f32; cout];
    for (bi, item) in items.into_iter().enumerate() {
        if let Some(gxi) = item.gx {
            gx.index_axis_mut(Axis(0), bi).assign(&gxi);
        }
        if let Some(gwi) = item.gw {
            gw2 += &gwi;
        }
        for (acc, v) in gb.iter_mut().zip(&item.gb) {
            *acc += *v;
        }
    }
    let gw = gw2
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("conv grad reshape");
    Conv2dGrads { gx, gw, gb }
}

/// Per-axis sampling plan for bilinear resize (align_corners = false).
fn resize_plan(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|o| {
            let src = (o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = (src - i0 as f32).clamp(0.0, 1.0);
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear interpolation of a `[b, c, h, w]` batch to a new spatial size.
pub fn bilinear_resize(x: &ArrayView4<f32>, oh: usize, ow: usize) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let ys = resize_plan(h, oh);
    let xs = resize_plan(w, ow);
    let items = par_map_collect(b, |bi| {
        let xi = x.index_axis(Axis(0), bi);
        let mut out = Array3::<f32>::zeros((c, oh, ow));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = xi[[ci, y0, x0]] * (1.0 - fx) + xi[[ci, y0, x1]] * fx;
                    let bot = xi[[ci, y1, x0]] * (1.0 - fx) + xi[[ci, y1, x1]] * fx;
                    out[[ci, oy, ox]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        out
    });
    let mut y = Array4::<f32>::zeros((b, c, oh, ow));
    for (bi, item) in items.into_iter().enumerate() {
        y.index_axis_mut(Axis(0), bi).assign(&item);
    }
    y
}

/// Transpose of [`bilinear_resize`]: scatter output gradients onto the input grid.
pub fn bilinear_resize_backward(
    gout: &ArrayView4<f32>,
    h: usize,
    w: usize,
) -> Array4<f32> {
    let (b, c, oh, ow) = gout.dim();
    let ys = resize_plan(h, oh);
    let xs = resize_plan(w, ow);
    let items = par_map_collect(b, |bi| {
        let g = gout.index_axis(Axis(0), bi);
        let mut gx = Array3::<f32>::zeros((c, h, w));
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let go = g[[ci, oy, ox]];
                    gx[[ci, y0, x0]] += go * (1.0 - fx) * (1.0 - fy);
                    gx[[ci, y0, x1]] += go * fx * (1.0 - fy);
                    gx[[ci, y1, x0]] += go * (1.0 - fx) * fy;
                    gx[[ci, y1, x1]] += go * fx * fy;
                }
            }
        }
        gx
    });
    let mut out = Array4::<f32>::zeros((b, c, h, w));
    for (bi, item) in items.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), bi).assign(&item);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, array};

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array4::from_shape_fn((2, 1, 3, 3), |(b, _, y, xx)| {
            (b * 9 + y * 3 + xx) as f32
        });
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv2d_forward(&x.view(), &w.view(), &[0.0], &Conv2dSpec::unit());
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        // 3x3 all-ones kernel with padding 1: each output is the local sum.
        let x = array![[[[1.0f32, 2.0], [3.0, 4.0]]]];
        let w = Array4::from_elem((1, 1, 3, 3), 1.0);
        let spec = Conv2dSpec {
            stride: (1, 1),
            padding: (1, 1),
            dilation: (1, 1),
        };
        let y = conv2d_forward(&x.view(), &w.view(), &[0.0], &spec);
        assert_eq!(y[[0, 0, 0, 0]], 1.0 + 2.0 + 3.0 + 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 10.0);
    }

    #[test]
    fn resize_doubles_and_scatters_back() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, y, xx)| (y * 2 + xx) as f32);
        let y = bilinear_resize(&x.view(), 4, 4);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        // corners keep the original values under align_corners=false clamping
        assert_eq!(y[[0, 0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 3, 3]], 3.0);
        // energy conservation of the adjoint: sum of grads is preserved
        let g = Array4::from_elem((1, 1, 4, 4), 1.0);
        let gx = bilinear_resize_backward(&g.view(), 2, 2);
        let total: f32 = gx.iter().sum();
        assert!((total - 16.0).abs() < 1e-4);
    }
}
