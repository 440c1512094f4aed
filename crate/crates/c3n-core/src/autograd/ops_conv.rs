//! Convolution, resize and batch-norm tape ops.

use super::kernels::{
    bilinear_resize, bilinear_resize_backward, conv2d_backward, conv2d_forward, Conv2dSpec,
};
use super::{Graph, Var};
use ndarray::{Array1, Axis, IxDyn};

impl Graph {
    /// 2-D convolution. `x: [b, cin, h, w]`, `w: [cout, cin, kh, kw]`, `b: [cout]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality().unwrap();
            let wv = nodes[w.0].value.view().into_dimensionality().unwrap();
            let bv: Vec<f32> = nodes[b.0].value.iter().copied().collect();
            conv2d_forward(&xv, &wv, &bv, &spec).into_dyn()
        };
        self.push_op(
            out,
            &[x, w, b],
            Box::new(move |args| {
                let need_gx = args.needs_grad(x);
                let need_gw = args.needs_grad(w);
                let need_gb = args.needs_grad(b);
                let xv = args.val(x).view().into_dimensionality().unwrap();
                let wv = args.val(w).view().into_dimensionality().unwrap();
                let gv = args.gout.view().into_dimensionality().unwrap();
                let grads = conv2d_backward(&xv, &wv, &gv, &spec, need_gx, need_gw);
                if need_gx {
                    args.accum(x, grads.gx.into_dyn());
                }
                if need_gw {
                    args.accum(w, grads.gw.into_dyn());
                }
                if need_gb {
                    args.accum(b, Array1::from(grads.gb).into_dyn());
                }
            }),
        )
    }

    /// Bilinear resize to `(oh, ow)`.
    pub fn upsample_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let (out, h, w) = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality().unwrap();
            let (_, _, h, w) = v.dim();
            (bilinear_resize(&v, oh, ow).into_dyn(), h, w)
        };
        self.push_op(
            out,
            &[x],
            Box::new(move |args| {
                let gv = args.gout.view().into_dimensionality().unwrap();
                args.accum(x, bilinear_resize_backward(&gv, h, w).into_dyn());
            }),
        )
    }

    /// Batch normalization over `(b, h, w)` per channel using batch statistics.
    ///
    /// Returns the normalized output plus the biased batch mean/variance so
    /// the owning layer can maintain running estimates.
    pub fn batch_norm_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> (Var, Array1<f32>, Array1<f32>) {
        let (out, mean, var, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let s = v.shape();
            assert_eq!(s.len(), 4);
            let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
            let n = (b * h * w) as f32;
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let lane = v.index_axis(Axis(1), ci);
                let m: f32 = lane.iter().map(|&x| x as f64).sum::<f64>() as f32 / n;
                let vv: f32 =
                    lane.iter().map(|&x| ((x - m) as f64).powi(2)).sum::<f64>() as f32 / n;
                mean[ci] = m;
                var[ci] = vv;
            }
            let g = &nodes[gamma.0].value;
            let be = &nodes[beta.0].value;
            let mut out = v.clone();
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let (gc, bc, mc) = (g[[ci]], be[[ci]], mean[ci]);
                out.index_axis_mut(Axis(1), ci)
                    .mapv_inplace(|xv| (xv - mc) * inv * gc + bc);
            }
            (out, mean, var, n)
        };
        let mean_c = mean.clone();
        let var_c = var.clone();
        let out_var = self.push_op(
            out,
            &[x, gamma, beta],
            Box::new(move |args| {
                let xv = args.val(x);
                let c = xv.shape()[1];
                let g = args.val(gamma);
                let mut gx = args.gout.clone();
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    let inv = 1.0 / (var_c[ci] + eps).sqrt();
                    let mc = mean_c[ci];
                    let lane_x = xv.index_axis(Axis(1), ci);
                    let lane_g = args.gout.index_axis(Axis(1), ci);
                    let mut sum_dy = 0f64;
                    let mut sum_dy_xh = 0f64;
                    for (&dy, &xvv) in lane_g.iter().zip(lane_x.iter()) {
                        let xh = (xvv - mc) * inv;
                        sum_dy += dy as f64;
                        sum_dy_xh += (dy * xh) as f64;
                    }
                    dbeta[ci] = sum_dy as f32;
                    dgamma[ci] = sum_dy_xh as f32;
                    let mean_dy = (sum_dy / n as f64) as f32;
                    let mean_dy_xh = (sum_dy_xh / n as f64) as f32;
                    let gc = g[[ci]];
                    let mut lane_out = gx.index_axis_mut(Axis(1), ci);
                    lane_out
                        .iter_mut()
                        .zip(lane_x.iter())
                        .for_each(|(dyv, &xvv)| {
                            let xh = (xvv - mc) * inv;
                            *dyv = gc * inv * (*dyv - mean_dy - xh * mean_dy_xh);
                        });
                }
                args.accum(x, gx);
                args.accum(gamma, dgamma.into_dyn());
                args.accum(beta, dbeta.into_dyn());
            }),
        );
        (out_var, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f32>,
        var: &Array1<f32>,
        eps: f32,
    ) -> Var {
        let c = mean.len();
        let inv: Array1<f32> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let shape = vec![1usize, c, 1, 1];
        let inv_v = self.value(inv.into_dyn().to_shape(IxDyn(&shape)).unwrap().to_owned());
        let mean_v = self.value(
            mean.clone()
                .into_dyn()
                .to_shape(IxDyn(&shape))
                .unwrap()
                .to_owned(),
        );
        let neg_mean = self.scale(mean_v, -1.0);
        let centered = self.add(x, neg_mean);
        let scaled = self.mul(centered, inv_v);
        let g4 = self.reshape(gamma, &shape);
        let b4 = self.reshape(beta, &shape);
        let affine = self.mul(scaled, g4);
        self.add(affine, b4)
    }
}
