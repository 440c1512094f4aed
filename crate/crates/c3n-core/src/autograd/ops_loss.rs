//! Fused segmentation losses with analytic backward passes.
//!
//! The scalar-returning loss math itself lives in [`crate::decoder`]; these
//! ops mirror it on the tape so training gets exact gradients without
//! holding elementwise intermediates alive.

use super::{Graph, Var};
use ndarray::{ArrayD, ArrayView3, ArrayViewD, Axis, IxDyn};

pub const PROB_EPS: f32 = 1e-7;

fn as3(v: &ArrayViewD<f32>) -> ArrayView3<f32> {
    v.view().into_dimensionality().expect("rank-3 tensor")
}

impl Graph {
    /// Mean binary cross-entropy per valid frame, averaged over valid frames.
    /// `probs: [t, h, w]`; `gt` and `valid` are fixed data, not tape nodes.
    pub fn bce_loss(&self, probs: Var, gt: ArrayD<f32>, valid: Vec<bool>) -> Var {
        let n_valid = valid.iter().filter(|v| **v).count();
        assert!(n_valid > 0, "bce_loss with no valid frames");
        let out = {
            let nodes = self.nodes.borrow();
            let p = as3(&nodes[probs.0].value.view());
            let g = as3(&gt.view());
            let (_, h, w) = p.dim();
            let mut total = 0f64;
            for (t, &ok) in valid.iter().enumerate() {
                if !ok {
                    continue;
                }
                let mut frame = 0f64;
                for (pv, gv) in p.index_axis(Axis(0), t).iter().zip(g.index_axis(Axis(0), t)) {
                    let pc = pv.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    frame -= (*gv as f64) * (pc as f64).ln()
                        + (1.0 - *gv as f64) * ((1.0 - pc) as f64).ln();
                }
                total += frame / (h * w) as f64;
            }
            ArrayD::from_elem(IxDyn(&[]), (total / n_valid as f64) as f32)
        };
        let gt_c = gt;
        let valid_c = valid;
        self.push_op(
            out,
            &[probs],
            Box::new(move |args| {
                let gscale = args.gout.iter().next().copied().unwrap();
                let p = as3(&args.val(probs).view());
                let g = as3(&gt_c.view());
                let (t_len, h, w) = p.dim();
                let mut grad = ArrayD::<f32>::zeros(IxDyn(&[t_len, h, w]));
                let norm = gscale / (n_valid * h * w) as f32;
                for (t, &ok) in valid_c.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    let pf = p.index_axis(Axis(0), t);
                    let gf = g.index_axis(Axis(0), t);
                    let mut out = grad.index_axis_mut(Axis(0), t);
                    let mut out3: ndarray::ArrayViewMut2<f32> =
                        out.view_mut().into_dimensionality().unwrap();
                    for ((ov, pv), gv) in out3.iter_mut().zip(pf.iter()).zip(gf.iter()) {
                        // zero slope outside the clamp band
                        if *pv < PROB_EPS || *pv > 1.0 - PROB_EPS {
                            continue;
                        }
                        *ov = norm * (-gv / pv + (1.0 - gv) / (1.0 - pv));
                    }
                }
                args.accum(probs, grad);
            }),
        )
    }

    /// Dice loss per valid frame with smoothing, averaged over valid frames.
    pub fn dice_loss(&self, probs: Var, gt: ArrayD<f32>, valid: Vec<bool>, smooth: f32) -> Var {
        let n_valid = valid.iter().filter(|v| **v).count();
        assert!(n_valid > 0, "dice_loss with no valid frames");
        let out = {
            let nodes = self.nodes.borrow();
            let p = as3(&nodes[probs.0].value.view());
            let g = as3(&gt.view());
            let mut total = 0f64;
            for (t, &ok) in valid.iter().enumerate() {
                if !ok {
                    continue;
                }
                let pf = p.index_axis(Axis(0), t);
                let gf = g.index_axis(Axis(0), t);
                let inter: f64 = pf.iter().zip(gf.iter()).map(|(a, b)| (*a * *b) as f64).sum();
                let sp: f64 = pf.iter().map(|v| *v as f64).sum();
                let sg: f64 = gf.iter().map(|v| *v as f64).sum();
                total += 1.0
                    - (2.0 * inter + smooth as f64) / (sp + sg + smooth as f64);
            }
            ArrayD::from_elem(IxDyn(&[]), (total / n_valid as f64) as f32)
        };
        let gt_c = gt;
        let valid_c = valid;
        self.push_op(
            out,
            &[probs],
            Box::new(move |args| {
                let gscale = args.gout.iter().next().copied().unwrap();
                let p = as3(&args.val(probs).view());
                let g = as3(&gt_c.view());
                let (t_len, h, w) = p.dim();
                let mut grad = ArrayD::<f32>::zeros(IxDyn(&[t_len, h, w]));
                for (t, &ok) in valid_c.iter().enumerate() {
                    if !ok {
                        continue;
                    }
                    let pf = p.index_axis(Axis(0), t);
                    let gf = g.index_axis(Axis(0), t);
                    let inter: f64 =
                        pf.iter().zip(gf.iter()).map(|(a, b)| (*a * *b) as f64).sum();
                    let sp: f64 = pf.iter().map(|v| *v as f64).sum();
                    let sg: f64 = gf.iter().map(|v| *v as f64).sum();
                    let a = 2.0 * inter + smooth as f64;
                    let b = sp + sg + smooth as f64;
                    let mut out = grad.index_axis_mut(Axis(0), t);
                    let mut out2: ndarray::ArrayViewMut2<f32> =
                        out.view_mut().into_dimensionality().unwrap();
                    // d/dp_i [1 - A/B] = (A - 2 g_i B) / B^2
                    for (ov, gv) in out2.iter_mut().zip(gf.iter()) {
                        *ov = gscale / n_valid as f32
                            * ((a - 2.0 * (*gv as f64) * b) / (b * b)) as f32;
                    }
                }
                args.accum(probs, grad);
            }),
        )
    }

    /// Multi-label BCE on logits, for the encoder-alignment phase.
    /// `targets: [n, classes]` of 0/1.
    pub fn bce_with_logits(&self, logits: Var, targets: ArrayD<f32>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            let n = z.len() as f64;
            let total: f64 = z
                .iter()
                .zip(targets.iter())
                .map(|(&zv, &tv)| {
                    let zv = zv as f64;
                    let tv = tv as f64;
                    zv.max(0.0) - zv * tv + (1.0 + (-zv.abs()).exp()).ln()
                })
                .sum();
            ArrayD::from_elem(IxDyn(&[]), (total / n) as f32)
        };
        let targets_c = targets;
        self.push_op(
            out,
            &[logits],
            Box::new(move |args| {
                let gscale = args.gout.iter().next().copied().unwrap();
                let z = args.val(logits);
                let n = z.len() as f32;
                let mut grad = z.clone();
                grad.zip_mut_with(&targets_c, |zv, &tv| {
                    *zv = gscale * (super::ops_basic::sigmoid_scalar(*zv) - tv) / n;
                });
                args.accum(logits, grad);
            }),
        )
    }
}
