//! Linear maps and matrix products.

use super::{Graph, Var};
use ndarray::{Array2, ArrayD};

fn as2(v: &ArrayD<f32>) -> ndarray::ArrayView2<f32> {
    v.view().into_dimensionality().expect("rank-2 tensor")
}

impl Graph {
    /// Fully connected layer: `x [n, in] -> [n, out]` with `w [out, in]`, `b [out]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let xv = as2(&nodes[x.0].value);
            let wv = as2(&nodes[w.0].value);
            let mut y = xv.dot(&wv.t());
            let bv = &nodes[b.0].value;
            for mut row in y.rows_mut() {
                for (v, bb) in row.iter_mut().zip(bv.iter()) {
                    *v += *bb;
                }
            }
            y.into_dyn()
        };
        self.push_op(
            out,
            &[x, w, b],
            Box::new(move |args| {
                let g = as2(args.gout).to_owned();
                if args.needs_grad(x) {
                    let wv = as2(args.val(w));
                    args.accum(x, g.dot(&wv).into_dyn());
                }
                if args.needs_grad(w) {
                    let xv = as2(args.val(x));
                    args.accum(w, g.t().dot(&xv).into_dyn());
                }
                if args.needs_grad(b) {
                    args.accum(b, g.sum_axis(ndarray::Axis(0)).into_dyn());
                }
            }),
        )
    }

    /// `a [m, k] · b [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            as2(&nodes[a.0].value)
                .dot(&as2(&nodes[b.0].value))
                .into_dyn()
        };
        self.push_op(
            out,
            &[a, b],
            Box::new(move |args| {
                let g: Array2<f32> = as2(args.gout).to_owned();
                if args.needs_grad(a) {
                    let bv = as2(args.val(b));
                    args.accum(a, g.dot(&bv.t()).into_dyn());
                }
                if args.needs_grad(b) {
                    let av = as2(args.val(a));
                    args.accum(b, av.t().dot(&g).into_dyn());
                }
            }),
        )
    }

    /// `aᵀ · b` for `a [k, m]`, `b [k, n] -> [m, n]`.
    pub fn matmul_tn(&self, a: Var, b: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            as2(&nodes[a.0].value)
                .t()
                .dot(&as2(&nodes[b.0].value))
                .into_dyn()
        };
        self.push_op(
            out,
            &[a, b],
            Box::new(move |args| {
                let g: Array2<f32> = as2(args.gout).to_owned();
                if args.needs_grad(a) {
                    let bv = as2(args.val(b));
                    args.accum(a, bv.dot(&g.t()).into_dyn());
                }
                if args.needs_grad(b) {
                    let av = as2(args.val(a));
                    args.accum(b, av.dot(&g).into_dyn());
                }
            }),
        )
    }
}
