//! Elementwise, broadcast, reduction and shape ops.

use super::{Graph, Var};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

/// Sum `grad` down to `target` shape (same rank, broadcast on 1-sized axes).
fn reduce_to(grad: &ArrayD<f32>, target: &[usize]) -> ArrayD<f32> {
    let mut g = grad.clone();
    for (ax, (&t, &s)) in target.iter().zip(grad.shape()).enumerate() {
        if t == 1 && s != 1 {
            g = g
                .sum_axis(Axis(ax))
                .insert_axis(Axis(ax))
                .into_dimensionality()
                .unwrap();
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast ops require equal rank");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "incompatible broadcast {a:?} vs {b:?}");
            x.max(y)
        })
        .collect()
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (out, sa, sb) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let shape = broadcast_shape(va.shape(), vb.shape());
            let ba = va.broadcast(IxDyn(&shape)).expect("broadcast a");
            let bb = vb.broadcast(IxDyn(&shape)).expect("broadcast b");
            (&ba + &bb, va.shape().to_vec(), vb.shape().to_vec())
        };
        self.push_op(
            out,
            &[a, b],
            Box::new(move |args| {
                if args.needs_grad(a) {
                    args.accum(a, reduce_to(args.gout, &sa));
                }
                if args.needs_grad(b) {
                    args.accum(b, reduce_to(args.gout, &sb));
                }
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (out, sa, sb) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            let shape = broadcast_shape(va.shape(), vb.shape());
            let ba = va.broadcast(IxDyn(&shape)).expect("broadcast a");
            let bb = vb.broadcast(IxDyn(&shape)).expect("broadcast b");
            (&ba * &bb, va.shape().to_vec(), vb.shape().to_vec())
        };
        self.push_op(
            out,
            &[a, b],
            Box::new(move |args| {
                let shape = args.gout.shape().to_vec();
                if args.needs_grad(a) {
                    let vb = args.val(b).broadcast(IxDyn(&shape)).unwrap();
                    args.accum(a, reduce_to(&(args.gout * &vb), &sa));
                }
                if args.needs_grad(b) {
                    let va = args.val(a).broadcast(IxDyn(&shape)).unwrap();
                    args.accum(b, reduce_to(&(args.gout * &va), &sb));
                }
            }),
        )
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|v| v * c)
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| args.accum(a, args.gout.mapv(|g| g * c))),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|v| v.max(0.0))
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let va = args.val(a);
                let mut g = args.gout.clone();
                g.zip_mut_with(va, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                args.accum(a, g);
            }),
        )
    }

    /// x * sigmoid(x). Smooth, so finite-difference checks behave well.
    pub fn silu(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(|v| v * sigmoid_scalar(v))
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let va = args.val(a);
                let mut g = args.gout.clone();
                g.zip_mut_with(va, |gv, &xv| {
                    let s = sigmoid_scalar(xv);
                    *gv *= s * (1.0 + xv * (1.0 - s));
                });
                args.accum(a, g);
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.mapv(sigmoid_scalar)
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let mut g = args.gout.clone();
                g.zip_mut_with(args.out, |gv, &y| *gv *= y * (1.0 - y));
                args.accum(a, g);
            }),
        )
    }

    /// Mean over every element, producing a 0-d scalar node.
    pub fn mean_all(&self, a: Var) -> Var {
        let (out, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let n = v.len();
            (
                ArrayD::from_elem(IxDyn(&[]), v.iter().sum::<f32>() / n as f32),
                n,
            )
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let g = args.gout.iter().next().copied().unwrap() / n as f32;
                let shape = args.val(a).shape().to_vec();
                args.accum(a, ArrayD::from_elem(IxDyn(&shape), g));
            }),
        )
    }

    pub fn add_all(&self, vs: &[Var]) -> Var {
        assert!(!vs.is_empty());
        let mut acc = vs[0];
        for v in &vs[1..] {
            acc = self.add(acc, *v);
        }
        acc
    }

    /// Mean along one axis, keeping it as size 1.
    pub fn mean_axis_keep(&self, a: Var, axis: usize) -> Var {
        let (out, n) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let n = v.shape()[axis];
            (
                v.mean_axis(Axis(axis)).unwrap().insert_axis(Axis(axis)),
                n,
            )
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let shape = args.val(a).shape().to_vec();
                let scaled = args.gout.mapv(|g| g / n as f32);
                let bc = scaled.broadcast(IxDyn(&shape)).unwrap().to_owned();
                args.accum(a, bc);
            }),
        )
    }

    /// Global average pool: `[b, c, h, w] -> [b, c]`.
    pub fn mean_spatial(&self, a: Var) -> Var {
        let (out, h, w) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let s = v.shape();
            assert_eq!(s.len(), 4);
            let (h, w) = (s[2], s[3]);
            let m = v
                .mean_axis(Axis(3))
                .unwrap()
                .mean_axis(Axis(2))
                .unwrap();
            (m, h, w)
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let scale = 1.0 / (h * w) as f32;
                let g2 = args.gout.mapv(|g| g * scale);
                let g4 = g2.insert_axis(Axis(2)).insert_axis(Axis(3));
                let shape = args.val(a).shape().to_vec();
                args.accum(a, g4.broadcast(IxDyn(&shape)).unwrap().to_owned());
            }),
        )
    }

    /// Tile `[b, c]` over a spatial grid: `-> [b, c, h, w]`.
    pub fn broadcast_spatial(&self, a: Var, h: usize, w: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let s = v.shape();
            assert_eq!(s.len(), 2);
            let v4 = v.view().insert_axis(Axis(2)).insert_axis(Axis(3));
            v4.broadcast(IxDyn(&[s[0], s[1], h, w])).unwrap().to_owned()
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let g = args.gout.sum_axis(Axis(3)).sum_axis(Axis(2));
                args.accum(a, g.into_dimensionality().unwrap());
            }),
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (out, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.0].value.view()).collect();
            let sizes: Vec<usize> = views.iter().map(|v| v.shape()[axis]).collect();
            (
                ndarray::concatenate(Axis(axis), &views).expect("concat"),
                sizes,
            )
        };
        let parts = parts.to_vec();
        self.push_op(
            out,
            &parts.clone(),
            Box::new(move |args| {
                let mut offset = 0usize;
                for (p, &sz) in parts.iter().zip(&sizes) {
                    if args.needs_grad(*p) {
                        let g = args
                            .gout
                            .slice_axis(Axis(axis), Slice::from(offset..offset + sz))
                            .to_owned();
                        args.accum(*p, g);
                    }
                    offset += sz;
                }
            }),
        )
    }

    /// Contiguous sub-range of the leading (batch) axis.
    pub fn slice_batch(&self, a: Var, start: usize, len: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .slice_axis(Axis(0), Slice::from(start..start + len))
                .to_owned()
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let shape = args.val(a).shape().to_vec();
                let mut g = ArrayD::<f32>::zeros(IxDyn(&shape));
                g.slice_axis_mut(Axis(0), Slice::from(start..start + len))
                    .assign(args.gout);
                args.accum(a, g);
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .to_shape(IxDyn(shape))
                .expect("reshape")
                .to_owned()
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let orig = args.val(a).shape().to_vec();
                let g = args.gout.to_shape(IxDyn(&orig)).unwrap().to_owned();
                args.accum(a, g);
            }),
        )
    }

    /// `[t, c, h, w] -> [t*h*w, c]` position matrix for attention.
    pub fn flatten_positions(&self, a: Var) -> Var {
        let (out, dims) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let s = v.shape().to_vec();
            assert_eq!(s.len(), 4);
            let perm = v.view().permuted_axes(vec![0, 2, 3, 1]);
            let flat = perm
                .as_standard_layout()
                .to_shape(IxDyn(&[s[0] * s[2] * s[3], s[1]]))
                .unwrap()
                .to_owned();
            (flat, s)
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let g = args
                    .gout
                    .to_shape(IxDyn(&[dims[0], dims[2], dims[3], dims[1]]))
                    .unwrap()
                    .to_owned()
                    .permuted_axes(vec![0, 3, 1, 2])
                    .as_standard_layout()
                    .to_owned();
                args.accum(a, g);
            }),
        )
    }

    /// Inverse of [`Graph::flatten_positions`].
    pub fn unflatten_positions(&self, a: Var, t: usize, c: usize, h: usize, w: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            assert_eq!(v.shape(), &[t * h * w, c]);
            v.to_shape(IxDyn(&[t, h, w, c]))
                .unwrap()
                .to_owned()
                .permuted_axes(vec![0, 3, 1, 2])
                .as_standard_layout()
                .to_owned()
        };
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let g = args
                    .gout
                    .view()
                    .permuted_axes(vec![0, 2, 3, 1])
                    .as_standard_layout()
                    .to_shape(IxDyn(&[t * h * w, c]))
                    .unwrap()
                    .to_owned();
                args.accum(a, g);
            }),
        )
    }

    /// Sum of `logits[b, idx[b]]` over the batch; the hook for class-gradient
    /// extraction (one backward pass covers every batch item at once).
    pub fn gather_sum(&self, logits: Var, idx: Vec<usize>) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[logits.0].value;
            let s = v.shape();
            assert_eq!(s.len(), 2);
            assert_eq!(s[0], idx.len());
            let sum: f32 = idx.iter().enumerate().map(|(b, &k)| v[[b, k]]).sum();
            ArrayD::from_elem(IxDyn(&[]), sum)
        };
        self.push_op(
            out,
            &[logits],
            Box::new(move |args| {
                let g = args.gout.iter().next().copied().unwrap();
                let shape = args.val(logits).shape().to_vec();
                let mut gl = ArrayD::<f32>::zeros(IxDyn(&shape));
                for (b, &k) in idx.iter().enumerate() {
                    gl[[b, k]] = g;
                }
                args.accum(logits, gl);
            }),
        )
    }
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
