//! Parameter storage, layers, the optimizer, and checkpoint I/O.

use crate::autograd::{Conv2dSpec, Graph, Gradients, Var, conv2d_forward};
use crate::error::{C3nError, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"C3NCKPT1";

pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub trainable: bool,
}

/// Flat, ordered store for every tensor the model owns. Trainable entries
/// are visible to the optimizer; the rest (frozen heads, batch-norm running
/// statistics) are plain buffers that still travel with checkpoints.
#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>, trainable: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn value(&self, id: usize) -> &ArrayD<f32> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut ArrayD<f32> {
        &mut self.params[id].value
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.params[id].trainable
    }

    pub fn name(&self, id: usize) -> &str {
        &self.params[id].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Bind a parameter into the graph: trainable entries become leaves
    /// (cached, so reuse accumulates into one gradient), buffers become
    /// constants.
    pub fn var(&self, g: &Graph, id: usize) -> Var {
        if self.params[id].trainable {
            g.cached_param(id, || self.params[id].value.clone())
        } else {
            g.value(self.params[id].value.clone())
        }
    }

    /// SHA-256 of the raw bits, for frozen-weight assertions.
    pub fn digest(&self, id: usize) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.params[id].value.iter() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.name.len() as u32)?;
            w.write_all(p.name.as_bytes())?;
            w.write_u8(p.trainable as u8)?;
            w.write_u32::<LittleEndian>(p.value.ndim() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in p.value.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Load checkpoint values into an already-constructed set. Names and
    /// shapes must match the architecture exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(C3nError::Checkpoint("bad magic/version".into()));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != self.params.len() {
            return Err(C3nError::Checkpoint(format!(
                "parameter count mismatch: file {count}, model {}",
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| C3nError::Checkpoint("non-utf8 name".into()))?;
            if name != p.name {
                return Err(C3nError::Checkpoint(format!(
                    "parameter order mismatch: file {name:?}, model {:?}",
                    p.name
                )));
            }
            let _trainable = r.read_u8()?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u64::<LittleEndian>()? as usize);
            }
            if dims != p.value.shape() {
                return Err(C3nError::Checkpoint(format!(
                    "shape mismatch for {name:?}: file {dims:?}, model {:?}",
                    p.value.shape()
                )));
            }
            let mut data = vec![0f32; dims.iter().product()];
            for v in &mut data {
                *v = r.read_f32::<LittleEndian>()?;
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| C3nError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }
}

impl Graph {
    /// Parameter leaf, deduplicated per slot so shared layers accumulate
    /// into a single gradient.
    pub fn cached_param(&self, slot: usize, value: impl FnOnce() -> ArrayD<f32>) -> Var {
        thread_local! {
            static NOOP: () = ();
        }
        let _ = NOOP;
        if let Some(v) = self.param_cache().borrow().get(&slot) {
            return *v;
        }
        let var = self.param(slot, value());
        self.param_cache().borrow_mut().insert(slot, var);
        var
    }
}

/// Weight initializers.
pub enum Init {
    /// N(0, sqrt(2 / fan_in)) — suits ReLU/SiLU stacks.
    Kaiming,
    /// N(0, scale)
    Normal(f32),
    Zeros,
}

pub fn init_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, init: Init) -> ArrayD<f32> {
    use rand_distr::{Distribution, Normal};
    match init {
        Init::Zeros => ArrayD::zeros(IxDyn(shape)),
        Init::Normal(s) => {
            let n = Normal::new(0.0f32, s).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || n.sample(rng))
        }
        Init::Kaiming => {
            let s = (2.0f32 / fan_in as f32).sqrt();
            let n = Normal::new(0.0f32, s).unwrap();
            ArrayD::from_shape_simple_fn(IxDyn(shape), || n.sample(rng))
        }
    }
}

pub struct Conv2d {
    pub w: usize,
    pub b: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        init: Init,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = ps.add(
            format!("{name}.weight"),
            init_tensor(rng, &[cout, cin, k, k], fan_in, init),
            true,
        );
        let b = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])), true);
        Conv2d { w, b, spec }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array4<f32>) -> Array4<f32> {
        let w = ps
            .value(self.w)
            .view()
            .into_dimensionality()
            .expect("conv weight rank");
        let b: Vec<f32> = ps.value(self.b).iter().copied().collect();
        conv2d_forward(&x.view(), &w, &b, &self.spec)
    }

    pub fn forward_t(&self, g: &Graph, ps: &ParamSet, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        g.conv2d(x, w, b, self.spec)
    }
}

pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        init: Init,
    ) -> Self {
        let w = ps.add(
            format!("{name}.weight"),
            init_tensor(rng, &[dim_out, dim_in], dim_in, init),
            true,
        );
        let b = ps.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim_out])), true);
        Linear { w, b }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<f32>) -> Array2<f32> {
        let w: ndarray::ArrayView2<f32> = ps.value(self.w).view().into_dimensionality().unwrap();
        let b = ps.value(self.b);
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, bb) in row.iter_mut().zip(b.iter()) {
                *v += *bb;
            }
        }
        y
    }

    pub fn forward_t(&self, g: &Graph, ps: &ParamSet, x: Var) -> Var {
        let w = ps.var(g, self.w);
        let b = ps.var(g, self.b);
        g.linear(x, w, b)
    }
}

pub struct BatchNorm2d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: RefCell<Array1<f32>>,
    pub running_var: RefCell<Array1<f32>>,
    /// ParamSet slots shadowing the running stats so they checkpoint.
    mean_slot: usize,
    var_slot: usize,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, c: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c])), true);
        let beta = ps.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c])), true);
        let mean_slot = ps.add(
            format!("{name}.running_mean"),
            ArrayD::zeros(IxDyn(&[c])),
            false,
        );
        let var_slot = ps.add(
            format!("{name}.running_var"),
            ArrayD::ones(IxDyn(&[c])),
            false,
        );
        BatchNorm2d {
            gamma,
            beta,
            running_mean: RefCell::new(Array1::zeros(c)),
            running_var: RefCell::new(Array1::ones(c)),
            mean_slot,
            var_slot,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Pull running stats out of the ParamSet (after checkpoint load).
    pub fn sync_from_store(&self, ps: &ParamSet) {
        *self.running_mean.borrow_mut() = ps
            .value(self.mean_slot)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
        *self.running_var.borrow_mut() = ps
            .value(self.var_slot)
            .view()
            .into_dimensionality()
            .unwrap()
            .to_owned();
    }

    /// Push running stats back so they serialize with everything else.
    pub fn sync_to_store(&self, ps: &mut ParamSet) {
        *ps.value_mut(self.mean_slot) = self.running_mean.borrow().clone().into_dyn();
        *ps.value_mut(self.var_slot) = self.running_var.borrow().clone().into_dyn();
    }

    pub fn forward_t(&self, g: &Graph, ps: &ParamSet, x: Var, train: bool) -> Var {
        let gamma = ps.var(g, self.gamma);
        let beta = ps.var(g, self.beta);
        if train {
            let n: usize = {
                let s = g.shape_of(x);
                s[0] * s[2] * s[3]
            };
            let (y, mean, var) = g.batch_norm_train(x, gamma, beta, self.eps);
            // unbiased variance for the running estimate
            let unbias = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            let m = self.momentum;
            rm.zip_mut_with(&mean, |r, &b| *r = (1.0 - m) * *r + m * b);
            rv.zip_mut_with(&var, |r, &b| *r = (1.0 - m) * *r + m * b * unbias);
            y
        } else {
            g.batch_norm_eval(
                x,
                gamma,
                beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                self.eps,
            )
        }
    }

    /// Plain (inference) normalization with running statistics.
    pub fn forward(&self, ps: &ParamSet, x: &Array4<f32>) -> Array4<f32> {
        let gamma = ps.value(self.gamma);
        let beta = ps.value(self.beta);
        let rm = self.running_mean.borrow();
        let rv = self.running_var.borrow();
        let mut y = x.clone();
        let c = x.dim().1;
        for ci in 0..c {
            let inv = 1.0 / (rv[ci] + self.eps).sqrt();
            let (gc, bc, mc) = (gamma[[ci]], beta[[ci]], rm[ci]);
            y.index_axis_mut(ndarray::Axis(1), ci)
                .mapv_inplace(|v| (v - mc) * inv * gc + bc);
        }
        y
    }
}

/// Adam with bias correction; only trainable entries are ever touched.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Option<ArrayD<f32>>>,
    v: Vec<Option<ArrayD<f32>>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, ps: &mut ParamSet, grads: &Gradients) {
        self.t += 1;
        if self.m.len() < ps.len() {
            self.m.resize_with(ps.len(), || None);
            self.v.resize_with(ps.len(), || None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, grad) in grads.param_grads() {
            assert!(
                ps.is_trainable(slot),
                "gradient for frozen parameter {}",
                ps.name(slot)
            );
            let m = self.m[slot].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[slot].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |mv, &gv| *mv = 0.9 * *mv + 0.1 * gv);
            v.zip_mut_with(grad, |vv, &gv| *vv = 0.999 * *vv + 0.001 * gv * gv);
            let value = ps.value_mut(slot);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let x = ps.add("x", ArrayD::from_elem(IxDyn(&[1]), 5.0f32), true);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = Graph::new();
            let xv = ps.var(&g, x);
            let sq = g.mul(xv, xv);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut ps, &grads);
        }
        assert!(ps.value(x)[[0]].abs() < 1e-2);
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut rng = rng_for(1, "ckpt");
        let mut ps = ParamSet::new();
        let a = ps.add("a", init_tensor(&mut rng, &[3, 4], 4, Init::Kaiming), true);
        let b = ps.add("b", init_tensor(&mut rng, &[7], 7, Init::Normal(0.3)), false);
        let da = ps.digest(a);
        let db = ps.digest(b);
        ps.save(&path).unwrap();

        let mut ps2 = ParamSet::new();
        ps2.add("a", ArrayD::zeros(IxDyn(&[3, 4])), true);
        ps2.add("b", ArrayD::zeros(IxDyn(&[7])), false);
        ps2.load_into(&path).unwrap();
        assert_eq!(ps2.digest(0), da);
        assert_eq!(ps2.digest(1), db);
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut ps = ParamSet::new();
        ps.add("a", ArrayD::zeros(IxDyn(&[3])), true);
        ps.save(&path).unwrap();
        let mut ps2 = ParamSet::new();
        ps2.add("a", ArrayD::zeros(IxDyn(&[4])), true);
        assert!(ps2.load_into(&path).is_err());
    }
}
