//! Oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nflows::diffcore::{Activation, Backend, Eval, Head, Mlp, ParamId, ParamStore, Tape, Tensor};
use nflows::seeds::{rng, Rng};
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_batch(n: usize, d: usize, scale: f64, r: &mut Rng) -> Tensor {
    let data = (0..n * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect::<Vec<f64>>();
    Tensor::matrix(n, d, data)
}

/// Adds noise to every parameter so no layer sits at a special point.
pub fn jitter(store: &mut ParamStore, scale: f64, r: &mut Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * r.random_range(-1.0..1.0);
        }
    }
}

/// Central-difference Jacobian of one row, `J[i][j] = d out_i / d in_j`.
pub fn fd_jacobian(f: impl Fn(&Tensor) -> Tensor, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[j] += h;
        minus[j] -= h;
        let fp = f(&Tensor::matrix(1, d, plus));
        let fm = f(&Tensor::matrix(1, d, minus));
        for (i, row) in jac.iter_mut().enumerate() {
            row[j] = (fp.data()[i] - fm.data()[i]) / (2.0 * h);
        }
    }
    jac
}

/// `log|det A|` by Gaussian elimination with partial pivoting.
pub fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        let piv = a[c][c];
        total += piv.abs().ln();
        for r in c + 1..n {
            let f = a[r][c] / piv;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    total
}

/// A 3-layer conditioner with a tanh and a linear head, plus a fixed input.
pub struct GradCase {
    pub store: ParamStore,
    pub net: Mlp,
    pub x: Tensor,
    pub w: Arc<Tensor>,
}

impl GradCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let heads = vec![Head::new(3, Activation::Tanh), Head::new(3, Activation::Linear)];
        let net = Mlp::new(&mut store, &[4, 24, 24, 6], Activation::Relu, heads, None, &mut r).unwrap();
        jitter(&mut store, 0.1, &mut r);
        let x = normal_batch(16, 4, 1.0, &mut r);
        let w = Arc::new(normal_batch(16, 3, 1.0, &mut r));
        Self { store, net, x, w }
    }

    /// Mixes every head through smooth primitives into one scalar.
    pub fn loss<B: Backend>(&self, b: &mut B) -> B::V {
        let x = b.constant(self.x.clone());
        let out = self.net.forward(b, &x).unwrap();
        let s = b.mul_const(&out[0], &self.w);
        let e = b.exp(&s);
        let sp = b.softplus(&out[1]);
        let l = b.log(&sp);
        let sm = b.softmax(&out[1]);
        let sq = b.square(&sm);
        let a = b.mean(&e);
        let c = b.sum(&l);
        let d = b.sum(&sq);
        let ac = b.add(&a, &c);
        b.sub(&ac, &d)
    }

    pub fn value_at(&self, store: &ParamStore) -> f64 {
        let mut ev = Eval::new(store);
        let v = self.loss(&mut ev);
        ev.value(&v).item()
    }
}

/// Largest relative error between tape gradients and central differences
/// (step 1e-5) over `count` randomly chosen parameter entries.
pub fn max_gradient_error(case: &GradCase, count: usize, seed: u64) -> f64 {
    let mut tape = Tape::new(&case.store);
    let root = case.loss(&mut tape);
    let grads = tape.backward(root).unwrap().param_grads();
    let flat: Vec<(usize, usize)> = case
        .store
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(t, v)| (0..v.len()).map(move |i| (t, i)))
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in sample(&mut rng(seed), flat.len(), count) {
        let (t, i) = flat[k];
        let mut store = case.store.clone();
        let base = store.get(ParamId(t)).data()[i];
        store.get_mut(ParamId(t)).data_mut()[i] = base + h;
        let fp = case.value_at(&store);
        store.get_mut(ParamId(t)).data_mut()[i] = base - h;
        let fm = case.value_at(&store);
        let fd = (fp - fm) / (2.0 * h);
        let g = grads[t].data()[i];
        let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}
