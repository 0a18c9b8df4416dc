//! Dense multilayer perceptrons with optional connectivity masks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, DiffError, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<B: Backend>(self, b: &mut B, v: &B::V) -> B::V {
        match self {
            Activation::Linear => v.clone(),
            Activation::Relu => b.relu(v),
            Activation::Tanh => b.tanh(v),
        }
    }
}

/// A contiguous slice of the output layer with its own activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Head {
    pub width: usize,
    pub activation: Activation,
}

impl Head {
    pub fn new(width: usize, activation: Activation) -> Self {
        Self { width, activation }
    }
}

/// Fully connected network `widths[0] -> ... -> widths[last]`.
///
/// Weights are stored `fan_in x fan_out` so a batch `X` maps to `X·W + b`.
/// The last layer is split into [`Head`]s whose widths sum to the output width.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    masks: Vec<Option<Arc<Tensor>>>,
    hidden: Activation,
    heads: Vec<Head>,
}

/// Glorot/Xavier uniform draw for a `fan_in x fan_out` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

impl Mlp {
    /// Registers Glorot-initialized weights and zero biases in `store`.
    ///
    /// `masks`, when given, holds one binary matrix per layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        widths: &[usize],
        hidden: Activation,
        heads: Vec<Head>,
        masks: Option<Vec<Tensor>>,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(DiffError::Shape(format!("invalid layer widths {widths:?}")));
        }
        let out = *widths.last().unwrap();
        let head_total: usize = heads.iter().map(|h| h.width).sum();
        if head_total != out {
            return Err(DiffError::Shape(format!(
                "heads cover {head_total} outputs, last layer has {out}"
            )));
        }
        let layers = widths.len() - 1;
        let masks: Vec<Option<Arc<Tensor>>> = match masks {
            None => vec![None; layers],
            Some(ms) => {
                if ms.len() != layers {
                    return Err(DiffError::Shape(format!(
                        "{} masks for {layers} layers",
                        ms.len()
                    )));
                }
                for (l, m) in ms.iter().enumerate() {
                    if m.shape() != [widths[l], widths[l + 1]] {
                        return Err(DiffError::Shape(format!(
                            "mask {l} has shape {:?}, weight is {}x{}",
                            m.shape(),
                            widths[l],
                            widths[l + 1]
                        )));
                    }
                    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                        return Err(DiffError::Shape(format!("mask {l} is not binary")));
                    }
                }
                ms.into_iter().map(|m| Some(Arc::new(m))).collect()
            }
        };
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let mut w = glorot_uniform(widths[l], widths[l + 1], rng);
            if let Some(m) = &masks[l] {
                w = w.zip_map(m, |a, b| a * b);
            }
            weights.push(store.add(w));
            biases.push(store.add(Tensor::zeros(&[widths[l + 1]])));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            masks,
            hidden,
            heads,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.weights
    }

    pub fn biases(&self) -> &[ParamId] {
        &self.biases
    }

    pub fn masks(&self) -> &[Option<Arc<Tensor>>] {
        &self.masks
    }

    /// Zeroes the output layer so every head emits its activation of zero.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let l = self.weights.len() - 1;
        store.get_mut(self.weights[l]).data_mut().fill(0.0);
        store.get_mut(self.biases[l]).data_mut().fill(0.0);
    }

    /// Evaluates the network on a `batch x in` input, one output per head.
    pub fn forward<B: Backend>(&self, b: &mut B, input: &B::V) -> Result<Vec<B::V>, DiffError> {
        let x = b.value(input);
        if x.shape().len() != 2 || x.cols() != self.input_width() {
            return Err(DiffError::Shape(format!(
                "mlp expects batch x {}, got {:?}",
                self.input_width(),
                x.shape()
            )));
        }
        let pre = self.forward_preactivation(b, input);
        if self.heads.len() == 1 {
            return Ok(vec![self.heads[0].activation.apply(b, &pre)]);
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut start = 0;
        for head in &self.heads {
            let part = b.slice_cols(&pre, start, start + head.width);
            outs.push(head.activation.apply(b, &part));
            start += head.width;
        }
        Ok(outs)
    }

    fn forward_preactivation<B: Backend>(&self, b: &mut B, input: &B::V) -> B::V {
        let layers = self.weights.len();
        let mut h = input.clone();
        for l in 0..layers {
            let mut w = b.param(self.weights[l]);
            if let Some(m) = &self.masks[l] {
                w = b.mul_const(&w, m);
            }
            let bias = b.param(self.biases[l]);
            let z = b.matmul(&h, &w);
            let z = b.add_row(&z, &bias);
            h = if l + 1 < layers {
                self.hidden.apply(b, &z)
            } else {
                z
            };
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Eval, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(store: &mut ParamStore, widths: &[usize], heads: Vec<Head>) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        Mlp::new(store, widths, Activation::Relu, heads, None, &mut rng).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let mut store = ParamStore::new();
        let net = single(&mut store, &[3, 5, 2], vec![Head::new(2, Activation::Linear)]);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 9.0]]);
        let out = net.forward(&mut Eval::new(&store), &x).unwrap();
        assert!(out[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut store = ParamStore::new();
        let net = single(&mut store, &[2, 2], vec![Head::new(2, Activation::Linear)]);
        *store.get_mut(net.weights()[0]) = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = Tensor::from_rows(&[vec![0.3, -7.0]]);
        let out = net.forward(&mut Eval::new(&store), &x).unwrap();
        assert_eq!(out[0], x);
    }

    #[test]
    fn hand_evaluated_heads() {
        // 1 -> 1 (relu) -> 2 heads: linear and tanh.
        let mut store = ParamStore::new();
        let net = single(
            &mut store,
            &[1, 1, 2],
            vec![Head::new(1, Activation::Linear), Head::new(1, Activation::Tanh)],
        );
        *store.get_mut(net.weights()[0]) = Tensor::matrix(1, 1, vec![2.0]);
        *store.get_mut(net.biases()[0]) = Tensor::vector(vec![1.0]);
        *store.get_mut(net.weights()[1]) = Tensor::matrix(1, 2, vec![3.0, -1.0]);
        *store.get_mut(net.biases()[1]) = Tensor::vector(vec![0.5, 0.25]);
        let eval = |x: f64| {
            let out = net
                .forward(&mut Eval::new(&store), &Tensor::matrix(1, 1, vec![x]))
                .unwrap();
            (out[0].item(), out[1].item())
        };
        // input -3: hidden relu(2*-3+1) = 0, heads see only their biases.
        assert_eq!(eval(-3.0), (0.5, 0.25f64.tanh()));
        // input 1: hidden relu(3) = 3 -> linear 9.5, tanh(-3 + 0.25).
        assert_eq!(eval(1.0), (9.5, (-2.75f64).tanh()));
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut store = ParamStore::new();
        let net = single(&mut store, &[3, 4, 1], vec![Head::new(1, Activation::Linear)]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        assert!(net.forward(&mut Eval::new(&store), &x).is_err());
    }

    #[test]
    fn rejects_non_binary_mask() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = vec![Tensor::full(&[2, 1], 0.5)];
        let r = Mlp::new(
            &mut store,
            &[2, 1],
            Activation::Relu,
            vec![Head::new(1, Activation::Linear)],
            Some(bad),
            &mut rng,
        );
        assert!(r.is_err());
    }

    #[test]
    fn masked_weight_has_zero_gradient() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]);
        let net = Mlp::new(
            &mut store,
            &[2, 2],
            Activation::Relu,
            vec![Head::new(2, Activation::Linear)],
            Some(vec![mask]),
            &mut rng,
        )
        .unwrap();
        // Make the masked entry non-zero to prove the mask is applied on use.
        store.get_mut(net.weights()[0]).set(0, 1, 5.0);
        let mut tape = Tape::new(&store);
        let x = tape.input(Tensor::from_rows(&[vec![0.7, -1.3], vec![2.0, 0.1]]));
        let out = net.forward(&mut tape, &x).unwrap();
        let sq = tape.square(&out[0]);
        let loss = tape.sum(&sq);
        let grads = tape.backward(loss).unwrap().param_grads();
        assert_eq!(grads[net.weights()[0].0].at(0, 1), 0.0);
        assert_ne!(grads[net.weights()[0].0].at(0, 0), 0.0);
    }
}
