mod common;

use common::{max_gradient_error, normal_batch, GradCase};
use nflows::diffcore::{Activation, Backend, Eval, Head, Mlp, ParamStore, Tape, Tensor};
use nflows::seeds::rng;

#[test]
fn three_layer_conditioner_gradients_match_central_differences() {
    for seed in [1, 2, 3] {
        let err = max_gradient_error(&GradCase::new(seed), 100, seed + 100);
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    // d/dx of sum(tanh(x W)) for a single linear layer.
    let mut store = ParamStore::new();
    let net = Mlp::new(
        &mut store,
        &[3, 2],
        Activation::Relu,
        vec![Head::new(2, Activation::Tanh)],
        None,
        &mut rng(4),
    )
    .unwrap();
    let x = normal_batch(2, 3, 1.0, &mut rng(9));
    let f = |x: &Tensor| {
        let mut ev = Eval::new(&store);
        let xv = ev.constant(x.clone());
        let out = net.forward(&mut ev, &xv).unwrap();
        let s = ev.sum(&out[0]);
        ev.value(&s).item()
    };
    let mut tape = Tape::new(&store);
    let xv = tape.input(x.clone());
    let out = net.forward(&mut tape, &xv).unwrap();
    let root = tape.sum(&out[0]);
    let grads = tape.backward(root).unwrap();
    let gx = grads.wrt(xv).unwrap();
    for i in 0..x.len() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += 1e-6;
        m.data_mut()[i] -= 1e-6;
        let fd = (f(&p) - f(&m)) / 2e-6;
        assert!((gx.data()[i] - fd).abs() < 1e-8, "{i}: {} vs {fd}", gx.data()[i]);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let a = GradCase::new(5);
    let b = GradCase::new(5);
    assert_eq!(a.value_at(&a.store).to_bits(), b.value_at(&b.store).to_bits());
    let mut t1 = Tape::new(&a.store);
    let r1 = a.loss(&mut t1);
    let mut t2 = Tape::new(&b.store);
    let r2 = b.loss(&mut t2);
    assert_eq!(t1.backward(r1).unwrap().param_grads(), t2.backward(r2).unwrap().param_grads());
}
