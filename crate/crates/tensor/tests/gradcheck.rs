//! Finite-difference checks for every differentiable operation.

use std::sync::Arc;

use grapedet_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduce an arbitrary output to a scalar with fixed random weights so that
/// every output element contributes a distinct sensitivity.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(random(&shape, &mut rng));
    let p = t.mul(y, w);
    t.sum(p)
}

fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.variable(v.clone())).collect();
        let y = f(&mut t, &vars);
        let s = project(&mut t, y, 99);
        t.value(s).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| t.variable(v.clone())).collect();
    let y = f(&mut t, &vars);
    let s = project(&mut t, y, 99);
    let grads = t.backward(s);
    let eps = 1e-6;
    for (k, inp) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).expect("gradient present");
        for i in 0..inp.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= eps;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ana = g.data()[i];
            let err = (num - ana).abs() / (num.abs().max(ana.abs()).max(1e-3));
            assert!(err < 1e-5, "input {k} elem {i}: numeric {num} vs analytic {ana}");
        }
    }
}

#[test]
fn conv2d_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let x = random(&[2, 3, 5, 5], &mut rng);
        let w = random(&[4, 3, k, k], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p));
    }
}

#[test]
fn batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 2, 2, 3], &mut rng);
    let g = random(&[2], &mut rng);
    let b = random(&[2], &mut rng);
    check(vec![x.clone(), g.clone(), b.clone()], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-3).0);
    check(vec![x, g, b], |t, v| t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[1.5, 0.7], 1e-3));
}

#[test]
fn layer_norm_linear_gelu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 4], &mut rng);
    let g = random(&[4], &mut rng);
    let b = random(&[4], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let bias = random(&[5], &mut rng);
    check(vec![x, g, b, w, bias], |t, v| {
        let h = t.layer_norm(v[0], v[1], v[2], 1e-5);
        let l = t.linear(h, v[3], Some(v[4]));
        t.gelu(l)
    });
}

#[test]
fn attention_style_matmul_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random(&[2, 3, 4], &mut rng);
    let k = random(&[2, 3, 4], &mut rng);
    let vv = random(&[2, 3, 5], &mut rng);
    let bias = random(&[3, 3], &mut rng);
    check(vec![q, k, vv, bias], |t, v| {
        let a = t.matmul(v[0], v[1], true);
        let a = t.add(a, v[3]);
        let a = t.softmax(a);
        t.matmul(a, v[2], false)
    });
}

#[test]
fn elementwise_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[7], &mut rng);
    let b = random(&[7], &mut rng).map(|v| v.abs() + 0.5);
    check(vec![a.clone(), b.clone()], |t, v| {
        let s = t.silu(v[0]);
        let d = t.div(s, v[1]);
        let m = t.mul(d, v[0]);
        let q = t.sqrt(v[1]);
        let e = t.sub(m, q);
        let at = t.atan(e);
        let sg = t.sigmoid(at);
        let sq = t.square(sg);
        let ex = t.exp(sq);
        let sc = t.scale(ex, -1.5);
        t.add_scalar(sc, 2.0)
    });
    // keep the pair well separated so the kink is never crossed by the probe
    let a2 = Tensor::from_f64(&[4], &[0.3, -0.8, 1.2, -0.1]).unwrap();
    let b2 = Tensor::from_f64(&[4], &[0.5, -0.2, 0.4, -0.6]).unwrap();
    check(vec![a2.clone(), b2.clone()], |t, v| {
        let mx = t.maximum(v[0], v[1]);
        let mn = t.minimum(v[0], v[1]);
        let c = t.clamp_min(v[0], 0.0);
        let p = t.mul(mx, mn);
        t.add(p, c)
    });
}

#[test]
fn pooling_upsample_concat_gather() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 2, 4, 4], &mut rng);
    let y = random(&[1, 3, 4, 4], &mut rng);
    check(vec![x, y], |t, v| {
        let p = t.max_pool2d(v[0], 5, 1, 2);
        let c = t.concat(&[p, v[1], v[0]], 1);
        let c = t.permute(c, &[0, 2, 3, 1]);
        let idx: Vec<usize> = (0..20).map(|i| (i * 7) % 96).collect();
        let g = t.gather(c, Arc::new(idx), &[4, 5]);
        let r = t.reshape(g, &[1, 1, 4, 5]);
        t.upsample2x(r)
    });
}

#[test]
fn reductions_and_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[6], &mut rng).map(|v| 3.0 * v);
    let target: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
    check(vec![x.clone()], move |t, v| t.bce_with_logits(v[0], target.clone()));
    check(vec![x], |t, v| {
        let m = t.mean(v[0]);
        let s = t.sum(v[0]);
        t.mul(m, s)
    });
}

#[test]
fn permute_round_trip_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let p = t.permute(v, &[0, 2, 3, 1]);
    let back = t.permute(p, &[0, 3, 1, 2]);
    assert_eq!(t.value(back), &x);
}
