use gunsight_autograd::gradcheck::{check_gradients, max_rel_error};
use gunsight_autograd::{Graph, Params, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reduce an arbitrary node to a scalar with fixed random weights so every
/// output element contributes a distinct adjoint.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(v), 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(v, w);
    g.sum(prod)
}

fn check(params: Params, build: impl Fn(&mut Graph, &gunsight_autograd::Bound) -> Var) {
    let loss_of = |p: &Params| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let out = build(&mut g, &b);
        let l = weighted_sum(&mut g, out, 99);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = build(&mut g, &b);
    let l = weighted_sum(&mut g, out, 99);
    let grads = b.grads(&g.backward(l));
    let samples = check_gradients(&params, &grads, 40, 5, 1e-6, |_| true, loss_of);
    let err = max_rel_error(&samples);
    assert!(err < 1e-5, "max relative error {err}: {samples:?}");
}

fn rand_params(shapes: &[(&str, &[usize])], seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(n, s)| (n.to_string(), Tensor::randn(s, 1.0, &mut rng)))
        .collect()
}

#[test]
fn elementwise_ops() {
    let p = rand_params(&[("a", &[3, 4]), ("b", &[3, 4])], 1);
    check(p.clone(), |g, b| {
        let s = g.add(b.var("a"), b.var("b"));
        let d = g.sub(s, b.var("b"));
        let m = g.mul(d, b.var("b"));
        let sc = g.scale(m, 0.7);
        g.add_scalar(sc, 2.0)
    });
    check(p.clone(), |g, b| {
        let t = g.tanh(b.var("a"));
        let s = g.sigmoid(b.var("b"));
        let denom = g.add_scalar(s, 0.5);
        g.div(t, denom)
    });
    check(p.clone(), |g, b| {
        let lo = g.minimum(b.var("a"), b.var("b"));
        let hi = g.maximum(b.var("a"), b.var("b"));
        let r = g.relu(lo);
        g.add(r, hi)
    });
}

#[test]
fn matrix_ops() {
    let p = rand_params(&[("x", &[3, 4]), ("w", &[4, 5]), ("b", &[5]), ("s", &[5])], 2);
    check(p, |g, b| {
        let y = g.linear(b.var("x"), b.var("w"), b.var("b"));
        let y = g.mul_row(y, b.var("s"));
        let t = g.transpose(y);
        let sm = g.softmax_rows(t);
        let ln = g.layer_norm_rows(y, 1e-5);
        let th = g.tanh(ln);
        let m = g.mean_rows(th);
        let flat = g.reshape(sm, &[15]);
        let picked = g.gather(flat, vec![0, 3, 3, 14]);
        let pm = g.mean(picked);
        let ms = g.sum(m);
        g.add(pm, ms)
    });
}

#[test]
fn slicing_and_concatenation() {
    let p = rand_params(&[("a", &[2, 6]), ("b", &[2, 3]), ("c", &[4, 2, 2])], 3);
    check(p, |g, b| {
        let left = g.slice_cols(b.var("a"), 1, 3);
        let cat = g.concat_cols(&[left, b.var("b"), left]);
        let rows = g.concat_rows(&[cat, cat]);
        let r = g.slice_rows(rows, 1, 2);
        let c = g.slice_rows(b.var("c"), 2, 2);
        let cr = g.reshape(c, &[2, 4]);
        let both = g.concat_cols(&[r, cr]);
        g.tanh(both)
    });
}

#[test]
fn losses() {
    let p = rand_params(&[("z", &[4, 3])], 4);
    check(p.clone(), |g, b| {
        let l = g.cross_entropy(b.var("z"), &[0, 2, 1, 2]);
        g.scale(l, 1.0)
    });
    check(p, |g, b| {
        let t = Tensor::new(vec![4, 3], (0..12).map(|i| (i % 2) as f64).collect());
        let w = Tensor::new(vec![4, 3], (0..12).map(|i| 0.5 + i as f64 * 0.1).collect());
        g.bce_with_logits(b.var("z"), t, w)
    });
}

#[test]
fn convolution_and_pooling() {
    let p = rand_params(
        &[("x", &[2, 3, 8, 8]), ("w", &[4, 3, 3, 3]), ("b", &[4]), ("w2", &[2, 4, 3, 3]), ("b2", &[2])],
        5,
    );
    check(p, |g, b| {
        let c = g.conv2d(b.var("x"), b.var("w"), b.var("b"), 1, 1);
        let r = g.tanh(c);
        let pooled = g.max_pool2d(r, 2);
        let c2 = g.conv2d(pooled, b.var("w2"), b.var("b2"), 2, 1);
        g.global_avg_pool(c2)
    });
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let bias = Tensor::randn(&[3], 1.0, &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
    let y = g.conv2d(xv, wv, bv, 2, 1);
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 3, 3, 3]);
    for o in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = bias.data()[o];
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += x.data()[(c * 5 + iy as usize) * 5 + ix as usize]
                                    * w.data()[((o * 2 + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                let got = out.data()[(o * 3 + oy) * 3 + ox];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    let p = g.param(Tensor::ones(&[2]));
    let m = g.mul(c, p);
    let l = g.sum(m);
    let grads = g.backward(l);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
}
