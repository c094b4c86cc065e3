use ebmdmo_autograd::nn::{Conv2d, Mlp, TransformerEncoder};
use ebmdmo_autograd::{finite_difference, relative_error, ParamStore, Pinhole, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks the tape gradient of `build` against central differences for
/// every input element.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let idx: Vec<usize> = (0..input.len()).collect();
        let numeric = finite_difference(input.data(), &idx, 1e-6, |x| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == k {
                        t.input(Tensor::from_vec(inp.shape(), x.to_vec()))
                    } else {
                        t.input(inp.clone())
                    }
                })
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        });
        for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let err = relative_error(a, n, 1e-3);
            assert!(err < 1e-5, "input {k} elem {i}: analytic {a} numeric {n}");
        }
    }
}

/// Weighted sum so every output element affects the loss differently.
fn weighted(tape: &mut Tape<f64>, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect());
    let w = tape.constant(w);
    let p = tape.mul(x, w);
    tape.sum(p)
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&[3, 4], &mut rng), random(&[4, 5], &mut rng)], |t, v| {
        let y = t.matmul(v[0], v[1]);
        weighted(t, y)
    });
    check(vec![random(&[3, 4], &mut rng), random(&[2, 4], &mut rng)], |t, v| {
        let y = t.matmul_nt(v[0], v[1]);
        weighted(t, y)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos = random(&[2, 3], &mut rng).map(|x| x.abs() + 0.5);
    check(vec![random(&[2, 3], &mut rng), pos.clone()], |t, v| {
        let a = t.silu(v[0]);
        let b = t.tanh(v[0]);
        let c = t.exp(v[0]);
        let d = t.ln(v[1]);
        let e = t.sqrt(v[1]);
        let f = t.mul(a, d);
        let g = t.sub(b, e);
        let h = t.add(f, g);
        let h = t.add(h, c);
        let h = t.scale(h, 0.7);
        let h = t.add_scalar(h, 0.3);
        weighted(t, h)
    });
}

#[test]
fn reductions_softmax_layernorm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    check(
        vec![random(&[4, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        |t, v| {
            let s = t.softmax_rows(v[0]);
            let l = t.layer_norm(v[0], v[1], v[2]);
            let l = t.add(l, s);
            let m = t.mean_rows(l);
            let a = weighted(t, m);
            let b = t.mean(v[0]);
            let c = t.logsumexp(v[0]);
            let d = t.index(v[0], 5);
            let x = t.add(a, b);
            let x = t.add(x, c);
            t.add(x, d)
        },
    );
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(vec![random(&[3, 2], &mut rng), random(&[3, 4], &mut rng), random(&[4], &mut rng)], |t, v| {
        let c = t.concat_cols(&[v[0], v[1]]);
        let s = t.slice_cols(c, 1, 3);
        let r = t.slice_rows(c, 1, 2);
        let tr = t.transpose(s);
        let rs = t.reshape(tr, &[9]);
        let rs = t.reshape(rs, &[3, 3]);
        let b = t.add_bias(v[1], v[2]);
        let cat = t.concat(&[r, c]);
        let x = weighted(t, rs);
        let y = weighted(t, b);
        let z = weighted(t, cat);
        let w = t.add(x, y);
        t.add(w, z)
    });
}

#[test]
fn convolution_pooling_upsampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(
        vec![random(&[2, 4, 4], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)],
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]);
            let p = t.avg_pool(y, 2);
            let u = t.upsample2(p);
            let g = t.global_avg_pool(y);
            let a = weighted(t, u);
            let b = weighted(t, g);
            t.add(a, b)
        },
    );
    check(
        vec![random(&[3, 2, 2], &mut rng), random(&[2, 3, 1, 1], &mut rng), random(&[2], &mut rng)],
        |t, v| {
            let y = t.conv2d(v[0], v[1], v[2]);
            weighted(t, y)
        },
    );
}

#[test]
fn bilinear_sampling_and_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Interior, non-integer coordinates keep the sampler differentiable.
    let pts = Tensor::from_f64(&[3, 2], &[1.3, 2.6, 0.4, 0.7, 3.2, 1.9]);
    check(vec![random(&[2, 5, 5], &mut rng), pts], |t, v| {
        let s = t.bilinear_sample(v[0], v[1]);
        weighted(t, s)
    });
    let xyz = Tensor::from_f64(&[2, 3], &[0.1, -0.2, 1.5, -0.3, 0.25, 0.9]);
    let cam = Pinhole { fx: 40.0, fy: 38.0, cx: 16.0, cy: 15.0 };
    check(vec![xyz], |t, v| {
        let u = t.project(v[0], cam);
        weighted(t, u)
    });
}

#[test]
fn composite_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 4], false, &mut rng);
    let tr = TransformerEncoder::new(&mut store, "tr", 4, 2, 1, 6, &mut rng);
    let conv = Conv2d::new(&mut store, "conv", 1, 2, 3, &mut rng);
    let x = random(&[5, 3], &mut rng);
    let img = random(&[1, 4, 4], &mut rng);
    let build = |store: &ParamStore<f64>| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, true);
        let xv = t.constant(x.clone());
        let iv = t.constant(img.clone());
        let h = mlp.forward(&mut t, &p, xv);
        let y = tr.forward(&mut t, &p, h);
        let c = conv.forward(&mut t, &p, iv);
        let a = weighted(&mut t, y);
        let b = weighted(&mut t, c);
        let l = t.add(a, b);
        (t, p, l)
    };
    let (t, p, l) = build(&store);
    let grads = t.backward(l);
    let analytic = p.collect(&t, &grads);
    for k in 0..store.len() {
        let id = ebmdmo_autograd::ParamId(k);
        let base = store.get(id).clone();
        let idx: Vec<usize> = (0..base.len()).collect();
        let numeric = finite_difference(base.data(), &idx, 1e-6, |v| {
            let mut s = store.clone();
            *s.get_mut(id) = Tensor::from_vec(base.shape(), v.to_vec());
            let (t, _, l) = build(&s);
            t.value(l).item()
        });
        for (&a, &n) in analytic[k].data().iter().zip(&numeric) {
            assert!(relative_error(a, n, 1e-3) < 1e-5, "{}: {a} vs {n}", store.name(id));
        }
    }
}

#[test]
fn bilinear_matches_corner_oracle_and_clamps() {
    let f: Tensor<f64> = Tensor::from_f64(&[1, 2, 2], &[0.0, 0.0, 1.0, 1.0]);
    let mut t = Tape::new();
    let fv = t.constant(f);
    let p = t.constant(Tensor::from_f64(&[3, 2], &[0.5, 0.5, -3.0, 0.0, 9.0, 9.0]));
    let s = t.bilinear_sample(fv, p);
    assert_eq!(t.value(s).data(), &[0.5, 0.0, 1.0]);
}
