use docforge::autodiff::{
    grad_check, AttentionBlock, AttentionConfig, Graph, ParameterStore, Tensor, Var,
};
use docforge::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Weighted sum with fixed pseudo-random weights, so every output entry
/// contributes a distinct amount to the scalar.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7316).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

fn check(name: &str, point: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let err = grad_check(f, point, EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn affine_forward_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.affine(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let w3 = g.constant(t(&[2, 2], &[3.0, 0.0, 0.0, 3.0]));
    let b1 = g.constant(t(&[2], &[1.0, 1.0]));
    let y = g.affine(x, w3, b1).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 7.0]);
}

#[test]
fn affine_shape_mismatch_names_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.affine(x, w, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn affine_weight_gradient() {
    let mut r = rng(1);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let w = Tensor::randn(&[4, 5], 1.0, &mut r);
    let b = Tensor::randn(&[5], 1.0, &mut r);
    check("affine wrt W (sum)", &w, |g, wv| {
        let xv = g.constant(x.clone());
        let bv = g.constant(b.clone());
        let y = g.affine(xv, wv, bv)?;
        Ok(g.sum(y))
    });
    check("affine wrt x", &x, |g, xv| {
        let wv = g.constant(w.clone());
        let bv = g.constant(b.clone());
        let y = g.affine(xv, wv, bv)?;
        probe(g, y)
    });
    check("affine wrt b", &b, |g, bv| {
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.affine(xv, wv, bv)?;
        probe(g, y)
    });
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(2);
    let a = Tensor::randn(&[4, 3], 1.0, &mut r);
    let b = Tensor::randn(&[4, 3], 1.0, &mut r);
    let with_b = |op: fn(&mut Graph, Var, Var) -> Result<Var>| {
        let b = b.clone();
        move |g: &mut Graph, x: Var| {
            let bv = g.constant(b.clone());
            let y = op(g, x, bv)?;
            probe(g, y)
        }
    };
    check("add", &a, with_b(|g, x, y| g.add(x, y)));
    check("sub lhs", &a, with_b(|g, x, y| g.sub(x, y)));
    check("sub rhs", &a, with_b(|g, x, y| g.sub(y, x)));
    check("mul", &a, with_b(|g, x, y| g.mul(x, y)));
    // Denominators kept in [1, 3] or [-3, -1].
    let away = |g: &mut Graph, y: Var| -> Result<Var> {
        let s = g.sigmoid(y);
        let s = g.scale(s, 2.0);
        Ok(g.add_scalar(s, 1.0))
    };
    check("div lhs", &a, with_b(|g, x, y| g.div(x, y)));
    check("div rhs", &a, move |g, x| {
        let d = away(g, x)?;
        let n = g.constant(Tensor::full(&[4, 3], -0.8));
        let y = g.div(n, d)?;
        probe(g, y)
    });
    check("minimum lhs", &a, with_b(|g, x, y| g.minimum(x, y)));
    check("minimum rhs", &a, with_b(|g, x, y| g.minimum(y, x)));
    check("scale", &a, |g, x| {
        let y = g.scale(x, -1.7);
        probe(g, y)
    });
    check("add_scalar", &a, |g, x| {
        let y = g.add_scalar(x, 0.3);
        probe(g, y)
    });
    check("relu", &a, |g, x| {
        let y = g.relu(x);
        probe(g, y)
    });
    check("sigmoid", &a, |g, x| {
        let y = g.sigmoid(x);
        probe(g, y)
    });
    check("mean", &a, |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    });
}

#[test]
fn div_values() {
    let mut g = Graph::new();
    let a = g.constant(t(&[3], &[1.0, -6.0, 0.0]));
    let b = g.constant(t(&[3], &[4.0, 3.0, -2.0]));
    let y = g.div(a, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, -2.0, -0.0]);
}

#[test]
fn structural_gradients() {
    let mut r = rng(3);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    check("reshape", &a, |g, x| {
        let y = g.reshape(x, &[6, 4])?;
        let y = g.sigmoid(y);
        probe(g, y)
    });
    check("permute", &a, |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        let y = g.sigmoid(y);
        probe(g, y)
    });
    check("slice_last", &a, |g, x| {
        let y = g.slice_last(x, 1, 2)?;
        probe(g, y)
    });
    let b = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
    check("concat_last", &a, |g, x| {
        let bv = g.constant(b.clone());
        let y = g.concat_last(&[bv, x, bv])?;
        probe(g, y)
    });
    let keep = [true, false, true, true, false, true];
    check("row_mask", &a, |g, x| {
        let y = g.row_mask(x, &keep)?;
        probe(g, y)
    });
    check("masked_mean_pool", &a, |g, x| {
        let y = g.masked_mean_pool(x, &keep)?;
        probe(g, y)
    });
}

#[test]
fn matmul_family_gradients() {
    let mut r = rng(4);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    check("matmul lhs", &a, |g, x| {
        let bv = g.constant(b.clone());
        let y = g.matmul(x, bv)?;
        probe(g, y)
    });
    check("matmul rhs", &b, |g, x| {
        let av = g.constant(a.clone());
        let y = g.matmul(av, x)?;
        probe(g, y)
    });
    let p = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let q = Tensor::randn(&[2, 4, 5], 1.0, &mut r);
    let qt = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
    check("bmm lhs", &p, |g, x| {
        let qv = g.constant(q.clone());
        let y = g.bmm(x, qv, false)?;
        probe(g, y)
    });
    check("bmm rhs", &q, |g, x| {
        let pv = g.constant(p.clone());
        let y = g.bmm(pv, x, false)?;
        probe(g, y)
    });
    check("bmm transposed lhs", &p, |g, x| {
        let qv = g.constant(qt.clone());
        let y = g.bmm(x, qv, true)?;
        probe(g, y)
    });
    check("bmm transposed rhs", &qt, |g, x| {
        let pv = g.constant(p.clone());
        let y = g.bmm(pv, x, true)?;
        probe(g, y)
    });
}

#[test]
fn softmax_values_and_gradients() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    let y = g.softmax(x);
    for v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let mut r = rng(5);
    let a = Tensor::randn(&[5, 7], 3.0, &mut r);
    let y = {
        let x = g.constant(a.clone());
        g.softmax(x)
    };
    for row in g.value(y).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    check("softmax", &a, |g, x| {
        let y = g.softmax(x);
        probe(g, y)
    });
    let keep: Vec<bool> = (0..35).map(|i| i % 3 != 1).collect();
    check("masked_softmax", &a, |g, x| {
        let y = g.masked_softmax(x, &keep)?;
        probe(g, y)
    });
    let x = g.constant(a);
    let y = g.masked_softmax(x, &keep).unwrap();
    for (v, k) in g.value(y).data().iter().zip(&keep) {
        if !k {
            assert_eq!(*v, 0.0);
        }
    }
}

#[test]
fn layer_norm_statistics_and_gradients() {
    let mut r = rng(6);
    let a = Tensor::randn(&[6, 16], 2.0, &mut r);
    let gamma = Tensor::randn(&[16], 1.0, &mut r);
    let beta = Tensor::randn(&[16], 1.0, &mut r);

    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let ones = g.constant(Tensor::full(&[16], 1.0));
    let zeros = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    check("layer_norm x", &a, |g, x| {
        let gv = g.constant(gamma.clone());
        let bv = g.constant(beta.clone());
        let y = g.layer_norm(x, gv, bv, 1e-5)?;
        probe(g, y)
    });
    check("layer_norm gamma", &gamma, |g, gv| {
        let x = g.constant(a.clone());
        let bv = g.constant(beta.clone());
        let y = g.layer_norm(x, gv, bv, 1e-5)?;
        probe(g, y)
    });
    check("layer_norm beta", &beta, |g, bv| {
        let x = g.constant(a.clone());
        let gv = g.constant(gamma.clone());
        let y = g.layer_norm(x, gv, bv, 1e-5)?;
        probe(g, y)
    });
}

#[test]
fn l2_normalize_gradients() {
    let mut r = rng(7);
    let a = Tensor::randn(&[4, 6], 1.0, &mut r);
    check("l2_normalize", &a, |g, x| {
        let y = g.l2_normalize(x);
        probe(g, y)
    });
}

#[test]
fn bce_values_and_gradients() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let l = g.bce_with_logits(z, &[1.0]).unwrap();
    assert!((g.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((g.value(l).item().unwrap() - 0.693147).abs() < 1e-6);

    let logits = t(&[4, 1], &[-3.0, -0.2, 0.5, 40.0]);
    check("bce_with_logits", &logits, |g, z| g.bce_with_logits(z, &[0.0, 1.0, 0.0, 1.0]));
}

/// Direct summation of the supervised contrastive loss.
fn supcon_oracle(z: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (dot(&z[i], &z[a]) / tau).exp()).sum();
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let mut li = 0.0;
        for &p in &positives {
            li += ((dot(&z[i], &z[p]) / tau).exp() / denom).ln();
        }
        total += -li / positives.len() as f64;
    }
    total / n as f64
}

#[test]
fn supcon_matches_direct_summation() {
    // Same-label embeddings identical, different labels orthogonal.
    let e0 = vec![1.0, 0.0, 0.0];
    let e1 = vec![0.0, 1.0, 0.0];
    let z = vec![e0.clone(), e1.clone(), e0.clone(), e1.clone(), e0.clone()];
    let labels = [0, 1, 0, 1, 0];
    let expect = supcon_oracle(&z, &labels, 1.0);

    let mut g = Graph::new();
    let flat: Vec<f64> = z.concat();
    let zv = g.constant(t(&[5, 3], &flat));
    let l = g.supcon_loss(zv, &labels, 1.0).unwrap();
    assert!((g.value(l).item().unwrap() - expect).abs() < 1e-12);

    let mut r = rng(8);
    let random = Tensor::randn(&[6, 4], 1.0, &mut r);
    let rows: Vec<Vec<f64>> = random.data().chunks(4).map(<[f64]>::to_vec).collect();
    let labels = [0, 1, 1, 0, 1, 0];
    let mut g = Graph::new();
    let zv = g.constant(random.clone());
    let l = g.supcon_loss(zv, &labels, 0.5).unwrap();
    assert!((g.value(l).item().unwrap() - supcon_oracle(&rows, &labels, 0.5)).abs() < 1e-12);
}

#[test]
fn supcon_gradients_on_normalized_batch() {
    let mut r = rng(9);
    let raw = Tensor::randn(&[6, 5], 1.0, &mut r);
    let labels = [0, 0, 1, 1, 0, 1];
    check("supcon_loss", &raw, |g, x| {
        let z = g.l2_normalize(x);
        g.supcon_loss(z, &labels, 0.1)
    });
}

#[test]
fn supcon_rejects_singleton_label() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.supcon_loss(z, &[0, 0, 1], 0.1).unwrap_err();
    assert!(matches!(err, docforge::Error::Usage(_)));
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(10);
    let x = Tensor::randn(&[2, 2, 7, 6], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
    let b = Tensor::randn(&[3], 0.5, &mut r);
    check("conv2d x", &x, |g, xv| {
        let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1)?;
        probe(g, y)
    });
    check("conv2d w", &w, |g, wv| {
        let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1)?;
        probe(g, y)
    });
    check("conv2d b", &b, |g, bv| {
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, bv, 1, 0)?;
        probe(g, y)
    });
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut r = rng(11);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut r);
    let b = t(&[2], &[0.5, -0.25]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 3, 3]);
    let at = |c: usize, i: isize, j: isize| {
        if i < 0 || j < 0 || i >= 5 || j >= 5 {
            0.0
        } else {
            x.data()[(c * 5 + i as usize) * 5 + j as usize]
        }
    };
    for o in 0..2 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = b.data()[o];
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let wv = w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                            s += wv * at(c, (oy * 2 + ki) as isize - 1, (ox * 2 + kj) as isize - 1);
                        }
                    }
                }
                let got = g.value(y).data()[(o * 3 + oy) * 3 + ox];
                assert!((got - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn self_attention_gradients() {
    let mut store = ParameterStore::new();
    let mut r = rng(12);
    let cfg = AttentionConfig {
        dim: 8,
        heads: 2,
        ff_hidden: 16,
    };
    let block = AttentionBlock::new(&mut store, &mut r, "attn", cfg).unwrap();
    let x = Tensor::randn(&[2, 3, 8], 1.0, &mut r);
    check("self_attention x", &x, |g, xv| {
        let p = store.bind(g, false);
        let y = block.forward(g, &p, xv, None)?;
        probe(g, y)
    });
    let keep = [true, true, false, true, true, true];
    check("masked self_attention x", &x, |g, xv| {
        let p = store.bind(g, false);
        let y = block.forward(g, &p, xv, Some(&keep))?;
        probe(g, y)
    });
    let (err, name) = docforge::autodiff::grad_check_store(
        &store,
        |g, p| {
            let xv = g.constant(x.clone());
            let y = block.forward(g, p, xv, Some(&keep))?;
            probe(g, y)
        },
        EPS,
        12,
    )
    .unwrap();
    assert!(err < TOL, "attention parameter {name}: {err}");
}

#[test]
fn masked_slots_receive_no_gradient() {
    let mut store = ParameterStore::new();
    let mut r = rng(13);
    let cfg = AttentionConfig {
        dim: 4,
        heads: 2,
        ff_hidden: 8,
    };
    let block = AttentionBlock::new(&mut store, &mut r, "attn", cfg).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.leaf(Tensor::randn(&[1, 3, 4], 1.0, &mut r));
    let keep = [true, false, true];
    let y = block.forward(&mut g, &p, x, Some(&keep)).unwrap();
    let l = probe(&mut g, y).unwrap();
    let grads = g.backward(l).unwrap();
    let gx = grads.get(x).unwrap();
    assert!(gx.data()[4..8].iter().all(|&v| v == 0.0));
    assert!(gx.data()[..4].iter().any(|&v| v != 0.0));
}

#[test]
fn shared_subexpressions_accumulate() {
    // f(x) = sum(s * s) with s = sigmoid(x) used twice, against the same
    // function with the subgraph duplicated.
    let mut r = rng(14);
    let a = Tensor::randn(&[5], 1.0, &mut r);

    let mut g = Graph::new();
    let x = g.leaf(a.clone());
    let s = g.sigmoid(x);
    let sq = g.mul(s, s).unwrap();
    let l = g.sum(sq);
    let shared = g.backward(l).unwrap().get(x).unwrap();

    let mut g = Graph::new();
    let x = g.leaf(a.clone());
    let s1 = g.sigmoid(x);
    let s2 = g.sigmoid(x);
    let sq = g.mul(s1, s2).unwrap();
    let l = g.sum(sq);
    let duplicated = g.backward(l).unwrap().get(x).unwrap();

    for ((u, v), xi) in shared.data().iter().zip(duplicated.data()).zip(a.data()) {
        let s = 1.0 / (1.0 + (-xi).exp());
        assert!((u - v).abs() < 1e-15);
        assert!((u - 2.0 * s * s * (1.0 - s)).abs() < 1e-12);
    }
}

#[test]
fn grad_check_sum_of_squares() {
    let point = t(&[3], &[1.0, 2.0, 3.0]);
    let mut g = Graph::new();
    let x = g.leaf(point.clone());
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &point,
        EPS,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_non_scalar() {
    let point = t(&[2], &[1.0, 2.0]);
    let err = grad_check(|g, x| Ok(g.relu(x)), &point, EPS).unwrap_err();
    assert!(matches!(err, docforge::Error::Usage(_)));
}
