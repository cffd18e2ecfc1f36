//! Gradient checks: every differentiable operation against central finite
//! differences (64-bit, h = 1e-5, worst relative error ≤ 1e-4), plus the
//! forward-value fixtures the operations are contracted to.

use minimt::error::{Error, Result};
use minimt::rng::Rng;
use minimt::tensor::gradcheck::{finite_difference_gradient, max_relative_error};
use minimt::tensor::{Graph, Tensor, Var};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Check one op: build a scalar loss from differentiable inputs, compare the
/// reverse-mode gradient of every input against finite differences.
fn check_grads(
    name: &str,
    params: &[Tensor<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let loss = build(&mut g, &vars).expect("forward");
    g.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad_tensor(v).expect("missing grad")).collect();

    for (pi, p) in params.iter().enumerate() {
        let fd = finite_difference_gradient(
            &mut |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, q)| g.input(if i == pi { probe.clone() } else { q.clone() }))
                    .collect();
                let loss = build(&mut g, &vars)?;
                g.value(loss).item()
            },
            p,
            H,
        )
        .expect("finite differences");
        let err = max_relative_error(analytic[pi].data(), fd.data());
        assert!(err <= TOL, "{name}: input {pi} rel error {err:.3e} exceeds {TOL:.0e}");
        assert!(analytic[pi].all_finite(), "{name}: non-finite analytic gradient");
    }
}

/// Weighted sum against a fixed random tensor, so uniform output weighting
/// cannot mask transposed or permuted adjoints.
fn weighted_sum(g: &mut Graph<f64>, x: Var, rng: &mut Rng) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, rng));
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn t(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

// ── Per-operation gradient checks ──────────────────────────────────────

#[test]
fn grad_add_sub_mul() {
    let mut rng = Rng::seed_from(1);
    let a = t(&[3, 4], &mut rng);
    let b = t(&[3, 4], &mut rng);
    check_grads("add", &[a.clone(), b.clone()], |g, v| {
        let mut r = Rng::seed_from(10);
        let s = g.add(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });
    check_grads("sub", &[a.clone(), b.clone()], |g, v| {
        let mut r = Rng::seed_from(11);
        let s = g.sub(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });
    check_grads("mul", &[a, b], |g, v| {
        let mut r = Rng::seed_from(12);
        let s = g.mul(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_affine_and_scale() {
    let mut rng = Rng::seed_from(2);
    let a = t(&[5], &mut rng);
    check_grads("affine", &[a], |g, v| {
        let mut r = Rng::seed_from(13);
        let s = g.affine(v[0], -1.7, 0.4)?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_bias_forms() {
    let mut rng = Rng::seed_from(3);
    let x = t(&[4, 6], &mut rng);
    let b = t(&[6], &mut rng);
    check_grads("add_bias", &[x, b], |g, v| {
        let mut r = Rng::seed_from(14);
        let s = g.add_bias(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });

    let x3 = t(&[2, 5, 3], &mut rng);
    let v2 = t(&[2, 3], &mut rng);
    check_grads("add_per_batch", &[x3, v2], |g, v| {
        let mut r = Rng::seed_from(15);
        let s = g.add_per_batch(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_matmul_family() {
    let mut rng = Rng::seed_from(4);
    let a = t(&[3, 4], &mut rng);
    let b = t(&[4, 2], &mut rng);
    check_grads("matmul", &[a, b], |g, v| {
        let mut r = Rng::seed_from(16);
        let s = g.matmul(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });

    let a = t(&[3, 4], &mut rng);
    let b = t(&[5, 4], &mut rng);
    check_grads("matmul_nt", &[a, b], |g, v| {
        let mut r = Rng::seed_from(17);
        let s = g.matmul_nt(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });

    let a = t(&[2, 3, 4], &mut rng);
    let b = t(&[2, 4, 5], &mut rng);
    check_grads("bmm", &[a, b], |g, v| {
        let mut r = Rng::seed_from(18);
        let s = g.bmm(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });

    let a = t(&[2, 3, 4], &mut rng);
    let b = t(&[2, 5, 4], &mut rng);
    check_grads("bmm_nt", &[a, b], |g, v| {
        let mut r = Rng::seed_from(19);
        let s = g.bmm_nt(v[0], v[1])?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_nonlinearities() {
    let mut rng = Rng::seed_from(5);
    let x = t(&[3, 5], &mut rng);
    for (name, f) in [
        ("tanh", 0usize),
        ("sigmoid", 1),
        ("relu", 2),
    ] {
        // Keep relu inputs away from the kink, where finite differences
        // are meaningless.
        let input = if name == "relu" {
            let mut v = x.clone();
            for d in v.data_mut() {
                *d = d.signum() * (d.abs() + 0.2);
            }
            v
        } else {
            x.clone()
        };
        check_grads(name, &[input], move |g, v| {
            let mut r = Rng::seed_from(20 + f as u64);
            let s = match f {
                0 => g.tanh(v[0])?,
                1 => g.sigmoid(v[0])?,
                _ => g.relu(v[0])?,
            };
            weighted_sum(g, s, &mut r)
        });
    }
}

#[test]
fn grad_softmax_all_axes() {
    let mut rng = Rng::seed_from(6);
    let x = t(&[2, 3, 4], &mut rng);
    for axis in 0..3 {
        check_grads("softmax", &[x.clone()], move |g, v| {
            let mut r = Rng::seed_from(23 + axis as u64);
            let s = g.softmax(v[0], axis)?;
            weighted_sum(g, s, &mut r)
        });
    }
}

#[test]
fn grad_layer_norm() {
    let mut rng = Rng::seed_from(7);
    let x = t(&[4, 6], &mut rng);
    let gain = t(&[6], &mut rng);
    let bias = t(&[6], &mut rng);
    check_grads("layer_norm", &[x, gain, bias], |g, v| {
        let mut r = Rng::seed_from(26);
        let s = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_embedding_scatters_adds() {
    let mut rng = Rng::seed_from(8);
    let table = t(&[7, 4], &mut rng);
    // Repeated ids force the adjoint to accumulate, not overwrite.
    let ids = [3u32, 0, 3, 6, 3];
    check_grads("embedding", &[table], move |g, v| {
        let mut r = Rng::seed_from(27);
        let s = g.embedding(v[0], &ids, &[ids.len()])?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_structural_ops() {
    let mut rng = Rng::seed_from(9);
    let a = t(&[2, 3, 4], &mut rng);
    let b = t(&[2, 2, 4], &mut rng);
    check_grads("concat", &[a.clone(), b], |g, v| {
        let mut r = Rng::seed_from(28);
        let s = g.concat(&[v[0], v[1]], 1)?;
        weighted_sum(g, s, &mut r)
    });
    check_grads("slice", &[a.clone()], |g, v| {
        let mut r = Rng::seed_from(29);
        let s = g.slice(v[0], 2, 1, 2)?;
        weighted_sum(g, s, &mut r)
    });
    check_grads("reshape", &[a.clone()], |g, v| {
        let mut r = Rng::seed_from(30);
        let s = g.reshape(v[0], &[6, 4])?;
        weighted_sum(g, s, &mut r)
    });
    let m = t(&[3, 5], &mut rng);
    check_grads("transpose", &[m], |g, v| {
        let mut r = Rng::seed_from(31);
        let s = g.transpose(v[0])?;
        weighted_sum(g, s, &mut r)
    });
    check_grads("mean", &[a], |g, v| g.mean(v[0]));
}

#[test]
fn grad_dropout_with_frozen_mask() {
    let mut rng = Rng::seed_from(40);
    let x = t(&[4, 5], &mut rng);
    // The mask must be identical across re-evaluations, so every graph
    // construction replays the same generator state.
    check_grads("dropout", &[x], |g, v| {
        let mut mask_rng = Rng::seed_from(41);
        let mut r = Rng::seed_from(42);
        let s = g.dropout(v[0], 0.4, true, &mut mask_rng)?;
        weighted_sum(g, s, &mut r)
    });
}

#[test]
fn grad_cross_entropy_matches_finite_differences() {
    let mut rng = Rng::seed_from(43);
    let logits = t(&[5, 7], &mut rng);
    let targets = [2u32, 0, 6, 0, 3]; // two PAD rows (pad id 0)
    check_grads("cross_entropy", &[logits], move |g, v| {
        g.cross_entropy(v[0], &targets, 0)
    });
}

#[test]
fn grad_random_composites() {
    // Three random multi-op compositions; finite differences are the oracle.
    let mut rng = Rng::seed_from(44);
    let a = t(&[3, 4], &mut rng);
    let w = t(&[4, 4], &mut rng);
    let gain = t(&[4], &mut rng);
    let bias = t(&[4], &mut rng);
    check_grads("composite-1", &[a.clone(), w.clone(), gain, bias], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.tanh(h)?;
        let h = g.layer_norm(h, v[2], v[3], 1e-6)?;
        let s = g.softmax(h, 1)?;
        let mut r = Rng::seed_from(45);
        weighted_sum(g, s, &mut r)
    });

    let table = t(&[6, 4], &mut rng);
    let proj = t(&[4, 6], &mut rng);
    check_grads("composite-2", &[table, proj], |g, v| {
        let e = g.embedding(v[0], &[1, 4, 2], &[3])?;
        let h = g.matmul(e, v[1])?;
        g.cross_entropy(h, &[4, 2, 5], 0)
    });

    let x = t(&[2, 3, 4], &mut rng);
    let y = t(&[2, 5, 4], &mut rng);
    check_grads("composite-3", &[x, y], |g, v| {
        let scores = g.bmm_nt(v[0], v[1])?;
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, v[1])?;
        let sig = g.sigmoid(ctx)?;
        let mut r = Rng::seed_from(46);
        weighted_sum(g, sig, &mut r)
    });
}

// ── Forward-value fixtures ─────────────────────────────────────────────

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f64>::new();
    let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let m = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
    let out = g.matmul(i, m).unwrap();
    assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
    let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
    let dot = g.matmul(a, b).unwrap();
    assert_eq!(g.value(dot).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    match g.matmul(a, b) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_and_extreme() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    let out = g.value(s).data();
    assert!((out[0] - 1.0).abs() < 1e-12);
    assert!(out[1].abs() < 1e-12 && out[2].abs() < 1e-12);
    assert!(g.value(s).all_finite());
}

#[test]
fn softmax_matches_extended_precision_oracle() {
    // f32 softmax of [1,2,3] against the same quantity computed in f64.
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x, 0).unwrap();
    let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|&v| v.exp()).collect();
    let z: f64 = exps.iter().sum();
    for (got, want) in g.value(s).data().iter().zip(&exps) {
        assert!((f64::from(*got) - want / z).abs() < 1e-7);
    }
}

#[test]
fn softmax_sums_to_one_for_wild_inputs() {
    let mut rng = Rng::seed_from(50);
    for _ in 0..50 {
        let mut x = Tensor::<f32>::uniform(&[4, 7], -1.0, 1.0, &mut rng);
        for v in x.data_mut() {
            *v *= 1000.0;
        }
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let s = g.softmax(xv, 1).unwrap();
        for row in g.value(s).data().chunks(7) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "sum {sum}");
        }
    }
}

#[test]
fn layer_norm_fixtures() {
    let mut g = Graph::<f64>::new();
    let ones = g.constant(Tensor::full(&[3], 1.0));
    let zeros = g.constant(Tensor::zeros(&[3]));

    // Constant row collapses to the bias.
    let x = g.constant(Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap());
    let out = g.layer_norm(x, ones, zeros, 1e-8).unwrap();
    for &v in g.value(out).data() {
        assert!(v.abs() < 1e-3);
    }

    // Already-normalized row is a fixpoint as epsilon → 0.
    let ones2 = g.constant(Tensor::full(&[2], 1.0));
    let zeros2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let out = g.layer_norm(x, ones2, zeros2, 1e-12).unwrap();
    let got = g.value(out).data();
    assert!((got[0] - 1.0).abs() < 1e-6 && (got[1] + 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_statistics_on_random_rows() {
    let mut rng = Rng::seed_from(51);
    let x = Tensor::<f64>::uniform(&[8, 32], -3.0, 3.0, &mut rng);
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[32], 1.0));
    let zeros = g.constant(Tensor::zeros(&[32]));
    let xv = g.constant(x);
    let out = g.layer_norm(xv, ones, zeros, 1e-8).unwrap();
    for row in g.value(out).data().chunks(32) {
        let mean: f64 = row.iter().sum::<f64>() / 32.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-6, "row mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "row variance {var}");
    }
}

#[test]
fn backward_square_and_matmul_sum() {
    // loss = x² at x = 3 → grad 6.
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert!((g.grad(x).unwrap()[0] - 6.0).abs() < 1e-12);

    // loss = sum(A·B) → dA = ones · Bᵀ.
    let mut rng = Rng::seed_from(52);
    let a_t = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let b_t = Tensor::<f64>::uniform(&[4, 2], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let a = g.input(a_t);
    let b = g.constant(b_t.clone());
    let prod = g.matmul(a, b).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let da = g.grad(a).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let want: f64 = (0..2).map(|j| b_t.data()[k * 2 + j]).sum();
            assert!((da[i * 4 + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_contract_violations() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    let y = g.tanh(x).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));

    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::scalar(1.0));
    let y = g.mul(x, x).unwrap();
    let loss = g.sum(y).unwrap();
    g.backward(loss).unwrap();
    assert!(matches!(g.backward(loss), Err(Error::State(_))));
}

#[test]
fn finite_difference_oracle_basics() {
    // f = sum → all ones.
    let x = Tensor::<f64>::new(vec![4], vec![0.3, -0.7, 2.0, 1.1]).unwrap();
    let fd = finite_difference_gradient(&mut |t| Ok(t.data().iter().sum()), &x, H).unwrap();
    for &v in fd.data() {
        assert!((v - 1.0).abs() < 1e-8);
    }

    // f = x², x = 3, h = 1e-4 → 6 within 1e-6.
    let x = Tensor::<f64>::scalar(3.0);
    let fd = finite_difference_gradient(&mut |t| Ok(t.data()[0].powi(2)), &x, 1e-4).unwrap();
    assert!((fd.data()[0] - 6.0).abs() < 1e-6);
}

#[test]
fn every_op_kind_in_one_graph_yields_finite_grads() {
    let mut rng = Rng::seed_from(53);
    let table = Tensor::<f64>::uniform(&[6, 4], -0.5, 0.5, &mut rng);
    let w = Tensor::<f64>::uniform(&[4, 4], -0.5, 0.5, &mut rng);
    let gain = Tensor::<f64>::full(&[4], 1.0);
    let bias = Tensor::<f64>::zeros(&[4]);
    let bias_row = Tensor::<f64>::uniform(&[4], -0.5, 0.5, &mut rng);

    let mut g = Graph::new();
    let tv = g.input(table);
    let wv = g.input(w);
    let gv = g.input(gain);
    let bv = g.input(bias);
    let brv = g.input(bias_row);

    let e = g.embedding(tv, &[0, 2, 4, 1, 5, 3], &[6]).unwrap();
    let h = g.matmul(e, wv).unwrap();
    let h = g.add_bias(h, brv).unwrap();
    let h = g.layer_norm(h, gv, bv, 1e-6).unwrap();
    let a = g.tanh(h).unwrap();
    let b = g.sigmoid(a).unwrap();
    let c = g.relu(b).unwrap();
    let d = g.mul(a, c).unwrap();
    let s = g.sub(d, b).unwrap();
    let s = g.affine(s, 0.5, 0.1).unwrap();
    let mut drop_rng = Rng::seed_from(54);
    let s = g.dropout(s, 0.3, true, &mut drop_rng).unwrap();
    let r3 = g.reshape(s, &[2, 3, 4]).unwrap();
    let left = g.slice(r3, 1, 0, 2).unwrap();
    let right = g.slice(r3, 1, 2, 1).unwrap();
    let cat = g.concat(&[left, right], 1).unwrap();
    let sc = g.bmm_nt(cat, cat).unwrap();
    let sm = g.softmax(sc, 2).unwrap();
    let ctx = g.bmm(sm, cat).unwrap();
    let flat = g.reshape(ctx, &[6, 4]).unwrap();
    let tp = g.transpose(flat).unwrap();
    let back = g.transpose(tp).unwrap();
    let logits = g.matmul_nt(back, tv).unwrap();
    let loss = g.cross_entropy(logits, &[1, 2, 3, 4, 5, 1], 0).unwrap();
    g.backward(loss).unwrap();

    for v in [tv, wv, gv, bv, brv] {
        let grad = g.grad_tensor(v).expect("grad populated");
        assert!(grad.all_finite(), "non-finite gradient");
    }
}
