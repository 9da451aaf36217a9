use rand::Rng;

use super::*;
use crate::testutil::*;
use crate::error::Error;





fn params(entries: Vec<(&str, T64)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t).unwrap();
    }
    p
}

// -- independent naive references -------------------------------------------



fn naive_layer_norm(row: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn naive_affine(x: &[Vec<f64>], w: &T64, b: &T64) -> Vec<Vec<f64>> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..cout)
                .map(|o| b.data()[o] + (0..cin).map(|i| row[i] * w.data()[i * cout + o]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn naive_attention_block(x: &T64, p: &ParamSet<f64>, pre: &str) -> Vec<Vec<f64>> {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let get = |n: &str| p.get(&format!("{pre}.{n}")).unwrap().clone();
    let rows: Vec<Vec<f64>> = (0..l).map(|i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
    let ln = |rs: &[Vec<f64>], name: &str| -> Vec<Vec<f64>> {
        let (gn, bn) = (get(&format!("{name}.gain")), get(&format!("{name}.bias")));
        rs.iter().map(|r| naive_layer_norm(r, gn.data(), bn.data())).collect()
    };
    let xn = ln(&rows, "ln1");
    let q = naive_affine(&xn, &get("attn.q.w"), &get("attn.q.b"));
    let k = naive_affine(&xn, &get("attn.k.w"), &get("attn.k.b"));
    let v = naive_affine(&xn, &get("attn.v.w"), &get("attn.v.b"));
    let mut mixed = vec![vec![0.0; d]; l];
    for i in 0..l {
        let s: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..l {
            for c in 0..d {
                mixed[i][c] += e[j] / z * v[j][c];
            }
        }
    }
    let attn = naive_affine(&mixed, &get("attn.o.w"), &get("attn.o.b"));
    let y: Vec<Vec<f64>> = rows.iter().zip(&attn).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let yn = ln(&y, "ln2");
    let hidden: Vec<Vec<f64>> = naive_affine(&yn, &get("mlp.fc1.w"), &get("mlp.fc1.b"))
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    let mlp = naive_affine(&hidden, &get("mlp.fc2.w"), &get("mlp.fc2.b"));
    y.iter().zip(&mlp).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}


// -- forward contracts --------------------------------------------------------

#[test]
fn conv_identity_kernel_returns_input() {
    let mut r = rng(1);
    let x = randn([5, 6, 3], &mut r);
    let mut k = T64::zeros([1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    let g = Graph::no_grad();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k), g.constant(T64::zeros([3])));
    let y = g.conv2d(xv, kv, bv, 0, 1).unwrap();
    assert_eq!(*g.value(y), x);
}

#[test]
fn conv_zero_input_yields_bias() {
    let mut r = rng(2);
    let b = randn([4], &mut r);
    let g = Graph::no_grad();
    let y = g
        .conv2d(
            g.constant(T64::zeros([6, 6, 2])),
            g.constant(randn([3, 3, 2, 4], &mut r)),
            g.constant(b.clone()),
            1,
            1,
        )
        .unwrap();
    for px in g.value(y).data().chunks(4) {
        assert_eq!(px, b.data());
    }
}

#[test]
fn conv_output_extents() {
    let g = Graph::<f64>::no_grad();
    let y = g
        .conv2d(
            g.constant(T64::zeros([9, 7, 1])),
            g.constant(T64::zeros([3, 3, 1, 2])),
            g.constant(T64::zeros([2])),
            1,
            2,
        )
        .unwrap();
    // floor((9 + 2 - 3) / 2) + 1 = 5, floor((7 + 2 - 3) / 2) + 1 = 4
    assert_eq!(g.shape(y), vec![5, 4, 2]);
}

#[test]
fn conv_matches_naive_loops_over_100_seeds() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let h = r.random_range(1..=8);
        let w = r.random_range(1..=8);
        let cin = r.random_range(1..=3);
        let cout = r.random_range(1..=4);
        let k = [1, 3, 5][r.random_range(0..3)];
        let pad = r.random_range(0..=k / 2 + 1);
        let stride = r.random_range(1..=2);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let x = randn([h, w, cin], &mut r);
        let kk = randn([k, k, cin, cout], &mut r);
        let b = randn([cout], &mut r);
        let g = Graph::no_grad();
        let y = g
            .conv2d(g.constant(x.clone()), g.constant(kk.clone()), g.constant(b.clone()), pad, stride)
            .unwrap();
        let want = naive_conv(&x, &kk, &b, pad, stride);
        assert_eq!(g.shape(y), want.shape());
        assert!(max_diff(g.value(y).data(), want.data()) <= 1e-10, "seed {seed}");
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_even_kernels() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(T64::zeros([4, 4, 3]));
    let bad_k = g.constant(T64::zeros([3, 3, 2, 1]));
    let b = g.constant(T64::zeros([1]));
    assert!(matches!(g.conv2d(x, bad_k, b, 1, 1), Err(Error::Shape { .. })));
    let even = g.constant(T64::zeros([2, 2, 3, 1]));
    assert!(matches!(g.conv2d(x, even, b, 0, 1), Err(Error::Shape { .. })));
}

#[test]
fn non_finite_output_is_an_error() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(T64::new([2], vec![1e308, 1e308]).unwrap());
    assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { .. })));
}

#[test]
fn elementwise_examples() {
    let g = Graph::<f64>::no_grad();
    let x = g.constant(T64::new([3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(g.value(g.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(T64::scalar(0.0));
    assert_eq!(g.value(g.sigmoid(z).unwrap()).data(), &[0.5]);
    assert_eq!(g.value(g.tanh(z).unwrap()).data(), &[0.0]);
}

#[test]
fn sigmoid_and_tanh_stay_in_range() {
    let mut r = rng(3);
    let g = Graph::no_grad();
    let x = g.constant(randn([500], &mut r).scale(10.0));
    for v in g.value(g.sigmoid(x).unwrap()).data() {
        assert!((0.0..=1.0).contains(v));
    }
    for v in g.value(g.tanh(x).unwrap()).data() {
        assert!((-1.0..=1.0).contains(v));
    }
}

fn block_params(d: usize, zero_out: bool, seed: u64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    init_attention_block(&mut p, "blk", d, d, zero_out, &mut rng(seed)).unwrap();
    // perturb the norms so their parameters matter
    let mut r = rng(seed + 1000);
    for (name, t) in p.iter_mut() {
        if name.contains("ln") {
            for v in t.data_mut() {
                *v += 0.1 * r.random_range(-1.0..1.0);
            }
        }
    }
    p
}

#[test]
fn attention_single_position_has_unit_weight() {
    let mut r = rng(4);
    let p = block_params(8, false, 4);
    let g = Graph::no_grad();
    let b = p.bind_constant(&g);
    let x = g.constant(randn([1, 8], &mut r));
    let t = attention_block_traced(&g, &b, "blk", x).unwrap();
    assert_eq!(g.value(t.weights).data(), &[1.0]);
}

#[test]
fn attention_zero_output_projections_is_identity() {
    let mut r = rng(5);
    let p = block_params(8, true, 5);
    let g = Graph::no_grad();
    let b = p.bind_constant(&g);
    let x = randn([6, 8], &mut r);
    let y = attention_block(&g, &b, "blk", g.constant(x.clone())).unwrap();
    assert_eq!(*g.value(y), x);
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = rng(6);
    let p = block_params(8, false, 6);
    let g = Graph::no_grad();
    let b = p.bind_constant(&g);
    let x = g.constant(randn([4, 8], &mut r));
    let t = attention_block_traced(&g, &b, "blk", x).unwrap();
    for row in g.value(t.weights).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn attention_matches_naive_reference_over_100_seeds() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let l = r.random_range(1..=16);
        let d = r.random_range(1..=8);
        let p = block_params(d, false, seed);
        let x = randn([l, d], &mut r);
        let g = Graph::no_grad();
        let b = p.bind_constant(&g);
        let y = attention_block(&g, &b, "blk", g.constant(x.clone())).unwrap();
        let want: Vec<f64> = naive_attention_block(&x, &p, "blk").concat();
        assert!(max_diff(g.value(y).data(), &want) <= 1e-10, "seed {seed}");
    }
}

#[test]
fn attention_width_mismatch_is_a_shape_error() {
    let p = block_params(8, false, 7);
    let g = Graph::no_grad();
    let b = p.bind_constant(&g);
    let x = g.constant(T64::zeros([3, 6]));
    assert!(matches!(attention_block(&g, &b, "blk", x), Err(Error::Shape { .. })));
}

fn sample(img: &T64, coords: &T64) -> T64 {
    let g = Graph::no_grad();
    let out = g
        .bilinear_sample(g.constant(img.clone()), g.constant(coords.clone()))
        .unwrap();
    (*g.value(out)).clone()
}

#[test]
fn bilinear_integer_coordinates_and_identity_grid_are_exact() {
    let mut r = rng(8);
    let img = randn([5, 7, 3], &mut r);
    let grid = T64::from_fn([5, 7, 2], |i| {
        let p = i / 2;
        if i % 2 == 0 { (p % 7) as f64 } else { (p / 7) as f64 }
    });
    assert_eq!(sample(&img, &grid), img);
    let one = T64::new([1, 1, 2], vec![4.0, 2.0]).unwrap();
    assert_eq!(sample(&img, &one).data(), &img.data()[(2 * 7 + 4) * 3..][..3]);
}

#[test]
fn bilinear_midpoint_averages() {
    let img = T64::new([1, 2, 1], vec![0.0, 2.0]).unwrap();
    let c = T64::new([1, 1, 2], vec![0.5, 0.0]).unwrap();
    assert_eq!(sample(&img, &c).data(), &[1.0]);
}

#[test]
fn bilinear_clamps_out_of_bounds() {
    let img = T64::new([1, 2, 1], vec![3.0, 5.0]).unwrap();
    let c = T64::new([1, 2, 2], vec![-4.0, 9.0, 10.0, -1.0]).unwrap();
    assert_eq!(sample(&img, &c).data(), &[3.0, 5.0]);
}

#[test]
fn bilinear_matches_naive_reference_over_100_seeds() {
    for seed in 0..100 {
        let mut r = rng(seed);
        let (h, w, c) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=3));
        let img = randn([h, w, c], &mut r);
        let (oh, ow) = (r.random_range(1..=8), r.random_range(1..=8));
        let coords = T64::from_fn([oh, ow, 2], |_| r.random_range(-2.0..10.0));
        let got = sample(&img, &coords);
        let want: Vec<f64> = coords
            .data()
            .chunks(2)
            .flat_map(|p| naive_bilinear(&img, p[0], p[1]))
            .collect();
        assert!(max_diff(got.data(), &want) <= 1e-10, "seed {seed}");
    }
}

// -- reverse sweep -------------------------------------------------------------

#[test]
fn grad_of_sum_is_ones() {
    let mut r = rng(9);
    let g = Graph::new();
    let x = g.leaf(randn([3, 4], &mut r));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(*grads.get(x).unwrap(), T64::full([3, 4], 1.0));
}

#[test]
fn grad_of_sum_of_squares_is_twice_input() {
    let mut r = rng(10);
    let xv = randn([7], &mut r);
    let g = Graph::new();
    let x = g.leaf(xv.clone());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(*grads.get(x).unwrap(), xv.scale(2.0));
}

#[test]
fn backward_needs_a_scalar_loss() {
    let g = Graph::<f64>::new();
    let x = g.leaf(T64::zeros([2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let x = g.leaf(T64::full([2], 1.0));
    let c = g.constant(T64::full([2], 3.0));
    let y = g.mul(x, c).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn no_grad_tape_yields_no_gradients() {
    let g = Graph::<f64>::no_grad();
    let x = g.leaf(T64::full([2], 1.0));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn gradcheck_conv2d() {
    let mut r = rng(11);
    let p = params(vec![
        ("x", randn([6, 5, 2], &mut r)),
        ("k", randn([3, 3, 2, 3], &mut r)),
        ("b", randn([3], &mut r)),
    ]);
    gradcheck(&p, |g, b| g.conv2d(b.get("x")?, b.get("k")?, b.get("b")?, 1, 2), 11);
    gradcheck(&p, |g, b| g.conv2d(b.get("x")?, b.get("k")?, b.get("b")?, 0, 1), 12);
}

#[test]
fn gradcheck_activations_and_abs() {
    let mut r = rng(13);
    let p = params(vec![("x", randn([120], &mut r))]);
    for act in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        gradcheck(&p, move |g, b| g.activation(b.get("x")?, act), 13);
    }
    gradcheck(&p, |g, b| g.abs(b.get("x")?), 14);
}

#[test]
fn gradcheck_matmuls_and_linear() {
    let mut r = rng(15);
    let p = params(vec![
        ("a", randn([7, 5], &mut r)),
        ("b", randn([5, 6], &mut r)),
        ("c", randn([6, 5], &mut r)),
        ("bias", randn([6], &mut r)),
    ]);
    gradcheck(&p, |g, b| g.matmul(b.get("a")?, b.get("b")?), 15);
    gradcheck(&p, |g, b| g.matmul_nt(b.get("a")?, b.get("c")?), 16);
    gradcheck(&p, |g, b| g.linear(b.get("a")?, b.get("b")?, b.get("bias")?), 17);
}

#[test]
fn gradcheck_softmax_and_layer_norm() {
    let mut r = rng(18);
    let p = params(vec![
        ("x", randn([12, 9], &mut r)),
        ("gain", randn([9], &mut r)),
        ("bias", randn([9], &mut r)),
    ]);
    gradcheck(&p, |g, b| g.softmax_last(b.get("x")?), 18);
    gradcheck(&p, |g, b| g.layer_norm(b.get("x")?, b.get("gain")?, b.get("bias")?, 1e-5), 19);
}

#[test]
fn gradcheck_shape_plumbing() {
    let mut r = rng(20);
    let p = params(vec![
        ("x", randn([4, 5, 3], &mut r)),
        ("y", randn([4, 5, 2], &mut r)),
        ("z", randn([4, 5, 3], &mut r)),
        ("b", randn([3], &mut r)),
    ]);
    gradcheck(&p, |g, b| g.concat_last(&[b.get("x")?, b.get("y")?]), 20);
    gradcheck(&p, |g, b| g.slice_last(b.get("x")?, 1, 3), 21);
    gradcheck(&p, |g, b| g.add_bias(b.get("x")?, b.get("b")?), 22);
    gradcheck(
        &p,
        |g, b| g.lincomb(&[(0.5, b.get("x")?), (-2.0, b.get("z")?)]),
        23,
    );
    gradcheck(&p, |g, b| { let m = g.mul(b.get("x")?, b.get("z")?)?; g.sub(m, b.get("x")?) }, 24);
}

#[test]
fn gradcheck_bilinear_sample() {
    let mut r = rng(25);
    let coords = T64::from_fn([4, 5, 2], |_| r.random_range(-1.5..7.5));
    let p = params(vec![("img", randn([6, 7, 2], &mut r)), ("coords", coords)]);
    gradcheck(&p, |g, b| g.bilinear_sample(b.get("img")?, b.get("coords")?), 25);
}

#[test]
fn gradcheck_window_lookup_and_pooling() {
    let mut r = rng(26);
    let centers = T64::from_fn([3, 4, 2], |_| r.random_range(-1.3..5.7));
    let p = params(vec![("maps", randn([3, 4, 5, 6], &mut r)), ("c", centers)]);
    gradcheck(&p, |g, b| g.window_lookup(b.get("maps")?, b.get("c")?, 1), 26);
    gradcheck(&p, |g, b| g.avg_pool2_last2(b.get("maps")?), 27);
}

#[test]
fn gradcheck_composite_conv_relu_attention() {
    let mut r = rng(28);
    let mut p = params(vec![
        ("x", randn([4, 4, 3], &mut r)),
        ("k", randn([3, 3, 3, 6], &mut r)),
        ("kb", randn([6], &mut r)),
    ]);
    init_attention_block(&mut p, "blk", 6, 6, false, &mut r).unwrap();
    gradcheck(
        &p,
        |g, b| {
            let y = g.conv2d(b.get("x")?, b.get("k")?, b.get("kb")?, 1, 1)?;
            let y = g.relu(y)?;
            let y = g.reshape(y, [16, 6])?;
            attention_block(g, b, "blk", y)
        },
        28,
    );
}

#[test]
fn forward_replay_is_bitwise_deterministic() {
    let run = || {
        let mut r = rng(29);
        let mut p = ParamSet::<f64>::new();
        init_attention_block(&mut p, "blk", 8, 8, false, &mut r).unwrap();
        let x = randn([10, 8], &mut r);
        let g = Graph::no_grad();
        let b = p.bind_constant(&g);
        let y = attention_block(&g, &b, "blk", g.constant(x)).unwrap();
        (*g.value(y)).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn param_names_are_unique_and_ordered() {
    let mut p = ParamSet::<f64>::new();
    p.insert("b", T64::zeros([1])).unwrap();
    p.insert("a", T64::zeros([1])).unwrap();
    assert!(matches!(p.insert("a", T64::zeros([1])), Err(Error::DuplicateParam(_))));
    assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
}
