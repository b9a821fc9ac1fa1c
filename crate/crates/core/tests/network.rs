use xlhbf::network::*;
use xlhbf::rng::Stream;
use xlhbf::tensor::autodiff::ctanh;
use xlhbf::tensor::{ComplexMatrix, Tape, C64};

fn dims(m: usize, k: usize, n_rf: usize, n: usize, hidden: &[usize]) -> NetworkDims {
    NetworkDims {
        m,
        k,
        n_rf,
        n,
        hidden: hidden.to_vec(),
    }
}

fn channels(s: &mut Stream, m: usize, k: usize, b: usize) -> Vec<ComplexMatrix> {
    (0..b).map(|_| s.complex_normal_matrix(m, k, 1.0)).collect()
}

/// Covariance entries `(var_re, cov, var_im)` of one row.
fn row_cov(x: &ComplexMatrix, i: usize) -> (f64, f64, f64) {
    let n = x.cols() as f64;
    let mean = x.row(i).iter().sum::<C64>() / n;
    let mut c = (0.0, 0.0, 0.0);
    for z in x.row(i) {
        let d = z - mean;
        c.0 += d.re * d.re / n;
        c.1 += d.re * d.im / n;
        c.2 += d.im * d.im / n;
    }
    c
}

#[test]
fn ctanh_values() {
    assert_eq!(ctanh(C64::new(0.0, 0.0)), C64::new(0.0, 0.0));
    for t in [-3.0, -0.4, 0.0, 0.7, 5.0] {
        let y = ctanh(C64::new(t, 0.0));
        assert_eq!(y.re, f64::tanh(t));
        assert_eq!(y.im, 0.0);
    }
    let y = ctanh(C64::new(100.0, 100.0));
    assert!((y - C64::new(1.0, 1.0)).norm() < 1e-12);
}

#[test]
fn sensing_is_the_stacked_linear_map() {
    let p = NetworkParams::init(dims(16, 3, 2, 4, &[8]), Mode::Indirect, 1).unwrap();
    let mut s = Stream::new(1, "h", 0);
    let h = s.complex_normal_matrix(16, 3, 1.0);
    let y = p.sensing.measure(&h, None).unwrap();
    assert!(y.max_abs_diff(&p.sensing.stacked().matmul(&h)) < 1e-14);
    for (n, phi) in p.sensing.kernels.iter().enumerate() {
        assert_eq!(y.slice(3 * n..3 * n + 3, 0..3), phi.matmul(&h));
    }

    // linearity
    let h2 = s.complex_normal_matrix(16, 3, 1.0);
    let (a, b) = (C64::new(0.3, -1.2), C64::new(-2.0, 0.5));
    let mix = &h.scale(a) + &h2.scale(b);
    let lhs = p.sensing.measure(&mix, None).unwrap();
    let rhs = &y.scale(a) + &p.sensing.measure(&h2, None).unwrap().scale(b);
    assert!(lhs.max_abs_diff(&rhs) < 1e-12);
}

#[test]
fn sensing_grouping_isolation() {
    let mut p = NetworkParams::init(dims(8, 2, 2, 3, &[4]), Mode::Indirect, 2).unwrap();
    let mut s = Stream::new(2, "h", 0);
    let h = s.complex_normal_matrix(8, 2, 1.0);
    let before = p.sensing.measure(&h, None).unwrap();
    p.sensing.kernels[1] = s.complex_normal_matrix(2, 8, 1.0);
    let after = p.sensing.measure(&h, None).unwrap();
    for i in 0..6 {
        let changed = before.row(i) != after.row(i);
        assert_eq!(changed, (2..4).contains(&i), "row {i}");
    }

    // through autodiff: slot n depends only on kernel n
    for slot in 0..3 {
        let mut tape = Tape::new();
        let kernels: Vec<_> = p.sensing.kernels.iter().map(|k| tape.leaf(k.clone())).collect();
        let hv = tape.constant(h.clone());
        let prods: Vec<_> = kernels.iter().map(|&k| tape.matmul(k, hv).unwrap()).collect();
        let y = tape.vstack(&prods).unwrap();
        let part = tape.slice(y, 2 * slot..2 * slot + 2, 0..2).unwrap();
        let seed = s.complex_normal_matrix(2, 2, 1.0);
        let g = tape.backward_seeded(part, seed).unwrap();
        for (n, &k) in kernels.iter().enumerate() {
            let grad = g.get_or_zeros(k, (2, 8));
            assert_eq!(grad.max_abs() == 0.0, n != slot);
        }
    }
}

#[test]
fn sensing_noise_is_colored_by_the_kernel() {
    let mut p = NetworkParams::init(dims(6, 2, 1, 2, &[4]), Mode::Indirect, 3).unwrap();
    let mut s = Stream::new(3, "phi", 0);
    p.sensing.kernels[0] = s.complex_normal_matrix(2, 6, 1.0);
    let h = s.complex_normal_matrix(6, 2, 1.0);
    let clean = p.sensing.measure(&h, None).unwrap();
    let sigma2 = 0.3;
    let draws = 10_000;
    let mut noise = Stream::new(3, "noise", 0);
    let mut cov = ComplexMatrix::zeros(2, 2);
    for _ in 0..draws {
        let y = p.sensing.measure(&h, Some((sigma2, &mut noise))).unwrap();
        let d = (&y - &clean).slice(0..2, 0..2);
        cov += &d.matmul_adjoint(&d);
    }
    // two columns per draw
    let cov = cov.scale_real(1.0 / (2.0 * draws as f64));
    let phi = &p.sensing.kernels[0];
    let expect = phi.matmul_adjoint(phi).scale_real(sigma2);
    let rel = (&cov - &expect).frobenius_norm() / expect.frobenius_norm();
    assert!(rel < 0.1, "{rel}");
}

#[test]
fn batch_norm_whitens() {
    let d = 3;
    let mut s = Stream::new(4, "bn", 0);
    let mut block = NetworkParams::init(dims(4, 1, 1, 1, &[d]), Mode::Indirect, 4).unwrap().blocks[0].clone();
    block.gamma = ComplexMatrix::from_fn(d, 4, |_, j| C64::new(if j == 0 || j == 3 { 1.0 } else { 0.0 }, 0.0));
    // correlated, offset, anisotropic rows
    let x = ComplexMatrix::from_fn(d, 1024, |i, _| {
        let a = s.normal();
        let b = s.normal();
        C64::new(3.0 * a + 1.0 + i as f64, 0.5 * a + 0.2 * b - 2.0)
    });
    let (y, stats) = block.batch_norm(&x, BnMode::Batch, BN_EPS).unwrap();
    assert!(stats.is_some());
    for i in 0..d {
        let (a, b, c) = row_cov(&y, i);
        assert!((a - 1.0).abs() < 0.05 && b.abs() < 0.05 && (c - 1.0).abs() < 0.05, "{a} {b} {c}");
    }

    // constant batch: centred value is zero, output is β
    block.beta = ComplexMatrix::column_vector(&[C64::new(0.1, 0.2), C64::new(-1.0, 0.0), C64::new(0.0, 3.0)]);
    let x = ComplexMatrix::from_fn(d, 16, |i, _| C64::new(i as f64, 7.0));
    let (y, _) = block.batch_norm(&x, BnMode::Batch, BN_EPS).unwrap();
    for i in 0..d {
        for z in y.row(i) {
            assert!(z.is_finite());
            assert!((z - block.beta[(i, 0)]).norm() < 1e-12);
        }
    }

    // batch of one is rejected in training mode
    assert!(block.batch_norm(&x.slice(0..d, 0..1), BnMode::Batch, BN_EPS).is_err());
}

#[test]
fn batch_norm_identity_on_whitened_input() {
    let d = 2;
    let block = NetworkParams::init(dims(4, 1, 1, 1, &[d]), Mode::Indirect, 5).unwrap().blocks[0].clone();
    // exactly zero-mean rows with identity covariance
    let x = ComplexMatrix::from_fn(d, 4, |_, j| {
        [C64::new(1.0, 1.0), C64::new(1.0, -1.0), C64::new(-1.0, 1.0), C64::new(-1.0, -1.0)][j]
    });
    let (y, _) = block.batch_norm(&x, BnMode::Batch, BN_EPS).unwrap();
    let g = std::f64::consts::FRAC_1_SQRT_2;
    assert!(y.max_abs_diff(&x.scale_real(g)) < 1e-5);
}

#[test]
fn mlp_properties() {
    let p = NetworkParams::init(dims(8, 3, 2, 2, &[6, 5]), Mode::Indirect, 6).unwrap();
    let mut s = Stream::new(6, "mlp", 0);
    let h = s.complex_normal_matrix(8, 3, 4.0);
    let feats = p.features(&h).unwrap();
    assert_eq!(feats.shape(), (5, 3));
    assert!(feats.data().iter().all(|z| z.re.abs() <= 1.0 && z.im.abs() <= 1.0));

    // permuting users permutes features and measurements alike
    let perm = [2, 0, 1];
    let hp = ComplexMatrix::from_fn(8, 3, |i, j| h[(i, perm[j])]);
    let fp = p.features(&hp).unwrap();
    for j in 0..3 {
        assert_eq!(fp.column(j), feats.column(perm[j]));
    }

    // zero weights, biases and shifts give zero output
    let mut z = p.clone();
    for b in &mut z.blocks {
        b.weight = ComplexMatrix::zeros(b.weight.rows(), b.weight.cols());
        b.bias = ComplexMatrix::zeros(b.bias.rows(), 1);
        b.beta = ComplexMatrix::zeros(b.beta.rows(), 1);
    }
    assert_eq!(z.features(&h).unwrap().max_abs(), 0.0);

    // shared weights: MLP size ignores K
    let q = NetworkParams::init(dims(8, 5, 2, 2, &[6, 5]), Mode::Indirect, 6).unwrap();
    let r = NetworkParams::init(dims(8, 3, 2, 2, &[6, 5]), Mode::Indirect, 6).unwrap();
    let per_k = |p: &NetworkParams| p.mlp_parameters() - p.blocks[0].weight.len();
    assert_eq!(per_k(&q), per_k(&r));
}

fn run_head(p: &NetworkParams, feats: &ComplexMatrix) -> ComplexMatrix {
    let mut tape = Tape::new();
    let vars = p.to_tape(&mut tape, false);
    let f = tape.constant(feats.clone());
    let out = p.head_on_tape(&mut tape, &vars, f).unwrap();
    tape.value(out[0]).clone()
}

#[test]
fn head_normalizes_and_keeps_phase() {
    let m = 8;
    let mut p = NetworkParams::init(dims(m, 2, 2, 2, &[3]), Mode::Indirect, 7).unwrap();
    let mut s = Stream::new(7, "head", 0);
    let feats = s.complex_normal_matrix(3, 2, 1.0);
    // unnormalized output through the linear part only
    let z = feats.reshape_col_major(6, 1);
    let raw = p.head.weight.matmul(&z);
    let f = run_head(&p, &feats);
    let a = 1.0 / (m as f64).sqrt();
    for (i, x) in raw.data().iter().enumerate() {
        let y = f.data()[{
            // vec is column-major: entry i is (i % M, i / M)
            (i % m) * 2 + i / m
        }];
        assert!((y.arg() - x.arg()).abs() < 1e-9);
        assert!((y.norm() - a).abs() < 1e-9);
    }

    p.head.weight = ComplexMatrix::zeros(p.head.weight.rows(), p.head.weight.cols());
    let f = run_head(&p, &feats);
    assert!(f.data().iter().all(|&z| z == C64::new(a, 0.0)));
}

#[test]
fn head_is_order_sensitive() {
    let p = NetworkParams::init(dims(8, 2, 2, 2, &[3]), Mode::Indirect, 8).unwrap();
    let mut s = Stream::new(8, "swap", 0);
    let feats = s.complex_normal_matrix(3, 2, 1.0);
    let swapped = ComplexMatrix::from_fn(3, 2, |i, j| feats[(i, 1 - j)]);
    assert!(run_head(&p, &feats).max_abs_diff(&run_head(&p, &swapped)) > 1e-3);
}

#[test]
fn indirect_and_direct_share_one_graph() {
    let d = dims(16, 2, 2, 4, &[12, 6]);
    let mut s = Stream::new(9, "ident", 0);
    for seed in 0..5 {
        let ind = NetworkParams::init(d.clone(), Mode::Indirect, seed).unwrap();
        let mut dir = ind.clone();
        dir.mode = Mode::Direct;
        let hs = channels(&mut s, 16, 2, 3);
        let ys: Vec<_> = hs.iter().map(|h| ind.sensing.measure(h, None).unwrap()).collect();
        let a = ind.forward(NetworkInput::Channels(&hs)).unwrap();
        let b = dir.forward(NetworkInput::Measurements(&ys)).unwrap();
        assert_eq!(a, b);
        for f in &a {
            assert!(f.data().iter().all(|z| (z.norm() - 0.25).abs() < 1e-9));
        }
        // deterministic and mode-checked
        assert_eq!(a, ind.forward(NetworkInput::Channels(&hs)).unwrap());
        assert!(ind.forward(NetworkInput::Measurements(&ys)).is_err());
        assert!(dir.forward(NetworkInput::Channels(&hs)).is_err());
    }
}

#[test]
fn batch_forward_matches_single_forward_at_inference() {
    let p = NetworkParams::init(dims(8, 2, 2, 2, &[6]), Mode::Indirect, 10).unwrap();
    let mut s = Stream::new(10, "batch", 0);
    let hs = channels(&mut s, 8, 2, 4);
    let all = p.forward(NetworkInput::Channels(&hs)).unwrap();
    for (h, f) in hs.iter().zip(&all) {
        let one = p.forward(NetworkInput::Channels(std::slice::from_ref(h))).unwrap();
        assert!(one[0].max_abs_diff(f) < 1e-14);
    }
}

#[test]
fn running_stats_update_and_freeze() {
    let mut p = NetworkParams::init(dims(8, 2, 2, 2, &[6]), Mode::Indirect, 11).unwrap();
    let mut s = Stream::new(11, "run", 0);
    let hs = channels(&mut s, 8, 2, 16);
    let mut tape = Tape::new();
    let vars = p.to_tape(&mut tape, true);
    let pass = p
        .forward_on_tape(&mut tape, &vars, NetworkInput::Channels(&hs), None, BnMode::Batch)
        .unwrap();
    assert_eq!(pass.bn_stats.len(), 1);
    assert_eq!(pass.bn_batch, 32);
    let before = p.blocks[0].running.clone();
    p.update_running(&pass);
    let after = &p.blocks[0].running;
    let mu = pass.bn_stats[0].mean[0];
    assert!((after.mean[0] - (before.mean[0] * 0.9 + mu * 0.1)).norm() < 1e-15);
    for &(a, b, d) in &after.cov {
        assert!(a > 0.0 && d > 0.0 && a * d >= b * b);
    }
    // frozen stats: repeated inference is identical
    let a = p.forward(NetworkInput::Channels(&hs)).unwrap();
    let b = p.forward(NetworkInput::Channels(&hs)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let mut p = NetworkParams::init(dims(8, 2, 2, 3, &[6, 4]), Mode::Direct, 12).unwrap();
    p.blocks[1].running.mean[2] = C64::new(0.5, -0.25);
    p.blocks[0].running.cov[1] = (2.0, 0.3, 0.7);
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    let q = NetworkParams::load(dir.path()).unwrap();
    assert_eq!(p, q);
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(text.contains("bn_inference=running"));
    assert!(text.contains("mode=direct"));
}
