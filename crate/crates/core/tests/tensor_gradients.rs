use xlhbf::rng::Stream;
use xlhbf::tensor::gradcheck::check_tape;
use xlhbf::tensor::{ComplexMatrix, Tape, Var, C64};
use xlhbf::Result;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-6;

fn rand_mat(seed: u64, r: usize, c: usize) -> ComplexMatrix {
    Stream::new(seed, "gradcheck", (r * 100 + c) as u64).complex_normal_matrix(r, c, 1.0)
}

/// Real scalar probe `Re Σ conj(c)∘y + 0.3 Σ |y|²` so every output entry
/// contributes to the loss through both its real and imaginary parts.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let weights = t.constant(rand_mat(seed ^ 0xabc, r, c).conj());
    let lin = t.mul(weights, y)?;
    let yc = t.conj(y);
    let sq = t.mul(yc, y)?;
    let sq = t.scale_real(sq, 0.3);
    let s = t.add(lin, sq)?;
    let ones_l = t.constant(ComplexMatrix::from_fn(1, r, |_, _| C64::new(1.0, 0.0)));
    let ones_r = t.constant(ComplexMatrix::from_fn(c, 1, |_, _| C64::new(1.0, 0.0)));
    let a = t.matmul(ones_l, s)?;
    let total = t.matmul(a, ones_r)?;
    Ok(t.re(total))
}

fn check(inputs: &[ComplexMatrix], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check_tape(inputs, STEP, |t, v| {
        let y = f(t, v)?;
        probe(t, y, 7)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn add_sub_scale() {
    let (a, b) = (rand_mat(1, 2, 3), rand_mat(2, 2, 3));
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(&[a.clone(), b], |t, v| t.sub(v[0], v[1]));
    check(&[a], |t, v| Ok(t.scale(v[0], C64::new(0.4, -1.3))));
}

#[test]
fn conj_transpose_adjoint() {
    let a = rand_mat(3, 3, 2);
    check(&[a.clone()], |t, v| Ok(t.conj(v[0])));
    check(&[a.clone()], |t, v| Ok(t.transpose(v[0])));
    check(&[a], |t, v| Ok(t.adjoint(v[0])));
}

#[test]
fn matmul() {
    check(&[rand_mat(4, 3, 2), rand_mat(5, 2, 4)], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_mul_div() {
    let (a, b) = (rand_mat(6, 2, 2), rand_mat(7, 2, 2));
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    let b = b.map(|z| z + C64::new(2.0, 0.5));
    check(&[a, b], |t, v| t.div(v[0], v[1]));
}

#[test]
fn modulus() {
    check(&[rand_mat(8, 2, 3)], |t, v| Ok(t.abs(v[0])));
}

#[test]
fn real_imag_split_join() {
    let (a, b) = (rand_mat(9, 2, 2), rand_mat(10, 2, 2));
    check(&[a.clone()], |t, v| Ok(t.re(v[0])));
    check(&[a.clone()], |t, v| Ok(t.im(v[0])));
    check(&[a, b], |t, v| t.join(v[0], v[1]));
}

#[test]
fn tanh_variants() {
    let a = rand_mat(11, 3, 2);
    check(&[a.clone()], |t, v| Ok(t.tanh(v[0])));
    check(&[a], |t, v| Ok(t.ctanh(v[0])));
}

#[test]
fn trace() {
    check(&[rand_mat(12, 3, 3)], |t, v| t.trace(v[0]));
}

#[test]
fn hermitian_solve() {
    // A is built as GᴴG + I from a leaf so perturbations keep it Hermitian.
    let g = rand_mat(13, 3, 3);
    let b = rand_mat(14, 3, 2);
    check(&[g, b], |t, v| {
        let gh = t.adjoint(v[0]);
        let a = t.matmul(gh, v[0])?;
        let a = t.add_jitter(a)?;
        let eye = t.constant(ComplexMatrix::identity(3));
        let a = t.add(a, eye)?;
        t.solve(a, v[1])
    });
}

#[test]
fn batch_whitening() {
    let x = rand_mat(15, 3, 6).map(|z| C64::new(z.re * 2.0 + 0.3 * z.im, z.im - 0.5));
    check(&[x], |t, v| Ok(t.whiten(v[0], 1e-5)?.0));
}

#[test]
fn batch_whitening_nearly_isotropic() {
    // Nearly equal eigenvalues exercise the divided-difference limit.
    let x = ComplexMatrix::from_fn(1, 4, |_, j| {
        let a = j as f64 * std::f64::consts::FRAC_PI_2;
        C64::new(a.cos(), a.sin()) + C64::new(1e-4 * j as f64, 0.0)
    });
    check(&[x], |t, v| Ok(t.whiten(v[0], 1e-5)?.0));
}

#[test]
fn fixed_whitening_and_affine() {
    let x = rand_mat(16, 2, 3);
    let mean = [C64::new(0.1, -0.2), C64::new(0.5, 0.0)];
    let w = [[1.2, 0.3, 0.3, 0.8], [0.9, -0.1, -0.1, 1.1]];
    check(&[x.clone()], |t, v| t.whiten_fixed(v[0], &mean, &w));
    let gamma = ComplexMatrix::from_fn(2, 4, |i, j| C64::new(0.5 + 0.1 * (i + j) as f64, 0.0));
    let beta = rand_mat(17, 2, 1);
    let r = check_tape(&[x, gamma, beta], STEP, |t, v| {
        let y = t.affine2(v[0], v[1], v[2])?;
        probe(t, y, 3)
    })
    .unwrap();
    // γ perturbations along the imaginary axis are ignored by the forward map
    // and receive zero gradient, which the comparison also checks.
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn bias_and_cm_normalize() {
    check(&[rand_mat(18, 3, 4), rand_mat(19, 3, 1)], |t, v| t.add_bias(v[0], v[1]));
    check(&[rand_mat(20, 3, 2)], |t, v| Ok(t.cm_normalize(v[0], 1e-12, 0.25)));
    check(&[rand_mat(21, 3, 2)], |t, v| Ok(t.cm_normalize(v[0], 0.3, 1.0)));
}

#[test]
fn structural_ops() {
    let (a, b) = (rand_mat(22, 2, 3), rand_mat(23, 2, 2));
    check(&[a.clone(), b.clone()], |t, v| t.hstack(&[v[0], v[1]]));
    let c = rand_mat(24, 1, 3);
    check(&[a.clone(), c], |t, v| t.vstack(&[v[0], v[1]]));
    check(&[a.clone()], |t, v| t.slice(v[0], 0..2, 1..3));
    check(&[a.clone()], |t, v| t.reshape(v[0], 3, 2));
    let d = rand_mat(25, 2, 3);
    check(&[a, d], |t, v| t.mean(&[v[0], v[1]]));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let w0 = rand_mat(30, 3, 2);
    let mut t = Tape::new();
    let w = t.leaf(w0);
    let l1 = probe(&mut t, w, 1).unwrap();
    let l2 = {
        let a = t.abs(w);
        probe(&mut t, a, 2).unwrap()
    };
    let (a, b) = (1.7, -0.6);
    let s1 = t.scale_real(l1, a);
    let s2 = t.scale_real(l2, b);
    let l = t.add(s1, s2).unwrap();
    let g = t.backward(l).unwrap().get(w).unwrap().clone();
    let g1 = t.backward(l1).unwrap().get(w).unwrap().clone();
    let g2 = t.backward(l2).unwrap().get(w).unwrap().clone();
    let expect = &g1.scale_real(a) + &g2.scale_real(b);
    assert!(g.max_abs_diff(&expect) < 1e-12);
}
