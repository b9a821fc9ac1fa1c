//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use xlhbf::precoding::{random_constant_modulus, sum_mse};
use xlhbf::rng::Stream;
use xlhbf::tensor::{ComplexMatrix, C64};

pub fn random_channel(stream: &mut Stream, m: usize, k: usize) -> ComplexMatrix {
    stream.complex_normal_matrix(m, k, 1.0)
}

pub fn random_cm(stream: &mut Stream, m: usize, n: usize) -> ComplexMatrix {
    random_constant_modulus(m, n, stream)
}

/// Gauss–Jordan inverse with partial pivoting, independent of the library's
/// Cholesky path.
pub fn gj_inverse(a: &ComplexMatrix) -> ComplexMatrix {
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = ComplexMatrix::identity(n);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].norm().total_cmp(&m[(j, col)].norm()))
            .unwrap();
        for j in 0..n {
            let t = m[(col, j)];
            m[(col, j)] = m[(piv, j)];
            m[(piv, j)] = t;
            let t = inv[(col, j)];
            inv[(col, j)] = inv[(piv, j)];
            inv[(piv, j)] = t;
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                for j in 0..n {
                    let a = m[(col, j)];
                    let b = inv[(col, j)];
                    m[(i, j)] -= f * a;
                    inv[(i, j)] -= f * b;
                }
            }
        }
    }
    inv
}

/// Concentrated objective through the Woodbury form
/// `K − Re tr(Aᴴ(AAᴴ + cG)⁻¹A)` with `A = FᴴH`, `c = Kσ²/P_t`, using an
/// explicit Gauss–Jordan inverse.
pub fn woodbury_mse(h: &ComplexMatrix, f: &ComplexMatrix, p_t: f64, sigma2: f64) -> f64 {
    let k = h.cols() as f64;
    let a = f.adjoint_matmul(h);
    let g = f.adjoint_matmul(f);
    let lhs = &a.matmul_adjoint(&a) + &g.scale_real(k * sigma2 / p_t);
    let x = gj_inverse(&lhs).matmul(&a);
    k - a.adjoint_matmul(&x).trace().re
}

/// Term-by-term SINR expansion.
pub fn brute_sinr(h: &ComplexMatrix, f_rf: &ComplexMatrix, f_bb: &ComplexMatrix, sigma2: f64) -> Vec<f64> {
    let k = h.cols();
    let (m, n) = f_rf.shape();
    let gain = |user: usize, stream: usize| -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for a in 0..m {
            for b in 0..n {
                acc += h[(a, user)].conj() * f_rf[(a, b)] * f_bb[(b, stream)];
            }
        }
        acc
    };
    (0..k)
        .map(|u| {
            let s = gain(u, u).norm_sqr();
            let mut i = 0.0;
            for v in 0..k {
                if v != u {
                    i += gain(u, v).norm_sqr();
                }
            }
            s / (i + sigma2)
        })
        .collect()
}

/// Lower-triangular `L` with `LLᴴ = A` by the textbook recurrence.
pub fn plain_cholesky(a: &ComplexMatrix) -> ComplexMatrix {
    let n = a.rows();
    let mut l = ComplexMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for p in 0..j {
            d -= l[(j, p)].norm_sqr();
        }
        let d = d.sqrt();
        l[(j, j)] = C64::new(d, 0.0);
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)].conj();
            }
            l[(i, j)] = v / d;
        }
    }
    l
}

/// Numerical minimization of the sum-MSE over `(F_BB, β)` for a fixed analog
/// precoder. For a given `F_BB` the optimal inverse scaling is
/// `1/β = Re tr(E)/(‖E‖² + Kσ²)` with `E = HᴴF_RF F_BB`, leaving
/// `K − (Re tr E)²/(‖E‖² + Kσ²)` to be minimized on the active power sphere.
/// The variable is whitened (`Y = LᴴX`, `FᴴF = LLᴴ`) so the constraint is a
/// plain sphere, then descended along the tangent gradient with an adaptive step.
pub fn numeric_min_sum_mse(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    p_t: f64,
    sigma2: f64,
    steps: usize,
    stream: &mut Stream,
) -> (f64, ComplexMatrix, f64) {
    let k = h.cols();
    let n = f_rf.cols();
    let kf = k as f64;
    let l = plain_cholesky(&f_rf.adjoint_matmul(f_rf));
    let l_inv_h = gj_inverse(&l).adjoint();
    let b = h.adjoint_matmul(f_rf).matmul(&l_inv_h);
    let radius = p_t.sqrt();
    let project = |y: &ComplexMatrix| y.scale_real(radius / y.frobenius_norm());
    let objective = |y: &ComplexMatrix| -> f64 {
        let e = b.matmul(y);
        let s = e.trace().re;
        kf - s * s / (e.frobenius_norm_sqr() + kf * sigma2)
    };
    let mut y = project(&stream.complex_normal_matrix(n, k, 1.0));
    let mut obj = objective(&y);
    let mut step = 1e-2;
    for _ in 0..steps {
        let e = b.matmul(&y);
        let s = e.trace().re;
        let q = e.frobenius_norm_sqr() + kf * sigma2;
        let g = &b.adjoint().scale_real(-2.0 * s / q) + &b.adjoint_matmul(&e).scale_real(2.0 * s * s / (q * q));
        let radial = y.adjoint_matmul(&g).trace().re / (p_t);
        let g = &g - &y.scale_real(radial);
        if g.frobenius_norm() < 1e-15 {
            break;
        }
        loop {
            let cand = project(&(&y - &g.scale_real(step)));
            let v = objective(&cand);
            if v <= obj {
                y = cand;
                obj = v;
                step *= 1.5;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                break;
            }
        }
    }
    let x = l_inv_h.matmul(&y);
    let e = h.adjoint_matmul(f_rf).matmul(&x);
    let inv_beta = e.trace().re / (e.frobenius_norm_sqr() + kf * sigma2);
    let beta = 1.0 / inv_beta;
    (sum_mse(h, f_rf, &x, beta, sigma2), x, beta)
}
