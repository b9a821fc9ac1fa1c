//! Cholesky solves and the Hermitian eigendecomposition.

use super::matrix::{ComplexMatrix, C64, ZERO};
use crate::error::{Error, Result};

/// Hermitian check tolerance, relative to `max(1, ‖A‖_F)`.
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Default bound on `‖AX − B‖_F / ‖B‖_F` for [`cholesky_solve`].
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

/// Off-diagonal Frobenius norm (relative) at which Jacobi sweeps stop.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

pub fn check_hermitian(a: &ComplexMatrix) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Shape {
            op: "hermitian",
            left: a.shape(),
            right: (a.cols(), a.rows()),
        });
    }
    let asymmetry = a.hermitian_asymmetry();
    if asymmetry > HERMITIAN_TOL * a.frobenius_norm().max(1.0) || !asymmetry.is_finite() {
        return Err(Error::NotHermitian { asymmetry });
    }
    Ok(())
}

/// Lower-triangular factor `L` with `A = L Lᴴ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: ComplexMatrix,
}

impl Cholesky {
    /// Factor a Hermitian positive-definite matrix. Only the lower triangle
    /// of `a` is read; callers that need the Hermitian contract enforced use
    /// [`Cholesky::factor_checked`].
    pub fn factor(a: &ComplexMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Shape {
                op: "cholesky",
                left: a.shape(),
                right: (a.cols(), a.rows()),
            });
        }
        let n = a.rows();
        let mut l = ComplexMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: d });
            }
            let ljj = d.sqrt();
            l[(j, j)] = C64::new(ljj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn factor_checked(a: &ComplexMatrix) -> Result<Self> {
        check_hermitian(a)?;
        Self::factor(a)
    }

    pub fn factor_matrix(&self) -> &ComplexMatrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    /// Solve `A X = B` by forward then backward substitution.
    pub fn solve(&self, b: &ComplexMatrix) -> Result<ComplexMatrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::Shape {
                op: "cholesky solve",
                left: (n, n),
                right: b.shape(),
            });
        }
        let l = &self.l;
        let mut x = b.clone();
        for c in 0..b.cols() {
            // L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
            // Lᴴ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for k in (i + 1)..n {
                    s -= l[(k, i)].conj() * x[(k, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
        }
        Ok(x)
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim()).map(|i| 2.0 * self.l[(i, i)].re.ln()).sum()
    }
}

/// Solution of `A X = B` for Hermitian positive-definite `A`, with the factor
/// kept for further solves against the same matrix.
#[derive(Debug, Clone)]
pub struct HermitianSolveResult {
    pub solution: ComplexMatrix,
    pub factor: Cholesky,
    pub residual: f64,
}

pub fn cholesky_solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<HermitianSolveResult> {
    cholesky_solve_tol(a, b, DEFAULT_RESIDUAL_TOL)
}

pub fn cholesky_solve_tol(
    a: &ComplexMatrix,
    b: &ComplexMatrix,
    tolerance: f64,
) -> Result<HermitianSolveResult> {
    let factor = Cholesky::factor_checked(a)?;
    let solution = factor.solve(b)?;
    let bn = b.frobenius_norm();
    let residual = if bn == 0.0 {
        solution.frobenius_norm()
    } else {
        (&a.matmul(&solution) - b).frobenius_norm() / bn
    };
    if !(residual <= tolerance) {
        return Err(Error::Residual {
            residual,
            tolerance,
        });
    }
    Ok(HermitianSolveResult {
        solution,
        factor,
        residual,
    })
}

/// Diagonal jitter `1e-12·tr(G)/n` applied to every Gram solve.
pub fn gram_jitter(g: &ComplexMatrix) -> f64 {
    let n = g.rows().max(1);
    1e-12 * g.trace().re.abs() / n as f64
}

/// Solve `(G + δI) X = B` with the standard Gram jitter.
pub fn solve_gram(g: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix> {
    let mut gj = g.clone();
    gj.add_diagonal(C64::new(gram_jitter(g), 0.0));
    Cholesky::factor(&gj)?.solve(b)
}

#[derive(Debug, Clone)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are the eigenvectors.
    pub vectors: ComplexMatrix,
}

/// Cyclic Jacobi eigendecomposition of a Hermitian matrix.
pub fn hermitian_eig(a: &ComplexMatrix) -> Result<HermitianEigen> {
    check_hermitian(a)?;
    let n = a.rows();
    let mut m = a.hermitian_part();
    let mut v = ComplexMatrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    let off_norm = |m: &ComplexMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&m);
        if off <= JACOBI_TOL * scale {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Convergence {
                off_norm: off,
                sweeps,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let g = apq.norm();
                if g <= f64::MIN_POSITIVE {
                    continue;
                }
                // Phase-align the pair so the 2×2 block is real symmetric,
                // then apply the real rotation that annihilates it.
                let phase = apq / g;
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let tau = (aqq - app) / (2.0 * g);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // J = diag(1, e^{-iφ}) · [[c, s], [−s, c]] on the (p, q) plane.
                let jpp = C64::new(c, 0.0);
                let jpq = C64::new(s, 0.0);
                let jqp = -phase.conj() * s;
                let jqq = phase.conj() * c;
                // columns: M ← M J
                for i in 0..n {
                    let mip = m[(i, p)];
                    let miq = m[(i, q)];
                    m[(i, p)] = mip * jpp + miq * jqp;
                    m[(i, q)] = mip * jpq + miq * jqq;
                }
                // rows: M ← Jᴴ M
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = jpp.conj() * mpk + jqp.conj() * mqk;
                    m[(q, k)] = jpq.conj() * mpk + jqq.conj() * mqk;
                }
                m[(p, q)] = ZERO;
                m[(q, p)] = ZERO;
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = vip * jpp + viq * jqp;
                    v[(i, q)] = vip * jpq + viq * jqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.total_cmp(&m[(j, j)].re));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok(HermitianEigen { values, vectors })
}

/// Inverse principal square root of a 2×2 symmetric positive-definite matrix
/// `[[a, b], [b, d]]`, returned as `[w00, w01, w10, w11]`.
pub fn inv_sqrt_2x2(a: f64, b: f64, d: f64) -> [f64; 4] {
    let s = (a * d - b * b).max(0.0).sqrt();
    let t = (a + d + 2.0 * s).sqrt();
    // sqrt(C) = (C + sI)/t, so C^{-1/2} = t (C + sI)^{-1}
    let (p, q, r) = (a + s, b, d + s);
    let det = p * r - q * q;
    let k = t / det;
    [k * r, -k * q, -k * q, k * p]
}

/// `n × n` identity scaled by `v`.
pub fn scaled_identity(n: usize, v: f64) -> ComplexMatrix {
    ComplexMatrix::identity(n).scale(C64::new(v, 0.0))
}
