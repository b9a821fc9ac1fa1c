//! Closed-form hybrid precoding: KKT digital stage, sum-MSE forms, SINR and
//! rate, effective-channel estimation, and the two oracle baselines.
//!
//! Shapes: `H` is `M×K` (column k is user k's uplink channel), `F_RF` is
//! `M×N_RF`, `F_BB` is `N_RF×K`. Every inverse is a Hermitian solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::linalg::{gram_jitter, Cholesky};
use crate::tensor::{ComplexMatrix, C64};

/// Tolerance for the constant-modulus check on analog precoders.
pub const CM_TOL: f64 = 1e-9;

/// Verify `|F_ij| = 1/√M` for every entry.
pub fn check_constant_modulus(f_rf: &ComplexMatrix, tol: f64) -> Result<()> {
    let target = 1.0 / (f_rf.rows() as f64).sqrt();
    for (i, z) in f_rf.data().iter().enumerate() {
        if (z.norm() - target).abs() > tol {
            return Err(Error::Domain(format!(
                "entry {i} has modulus {:.12} instead of {target:.12}",
                z.norm()
            )));
        }
    }
    Ok(())
}

/// Project every entry onto the circle of radius `1/√M`; zeros map to `+1/√M`.
pub fn project_constant_modulus(f: &ComplexMatrix) -> ComplexMatrix {
    let a = 1.0 / (f.rows() as f64).sqrt();
    f.map(|z| {
        let r = z.norm();
        if r == 0.0 {
            C64::new(a, 0.0)
        } else {
            z * (a / r)
        }
    })
}

/// Analog precoder with i.i.d. uniform phases.
pub fn random_constant_modulus(m: usize, n_rf: usize, stream: &mut Stream) -> ComplexMatrix {
    let a = 1.0 / (m as f64).sqrt();
    ComplexMatrix::from_fn(m, n_rf, |_, _| stream.unit_phase() * a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DigitalPrecoder {
    pub f_bb: ComplexMatrix,
    pub beta: f64,
    pub f_bb_unnormalized: ComplexMatrix,
}

impl DigitalPrecoder {
    fn from_unnormalized(f_rf: &ComplexMatrix, f_tilde: ComplexMatrix, p_t: f64) -> Result<Self> {
        let power = f_rf.matmul(&f_tilde).frobenius_norm_sqr();
        if !(power > 0.0) || !power.is_finite() {
            return Err(Error::ZeroEffectiveChannel);
        }
        let beta = (p_t / power).sqrt();
        Ok(Self {
            f_bb: f_tilde.scale_real(beta),
            beta,
            f_bb_unnormalized: f_tilde,
        })
    }
}

/// `‖F_RF F_BB‖²_F`.
pub fn transmit_power(f_rf: &ComplexMatrix, f_bb: &ComplexMatrix) -> f64 {
    f_rf.matmul(f_bb).frobenius_norm_sqr()
}

/// Reject analog precoders whose Gram matrix is numerically singular.
fn check_full_column_rank(f_rf: &ComplexMatrix) -> Result<()> {
    let g = f_rf.adjoint_matmul(f_rf);
    let mut gj = g.clone();
    gj.add_diagonal(C64::new(gram_jitter(&g), 0.0));
    let chol = Cholesky::factor(&gj)?;
    let l = chol.factor_matrix();
    let scale = g.trace().re / g.rows().max(1) as f64;
    for i in 0..l.rows() {
        let pivot = l[(i, i)].re * l[(i, i)].re;
        if pivot <= 1e-10 * scale {
            return Err(Error::NotPositiveDefinite { pivot: i, value: pivot });
        }
    }
    Ok(())
}

/// `(ĤᴴĤ + (Kσ²/P_t)·F_RFᴴF_RF + εI + δI)⁻¹ Ĥᴴ` with `Ĥ` the `K×N_RF`
/// effective channel and `δ` the Gram jitter.
fn regularized_digital(
    h_eq: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    p_t: f64,
    sigma2: f64,
    damping: f64,
) -> Result<ComplexMatrix> {
    let k = h_eq.rows() as f64;
    let lam = k * sigma2 / p_t;
    let mut gram = &h_eq.adjoint_matmul(h_eq) + &f_rf.adjoint_matmul(f_rf).scale_real(lam);
    gram = gram.hermitian_part();
    let jitter = gram_jitter(&gram);
    gram.add_diagonal(C64::new(damping + jitter, 0.0));
    let chol = Cholesky::factor(&gram).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value } => Error::Domain(format!(
            "digital Gram matrix not positive definite at pivot {pivot} ({value:.3e}); increase the damping"
        )),
        other => other,
    })?;
    chol.solve(&h_eq.adjoint())
}

/// KKT closed-form digital precoder with the active-power scaling.
pub fn kkt_digital(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    p_t: f64,
    sigma2: f64,
) -> Result<DigitalPrecoder> {
    if h.rows() != f_rf.rows() {
        return Err(Error::Shape {
            op: "kkt_digital",
            left: h.shape(),
            right: f_rf.shape(),
        });
    }
    check_full_column_rank(f_rf)?;
    let h_eq = h.adjoint_matmul(f_rf);
    let f_tilde = regularized_digital(&h_eq, f_rf, p_t, sigma2, 0.0)?;
    DigitalPrecoder::from_unnormalized(f_rf, f_tilde, p_t)
}

/// Sum-MSE for an arbitrary `(F_BB, β)`:
/// `tr(I − β⁻¹F_BBᴴA − β⁻¹AᴴF_BB + β⁻²AᴴF_BBF_BBᴴA + β⁻²σ²I)`, `A = F_RFᴴH`.
pub fn sum_mse(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    f_bb: &ComplexMatrix,
    beta: f64,
    sigma2: f64,
) -> f64 {
    let k = h.cols() as f64;
    // E_eff = Hᴴ F_RF F_BB (K×K)
    let e = h.adjoint_matmul(f_rf).matmul(f_bb);
    let inv = 1.0 / beta;
    k - 2.0 * inv * e.trace().re + inv * inv * (e.frobenius_norm_sqr() + sigma2 * k)
}

/// Concentrated objective `tr((I + (P_t/(Kσ²))·HᴴF(FᴴF)⁻¹FᴴH)⁻¹)`.
pub fn concentrated_mse(h: &ComplexMatrix, f_rf: &ComplexMatrix, p_t: f64, sigma2: f64) -> Result<f64> {
    Ok(ConcentratedParts::new(h, f_rf, p_t, sigma2)?.value)
}

/// Intermediate terms of the concentrated objective, shared with its gradient.
struct ConcentratedParts {
    value: f64,
    gram: Cholesky,
    /// `FᴴH`, N×K.
    p: ComplexMatrix,
    /// `T = I + c·PᴴG⁻¹P`, factored.
    t: Cholesky,
    c: f64,
}

impl ConcentratedParts {
    fn new(h: &ComplexMatrix, f_rf: &ComplexMatrix, p_t: f64, sigma2: f64) -> Result<Self> {
        let k = h.cols();
        let c = p_t / (k as f64 * sigma2);
        let mut g = f_rf.adjoint_matmul(f_rf).hermitian_part();
        g.add_diagonal(C64::new(gram_jitter(&g), 0.0));
        let gram = Cholesky::factor(&g)?;
        let p = f_rf.adjoint_matmul(h);
        let x = gram.solve(&p)?;
        let mut t = p.adjoint_matmul(&x).scale_real(c).hermitian_part();
        t.add_diagonal(C64::new(1.0, 0.0));
        let t = Cholesky::factor(&t)?;
        let t_inv = t.solve(&ComplexMatrix::identity(k))?;
        Ok(Self {
            value: t_inv.trace().re,
            gram,
            p,
            t,
            c,
        })
    }
}

/// Concentrated objective and its gradient in the tape convention
/// (`∂E/∂Re F + j·∂E/∂Im F`):
/// `Ḡ = −2c·(I − Π)·H T⁻² Hᴴ·F G⁻¹`, with `Π = F G⁻¹ Fᴴ`.
pub fn concentrated_mse_gradient(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    p_t: f64,
    sigma2: f64,
) -> Result<(f64, ComplexMatrix)> {
    let parts = ConcentratedParts::new(h, f_rf, p_t, sigma2)?;
    let k = h.cols();
    let t_inv = parts.t.solve(&ComplexMatrix::identity(k))?;
    let t_inv2 = t_inv.matmul(&t_inv);
    // Z = H T⁻² Pᴴ G⁻¹  (M×N), using HᴴF = Pᴴ and G Hermitian.
    let w = parts.gram.solve(&parts.p)?; // G⁻¹P, N×K
    let z = h.matmul(&t_inv2).matmul_adjoint(&w);
    // (I − Π) Z = Z − F G⁻¹ Fᴴ Z
    let fz = f_rf.adjoint_matmul(&z);
    let proj = f_rf.matmul(&parts.gram.solve(&fz)?);
    let grad = (&z - &proj).scale_real(-2.0 * parts.c);
    Ok((parts.value, grad))
}

/// Per-user SINR and the sum rate in bps/Hz.
pub fn sinr_and_sum_rate(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    f_bb: &ComplexMatrix,
    sigma2: f64,
) -> (Vec<f64>, f64) {
    // row k of Hᴴ F_RF F_BB holds h_kᴴ F_RF f_i for every stream i
    let e = h.adjoint_matmul(f_rf).matmul(f_bb);
    let k = e.rows();
    let mut sinr = Vec::with_capacity(k);
    for u in 0..k {
        let row = e.row(u);
        let signal = row[u].norm_sqr();
        let interference: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != u)
            .map(|(_, z)| z.norm_sqr())
            .sum();
        sinr.push(signal / (interference + sigma2));
    }
    let rate = sinr.iter().map(|s| (1.0 + s).log2()).sum();
    (sinr, rate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveChannel {
    /// `K×N_RF`.
    pub h_eq: ComplexMatrix,
    pub repetitions: usize,
}

/// `Ĥ_eq = ((1/I)·Σ Ȳ⁽ⁱ⁾)ᴴ` over `N_RF×K` observation blocks.
pub fn estimate_effective_channel(observations: &[ComplexMatrix]) -> Result<EffectiveChannel> {
    let first = observations
        .first()
        .ok_or_else(|| Error::Domain("no observation blocks".into()))?;
    let mut acc = ComplexMatrix::zeros(first.rows(), first.cols());
    for y in observations {
        if y.shape() != first.shape() {
            return Err(Error::Shape {
                op: "estimate_effective_channel",
                left: first.shape(),
                right: y.shape(),
            });
        }
        acc += y;
    }
    let avg = acc.scale_real(1.0 / observations.len() as f64);
    Ok(EffectiveChannel {
        h_eq: avg.adjoint(),
        repetitions: observations.len(),
    })
}

/// Digital precoder from an estimated effective channel with damping `ε`.
pub fn digital_from_effective(
    h_eq: &EffectiveChannel,
    f_rf: &ComplexMatrix,
    p_t: f64,
    sigma2: f64,
    damping: f64,
) -> Result<DigitalPrecoder> {
    if !(damping >= 0.0) {
        return Err(Error::Domain(format!("damping must be ≥ 0, got {damping}")));
    }
    if h_eq.h_eq.cols() != f_rf.cols() {
        return Err(Error::Shape {
            op: "digital_from_effective",
            left: h_eq.h_eq.shape(),
            right: f_rf.shape(),
        });
    }
    let f_tilde = regularized_digital(&h_eq.h_eq, f_rf, p_t, sigma2, damping)?;
    DigitalPrecoder::from_unnormalized(f_rf, f_tilde, p_t)
}

/// Unconstrained MMSE precoder `F = β(HHᴴ + (Kσ²/P_t)I)⁻¹H`, computed as
/// `βH(HᴴH + (Kσ²/P_t)I)⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct FullyDigital {
    /// `M×K`.
    pub f: ComplexMatrix,
    pub beta: f64,
}

pub fn fully_digital_mmse(h: &ComplexMatrix, p_t: f64, sigma2: f64) -> Result<FullyDigital> {
    if h.max_abs() == 0.0 {
        return Err(Error::ZeroEffectiveChannel);
    }
    let k = h.cols();
    let lam = k as f64 * sigma2 / p_t;
    let mut g = h.adjoint_matmul(h).hermitian_part();
    g.add_diagonal(C64::new(lam, 0.0));
    let inv = Cholesky::factor(&g)?.solve(&ComplexMatrix::identity(k))?;
    let f_tilde = h.matmul(&inv);
    let power = f_tilde.frobenius_norm_sqr();
    if !(power > 0.0) {
        return Err(Error::ZeroEffectiveChannel);
    }
    let beta = (p_t / power).sqrt();
    Ok(FullyDigital {
        f: f_tilde.scale_real(beta),
        beta,
    })
}

impl FullyDigital {
    pub fn sum_mse(&self, h: &ComplexMatrix, sigma2: f64) -> f64 {
        let eye = ComplexMatrix::identity(h.rows());
        sum_mse(h, &eye, &self.f, self.beta, sigma2)
    }

    pub fn sinr_and_sum_rate(&self, h: &ComplexMatrix, sigma2: f64) -> (Vec<f64>, f64) {
        let eye = ComplexMatrix::identity(h.rows());
        sinr_and_sum_rate(h, &eye, &self.f, sigma2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceOptimizerConfig {
    pub n_iter: usize,
    /// First trial step; later iterations start from `step_growth` times
    /// the last accepted step.
    pub initial_step: f64,
    pub step_growth: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    /// Stop when the relative objective decrease of an accepted step falls
    /// below this value.
    pub tolerance: f64,
}

impl Default for ReferenceOptimizerConfig {
    fn default() -> Self {
        Self {
            n_iter: 500,
            initial_step: 1.0,
            step_growth: 4.0,
            backtrack_factor: 0.5,
            max_backtracks: 40,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReferenceResult {
    pub f_rf: ComplexMatrix,
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
    pub iterations: usize,
}

/// Drop the radial part of each entry's gradient so the step moves along
/// the circle `|f| = 1/√M`.
fn tangent_component(f: &ComplexMatrix, grad: &ComplexMatrix) -> ComplexMatrix {
    f.zip_map(grad, |fi, gi| {
        let r = fi.norm();
        if r == 0.0 {
            return gi;
        }
        let u = fi / r;
        gi - u * (gi * u.conj()).re
    })
}

/// Projected-gradient minimization of the concentrated objective over
/// constant-modulus precoders, starting from `init`.
///
/// Each iteration steps along the tangent part of the gradient, projects
/// every entry back to modulus `1/√M`, and halves the step until the
/// objective decreases.
pub fn projected_gradient_from(
    h: &ComplexMatrix,
    init: ComplexMatrix,
    config: &ReferenceOptimizerConfig,
    p_t: f64,
    sigma2: f64,
) -> Result<ReferenceResult> {
    let mut f = project_constant_modulus(&init);
    let (mut obj, mut grad) = concentrated_mse_gradient(h, &f, p_t, sigma2)?;
    let mut trace = vec![obj];
    let mut iterations = 0;
    let mut step = config.initial_step;
    for _ in 0..config.n_iter {
        iterations += 1;
        let dir = tangent_component(&f, &grad);
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let cand = project_constant_modulus(&(&f - &dir.scale_real(step)));
            if let Ok(val) = concentrated_mse(h, &cand, p_t, sigma2) {
                if val < obj {
                    accepted = Some((cand, val));
                    break;
                }
            }
            step *= config.backtrack_factor;
        }
        let Some((cand, val)) = accepted else { break };
        step *= config.step_growth;
        let decrease = (obj - val) / obj.abs().max(f64::MIN_POSITIVE);
        f = cand;
        let (v, g) = concentrated_mse_gradient(h, &f, p_t, sigma2)?;
        obj = v;
        grad = g;
        trace.push(val);
        if decrease < config.tolerance {
            break;
        }
    }
    Ok(ReferenceResult {
        f_rf: f,
        objective: obj,
        trace,
        iterations,
    })
}

/// Projected-gradient reference from a random-phase start.
pub fn projected_gradient_reference(
    h: &ComplexMatrix,
    n_rf: usize,
    config: &ReferenceOptimizerConfig,
    p_t: f64,
    sigma2: f64,
    stream: &mut Stream,
) -> Result<ReferenceResult> {
    let init = random_constant_modulus(h.rows(), n_rf, stream);
    projected_gradient_from(h, init, config, p_t, sigma2)
}
