//! Reverse-mode automatic differentiation over complex matrices.
//!
//! # Gradient convention
//!
//! For a real loss `L` and a complex node `Z = X + jY`, the stored gradient
//! is the real-pair gradient
//!
//! ```text
//! Ḡ_Z = ∂L/∂X + j·∂L/∂Y  = 2·∂L/∂Z̄
//! ```
//!
//! i.e. twice the Wirtinger cogradient. Steepest descent is `Z ← Z − η·Ḡ_Z`,
//! and the real and imaginary parts of `Ḡ_Z` are exactly what a central
//! finite difference on each real component measures. The optimizer treats
//! every complex parameter as a pair of reals under this convention.
//!
//! With this convention `dL = Re tr(Ḡ_Zᴴ dZ)`, and for an elementwise map
//! `y = f(x, x̄)` the chain rule reads
//! `Ḡ_x = conj(Ḡ_y)·∂y/∂x̄ + Ḡ_y·conj(∂y/∂x)`.
//!
//! # Adjoint rules
//!
//! | primitive | forward | adjoint |
//! |---|---|---|
//! | add / sub | `A ± B` | `Ḡ_A = Ḡ`, `Ḡ_B = ±Ḡ` |
//! | scale | `cA` | `c̄·Ḡ` |
//! | conj | `Ā` | `conj(Ḡ)` |
//! | transpose | `Aᵀ` | `Ḡᵀ` |
//! | adjoint | `Aᴴ` | `Ḡᴴ` |
//! | matmul | `AB` | `Ḡ_A = Ḡ Bᴴ`, `Ḡ_B = Aᴴ Ḡ` |
//! | mul (elementwise) | `A∘B` | `Ḡ_A = Ḡ∘B̄`, `Ḡ_B = Ḡ∘Ā` |
//! | div (elementwise) | `A⊘B` | `Ḡ_A = Ḡ⊘B̄`, `Ḡ_B = −Ḡ∘conj(Y⊘B)` |
//! | abs | `|A|` | `Re(Ḡ)·A/|A|` (0 where `A = 0`) |
//! | re / im | `Re A`, `Im A` | `Re(Ḡ)`, `j·Re(Ḡ)` |
//! | join | `Re A + j Re B` | `Ḡ_A = Re Ḡ`, `Ḡ_B = Im Ḡ` |
//! | tanh | `tanh(Re A)` | `Re(Ḡ)(1 − Y²)` |
//! | ctanh | `tanh(Re A) + j tanh(Im A)` | `Re Ḡ (1 − (Re Y)²) + j Im Ḡ (1 − (Im Y)²)` |
//! | trace | `tr A` | `Ḡ·I` |
//! | solve | `X = A⁻¹B`, `A` Hermitian PD | `Ḡ_B = A⁻¹Ḡ`, `Ḡ_A = −Ḡ_B Xᴴ` |
//! | whiten | per row: `W(x − μ)`, `W = (C + εI)^{-1/2}` | see [`whiten_backward`] |
//! | whiten (fixed stats) | per row: `W(x − μ)` | `Wᵀ g` |
//! | affine2 | per row: `Γ x̃ + β`, `Γ` real 2×2 | `Ḡ_x = Γᵀ g`, `Ḡ_Γ = Σ g x̃ᵀ`, `Ḡ_β = Σ Ḡ` |
//! | add bias | `A + b 1ᵀ` | `Ḡ_b = Ḡ 1` |
//! | cm normalize | `s·x/(|x| + ε)`, `0 ↦ s` | elementwise Wirtinger rule |
//! | hstack / vstack / slice / reshape | structural | scatter / gather |
//! | mean | `(1/n) Σ Aᵢ` | `Ḡ/n` each |
//!
//! Real-valued matrices live in complex storage with zero imaginary part.
//! Opaque nodes carry forward values computed elsewhere and have no adjoint;
//! differentiating through one is an error.

use std::ops::Range;

use super::linalg::{gram_jitter, Cholesky};
use super::matrix::{ComplexMatrix, C64, ONE, ZERO};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct WhitenRow {
    mean: C64,
    /// `C + εI` as `(a, b, d)`.
    cov: (f64, f64, f64),
    w: [f64; 4],
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, C64),
    Conj(Var),
    Transpose(Var),
    Adjoint(Var),
    MatMul(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Abs(Var),
    Re(Var),
    Im(Var),
    Join(Var, Var),
    Tanh(Var),
    CTanh(Var),
    Trace(Var),
    Solve { a: Var, b: Var, factor: Cholesky },
    Whiten { x: Var, rows: Vec<WhitenRow> },
    WhitenFixed { x: Var, w: Vec<[f64; 4]> },
    Affine2 { x: Var, gamma: Var, beta: Var },
    AddBias(Var, Var),
    CmNormalize { x: Var, eps: f64, scale: f64 },
    HStack(Vec<Var>),
    VStack(Vec<Var>),
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    Reshape(Var),
    Mean(Vec<Var>),
    Opaque { name: String },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Conj(_) => "conj",
            Op::Transpose(_) => "transpose",
            Op::Adjoint(_) => "adjoint",
            Op::MatMul(..) => "matmul",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Abs(_) => "abs",
            Op::Re(_) => "re",
            Op::Im(_) => "im",
            Op::Join(..) => "join",
            Op::Tanh(_) => "tanh",
            Op::CTanh(_) => "ctanh",
            Op::Trace(_) => "trace",
            Op::Solve { .. } => "solve",
            Op::Whiten { .. } => "whiten",
            Op::WhitenFixed { .. } => "whiten_fixed",
            Op::Affine2 { .. } => "affine2",
            Op::AddBias(..) => "add_bias",
            Op::CmNormalize { .. } => "cm_normalize",
            Op::HStack(_) => "hstack",
            Op::VStack(_) => "vstack",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Mean(_) => "mean",
            Op::Opaque { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: ComplexMatrix,
    op: Op,
    requires_grad: bool,
}

/// Per-row batch statistics produced by a training-mode whitening node.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<C64>,
    /// Biased 2×2 covariance `(var_re, cov_re_im, var_im)` without ε.
    pub cov: Vec<(f64, f64, f64)>,
}

/// A computation graph recorded in evaluation order.
#[derive(Default, Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &ComplexMatrix, b: &ComplexMatrix) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ComplexMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ComplexMatrix, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: ComplexMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: ComplexMatrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Record a value computed outside the tape. Backward through it fails
    /// with [`Error::NoAdjoint`] naming `name`.
    pub fn opaque(&mut self, name: &str, value: ComplexMatrix, parents: &[Var]) -> Var {
        self.push_op(
            value,
            Op::Opaque {
                name: name.to_string(),
            },
            parents,
        )
    }

    pub fn value(&self, v: Var) -> &ComplexMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let v = x + y;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let v = x - y;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: C64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(v, Op::Scale(a, c), &[a])
    }

    pub fn scale_real(&mut self, a: Var, c: f64) -> Var {
        self.scale(a, C64::new(c, 0.0))
    }

    pub fn conj(&mut self, a: Var) -> Var {
        let v = self.value(a).conj();
        self.push_op(v, Op::Conj(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    pub fn adjoint(&mut self, a: Var) -> Var {
        let v = self.value(a).adjoint();
        self.push_op(v, Op::Adjoint(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err("matmul", x, y));
        }
        let v = x.matmul(y);
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let v = x.hadamard(y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("div", x, y));
        }
        let v = x.zip_map(y, |p, q| p / q);
        Ok(self.push_op(v, Op::Div(a, b), &[a, b]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|z| C64::new(z.norm(), 0.0));
        self.push_op(v, Op::Abs(a), &[a])
    }

    pub fn re(&mut self, a: Var) -> Var {
        let v = self.value(a).real_part();
        self.push_op(v, Op::Re(a), &[a])
    }

    pub fn im(&mut self, a: Var) -> Var {
        let v = self.value(a).imag_part();
        self.push_op(v, Op::Im(a), &[a])
    }

    /// `Re(a) + j·Re(b)`.
    pub fn join(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("join", x, y));
        }
        let v = x.zip_map(y, |p, q| C64::new(p.re, q.re));
        Ok(self.push_op(v, Op::Join(a, b), &[a, b]))
    }

    /// Real tanh of the real part.
    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|z| C64::new(z.re.tanh(), 0.0));
        self.push_op(v, Op::Tanh(a), &[a])
    }

    /// `tanh(Re x) + j·tanh(Im x)` elementwise.
    pub fn ctanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ctanh);
        self.push_op(v, Op::CTanh(a), &[a])
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_square() {
            return Err(shape_err("trace", x, x));
        }
        let v = ComplexMatrix::scalar(x.trace());
        Ok(self.push_op(v, Op::Trace(a), &[a]))
    }

    /// `A⁻¹B` for Hermitian positive-definite `A` through a Cholesky factor.
    pub fn solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.is_square() || x.rows() != y.rows() {
            return Err(shape_err("solve", x, y));
        }
        let factor = Cholesky::factor(x)?;
        let v = factor.solve(y)?;
        Ok(self.push_op(v, Op::Solve { a, b, factor }, &[a, b]))
    }

    /// `A + δI` with the Gram jitter `δ = 1e-12·tr(A)/n` held constant.
    pub fn add_jitter(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_square() {
            return Err(shape_err("jitter", x, x));
        }
        let delta = gram_jitter(x);
        let j = self.constant(ComplexMatrix::identity(x.rows()).scale_real(delta));
        self.add(a, j)
    }

    /// Training-mode complex whitening: each row is treated as a batch of
    /// bivariate samples `(Re, Im)` across columns, centered by its batch
    /// mean and whitened by `(C + εI)^{-1/2}`.
    pub fn whiten(&mut self, a: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let x = self.value(a);
        let (d, n) = x.shape();
        if n < 2 {
            return Err(Error::Domain(format!(
                "batch whitening needs at least 2 samples, got {n}"
            )));
        }
        let mut out = ComplexMatrix::zeros(d, n);
        let mut rows = Vec::with_capacity(d);
        let mut stats = BatchStats {
            mean: Vec::with_capacity(d),
            cov: Vec::with_capacity(d),
        };
        let inv_n = 1.0 / n as f64;
        for i in 0..d {
            let row = x.row(i);
            let mean = row.iter().sum::<C64>() * inv_n;
            let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
            for &z in row {
                let c = z - mean;
                saa += c.re * c.re;
                sab += c.re * c.im;
                sbb += c.im * c.im;
            }
            let cov = (saa * inv_n, sab * inv_n, sbb * inv_n);
            let reg = (cov.0 + eps, cov.1, cov.2 + eps);
            let w = super::linalg::inv_sqrt_2x2(reg.0, reg.1, reg.2);
            for (j, &z) in row.iter().enumerate() {
                let c = z - mean;
                out[(i, j)] = C64::new(w[0] * c.re + w[1] * c.im, w[2] * c.re + w[3] * c.im);
            }
            stats.mean.push(mean);
            stats.cov.push(cov);
            rows.push(WhitenRow {
                mean,
                cov: reg,
                w,
            });
        }
        let v = self.push_op(out, Op::Whiten { x: a, rows }, &[a]);
        Ok((v, stats))
    }

    /// Inference-mode whitening with frozen per-row statistics: `W_i(x − μ_i)`.
    pub fn whiten_fixed(&mut self, a: Var, mean: &[C64], w: &[[f64; 4]]) -> Result<Var> {
        let x = self.value(a);
        if mean.len() != x.rows() || w.len() != x.rows() {
            return Err(Error::Shape {
                op: "whiten_fixed",
                left: x.shape(),
                right: (mean.len(), w.len()),
            });
        }
        let out = ComplexMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            let c = x[(i, j)] - mean[i];
            let w = &w[i];
            C64::new(w[0] * c.re + w[1] * c.im, w[2] * c.re + w[3] * c.im)
        });
        Ok(self.push_op(out, Op::WhitenFixed { x: a, w: w.to_vec() }, &[a]))
    }

    /// Per-row real 2×2 affine map on `(Re, Im)` plus a complex shift.
    /// `gamma` is `D×4` holding `[γ00, γ01, γ10, γ11]` in its real parts and
    /// `beta` is `D×1`.
    pub fn affine2(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        if g.shape() != (x.rows(), 4) || b.shape() != (x.rows(), 1) {
            return Err(shape_err("affine2", x, g));
        }
        let out = ComplexMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            let z = x[(i, j)];
            let gr = g.row(i);
            C64::new(
                gr[0].re * z.re + gr[1].re * z.im,
                gr[2].re * z.re + gr[3].re * z.im,
            ) + b[(i, 0)]
        });
        Ok(self.push_op(out, Op::Affine2 { x: a, gamma, beta }, &[a, gamma, beta]))
    }

    /// `A + b·1ᵀ` for a column vector `b`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.shape() != (x.rows(), 1) {
            return Err(shape_err("add_bias", x, b));
        }
        let out = ComplexMatrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] + b[(i, 0)]);
        Ok(self.push_op(out, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Elementwise `scale·x/(|x| + eps)`; exact zeros map to `scale`.
    pub fn cm_normalize(&mut self, a: Var, eps: f64, scale: f64) -> Var {
        let v = self.value(a).map(|z| cm_entry(z, eps, scale));
        self.push_op(v, Op::CmNormalize { x: a, eps, scale }, &[a])
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&ComplexMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        if mats.is_empty() || mats.iter().any(|m| m.rows() != mats[0].rows()) {
            return Err(Error::Domain("hstack needs parts with equal row counts".into()));
        }
        let v = ComplexMatrix::hstack(&mats);
        Ok(self.push_op(v, Op::HStack(parts.to_vec()), parts))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&ComplexMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        if mats.is_empty() || mats.iter().any(|m| m.cols() != mats[0].cols()) {
            return Err(Error::Domain("vstack needs parts with equal column counts".into()));
        }
        let v = ComplexMatrix::vstack(&mats);
        Ok(self.push_op(v, Op::VStack(parts.to_vec()), parts))
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let x = self.value(a);
        if rows.end > x.rows() || cols.end > x.cols() || rows.is_empty() || cols.is_empty() {
            return Err(Error::Shape {
                op: "slice",
                left: x.shape(),
                right: (rows.end, cols.end),
            });
        }
        let v = x.slice(rows.clone(), cols.clone());
        Ok(self.push_op(v, Op::Slice { x: a, rows, cols }, &[a]))
    }

    /// Column-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: x.shape(),
                right: (rows, cols),
            });
        }
        let v = x.reshape_col_major(rows, cols);
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p).shape(),
            None => return Err(Error::Domain("mean over an empty list".into())),
        };
        let mut acc = ComplexMatrix::zeros(first.0, first.1);
        for &p in parts {
            let x = self.value(p);
            if x.shape() != first {
                return Err(shape_err("mean", &acc, x));
            }
            acc += x;
        }
        let v = acc.scale_real(1.0 / parts.len() as f64);
        Ok(self.push_op(v, Op::Mean(parts.to_vec()), parts))
    }

    /// Reverse sweep from a real scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotRealScalar(format!("shape {:?}", lv.shape())));
        }
        let z = lv[(0, 0)];
        if z.im.abs() > 1e-12 * z.re.abs().max(1.0) || !z.re.is_finite() {
            return Err(Error::NotRealScalar(format!("value {z}")));
        }
        self.backward_seeded(loss, ComplexMatrix::scalar(ONE))
    }

    /// Reverse sweep with an explicit output gradient, i.e. the vector–Jacobian
    /// product of `L = Re tr(seedᴴ·output)`.
    pub fn backward_seeded(&self, output: Var, seed: ComplexMatrix) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward seed", &seed, self.value(output)));
        }
        let mut grads: Vec<Option<ComplexMatrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let mut acc = |v: Var, contrib: ComplexMatrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf | Op::Constant => {
                    // Leaves keep their gradient.
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Scale(a, c) => acc(*a, g.scale(c.conj())),
                Op::Conj(a) => acc(*a, g.conj()),
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Adjoint(a) => acc(*a, g.adjoint()),
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, g.matmul_adjoint(self.value(*b)));
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, self.value(*a).adjoint_matmul(&g));
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc(*a, g.zip_map(y, |gi, yi| gi * yi.conj()));
                    acc(*b, g.zip_map(x, |gi, xi| gi * xi.conj()));
                }
                Op::Div(a, b) => {
                    let y = self.value(*b);
                    let out = &node.value;
                    acc(*a, g.zip_map(y, |gi, yi| gi / yi.conj()));
                    let gb = ComplexMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        -g[(i, j)] * (out[(i, j)] / y[(i, j)]).conj()
                    });
                    acc(*b, gb);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    acc(
                        *a,
                        g.zip_map(x, |gi, xi| {
                            let r = xi.norm();
                            if r == 0.0 {
                                ZERO
                            } else {
                                xi * (gi.re / r)
                            }
                        }),
                    );
                }
                Op::Re(a) => acc(*a, g.map(|gi| C64::new(gi.re, 0.0))),
                Op::Im(a) => acc(*a, g.map(|gi| C64::new(0.0, gi.re))),
                Op::Join(a, b) => {
                    acc(*a, g.map(|gi| C64::new(gi.re, 0.0)));
                    acc(*b, g.map(|gi| C64::new(gi.im, 0.0)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(*a, g.zip_map(y, |gi, yi| C64::new(gi.re * (1.0 - yi.re * yi.re), 0.0)));
                }
                Op::CTanh(a) => {
                    let y = &node.value;
                    acc(
                        *a,
                        g.zip_map(y, |gi, yi| {
                            C64::new(gi.re * (1.0 - yi.re * yi.re), gi.im * (1.0 - yi.im * yi.im))
                        }),
                    );
                }
                Op::Trace(a) => {
                    let n = self.value(*a).rows();
                    acc(*a, ComplexMatrix::identity(n).scale(g[(0, 0)]));
                }
                Op::Solve { a, b, factor } => {
                    let gb = factor.solve(&g)?;
                    if self.nodes[a.0].requires_grad {
                        acc(*a, -&gb.matmul_adjoint(&node.value));
                    }
                    acc(*b, gb);
                }
                Op::Whiten { x, rows } => {
                    let gx = whiten_backward(self.value(*x), rows, &g);
                    acc(*x, gx);
                }
                Op::WhitenFixed { x, w } => {
                    let gx = ComplexMatrix::from_fn(g.rows(), g.cols(), |i, j| {
                        let gi = g[(i, j)];
                        let w = &w[i];
                        C64::new(w[0] * gi.re + w[2] * gi.im, w[1] * gi.re + w[3] * gi.im)
                    });
                    acc(*x, gx);
                }
                Op::Affine2 { x, gamma, beta } => {
                    let (xv, gv) = (self.value(*x), self.value(*gamma));
                    let (d, n) = xv.shape();
                    let gx = ComplexMatrix::from_fn(d, n, |i, j| {
                        let gi = g[(i, j)];
                        let gr = gv.row(i);
                        C64::new(
                            gr[0].re * gi.re + gr[2].re * gi.im,
                            gr[1].re * gi.re + gr[3].re * gi.im,
                        )
                    });
                    let mut ggamma = ComplexMatrix::zeros(d, 4);
                    let mut gbeta = ComplexMatrix::zeros(d, 1);
                    for i in 0..d {
                        let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                        let mut sb = ZERO;
                        for j in 0..n {
                            let gi = g[(i, j)];
                            let z = xv[(i, j)];
                            s0 += gi.re * z.re;
                            s1 += gi.re * z.im;
                            s2 += gi.im * z.re;
                            s3 += gi.im * z.im;
                            sb += gi;
                        }
                        ggamma[(i, 0)] = C64::new(s0, 0.0);
                        ggamma[(i, 1)] = C64::new(s1, 0.0);
                        ggamma[(i, 2)] = C64::new(s2, 0.0);
                        ggamma[(i, 3)] = C64::new(s3, 0.0);
                        gbeta[(i, 0)] = sb;
                    }
                    acc(*x, gx);
                    acc(*gamma, ggamma);
                    acc(*beta, gbeta);
                }
                Op::AddBias(a, b) => {
                    let gb = ComplexMatrix::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::CmNormalize { x, eps, scale } => {
                    let xv = self.value(*x);
                    let gx = g.zip_map(xv, |gi, xi| cm_adjoint(gi, xi, *eps, *scale));
                    acc(*x, gx);
                }
                Op::HStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        acc(p, g.slice(0..g.rows(), offset..offset + c));
                        offset += c;
                    }
                }
                Op::VStack(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        acc(p, g.slice(offset..offset + r, 0..g.cols()));
                        offset += r;
                    }
                }
                Op::Slice { x, rows, cols } => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = ComplexMatrix::zeros(r, c);
                    for (i, ii) in rows.clone().enumerate() {
                        for (j, jj) in cols.clone().enumerate() {
                            gx[(ii, jj)] = g[(i, j)];
                        }
                    }
                    acc(*x, gx);
                }
                Op::Reshape(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(*x, g.reshape_col_major(r, c));
                }
                Op::Mean(parts) => {
                    let gi = g.scale_real(1.0 / parts.len() as f64);
                    for &p in parts {
                        acc(p, gi.clone());
                    }
                }
                Op::Opaque { .. } => {
                    return Err(Error::NoAdjoint {
                        primitive: node.op.name().to_string(),
                    })
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients indexed by node; leaves that the loss does not reach have none.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<ComplexMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ComplexMatrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape when `v` does not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> ComplexMatrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ComplexMatrix::zeros(shape.0, shape.1))
    }
}

#[inline]
pub fn ctanh(z: C64) -> C64 {
    C64::new(z.re.tanh(), z.im.tanh())
}

#[inline]
pub fn cm_entry(z: C64, eps: f64, scale: f64) -> C64 {
    let r = z.norm();
    if r == 0.0 {
        C64::new(scale, 0.0)
    } else {
        z * (scale / (r + eps))
    }
}

#[inline]
fn cm_adjoint(g: C64, x: C64, eps: f64, scale: f64) -> C64 {
    let r = x.norm();
    if r == 0.0 {
        return ZERO;
    }
    let re = r + eps;
    // ∂y/∂x (real) and ∂y/∂x̄ for y = s·x/(|x| + ε)
    let dy_dx = scale / re - scale * r / (2.0 * re * re);
    let dy_dxbar = -(x * x) * (scale / (2.0 * r * re * re));
    g.conj() * dy_dxbar + g * dy_dx
}

/// Adjoint of the batch whitening `x̃_j = W(x_j − μ)` with
/// `C = (1/n)Σ c_j c_jᵀ + εI`, `W = C^{-1/2}`.
///
/// With upstream real pairs `g_j`, `S = Σ g_j c_jᵀ` and `C = U diag(λ) Uᵀ`,
/// the Fréchet derivative of `C ↦ C^{-1/2}` gives
/// `Ḡ_C = U (P ∘ Uᵀ sym(S) U) Uᵀ` with
/// `P_ab = −1/(√λ_a √λ_b (√λ_a + √λ_b))`. Then
/// `Ḡ_{c_j} = W g_j + (2/n) Ḡ_C c_j`, and centering subtracts the mean of
/// `Ḡ_{c_j}` over the batch.
pub fn whiten_backward_row(
    x: &[C64],
    mean: C64,
    cov: (f64, f64, f64),
    w: &[f64; 4],
    g: &[C64],
) -> Vec<C64> {
    let n = x.len();
    let (a, b, d) = cov;
    let (mut s00, mut s01, mut s10, mut s11) = (0.0, 0.0, 0.0, 0.0);
    for (&xj, &gj) in x.iter().zip(g) {
        let c = xj - mean;
        s00 += gj.re * c.re;
        s01 += gj.re * c.im;
        s10 += gj.im * c.re;
        s11 += gj.im * c.im;
    }
    let sym01 = 0.5 * (s01 + s10);

    // eigen-decomposition of [[a, b], [b, d]]
    let half_tr = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let l1 = half_tr + disc;
    let l2 = (half_tr - disc).max(f64::MIN_POSITIVE);
    let (u00, u10) = if b.abs() > 1e-300 || (a - d).abs() > 0.0 {
        // eigenvector for l1
        let (vx, vy) = if (a - l2).abs() >= (d - l2).abs() {
            (a - l2, b)
        } else {
            (b, d - l2)
        };
        let nrm = (vx * vx + vy * vy).sqrt();
        if nrm > 0.0 {
            (vx / nrm, vy / nrm)
        } else {
            (1.0, 0.0)
        }
    } else {
        (1.0, 0.0)
    };
    let (u01, u11) = (-u10, u00);
    // K = Uᵀ sym(S) U
    let su = |r0: f64, r1: f64| -> (f64, f64) {
        // sym(S) · (r0, r1)
        (s00 * r0 + sym01 * r1, sym01 * r0 + s11 * r1)
    };
    let (t0, t1) = su(u00, u10);
    let (t2, t3) = su(u01, u11);
    let k00 = u00 * t0 + u10 * t1;
    let k01 = u00 * t2 + u10 * t3;
    let k11 = u01 * t2 + u11 * t3;
    let (r1, r2) = (l1.sqrt(), l2.sqrt());
    let p = |ra: f64, rb: f64| -1.0 / (ra * rb * (ra + rb));
    let m00 = p(r1, r1) * k00;
    let m01 = p(r1, r2) * k01;
    let m11 = p(r2, r2) * k11;
    // Ḡ_C = U M Uᵀ
    let gc00 = u00 * u00 * m00 + 2.0 * u00 * u01 * m01 + u01 * u01 * m11;
    let gc01 = u00 * u10 * m00 + (u00 * u11 + u01 * u10) * m01 + u01 * u11 * m11;
    let gc11 = u10 * u10 * m00 + 2.0 * u10 * u11 * m01 + u11 * u11 * m11;

    let k = 2.0 / n as f64;
    let mut out: Vec<C64> = x
        .iter()
        .zip(g)
        .map(|(&xj, &gj)| {
            let c = xj - mean;
            let dr = w[0] * gj.re + w[2] * gj.im + k * (gc00 * c.re + gc01 * c.im);
            let di = w[1] * gj.re + w[3] * gj.im + k * (gc01 * c.re + gc11 * c.im);
            C64::new(dr, di)
        })
        .collect();
    let avg = out.iter().sum::<C64>() / n as f64;
    for o in &mut out {
        *o -= avg;
    }
    out
}

fn whiten_backward(x: &ComplexMatrix, rows: &[WhitenRow], g: &ComplexMatrix) -> ComplexMatrix {
    let (d, n) = x.shape();
    let mut out = ComplexMatrix::zeros(d, n);
    for (i, r) in rows.iter().enumerate() {
        let gx = whiten_backward_row(x.row(i), r.mean, r.cov, &r.w, g.row(i));
        for (j, v) in gx.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}
