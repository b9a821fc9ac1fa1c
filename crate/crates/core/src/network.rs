//! Complex-valued precoder network: grouped sensing bank, shared per-user
//! MLP with complex batch normalization and split tanh, and a merged head
//! that emits a constant-modulus analog precoder.
//!
//! Batched layout (B samples, K users): channels are stacked side by side
//! into `M×(B·K)`, sensing produces `NK×(B·K)` (one column per sample-user
//! pair), the MLP keeps that column layout, and the head reshapes the
//! `D_P×(B·K)` features column-major into `(K·D_P)×B` so that column `b`
//! is the user-ordered concatenation for sample `b`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_store, write_store, F64Writer, Manifest};
use crate::rng::Stream;
use crate::tensor::autodiff::BatchStats;
use crate::tensor::linalg::inv_sqrt_2x2;
use crate::tensor::{ComplexMatrix, Tape, Var, C64};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CM_EPS: f64 = 1e-12;

const CHECKPOINT_FORMAT: &str = "xlhbf-network";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Indirect,
    Direct,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Indirect => "indirect",
            Mode::Direct => "direct",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indirect" => Ok(Mode::Indirect),
            "direct" => Ok(Mode::Direct),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Shape of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDims {
    pub m: usize,
    pub k: usize,
    pub n_rf: usize,
    /// Sensing slots.
    pub n: usize,
    /// Hidden widths `D_1..D_P`.
    pub hidden: Vec<usize>,
}

impl NetworkDims {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n_rf == 0 || self.n == 0 {
            return Err(Error::Config(format!("network dims must be positive: {self:?}")));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be a nonempty list of positive sizes".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.n * self.k
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated dims")
    }
}

/// Per-slot combiners `Φ⁽ⁿ⁾`, each `K×M`, no bias and no modulus constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingBank {
    pub kernels: Vec<ComplexMatrix>,
}

impl SensingBank {
    /// All slots stacked into `NK×M`.
    pub fn stacked(&self) -> ComplexMatrix {
        let parts: Vec<&ComplexMatrix> = self.kernels.iter().collect();
        ComplexMatrix::vstack(&parts)
    }

    /// Measurements `Y = [Φ⁽¹⁾(H + V₁); …; Φ⁽ᴺ⁾(H + V_N)]` for one or more
    /// channels stacked side by side. With `noise = None` this is the plain
    /// linear map.
    pub fn measure(&self, h: &ComplexMatrix, noise: Option<(f64, &mut Stream)>) -> Result<ComplexMatrix> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.kernels.iter().map(|k| tape.constant(k.clone())).collect();
        let hv = tape.constant(h.clone());
        let y = sensing_on_tape(&mut tape, &vars, hv, noise)?;
        Ok(tape.value(y).clone())
    }
}

fn sensing_on_tape(
    tape: &mut Tape,
    kernels: &[Var],
    h: Var,
    mut noise: Option<(f64, &mut Stream)>,
) -> Result<Var> {
    let (m, cols) = tape.shape(h);
    let mut slots = Vec::with_capacity(kernels.len());
    for &phi in kernels {
        if tape.shape(phi).1 != m {
            return Err(Error::Shape {
                op: "sensing",
                left: tape.shape(phi),
                right: (m, cols),
            });
        }
        let input = match noise.as_mut() {
            Some((var, stream)) if *var > 0.0 => {
                let v = tape.constant(stream.complex_normal_matrix(m, cols, *var));
                tape.add(h, v)?
            }
            _ => h,
        };
        slots.push(tape.matmul(phi, input)?);
    }
    tape.vstack(&slots)
}

/// Running statistics of one complex batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<C64>,
    /// `(var_re, cov_re_im, var_im)` per feature.
    pub cov: Vec<(f64, f64, f64)>,
}

impl BnRunning {
    fn new(d: usize) -> Self {
        Self {
            mean: vec![C64::new(0.0, 0.0); d],
            cov: vec![(1.0, 0.0, 1.0); d],
        }
    }

    /// Exponential moving average with the unbiased batch covariance.
    pub fn update(&mut self, mean: &[C64], cov: &[(f64, f64, f64)], batch: usize, momentum: f64) {
        let corr = if batch > 1 { batch as f64 / (batch - 1) as f64 } else { 1.0 };
        for i in 0..self.mean.len() {
            self.mean[i] = self.mean[i] * (1.0 - momentum) + mean[i] * momentum;
            let (a, b, d) = self.cov[i];
            let (x, y, z) = cov[i];
            self.cov[i] = (
                a * (1.0 - momentum) + x * corr * momentum,
                b * (1.0 - momentum) + y * corr * momentum,
                d * (1.0 - momentum) + z * corr * momentum,
            );
        }
    }

    fn whitening(&self, eps: f64) -> Vec<[f64; 4]> {
        self.cov.iter().map(|&(a, b, d)| inv_sqrt_2x2(a + eps, b, d + eps)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpBlock {
    /// `D_p × D_{p−1}`.
    pub weight: ComplexMatrix,
    /// `D_p × 1`.
    pub bias: ComplexMatrix,
    /// `D_p × 4`, real parts hold `[γ00, γ01, γ10, γ11]`.
    pub gamma: ComplexMatrix,
    /// `D_p × 1`.
    pub beta: ComplexMatrix,
    pub running: BnRunning,
}

impl MlpBlock {
    fn bn_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        bn: BnMode,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (white, stats) = match bn {
            BnMode::Batch => {
                let (w, s) = tape.whiten(x, eps)?;
                (w, Some(s))
            }
            BnMode::Running => {
                let w = self.running.whitening(eps);
                (tape.whiten_fixed(x, &self.running.mean, &w)?, None)
            }
        };
        Ok((tape.affine2(white, gamma, beta)?, stats))
    }

    /// Complex batch normalization of a `D_p×B` batch (one sample per column).
    pub fn batch_norm(&self, x: &ComplexMatrix, bn: BnMode, eps: f64) -> Result<(ComplexMatrix, Option<BatchStats>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let (y, stats) = self.bn_on_tape(&mut tape, xv, g, b, bn, eps)?;
        Ok((tape.value(y).clone(), stats))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    /// `(M·N_RF) × (K·D_P)`.
    pub weight: ComplexMatrix,
    /// `(M·N_RF) × 1`.
    pub bias: ComplexMatrix,
    pub eps_cm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub dims: NetworkDims,
    pub mode: Mode,
    pub sensing: SensingBank,
    pub blocks: Vec<MlpBlock>,
    pub head: OutputHead,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

/// What the network is fed.
#[derive(Clone, Copy, Debug)]
pub enum NetworkInput<'a> {
    /// Channel matrices `M×K`; the sensing bank runs internally.
    Channels(&'a [ComplexMatrix]),
    /// Uplink measurements `NK×K`; the sensing bank is skipped.
    Measurements(&'a [ComplexMatrix]),
}

impl NetworkInput<'_> {
    fn len(&self) -> usize {
        match self {
            NetworkInput::Channels(x) | NetworkInput::Measurements(x) => x.len(),
        }
    }
}

/// How batch normalization behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics, reported back for the running averages.
    Batch,
    /// Frozen running statistics.
    Running,
}

/// Parameters placed on a tape, in [`NetworkParams::names`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub all: Vec<Var>,
    sensing: Vec<Var>,
    blocks: Vec<[Var; 4]>,
    head: [Var; 2],
}

/// Result of a batched forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// One `M×N_RF` precoder per sample.
    pub precoders: Vec<Var>,
    /// `D_P × (B·K)` shared-MLP output.
    pub features: Var,
    /// Batch mean and covariance per block in `BnMode::Batch`.
    pub bn_stats: Vec<BatchStats>,
    /// Number of columns each BN layer saw.
    pub bn_batch: usize,
}

impl NetworkParams {
    /// Fresh parameters. Sensing kernels are CN(0, 1/M), linear weights
    /// CN(0, 1/fan_in), biases and BN shifts zero, and BN scales `I/√2`.
    pub fn init(dims: NetworkDims, mode: Mode, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut s = Stream::new(seed, "network/init", 0);
        let kernels = (0..dims.n)
            .map(|_| s.complex_normal_matrix(dims.k, dims.m, 1.0 / dims.m as f64))
            .collect();
        let mut blocks = Vec::with_capacity(dims.hidden.len());
        let mut fan_in = dims.input_dim();
        let g = std::f64::consts::FRAC_1_SQRT_2;
        for &d in &dims.hidden {
            let gamma = ComplexMatrix::from_fn(d, 4, |_, j| C64::new(if j == 0 || j == 3 { g } else { 0.0 }, 0.0));
            blocks.push(MlpBlock {
                weight: s.complex_normal_matrix(d, fan_in, 1.0 / fan_in as f64),
                bias: ComplexMatrix::zeros(d, 1),
                gamma,
                beta: ComplexMatrix::zeros(d, 1),
                running: BnRunning::new(d),
            });
            fan_in = d;
        }
        let head_in = dims.k * dims.feature_dim();
        let head = OutputHead {
            weight: s.complex_normal_matrix(dims.m * dims.n_rf, head_in, 1.0 / head_in as f64),
            bias: ComplexMatrix::zeros(dims.m * dims.n_rf, 1),
            eps_cm: CM_EPS,
        };
        Ok(Self {
            dims,
            mode,
            sensing: SensingBank { kernels },
            blocks,
            head,
            bn_eps: BN_EPS,
            bn_momentum: BN_MOMENTUM,
            seed,
        })
    }

    /// Trainable tensor names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.sensing.kernels.len()).map(|n| format!("sensing.{n}")).collect();
        for p in 0..self.blocks.len() {
            for part in ["weight", "bias", "gamma", "beta"] {
                v.push(format!("block{p}.{part}"));
            }
        }
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    pub fn tensors(&self) -> Vec<&ComplexMatrix> {
        let mut v: Vec<&ComplexMatrix> = self.sensing.kernels.iter().collect();
        for b in &self.blocks {
            v.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ComplexMatrix> {
        let mut v: Vec<&mut ComplexMatrix> = self.sensing.kernels.iter_mut().collect();
        for b in &mut self.blocks {
            v.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    /// Complex entries across all trainable tensors.
    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Complex entries in the shared MLP; independent of `K`.
    pub fn mlp_parameters(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len() + b.gamma.len() + b.beta.len())
            .sum()
    }

    /// Place every tensor on the tape, as leaves when `trainable`.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut put = |m: &ComplexMatrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
        let sensing: Vec<Var> = self.sensing.kernels.iter().map(&mut put).collect();
        let blocks: Vec<[Var; 4]> = self
            .blocks
            .iter()
            .map(|b| [put(&b.weight), put(&b.bias), put(&b.gamma), put(&b.beta)])
            .collect();
        let head = [put(&self.head.weight), put(&self.head.bias)];
        let mut all = sensing.clone();
        for b in &blocks {
            all.extend_from_slice(b);
        }
        all.extend_from_slice(&head);
        ParamVars {
            all,
            sensing,
            blocks,
            head,
        }
    }

    /// Rebuild the grouped handles from vars in [`Self::names`] order.
    pub fn vars_from(&self, all: &[Var]) -> Result<ParamVars> {
        let n = self.sensing.kernels.len();
        let p = self.blocks.len();
        if all.len() != n + 4 * p + 2 {
            return Err(Error::Domain(format!(
                "expected {} parameter vars, got {}",
                n + 4 * p + 2,
                all.len()
            )));
        }
        let blocks = (0..p)
            .map(|i| {
                let b = &all[n + 4 * i..n + 4 * i + 4];
                [b[0], b[1], b[2], b[3]]
            })
            .collect();
        Ok(ParamVars {
            all: all.to_vec(),
            sensing: all[..n].to_vec(),
            blocks,
            head: [all[n + 4 * p], all[n + 4 * p + 1]],
        })
    }

    /// Shared MLP on a `NK×cols` input, one column per sample-user pair.
    pub fn mlp_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x: Var,
        bn: BnMode,
    ) -> Result<(Var, Vec<BatchStats>)> {
        if tape.shape(x).0 != self.dims.input_dim() {
            return Err(Error::Shape {
                op: "mlp input",
                left: tape.shape(x),
                right: (self.dims.input_dim(), 0),
            });
        }
        let mut stats = Vec::new();
        let mut h = x;
        for (block, v) in self.blocks.iter().zip(&vars.blocks) {
            let lin = tape.matmul(v[0], h)?;
            let lin = tape.add_bias(lin, v[1])?;
            let (aff, s) = block.bn_on_tape(tape, lin, v[2], v[3], bn, self.bn_eps)?;
            stats.extend(s);
            h = tape.ctanh(aff);
        }
        Ok((h, stats))
    }

    /// Merged head: features `D_P×(B·K)` to `B` precoders.
    pub fn head_on_tape(&self, tape: &mut Tape, vars: &ParamVars, features: Var) -> Result<Vec<Var>> {
        let (d, cols) = tape.shape(features);
        let k = self.dims.k;
        if d != self.dims.feature_dim() || cols % k != 0 {
            return Err(Error::Shape {
                op: "head input",
                left: (d, cols),
                right: (self.dims.feature_dim(), k),
            });
        }
        let batch = cols / k;
        let z = tape.reshape(features, k * d, batch)?;
        let lin = tape.matmul(vars.head[0], z)?;
        let lin = tape.add_bias(lin, vars.head[1])?;
        let scale = 1.0 / (self.dims.m as f64).sqrt();
        let cm = tape.cm_normalize(lin, self.head.eps_cm, scale);
        (0..batch)
            .map(|b| {
                let col = tape.slice(cm, 0..self.dims.m * self.dims.n_rf, b..b + 1)?;
                tape.reshape(col, self.dims.m, self.dims.n_rf)
            })
            .collect()
    }

    /// Batched forward on a tape. Channel inputs run the sensing bank with
    /// optional injected noise; measurement inputs skip it.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        input: NetworkInput<'_>,
        noise: Option<(f64, &mut Stream)>,
        bn: BnMode,
    ) -> Result<ForwardPass> {
        let (m, k, nk) = (self.dims.m, self.dims.k, self.dims.input_dim());
        if input.len() == 0 {
            return Err(Error::Domain("empty network batch".into()));
        }
        let x = match input {
            NetworkInput::Channels(hs) => {
                for h in hs {
                    if h.shape() != (m, k) {
                        return Err(Error::Shape {
                            op: "channel input",
                            left: h.shape(),
                            right: (m, k),
                        });
                    }
                }
                let parts: Vec<&ComplexMatrix> = hs.iter().collect();
                let h_all = tape.constant(ComplexMatrix::hstack(&parts));
                sensing_on_tape(tape, &vars.sensing, h_all, noise)?
            }
            NetworkInput::Measurements(ys) => {
                for y in ys {
                    if y.shape() != (nk, k) {
                        return Err(Error::Shape {
                            op: "measurement input",
                            left: y.shape(),
                            right: (nk, k),
                        });
                    }
                }
                let parts: Vec<&ComplexMatrix> = ys.iter().collect();
                tape.constant(ComplexMatrix::hstack(&parts))
            }
        };
        let bn_batch = tape.shape(x).1;
        let (features, bn_stats) = self.mlp_on_tape(tape, vars, x, bn)?;
        let precoders = self.head_on_tape(tape, vars, features)?;
        Ok(ForwardPass {
            precoders,
            features,
            bn_stats,
            bn_batch,
        })
    }

    /// Inference: channels in indirect mode, measurements in direct mode,
    /// no noise, running BN statistics.
    pub fn forward(&self, input: NetworkInput<'_>) -> Result<Vec<ComplexMatrix>> {
        match (self.mode, input) {
            (Mode::Indirect, NetworkInput::Channels(_)) | (Mode::Direct, NetworkInput::Measurements(_)) => {}
            (mode, _) => {
                return Err(Error::Domain(format!(
                    "{} network cannot take this input at inference",
                    mode.as_str()
                )))
            }
        }
        self.forward_unchecked(input)
    }

    /// Inference forward without the mode check.
    pub fn forward_unchecked(&self, input: NetworkInput<'_>) -> Result<Vec<ComplexMatrix>> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let pass = self.forward_on_tape(&mut tape, &vars, input, None, BnMode::Running)?;
        Ok(pass.precoders.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Shared-MLP features `D_P×K` for one channel, noise off, running BN.
    pub fn features(&self, h: &ComplexMatrix) -> Result<ComplexMatrix> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let pass = self.forward_on_tape(
            &mut tape,
            &vars,
            NetworkInput::Channels(std::slice::from_ref(h)),
            None,
            BnMode::Running,
        )?;
        Ok(tape.value(pass.features).clone())
    }

    /// Fold batch statistics from a training pass into the running averages.
    pub fn update_running(&mut self, pass: &ForwardPass) {
        let momentum = self.bn_momentum;
        for (block, s) in self.blocks.iter_mut().zip(&pass.bn_stats) {
            block.running.update(&s.mean, &s.cov, pass.bn_batch, momentum);
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut man = Manifest::new();
        man.push("format", CHECKPOINT_FORMAT);
        man.push("version", CHECKPOINT_VERSION);
        man.push("mode", self.mode.as_str());
        man.push("m", self.dims.m);
        man.push("k", self.dims.k);
        man.push("n_rf", self.dims.n_rf);
        man.push("n", self.dims.n);
        man.push(
            "hidden",
            self.dims.hidden.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
        );
        man.push("seed", self.seed);
        man.push("eps_cm", format!("{:e}", self.head.eps_cm));
        man.push("bn_eps", format!("{:e}", self.bn_eps));
        man.push("bn_momentum", self.bn_momentum);
        man.push("bn_inference", "running");
        let mut data = F64Writer::new();
        let names = self.names();
        for (name, t) in names.iter().zip(self.tensors()) {
            man.push(&format!("tensor.{name}"), format!("{}x{}", t.rows(), t.cols()));
            data.push_matrix(t);
        }
        for (p, b) in self.blocks.iter().enumerate() {
            man.push(&format!("running.block{p}"), b.running.mean.len());
            for (i, mean) in b.running.mean.iter().enumerate() {
                let (a, c, d) = b.running.cov[i];
                data.push_complex(*mean);
                data.push(a);
                data.push(c);
                data.push(d);
            }
        }
        write_store(dir, &man, &data)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (man, mut data) = read_store(dir)?;
        if man.get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a network checkpoint: {}", man.get("format")?)));
        }
        let version: u32 = man.parse("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        if man.get("bn_inference")? != "running" {
            return Err(Error::Format("unsupported batch-norm inference mode".into()));
        }
        let hidden = man
            .get("hidden")?
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| Error::Format(format!("hidden: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let dims = NetworkDims {
            m: man.parse("m")?,
            k: man.parse("k")?,
            n_rf: man.parse("n_rf")?,
            n: man.parse("n")?,
            hidden,
        };
        let mode: Mode = man.get("mode")?.parse()?;
        let mut params = Self::init(dims, mode, man.parse("seed")?)?;
        params.head.eps_cm = man.parse("eps_cm")?;
        params.bn_eps = man.parse("bn_eps")?;
        params.bn_momentum = man.parse("bn_momentum")?;
        let names = params.names();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let shape = man.get(&format!("tensor.{name}"))?;
            let expect = format!("{}x{}", t.rows(), t.cols());
            if shape != expect {
                return Err(Error::Format(format!("tensor {name} has shape {shape}, expected {expect}")));
            }
            *t = data.next_matrix(t.rows(), t.cols())?;
        }
        for (p, b) in params.blocks.iter_mut().enumerate() {
            let d: usize = man.parse(&format!("running.block{p}"))?;
            if d != b.running.mean.len() {
                return Err(Error::Format(format!("running stats for block {p} have length {d}")));
            }
            for i in 0..d {
                b.running.mean[i] = data.next_complex()?;
                b.running.cov[i] = (data.next()?, data.next()?, data.next()?);
            }
        }
        data.finish()?;
        Ok(params)
    }
}
