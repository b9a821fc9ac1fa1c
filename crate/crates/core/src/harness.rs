//! Experiment configuration, sweeps over one scenario axis, and the
//! interpretability probes (codebook correlation and feature PCA).
//!
//! Every CSV starts with a `# schema=1` line followed by a header row.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{generate_dataset, ArrayGeometry, Dataset, GeometryKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::network::{Mode, NetworkDims, NetworkInput, NetworkParams};
use crate::precoding::{fully_digital_mmse, projected_gradient_reference, ReferenceOptimizerConfig};
use crate::protocol::{evaluate_analog, random_cm_baseline, run_direct, run_indirect, ProtocolConfig};
use crate::rng::Stream;
use crate::tensor::linalg::hermitian_eig;
use crate::tensor::{ComplexMatrix, C64};
use crate::training::{fit, write_log_csv, FitResult, StopReason, TrainConfig};

pub const SCHEMA_LINE: &str = "# schema=1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Sensing slots.
    pub n: usize,
    pub hidden: Vec<usize>,
}

/// Scenario parameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    /// Total pilots `N + I` with `N` fixed; the sweep sets `I`.
    PilotBudget,
    Users,
    Paths,
    RMax,
    /// Square UPA side length.
    UpaSide,
    SensingSlots,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::PilotBudget => "pilot_budget",
            SweepAxis::Users => "users",
            SweepAxis::Paths => "paths",
            SweepAxis::RMax => "r_max",
            SweepAxis::UpaSide => "upa_side",
            SweepAxis::SensingSlots => "sensing_slots",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

fn default_mode() -> Mode {
    Mode::Indirect
}
fn one() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    pub network: NetworkSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub reference: ReferenceOptimizerConfig,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Samples generated per sweep point, split 70/15/15.
    pub dataset_size: usize,
    /// Cap on evaluated test samples; the whole test split when absent.
    #[serde(default)]
    pub eval_samples: Option<usize>,
    #[serde(default)]
    pub eval_seed: u64,
    /// Single point at the base scenario when absent.
    #[serde(default)]
    pub sweep: Option<Sweep>,
    #[serde(default = "one")]
    pub repetitions: usize,
    /// Evaluate sweep points in parallel; only with a supplied checkpoint.
    #[serde(default)]
    pub parallel_points: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        self.dims(&self.scenario).validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.dataset_size < 10 {
            return Err(Error::Config("dataset_size must be at least 10".into()));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            for &v in &sw.values {
                self.point(sw.axis, v)?;
            }
        }
        Ok(())
    }

    pub fn dims(&self, scenario: &ScenarioConfig) -> NetworkDims {
        NetworkDims {
            m: scenario.m,
            k: scenario.k,
            n_rf: scenario.n_rf,
            n: self.network.n,
            hidden: self.network.hidden.clone(),
        }
    }

    /// Scenario, sensing slots and protocol at one sweep value.
    pub fn point(&self, axis: SweepAxis, value: f64) -> Result<PointSetup> {
        let mut scenario = self.scenario.clone();
        let mut network = self.network.clone();
        let mut protocol = self.protocol.clone();
        let count = |v: f64| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} needs positive integers, got {v}", axis.name())))
            }
        };
        match axis {
            SweepAxis::SnrDb => scenario.snr_db = value,
            SweepAxis::PilotBudget => {
                let total = count(value)?;
                if total <= network.n {
                    return Err(Error::Config(format!(
                        "pilot budget {total} leaves no repetition block after {} sensing slots",
                        network.n
                    )));
                }
                protocol.repetitions = total - network.n;
            }
            SweepAxis::Users => scenario.k = count(value)?,
            SweepAxis::Paths => scenario.l = count(value)?,
            SweepAxis::RMax => scenario.r_max = value,
            SweepAxis::UpaSide => {
                let side = count(value)?;
                scenario.geometry = GeometryKind::Upa { my: side, mz: side };
                scenario.m = side * side;
            }
            SweepAxis::SensingSlots => network.n = count(value)?,
        }
        scenario.validate()?;
        protocol.validate()?;
        Ok(PointSetup {
            axis: axis.name(),
            value,
            scenario,
            network,
            protocol,
        })
    }

    fn points(&self) -> Result<Vec<PointSetup>> {
        match &self.sweep {
            None => Ok(vec![PointSetup {
                axis: "none",
                value: f64::NAN,
                scenario: self.scenario.clone(),
                network: self.network.clone(),
                protocol: self.protocol.clone(),
            }]),
            Some(sw) => sw.values.iter().map(|&v| self.point(sw.axis, v)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointSetup {
    pub axis: &'static str,
    pub value: f64,
    pub scenario: ScenarioConfig,
    pub network: NetworkSpec,
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Trained,
    RandomCm,
    PgReference,
    FullyDigital,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Trained, Method::RandomCm, Method::PgReference, Method::FullyDigital];

    pub fn name(self) -> &'static str {
        match self {
            Method::Trained => "trained",
            Method::RandomCm => "random_cm",
            Method::PgReference => "pg_reference",
            Method::FullyDigital => "fully_digital",
        }
    }
}

/// Mean and standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self { mean, se: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }
}

/// Per-sample evaluation of one method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub sum_rate: f64,
    pub sum_mse: f64,
    pub micros: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub point: usize,
    pub axis: String,
    pub value: f64,
    pub rep: usize,
    pub method: Method,
    /// `ok` or `failed`.
    pub status: String,
    pub samples: usize,
    pub sum_rate: Stat,
    pub per_user_rate: Stat,
    pub sum_mse_db: Stat,
    pub infer_us: Stat,
    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl ResultRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

pub const RESULT_HEADER: &str = "point,axis,value,rep,method,status,samples,sum_rate_mean,sum_rate_se,per_user_rate_mean,per_user_rate_se,sum_mse_db_mean,sum_mse_db_se,infer_us_mean,infer_us_se,data_seed,train_seed,eval_seed";

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SCHEMA_LINE);
    out.push('\n');
    out.push_str(RESULT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.point,
            r.axis,
            r.value,
            r.rep,
            r.method.name(),
            r.status,
            r.samples,
            r.sum_rate.mean,
            r.sum_rate.se,
            r.per_user_rate.mean,
            r.per_user_rate.se,
            r.sum_mse_db.mean,
            r.sum_mse_db.se,
            r.infer_us.mean,
            r.infer_us.se,
            r.data_seed,
            r.train_seed,
            r.eval_seed
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64() * 1e6))
}

/// Score one method on every channel; samples run in parallel with
/// substreams indexed by sample.
pub fn evaluate_method(
    method: Method,
    channels: &[ComplexMatrix],
    scenario: &ScenarioConfig,
    params: Option<&NetworkParams>,
    protocol: &ProtocolConfig,
    reference: &ReferenceOptimizerConfig,
    eval_seed: u64,
) -> Result<Vec<SampleScore>> {
    let sigma2 = scenario.noise_variance();
    channels
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let idx = i as u64;
            let (m, micros) = match method {
                Method::Trained => {
                    let p = params.ok_or_else(|| Error::Domain("trained method needs parameters".into()))?;
                    match p.mode {
                        Mode::Indirect => timed(|| run_indirect(h, p, scenario).map(|o| o.metrics))?,
                        Mode::Direct => {
                            let mut s = Stream::new(eval_seed, "eval/direct", idx);
                            timed(|| run_direct(h, p, protocol, scenario, &mut s).map(|t| t.metrics))?
                        }
                    }
                }
                Method::RandomCm => {
                    let mut s = Stream::new(eval_seed, "eval/random_cm", idx);
                    timed(|| random_cm_baseline(h, scenario, &mut s).map(|o| o.metrics))?
                }
                Method::PgReference => {
                    let mut s = Stream::new(eval_seed, "eval/pg_reference", idx);
                    timed(|| {
                        let r = projected_gradient_reference(h, scenario.n_rf, reference, scenario.p_t, sigma2, &mut s)?;
                        evaluate_analog(h, r.f_rf, scenario).map(|o| o.metrics)
                    })?
                }
                Method::FullyDigital => {
                    let ((rate, mse), micros) = timed(|| {
                        let fd = fully_digital_mmse(h, scenario.p_t, sigma2)?;
                        Ok((fd.sinr_and_sum_rate(h, sigma2).1, fd.sum_mse(h, sigma2)))
                    })?;
                    return Ok(SampleScore {
                        sum_rate: rate,
                        sum_mse: mse,
                        micros,
                    });
                }
            };
            Ok(SampleScore {
                sum_rate: m.sum_rate,
                sum_mse: m.sum_mse,
                micros,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e: Error| e.at_stage(method.name()))
}

/// Test channels of a dataset, capped at `limit`.
pub fn test_channels(data: &Dataset, limit: Option<usize>) -> Vec<ComplexMatrix> {
    let n = limit.unwrap_or(usize::MAX).min(data.test.samples.len());
    data.test.samples[..n].iter().map(|s| s.h.clone()).collect()
}

fn summarize(
    scores: &[SampleScore],
    k: usize,
) -> (usize, Stat, Stat, Stat, Stat) {
    let rates: Vec<f64> = scores.iter().map(|s| s.sum_rate).collect();
    let per_user: Vec<f64> = rates.iter().map(|r| r / k as f64).collect();
    let mse_db: Vec<f64> = scores.iter().map(|s| 10.0 * s.sum_mse.log10()).collect();
    let us: Vec<f64> = scores.iter().map(|s| s.micros).collect();
    (scores.len(), Stat::of(&rates), Stat::of(&per_user), Stat::of(&mse_db), Stat::of(&us))
}

/// Outcome of one repetition at one sweep point.
pub struct PointRun {
    pub rows: Vec<ResultRow>,
    pub fit: Option<FitResult>,
}

/// Train (unless `checkpoint` is given) and evaluate every method at one
/// sweep point and repetition.
pub fn run_point(
    spec: &ExperimentSpec,
    setup: &PointSetup,
    point: usize,
    rep: usize,
    checkpoint: Option<&NetworkParams>,
) -> Result<PointRun> {
    let mut scenario = setup.scenario.clone();
    scenario.seed = spec.scenario.seed.wrapping_add(rep as u64);
    let mut train = spec.train.clone();
    train.seed = spec.train.seed.wrapping_add(rep as u64);
    let eval_seed = spec.eval_seed.wrapping_add(rep as u64);
    let data = generate_dataset(&scenario, spec.dataset_size).map_err(|e| e.at_stage("dataset"))?;
    let dims = NetworkDims {
        m: scenario.m,
        k: scenario.k,
        n_rf: scenario.n_rf,
        n: setup.network.n,
        hidden: setup.network.hidden.clone(),
    };
    let (params, fit_result, failure) = match checkpoint {
        Some(p) => {
            if p.dims != dims {
                return Err(Error::Config(format!(
                    "checkpoint dims {:?} do not match the experiment {:?}",
                    p.dims, dims
                )));
            }
            (Some(p.clone()), None, None)
        }
        None => {
            let res = fit(spec.mode, &dims, &data, &train, &setup.protocol).map_err(|e| e.at_stage("train"))?;
            let failure = match &res.stop {
                StopReason::Diverged { reason, .. } => Some(reason.clone()),
                _ => None,
            };
            (Some(res.params.clone()), Some(res), failure)
        }
    };
    let channels = test_channels(&data, spec.eval_samples);
    let mut rows = Vec::with_capacity(Method::ALL.len());
    for method in Method::ALL {
        let nan = Stat {
            mean: f64::NAN,
            se: f64::NAN,
        };
        let mut row = ResultRow {
            point,
            axis: setup.axis.to_string(),
            value: setup.value,
            rep,
            method,
            status: "ok".into(),
            samples: 0,
            sum_rate: nan,
            per_user_rate: nan,
            sum_mse_db: nan,
            infer_us: nan,
            data_seed: scenario.seed,
            train_seed: train.seed,
            eval_seed,
        };
        if method == Method::Trained && failure.is_some() {
            row.status = "failed".into();
            rows.push(row);
            continue;
        }
        match evaluate_method(
            method,
            &channels,
            &scenario,
            params.as_ref(),
            &setup.protocol,
            &spec.reference,
            eval_seed,
        ) {
            Ok(scores) => {
                let (n, rate, pu, mse, us) = summarize(&scores, scenario.k);
                row.samples = n;
                row.sum_rate = rate;
                row.per_user_rate = pu;
                row.sum_mse_db = mse;
                row.infer_us = us;
            }
            Err(_) => row.status = "failed".into(),
        }
        rows.push(row);
    }
    Ok(PointRun { rows, fit: fit_result })
}

#[derive(Debug)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub files: Vec<PathBuf>,
}

/// Run every sweep point and repetition, writing `point_XXX.csv` per point,
/// a training log per trained model, and a combined `results.csv`.
pub fn run_experiment(spec: &ExperimentSpec, checkpoint: Option<&NetworkParams>) -> Result<ExperimentReport> {
    spec.validate()?;
    let points = spec.points()?;
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir)?;
    let run_one = |(j, setup): (usize, &PointSetup)| -> Result<(Vec<ResultRow>, Vec<PathBuf>)> {
        let mut rows = Vec::new();
        let mut files = Vec::new();
        for rep in 0..spec.repetitions {
            let run = run_point(spec, setup, j, rep, checkpoint)?;
            if let Some(fit) = &run.fit {
                let path = dir.join(format!("train_point{j:03}_rep{rep:02}.csv"));
                write_log_csv(&path, &fit.log)?;
                files.push(path);
            }
            rows.extend(run.rows);
        }
        let path = dir.join(format!("point_{j:03}.csv"));
        write_results_csv(&path, &rows)?;
        files.push(path);
        Ok((rows, files))
    };
    let results: Vec<(Vec<ResultRow>, Vec<PathBuf>)> = if spec.parallel_points && checkpoint.is_some() {
        points.par_iter().enumerate().map(run_one).collect::<Result<_>>()?
    } else {
        points.iter().enumerate().map(run_one).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for (r, f) in results {
        rows.extend(r);
        files.extend(f);
    }
    let summary = dir.join("results.csv");
    write_results_csv(&summary, &rows)?;
    files.push(summary);
    Ok(ExperimentReport { rows, files })
}

/// What the beam analysis correlates against the codebook.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BeamTarget {
    /// Row `row` of sensing kernel `slot`; the beam is its conjugate.
    SensingKernel { slot: usize, row: usize },
    /// Column `column` of the analog precoder produced for test sample `sample`.
    PrecoderColumn { sample: usize, column: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamAnalysisSpec {
    pub theta_count: usize,
    #[serde(default = "default_r_lo")]
    pub r_lo: f64,
    #[serde(default = "default_r_hi")]
    pub r_hi: f64,
    pub r_count: usize,
    pub target: BeamTarget,
}

fn default_r_lo() -> f64 {
    5.0
}
fn default_r_hi() -> f64 {
    40.0
}

impl BeamAnalysisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.theta_count < 2 || self.r_count < 2 {
            return Err(Error::Config("beam grid needs at least 2 points per axis".into()));
        }
        if !(self.r_lo > 0.0 && self.r_hi > self.r_lo) {
            return Err(Error::Config(format!("bad range grid [{}, {}]", self.r_lo, self.r_hi)));
        }
        Ok(())
    }

    pub fn thetas(&self) -> Vec<f64> {
        linspace(-1.0, 1.0, self.theta_count)
    }

    pub fn ranges(&self) -> Vec<f64> {
        linspace(self.r_lo, self.r_hi, self.r_count)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Codebook correlation of one beam.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamAnalysis {
    pub thetas: Vec<f64>,
    pub ranges: Vec<f64>,
    /// `heatmap[r][θ] = |b(θ, r)ᴴ v| / ‖v‖`.
    pub heatmap: Vec<Vec<f64>>,
    /// Mean over θ for each range, scaled to peak 1.
    pub range_marginal: Vec<f64>,
}

impl BeamAnalysis {
    /// Grid indices `(r, θ)` of the largest heatmap value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for (i, row) in self.heatmap.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        (best.0, best.1)
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut heat = format!("{SCHEMA_LINE}\ntheta,r,value\n");
        for (i, r) in self.ranges.iter().enumerate() {
            for (j, t) in self.thetas.iter().enumerate() {
                let _ = writeln!(heat, "{t},{r},{}", self.heatmap[i][j]);
            }
        }
        std::fs::write(dir.join("heatmap.csv"), heat)?;
        let mut marg = format!("{SCHEMA_LINE}\nr,value\n");
        for (r, v) in self.ranges.iter().zip(&self.range_marginal) {
            let _ = writeln!(marg, "{r},{v}");
        }
        std::fs::write(dir.join("range_marginal.csv"), marg)?;
        Ok(())
    }
}

/// Correlate `v` with the spherical-wave codebook on the analysis grid.
pub fn analyze_beams(spec: &BeamAnalysisSpec, geometry: &ArrayGeometry, v: &ComplexMatrix) -> Result<BeamAnalysis> {
    spec.validate()?;
    if v.shape() != (geometry.num_elements(), 1) {
        return Err(Error::Shape {
            op: "beam target",
            left: v.shape(),
            right: (geometry.num_elements(), 1),
        });
    }
    let norm = v.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::Domain("beam target is zero".into()));
    }
    let thetas = spec.thetas();
    let ranges = spec.ranges();
    let heatmap: Vec<Vec<f64>> = ranges
        .par_iter()
        .map(|&r| {
            thetas
                .iter()
                .map(|&t| Ok(geometry.array_response(t, r)?.adjoint_matmul(v)[(0, 0)].norm() / norm))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let means: Vec<f64> = heatmap.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect();
    let peak = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range_marginal = means.iter().map(|m| if peak > 0.0 { m / peak } else { 0.0 }).collect();
    Ok(BeamAnalysis {
        thetas,
        ranges,
        heatmap,
        range_marginal,
    })
}

/// Resolve a beam target to a length-`M` vector.
pub fn beam_vector(target: &BeamTarget, params: &NetworkParams, test: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    match *target {
        BeamTarget::SensingKernel { slot, row } => {
            let k = params
                .sensing
                .kernels
                .get(slot)
                .ok_or_else(|| Error::Config(format!("no sensing slot {slot}")))?;
            if row >= k.rows() {
                return Err(Error::Config(format!("sensing slot has {} rows, asked for {row}", k.rows())));
            }
            Ok(k.slice(row..row + 1, 0..k.cols()).adjoint())
        }
        BeamTarget::PrecoderColumn { sample, column } => {
            let h = test
                .get(sample)
                .ok_or_else(|| Error::Config(format!("no test sample {sample}")))?;
            if column >= params.dims.n_rf {
                return Err(Error::Config(format!("precoder has {} columns", params.dims.n_rf)));
            }
            let f = params.forward_unchecked(NetworkInput::Channels(std::slice::from_ref(h)))?.remove(0);
            Ok(f.column_matrix(column))
        }
    }
}

/// Complex PCA of `D×n` samples (one per column).
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Descending, clamped at zero.
    pub variances: Vec<f64>,
    pub explained: Vec<f64>,
    /// Principal directions as columns, matching `variances`.
    pub components: ComplexMatrix,
    /// `components[:, i]ᴴ (x − μ)` per sample, `D×n`.
    pub projections: ComplexMatrix,
}

pub fn complex_pca(samples: &ComplexMatrix) -> Result<Pca> {
    let (d, n) = samples.shape();
    if n < 2 {
        return Err(Error::Domain(format!("PCA needs at least 2 samples, got {n}")));
    }
    let mean: Vec<C64> = (0..d).map(|i| samples.row(i).iter().sum::<C64>() / n as f64).collect();
    let centred = ComplexMatrix::from_fn(d, n, |i, j| samples[(i, j)] - mean[i]);
    let cov = centred.matmul_adjoint(&centred).scale_real(1.0 / n as f64).hermitian_part();
    let eig = hermitian_eig(&cov)?;
    let order: Vec<usize> = (0..d).rev().collect();
    let variances: Vec<f64> = order.iter().map(|&i| eig.values[i].max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    let explained = variances
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    let components = ComplexMatrix::from_fn(d, d, |i, j| eig.vectors[(i, order[j])]);
    let projections = components.adjoint_matmul(&centred);
    Ok(Pca {
        variances,
        explained,
        components,
        projections,
    })
}

/// Single-path probe: every user sees `√M·b(θ, r)` with unit gain while `r`
/// sweeps a range at fixed angle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaProbe {
    #[serde(default)]
    pub theta: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePca {
    pub ranges: Vec<f64>,
    pub pca: Pca,
}

impl FeaturePca {
    pub fn pc1(&self) -> Vec<C64> {
        self.pca.projections.row(0).to_vec()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = format!("{SCHEMA_LINE}\nr,pc1_re,pc1_im,pc1_phase,pc1_mag,pc2_mag\n");
        let p = &self.pca.projections;
        for (j, r) in self.ranges.iter().enumerate() {
            let z = p[(0, j)];
            let pc2 = if p.rows() > 1 { p[(1, j)].norm() } else { 0.0 };
            let _ = writeln!(out, "{r},{},{},{},{},{pc2}", z.re, z.im, z.arg(), z.norm());
        }
        std::fs::write(path, out)?;
        let mut ev = format!("{SCHEMA_LINE}\ncomponent,variance,explained\n");
        for (i, (v, e)) in self.pca.variances.iter().zip(&self.pca.explained).enumerate() {
            let _ = writeln!(ev, "{},{v},{e}", i + 1);
        }
        std::fs::write(path.with_file_name("explained_variance.csv"), ev)?;
        Ok(())
    }
}

/// PCA of the shared-MLP output for user 0 along the probe sweep.
pub fn feature_pca(params: &NetworkParams, geometry: &ArrayGeometry, probe: &PcaProbe) -> Result<FeaturePca> {
    if probe.count < 2 {
        return Err(Error::Domain(format!("probe needs at least 2 samples, got {}", probe.count)));
    }
    if !(probe.r_lo > 0.0 && probe.r_hi >= probe.r_lo) {
        return Err(Error::Config(format!("bad probe range [{}, {}]", probe.r_lo, probe.r_hi)));
    }
    let m = geometry.num_elements();
    if m != params.dims.m {
        return Err(Error::Config(format!("geometry has {m} elements, network expects {}", params.dims.m)));
    }
    let ranges = linspace(probe.r_lo, probe.r_hi, probe.count);
    let cols: Vec<ComplexMatrix> = ranges
        .par_iter()
        .map(|&r| {
            let b = geometry.array_response(probe.theta, r)?.scale_real((m as f64).sqrt());
            let h = ComplexMatrix::from_fn(m, params.dims.k, |i, _| b[(i, 0)]);
            Ok(params.features(&h)?.column_matrix(0))
        })
        .collect::<Result<_>>()?;
    let samples = ComplexMatrix::hstack(&cols.iter().collect::<Vec<_>>());
    Ok(FeaturePca {
        ranges,
        pca: complex_pca(&samples)?,
    })
}
