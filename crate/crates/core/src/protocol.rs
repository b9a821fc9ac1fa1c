//! End-to-end beamforming protocols.
//!
//! The indirect protocol feeds the true channel to the network and solves the
//! digital stage in closed form. The direct protocol simulates the uplink:
//! `N` TDMA sensing slots through the learned combiners, inference on those
//! measurements alone, `I` repetition blocks through the chosen analog
//! combiner to estimate the effective channel, and the digital stage from
//! that estimate. Metrics are always computed against the true channel.

use std::time::Instant;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::channel::ScenarioConfig;
use crate::error::{Error, Result};
use crate::io::encode_f64s;
use crate::network::{NetworkInput, NetworkParams};
use crate::precoding::{
    digital_from_effective, estimate_effective_channel, kkt_digital, random_constant_modulus, sinr_and_sum_rate,
    sum_mse, DigitalPrecoder,
};
use crate::rng::Stream;
use crate::tensor::ComplexMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Repetition blocks `I` used to estimate the effective channel.
    pub repetitions: usize,
    /// Diagonal loading added to the digital Gram matrix.
    #[serde(default)]
    pub damping: f64,
    /// Uplink noise variance; the downlink value from the scenario when absent.
    #[serde(default)]
    pub uplink_noise_variance: Option<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            repetitions: 2,
            damping: 0.0,
            uplink_noise_variance: None,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::Config(format!("damping must be ≥ 0, got {}", self.damping)));
        }
        if let Some(v) = self.uplink_noise_variance {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("uplink noise variance must be ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn uplink_noise(&self, scenario: &ScenarioConfig) -> f64 {
        self.uplink_noise_variance.unwrap_or_else(|| scenario.noise_variance())
    }
}

/// Downlink metrics of a hybrid precoder on the true channel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub sinr: Vec<f64>,
    pub sum_rate: f64,
    pub sum_mse: f64,
    pub sum_mse_db: f64,
}

impl Metrics {
    pub fn evaluate(h: &ComplexMatrix, f_rf: &ComplexMatrix, digital: &DigitalPrecoder, sigma2: f64) -> Self {
        let (sinr, sum_rate) = sinr_and_sum_rate(h, f_rf, &digital.f_bb, sigma2);
        let mse = sum_mse(h, f_rf, &digital.f_bb, digital.beta, sigma2);
        Self {
            sinr,
            sum_rate,
            sum_mse: mse,
            sum_mse_db: 10.0 * mse.log10(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HybridOutcome {
    pub f_rf: ComplexMatrix,
    pub digital: DigitalPrecoder,
    pub metrics: Metrics,
}

/// KKT digital stage plus metrics for a given analog precoder.
pub fn evaluate_analog(h: &ComplexMatrix, f_rf: ComplexMatrix, scenario: &ScenarioConfig) -> Result<HybridOutcome> {
    let sigma2 = scenario.noise_variance();
    let digital = kkt_digital(h, &f_rf, scenario.p_t, sigma2)?;
    let metrics = Metrics::evaluate(h, &f_rf, &digital, sigma2);
    Ok(HybridOutcome { f_rf, digital, metrics })
}

/// Indirect protocol on a batch of channels, noise off.
pub fn run_indirect_batch(
    hs: &[ComplexMatrix],
    params: &NetworkParams,
    scenario: &ScenarioConfig,
) -> Result<Vec<HybridOutcome>> {
    let f = params
        .forward_unchecked(NetworkInput::Channels(hs))
        .map_err(|e| e.at_stage("inference"))?;
    hs.iter()
        .zip(f)
        .enumerate()
        .map(|(i, (h, f_rf))| evaluate_analog(h, f_rf, scenario).map_err(|e| e.at_sample(i).at_stage("precoding")))
        .collect()
}

pub fn run_indirect(h: &ComplexMatrix, params: &NetworkParams, scenario: &ScenarioConfig) -> Result<HybridOutcome> {
    let mut out = run_indirect_batch(std::slice::from_ref(h), params, scenario)?;
    Ok(out.remove(0))
}

/// Uniform random phases at modulus `1/√M`, then the KKT digital stage.
pub fn random_cm_baseline(h: &ComplexMatrix, scenario: &ScenarioConfig, stream: &mut Stream) -> Result<HybridOutcome> {
    let f_rf = random_constant_modulus(h.rows(), scenario.n_rf, stream);
    evaluate_analog(h, f_rf, scenario)
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: &'static str,
    pub micros: u128,
}

pub const STAGES: [&str; 4] = ["sensing", "inference", "estimation", "precoding"];

/// Everything the direct protocol produced.
#[derive(Clone, Debug)]
pub struct ProtocolTrace {
    /// `NK×K` sensing measurements.
    pub y_ul: ComplexMatrix,
    pub f_rf: ComplexMatrix,
    /// `K×N_RF` estimate of `HᴴF_RF`.
    pub h_eq: ComplexMatrix,
    pub digital: DigitalPrecoder,
    pub timings: Vec<StageTiming>,
    pub metrics: Metrics,
    pub sensing_slots: usize,
    pub repetitions: usize,
}

impl ProtocolTrace {
    /// Pilot units spent: one per sensing slot and one per repetition block.
    pub fn pilot_count(&self) -> usize {
        self.sensing_slots + self.repetitions
    }

    /// JSON summary; matrices are embedded as base64 little-endian
    /// interleaved `(re, im)` doubles when requested.
    pub fn to_json(&self, include_matrices: bool) -> Value {
        let mat = |name: &str, m: &ComplexMatrix| {
            let mut v = json!({ "name": name, "rows": m.rows(), "cols": m.cols() });
            if include_matrices {
                let flat: Vec<f64> = m.data().iter().flat_map(|z| [z.re, z.im]).collect();
                v["data_base64"] = Value::String(base64::engine::general_purpose::STANDARD.encode(encode_f64s(&flat)));
            }
            v
        };
        let outputs = [
            vec![mat("y_ul", &self.y_ul)],
            vec![mat("f_rf", &self.f_rf)],
            vec![mat("h_eq", &self.h_eq)],
            vec![mat("f_bb", &self.digital.f_bb)],
        ];
        let stages: Vec<Value> = self
            .timings
            .iter()
            .zip(outputs)
            .map(|(t, out)| json!({ "stage": t.stage, "micros": t.micros as u64, "outputs": out }))
            .collect();
        json!({
            "stages": stages,
            "beta": self.digital.beta,
            "pilots": { "sensing_slots": self.sensing_slots, "repetitions": self.repetitions, "total": self.pilot_count() },
            "metrics": self.metrics,
        })
    }
}

/// Uplink repetition blocks through the combiner `F_RFᴴ`: each block is
/// `F_RFᴴ(H + V)` with fresh noise.
pub fn repetition_blocks(
    h: &ComplexMatrix,
    f_rf: &ComplexMatrix,
    repetitions: usize,
    noise_variance: f64,
    stream: &mut Stream,
) -> Vec<ComplexMatrix> {
    (0..repetitions)
        .map(|_| {
            if noise_variance > 0.0 {
                let v = stream.complex_normal_matrix(h.rows(), h.cols(), noise_variance);
                f_rf.adjoint_matmul(&(h + &v))
            } else {
                f_rf.adjoint_matmul(h)
            }
        })
        .collect()
}

/// Direct protocol. `h_true` only synthesizes the over-the-air signals and
/// scores the result; the network sees the measurements alone.
pub fn run_direct(
    h_true: &ComplexMatrix,
    params: &NetworkParams,
    protocol: &ProtocolConfig,
    scenario: &ScenarioConfig,
    stream: &mut Stream,
) -> Result<ProtocolTrace> {
    protocol.validate()?;
    let sigma2 = scenario.noise_variance();
    let ul = protocol.uplink_noise(scenario);
    let mut timings = Vec::with_capacity(STAGES.len());
    let mut clock = Instant::now();
    let mut lap = |stage: &'static str, timings: &mut Vec<StageTiming>| {
        timings.push(StageTiming {
            stage,
            micros: clock.elapsed().as_micros(),
        });
        clock = Instant::now();
    };

    let y_ul = params
        .sensing
        .measure(h_true, Some((ul, stream)))
        .map_err(|e| e.at_stage("sensing"))?;
    lap("sensing", &mut timings);

    let f_rf = params
        .forward_unchecked(NetworkInput::Measurements(std::slice::from_ref(&y_ul)))
        .map_err(|e| e.at_stage("inference"))?
        .remove(0);
    lap("inference", &mut timings);

    let blocks = repetition_blocks(h_true, &f_rf, protocol.repetitions, ul, stream);
    let est = estimate_effective_channel(&blocks).map_err(|e| e.at_stage("estimation"))?;
    lap("estimation", &mut timings);

    let digital = digital_from_effective(&est, &f_rf, scenario.p_t, sigma2, protocol.damping)
        .map_err(|e| e.at_stage("precoding"))?;
    lap("precoding", &mut timings);

    let metrics = Metrics::evaluate(h_true, &f_rf, &digital, sigma2);
    Ok(ProtocolTrace {
        y_ul,
        f_rf,
        h_eq: est.h_eq,
        digital,
        timings,
        metrics,
        sensing_slots: params.dims.n,
        repetitions: protocol.repetitions,
    })
}
